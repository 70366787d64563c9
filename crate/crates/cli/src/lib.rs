//! Experiment orchestration behind the `csa-ts` binary: config resolution,
//! seeded training runs, comparison reports, and result files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use csa_core::csa::AttnUpdate;
use csa_core::data::{self, TsDataset};
use csa_core::error::{Error, Result};
use csa_core::eval::{
    accuracy_improvement, chi_square_test, mean_accuracy, pooled_contingency,
    significance_verdict, RunRecord, Verdict,
};
use csa_core::model::{BackboneConfig, FcnCsaModel, ModelVariant};
use csa_core::trainer::{self, TrainSettings};

pub const DEFAULT_EPOCHS: usize = 400;
pub const DEFAULT_BATCH: usize = 16;
pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_FA: usize = 64;
pub const SIGNIFICANCE_THRESHOLD: f64 = 0.05;

/// A fully resolved experiment.
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentConfig {
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    pub variant: ModelVariant,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub f_a: usize,
    pub seeds: Vec<u64>,
    pub znorm: bool,
    pub attn_update: AttnUpdate,
    pub out_dir: PathBuf,
}

/// Unresolved command-line/flag values; `None` falls back to the config
/// file and then to the defaults. Flags win over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub variant: Option<String>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub f_a: Option<usize>,
    pub seeds: Option<String>,
    pub no_znorm: bool,
    pub attn_update: Option<String>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Merge a key=value config file (optional) with flag overrides.
    pub fn resolve(config_file: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let file = match config_file {
            Some(p) => parse_config_file(p)?,
            None => BTreeMap::new(),
        };
        let get = |key: &str| file.get(key).map(String::as_str);

        let train_path = flags
            .train
            .clone()
            .or_else(|| get("train").map(PathBuf::from))
            .ok_or_else(|| Error::Config("missing --train dataset path".into()))?;
        let test_path = flags
            .test
            .clone()
            .or_else(|| get("test").map(PathBuf::from))
            .ok_or_else(|| Error::Config("missing --test dataset path".into()))?;
        let variant: ModelVariant = flags
            .variant
            .as_deref()
            .or_else(|| get("variant"))
            .unwrap_or("csa")
            .parse()?;
        let epochs = parse_or(flags.epochs, get("epochs"), DEFAULT_EPOCHS, "epochs")?;
        let batch_size = parse_or(
            flags.batch_size,
            get("batch-size"),
            DEFAULT_BATCH,
            "batch-size",
        )?;
        let lr = parse_or(flags.lr, get("lr"), DEFAULT_LR, "lr")?;
        let f_a = parse_or(flags.f_a, get("fa"), DEFAULT_FA, "fa")?;
        let seeds_text = flags
            .seeds
            .clone()
            .or_else(|| get("seeds").map(str::to_string))
            .unwrap_or_else(|| "0,1,2,3,4".into());
        let seeds = parse_seed_list(&seeds_text)?;
        let znorm = if flags.no_znorm {
            false
        } else {
            match get("znorm") {
                Some(v) => parse_bool(v, "znorm")?,
                None => true,
            }
        };
        let attn_update = match flags.attn_update.as_deref().or_else(|| get("attn-update")) {
            None | Some("latest") => AttnUpdate::Latest,
            Some("ema") => AttnUpdate::Ema {
                decay: AttnUpdate::DEFAULT_EMA_DECAY,
            },
            Some(other) => {
                return Err(Error::Config(format!(
                    "unknown attention update policy '{other}' (expected latest|ema)"
                )))
            }
        };
        let out_dir = flags
            .out
            .clone()
            .or_else(|| get("out").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("results"));

        let cfg = Self {
            train_path,
            test_path,
            variant,
            epochs,
            batch_size,
            lr,
            f_a,
            seeds,
            znorm,
            attn_update,
            out_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.f_a == 0 {
            return Err(Error::Config("fa must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn train_settings(&self, seed: u64) -> TrainSettings {
        TrainSettings {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
            f_a: self.f_a,
            attn_update: self.attn_update,
            backbone: BackboneConfig::default(),
        }
    }
}

fn parse_or<V: std::str::FromStr>(
    flag: Option<V>,
    file: Option<&str>,
    default: V,
    key: &str,
) -> Result<V> {
    if let Some(v) = flag {
        return Ok(v);
    }
    match file {
        Some(text) => text
            .parse()
            .map_err(|_| Error::Config(format!("bad value '{text}' for {key}"))),
        None => Ok(default),
    }
}

fn parse_bool(text: &str, key: &str) -> Result<bool> {
    match text {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("bad boolean '{other}' for {key}"))),
    }
}

pub fn parse_seed_list(text: &str) -> Result<Vec<u64>> {
    let seeds = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u64>()
                .map_err(|_| Error::Config(format!("bad seed '{s}'")))
        })
        .collect::<Result<Vec<u64>>>()?;
    if seeds.is_empty() {
        return Err(Error::Config("seed list is empty".into()));
    }
    Ok(seeds)
}

/// `key=value` per line; blank lines and `#` comments ignored.
pub fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("expected key=value, got '{line}'"),
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

/// Load a `.ts` or `.csv` dataset, optionally z-normalised.
pub fn load_dataset(path: &Path, znorm: bool) -> Result<TsDataset<f32>> {
    let text = fs::read_to_string(path)?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    let ds = match ext.as_str() {
        "csv" => data::parse_csv::<f32>(&text, &name)?,
        _ => data::parse_ts::<f32>(&text)?,
    };
    Ok(if znorm { data::znormalize(&ds) } else { ds })
}

/// One trained seed.
pub struct SeedRun {
    pub record: RunRecord,
    pub model: FcnCsaModel<f32>,
}

/// Train and evaluate every (variant, seed) job. Jobs run in parallel;
/// each is internally deterministic, and the output order is fixed.
pub fn run_matrix(
    cfg: &ExperimentConfig,
    variants: &[ModelVariant],
    train: &TsDataset<f32>,
    test: &TsDataset<f32>,
) -> Result<Vec<SeedRun>> {
    let jobs: Vec<(ModelVariant, u64)> = variants
        .iter()
        .flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    jobs.into_par_iter()
        .map(|(variant, seed)| {
            let started = Instant::now();
            let outcome = trainer::train(variant, train, &cfg.train_settings(seed))?;
            let (predictions, acc) = trainer::evaluate(&outcome.model, test)?;
            Ok(SeedRun {
                record: RunRecord {
                    dataset: train.name.clone(),
                    variant,
                    seed,
                    accuracy: acc,
                    epochs: cfg.epochs,
                    wall_ms: started.elapsed().as_millis() as u64,
                    predictions,
                },
                model: outcome.model,
            })
        })
        .collect()
}

/// On-disk run record: exactly {dataset, variant, seed, accuracy, epochs,
/// wall_ms}.
#[derive(Serialize)]
struct FileRecord<'a> {
    dataset: &'a str,
    variant: ModelVariant,
    seed: u64,
    accuracy: f64,
    epochs: usize,
    wall_ms: u64,
}

/// Serialise runs as JSON lines, sorted by (variant, seed).
pub fn runs_jsonl(runs: &[SeedRun]) -> String {
    let mut ordered: Vec<&SeedRun> = runs.iter().collect();
    ordered.sort_by_key(|r| (r.record.variant.as_str(), r.record.seed));
    let mut out = String::new();
    for run in ordered {
        let rec = FileRecord {
            dataset: &run.record.dataset,
            variant: run.record.variant,
            seed: run.record.seed,
            accuracy: run.record.accuracy,
            epochs: run.record.epochs,
            wall_ms: run.record.wall_ms,
        };
        out.push_str(&serde_json::to_string(&rec).expect("serializable record"));
        out.push('\n');
    }
    out
}

/// Zero out the `wall_ms` timing field of a runs file so two runs of the
/// same config can be compared byte for byte.
pub fn strip_timing(jsonl: &str) -> String {
    let mut out = String::new();
    for line in jsonl.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let mut v: serde_json::Value = serde_json::from_str(line).expect("valid jsonl");
        if let Some(w) = v.get_mut("wall_ms") {
            *w = serde_json::Value::from(0u64);
        }
        out.push_str(&serde_json::to_string(&v).expect("serializable"));
        out.push('\n');
    }
    out
}

/// Two-variant comparison: aggregate accuracies, relative improvement,
/// pooled chi-square, verdict.
#[derive(Clone, Debug, Serialize)]
pub struct ComparisonReport {
    pub dataset: String,
    pub variant_a: ModelVariant,
    pub variant_b: ModelVariant,
    pub mean_accuracy_a: f64,
    pub mean_accuracy_b: f64,
    pub ai_percent: f64,
    pub chi_square_statistic: f64,
    pub p_value: f64,
    pub verdict: Verdict,
    pub per_seed_a: Vec<f64>,
    pub per_seed_b: Vec<f64>,
}

/// Build the comparison of `variant_a` over `variant_b` from a run matrix.
pub fn compare_runs(
    runs: &[SeedRun],
    variant_a: ModelVariant,
    variant_b: ModelVariant,
    test_labels: &[usize],
) -> Result<ComparisonReport> {
    let group = |v: ModelVariant| -> Vec<RunRecord> {
        let mut rs: Vec<RunRecord> = runs
            .iter()
            .filter(|r| r.record.variant == v)
            .map(|r| r.record.clone())
            .collect();
        rs.sort_by_key(|r| r.seed);
        rs
    };
    let runs_a = group(variant_a);
    let runs_b = group(variant_b);
    if runs_a.is_empty() || runs_b.is_empty() {
        return Err(Error::Contract(
            "comparison needs runs for both variants".into(),
        ));
    }
    let mean_a = mean_accuracy(&runs_a);
    let mean_b = mean_accuracy(&runs_b);
    let ai_percent = accuracy_improvement(mean_a, mean_b)?;
    let table = pooled_contingency(&runs_a, &runs_b, test_labels);
    // A zero column marginal means both models produced identical pooled
    // outcomes (all correct or all incorrect): no evidence of a difference.
    let (chi_square_statistic, p_value) = match chi_square_test(&table) {
        Ok(sp) => sp,
        Err(Error::DegenerateTable(_)) => (0.0, 1.0),
        Err(e) => return Err(e),
    };
    let verdict = significance_verdict(p_value, SIGNIFICANCE_THRESHOLD, mean_a, mean_b);
    Ok(ComparisonReport {
        dataset: runs_a[0].dataset.clone(),
        variant_a,
        variant_b,
        mean_accuracy_a: mean_a,
        mean_accuracy_b: mean_b,
        ai_percent,
        chi_square_statistic,
        p_value,
        verdict,
        per_seed_a: runs_a.iter().map(|r| r.accuracy).collect(),
        per_seed_b: runs_b.iter().map(|r| r.accuracy).collect(),
    })
}

// ---- subcommand drivers ------------------------------------------------------

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<String> {
    let train = load_dataset(&cfg.train_path, cfg.znorm)?;
    let test = load_dataset(&cfg.test_path, cfg.znorm)?;
    let runs = run_matrix(cfg, &[cfg.variant], &train, &test)?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("runs.jsonl"), runs_jsonl(&runs))?;
    for run in &runs {
        let path = cfg
            .out_dir
            .join(format!("ckpt-{}-seed{}.bin", run.record.variant, run.record.seed));
        run.model.save(&path)?;
    }
    let mean = mean_accuracy(&runs.iter().map(|r| r.record.clone()).collect::<Vec<_>>());
    let mut out = String::new();
    for run in &runs {
        out.push_str(&format!(
            "{} seed {} accuracy {:.4}\n",
            run.record.variant, run.record.seed, run.record.accuracy
        ));
    }
    out.push_str(&format!(
        "{} mean accuracy over {} seeds: {:.4}\n",
        cfg.variant,
        cfg.seeds.len(),
        mean
    ));
    Ok(out)
}

pub fn cmd_eval(checkpoint: &Path, test_path: &Path, znorm: bool, out: Option<&Path>) -> Result<String> {
    let model = FcnCsaModel::<f32>::load(checkpoint)?;
    let test = load_dataset(test_path, znorm)?;
    let (preds, acc) = trainer::evaluate(&model, &test)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut csv = String::from("instance,predicted,actual\n");
        for (i, p) in preds.iter().enumerate() {
            csv.push_str(&format!(
                "{i},{},{}\n",
                test.class_names[*p], test.class_names[test.labels[i]]
            ));
        }
        fs::write(dir.join("predictions.csv"), csv)?;
    }
    Ok(format!(
        "{} on {}: accuracy {:.4} over {} instances\n",
        model.meta.variant,
        test.name,
        acc,
        test.len()
    ))
}

fn comparison_command(
    cfg: &ExperimentConfig,
    variant_a: ModelVariant,
    variant_b: ModelVariant,
    label_a: &str,
    label_b: &str,
) -> Result<String> {
    let train = load_dataset(&cfg.train_path, cfg.znorm)?;
    let test = load_dataset(&cfg.test_path, cfg.znorm)?;
    let runs = run_matrix(cfg, &[variant_b, variant_a], &train, &test)?;
    let report = compare_runs(&runs, variant_a, variant_b, &test.labels)?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("runs.jsonl"), runs_jsonl(&runs))?;
    fs::write(
        cfg.out_dir.join("report.json"),
        serde_json::to_string_pretty(&report).expect("serializable report") + "\n",
    )?;
    Ok(format!(
        "{:<16} {:>10} {:>10} {:>9} {:>22}\n{:<16} {:>10.4} {:>10.4} {:>8.3}% {:>22}\n",
        "dataset", label_b, label_a, "AI", "verdict",
        report.dataset,
        report.mean_accuracy_b,
        report.mean_accuracy_a,
        report.ai_percent,
        format!("{:?}", report.verdict),
    ))
}

/// Baseline vs CSA; the improvement is CSA over baseline.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<String> {
    comparison_command(
        cfg,
        ModelVariant::Csa,
        ModelVariant::Baseline,
        "w CSA",
        "w/o CSA",
    )
}

/// CSA vs CSA without the class-differentiation step.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<String> {
    comparison_command(
        cfg,
        ModelVariant::Csa,
        ModelVariant::CsaNoCd,
        "w CD",
        "w/o CD",
    )
}

pub fn cmd_export_features(
    checkpoint: &Path,
    data_path: &Path,
    znorm: bool,
    out_dir: &Path,
) -> Result<String> {
    let model = FcnCsaModel::<f32>::load(checkpoint)?;
    let ds = load_dataset(data_path, znorm)?;
    let matrices = csa_core::eval::export_feature_matrices(&model, &ds.x)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("p_l.csv"), matrices.p_l_csv())?;
    fs::write(
        out_dir.join("p_o.csv"),
        matrices.p_o_csv(&model.meta.class_names),
    )?;
    let s = matrices.p_o.shape().to_vec();
    Ok(format!(
        "wrote p_l.csv [{} x {}] and p_o.csv [{} x {} x {}] to {}\n",
        matrices.p_l.shape()[0],
        matrices.p_l.shape()[1],
        s[0],
        s[1],
        s[2],
        out_dir.display()
    ))
}

pub fn cmd_gen_synthetic(
    n_per_class: usize,
    t: usize,
    noise_std: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<String> {
    let ds = data::make_example1::<f32>(n_per_class, t, noise_std, seed)?;
    let (train, test) = data::split_train_test(&ds, 0.7, seed)?;
    fs::create_dir_all(out_dir)?;
    let train_path = out_dir.join("example1_TRAIN.ts");
    let test_path = out_dir.join("example1_TEST.ts");
    fs::write(&train_path, data::serialize_ts(&train))?;
    fs::write(&test_path, data::serialize_ts(&test))?;
    Ok(format!(
        "wrote {} ({} instances) and {} ({} instances)\n",
        train_path.display(),
        train.len(),
        test_path.display(),
        test.len()
    ))
}
