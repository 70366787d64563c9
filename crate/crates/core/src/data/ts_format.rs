//! Parsers for the UEA/UCR `.ts` text format and a plain CSV fallback.
//!
//! `.ts` files carry `@directive` header lines followed by `@data`; each
//! data line holds one instance: dimensions separated by `:`, values
//! comma-separated, and the class label as the final `:`-field. `?` (or
//! `NaN`) marks a missing value and is imputed with that variable's
//! within-instance mean.

use crate::data::TsDataset;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

struct Header {
    problem_name: String,
    class_names: Vec<String>,
    series_length: Option<usize>,
    dimensions: Option<usize>,
    univariate: Option<bool>,
    equal_length: Option<bool>,
    has_class_label: bool,
}

impl Default for Header {
    fn default() -> Self {
        Self {
            problem_name: "unnamed".into(),
            class_names: Vec::new(),
            series_length: None,
            dimensions: None,
            univariate: None,
            equal_length: None,
            has_class_label: false,
        }
    }
}

pub fn parse_ts<T: Element>(contents: &str) -> Result<TsDataset<T>> {
    let mut header = Header::default();
    let mut instances: Vec<Vec<Vec<T>>> = Vec::new(); // [instance][var][time]
    let mut raw_labels: Vec<String> = Vec::new();
    let mut in_data = false;

    for (li, raw_line) in contents.lines().enumerate() {
        let line_no = li + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !in_data {
            if let Some(rest) = line.strip_prefix('@') {
                if rest.eq_ignore_ascii_case("data") {
                    in_data = true;
                    continue;
                }
                parse_directive(&mut header, rest, line_no)?;
                continue;
            }
            return Err(Error::Parse {
                line: line_no,
                msg: "expected @directive or @data before data lines".into(),
            });
        }
        let (vars, label) = parse_data_line::<T>(line, line_no)?;
        instances.push(vars);
        raw_labels.push(label);
    }

    if !in_data {
        return Err(Error::Parse {
            line: 0,
            msg: "no @data section found".into(),
        });
    }
    if header.equal_length == Some(false) {
        return Err(Error::UnsupportedLength(
            "@equalLength false declared; only fixed-length series are supported".into(),
        ));
    }
    if !header.has_class_label || header.class_names.is_empty() {
        return Err(Error::Data(
            "@classLabel directive with a vocabulary is required".into(),
        ));
    }
    build_dataset(header, instances, raw_labels)
}

fn parse_directive(header: &mut Header, rest: &str, line_no: usize) -> Result<()> {
    let mut parts = rest.split_whitespace();
    let key = parts.next().unwrap_or("").to_ascii_lowercase();
    let values: Vec<&str> = parts.collect();
    match key.as_str() {
        "problemname" => {
            if let Some(v) = values.first() {
                header.problem_name = (*v).to_string();
            }
        }
        "serieslength" => {
            let v = values.first().ok_or_else(|| Error::Parse {
                line: line_no,
                msg: "@seriesLength needs a value".into(),
            })?;
            header.series_length = Some(v.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad @seriesLength '{v}'"),
            })?);
        }
        "dimension" | "dimensions" => {
            let v = values.first().ok_or_else(|| Error::Parse {
                line: line_no,
                msg: "@dimension needs a value".into(),
            })?;
            header.dimensions = Some(v.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad @dimension '{v}'"),
            })?);
        }
        "univariate" => {
            header.univariate = Some(values.first().map(|v| *v == "true").unwrap_or(false));
        }
        "equallength" => {
            header.equal_length = Some(values.first().map(|v| *v == "true").unwrap_or(true));
        }
        "classlabel" => {
            let flag = values.first().copied().unwrap_or("false");
            header.has_class_label = flag == "true";
            header.class_names = values.iter().skip(1).map(|s| s.to_string()).collect();
        }
        // @timeStamps, @missing and friends do not affect the tensor layout.
        _ => {}
    }
    Ok(())
}

/// One instance line: `v0,v0,...:v1,v1,...:label`.
fn parse_data_line<T: Element>(line: &str, line_no: usize) -> Result<(Vec<Vec<T>>, String)> {
    let mut fields: Vec<&str> = line.split(':').collect();
    if fields.len() < 2 {
        return Err(Error::Parse {
            line: line_no,
            msg: "expected ':'-separated dimensions and a class label".into(),
        });
    }
    let label = fields.pop().unwrap().trim().to_string();
    if label.is_empty() {
        return Err(Error::Parse {
            line: line_no,
            msg: "empty class label".into(),
        });
    }
    let mut vars = Vec::with_capacity(fields.len());
    for dim in fields {
        let mut values: Vec<Option<f64>> = Vec::new();
        for tok in dim.split(',') {
            let tok = tok.trim();
            if tok == "?" || tok.eq_ignore_ascii_case("nan") {
                values.push(None);
            } else {
                let v: f64 = tok.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("bad value '{tok}'"),
                })?;
                values.push(Some(v));
            }
        }
        vars.push(impute_missing::<T>(&values, line_no)?);
    }
    Ok((vars, label))
}

/// Replace missing points with the variable's within-instance mean.
fn impute_missing<T: Element>(values: &[Option<f64>], line_no: usize) -> Result<Vec<T>> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Parse {
            line: line_no,
            msg: "a dimension consists entirely of missing values".into(),
        });
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(values
        .iter()
        .map(|v| T::from_f64(v.unwrap_or(mean)))
        .collect())
}

fn build_dataset<T: Element>(
    header: Header,
    instances: Vec<Vec<Vec<T>>>,
    raw_labels: Vec<String>,
) -> Result<TsDataset<T>> {
    if instances.is_empty() {
        return Err(Error::Data("dataset has no instances".into()));
    }
    let v = instances[0].len();
    let t = instances[0][0].len();
    if let Some(declared) = header.dimensions {
        if declared != v {
            return Err(Error::Data(format!(
                "@dimension {declared} but data lines have {v} dimensions"
            )));
        }
    }
    if header.univariate == Some(true) && v != 1 {
        return Err(Error::Data(format!(
            "@univariate true but data lines have {v} dimensions"
        )));
    }
    if let Some(declared) = header.series_length {
        if declared != t {
            return Err(Error::UnsupportedLength(format!(
                "@seriesLength {declared} but first instance has {t} points"
            )));
        }
    }
    for (i, inst) in instances.iter().enumerate() {
        if inst.len() != v {
            return Err(Error::Data(format!(
                "instance {i} has {} dimensions, expected {v}",
                inst.len()
            )));
        }
        for series in inst {
            if series.len() != t {
                return Err(Error::UnsupportedLength(format!(
                    "instance {i} has a series of length {}, expected {t}",
                    series.len()
                )));
            }
        }
    }

    // Order-stable label encoding: lexicographic rank in the vocabulary.
    let mut class_names = header.class_names.clone();
    class_names.sort();
    class_names.dedup();
    let labels = raw_labels
        .iter()
        .map(|l| {
            class_names
                .binary_search(l)
                .map_err(|_| Error::Data(format!("label '{l}' not in the declared vocabulary")))
        })
        .collect::<Result<Vec<usize>>>()?;

    let n = instances.len();
    let mut data = Vec::with_capacity(n * v * t);
    for inst in &instances {
        for series in inst {
            data.extend_from_slice(series);
        }
    }
    Ok(TsDataset {
        name: header.problem_name,
        x: Tensor::new(vec![n, v, t], data)?,
        labels,
        class_names,
    })
}

/// Canonical `.ts` serialisation; floats use the shortest representation
/// that parses back to the identical value.
pub fn serialize_ts<T: Element>(ds: &TsDataset<T>) -> String {
    let (n, v, t) = ds.dims();
    let mut out = String::new();
    out.push_str(&format!("@problemName {}\n", ds.name));
    out.push_str("@timeStamps false\n");
    out.push_str(&format!(
        "@univariate {}\n",
        if v == 1 { "true" } else { "false" }
    ));
    if v > 1 {
        out.push_str(&format!("@dimension {v}\n"));
    }
    out.push_str("@equalLength true\n");
    out.push_str(&format!("@seriesLength {t}\n"));
    out.push_str(&format!("@classLabel true {}\n", ds.class_names.join(" ")));
    out.push_str("@data\n");
    for i in 0..n {
        let mut fields = Vec::with_capacity(v + 1);
        for vi in 0..v {
            let series: Vec<String> = (0..t)
                .map(|ti| format!("{}", ds.x.at(&[i, vi, ti])))
                .collect();
            fields.push(series.join(","));
        }
        fields.push(ds.class_names[ds.labels[i]].clone());
        out.push_str(&fields.join(":"));
        out.push('\n');
    }
    out
}

/// CSV fallback: header `label,v0_t0,...` then one row per instance with
/// values in variable-major order.
pub fn parse_csv<T: Element>(contents: &str, name: &str) -> Result<TsDataset<T>> {
    let mut lines = contents.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        line: 0,
        msg: "empty CSV".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"label") {
        return Err(Error::Parse {
            line: 1,
            msg: "CSV header must start with 'label'".into(),
        });
    }
    let mut v_max = 0usize;
    let mut t_max = 0usize;
    for col in &cols[1..] {
        let (vi, ti) = parse_vt_column(col).ok_or_else(|| Error::Parse {
            line: 1,
            msg: format!("bad column name '{col}', expected v<i>_t<j>"),
        })?;
        v_max = v_max.max(vi + 1);
        t_max = t_max.max(ti + 1);
    }
    if cols.len() - 1 != v_max * t_max {
        return Err(Error::Parse {
            line: 1,
            msg: format!(
                "{} value columns but v*t = {}",
                cols.len() - 1,
                v_max * t_max
            ),
        });
    }

    let mut raw_labels = Vec::new();
    let mut rows: Vec<Vec<T>> = Vec::new();
    for (li, line) in lines {
        let line_no = li + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != cols.len() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {} cells, got {}", cols.len(), cells.len()),
            });
        }
        raw_labels.push(cells[0].to_string());
        let values = cells[1..]
            .iter()
            .map(|c| {
                c.parse::<f64>().map(T::from_f64).map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("bad value '{c}'"),
                })
            })
            .collect::<Result<Vec<T>>>()?;
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(Error::Data("dataset has no instances".into()));
    }

    let mut class_names: Vec<String> = raw_labels.clone();
    class_names.sort();
    class_names.dedup();
    let labels = raw_labels
        .iter()
        .map(|l| class_names.binary_search(l).expect("built from labels"))
        .collect();
    let n = rows.len();
    let data: Vec<T> = rows.into_iter().flatten().collect();
    Ok(TsDataset {
        name: name.to_string(),
        x: Tensor::new(vec![n, v_max, t_max], data)?,
        labels,
        class_names,
    })
}

fn parse_vt_column(col: &str) -> Option<(usize, usize)> {
    let rest = col.strip_prefix('v')?;
    let (v, t) = rest.split_once("_t")?;
    Some((v.parse().ok()?, t.parse().ok()?))
}

/// CSV serialisation matching [`parse_csv`].
pub fn serialize_csv<T: Element>(ds: &TsDataset<T>) -> String {
    let (n, v, t) = ds.dims();
    let mut out = String::from("label");
    for vi in 0..v {
        for ti in 0..t {
            out.push_str(&format!(",v{vi}_t{ti}"));
        }
    }
    out.push('\n');
    for i in 0..n {
        out.push_str(&ds.class_names[ds.labels[i]]);
        for vi in 0..v {
            for ti in 0..t {
                out.push_str(&format!(",{}", ds.x.at(&[i, vi, ti])));
            }
        }
        out.push('\n');
    }
    out
}
