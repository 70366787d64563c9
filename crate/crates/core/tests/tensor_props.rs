//! Property tests for the tensor/tape module: shape round trips, softmax
//! normalisation, and gradient checks over randomly composed graphs.

use csa_core::tensor::{grad_check, Tape, Tensor, Var};
use proptest::prelude::*;

// ---- plan-based random graph construction ----------------------------------

/// One differentiable value under construction, tracked by shape.
#[derive(Clone, Debug)]
enum Step {
    Relu(usize),
    Abs(usize),
    Rsqrt(usize),
    Softmax(usize, usize),
    MeanAxis(usize, usize),
    SumAxis(usize, usize),
    AddConst(usize, f64),
    MulConst(usize, f64),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    SwapLast2(usize),
    Flatten(usize),
    MatMulLeaf(usize, usize),
    ScalarMulLeaf(usize),
    ConvLeaf(usize, usize, usize),
    ClassMean(usize, Vec<usize>, usize),
}

/// A replayable graph: leaf shapes plus an op sequence over value indices.
#[derive(Clone, Debug)]
struct Plan {
    leaf_shapes: Vec<Vec<usize>>,
    steps: Vec<Step>,
    /// Terminal: None -> sum_all of the last value; Some(labels) ->
    /// cross-entropy when the last value is [N, C].
    ce_labels: Option<Vec<usize>>,
}

/// Greedy interpreter of raw bytes into a valid plan. Invalid choices are
/// skipped, so any byte string yields a well-formed graph.
fn build_plan(bytes: &[u8]) -> Plan {
    let shape_pool: [&[usize]; 5] = [&[3], &[2, 3], &[3, 2], &[2, 2, 3], &[2, 4]];
    let first = shape_pool[bytes.first().copied().unwrap_or(0) as usize % shape_pool.len()];
    let mut leaf_shapes = vec![first.to_vec()];
    let mut shapes: Vec<Vec<usize>> = vec![first.to_vec()];
    let mut steps = Vec::new();
    let mut ce_labels = None;

    let mut it = bytes.iter().skip(1).copied();
    let mut next = || it.next().unwrap_or(0);
    let op_budget = 6usize.min(bytes.len());
    for _ in 0..op_budget {
        let pick = next() % 12;
        let v = (next() as usize) % shapes.len();
        let shape = shapes[v].clone();
        let numel: usize = shape.iter().product();
        match pick {
            0 => {
                steps.push(Step::Relu(v));
                shapes.push(shape);
            }
            1 => {
                steps.push(Step::Abs(v));
                shapes.push(shape);
            }
            2 => {
                // rsqrt is made safe by abs + 0.5 in the replayer
                steps.push(Step::Rsqrt(v));
                shapes.push(shape);
            }
            3 => {
                let axis = (next() as usize) % shape.len();
                steps.push(Step::Softmax(v, axis));
                shapes.push(shape);
            }
            4 => {
                if shape.len() > 1 {
                    let axis = (next() as usize) % shape.len();
                    let mut out = shape.clone();
                    out.remove(axis);
                    if next() % 2 == 0 {
                        steps.push(Step::MeanAxis(v, axis));
                    } else {
                        steps.push(Step::SumAxis(v, axis));
                    }
                    shapes.push(out);
                } else {
                    steps.push(Step::Flatten(v));
                    shapes.push(vec![numel]);
                }
            }
            5 => {
                steps.push(Step::AddConst(v, (next() as f64 - 128.0) / 64.0));
                shapes.push(shape);
            }
            6 => {
                steps.push(Step::MulConst(v, 0.25 + (next() as f64) / 128.0));
                shapes.push(shape);
            }
            7 => {
                // binary op with a same-shape partner, if any
                if let Some(w) = (0..shapes.len()).rev().find(|&w| w != v && shapes[w] == shape) {
                    match next() % 3 {
                        0 => steps.push(Step::Add(v, w)),
                        1 => steps.push(Step::Sub(v, w)),
                        _ => steps.push(Step::Mul(v, w)),
                    }
                    shapes.push(shape);
                }
            }
            8 => {
                if shape.len() >= 2 {
                    let mut out = shape.clone();
                    let r = out.len();
                    out.swap(r - 2, r - 1);
                    steps.push(Step::SwapLast2(v));
                    shapes.push(out);
                }
            }
            9 => {
                let p = (next() as usize) % 2 + 1;
                let k = *shape.last().unwrap();
                leaf_shapes.push(vec![k, p]);
                let leaf_idx = leaf_shapes.len() - 1;
                let base = if shape.len() >= 2 {
                    shape.clone()
                } else {
                    vec![1, shape[0]]
                };
                let mut out = base;
                let r = out.len();
                out[r - 1] = p;
                steps.push(Step::MatMulLeaf(v, leaf_idx));
                shapes.push(out);
            }
            10 => {
                if shape.len() == 3 {
                    let c_out = (next() as usize) % 2 + 1;
                    let k = [1usize, 2, 3, 5, 8][(next() as usize) % 5];
                    leaf_shapes.push(vec![c_out, shape[1], k]);
                    leaf_shapes.push(vec![c_out]);
                    steps.push(Step::ConvLeaf(v, leaf_shapes.len() - 2, leaf_shapes.len() - 1));
                    shapes.push(vec![shape[0], c_out, shape[2]]);
                } else {
                    leaf_shapes.push(vec![1]);
                    steps.push(Step::ScalarMulLeaf(v));
                    shapes.push(shape);
                }
            }
            _ => {
                if !shape.is_empty() && shape[0] >= 2 && numel > 0 {
                    let c = (next() as usize) % 2 + 2;
                    let labels: Vec<usize> =
                        (0..shape[0]).map(|_| (next() as usize) % c).collect();
                    let mut out = shape.clone();
                    out[0] = c;
                    steps.push(Step::ClassMean(v, labels, c));
                    shapes.push(out);
                }
            }
        }
    }
    // Terminal: cross-entropy when the last value is rank-2 and small.
    let last = shapes.last().unwrap();
    if last.len() == 2 && last[1] >= 2 && next() % 3 == 0 {
        let labels = (0..last[0]).map(|i| i % last[1]).collect();
        ce_labels = Some(labels);
    }
    Plan {
        leaf_shapes,
        steps,
        ce_labels,
    }
}

/// Replay a plan on a tape from the given leaf vars; returns the scalar
/// loss. When `kink_inputs` is given, the inputs of every relu/abs are
/// recorded so the caller can reject draws that sit on a kink.
fn replay(
    plan: &Plan,
    tape: &mut Tape<f64>,
    leaves: &[Var],
    mut kink_inputs: Option<&mut Vec<Var>>,
) -> csa_core::Result<Var> {
    let mut values: Vec<Var> = vec![leaves[0]];
    let mut next_leaf = 1usize;
    let watch = |v: Var, sink: &mut Option<&mut Vec<Var>>| {
        if let Some(sink) = sink {
            sink.push(v);
        }
    };
    for step in &plan.steps {
        let out = match step {
            Step::Relu(v) => {
                watch(values[*v], &mut kink_inputs);
                tape.relu(values[*v])
            }
            Step::Abs(v) => {
                watch(values[*v], &mut kink_inputs);
                tape.abs(values[*v])
            }
            Step::Rsqrt(v) => {
                watch(values[*v], &mut kink_inputs);
                let a = tape.abs(values[*v]);
                let shifted = tape.add_const(a, 0.5);
                tape.rsqrt(shifted)
            }
            Step::Softmax(v, axis) => tape.softmax_axis(values[*v], *axis)?,
            Step::MeanAxis(v, axis) => tape.reduce_mean_axis(values[*v], *axis)?,
            Step::SumAxis(v, axis) => tape.reduce_sum_axis(values[*v], *axis)?,
            Step::AddConst(v, c) => tape.add_const(values[*v], *c),
            Step::MulConst(v, c) => tape.mul_const(values[*v], *c),
            Step::Add(v, w) => tape.add(values[*v], values[*w])?,
            Step::Sub(v, w) => tape.sub(values[*v], values[*w])?,
            Step::Mul(v, w) => tape.mul(values[*v], values[*w])?,
            Step::SwapLast2(v) => tape.swap_last2(values[*v])?,
            Step::Flatten(v) => {
                let numel = tape.value(values[*v]).numel();
                tape.reshape(values[*v], &[numel])?
            }
            Step::MatMulLeaf(v, leaf) => {
                let operand = values[*v];
                let operand = if tape.shape(operand).len() >= 2 {
                    operand
                } else {
                    let d = tape.shape(operand)[0];
                    tape.reshape(operand, &[1, d])?
                };
                next_leaf = next_leaf.max(*leaf + 1);
                tape.matmul(operand, leaves[*leaf])?
            }
            Step::ScalarMulLeaf(v) => {
                let leaf = leaves[next_leaf];
                next_leaf += 1;
                tape.scalar_mul(leaf, values[*v])?
            }
            Step::ConvLeaf(v, kernel, bias) => {
                next_leaf = next_leaf.max(*bias + 1);
                tape.conv1d_same(values[*v], leaves[*kernel], leaves[*bias])?
            }
            Step::ClassMean(v, labels, c) => tape.class_mean(values[*v], labels, *c)?.0,
        };
        values.push(out);
    }
    let last = *values.last().unwrap();
    match &plan.ce_labels {
        Some(labels) => tape.cross_entropy(last, labels),
        None => Ok(tape.sum_all(last)),
    }
}

/// Leaf values away from zero so relu/abs kinks are unlikely; discarded by
/// the kink guard below when a composition still lands near one.
fn leaf_values(plan: &Plan, seed: u64) -> Vec<Tensor<f64>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    plan.leaf_shapes
        .iter()
        .map(|s| {
            Tensor::from_fn(s, |_| {
                let mag = rng.random_range(0.1..1.2);
                if rng.random_range(0..2) == 0 {
                    mag
                } else {
                    -mag
                }
            })
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn random_graph_gradients_match_central_differences(
        bytes in proptest::collection::vec(any::<u8>(), 4..40),
        seed in any::<u64>(),
    ) {
        let plan = build_plan(&bytes);
        let params = leaf_values(&plan, seed);
        let total: usize = params.iter().map(|p| p.numel()).sum();
        prop_assume!(total <= 80);

        // Kink guard: discard draws where a relu/abs input sits within a
        // few steps of zero (central differences straddle the kink there).
        let h = 1e-5;
        {
            let mut tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
            let mut kinks = Vec::new();
            let loss = replay(&plan, &mut tape, &vars, Some(&mut kinks));
            prop_assume!(loss.is_ok());
            let near_kink = kinks
                .iter()
                .any(|v| tape.value(*v).data().iter().any(|x| x.abs() < 100.0 * h));
            prop_assume!(!near_kink);
        }

        let report = grad_check(
            |tape, vars| replay(&plan, tape, vars, None),
            &params,
            h,
            1e-4,
        ).unwrap();
        prop_assert!(
            report.passed(),
            "max rel err {} at {:?} (plan {:?})",
            report.max_rel_err,
            report.worst,
            plan
        );
    }

    #[test]
    fn reshape_round_trip_preserves_data(
        data in proptest::collection::vec(-1e3f64..1e3, 1..64),
    ) {
        let n = data.len();
        let t = Tensor::new(vec![n], data.clone()).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(t, true);
        let r = tape.reshape(x, &[1, n]).unwrap();
        let back = tape.reshape(r, &[n]).unwrap();
        prop_assert_eq!(tape.value(back).data(), data.as_slice());
    }

    #[test]
    fn softmax_rows_are_distributions(
        data in proptest::collection::vec(-30.0f64..30.0, 6..36),
        axis_pick in any::<u8>(),
    ) {
        let n = data.len();
        let rows = [1usize, 2, 3].into_iter().find(|r| n % r == 0).unwrap();
        let shape = vec![rows, n / rows];
        let axis = (axis_pick as usize) % 2;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(shape.clone(), data).unwrap());
        let y = tape.softmax_axis(x, axis).unwrap();
        let out = tape.value(y);
        for v in out.data() {
            prop_assert!(*v > 0.0 && *v < 1.0 + 1e-12);
        }
        let (outer, extent, inner) = match axis {
            0 => (1, shape[0], shape[1]),
            _ => (shape[0], shape[1], 1),
        };
        for o in 0..outer {
            for i in 0..inner {
                let mut sum = 0.0;
                for e in 0..extent {
                    sum += out.data()[(o * extent + e) * inner + i];
                }
                prop_assert!((sum - 1.0).abs() < 1e-6, "sum {}", sum);
            }
        }
    }

    #[test]
    fn backward_of_plain_sum_is_ones(
        dims in proptest::collection::vec(1usize..4, 1..4),
        fill in -5.0f64..5.0,
    ) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&dims, fill), true);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        let numel: usize = dims.iter().product();
        let expected = vec![1.0; numel];
        prop_assert_eq!(tape.grad(x).unwrap(), expected.as_slice());
    }

    #[test]
    fn conv_same_preserves_time_extent(
        t_extent in 1usize..40,
        k_pick in any::<u8>(),
        c_in in 1usize..3,
        c_out in 1usize..3,
    ) {
        let k = [3usize, 5, 8][(k_pick as usize) % 3];
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_fn(&[2, c_in, t_extent], |i| (i as f64).sin()));
        let kernel = tape.constant(Tensor::from_fn(&[c_out, c_in, k], |i| (i as f64 * 0.7).cos()));
        let bias = tape.constant(Tensor::zeros(&[c_out]));
        let y = tape.conv1d_same(x, kernel, bias).unwrap();
        prop_assert_eq!(tape.shape(y), &[2, c_out, t_extent]);
    }

    #[test]
    fn matmul_matches_naive_triple_loop(
        m in 1usize..4, k in 1usize..4, p in 1usize..4,
        batch in 1usize..3,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f64>::from_fn(&[batch, m, k], |_| rng.random_range(-2.0..2.0));
        let b = Tensor::<f64>::from_fn(&[k, p], |_| rng.random_range(-2.0..2.0));
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let c = tape.matmul(av, bv).unwrap();
        let got = tape.value(c);
        for bi in 0..batch {
            for i in 0..m {
                for j in 0..p {
                    let mut want = 0.0;
                    for kk in 0..k {
                        want += a.at(&[bi, i, kk]) * b.at(&[kk, j]);
                    }
                    let diff = (got.at(&[bi, i, j]) - want).abs();
                    prop_assert!(diff < 1e-10, "diff {diff}");
                }
            }
        }
    }
}
