//! Checks shared by the integration tests and the acceptance target. Each
//! returns the measured quantity so callers can assert or report it.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rastg_core::autograd::Mode;
use rastg_core::feedback::extract_contributions;
use rastg_core::model::{huber_loss, AttentionConfig, BlockConfig, ModelConfig, RastGModel};
use rastg_core::preprocess::{build_parents, quaternion_sequence, select_indices, RawSequence, SamplingPolicy};
use rastg_core::skeleton::{build_partitions, normalize, JointLayout};
use rastg_core::train::{evaluate, metrics, Example, TrainConfig};
use rastg_core::{NdArray, Tape};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> NdArray {
    NdArray::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Random tree on `v` joints rooted at 0.
pub fn random_tree(v: usize, rng: &mut ChaCha8Rng) -> JointLayout {
    let joints = (0..v).map(|i| format!("n{i}")).collect();
    let edges = (1..v).map(|i| (rng.random_range(0..i), i)).collect();
    JointLayout::custom(joints, edges, 0, (v > 1).then_some(1)).expect("random tree is valid")
}

pub fn random_permutation(v: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..v).collect();
    for i in (1..v).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

/// Two blocks (the second strided with a projected residual), two-head
/// attention and the regression head.
pub fn mini_config(in_channels: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        in_channels,
        max_hop: 2,
        blocks: vec![
            BlockConfig {
                in_channels,
                out_channels: 4,
                kernel: 3,
                stride: 1,
                residual: false,
            },
            BlockConfig {
                in_channels: 4,
                out_channels: 4,
                kernel: 3,
                stride: 2,
                residual: true,
            },
        ],
        attention: Some(AttentionConfig::with_heads(4, 2).expect("4 splits into 2 heads")),
        head_hidden: 4,
        expected_frames: None,
        init_seed: seed,
    }
}

/// Moves every parameter off its initial value so that no gradient is
/// trivially zero or symmetric.
pub fn jitter(model: &mut RastGModel, scale: f64, rng: &mut ChaCha8Rng) {
    for p in model.params_mut().iter_mut() {
        for x in p.value.data_mut() {
            *x += rng.random_range(-scale..scale);
        }
    }
}

fn train_loss(model: &mut RastGModel, x: &NdArray, y: &NdArray, delta: f64) -> f64 {
    let mut tape = Tape::new();
    let out = model.forward_on_tape(&mut tape, x, Mode::Train).expect("forward");
    let loss = tape.huber_loss(out.scores, y, delta).expect("loss");
    tape.value(loss).data()[0]
}

/// A point whose ReLU pre-activations all stay clear of zero under a 1e-4
/// perturbation.
pub const GRADCHECK_SEED: u64 = 0;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_name: String,
}

/// Central differences against the tape gradient for every scalar of every
/// parameter of the miniature model (chain of 5 joints, 8 frames).
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`; the floor keeps
/// structurally zero entries (masked-out adjacency cells) from dividing by
/// zero.
pub fn gradcheck_mini(seed: u64, h: f64, floor: f64) -> GradCheck {
    let mut r = rng(seed);
    let mut model = RastGModel::new(mini_config(3, 3), JointLayout::chain(5).expect("chain")).expect("model");
    jitter(&mut model, 0.3, &mut r);
    let x = uniform(&[3, 3, 8, 5], -1.0, 1.0, &mut r);
    let y = uniform(&[3, 1], -0.5, 0.5, &mut r);
    let delta = 0.1;

    model.params_mut().zero_grad();
    let mut tape = Tape::new();
    let out = model.forward_on_tape(&mut tape, &x, Mode::Train).expect("forward");
    let loss = tape.huber_loss(out.scores, &y, delta).expect("loss");
    tape.backward(loss, model.params_mut()).expect("backward");
    drop(tape);
    let analytic: Vec<(String, Vec<f64>)> = model
        .params()
        .iter()
        .map(|(_, p)| (p.name.clone(), p.grad.data().to_vec()))
        .collect();

    let mut out = GradCheck {
        checked: 0,
        worst_rel: 0.0,
        worst_name: String::new(),
    };
    let ids: Vec<_> = model.params().iter().map(|(id, _)| id).collect();
    for (pi, id) in ids.into_iter().enumerate() {
        let n = model.params().get(id).value.len();
        for i in 0..n {
            let orig = model.params().get(id).value.data()[i];
            model.params_mut().get_mut(id).value.data_mut()[i] = orig + h;
            let up = train_loss(&mut model, &x, &y, delta);
            model.params_mut().get_mut(id).value.data_mut()[i] = orig - h;
            let down = train_loss(&mut model, &x, &y, delta);
            model.params_mut().get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi].1[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > out.worst_rel {
                out.worst_rel = rel;
                out.worst_name = format!("{}[{i}] analytic {a:e} numeric {numeric:e}", analytic[pi].0);
            }
            out.checked += 1;
        }
    }
    out
}

fn hop_matrix(layout: &JointLayout) -> Vec<Vec<usize>> {
    let v = layout.num_joints();
    let inf = usize::MAX / 4;
    let mut d = vec![vec![inf; v]; v];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for &(a, b) in &layout.edges {
        d[a][b] = 1;
        d[b][a] = 1;
    }
    for k in 0..v {
        for i in 0..v {
            for j in 0..v {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

/// Direct evaluation of `D^{-1/2}(A_k ⊙ E_k + I)D^{-1/2}`, hop distances by
/// Floyd-Warshall.
pub fn normalize_reference(layout: &JointLayout, max_hop: usize, masks: &[NdArray]) -> Vec<Vec<Vec<f64>>> {
    let v = layout.num_joints();
    let hops = hop_matrix(layout);
    (0..=max_hop)
        .map(|k| {
            let b: Vec<Vec<f64>> = (0..v)
                .map(|i| {
                    (0..v)
                        .map(|j| {
                            let a = if k > 0 && hops[i][j] == k { 1.0 } else { 0.0 };
                            a * masks[k].get(&[i, j]) + if i == j { 1.0 } else { 0.0 }
                        })
                        .collect()
                })
                .collect();
            let deg: Vec<f64> = b.iter().map(|row| row.iter().sum()).collect();
            (0..v)
                .map(|i| (0..v).map(|j| b[i][j] / (deg[i].sqrt() * deg[j].sqrt())).collect())
                .collect()
        })
        .collect()
}

/// Largest element-wise gap between `normalize` (and its differentiable
/// tape counterpart) and the reference over `cases` random trees.
pub fn normalize_oracle(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let v = r.random_range(1..9);
        let max_hop = r.random_range(1..4);
        let layout = random_tree(v, &mut r);
        let adj = build_partitions(&layout, max_hop).expect("partitions");
        let masks: Vec<NdArray> = (0..=max_hop).map(|_| uniform(&[v, v], 0.0, 2.0, &mut r)).collect();
        let got = normalize(&adj, &masks).expect("normalize");
        let want = normalize_reference(&layout, max_hop, &masks);
        let mut tape = Tape::new();
        for (k, g) in got.iter().enumerate() {
            let m = tape.leaf(masks[k].clone());
            let t = tape.normalize_adjacency(&adj.partitions[k], m).expect("tape normalize");
            let tv = tape.value(t);
            for i in 0..v {
                for j in 0..v {
                    worst = worst.max((g.get(&[i, j]) - want[k][i][j]).abs());
                    worst = worst.max((tv.get(&[i, j]) - want[k][i][j]).abs());
                }
            }
        }
    }
    worst
}

pub fn huber_reference(pred: &[f64], target: &[f64], delta: f64) -> f64 {
    let mut s = 0.0;
    for (p, t) in pred.iter().zip(target) {
        let r = (t - p).abs();
        s += if r <= delta {
            0.5 * r * r
        } else {
            delta * r - 0.5 * delta * delta
        };
    }
    s / pred.len() as f64
}

pub fn huber_oracle(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = r.random_range(1..20);
        let delta = r.random_range(0.01..1.0);
        let target: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let pred: Vec<f64> = target
            .iter()
            .map(|t| t + r.random_range(-3.0 * delta..3.0 * delta))
            .collect();
        let got = huber_loss(&pred, &target, delta).expect("huber");
        worst = worst.max((got - huber_reference(&pred, &target, delta)).abs());
    }
    worst
}

/// `(mad, rmse, mape)` straight from the definitions; MAPE skips zero targets.
pub fn metrics_reference(truth: &[f64], pred: &[f64]) -> (f64, f64, Option<f64>) {
    let n = truth.len() as f64;
    let mad = truth.iter().zip(pred).map(|(y, p)| (y - p).abs()).sum::<f64>() / n;
    let rmse = (truth.iter().zip(pred).map(|(y, p)| (y - p) * (y - p)).sum::<f64>() / n).sqrt();
    let kept: Vec<f64> = truth
        .iter()
        .zip(pred)
        .filter(|(y, _)| **y != 0.0)
        .map(|(y, p)| ((y - p) / y).abs())
        .collect();
    let mape = (!kept.is_empty()).then(|| 100.0 * kept.iter().sum::<f64>() / kept.len() as f64);
    (mad, rmse, mape)
}

fn gap(a: (f64, f64, Option<f64>), b: (f64, f64, Option<f64>)) -> f64 {
    let m = match (a.2, b.2) {
        (Some(x), Some(y)) => (x - y).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    };
    (a.0 - b.0).abs().max((a.1 - b.1).abs()).max(m)
}

/// `evaluate` on a tiny model against per-sample predictions pushed through
/// the reference formulas, overall and per class; plus the bare `metrics`.
pub fn evaluate_oracle(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let layout = JointLayout::chain(3).expect("chain");
    let cfg = ModelConfig {
        in_channels: 3,
        max_hop: 1,
        blocks: vec![BlockConfig {
            in_channels: 3,
            out_channels: 2,
            kernel: 3,
            stride: 1,
            residual: false,
        }],
        attention: None,
        head_hidden: 3,
        expected_frames: None,
        init_seed: 1,
    };
    let mut model = RastGModel::new(cfg, layout).expect("model");
    jitter(&mut model, 0.5, &mut r);
    let tc = TrainConfig::default();
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let n = r.random_range(1..9);
        let examples: Vec<Example> = (0..n)
            .map(|i| Example {
                id: format!("c{case}s{i}"),
                input: uniform(&[3, 4, 3], -1.0, 1.0, &mut r),
                // zero targets exercise the MAPE exclusion
                score: if r.random_bool(0.15) {
                    0.0
                } else {
                    f64::from(r.random_range(0u8..=50))
                },
                class_label: r.random_range(1..4),
            })
            .collect();
        let (report, pred) = evaluate(&mut model, &examples, &tc).expect("evaluate");
        let single: Vec<f64> = examples
            .iter()
            .map(|e| {
                model
                    .predict(&e.input.reshape(&[1, 3, 4, 3]).expect("reshape"))
                    .expect("predict")[0]
                    * tc.score_scale
            })
            .collect();
        for (a, b) in pred.iter().zip(&single) {
            worst = worst.max((a - b).abs());
        }
        let truth: Vec<f64> = examples.iter().map(|e| e.score).collect();
        let o = report.overall;
        worst = worst.max(gap((o.mad, o.rmse, o.mape), metrics_reference(&truth, &single)));
        for (label, m) in &report.per_class {
            let (t, p): (Vec<f64>, Vec<f64>) = examples
                .iter()
                .zip(&single)
                .filter(|(e, _)| e.class_label == *label)
                .map(|(e, p)| (e.score, *p))
                .unzip();
            worst = worst.max(gap((m.mad, m.rmse, m.mape), metrics_reference(&t, &p)));
        }
        let truth2: Vec<f64> = (0..n).map(|_| r.random_range(0.0..50.0)).collect();
        let pred2: Vec<f64> = (0..n).map(|_| r.random_range(0.0..50.0)).collect();
        let m = metrics(&truth2, &pred2).expect("metrics");
        worst = worst.max(gap((m.mad, m.rmse, m.mape), metrics_reference(&truth2, &pred2)));
    }
    worst
}

/// Selected frame indices for the worked partition examples.
pub fn golden_frames() -> Vec<(&'static str, bool)> {
    let first = SamplingPolicy::DeterministicFirst;
    let mut out = vec![
        (
            "576 -> 288 picks every even frame",
            select_indices(576, 288, first).expect("select") == (0..288).map(|i| 2 * i).collect::<Vec<_>>(),
        ),
        (
            "10 -> 4 picks 0, 3, 6, 8",
            select_indices(10, 4, first).expect("select") == vec![0, 3, 6, 8],
        ),
    ];
    for policy in [first, SamplingPolicy::RandomInGroup { seed: 9 }] {
        out.push((
            "288 -> 288 is the identity",
            select_indices(288, 288, policy).expect("select") == (0..288).collect::<Vec<_>>(),
        ));
    }
    out
}

/// Number of random `(T_raw >= target, policy)` cases whose indices are not
/// strictly increasing.
pub fn frames_monotone_failures(cases: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    (0..cases)
        .filter(|_| {
            let target = r.random_range(1..=400);
            let t_raw = r.random_range(target..=4000);
            let policy = if r.random_bool(0.5) {
                SamplingPolicy::RandomInGroup { seed: r.random() }
            } else {
                SamplingPolicy::DeterministicFirst
            };
            let idx = select_indices(t_raw, target, policy).expect("select");
            idx.len() != target || idx.windows(2).any(|w| w[0] >= w[1]) || idx[target - 1] >= t_raw
        })
        .count()
}

fn sequence(t: usize, v: usize, data: Vec<f64>) -> RawSequence {
    RawSequence::new("s", None, NdArray::new(vec![t, v, 3], data).expect("shape")).expect("sequence")
}

#[derive(Debug, Clone, Copy)]
pub struct QuatCheck {
    pub worst_norm_gap: f64,
    pub rest_gap: f64,
    pub quarter_turn_gap: f64,
}

/// Unit norm over `poses` random 6-joint poses, identity at the rest pose
/// and the 90° turn about z.
pub fn quaternion_checks(poses: usize, seed: u64) -> QuatCheck {
    let mut r = rng(seed);
    let edges = [(0, 1), (1, 2), (2, 3), (1, 4), (4, 5)];
    let parents = build_parents(6, &edges, 0).expect("parents");
    let rest = uniform(&[6, 3], -1.0, 1.0, &mut r);
    let mut worst_norm_gap: f64 = 0.0;
    for _ in 0..poses {
        let pose: Vec<f64> = (0..18).map(|_| r.random_range(-1.0..1.0)).collect();
        let q = quaternion_sequence(&sequence(1, 6, pose), &parents, Some(&rest)).expect("quaternions");
        for c in q.quaternions.data().chunks(4) {
            worst_norm_gap = worst_norm_gap.max((c.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs());
        }
    }
    let q = quaternion_sequence(&sequence(1, 6, rest.data().to_vec()), &parents, Some(&rest)).expect("quaternions");
    let rest_gap = q
        .quaternions
        .data()
        .chunks(4)
        .flat_map(|c| c.iter().zip([0.0, 0.0, 0.0, 1.0]).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    let bone = sequence(2, 2, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let q = quaternion_sequence(&bone, &[None, Some(0)], None).expect("quaternions");
    let s = std::f64::consts::FRAC_PI_4.sin();
    let c = std::f64::consts::FRAC_PI_4.cos();
    let quarter_turn_gap = q
        .get(1, 1)
        .to_array()
        .iter()
        .zip([0.0, 0.0, s, c])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    QuatCheck {
        worst_norm_gap,
        rest_gap,
        quarter_turn_gap,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Equivariance {
    pub score_gap: f64,
    pub heatmap_gap: f64,
}

/// Relabels joints of a random tree and the input consistently; scores must
/// not move and heatmap columns must follow the relabeling.
pub fn permutation_equivariance(v: usize, seed: u64) -> Equivariance {
    let mut r = rng(seed);
    let layout = random_tree(v, &mut r);
    let mut model = RastGModel::new(mini_config(3, seed), layout).expect("model");
    jitter(&mut model, 0.3, &mut r);
    // non-trivial running statistics for eval mode
    let warm = uniform(&[4, 3, 8, v], -1.0, 1.0, &mut r);
    let mut tape = Tape::new();
    model.forward_on_tape(&mut tape, &warm, Mode::Train).expect("forward");
    drop(tape);

    let perm = random_permutation(v, &mut r);
    let mut permuted = model.permute_joints(&perm).expect("permute");
    let x = uniform(&[2, 3, 8, v], -1.0, 1.0, &mut r);
    let px = NdArray::from_fn(&[2, 3, 8, v], |i| {
        let j = i % v;
        x.data()[i - j + perm[j]]
    });
    let (s, f) = model.predict_with_features(&x).expect("predict");
    let (ps, pf) = permuted.predict_with_features(&px).expect("predict");
    let score_gap = s.iter().zip(&ps).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let mut heatmap_gap: f64 = 0.0;
    for item in 0..2 {
        let h = extract_contributions(&f, item, 3).expect("heatmap");
        let ph = extract_contributions(&pf, item, 3).expect("heatmap");
        for (row, prow) in h.contributions.iter().zip(&ph.contributions) {
            for (new, &old) in perm.iter().enumerate() {
                heatmap_gap = heatmap_gap.max((prow[new] - row[old]).abs());
            }
        }
    }
    Equivariance { score_gap, heatmap_gap }
}
