//! Seeded synthetic upper-limb exercise recordings with known scores.
//!
//! Each sample draws three degradation knobs: tremor amplitude `a` in
//! `[0, 1]`, range reduction `r` in `[0, 1]` and an interruption count `k`
//! in `0..=4`. The ground-truth total is
//! `clamp(round(50 − 20a − 20r − 2.5k), 0, 50)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{category_of, DatasetManifest, Date, Group, SampleRecord, ScoreAnnotation, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::math;
use crate::preprocess::{Quat, RawSequence, Vec3};
use crate::skeleton::{JointLayout, LayoutVariant};
use crate::tensor::NdArray;

pub const MAX_INTERRUPTIONS: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knobs {
    pub tremor: f64,
    pub range_reduction: f64,
    pub interruptions: u8,
}

impl Knobs {
    pub const IDEAL: Knobs = Knobs {
        tremor: 0.0,
        range_reduction: 0.0,
        interruptions: 0,
    };
}

/// Ground-truth total for a set of knobs.
pub fn score_from_knobs(k: &Knobs) -> u8 {
    let raw = 50.0 - 20.0 * k.tremor - 20.0 * k.range_reduction - 2.5 * f64::from(k.interruptions);
    math::round(raw).clamp(0.0, 50.0) as u8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub layout: LayoutVariant,
    pub fps: f64,
    /// Frame range of the motion itself, before interruptions are inserted.
    pub min_frames: usize,
    pub max_frames: usize,
    /// Class labels to draw from; empty means all fifteen.
    pub classes: Vec<u8>,
    /// Coordinate noise standard deviation, meters.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 200,
            seed: 0,
            layout: LayoutVariant::Basic25,
            fps: 30.0,
            min_frames: 240,
            max_frames: 360,
            classes: Vec::new(),
            noise: 0.002,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub record: SampleRecord,
    pub sequence: RawSequence,
    pub knobs: Knobs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub layout: JointLayout,
    pub samples: Vec<SynthSample>,
}

impl SynthDataset {
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            layout: self.layout.variant,
            records: self.samples.iter().map(|s| s.record.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Plane {
    Frontal,
    Side,
}

/// Per-class motion: right/left arm amplitude, plane, elbow ratio, peak
/// shoulder angle in degrees, repetitions.
fn motion(label: u8) -> (f64, f64, Plane, f64, f64, f64) {
    use Plane::*;
    match label {
        1 => (1.0, 0.0, Frontal, 0.8, 70.0, 3.0),
        2 => (1.0, 0.0, Side, 1.0, 100.0, 3.0),
        3 => (1.0, 0.0, Frontal, 1.2, 60.0, 4.0),
        4 => (1.0, 0.0, Frontal, 0.5, 40.0, 3.0),
        5 => (1.0, 0.0, Side, 0.3, 50.0, 2.0),
        6 => (1.0, 0.3, Frontal, 0.5, 30.0, 4.0),
        7 => (1.0, 0.5, Frontal, 0.6, 40.0, 3.0),
        8 => (1.0, 0.6, Side, 0.4, 50.0, 3.0),
        9 => (1.0, 1.0, Frontal, 1.2, 80.0, 3.0),
        10 => (1.0, 1.0, Frontal, 0.8, 45.0, 2.0),
        11 => (1.0, 0.0, Frontal, 0.0, 150.0, 2.0),
        12 => (0.0, 1.0, Frontal, 0.0, 150.0, 2.0),
        13 => (1.0, 0.0, Side, 0.0, 150.0, 2.0),
        14 => (0.0, 1.0, Side, 0.0, 150.0, 2.0),
        _ => (1.0, 1.0, Side, 0.9, 60.0, 3.0),
    }
}

/// Rest pose in meters, left side at `+x`, `+y` up, `+z` forward.
fn rest_pose(layout: &JointLayout) -> Vec<Vec3> {
    let mut p = vec![[0.0; 3]; layout.num_joints()];
    let body: [(usize, Vec3); 11] = [
        (0, [0.0, 0.0, 0.0]),
        (1, [0.0, 0.5, 0.0]),
        (2, [0.0, 0.68, 0.08]),
        (3, [0.18, 0.48, 0.0]),
        (4, [-0.18, 0.48, 0.0]),
        (5, [0.2, 0.2, 0.0]),
        (6, [-0.2, 0.2, 0.0]),
        (7, [0.21, -0.05, 0.02]),
        (8, [-0.21, -0.05, 0.02]),
        (9, [0.1, -0.05, 0.0]),
        (10, [-0.1, -0.05, 0.0]),
    ];
    for (j, v) in body {
        p[j] = v;
    }
    // thumb base/tip, index base/tip, middle, ring and pinky tips
    let hand: [Vec3; 7] = [
        [0.0, -0.03, 0.03],
        [0.0, -0.06, 0.05],
        [0.01, -0.08, 0.02],
        [0.01, -0.15, 0.02],
        [0.0, -0.16, 0.0],
        [-0.01, -0.15, -0.01],
        [-0.02, -0.13, -0.02],
    ];
    for (side, (wrist, first)) in [(7usize, 11usize), (8, 18)].into_iter().enumerate() {
        let mirror = if side == 0 { 1.0 } else { -1.0 };
        for (i, off) in hand.iter().enumerate() {
            p[first + i] = [
                p[wrist][0] + mirror * off[0],
                p[wrist][1] + off[1],
                p[wrist][2] + off[2],
            ];
        }
    }
    if layout.variant == LayoutVariant::Extended27 {
        for (extra, wrist, tip) in [(25usize, 7usize, 15usize), (26, 8, 22)] {
            p[extra] = core::array::from_fn(|k| 0.5 * (p[wrist][k] + p[tip][k]));
        }
    }
    p
}

/// Joints carried by each arm: elbow, then the forearm chain.
fn arm_chain(layout: &JointLayout, left: bool) -> (usize, usize, Vec<usize>) {
    let (shoulder, elbow, wrist, hand) = if left { (3, 5, 7, 11..18) } else { (4, 6, 8, 18..25) };
    let mut forearm: Vec<usize> = vec![wrist];
    forearm.extend(hand);
    if layout.variant == LayoutVariant::Extended27 {
        forearm.push(if left { 25 } else { 26 });
    }
    (shoulder, elbow, forearm)
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn rotate_about(q: Quat, pivot: Vec3, p: Vec3) -> Vec3 {
    add(pivot, q.rotate(sub(p, pivot)))
}

/// Progress of the motion at each raw frame; paused frames repeat the last value.
fn progress(base: usize, pauses: &[usize], pause_len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(base + pauses.len() * pause_len);
    for u in 0..base {
        out.push(u as f64);
        if pauses.contains(&u) {
            out.extend(core::iter::repeat_n(u as f64, pause_len));
        }
    }
    out
}

fn sample_one(cfg: &SynthConfig, layout: &JointLayout, index: usize, rng: &mut ChaCha8Rng) -> Result<SynthSample> {
    let classes: Vec<u8> = if cfg.classes.is_empty() {
        (1..=NUM_CLASSES).collect()
    } else {
        cfg.classes.clone()
    };
    let label = classes[rng.random_range(0..classes.len())];
    let n_subjects = (cfg.n / 10).max(1);
    let subject_idx = rng.random_range(0..n_subjects);
    // subject-level cohort, reproducible from the subject index alone
    let group = if (subject_idx * 7 + 3) % 10 < 3 {
        Group::Nd
    } else {
        Group::Stroke
    };
    let severity = if group == Group::Nd { 0.4 } else { 1.0 };
    let knobs = Knobs {
        tremor: severity * rng.random::<f64>(),
        range_reduction: severity * rng.random::<f64>(),
        interruptions: if group == Group::Nd && rng.random::<f64>() < 0.5 {
            0
        } else {
            rng.random_range(0..=MAX_INTERRUPTIONS)
        },
    };
    let base = rng.random_range(cfg.min_frames..=cfg.max_frames);
    let pause_len = math::round(0.6 * cfg.fps).max(1.0) as usize;
    let mut pauses: Vec<usize> = (0..knobs.interruptions)
        .map(|_| rng.random_range(base / 8..base - base / 8))
        .collect();
    pauses.sort_unstable();
    let u = progress(base, &pauses, pause_len);
    let t_raw = u.len();

    let (r_amp, l_amp, plane, elbow_ratio, peak_deg, reps) = motion(label);
    let amplitude = peak_deg.to_radians() * (1.0 - 0.7 * knobs.range_reduction);
    let tremor_m = 0.02 * knobs.tremor;
    let tremor_hz = rng.random_range(4.0..7.0);
    let tremor_phase = rng.random_range(0.0..core::f64::consts::TAU);
    let tremor_dir: Vec3 = {
        let d: Vec3 = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n = math::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).max(1e-3);
        [d[0] / n, d[1] / n, d[2] / n]
    };
    let scale = rng.random_range(0.85..1.15);
    let offset: Vec3 = [
        rng.random_range(-1.0..1.0),
        rng.random_range(-0.5..0.5),
        rng.random_range(2.0..4.0),
    ];
    let yaw = Quat::from_axis_angle([0.0, 1.0, 0.0], rng.random_range(-0.2..0.2));
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::Config(format!("{e}")))?;
    let day = rng.random_range(0..120);

    let rest = rest_pose(layout);
    let v = layout.num_joints();
    let mut data = Vec::with_capacity(t_raw * v * 3);
    for (t, &ut) in u.iter().enumerate() {
        let mut pos: Vec<Vec3> = rest
            .iter()
            .map(|p| [p[0] * scale, p[1] * scale, p[2] * scale])
            .collect();
        for (left, amp, phase) in [(false, r_amp, 0.0), (true, l_amp, if r_amp > 0.0 { 0.25 } else { 0.0 })] {
            if amp == 0.0 {
                continue;
            }
            let cycle = reps * ut / base as f64 + phase;
            let theta = amp * amplitude * (0.5 - 0.5 * math::cos(core::f64::consts::TAU * cycle));
            let (shoulder, elbow, forearm) = arm_chain(layout, left);
            let (axis, sign) = match plane {
                Plane::Frontal => ([1.0, 0.0, 0.0], -1.0),
                Plane::Side => ([0.0, 0.0, 1.0], if left { 1.0 } else { -1.0 }),
            };
            let q_sh = Quat::from_axis_angle(axis, sign * theta);
            let pivot = pos[shoulder];
            pos[elbow] = rotate_about(q_sh, pivot, pos[elbow]);
            for &j in &forearm {
                pos[j] = rotate_about(q_sh, pivot, pos[j]);
            }
            let q_el = Quat::from_axis_angle([1.0, 0.0, 0.0], -elbow_ratio * theta);
            let e = pos[elbow];
            for &j in &forearm {
                pos[j] = rotate_about(q_el, e, pos[j]);
            }
            let time = t as f64 / cfg.fps;
            let wobble = tremor_m * math::sin(core::f64::consts::TAU * tremor_hz * time + tremor_phase);
            let d = [tremor_dir[0] * wobble, tremor_dir[1] * wobble, tremor_dir[2] * wobble];
            pos[elbow] = add(pos[elbow], [d[0] * 0.3, d[1] * 0.3, d[2] * 0.3]);
            for &j in &forearm {
                pos[j] = add(pos[j], d);
            }
        }
        for p in &pos {
            let world = add(yaw.rotate(*p), offset);
            for c in world {
                data.push(c + noise.sample(rng));
            }
        }
    }
    let id = format!("syn{index:05}");
    let total = score_from_knobs(&knobs);
    let record = SampleRecord {
        id: id.clone(),
        subject: format!("S{subject_idx:03}"),
        group,
        class_label: label,
        category: category_of(label)?,
        file: format!("{id}.rseq"),
        annotation: ScoreAnnotation::from_total(total)?,
        session: Date::new(2024, 3, 1)?.add_days(day),
    };
    let sequence = RawSequence::new(
        record.subject.clone(),
        Some(label),
        NdArray::new(vec![t_raw, v, 3], data)?,
    )?;
    Ok(SynthSample {
        record,
        sequence,
        knobs,
    })
}

/// Generates `cfg.n` samples; identical configs give identical datasets.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.n == 0 {
        return Err(Error::Config("synthetic sample count must be at least 1".into()));
    }
    if cfg.min_frames < 16 || cfg.max_frames < cfg.min_frames || !(cfg.fps > 0.0) {
        return Err(Error::Config(format!(
            "invalid synthetic frame range {}..={} at {} fps",
            cfg.min_frames, cfg.max_frames, cfg.fps
        )));
    }
    if let Some(bad) = cfg.classes.iter().find(|c| !(1..=NUM_CLASSES).contains(*c)) {
        return Err(Error::Config(format!("class label {bad} outside 1..={NUM_CLASSES}")));
    }
    let layout = JointLayout::build(cfg.layout)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples = (0..cfg.n)
        .map(|i| sample_one(cfg, &layout, i, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthDataset { layout, samples })
}

/// Ids of the generated samples, in order.
pub fn sample_ids(ds: &SynthDataset) -> Vec<String> {
    ds.samples.iter().map(|s| s.record.id.clone()).collect()
}
