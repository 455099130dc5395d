//! Fixed-length frame sampling, bone-orientation quaternions and
//! root/torso normalization of raw keypoint recordings.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::skeleton::JointLayout;
use crate::tensor::NdArray;

/// Frame count the model expects after sampling.
pub const DEFAULT_TARGET_FRAMES: usize = 288;

/// A recording of `T × V × C` joint coordinates, frame-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSequence {
    pub subject: String,
    pub class_label: Option<u8>,
    pub frames: NdArray,
}

impl RawSequence {
    pub fn new(subject: impl Into<String>, class_label: Option<u8>, frames: NdArray) -> Result<Self> {
        let seq = Self {
            subject: subject.into(),
            class_label,
            frames,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.frames.shape();
        if s.len() != 3 || s[0] == 0 || s[1] == 0 || s[2] == 0 {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "sequence frames must be T × V × C with every axis non-empty".into(),
            });
        }
        if let Some(pos) = self.frames.data().iter().position(|v| !v.is_finite()) {
            let (v, c) = (s[1], s[2]);
            return Err(Error::Data(format!(
                "non-finite coordinate at frame {}, joint {}",
                pos / (v * c),
                (pos / c) % v
            )));
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn num_joints(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn num_channels(&self) -> usize {
        self.frames.shape()[2]
    }

    fn with_frames(&self, frames: NdArray) -> Self {
        Self {
            subject: self.subject.clone(),
            class_label: self.class_label,
            frames,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SamplingPolicy {
    DeterministicFirst,
    RandomInGroup { seed: u64 },
}

/// Result of [`uniform_frames`]; `source_indices[i]` is the raw frame behind output frame `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformSequence {
    pub sequence: RawSequence,
    pub source_indices: Vec<usize>,
    pub policy: SamplingPolicy,
}

/// Half-open bounds of group `g` when `t_raw` frames are split into `target`
/// groups, larger groups first.
pub fn group_bounds(t_raw: usize, target: usize, g: usize) -> (usize, usize) {
    let base = t_raw / target;
    let rem = t_raw % target;
    let start = g * base + g.min(rem);
    let len = base + usize::from(g < rem);
    (start, start + len)
}

/// Raw frame indices chosen for each of the `target` output frames.
pub fn select_indices(t_raw: usize, target: usize, policy: SamplingPolicy) -> Result<Vec<usize>> {
    if target == 0 {
        return Err(Error::Config("target frame count must be positive".into()));
    }
    if t_raw == 0 {
        return Err(Error::Data("sequence has no frames".into()));
    }
    if t_raw < target {
        // nearest-index upsampling; every source frame appears at least once
        return Ok((0..target).map(|i| i * t_raw / target).collect());
    }
    let mut rng = match policy {
        SamplingPolicy::DeterministicFirst => None,
        SamplingPolicy::RandomInGroup { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
    };
    Ok((0..target)
        .map(|g| {
            let (lo, hi) = group_bounds(t_raw, target, g);
            match rng.as_mut() {
                Some(r) => r.random_range(lo..hi),
                None => lo,
            }
        })
        .collect())
}

/// Resamples `seq` to exactly `target` frames.
pub fn uniform_frames(seq: &RawSequence, target: usize, policy: SamplingPolicy) -> Result<UniformSequence> {
    seq.validate()?;
    let idx = select_indices(seq.num_frames(), target, policy)?;
    let stride = seq.num_joints() * seq.num_channels();
    let src = seq.frames.data();
    let mut data = Vec::with_capacity(target * stride);
    for &i in &idx {
        data.extend_from_slice(&src[i * stride..(i + 1) * stride]);
    }
    let frames = NdArray::new(vec![target, seq.num_joints(), seq.num_channels()], data)?;
    Ok(UniformSequence {
        sequence: seq.with_frames(frames),
        source_indices: idx,
        policy,
    })
}

/// `P[j]` = parent of `j` in the tree rooted at `root`; `None` marks the root.
pub fn build_parents(j: usize, edges: &[(usize, usize)], root: usize) -> Result<Vec<Option<usize>>> {
    if root >= j {
        return Err(Error::Graph(format!("root {root} out of range for {j} joints")));
    }
    if edges.len() + 1 != j {
        return Err(Error::Graph(format!(
            "{} edges cannot form a tree on {j} joints",
            edges.len()
        )));
    }
    let mut adj = vec![Vec::new(); j];
    for &(a, b) in edges {
        if a >= j || b >= j || a == b {
            return Err(Error::Graph(format!("invalid edge ({a}, {b})")));
        }
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut parent = vec![None; j];
    let mut seen = vec![false; j];
    seen[root] = true;
    let mut queue = VecDeque::from([root]);
    while let Some(u) = queue.pop_front() {
        for &w in &adj[u] {
            if seen[w] {
                if parent[u] != Some(w) {
                    return Err(Error::Graph(format!("cycle through joints {u} and {w}")));
                }
                continue;
            }
            seen[w] = true;
            parent[w] = Some(u);
            queue.push_back(w);
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Graph(format!("joint {missing} is disconnected from the root")));
    }
    Ok(parent)
}

pub type Vec3 = [f64; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm3(a: Vec3) -> f64 {
    math::sqrt(dot(a, a))
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scaled(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Angle in radians between two non-zero vectors.
pub fn angle_between(a: Vec3, b: Vec3) -> f64 {
    math::atan2(norm3(cross(a, b)), dot(a, b))
}

/// Unit quaternion stored as `(x, y, z, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        x: 0.0,
        y: 0.0,
        z: 0.0,
        w: 1.0,
    };

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = norm3(axis);
        let s = math::sin(angle / 2.0) / n;
        Self {
            x: axis[0] * s,
            y: axis[1] * s,
            z: axis[2] * s,
            w: math::cos(angle / 2.0),
        }
        .canonical()
    }

    pub fn norm(self) -> f64 {
        math::sqrt(self.x * self.x + self.y * self.y + self.z * self.z + self.w * self.w)
    }

    /// Unit length with `w >= 0`.
    pub fn canonical(self) -> Self {
        let n = self.norm();
        let s = if self.w < 0.0 { -1.0 / n } else { 1.0 / n };
        Self {
            x: self.x * s,
            y: self.y * s,
            z: self.z * s,
            w: self.w * s,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.z, self.w]
    }

    pub fn rotate(self, v: Vec3) -> Vec3 {
        let u = [self.x, self.y, self.z];
        let t = scaled(cross(u, v), 2.0);
        let c = cross(u, t);
        [
            v[0] + self.w * t[0] + c[0],
            v[1] + self.w * t[1] + c[1],
            v[2] + self.w * t[2] + c[2],
        ]
    }

    /// From a proper rotation matrix given by rows.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Self {
        let tr = m[0][0] + m[1][1] + m[2][2];
        let q = if tr > 0.0 {
            let s = math::sqrt(tr + 1.0) * 2.0;
            Quat {
                w: 0.25 * s,
                x: (m[2][1] - m[1][2]) / s,
                y: (m[0][2] - m[2][0]) / s,
                z: (m[1][0] - m[0][1]) / s,
            }
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = math::sqrt(1.0 + m[0][0] - m[1][1] - m[2][2]) * 2.0;
            Quat {
                w: (m[2][1] - m[1][2]) / s,
                x: 0.25 * s,
                y: (m[0][1] + m[1][0]) / s,
                z: (m[0][2] + m[2][0]) / s,
            }
        } else if m[1][1] > m[2][2] {
            let s = math::sqrt(1.0 + m[1][1] - m[0][0] - m[2][2]) * 2.0;
            Quat {
                w: (m[0][2] - m[2][0]) / s,
                x: (m[0][1] + m[1][0]) / s,
                y: 0.25 * s,
                z: (m[1][2] + m[2][1]) / s,
            }
        } else {
            let s = math::sqrt(1.0 + m[2][2] - m[0][0] - m[1][1]) * 2.0;
            Quat {
                w: (m[1][0] - m[0][1]) / s,
                x: (m[0][2] + m[2][0]) / s,
                y: (m[1][2] + m[2][1]) / s,
                z: 0.25 * s,
            }
        };
        q.canonical()
    }
}

/// Reference direction that fixes the roll about each bone.
pub const UP: Vec3 = [0.0, 1.0, 0.0];

const DEGENERATE: f64 = 1e-9;
const ALIGNED: f64 = 1e-6;

/// Orthonormal frame with `x` along the bone and `z = x × up`, or `None`
/// when the bone is (anti)parallel to `up`.
fn bone_frame(dir: Vec3) -> Option<[Vec3; 3]> {
    let z = cross(dir, UP);
    let zn = norm3(z);
    if zn < ALIGNED {
        return None;
    }
    let z = scaled(z, 1.0 / zn);
    let y = cross(z, dir);
    Some([dir, y, z])
}

/// Shortest-arc rotation taking unit `a` onto unit `b`.
pub fn swing(a: Vec3, b: Vec3) -> Quat {
    let c = dot(a, b);
    if c < -1.0 + 1e-12 {
        // half turn about any axis perpendicular to `a`
        let helper = if a[0].abs() < 0.9 {
            [1.0, 0.0, 0.0]
        } else {
            [0.0, 1.0, 0.0]
        };
        let axis = cross(a, helper);
        let n = norm3(axis);
        return Quat {
            x: axis[0] / n,
            y: axis[1] / n,
            z: axis[2] / n,
            w: 0.0,
        }
        .canonical();
    }
    let axis = cross(a, b);
    Quat {
        x: axis[0],
        y: axis[1],
        z: axis[2],
        w: 1.0 + c,
    }
    .canonical()
}

/// Rotation carrying rest bone `b0` onto `b`, roll fixed by [`UP`].
pub fn bone_rotation(b0: Vec3, b: Vec3) -> Quat {
    let d0 = scaled(b0, 1.0 / norm3(b0));
    let d = scaled(b, 1.0 / norm3(b));
    match (bone_frame(d0), bone_frame(d)) {
        (Some(f0), Some(f)) => {
            // R = F · F0ᵀ, columns of F being the frame axes
            let mut m = [[0.0; 3]; 3];
            for (r, row) in m.iter_mut().enumerate() {
                for (c, cell) in row.iter_mut().enumerate() {
                    *cell = (0..3).map(|k| f[k][r] * f0[k][c]).sum();
                }
            }
            Quat::from_matrix(m)
        }
        _ => swing(d0, d),
    }
}

/// `T × J × 4` bone orientations relative to a rest pose.
#[derive(Debug, Clone, PartialEq)]
pub struct QuaternionSequence {
    pub quaternions: NdArray,
    pub parents: Vec<Option<usize>>,
    /// Number of (frame, joint) pairs whose bone had zero length.
    pub zero_bones: usize,
}

impl QuaternionSequence {
    pub fn get(&self, t: usize, j: usize) -> Quat {
        let d = &self.quaternions.data()[(t * self.parents.len() + j) * 4..][..4];
        Quat {
            x: d[0],
            y: d[1],
            z: d[2],
            w: d[3],
        }
    }
}

fn joint(frames: &[f64], v: usize, c: usize, t: usize, j: usize) -> Vec3 {
    let base = (t * v + j) * c;
    [frames[base], frames[base + 1], frames[base + 2]]
}

/// Per-frame, per-joint rotations of each bone away from the rest pose.
///
/// The rest pose is `rest` when given (a `J × 3` array) and the first frame
/// otherwise. Root joints and zero-length bones get the identity.
pub fn quaternion_sequence(
    seq: &RawSequence,
    parents: &[Option<usize>],
    rest: Option<&NdArray>,
) -> Result<QuaternionSequence> {
    seq.validate()?;
    let (t_len, v, c) = (seq.num_frames(), seq.num_joints(), seq.num_channels());
    if c < 3 || parents.len() != v {
        return Err(Error::Shape {
            op: "quaternion_sequence",
            lhs: seq.frames.shape().to_vec(),
            rhs: vec![parents.len(), 3],
        });
    }
    let frames = seq.frames.data();
    let rest_pose: Vec<Vec3> = match rest {
        Some(r) => {
            if r.shape() != [v, 3] {
                return Err(Error::Shape {
                    op: "quaternion_sequence rest pose",
                    lhs: r.shape().to_vec(),
                    rhs: vec![v, 3],
                });
            }
            (0..v).map(|j| joint(r.data(), v, 3, 0, j)).collect()
        }
        None => (0..v).map(|j| joint(frames, v, c, 0, j)).collect(),
    };
    let mut out = Vec::with_capacity(t_len * v * 4);
    let mut zero_bones = 0;
    for t in 0..t_len {
        for (j, parent) in parents.iter().enumerate() {
            let q = match *parent {
                None => Quat::IDENTITY,
                Some(p) => {
                    let b0 = sub(rest_pose[j], rest_pose[p]);
                    let b = sub(joint(frames, v, c, t, j), joint(frames, v, c, t, p));
                    if norm3(b0) < DEGENERATE || norm3(b) < DEGENERATE {
                        zero_bones += 1;
                        Quat::IDENTITY
                    } else {
                        bone_rotation(b0, b)
                    }
                }
            };
            out.extend_from_slice(&q.to_array());
        }
    }
    if zero_bones > 0 {
        log::warn!("{zero_bones} zero-length bones mapped to identity rotations");
    }
    Ok(QuaternionSequence {
        quaternions: NdArray::new(vec![t_len, v, 4], out)?,
        parents: parents.to_vec(),
        zero_bones,
    })
}

/// Subtracts the root per frame and divides by the median torso length.
pub fn center_and_scale(seq: &RawSequence, layout: &JointLayout) -> Result<RawSequence> {
    seq.validate()?;
    let (t_len, v, c) = (seq.num_frames(), seq.num_joints(), seq.num_channels());
    if v != layout.num_joints() {
        return Err(Error::Data(format!(
            "sequence has {v} joints but layout `{}` has {}",
            layout.variant,
            layout.num_joints()
        )));
    }
    let src = seq.frames.data();
    let mut data = src.to_vec();
    for t in 0..t_len {
        let root = (t * v + layout.root) * c;
        let origin: Vec<f64> = src[root..root + c].to_vec();
        for j in 0..v {
            let base = (t * v + j) * c;
            for k in 0..c {
                data[base + k] -= origin[k];
            }
        }
    }
    let scale = match layout.neck {
        Some(neck) => {
            let mut lengths: Vec<f64> = (0..t_len)
                .map(|t| {
                    let base = (t * v + neck) * c;
                    math::sqrt(data[base..base + c].iter().map(|x| x * x).sum())
                })
                .collect();
            lengths.sort_by(f64::total_cmp);
            let m = median_sorted(&lengths);
            if m < 1e-6 {
                1.0
            } else {
                m
            }
        }
        None => 1.0,
    };
    if scale != 1.0 {
        data.iter_mut().for_each(|x| *x /= scale);
    }
    Ok(seq.with_frames(NdArray::new(seq.frames.shape().to_vec(), data)?))
}

fn median_sorted(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Appends the `T × V × 4` quaternions to the coordinates along the channel axis.
pub fn with_quaternions(seq: &RawSequence, quats: &QuaternionSequence) -> Result<RawSequence> {
    let joined = NdArray::concat(&[&seq.frames, &quats.quaternions], 2)?;
    Ok(seq.with_frames(joined))
}

/// `T × V × C` frames as a `C × T × V` model input slice.
pub fn channels_first(frames: &NdArray) -> Result<NdArray> {
    frames.permute(&[2, 0, 1])
}
