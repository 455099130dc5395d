//! `RSEQ` sequence container.
//!
//! ```text
//! RSEQ 1
//! layout basic25
//! frames 300
//! joints 25
//! channels 3
//! units m
//! fps 30
//! subject s0007
//! class 4
//! stage raw
//! end
//! <frames × joints × channels little-endian f64, frame-major>
//! ```
//!
//! Preprocessed files carry `stage preprocessed` plus `target`, `policy` and
//! `quaternions` lines describing how they were produced.

use std::fmt::Write as _;
use std::path::Path;

use rastg_core::preprocess::{RawSequence, SamplingPolicy};
use rastg_core::skeleton::{JointLayout, LayoutVariant};
use rastg_core::NdArray;

use crate::error::{Error, Result};
use crate::fsutil;

pub const MAGIC: &str = "RSEQ";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stage {
    Raw,
    Preprocessed {
        target: usize,
        policy: SamplingPolicy,
        quaternions: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceMeta {
    pub layout: LayoutVariant,
    pub units: String,
    pub fps: f64,
    pub stage: Stage,
}

impl SequenceMeta {
    pub fn raw(layout: LayoutVariant, fps: f64) -> Self {
        Self {
            layout,
            units: "m".into(),
            fps,
            stage: Stage::Raw,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceFile {
    pub meta: SequenceMeta,
    pub sequence: RawSequence,
}

pub fn policy_to_str(p: SamplingPolicy) -> String {
    match p {
        SamplingPolicy::DeterministicFirst => "deterministic-first".into(),
        SamplingPolicy::RandomInGroup { seed } => format!("random-in-group:{seed}"),
    }
}

pub fn policy_from_str(s: &str) -> Option<SamplingPolicy> {
    match s {
        "deterministic-first" | "first" => Some(SamplingPolicy::DeterministicFirst),
        _ => {
            let seed = s
                .strip_prefix("random-in-group:")
                .or_else(|| s.strip_prefix("random:"))?;
            seed.parse().ok().map(|seed| SamplingPolicy::RandomInGroup { seed })
        }
    }
}

fn single_line(field: &str, value: &str) -> Result<()> {
    if value.is_empty() || value.chars().any(char::is_control) {
        return Err(Error::Usage(format!(
            "sequence {field} must be a non-empty single line, got {value:?}"
        )));
    }
    Ok(())
}

pub fn encode(file: &SequenceFile) -> Result<Vec<u8>> {
    let seq = &file.sequence;
    let meta = &file.meta;
    single_line("subject", &seq.subject)?;
    single_line("units", &meta.units)?;
    let mut h = String::new();
    let _ = writeln!(h, "{MAGIC} {VERSION}");
    let _ = writeln!(h, "layout {}", meta.layout.as_str());
    let _ = writeln!(h, "frames {}", seq.num_frames());
    let _ = writeln!(h, "joints {}", seq.num_joints());
    let _ = writeln!(h, "channels {}", seq.num_channels());
    let _ = writeln!(h, "units {}", meta.units);
    let _ = writeln!(h, "fps {}", meta.fps);
    let _ = writeln!(h, "subject {}", seq.subject);
    if let Some(c) = seq.class_label {
        let _ = writeln!(h, "class {c}");
    }
    match meta.stage {
        Stage::Raw => h.push_str("stage raw\n"),
        Stage::Preprocessed {
            target,
            policy,
            quaternions,
        } => {
            h.push_str("stage preprocessed\n");
            let _ = writeln!(h, "target {target}");
            let _ = writeln!(h, "policy {}", policy_to_str(policy));
            let _ = writeln!(h, "quaternions {quaternions}");
        }
    }
    h.push_str("end\n");
    let mut out = h.into_bytes();
    out.reserve(seq.frames.len() * 8);
    for x in seq.frames.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn write_sequence(path: &Path, file: &SequenceFile) -> Result<()> {
    fsutil::write_atomic(path, &encode(file)?)
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<SequenceFile> {
    let bad = |reason: String| Error::format(path, reason);
    let end = bytes
        .windows(5)
        .position(|w| w == b"\nend\n")
        .ok_or_else(|| bad("header is not terminated by an `end` line".into()))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
    let payload = &bytes[end + 5..];
    let mut lines = header.lines();
    let first = lines.next().unwrap_or_default();
    match first.split_once(' ') {
        Some((MAGIC, v)) if v == VERSION.to_string() => {}
        Some((MAGIC, v)) => return Err(bad(format!("unsupported {MAGIC} version {v}, expected {VERSION}"))),
        _ => return Err(bad(format!("missing {MAGIC} magic line"))),
    }
    let mut fields = std::collections::BTreeMap::new();
    for line in lines {
        let (k, v) = line
            .split_once(' ')
            .ok_or_else(|| bad(format!("malformed header line {line:?}")))?;
        if fields.insert(k, v).is_some() {
            return Err(bad(format!("duplicate header key `{k}`")));
        }
    }
    let mut take = |k: &str| fields.remove(k).ok_or_else(|| bad(format!("header key `{k}` missing")));
    let num = |k: &str, v: &str| {
        v.parse::<usize>()
            .map_err(|_| bad(format!("header key `{k}`: not a count: {v:?}")))
    };
    let layout: LayoutVariant = take("layout")?.parse().map_err(|e| bad(format!("{e}")))?;
    let frames = num("frames", take("frames")?)?;
    let joints = num("joints", take("joints")?)?;
    let channels = num("channels", take("channels")?)?;
    let units = take("units")?.to_string();
    let fps: f64 = take("fps")?
        .parse()
        .map_err(|_| bad("header key `fps`: not a number".into()))?;
    let subject = take("subject")?.to_string();
    let class_label = match fields.remove("class") {
        Some(v) => Some(v.parse::<u8>().map_err(|_| bad(format!("header key `class`: {v:?}")))?),
        None => None,
    };
    let mut take = |k: &str| fields.remove(k).ok_or_else(|| bad(format!("header key `{k}` missing")));
    let stage = match take("stage")? {
        "raw" => Stage::Raw,
        "preprocessed" => {
            let target = num("target", take("target")?)?;
            let p = take("policy")?;
            let policy = policy_from_str(p).ok_or_else(|| bad(format!("unknown policy {p:?}")))?;
            let quaternions = match take("quaternions")? {
                "true" => true,
                "false" => false,
                other => return Err(bad(format!("header key `quaternions`: {other:?}"))),
            };
            Stage::Preprocessed {
                target,
                policy,
                quaternions,
            }
        }
        other => return Err(bad(format!("unknown stage {other:?}"))),
    };
    if let Some(k) = fields.keys().next() {
        return Err(bad(format!("unknown header key `{k}`")));
    }
    let count = frames
        .checked_mul(joints)
        .and_then(|x| x.checked_mul(channels))
        .ok_or_else(|| bad("declared size overflows".into()))?;
    if payload.len() != count * 8 {
        return Err(bad(format!(
            "payload holds {} bytes, header declares {frames} × {joints} × {channels} values ({} bytes); file truncated or padded",
            payload.len(),
            count * 8
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let frames = NdArray::new(vec![frames, joints, channels], data)?;
    let sequence = RawSequence::new(subject, class_label, frames).map_err(|e| match e {
        rastg_core::Error::Data(m) => rastg_core::Error::Data(format!("{}: {m}", path.display())),
        e => e,
    })?;
    Ok(SequenceFile {
        meta: SequenceMeta {
            layout,
            units,
            fps,
            stage,
        },
        sequence,
    })
}

/// Reads a container and checks it against `layout` when given.
pub fn read_sequence(path: &Path, layout: Option<&JointLayout>) -> Result<SequenceFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let file = decode(path, &bytes)?;
    if let Some(layout) = layout {
        check_layout(path, &file, layout)?;
    }
    Ok(file)
}

pub fn check_layout(path: &Path, file: &SequenceFile, layout: &JointLayout) -> Result<()> {
    let v = file.sequence.num_joints();
    if v != layout.num_joints() || (layout.variant != LayoutVariant::Custom && file.meta.layout != layout.variant) {
        return Err(Error::Layout {
            path: path.to_path_buf(),
            reason: format!(
                "{} sequence with {v} joints, expected {} with {} joints",
                file.meta.layout,
                layout.variant,
                layout.num_joints()
            ),
        });
    }
    Ok(())
}
