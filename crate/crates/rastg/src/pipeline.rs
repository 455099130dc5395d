//! End-to-end stages behind the command-line subcommands. Each stage writes
//! into one output directory, including the effective configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rastg_core::dataset::{Category, DatasetManifest, SampleRecord};
use rastg_core::feedback::{
    extract_contributions, period_summary, HeatmapReport, PeriodSummary, ScoredSample, WindowSpec, DEFAULT_TOP_K,
};
use rastg_core::model::RastGModel;
use rastg_core::preprocess::{
    build_parents, center_and_scale, channels_first, quaternion_sequence, uniform_frames, with_quaternions, RawSequence,
};
use rastg_core::skeleton::{JointLayout, LayoutVariant};
use rastg_core::synth::{synth_generate, SynthConfig};
use rastg_core::train::{self, metrics, split_dataset, DatasetSplit, EpochRecord, Example, Metrics, MetricsReport};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::annotations::write_annotations;
use crate::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::config::{DataConfig, RunConfig};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::manifest::{load_manifest, write_manifest, LoadedManifest};
use crate::report::{write_heatmap_png, write_report, write_summary};
use crate::runlog::RunLog;
use crate::seqfile::{read_sequence, write_sequence, SequenceFile, SequenceMeta, Stage};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const SPLIT_FILE: &str = "split.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const HISTORY_FILE: &str = "history.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

/// Writes a synthetic dataset (sequences, manifest, score sheet, knobs).
pub fn synth(out: &Path, cfg: &RunConfig, log: &mut RunLog) -> Result<PathBuf> {
    fsutil::create_dir(out)?;
    cfg.write_snapshot(out)?;
    let s = &cfg.synth;
    let sc = SynthConfig {
        n: s.n,
        seed: s.seed,
        min_frames: s.min_frames,
        max_frames: s.max_frames,
        fps: s.fps,
        ..SynthConfig::default()
    };
    let ds = synth_generate(&sc)?;
    for sample in &ds.samples {
        let file = SequenceFile {
            meta: SequenceMeta::raw(ds.layout.variant, sc.fps),
            sequence: sample.sequence.clone(),
        };
        write_sequence(&out.join(&sample.record.file), &file)?;
    }
    let manifest = ds.manifest();
    let path = out.join(MANIFEST_FILE);
    write_manifest(&path, &manifest, &ds.layout)?;
    write_annotations(&out.join(ANNOTATIONS_FILE), &manifest)?;
    let mut knobs = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::format(out.join("knobs.csv"), e.to_string());
    knobs
        .write_record(["id", "tremor", "range_reduction", "interruptions"])
        .map_err(fail)?;
    for sample in &ds.samples {
        let k = &sample.knobs;
        knobs
            .write_record([
                sample.record.id.clone(),
                k.tremor.to_string(),
                k.range_reduction.to_string(),
                k.interruptions.to_string(),
            ])
            .map_err(fail)?;
    }
    let bytes = knobs
        .into_inner()
        .map_err(|e| Error::format(out.join("knobs.csv"), e.to_string()))?;
    fsutil::write_atomic(&out.join("knobs.csv"), &bytes)?;
    log.info(
        "synth",
        json!({ "samples": ds.samples.len(), "seed": sc.seed, "manifest": path }),
    );
    Ok(path)
}

/// Brings a stored sequence to the shape the model expects. Already
/// preprocessed input with matching settings passes through untouched.
pub fn prepare(path: &Path, file: &SequenceFile, layout: &JointLayout, data: &DataConfig) -> Result<RawSequence> {
    match file.meta.stage {
        Stage::Preprocessed {
            target,
            policy,
            quaternions,
        } => {
            if target == data.target_frames && policy == data.policy && quaternions == data.quaternions {
                return Ok(file.sequence.clone());
            }
            Err(Error::Usage(format!(
                "{} was preprocessed with target {target}, {policy:?}, quaternions {quaternions}; the configuration asks for target {}, {:?}, quaternions {}",
                path.display(),
                data.target_frames,
                data.policy,
                data.quaternions
            )))
        }
        Stage::Raw => {
            let centered = center_and_scale(&file.sequence, layout)?;
            let sampled = uniform_frames(&centered, data.target_frames, data.policy)?.sequence;
            if !data.quaternions {
                return Ok(sampled);
            }
            let parents = build_parents(layout.num_joints(), &layout.edges, layout.root)?;
            let q = quaternion_sequence(&sampled, &parents, None)?;
            Ok(with_quaternions(&sampled, &q)?)
        }
    }
}

fn preprocessed_meta(layout: LayoutVariant, fps: f64, data: &DataConfig) -> SequenceMeta {
    SequenceMeta {
        layout,
        units: "torso".into(),
        fps,
        stage: Stage::Preprocessed {
            target: data.target_frames,
            policy: data.policy,
            quaternions: data.quaternions,
        },
    }
}

/// Writes fixed-length, normalized copies of every sequence plus a manifest
/// pointing at them.
pub fn preprocess(manifest: &Path, out: &Path, cfg: &RunConfig, log: &mut RunLog) -> Result<PathBuf> {
    let loaded = load_manifest(manifest)?;
    fsutil::create_dir(out)?;
    let data = cfg.data;
    let mut written = Vec::with_capacity(loaded.manifest.len());
    for r in &loaded.manifest.records {
        let src = loaded.file_of(r);
        let file = read_sequence(&src, Some(&loaded.layout))?;
        let sequence = prepare(&src, &file, &loaded.layout, &data)?;
        written.push((
            out.join(&r.file),
            SequenceFile {
                meta: preprocessed_meta(file.meta.layout, file.meta.fps, &data),
                sequence,
            },
        ));
    }
    // nothing is overwritten until every input has been read
    for (path, file) in &written {
        write_sequence(path, file)?;
    }
    let path = out.join(MANIFEST_FILE);
    write_manifest(&path, &loaded.manifest, &loaded.layout)?;
    cfg.write_snapshot(out)?;
    log.info(
        "preprocess",
        json!({ "samples": written.len(), "target_frames": data.target_frames }),
    );
    Ok(path)
}

pub fn example_for(loaded: &LoadedManifest, r: &SampleRecord, data: &DataConfig) -> Result<Example> {
    let path = loaded.file_of(r);
    let file = read_sequence(&path, Some(&loaded.layout))?;
    let seq = prepare(&path, &file, &loaded.layout, data)?;
    Ok(Example {
        id: r.id.clone(),
        input: channels_first(&seq.frames)?,
        score: f64::from(r.annotation.total()),
        class_label: r.class_label,
    })
}

pub fn load_examples(loaded: &LoadedManifest, ids: &[String], data: &DataConfig) -> Result<Vec<Example>> {
    let by_id: BTreeMap<&str, &SampleRecord> = loaded.manifest.records.iter().map(|r| (r.id.as_str(), r)).collect();
    ids.iter()
        .map(|id| {
            let r = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::Usage(format!("sample `{id}` is not in {}", loaded.path.display())))?;
            example_for(loaded, r, data)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDocument {
    pub split: String,
    pub report: MetricsReport,
    /// Predict-the-training-mean reference, when the training mean is known.
    pub baseline: Option<Metrics>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub test: EvalDocument,
}

fn write_predictions(path: &Path, examples: &[Example], pred: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(["id", "class", "score", "predicted"]).map_err(fail)?;
    for (e, p) in examples.iter().zip(pred) {
        w.write_record([
            e.id.clone(),
            e.class_label.to_string(),
            e.score.to_string(),
            p.to_string(),
        ])
        .map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
    fsutil::write_atomic(path, &bytes)
}

fn mean_score(examples: &[Example]) -> f64 {
    examples.iter().map(|e| e.score).sum::<f64>() / examples.len().max(1) as f64
}

/// Splits, trains, keeps the best validation epoch and evaluates it on the
/// held-out test split.
pub fn train(manifest: &Path, out: &Path, cfg: &RunConfig, log: &mut RunLog) -> Result<TrainSummary> {
    cfg.validate()?;
    let loaded = load_manifest(manifest)?;
    fsutil::create_dir(out)?;
    cfg.write_snapshot(out)?;
    let split = split_dataset(&loaded.manifest, cfg.split.ratios(), cfg.split.seed)?;
    fsutil::write_json(&out.join(SPLIT_FILE), &split)?;
    log.info(
        "split",
        json!({ "train": split.train.len(), "val": split.val.len(), "test": split.test.len() }),
    );
    let train_ex = load_examples(&loaded, &split.train, &cfg.data)?;
    let val_ex = load_examples(&loaded, &split.val, &cfg.data)?;
    let test_ex = load_examples(&loaded, &split.test, &cfg.data)?;
    let mut model = RastGModel::new(cfg.model_config()?, loaded.layout.clone())?;
    log.info(
        "model",
        json!({ "parameters": model.params().numel(), "preset": cfg.model.preset }),
    );
    let outcome = train::train(&mut model, &train_ex, &val_ex, &cfg.train, |r| {
        log.info(
            "epoch",
            json!({ "epoch": r.epoch, "train_loss": r.train_loss, "val_loss": r.val_loss, "param_norm": r.param_norm }),
        )
    })?;
    model.load_state(&outcome.best_state)?;
    fsutil::write_json(&out.join(HISTORY_FILE), &outcome.history)?;
    let ckpt = Checkpoint::from_model(&model, cfg.data, cfg.train.score_scale, outcome.best_epoch);
    let ckpt_path = out.join(CHECKPOINT_FILE);
    write_checkpoint(&ckpt_path, &ckpt)?;
    let (report, pred) = train::evaluate(&mut model, &test_ex, &cfg.train)?;
    let truth: Vec<f64> = test_ex.iter().map(|e| e.score).collect();
    let baseline = metrics(&truth, &vec![mean_score(&train_ex); truth.len()])?;
    let test = EvalDocument {
        split: "test".into(),
        report,
        baseline: Some(baseline),
    };
    fsutil::write_json(&out.join(METRICS_FILE), &test)?;
    write_predictions(&out.join(PREDICTIONS_FILE), &test_ex, &pred)?;
    log.info(
        "test",
        json!({ "best_epoch": outcome.best_epoch, "metrics": test.report.overall }),
    );
    Ok(TrainSummary {
        checkpoint: ckpt_path,
        best_epoch: outcome.best_epoch,
        history: outcome.history,
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSel {
    All,
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitSel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(Error::Usage(format!("unknown split `{s}` (all, train, val, test)"))),
        }
    }
}

impl SplitSel {
    fn name(self) -> &'static str {
        match self {
            Self::All => "all",
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

/// `cfg` with the settings baked into a checkpoint, which win at inference.
pub fn effective(cfg: &RunConfig, ckpt: &Checkpoint) -> RunConfig {
    let mut e = cfg.clone();
    e.data = ckpt.data;
    e.train.score_scale = ckpt.score_scale;
    e.model.init_seed = ckpt.model.init_seed;
    e
}

/// Scores a checkpoint on one split of a manifest.
pub fn eval(
    checkpoint: &Path,
    manifest: &Path,
    split: SplitSel,
    split_file: Option<&Path>,
    out: &Path,
    cfg: &RunConfig,
    log: &mut RunLog,
) -> Result<EvalDocument> {
    let ckpt = read_checkpoint(checkpoint)?;
    let loaded = load_manifest(manifest)?;
    fsutil::create_dir(out)?;
    effective(cfg, &ckpt).write_snapshot(out)?;
    let parts: Option<DatasetSplit> = split_file.map(fsutil::read_json).transpose()?;
    let ids = match (split, &parts) {
        (SplitSel::All, _) => loaded.manifest.ids(),
        (_, None) => return Err(Error::Usage(format!("--split {} needs --split-file", split.name()))),
        (SplitSel::Train, Some(p)) => p.train.clone(),
        (SplitSel::Val, Some(p)) => p.val.clone(),
        (SplitSel::Test, Some(p)) => p.test.clone(),
    };
    let examples = load_examples(&loaded, &ids, &ckpt.data)?;
    let baseline = match &parts {
        Some(p) if split != SplitSel::Train => {
            let train_ex = load_examples(&loaded, &p.train, &ckpt.data)?;
            let truth: Vec<f64> = examples.iter().map(|e| e.score).collect();
            Some(metrics(&truth, &vec![mean_score(&train_ex); truth.len()])?)
        }
        _ => None,
    };
    let mut model = ckpt.build_model()?;
    let tc = rastg_core::train::TrainConfig {
        score_scale: ckpt.score_scale,
        ..cfg.train.clone()
    };
    let (report, pred) = train::evaluate(&mut model, &examples, &tc)?;
    let doc = EvalDocument {
        split: split.name().into(),
        report,
        baseline,
    };
    fsutil::write_json(&out.join(METRICS_FILE), &doc)?;
    write_predictions(&out.join(PREDICTIONS_FILE), &examples, &pred)?;
    log.info("eval", json!({ "split": doc.split, "metrics": doc.report.overall }));
    Ok(doc)
}

/// Scores one sequence and derives its joint-contribution heatmap.
pub fn assess_sequence(
    model: &mut RastGModel,
    ckpt: &Checkpoint,
    id: &str,
    path: &Path,
    top_k: usize,
) -> Result<HeatmapReport> {
    let file = read_sequence(path, Some(&ckpt.layout))?;
    let seq = prepare(path, &file, &ckpt.layout, &ckpt.data)?;
    let x = channels_first(&seq.frames)?;
    let s = x.shape().to_vec();
    let x = x.reshape(&[1, s[0], s[1], s[2]])?;
    let (scores, features) = model.predict_with_features(&x)?;
    let heatmap = extract_contributions(&features, 0, top_k)?;
    Ok(HeatmapReport::new(
        id,
        scores[0] * ckpt.score_scale,
        heatmap,
        &ckpt.layout,
    ))
}

pub fn assess(
    checkpoint: &Path,
    sequence: &Path,
    id: Option<&str>,
    out: &Path,
    png: bool,
    cfg: &RunConfig,
    log: &mut RunLog,
) -> Result<HeatmapReport> {
    let ckpt = read_checkpoint(checkpoint)?;
    let mut model = ckpt.build_model()?;
    let id = id.map(str::to_string).unwrap_or_else(|| {
        sequence
            .file_stem()
            .map_or_else(|| "sample".into(), |s| s.to_string_lossy().into_owned())
    });
    let report = assess_sequence(&mut model, &ckpt, &id, sequence, DEFAULT_TOP_K)?;
    fsutil::create_dir(out)?;
    effective(cfg, &ckpt).write_snapshot(out)?;
    write_report(&out.join(format!("{id}.json")), &report)?;
    if png {
        write_heatmap_png(&out.join(format!("{id}.png")), &report)?;
    }
    log.info(
        "assess",
        json!({ "id": id, "score": report.score, "raw_score": report.raw_score }),
    );
    Ok(report)
}

/// Assesses every session (optionally of one subject) and summarizes scores
/// per time window.
pub fn report(
    checkpoint: &Path,
    manifest: &Path,
    subject: Option<&str>,
    window: WindowSpec,
    out: &Path,
    png: bool,
    cfg: &RunConfig,
    log: &mut RunLog,
) -> Result<PeriodSummary> {
    let ckpt = read_checkpoint(checkpoint)?;
    let loaded = load_manifest(manifest)?;
    let mut model = ckpt.build_model()?;
    let records: Vec<&SampleRecord> = loaded
        .manifest
        .records
        .iter()
        .filter(|r| subject.is_none_or(|s| r.subject == s))
        .collect();
    if records.is_empty() {
        return Err(Error::Usage(format!(
            "no sessions for subject {subject:?} in {}",
            manifest.display()
        )));
    }
    fsutil::create_dir(&out.join("sessions"))?;
    effective(cfg, &ckpt).write_snapshot(out)?;
    let mut scored = Vec::with_capacity(records.len());
    for r in &records {
        let report = assess_sequence(&mut model, &ckpt, &r.id, &loaded.file_of(r), DEFAULT_TOP_K)?;
        write_report(&out.join("sessions").join(format!("{}.json", r.id)), &report)?;
        if png {
            write_heatmap_png(&out.join("sessions").join(format!("{}.png", r.id)), &report)?;
        }
        scored.push(ScoredSample {
            date: r.session,
            category: r.category,
            score: report.score,
        });
    }
    let summary = period_summary(&scored, window);
    write_summary(&out.join("summary.json"), &summary)?;
    log.info(
        "report",
        json!({ "sessions": scored.len(), "windows": summary.windows.len() }),
    );
    Ok(summary)
}

/// Categories present in a manifest, for quick inspection.
pub fn categories(manifest: &DatasetManifest) -> BTreeMap<Category, usize> {
    let mut out = BTreeMap::new();
    for r in &manifest.records {
        *out.entry(r.category).or_insert(0) += 1;
    }
    out
}
