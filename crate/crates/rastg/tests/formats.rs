use std::path::Path;

use rastg::annotations::{read_annotations, write_annotations};
use rastg::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use rastg::config::{DataConfig, RunConfig};
use rastg::error::Error;
use rastg::manifest::{load_manifest, parse_manifest, to_json, write_manifest};
use rastg::report::{read_report, render_heatmap, write_report};
use rastg::seqfile::{decode, encode, read_sequence, write_sequence, SequenceFile, SequenceMeta};
use rastg_core::feedback::{extract_contributions, HeatmapReport};
use rastg_core::model::{ModelConfig, RastGModel};
use rastg_core::preprocess::RawSequence;
use rastg_core::skeleton::{JointLayout, LayoutVariant};
use rastg_core::synth::{synth_generate, SynthConfig};
use rastg_core::NdArray;

fn small_synth(n: usize) -> rastg_core::synth::SynthDataset {
    synth_generate(&SynthConfig {
        n,
        seed: 3,
        min_frames: 20,
        max_frames: 30,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn raw_file(frames: NdArray) -> SequenceFile {
    SequenceFile {
        meta: SequenceMeta::raw(LayoutVariant::Basic25, 30.0),
        sequence: RawSequence::new("S001", Some(4), frames).unwrap(),
    }
}

#[test]
fn sequence_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_synth(2);
    let file = raw_file(ds.samples[0].sequence.frames.clone());
    let path = dir.path().join("a.rseq");
    write_sequence(&path, &file).unwrap();
    let back = read_sequence(&path, Some(&ds.layout)).unwrap();
    assert_eq!(back, file);
    let bits = |f: &SequenceFile| f.sequence.frames.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&file));
}

#[test]
fn truncated_or_padded_sequences_are_rejected() {
    let bytes = encode(&raw_file(NdArray::ones(&[3, 25, 3]))).unwrap();
    let p = Path::new("x.rseq");
    let short = decode(p, &bytes[..bytes.len() - 5]).unwrap_err();
    assert!(matches!(short, Error::Format { .. }), "{short}");
    let mut long = bytes.clone();
    long.extend_from_slice(&[0; 8]);
    assert!(matches!(decode(p, &long), Err(Error::Format { .. })));
    assert!(matches!(decode(p, b"RSEQ 2\nend\n"), Err(Error::Format { .. })));
}

#[test]
fn joint_count_mismatch_is_a_layout_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wide.rseq");
    let mut file = raw_file(NdArray::ones(&[4, 26, 3]));
    file.meta.layout = LayoutVariant::Custom;
    write_sequence(&path, &file).unwrap();
    let basic = JointLayout::build(LayoutVariant::Basic25).unwrap();
    assert!(matches!(read_sequence(&path, Some(&basic)), Err(Error::Layout { .. })));
}

#[test]
fn non_finite_coordinates_are_data_errors() {
    let mut frames = NdArray::ones(&[2, 25, 3]);
    frames.data_mut()[7] = f64::NAN;
    let sequence = RawSequence {
        subject: "S".into(),
        class_label: None,
        frames,
    };
    let file = SequenceFile {
        meta: SequenceMeta::raw(LayoutVariant::Basic25, 30.0),
        sequence,
    };
    match encode(&file).map(|b| decode(Path::new("nan.rseq"), &b)) {
        Err(_) | Ok(Err(_)) => {}
        Ok(Ok(_)) => panic!("non-finite payload accepted"),
    }
}

#[test]
fn manifest_and_annotations_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_synth(6);
    for s in &ds.samples {
        write_sequence(&dir.path().join(&s.record.file), &raw_file(s.sequence.frames.clone())).unwrap();
    }
    let manifest = ds.manifest();
    let path = dir.path().join("manifest.json");
    write_manifest(&path, &manifest, &ds.layout).unwrap();
    let loaded = load_manifest(&path).unwrap();
    assert_eq!(loaded.manifest, manifest);
    assert_eq!(loaded.layout, ds.layout);

    let csv = dir.path().join("annotations.csv");
    write_annotations(&csv, &manifest).unwrap();
    let ann = read_annotations(&csv).unwrap();
    for r in &manifest.records {
        assert_eq!(ann[&r.id], r.annotation);
    }

    std::fs::remove_file(dir.path().join(&manifest.records[2].file)).unwrap();
    assert!(matches!(load_manifest(&path), Err(Error::MissingFile(_))));
}

#[test]
fn manifest_errors_name_the_record() {
    let ds = small_synth(3);
    let text = to_json(&ds.manifest(), &ds.layout).unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["records"][1]["class_label"] = 99.into();
    let msg = parse_manifest(Path::new("m.json"), &doc.to_string())
        .unwrap_err()
        .to_string();
    assert!(msg.contains(&ds.samples[1].record.id), "{msg}");

    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["extra"] = 1.into();
    assert!(parse_manifest(Path::new("m.json"), &doc.to_string())
        .unwrap_err()
        .to_string()
        .contains("extra"));

    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["version"] = 2.into();
    assert!(matches!(
        parse_manifest(Path::new("m.json"), &doc.to_string()),
        Err(Error::Format { .. })
    ));
}

#[test]
fn annotation_sum_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.csv");
    std::fs::write(
        &path,
        "id,item1,item2,item3,item4,item5,item6,item7,item8,item9,item10,total\ns1,5,5,5,5,5,5,5,5,5,5,49\n",
    )
    .unwrap();
    let msg = read_annotations(&path).unwrap_err().to_string();
    assert!(msg.contains("s1"), "{msg}");
}

fn tiny_checkpoint() -> Checkpoint {
    let layout = JointLayout::build(LayoutVariant::Basic25).unwrap();
    let mut cfg = ModelConfig::desk(3);
    cfg.expected_frames = Some(16);
    let model = RastGModel::new(cfg, layout).unwrap();
    let data = DataConfig {
        target_frames: 16,
        ..DataConfig::default()
    };
    Checkpoint::from_model(&model, data, 50.0, 3)
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let ckpt = tiny_checkpoint();
    write_checkpoint(&path, &ckpt).unwrap();
    assert_eq!(read_checkpoint(&path).unwrap(), ckpt);

    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 40] ^= 1;
    let msg = Checkpoint::decode(&path, &bytes).unwrap_err().to_string();
    assert!(msg.contains("version 1") && msg.contains("checksum"), "{msg}");

    let mut future = std::fs::read(&path).unwrap();
    future[8] = 9;
    let msg = Checkpoint::decode(&path, &future).unwrap_err().to_string();
    assert!(msg.contains("unsupported version 9"), "{msg}");
    assert!(Checkpoint::decode(&path, b"not a checkpoint").is_err());
}

#[test]
fn checkpoint_rebuilds_identical_predictions() {
    let ckpt = tiny_checkpoint();
    let mut a = ckpt.build_model().unwrap();
    let mut b = Checkpoint::decode(Path::new("c"), &ckpt.encode())
        .unwrap()
        .build_model()
        .unwrap();
    let x = NdArray::from_fn(&[2, 3, 16, 25], |i| ((i * 37) % 11) as f64 / 11.0 - 0.5);
    assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());
}

#[test]
fn report_round_trip_and_rendering() {
    let dir = tempfile::tempdir().unwrap();
    let layout = JointLayout::build(LayoutVariant::Basic25).unwrap();
    let features = NdArray::from_fn(&[1, 4, 6, 25], |i| (i % 7) as f64);
    let heat = extract_contributions(&features, 0, 5).unwrap();
    let report = HeatmapReport::new("s1", 31.5, heat, &layout);
    let path = dir.path().join("s1.json");
    write_report(&path, &report).unwrap();
    assert_eq!(read_report(&path).unwrap(), report);
    let img = render_heatmap(&report, 4);
    assert_eq!((img.width(), img.height()), (100, 24));

    let mut wrong = report.clone();
    wrong.version = 7;
    write_report(&path, &wrong).unwrap();
    assert!(matches!(read_report(&path), Err(Error::Format { .. })));
}

#[test]
fn config_layers_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.toml");
    std::fs::write(&file, "[train]\nepochs = 7\nlr = 0.01\n").unwrap();
    let cfg = RunConfig::resolve(
        Some(&file),
        &["train.lr=0.02".into(), "model.preset=\"canonical\"".into()],
    )
    .unwrap();
    assert_eq!(cfg.train.epochs, 7);
    assert_eq!(cfg.train.lr, 0.02);
    assert_eq!(cfg.model.preset, "canonical");
    assert_eq!(cfg.train.batch_size, 64);
    cfg.write_snapshot(dir.path()).unwrap();
    assert_eq!(RunConfig::read_snapshot(dir.path()).unwrap(), cfg);

    assert!(matches!(
        RunConfig::resolve(None, &["train.nope=1".into()]),
        Err(Error::Usage(_))
    ));
    assert!(matches!(
        RunConfig::resolve(None, &["train.epochs".into()]),
        Err(Error::Usage(_))
    ));
}

#[test]
fn defaults_are_the_reference_hyperparameters() {
    let t = RunConfig::default().train;
    assert_eq!((t.epochs, t.batch_size, t.lr, t.delta), (200, 64, 0.003, 0.1));
    assert_eq!(RunConfig::default().data.target_frames, 288);
}
