mod common;

use common::*;
use embedtrack::pipeline::{self, tta_merge, PipelineConfig, SymmetryOp};
use embedtrack::Error;

#[test]
fn every_transform_inverts_exactly() {
    let p = random_prediction(&mut rng(1), 5, 7);
    for op in SymmetryOp::ALL {
        let t = op.apply(&p);
        assert_eq!((t.height(), t.width()), op.output_dims(5, 7));
        assert_eq!(op.inverse().apply(&t), p, "{}", op.name());
    }
}

#[test]
fn quarter_turns_compose() {
    let p = random_prediction(&mut rng(2), 4, 6);
    let four = (0..4).fold(p.clone(), |acc, _| SymmetryOp::Rot90.apply(&acc));
    assert_eq!(four, p);
    let two = SymmetryOp::Rot90.apply(&SymmetryOp::Rot90.apply(&p));
    assert_eq!(two, SymmetryOp::Rot180.apply(&p));
    let hv = SymmetryOp::FlipH.apply(&SymmetryOp::FlipV.apply(&p));
    assert_eq!(hv, SymmetryOp::Rot180.apply(&p));
}

#[test]
fn merging_consistent_augmentations_is_exact() {
    let p = random_prediction(&mut rng(3), 6, 9);
    let outputs: Vec<_> = SymmetryOp::ALL.iter().map(|&op| (op, op.apply(&p))).collect();
    assert_eq!(tta_merge(&outputs).unwrap(), p);
}

#[test]
fn tiled_replay_is_identity() {
    // Offsets are rescaled by W / crop and back, which is exact only when
    // the ratio is a power of two.
    for (size, crop) in [(512, 256), (64, 32)] {
        let (full, out) = replay_round_trip(size, crop, size as u64);
        assert_eq!(out, full, "{size} / {crop}");
    }
    for (size, crop) in [(300, 256), (200, 256), (96, 32)] {
        let (full, out) = replay_round_trip(size, crop, size as u64);
        let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff(full.track.data(), out.track.data()) <= 1e-15, "{size} / {crop}");
        assert!(diff(full.seg_t.offsets.data(), out.seg_t.offsets.data()) <= 1e-15);
        assert_eq!(full.seg_t.bandwidth, out.seg_t.bandwidth);
        assert_eq!(full.seg_tm1.seediness, out.seg_tm1.seediness);
    }
}

#[test]
fn pipeline_recovers_synthetic_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let (data, preds) = small_dataset(dir.path(), 6);
    let cfg = PipelineConfig {
        crop_size: 64,
        dataset: Some(data),
        predictions: preds,
        output: dir.path().join("out"),
        overlays: true,
        ..Default::default()
    };
    let out = pipeline::run_pipeline(&cfg).unwrap();
    let r = out.report.unwrap();
    assert_eq!((r.seg, r.det, r.tra), (1.0, 1.0, 1.0));
    let files = dir_bytes(&cfg.output);
    for name in ["mask000.tif", "mask005.tif", "res_track.txt", "report.txt", "report.json", "overlay000.png"] {
        assert!(files.contains_key(name), "{name} missing");
    }
    let kv = String::from_utf8(files["report.txt"].clone()).unwrap();
    assert!(kv.contains("metrics=computed\n") && kv.contains("tra=1.000000000\n"));
}

#[test]
fn pipeline_output_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (data, preds) = small_dataset(dir.path(), 5);
    let run = |name: &str, workers| {
        let cfg = PipelineConfig {
            crop_size: 48,
            dataset: Some(data.clone()),
            predictions: preds.clone(),
            output: dir.path().join(name),
            workers: Some(workers),
            ..Default::default()
        };
        pipeline::run_pipeline(&cfg).unwrap();
        dir_bytes(&cfg.output)
    };
    let first = run("a", 1);
    assert_eq!(first, run("b", 1));
    assert_eq!(first, run("c", 4));
}

#[test]
fn missing_ground_truth_skips_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (_, preds) = small_dataset(dir.path(), 3);
    let cfg = PipelineConfig {
        crop_size: 64,
        predictions: preds,
        output: dir.path().join("out"),
        ..Default::default()
    };
    let out = pipeline::run_pipeline(&cfg).unwrap();
    assert!(out.report.is_none());
    let kv = std::fs::read_to_string(cfg.output.join("report.txt")).unwrap();
    assert!(kv.contains("metrics=skipped\n"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(cfg.output.join("report.json")).unwrap()).unwrap();
    assert!(json["metrics"].is_null());
    assert_eq!(json["frames"], 3);
}

#[test]
fn empty_prediction_directory_is_no_input() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("pred");
    std::fs::create_dir(&empty).unwrap();
    let cfg = PipelineConfig {
        predictions: empty,
        output: dir.path().join("out"),
        ..Default::default()
    };
    assert!(matches!(pipeline::run_pipeline(&cfg), Err(Error::NoInput(_))));
    let missing = PipelineConfig {
        predictions: dir.path().join("nope"),
        ..cfg
    };
    assert!(matches!(pipeline::run_pipeline(&missing), Err(Error::NoInput(_))));
}

#[test]
fn gap_in_pair_files_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (_, preds) = small_dataset(dir.path(), 4);
    std::fs::remove_file(preds.join("pair002.etk")).unwrap();
    assert!(matches!(pipeline::pair_files(&preds), Err(Error::Format { .. })));
}

#[test]
fn track_subcommand_path_links_written_masks() {
    let dir = tempfile::tempdir().unwrap();
    let (data, preds) = small_dataset(dir.path(), 4);
    let cfg = PipelineConfig {
        crop_size: 64,
        dataset: Some(data),
        predictions: preds.clone(),
        output: dir.path().join("out"),
        ..Default::default()
    };
    let out = pipeline::run_pipeline(&cfg).unwrap();
    let relinked = pipeline::track_masks(&cfg.output, &preds).unwrap();
    assert_eq!(relinked.graph.tracks, out.lineage.graph.tracks);
}
