use std::fs;
use std::process::Command;

use overlearn::control::FeedbackAction;
use overlearn::harness::{
    self, checkpoint_bytes_with_version, emit_results, load_result_json, params_equivalent_first_width,
    run_experiment, run_seed, runs_csv, summary_path, ExperimentConfig, ExperimentKind,
    OutputFormat, RUNS_CSV_HEADER, SUMMARY_CSV_HEADER,
};
use overlearn::nn::{param_count, InputMode, NetConfig, NetworkPolicy};
use overlearn::problems::{merton_problem, production_problem, MertonParams, ProductionParams};
use overlearn::Error;
use rand::{Rng, SeedableRng};

fn small_experiment(kind: ExperimentKind) -> ExperimentConfig {
    ExperimentConfig {
        name: "small".into(),
        kind,
        dims: vec![2, 3],
        sample_sizes: vec![128, 256],
        hidden_widths: vec![6, 6, 6],
        epochs: vec![1, 3],
        runs: 3,
        base_seed: 11,
        threads: Some(1),
        ..ExperimentConfig::default()
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let inst = merton_problem(&MertonParams::default_with_dim(4), 20.0).unwrap();
    let p = &inst.problem;
    let mut cfg = NetConfig::new(vec![7, 5], InputMode::StateNoise, 3);
    cfg.per_time = false;
    let policy = NetworkPolicy::init(p, &cfg).unwrap();
    let action = FeedbackAction::Network(policy.clone());
    let path = dir.path().join("nested/model.ckpt");
    harness::save_checkpoint(&action, &path).unwrap();
    let back = harness::load_checkpoint(&path).unwrap();
    assert_eq!(back, policy);
    let loaded = harness::load_action(&path, p).unwrap();

    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let x: Vec<f64> = (0..p.state_dim).map(|_| r.gen_range(0.5..1.5)).collect();
        let z: Vec<f64> = (0..p.noise_dim).map(|_| r.gen_range(-0.5..0.5)).collect();
        let a = action.evaluate(p, 1, &x, &z).unwrap();
        let b = loaded.evaluate(p, 1, &x, &z).unwrap();
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}

#[test]
fn production_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let inst = production_problem(&ProductionParams::default()).unwrap();
    let policy = NetworkPolicy::init(&inst.problem, &NetConfig::new(vec![3], InputMode::Noise, 9)).unwrap();
    let path = dir.path().join("p.ckpt");
    harness::save_checkpoint(&FeedbackAction::Network(policy.clone()), &path).unwrap();
    assert_eq!(harness::load_checkpoint(&path).unwrap(), policy);
    let merton = merton_problem(&MertonParams::default_with_dim(2), 20.0).unwrap();
    assert!(harness::load_action(&path, &merton.problem).is_err());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let inst = merton_problem(&MertonParams::default_with_dim(2), 20.0).unwrap();
    let policy = NetworkPolicy::init(&inst.problem, &NetConfig::new(vec![4], InputMode::Noise, 1)).unwrap();
    let bytes = harness::checkpoint_bytes(&policy);

    let truncated = dir.path().join("truncated.ckpt");
    fs::write(&truncated, &bytes[..bytes.len() - 11]).unwrap();
    assert!(matches!(
        harness::load_checkpoint(&truncated),
        Err(Error::CorruptCheckpoint { .. })
    ));

    let flipped = dir.path().join("flipped.ckpt");
    let mut b = bytes.clone();
    let k = b.len() - 20;
    b[k] ^= 0x40;
    fs::write(&flipped, &b).unwrap();
    assert!(matches!(
        harness::load_checkpoint(&flipped),
        Err(Error::CorruptCheckpoint { .. })
    ));

    let future = dir.path().join("future.ckpt");
    fs::write(&future, checkpoint_bytes_with_version(&policy, 2)).unwrap();
    match harness::load_checkpoint(&future) {
        Err(e @ Error::UnsupportedVersion { found: 2, supported: 1 }) => {
            let msg = e.to_string();
            assert!(msg.contains('2') && msg.contains('1'), "{msg}");
        }
        other => panic!("expected a version error, got {other:?}"),
    }

    let garbage = dir.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    assert!(harness::load_checkpoint(&garbage).is_err());
    assert!(matches!(
        harness::load_checkpoint(&dir.path().join("missing.ckpt")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn params_equivalent_cells_match_reference_count() {
    let cfg = ExperimentConfig {
        kind: ExperimentKind::ParamsEquivalentSweep,
        dims: vec![10, 40, 100],
        reference_dim: Some(100),
        ..ExperimentConfig::default()
    };
    let target = param_count(&[100, 10, 10, 10, 100]);
    let cells = cfg.cells().unwrap();
    assert_eq!(cells.len(), 3);
    for c in &cells {
        let diff = c.param_count().abs_diff(target);
        assert!(diff * 2 <= c.dim + 1 + 10, "d={} params={} target={target}", c.dim, c.param_count());
        assert_eq!(&c.hidden_widths[1..], &[10, 10]);
    }
    assert_eq!(cells[2].hidden_widths, vec![10, 10, 10]);
    assert!(cells[0].hidden_widths[0] > cells[1].hidden_widths[0]);
    assert_eq!(
        params_equivalent_first_width(10, &[10, 10, 10], target).unwrap(),
        cells[0].hidden_widths[0]
    );
}

#[test]
fn seed_lineage_is_unique() {
    let mut seen = std::collections::HashSet::new();
    for base in [0u64, 1, 42] {
        for cell in 0..5 {
            for run in 0..20 {
                for role in 1..=5 {
                    assert!(seen.insert(run_seed(base, cell, run, role)));
                }
            }
        }
    }
}

#[test]
fn experiment_outputs_round_trip_and_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_experiment(ExperimentKind::DimensionSweep);
    let result = run_experiment(&cfg).unwrap();
    assert_eq!(result.cells.len(), 2);
    for (c, cell) in result.cells.iter().enumerate() {
        assert_eq!(cell.runs.len(), 3);
        for (r, run) in cell.runs.iter().enumerate() {
            assert_eq!((run.cell, run.run), (c, r));
            assert!(run.is_ok(), "{:?}", run.error);
        }
        assert_eq!(cell.aggregate.runs_ok, 3);
        assert!(cell.aggregate.gap_sigma.is_some());
    }

    let json = dir.path().join("out.json");
    emit_results(&result, OutputFormat::Json, &json).unwrap();
    let back = load_result_json(&json).unwrap();
    assert_eq!(back, result);

    let csv = dir.path().join("out.csv");
    emit_results(&result, OutputFormat::Csv, &csv).unwrap();
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), RUNS_CSV_HEADER);
    assert_eq!(text.lines().count(), 1 + 2 * (3 + 1));
    for line in text.lines().skip(1) {
        assert_eq!(line.split(',').count(), 8, "{line}");
    }
    let summary = fs::read_to_string(summary_path(&csv)).unwrap();
    assert_eq!(summary.lines().next().unwrap(), SUMMARY_CSV_HEADER);
    assert_eq!(summary_path(&csv).file_name().unwrap(), "out.summary.csv");

    let parallel = run_experiment(&ExperimentConfig {
        threads: Some(3),
        ..cfg.clone()
    })
    .unwrap();
    assert_eq!(runs_csv(&parallel), runs_csv(&result));
}

#[test]
fn sweep_kinds_produce_expected_cells() {
    let agg = small_experiment(ExperimentKind::AggressiveEpochs).cells().unwrap();
    assert_eq!(agg.len(), 2);
    assert!(agg.iter().all(|c| c.dim == 2 && c.n == 128));
    let sizes = small_experiment(ExperimentKind::SampleSizeSweep).cells().unwrap();
    assert_eq!(sizes.iter().map(|c| c.n).collect::<Vec<_>>(), vec![128, 256]);
    assert_eq!(small_experiment(ExperimentKind::Single).cells().unwrap().len(), 1);

    let result = run_experiment(&ExperimentConfig {
        runs: 1,
        ..small_experiment(ExperimentKind::AggressiveEpochs)
    })
    .unwrap();
    assert_eq!(result.cells[0].runs[0].stop_epoch, 1);
    assert_eq!(result.cells[1].runs[0].stop_epoch, 3);
    assert_eq!(result.cells[0].aggregate.gap_sigma, None);
}

#[test]
fn cli_round_trip() {
    let exe = env!("CARGO_BIN_EXE_overlearn");
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run.toml");
    fs::write(
        &run,
        "n = 200\nseed = 4\nfixed_epochs = 2\n[problem]\nkind = \"merton\"\nd = 2\n[network]\nhidden_widths = [5]\ninput_mode = \"noise\"\n",
    )
    .unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let ok = |args: &[&std::ffi::OsStr]| {
        let out = Command::new(exe)
            .args(args)
            .env("OVERLEARN_THREADS", "1")
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let train = ok(&["train".as_ref(), run.as_os_str(), "--out".as_ref(), ckpt.as_os_str()]);
    let report: serde_json::Value = serde_json::from_str(&train).unwrap();
    assert_eq!(report["stop_epoch"], 2);
    let eval = ok(&["eval".as_ref(), run.as_os_str(), "--checkpoint".as_ref(), ckpt.as_os_str()]);
    let eval: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert!(eval["gap"]["p_in"].is_number());
    let diag = ok(&["diag".as_ref(), run.as_os_str()]);
    let diag: serde_json::Value = serde_json::from_str(&diag).unwrap();
    assert!(diag["v_star"]["value"].as_f64().unwrap() < diag["oracle_loss"].as_f64().unwrap());

    let exp = dir.path().join("exp.toml");
    fs::write(
        &exp,
        "kind = \"single\"\ndims = [2]\nsample_sizes = [64]\nruns = 2\n[train]\nmax_epochs = 3\n",
    )
    .unwrap();
    let csv = dir.path().join("res.csv");
    ok(&["experiment".as_ref(), exp.as_os_str(), "--out".as_ref(), csv.as_os_str()]);
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with(RUNS_CSV_HEADER));

    let bad = Command::new(exe)
        .args(["train".as_ref(), dir.path().join("absent.toml").as_os_str()])
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("absent.toml"));
}
