mod common;

use std::fs;

use stoplab::eval::{probe_state, FeatureSource, ProbeOptions};
use stoplab::model::{encode_records, ModelState};
use stoplab::trainer::{
    checkpoint_records, load_datasets, loss_endpoints, parse_sweep, pretrain, read_metrics, run_ablation_suite,
    PretrainOptions, ABLATION_HEADER,
};
use stoplab::{Error, RunConfig};

fn opts_in(dir: &std::path::Path) -> PretrainOptions {
    PretrainOptions {
        run_dir: Some(dir.to_path_buf()),
        ..Default::default()
    }
}

#[test]
fn default_config_halves_loss_in_200_steps() {
    let mut cfg = RunConfig::default();
    cfg.set("train.steps", "200").unwrap();
    let data = load_datasets(&cfg).unwrap();
    let out = pretrain(&cfg, &data.train, &PretrainOptions::default()).unwrap();
    let (first, last) = loss_endpoints(&out.metrics, 10);
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn rerun_with_same_seed_is_byte_identical() {
    let mut cfg = common::small_run_config(6);
    cfg.set("train.ckpt_every", "3").unwrap();
    let data = load_datasets(&cfg).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pretrain(&cfg, &data.train, &opts_in(a.path())).unwrap();
    pretrain(&cfg, &data.train, &opts_in(b.path())).unwrap();
    for name in ["metrics.csv", "final.bin", "ckpt_step3.bin", "config.resolved"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
    let rows = read_metrics(&a.path().join("metrics.csv")).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.step).collect::<Vec<_>>(),
        (0..6).collect::<Vec<_>>()
    );

    cfg.set("train.seed", "1").unwrap();
    let c = tempfile::tempdir().unwrap();
    pretrain(&cfg, &data.train, &opts_in(c.path())).unwrap();
    assert_ne!(
        fs::read(a.path().join("final.bin")).unwrap(),
        fs::read(c.path().join("final.bin")).unwrap()
    );
}

#[test]
fn resume_is_bit_exact() {
    let mut cfg = common::small_run_config(8);
    cfg.set("train.ckpt_every", "4").unwrap();
    let data = load_datasets(&cfg).unwrap();
    let full = tempfile::tempdir().unwrap();
    let whole = pretrain(&cfg, &data.train, &opts_in(full.path())).unwrap();

    let resumed = pretrain(
        &cfg,
        &data.train,
        &PretrainOptions {
            resume: Some(full.path().join("ckpt_step4.bin")),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(resumed.step, 8);
    assert_eq!(
        encode_records(&checkpoint_records(&resumed.state, &resumed.opt, 8)),
        fs::read(full.path().join("final.bin")).unwrap()
    );
    for (a, b) in resumed.metrics.iter().zip(&whole.metrics[4..]) {
        assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "step {}", a.step);
    }

    // Interrupt with stop_after, then continue in the same directory.
    let split = tempfile::tempdir().unwrap();
    let opts = PretrainOptions {
        stop_after: Some(5),
        ..opts_in(split.path())
    };
    pretrain(&cfg, &data.train, &opts).unwrap();
    let ckpt = split.path().join("ckpt_step5.bin");
    assert!(ckpt.exists());
    pretrain(
        &cfg,
        &data.train,
        &PretrainOptions {
            resume: Some(ckpt),
            ..opts_in(split.path())
        },
    )
    .unwrap();
    assert_eq!(
        fs::read(split.path().join("metrics.csv")).unwrap(),
        fs::read(full.path().join("metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(split.path().join("final.bin")).unwrap(),
        fs::read(full.path().join("final.bin")).unwrap()
    );
}

#[test]
fn resume_past_the_end_is_a_config_error() {
    let cfg = common::small_run_config(4);
    let data = load_datasets(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    pretrain(&cfg, &data.train, &opts_in(dir.path())).unwrap();
    let mut shorter = cfg.clone();
    shorter.set("train.steps", "2").unwrap();
    let err = pretrain(
        &shorter,
        &data.train,
        &PretrainOptions {
            resume: Some(dir.path().join("final.bin")),
            ..Default::default()
        },
    )
    .err()
    .unwrap();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn diverging_run_aborts_with_dump() {
    let mut cfg = common::small_run_config(50);
    cfg.set("optim.lr", "1e30").unwrap();
    cfg.set("optim.warmup_frac", "0").unwrap();
    let data = load_datasets(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = pretrain(&cfg, &data.train, &opts_in(dir.path())).err().unwrap();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    assert_eq!(err.exit_code(), 1);
    let dump = fs::read_to_string(dir.path().join("nan_dump.txt")).unwrap();
    assert!(dump.contains("lr = ") && dump.contains("grad_norm."), "{dump}");
}

#[test]
fn empty_training_set_is_rejected() {
    let mut cfg = common::small_run_config(2);
    cfg.set("data.n_train", "0").unwrap();
    let data = load_datasets(&cfg).unwrap();
    assert!(matches!(
        pretrain(&cfg, &data.train, &PretrainOptions::default()),
        Err(Error::Config(_))
    ));
}

#[test]
fn every_embedding_variant_trains() {
    let data = load_datasets(&common::small_run_config(3)).unwrap();
    for (embed, noise) in [
        ("sincos", "masked_only"),
        ("learned", "masked_only"),
        ("stop", "both"),
        ("stop", "context_only"),
        ("stop", "none"),
        ("fixed_cov", "masked_only"),
    ] {
        let mut cfg = common::small_run_config(3);
        cfg.set("stop.embed_kind", embed).unwrap();
        cfg.set("stop.noise_target", noise).unwrap();
        cfg.set("optim.reg", "l1").unwrap();
        cfg.set("optim.reg_coeff", "0.01").unwrap();
        let out = pretrain(&cfg, &data.train, &PretrainOptions::default()).unwrap();
        assert!(out.metrics.iter().all(|r| r.loss.is_finite()), "{embed}/{noise}");
    }
}

#[test]
fn ablation_suite_writes_rows_and_records_failures() {
    let cfg = common::small_run_config(3);
    let data = load_datasets(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let sweep = parse_sweep("sigma=0.1,-1").unwrap();
    let rows = run_ablation_suite(&cfg, &sweep, &[0, 1], &data, Some(dir.path())).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows[..2].iter().all(|r| r.status == "ok" && r.best.is_finite()));
    assert!(rows[2..].iter().all(|r| r.status.starts_with("error")));
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), ABLATION_HEADER);
    assert_eq!(csv.lines().count(), 5);
    assert!(dir.path().join("sigma_0.1_seed1/metrics.csv").exists());
    assert!(parse_sweep("nonsense=1").is_err());
}

#[test]
fn trained_and_random_encoders_probe_differently() {
    let mut cfg = common::small_run_config(60);
    cfg.set("data.n_train", "1024").unwrap();
    cfg.set("data.n_test", "256").unwrap();
    let data = load_datasets(&cfg).unwrap();
    let trained = pretrain(&cfg, &data.train, &PretrainOptions::default()).unwrap().state;
    let random = ModelState::<f32>::init(&cfg.model, cfg.train.seed).unwrap();
    let opts = ProbeOptions {
        epochs: 50,
        lr: 0.5,
        l2: 0.0,
    };
    let a = probe_state(&trained, &data.train, &data.test, FeatureSource::LastLayer, &opts).unwrap();
    let b = probe_state(&random, &data.train, &data.test, FeatureSource::LastLayer, &opts).unwrap();
    assert_ne!((a.train_acc, a.test_acc), (b.train_acc, b.test_acc));
}
