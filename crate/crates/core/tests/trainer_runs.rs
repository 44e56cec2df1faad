//! End-to-end runs: determinism, resume, evaluation and mode isolation.

use std::fs;
use std::path::Path;

use lma_core::backbone::{BackboneConfig, MultimodalModel};
use lma_core::metrics;
use lma_core::synth::{self, DatasetConfig, Split};
use lma_core::trainer::{self, Mode, RunConfig, Session};
use lma_core::Error;

fn tiny_dataset(dir: &Path) {
    let mut c = DatasetConfig::default_benchmark();
    c.height = 8;
    c.width = 8;
    c.train_samples = 32;
    c.val_samples = 16;
    synth::make_dataset(&c, dir, false).unwrap();
}

fn tiny_run(data: &Path, out: &Path, mode: Mode) -> RunConfig {
    let mut r = RunConfig::new(data, mode);
    r.backbone.image_size = 8;
    r.epochs = 8;
    r.warmup_epochs = 2;
    r.decay_end_epoch = 5;
    r.batch_size = 8;
    r.prune_interval = Some(3);
    r.seed = 5;
    r.output_dir = out.to_path_buf();
    r
}

#[test]
fn reruns_write_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_dataset(&data);
    for mode in [Mode::LmaAdaptive, Mode::LmaFixed, Mode::TwoStream, Mode::Unimodal] {
        let a = trainer::train(&tiny_run(&data, &tmp.path().join("a"), mode)).unwrap();
        let b = trainer::train(&tiny_run(&data, &tmp.path().join("b"), mode)).unwrap();
        let (ma, mb) = (fs::read(&a.metrics_path).unwrap(), fs::read(&b.metrics_path).unwrap());
        assert_eq!(ma, mb, "{mode:?}");
        assert_eq!(a.val, b.val);
        assert!(String::from_utf8(ma).unwrap().starts_with("schema_version,1\n"));
    }
}

#[test]
fn resume_matches_the_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_dataset(&data);
    let out = tmp.path().join("run");
    let mut cfg = tiny_run(&data, &out, Mode::LmaAdaptive);
    cfg.checkpoint_every = Some(1);
    let full = trainer::train(&cfg).unwrap();
    let metrics_bytes = fs::read(&full.metrics_path).unwrap();
    let final_bytes = fs::read(&full.final_checkpoint).unwrap();
    let params = full.session.model.params();
    // mid warm-up, mid decay (masks live) and after the freeze
    for epoch in [1, 4, 6] {
        let resumed = trainer::resume(&trainer::checkpoint_path(&out, epoch)).unwrap();
        assert_eq!(fs::read(&resumed.metrics_path).unwrap(), metrics_bytes, "from epoch {epoch}");
        assert_eq!(fs::read(&resumed.final_checkpoint).unwrap(), final_bytes, "from epoch {epoch}");
        assert_eq!(resumed.val, full.val);
        for ((n, a), (_, b)) in resumed.session.model.params().iter().zip(&params) {
            assert!(a.bit_eq(b), "from epoch {epoch}: {n}");
        }
    }
}

#[test]
fn evaluation_is_repeatable_and_leaves_the_model_alone() {
    let mut c = DatasetConfig::default_benchmark();
    c.val_samples = 64;
    let val = c.generate(Split::Val).unwrap();
    let model = MultimodalModel::build_lma(&BackboneConfig::reference(), 3).unwrap();
    let before = model.clone();
    let a = trainer::evaluate(&model, &val).unwrap();
    let b = trainer::evaluate(&model, &val).unwrap();
    assert_eq!(a, b);
    assert_eq!(model, before);
    assert_eq!(a.samples, 64);
    assert_eq!(a.per_class.len(), 4);
}

#[test]
fn random_init_accuracy_is_near_chance() {
    let c = DatasetConfig::default_benchmark();
    let val = c.generate(Split::Val).unwrap();
    let seeds = 10;
    let mean: f64 = (0..seeds)
        .map(|s| {
            let model = MultimodalModel::build_lma(&BackboneConfig::reference(), s).unwrap();
            trainer::evaluate(&model, &val).unwrap().accuracy
        })
        .sum::<f64>()
        / seeds as f64;
    assert!((mean - 0.25).abs() <= 0.05, "{mean}");
}

#[test]
fn adaptive_run_ends_at_the_target_rank() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_dataset(&data);
    let out = trainer::train(&tiny_run(&data, &tmp.path().join("r"), Mode::LmaAdaptive)).unwrap();
    let n = out.session.model.adaptor_count();
    assert_eq!(out.session.model.active_rank_total(), n * 6);
    let rep = metrics::rank_report(&out.session.model, 9, 6);
    assert!((rep.global_average - 6.0).abs() <= 1e-12);
    let last = out.session.history.last().unwrap();
    assert_eq!((last.active_rank_total, last.budget), (n * 6, n * 6));
}

#[test]
fn unimodal_ignores_the_second_modality() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_dataset(&data);
    let cfg = tiny_run(&data, &tmp.path().join("u"), Mode::Unimodal);
    let train = synth::load_split(&data, Split::Train).unwrap();
    let mut scrambled = train.clone();
    for s in &mut scrambled.samples {
        for v in &mut s.infrared {
            *v = -3.0 * *v + 1.0;
        }
    }
    let mut a = Session::new(&cfg, train.len()).unwrap();
    let mut b = Session::new(&cfg, train.len()).unwrap();
    a.run(&train, None).unwrap();
    b.run(&scrambled, None).unwrap();
    assert_eq!(a.metrics_csv(), b.metrics_csv());
    let rep = metrics::param_report(&a.model);
    assert_eq!(rep.total_params, rep.unimodal_params);
    assert_eq!(rep.adaptor_params, 0);
    assert_eq!(a.model.input_modalities(), 1);
}

#[test]
fn modes_allocate_only_what_they_need() {
    let tmp = tempfile::tempdir().unwrap();
    let uni = MultimodalModel::build_unimodal(&BackboneConfig::reference(), 0).unwrap().total_param_count();
    for mode in [Mode::LmaAdaptive, Mode::LmaFixed, Mode::TwoStream, Mode::Unimodal] {
        let model = tiny_run(tmp.path(), tmp.path(), mode).build_model().unwrap();
        let rep = metrics::param_report(&model);
        assert!(rep.storage_matches_closed_form(), "{mode:?}");
        match mode {
            Mode::LmaAdaptive | Mode::LmaFixed => {
                assert_eq!(model.streams().len(), 1);
                assert_eq!(model.shared_param_count(), uni);
                assert!(rep.adaptor_params > 0);
            }
            Mode::TwoStream => {
                assert_eq!(model.streams().len(), 2);
                assert_eq!((model.adaptor_count(), rep.adaptor_params), (0, 0));
            }
            Mode::Unimodal => assert_eq!(rep.total_params, uni),
        }
    }
}

#[test]
fn fixed_rank_flag_sets_every_adaptor() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_run(tmp.path(), tmp.path(), Mode::LmaFixed);
    cfg.fixed_rank = Some(4);
    let model = cfg.build_model().unwrap();
    assert!(model.adaptors().all(|a| a.rank() == 4 && a.active_rank() == 4));
}

#[test]
fn damaged_files_are_format_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_dataset(&data);
    let out = trainer::train(&tiny_run(&data, &tmp.path().join("r"), Mode::LmaFixed)).unwrap();
    let bytes = fs::read(&out.final_checkpoint).unwrap();

    let cut = tmp.path().join("cut.lmack");
    fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(trainer::load_model(&cut), Err(Error::Format { .. })));

    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    let magic = tmp.path().join("magic.lmack");
    fs::write(&magic, bad).unwrap();
    assert!(matches!(trainer::load_model(&magic), Err(Error::Format { .. })));

    let split = data.join(Split::Train.file_name());
    let raw = fs::read(&split).unwrap();
    fs::write(&split, &raw[..raw.len() - 7]).unwrap();
    assert!(matches!(synth::load_split(&data, Split::Train), Err(Error::Format { .. })));

    assert!(matches!(
        trainer::load_model(&tmp.path().join("missing.lmack")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn mismatched_dataset_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let mut c = DatasetConfig::default_benchmark();
    c.height = 8;
    c.width = 8;
    c.train_samples = 16;
    c.val_samples = 8;
    c.classes = 3;
    synth::make_dataset(&c, &data, false).unwrap();
    let err = trainer::train(&tiny_run(&data, &tmp.path().join("r"), Mode::LmaFixed)).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
    assert!(matches!(
        trainer::train(&tiny_run(&tmp.path().join("nowhere"), &tmp.path().join("r"), Mode::LmaFixed)),
        Err(Error::Io { .. })
    ));
}
