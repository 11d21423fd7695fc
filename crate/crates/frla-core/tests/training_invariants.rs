//! End-to-end wiring invariants of the adaptation loop at micro scale:
//! determinism, frozen teacher and bank, loss bookkeeping, schedule
//! realization, and the no-label guarantee.

use frla_core::config::RunConfig;
use frla_core::data::{batch_ids, generate, DomainShift, SynthSpec};
use frla_core::models::{MockViL, ModelArch, TargetModel};
use frla_core::train::{adapt, evaluate, AdaptEngine};
use frla_core::{Error, LabeledDataset};

fn micro_spec() -> SynthSpec {
    SynthSpec {
        image_size: 32,
        ..SynthSpec::default()
    }
}

fn micro_config() -> RunConfig {
    RunConfig {
        epochs: 2,
        batch_size: 8,
        pretrain_epochs: 2,
        seed: 11,
        ..RunConfig::default()
    }
}

struct Micro {
    config: RunConfig,
    source: TargetModel,
    teacher: MockViL,
    target: LabeledDataset,
}

fn micro_fixture() -> Micro {
    let config = micro_config();
    let spec = micro_spec();
    let target = generate(&spec, &DomainShift::target_default(), 40, 5, "target", "all").unwrap();
    let arch = ModelArch::desk_default(config.image_size, config.num_classes).unwrap();
    let source = TargetModel::init(arch.clone(), config.target_logit_scale, 3).unwrap();
    let mut teacher = MockViL::init_trainable(arch, config.teacher_logit_scale, 4).unwrap();
    teacher.freeze();
    Micro {
        config,
        source,
        teacher,
        target,
    }
}

#[test]
fn zero_epochs_returns_source_bit_exactly() {
    let m = micro_fixture();
    let config = RunConfig {
        epochs: 0,
        ..m.config.clone()
    };
    let (model, log) = adapt(&config, &m.source, &m.teacher, &m.target.unlabeled(), &m.target).unwrap();
    for (a, b) in model.parameters().iter().zip(m.source.parameters()) {
        assert_eq!(a.values(), b.values());
    }
    assert!(log.reports.is_empty());
    assert_eq!(log.epoch_metrics.len(), 1);
}

#[test]
fn adaptation_is_deterministic() {
    let m = micro_fixture();
    let run = || adapt(&m.config, &m.source, &m.teacher, &m.target.unlabeled(), &m.target).unwrap();
    let (model_a, log_a) = run();
    let (model_b, log_b) = run();
    for (a, b) in model_a.parameters().iter().zip(model_b.parameters()) {
        assert_eq!(a.values(), b.values());
    }
    assert_eq!(log_a.reports, log_b.reports);
    assert_eq!(log_a.epoch_metrics, log_b.epoch_metrics);
}

#[test]
fn teacher_parameters_survive_adaptation_bit_exactly() {
    let m = micro_fixture();
    let before: Vec<Vec<f64>> = m.teacher.parameters().iter().map(|t| t.values().to_vec()).collect();
    let _ = adapt(&m.config, &m.source, &m.teacher, &m.target.unlabeled(), &m.target).unwrap();
    for (t, b) in m.teacher.parameters().iter().zip(&before) {
        assert_eq!(t.values(), b.as_slice());
    }
}

#[test]
fn unfrozen_teacher_is_rejected() {
    let m = micro_fixture();
    let thawed = MockViL::init_trainable(m.teacher.arch.clone(), 10.0, 4).unwrap();
    let err = adapt(&m.config, &m.source, &thawed, &m.target.unlabeled(), &m.target).unwrap_err();
    assert!(matches!(err, Error::Usage { .. }));
}

#[test]
fn loss_wiring_holds_per_iteration() {
    let m = micro_fixture();
    let (_, log) = adapt(&m.config, &m.source, &m.teacher, &m.target.unlabeled(), &m.target).unwrap();
    let bpe = batch_ids(m.target.n, m.config.batch_size, 0, false).len();
    assert_eq!(log.reports.len(), m.config.epochs * bpe);
    for r in &log.reports {
        assert_eq!(r.l_im, r.l_dis + r.l_fr);
        assert_eq!(r.total, r.l_im + r.l_la);
        assert!(r.total.is_finite());
    }
}

#[test]
fn disabled_terms_are_exact_zero() {
    let m = micro_fixture();
    let config = RunConfig {
        enable_fr: false,
        enable_la: false,
        ..m.config.clone()
    };
    let (_, log) = adapt(&config, &m.source, &m.teacher, &m.target.unlabeled(), &m.target).unwrap();
    for r in &log.reports {
        assert_eq!(r.l_fr, 0.0);
        assert_eq!(r.l_la, 0.0);
        assert!(r.l_dis != 0.0);
    }

    let config = RunConfig {
        enable_dis: false,
        enable_la: false,
        ..m.config.clone()
    };
    let (_, log) = adapt(&config, &m.source, &m.teacher, &m.target.unlabeled(), &m.target).unwrap();
    for r in &log.reports {
        assert_eq!(r.l_dis, 0.0);
        assert_eq!(r.l_la, 0.0);
    }
}

#[test]
fn patch_loss_is_zero_for_entire_second_half() {
    let m = micro_fixture();
    let config = RunConfig {
        epochs: 4,
        ..m.config.clone()
    };
    let (_, log) = adapt(&config, &m.source, &m.teacher, &m.target.unlabeled(), &m.target).unwrap();
    let i_max = log.reports.len();
    for (i, r) in log.reports.iter().enumerate() {
        if (i as f64) >= i_max as f64 / 2.0 {
            assert_eq!(r.l_la, 0.0, "iteration {i}");
            assert_eq!(r.lesion_weight, 0.0);
            assert_eq!(r.l_patches, 0);
        }
    }
    // the first half carries real patch supervision somewhere
    assert!(log.reports.iter().any(|r| r.l_patches > 0));
}

#[test]
fn eval_labels_never_touch_the_model() {
    let m = micro_fixture();
    // swap in a completely different labeled evaluation set; the trained
    // model must come out identical because labels only reach `evaluate`
    let other_eval = generate(
        &micro_spec(),
        &DomainShift::target_default(),
        24,
        77,
        "target",
        "other",
    )
    .unwrap();
    let (model_a, log_a) =
        adapt(&m.config, &m.source, &m.teacher, &m.target.unlabeled(), &m.target).unwrap();
    let (model_b, log_b) =
        adapt(&m.config, &m.source, &m.teacher, &m.target.unlabeled(), &other_eval).unwrap();
    for (a, b) in model_a.parameters().iter().zip(model_b.parameters()) {
        assert_eq!(a.values(), b.values());
    }
    assert_eq!(log_a.reports, log_b.reports);
    assert_ne!(log_a.epoch_metrics, log_b.epoch_metrics);
}

#[test]
fn bank_contents_are_stable_between_refreshes() {
    let m = micro_fixture();
    let view = m.target.unlabeled();
    let mut engine = AdaptEngine::new(&m.config, &m.source, &m.teacher, &view, 10).unwrap();
    let snapshot = engine.bank.clone();
    for (iter, ids) in batch_ids(view.n, m.config.batch_size, 99, false)
        .into_iter()
        .take(3)
        .enumerate()
    {
        let images = view.batch_images(&ids).unwrap();
        engine.step(&ids, &images, iter).unwrap();
    }
    assert_eq!(engine.bank, snapshot);
}

#[test]
fn frozen_bank_flag_skips_later_refreshes() {
    let m = micro_fixture();
    let config = RunConfig {
        freeze_bank: true,
        epochs: 2,
        ..m.config.clone()
    };
    // with the flag the run completes and still trains
    let (model, log) = adapt(&config, &m.source, &m.teacher, &m.target.unlabeled(), &m.target).unwrap();
    assert_eq!(log.reports.len(), 2 * batch_ids(40, 8, 0, false).len());
    let changed = model
        .parameters()
        .iter()
        .zip(m.source.parameters())
        .any(|(a, b)| a.values() != b.values());
    assert!(changed);
}

#[test]
fn evaluation_is_augmentation_free_and_order_stable() {
    let m = micro_fixture();
    let a = evaluate(&m.source, &m.target, 8).unwrap();
    let b = evaluate(&m.source, &m.target, 5).unwrap();
    assert_eq!(a, b, "batch size must not affect evaluation");
}

#[test]
fn diverging_run_reports_training_error() {
    let m = micro_fixture();
    let config = RunConfig {
        lr: 1e18,
        epochs: 2,
        ..m.config.clone()
    };
    match adapt(&config, &m.source, &m.teacher, &m.target.unlabeled(), &m.target) {
        Err(Error::Training(msg)) => assert!(msg.contains("iteration")),
        Err(other) => panic!("unexpected error {other}"),
        Ok((model, _)) => {
            // if the run survives, every parameter must still be finite
            for p in model.parameters() {
                assert!(p.is_finite());
            }
        }
    }
}
