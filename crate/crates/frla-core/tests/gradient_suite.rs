//! Central finite-difference checks of every loss term on a tiny model.
//!
//! All selections feeding the losses (confident subsets, patch filtering,
//! rectification counts) depend only on teacher outputs and bank contents,
//! never on the target parameters being perturbed, so each loss is a smooth
//! function of those parameters and finite differences are valid. Both
//! models are briefly pretrained first: an untrained model sits in the
//! near-uniform plateau of the MI losses where gradients sink below
//! finite-difference noise.

use frla_core::bank::MemoryBank;
use frla_core::config::RunConfig;
use frla_core::data::{generate, DomainShift, SynthSpec};
use frla_core::models::{ConvLayerSpec, MockViL, ModelArch, TargetModel};
use frla_core::tensor::{finite_difference_check, Tape, FD_STEP};
use frla_core::train::{build_step_losses, pretrain_source, pretrain_teacher, StepLosses};
use frla_core::{Tensor, TensorId};

fn tiny_arch() -> ModelArch {
    ModelArch {
        image_size: 10,
        in_channels: 3,
        convs: vec![
            ConvLayerSpec { out_channels: 4, kernel: 3, stride: 2 },
            ConvLayerSpec { out_channels: 6, kernel: 3, stride: 1 },
        ],
        embed_dim: 4,
        num_classes: 3,
    }
}

fn tiny_synth() -> SynthSpec {
    SynthSpec {
        image_size: 10,
        num_classes: 3,
        lesion_rules: SynthSpec::default().lesion_rules[..3].to_vec(),
        label_weights: vec![1.0; 3],
        ..SynthSpec::default()
    }
}

struct TinyFixture {
    config: RunConfig,
    model: TargetModel,
    teacher: MockViL,
    images: Tensor,
    ids: Vec<usize>,
    bank: MemoryBank,
    i_max: usize,
}

fn tiny_fixture() -> TinyFixture {
    let config = RunConfig {
        batch_size: 6,
        num_classes: 3,
        image_size: 10,
        pretrain_epochs: 4,
        seed: 40,
        ..RunConfig::default()
    };
    let spec = tiny_synth();
    let source_train = generate(&spec, &DomainShift::identity(), 30, 8, "source", "train").unwrap();
    let source_val = generate(&spec, &DomainShift::identity(), 12, 9, "source", "val").unwrap();
    let pooled = generate(&spec, &DomainShift::target_scaled(0.6), 30, 10, "pooled", "train").unwrap();
    let target = generate(&spec, &DomainShift::target_scaled(0.6), 6, 11, "target", "all").unwrap();

    // pretrain_source builds from the desk preset, so assemble the tiny
    // models directly and reuse its loop via custom arch
    let arch = tiny_arch();
    let model = {
        let tmp = pretrain_source_with_arch(&config, &arch, &source_train, &source_val);
        tmp
    };
    let teacher = pretrain_teacher_with_arch(&config, &arch, &pooled);

    let total_params: usize = model.parameters().iter().map(|p| p.numel()).sum();
    assert!(total_params <= 5000, "tiny model has {total_params} params");

    let ids: Vec<usize> = (0..target.n).collect();
    let images = target.batch_images(&ids).unwrap();
    let bank = MemoryBank::refreshed(&model, &target.unlabeled(), 6, 0).unwrap();

    // Move the model a few distillation steps past the refresh point.
    // Right at refresh the stored rows equal the current predictions and
    // the forgetting term sits at a structural extremum where many
    // coordinates carry gradients below finite-difference resolution.
    let model = {
        let mut m = model;
        let mut opt = frla_core::train::SgdMomentum::new(0.05, 0.0);
        let dis_cfg = RunConfig {
            enable_dis: true,
            enable_fr: false,
            enable_la: false,
            ..config.clone()
        };
        for step in 0..3 {
            let mut tape = Tape::new();
            let staged = m.stage(&mut tape);
            let losses = build_step_losses(
                &mut tape, &staged, &teacher, &bank, &ids, &images, step, 10, &dis_cfg,
            )
            .unwrap();
            tape.backward(losses.total).unwrap();
            let pids = staged.param_ids();
            let mut params = m.parameters_mut();
            for (pid, p) in pids.iter().zip(params.iter_mut()) {
                tape.export_grad(*pid, p);
            }
            opt.step(&mut params).unwrap();
        }
        m
    };

    TinyFixture {
        config,
        model,
        teacher,
        images,
        ids,
        bank,
        i_max: 10,
    }
}

/// Tiny-arch source pretraining: same loop as `pretrain_source` but with an
/// explicit architecture (the public entry point derives it from config).
fn pretrain_source_with_arch(
    config: &RunConfig,
    arch: &ModelArch,
    train: &frla_core::LabeledDataset,
    val: &frla_core::LabeledDataset,
) -> TargetModel {
    // reuse the public loop by pointing the config at the tiny geometry
    let mut c = config.clone();
    c.image_size = arch.image_size;
    c.num_classes = arch.num_classes;
    let out = pretrain_source_custom(&c, arch, train, val);
    out
}

fn pretrain_source_custom(
    config: &RunConfig,
    arch: &ModelArch,
    train: &frla_core::LabeledDataset,
    val: &frla_core::LabeledDataset,
) -> TargetModel {
    // identical recipe to train::pretrain_source, tiny arch
    let _ = val;
    let mut model = TargetModel::init(arch.clone(), config.target_logit_scale, config.seed).unwrap();
    let mut opt = frla_core::train::SgdMomentum::new(0.05, config.momentum);
    for epoch in 0..config.pretrain_epochs {
        for ids in frla_core::data::batch_ids(train.n, config.batch_size, epoch as u64, false) {
            let images = train.batch_images(&ids).unwrap();
            let labels = train.batch_labels(&ids);
            let mut tape = Tape::new();
            let staged = model.stage(&mut tape);
            let f = staged.features(&mut tape, &images).unwrap();
            let probs = staged.image_head(&mut tape, &f).unwrap();
            let k = arch.num_classes;
            let mut onehot = vec![0.0; ids.len() * k];
            for (i, &y) in labels.iter().enumerate() {
                onehot[i * k + y as usize] = 1.0;
            }
            let oh = tape.constant(onehot, vec![ids.len(), k]).unwrap();
            let lp = tape.log_clamped(probs);
            let picked = tape.mul(lp, oh).unwrap();
            let s = tape.sum_all(picked);
            let loss = tape.mul_const(s, -1.0 / ids.len() as f64);
            tape.backward(loss).unwrap();
            let pids = staged.param_ids();
            let mut params = model.parameters_mut();
            for (pid, p) in pids.iter().zip(params.iter_mut()) {
                tape.export_grad(*pid, p);
            }
            opt.step(&mut params).unwrap();
        }
    }
    model
}

fn pretrain_teacher_with_arch(
    config: &RunConfig,
    arch: &ModelArch,
    corpus: &frla_core::LabeledDataset,
) -> MockViL {
    let mut vil = MockViL::init_trainable(arch.clone(), config.teacher_logit_scale, config.seed + 1)
        .unwrap();
    let mut opt = frla_core::train::SgdMomentum::new(0.02, config.momentum);
    for epoch in 0..config.pretrain_epochs {
        for ids in frla_core::data::batch_ids(corpus.n, config.batch_size, 100 + epoch as u64, false) {
            let images = corpus.batch_images(&ids).unwrap();
            let labels = corpus.batch_labels(&ids);
            let mut tape = Tape::new();
            let staged = vil.stage(&mut tape);
            let vis = staged.vision_features(&mut tape, &images).unwrap();
            let f = staged.projected(&mut tape, &vis).unwrap();
            let probs = staged.image_head(&mut tape, &f).unwrap();
            let k = arch.num_classes;
            let mut onehot = vec![0.0; ids.len() * k];
            for (i, &y) in labels.iter().enumerate() {
                onehot[i * k + y as usize] = 1.0;
            }
            let oh = tape.constant(onehot, vec![ids.len(), k]).unwrap();
            let lp = tape.log_clamped(probs);
            let picked = tape.mul(lp, oh).unwrap();
            let s = tape.sum_all(picked);
            let loss = tape.mul_const(s, -1.0 / ids.len() as f64);
            tape.backward(loss).unwrap();
            let pids = staged.pretrain_param_ids();
            let mut params = vil.pretrain_parameters_mut();
            for (pid, p) in pids.iter().zip(params.iter_mut()) {
                tape.export_grad(*pid, p);
            }
            opt.step(&mut params).unwrap();
        }
    }
    vil.freeze();
    vil
}

/// FD-checks d(selected loss)/d(parameter) for every parameter tensor.
fn check_loss(fix: &TinyFixture, cfg: &RunConfig, pick: fn(&StepLosses) -> TensorId) -> f64 {
    let n_params = fix.model.parameters().len();
    let mut worst = 0.0f64;
    for index in 0..n_params {
        let f = |tape: &mut Tape, x: TensorId| {
            let staged = fix.model.stage_with_override(tape, index, x);
            let losses = build_step_losses(
                tape,
                &staged,
                &fix.teacher,
                &fix.bank,
                &fix.ids,
                &fix.images,
                1,
                fix.i_max,
                cfg,
            )?;
            Ok(pick(&losses))
        };
        let x = fix.model.parameters()[index].clone();
        let err = finite_difference_check(f, &x, FD_STEP).unwrap();
        worst = worst.max(err);
    }
    worst
}

fn probe(fix: &TinyFixture, cfg: &RunConfig) -> StepLosses {
    let mut tape = Tape::new();
    let staged = fix.model.stage(&mut tape);
    build_step_losses(
        &mut tape,
        &staged,
        &fix.teacher,
        &fix.bank,
        &fix.ids,
        &fix.images,
        1,
        fix.i_max,
        cfg,
    )
    .unwrap()
}

#[test]
fn distillation_loss_gradients() {
    let fix = tiny_fixture();
    let cfg = RunConfig {
        enable_dis: true,
        enable_fr: false,
        enable_la: false,
        ..fix.config.clone()
    };
    let err = check_loss(&fix, &cfg, |l| l.l_dis);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn forgetting_loss_gradients() {
    let fix = tiny_fixture();
    let cfg = RunConfig {
        enable_dis: false,
        enable_fr: true,
        enable_la: false,
        tau: 0.7,
        ..fix.config.clone()
    };
    // A confident subset whose stored labels all coincide makes the joint
    // near rank-1 and the loss flat in the model; span the classes instead
    // so the gradient check probes a live loss surface.
    let stored = vec![
        0.80, 0.12, 0.08, //
        0.10, 0.78, 0.12, //
        0.08, 0.12, 0.80, //
        0.75, 0.15, 0.10, //
        0.12, 0.76, 0.12, //
        0.40, 0.35, 0.25,
    ];
    let bank = MemoryBank::from_rows(stored, 6, 3, 0).unwrap();
    let fix = TinyFixture { bank, ..fix };
    let losses = probe(&fix, &cfg);
    assert!(losses.b_prime >= 5, "confident subset unexpectedly small");
    let err = check_loss(&fix, &cfg, |l| l.l_fr);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn patch_loss_gradients() {
    let fix = tiny_fixture();
    let cfg = RunConfig {
        enable_dis: false,
        enable_fr: false,
        enable_la: true,
        // nothing clears this bar, so every sample keeps all its patches
        tau: 0.999999,
        ..fix.config.clone()
    };
    let losses = probe(&fix, &cfg);
    assert!(losses.l_patches > 0, "fixture filtered every patch away");
    let err = check_loss(&fix, &cfg, |l| l.l_la);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn total_loss_gradients() {
    let fix = tiny_fixture();
    let cfg = RunConfig {
        enable_dis: true,
        enable_fr: true,
        enable_la: true,
        tau: 0.5,
        ..fix.config.clone()
    };
    let losses = probe(&fix, &cfg);
    assert!(losses.b_prime > 0 && losses.l_patches > 0);
    let err = check_loss(&fix, &cfg, |l| l.total);
    assert!(err < 1e-4, "max relative error {err}");
}
