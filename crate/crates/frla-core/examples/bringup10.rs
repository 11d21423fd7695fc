//! Decompose the collapse-from-90% case: augmentation sensitivity, loss
//! ablations, and first-steps trajectory.

use frla_core::config::RunConfig;
use frla_core::data::{augment, batch_ids, concat, generate, DomainShift, SynthSpec};
use frla_core::models::target_forward_image;
use frla_core::tensor::{Tape, Tensor};
use frla_core::train::{adapt, evaluate, pretrain_source, pretrain_teacher};

fn main() {
    let spec = SynthSpec::default();
    let shift = DomainShift::target_scaled(0.5);
    let source_train = generate(&spec, &DomainShift::identity(), 1600, 1, "source", "train").unwrap();
    let source_val = generate(&spec, &DomainShift::identity(), 400, 2, "source", "val").unwrap();
    let target = generate(&spec, &shift, 800, 3, "target", "all").unwrap();
    let pooled_a = generate(&spec, &DomainShift::identity(), 1200, 4, "pooled", "train").unwrap();
    let pooled_b = generate(&spec, &shift, 1200, 5, "pooled", "train").unwrap();
    let pooled = concat(&pooled_a, &pooled_b, "pooled", "train").unwrap();

    let pcfg = RunConfig { pretrain_epochs: 30, ..RunConfig::default() };
    let src = pretrain_source(&pcfg, &source_train, &source_val).unwrap();
    let src_t = evaluate(&src.model, &target, 16).unwrap();
    println!("src@target {:.1}% {:?}", src_t.average, src_t.per_class_accuracy);

    // accuracy on augmented target images
    let mut correct = 0usize;
    let mut hist = [0usize; 4];
    for id in 0..200 {
        let img = augment(target.unlabeled().image(id), 3, 32, 32, 777 + id as u64);
        let t = Tensor::new(vec![1, 3, 32, 32], img).unwrap();
        let mut tape = Tape::new();
        let probs = target_forward_image(&mut tape, &src.model, &t).unwrap();
        let row = tape.value(probs);
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        hist[best] += 1;
        if best == target.labels()[id] as usize {
            correct += 1;
        }
    }
    println!(
        "source on AUGMENTED target: {:.1}% (pred hist {:?})",
        correct as f64 / 2.0,
        hist
    );

    let (teacher, _) = pretrain_teacher(&pcfg, &pooled).unwrap();

    for (name, dis, fr, la) in [
        ("dis only", true, false, false),
        ("fr only", false, true, false),
        ("la only", false, false, true),
        ("dis+fr", true, true, false),
    ] {
        let cfg = RunConfig {
            enable_dis: dis,
            enable_fr: fr,
            enable_la: la,
            epochs: 4,
            seed: 101,
            pretrain_epochs: 30,
            ..RunConfig::default()
        };
        let (_m, log) = adapt(&cfg, &src.model, &teacher, &target.unlabeled(), &target).unwrap();
        let accs: Vec<f64> = log
            .epoch_metrics
            .iter()
            .map(|(_, m)| (m.average * 10.0).round() / 10.0)
            .collect();
        println!("{name}: {:?}", accs);
    }

    // per-iteration accuracy for dis-only over the first epoch
    let cfg = RunConfig {
        enable_fr: false,
        enable_la: false,
        epochs: 1,
        seed: 101,
        pretrain_epochs: 30,
        ..RunConfig::default()
    };
    let view = target.unlabeled();
    let mut engine =
        frla_core::train::AdaptEngine::new(&cfg, &src.model, &teacher, &view, 50).unwrap();
    engine.refresh_bank(&view, 0).unwrap();
    for (iter, ids) in batch_ids(view.n, 16, 12345, false).into_iter().take(20).enumerate() {
        let mut values = Vec::new();
        for (slot, &id) in ids.iter().enumerate() {
            values.extend(augment(
                view.image(id),
                3,
                32,
                32,
                900_000 + (iter * 16 + slot) as u64,
            ));
        }
        let images = Tensor::new(vec![ids.len(), 3, 32, 32], values).unwrap();
        let report = engine.step(&ids, &images, iter).unwrap();
        if iter % 4 == 0 {
            let m = evaluate(&engine.model, &target, 16).unwrap();
            println!(
                "iter {iter}: acc {:.1}% l_dis {:+.3}",
                m.average, report.l_dis
            );
        }
    }
}
