//! Step-level dynamics of the collapse: parameter drift, gradient scale,
//! prediction sharpness, and accuracy over the first epochs.


use frla_core::config::RunConfig;
use frla_core::data::{batch_ids, concat, generate, DomainShift, SynthSpec};
use frla_core::models::target_forward_image;
use frla_core::tensor::Tape;
use frla_core::train::{evaluate, pretrain_source, pretrain_teacher, AdaptEngine};

fn main() {
    let config = RunConfig::default();
    let spec = SynthSpec::default();
    let shift = DomainShift::target_scaled(0.35);
    let source_train = generate(&spec, &DomainShift::identity(), 1600, 1, "source", "train").unwrap();
    let source_val = generate(&spec, &DomainShift::identity(), 400, 2, "source", "val").unwrap();
    let target = generate(&spec, &shift, 800, 3, "target", "all").unwrap();
    let pooled_a = generate(&spec, &DomainShift::identity(), 1200, 4, "pooled", "train").unwrap();
    let pooled_b = generate(&spec, &shift, 1200, 5, "pooled", "train").unwrap();
    let pooled = concat(&pooled_a, &pooled_b, "pooled", "train").unwrap();

    let src = pretrain_source(&config, &source_train, &source_val).unwrap();
    let (teacher, _) = pretrain_teacher(&config, &pooled).unwrap();

    let view = target.unlabeled();
    let cfg = RunConfig { seed: 101, ..config.clone() };
    let mut engine = AdaptEngine::new(&cfg, &src.model, &teacher, &view, 750).unwrap();
    let p0: Vec<Vec<f64>> = engine.model.parameters().iter().map(|p| p.values().to_vec()).collect();

    let mut iter = 0usize;
    for epoch in 0..4 {
        engine.refresh_bank(&view, epoch).unwrap();
        for ids in batch_ids(view.n, cfg.batch_size, 1000 + epoch as u64, false) {
            let images = view.batch_images(&ids).unwrap();
            let report = engine.step(&ids, &images, iter).unwrap();
            if iter % 10 == 0 {
                // gradient scale snapshot
                let gmax: f64 = engine
                    .model
                    .parameters()
                    .iter()
                    .filter_map(|p| p.grad())
                    .flat_map(|g| g.iter().map(|v| v.abs()))
                    .fold(0.0, f64::max);
                // prediction sharpness on a fixed probe batch
                let probe: Vec<usize> = (0..16).collect();
                let pb = view.batch_images(&probe).unwrap();
                let mut tape = Tape::new();
                let probs = target_forward_image(&mut tape, &engine.model, &pb).unwrap();
                let mean_max: f64 = tape
                    .value(probs)
                    .chunks(4)
                    .map(|r| r.iter().cloned().fold(0.0, f64::max))
                    .sum::<f64>()
                    / 16.0;
                println!(
                    "iter {iter}: l_dis {:+.4} l_fr {:+.4} l_la {:+.4} B'={} gmax {:.3e} sharp {:.3}",
                    report.l_dis, report.l_fr, report.l_la, report.b_prime, gmax, mean_max
                );
            }
            iter += 1;
        }
        let drift: f64 = engine
            .model
            .parameters()
            .iter()
            .zip(&p0)
            .map(|(p, q)| {
                let num: f64 = p.values().iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                let den: f64 = q.iter().map(|b| b * b).sum();
                (num / den).sqrt()
            })
            .fold(0.0, f64::max);
        let m = evaluate(&engine.model, &target, 16).unwrap();
        println!(
            "epoch {}: avg {:.1}%, per-class {:?}, max relative drift {:.3}",
            epoch + 1,
            m.average,
            m.per_class_accuracy,
            drift
        );
    }
}
