//! Step-by-step anatomy of the fr-only crash: per-parameter gradient
//! scales, relative weight movement, and probe accuracy after each step.

use frla_core::config::RunConfig;
use frla_core::data::{augment, batch_ids, concat, generate, DomainShift, SynthSpec};
use frla_core::tensor::Tensor;
use frla_core::train::{evaluate, pretrain_source, pretrain_teacher, AdaptEngine};

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
    let (teacher, _) = pretrain_teacher(&pcfg, &pooled).unwrap();

    let wnorms: Vec<f64> = src
        .model
        .parameters()
        .iter()
        .map(|p| (p.values().iter().map(|v| v * v).sum::<f64>() / p.numel() as f64).sqrt())
        .collect();
    println!("rms weight norms: {:?}", wnorms.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>());

    let cfg = RunConfig {
        enable_dis: false,
        enable_fr: true,
        enable_la: false,
        epochs: 1,
        seed: 101,
        pretrain_epochs: 30,
        ..RunConfig::default()
    };
    let view = target.unlabeled();
    let mut engine = AdaptEngine::new(&cfg, &src.model, &teacher, &view, 50).unwrap();
    engine.refresh_bank(&view, 0).unwrap();

    for (iter, ids) in batch_ids(view.n, 16, 4242, false).into_iter().take(12).enumerate() {
        let before: Vec<Vec<f64>> = engine.model.parameters().iter().map(|p| p.values().to_vec()).collect();
        let mut values = Vec::new();
        for (slot, &id) in ids.iter().enumerate() {
            values.extend(augment(view.image(id), 3, 32, 32, 31_000 + (iter * 16 + slot) as u64));
        }
        let images = Tensor::new(vec![ids.len(), 3, 32, 32], values).unwrap();
        let report = engine.step(&ids, &images, iter).unwrap();
        let rel: Vec<f64> = engine
            .model
            .parameters()
            .iter()
            .zip(&before)
            .map(|(p, b)| {
                let num: f64 = p.values().iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                let den: f64 = b.iter().map(|y| y * y).sum();
                (num / den).sqrt()
            })
            .collect();
        let gmax: Vec<f64> = engine
            .model
            .parameters()
            .iter()
            .map(|p| p.grad().map(|g| g.iter().fold(0.0f64, |a, v| a.max(v.abs()))).unwrap_or(0.0))
            .collect();
        let m = evaluate(&engine.model, &target, 16).unwrap();
        println!(
            "iter {iter}: l_fr {:+.3} B'={} acc {:.1}% relstep {:?} gmax {:?}",
            report.l_fr,
            report.b_prime,
            m.average,
            rel.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
            gmax.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>(),
        );
    }
}
