//! Shift-strength calibration sweep: source drop, teacher advantage, and
//! 15-epoch adaptation stability per candidate scale.

use frla_core::config::RunConfig;
use frla_core::data::{concat, generate, DomainShift, SynthSpec};
use frla_core::train::{adapt, evaluate, pretrain_source, pretrain_teacher};

fn main() {
    let config = RunConfig::default();
    let spec = SynthSpec::default();
    let source_train = generate(&spec, &DomainShift::identity(), 1600, 1, "source", "train").unwrap();
    let source_val = generate(&spec, &DomainShift::identity(), 400, 2, "source", "val").unwrap();
    let src = pretrain_source(&config, &source_train, &source_val).unwrap();
    println!("source val: {:.2}%", src.val_metrics.average);

    for scale in [0.35, 0.45, 0.55] {
        let shift = DomainShift::target_scaled(scale);
        let target = generate(&spec, &shift, 800, 3, "target", "all").unwrap();
        let pooled_a = generate(&spec, &DomainShift::identity(), 1200, 4, "pooled", "train").unwrap();
        let pooled_b = generate(&spec, &shift, 1200, 5, "pooled", "train").unwrap();
        let pooled = concat(&pooled_a, &pooled_b, "pooled", "train").unwrap();

        let src_on_target = evaluate(&src.model, &target, config.batch_size).unwrap();
        let (teacher, _) = pretrain_teacher(&config, &pooled).unwrap();

        let cfg = RunConfig { seed: 101, ..config.clone() };
        let (_m, log) = adapt(&cfg, &src.model, &teacher, &target.unlabeled(), &target).unwrap();
        let accs: Vec<f64> = log.epoch_metrics.iter().map(|(_, m)| m.average).collect();
        let last = *accs.last().unwrap();
        println!(
            "scale {scale}: drop {:.1} (src@target {:.1}%), final {:.1}% (gain {:+.1}), mean B' {:.1}",
            src.val_metrics.average - src_on_target.average,
            src_on_target.average,
            last,
            last - src_on_target.average,
            log.mean_b_prime(),
        );
        println!(
            "  per-class src {:?} -> adapted {:?}",
            src_on_target.per_class_accuracy,
            log.epoch_metrics.last().unwrap().1.per_class_accuracy
        );
        println!("  epoch curve: {:?}", accs.iter().map(|a| (a * 10.0).round() / 10.0).collect::<Vec<_>>());
    }
}
