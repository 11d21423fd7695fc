//! Grid with centered inputs: pretraining length × shift scale × teacher
//! sharpness, watching drop window, stability, and final gain.

use frla_core::config::RunConfig;
use frla_core::data::{concat, generate, DomainShift, SynthSpec};
use frla_core::train::{adapt, evaluate, pretrain_source, pretrain_teacher};

fn main() {
    let spec = SynthSpec::default();
    let source_train = generate(&spec, &DomainShift::identity(), 1600, 1, "source", "train").unwrap();
    let source_val = generate(&spec, &DomainShift::identity(), 400, 2, "source", "val").unwrap();

    for pe in [30usize, 40] {
        let pcfg = RunConfig {
            pretrain_epochs: pe,
            ..RunConfig::default()
        };
        let src = pretrain_source(&pcfg, &source_train, &source_val).unwrap();
        println!("pretrain {pe}: val {:.1}%", src.val_metrics.average);
        for sscale in [0.5, 0.7] {
            let shift = DomainShift::target_scaled(sscale);
            let target = generate(&spec, &shift, 800, 3, "target", "all").unwrap();
            let pooled_a =
                generate(&spec, &DomainShift::identity(), 1200, 4, "pooled", "train").unwrap();
            let pooled_b = generate(&spec, &shift, 1200, 5, "pooled", "train").unwrap();
            let pooled = concat(&pooled_a, &pooled_b, "pooled", "train").unwrap();
            let src_t = evaluate(&src.model, &target, 16).unwrap();
            println!(
                "  shift {sscale}: src@target {:.1}% (drop {:.1}) {:?}",
                src_t.average,
                src.val_metrics.average - src_t.average,
                src_t.per_class_accuracy
            );
            for tscale in [10.0, 4.0] {
                let tcfg = RunConfig {
                    teacher_logit_scale: tscale,
                    ..pcfg.clone()
                };
                let (teacher, _) = pretrain_teacher(&tcfg, &pooled).unwrap();
                let cfg = RunConfig {
                    teacher_logit_scale: tscale,
                    seed: 101,
                    ..pcfg.clone()
                };
                let (_m, log) = adapt(&cfg, &src.model, &teacher, &target.unlabeled(), &target).unwrap();
                let accs: Vec<f64> = log
                    .epoch_metrics
                    .iter()
                    .map(|(_, m)| (m.average * 10.0).round() / 10.0)
                    .collect();
                let last = accs.last().unwrap();
                println!(
                    "    t{tscale}: gain {:+.1} {:?} B'~{:.1}",
                    last - src_t.average,
                    accs,
                    log.mean_b_prime()
                );
            }
        }
    }
}
