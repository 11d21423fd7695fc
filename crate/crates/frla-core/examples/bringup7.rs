//! Stabilizer comparison at scale 0.35: which knobs let alignment finish
//! before saturation freezes the student.

use frla_core::config::RunConfig;
use frla_core::data::{concat, generate, DomainShift, SynthSpec};
use frla_core::train::{adapt, evaluate, pretrain_source, pretrain_teacher};

fn main() {
    let spec = SynthSpec::default();
    let shift = DomainShift::target_scaled(0.35);
    let source_train = generate(&spec, &DomainShift::identity(), 1600, 1, "source", "train").unwrap();
    let source_val = generate(&spec, &DomainShift::identity(), 400, 2, "source", "val").unwrap();
    let target = generate(&spec, &shift, 800, 3, "target", "all").unwrap();
    let pooled_a = generate(&spec, &DomainShift::identity(), 1200, 4, "pooled", "train").unwrap();
    let pooled_b = generate(&spec, &shift, 1200, 5, "pooled", "train").unwrap();
    let pooled = concat(&pooled_a, &pooled_b, "pooled", "train").unwrap();

    let base = RunConfig::default();
    let src = pretrain_source(&base, &source_train, &source_val).unwrap();
    let src_t = evaluate(&src.model, &target, 16).unwrap();
    println!("src@target {:.1}% {:?}", src_t.average, src_t.per_class_accuracy);

    let mut teachers = Vec::new();
    for scale in [10.0, 5.0, 3.0] {
        let cfg = RunConfig { teacher_logit_scale: scale, ..base.clone() };
        let (t, _) = pretrain_teacher(&cfg, &pooled).unwrap();
        teachers.push((scale, t));
    }

    for (tscale, teacher) in &teachers {
        for (name, dis, fr, la) in [
            ("full", true, true, true),
            ("dis-only", true, false, false),
        ] {
            let cfg = RunConfig {
                teacher_logit_scale: *tscale,
                enable_dis: dis,
                enable_fr: fr,
                enable_la: la,
                epochs: 8,
                seed: 101,
                ..base.clone()
            };
            let (_m, log) = adapt(&cfg, &src.model, teacher, &target.unlabeled(), &target).unwrap();
            let accs: Vec<f64> = log
                .epoch_metrics
                .iter()
                .map(|(_, m)| (m.average * 10.0).round() / 10.0)
                .collect();
            let final_pc = &log.epoch_metrics.last().unwrap().1.per_class_accuracy;
            println!("teacher scale {tscale} {name}: {:?} final per-class {:?}", accs, final_pc);
        }
    }
}
