//! Collapse diagnosis: which loss term drives the student to a constant
//! prediction, and what do the loss values do while it happens.

use frla_core::config::RunConfig;
use frla_core::data::{concat, generate, DomainShift, SynthSpec};
use frla_core::train::{adapt, evaluate, pretrain_source, pretrain_teacher};

fn main() {
    let config = RunConfig::default();
    let spec = SynthSpec::default();
    let source_train = generate(&spec, &DomainShift::identity(), 1600, 1, "source", "train").unwrap();
    let source_val = generate(&spec, &DomainShift::identity(), 400, 2, "source", "val").unwrap();
    let target = generate(&spec, &DomainShift::target_default(), 800, 3, "target", "all").unwrap();
    let pooled_a = generate(&spec, &DomainShift::identity(), 1200, 4, "pooled", "train").unwrap();
    let pooled_b = generate(&spec, &DomainShift::target_default(), 1200, 5, "pooled", "train").unwrap();
    let pooled = concat(&pooled_a, &pooled_b, "pooled", "train").unwrap();

    let src = pretrain_source(&config, &source_train, &source_val).unwrap();
    let src_on_target = evaluate(&src.model, &target, config.batch_size).unwrap();
    println!("source on target: {:.2}%", src_on_target.average);
    let (teacher, _) = pretrain_teacher(&config, &pooled).unwrap();

    for (name, dis, fr, la, epochs, lr) in [
        ("dis only, 3 epochs", true, false, false, 3usize, 1e-3),
        ("dis only, lr 1e-4", true, false, false, 3, 1e-4),
        ("dis+fr", true, true, false, 3, 1e-3),
        ("dis+la", true, false, true, 3, 1e-3),
    ] {
        let cfg = RunConfig {
            enable_dis: dis,
            enable_fr: fr,
            enable_la: la,
            epochs,
            lr,
            seed: 101,
            ..config.clone()
        };
        let (_m, log) = adapt(&cfg, &src.model, &teacher, &target.unlabeled(), &target).unwrap();
        print!("{name}: accs");
        for (e, m) in &log.epoch_metrics {
            print!(" e{e}={:.1}", m.average);
        }
        println!();
        print!("  l_dis:");
        for i in [0, 1, 2, 5, 10, 20, 40, 49] {
            if i < log.reports.len() {
                print!(" i{}={:.4}", i, log.reports[i].l_dis);
            }
        }
        println!();
        print!("  l_fr/l_la:");
        for i in [0, 5, 20, 49] {
            if i < log.reports.len() {
                print!(" i{}=({:.4},{:.4})", i, log.reports[i].l_fr, log.reports[i].l_la);
            }
        }
        println!();
    }
}
