//! Benchmark calibration probe: builds the full-scale datasets, pretrains
//! both models, runs one adaptation, and prints the numbers the defaults
//! are tuned against. Not part of the shipped pipeline — run with
//! `cargo run --release -p frla-core --example bringup`.

use frla_core::config::RunConfig;
use frla_core::data::{concat, generate, DomainShift, SynthSpec};
use frla_core::train::{adapt, evaluate, pretrain_source, pretrain_teacher};
use std::time::Instant;

fn main() {
    let config = RunConfig::default();
    let spec = SynthSpec::default();
    let t0 = Instant::now();

    let source_train = generate(&spec, &DomainShift::identity(), 1600, 1, "source", "train").unwrap();
    let source_val = generate(&spec, &DomainShift::identity(), 400, 2, "source", "val").unwrap();
    let target = generate(&spec, &DomainShift::target_default(), 800, 3, "target", "all").unwrap();
    let pooled_a = generate(&spec, &DomainShift::identity(), 1200, 4, "pooled", "train").unwrap();
    let pooled_b = generate(&spec, &DomainShift::target_default(), 1200, 5, "pooled", "train").unwrap();
    let pooled = concat(&pooled_a, &pooled_b, "pooled", "train").unwrap();
    println!("datasets generated in {:.1}s", t0.elapsed().as_secs_f64());

    let t1 = Instant::now();
    let src = pretrain_source(&config, &source_train, &source_val).unwrap();
    println!(
        "source pretrain {:.1}s, val avg {:.2}%, per-class {:?}",
        t1.elapsed().as_secs_f64(),
        src.val_metrics.average,
        src.val_metrics.per_class_accuracy
    );
    println!("source epoch losses: {:?}", &src.epoch_losses);

    let src_on_target = evaluate(&src.model, &target, config.batch_size).unwrap();
    println!(
        "source on target: avg {:.2}%, per-class {:?} (drop {:.1} pts)",
        src_on_target.average,
        src_on_target.per_class_accuracy,
        src.val_metrics.average - src_on_target.average
    );

    let t2 = Instant::now();
    let (teacher, teacher_losses) = pretrain_teacher(&config, &pooled).unwrap();
    println!(
        "teacher pretrain {:.1}s, losses {:?}",
        t2.elapsed().as_secs_f64(),
        &teacher_losses[teacher_losses.len().saturating_sub(3)..]
    );
    let teacher_on_target = evaluate_teacher(&teacher, &target, config.batch_size);
    println!("teacher on target: avg {:.2}%, per-class {:?}", teacher_on_target.0, teacher_on_target.1);

    let t3 = Instant::now();
    let run_cfg = RunConfig { seed: 101, ..config.clone() };
    let (_adapted, log) = adapt(
        &run_cfg,
        &src.model,
        &teacher,
        &target.unlabeled(),
        &target,
    )
    .unwrap();
    let last = &log.epoch_metrics.last().unwrap().1;
    println!(
        "adaptation {:.1}s ({} iters): final avg {:.2}%, per-class {:?}",
        t3.elapsed().as_secs_f64(),
        log.reports.len(),
        last.average,
        last.per_class_accuracy
    );
    println!(
        "gain over source: {:+.2} pts; mean B' {:.1}, mean l {:.1}",
        last.average - src_on_target.average,
        log.mean_b_prime(),
        log.mean_l_patches()
    );
    for (e, m) in &log.epoch_metrics {
        println!("  epoch {e}: avg {:.2}%", m.average);
    }
}

fn evaluate_teacher(
    teacher: &frla_core::MockViL,
    ds: &frla_core::LabeledDataset,
    batch_size: usize,
) -> (f64, Vec<f64>) {
    use frla_core::tensor::Tape;
    let k = teacher.arch.num_classes;
    let ids: Vec<usize> = (0..ds.n).collect();
    let mut preds = Vec::with_capacity(ds.n);
    for chunk in ids.chunks(batch_size) {
        let batch = ds.batch_images(chunk).unwrap();
        let mut tape = Tape::new();
        let probs = frla_core::models::vil_forward_image(&mut tape, teacher, &batch).unwrap();
        for row in tape.value(probs).chunks(k) {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            preds.push(best);
        }
    }
    let m = frla_core::train::metrics_from_predictions(&preds, ds.labels(), k).unwrap();
    (m.average, m.per_class_accuracy)
}
