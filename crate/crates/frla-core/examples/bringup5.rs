//! Distribution-level look at what enters the distillation loss at step 0.

use frla_core::config::RunConfig;
use frla_core::data::{concat, generate, DomainShift, SynthSpec};
use frla_core::losses::{joint_distribution, mutual_information};
use frla_core::models::{target_forward_image, vil_forward_image};
use frla_core::tensor::Tape;
use frla_core::train::{evaluate, pretrain_source, pretrain_teacher};

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
    println!("src@target {:.1}%", evaluate(&src.model, &target, 16).unwrap().average);

    let ids: Vec<usize> = (0..16).collect();
    let batch = target.batch_images(&ids).unwrap();
    let mut tape = Tape::new();
    let p = target_forward_image(&mut tape, &src.model, &batch).unwrap();
    let q = vil_forward_image(&mut tape, &teacher, &batch).unwrap();
    println!("student rows:");
    for row in tape.value(p).chunks(4).take(6) {
        println!("  {:?}", row.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    }
    println!("teacher rows:");
    for row in tape.value(q).chunks(4).take(6) {
        println!("  {:?}", row.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    }
    let jd = joint_distribution(&mut tape, p, q).unwrap();
    println!(
        "joint: {:?}",
        tape.value(jd.joint)
            .iter()
            .map(|v| (v * 1000.0).round() / 1000.0)
            .collect::<Vec<_>>()
    );
    let mi = mutual_information(&mut tape, &jd).unwrap();
    println!("MI of batch 0: {:.4} (log K = {:.4})", tape.scalar(mi).unwrap(), 4f64.ln());
    println!("labels: {:?}", target.batch_labels(&ids));
}
