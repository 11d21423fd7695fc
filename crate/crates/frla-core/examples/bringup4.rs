//! Teacher pretraining stability probe across shift scales and lrs.

use frla_core::config::RunConfig;
use frla_core::data::{concat, generate, DomainShift, SynthSpec};
use frla_core::train::pretrain_teacher;

fn main() {
    let spec = SynthSpec::default();
    for scale in [0.35, 0.45, 0.55, 1.0] {
        let shift = DomainShift::target_scaled(scale);
        let pooled_a = generate(&spec, &DomainShift::identity(), 1200, 4, "pooled", "train").unwrap();
        let pooled_b = generate(&spec, &shift, 1200, 5, "pooled", "train").unwrap();
        let pooled = concat(&pooled_a, &pooled_b, "pooled", "train").unwrap();
        for lr in [1e-3, 5e-4, 3e-4] {
            let config = RunConfig {
                lr,
                ..RunConfig::default()
            };
            match pretrain_teacher(&config, &pooled) {
                Ok((_, losses)) => println!(
                    "scale {scale} lr {lr}: ok, last losses {:?}",
                    &losses[losses.len().saturating_sub(2)..]
                ),
                Err(e) => println!("scale {scale} lr {lr}: FAILED ({e})"),
            }
        }
    }
}
