//! Train with fused flow matching and consistency, then compare held-out
//! error and smoothness across Euler step counts against a plain
//! flow-matching model.
//!
//! `cargo run --release --example one_step_sampling -- [steps]`

use koopflow::inference::{euler_sample, max_jerk, trajectory_mse, SamplerConfig};
use koopflow::synthbench::{Benchmark, GenSpec};
use koopflow::training::TrainConfig;

fn main() -> koopflow::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let bench = Benchmark::new(&GenSpec { noise_std: 0.1, ..Default::default() }, 512, 128)?;
    let held = &bench.heldout_batch;
    let fused = TrainConfig { steps, ..Default::default() };
    for (label, cfg) in [("fused", fused.clone()), ("flow matching only", fused.pure_fm())] {
        let model = bench.train_model(&bench.model_config(), &cfg)?;
        println!("{label}:");
        let mut errors = Vec::new();
        for nfe in [1, 2, 5, 10] {
            let x = euler_sample(&model, &held.cond, &SamplerConfig { nfe, seed: 3 })?;
            let mse = trajectory_mse(&x, &held.actions)?;
            println!("  nfe {nfe:2}: mse {mse:.4}  max jerk {:.3}", max_jerk(&x)?);
            errors.push(mse);
        }
        println!("  1-step / 10-step error ratio {:.2}", errors[0] / errors[3]);
    }
    Ok(())
}
