//! Closed-loop execution: plan a short horizon with one Euler step, execute
//! its prefix, observe, replan.
//!
//! `cargo run --release --example receding_horizon -- [steps] [episode_len]`

use koopflow::inference::{rhc_execute, trajectory_mse, RhcConfig, SyntheticEnv};
use koopflow::synthbench::{Benchmark, GenSpec};
use koopflow::training::TrainConfig;

fn main() -> koopflow::Result<()> {
    let mut args = std::env::args().skip(1).map(|s| s.parse().ok());
    let steps = args.next().flatten().unwrap_or(400);
    let episode = args.next().flatten().unwrap_or(48);
    let spec = GenSpec::default();
    let bench = Benchmark::new(&spec, 512, 1)?;
    let model = bench.train_model(&bench.model_config(), &TrainConfig { steps, ..Default::default() })?;

    let start = &bench.heldout[0];
    let events: Vec<bool> = (0..episode).map(|s| s % 11 == 4).collect();
    let env = SyntheticEnv::new(spec, start.context.clone(), events)?;
    let cfg = RhcConfig::default();
    let run = rhc_execute(&env, &model, &cfg)?;

    let ms: Vec<f64> = run.latencies.iter().map(|d| d.as_secs_f64() * 1e3).collect();
    let worst = ms.iter().copied().fold(0.0, f64::max);
    println!(
        "{} plans (horizon {}, executing {}), starts {:?}",
        run.plan_starts.len(),
        cfg.horizon,
        cfg.execute,
        run.plan_starts
    );
    println!("planning latency: mean {:.2} ms, worst {worst:.2} ms", ms.iter().sum::<f64>() / ms.len() as f64);
    let reference = env.reference();
    let err = trajectory_mse(
        &run.executed.clone().reshape([1, episode, 2])?,
        &reference.reshape([1, episode, 2])?,
    )?;
    println!("executed {} steps, mse against the noiseless reference {err:.4}", run.executed.shape()[0]);
    let first: Vec<String> = run.executed.data().chunks(2).take(6).map(|r| format!("({:.2}, {:.2})", r[0], r[1])).collect();
    println!("first steps: {}", first.join(" "));
    Ok(())
}
