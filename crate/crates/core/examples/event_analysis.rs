//! Correlate the transient branch's frame-to-frame energy with the event
//! channel and compare it with blind high-pass filtering of the actions.
//!
//! `cargo run --release --example event_analysis -- [steps]`

use koopflow::synthbench::{event_report, Benchmark, GenSpec};
use koopflow::training::TrainConfig;

fn main() -> koopflow::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let bench = Benchmark::new(&GenSpec::default(), 512, 128)?;
    let model = bench.train_model(&bench.model_config(), &TrainConfig { steps, ..Default::default() })?;
    let report = event_report(&model, &bench.heldout_batch, &bench.heldout_events(), 16, 0)?;
    println!("pearson with dilated events: v_var energy {:.3}, naive filtered actions {:.3}", report.model_r, report.naive_r);

    // one trajectory as a strip: events, then both energy profiles
    let i = bench.heldout.iter().position(|t| t.event_count() > 0).unwrap_or(0);
    let bar = |x: f64, max: f64| "#".repeat((10.0 * x / max.max(1e-12)).round() as usize);
    let (m, n) = (&report.model_energy[i], &report.naive_energy[i]);
    let (mmax, nmax) = (m.iter().copied().fold(0.0, f64::max), n.iter().copied().fold(0.0, f64::max));
    println!("trajectory {i}\n tau ev  v_var energy  naive energy");
    for tau in 0..m.len() {
        let ev = if bench.heldout[i].events[tau] { "*" } else { " " };
        println!("{tau:4} {ev}   {:10}  {:10}", bar(m[tau], mmax), bar(n[tau], nmax));
    }
    Ok(())
}
