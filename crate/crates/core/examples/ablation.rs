//! Sweep the decoupling weight with data and seeds held fixed and print the
//! resulting CSV.
//!
//! `cargo run --release --example ablation -- [steps] [values...]`

use koopflow::synthbench::{ablation_sweep, write_ablation_csv, AblationAxis, AblationBase, Benchmark, GenSpec};
use koopflow::training::TrainConfig;

fn main() -> koopflow::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let mut values: Vec<f64> = args.filter_map(|s| s.parse().ok()).collect();
    if values.is_empty() {
        values = vec![0.0, 0.25, 0.5, 1.0];
    }
    let bench = Benchmark::new(&GenSpec::default(), 256, 64)?;
    let base = AblationBase {
        model: bench.model_config(),
        train: TrainConfig { steps, ..Default::default() },
        nfe: 1,
        eval_seed: 0,
    };
    let rows = ablation_sweep(AblationAxis::LambdaDec, &values, &bench, &base)?;
    write_ablation_csv(&rows, std::io::stdout().lock())
}
