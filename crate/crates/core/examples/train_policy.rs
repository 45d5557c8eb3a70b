//! Fused co-training on the synthetic benchmark, printing the loss curve and
//! held-out flow-matching loss.
//!
//! `cargo run --release --example train_policy -- [steps]`

use std::time::Instant;

use koopflow::backbone::{BackboneConfig, KoopmanFlow};
use koopflow::synthbench::{generate_dataset, Batch, GenSpec};
use koopflow::training::{heldout_fm_loss, HeldoutProbe, TrainConfig, Trainer};

fn main() -> koopflow::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let spec = GenSpec::default();
    let train = generate_dataset(&spec, 512)?;
    let held = generate_dataset(&GenSpec { seed: spec.seed + 1, ..spec.clone() }, 128)?;
    let held = Batch::of(&held)?;
    let probe = HeldoutProbe::new(held.actions.shape(), 4, 7);

    let model = KoopmanFlow::new(BackboneConfig { context_dim: spec.context_dim(), ..Default::default() })?;
    let before = heldout_fm_loss(&model, &held, &probe)?;
    let mut trainer = Trainer::new(model, TrainConfig { steps, ..Default::default() })?;
    let start = Instant::now();
    let history = trainer.fit(&train, None)?;
    let elapsed = start.elapsed();
    for (i, b) in history.iter().enumerate().filter(|(i, _)| i % (steps / 10).max(1) == 0) {
        println!("step {i:5}  fm {:.4}  ct {:.4}  total {:.4}", b.fm, b.ct, b.total);
    }
    let model = trainer.into_model();
    let after = heldout_fm_loss(&model, &held, &probe)?;
    println!("held-out fm loss {before:.4} -> {after:.4} ({:.1}% of initial)", 100.0 * after / before);
    println!("{steps} steps in {:.1?} ({:.1} ms/step), kept bins {}", elapsed, elapsed.as_secs_f64() * 1e3 / steps as f64, model.mask.mask().kept_count());
    Ok(())
}
