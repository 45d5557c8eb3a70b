//! Compare the analytic gradient of the full training objective with
//! central differences on a two-block toy model.
//!
//! `cargo run --release --example gradient_check -- [coords_per_tensor]`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use koopflow::backbone::{BackboneConfig, KoopmanFlow, ParamStore};
use koopflow::spectral::{select_mask, MaskTracker};
use koopflow::synthbench::{generate_dataset, Batch, GenSpec};
use koopflow::training::{StepDraw, TrainConfig, Trainer};
use koopflow::Tensor;

/// Move every trainable tensor off its initial value so that the zero-gated
/// paths carry gradient.
fn jitter(store: &mut ParamStore, std: f64, rng: &mut ChaCha8Rng) -> koopflow::Result<()> {
    for (_, p) in store.iter_mut().filter(|(_, p)| p.trainable) {
        p.value = p.value.add(&Tensor::randn(p.value.shape().to_vec(), std, rng))?;
    }
    Ok(())
}

fn main() -> koopflow::Result<()> {
    let coords: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let spec = GenSpec { seq_len: 8, slow_freqs: vec![1.0], ..Default::default() };
    let data = generate_dataset(&spec, 4)?;
    let batch = Batch::of(&data)?;
    let model = KoopmanFlow::new(BackboneConfig {
        seq_len: 8,
        context_dim: spec.context_dim(),
        hidden: 8,
        blocks: 2,
        heads: 2,
        fourier_dim: 4,
        dyn_dim: 4,
        ..Default::default()
    })?;
    let cfg = TrainConfig { batch: 4, r_ct: 0.5, ..Default::default() };
    let mut trainer = Trainer::new(model, cfg.clone())?;
    // a fixed mask that sends the upper bins to the variant branch
    trainer.model.mask = MaskTracker::from_mask(select_mask(&[4.0, 3.0, 1.0, 0.5, 0.5], 0.85)?);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    jitter(&mut trainer.model.params, 0.2, &mut rng)?;
    jitter(&mut trainer.teacher.shadow, 0.2, &mut rng)?;
    let draw = StepDraw::sample(batch.actions.shape(), &cfg, &mut rng)?;

    let (breakdown, grads, _) = trainer.losses(&batch, &draw)?;
    println!("{breakdown:?}");
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (name, g) in &grads {
        let mut tensor_worst: f64 = 0.0;
        for _ in 0..coords {
            let i = rng.random_range(0..g.numel());
            let mut probe = trainer.clone();
            probe.model.params.get_mut(name)?.data_mut()[i] += h;
            let plus = probe.losses(&batch, &draw)?.0.total;
            probe.model.params.get_mut(name)?.data_mut()[i] -= 2.0 * h;
            let minus = probe.losses(&batch, &draw)?.0.total;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = g.data()[i];
            tensor_worst = tensor_worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6));
        }
        println!("{name:40} worst rel err {tensor_worst:.2e}");
        worst = worst.max(tensor_worst);
    }
    let silent: Vec<&String> = grads.iter().filter(|(_, g)| g.max_abs() == 0.0).map(|(n, _)| n).collect();
    println!("tensors with an all-zero gradient: {silent:?}");
    println!("worst over {} tensors: {worst:.2e}", grads.len());
    Ok(())
}
