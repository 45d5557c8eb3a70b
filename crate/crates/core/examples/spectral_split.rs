//! Split a latent sequence by cumulative spectral energy and check that the
//! two parts are orthogonal and add back to the input.
//!
//! `cargo run --release --example spectral_split -- [alpha]`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use koopflow::spectral::{amplitude_spectrum, fourier_filter, select_mask};
use koopflow::{Tape, Tensor};

fn main() -> koopflow::Result<()> {
    let alpha: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.85);
    let (b, t, d) = (4, 16, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    // a slow drift in every channel plus white noise
    let noise = Tensor::randn([b, t, d], 0.3, &mut rng);
    let drift: Vec<f64> = (0..b * t * d)
        .map(|i| {
            let (tau, j) = ((i / d) % t, i % d);
            (2.0 * std::f64::consts::PI * tau as f64 / t as f64 + j as f64).sin()
        })
        .collect();
    let h = Tensor::new([b, t, d], drift)?.add(&noise)?;

    let spectrum = amplitude_spectrum(&h)?;
    let mask = select_mask(&spectrum, alpha)?;
    println!("amplitude per bin: {:?}", spectrum.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>());
    println!("alpha {alpha}: kept bins {:?}", mask.keep().iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect::<Vec<_>>());

    let tape = Tape::no_grad();
    let split = fourier_filter(tape.constant(h.clone())?, &mask)?;
    let (inv, var) = (split.x_inv.value(), split.x_var.value());
    let energy = |x: &Tensor| x.data().iter().map(|v| v * v).sum::<f64>();
    let total = energy(&h);
    println!("energy share: invariant {:.3}, variant {:.3}", energy(&inv) / total, energy(&var) / total);
    println!("reconstruction error {:.2e}", inv.add(&var)?.max_abs_diff(&h));
    println!("energy balance error {:.2e}", (energy(&inv) + energy(&var) - total).abs());
    Ok(())
}
