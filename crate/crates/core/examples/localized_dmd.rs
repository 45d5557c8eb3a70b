//! Fit the damped window operator on snapshots of a known linear system and
//! compare the Cholesky and truncated-SVD routes.
//!
//! `cargo run --release --example localized_dmd`

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use koopflow::koopman::{dmd_fit, dmd_fit_svd, dmd_latency, spectral_radius, DEFAULT_LAMBDA};
use koopflow::{Tape, Tensor};

fn main() -> koopflow::Result<()> {
    let (d, w) = (4, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::randn([d, d], 1.0, &mut rng);
    let a = a.scale(0.9 / spectral_radius(&a)?);

    // z_{k+1} = A·z_k, stored column by column in a [d, w] window
    let mut cols = vec![Tensor::randn([d], 1.0, &mut rng).into_data()];
    for k in 1..w {
        let prev = &cols[k - 1];
        cols.push((0..d).map(|i| (0..d).map(|j| a.get(&[i, j]) * prev[j]).sum()).collect());
    }
    let z = Tensor::new([d, w], (0..d).flat_map(|i| cols.iter().map(move |c| c[i])).collect())?;

    let lambda = 1e-9;
    let tape = Tape::no_grad();
    let k_normal = dmd_fit(tape.constant(z.clone())?, lambda)?.value();
    let k_svd = dmd_fit_svd(&z, lambda, d)?;
    println!("operator error: normal equations {:.2e}, svd {:.2e}", k_normal.max_abs_diff(&a), k_svd.max_abs_diff(&a));
    println!("routes agree to {:.2e}", k_normal.max_abs_diff(&k_svd));

    // damping shrinks the fitted operator
    for lambda in [1e-6, 1e-3, 1e-1, 1.0, 10.0] {
        let k = dmd_fit_svd(&z, lambda, d)?;
        println!("lambda {lambda:>6}: spectral radius {:.4}", spectral_radius(&k)?);
    }

    let start = Instant::now();
    let t = dmd_latency(128, 4, 2000, DEFAULT_LAMBDA, 0)?;
    println!(
        "d=128, window 4: median fit {:.1} µs, p90 {:.1} µs ({:.2?} for 2000 fits)",
        t.median.as_secs_f64() * 1e6,
        t.p90.as_secs_f64() * 1e6,
        start.elapsed()
    );
    Ok(())
}
