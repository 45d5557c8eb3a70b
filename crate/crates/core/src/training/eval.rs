use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::KoopmanFlow;
use crate::error::Result;
use crate::gradcore::Tensor;
use crate::koopman::DmdSolver;
use crate::synthbench::Batch;

use super::ot_interpolate;

/// Fixed noise and times for repeatable held-out measurements.
#[derive(Clone, Debug)]
pub struct HeldoutProbe {
    pub x0: Vec<Tensor>,
    pub t: Vec<Vec<f64>>,
}

impl HeldoutProbe {
    pub fn new(shape: &[usize], draws: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x0 = Vec::with_capacity(draws);
        let mut t = Vec::with_capacity(draws);
        for _ in 0..draws {
            x0.push(Tensor::randn(shape.to_vec(), 1.0, &mut rng));
            t.push((0..shape[0]).map(|_| rng.random::<f64>()).collect());
        }
        Self { x0, t }
    }
}

/// Flow-matching loss on held-out data, averaged over the probe's draws.
pub fn heldout_fm_loss(model: &KoopmanFlow, batch: &Batch, probe: &HeldoutProbe) -> Result<f64> {
    let mut sum = 0.0;
    for (x0, t) in probe.x0.iter().zip(&probe.t) {
        let x_t = ot_interpolate(x0, &batch.actions, t)?;
        let v = model.evaluate(&x_t, &batch.cond, t, DmdSolver::Normal)?.v_total;
        let target = batch.actions.sub(x0)?;
        sum += v.sub(&target)?.data().iter().map(|e| e * e).sum::<f64>() / v.numel() as f64;
    }
    Ok(sum / probe.x0.len().max(1) as f64)
}

/// Mean per-trajectory distance `‖v_inv(x_t, t) − v_inv(x_s, s)‖` between
/// two independent times on the same `(x0, x1)` path. Small values mean the
/// invariant branch ignores where along the path it is queried.
pub fn inv_sensitivity(model: &KoopmanFlow, batch: &Batch, pairs: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = batch.len();
    let row = batch.actions.numel() / b.max(1);
    let mut sum = 0.0;
    for _ in 0..pairs {
        let x0 = Tensor::randn(batch.actions.shape().to_vec(), 1.0, &mut rng);
        let ta: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
        let tb: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
        let eval = |t: &[f64]| -> Result<Tensor> {
            let x_t = ot_interpolate(&x0, &batch.actions, t)?;
            Ok(model.evaluate(&x_t, &batch.cond, t, DmdSolver::Normal)?.v_inv)
        };
        let diff = eval(&ta)?.sub(&eval(&tb)?)?;
        sum += diff.data().chunks(row).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / b as f64;
    }
    Ok(sum / pairs.max(1) as f64)
}
