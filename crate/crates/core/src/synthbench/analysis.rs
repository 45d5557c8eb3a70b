use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::KoopmanFlow;
use crate::error::{dim_err, numeric_err, Error, Result};
use crate::gradcore::{band_projector, rfft_bins, Tape, Tensor};
use crate::koopman::DmdSolver;
use crate::spectral::{fourier_filter, FrequencyMask};

use super::{Batch, TRANSIENT_SUPPORT};

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(dim_err!("series of length {} and {}", x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two samples".into()));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("a series has zero variance".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Mark every step within the response window of an event: step `s` is set
/// when an event occurred at any of `s − support + 1 ..= s`.
pub fn dilate_events(events: &[bool], support: usize) -> Vec<f64> {
    (0..events.len())
        .map(|s| {
            let lo = (s + 1).saturating_sub(support.max(1));
            f64::from(u8::from(events[lo..=s].iter().any(|&e| e)))
        })
        .collect()
}

/// Correlation between a per-step energy series and the event channel
/// dilated over the kick support. Several trajectories can be pooled by
/// concatenating them; dilation never crosses a trajectory boundary.
pub fn event_correlation(energy: &[Vec<f64>], events: &[Vec<bool>]) -> Result<f64> {
    if energy.len() != events.len() {
        return Err(dim_err!("{} energy profiles for {} event series", energy.len(), events.len()));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (e, ev) in energy.iter().zip(events) {
        if e.len() != ev.len() {
            return Err(dim_err!("energy profile of length {} against {} events", e.len(), ev.len()));
        }
        xs.extend_from_slice(e);
        ys.extend(dilate_events(ev, TRANSIENT_SUPPORT));
    }
    pearson(&xs, &ys)
}

/// Frame-to-frame energy `‖x[τ] − x[τ−1]‖²` of a `[T, D]` series, with the
/// first step set to zero.
pub fn frame_energy(x: &Tensor) -> Result<Vec<f64>> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(dim_err!("expected [T, D], got {s:?}"));
    }
    let (t, d) = (s[0], s[1]);
    let rows: Vec<&[f64]> = x.data().chunks(d.max(1)).collect();
    Ok((0..t)
        .map(|i| match i {
            0 => 0.0,
            _ => rows[i].iter().zip(rows[i - 1]).map(|(a, b)| (a - b).powi(2)).sum(),
        })
        .collect())
}

/// Per-step energy `‖x_var[τ]‖²` of the raw actions `[T, D]` after the
/// given frequency mask: the blind filtering baseline.
pub fn naive_rfft_baseline(actions: &Tensor, mask: &FrequencyMask) -> Result<Vec<f64>> {
    let s = actions.shape();
    if s.len() != 2 {
        return Err(dim_err!("expected [T, D], got {s:?}"));
    }
    let tape = Tape::no_grad();
    let x = tape.constant(actions.clone().reshape([1, s[0], s[1]])?)?;
    let x_var = fourier_filter(x, mask)?.x_var.value();
    Ok(x_var.data().chunks(s[1]).map(|row| row.iter().map(|v| v * v).sum()).collect())
}

/// Share of signal energy in rFFT bins `0..=max_bin` along `T`, pooled over
/// every trajectory and dimension of `[B, T, D]`.
pub fn low_band_share(x: &Tensor, max_bin: usize) -> Result<f64> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(dim_err!("expected [B, T, D], got {s:?}"));
    }
    let (t, d) = (s[1], s[2]);
    let keep: Vec<bool> = (0..rfft_bins(t)).map(|k| k <= max_bin).collect();
    let p = band_projector(t, &keep)?;
    let mut low = 0.0;
    for traj in x.data().chunks(t * d) {
        let traj = Tensor::new([t, d], traj.to_vec())?;
        low += p.matmul(&traj)?.data().iter().map(|v| v * v).sum::<f64>();
    }
    let total: f64 = x.data().iter().map(|v| v * v).sum();
    if total == 0.0 {
        return Err(numeric_err!("band share of an all-zero signal"));
    }
    Ok(low / total)
}

/// Both velocity branches at `t = 0`, averaged over noise draws.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanFields {
    pub v_inv: Tensor,
    pub v_var: Tensor,
}

/// The model's branch velocities at `t = 0`, averaged over `draws` noise
/// samples.
///
/// At `t = 0` the input carries no information about the target, so
/// averaging over draws removes the part of each branch that just echoes
/// the noise and keeps the part driven by the conditioning.
pub fn mean_fields(model: &KoopmanFlow, batch: &Batch, draws: usize, seed: u64) -> Result<MeanFields> {
    let shape = batch.actions.shape().to_vec();
    let draws = draws.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t0 = vec![0.0; batch.len()];
    let mut v_inv = Tensor::zeros(shape.clone());
    let mut v_var = Tensor::zeros(shape.clone());
    for _ in 0..draws {
        let x0 = Tensor::randn(shape.clone(), 1.0, &mut rng);
        let out = model.evaluate(&x0, &batch.cond, &t0, DmdSolver::Normal)?;
        v_inv = v_inv.add(&out.v_inv)?;
        v_var = v_var.add(&out.v_var)?;
    }
    let w = 1.0 / draws as f64;
    Ok(MeanFields { v_inv: v_inv.scale(w), v_var: v_var.scale(w) })
}

/// `v_var` of [`mean_fields`].
pub fn mean_variant_field(model: &KoopmanFlow, batch: &Batch, draws: usize, seed: u64) -> Result<Tensor> {
    Ok(mean_fields(model, batch, draws, seed)?.v_var)
}

/// Rows of a `[B, T, D]` tensor as `[T, D]` tensors.
pub fn split_batch(x: &Tensor) -> Vec<Tensor> {
    let s = x.shape();
    x.data()
        .chunks(s[1] * s[2])
        .map(|c| Tensor::new([s[1], s[2]], c.to_vec()).expect("row of a valid tensor"))
        .collect()
}

/// Correlations of the learned and naive energies with the events.
#[derive(Clone, Debug, PartialEq)]
pub struct EventReport {
    pub model_r: f64,
    pub naive_r: f64,
    /// Per trajectory: frame energy of the averaged `v_var`.
    pub model_energy: Vec<Vec<f64>>,
    /// Per trajectory: masked high-band energy of the raw actions.
    pub naive_energy: Vec<Vec<f64>>,
}

pub fn event_report(model: &KoopmanFlow, batch: &Batch, events: &[Vec<bool>], draws: usize, seed: u64) -> Result<EventReport> {
    let v_var = mean_variant_field(model, batch, draws, seed)?;
    let model_energy = split_batch(&v_var).iter().map(frame_energy).collect::<Result<Vec<_>>>()?;
    let naive_energy = split_batch(&batch.actions)
        .iter()
        .map(|a| naive_rfft_baseline(a, model.mask.mask()))
        .collect::<Result<Vec<_>>>()?;
    Ok(EventReport {
        model_r: event_correlation(&model_energy, events)?,
        naive_r: event_correlation(&naive_energy, events)?,
        model_energy,
        naive_energy,
    })
}
