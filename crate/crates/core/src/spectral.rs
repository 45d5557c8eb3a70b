//! Fourier filter splitting a latent trajectory `[B, T, D]` along `T` into a
//! slow (kept bins) and a transient (dropped bins) component.
//!
//! The mask is built from a running, dataset-averaged amplitude spectrum and
//! frozen once training ends, so inference never depends on batch makeup.

use std::rc::Rc;

use crate::error::{config_err, dim_err, Result};
use crate::gradcore::{band_projector, rfft_axis, rfft_bins, Tensor, Var};

/// Default EMA decay of the running amplitude spectrum.
pub const SPECTRUM_EMA_DECAY: f64 = 0.99;

/// Which rFFT bins belong to the slow branch.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyMask {
    keep: Vec<bool>,
    alpha: f64,
    source_spectrum: Vec<f64>,
}

impl FrequencyMask {
    /// Build a mask directly. Bin 0 must be kept.
    pub fn new(keep: Vec<bool>, alpha: f64, source_spectrum: Vec<f64>) -> Result<Self> {
        check_alpha(alpha)?;
        if keep.is_empty() || !keep[0] {
            return Err(config_err!("the DC bin must be kept"));
        }
        if source_spectrum.len() != keep.len() {
            return Err(dim_err!(
                "source spectrum has {} bins, mask has {}",
                source_spectrum.len(),
                keep.len()
            ));
        }
        Ok(Self { keep, alpha, source_spectrum })
    }

    /// Keep every bin: the variant component is identically zero.
    pub fn keep_all(t: usize) -> Self {
        let bins = rfft_bins(t);
        Self { keep: vec![true; bins], alpha: 1.0, source_spectrum: vec![0.0; bins] }
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn source_spectrum(&self) -> &[f64] {
        &self.source_spectrum
    }

    pub fn bins(&self) -> usize {
        self.keep.len()
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }

    /// The complementary mask (DC dropped), used only to build the variant projector.
    fn dropped(&self) -> Vec<bool> {
        self.keep.iter().map(|k| !k).collect()
    }

    /// `(P_inv, P_var)`: `T×T` projectors with `P_inv + P_var = I`.
    pub fn projectors(&self, t: usize) -> Result<(Tensor, Tensor)> {
        if rfft_bins(t) != self.bins() {
            return Err(dim_err!(
                "mask has {} bins but sequence length {t} needs {}",
                self.bins(),
                rfft_bins(t)
            ));
        }
        Ok((band_projector(t, &self.keep)?, band_projector(t, &self.dropped())?))
    }
}

/// Complementary components of a latent trajectory.
#[derive(Clone, Debug)]
pub struct SpectralSplit<'t> {
    pub x_inv: Var<'t>,
    pub x_var: Var<'t>,
    pub mask: FrequencyMask,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(config_err!("alpha must lie in (0, 1], got {alpha}"))
    }
}

/// Mean `|rfft|` along `T` of a `[B, T, D]` tensor, averaged over `B` and `D`.
pub fn amplitude_spectrum(h: &Tensor) -> Result<Vec<f64>> {
    if h.rank() != 3 {
        return Err(dim_err!("expected [B, T, D], got {:?}", h.shape()));
    }
    let t = h.shape()[1];
    if t < 4 {
        return Err(dim_err!("amplitude spectrum needs T >= 4, got {t}"));
    }
    let spec = rfft_axis(h, 1)?;
    let bins = rfft_bins(t);
    let (b, d) = (h.shape()[0], h.shape()[2]);
    let mut amp = vec![0.0; bins];
    for bi in 0..b {
        for (k, a) in amp.iter_mut().enumerate() {
            for di in 0..d {
                *a += spec.data[(bi * bins + k) * d + di].norm();
            }
        }
    }
    let n = (b * d).max(1) as f64;
    amp.iter_mut().for_each(|a| *a /= n);
    Ok(amp)
}

/// Keep the fewest bins whose squared-amplitude share reaches `alpha`.
///
/// DC is seeded first and its energy counts toward the share; the remaining
/// bins join in descending amplitude order, lower index first on ties.
pub fn select_mask(spectrum: &[f64], alpha: f64) -> Result<FrequencyMask> {
    check_alpha(alpha)?;
    if spectrum.is_empty() {
        return Err(dim_err!("empty spectrum"));
    }
    if spectrum.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(config_err!("spectrum amplitudes must be finite and non-negative"));
    }
    let mut keep = vec![false; spectrum.len()];
    keep[0] = true;
    let total: f64 = spectrum.iter().map(|a| a * a).sum();
    if total > 0.0 {
        let mut order: Vec<usize> = (1..spectrum.len()).collect();
        order.sort_by(|&i, &j| spectrum[j].total_cmp(&spectrum[i]).then(i.cmp(&j)));
        let mut acc = spectrum[0] * spectrum[0];
        for k in order {
            if acc / total >= alpha {
                break;
            }
            keep[k] = true;
            acc += spectrum[k] * spectrum[k];
        }
    }
    FrequencyMask::new(keep, alpha, spectrum.to_vec())
}

/// Split `h: [B, T, D]` along `T`. Linear, so gradients reach `h` from both parts.
pub fn fourier_filter<'t>(h: Var<'t>, mask: &FrequencyMask) -> Result<SpectralSplit<'t>> {
    let shape = h.shape();
    if shape.len() != 3 {
        return Err(dim_err!("expected [B, T, D], got {shape:?}"));
    }
    let (p_inv, p_var) = mask.projectors(shape[1])?;
    Ok(SpectralSplit {
        x_inv: h.along_axis(1, Rc::new(p_inv))?,
        x_var: h.along_axis(1, Rc::new(p_var))?,
        mask: mask.clone(),
    })
}

/// `decay·running + (1 − decay)·batch`.
pub fn update_mask_ema(running: &[f64], batch: &[f64], decay: f64) -> Result<Vec<f64>> {
    if running.len() != batch.len() {
        return Err(dim_err!("spectrum lengths {} and {} differ", running.len(), batch.len()));
    }
    if !(0.0..1.0).contains(&decay) {
        return Err(config_err!("EMA decay must lie in [0, 1), got {decay}"));
    }
    Ok(running.iter().zip(batch).map(|(r, b)| decay * r + (1.0 - decay) * b).collect())
}

/// Running spectrum plus the mask derived from it.
///
/// During training every batch nudges the spectrum and rebuilds the mask;
/// after [`freeze`](Self::freeze) both stay fixed.
#[derive(Clone, Debug)]
pub struct MaskTracker {
    running: Option<Vec<f64>>,
    decay: f64,
    mask: FrequencyMask,
    frozen: bool,
}

impl MaskTracker {
    /// Starts with every bin kept until the first observation arrives.
    pub fn new(t: usize, alpha: f64, decay: f64) -> Result<Self> {
        check_alpha(alpha)?;
        let mut mask = FrequencyMask::keep_all(t);
        mask.alpha = alpha;
        Ok(Self { running: None, decay, mask, frozen: false })
    }

    /// Restore a frozen tracker from a stored mask.
    pub fn from_mask(mask: FrequencyMask) -> Self {
        Self { running: Some(mask.source_spectrum.clone()), decay: SPECTRUM_EMA_DECAY, mask, frozen: true }
    }

    pub fn mask(&self) -> &FrequencyMask {
        &self.mask
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    /// Fold one batch of latents into the running spectrum. No-op when frozen.
    pub fn observe(&mut self, h: &Tensor) -> Result<()> {
        if self.frozen {
            return Ok(());
        }
        let batch = amplitude_spectrum(h)?;
        let running = match &self.running {
            None => batch,
            Some(r) => update_mask_ema(r, &batch, self.decay)?,
        };
        self.mask = select_mask(&running, self.mask.alpha)?;
        self.running = Some(running);
        Ok(())
    }
}
