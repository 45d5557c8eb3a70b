//! Real DFT along one axis. Sequence lengths here are tiny, so this is the
//! direct O(T²) summation.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{dim_err, Result};

use super::tensor::{strides, Tensor};

/// Number of rFFT bins for a length-`t` real signal.
pub fn rfft_bins(t: usize) -> usize {
    t / 2 + 1
}

/// `X[k] = Σₙ x[n]·e^(−2πi·kn/T)` for `k = 0..=T/2`.
pub fn rfft(x: &[f64]) -> Vec<Complex64> {
    let t = x.len();
    (0..rfft_bins(t))
        .map(|k| {
            x.iter().enumerate().fold(Complex64::new(0.0, 0.0), |acc, (n, &v)| {
                let phase = -2.0 * PI * ((k * n) % t) as f64 / t as f64;
                acc + Complex64::from_polar(v, phase)
            })
        })
        .collect()
}

/// Inverse of [`rfft`] for a length-`t` signal using Hermitian symmetry.
///
/// The imaginary parts of the DC bin and (for even `t`) the Nyquist bin are ignored.
pub fn irfft(spec: &[Complex64], t: usize) -> Vec<f64> {
    debug_assert_eq!(spec.len(), rfft_bins(t));
    (0..t)
        .map(|n| {
            let mut acc = spec[0].re;
            for (k, xk) in spec.iter().enumerate().skip(1) {
                let phase = 2.0 * PI * ((k * n) % t) as f64 / t as f64;
                let term = (xk * Complex64::from_polar(1.0, phase)).re;
                if t.is_multiple_of(2) && k == t / 2 {
                    acc += term;
                } else {
                    acc += 2.0 * term;
                }
            }
            acc / t as f64
        })
        .collect()
}

/// Complex spectrum of a real tensor along one axis.
#[derive(Clone, Debug)]
pub struct Spectrum {
    /// Shape of the source tensor with the transformed axis replaced by its bin count.
    pub shape: Vec<usize>,
    pub axis: usize,
    /// Length of the transformed axis in the time domain.
    pub len: usize,
    pub data: Vec<Complex64>,
}

fn lanes(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, inner)
}

/// Apply [`rfft`] along `axis`.
pub fn rfft_axis(x: &Tensor, axis: usize) -> Result<Spectrum> {
    if axis >= x.rank() {
        return Err(dim_err!("axis {axis} out of range for {:?}", x.shape()));
    }
    let t = x.shape()[axis];
    if t < 2 {
        return Err(dim_err!("rfft needs at least 2 samples along the axis, got {t}"));
    }
    let bins = rfft_bins(t);
    let (outer, inner) = lanes(x.shape(), axis);
    let st = strides(x.shape())[axis];
    let mut data = vec![Complex64::new(0.0, 0.0); outer * bins * inner];
    let mut lane = vec![0.0; t];
    for o in 0..outer {
        for i in 0..inner {
            for (n, v) in lane.iter_mut().enumerate() {
                *v = x.data()[o * t * inner + n * st + i];
            }
            for (k, c) in rfft(&lane).into_iter().enumerate() {
                data[o * bins * inner + k * inner + i] = c;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = bins;
    Ok(Spectrum { shape, axis, len: t, data })
}

/// Apply [`irfft`] along the spectrum's axis.
pub fn irfft_axis(spec: &Spectrum) -> Tensor {
    let bins = spec.shape[spec.axis];
    let t = spec.len;
    let (outer, inner) = lanes(&spec.shape, spec.axis);
    let mut shape = spec.shape.clone();
    shape[spec.axis] = t;
    let mut out = vec![0.0; outer * t * inner];
    let mut lane = vec![Complex64::new(0.0, 0.0); bins];
    for o in 0..outer {
        for i in 0..inner {
            for (k, c) in lane.iter_mut().enumerate() {
                *c = spec.data[o * bins * inner + k * inner + i];
            }
            for (n, v) in irfft(&lane, t).into_iter().enumerate() {
                out[o * t * inner + n * inner + i] = v;
            }
        }
    }
    Tensor::from_parts(shape, out)
}

/// The `T×T` real matrix of "rfft, keep the flagged bins, irfft".
///
/// Complementary `keep` sets give projectors that sum to the identity.
pub fn band_projector(t: usize, keep: &[bool]) -> Result<Tensor> {
    if keep.len() != rfft_bins(t) {
        return Err(dim_err!("mask has {} bins, length {t} needs {}", keep.len(), rfft_bins(t)));
    }
    let mut p = vec![0.0; t * t];
    let mut basis = vec![0.0; t];
    for j in 0..t {
        basis.iter_mut().for_each(|v| *v = 0.0);
        basis[j] = 1.0;
        let mut spec = rfft(&basis);
        for (c, &k) in spec.iter_mut().zip(keep) {
            if !k {
                *c = Complex64::new(0.0, 0.0);
            }
        }
        for (i, v) in irfft(&spec, t).into_iter().enumerate() {
            p[i * t + j] = v;
        }
    }
    Ok(Tensor::from_parts(vec![t, t], p))
}
