//! Dense tensors, reverse-mode differentiation, and the small numerical
//! kernels (real DFT, SPD solves, truncated SVD) the model is built from.

mod fft;
mod linalg;
mod tape;
mod tensor;

pub use fft::{band_projector, irfft, irfft_axis, rfft, rfft_axis, rfft_bins, Spectrum};
pub use linalg::{truncated_svd, Svd};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
