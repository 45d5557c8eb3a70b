//! The two linear operators of the terminal layer.
//!
//! The slow branch lifts each step with `E_inv`, advances it with a learned
//! matrix `K̃_inv`, and decodes with `D_inv`. The transient branch lifts with
//! `E_var`, fits a damped least-squares operator `K_loc` on each window of the
//! lifted sequence, advances every step with its window's operator and decodes
//! with `D_var`. All maps are bias-free.
//!
//! Latent states are row vectors, so `K̃_inv` acts on the right (`z·K̃`).
//! `K_loc` follows the column convention `K_loc·X ≈ Y` of the least-squares
//! fit; applied to a row state it is `z·K_locᵀ`.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, dim_err, Result};
use crate::gradcore::{truncated_svd, Tensor, Var};

/// Default Tikhonov damping of the window fit.
pub const DEFAULT_LAMBDA: f64 = 1e-3;

/// Window length for a trajectory of `t` steps: `max(4, ⌊t/4⌋)`.
pub fn window_len(t: usize) -> usize {
    (t / 4).max(4)
}

/// `E_inv`, `K̃_inv`, `D_inv` as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct InvariantKoopman<'t> {
    /// `[D, d]`
    pub enc: Var<'t>,
    /// `[d, d]`
    pub k: Var<'t>,
    /// `[d, D]`
    pub dec: Var<'t>,
}

/// How `K_loc` is computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DmdSolver {
    /// Cholesky solve of the damped normal equations, recorded on the tape.
    #[default]
    Normal,
    /// Damped pseudo-inverse through a truncated SVD of `X`. Gradient-free;
    /// for sampling only.
    Svd,
}

/// `E_var`, `D_var` plus the window fit settings.
#[derive(Clone, Copy, Debug)]
pub struct LocalizedDmd<'t> {
    /// `[D, d]`
    pub enc: Var<'t>,
    /// `[d, D]`
    pub dec: Var<'t>,
    pub lambda: f64,
    pub window: usize,
    pub solver: DmdSolver,
}

impl<'t> LocalizedDmd<'t> {
    pub fn new(enc: Var<'t>, dec: Var<'t>, t: usize, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(contract_err!("DMD damping must be positive, got {lambda}"));
        }
        Ok(Self { enc, dec, lambda, window: window_len(t), solver: DmdSolver::Normal })
    }

    pub fn with_solver(mut self, solver: DmdSolver) -> Self {
        self.solver = solver;
        self
    }
}

fn check_seq(x: &Var<'_>, dim: usize) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 3 || s[2] != dim {
        return Err(dim_err!("expected [B, T, {dim}], got {s:?}"));
    }
    Ok((s[0], s[1]))
}

fn check_maps(enc: &Var<'_>, dec: &Var<'_>) -> Result<(usize, usize)> {
    let (e, d) = (enc.shape(), dec.shape());
    if e.len() != 2 || d.len() != 2 || e[1] != d[0] || e[0] != d[1] {
        return Err(dim_err!("encoder {e:?} and decoder {d:?} do not pair up"));
    }
    Ok((e[0], e[1]))
}

/// `D_inv(E_inv(x)·K̃_inv)` applied step by step to `x_inv: [B, T, D]`.
pub fn invariant_path<'t>(x_inv: Var<'t>, op: &InvariantKoopman<'t>) -> Result<Var<'t>> {
    let (dim, d) = check_maps(&op.enc, &op.dec)?;
    if op.k.shape() != [d, d] {
        return Err(dim_err!("K has shape {:?}, expected [{d}, {d}]", op.k.shape()));
    }
    check_seq(&x_inv, dim)?;
    x_inv.matmul(&op.enc)?.matmul(&op.k)?.matmul(&op.dec)
}

/// `λ·I` tiled over a batch of `n` matrices.
fn damping(n: usize, d: usize, lambda: f64) -> Tensor {
    let mut data = vec![0.0; n * d * d];
    for b in 0..n {
        for i in 0..d {
            data[b * d * d + i * d + i] = lambda;
        }
    }
    Tensor::new(vec![n, d, d], data).expect("finite damping")
}

fn split_window(z: &[usize]) -> Result<(usize, usize, usize)> {
    match z {
        [n, d, w] if *w >= 2 => Ok((*n, *d, *w)),
        _ => Err(dim_err!("expected windows [N, d, τ_w >= 2], got {z:?}")),
    }
}

/// `K_locᵀ = (X·Xᵀ + λI)⁻¹·X·Yᵀ` for windows `z: [N, d, τ_w]`.
fn fit_transposed<'t>(z: Var<'t>, lambda: f64) -> Result<Var<'t>> {
    if !(lambda > 0.0) {
        return Err(contract_err!("DMD damping must be positive, got {lambda}"));
    }
    let (n, d, w) = split_window(&z.shape())?;
    let x = z.narrow(2, 0, w - 1)?;
    let y = z.narrow(2, 1, w - 1)?;
    let gram = x.matmul(&x.transpose()?)?;
    let reg = z.tape().constant(damping(n, d, lambda))?;
    gram.add(&reg)?.spd_solve(&x.matmul(&y.transpose()?)?)
}

/// `K_loc = Y·Xᵀ·(X·Xᵀ + λI)⁻¹` with `X = Z[:, :τ_w−1]`, `Y = Z[:, 1:]`.
///
/// `z` is `[d, τ_w]` or a batch `[N, d, τ_w]`. Differentiable through the solve.
pub fn dmd_fit<'t>(z: Var<'t>, lambda: f64) -> Result<Var<'t>> {
    let shape = z.shape();
    match shape.len() {
        2 => {
            let z3 = z.reshape([1, shape[0], shape[1]])?;
            fit_transposed(z3, lambda)?.transpose()?.reshape([shape[0], shape[0]])
        }
        3 => fit_transposed(z, lambda)?.transpose(),
        _ => Err(dim_err!("expected [d, τ_w] or [N, d, τ_w], got {shape:?}")),
    }
}

/// The same fit through a truncated SVD `X ≈ U·Σ·Vᵀ`:
/// `K_loc = Y·V·Σ·(Σ² + λI)⁻¹·Uᵀ`. Exact at full rank; no gradient.
pub fn dmd_fit_svd(z: &Tensor, lambda: f64, rank: usize) -> Result<Tensor> {
    if z.rank() != 2 || z.shape()[1] < 2 {
        return Err(dim_err!("expected a window [d, τ_w >= 2], got {:?}", z.shape()));
    }
    if !(lambda > 0.0) {
        return Err(contract_err!("DMD damping must be positive, got {lambda}"));
    }
    let (d, w) = (z.shape()[0], z.shape()[1]);
    let m = w - 1;
    if rank > d.min(m) {
        return Err(contract_err!("rank {rank} exceeds min({d}, {m})"));
    }
    let zd = z.data();
    if rank == 0 {
        return Ok(Tensor::zeros([d, d]));
    }
    let x = Tensor::new(vec![d, m], (0..d).flat_map(|i| zd[i * w..i * w + m].to_vec()).collect())?;
    let svd = truncated_svd(&x, rank)?;
    let (u, v) = (svd.u.data(), svd.v.data());
    // W = Y·V·diag(σ/(σ²+λ)), a d×r matrix.
    let mut wmat = vec![0.0; d * rank];
    for i in 0..d {
        let yrow = &zd[i * w + 1..i * w + w];
        for k in 0..rank {
            let mut acc = 0.0;
            for (j, yj) in yrow.iter().enumerate() {
                acc += yj * v[j * rank + k];
            }
            let s = svd.s[k];
            wmat[i * rank + k] = acc * s / (s * s + lambda);
        }
    }
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        let wrow = &wmat[i * rank..(i + 1) * rank];
        let orow = &mut out[i * d..(i + 1) * d];
        for (j, o) in orow.iter_mut().enumerate() {
            let urow = &u[j * rank..(j + 1) * rank];
            *o = wrow.iter().zip(urow).map(|(a, b)| a * b).sum();
        }
    }
    Tensor::new(vec![d, d], out)
}

/// Wall-clock summary of repeated [`dmd_fit_svd`] calls.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DmdLatency {
    pub median: Duration,
    pub p90: Duration,
    pub mean: Duration,
    pub max: Duration,
    pub total: Duration,
}

/// Time `iters` full-rank fits on random `[d, window]` snapshot windows.
/// A pool of 64 windows is drawn up front so that only the fit is timed.
pub fn dmd_latency(d: usize, window: usize, iters: usize, lambda: f64, seed: u64) -> Result<DmdLatency> {
    if iters == 0 {
        return Err(contract_err!("at least one iteration is needed"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<Tensor> = (0..64).map(|_| Tensor::randn([d, window], 1.0, &mut rng)).collect();
    let rank = d.min(window.saturating_sub(1));
    let mut times = Vec::with_capacity(iters);
    for i in 0..iters {
        let start = Instant::now();
        let k = dmd_fit_svd(&pool[i % pool.len()], lambda, rank)?;
        times.push(start.elapsed());
        std::hint::black_box(k);
    }
    let total: Duration = times.iter().sum();
    times.sort_unstable();
    let at = |q: f64| times[((times.len() - 1) as f64 * q).round() as usize];
    Ok(DmdLatency { median: at(0.5), p90: at(0.9), mean: Duration::from_secs_f64(total.as_secs_f64() / iters as f64), max: at(1.0), total })
}

/// Window tiling of `t` steps: `(start, first_emitted_offset)` per window.
///
/// Windows are consecutive with stride `w`; when `w` does not divide `t` a
/// final window is right-aligned and only emits the steps not yet covered.
pub fn window_plan(t: usize, w: usize) -> Vec<(usize, usize)> {
    let mut plan: Vec<(usize, usize)> = (0..t / w).map(|i| (i * w, 0)).collect();
    let covered = (t / w) * w;
    if covered < t {
        plan.push((t - w, w - (t - covered)));
    }
    plan
}

/// Per-window damped DMD on the lifted variant component `x_var: [B, T, D]`.
pub fn variant_path<'t>(x_var: Var<'t>, op: &LocalizedDmd<'t>) -> Result<Var<'t>> {
    let (dim, d) = check_maps(&op.enc, &op.dec)?;
    let (b, t) = check_seq(&x_var, dim)?;
    let w = op.window;
    if t < w {
        return Err(dim_err!("sequence of {t} steps is shorter than the DMD window {w}"));
    }
    let z = x_var.matmul(&op.enc)?;
    let mut pieces = Vec::new();
    for (start, emit) in window_plan(t, w) {
        let zw = z.narrow(1, start, w)?;
        let kt = match op.solver {
            DmdSolver::Normal => fit_transposed(zw.transpose()?, op.lambda)?,
            DmdSolver::Svd => {
                let windows = zw.transpose()?.value();
                let rank = d.min(w - 1);
                let mut data = Vec::with_capacity(b * d * d);
                for bi in 0..b {
                    let one = Tensor::new(
                        vec![d, w],
                        windows.data()[bi * d * w..(bi + 1) * d * w].to_vec(),
                    )?;
                    data.extend(dmd_fit_svd(&one, op.lambda, rank)?.transpose()?.into_data());
                }
                z.tape().constant(Tensor::new(vec![b, d, d], data)?)?
            }
        };
        let pred = zw.matmul(&kt)?;
        pieces.push(if emit > 0 { pred.narrow(1, emit, w - emit)? } else { pred });
    }
    Var::concat(&pieces, 1)?.matmul(&op.dec)
}

/// Estimate of the spectral radius of a square matrix from `‖K^(2^k)‖^(1/2^k)`.
///
/// Diagnostic only; accurate to a few percent for the sizes used here.
pub fn spectral_radius(k: &Tensor) -> Result<f64> {
    if k.rank() != 2 || k.shape()[0] != k.shape()[1] {
        return Err(dim_err!("spectral radius needs a square matrix, got {:?}", k.shape()));
    }
    const SQUARINGS: i32 = 12;
    let mut m = k.clone();
    let mut log_scale = 0.0;
    for i in 0..SQUARINGS {
        let n = m.norm();
        if n == 0.0 {
            return Ok(0.0);
        }
        m = m.scale(1.0 / n);
        log_scale += n.ln() / 2f64.powi(i);
        m = m.matmul(&m)?;
    }
    let n = m.norm();
    if n == 0.0 {
        return Ok(0.0);
    }
    Ok((log_scale + n.ln() / 2f64.powi(SQUARINGS)).exp())
}
