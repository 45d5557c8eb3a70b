//! Small dense factorizations: Cholesky for SPD solves, one-sided Jacobi SVD.

use crate::error::{contract_err, dim_err, numeric_err, Result};

use super::tensor::Tensor;

const SYMMETRY_TOL: f64 = 1e-8;
const JACOBI_MAX_SWEEPS: usize = 64;

/// Lower-triangular Cholesky factor of a `d×d` row-major SPD matrix.
pub(crate) fn cholesky(d: usize, a: &[f64]) -> Result<Vec<f64>> {
    let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for i in 0..d {
        for j in 0..i {
            if (a[i * d + j] - a[j * d + i]).abs() > SYMMETRY_TOL * scale {
                return Err(contract_err!(
                    "matrix not symmetric at ({i},{j}): {} vs {}",
                    a[i * d + j],
                    a[j * d + i]
                ));
            }
        }
    }
    let mut l = vec![0.0; d * d];
    for j in 0..d {
        let mut diag = a[j * d + j];
        for p in 0..j {
            diag -= l[j * d + p] * l[j * d + p];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(numeric_err!("matrix not positive definite (pivot {j} = {diag})"));
        }
        let ljj = diag.sqrt();
        l[j * d + j] = ljj;
        for i in j + 1..d {
            let mut s = a[i * d + j];
            for p in 0..j {
                s -= l[i * d + p] * l[j * d + p];
            }
            l[i * d + j] = s / ljj;
        }
    }
    Ok(l)
}

/// Solve `L Lᵀ X = B` in place, `B` is `d×n` row-major.
pub(crate) fn cholesky_solve_in_place(d: usize, n: usize, l: &[f64], b: &mut [f64]) {
    // forward: L y = b
    for i in 0..d {
        for p in 0..i {
            let lip = l[i * d + p];
            if lip != 0.0 {
                for c in 0..n {
                    b[i * n + c] -= lip * b[p * n + c];
                }
            }
        }
        let lii = l[i * d + i];
        for c in 0..n {
            b[i * n + c] /= lii;
        }
    }
    // backward: Lᵀ x = y
    for i in (0..d).rev() {
        for p in i + 1..d {
            let lpi = l[p * d + i];
            if lpi != 0.0 {
                for c in 0..n {
                    b[i * n + c] -= lpi * b[p * n + c];
                }
            }
        }
        let lii = l[i * d + i];
        for c in 0..n {
            b[i * n + c] /= lii;
        }
    }
}

/// Solve `A X = B` for one SPD system with a single refinement pass.
/// Returns the solution and the factor (reused by the backward rule).
pub(crate) fn spd_solve_single(
    d: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let l = cholesky(d, a)?;
    let mut x = b.to_vec();
    cholesky_solve_in_place(d, n, &l, &mut x);
    // r = b - A x, then x += A⁻¹ r
    let mut r = b.to_vec();
    for i in 0..d {
        for p in 0..d {
            let aip = a[i * d + p];
            for c in 0..n {
                r[i * n + c] -= aip * x[p * n + c];
            }
        }
    }
    cholesky_solve_in_place(d, n, &l, &mut r);
    for (xi, ri) in x.iter_mut().zip(&r) {
        *xi += ri;
    }
    Ok((x, l))
}

/// Thin singular value decomposition `X = U·diag(s)·Vᵀ`.
///
/// `u` is `m×r`, `s` has `r` non-increasing entries, `v` is `n×r`.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
}

impl Svd {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Tensor {
        let (m, r) = (self.u.shape()[0], self.s.len());
        let n = self.v.shape()[0];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..r {
                    acc += self.u.data()[i * r + k] * self.s[k] * self.v.data()[j * r + k];
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::from_parts(vec![m, n], out)
    }
}

/// One-sided Jacobi SVD keeping the `rank` leading singular triplets.
///
/// Left singular vectors belonging to zero singular values are returned as
/// zero columns. Not recorded on any tape.
pub fn truncated_svd(x: &Tensor, rank: usize) -> Result<Svd> {
    if x.rank() != 2 {
        return Err(dim_err!("truncated_svd expects a matrix, got {:?}", x.shape()));
    }
    let (m, n) = (x.shape()[0], x.shape()[1]);
    if rank > m.min(n) {
        return Err(contract_err!("rank {rank} exceeds min({m},{n})"));
    }
    x.check_finite("truncated_svd input")?;
    let full = if m >= n {
        jacobi_tall(m, n, x.data())?
    } else {
        // X = U S Vᵀ  <=>  Xᵀ = V S Uᵀ
        let xt = x.transpose()?;
        let f = jacobi_tall(n, m, xt.data())?;
        Svd { u: f.v, s: f.s, v: f.u }
    };
    Ok(truncate(full, rank))
}

fn truncate(svd: Svd, rank: usize) -> Svd {
    let r_full = svd.s.len();
    let take = |t: &Tensor| {
        let rows = t.shape()[0];
        let mut out = Vec::with_capacity(rows * rank);
        for i in 0..rows {
            out.extend_from_slice(&t.data()[i * r_full..i * r_full + rank]);
        }
        Tensor::from_parts(vec![rows, rank], out)
    };
    Svd { u: take(&svd.u), s: svd.s[..rank].to_vec(), v: take(&svd.v) }
}

/// Hestenes one-sided Jacobi on an `m×n` matrix with `m >= n`.
fn jacobi_tall(m: usize, n: usize, a: &[f64]) -> Result<Svd> {
    // Work on columns: col-major copy.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[i * n + j]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let eps = f64::EPSILON;
    let mut converged = n < 2;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= eps * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                for (xp, xq) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (a0, b0) = (*xp, *xq);
                    *xp = c * a0 - s * b0;
                    *xq = s * a0 + c * b0;
                }
                let (vl, vr) = v.split_at_mut(q);
                for (xp, xq) in vl[p].iter_mut().zip(vr[0].iter_mut()) {
                    let (a0, b0) = (*xp, *xq);
                    *xp = c * a0 - s * b0;
                    *xq = s * a0 + c * b0;
                }
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(numeric_err!("Jacobi SVD did not converge in {JACOBI_MAX_SWEEPS} sweeps"));
    }
    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let smax = norms.iter().fold(0.0f64, |a, &b| a.max(b));
    let mut u = vec![0.0; m * n];
    let mut vt = vec![0.0; n * n];
    let mut s = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        s.push(sigma);
        if sigma > smax * 1e-15 * (m as f64) && sigma > 0.0 {
            for i in 0..m {
                u[i * n + k] = cols[j][i] / sigma;
            }
        }
        for i in 0..n {
            vt[i * n + k] = v[j][i];
        }
    }
    Ok(Svd {
        u: Tensor::from_parts(vec![m, n], u),
        s,
        v: Tensor::from_parts(vec![n, n], vt),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn diag_singular_values() {
        let x = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let svd = truncated_svd(&x, 2).unwrap();
        assert!((svd.s[0] - 3.0).abs() < 1e-14);
        assert!((svd.s[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rank_one_outer_product_reconstructs() {
        let u = [1.0, -2.0, 0.5];
        let v = [3.0, 1.0];
        let rows: Vec<Vec<f64>> = u.iter().map(|a| v.iter().map(|b| a * b).collect()).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let svd = truncated_svd(&x, 1).unwrap();
        assert!(svd.reconstruct().max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn wide_matrix_goes_through_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn([3, 7], 1.0, &mut rng);
        let svd = truncated_svd(&x, 3).unwrap();
        assert_eq!(svd.u.shape(), &[3, 3]);
        assert_eq!(svd.v.shape(), &[7, 3]);
        assert!(svd.reconstruct().max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn discarded_energy_matches_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn([9, 5], 1.0, &mut rng);
        let full = truncated_svd(&x, 5).unwrap();
        let cut = truncated_svd(&x, 2).unwrap();
        let resid = x.sub(&cut.reconstruct()).unwrap().norm().powi(2);
        let discarded: f64 = full.s[2..].iter().map(|s| s * s).sum();
        assert!((resid - discarded).abs() < 1e-10 * discarded.max(1.0));
    }

    #[test]
    fn rank_above_min_dim_is_contract_error() {
        let x = Tensor::zeros([4, 2]);
        assert!(matches!(truncated_svd(&x, 3), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn cholesky_rejects_asymmetry_and_indefinite() {
        assert!(matches!(cholesky(2, &[1.0, 0.5, 0.0, 1.0]), Err(crate::Error::Contract(_))));
        assert!(matches!(cholesky(2, &[1.0, 2.0, 2.0, 1.0]), Err(crate::Error::Numeric(_))));
    }
}
