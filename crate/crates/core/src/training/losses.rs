use rand::seq::index::sample;
use rand::Rng;

use crate::error::{config_err, contract_err, dim_err, Result};
use crate::gradcore::{Tensor, Var};

/// `t·x1 + (1 − t)·x0`, with one `t` per leading-axis element.
pub fn ot_interpolate(x0: &Tensor, x1: &Tensor, t: &[f64]) -> Result<Tensor> {
    if x0.shape() != x1.shape() {
        return Err(dim_err!("x0 {:?} vs x1 {:?}", x0.shape(), x1.shape()));
    }
    let b = x0.shape().first().copied().unwrap_or(0);
    if t.len() != b {
        return Err(dim_err!("{} times for batch {b}", t.len()));
    }
    if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(contract_err!("interpolation time {bad} outside [0, 1]"));
    }
    let row = x0.numel() / b.max(1);
    let data = x0
        .data()
        .iter()
        .zip(x1.data())
        .enumerate()
        .map(|(i, (a, c))| {
            let ti = t[i / row];
            ti * c + (1.0 - ti) * a
        })
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Mean squared error between the predicted velocity and `x1 − x0`.
pub fn fm_loss<'t>(v_pred: Var<'t>, x0: &Tensor, x1: &Tensor) -> Result<Var<'t>> {
    let target = v_pred.tape().constant(x1.sub(x0)?)?;
    v_pred.mse(&target)
}

/// Consistency target from a teacher velocity already evaluated at
/// `(x_{t+dt}, t + dt)`:
/// `(x_{t+dt} + (1 − t − dt)·v_next − x_t) / (1 − t)`.
pub fn consistency_target(x_t: &Tensor, x_next: &Tensor, v_next: &Tensor, t: &[f64], dt: &[f64]) -> Result<Tensor> {
    if x_t.shape() != x_next.shape() || x_t.shape() != v_next.shape() {
        return Err(dim_err!("consistency target over mismatched shapes"));
    }
    let b = x_t.shape().first().copied().unwrap_or(0);
    if t.len() != b || dt.len() != b {
        return Err(dim_err!("{} / {} times for batch {b}", t.len(), dt.len()));
    }
    for (&ti, &di) in t.iter().zip(dt) {
        if !((0.0..1.0).contains(&ti) && di >= 0.0 && ti + di <= 1.0 + 1e-12) {
            return Err(contract_err!("consistency step needs 0 ≤ t < 1 and t + dt ≤ 1, got t={ti}, dt={di}"));
        }
    }
    let row = x_t.numel() / b.max(1);
    let data = (0..x_t.numel())
        .map(|i| {
            let (ti, di) = (t[i / row], dt[i / row]);
            (x_next.data()[i] + (1.0 - ti - di) * v_next.data()[i] - x_t.data()[i]) / (1.0 - ti)
        })
        .collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// Consistency target for the pair `(x0, x1)`: both `x_t` and `x_{t+dt}` are
/// interpolated from the same pair and `teacher` is queried at
/// `(x_{t+dt}, t + dt)`.
pub fn ct_target(
    x0: &Tensor,
    x1: &Tensor,
    t: &[f64],
    dt: &[f64],
    teacher: impl FnOnce(&Tensor, &[f64]) -> Result<Tensor>,
) -> Result<Tensor> {
    let t_next: Vec<f64> = t.iter().zip(dt).map(|(a, b)| (a + b).min(1.0)).collect();
    let x_t = ot_interpolate(x0, x1, t)?;
    let x_next = ot_interpolate(x0, x1, &t_next)?;
    let v_next = teacher(&x_next, &t_next)?;
    consistency_target(&x_t, &x_next, &v_next, t, dt)
}

pub fn ct_loss<'t>(v_pred: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    v_pred.mse(&v_pred.tape().constant(target.clone())?)
}

/// Teacher outputs the decoupled terms compare against.
pub struct TeacherFields<'a> {
    /// `v_inv` and `v_var` at `(x_t, t)`.
    pub same_inv: &'a Tensor,
    pub same_var: &'a Tensor,
    /// `v_inv` at `(x_{t+dt}, t + dt)`.
    pub next_inv: &'a Tensor,
}

pub struct Decoupled<'t> {
    pub ct_inv: Var<'t>,
    pub inv_cross: Var<'t>,
    pub var_flow: Var<'t>,
}

pub fn decoupled_losses<'t>(v_inv: Var<'t>, v_var: Var<'t>, teacher: &TeacherFields<'_>) -> Result<Decoupled<'t>> {
    let tape = v_inv.tape();
    Ok(Decoupled {
        ct_inv: v_inv.mse(&tape.constant(teacher.same_inv.clone())?)?,
        inv_cross: v_inv.mse(&tape.constant(teacher.next_inv.clone())?)?,
        var_flow: v_var.mse(&tape.constant(teacher.same_var.clone())?)?,
    })
}

pub struct Regularizers<'t> {
    pub temp_diff: Var<'t>,
    pub change_rate: Var<'t>,
    pub spatial: Var<'t>,
}

/// L1 kinematic penalties on `v_inv: [B, T, D]` against the teacher's
/// next-step prediction, already scaled by their weights. The spatial term
/// pulls each sample toward the batch mean of `v_inv`.
pub fn reg_loss<'t>(v_inv: Var<'t>, next_inv: &Tensor, lambda_temporal: f64, lambda_spatial: f64) -> Result<Regularizers<'t>> {
    let shape = v_inv.shape();
    if shape.len() != 3 || shape[1] < 2 {
        return Err(dim_err!("kinematic penalties need [B, T ≥ 2, D], got {shape:?}"));
    }
    if next_inv.shape() != shape.as_slice() {
        return Err(dim_err!("teacher prediction {:?} vs {shape:?}", next_inv.shape()));
    }
    let tape = v_inv.tape();
    let next = tape.constant(next_inv.clone())?;
    let steps = shape[1] - 1;
    let diff = |x: Var<'t>| -> Result<Var<'t>> { x.narrow(1, 1, steps)?.sub(&x.narrow(1, 0, steps)?) };
    let batch_mean = v_inv.mean_axis(0)?.reshape([1, shape[1], shape[2]])?.expand(shape.clone())?;
    Ok(Regularizers {
        temp_diff: v_inv.mean_abs_diff(&next)?.scale(lambda_temporal)?,
        change_rate: diff(v_inv)?.mean_abs_diff(&diff(next)?)?.scale(lambda_temporal)?,
        spatial: v_inv.mean_abs_diff(&batch_mean)?.scale(lambda_spatial)?,
    })
}

/// Random split of `0..b` into `round(b·r_ct)` consistency indices and the
/// flow-matching rest, both sorted.
pub fn partition_batch<R: Rng + ?Sized>(b: usize, r_ct: f64, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(r_ct > 0.0 && r_ct < 1.0) {
        return Err(config_err!("r_ct must lie in (0, 1), got {r_ct}"));
    }
    let n_ct = (b as f64 * r_ct).round() as usize;
    if n_ct == 0 || n_ct == b {
        return Err(config_err!("batch {b} with r_ct {r_ct} leaves one partition empty"));
    }
    let mut in_ct = vec![false; b];
    for i in sample(rng, b, n_ct) {
        in_ct[i] = true;
    }
    let ct = (0..b).filter(|&i| in_ct[i]).collect();
    let fm = (0..b).filter(|&i| !in_ct[i]).collect();
    Ok((ct, fm))
}
