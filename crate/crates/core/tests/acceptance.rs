//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Every threshold and data setting is pinned below. The process exits with
//! a failure status only when a criterion cannot be evaluated at all, or
//! when `KFLOW_ACCEPTANCE_STRICT=1` is set and some criterion fails.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use koopflow::backbone::{BackboneConfig, KoopmanFlow, ParamStore};
use koopflow::inference::{
    euler_from, euler_sample, rhc_execute, trajectory_mse, variant_magnitude_report, Environment, RhcConfig,
    SamplerConfig, SyntheticEnv,
};
use koopflow::koopman::{dmd_fit, dmd_fit_svd, dmd_latency, DEFAULT_LAMBDA};
use koopflow::spectral::{amplitude_spectrum, fourier_filter, select_mask, MaskTracker};
use koopflow::synthbench::{event_report, generate_dataset, Batch, Benchmark, GenSpec};
use koopflow::training::{
    consistency_target, heldout_fm_loss, inv_sensitivity, ot_interpolate, HeldoutProbe, StepDraw, TrainConfig,
    Trainer,
};
use koopflow::{Error, Result, Tape, Tensor};

// 1: spectral split
const SPLIT_CASES: usize = 100;
const SPLIT_TOL: f64 = 1e-9;
const SPLIT_BUDGET: Duration = Duration::from_secs(1);
// 2: window operator
const DMD_ORACLE_TOL: f64 = 1e-9;
const DMD_SVD_TOL: f64 = 1e-8;
const DMD_RECOVERY_LAMBDA: f64 = 1e-6;
const DMD_RECOVERY_TOL: f64 = 1e-6;
// 3: window-fit latency
const LATENCY_DIM: usize = 128;
const LATENCY_WINDOW: usize = 4;
const LATENCY_ITERS: usize = 10_000;
const LATENCY_MEDIAN_MAX: Duration = Duration::from_millis(1);
const LATENCY_BUDGET: Duration = Duration::from_secs(60);
// 4: consistency fixed point
const FIXED_POINT_CASES: usize = 1000;
const FIXED_POINT_TOL: f64 = 1e-9;
// 5: whole-model gradient
const GRAD_COORDS: usize = 5;
const GRAD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(300);
// 6-10: trained models
const TRAIN_COUNT: usize = 512;
const HELDOUT_COUNT: usize = 128;
const TRAIN_STEPS: usize = 2000;
const TRAIN_BUDGET: Duration = Duration::from_secs(20 * 60);
const FM_REDUCTION: f64 = 0.5;
const NFE_RATIO_MAX: f64 = 1.5;
const CORRELATION_FACTOR: f64 = 2.0;
const NAIVE_R_MAX: f64 = 0.15;
const VARIANT_SHARE_MAX: f64 = 0.5;
const EVAL_SEED: u64 = 3;
const EVENT_DRAWS: usize = 16;
const SENSITIVITY_PAIRS: usize = 4;
// 11: receding horizon
const RHC_EPISODE: usize = 48;
const PLAN_BUDGET: Duration = Duration::from_millis(50);

/// Demonstrations with low sensor noise, used for every trained-model
/// criterion except the event correlation.
fn smooth_spec() -> GenSpec {
    GenSpec { noise_std: 0.1, ..Default::default() }
}

/// Demonstrations whose broadband noise matches the kick amplitude, so
/// filtering the raw actions cannot isolate the events.
fn noisy_spec() -> GenSpec {
    GenSpec { noise_std: 1.0, ..Default::default() }
}

fn train_config() -> TrainConfig {
    TrainConfig { steps: TRAIN_STEPS, ..Default::default() }
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn max_abs(x: &Tensor) -> f64 {
    x.data().iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn energy(x: &Tensor) -> f64 {
    x.data().iter().map(|v| v * v).sum()
}

fn spectral_split() -> Result<Verdict> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut sum_err, mut energy_err): (f64, f64) = (0.0, 0.0);
    let tape = Tape::no_grad();
    for _ in 0..SPLIT_CASES {
        let h = Tensor::randn([1, 16, 8], rng.random_range(0.1..3.0), &mut rng);
        let mask = select_mask(&amplitude_spectrum(&h)?, rng.random_range(0.05..1.0))?;
        let split = fourier_filter(tape.constant(h.clone())?, &mask)?;
        let (inv, var) = (split.x_inv.value(), split.x_var.value());
        sum_err = sum_err.max(max_abs(&inv.add(&var)?.sub(&h)?));
        energy_err = energy_err.max((energy(&inv) + energy(&var) - energy(&h)).abs());
    }
    let elapsed = start.elapsed();
    verdict(
        sum_err <= SPLIT_TOL && energy_err <= SPLIT_TOL && elapsed < SPLIT_BUDGET,
        format!("sum err {sum_err:.1e}, energy err {energy_err:.1e} (tol {SPLIT_TOL:.0e}), {elapsed:.2?} (< {SPLIT_BUDGET:?})"),
    )
}

/// `Y·Xᵀ·(X·Xᵀ + λI)⁻¹` with an explicit inverse.
fn dmd_oracle(z: &Tensor, lambda: f64) -> Tensor {
    let (d, w) = (z.shape()[0], z.shape()[1]);
    let zm = DMatrix::from_row_slice(d, w, z.data());
    let x = zm.columns(0, w - 1).into_owned();
    let y = zm.columns(1, w - 1).into_owned();
    let gram = &x * x.transpose() + DMatrix::identity(d, d) * lambda;
    let k = y * x.transpose() * gram.lu().try_inverse().expect("damped Gram matrix is invertible");
    Tensor::new([d, d], k.transpose().as_slice().to_vec()).expect("finite oracle")
}

fn window_operator() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let tape = Tape::no_grad();
    let (mut oracle_err, mut svd_err): (f64, f64) = (0.0, 0.0);
    for d in 1..=4 {
        for w in [2, 3, 5, 8] {
            let z = Tensor::randn([d, w], 1.0, &mut rng);
            let lambda = rng.random_range(1e-3..1.0);
            let k = dmd_fit(tape.constant(z.clone())?, lambda)?.value();
            oracle_err = oracle_err.max(max_abs(&k.sub(&dmd_oracle(&z, lambda))?));
            let rank = d.min(w - 1);
            svd_err = svd_err.max(max_abs(&k.sub(&dmd_fit_svd(&z, lambda, rank)?)?));
        }
    }

    // a known rotation-like system observed through a random lifting
    let (n, d, w) = (3, 6, 24);
    let theta: f64 = 0.4;
    let a = DMatrix::from_row_slice(n, n, &[theta.cos(), -theta.sin(), 0.0, theta.sin(), theta.cos(), 0.0, 0.0, 0.0, 0.97]);
    let lift = DMatrix::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0));
    let mut state = nalgebra::DVector::from_fn(n, |_, _| rng.random_range(1.0..2.0));
    let mut cols = Vec::new();
    for _ in 0..w {
        cols.push(&lift * &state);
        state = &a * state;
    }
    let z = DMatrix::from_columns(&cols);
    let zt = Tensor::new([d, w], z.transpose().as_slice().to_vec())?;
    let k = dmd_fit(tape.constant(zt)?, DMD_RECOVERY_LAMBDA)?.value();
    let k = DMatrix::from_row_slice(d, d, k.data());
    let x = z.columns(0, w - 1).into_owned();
    let y = z.columns(1, w - 1).into_owned();
    let recovery = (&k * x - &y).norm() / y.norm();

    verdict(
        oracle_err <= DMD_ORACLE_TOL && svd_err <= DMD_SVD_TOL && recovery <= DMD_RECOVERY_TOL,
        format!(
            "vs explicit inverse {oracle_err:.1e} (tol {DMD_ORACLE_TOL:.0e}), svd vs normal {svd_err:.1e} (tol {DMD_SVD_TOL:.0e}), one-step rel err {recovery:.1e} at λ={DMD_RECOVERY_LAMBDA:.0e} (tol {DMD_RECOVERY_TOL:.0e})"
        ),
    )
}

fn window_latency() -> Result<Verdict> {
    let start = Instant::now();
    let t = dmd_latency(LATENCY_DIM, LATENCY_WINDOW, LATENCY_ITERS, DEFAULT_LAMBDA, 13)?;
    let elapsed = start.elapsed();
    verdict(
        t.median < LATENCY_MEDIAN_MAX && elapsed < LATENCY_BUDGET,
        format!(
            "d={LATENCY_DIM}, τ_w={LATENCY_WINDOW}: median {:.1} µs (< {LATENCY_MEDIAN_MAX:?}), p90 {:.1} µs, {LATENCY_ITERS} fits in {elapsed:.2?} (< {LATENCY_BUDGET:?})",
            t.median.as_secs_f64() * 1e6,
            t.p90.as_secs_f64() * 1e6
        ),
    )
}

fn fixed_point() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst: f64 = 0.0;
    for _ in 0..FIXED_POINT_CASES {
        let x0 = Tensor::randn([1, 16, 2], 1.0, &mut rng);
        let x1 = Tensor::randn([1, 16, 2], rng.random_range(0.1..3.0), &mut rng);
        let t = rng.random_range(0.0..0.99);
        let dt = rng.random_range(1e-4..(1.0 - t));
        let x_t = ot_interpolate(&x0, &x1, &[t])?;
        let x_next = ot_interpolate(&x0, &x1, &[t + dt])?;
        let straight = x1.sub(&x0)?;
        let target = consistency_target(&x_t, &x_next, &straight, &[t], &[dt])?;
        worst = worst.max(max_abs(&target.sub(&straight)?));
    }
    verdict(worst <= FIXED_POINT_TOL, format!("{FIXED_POINT_CASES} tuples, worst deviation {worst:.1e} (tol {FIXED_POINT_TOL:.0e})"))
}

fn jitter(store: &mut ParamStore, std: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    for (_, p) in store.iter_mut().filter(|(_, p)| p.trainable) {
        p.value = p.value.add(&Tensor::randn(p.value.shape().to_vec(), std, rng))?;
    }
    Ok(())
}

fn whole_model_gradient() -> Result<Verdict> {
    let start = Instant::now();
    let spec = GenSpec { seq_len: 8, slow_freqs: vec![1.0], seed: 15, ..Default::default() };
    let batch = Batch::of(&generate_dataset(&spec, 4)?)?;
    let model = KoopmanFlow::new(BackboneConfig {
        seq_len: 8,
        context_dim: spec.context_dim(),
        hidden: 8,
        blocks: 2,
        heads: 2,
        fourier_dim: 4,
        dyn_dim: 4,
        ..Default::default()
    })?;
    let cfg = TrainConfig { batch: 4, r_ct: 0.5, ..Default::default() };
    let mut trainer = Trainer::new(model, cfg.clone())?;
    trainer.model.mask = MaskTracker::from_mask(select_mask(&[4.0, 3.0, 1.0, 0.5, 0.5], 0.85)?);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    jitter(&mut trainer.model.params, 0.2, &mut rng)?;
    jitter(&mut trainer.teacher.shadow, 0.2, &mut rng)?;
    let draw = StepDraw::sample(batch.actions.shape(), &cfg, &mut rng)?;
    let (b, grads, _) = trainer.losses(&batch, &draw)?;
    let terms = [b.fm, b.ct, b.ct_inv, b.inv_cross, b.var_flow, b.reg_temp, b.reg_rate, b.reg_spatial];
    let all_active = terms.iter().all(|&v| v > 0.0);

    let mut worst: f64 = 0.0;
    let mut where_ = String::new();
    let mut probes = 0;
    for (name, g) in &grads {
        for _ in 0..GRAD_COORDS {
            let i = rng.random_range(0..g.numel());
            let mut probe = trainer.clone();
            probe.model.params.get_mut(name)?.data_mut()[i] += GRAD_STEP;
            let plus = probe.losses(&batch, &draw)?.0.total;
            probe.model.params.get_mut(name)?.data_mut()[i] -= 2.0 * GRAD_STEP;
            let minus = probe.losses(&batch, &draw)?.0.total;
            let numeric = (plus - minus) / (2.0 * GRAD_STEP);
            let analytic = g.data()[i];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
                where_ = format!("{name}[{i}]");
            }
            probes += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        all_active && worst <= GRAD_TOL && elapsed < GRAD_BUDGET,
        format!(
            "{probes} coordinates over {} tensors, all loss terms active: {all_active}, worst rel err {worst:.1e} at {where_} (tol {GRAD_TOL:.0e}), {elapsed:.1?}",
            grads.len()
        ),
    )
}

/// The models shared by the trained-model criteria.
struct Runs {
    smooth: Benchmark,
    fused: KoopmanFlow,
    fused_time: Duration,
    fm_before: f64,
    fm_after: f64,
    no_decoupling: KoopmanFlow,
    pure_fm: KoopmanFlow,
    noisy: Benchmark,
    noisy_fused: KoopmanFlow,
}

impl Runs {
    fn train() -> Result<Self> {
        let smooth = Benchmark::new(&smooth_spec(), TRAIN_COUNT, HELDOUT_COUNT)?;
        let model_cfg = smooth.model_config();
        let probe = HeldoutProbe::new(smooth.heldout_batch.actions.shape(), 4, EVAL_SEED);

        let start = Instant::now();
        let initial = KoopmanFlow::new(model_cfg.clone())?;
        let fm_before = heldout_fm_loss(&initial, &smooth.heldout_batch, &probe)?;
        let mut trainer = Trainer::new(initial, train_config())?;
        trainer.fit(&smooth.train, None)?;
        let fused = trainer.into_model();
        let fm_after = heldout_fm_loss(&fused, &smooth.heldout_batch, &probe)?;
        let fused_time = start.elapsed();

        let no_decoupling = smooth.train_model(&model_cfg, &TrainConfig { lambda_dec: 0.0, ..train_config() })?;
        let pure_fm = smooth.train_model(&model_cfg, &train_config().pure_fm())?;

        let noisy = Benchmark::new(&noisy_spec(), TRAIN_COUNT, HELDOUT_COUNT)?;
        let noisy_fused = noisy.train_model(&noisy.model_config(), &train_config())?;
        Ok(Self { smooth, fused, fused_time, fm_before, fm_after, no_decoupling, pure_fm, noisy, noisy_fused })
    }

    fn mse(&self, model: &KoopmanFlow, nfe: usize) -> Result<f64> {
        let held = &self.smooth.heldout_batch;
        trajectory_mse(&euler_sample(model, &held.cond, &SamplerConfig { nfe, seed: EVAL_SEED })?, &held.actions)
    }
}

fn training_smoke(r: &Runs) -> Result<Verdict> {
    let ratio = r.fm_after / r.fm_before;
    verdict(
        ratio < FM_REDUCTION && r.fused_time < TRAIN_BUDGET,
        format!(
            "held-out fm loss {:.4} -> {:.4} ({ratio:.3}× < {FM_REDUCTION}), {TRAIN_STEPS} steps in {:.0?} (< {TRAIN_BUDGET:?})",
            r.fm_before, r.fm_after, r.fused_time
        ),
    )
}

fn decoupling_trend(r: &Runs) -> Result<Verdict> {
    let (with, without) = (r.mse(&r.fused, 1)?, r.mse(&r.no_decoupling, 1)?);
    let held = &r.smooth.heldout_batch;
    let s_with = inv_sensitivity(&r.fused, held, SENSITIVITY_PAIRS, EVAL_SEED)?;
    let s_without = inv_sensitivity(&r.no_decoupling, held, SENSITIVITY_PAIRS, EVAL_SEED)?;
    verdict(
        with < without && s_with < s_without,
        format!("1-step mse λ_dec=0.5 {with:.4} vs λ_dec=0 {without:.4}; v_inv divergence {s_with:.4} vs {s_without:.4}"),
    )
}

fn event_correlation(r: &Runs) -> Result<Verdict> {
    let held = &r.noisy.heldout_batch;
    let report = event_report(&r.noisy_fused, held, &r.noisy.heldout_events(), EVENT_DRAWS, EVAL_SEED)?;
    let (m, n) = (report.model_r, report.naive_r);
    verdict(
        m >= CORRELATION_FACTOR * n && n < NAIVE_R_MAX,
        format!("v_var energy r {m:.3}, naive r {n:.3} (need ≥ {CORRELATION_FACTOR}× and naive < {NAIVE_R_MAX})"),
    )
}

fn nfe_robustness(r: &Runs) -> Result<Verdict> {
    let fused = (r.mse(&r.fused, 1)?, r.mse(&r.fused, 10)?);
    let fm = (r.mse(&r.pure_fm, 1)?, r.mse(&r.pure_fm, 10)?);
    let (rf, rp) = (fused.0 / fused.1, fm.0 / fm.1);
    verdict(
        rf <= NFE_RATIO_MAX && rp > NFE_RATIO_MAX,
        format!(
            "fused 1-step {:.4} / 10-step {:.4} = {rf:.2} (≤ {NFE_RATIO_MAX}); flow matching only {:.4} / {:.4} = {rp:.2} (> {NFE_RATIO_MAX})",
            fused.0, fused.1, fm.0, fm.1
        ),
    )
}

fn variant_magnitude(r: &Runs) -> Result<Verdict> {
    let held = &r.smooth.heldout_batch;
    let mut rng = ChaCha8Rng::seed_from_u64(EVAL_SEED);
    let x0 = Tensor::randn(held.actions.shape().to_vec(), 1.0, &mut rng);
    let (mut var, mut total) = (0.0, 0.0);
    let times = [0.0, 0.25, 0.5, 0.75, 0.95];
    for t in times {
        let t = vec![t; held.len()];
        let x_t = ot_interpolate(&x0, &held.actions, &t)?;
        let (v, tot) = variant_magnitude_report(&r.fused, &x_t, &held.cond, &t)?.means();
        var += v;
        total += tot;
    }
    let share = var / total;
    verdict(
        share < VARIANT_SHARE_MAX,
        format!("mean ‖v_var‖ / mean ‖v_total‖ = {share:.3} over t ∈ {times:?} (< {VARIANT_SHARE_MAX})"),
    )
}

fn receding_horizon(r: &Runs) -> Result<Verdict> {
    let spec = smooth_spec();
    let events: Vec<bool> = (0..RHC_EPISODE).map(|s| s % 7 == 2).collect();
    let env = SyntheticEnv::new(spec, r.smooth.heldout[0].context.clone(), events)?;
    let cfg = RhcConfig { horizon: 4, execute: 3, nfe: 1, seed: EVAL_SEED };
    let run = rhc_execute(&env, &r.fused, &cfg)?;

    // replay every plan from the same noise stream and compare the stitched steps
    let c = &r.fused.config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stitch_err: f64 = 0.0;
    let mut covered = 0;
    for &start in &run.plan_starts {
        let x0 = Tensor::randn([1, c.seq_len, c.action_dim], 1.0, &mut rng);
        let plan = euler_from(&r.fused, &x0, &env.observe(start)?, cfg.nfe)?;
        for s in start..(start + cfg.execute).min(RHC_EPISODE) {
            for j in 0..c.action_dim {
                stitch_err = stitch_err.max((run.executed.get(&[s, j]) - plan.get(&[0, s - start, j])).abs());
            }
            covered += 1;
        }
    }
    let calls = RHC_EPISODE.div_ceil(cfg.execute);
    let worst = run.latencies.iter().max().copied().unwrap_or_default();
    let exact = stitch_err == 0.0 && covered == RHC_EPISODE && run.executed.shape() == [RHC_EPISODE, c.action_dim];
    verdict(
        exact && run.plan_starts.len() == calls && worst < PLAN_BUDGET,
        format!(
            "{} planning calls (expected {calls}), worst latency {worst:.2?} (< {PLAN_BUDGET:?}), stitched {covered}/{RHC_EPISODE} steps, max deviation {stitch_err:.1e}",
            run.plan_starts.len()
        ),
    )
}

type TrainedCheck = fn(&Runs) -> Result<Verdict>;

fn main() {
    let mut results: Vec<(u8, &str, Result<Verdict>)> = vec![
        (1, "spectral correctness", spectral_split()),
        (2, "DMD oracle equivalence", window_operator()),
        (3, "DMD latency", window_latency()),
        (4, "consistency fixed point", fixed_point()),
        (5, "whole-model gradient", whole_model_gradient()),
    ];
    for (id, name, v) in &results {
        print_line(*id, name, v);
    }
    let runs = Runs::train();
    let trained: [(u8, &str, TrainedCheck); 6] = [
        (6, "training smoke", training_smoke),
        (7, "decoupling trend", decoupling_trend),
        (8, "event correlation", event_correlation),
        (9, "NFE robustness", nfe_robustness),
        (10, "variant magnitude", variant_magnitude),
        (11, "receding horizon", receding_horizon),
    ];
    for (id, name, check) in trained {
        let v = match &runs {
            Ok(r) => check(r),
            Err(e) => Err(Error::Numeric(format!("training failed: {e}"))),
        };
        print_line(id, name, &v);
        results.push((id, name, v));
    }

    let failed = results.iter().filter(|(_, _, v)| !matches!(v, Ok(Verdict { pass: true, .. }))).count();
    let broken = results.iter().any(|(_, _, v)| v.is_err());
    println!("acceptance: {}/{} criteria pass", results.len() - failed, results.len());
    let strict = std::env::var("KFLOW_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if broken || (strict && failed > 0) {
        std::process::exit(1);
    }
}

fn print_line(id: u8, name: &str, v: &Result<Verdict>) {
    match v {
        Ok(v) => println!("criterion {id:2} {}: {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail),
        Err(e) => println!("criterion {id:2} FAIL: {name}: could not be evaluated: {e}"),
    }
}
