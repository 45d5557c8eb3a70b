//! Euler sampling and receding-horizon execution.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Conditioning, KoopmanFlow};
use crate::error::{config_err, dim_err, Result};
use crate::gradcore::Tensor;
use crate::koopman::DmdSolver;
use crate::synthbench::GenSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    /// Number of Euler steps (network evaluations).
    pub nfe: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { nfe: 1, seed: 0 }
    }
}

/// Integrate `dx/dt = field(x, t)` from `x0` at `t = 0` to `t = 1` with
/// `nfe` Euler steps on the uniform grid `t_k = k/nfe`. The field gets one
/// time per leading-axis element.
pub fn euler_integrate(
    x0: &Tensor,
    nfe: usize,
    mut field: impl FnMut(&Tensor, &[f64]) -> Result<Tensor>,
) -> Result<Tensor> {
    if nfe == 0 {
        return Err(config_err!("nfe must be at least 1"));
    }
    let b = x0.shape().first().copied().unwrap_or(0);
    let h = 1.0 / nfe as f64;
    let mut x = x0.clone();
    for k in 0..nfe {
        let t = vec![k as f64 * h; b];
        let v = field(&x, &t)?;
        x = x.add(&v.scale(h))?;
    }
    Ok(x)
}

/// Euler integration of the model's total velocity.
pub fn euler_from(model: &KoopmanFlow, x0: &Tensor, cond: &Conditioning, nfe: usize) -> Result<Tensor> {
    euler_integrate(x0, nfe, |x, t| Ok(model.evaluate(x, cond, t, DmdSolver::Svd)?.v_total))
}

/// Draw `x0 ~ N(0, I)` from the config's seed and integrate; returns
/// `[B, T, D]` for a batch of conditions.
pub fn euler_sample(model: &KoopmanFlow, cond: &Conditioning, cfg: &SamplerConfig) -> Result<Tensor> {
    let c = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x0 = Tensor::randn([cond.batch(), c.seq_len, c.action_dim], 1.0, &mut rng);
    euler_from(model, &x0, cond, cfg.nfe)
}

/// Mean squared error between two trajectory batches.
pub fn trajectory_mse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    let diff = pred.sub(truth)?;
    Ok(diff.data().iter().map(|v| v * v).sum::<f64>() / diff.numel().max(1) as f64)
}

/// Largest third difference along time over every trajectory and dimension
/// of `[B, T, D]`.
pub fn max_jerk(x: &Tensor) -> Result<f64> {
    let s = x.shape();
    if s.len() != 3 || s[1] < 4 {
        return Err(dim_err!("jerk needs [B, T ≥ 4, D], got {s:?}"));
    }
    let (t, d) = (s[1], s[2]);
    let mut worst: f64 = 0.0;
    for traj in x.data().chunks(t * d) {
        for k in 3..t {
            for j in 0..d {
                let at = |i: usize| traj[i * d + j];
                worst = worst.max((at(k) - 3.0 * at(k - 1) + 3.0 * at(k - 2) - at(k - 3)).abs());
            }
        }
    }
    Ok(worst)
}

/// Per-step norms of `v_var` and `v_total`, one profile per trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeReport {
    pub v_var: Vec<Vec<f64>>,
    pub v_total: Vec<Vec<f64>>,
}

impl MagnitudeReport {
    /// Average over trajectories and steps.
    pub fn means(&self) -> (f64, f64) {
        let mean = |rows: &[Vec<f64>]| {
            let n: usize = rows.iter().map(Vec::len).sum();
            rows.iter().flatten().sum::<f64>() / n.max(1) as f64
        };
        (mean(&self.v_var), mean(&self.v_total))
    }
}

fn step_norms(x: &Tensor) -> Vec<Vec<f64>> {
    let s = x.shape();
    x.data()
        .chunks(s[1] * s[2])
        .map(|traj| traj.chunks(s[2]).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect())
        .collect()
}

pub fn variant_magnitude_report(model: &KoopmanFlow, x_t: &Tensor, cond: &Conditioning, t: &[f64]) -> Result<MagnitudeReport> {
    let out = model.evaluate(x_t, cond, t, DmdSolver::Svd)?;
    Ok(MagnitudeReport { v_var: step_norms(&out.v_var), v_total: step_norms(&out.v_total) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RhcConfig {
    /// Steps of each plan that are eligible for execution.
    pub horizon: usize,
    /// Steps executed before replanning.
    pub execute: usize,
    pub nfe: usize,
    pub seed: u64,
}

impl Default for RhcConfig {
    fn default() -> Self {
        Self { horizon: 4, execute: 3, nfe: 1, seed: 0 }
    }
}

impl RhcConfig {
    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if !(1 <= self.execute && self.execute <= self.horizon && self.horizon <= seq_len) {
            return Err(config_err!(
                "need 1 ≤ execute ({}) ≤ horizon ({}) ≤ T ({seq_len})",
                self.execute,
                self.horizon
            ));
        }
        if self.nfe == 0 {
            return Err(config_err!("nfe must be at least 1"));
        }
        Ok(())
    }
}

/// Something that can be observed at any step of an episode.
pub trait Environment {
    fn episode_len(&self) -> usize;

    /// Conditioning for a plan that starts at `step` (batch of one).
    fn observe(&self, step: usize) -> Result<Conditioning>;
}

/// The generator's world played out over a long episode: the slow modes keep
/// running, and the event channel seen by a plan is the window of the
/// episode's events starting at the plan's first step.
#[derive(Clone, Debug)]
pub struct SyntheticEnv {
    pub spec: GenSpec,
    /// Context at step 0.
    pub context: Vec<f64>,
    pub events: Vec<bool>,
}

impl SyntheticEnv {
    pub fn new(spec: GenSpec, context: Vec<f64>, events: Vec<bool>) -> Result<Self> {
        if context.len() != spec.context_dim() {
            return Err(dim_err!("context of width {}, spec needs {}", context.len(), spec.context_dim()));
        }
        Ok(Self { spec, context, events })
    }

    /// Noiseless actions the environment would produce over the whole
    /// episode, `[episode_len, D]`.
    pub fn reference(&self) -> Tensor {
        let n = self.events.len();
        let slow = (0..n).flat_map(|s| self.spec.slow_value(&self.context, s as f64)).collect();
        let slow = Tensor::new([n, self.spec.action_dim], slow).expect("finite context");
        slow.add(&self.spec.transient_component(&self.events)).expect("same shape")
    }
}

impl Environment for SyntheticEnv {
    fn episode_len(&self) -> usize {
        self.events.len()
    }

    fn observe(&self, step: usize) -> Result<Conditioning> {
        let t = self.spec.seq_len;
        let context = self.spec.shift_context(&self.context, step as f64);
        let events: Vec<f64> = (step..step + t)
            .map(|s| f64::from(u8::from(self.events.get(s).copied().unwrap_or(false))))
            .collect();
        Ok(Conditioning { events: Tensor::new([1, t], events)?, context: Tensor::new([1, context.len()], context)? })
    }
}

/// Outcome of a receding-horizon episode.
#[derive(Clone, Debug)]
pub struct RhcResult {
    /// `[episode_len, D]`
    pub executed: Tensor,
    /// First step of each plan.
    pub plan_starts: Vec<usize>,
    /// Wall-clock time of each planning call (observation, sampling).
    pub latencies: Vec<Duration>,
}

/// Plan with the model, execute the first `execute` steps, replan; the last
/// chunk is cut at the end of the episode.
pub fn rhc_execute(env: &impl Environment, model: &KoopmanFlow, cfg: &RhcConfig) -> Result<RhcResult> {
    let c = &model.config;
    rhc_execute_with(env, cfg, c.seq_len, c.action_dim, |x0, cond| euler_from(model, x0, cond, cfg.nfe))
}

/// The receding-horizon loop around an arbitrary planner, which maps the
/// initial noise `[1, T, D]` and an observation to a plan `[1, T, D]`.
pub fn rhc_execute_with(
    env: &impl Environment,
    cfg: &RhcConfig,
    seq_len: usize,
    action_dim: usize,
    mut planner: impl FnMut(&Tensor, &Conditioning) -> Result<Tensor>,
) -> Result<RhcResult> {
    cfg.validate(seq_len)?;
    let (n, d) = (env.episode_len(), action_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut executed = Vec::with_capacity(n * d);
    let mut plan_starts = Vec::new();
    let mut latencies = Vec::new();
    let mut step = 0;
    while step < n {
        let x0 = Tensor::randn([1, seq_len, d], 1.0, &mut rng);
        let start = Instant::now();
        let cond = env.observe(step)?;
        let plan = planner(&x0, &cond)?;
        if plan.shape() != [1, seq_len, d] {
            return Err(dim_err!("plan of shape {:?}, expected [1, {seq_len}, {d}]", plan.shape()));
        }
        latencies.push(start.elapsed());
        plan_starts.push(step);
        let take = cfg.execute.min(n - step);
        executed.extend_from_slice(&plan.data()[..take * d]);
        step += take;
    }
    Ok(RhcResult { executed: Tensor::new([n, d], executed)?, plan_starts, latencies })
}
