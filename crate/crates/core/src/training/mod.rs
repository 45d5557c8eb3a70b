//! Fused co-training: flow matching on one part of every batch, consistency
//! distillation from an EMA teacher plus the decoupled spectral losses and
//! kinematic penalties on the other.

mod eval;
mod losses;
mod optim;

use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use eval::{heldout_fm_loss, inv_sensitivity, HeldoutProbe};
pub use losses::{
    consistency_target, ct_loss, ct_target, decoupled_losses, fm_loss, ot_interpolate, partition_batch, reg_loss,
    Decoupled, Regularizers, TeacherFields,
};
pub use optim::{ema_update, Adam, EmaTeacher};

use crate::backbone::{select_rows, BackboneConfig, KoopmanFlow};
use crate::config::{KvConfig, KvMap};
use crate::error::{config_err, numeric_err, Result};
use crate::gradcore::{Tape, Tensor};
use crate::koopman::{spectral_radius, DmdSolver};
use crate::synthbench::{Batch, Trajectory};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Share of each batch used for the consistency objective.
    pub r_ct: f64,
    pub lambda_dec: f64,
    pub lambda_temporal: f64,
    pub lambda_spatial: f64,
    /// Weight on the consistency loss. Zero, together with zero
    /// `lambda_dec`, `lambda_temporal` and `lambda_spatial`, gives a plain
    /// flow-matching trainer.
    pub ct_weight: f64,
    pub ema_decay: f64,
    pub lr: f64,
    /// Learning rate at the last step as a share of `lr`, reached along a
    /// half cosine; 1 keeps the rate constant.
    pub lr_final_frac: f64,
    pub grad_clip: f64,
    pub batch: usize,
    pub steps: usize,
    pub dt_min: f64,
    pub dt_max: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            r_ct: 0.2,
            lambda_dec: 0.5,
            lambda_temporal: 0.1,
            lambda_spatial: 0.1,
            ct_weight: 1.0,
            ema_decay: 0.99,
            lr: 1e-3,
            lr_final_frac: 1.0,
            grad_clip: 1.0,
            batch: 64,
            steps: 2000,
            dt_min: 0.01,
            dt_max: 0.2,
            seed: 0,
        }
    }
}

impl KvConfig for TrainConfig {
    fn write_kv(&self, kv: &mut KvMap) {
        kv.set("r_ct", self.r_ct);
        kv.set("lambda_dec", self.lambda_dec);
        kv.set("lambda_temporal", self.lambda_temporal);
        kv.set("lambda_spatial", self.lambda_spatial);
        kv.set("ct_weight", self.ct_weight);
        kv.set("ema_decay", self.ema_decay);
        kv.set("lr", self.lr);
        kv.set("lr_final_frac", self.lr_final_frac);
        kv.set("grad_clip", self.grad_clip);
        kv.set("batch", self.batch);
        kv.set("steps", self.steps);
        kv.set("dt_min", self.dt_min);
        kv.set("dt_max", self.dt_max);
        kv.set("seed", self.seed);
    }

    fn read_kv(&mut self, kv: &mut KvMap) -> Result<()> {
        kv.take("r_ct", &mut self.r_ct)?;
        kv.take("lambda_dec", &mut self.lambda_dec)?;
        kv.take("lambda_temporal", &mut self.lambda_temporal)?;
        kv.take("lambda_spatial", &mut self.lambda_spatial)?;
        kv.take("ct_weight", &mut self.ct_weight)?;
        kv.take("ema_decay", &mut self.ema_decay)?;
        kv.take("lr", &mut self.lr)?;
        kv.take("lr_final_frac", &mut self.lr_final_frac)?;
        kv.take("grad_clip", &mut self.grad_clip)?;
        kv.take("batch", &mut self.batch)?;
        kv.take("steps", &mut self.steps)?;
        kv.take("dt_min", &mut self.dt_min)?;
        kv.take("dt_max", &mut self.dt_max)?;
        kv.take("seed", &mut self.seed)
    }

    fn validate(&self) -> Result<()> {
        if !(self.r_ct > 0.0 && self.r_ct < 1.0) {
            return Err(config_err!("r_ct must lie in (0, 1), got {}", self.r_ct));
        }
        let n_ct = (self.batch as f64 * self.r_ct).round() as usize;
        if n_ct == 0 || n_ct == self.batch {
            return Err(config_err!("batch {} with r_ct {} leaves a partition empty", self.batch, self.r_ct));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(config_err!("ema_decay must lie in [0, 1]"));
        }
        if !(self.dt_min > 0.0 && self.dt_min <= self.dt_max && self.dt_max < 1.0) {
            return Err(config_err!("need 0 < dt_min ≤ dt_max < 1"));
        }
        if !(0.0..=1.0).contains(&self.lr_final_frac) {
            return Err(config_err!("lr_final_frac must lie in [0, 1], got {}", self.lr_final_frac));
        }
        let weights = [self.lambda_dec, self.lambda_temporal, self.lambda_spatial, self.ct_weight];
        if weights.iter().any(|w| !(*w >= 0.0)) || !(self.lr > 0.0) {
            return Err(config_err!("loss weights must be non-negative and lr positive"));
        }
        Ok(())
    }
}

impl TrainConfig {
    /// The plain flow-matching control: every consistency-side weight zeroed.
    pub fn pure_fm(self) -> Self {
        Self { ct_weight: 0.0, lambda_dec: 0.0, lambda_temporal: 0.0, lambda_spatial: 0.0, ..self }
    }
}

/// Model and training settings stored together in one flat file; model keys
/// carry the `model.` prefix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: BackboneConfig,
    pub train: TrainConfig,
}

impl KvConfig for RunConfig {
    fn write_kv(&self, kv: &mut KvMap) {
        self.train.write_kv(kv);
        kv.merge_prefixed("model.", &self.model.to_kv());
    }

    fn read_kv(&mut self, kv: &mut KvMap) -> Result<()> {
        let mut model = kv.split_prefix("model.");
        self.model.read_kv(&mut model)?;
        model.finish()?;
        self.train.read_kv(kv)
    }

    fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

/// Every term of one step. The regularizers already include their weights.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub fm: f64,
    pub ct: f64,
    pub ct_inv: f64,
    pub inv_cross: f64,
    pub var_flow: f64,
    pub reg_temp: f64,
    pub reg_rate: f64,
    pub reg_spatial: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "fm,ct,ct_inv,inv_cross,var_flow,reg_temp,reg_rate,reg_spatial,total";

    /// The total implied by the parts.
    pub fn recombine(&self, ct_weight: f64, lambda_dec: f64) -> f64 {
        self.fm
            + ct_weight * self.ct
            + lambda_dec * (self.ct_inv + self.inv_cross + self.var_flow)
            + self.reg_temp
            + self.reg_rate
            + self.reg_spatial
    }

    pub fn csv_row(&self) -> String {
        let parts = [
            self.fm,
            self.ct,
            self.ct_inv,
            self.inv_cross,
            self.var_flow,
            self.reg_temp,
            self.reg_rate,
            self.reg_spatial,
            self.total,
        ];
        parts.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(",")
    }

    pub fn is_finite(&self) -> bool {
        [self.fm, self.ct, self.ct_inv, self.inv_cross, self.var_flow, self.reg_temp, self.reg_rate, self.reg_spatial, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Noise, times and partition drawn for one step.
#[derive(Clone, Debug)]
pub struct StepDraw {
    pub x0: Tensor,
    pub t: Vec<f64>,
    /// Zero on the flow-matching partition.
    pub dt: Vec<f64>,
    pub ct_idx: Vec<usize>,
    pub fm_idx: Vec<usize>,
}

impl StepDraw {
    pub fn sample<R: Rng + ?Sized>(shape: &[usize], cfg: &TrainConfig, rng: &mut R) -> Result<Self> {
        let b = shape[0];
        let (ct_idx, fm_idx) = partition_batch(b, cfg.r_ct, rng)?;
        let mut t = vec![0.0; b];
        let mut dt = vec![0.0; b];
        for &i in &fm_idx {
            t[i] = rng.random::<f64>();
        }
        for &i in &ct_idx {
            t[i] = rng.random_range(0.0..1.0 - cfg.dt_min);
            let hi = cfg.dt_max.min(1.0 - t[i]);
            dt[i] = if hi > cfg.dt_min { rng.random_range(cfg.dt_min..hi) } else { cfg.dt_min };
        }
        let x0 = Tensor::randn(shape.to_vec(), 1.0, rng);
        Ok(Self { x0, t, dt, ct_idx, fm_idx })
    }
}

/// Training state: student, EMA teacher, optimizer and RNG.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: KoopmanFlow,
    pub teacher: EmaTeacher,
    pub cfg: TrainConfig,
    opt: Adam,
    rng: ChaCha8Rng,
    step: usize,
}

/// Diagnostics of one update besides the losses.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub grad_norm: f64,
    pub kept_bins: usize,
    pub k_inv_radius: f64,
}

impl Trainer {
    pub fn new(model: KoopmanFlow, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let teacher = EmaTeacher::new(&model.params, cfg.ema_decay);
        let opt = Adam::new(cfg.lr, cfg.grad_clip);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self { model, teacher, cfg, opt, rng, step: 0 })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// One fused update on `batch`, drawing noise, times and the partition
    /// from the trainer's RNG.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let draw = StepDraw::sample(batch.actions.shape(), &self.cfg, &mut self.rng)?;
        Ok(self.step_with(batch, &draw)?.0)
    }

    /// Losses and gradients for a fixed draw, without touching any state.
    pub fn losses(&self, batch: &Batch, draw: &StepDraw) -> Result<(LossBreakdown, std::collections::BTreeMap<String, Tensor>, Tensor)> {
        let cfg = &self.cfg;
        let model = &self.model;
        let x1 = &batch.actions;
        let x_t = ot_interpolate(&draw.x0, x1, &draw.t)?;

        let tape = Tape::new();
        let p = model.params.bind(&tape)?;
        let fields = model.forward(&p, tape.constant(x_t.clone())?, &batch.cond, &draw.t, DmdSolver::Normal)?;

        let fm = fm_loss(
            fields.v_total.gather(0, &draw.fm_idx)?,
            &select_rows(&draw.x0, &draw.fm_idx),
            &select_rows(x1, &draw.fm_idx),
        )?;

        // teacher passes on the consistency rows
        let ct = &draw.ct_idx;
        let cond_ct = batch.cond.select(ct);
        let t_ct: Vec<f64> = ct.iter().map(|&i| draw.t[i]).collect();
        let dt_ct: Vec<f64> = ct.iter().map(|&i| draw.dt[i]).collect();
        let t_next: Vec<f64> = t_ct.iter().zip(&dt_ct).map(|(a, b)| (a + b).min(1.0)).collect();
        let (x0_ct, x1_ct) = (select_rows(&draw.x0, ct), select_rows(x1, ct));
        let xt_ct = select_rows(&x_t, ct);
        let x_next = ot_interpolate(&x0_ct, &x1_ct, &t_next)?;
        let shadow = &self.teacher.shadow;
        let next = model.evaluate_with(shadow, &x_next, &cond_ct, &t_next, DmdSolver::Normal)?;
        let same = model.evaluate_with(shadow, &xt_ct, &cond_ct, &t_ct, DmdSolver::Normal)?;
        let target = consistency_target(&xt_ct, &x_next, &next.v_total, &t_ct, &dt_ct)?;

        let v_inv_ct = fields.v_inv.gather(0, ct)?;
        let v_var_ct = fields.v_var.gather(0, ct)?;
        let ct_term = ct_loss(fields.v_total.gather(0, ct)?, &target)?;
        let dec = decoupled_losses(
            v_inv_ct,
            v_var_ct,
            &TeacherFields { same_inv: &same.v_inv, same_var: &same.v_var, next_inv: &next.v_inv },
        )?;
        let reg = reg_loss(v_inv_ct, &next.v_inv, cfg.lambda_temporal, cfg.lambda_spatial)?;

        let total = fm
            .add(&ct_term.scale(cfg.ct_weight)?)?
            .add(&dec.ct_inv.add(&dec.inv_cross)?.add(&dec.var_flow)?.scale(cfg.lambda_dec)?)?
            .add(&reg.temp_diff)?
            .add(&reg.change_rate)?
            .add(&reg.spatial)?;
        let breakdown = LossBreakdown {
            fm: fm.item()?,
            ct: ct_term.item()?,
            ct_inv: dec.ct_inv.item()?,
            inv_cross: dec.inv_cross.item()?,
            var_flow: dec.var_flow.item()?,
            reg_temp: reg.temp_diff.item()?,
            reg_rate: reg.change_rate.item()?,
            reg_spatial: reg.spatial.item()?,
            total: total.item()?,
        };
        if !breakdown.is_finite() {
            return Err(numeric_err!("non-finite loss at step {}: {breakdown:?}", self.step));
        }
        total.backward()?;
        Ok((breakdown, p.grads(&model.params), fields.h_in.value()))
    }

    /// Learning rate of update `step` (counting from 0) of a `cfg.steps` run.
    pub fn lr_at(&self, step: usize) -> f64 {
        let c = &self.cfg;
        if c.steps < 2 {
            return c.lr;
        }
        let progress = (step as f64 / (c.steps - 1) as f64).min(1.0);
        let end = c.lr * c.lr_final_frac;
        end + (c.lr - end) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// Update with a fixed draw: optimizer step, mask observation, EMA step.
    pub fn step_with(&mut self, batch: &Batch, draw: &StepDraw) -> Result<(LossBreakdown, StepStats)> {
        let (breakdown, grads, h_in) = self.losses(batch, draw)?;
        self.opt.lr = self.lr_at(self.step);
        let grad_norm = self.opt.step(&mut self.model.params, &grads)?;
        self.model.mask.observe(&h_in)?;
        self.teacher.update(&self.model.params)?;
        self.step += 1;
        let k = self.model.params.get("koopman.inv.k")?;
        let stats = StepStats {
            grad_norm,
            kept_bins: self.model.mask.mask().kept_count(),
            k_inv_radius: spectral_radius(k)?,
        };
        Ok((breakdown, stats))
    }

    /// Random minibatch of `cfg.batch` distinct trajectories.
    pub fn sample_batch(&mut self, data: &[Trajectory]) -> Result<Batch> {
        let n = self.cfg.batch.min(data.len());
        let picks: Vec<&Trajectory> = sample(&mut self.rng, data.len(), n).into_iter().map(|i| &data[i]).collect();
        Batch::from_trajectories(&picks)
    }

    /// Run `cfg.steps` updates, writing one CSV row per step to `log` when
    /// given. Freezes the spectral mask at the end.
    pub fn fit(&mut self, data: &[Trajectory], log: Option<&mut dyn Write>) -> Result<Vec<LossBreakdown>> {
        self.fit_with(data, log, |_| Ok(()))
    }

    /// [`Trainer::fit`] that also calls `after_step` once each update is
    /// applied, e.g. to write periodic checkpoints.
    pub fn fit_with(
        &mut self,
        data: &[Trajectory],
        mut log: Option<&mut dyn Write>,
        mut after_step: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<Vec<LossBreakdown>> {
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "step,{},grad_norm,kept_bins,k_inv_radius", LossBreakdown::CSV_HEADER)?;
        }
        let mut history = Vec::with_capacity(self.cfg.steps);
        for _ in 0..self.cfg.steps {
            let batch = self.sample_batch(data)?;
            let draw = StepDraw::sample(batch.actions.shape(), &self.cfg, &mut self.rng)?;
            let (b, s) = self.step_with(&batch, &draw)?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{},{},{:e},{},{:e}", self.step, b.csv_row(), s.grad_norm, s.kept_bins, s.k_inv_radius)?;
            }
            history.push(b);
            after_step(self)?;
        }
        self.model.mask.freeze();
        Ok(history)
    }

    pub fn into_model(mut self) -> KoopmanFlow {
        self.model.mask.freeze();
        self.model
    }
}

#[cfg(test)]
mod tests;
