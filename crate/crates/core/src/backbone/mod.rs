//! The conditioned velocity network.
//!
//! Action tokens carry the noisy trajectory, a learned position embedding and
//! the per-step event flag. Each block applies, under AdaLN-Zero modulation
//! from the fused time/context embedding, QK-normalized self-attention over
//! the action tokens, QK-normalized cross-attention into condition tokens,
//! and a SiLU MLP. The resulting `h_in` goes through the Fourier filter and
//! the two Koopman operators; their projections are the network output, with
//! no residual path around them.

mod layers;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use layers::{
    adaln_modulate, add_bias, gated_residual, gaussian_fourier_embed, linear, mlp, per_token,
    qknorm_attention, Attention, AttentionWeights, LN_EPS, QK_EPS,
};
pub use params::{Bound, Param, ParamStore};

use crate::config::{KvConfig, KvMap};
use crate::error::{config_err, dim_err, Result};
use crate::gradcore::{Tape, Tensor, Var};
use crate::koopman::{
    invariant_path, variant_path, window_len, DmdSolver, InvariantKoopman, LocalizedDmd,
    DEFAULT_LAMBDA,
};
use crate::spectral::{fourier_filter, MaskTracker, SPECTRUM_EMA_DECAY};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Physical sequence length `T`.
    pub seq_len: usize,
    /// Action dimension `D`.
    pub action_dim: usize,
    /// Width of the global context vector.
    pub context_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub fourier_dim: usize,
    /// Koopman lifted dimension `d`.
    pub dyn_dim: usize,
    /// Spectral energy threshold.
    pub alpha: f64,
    pub dmd_lambda: f64,
    pub mlp_ratio: usize,
    /// Standard deviation of the frozen random Fourier frequencies.
    pub time_freq_std: f64,
    pub init_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            seq_len: 16,
            action_dim: 2,
            context_dim: 8,
            hidden: 32,
            blocks: 2,
            heads: 2,
            fourier_dim: 16,
            dyn_dim: 16,
            alpha: 0.85,
            dmd_lambda: DEFAULT_LAMBDA,
            mlp_ratio: 2,
            time_freq_std: 2.0,
            init_seed: 0,
        }
    }
}

impl KvConfig for BackboneConfig {
    fn write_kv(&self, kv: &mut KvMap) {
        kv.set("seq_len", self.seq_len);
        kv.set("action_dim", self.action_dim);
        kv.set("context_dim", self.context_dim);
        kv.set("hidden", self.hidden);
        kv.set("blocks", self.blocks);
        kv.set("heads", self.heads);
        kv.set("fourier_dim", self.fourier_dim);
        kv.set("dyn_dim", self.dyn_dim);
        kv.set("alpha", self.alpha);
        kv.set("dmd_lambda", self.dmd_lambda);
        kv.set("mlp_ratio", self.mlp_ratio);
        kv.set("time_freq_std", self.time_freq_std);
        kv.set("init_seed", self.init_seed);
    }

    fn read_kv(&mut self, kv: &mut KvMap) -> Result<()> {
        kv.take("seq_len", &mut self.seq_len)?;
        kv.take("action_dim", &mut self.action_dim)?;
        kv.take("context_dim", &mut self.context_dim)?;
        kv.take("hidden", &mut self.hidden)?;
        kv.take("blocks", &mut self.blocks)?;
        kv.take("heads", &mut self.heads)?;
        kv.take("fourier_dim", &mut self.fourier_dim)?;
        kv.take("dyn_dim", &mut self.dyn_dim)?;
        kv.take("alpha", &mut self.alpha)?;
        kv.take("dmd_lambda", &mut self.dmd_lambda)?;
        kv.take("mlp_ratio", &mut self.mlp_ratio)?;
        kv.take("time_freq_std", &mut self.time_freq_std)?;
        kv.take("init_seed", &mut self.init_seed)
    }

    fn validate(&self) -> Result<()> {
        if self.seq_len < 4 {
            return Err(config_err!("seq_len must be at least 4, got {}", self.seq_len));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(config_err!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.action_dim == 0 || self.dyn_dim == 0 || self.fourier_dim == 0 || self.mlp_ratio == 0 {
            return Err(config_err!("dimensions must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(config_err!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if !(self.dmd_lambda > 0.0) {
            return Err(config_err!("dmd_lambda must be positive"));
        }
        Ok(())
    }
}

impl BackboneConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn window(&self) -> usize {
        window_len(self.seq_len)
    }
}

/// Observation-side conditioning for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    /// `[B, T]` event markers (0/1).
    pub events: Tensor,
    /// `[B, C]` global context.
    pub context: Tensor,
}

impl Conditioning {
    pub fn batch(&self) -> usize {
        self.events.shape()[0]
    }

    /// Rows `indices` of the batch.
    pub fn select(&self, indices: &[usize]) -> Conditioning {
        Conditioning { events: select_rows(&self.events, indices), context: select_rows(&self.context, indices) }
    }
}

/// Rows of a tensor's leading axis.
pub fn select_rows(x: &Tensor, indices: &[usize]) -> Tensor {
    let row = x.numel() / x.shape()[0].max(1);
    let mut data = Vec::with_capacity(row * indices.len());
    for &i in indices {
        data.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(shape, data).expect("rows of a finite tensor")
}

/// Network output. `v_total` is built as `v_inv + v_var`.
#[derive(Clone, Copy, Debug)]
pub struct VelocityFields<'t> {
    pub v_inv: Var<'t>,
    pub v_var: Var<'t>,
    pub v_total: Var<'t>,
    /// Latent trajectory entering the Fourier filter.
    pub h_in: Var<'t>,
}

/// Plain-value copy of [`VelocityFields`].
#[derive(Clone, Debug)]
pub struct FieldValues {
    pub v_inv: Tensor,
    pub v_var: Tensor,
    pub v_total: Tensor,
    pub h_in: Tensor,
}

impl VelocityFields<'_> {
    pub fn values(&self) -> FieldValues {
        FieldValues {
            v_inv: self.v_inv.value(),
            v_var: self.v_var.value(),
            v_total: self.v_total.value(),
            h_in: self.h_in.value(),
        }
    }
}

/// Model: configuration, parameters and the spectral mask state.
#[derive(Clone, Debug)]
pub struct KoopmanFlow {
    pub config: BackboneConfig,
    pub params: ParamStore,
    pub mask: MaskTracker,
}

fn block_key(i: usize, rest: &str) -> String {
    format!("backbone.block{i}.{rest}")
}

impl KoopmanFlow {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut p = ParamStore::new();
        let (h, dd, c, a) = (config.hidden, config.dyn_dim, config.context_dim, config.action_dim);
        let f = config.fourier_dim;
        let mut dense = |p: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize| {
            let std = 1.0 / (fan_in.max(1) as f64).sqrt();
            p.insert(name, Tensor::randn([fan_in, fan_out], std, &mut rng), true);
        };
        dense(&mut p, "backbone.time.w1", 2 * f, h);
        dense(&mut p, "backbone.time.w2", h, h);
        dense(&mut p, "backbone.cond.ctx_w", c, h);
        dense(&mut p, "backbone.embed.action_w", a, h);
        dense(&mut p, "backbone.embed.event_w", 1, h);
        dense(&mut p, "backbone.ctx_tokens.event_w", 1, h);
        dense(&mut p, "backbone.ctx_tokens.global_w", c, h);
        for i in 0..config.blocks {
            for attn in ["self", "cross"] {
                for w in ["wq", "wk", "wv", "wo"] {
                    dense(&mut p, &block_key(i, &format!("{attn}.{w}")), h, h);
                }
            }
            dense(&mut p, &block_key(i, "mlp.w1"), h, config.mlp_ratio * h);
            dense(&mut p, &block_key(i, "mlp.w2"), config.mlp_ratio * h, h);
        }
        dense(&mut p, "koopman.inv.enc", h, dd);
        dense(&mut p, "koopman.inv.dec", dd, h);
        dense(&mut p, "koopman.var.enc", h, dd);
        dense(&mut p, "koopman.var.dec", dd, h);
        dense(&mut p, "backbone.head.proj_inv", h, a);
        dense(&mut p, "backbone.head.proj_var", h, a);

        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed ^ 0x9e37_79b9_7f4a_7c15);
        p.insert("backbone.time.freqs", Tensor::randn([f], config.time_freq_std, &mut rng), false);
        p.insert("backbone.embed.pos", Tensor::randn([config.seq_len, h], 0.5, &mut rng), true);
        p.insert("backbone.ctx_tokens.pos", Tensor::randn([config.seq_len, h], 0.5, &mut rng), true);
        for name in ["backbone.time.b1", "backbone.time.b2", "backbone.cond.ctx_b", "backbone.embed.action_b", "backbone.ctx_tokens.b"] {
            p.insert(name, Tensor::zeros([h]), true);
        }
        let temp = Tensor::scalar((config.head_dim() as f64).sqrt());
        for i in 0..config.blocks {
            p.insert(block_key(i, "ada_w"), Tensor::zeros([h, 9 * h]), true);
            p.insert(block_key(i, "ada_b"), Tensor::zeros([9 * h]), true);
            p.insert(block_key(i, "self.temp"), temp.clone(), true);
            p.insert(block_key(i, "cross.temp"), temp.clone(), true);
            p.insert(block_key(i, "mlp.b1"), Tensor::zeros([config.mlp_ratio * h]), true);
            p.insert(block_key(i, "mlp.b2"), Tensor::zeros([h]), true);
        }
        p.insert("koopman.inv.k", Tensor::eye(dd), true);

        let mask = MaskTracker::new(config.seq_len, config.alpha, SPECTRUM_EMA_DECAY)?;
        Ok(Self { config, params: p, mask })
    }

    fn check_inputs(&self, x_t: &[usize], cond: &Conditioning, t: &[f64]) -> Result<usize> {
        let cfg = &self.config;
        let b = x_t.first().copied().unwrap_or(0);
        if x_t != [b, cfg.seq_len, cfg.action_dim] {
            return Err(dim_err!(
                "x_t has shape {x_t:?}, expected [B, {}, {}]",
                cfg.seq_len,
                cfg.action_dim
            ));
        }
        if cond.events.shape() != [b, cfg.seq_len] || cond.context.shape() != [b, cfg.context_dim] {
            return Err(dim_err!(
                "conditioning shapes {:?} / {:?} do not match batch {b}",
                cond.events.shape(),
                cond.context.shape()
            ));
        }
        if t.len() != b {
            return Err(dim_err!("{} diffusion times for batch {b}", t.len()));
        }
        if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(crate::error::contract_err!("diffusion time {bad} outside [0, 1]"));
        }
        Ok(b)
    }

    /// One pass through the network with the current mask.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        x_t: Var<'t>,
        cond: &Conditioning,
        t: &[f64],
        solver: DmdSolver,
    ) -> Result<VelocityFields<'t>> {
        let cfg = &self.config;
        let b = self.check_inputs(&x_t.shape(), cond, t)?;
        let (steps, h) = (cfg.seq_len, cfg.hidden);
        let tape = x_t.tape();

        let events = tape.constant(cond.events.clone().reshape([b, steps, 1])?)?;
        let context = tape.constant(cond.context.clone())?;
        let temb = tape.constant(gaussian_fourier_embed(t, self.params.get("backbone.time.freqs")?)?)?;

        // fused time + context conditioning vector
        let time = linear(temb, p.get("backbone.time.w1")?, Some(p.get("backbone.time.b1")?))?.silu()?;
        let time = linear(time, p.get("backbone.time.w2")?, Some(p.get("backbone.time.b2")?))?;
        let ctx = linear(context, p.get("backbone.cond.ctx_w")?, Some(p.get("backbone.cond.ctx_b")?))?;
        let cond_vec = time.add(&ctx)?.silu()?;

        let pos = |name: &str| -> Result<Var<'t>> { p.get(name)?.reshape([1, steps, h])?.expand([b, steps, h]) };
        let mut x = linear(x_t, p.get("backbone.embed.action_w")?, Some(p.get("backbone.embed.action_b")?))?
            .add(&pos("backbone.embed.pos")?)?
            .add(&events.matmul(&p.get("backbone.embed.event_w")?)?)?;
        let global = per_token(context.matmul(&p.get("backbone.ctx_tokens.global_w")?)?, steps)?;
        let ctx_tokens = add_bias(
            events.matmul(&p.get("backbone.ctx_tokens.event_w")?)?.add(&global)?.add(&pos("backbone.ctx_tokens.pos")?)?,
            p.get("backbone.ctx_tokens.b")?,
        )?;

        for i in 0..cfg.blocks {
            let key = |rest: &str| block_key(i, rest);
            let m = linear(cond_vec, p.get(&key("ada_w"))?, Some(p.get(&key("ada_b"))?))?;
            let chunk = |k: usize| m.narrow(1, k * h, h);
            let attn_weights = |kind: &str| -> Result<AttentionWeights<'t>> {
                Ok(AttentionWeights {
                    wq: p.get(&key(&format!("{kind}.wq")))?,
                    wk: p.get(&key(&format!("{kind}.wk")))?,
                    wv: p.get(&key(&format!("{kind}.wv")))?,
                    wo: p.get(&key(&format!("{kind}.wo")))?,
                    temperature: p.get(&key(&format!("{kind}.temp")))?,
                })
            };

            let y = adaln_modulate(x, chunk(0)?, chunk(1)?)?;
            let sa = qknorm_attention(y, y, &attn_weights("self")?, cfg.heads)?;
            x = gated_residual(x, chunk(2)?, sa.out)?;

            let y = adaln_modulate(x, chunk(3)?, chunk(4)?)?;
            let ca = qknorm_attention(y, ctx_tokens, &attn_weights("cross")?, cfg.heads)?;
            x = gated_residual(x, chunk(5)?, ca.out)?;

            let y = adaln_modulate(x, chunk(6)?, chunk(7)?)?;
            let ff = mlp(y, p.get(&key("mlp.w1"))?, p.get(&key("mlp.b1"))?, p.get(&key("mlp.w2"))?, p.get(&key("mlp.b2"))?)?;
            x = gated_residual(x, chunk(8)?, ff)?;
        }
        let h_in = x;

        let split = fourier_filter(h_in, self.mask.mask())?;
        let inv = InvariantKoopman {
            enc: p.get("koopman.inv.enc")?,
            k: p.get("koopman.inv.k")?,
            dec: p.get("koopman.inv.dec")?,
        };
        let var = LocalizedDmd::new(p.get("koopman.var.enc")?, p.get("koopman.var.dec")?, steps, cfg.dmd_lambda)?
            .with_solver(solver);
        let h_inv = invariant_path(split.x_inv, &inv)?;
        let h_var = variant_path(split.x_var, &var)?;
        let v_inv = h_inv.matmul(&p.get("backbone.head.proj_inv")?)?;
        let v_var = h_var.matmul(&p.get("backbone.head.proj_var")?)?;
        let v_total = v_inv.add(&v_var)?;
        Ok(VelocityFields { v_inv, v_var, v_total, h_in })
    }

    /// Gradient-free forward on plain tensors.
    pub fn evaluate(&self, x_t: &Tensor, cond: &Conditioning, t: &[f64], solver: DmdSolver) -> Result<FieldValues> {
        self.evaluate_with(&self.params, x_t, cond, t, solver)
    }

    /// Gradient-free forward with another set of weights of the same layout
    /// (the EMA teacher) and this model's mask.
    pub fn evaluate_with(
        &self,
        params: &ParamStore,
        x_t: &Tensor,
        cond: &Conditioning,
        t: &[f64],
        solver: DmdSolver,
    ) -> Result<FieldValues> {
        let tape = Tape::no_grad();
        let p = params.bind(&tape)?;
        let x = tape.constant(x_t.clone())?;
        Ok(self.forward(&p, x, cond, t, solver)?.values())
    }
}
