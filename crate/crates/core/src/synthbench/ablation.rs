use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;

use crate::backbone::{BackboneConfig, KoopmanFlow};
use crate::error::{config_err, Error, Result};
use crate::inference::{euler_sample, trajectory_mse, SamplerConfig};
use crate::training::{inv_sensitivity, TrainConfig, Trainer};

use super::{event_report, generate_dataset, Batch, GenSpec, Trajectory};

/// Held-out trajectories are drawn from the spec's seed plus this offset.
pub const HELDOUT_SEED_OFFSET: u64 = 1000;

/// Training and held-out data drawn from one generator spec.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub spec: GenSpec,
    pub train: Vec<Trajectory>,
    pub heldout: Vec<Trajectory>,
    pub heldout_batch: Batch,
}

impl Benchmark {
    pub fn new(spec: &GenSpec, n_train: usize, n_heldout: usize) -> Result<Self> {
        let train = generate_dataset(spec, n_train)?;
        let held_spec = GenSpec { seed: spec.seed.wrapping_add(HELDOUT_SEED_OFFSET), ..spec.clone() };
        let heldout = generate_dataset(&held_spec, n_heldout)?;
        let heldout_batch = Batch::of(&heldout)?;
        Ok(Self { spec: spec.clone(), train, heldout, heldout_batch })
    }

    pub fn heldout_events(&self) -> Vec<Vec<bool>> {
        self.heldout.iter().map(|t| t.events.clone()).collect()
    }

    /// The backbone defaults with the context width this data needs.
    pub fn model_config(&self) -> BackboneConfig {
        BackboneConfig {
            seq_len: self.spec.seq_len,
            action_dim: self.spec.action_dim,
            context_dim: self.spec.context_dim(),
            ..Default::default()
        }
    }

    /// Train a fresh model on the training split.
    pub fn train_model(&self, model: &BackboneConfig, train: &TrainConfig) -> Result<KoopmanFlow> {
        let mut trainer = Trainer::new(KoopmanFlow::new(model.clone())?, train.clone())?;
        trainer.fit(&self.train, None)?;
        Ok(trainer.into_model())
    }
}

/// Number of noise draws behind the event correlation and of time pairs
/// behind the stability score.
const EVAL_DRAWS: usize = 16;

/// Held-out scores of one trained model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunMetrics {
    pub trajectory_mse: f64,
    pub event_r: f64,
    pub naive_r: f64,
    /// Mean cross-time divergence of `v_inv`; lower is steadier.
    pub inv_stability: f64,
}

pub fn evaluate_model(model: &KoopmanFlow, bench: &Benchmark, nfe: usize, seed: u64) -> Result<RunMetrics> {
    let held = &bench.heldout_batch;
    let sample = euler_sample(model, &held.cond, &SamplerConfig { nfe, seed })?;
    let report = event_report(model, held, &bench.heldout_events(), EVAL_DRAWS, seed)?;
    Ok(RunMetrics {
        trajectory_mse: trajectory_mse(&sample, &held.actions)?,
        event_r: report.model_r,
        naive_r: report.naive_r,
        inv_stability: inv_sensitivity(model, held, EVAL_DRAWS / 4, seed)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    LambdaDec,
    RCt,
    Alpha,
    Nfe,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda_dec" | "λ_dec" => Ok(Self::LambdaDec),
            "r_ct" => Ok(Self::RCt),
            "alpha" | "α" => Ok(Self::Alpha),
            "nfe" => Ok(Self::Nfe),
            _ => Err(config_err!("unknown ablation axis {s:?}; expected lambda_dec, r_ct, alpha or nfe")),
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LambdaDec => "lambda_dec",
            Self::RCt => "r_ct",
            Self::Alpha => "alpha",
            Self::Nfe => "nfe",
        })
    }
}

/// Everything held fixed across a sweep.
#[derive(Clone, Debug)]
pub struct AblationBase {
    pub model: BackboneConfig,
    pub train: TrainConfig,
    /// Sampling steps for the trajectory MSE of training-axis runs.
    pub nfe: usize,
    pub eval_seed: u64,
}

/// One row of a sweep; a failed run keeps its value and the error text.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub value: f64,
    pub outcome: std::result::Result<RunMetrics, String>,
}

pub const ABLATION_CSV_HEADER: [&str; 6] = ["value", "trajectory_mse", "event_r", "naive_r", "inv_stability", "error"];

impl AblationRow {
    pub fn csv_fields(&self) -> [String; 6] {
        match &self.outcome {
            Ok(m) => [
                self.value.to_string(),
                m.trajectory_mse.to_string(),
                m.event_r.to_string(),
                m.naive_r.to_string(),
                m.inv_stability.to_string(),
                String::new(),
            ],
            Err(e) => [self.value.to_string(), String::new(), String::new(), String::new(), String::new(), e.clone()],
        }
    }
}

fn nfe_of(value: f64) -> Result<usize> {
    if value >= 1.0 && value.fract() == 0.0 && value <= 1e6 {
        Ok(value as usize)
    } else {
        Err(config_err!("nfe must be a positive integer, got {value}"))
    }
}

fn training_run(axis: AblationAxis, value: f64, bench: &Benchmark, base: &AblationBase) -> Result<RunMetrics> {
    let mut model = base.model.clone();
    let mut train = base.train.clone();
    match axis {
        AblationAxis::LambdaDec => train.lambda_dec = value,
        AblationAxis::RCt => train.r_ct = value,
        AblationAxis::Alpha => model.alpha = value,
        AblationAxis::Nfe => unreachable!("sampler-only axis"),
    }
    let trained = bench.train_model(&model, &train)?;
    evaluate_model(&trained, bench, base.nfe, base.eval_seed)
}

/// One run per value with the seed and data held fixed. Training axes train
/// a model per value, in parallel; the `nfe` axis trains once and only
/// changes the sampler. Failed runs are recorded and the sweep goes on.
pub fn ablation_sweep(axis: AblationAxis, values: &[f64], bench: &Benchmark, base: &AblationBase) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(config_err!("an ablation needs at least one value"));
    }
    let rows = match axis {
        AblationAxis::Nfe => {
            let model = bench.train_model(&base.model, &base.train)?;
            values
                .par_iter()
                .map(|&value| AblationRow {
                    value,
                    outcome: nfe_of(value)
                        .and_then(|nfe| evaluate_model(&model, bench, nfe, base.eval_seed))
                        .map_err(|e| e.to_string()),
                })
                .collect()
        }
        _ => values
            .par_iter()
            .map(|&value| AblationRow {
                value,
                outcome: training_run(axis, value, bench, base).map_err(|e| e.to_string()),
            })
            .collect(),
    };
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblationRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(ABLATION_CSV_HEADER).map_err(io)?;
    for row in rows {
        w.write_record(row.csv_fields()).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
