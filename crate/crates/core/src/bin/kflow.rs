//! Command-line front end: data generation, training, sampling, ablations,
//! the DMD latency benchmark and the event-energy analysis.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use koopflow::backbone::KoopmanFlow;
use koopflow::checkpoint::Checkpoint;
use koopflow::config::{KvConfig, KvMap};
use koopflow::inference::{euler_integrate, trajectory_mse};
use koopflow::koopman::{dmd_latency, DmdSolver, DEFAULT_LAMBDA};
use koopflow::synthbench::{
    ablation_sweep, dilate_events, event_correlation, frame_energy, generate_dataset, load_dataset, mean_fields,
    naive_rfft_baseline, save_dataset, split_batch, write_ablation_csv, AblationAxis, AblationBase, Batch, Benchmark,
    GenSpec, Trajectory, TRANSIENT_SUPPORT,
};
use koopflow::training::{RunConfig, Trainer};
use koopflow::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "kflow", version, about = "Spectrally decoupled flow-matching policy on synthetic demonstrations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        /// Generator settings as key=value lines; defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        count: usize,
    },
    /// Train a policy on a dataset and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training keys plus `model.`-prefixed keys; sequence length,
        /// action and context widths default to the data's.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss log (CSV).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overwrite the checkpoint every N steps as well as at the end.
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
    },
    /// Sample trajectories with Euler integration.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 1)]
        nfe: usize,
        #[arg(long)]
        out: PathBuf,
        /// Take conditioning from this dataset and report the MSE against it;
        /// otherwise draw fresh conditions from the default generator.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sweep one setting and record held-out metrics per value.
    Ablate {
        /// lambda_dec (λ_dec), r_ct, alpha (α) or nfe.
        #[arg(long)]
        axis: String,
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        train_count: usize,
        #[arg(long, default_value_t = 128)]
        heldout_count: usize,
        /// Sampling steps behind the trajectory MSE of training-axis runs.
        #[arg(long, default_value_t = 1)]
        nfe: usize,
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
    },
    /// Time the truncated-SVD window fit.
    BenchDmd {
        #[arg(long, default_value_t = 128)]
        d: usize,
        #[arg(long, default_value_t = 4)]
        window: usize,
        #[arg(long, default_value_t = 10_000)]
        iters: usize,
        #[arg(long, default_value_t = DEFAULT_LAMBDA)]
        lambda: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-step branch energies against the event channel.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Noise draws averaged into the branch velocities.
        #[arg(long, default_value_t = 16)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kflow: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen { spec, out, count } => gen(spec.as_deref(), &out, count),
        Command::Train { data, config, out, log, checkpoint_every } => {
            train(&data, config.as_deref(), &out, log.as_deref(), checkpoint_every)
        }
        Command::Sample { ckpt, nfe, out, data, count, seed } => sample(&ckpt, nfe, &out, data.as_deref(), count, seed),
        Command::Ablate { axis, values, out, spec, config, train_count, heldout_count, nfe, eval_seed } => {
            let axis: AblationAxis = axis.parse()?;
            let spec = load_or_default::<GenSpec>(spec.as_deref())?;
            let bench = Benchmark::new(&spec, train_count, heldout_count)?;
            let run = match config {
                Some(path) => run_config(KvMap::load(path)?, &bench.train)?,
                None => RunConfig { model: bench.model_config(), ..Default::default() },
            };
            let base = AblationBase { model: run.model, train: run.train, nfe, eval_seed };
            let rows = ablation_sweep(axis, &values, &bench, &base)?;
            write_ablation_csv(&rows, create(&out)?)?;
            for row in &rows {
                match &row.outcome {
                    Ok(m) => println!(
                        "{axis}={}: mse {:.5}  event r {:.3}  naive r {:.3}  v_inv divergence {:.4}",
                        row.value, m.trajectory_mse, m.event_r, m.naive_r, m.inv_stability
                    ),
                    Err(e) => println!("{axis}={}: failed: {e}", row.value),
                }
            }
            Ok(())
        }
        Command::BenchDmd { d, window, iters, lambda, seed } => {
            let t = dmd_latency(d, window, iters, lambda, seed)?;
            let us = |x: std::time::Duration| x.as_secs_f64() * 1e6;
            println!(
                "dmd_fit_svd d={d} window={window} iters={iters}: median {:.2} µs, p90 {:.2} µs, mean {:.2} µs, max {:.2} µs, total {:.3} s",
                us(t.median),
                us(t.p90),
                us(t.mean),
                us(t.max),
                t.total.as_secs_f64()
            );
            Ok(())
        }
        Command::Analyze { ckpt, data, out, draws, seed } => analyze(&ckpt, &data, &out, draws, seed),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn load_or_default<C: KvConfig>(path: Option<&Path>) -> Result<C> {
    path.map_or_else(|| Ok(C::default()), C::load)
}

/// Read a run config, taking the shape keys it leaves out from the data.
fn run_config(mut kv: KvMap, data: &[Trajectory]) -> Result<RunConfig> {
    let first = data.first().ok_or_else(|| Error::Config("the dataset is empty".into()))?;
    let shape = [
        ("model.seq_len", first.actions.shape()[0]),
        ("model.action_dim", first.actions.shape()[1]),
        ("model.context_dim", first.context.len()),
    ];
    for (key, value) in shape {
        if kv.get(key).is_none() {
            kv.set(key, value);
        }
    }
    let cfg = RunConfig::from_kv(kv)?;
    let m = &cfg.model;
    if [m.seq_len, m.action_dim, m.context_dim] != shape.map(|(_, v)| v) {
        return Err(Error::Config(format!(
            "config expects T={}, D={}, context {} but the data has T={}, D={}, context {}",
            m.seq_len, m.action_dim, m.context_dim, shape[0].1, shape[1].1, shape[2].1
        )));
    }
    Ok(cfg)
}

fn gen(spec: Option<&Path>, out: &Path, count: usize) -> Result<()> {
    let spec = load_or_default::<GenSpec>(spec)?;
    let data = generate_dataset(&spec, count)?;
    save_dataset(out, &data)?;
    let events: usize = data.iter().map(Trajectory::event_count).sum();
    println!("wrote {count} trajectories (T={}, D={}, {events} events) to {}", spec.seq_len, spec.action_dim, out.display());
    Ok(())
}

fn train(data: &Path, config: Option<&Path>, out: &Path, log: Option<&Path>, every: usize) -> Result<()> {
    let data = load_dataset(data)?;
    let kv = config.map_or_else(|| Ok(KvMap::new()), KvMap::load)?;
    let cfg = run_config(kv, &data)?;
    let mut trainer = Trainer::new(KoopmanFlow::new(cfg.model)?, cfg.train)?;
    let mut log_file = log.map(create).transpose()?;
    let history = trainer.fit_with(&data, log_file.as_mut().map(|w| w as &mut dyn Write), |t| {
        if every > 0 && t.steps_done() % every == 0 {
            Checkpoint::of_trainer(t).save(out)?;
        }
        Ok(())
    })?;
    if let Some(w) = log_file.as_mut() {
        w.flush()?;
    }
    Checkpoint::of_trainer(&trainer).save(out)?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        println!("{} steps: total loss {:.4} -> {:.4}, fm {:.4} -> {:.4}", history.len(), first.total, last.total, first.fm, last.fm);
    }
    println!("kept bins {}, checkpoint {}", trainer.model.mask.mask().kept_count(), out.display());
    Ok(())
}

/// Per-step Euclidean norms of a `[B, T, D]` tensor, accumulated into `acc`.
fn add_step_norms(acc: &mut [f64], x: &Tensor) {
    let d = x.shape()[2];
    for (a, row) in acc.iter_mut().zip(x.data().chunks(d)) {
        *a += row.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
}

fn sample(ckpt: &Path, nfe: usize, out: &Path, data: Option<&Path>, count: usize, seed: u64) -> Result<()> {
    let model = Checkpoint::load(ckpt)?.model;
    let c = model.config.clone();
    let trajs = match data {
        Some(path) => load_dataset(path)?.into_iter().take(count).collect(),
        None => {
            let spec = GenSpec { seq_len: c.seq_len, action_dim: c.action_dim, seed, ..Default::default() };
            if spec.context_dim() != c.context_dim {
                return Err(Error::Config(format!(
                    "the model takes a context of width {}, the default generator gives {}; pass --data",
                    c.context_dim,
                    spec.context_dim()
                )));
            }
            generate_dataset(&spec, count)?
        }
    };
    let batch = Batch::of(&trajs)?;
    let b = batch.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = Tensor::randn([b, c.seq_len, c.action_dim], 1.0, &mut rng);
    let mut inv_norm = vec![0.0; b * c.seq_len];
    let mut var_norm = vec![0.0; b * c.seq_len];
    let x1 = euler_integrate(&x0, nfe, |x, t| {
        let f = model.evaluate(x, &batch.cond, t, DmdSolver::Svd)?;
        add_step_norms(&mut inv_norm, &f.v_inv);
        add_step_norms(&mut var_norm, &f.v_var);
        Ok(f.v_total)
    })?;

    let mut w = csv::Writer::from_writer(create(out)?);
    let io = |e: csv::Error| Error::Io(e.into());
    let mut header = vec!["trajectory".to_string(), "tau".to_string()];
    header.extend((0..c.action_dim).map(|j| format!("a{j}")));
    header.extend(["v_inv_norm".to_string(), "v_var_norm".to_string()]);
    w.write_record(&header).map_err(io)?;
    for (i, row) in x1.data().chunks(c.action_dim).enumerate() {
        let mut rec = vec![(i / c.seq_len).to_string(), (i % c.seq_len).to_string()];
        rec.extend(row.iter().map(f64::to_string));
        rec.push((inv_norm[i] / nfe as f64).to_string());
        rec.push((var_norm[i] / nfe as f64).to_string());
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    print!("sampled {b} trajectories at nfe={nfe}");
    if data.is_some() {
        print!(", mse against the data {:.5}", trajectory_mse(&x1, &batch.actions)?);
    }
    println!();
    Ok(())
}

fn analyze(ckpt: &Path, data: &Path, out: &Path, draws: usize, seed: u64) -> Result<()> {
    let model = Checkpoint::load(ckpt)?.model;
    let trajs = load_dataset(data)?;
    let batch = Batch::of(&trajs)?;
    let fields = mean_fields(&model, &batch, draws, seed)?;
    let energy = |x: &Tensor| split_batch(x).iter().map(frame_energy).collect::<Result<Vec<_>>>();
    let inv = energy(&fields.v_inv)?;
    let var = energy(&fields.v_var)?;
    let naive = split_batch(&batch.actions)
        .iter()
        .map(|a| naive_rfft_baseline(a, model.mask.mask()))
        .collect::<Result<Vec<_>>>()?;
    let events: Vec<Vec<bool>> = trajs.iter().map(|t| t.events.clone()).collect();

    let mut w = csv::Writer::from_writer(create(out)?);
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(["trajectory", "tau", "event", "dilated_event", "v_inv_energy", "v_var_energy", "naive_energy"])
        .map_err(io)?;
    for (i, ev) in events.iter().enumerate() {
        let dilated = dilate_events(ev, TRANSIENT_SUPPORT);
        for tau in 0..ev.len() {
            w.write_record([
                i.to_string(),
                tau.to_string(),
                u8::from(ev[tau]).to_string(),
                dilated[tau].to_string(),
                inv[i][tau].to_string(),
                var[i][tau].to_string(),
                naive[i][tau].to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush()?;

    let r = |e: &[Vec<f64>]| event_correlation(e, &events).map_or_else(|e| format!("undefined ({e})"), |r| format!("{r:.4}"));
    println!("pearson with dilated events over {} trajectories:", trajs.len());
    println!("  v_var energy  {}", r(&var));
    println!("  v_inv energy  {}", r(&inv));
    println!("  naive rfft    {}", r(&naive));
    Ok(())
}
