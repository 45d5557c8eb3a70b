use koopflow::backbone::BackboneConfig;
use koopflow::synthbench::{
    ablation_sweep, evaluate_model, write_ablation_csv, AblationAxis, AblationBase, Benchmark, GenSpec,
    ABLATION_CSV_HEADER,
};
use koopflow::training::TrainConfig;
use koopflow::Error;

fn small() -> (Benchmark, AblationBase) {
    let bench = Benchmark::new(&GenSpec { seed: 2, ..Default::default() }, 32, 8).unwrap();
    let model = BackboneConfig { hidden: 16, blocks: 1, dyn_dim: 8, ..bench.model_config() };
    let train = TrainConfig { batch: 8, steps: 4, ..Default::default() };
    (bench, AblationBase { model, train, nfe: 1, eval_seed: 3 })
}

#[test]
fn one_value_sweep_equals_a_plain_run() {
    let (bench, base) = small();
    let rows = ablation_sweep(AblationAxis::LambdaDec, &[base.train.lambda_dec], &bench, &base).unwrap();
    let model = bench.train_model(&base.model, &base.train).unwrap();
    let plain = evaluate_model(&model, &bench, base.nfe, base.eval_seed).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].outcome, Ok(plain));
}

#[test]
fn nfe_axis_reuses_one_model() {
    let (bench, base) = small();
    let rows = ablation_sweep(AblationAxis::Nfe, &[1.0, 4.0, 2.5], &bench, &base).unwrap();
    let model = bench.train_model(&base.model, &base.train).unwrap();
    for (row, nfe) in rows[..2].iter().zip([1, 4]) {
        assert_eq!(row.outcome, Ok(evaluate_model(&model, &bench, nfe, base.eval_seed).unwrap()));
    }
    // a bad value fails its own row only
    assert!(rows[2].outcome.as_ref().unwrap_err().contains("positive integer"));
}

#[test]
fn sweeps_vary_only_their_axis() {
    let (bench, base) = small();
    let rows = ablation_sweep(AblationAxis::Alpha, &[0.5, 0.7, 0.0], &bench, &base).unwrap();
    assert!(rows[0].outcome.is_ok() && rows[1].outcome.is_ok(), "{rows:?}");
    assert!(rows[2].outcome.is_err());
    assert!(matches!(ablation_sweep(AblationAxis::RCt, &[], &bench, &base), Err(Error::Config(_))));
    for name in ["lambda_dec", "λ_dec", "r_ct", "alpha", "α", "nfe"] {
        let axis: AblationAxis = name.parse().unwrap();
        assert_eq!(axis.to_string().parse::<AblationAxis>().unwrap(), axis);
    }
    assert!("lr".parse::<AblationAxis>().is_err());

    let mut out = Vec::new();
    write_ablation_csv(&rows, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], ABLATION_CSV_HEADER.join(","));
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| l.split(',').count() == ABLATION_CSV_HEADER.len() || l.contains('"')));
}

#[test]
fn keeping_every_bin_leaves_no_variant_energy_to_correlate() {
    let (bench, base) = small();
    let rows = ablation_sweep(AblationAxis::Alpha, &[1.0], &bench, &base).unwrap();
    assert!(rows[0].outcome.as_ref().unwrap_err().contains("zero variance"));
}
