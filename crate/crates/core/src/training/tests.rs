use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::backbone::ParamStore;
use crate::synthbench::{generate_dataset, GenSpec};
use crate::Error;

fn t1(v: &[f64]) -> Tensor {
    Tensor::new([v.len(), 1, 1], v.to_vec()).unwrap()
}

#[test]
fn interpolation_endpoints_and_midpoint() {
    let x0 = t1(&[3.0, -1.0]);
    let x1 = t1(&[5.0, 7.0]);
    assert_eq!(ot_interpolate(&x0, &x1, &[0.0, 0.0]).unwrap(), x0);
    assert_eq!(ot_interpolate(&x0, &x1, &[1.0, 1.0]).unwrap(), x1);
    let mid = ot_interpolate(&t1(&[0.0]), &t1(&[2.0]), &[0.5]).unwrap();
    assert_eq!(mid.data(), &[1.0]);
    assert!(matches!(ot_interpolate(&x0, &x1, &[0.5, 1.2]), Err(Error::Contract(_))));
    assert!(matches!(ot_interpolate(&x0, &x1, &[0.5]), Err(Error::Dimension(_))));
}

#[test]
fn fm_loss_examples_and_gradient() {
    let tape = Tape::new();
    let (x0, x1) = (t1(&[1.0, 0.0]), t1(&[3.0, 2.0]));
    let exact = tape.param(x1.sub(&x0).unwrap()).unwrap();
    assert_eq!(fm_loss(exact, &x0, &x1).unwrap().item().unwrap(), 0.0);
    let zero = tape.param(t1(&[0.0, 0.0])).unwrap();
    assert_eq!(fm_loss(zero, &x0, &x1).unwrap().item().unwrap(), 4.0);

    // analytic 2(v − (x1 − x0))/N against central differences
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (x0, x1) = (Tensor::randn([3, 4, 2], 1.0, &mut rng), Tensor::randn([3, 4, 2], 1.0, &mut rng));
    let v = Tensor::randn([3, 4, 2], 1.0, &mut rng);
    let tape = Tape::new();
    let vp = tape.param(v.clone()).unwrap();
    fm_loss(vp, &x0, &x1).unwrap().backward().unwrap();
    let grad = vp.grad().unwrap();
    let n = v.numel() as f64;
    let loss_at = |v: &Tensor| {
        let no = Tape::no_grad();
        fm_loss(no.constant(v.clone()).unwrap(), &x0, &x1).unwrap().item().unwrap()
    };
    for i in 0..v.numel() {
        let analytic = 2.0 * (v.data()[i] - (x1.data()[i] - x0.data()[i])) / n;
        let (mut p, mut m) = (v.clone(), v.clone());
        p.data_mut()[i] += 1e-6;
        m.data_mut()[i] -= 1e-6;
        let numeric = (loss_at(&p) - loss_at(&m)) / 2e-6;
        assert!((grad.data()[i] - analytic).abs() < 1e-14);
        assert!((numeric - analytic).abs() < 1e-8, "{numeric} vs {analytic}");
    }
}

fn oracle_teacher(x0: Tensor, x1: Tensor) -> impl FnOnce(&Tensor, &[f64]) -> crate::Result<Tensor> {
    move |_, _| x1.sub(&x0)
}

#[test]
fn consistency_target_examples() {
    // worked instance: x0 = 0, x1 = 2, t = dt = 0.25 gives (1 + 0.5·2 − 0.5)/0.75 = 2
    let (x0, x1) = (t1(&[0.0]), t1(&[2.0]));
    let target = ct_target(&x0, &x1, &[0.25], &[0.25], oracle_teacher(x0.clone(), x1.clone())).unwrap();
    assert!((target.data()[0] - 2.0).abs() < 1e-15);

    // t + dt = 1: the teacher term vanishes and the target is x1 − x0
    let (x0, x1) = (t1(&[0.3, -1.0]), t1(&[1.1, 4.0]));
    let any_teacher = |x: &Tensor, _: &[f64]| Ok(x.scale(100.0));
    let target = ct_target(&x0, &x1, &[0.6, 0.9], &[0.4, 0.1], any_teacher).unwrap();
    assert!(target.max_abs_diff(&x1.sub(&x0).unwrap()) < 1e-12);

    // zero teacher: dt·(x1 − x0)/(1 − t)
    let zero = |x: &Tensor, _: &[f64]| Ok(Tensor::zeros(x.shape().to_vec()));
    let target = ct_target(&x0, &x1, &[0.2, 0.5], &[0.1, 0.3], zero).unwrap();
    let expected = [0.1 * 0.8 / 0.8, 0.3 * 5.0 / 0.5];
    for (a, b) in target.data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }

    let teacher = oracle_teacher(x0.clone(), x1.clone());
    assert!(matches!(ct_target(&x0, &x1, &[1.0, 0.5], &[0.0, 0.1], teacher), Err(Error::Contract(_))));
}

proptest! {
    #[test]
    fn oracle_teacher_is_a_fixed_point(seed in any::<u64>(), t in 0.0f64..0.99, frac in 0.0f64..=1.0) {
        let dt = frac * (1.0 - t);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Tensor::randn([2, 5, 3], 1.0, &mut rng);
        let x1 = Tensor::randn([2, 5, 3], 2.0, &mut rng);
        let target = ct_target(&x0, &x1, &[t, t], &[dt, dt], oracle_teacher(x0.clone(), x1.clone())).unwrap();
        prop_assert!(target.max_abs_diff(&x1.sub(&x0).unwrap()) <= 1e-9);
    }
}

#[test]
fn ct_loss_is_quadratic_and_masked_to_its_rows() {
    let tape = Tape::new();
    let target = t1(&[1.0, 1.0]);
    assert_eq!(ct_loss(tape.param(target.clone()).unwrap(), &target).unwrap().item().unwrap(), 0.0);
    let l1 = ct_loss(tape.param(t1(&[2.0, 1.5])).unwrap(), &target).unwrap().item().unwrap();
    let l2 = ct_loss(tape.param(t1(&[3.0, 2.0])).unwrap(), &target).unwrap().item().unwrap();
    assert!((l2 - 4.0 * l1).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (ct, _) = partition_batch(10, 0.2, &mut rng).unwrap();
    let v = tape.param(Tensor::randn([10, 4, 2], 1.0, &mut rng)).unwrap();
    let target = Tensor::zeros([ct.len(), 4, 2]);
    ct_loss(v.gather(0, &ct).unwrap(), &target).unwrap().backward().unwrap();
    let g = v.grad().unwrap();
    for (row, chunk) in g.data().chunks(8).enumerate() {
        let touched = chunk.iter().any(|&x| x != 0.0);
        assert_eq!(touched, ct.contains(&row), "row {row}");
    }
}

#[test]
fn decoupled_losses_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tape = Tape::new();
    let inv = Tensor::randn([3, 4, 2], 1.0, &mut rng);
    let var = Tensor::randn([3, 4, 2], 1.0, &mut rng);
    let next_inv = Tensor::randn([3, 4, 2], 1.0, &mut rng);
    let d = decoupled_losses(
        tape.param(inv.clone()).unwrap(),
        tape.param(var.clone()).unwrap(),
        &TeacherFields { same_inv: &inv, same_var: &var, next_inv: &next_inv },
    )
    .unwrap();
    assert_eq!(d.ct_inv.item().unwrap(), 0.0);
    assert_eq!(d.var_flow.item().unwrap(), 0.0);
    let expected = inv.sub(&next_inv).unwrap().data().iter().map(|v| v * v).sum::<f64>() / 24.0;
    assert!((d.inv_cross.item().unwrap() - expected).abs() < 1e-14);

    let z = Tensor::zeros([3, 4, 2]);
    let d = decoupled_losses(
        tape.constant(z.clone()).unwrap(),
        tape.constant(z.clone()).unwrap(),
        &TeacherFields { same_inv: &z, same_var: &z, next_inv: &z },
    )
    .unwrap();
    for term in [d.ct_inv, d.inv_cross, d.var_flow] {
        assert_eq!(term.item().unwrap(), 0.0);
    }
}

#[test]
fn kinematic_penalties_examples() {
    let tape = Tape::new();
    // one sample, T = 2, D = 1: v = [0, 1], teacher = [0, 0]
    let v = tape.param(Tensor::new([1, 2, 1], vec![0.0, 1.0]).unwrap()).unwrap();
    let next = Tensor::zeros([1, 2, 1]);
    let r = reg_loss(v, &next, 1.0, 1.0).unwrap();
    assert_eq!(r.temp_diff.item().unwrap(), 0.5);
    assert_eq!(r.change_rate.item().unwrap(), 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let row = Tensor::randn([1, 5, 2], 1.0, &mut rng);
    let same: Vec<f64> = (0..3).flat_map(|_| row.data().to_vec()).collect();
    let same = Tensor::new([3, 5, 2], same).unwrap();
    let r = reg_loss(tape.param(same.clone()).unwrap(), &same, 0.1, 0.1).unwrap();
    assert_eq!(r.temp_diff.item().unwrap(), 0.0);
    assert_eq!(r.change_rate.item().unwrap(), 0.0);
    assert!(r.spatial.item().unwrap().abs() < 1e-15);

    let short = tape.param(Tensor::zeros([2, 1, 2])).unwrap();
    assert!(matches!(reg_loss(short, &Tensor::zeros([2, 1, 2]), 0.1, 0.1), Err(Error::Dimension(_))));
}

#[test]
fn partition_sizes_and_set_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (ct, fm) = partition_batch(10, 0.2, &mut rng).unwrap();
    assert_eq!((ct.len(), fm.len()), (2, 8));
    let (ct, fm) = partition_batch(4, 0.5, &mut rng).unwrap();
    assert_eq!((ct.len(), fm.len()), (2, 2));
    for _ in 0..1000 {
        let (ct, fm) = partition_batch(13, 0.3, &mut rng).unwrap();
        let mut all: Vec<usize> = ct.iter().chain(&fm).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..13).collect::<Vec<_>>());
    }
    assert!(matches!(partition_batch(2, 0.1, &mut rng), Err(Error::Config(_))));
    assert!(matches!(partition_batch(2, 0.9, &mut rng), Err(Error::Config(_))));
    assert!(matches!(partition_batch(10, 1.0, &mut rng), Err(Error::Config(_))));
}

fn toy_store(rng: &mut ChaCha8Rng) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("a", Tensor::randn([3, 2], 1.0, rng), true);
    s.insert("b", Tensor::randn([4], 1.0, rng), true);
    s.insert("frozen", Tensor::randn([2], 1.0, rng), false);
    s
}

#[test]
fn ema_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let student = toy_store(&mut rng);
    let mut teacher = EmaTeacher::new(&student, 0.9);
    teacher.update(&student).unwrap();
    assert_eq!(teacher.shadow, student);

    let other = toy_store(&mut rng);
    let mut copy = EmaTeacher::new(&other, 0.0);
    copy.update(&student).unwrap();
    assert_eq!(copy.shadow.get("a").unwrap(), student.get("a").unwrap());
    assert_eq!(copy.shadow.get("frozen").unwrap(), other.get("frozen").unwrap());

    // constant student: the gap shrinks by decay^k
    let decay: f64 = 0.7;
    let mut t = EmaTeacher::new(&other, decay);
    let gap = |t: &EmaTeacher| t.shadow.get("a").unwrap().sub(student.get("a").unwrap()).unwrap().norm();
    let g0 = gap(&t);
    for k in 1..=6 {
        t.update(&student).unwrap();
        assert!((gap(&t) - g0 * decay.powi(k)).abs() < 1e-12 * g0);
    }

    let mut drift = student.clone();
    drift.insert("extra", Tensor::zeros([1]), true);
    assert!(matches!(t.update(&drift), Err(Error::Contract(_))));
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = toy_store(&mut rng);
    let before = store.clone();
    let grads: std::collections::BTreeMap<String, Tensor> = [
        ("a".to_string(), Tensor::randn([3, 2], 1.0, &mut rng)),
        ("b".to_string(), Tensor::randn([4], 1.0, &mut rng)),
    ]
    .into();
    let mut opt = Adam::new(0.01, 0.0);
    opt.step(&mut store, &grads).unwrap();
    for (name, g) in &grads {
        let moved = store.get(name).unwrap().sub(before.get(name).unwrap()).unwrap();
        for (m, gi) in moved.data().iter().zip(g.data()) {
            assert!((m + 0.01 * gi.signum()).abs() < 1e-8, "{m} vs {gi}");
        }
    }
    assert_eq!(store.get("frozen").unwrap(), before.get("frozen").unwrap());

    // clipping rescales the whole gradient before the moments see it
    let big: std::collections::BTreeMap<String, Tensor> = [("a".to_string(), Tensor::full([3, 2], 100.0))].into();
    let mut clipped = Adam::new(0.01, 1.0);
    let norm = clipped.step(&mut store, &big).unwrap();
    assert!((norm - 100.0 * 6f64.sqrt()).abs() < 1e-9);
}

fn setup(batch: usize, model: BackboneConfig) -> (Trainer, Vec<Trajectory>) {
    let spec = GenSpec { seed: 3, ..Default::default() };
    let data = generate_dataset(&spec, 128).unwrap();
    let model = KoopmanFlow::new(BackboneConfig { context_dim: spec.context_dim(), ..model }).unwrap();
    let cfg = TrainConfig { batch, ..Default::default() };
    (Trainer::new(model, cfg).unwrap(), data)
}

fn tiny_setup(batch: usize) -> (Trainer, Vec<Trajectory>) {
    setup(batch, BackboneConfig { hidden: 16, blocks: 1, dyn_dim: 8, ..Default::default() })
}

#[test]
fn breakdown_adds_up_and_teacher_stays_put() {
    let (mut trainer, data) = tiny_setup(10);
    // let the mask and weights move away from their initial state first
    for _ in 0..3 {
        let b = trainer.sample_batch(&data).unwrap();
        trainer.train_step(&b).unwrap();
    }
    let batch = trainer.sample_batch(&data).unwrap();
    let draw = StepDraw::sample(batch.actions.shape(), &trainer.cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let shadow = trainer.teacher.shadow.clone();
    let (b, grads, _) = trainer.losses(&batch, &draw).unwrap();
    assert!((b.total - b.recombine(trainer.cfg.ct_weight, trainer.cfg.lambda_dec)).abs() < 1e-12);
    assert!(b.ct_inv > 0.0 && b.inv_cross > 0.0 && b.var_flow > 0.0 && b.reg_spatial > 0.0);
    assert_eq!(trainer.teacher.shadow, shadow);
    let names: Vec<&str> = trainer.model.params.names().filter(|n| trainer.model.params.is_trainable(n)).collect();
    assert_eq!(grads.keys().map(String::as_str).collect::<Vec<_>>(), names);

    // teacher weights bound on a gradient-free tape never receive a gradient
    let tape = Tape::no_grad();
    let p = shadow.bind(&tape).unwrap();
    assert!(shadow.names().all(|n| !p.get(n).unwrap().requires_grad()));
}

#[test]
fn zero_decoupling_weight_drops_the_terms() {
    let (trainer, data) = tiny_setup(10);
    let batch = Batch::of(&data[..10]).unwrap();
    let draw = StepDraw::sample(batch.actions.shape(), &trainer.cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let mut no_dec = trainer.clone();
    no_dec.cfg.lambda_dec = 0.0;
    let (b, _, _) = no_dec.losses(&batch, &draw).unwrap();
    let expected = b.fm + b.ct + b.reg_temp + b.reg_rate + b.reg_spatial;
    assert!((b.total - expected).abs() < 1e-12);
}

#[test]
fn steps_are_deterministic() {
    let run = || {
        let (mut trainer, data) = tiny_setup(10);
        (0..3)
            .map(|_| {
                let b = trainer.sample_batch(&data).unwrap();
                trainer.train_step(&b).unwrap()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn zeroed_consistency_side_is_plain_flow_matching() {
    let (mut trainer, data) = tiny_setup(10);
    trainer.cfg = trainer.cfg.clone().pure_fm();
    for _ in 0..2 {
        let b = trainer.sample_batch(&data).unwrap();
        trainer.train_step(&b).unwrap();
    }
    let batch = trainer.sample_batch(&data).unwrap();
    let draw = StepDraw::sample(batch.actions.shape(), &trainer.cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    let (_, grads, _) = trainer.losses(&batch, &draw).unwrap();

    // a flow-matching loss assembled by hand on the same partition
    let model = &trainer.model;
    let tape = Tape::new();
    let p = model.params.bind(&tape).unwrap();
    let x_t = ot_interpolate(&draw.x0, &batch.actions, &draw.t).unwrap();
    let out = model.forward(&p, tape.constant(x_t).unwrap(), &batch.cond, &draw.t, DmdSolver::Normal).unwrap();
    let v = out.v_total.gather(0, &draw.fm_idx).unwrap();
    let target = select_rows(&batch.actions.sub(&draw.x0).unwrap(), &draw.fm_idx);
    v.mse(&tape.constant(target).unwrap()).unwrap().backward().unwrap();
    let reference = p.grads(&model.params);
    for (name, g) in &grads {
        assert!(g.max_abs_diff(&reference[name]) < 1e-12, "{name}");
    }
}

#[test]
fn config_checks_and_round_trip() {
    let run = RunConfig {
        model: BackboneConfig { hidden: 16, ..Default::default() },
        train: TrainConfig { r_ct: 0.25, steps: 10, ..Default::default() },
    };
    assert_eq!(RunConfig::from_text(&run.to_text()).unwrap(), run);
    assert!(run.to_text().contains("model.hidden = 16"));
    for text in ["r_ct = 0", "r_ct = 1", "batch = 2\nr_ct = 0.1", "dt_min = 0.5\ndt_max = 0.2", "lambda_dec = -1", "model.heads = 5"] {
        assert!(matches!(RunConfig::from_text(text), Err(Error::Config(_))), "{text}");
    }
    let fm = TrainConfig::default().pure_fm();
    assert_eq!((fm.ct_weight, fm.lambda_dec, fm.lambda_temporal, fm.lambda_spatial), (0.0, 0.0, 0.0, 0.0));
}

#[test]
fn consistency_times_leave_room_for_the_step() {
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let d = StepDraw::sample(&[10, 4, 2], &cfg, &mut rng).unwrap();
        for &i in &d.ct_idx {
            assert!(d.t[i] <= 1.0 - cfg.dt_min && d.dt[i] >= cfg.dt_min);
            assert!(d.dt[i] <= cfg.dt_max && d.t[i] + d.dt[i] <= 1.0);
        }
        assert!(d.fm_idx.iter().all(|&i| d.dt[i] == 0.0 && (0.0..1.0).contains(&d.t[i])));
    }
}

#[test]
fn training_reduces_the_loss() {
    let (trainer, data) = setup(32, BackboneConfig::default());
    let cfg = TrainConfig { steps: 500, lr: 3e-3, ..trainer.cfg };
    let mut trainer = Trainer::new(trainer.model, cfg).unwrap();
    let history = trainer.fit(&data, None).unwrap();
    let mean = |s: &[LossBreakdown]| s.iter().map(|b| b.total).sum::<f64>() / s.len() as f64;
    // ten-step windows at each end smooth out minibatch noise
    let (first, last) = (mean(&history[..10]), mean(&history[490..]));
    assert!(last < 0.5 * first, "{first} -> {last}");
    assert!(trainer.model.mask.is_frozen());
}

#[test]
fn cosine_schedule_runs_from_lr_to_the_final_share() {
    let (trainer, _) = tiny_setup(10);
    let cfg = TrainConfig { lr: 2e-3, lr_final_frac: 0.1, steps: 101, ..trainer.cfg.clone() };
    let t = Trainer::new(trainer.model, cfg).unwrap();
    assert_eq!(t.lr_at(0), 2e-3);
    assert!((t.lr_at(100) - 2e-4).abs() < 1e-18);
    // halfway down the cosine sits the midpoint of the two rates
    assert!((t.lr_at(50) - 1.1e-3).abs() < 1e-15);
    assert!((1..=100).all(|s| t.lr_at(s) <= t.lr_at(s - 1)));
    assert_eq!(t.lr_at(500), t.lr_at(100));

    let flat = Trainer::new(t.model.clone(), TrainConfig { lr_final_frac: 1.0, ..t.cfg.clone() }).unwrap();
    assert!((0..101).all(|s| flat.lr_at(s) == 2e-3));
    let bad = TrainConfig { lr_final_frac: 1.5, ..t.cfg.clone() };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}
