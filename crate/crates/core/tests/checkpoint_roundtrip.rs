use koopflow::backbone::{BackboneConfig, KoopmanFlow};
use koopflow::checkpoint::Checkpoint;
use koopflow::inference::{euler_sample, SamplerConfig};
use koopflow::synthbench::{generate_dataset, Batch, GenSpec};
use koopflow::training::{TrainConfig, Trainer};
use koopflow::Error;

fn trained() -> (Trainer, Batch) {
    let spec = GenSpec { seed: 4, ..Default::default() };
    let data = generate_dataset(&spec, 24).unwrap();
    let model = KoopmanFlow::new(BackboneConfig {
        context_dim: spec.context_dim(),
        hidden: 16,
        blocks: 1,
        dyn_dim: 8,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig { batch: 8, steps: 6, lr_final_frac: 0.5, ..Default::default() };
    let mut trainer = Trainer::new(model, cfg).unwrap();
    trainer.fit(&data, None).unwrap();
    (trainer, Batch::of(&data[..4]).unwrap())
}

#[test]
fn saved_run_reloads_exactly() {
    let (trainer, batch) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.kf");
    Checkpoint::of_trainer(&trainer).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();

    assert_eq!(back.train.as_ref(), Some(&trainer.cfg));
    assert_eq!(back.model.config, trainer.model.config);
    assert_eq!(back.model.mask.mask(), trainer.model.mask.mask());
    assert!(back.model.mask.is_frozen());
    for (name, p) in trainer.model.params.iter() {
        assert_eq!(back.model.params.get(name).unwrap(), &p.value, "{name}");
    }
    let teacher = back.teacher.unwrap();
    for (name, p) in trainer.teacher.shadow.iter() {
        assert_eq!(teacher.get(name).unwrap(), &p.value, "ema {name}");
    }

    let cfg = SamplerConfig { nfe: 2, seed: 9 };
    let a = euler_sample(&trainer.model, &batch.cond, &cfg).unwrap();
    let b = euler_sample(&back.model, &batch.cond, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let (trainer, _) = trained();
    let bytes = Checkpoint::of_trainer(&trainer).encode();
    assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] ^= 0xff;
    assert!(matches!(Checkpoint::decode(&wrong_magic), Err(Error::Format(_))));
    let mut extra = bytes;
    extra.push(0);
    assert!(matches!(Checkpoint::decode(&extra), Err(Error::Format(_))));
}
