//! Model checkpoints.
//!
//! A checkpoint is a flat container of named entries behind the magic
//! `KFLOW1`: a `u64` entry count, then per entry a `u64` name length, the
//! UTF-8 name, a kind byte and the payload. Tensor entries (kind 0) store a
//! `u64` rank, the dimensions and the values as little-endian f64; text
//! entries (kind 1) store a `u64` byte length and UTF-8 text.
//!
//! A model checkpoint holds:
//! - `config`: the flat key=value text, model keys prefixed with `model.`,
//!   followed by the training keys when they are known;
//! - every parameter under its own name (`backbone.*`, `koopman.*`);
//! - `spectral.mask`: `[alpha, keep bits.., running spectrum..]`;
//! - optionally the EMA teacher under `ema.<name>`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::backbone::{BackboneConfig, KoopmanFlow, ParamStore};
use crate::config::{KvConfig, KvMap};
use crate::error::{format_err, Result};
use crate::gradcore::{rfft_bins, Tensor};
use crate::spectral::{FrequencyMask, MaskTracker};
use crate::training::{TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"KFLOW1";

const EMA_PREFIX: &str = "ema.";
const MASK_KEY: &str = "spectral.mask";

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Tensor(Tensor),
    Text(String),
}

/// Named entries in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub entries: BTreeMap<String, Entry>,
}

impl Container {
    pub fn insert_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), Entry::Tensor(t));
    }

    pub fn insert_text(&mut self, name: impl Into<String>, text: impl Into<String>) {
        self.entries.insert(name.into(), Entry::Text(text.into()));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.entries.get(name) {
            Some(Entry::Tensor(t)) => Ok(t),
            Some(Entry::Text(_)) => Err(format_err!("entry {name:?} is text, expected a tensor")),
            None => Err(format_err!("checkpoint has no entry {name:?}")),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.entries.get(name) {
            Some(Entry::Text(s)) => Ok(s),
            Some(Entry::Tensor(_)) => Err(format_err!("entry {name:?} is a tensor, expected text")),
            None => Err(format_err!("checkpoint has no entry {name:?}")),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        let put = |out: &mut Vec<u8>, n: usize| out.extend_from_slice(&(n as u64).to_le_bytes());
        put(&mut out, self.entries.len());
        for (name, entry) in &self.entries {
            put(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::Tensor(t) => {
                    out.push(0);
                    put(&mut out, t.rank());
                    t.shape().iter().for_each(|&d| put(&mut out, d));
                    t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
                Entry::Text(s) => {
                    out.push(1);
                    put(&mut out, s.len());
                    out.extend_from_slice(s.as_bytes());
                }
            }
        }
        out
    }

    /// Parse a whole container; nothing is returned unless every byte checks out.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len()).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(format_err!("not a KFLOW1 checkpoint"));
        }
        let count = r.count()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = r.count()?;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| format_err!("entry name is not UTF-8"))?;
            let entry = match r.take(1)?[0] {
                0 => {
                    let rank = r.count()?;
                    let shape = (0..rank).map(|_| r.count()).collect::<Result<Vec<_>>>()?;
                    let numel = shape
                        .iter()
                        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                        .ok_or_else(|| format_err!("shape of {name:?} overflows"))?;
                    let bytes = numel.checked_mul(8).ok_or_else(|| format_err!("shape of {name:?} overflows"))?;
                    let data = r
                        .take(bytes)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Entry::Tensor(Tensor::new(shape, data).map_err(|e| format_err!("entry {name:?}: {e}"))?)
                }
                1 => {
                    let len = r.count()?;
                    let text = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| format_err!("text of {name:?} is not UTF-8"))?;
                    Entry::Text(text)
                }
                k => return Err(format_err!("entry {name:?} has unknown kind {k}")),
            };
            if entries.insert(name.clone(), entry).is_some() {
                return Err(format_err!("duplicate entry {name:?}"));
            }
        }
        if r.pos != bytes.len() {
            return Err(format_err!("{} trailing bytes after the last entry", bytes.len() - r.pos));
        }
        Ok(Self { entries })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err!("truncated checkpoint at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn count(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| format_err!("count {v} does not fit in memory"))
    }
}

/// A trained model with what is needed to resume or reproduce it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: KoopmanFlow,
    pub teacher: Option<ParamStore>,
    pub train: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn of_model(model: KoopmanFlow) -> Self {
        Self { model, teacher: None, train: None }
    }

    /// Student, EMA teacher and training settings of a run in progress.
    pub fn of_trainer(trainer: &Trainer) -> Self {
        Self {
            model: trainer.model.clone(),
            teacher: Some(trainer.teacher.shadow.clone()),
            train: Some(trainer.cfg.clone()),
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        let mut kv = KvMap::new();
        if let Some(train) = &self.train {
            train.write_kv(&mut kv);
        }
        kv.merge_prefixed("model.", &self.model.config.to_kv());
        c.insert_text("config", kv.to_text());
        for (name, p) in self.model.params.iter() {
            c.insert_tensor(name, p.value.clone());
        }
        if let Some(teacher) = &self.teacher {
            for (name, p) in teacher.iter() {
                c.insert_tensor(format!("{EMA_PREFIX}{name}"), p.value.clone());
            }
        }
        let mask = self.model.mask.mask();
        let mut record = vec![mask.alpha()];
        record.extend(mask.keep().iter().map(|&k| f64::from(u8::from(k))));
        record.extend_from_slice(mask.source_spectrum());
        c.insert_tensor(MASK_KEY, Tensor::from_vec(record).expect("finite mask record"));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let mut kv = KvMap::parse(c.text("config")?)?;
        let mut model_kv = kv.split_prefix("model.");
        let mut config = BackboneConfig::default();
        config.read_kv(&mut model_kv)?;
        model_kv.finish()?;
        config.validate()?;
        let train = if kv.is_empty() { None } else { Some(TrainConfig::from_kv(kv)?) };

        let mut model = KoopmanFlow::new(config)?;
        let expected: Vec<String> = model.params.names().map(str::to_owned).collect();
        let load = |store: &mut ParamStore, prefix: &str| -> Result<()> {
            for name in &expected {
                let t = c.tensor(&format!("{prefix}{name}"))?;
                let slot = store.get_mut(name)?;
                if t.shape() != slot.shape() {
                    return Err(format_err!("{prefix}{name} has shape {:?}, config implies {:?}", t.shape(), slot.shape()));
                }
                *slot = t.clone();
            }
            Ok(())
        };
        load(&mut model.params, "")?;
        let has_teacher = c.entries.keys().any(|k| k.starts_with(EMA_PREFIX));
        let teacher = if has_teacher {
            let mut shadow = model.params.clone();
            load(&mut shadow, EMA_PREFIX)?;
            Some(shadow)
        } else {
            None
        };
        let known = |k: &str| {
            let bare = k.strip_prefix(EMA_PREFIX).unwrap_or(k);
            k == "config" || k == MASK_KEY || model.params.get(bare).is_ok()
        };
        if let Some(extra) = c.entries.keys().find(|k| !known(k)) {
            return Err(format_err!("unexpected checkpoint entry {extra:?}"));
        }

        let record = c.tensor(MASK_KEY)?.data();
        let bins = rfft_bins(model.config.seq_len);
        if record.len() != 1 + 2 * bins {
            return Err(format_err!("mask record of length {}, sequence length implies {}", record.len(), 1 + 2 * bins));
        }
        let keep = record[1..=bins]
            .iter()
            .map(|&b| {
                if b == 0.0 || b == 1.0 {
                    Ok(b == 1.0)
                } else {
                    Err(format_err!("mask bit {b} is not 0 or 1"))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mask = FrequencyMask::new(keep, record[0], record[1 + bins..].to_vec())
            .map_err(|e| format_err!("stored mask is invalid: {e}"))?;
        model.mask = MaskTracker::from_mask(mask);
        Ok(Self { model, teacher, train })
    }

    pub fn encode(&self) -> Vec<u8> {
        self.to_container().encode()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::decode(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Conditioning;
    use crate::koopman::DmdSolver;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trained_ish() -> KoopmanFlow {
        let cfg = BackboneConfig { hidden: 8, blocks: 1, dyn_dim: 4, seq_len: 8, context_dim: 3, ..Default::default() };
        let mut m = KoopmanFlow::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (_, p) in m.params.iter_mut() {
            p.value = p.value.add(&Tensor::randn(p.value.shape().to_vec(), 0.1, &mut rng)).unwrap();
        }
        // a random-walk latent gives the tracker a mask that drops some bins
        let walk: Vec<f64> = (0..8 * 8).scan(0.0, |s, _| {
            *s += rand::Rng::random::<f64>(&mut rng) - 0.5;
            Some(*s)
        }).collect();
        m.mask.observe(&Tensor::new([1, 8, 8], walk).unwrap()).unwrap();
        m.mask.freeze();
        m
    }

    #[test]
    fn model_round_trip_is_exact() {
        let model = trained_ish();
        let teacher = model.params.clone();
        let ckpt = Checkpoint { model, teacher: Some(teacher), train: Some(TrainConfig { steps: 7, ..Default::default() }) };
        let back = Checkpoint::decode(&ckpt.encode()).unwrap();
        assert_eq!(back.model.params, ckpt.model.params);
        assert_eq!(back.model.config, ckpt.model.config);
        assert_eq!(back.model.mask.mask(), ckpt.model.mask.mask());
        assert!(back.model.mask.is_frozen());
        assert_eq!(back.teacher, ckpt.teacher);
        assert_eq!(back.train, ckpt.train);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn([2, 8, 2], 1.0, &mut rng);
        let cond = Conditioning { events: Tensor::zeros([2, 8]), context: Tensor::randn([2, 3], 1.0, &mut rng) };
        let a = ckpt.model.evaluate(&x, &cond, &[0.1, 0.7], DmdSolver::Svd).unwrap();
        let b = back.model.evaluate(&x, &cond, &[0.1, 0.7], DmdSolver::Svd).unwrap();
        assert_eq!(a.v_total, b.v_total);
    }

    #[test]
    fn bare_model_has_no_teacher_or_training_keys() {
        let ckpt = Checkpoint::of_model(trained_ish());
        let c = ckpt.to_container();
        assert!(c.text("config").unwrap().lines().all(|l| l.starts_with("model.")));
        let back = Checkpoint::from_container(&c).unwrap();
        assert!(back.teacher.is_none() && back.train.is_none());
    }

    #[test]
    fn damaged_checkpoints_are_rejected() {
        let bytes = Checkpoint::of_model(trained_ish()).encode();
        let mut magic = bytes.clone();
        magic[1] = b'X';
        assert!(matches!(Checkpoint::decode(&magic), Err(crate::Error::Format(_))));
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3]), Err(crate::Error::Format(_))));
        let mut longer = bytes.clone();
        longer.push(1);
        assert!(matches!(Checkpoint::decode(&longer), Err(crate::Error::Format(_))));

        let mut c = Checkpoint::of_model(trained_ish()).to_container();
        c.insert_tensor("backbone.head.proj_inv", Tensor::zeros([3, 3]));
        assert!(matches!(Checkpoint::from_container(&c), Err(crate::Error::Format(_))));
        let mut c = Checkpoint::of_model(trained_ish()).to_container();
        c.insert_tensor("backbone.stray", Tensor::zeros([1]));
        assert!(matches!(Checkpoint::from_container(&c), Err(crate::Error::Format(_))));
        let mut c = Checkpoint::of_model(trained_ish()).to_container();
        c.entries.remove("spectral.mask");
        assert!(matches!(Checkpoint::from_container(&c), Err(crate::Error::Format(_))));
    }

    #[test]
    fn containers_keep_both_kinds() {
        let mut c = Container::default();
        c.insert_text("note", "a = 1");
        c.insert_tensor("s", Tensor::scalar(2.5));
        c.insert_tensor("m", Tensor::new([2, 0], vec![]).unwrap());
        let back = Container::decode(&c.encode()).unwrap();
        assert_eq!(back, c);
        assert!(back.tensor("note").is_err() && back.text("s").is_err());
    }
}
