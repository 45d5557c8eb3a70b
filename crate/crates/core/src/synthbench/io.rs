//! Binary dataset container.
//!
//! Layout (little-endian): the 7-byte magic `KFDATA1`, then `u64` counts
//! `n, T, D, C`, then per trajectory `T·D` f64 actions (row-major), `T` u8
//! events and `C` f64 context values. The whole file is read and checked
//! before any trajectory is returned.

use std::path::Path;

use crate::error::{format_err, Result};
use crate::gradcore::Tensor;

use super::Trajectory;

pub const DATA_MAGIC: &[u8; 7] = b"KFDATA1";

pub fn encode_dataset(trajs: &[Trajectory]) -> Result<Vec<u8>> {
    let (t, d, c) = match trajs.first() {
        Some(tr) => (tr.actions.shape()[0], tr.actions.shape()[1], tr.context.len()),
        None => (0, 0, 0),
    };
    let mut out = Vec::with_capacity(39 + trajs.len() * (t * d * 8 + t + c * 8));
    out.extend_from_slice(DATA_MAGIC);
    for n in [trajs.len(), t, d, c] {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for tr in trajs {
        if tr.actions.shape() != [t, d] || tr.events.len() != t || tr.context.len() != c {
            return Err(format_err!("trajectories of different shapes cannot share a file"));
        }
        tr.actions.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        out.extend(tr.events.iter().map(|&e| u8::from(e)));
        tr.context.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err!("truncated dataset at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| format_err!("count {v} does not fit in memory"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| format_err!("count overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Trajectory>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(DATA_MAGIC.len()).ok() != Some(DATA_MAGIC.as_slice()) {
        return Err(format_err!("not a KFDATA1 file"));
    }
    let (n, t, d, c) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?);
    let per = t
        .checked_mul(d)
        .and_then(|td| td.checked_mul(8))
        .and_then(|v| v.checked_add(t))
        .and_then(|v| v.checked_add(c.checked_mul(8)?))
        .ok_or_else(|| format_err!("header counts overflow"))?;
    if n.checked_mul(per) != Some(bytes.len() - r.pos) {
        return Err(format_err!("payload is {} bytes, header implies {n} × {per}", bytes.len() - r.pos));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let actions = Tensor::new([t, d], r.f64s(t * d)?)?;
        let events = r
            .take(t)?
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(format_err!("event byte {b} is not 0 or 1")),
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Trajectory { actions, events, context: r.f64s(c)? });
    }
    Ok(out)
}

pub fn save_dataset(path: impl AsRef<Path>, trajs: &[Trajectory]) -> Result<()> {
    std::fs::write(path, encode_dataset(trajs)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    decode_dataset(&std::fs::read(path)?)
}
