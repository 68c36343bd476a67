//! Binary checkpoints holding everything needed for a bit-exact resume.
//!
//! Layout, all integers little-endian: magic `DGSCKPT1`, u32 format
//! version, u8 scalar width in bytes, then sections in a fixed order, each
//! prefixed by its u64 byte length: config (TOML text), parameter tensors,
//! optimizer moments, step and loss history, generator state.

use std::path::Path;

use diffcore::{DTensor, Scalar};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::deform::DeformMlp;
use crate::encoder::CrossTemporalEncoder;
use crate::error::{io_err, Error, Result};
use crate::gaussian::GaussianSet;
use crate::trainer::{Adam, LossRecord, TrainConfig, TrainState};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DGSCKPT1";

fn width<T: Scalar>() -> usize {
    (T::BITS / 8) as usize
}

struct Writer<T> {
    out: Vec<u8>,
    _scalar: std::marker::PhantomData<T>,
}

impl<T: Scalar> Writer<T> {
    fn u64(&mut self, v: u64) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }

    fn scalars(&mut self, v: &[T]) {
        self.u64(v.len() as u64);
        for &x in v {
            if width::<T>() == 4 {
                self.out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
            } else {
                self.f64(x.as_f64());
            }
        }
    }

    fn tensor(&mut self, t: &DTensor<T>) {
        self.u64(t.shape().len() as u64);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        self.scalars(t.data());
    }

    /// Runs `body` and prefixes what it wrote with its length.
    fn section(&mut self, body: impl FnOnce(&mut Self)) {
        let at = self.out.len();
        self.u64(0);
        body(self);
        let len = (self.out.len() - at - 8) as u64;
        self.out[at..at + 8].copy_from_slice(&len.to_le_bytes());
    }
}

struct Reader<'a, T> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
    _scalar: std::marker::PhantomData<T>,
}

impl<'a, T: Scalar> Reader<'a, T> {
    fn fail(&self, msg: impl std::fmt::Display) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            msg: format!("checkpoint byte {}: {msg}", self.at),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(self.fail(format!("truncated, needed {n} more bytes")));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.fail(format!("length {v} out of range")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn scalars(&mut self) -> Result<Vec<T>> {
        let n = self.usize()?;
        let raw = self.take(n.checked_mul(width::<T>()).ok_or_else(|| self.fail("length overflow"))?)?;
        Ok(if width::<T>() == 4 {
            raw.chunks_exact(4).map(|b| T::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64)).collect()
        } else {
            raw.chunks_exact(8).map(|b| T::lit(f64::from_le_bytes(b.try_into().unwrap()))).collect()
        })
    }

    fn tensor(&mut self) -> Result<DTensor<T>> {
        let ndim = self.usize()?;
        let shape = (0..ndim).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        let data = self.scalars()?;
        DTensor::new(&shape, data).map_err(|e| self.fail(e))
    }

    /// Returns the end offset of the section starting here.
    fn section(&mut self) -> Result<usize> {
        let len = self.usize()?;
        if self.bytes.len() - self.at < len {
            return Err(self.fail(format!("section of {len} bytes is truncated")));
        }
        Ok(self.at + len)
    }

    fn end_section(&self, end: usize) -> Result<()> {
        if self.at != end {
            return Err(self.fail(format!("section ends at {} but data ends at {}", end, self.at)));
        }
        Ok(())
    }
}

pub fn encode_checkpoint<T: Scalar>(state: &TrainState<T>) -> Vec<u8> {
    let mut w = Writer::<T> {
        out: Vec::new(),
        _scalar: Default::default(),
    };
    w.out.extend_from_slice(MAGIC);
    w.out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    w.out.push(width::<T>() as u8);
    w.section(|w| w.out.extend_from_slice(state.config.to_toml().as_bytes()));
    w.section(|w| {
        let params = state.parameters();
        w.u64(params.len() as u64);
        for p in params {
            w.tensor(p);
        }
    });
    w.section(|w| {
        w.u64(state.optimizer.steps);
        w.u64(state.optimizer.first.len() as u64);
        for (m, v) in state.optimizer.first.iter().zip(&state.optimizer.second) {
            w.scalars(m);
            w.scalars(v);
        }
    });
    w.section(|w| {
        w.u64(state.step as u64);
        w.u64(state.history.len() as u64);
        for r in &state.history {
            w.u64(r.step as u64);
            for v in [r.l_c, r.l_t, r.total, r.wall_time] {
                w.f64(v);
            }
        }
    });
    w.section(|w| {
        w.out.extend_from_slice(&state.rng.get_seed());
        w.u64(state.rng.get_stream());
        w.out.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    });
    w.out
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], path: &Path) -> Result<TrainState<T>> {
    let mut r = Reader::<T> {
        bytes,
        at: 0,
        path,
        _scalar: Default::default(),
    };
    if r.take(8)? != MAGIC {
        return Err(r.fail("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version > CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let stored = r.take(1)?[0] as usize;
    if stored != width::<T>() {
        return Err(r.fail(format!("written with {}-bit scalars, loading as {}-bit", 8 * stored, 8 * width::<T>())));
    }

    let end = r.section()?;
    let text = std::str::from_utf8(r.take(end - r.at)?).map_err(|e| r.fail(e))?;
    let config = TrainConfig::from_toml(text)?;

    let end = r.section()?;
    let count = r.usize()?;
    let mut tensors = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    r.end_section(end)?;
    if tensors.len() < 5 {
        return Err(r.fail("fewer than five Gaussian tensors"));
    }
    let rest = tensors.split_off(5);
    let mut it = tensors.into_iter();
    let mut next = || it.next().unwrap();
    let gaussians = GaussianSet::new(next(), next(), next(), next(), next())?;

    // Build correctly shaped modules, then overwrite every tensor.
    let mut scratch = ChaCha8Rng::seed_from_u64(0);
    let field_count = if config.encoder_enabled && !config.shared_weights { 2 } else { 1 };
    let fields = (0..field_count)
        .map(|_| DeformMlp::new(config.deform, &mut scratch))
        .collect::<Result<Vec<_>>>()?;
    let encoder = config
        .encoder_enabled
        .then(|| CrossTemporalEncoder::new(config.encoder, &mut scratch))
        .transpose()?;
    let mut state = TrainState {
        branches: if field_count == 2 { [0, 1] } else { [0, 0] },
        config,
        gaussians,
        fields,
        encoder,
        optimizer: Adam::new(&[]),
        step: 0,
        history: Vec::new(),
        rng: scratch,
    };
    {
        let mut slots = state.parameters_mut();
        let slot_count = slots.len() - 5;
        if slot_count != rest.len() {
            return Err(r.fail(format!("{} module tensors, configuration expects {slot_count}", rest.len())));
        }
        for (k, (slot, t)) in slots.iter_mut().skip(5).zip(rest).enumerate() {
            if slot.shape() != t.shape() {
                return Err(r.fail(format!("tensor {} has shape {:?}, expected {:?}", k + 5, t.shape(), slot.shape())));
            }
            **slot = t.with_requires_grad(false);
        }
    }

    let end = r.section()?;
    let steps = r.u64()?;
    let groups = r.usize()?;
    let sizes: Vec<usize> = state.parameters().iter().map(|p| p.numel()).collect();
    if groups != sizes.len() {
        return Err(r.fail(format!("{groups} optimizer groups for {} parameters", sizes.len())));
    }
    let mut first = Vec::with_capacity(groups);
    let mut second = Vec::with_capacity(groups);
    for &n in &sizes {
        let (m, v) = (r.scalars()?, r.scalars()?);
        if m.len() != n || v.len() != n {
            return Err(r.fail("optimizer moment size mismatch"));
        }
        first.push(m);
        second.push(v);
    }
    r.end_section(end)?;
    state.optimizer = Adam { steps, first, second };

    let end = r.section()?;
    state.step = r.usize()?;
    let records = r.usize()?;
    for _ in 0..records {
        let step = r.usize()?;
        let (l_c, l_t, total, wall_time) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        state.history.push(LossRecord {
            step,
            l_c,
            l_t,
            total,
            wall_time,
        });
    }
    r.end_section(end)?;

    let end = r.section()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    r.end_section(end)?;
    state.rng = ChaCha8Rng::from_seed(seed);
    state.rng.set_stream(stream);
    state.rng.set_word_pos(word_pos);

    if r.at != bytes.len() {
        return Err(r.fail("trailing bytes"));
    }
    Ok(state)
}

/// Scalar width in bits recorded in a checkpoint header.
pub fn checkpoint_precision(path: &Path) -> Result<u32> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 13 || &bytes[..8] != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "not a checkpoint (bad magic or truncated header)".into(),
        });
    }
    Ok(8 * bytes[12] as u32)
}

pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    super::write_atomic(path, &encode_checkpoint(state))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes, path)
}
