//! Binary column checkpoints.
//!
//! Layout: magic `DEMCKPT1`, version u32 LE, architecture dims (u32 count,
//! u32 each), parameter count u64, parameters as IEEE-754 binary64 LE in
//! canonical layer order, then optimizer / RNG / utility blocks, each
//! length-prefixed with a u64 (length 0 when absent). Save/load round trips
//! are bit-identical.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::adam::OptimizerState;
use crate::nn::cbp::UtilityState;
use crate::nn::{Architecture, ColumnParams, ModelColumn};

const MAGIC: &[u8; 8] = b"DEMCKPT1";
const VERSION: u32 = 1;

/// Serialized RNG position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub arch: Architecture,
    pub params: Vec<f64>,
    pub optimizer: Option<OptimizerState>,
    pub rng: Option<RngState>,
    pub utility: Option<UtilityState>,
}

impl Checkpoint {
    pub fn of_column(
        column: &ModelColumn,
        optimizer: Option<&OptimizerState>,
        rng: Option<&ChaCha8Rng>,
        utility: Option<&UtilityState>,
    ) -> Checkpoint {
        Checkpoint {
            version: VERSION,
            arch: column.arch.clone(),
            params: column.params.to_flat(),
            optimizer: optimizer.cloned(),
            rng: rng.map(RngState::capture),
            utility: utility.cloned(),
        }
    }

    /// Rebuilds an unfrozen column; callers freeze as needed.
    pub fn to_column(&self) -> Result<ModelColumn> {
        let mut params = ColumnParams::zeros(&self.arch);
        params
            .assign_from_flat(&self.params)
            .map_err(|_| Error::CorruptCheckpoint("parameter count does not match dims".into()))?;
        Ok(ModelColumn {
            arch: self.arch.clone(),
            params,
            frozen: false,
        })
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Writer {
        Writer { buf: Vec::new() }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }

    fn block(&mut self, payload: Vec<u8>) {
        self.u64(payload.len() as u64);
        self.buf.extend_from_slice(&payload);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Reader<'a> {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "truncated: wanted {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.buf.len()
            )));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn encode_optimizer(opt: &OptimizerState) -> Vec<u8> {
    let mut w = Writer::new();
    w.u64(opt.step_count);
    w.f64(opt.learning_rate);
    w.f64(opt.beta1);
    w.f64(opt.beta2);
    w.f64(opt.epsilon);
    w.u64(opt.first_moment.len() as u64);
    w.f64s(&opt.first_moment);
    w.f64s(&opt.second_moment);
    w.buf
}

fn decode_optimizer(bytes: &[u8]) -> Result<OptimizerState> {
    let mut r = Reader::new(bytes);
    let step_count = r.u64()?;
    let learning_rate = r.f64()?;
    let beta1 = r.f64()?;
    let beta2 = r.f64()?;
    let epsilon = r.f64()?;
    let n = r.u64()? as usize;
    let first_moment = r.f64s(n)?;
    let second_moment = r.f64s(n)?;
    if !r.done() {
        return Err(Error::CorruptCheckpoint("optimizer block has trailing bytes".into()));
    }
    Ok(OptimizerState {
        first_moment,
        second_moment,
        step_count,
        learning_rate,
        beta1,
        beta2,
        epsilon,
    })
}

fn encode_rng(rng: &RngState) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(&rng.seed);
    w.u64(rng.stream);
    w.u128(rng.word_pos);
    w.buf
}

fn decode_rng(bytes: &[u8]) -> Result<RngState> {
    let mut r = Reader::new(bytes);
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    if !r.done() {
        return Err(Error::CorruptCheckpoint("rng block has trailing bytes".into()));
    }
    Ok(RngState { seed, stream, word_pos })
}

fn encode_utility(u: &UtilityState) -> Vec<u8> {
    let mut w = Writer::new();
    w.f64(u.decay);
    w.f64(u.replacement_rate);
    w.u64(u.maturity_threshold);
    w.u64(u.utilities.len() as u64);
    for layer in 0..u.utilities.len() {
        w.u64(u.utilities[layer].len() as u64);
        w.f64s(&u.utilities[layer]);
        for &age in &u.ages[layer] {
            w.u64(age);
        }
        w.f64(u.accumulators[layer]);
    }
    w.buf
}

fn decode_utility(bytes: &[u8]) -> Result<UtilityState> {
    let mut r = Reader::new(bytes);
    let decay = r.f64()?;
    let replacement_rate = r.f64()?;
    let maturity_threshold = r.u64()?;
    let layers = r.u64()? as usize;
    let mut utilities = Vec::with_capacity(layers);
    let mut ages = Vec::with_capacity(layers);
    let mut accumulators = Vec::with_capacity(layers);
    for _ in 0..layers {
        let n = r.u64()? as usize;
        utilities.push(r.f64s(n)?);
        let mut layer_ages = Vec::with_capacity(n);
        for _ in 0..n {
            layer_ages.push(r.u64()?);
        }
        ages.push(layer_ages);
        accumulators.push(r.f64()?);
    }
    if !r.done() {
        return Err(Error::CorruptCheckpoint("utility block has trailing bytes".into()));
    }
    Ok(UtilityState {
        utilities,
        ages,
        accumulators,
        decay,
        replacement_rate,
        maturity_threshold,
    })
}

/// Serializes a checkpoint to its exact byte layout.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(ckpt.version);
    let dims = ckpt.arch.dims();
    w.u32(dims.len() as u32);
    for d in dims {
        w.u32(d);
    }
    w.u64(ckpt.params.len() as u64);
    w.f64s(&ckpt.params);
    w.block(ckpt.optimizer.as_ref().map(encode_optimizer).unwrap_or_default());
    w.block(ckpt.rng.as_ref().map(encode_rng).unwrap_or_default());
    w.block(ckpt.utility.as_ref().map(encode_utility).unwrap_or_default());
    w.buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
    }
    let dim_count = r.u32()? as usize;
    if dim_count > 64 {
        return Err(Error::CorruptCheckpoint(format!("implausible dim count {dim_count}")));
    }
    let mut dims = Vec::with_capacity(dim_count);
    for _ in 0..dim_count {
        dims.push(r.u32()?);
    }
    let arch = Architecture::from_dims(&dims)?;
    let param_count = r.u64()? as usize;
    let params = r.f64s(param_count)?;

    let mut blocks = Vec::with_capacity(3);
    for _ in 0..3 {
        let len = r.u64()? as usize;
        blocks.push(r.take(len)?);
    }
    if !r.done() {
        return Err(Error::CorruptCheckpoint("trailing bytes after utility block".into()));
    }
    let optimizer = if blocks[0].is_empty() {
        None
    } else {
        Some(decode_optimizer(blocks[0])?)
    };
    let rng = if blocks[1].is_empty() {
        None
    } else {
        Some(decode_rng(blocks[1])?)
    };
    let utility = if blocks[2].is_empty() {
        None
    } else {
        Some(decode_utility(blocks[2])?)
    };
    Ok(Checkpoint { version, arch, params, optimizer, rng, utility })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes)
}
