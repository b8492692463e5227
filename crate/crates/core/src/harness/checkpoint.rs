//! Binary checkpoints, little-endian throughout:
//!
//! ```text
//! magic "MAMLCKPT" | version u32 | element bytes u8 | config digest [32]
//! config TOML (u32 length + UTF-8) | seed u64 | epoch u64 | iteration u64
//! rng: seed [32], stream u64, word position u128
//! params, adam m, adam v (tensor sets) | adam step u64
//! batch-norm statistics | validation history | SHA-256 of all preceding bytes
//! ```
//!
//! A tensor set is a u32 count of `(name, rank u32, dims u64.., data)`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Element, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::meta::{AdamState, MetaState};
use crate::network::{BatchNormState, BnStatsMode, SlotStats};

use super::config::{hex, ExperimentConfig};
use super::eval::EpochSummary;

const MAGIC: &[u8; 8] = b"MAMLCKPT";
const VERSION: u32 = 1;

/// Serializable position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
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
pub struct Checkpoint<T> {
    pub config: ExperimentConfig,
    pub config_digest: [u8; 32],
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed outer iterations.
    pub iteration: usize,
    pub rng: RngState,
    pub state: MetaState<T>,
    pub history: Vec<EpochSummary>,
}

/// Outcome of comparing a checkpoint's config digest with the current one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DigestStatus {
    Match,
    Mismatch { stored: String, current: String },
    NotChecked,
}

/// A checkpoint of either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.bytes(&u32::try_from(v).expect("count fits in u32").to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.bytes(s.as_bytes());
    }
    fn values<T: Element>(&mut self, vals: &[T]) {
        for &v in vals {
            v.write_le(&mut self.0);
        }
    }
    fn tensors<T: Element>(&mut self, set: &ParamSet<Tensor<T>>) {
        self.u32(set.len());
        for (name, t) in set.iter() {
            self.str(name);
            self.u32(t.shape().len());
            for &d in t.shape() {
                self.u64(d as u64);
            }
            self.values(t.data());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err<V>(&self, msg: impl Into<String>) -> Result<V> {
        Err(Error::Checkpoint {
            offset: self.pos,
            msg: msg.into(),
        })
    }
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.err(format!(
                "truncated while reading {what} ({n} bytes needed, {} left)",
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn usize(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| Error::Checkpoint {
            offset: at,
            msg: format!("{what} {v} out of range"),
        })
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        let at = self.pos;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint {
            offset: at,
            msg: format!("{what} is not UTF-8"),
        })
    }
    fn values<T: Element>(&mut self, n: usize, what: &str) -> Result<Vec<T>> {
        let bytes = self.take(n.saturating_mul(T::BYTES), what)?;
        Ok(bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
    }
    fn tensors<T: Element>(&mut self, what: &str) -> Result<ParamSet<Tensor<T>>> {
        let count = self.u32(what)?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name = self.str("tensor name")?;
            let rank = self.u32("tensor rank")?;
            if rank > 8 {
                return self.err(format!("implausible rank {rank} for {name:?}"));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.usize("tensor dimension")?);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let Some(n) = n else {
                return self.err(format!("tensor {name:?} is too large"));
            };
            let data = self.values(n, &name)?;
            let at = self.pos;
            set.insert(name, Tensor::new(shape, data)?)
                .map_err(|e| Error::Checkpoint {
                    offset: at,
                    msg: e.to_string(),
                })?;
        }
        Ok(set)
    }
}

fn stats_mode_code(m: BnStatsMode) -> u8 {
    match m {
        BnStatsMode::BatchStats => 0,
        BnStatsMode::SharedRunning => 1,
        BnStatsMode::PerStepRunning => 2,
    }
}

pub fn encode_checkpoint<T: Element>(ck: &Checkpoint<T>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.bytes(MAGIC);
    w.bytes(&VERSION.to_le_bytes());
    w.u8(T::BYTES as u8);
    w.bytes(&ck.config_digest);
    w.str(&ck.config.to_toml());
    w.u64(ck.seed);
    w.u64(ck.epoch as u64);
    w.u64(ck.iteration as u64);
    w.bytes(&ck.rng.seed);
    w.u64(ck.rng.stream);
    w.bytes(&ck.rng.word_pos.to_le_bytes());
    w.tensors(&ck.state.params);
    w.tensors(&ck.state.adam.m);
    w.tensors(&ck.state.adam.v);
    w.u64(ck.state.adam.step);
    let bn = &ck.state.bn_stats;
    w.u8(stats_mode_code(bn.mode));
    w.f64(bn.eps);
    w.f64(bn.momentum);
    w.u32(bn.layers.len());
    for slots in &bn.layers {
        w.u32(slots.len());
        for s in slots {
            w.u32(s.mean.len());
            w.values(&s.mean);
            w.values(&s.var);
            w.u64(s.count);
        }
    }
    w.u32(ck.history.len());
    for h in &ck.history {
        w.u64(h.epoch as u64);
        w.u64(h.iteration as u64);
        w.f64(h.accuracy);
        w.f64(h.std_error);
        w.f64(h.loss);
    }
    let digest = Sha256::digest(&w.0);
    w.bytes(&digest);
    w.0
}

fn peek_precision(buf: &[u8]) -> Result<u8> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint {
            offset: 0,
            msg: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = r.u32("version")?;
    if version as u32 != VERSION {
        return Err(Error::Checkpoint {
            offset: 8,
            msg: format!("unsupported version {version}"),
        });
    }
    r.u8("element size")
}

pub fn decode_checkpoint<T: Element>(buf: &[u8]) -> Result<Checkpoint<T>> {
    let elem = peek_precision(buf)?;
    if elem as usize != T::BYTES {
        return Err(Error::Checkpoint {
            offset: 12,
            msg: format!(
                "checkpoint holds {elem}-byte elements, {} requested",
                T::NAME
            ),
        });
    }
    let mut r = Reader { buf, pos: 13 };
    let config_digest: [u8; 32] = r.take(32, "config digest")?.try_into().unwrap();
    let cfg_at = r.pos;
    let toml = r.str("config")?;
    let config = ExperimentConfig::from_toml(&toml).map_err(|e| Error::Checkpoint {
        offset: cfg_at,
        msg: format!("embedded config: {e}"),
    })?;
    let seed = r.u64("seed")?;
    let epoch = r.usize("epoch")?;
    let iteration = r.usize("iteration")?;
    let rng = RngState {
        seed: r.take(32, "rng seed")?.try_into().unwrap(),
        stream: r.u64("rng stream")?,
        word_pos: u128::from_le_bytes(r.take(16, "rng position")?.try_into().unwrap()),
    };
    let params = r.tensors::<T>("parameters")?;
    let m = r.tensors::<T>("adam first moments")?;
    let v = r.tensors::<T>("adam second moments")?;
    let step = r.u64("adam step")?;
    if !params.is_compatible(&m) || !params.is_compatible(&v) {
        return r.err("adam moments do not match the parameter set");
    }
    let mode = match r.u8("statistics mode")? {
        0 => BnStatsMode::BatchStats,
        1 => BnStatsMode::SharedRunning,
        2 => BnStatsMode::PerStepRunning,
        other => return r.err(format!("unknown statistics mode {other}")),
    };
    let eps = r.f64("bn eps")?;
    let momentum = r.f64("bn momentum")?;
    let n_layers = r.u32("bn layers")?;
    let mut layers = Vec::new();
    for _ in 0..n_layers {
        let n_slots = r.u32("bn slots")?;
        let mut slots = Vec::new();
        for _ in 0..n_slots {
            let c = r.u32("bn channels")?;
            let mean = r.values(c, "running mean")?;
            let var = r.values(c, "running variance")?;
            let count = r.u64("update count")?;
            slots.push(SlotStats { mean, var, count });
        }
        layers.push(slots);
    }
    let n_hist = r.u32("history length")?;
    let mut history = Vec::new();
    for _ in 0..n_hist {
        history.push(EpochSummary {
            epoch: r.usize("history epoch")?,
            iteration: r.usize("history iteration")?,
            accuracy: r.f64("history accuracy")?,
            std_error: r.f64("history std error")?,
            loss: r.f64("history loss")?,
        });
    }
    let body_end = r.pos;
    let stored = r.take(32, "trailing digest")?;
    if stored != Sha256::digest(&buf[..body_end]).as_slice() {
        return Err(Error::Checkpoint {
            offset: body_end,
            msg: "content digest mismatch (corrupt file)".into(),
        });
    }
    if r.pos != buf.len() {
        return r.err(format!("{} unexpected trailing bytes", buf.len() - r.pos));
    }
    Ok(Checkpoint {
        config,
        config_digest,
        seed,
        epoch,
        iteration,
        rng,
        state: MetaState {
            params,
            bn_stats: BatchNormState {
                mode,
                eps,
                momentum,
                layers,
            },
            adam: AdamState { m, v, step },
        },
        history,
    })
}

/// Writes atomically (temporary file, then rename).
pub fn save_checkpoint<T: Element>(path: &Path, ck: &Checkpoint<T>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, encode_checkpoint(ck))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint and, given the current config, compares digests.
pub fn load_checkpoint<T: Element>(
    path: &Path,
    current: Option<&ExperimentConfig>,
) -> Result<(Checkpoint<T>, DigestStatus)> {
    let buf = std::fs::read(path)?;
    let ck = decode_checkpoint::<T>(&buf)?;
    let status = digest_status(&ck.config_digest, current);
    Ok((ck, status))
}

pub fn load_any_checkpoint(path: &Path) -> Result<AnyCheckpoint> {
    let buf = std::fs::read(path)?;
    match peek_precision(&buf)? {
        4 => Ok(AnyCheckpoint::F32(decode_checkpoint(&buf)?)),
        8 => Ok(AnyCheckpoint::F64(decode_checkpoint(&buf)?)),
        other => Err(Error::Checkpoint {
            offset: 12,
            msg: format!("unsupported element size {other}"),
        }),
    }
}

pub fn digest_status(stored: &[u8; 32], current: Option<&ExperimentConfig>) -> DigestStatus {
    match current {
        None => DigestStatus::NotChecked,
        Some(c) => {
            let now = c.digest();
            if &now == stored {
                DigestStatus::Match
            } else {
                DigestStatus::Mismatch {
                    stored: hex(stored),
                    current: hex(&now),
                }
            }
        }
    }
}
