//! Deterministic synthetic tasks, the IDX image loader, and batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Seeded, splittable generator. ChaCha is counter based, so `split(stream)` gives
/// an independent stream without advancing the parent.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn split(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng {
            seed: self.seed,
            inner,
        }
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSequence {
    pub tokens: Vec<usize>,
    pub label: usize,
}

/// Sequences whose label is the most frequent token modulo `n_classes`.
///
/// The class is drawn uniformly, a token congruent to it is planted in a quarter of
/// the positions and the rest are uniform. Samples whose strict majority is not the
/// planted token are regenerated.
pub fn gen_multiset_majority(
    seed: u64,
    n_samples: usize,
    seq_len: usize,
    vocab: usize,
    n_classes: usize,
) -> Result<Vec<LabeledSequence>> {
    if n_classes == 0 || n_classes > vocab {
        return Err(Error::Contract(format!(
            "multiset-majority needs 1 <= n_classes <= vocab (got {n_classes}, {vocab})"
        )));
    }
    if seq_len == 0 || (vocab > 1 && seq_len < 2) {
        return Err(Error::Contract(format!(
            "cannot plant a strict majority in {seq_len} tokens"
        )));
    }
    let mut rng = Rng::new(seed);
    let planted = (seq_len / 4).max(1);
    let mut counts = vec![0usize; vocab];
    let mut out = Vec::with_capacity(n_samples);
    while out.len() < n_samples {
        let class = rng.random_range(0..n_classes);
        let choices = (class..vocab).step_by(n_classes).count();
        let token = class + n_classes * rng.random_range(0..choices);
        let mut tokens = vec![token; planted];
        tokens.extend((planted..seq_len).map(|_| rng.random_range(0..vocab)));
        tokens.shuffle(&mut rng);

        counts.iter_mut().for_each(|c| *c = 0);
        for &t in &tokens {
            counts[t] += 1;
        }
        let top = counts[token];
        if counts.iter().enumerate().any(|(t, &c)| t != token && c >= top) {
            continue;
        }
        out.push(LabeledSequence {
            tokens,
            label: token % n_classes,
        });
    }
    Ok(out)
}

/// Token ids of the ListOps-lite alphabet. Digits `0..=9` are their own ids.
pub mod listops {
    pub const MAX: usize = 10;
    pub const MIN: usize = 11;
    pub const MED: usize = 12;
    pub const OPEN: usize = 13;
    pub const CLOSE: usize = 14;
    pub const PAD: usize = 15;
    pub const VOCAB: usize = 16;
    pub const CLASSES: usize = 10;

    pub fn name(token: usize) -> String {
        match token {
            0..=9 => token.to_string(),
            MAX => "MAX".into(),
            MIN => "MIN".into(),
            MED => "MED".into(),
            OPEN => "[".into(),
            CLOSE => "]".into(),
            PAD => "_".into(),
            _ => "?".into(),
        }
    }
}

#[derive(Debug)]
enum Expr {
    Digit(usize),
    Apply(usize, Vec<Expr>),
}

impl Expr {
    fn eval(&self) -> usize {
        match self {
            Expr::Digit(d) => *d,
            Expr::Apply(op, args) => {
                let mut vals: Vec<usize> = args.iter().map(Expr::eval).collect();
                match *op {
                    listops::MAX => vals.into_iter().max().unwrap_or(0),
                    listops::MIN => vals.into_iter().min().unwrap_or(0),
                    _ => {
                        vals.sort_unstable();
                        vals[vals.len() / 2]
                    }
                }
            }
        }
    }

    fn serialize(&self, out: &mut Vec<usize>) {
        match self {
            Expr::Digit(d) => out.push(*d),
            Expr::Apply(op, args) => {
                out.push(listops::OPEN);
                out.push(*op);
                for a in args {
                    a.serialize(out);
                }
                out.push(listops::CLOSE);
            }
        }
    }
}

fn random_expr(rng: &mut Rng, depth: usize) -> Expr {
    if depth == 0 || rng.random_bool(0.25) {
        return Expr::Digit(rng.random_range(0..10));
    }
    let op = [listops::MAX, listops::MIN, listops::MED][rng.random_range(0..3)];
    let arity = rng.random_range(2..=4);
    Expr::Apply(op, (0..arity).map(|_| random_expr(rng, depth - 1)).collect())
}

/// Nested prefix expressions over `MAX`/`MIN`/`MED` with digit leaves, labelled by
/// their value. `MED` takes the upper median. Every sequence is front-padded with
/// [`listops::PAD`] to exactly `max_len` tokens.
pub fn gen_listops_lite(
    seed: u64,
    n_samples: usize,
    max_depth: usize,
    max_len: usize,
) -> Result<Vec<LabeledSequence>> {
    if max_depth > 3 || max_len > 64 || max_len == 0 {
        return Err(Error::Contract(format!(
            "ListOps-lite is capped at depth 3 and length 64 (got {max_depth}, {max_len})"
        )));
    }
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(n_samples);
    let mut body = Vec::with_capacity(max_len);
    while out.len() < n_samples {
        let expr = random_expr(&mut rng, max_depth);
        body.clear();
        expr.serialize(&mut body);
        if body.len() > max_len {
            continue;
        }
        let mut tokens = vec![listops::PAD; max_len - body.len()];
        tokens.extend_from_slice(&body);
        out.push(LabeledSequence {
            tokens,
            label: expr.eval(),
        });
    }
    Ok(out)
}

pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("truncated {what} header")))
}

/// Parse an IDX label vector (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, "label")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "expected label magic 0x{IDX_LABELS_MAGIC:08x}, found 0x{magic:08x}"
        )));
    }
    let count = read_u32(bytes, 4, "label")? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::Format(format!(
            "label payload holds {} bytes, header promises {count}",
            payload.len()
        )));
    }
    Ok(payload[..count].to_vec())
}

/// Parse an IDX `u8` image tensor (magic `0x00000803`) into one row-major pixel
/// sequence per image.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Vec<u8>>> {
    let magic = read_u32(bytes, 0, "image")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "expected image magic 0x{IDX_IMAGES_MAGIC:08x}, found 0x{magic:08x}"
        )));
    }
    let count = read_u32(bytes, 4, "image")? as usize;
    let rows = read_u32(bytes, 8, "image")? as usize;
    let cols = read_u32(bytes, 12, "image")? as usize;
    let pixels = rows * cols;
    let payload = &bytes[16..];
    if payload.len() < count * pixels {
        return Err(Error::Format(format!(
            "image payload holds {} bytes, header promises {count}×{rows}×{cols}",
            payload.len()
        )));
    }
    Ok(payload[..count * pixels]
        .chunks(pixels.max(1))
        .take(count)
        .map(<[u8]>::to_vec)
        .collect())
}

/// Load paired IDX image/label files. Pixels become tokens `0..256` directly.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    limit: Option<usize>,
) -> Result<Vec<LabeledSequence>> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let images = parse_idx_images(&images)?;
    let labels = parse_idx_labels(&labels)?;
    if images.len() != labels.len() {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let take = limit.unwrap_or(images.len()).min(images.len());
    Ok(images
        .into_iter()
        .zip(labels)
        .take(take)
        .map(|(pixels, label)| LabeledSequence {
            tokens: pixels.into_iter().map(usize::from).collect(),
            label: label as usize,
        })
        .collect())
}

/// Seeded per-epoch shuffling into fixed-size batches; the last batch may be short.
#[derive(Debug)]
pub struct BatchIterator<'a> {
    data: &'a [LabeledSequence],
    batch_size: usize,
    rng: Rng,
}

impl<'a> BatchIterator<'a> {
    pub fn new(data: &'a [LabeledSequence], batch_size: usize, seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Contract("batching an empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(Error::Contract("batch size must be at least 1".into()));
        }
        Ok(BatchIterator {
            data,
            batch_size,
            rng: Rng::new(seed),
        })
    }

    /// Batches of epoch `epoch`. Each epoch uses its own stream, so the order
    /// depends only on `(seed, epoch)`.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<&'a LabeledSequence>> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut self.rng.split(epoch as u64));
        order
            .chunks(self.batch_size)
            .map(|chunk| chunk.iter().map(|&i| &self.data[i]).collect())
            .collect()
    }
}
