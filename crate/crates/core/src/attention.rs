//! Softmax multi-head attention and the slicing-sorting operation.
//!
//! Slicing-sorting projects the sequence with a single value map `V = X·W_V`
//! (`MD` columns) and reorders every column independently. The reordering of
//! column `i` is a permutation matrix `P_i` applied to that column; it is kept
//! only as an index list ([`PermutationRecord`]), never as an `N×N` matrix, on
//! both the forward and the backward path. [`extract_permutation_matrix`] is the
//! analysis-only way to look at `P_i` densely.

use std::cmp::Ordering;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{check_bijection, Graph, Var};
use crate::tensor::Tensor;

/// How each column of `V` is reordered.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SortStrategy {
    Ascending,
    /// Per-channel ascending/descending schedule for layer `layer` (1-based) of `layers`.
    OrderInterleave { layer: usize, layers: usize },
    MaxExchange,
}

impl SortStrategy {
    pub fn validate(&self) -> Result<()> {
        if let SortStrategy::OrderInterleave { layer, layers } = *self {
            if layer == 0 || layer > layers {
                return Err(Error::Contract(format!(
                    "interleave layer {layer} outside 1..={layers}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SortDirection {
    Ascending,
    Descending,
}

/// Direction for channel `channel` (1-based, `1..=channels`) in layer `layer`
/// (1-based, `1..=layers`): ascending iff `sin(2^(layers-layer) · π · channel / channels) >= 0`.
///
/// The sign is decided in exact integer arithmetic. With `r = 2^(layers-layer) · channel
/// mod 2·channels`, the angle is `π·r/channels`, so the sine is zero at `r ∈ {0, channels}`,
/// positive for `0 < r < channels` and negative above. Evaluating `sin` in floating point
/// would give `sin(2π) ≈ -2.4e-16` and flip the zero case.
pub fn sort_direction(
    channel: usize,
    layer: usize,
    layers: usize,
    channels: usize,
) -> Result<SortDirection> {
    if channels == 0 || channel == 0 || channel > channels {
        return Err(Error::Contract(format!(
            "channel {channel} outside 1..={channels}"
        )));
    }
    if layer == 0 || layer > layers {
        return Err(Error::Contract(format!("layer {layer} outside 1..={layers}")));
    }
    let modulus = 2 * channels as u128;
    let mut pow = 1u128 % modulus;
    let mut base = 2u128 % modulus;
    let mut exp = (layers - layer) as u64;
    while exp > 0 {
        if exp & 1 == 1 {
            pow = pow * base % modulus;
        }
        base = base * base % modulus;
        exp >>= 1;
    }
    let r = pow * channel as u128 % modulus;
    if r <= channels as u128 {
        Ok(SortDirection::Ascending)
    } else {
        Ok(SortDirection::Descending)
    }
}

/// Swap the maximum (lowest index among ties) into position 0.
/// Returns the reordered column and the gather permutation (a transposition or identity).
pub fn max_exchange(column: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..column.len()).collect();
    let mut best = 0;
    for (i, &v) in column.iter().enumerate().skip(1) {
        if v > column[best] {
            best = i;
        }
    }
    if !column.is_empty() {
        perm.swap(0, best);
    }
    let out = perm.iter().map(|&p| column[p]).collect();
    (out, perm)
}

/// Stable argsort of one column in the given direction.
fn argsort(column: &[f64], direction: SortDirection) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..column.len()).collect();
    match direction {
        SortDirection::Ascending => idx.sort_by(|&a, &b| {
            column[a].partial_cmp(&column[b]).unwrap_or(Ordering::Equal)
        }),
        SortDirection::Descending => idx.sort_by(|&a, &b| {
            (-column[a]).partial_cmp(&-column[b]).unwrap_or(Ordering::Equal)
        }),
    }
    idx
}

/// Per-channel gather permutations of one slice-sort pass.
///
/// Sorted entry `[r, c]` is `V[perms[c][r], c]`, i.e. `P_c[r][perms[c][r]] = 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationRecord {
    perms: Vec<Vec<usize>>,
    len: usize,
}

impl PermutationRecord {
    pub fn new(len: usize, perms: Vec<Vec<usize>>) -> Result<Self> {
        for p in &perms {
            if p.len() != len {
                return Err(Error::Contract(format!(
                    "permutation of length {} in a record of length {len}",
                    p.len()
                )));
            }
            check_bijection(p).map_err(|e| Error::Contract(e.to_string()))?;
        }
        Ok(PermutationRecord { perms, len })
    }

    /// Reorder every column of `values` according to `strategy`.
    pub fn from_values(values: &Tensor, strategy: SortStrategy) -> Result<Self> {
        let (n, md) = values.require_matrix("slice_sort")?;
        strategy.validate()?;
        if !values.all_finite() {
            return Err(Error::Numeric("slice-sort received a non-finite projection".into()));
        }
        let mut perms = Vec::with_capacity(md);
        let mut column = vec![0.0; n];
        for c in 0..md {
            for (r, slot) in column.iter_mut().enumerate() {
                *slot = values.data()[r * md + c];
            }
            let perm = match strategy {
                SortStrategy::Ascending => argsort(&column, SortDirection::Ascending),
                SortStrategy::OrderInterleave { layer, layers } => {
                    argsort(&column, sort_direction(c + 1, layer, layers, md)?)
                }
                SortStrategy::MaxExchange => max_exchange(&column).1,
            };
            perms.push(perm);
        }
        Ok(PermutationRecord { perms, len: n })
    }

    /// Sequence length `N`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of channels `MD`.
    pub fn channels(&self) -> usize {
        self.perms.len()
    }

    pub fn perm(&self, channel: usize) -> &[usize] {
        &self.perms[channel]
    }

    pub fn perms(&self) -> &[Vec<usize>] {
        &self.perms
    }

    /// Gather `values` column by column.
    pub fn apply(&self, values: &Tensor) -> Result<Tensor> {
        let (n, md) = values.require_matrix("permute_columns")?;
        if n != self.len || md != self.channels() {
            return Err(Error::dim(
                "permute_columns",
                values.shape(),
                &[self.len, self.channels()],
            ));
        }
        let src = values.data();
        let mut out = vec![0.0; n * md];
        for (c, perm) in self.perms.iter().enumerate() {
            for (r, &p) in perm.iter().enumerate() {
                out[r * md + c] = src[p * md + c];
            }
        }
        Tensor::new(vec![n, md], out)
    }
}

/// Scatter `upstream` back through each channel's permutation: `Pᵢᵀ` applied per column.
pub fn slice_sort_backward(upstream: &Tensor, record: &PermutationRecord) -> Result<Tensor> {
    let (n, md) = upstream.require_matrix("slice_sort_backward")?;
    if n != record.len() || md != record.channels() {
        return Err(Error::dim(
            "slice_sort_backward",
            upstream.shape(),
            &[record.len(), record.channels()],
        ));
    }
    let up = upstream.data();
    let mut out = vec![0.0; n * md];
    for (c, perm) in record.perms().iter().enumerate() {
        let mut hit = vec![false; n];
        for (r, &p) in perm.iter().enumerate() {
            if p >= n || std::mem::replace(&mut hit[p], true) {
                return Err(Error::Contract(format!(
                    "channel {c} permutation is not a bijection"
                )));
            }
            out[p * md + c] = up[r * md + c];
        }
    }
    Tensor::new(vec![n, md], out)
}

/// Dense `N×N` view of channel `channel`'s implicit attention map. Analysis only.
pub fn extract_permutation_matrix(record: &PermutationRecord, channel: usize) -> Result<Tensor> {
    if channel >= record.channels() {
        return Err(Error::Index(format!(
            "channel {channel} of a record with {} channels",
            record.channels()
        )));
    }
    let n = record.len();
    let mut p = Tensor::zeros(&[n, n]);
    for (r, &src) in record.perm(channel).iter().enumerate() {
        p.set(r, src, 1.0);
    }
    Ok(p)
}

/// One softmax head's projections, each `d×D`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MhaParams<T> {
    pub heads: Vec<HeadParams<T>>,
    /// `MD×MD` output projection.
    pub w_o: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceSortParams<T> {
    /// `d×MD` value map.
    pub w_v: T,
    /// Optional `MD×MD` post-sort mixing.
    pub w_o: Option<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttentionParams<T> {
    Softmax(MhaParams<T>),
    SliceSort(SliceSortParams<T>),
}

impl MhaParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(d: usize, heads: usize, head_dim: usize, rng: &mut R) -> Self {
        let std_in = 1.0 / (d as f64).sqrt();
        let md = heads * head_dim;
        let heads = (0..heads)
            .map(|_| HeadParams {
                w_q: Tensor::randn(&[d, head_dim], std_in, rng),
                w_k: Tensor::randn(&[d, head_dim], std_in, rng),
                w_v: Tensor::randn(&[d, head_dim], std_in, rng),
            })
            .collect();
        MhaParams {
            heads,
            w_o: Tensor::randn(&[md, md], 1.0 / (md as f64).sqrt(), rng),
        }
    }
}

impl SliceSortParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(
        d: usize,
        channels: usize,
        output_projection: bool,
        rng: &mut R,
    ) -> Self {
        SliceSortParams {
            w_v: Tensor::randn(&[d, channels], 1.0 / (d as f64).sqrt(), rng),
            w_o: output_projection
                .then(|| Tensor::randn(&[channels, channels], 1.0 / (channels as f64).sqrt(), rng)),
        }
    }
}

impl<T> MhaParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> MhaParams<U> {
        MhaParams {
            heads: self
                .heads
                .iter()
                .map(|h| HeadParams {
                    w_q: f(&h.w_q),
                    w_k: f(&h.w_k),
                    w_v: f(&h.w_v),
                })
                .collect(),
            w_o: f(&self.w_o),
        }
    }

    pub fn tensors(&self) -> Vec<&T> {
        let mut out: Vec<&T> = self
            .heads
            .iter()
            .flat_map(|h| [&h.w_q, &h.w_k, &h.w_v])
            .collect();
        out.push(&self.w_o);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = self
            .heads
            .iter_mut()
            .flat_map(|h| [&mut h.w_q, &mut h.w_k, &mut h.w_v])
            .collect();
        out.push(&mut self.w_o);
        out
    }
}

impl<T> SliceSortParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> SliceSortParams<U> {
        SliceSortParams {
            w_v: f(&self.w_v),
            w_o: self.w_o.as_ref().map(f),
        }
    }

    pub fn tensors(&self) -> Vec<&T> {
        std::iter::once(&self.w_v).chain(self.w_o.as_ref()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        std::iter::once(&mut self.w_v).chain(self.w_o.as_mut()).collect()
    }
}

impl<T> AttentionParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttentionParams<U> {
        match self {
            AttentionParams::Softmax(p) => AttentionParams::Softmax(p.map(f)),
            AttentionParams::SliceSort(p) => AttentionParams::SliceSort(p.map(f)),
        }
    }

    pub fn tensors(&self) -> Vec<&T> {
        match self {
            AttentionParams::Softmax(p) => p.tensors(),
            AttentionParams::SliceSort(p) => p.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        match self {
            AttentionParams::Softmax(p) => p.tensors_mut(),
            AttentionParams::SliceSort(p) => p.tensors_mut(),
        }
    }
}

impl<T: AsRef<Tensor>> AttentionParams<T> {
    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.as_ref().numel()).sum()
    }
}

impl AsRef<Tensor> for Tensor {
    fn as_ref(&self) -> &Tensor {
        self
    }
}

/// Register every tensor as a trainable leaf of `g`.
pub fn register_attention(g: &mut Graph, params: &AttentionParams<Tensor>) -> AttentionParams<Var> {
    params.map(&mut |t| g.leaf(t.clone()))
}

/// Softmax attention: per head `softmax(Q·Kᵀ/√D)·V`, heads concatenated column-wise, then `·W_O`.
pub fn mha_forward(g: &mut Graph, x: Var, params: &MhaParams<Var>) -> Result<Var> {
    let (n, _) = g.value(x).require_matrix("mha_forward")?;
    if n == 0 {
        return Err(Error::Contract("attention over an empty sequence".into()));
    }
    let Some(first) = params.heads.first() else {
        return Err(Error::Contract("multi-head attention with zero heads".into()));
    };
    let head_dim = g.value(first.w_q).cols();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outputs = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let q = g.matmul(x, head.w_q)?;
        let k = g.matmul(x, head.w_k)?;
        let v = g.matmul(x, head.w_v)?;
        let scores = g.matmul_nt_scaled(q, k, scale)?;
        let p = g.softmax_rows(scores)?;
        outputs.push(g.matmul(p, v)?);
    }
    let concat = if outputs.len() == 1 {
        outputs[0]
    } else {
        g.concat_cols(&outputs)?
    };
    g.matmul(concat, params.w_o)
}

/// Slicing-sorting: `V = X·W_V`, every column reordered per `strategy`, then the
/// optional `W_O`. The returned record holds the pre-projection permutations.
pub fn slice_sort_forward(
    g: &mut Graph,
    x: Var,
    params: &SliceSortParams<Var>,
    strategy: SortStrategy,
) -> Result<(Var, PermutationRecord)> {
    let (n, _) = g.value(x).require_matrix("slice_sort_forward")?;
    if n == 0 {
        return Err(Error::Contract("attention over an empty sequence".into()));
    }
    let v = g.matmul(x, params.w_v)?;
    let record = PermutationRecord::from_values(g.value(v), strategy)?;
    let sorted = g.permute_columns(v, record.clone())?;
    let out = match params.w_o {
        Some(w_o) => g.matmul(sorted, w_o)?,
        None => sorted,
    };
    Ok((out, record))
}

/// Dispatch on the attention kind. Returns the record for slice-sort layers.
pub fn attention_forward(
    g: &mut Graph,
    x: Var,
    params: &AttentionParams<Var>,
    strategy: SortStrategy,
) -> Result<(Var, Option<PermutationRecord>)> {
    match params {
        AttentionParams::Softmax(p) => Ok((mha_forward(g, x, p)?, None)),
        AttentionParams::SliceSort(p) => {
            let (out, rec) = slice_sort_forward(g, x, p, strategy)?;
            Ok((out, Some(rec)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bare(w_v: Tensor) -> SliceSortParams<Tensor> {
        SliceSortParams { w_v, w_o: None }
    }

    fn run_slice_sort(
        x: &Tensor,
        params: &SliceSortParams<Tensor>,
        strategy: SortStrategy,
    ) -> (Tensor, PermutationRecord) {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pv = params.map(&mut |t| g.constant(t.clone()));
        let (out, rec) = slice_sort_forward(&mut g, xv, &pv, strategy).unwrap();
        (g.value(out).clone(), rec)
    }

    #[test]
    fn identity_input_sorts_to_step_pattern() {
        let (out, _) = run_slice_sort(
            &Tensor::identity(2),
            &bare(Tensor::identity(2)),
            SortStrategy::Ascending,
        );
        assert_eq!(out, Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]));
    }

    #[test]
    fn already_sorted_gives_identity_permutations() {
        let x = Tensor::from_rows(&[vec![-1.0, 0.0], vec![0.5, 2.0], vec![3.0, 2.5]]);
        let (out, rec) = run_slice_sort(&x, &bare(Tensor::identity(2)), SortStrategy::Ascending);
        assert_eq!(out, x);
        for c in 0..2 {
            assert_eq!(rec.perm(c), &[0, 1, 2]);
        }
    }

    #[test]
    fn stable_on_ties() {
        let x = Tensor::from_rows(&[vec![1.0], vec![0.0], vec![1.0], vec![0.0]]);
        let (_, rec) = run_slice_sort(&x, &bare(Tensor::identity(1)), SortStrategy::Ascending);
        assert_eq!(rec.perm(0), &[1, 3, 0, 2]);
        let desc = SortStrategy::OrderInterleave { layer: 1, layers: 2 };
        // MD = 1: psi = sin(2π) = 0 -> ascending
        let (_, rec) = run_slice_sort(&x, &bare(Tensor::identity(1)), desc);
        assert_eq!(rec.perm(0), &[1, 3, 0, 2]);
    }

    #[test]
    fn descending_keeps_tie_order() {
        let col = [1.0, 0.0, 1.0, 0.0];
        assert_eq!(argsort(&col, SortDirection::Descending), vec![0, 2, 1, 3]);
    }

    #[test]
    fn interleave_direction_examples() {
        for i in 1..=8 {
            assert_eq!(sort_direction(i, 2, 2, 8).unwrap(), SortDirection::Ascending);
        }
        assert_eq!(sort_direction(5, 1, 2, 8).unwrap(), SortDirection::Descending);
        // 2^(3-1) · π · 2 / 8 = π exactly
        assert_eq!(sort_direction(2, 1, 3, 8).unwrap(), SortDirection::Ascending);
        // 2^(3-1) · π · 4 / 8 = 2π exactly; float sin is slightly negative here
        assert!((4.0 * std::f64::consts::PI * 4.0 / 8.0).sin() < 0.0);
        assert_eq!(sort_direction(4, 1, 3, 8).unwrap(), SortDirection::Ascending);
        assert!(sort_direction(0, 1, 2, 8).is_err());
        assert!(sort_direction(9, 1, 2, 8).is_err());
        assert!(sort_direction(1, 3, 2, 8).is_err());
        assert!(sort_direction(1, 0, 2, 8).is_err());
    }

    #[test]
    fn max_exchange_examples() {
        assert_eq!(max_exchange(&[3.0, 7.0, 2.0]), (vec![7.0, 3.0, 2.0], vec![1, 0, 2]));
        assert_eq!(max_exchange(&[5.0, 1.0, 2.0]), (vec![5.0, 1.0, 2.0], vec![0, 1, 2]));
        assert_eq!(max_exchange(&[4.0, 1.0, 4.0]), (vec![4.0, 1.0, 4.0], vec![0, 1, 2]));
        assert_eq!(max_exchange(&[1.0, 4.0, 4.0]).1, vec![1, 0, 2]);
    }

    #[test]
    fn backward_identity_and_swap_involution() {
        let up = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let ident = PermutationRecord::new(2, vec![vec![0, 1], vec![0, 1]]).unwrap();
        assert_eq!(slice_sort_backward(&up, &ident).unwrap(), up);

        let swap = PermutationRecord::new(2, vec![vec![1, 0], vec![1, 0]]).unwrap();
        let once = slice_sort_backward(&up, &swap).unwrap();
        assert_ne!(once, up);
        assert_eq!(slice_sort_backward(&once, &swap).unwrap(), up);
    }

    #[test]
    fn record_rejects_non_bijection() {
        assert!(matches!(
            PermutationRecord::new(3, vec![vec![0, 0, 2]]),
            Err(Error::Contract(_))
        ));
        let bad = PermutationRecord {
            perms: vec![vec![1, 1]],
            len: 2,
        };
        let up = Tensor::zeros(&[2, 1]);
        assert!(matches!(slice_sort_backward(&up, &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn extract_examples() {
        let rec = PermutationRecord::new(2, vec![vec![0, 1], vec![1, 0]]).unwrap();
        assert_eq!(extract_permutation_matrix(&rec, 0).unwrap(), Tensor::identity(2));
        assert_eq!(
            extract_permutation_matrix(&rec, 1).unwrap(),
            Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]])
        );
        assert!(matches!(extract_permutation_matrix(&rec, 2), Err(Error::Index(_))));
    }

    #[test]
    fn zero_query_key_gives_column_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let mut params = MhaParams::init(3, 1, 2, &mut rng);
        params.heads[0].w_q = Tensor::zeros(&[3, 2]);
        params.heads[0].w_k = Tensor::zeros(&[3, 2]);
        params.w_o = Tensor::identity(2);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pv = params.map(&mut |t| g.constant(t.clone()));
        let out = mha_forward(&mut g, xv, &pv).unwrap();
        let v = x.matmul(&params.heads[0].w_v).unwrap();
        for c in 0..2 {
            let mean = v.column(c).iter().sum::<f64>() / 5.0;
            for r in 0..5 {
                assert!((g.value(out).get(r, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_row_passes_values_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[1, 3], 1.0, &mut rng);
        let mut params = MhaParams::init(3, 2, 2, &mut rng);
        params.w_o = Tensor::identity(4);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pv = params.map(&mut |t| g.constant(t.clone()));
        let out = mha_forward(&mut g, xv, &pv).unwrap();
        let expect: Vec<f64> = params
            .heads
            .iter()
            .flat_map(|h| x.matmul(&h.w_v).unwrap().into_data())
            .collect();
        assert_eq!(g.value(out).data(), expect.as_slice());
    }

    #[test]
    fn slice_sort_has_fewer_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mha = AttentionParams::Softmax(MhaParams::init(8, 2, 4, &mut rng));
        let ss = AttentionParams::SliceSort(SliceSortParams::init(8, 8, true, &mut rng));
        assert_eq!(mha.param_count() - ss.param_count(), 2 * 2 * 8 * 4);
    }
}
