//! Central finite-difference checks of the graph's backward rules.
//!
//! The numeric side only ever evaluates forward passes, so it is independent of
//! every backward rule it checks. Sorting makes the loss piecewise smooth: a
//! perturbation that changes any captured permutation straddles a kink, and the
//! coordinate is reported as skipped instead of compared.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    mha_forward, slice_sort_forward, AttentionParams, MhaParams, PermutationRecord,
    SliceSortParams, SortStrategy,
};
use crate::encoder::{
    encoder_block_forward, AttentionKind, EncoderConfig, EncoderParams, GraphModel, LayerParams,
};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Per-op tolerance on [`relative_error`].
pub const OP_TOLERANCE: f64 = 1e-5;
/// Whole-model tolerance on [`relative_error`].
pub const MODEL_TOLERANCE: f64 = 1e-4;
/// Coordinates sampled per whole-model check.
pub const MODEL_COORDINATES: usize = 50;
/// Denominator floor of [`relative_error`].
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Roundoff multiple in [`fd_resolution`].
pub const RESOLUTION_FACTOR: f64 = 10.0;

/// Smallest derivative difference a central difference can resolve: loss roundoff
/// `ε·|L|` divided by the step, times [`RESOLUTION_FACTOR`].
pub fn fd_resolution(plus: f64, minus: f64, step: f64) -> f64 {
    RESOLUTION_FACTOR * f64::EPSILON * plus.abs().max(minus.abs()).max(1.0) / step
}

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coordinates {
    All,
    /// `count` distinct coordinates drawn uniformly over all inputs.
    Sample { count: usize, seed: u64 },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose perturbation changed a permutation.
    pub skipped: usize,
    /// Checked coordinates that agreed within [`fd_resolution`]; they count as error 0.
    pub at_resolution: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.at_resolution += other.at_resolution;
    }
}

/// A loss builder: gets one var per input tensor and returns a scalar.
pub type LossFn<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

fn evaluate(inputs: &[Tensor], build: &LossFn) -> Result<(f64, Vec<PermutationRecord>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let records = g.permutation_records().cloned().collect();
    Ok((g.value(loss).data()[0], records))
}

/// Compare backprop gradients with central differences at `step`.
pub fn check_gradients(
    inputs: &[Tensor],
    build: &LossFn,
    step: f64,
    coords: Coordinates,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let base_records: Vec<PermutationRecord> = g.permutation_records().cloned().collect();

    let mut all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.numel()).map(move |ci| (ti, ci)))
        .collect();
    if let Coordinates::Sample { count, seed } = coords {
        all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        all.truncate(count);
    }

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (ti, ci) in all {
        let orig = work[ti].data()[ci];
        work[ti].data_mut()[ci] = orig + step;
        let (plus, rec_plus) = evaluate(&work, build)?;
        work[ti].data_mut()[ci] = orig - step;
        let (minus, rec_minus) = evaluate(&work, build)?;
        work[ti].data_mut()[ci] = orig;
        if rec_plus != base_records || rec_minus != base_records {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[ti].data()[ci];
        let err = if (a - numeric).abs() <= fd_resolution(plus, minus, step) {
            report.at_resolution += 1;
            0.0
        } else {
            relative_error(a, numeric)
        };
        report.max_rel_err = report.max_rel_err.max(err);
        report.checked += 1;
    }
    Ok(report)
}

/// `sum(out ⊙ weights)`: a scalar whose gradient reaches every output entry.
pub fn weighted_sum(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dim(r: &mut ChaCha8Rng) -> usize {
    r.random_range(2..=5)
}

fn weights_for(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

/// One randomized finite-difference case.
pub struct GradCase {
    pub name: &'static str,
    pub tolerance: f64,
    pub run: fn(u64) -> Result<GradCheckReport>,
}

fn case_matmul(seed: u64) -> Result<GradCheckReport> {
    let r = &mut rng(seed);
    let (n, k, m) = (dim(r), dim(r), dim(r));
    let a = Tensor::randn(&[n, k], 1.0, r);
    let b = Tensor::randn(&[k, m], 1.0, r);
    let w = weights_for(&[n, m], r);
    let build = move |g: &mut Graph, v: &[Var]| {
        let c = g.matmul(v[0], v[1])?;
        weighted_sum(g, c, &w)
    };
    check_gradients(&[a, b], &build, DEFAULT_STEP, Coordinates::All)
}

fn case_matmul_nt(seed: u64) -> Result<GradCheckReport> {
    let r = &mut rng(seed);
    let (n, k, m) = (dim(r), dim(r), dim(r));
    let a = Tensor::randn(&[n, k], 1.0, r);
    let b = Tensor::randn(&[m, k], 1.0, r);
    let w = weights_for(&[n, m], r);
    let build = move |g: &mut Graph, v: &[Var]| {
        let c = g.matmul_nt(v[0], v[1])?;
        weighted_sum(g, c, &w)
    };
    check_gradients(&[a, b], &build, DEFAULT_STEP, Coordinates::All)
}

fn case_elementwise(seed: u64) -> Result<GradCheckReport> {
    let r = &mut rng(seed);
    let (n, m) = (dim(r), dim(r));
    let a = Tensor::randn(&[n, m], 1.0, r);
    let b = Tensor::randn(&[n, m], 1.0, r);
    let bias = Tensor::randn(&[m], 1.0, r);
    let w = weights_for(&[n, m], r);
    let build = move |g: &mut Graph, v: &[Var]| {
        let p = g.mul(v[0], v[1])?;
        let s = g.add(p, v[0])?;
        let s = g.scale(s, 0.7);
        let s = g.add_row(s, v[2])?;
        weighted_sum(g, s, &w)
    };
    check_gradients(&[a, b, bias], &build, DEFAULT_STEP, Coordinates::All)
}

fn case_softmax(seed: u64) -> Result<GradCheckReport> {
    let r = &mut rng(seed);
    let (n, m) = (dim(r), dim(r));
    let x = Tensor::randn(&[n, m], 1.0, r);
    let w = weights_for(&[n, m], r);
    let build = move |g: &mut Graph, v: &[Var]| {
        let y = g.softmax_rows(v[0])?;
        weighted_sum(g, y, &w)
    };
    check_gradients(&[x], &build, DEFAULT_STEP, Coordinates::All)
}

fn case_layer_norm(seed: u64) -> Result<GradCheckReport> {
    let r = &mut rng(seed);
    let (n, m) = (dim(r), dim(r) + 1);
    let x = Tensor::randn(&[n, m], 1.0, r);
    let gamma = Tensor::randn(&[m], 1.0, r);
    let beta = Tensor::randn(&[m], 1.0, r);
    let w = weights_for(&[n, m], r);
    let build = move |g: &mut Graph, v: &[Var]| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(g, y, &w)
    };
    check_gradients(&[x, gamma, beta], &build, DEFAULT_STEP, Coordinates::All)
}

fn case_gelu(seed: u64) -> Result<GradCheckReport> {
    let r = &mut rng(seed);
    let (n, m) = (dim(r), dim(r));
    let x = Tensor::randn(&[n, m], 2.0, r);
    let w = weights_for(&[n, m], r);
    let build = move |g: &mut Graph, v: &[Var]| {
        let y = g.gelu(v[0]);
        weighted_sum(g, y, &w)
    };
    check_gradients(&[x], &build, DEFAULT_STEP, Coordinates::All)
}

fn case_permute_rows(seed: u64) -> Result<GradCheckReport> {
    let r = &mut rng(seed);
    let (n, m) = (dim(r), dim(r));
    let x = Tensor::randn(&[n, m], 1.0, r);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(r);
    let w = weights_for(&[n, m], r);
    let build = move |g: &mut Graph, v: &[Var]| {
        let y = g.permute_rows(v[0], &perm)?;
        weighted_sum(g, y, &w)
    };
    check_gradients(&[x], &build, DEFAULT_STEP, Coordinates::All)
}

fn case_embedding(seed: u64) -> Result<GradCheckReport> {
    let r = &mut rng(seed);
    let (v, d, n) = (dim(r), dim(r), dim(r) + 2);
    let table = Tensor::randn(&[v, d], 1.0, r);
    let ids: Vec<usize> = (0..n).map(|_| r.random_range(0..v)).collect();
    let w = weights_for(&[n, d], r);
    let build = move |g: &mut Graph, vars: &[Var]| {
        let y = g.embedding(vars[0], &ids)?;
        weighted_sum(g, y, &w)
    };
    check_gradients(&[table], &build, DEFAULT_STEP, Coordinates::All)
}

fn case_cross_entropy(seed: u64) -> Result<GradCheckReport> {
    let r = &mut rng(seed);
    let (b, c) = (dim(r), dim(r));
    let logits = Tensor::randn(&[b, c], 2.0, r);
    let targets: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
    let build = move |g: &mut Graph, v: &[Var]| g.cross_entropy(v[0], &targets);
    check_gradients(&[logits], &build, DEFAULT_STEP, Coordinates::All)
}

fn case_reshape(seed: u64) -> Result<GradCheckReport> {
    let r = &mut rng(seed);
    let (n, m) = (dim(r), dim(r) + 1);
    let a = Tensor::randn(&[n, m], 1.0, r);
    let b = Tensor::randn(&[n, 2], 1.0, r);
    let w = weights_for(&[n + 1, 2], r);
    let build = move |g: &mut Graph, v: &[Var]| {
        let left = g.slice_cols(v[0], 1, 2)?;
        let both = g.concat_cols(&[left, v[1]])?;
        let top = g.row(both, n - 1)?;
        let top = g.slice_cols(top, 1, 2)?;
        let tall = g.concat_rows(&[left, top])?;
        weighted_sum(g, tall, &w)
    };
    check_gradients(&[a, b], &build, DEFAULT_STEP, Coordinates::All)
}

fn case_mha(seed: u64) -> Result<GradCheckReport> {
    let r = &mut rng(seed);
    let (n, d) = (dim(r), dim(r));
    let (heads, head_dim) = (r.random_range(1..=2), r.random_range(1..=3));
    let x = Tensor::randn(&[n, d], 1.0, r);
    let params = AttentionParams::Softmax(MhaParams::init(d, heads, head_dim, r));
    let w = weights_for(&[n, heads * head_dim], r);
    let mut inputs = vec![x];
    inputs.extend(params.tensors().into_iter().cloned());
    let build = move |g: &mut Graph, v: &[Var]| {
        let mut it = v[1..].iter().copied();
        let p = params.map(&mut |_| it.next().expect("one var per tensor"));
        let AttentionParams::Softmax(p) = p else { unreachable!() };
        let y = mha_forward(g, v[0], &p)?;
        weighted_sum(g, y, &w)
    };
    check_gradients(&inputs, &build, DEFAULT_STEP, Coordinates::All)
}

fn slice_sort_case(seed: u64, strategy: SortStrategy) -> Result<GradCheckReport> {
    let r = &mut rng(seed);
    let (n, d, md) = (dim(r) + 1, dim(r), dim(r));
    let x = Tensor::randn(&[n, d], 1.0, r);
    let params = SliceSortParams::init(d, md, true, r);
    let w = weights_for(&[n, md], r);
    let mut inputs = vec![x];
    inputs.extend(params.tensors().into_iter().cloned());
    let build = move |g: &mut Graph, v: &[Var]| {
        let mut it = v[1..].iter().copied();
        let p = params.map(&mut |_| it.next().expect("one var per tensor"));
        let (y, _) = slice_sort_forward(g, v[0], &p, strategy)?;
        weighted_sum(g, y, &w)
    };
    check_gradients(&inputs, &build, DEFAULT_STEP, Coordinates::All)
}

fn case_slice_sort_ascending(seed: u64) -> Result<GradCheckReport> {
    slice_sort_case(seed, SortStrategy::Ascending)
}

fn case_slice_sort_interleave(seed: u64) -> Result<GradCheckReport> {
    slice_sort_case(seed, SortStrategy::OrderInterleave { layer: 1, layers: 3 })
}

fn case_slice_sort_max_exchange(seed: u64) -> Result<GradCheckReport> {
    slice_sort_case(seed, SortStrategy::MaxExchange)
}

fn block_case(seed: u64, kind: AttentionKind) -> Result<GradCheckReport> {
    let r = &mut rng(seed);
    let config = EncoderConfig {
        layers: 1,
        d_model: 6,
        heads: 2,
        head_dim: 3,
        ffn_mult: 2,
        vocab: 3,
        seq_len: 4,
        n_classes: 2,
        attention: kind,
        ..EncoderConfig::default()
    };
    let params = EncoderParams::init(&config, r)?;
    let layer: LayerParams<Tensor> = params.layers[0].clone();
    let x = Tensor::randn(&[4, 6], 1.0, r);
    let w = weights_for(&[4, 6], r);
    let mut inputs = vec![x];
    inputs.extend(layer.tensors().into_iter().cloned());
    let build = move |g: &mut Graph, v: &[Var]| {
        let mut it = v[1..].iter().copied();
        let lp = layer.map(&mut |_| it.next().expect("one var per tensor"));
        let out = encoder_block_forward(g, v[0], &lp, SortStrategy::Ascending)?;
        weighted_sum(g, out.output, &w)
    };
    check_gradients(&inputs, &build, DEFAULT_STEP, Coordinates::All)
}

fn case_block_softmax(seed: u64) -> Result<GradCheckReport> {
    block_case(seed, AttentionKind::SoftmaxMha)
}

fn case_block_slice_sort(seed: u64) -> Result<GradCheckReport> {
    block_case(seed, AttentionKind::SliceSort)
}

/// The whole-model configuration used by the full-model check.
pub fn model_check_config(kind: AttentionKind) -> EncoderConfig {
    EncoderConfig {
        layers: 1,
        d_model: 4,
        heads: 2,
        head_dim: 2,
        ffn_mult: 2,
        vocab: 5,
        seq_len: 4,
        n_classes: 3,
        attention: kind,
        ..EncoderConfig::default()
    }
}

/// Cross-entropy of a two-sample batch through the full model; sampled coordinates
/// over every parameter.
pub fn model_case(seed: u64, kind: AttentionKind) -> Result<GradCheckReport> {
    let r = &mut rng(seed);
    let config = model_check_config(kind);
    let params = EncoderParams::init(&config, r)?;
    let samples: Vec<(Vec<usize>, usize)> = (0..2)
        .map(|_| {
            let ids = (0..config.seq_len - 1).map(|_| r.random_range(0..config.vocab)).collect();
            (ids, r.random_range(0..config.n_classes))
        })
        .collect();
    let inputs: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let build = move |g: &mut Graph, v: &[Var]| {
        let mut it = v.iter().copied();
        let vars = params.map(&mut |_| it.next().expect("one var per tensor"));
        let model = GraphModel::from_vars(g, &config, vars)?;
        let mut rows = Vec::new();
        for (ids, _) in &samples {
            rows.push(model.forward(g, ids)?.logits);
        }
        let logits = g.concat_rows(&rows)?;
        let targets: Vec<usize> = samples.iter().map(|s| s.1).collect();
        g.cross_entropy(logits, &targets)
    };
    check_gradients(
        &inputs,
        &build,
        DEFAULT_STEP,
        Coordinates::Sample {
            count: MODEL_COORDINATES,
            seed,
        },
    )
}

fn case_model_softmax(seed: u64) -> Result<GradCheckReport> {
    model_case(seed, AttentionKind::SoftmaxMha)
}

fn case_model_slice_sort(seed: u64) -> Result<GradCheckReport> {
    model_case(seed, AttentionKind::SliceSort)
}

/// Every differentiable op and composite, with its tolerance.
pub fn suite() -> Vec<GradCase> {
    let op = |name, run| GradCase {
        name,
        tolerance: OP_TOLERANCE,
        run,
    };
    vec![
        op("matmul", case_matmul as fn(u64) -> Result<GradCheckReport>),
        op("matmul_nt", case_matmul_nt),
        op("add/mul/scale/add_row", case_elementwise),
        op("softmax_rows", case_softmax),
        op("layer_norm", case_layer_norm),
        op("gelu", case_gelu),
        op("permute_rows", case_permute_rows),
        op("embedding_lookup", case_embedding),
        op("cross_entropy", case_cross_entropy),
        op("slice/concat/row", case_reshape),
        op("mha_forward", case_mha),
        op("slice_sort(ascending)", case_slice_sort_ascending),
        op("slice_sort(interleave)", case_slice_sort_interleave),
        op("slice_sort(max_exchange)", case_slice_sort_max_exchange),
        op("encoder_block(softmax)", case_block_softmax),
        op("encoder_block(slicesort)", case_block_slice_sort),
        GradCase {
            name: "model(softmax)",
            tolerance: MODEL_TOLERANCE,
            run: case_model_softmax,
        },
        GradCase {
            name: "model(slicesort)",
            tolerance: MODEL_TOLERANCE,
            run: case_model_slice_sort,
        },
    ]
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < self.tolerance && self.report.checked > 0
    }
}

/// Run every case over seeds `0..seeds`.
pub fn run_suite(seeds: u64) -> Result<Vec<SuiteResult>> {
    suite()
        .into_iter()
        .map(|case| {
            let mut report = GradCheckReport::default();
            for seed in 0..seeds {
                report.merge(&(case.run)(seed)?);
            }
            Ok(SuiteResult {
                name: case.name,
                tolerance: case.tolerance,
                report,
            })
        })
        .collect()
}
