//! Diagnostics: softmax over-smoothing, attention-map structure, singular spectra,
//! and runtime/memory scaling of the two attention mechanisms.

use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};

use crate::alloc_probe;
use crate::attention::{
    attention_forward, AttentionParams, MhaParams, SliceSortParams, SortStrategy,
};
use crate::data::{LabeledSequence, Rng};
use crate::encoder::{AttentionKind, EncoderConfig, EncoderParams, GraphModel};
use crate::error::{Error, Result};
use crate::gradcheck::weighted_sum;
use crate::graph::Graph;
use crate::tensor::Tensor;

/// Sweeps without a rotation above tolerance before giving up.
pub const JACOBI_MAX_SWEEPS: usize = 100;
pub const JACOBI_TOLERANCE: f64 = 1e-12;

impl AttentionKind {
    /// Tag used in CSV rows and file names.
    pub fn tag(self) -> &'static str {
        match self {
            AttentionKind::SoftmaxMha => "softmax",
            AttentionKind::SliceSort => "slicesort",
        }
    }
}

/// Sample standard deviation (divisor `n - 1`).
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    // Shifted by the first entry: constant input gives exactly zero.
    let shift = values[0];
    let (s1, s2) = values.iter().fold((0.0, 0.0), |(s1, s2), v| {
        let d = v - shift;
        (s1 + d, s2 + d * d)
    });
    ((s2 - s1 * s1 / n as f64).max(0.0) / (n - 1) as f64).sqrt()
}

/// Numerically stable softmax of one vector.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut y: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = y.iter().sum();
    y.iter_mut().for_each(|v| *v /= z);
    y
}

/// Mean sample std of `softmax(x)` for standard normal `x`, per length `N`.
pub fn softmax_std_curve(n_list: &[usize], trials: usize, seed: u64) -> Result<Vec<(usize, f64)>> {
    if trials == 0 {
        return Err(Error::Contract("softmax_std_curve needs at least one trial".into()));
    }
    let root = Rng::new(seed);
    let mut out = Vec::with_capacity(n_list.len());
    let mut x = Vec::new();
    for (i, &n) in n_list.iter().enumerate() {
        if n < 2 {
            return Err(Error::Contract(format!("sample std needs N >= 2, got {n}")));
        }
        let mut rng = root.split(i as u64);
        let mut total = 0.0;
        for _ in 0..trials {
            x.clear();
            x.extend((0..n).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
            total += sample_std(&softmax(&x));
        }
        out.push((n, total / trials as f64));
    }
    Ok(out)
}

/// Singular values, nonincreasing, via one-sided (Hestenes) Jacobi rotations.
pub fn singular_spectrum(m: &Tensor) -> Result<Vec<f64>> {
    let (rows, cols) = m.require_matrix("singular_spectrum")?;
    if !m.all_finite() {
        return Err(Error::Numeric("singular_spectrum received a non-finite entry".into()));
    }
    // Orthogonalize the columns of the tall orientation.
    let (tall, k) = if rows >= cols {
        (m.clone(), cols)
    } else {
        (m.transpose(), rows)
    };
    let n = tall.rows();
    let mut a: Vec<Vec<f64>> = (0..k).map(|c| tall.column(c)).collect();
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let (alpha, beta, gamma) = (0..n).fold((0.0, 0.0, 0.0), |(al, be, ga), i| {
                    let (x, y) = (a[p][i], a[q][i]);
                    (al + x * x, be + y * y, ga + x * y)
                });
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOLERANCE * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = a.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "Jacobi SVD did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }
    let mut sigma: Vec<f64> = a
        .iter()
        .map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sigma.sort_by(|x, y| y.total_cmp(x));
    Ok(sigma)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StructureReport {
    pub row_stochastic: bool,
    pub col_stochastic: bool,
    pub nnz: usize,
    pub rank: usize,
}

/// Stochasticity, sparsity and rank of a square map.
pub fn structure_check(p: &Tensor, tol: f64) -> Result<StructureReport> {
    let (n, m) = p.require_matrix("structure_check")?;
    if n != m {
        return Err(Error::dim("structure_check", p.shape(), &[n, n]));
    }
    let nonneg = p.data().iter().all(|&v| v >= -tol);
    let row_ok = (0..n).all(|r| (p.row(r).iter().sum::<f64>() - 1.0).abs() <= tol);
    let col_ok = (0..n).all(|c| ((0..n).map(|r| p.get(r, c)).sum::<f64>() - 1.0).abs() <= tol);
    let nnz = p.data().iter().filter(|v| v.abs() > tol).count();
    let sigma = singular_spectrum(p)?;
    let max = sigma.first().copied().unwrap_or(0.0);
    let rank = sigma.iter().filter(|&&s| s > tol * max).count();
    Ok(StructureReport {
        row_stochastic: nonneg && row_ok,
        col_stochastic: nonneg && col_ok,
        nnz,
        rank,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        return Err(Error::Contract(
            "log-log fit needs at least two strictly positive points".into(),
        ));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Contract("log-log fit needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub mechanism: AttentionKind,
    pub n: usize,
    pub fwd_s: f64,
    pub fwdbwd_s: f64,
    /// Peak live bytes allocated during one forward+backward of the attention path.
    pub peak_bytes: usize,
    /// Largest single allocation in the same scope.
    pub largest_alloc_bytes: usize,
    /// Per-call times of every repeat, forward+backward.
    pub repeat_fwdbwd_s: Vec<f64>,
}

/// Below this, a repeat loops over several calls so timer resolution does not dominate.
const MIN_REPEAT_SECONDS: f64 = 5e-2;

struct BenchInputs {
    x: Tensor,
    params: AttentionParams<Tensor>,
    weights: Tensor,
}

fn run_attention(inputs: &BenchInputs, backward: bool) -> Result<()> {
    let mut g = Graph::new();
    let x = g.leaf(inputs.x.clone());
    let params = inputs.params.map(&mut |t| g.leaf(t.clone()));
    let (out, _) = attention_forward(&mut g, x, &params, SortStrategy::Ascending)?;
    if backward {
        let loss = weighted_sum(&mut g, out, &inputs.weights)?;
        g.backward(loss)?;
    }
    std::hint::black_box(&g);
    Ok(())
}

/// Seconds per call, averaged over enough calls to fill [`MIN_REPEAT_SECONDS`].
fn time_per_call(inputs: &BenchInputs, backward: bool, calls: usize) -> Result<f64> {
    let start = Instant::now();
    for _ in 0..calls {
        run_attention(inputs, backward)?;
    }
    Ok(start.elapsed().as_secs_f64() / calls as f64)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Time both mechanisms at each `N`: `d` model width, `m` heads of width `dh`.
/// The slice-sort map has `m·dh` channels and an output projection back to `d`.
pub fn bench_attention(
    n_list: &[usize],
    d: usize,
    m: usize,
    dh: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<BenchRecord>> {
    if repeats < 3 {
        return Err(Error::Contract(format!("bench needs repeats >= 3, got {repeats}")));
    }
    if d == 0 || m == 0 || dh == 0 {
        return Err(Error::Contract("bench dimensions must be positive".into()));
    }
    let root = Rng::new(seed);
    let mut out = Vec::new();
    for (i, &n) in n_list.iter().enumerate() {
        if n == 0 {
            return Err(Error::Contract("bench sequence length must be positive".into()));
        }
        for (j, kind) in [AttentionKind::SoftmaxMha, AttentionKind::SliceSort]
            .into_iter()
            .enumerate()
        {
            let mut rng = root.split((i * 2 + j) as u64);
            let x = Tensor::randn(&[n, d], 1.0, &mut rng);
            let params = match kind {
                AttentionKind::SoftmaxMha => AttentionParams::Softmax(MhaParams::init(d, m, dh, &mut rng)),
                AttentionKind::SliceSort => {
                    AttentionParams::SliceSort(SliceSortParams::init(d, m * dh, true, &mut rng))
                }
            };
            let weights = Tensor::randn(&[n, m * dh], 1.0, &mut rng);
            let inputs = BenchInputs { x, params, weights };

            // Warmup, also used to size the inner loop; excluded from the medians.
            let (warm, stats) = alloc_probe::measure(|| -> Result<f64> {
                let start = Instant::now();
                run_attention(&inputs, true)?;
                Ok(start.elapsed().as_secs_f64())
            });
            let warm = warm?;
            let calls = ((MIN_REPEAT_SECONDS / warm.max(1e-9)).ceil() as usize).max(1);

            let mut fwd = Vec::with_capacity(repeats);
            let mut fwdbwd = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                fwd.push(time_per_call(&inputs, false, calls)?);
                fwdbwd.push(time_per_call(&inputs, true, calls)?);
            }
            out.push(BenchRecord {
                mechanism: kind,
                n,
                fwd_s: median(&fwd),
                fwdbwd_s: median(&fwdbwd),
                peak_bytes: stats.peak_bytes,
                largest_alloc_bytes: stats.largest_bytes,
                repeat_fwdbwd_s: fwdbwd,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    /// 1-based layer index.
    pub layer: usize,
    pub mechanism: AttentionKind,
    /// Normalized by the largest value, nonincreasing.
    pub values: Vec<f64>,
}

impl SpectrumReport {
    /// Mean of the normalized spectrum, a proxy for the area under its curve.
    pub fn area(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Per-layer spectra of the attention-sublayer outputs on `probe`, stacked over samples.
pub fn spectrum_experiment(
    models: &[(&EncoderConfig, &EncoderParams<Tensor>)],
    probe: &[LabeledSequence],
) -> Result<Vec<SpectrumReport>> {
    if probe.is_empty() {
        return Err(Error::Contract("spectrum probe batch is empty".into()));
    }
    let mut reports = Vec::new();
    for &(config, params) in models {
        let mut stacked: Vec<Vec<f64>> = vec![Vec::new(); config.layers];
        for sample in probe {
            let mut g = Graph::new();
            let model = GraphModel::frozen(&mut g, config, params)?;
            let trace = model.forward(&mut g, &sample.tokens)?;
            for (layer, &v) in trace.attention_outputs.iter().enumerate() {
                stacked[layer].extend_from_slice(g.value(v).data());
            }
        }
        for (layer, data) in stacked.into_iter().enumerate() {
            let rows = data.len() / config.d_model;
            let matrix = Tensor::new(vec![rows, config.d_model], data)?;
            let sigma = singular_spectrum(&matrix)?;
            let max = sigma.first().copied().unwrap_or(0.0);
            let values = if max > 0.0 {
                sigma.iter().map(|s| s / max).collect()
            } else {
                sigma
            };
            reports.push(SpectrumReport {
                layer: layer + 1,
                mechanism: config.attention,
                values,
            });
        }
    }
    Ok(reports)
}
