use nalgebra::DMatrix;
use slicesort::alloc_probe::{self, CountingAllocator};
use slicesort::analysis::{
    bench_attention, sample_std, singular_spectrum, softmax, softmax_std_curve,
    spectrum_experiment, structure_check,
};
use slicesort::data::{gen_multiset_majority, Rng};
use slicesort::{AttentionKind, EncoderConfig, EncoderParams, Graph, Tensor};

#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator;

/// Squared singular values as Gram-matrix eigenvalues from nalgebra, descending.
fn gram_oracle(a: &Tensor) -> Vec<f64> {
    let m = DMatrix::from_row_slice(a.rows(), a.cols(), a.data());
    let gram = if a.rows() >= a.cols() { m.transpose() * &m } else { &m * m.transpose() };
    let mut ev: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

#[test]
fn spectrum_matches_gram_eigenvalues() {
    let mut rng = Rng::new(17);
    for (n, m) in [(6, 4), (4, 6), (1, 5), (7, 7), (10, 3)] {
        let a = Tensor::randn(&[n, m], 1.0, &mut rng);
        let sigma = singular_spectrum(&a).unwrap();
        let oracle = gram_oracle(&a);
        assert_eq!(sigma.len(), n.min(m));
        for (s, e) in sigma.iter().zip(&oracle) {
            assert!((s * s - e).abs() < 1e-9, "{n}x{m}: {s}^2 vs {e}");
        }
    }
}

#[test]
fn structure_of_softmax_map() {
    let mut rng = Rng::new(8);
    let q = Tensor::randn(&[8, 4], 1.0, &mut rng);
    let k = Tensor::randn(&[8, 4], 1.0, &mut rng);
    let mut g = Graph::new();
    let (qv, kv) = (g.constant(q), g.constant(k));
    let s = g.matmul_nt_scaled(qv, kv, 0.5).unwrap();
    let p = g.softmax_rows(s).unwrap();
    let report = structure_check(g.value(p), 1e-9).unwrap();
    assert!(report.row_stochastic);
    assert!(!report.col_stochastic);
    assert_eq!(report.nnz, 64);
}

#[test]
fn structure_of_identity_and_rank_deficient() {
    let r = structure_check(&Tensor::identity(6), 1e-12).unwrap();
    assert!(r.row_stochastic && r.col_stochastic);
    assert_eq!((r.nnz, r.rank), (6, 6));
    let half = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
    assert_eq!(structure_check(&half, 1e-12).unwrap().rank, 1);
    let neg = Tensor::from_rows(&[vec![2.0, -1.0], vec![-1.0, 2.0]]);
    let r = structure_check(&neg, 1e-12).unwrap();
    assert!(!r.row_stochastic && !r.col_stochastic);
    assert!(structure_check(&Tensor::zeros(&[2, 3]), 1e-9).is_err());
}

#[test]
fn smoothing_examples() {
    let y = softmax(&[3f64.ln(), 0.0]);
    assert!((sample_std(&y) - 0.353553).abs() < 1e-6);
    let curve = softmax_std_curve(&[10, 100, 1000], 20, 3).unwrap();
    assert_eq!(curve.iter().map(|p| p.0).collect::<Vec<_>>(), vec![10, 100, 1000]);
    assert!(curve.windows(2).all(|w| w[0].1 > w[1].1));
    assert_eq!(curve, softmax_std_curve(&[10, 100, 1000], 20, 3).unwrap());
}

#[test]
fn small_bench_is_sane() {
    assert!(alloc_probe::is_installed());
    let records = bench_attention(&[32, 64, 128], 8, 2, 4, 3, 1).unwrap();
    assert_eq!(records.len(), 6);
    for r in &records {
        assert!(r.fwd_s > 0.0 && r.fwdbwd_s > 0.0);
        assert!(r.peak_bytes > 0);
        assert_eq!(r.repeat_fwdbwd_s.len(), 3);
        let n2 = 8 * r.n * r.n;
        match r.mechanism {
            AttentionKind::SliceSort => assert!(r.largest_alloc_bytes < n2, "{r:?}"),
            AttentionKind::SoftmaxMha => assert!(r.largest_alloc_bytes >= n2, "{r:?}"),
        }
    }
    assert!(bench_attention(&[8], 4, 1, 4, 2, 0).is_err());
}

#[test]
fn spectrum_reports_are_well_formed() {
    let base = EncoderConfig {
        seq_len: 12,
        d_model: 8,
        heads: 2,
        head_dim: 4,
        ..EncoderConfig::default()
    };
    let soft_cfg = EncoderConfig { attention: AttentionKind::SoftmaxMha, ..base.clone() };
    let sort_cfg = EncoderConfig { attention: AttentionKind::SliceSort, ..base.clone() };
    let soft = EncoderParams::init(&soft_cfg, &mut Rng::new(1)).unwrap();
    let sort = EncoderParams::init(&sort_cfg, &mut Rng::new(2)).unwrap();
    let probe = gen_multiset_majority(0, 6, 11, base.vocab, base.n_classes).unwrap();
    let reports = spectrum_experiment(&[(&soft_cfg, &soft), (&sort_cfg, &sort)], &probe).unwrap();
    assert_eq!(reports.len(), 2 * base.layers);
    for kind in [AttentionKind::SoftmaxMha, AttentionKind::SliceSort] {
        let layers: Vec<usize> =
            reports.iter().filter(|r| r.mechanism == kind).map(|r| r.layer).collect();
        assert_eq!(layers, (1..=base.layers).collect::<Vec<_>>());
    }
    for r in &reports {
        assert_eq!(r.values.len(), base.d_model);
        assert_eq!(r.values[0], 1.0);
        assert!(r.values.windows(2).all(|w| w[0] >= w[1]));
        assert!(r.values.iter().all(|&v| v >= 0.0));
    }
}
