//! Finite-difference checks of individual ops at their documented tolerances,
//! plus the randomized suite over 100 seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slicesort::attention::{slice_sort_forward, SliceSortParams, SortStrategy};
use slicesort::encoder::LAYER_NORM_EPS;
use slicesort::gradcheck::{
    check_gradients, model_case, run_suite, weighted_sum, Coordinates, DEFAULT_STEP,
    MODEL_TOLERANCE, OP_TOLERANCE,
};
use slicesort::{AttentionKind, Graph, Tensor, Var};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn assert_agrees(report: slicesort::gradcheck::GradCheckReport, tol: f64) {
    assert!(report.checked > 0, "no coordinate checked");
    assert!(report.max_rel_err < tol, "max relative error {:e} >= {tol:e}", report.max_rel_err);
}

#[test]
fn sum_of_matmul_wrt_a() {
    let r = &mut rng(1);
    let a = Tensor::randn(&[3, 4], 1.0, r);
    let b = Tensor::randn(&[4, 2], 1.0, r);
    let build = move |g: &mut Graph, v: &[Var]| {
        let bv = g.constant(b.clone());
        let c = g.matmul(v[0], bv)?;
        Ok(g.sum(c))
    };
    let report = check_gradients(&[a], &build, DEFAULT_STEP, Coordinates::All).unwrap();
    assert_agrees(report, 1e-6);
}

#[test]
fn layer_norm_on_2x8() {
    let r = &mut rng(2);
    let x = Tensor::randn(&[2, 8], 1.0, r);
    let gamma = Tensor::randn(&[8], 1.0, r);
    let beta = Tensor::randn(&[8], 1.0, r);
    let w = Tensor::randn(&[2, 8], 1.0, r);
    let build = move |g: &mut Graph, v: &[Var]| {
        let y = g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)?;
        weighted_sum(g, y, &w)
    };
    let report = check_gradients(&[x, gamma, beta], &build, DEFAULT_STEP, Coordinates::All).unwrap();
    assert_agrees(report, 1e-5);
}

#[test]
fn gelu_at_one_half() {
    let build = |g: &mut Graph, v: &[Var]| {
        let y = g.gelu(v[0]);
        Ok(g.sum(y))
    };
    let report =
        check_gradients(&[Tensor::vector(vec![0.5])], &build, DEFAULT_STEP, Coordinates::All)
            .unwrap();
    assert_agrees(report, 1e-6);
}

#[test]
fn permute_rows_n5() {
    let r = &mut rng(3);
    let x = Tensor::randn(&[5, 3], 1.0, r);
    let perm = vec![3, 0, 4, 1, 2];
    let build = move |g: &mut Graph, v: &[Var]| {
        let y = g.permute_rows(v[0], &perm)?;
        Ok(g.sum(y))
    };
    let report = check_gradients(&[x], &build, DEFAULT_STEP, Coordinates::All).unwrap();
    assert_agrees(report, 1e-8);
}

#[test]
fn cross_entropy_on_3x5() {
    let r = &mut rng(4);
    let logits = Tensor::randn(&[3, 5], 1.0, r);
    let build = |g: &mut Graph, v: &[Var]| g.cross_entropy(v[0], &[4, 0, 2]);
    let report = check_gradients(&[logits], &build, DEFAULT_STEP, Coordinates::All).unwrap();
    assert_agrees(report, 1e-5);
}

#[test]
fn slice_sort_end_to_end_5x3() {
    let r = &mut rng(5);
    let x = Tensor::randn(&[5, 3], 1.0, r);
    let w_v = Tensor::randn(&[3, 3], 1.0, r);
    // Distinct projected values, so the sort has no ties.
    let v = x.matmul(&w_v).unwrap();
    for c in 0..3 {
        let mut col = v.column(c);
        col.sort_by(f64::total_cmp);
        assert!(col.windows(2).all(|p| p[1] - p[0] > 1e-3));
    }
    let build = |g: &mut Graph, v: &[Var]| {
        let params = SliceSortParams { w_v: v[1], w_o: None };
        let (out, _) = slice_sort_forward(g, v[0], &params, SortStrategy::Ascending)?;
        Ok(g.sum(out))
    };
    let report = check_gradients(&[x, w_v], &build, DEFAULT_STEP, Coordinates::All).unwrap();
    assert_eq!(report.skipped, 0);
    assert_agrees(report, 1e-6);
}

#[test]
fn full_model_both_mechanisms() {
    for kind in [AttentionKind::SoftmaxMha, AttentionKind::SliceSort] {
        for seed in 0..5 {
            assert_agrees(model_case(seed, kind).unwrap(), MODEL_TOLERANCE);
        }
    }
}

#[test]
fn suite_over_100_seeds() {
    for result in run_suite(100).unwrap() {
        let expected = if result.name.starts_with("model") { MODEL_TOLERANCE } else { OP_TOLERANCE };
        assert_eq!(result.tolerance, expected);
        assert!(
            result.passed(),
            "{}: max relative error {:e} over {} coordinates",
            result.name,
            result.report.max_rel_err,
            result.report.checked
        );
    }
}
