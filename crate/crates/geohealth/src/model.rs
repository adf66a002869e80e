//! Ridge regression with a closed-form solve and a seeded k-fold
//! cross-validation harness producing pooled out-of-fold predictions.

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{column_means, solve_spd};
use crate::num::Scalar;

/// Ridge hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RidgeSpec<S> {
    pub alpha: S,
    pub fit_intercept: bool,
}

impl<S: Scalar> Default for RidgeSpec<S> {
    fn default() -> Self {
        RidgeSpec {
            alpha: S::from_f64_c(0.1),
            fit_intercept: true,
        }
    }
}

impl<S: Scalar> RidgeSpec<S> {
    pub fn new(alpha: S, fit_intercept: bool) -> Result<Self> {
        if alpha < S::zero() || !alpha.is_finite() {
            return Err(Error::InvalidInput(format!("alpha {alpha} must be >= 0")));
        }
        Ok(RidgeSpec { alpha, fit_intercept })
    }
}

/// A fitted affine model: y ≈ Xw + b.
#[derive(Clone, Debug, PartialEq)]
pub struct FittedModel<S> {
    pub weights: Array1<S>,
    pub intercept: S,
}

fn check_finite<'a, S: Scalar>(values: impl IntoIterator<Item = &'a S>, what: &str) -> Result<()> {
    if values.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} contains a non-finite value")));
    }
    Ok(())
}

struct Centered<S> {
    xc: ndarray::Array2<S>,
    yc: Array1<S>,
    x_mean: Option<Array1<S>>,
    y_mean: S,
}

fn center<S: Scalar>(
    x: &ArrayView2<S>,
    y: &ArrayView1<S>,
    spec: &RidgeSpec<S>,
) -> Result<Centered<S>> {
    let (n, p) = x.dim();
    if y.len() != n {
        return Err(Error::Dim(format!("X has {n} rows but y has {}", y.len())));
    }
    let min_rows = if spec.fit_intercept { 2 } else { 1 };
    if n < min_rows {
        return Err(Error::InvalidInput(format!(
            "need at least {min_rows} rows, got {n}"
        )));
    }
    if p == 0 {
        return Err(Error::InvalidInput("X has no columns".into()));
    }
    if spec.alpha < S::zero() || !spec.alpha.is_finite() {
        return Err(Error::InvalidInput(format!("alpha {} must be >= 0", spec.alpha)));
    }
    check_finite(x.iter(), "X")?;
    check_finite(y.iter(), "y")?;

    if spec.fit_intercept {
        let x_mean = column_means(x);
        let y_mean = y.iter().copied().sum::<S>() / S::from_usize_c(n);
        let xc = x - &x_mean.view().insert_axis(Axis(0));
        let yc = y.mapv(|v| v - y_mean);
        Ok(Centered { xc, yc, x_mean: Some(x_mean), y_mean })
    } else {
        Ok(Centered { xc: x.to_owned(), yc: y.to_owned(), x_mean: None, y_mean: S::zero() })
    }
}

fn assemble<S: Scalar>(c: &Centered<S>, weights: Array1<S>) -> FittedModel<S> {
    let intercept = match &c.x_mean {
        Some(means) => c.y_mean - means.dot(&weights),
        None => S::zero(),
    };
    FittedModel { weights, intercept }
}

/// Solves the p×p Gram system (X'X + αI) w = X'y on centered data.
pub fn fit_ridge_primal<S: Scalar>(
    x: &ArrayView2<S>,
    y: &ArrayView1<S>,
    spec: &RidgeSpec<S>,
) -> Result<FittedModel<S>> {
    let c = center(x, y, spec)?;
    let p = c.xc.ncols();
    let mut gram = c.xc.t().dot(&c.xc);
    for i in 0..p {
        gram[[i, i]] += spec.alpha;
    }
    let rhs = c.xc.t().dot(&c.yc);
    let weights = solve_spd(&gram.view(), &rhs.view())?;
    Ok(assemble(&c, weights))
}

/// Solves the equivalent n×n dual system w = X'(XX' + αI)⁻¹ y on centered
/// data. Requires α > 0.
pub fn fit_ridge_dual<S: Scalar>(
    x: &ArrayView2<S>,
    y: &ArrayView1<S>,
    spec: &RidgeSpec<S>,
) -> Result<FittedModel<S>> {
    if spec.alpha <= S::zero() {
        return Err(Error::Singular(format!(
            "dual ridge needs alpha > 0, got {}",
            spec.alpha
        )));
    }
    let c = center(x, y, spec)?;
    let n = c.xc.nrows();
    let mut outer = c.xc.dot(&c.xc.t());
    for i in 0..n {
        outer[[i, i]] += spec.alpha;
    }
    let dual = solve_spd(&outer.view(), &c.yc.view())?;
    let weights = c.xc.t().dot(&dual);
    Ok(assemble(&c, weights))
}

/// Minimizes ‖y − Xw − b‖² + α‖w‖² (b unpenalized, zero when the intercept
/// is off). With the intercept on, X columns and y are centered and the
/// weights solved on the centered system. The p×p Gram system is used when
/// p ≤ n; otherwise the equivalent n×n dual system, which requires α > 0.
pub fn fit_ridge<S: Scalar>(
    x: &ArrayView2<S>,
    y: &ArrayView1<S>,
    spec: &RidgeSpec<S>,
) -> Result<FittedModel<S>> {
    let (n, p) = x.dim();
    let min_rows = if spec.fit_intercept { 2 } else { 1 };
    if p <= n || n < min_rows {
        fit_ridge_primal(x, y, spec)
    } else {
        if spec.alpha <= S::zero() {
            return Err(Error::Singular(format!(
                "{p} columns exceed {n} rows and alpha is 0"
            )));
        }
        fit_ridge_dual(x, y, spec)
    }
}

/// ŷ = Xw + b, unclamped.
pub fn predict<S: Scalar>(model: &FittedModel<S>, x: &ArrayView2<S>) -> Result<Array1<S>> {
    if x.ncols() != model.weights.len() {
        return Err(Error::Dim(format!(
            "X has {} columns but the model has {} weights",
            x.ncols(),
            model.weights.len()
        )));
    }
    Ok(x.dot(&model.weights) + model.intercept)
}

/// A seeded partition of row indices into k folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    /// fold_of[row] ∈ [0, k).
    pub fold_of: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn n(&self) -> usize {
        self.fold_of.len()
    }

    /// Row indices assigned to `fold`, ascending.
    pub fn test_rows(&self, fold: usize) -> Vec<usize> {
        self.fold_of
            .iter()
            .enumerate()
            .filter(|(_, f)| **f == fold)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        self.fold_of
            .iter()
            .enumerate()
            .filter(|(_, f)| **f != fold)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Shuffles [0, n) with the seed and cuts the result into k contiguous
/// chunks; the first n mod k folds carry the extra row.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("k must be >= 2, got {k}")));
    }
    if n < k {
        return Err(Error::InvalidInput(format!("{n} rows cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let base = n / k;
    let extra = n % k;
    let mut fold_of = vec![0usize; n];
    let mut start = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        for &row in &order[start..start + size] {
            fold_of[row] = fold;
        }
        start += size;
    }
    Ok(FoldAssignment { fold_of, k, seed })
}

/// Out-of-fold predictions plus the per-fold models that produced them.
#[derive(Clone, Debug)]
pub struct CrossValResult<S> {
    /// One prediction per row, in original row order.
    pub pooled: Array1<S>,
    pub fold_models: Vec<FittedModel<S>>,
    pub folds: FoldAssignment,
}

/// For each fold: fit on the complement, predict the fold. Pooled
/// predictions are assembled in original row order.
pub fn cross_validate<S: Scalar>(
    x: &ArrayView2<S>,
    y: &ArrayView1<S>,
    spec: &RidgeSpec<S>,
    folds: &FoldAssignment,
) -> Result<CrossValResult<S>> {
    let n = x.nrows();
    if folds.n() != n || y.len() != n {
        return Err(Error::Dim(format!(
            "fold assignment covers {} rows, X has {n}, y has {}",
            folds.n(),
            y.len()
        )));
    }
    let mut pooled = Array1::<S>::zeros(n);
    let mut fold_models = Vec::with_capacity(folds.k);
    for fold in 0..folds.k {
        let train = folds.train_rows(fold);
        let test = folds.test_rows(fold);
        let x_train = x.select(Axis(0), &train);
        let y_train = y.select(Axis(0), &train);
        let model = fit_ridge(&x_train.view(), &y_train.view(), spec).map_err(|e| {
            Error::Validation(format!("fold {fold}: {e}"))
        })?;
        let x_test = x.select(Axis(0), &test);
        let preds = predict(&model, &x_test.view())?;
        for (row, pred) in test.iter().zip(preds.iter()) {
            pooled[*row] = *pred;
        }
        fold_models.push(model);
    }
    Ok(CrossValResult {
        pooled,
        fold_models,
        folds: folds.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array, Array2};
    use rand::Rng;

    fn ridge_objective(x: &Array2<f64>, y: &Array1<f64>, w: &Array1<f64>, b: f64, alpha: f64) -> f64 {
        let r = y - &(x.dot(w) + b);
        r.iter().map(|v| v * v).sum::<f64>() + alpha * w.iter().map(|v| v * v).sum::<f64>()
    }

    /// Steepest descent with exact line search on the quadratic objective in
    /// (w, b). Slow but independent of the factorization path.
    fn gd_minimize(x: &Array2<f64>, y: &Array1<f64>, alpha: f64, fit_intercept: bool) -> (Array1<f64>, f64) {
        let p = x.ncols();
        let mut w = Array1::<f64>::zeros(p);
        let mut b = 0.0f64;
        for _ in 0..200_000 {
            let resid = &x.dot(&w) + b - y;
            let grad_w = x.t().dot(&resid) * 2.0 + &w * (2.0 * alpha);
            let grad_b = if fit_intercept { 2.0 * resid.sum() } else { 0.0 };
            let gnorm2 = grad_w.iter().map(|v| v * v).sum::<f64>() + grad_b * grad_b;
            if gnorm2 < 1e-24 {
                break;
            }
            // exact step for a quadratic: t = g·g / (2 (‖X d‖² + α‖dw‖² + n db²))
            let xd = x.dot(&grad_w) + grad_b;
            let denom = 2.0
                * (xd.iter().map(|v| v * v).sum::<f64>()
                    + alpha * grad_w.iter().map(|v| v * v).sum::<f64>());
            if denom <= 0.0 {
                break;
            }
            let t = gnorm2 / denom;
            w = &w - &(&grad_w * t);
            b -= t * grad_b;
        }
        (w, b)
    }

    fn random_problem(rng: &mut ChaCha8Rng, n: usize, p: usize) -> (Array2<f64>, Array1<f64>) {
        let x = Array::from_shape_fn((n, p), |_| rng.gen_range(-1.0..1.0));
        let y = Array::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
        (x, y)
    }

    #[test]
    fn one_by_one_closed_form() {
        let x = array![[1.0]];
        let y = array![1.0];
        let spec = RidgeSpec::new(0.1, false).unwrap();
        let m = fit_ridge(&x.view(), &y.view(), &spec).unwrap();
        assert_abs_diff_eq!(m.weights[0], 1.0 / 1.1, epsilon = 1e-12);
        assert_eq!(m.intercept, 0.0);
    }

    #[test]
    fn identity_design_recovers_y() {
        let x = Array2::<f64>::eye(5);
        let y = array![3.0, -1.0, 0.5, 2.0, 7.0];
        let spec = RidgeSpec::new(0.0, false).unwrap();
        let m = fit_ridge(&x.view(), &y.view(), &spec).unwrap();
        for i in 0..5 {
            assert_abs_diff_eq!(m.weights[i], y[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn matches_gradient_descent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (x, y) = random_problem(&mut rng, 20, 5);
        let spec = RidgeSpec::new(0.1, true).unwrap();
        let m = fit_ridge(&x.view(), &y.view(), &spec).unwrap();
        let (w_gd, b_gd) = gd_minimize(&x, &y, 0.1, true);
        for j in 0..5 {
            assert_abs_diff_eq!(m.weights[j], w_gd[j], epsilon = 1e-6);
        }
        assert_abs_diff_eq!(m.intercept, b_gd, epsilon = 1e-6);
    }

    #[test]
    fn primal_and_dual_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // p > n forces the dual path; compare against the primal on the
        // same data with rows duplicated enough to flip the branch
        let (x, y) = random_problem(&mut rng, 8, 20);
        let spec = RidgeSpec::new(0.1, true).unwrap();
        let dual = fit_ridge(&x.view(), &y.view(), &spec).unwrap();

        // solve the primal system directly at p > n for the comparison
        let x_mean = column_means(&x.view());
        let y_mean = y.sum() / y.len() as f64;
        let xc = &x - &x_mean.view().insert_axis(Axis(0));
        let yc = y.mapv(|v| v - y_mean);
        let mut gram = xc.t().dot(&xc);
        for i in 0..20 {
            gram[[i, i]] += 0.1;
        }
        let rhs = xc.t().dot(&yc);
        let w_primal = solve_spd(&gram.view(), &rhs.view()).unwrap();
        for j in 0..20 {
            assert_abs_diff_eq!(dual.weights[j], w_primal[j], epsilon = 1e-8);
        }
    }

    #[test]
    fn zero_alpha_rank_deficient_is_singular() {
        let x = array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        let y = array![1.0, 2.0, 3.0];
        let spec = RidgeSpec::new(0.0, false).unwrap();
        let err = fit_ridge(&x.view(), &y.view(), &spec).unwrap_err();
        assert!(matches!(err, Error::Singular(_)), "{err}");
    }

    #[test]
    fn zero_alpha_wide_matrix_is_singular() {
        let x = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let y = array![1.0, 2.0];
        let spec = RidgeSpec::new(0.0, false).unwrap();
        let err = fit_ridge(&x.view(), &y.view(), &spec).unwrap_err();
        assert!(matches!(err, Error::Singular(_)), "{err}");
    }

    #[test]
    fn non_finite_input_is_fatal() {
        let x = array![[1.0], [f64::NAN]];
        let y = array![1.0, 2.0];
        let spec = RidgeSpec::<f64>::default();
        assert!(matches!(
            fit_ridge(&x.view(), &y.view(), &spec),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn positive_alpha_survives_rank_deficiency() {
        let x = array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        let y = array![1.0, 2.0, 3.0];
        let spec = RidgeSpec::new(0.1, true).unwrap();
        assert!(fit_ridge(&x.view(), &y.view(), &spec).is_ok());
    }

    #[test]
    fn predict_affine_evaluation() {
        let m = FittedModel { weights: array![2.0], intercept: 1.0 };
        let x = array![[3.0]];
        assert_eq!(predict(&m, &x.view()).unwrap(), array![7.0]);
    }

    #[test]
    fn zero_weights_predict_intercept() {
        let m = FittedModel { weights: array![0.0, 0.0], intercept: 4.5 };
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let p = predict(&m, &x.view()).unwrap();
        assert!(p.iter().all(|v| *v == 4.5));
    }

    #[test]
    fn exact_interpolation_at_zero_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array::from_shape_fn((6, 6), |_| rng.gen_range(-1.0..1.0));
        let y = Array::from_shape_fn(6, |_| rng.gen_range(-1.0..1.0));
        let spec = RidgeSpec::new(0.0, false).unwrap();
        let m = fit_ridge(&x.view(), &y.view(), &spec).unwrap();
        let p = predict(&m, &x.view()).unwrap();
        for i in 0..6 {
            assert_abs_diff_eq!(p[i], y[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn predict_width_mismatch_is_fatal() {
        let m = FittedModel { weights: array![1.0, 2.0], intercept: 0.0 };
        let x = array![[1.0]];
        assert!(matches!(predict(&m, &x.view()), Err(Error::Dim(_))));
    }

    #[test]
    fn folds_partition_hundred_rows() {
        let folds = kfold_split(100, 10, 7).unwrap();
        for fold in 0..10 {
            assert_eq!(folds.test_rows(fold).len(), 10);
        }
        let mut seen = [false; 100];
        for fold in 0..10 {
            for row in folds.test_rows(fold) {
                assert!(!seen[row], "row {row} in two folds");
                seen[row] = true;
            }
        }
        assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn leave_one_out_boundary() {
        let folds = kfold_split(10, 10, 0).unwrap();
        for fold in 0..10 {
            assert_eq!(folds.test_rows(fold).len(), 1);
        }
    }

    #[test]
    fn uneven_fold_sizes_differ_by_at_most_one() {
        let folds = kfold_split(103, 10, 1).unwrap();
        let sizes: Vec<usize> = (0..10).map(|f| folds.test_rows(f).len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 103);
        assert_eq!(*sizes.iter().max().unwrap(), 11);
        assert_eq!(*sizes.iter().min().unwrap(), 10);
        // ceil-sized folds come first
        assert_eq!(&sizes[..3], &[11, 11, 11]);
    }

    #[test]
    fn same_seed_same_folds() {
        assert_eq!(kfold_split(50, 5, 9).unwrap(), kfold_split(50, 5, 9).unwrap());
        assert_ne!(kfold_split(50, 5, 9).unwrap(), kfold_split(50, 5, 10).unwrap());
    }

    #[test]
    fn too_few_rows_for_folds_is_fatal() {
        assert!(kfold_split(5, 10, 0).is_err());
        assert!(kfold_split(10, 1, 0).is_err());
    }

    #[test]
    fn pooled_predictions_cover_every_row_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, y) = random_problem(&mut rng, 30, 3);
        let folds = kfold_split(30, 5, 4).unwrap();
        let cv = cross_validate(&x.view(), &y.view(), &RidgeSpec::default(), &folds).unwrap();
        assert_eq!(cv.pooled.len(), 30);
        assert_eq!(cv.fold_models.len(), 5);
        assert!(cv.pooled.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn planted_linear_signal_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 60;
        let x = Array::from_shape_fn((n, 4), |_| rng.gen_range(-1.0..1.0f64));
        let w_true = array![2.0, -1.0, 0.5, 3.0];
        let y = x.dot(&w_true) + 0.7;
        let folds = kfold_split(n, 10, 13).unwrap();
        let cv = cross_validate(&x.view(), &y.view(), &RidgeSpec::default(), &folds).unwrap();
        let r = crate::eval::metrics::pearson_r(&y.view(), &cv.pooled.view()).unwrap();
        assert!(r > 0.99, "pooled r = {r}");
    }

    #[test]
    fn local_minimum_objective_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (x, y) = random_problem(&mut rng, 25, 6);
        let alpha = 0.1;
        let spec = RidgeSpec::new(alpha, true).unwrap();
        let m = fit_ridge(&x.view(), &y.view(), &spec).unwrap();
        let base = ridge_objective(&x, &y, &m.weights, m.intercept, alpha);
        for j in 0..6 {
            for delta in [1e-4, -1e-4] {
                let mut w = m.weights.clone();
                w[j] += delta;
                let perturbed = ridge_objective(&x, &y, &w, m.intercept, alpha);
                assert!(perturbed >= base - 1e-12, "weight {j} not at a minimum");
            }
        }
    }

    #[test]
    fn gradient_vanishes_at_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (x, y) = random_problem(&mut rng, 25, 6);
        let spec = RidgeSpec::new(0.1, true).unwrap();
        let m = fit_ridge(&x.view(), &y.view(), &spec).unwrap();
        let x_mean = column_means(&x.view());
        let y_mean = y.sum() / y.len() as f64;
        let xc = &x - &x_mean.view().insert_axis(Axis(0));
        let yc = y.mapv(|v| v - y_mean);
        let grad = xc.t().dot(&(&xc.dot(&m.weights) - &yc)) * 2.0 + &m.weights * 0.2;
        let max = grad.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(max < 1e-8, "gradient max-norm {max}");
    }

    #[test]
    fn weight_norm_shrinks_as_alpha_grows() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..10 {
            let n = rng.gen_range(8..30);
            let p = rng.gen_range(2..6);
            let (x, y) = random_problem(&mut rng, n, p);
            let mut prev = f64::INFINITY;
            for alpha in [0.01, 0.1, 1.0, 10.0] {
                let spec = RidgeSpec::new(alpha, false).unwrap();
                let m = fit_ridge(&x.view(), &y.view(), &spec).unwrap();
                let norm = m.weights.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(norm <= prev + 1e-9, "norm grew at alpha {alpha}");
                prev = norm;
            }
        }
    }

    #[test]
    fn f32_instantiation_works() {
        let x = array![[1.0f32], [2.0]];
        let y = array![1.0f32, 2.0];
        let spec = RidgeSpec::new(0.1f32, true).unwrap();
        let m = fit_ridge(&x.view(), &y.view(), &spec).unwrap();
        assert!(m.weights[0].is_finite());
    }
}
