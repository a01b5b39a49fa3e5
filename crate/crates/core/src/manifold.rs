//! Stiefel manifold `St(d, k)` under the embedded Euclidean metric.
//!
//! Tangent projection is `ξ = G − U sym(UᵀG)` and the retraction is the
//! Q factor of `U + ξ` with the positive-diagonal sign convention on R.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::entropic::PlanSet;
use crate::error::{shape_err, PrwbError, Result};
use crate::measures::{DiscreteMeasure, MeasureSet};

/// Orthonormality tolerance (Frobenius norm of `UᵀU − I`).
pub const ORTHONORMAL_TOL: f64 = 1e-10;

/// A `d × k` matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelPoint {
    matrix: DMatrix<f64>,
}

impl StiefelPoint {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let (d, k) = matrix.shape();
        if k == 0 || k > d {
            return Err(PrwbError::InvalidArgument(format!("St({d}, {k}) needs 1 <= k <= d")));
        }
        let defect = orthonormality_defect(&matrix);
        if !(defect <= ORTHONORMAL_TOL) {
            return Err(PrwbError::InvalidValue(format!("UᵀU deviates from I by {defect:e}")));
        }
        Ok(Self { matrix })
    }

    /// The first `k` standard basis vectors of `ℝ^d`.
    pub fn identity(d: usize, k: usize) -> Result<Self> {
        Self::new(DMatrix::identity(d, k))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn ambient_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn rank(&self) -> usize {
        self.matrix.ncols()
    }

    /// `‖UᵀU − I‖_F`.
    pub fn defect(&self) -> f64 {
        orthonormality_defect(&self.matrix)
    }
}

pub fn orthonormality_defect(matrix: &DMatrix<f64>) -> f64 {
    let k = matrix.ncols();
    (matrix.transpose() * matrix - DMatrix::<f64>::identity(k, k)).norm()
}

/// A tangent vector at `base`, i.e. `Uᵀξ + ξᵀU = 0`.
#[derive(Debug, Clone)]
pub struct TangentVector<'a> {
    matrix: DMatrix<f64>,
    base: &'a StiefelPoint,
}

impl<'a> TangentVector<'a> {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn base(&self) -> &'a StiefelPoint {
        self.base
    }

    pub fn norm(&self) -> f64 {
        self.matrix.norm()
    }

    pub fn scaled(&self, t: f64) -> TangentVector<'a> {
        TangentVector { matrix: &self.matrix * t, base: self.base }
    }

    pub fn zero(base: &'a StiefelPoint) -> Self {
        let (d, k) = base.matrix.shape();
        TangentVector { matrix: DMatrix::zeros(d, k), base }
    }

    /// `‖Uᵀξ + ξᵀU‖_F`.
    pub fn tangency_defect(&self) -> f64 {
        let a = self.base.matrix.transpose() * &self.matrix;
        (&a + a.transpose()).norm()
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }
}

/// Seeded Gaussian `d × k` matrix orthonormalized by QR.
pub fn random_stiefel(d: usize, k: usize, seed: u64) -> Result<StiefelPoint> {
    if k == 0 || k > d {
        return Err(PrwbError::InvalidArgument(format!("St({d}, {k}) needs 1 <= k <= d")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = DMatrix::from_fn(d, k, |_, _| StandardNormal.sample(&mut rng));
    let q = qf(gauss)?;
    Ok(StiefelPoint { matrix: q })
}

/// Thin Q factor with `diag(R) > 0`.
fn qf(a: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = a.ncols();
    let scale = a.norm().max(1.0);
    let qr = a.qr();
    let r = qr.r();
    let mut q = qr.q();
    let smallest = (0..k).map(|i| r[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if !(smallest > 1e-12 * scale) {
        return Err(PrwbError::RankDeficient(smallest));
    }
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

/// Orthogonal projection of `g` onto `T_U St(d, k)`.
pub fn tangent_project<'a>(u: &'a StiefelPoint, g: &DMatrix<f64>) -> Result<TangentVector<'a>> {
    if g.shape() != u.matrix.shape() {
        return Err(shape_err(format!("{:?} vs {:?}", g.shape(), u.matrix.shape())));
    }
    let utg = u.matrix.transpose() * g;
    let sym = (&utg + utg.transpose()) * 0.5;
    Ok(TangentVector { matrix: g - &u.matrix * sym, base: u })
}

/// QR retraction `qf(U + ξ)`.
pub fn retract(u: &StiefelPoint, xi: &TangentVector<'_>) -> Result<StiefelPoint> {
    if xi.matrix.shape() != u.matrix.shape() {
        return Err(shape_err(format!("{:?} vs {:?}", xi.matrix.shape(), u.matrix.shape())));
    }
    if xi.matrix.iter().all(|v| *v == 0.0) {
        return Ok(u.clone());
    }
    if xi.matrix.iter().any(|v| !v.is_finite()) {
        return Err(PrwbError::Numerical("non-finite tangent vector".into()));
    }
    Ok(StiefelPoint { matrix: qf(&u.matrix + &xi.matrix)? })
}

/// Symmetric PSD `d × d` matrix `V_π`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    matrix: DMatrix<f64>,
}

impl CorrelationMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }
}

fn check_plans(set: &MeasureSet, y: &DiscreteMeasure, plans: &[DMatrix<f64>]) -> Result<()> {
    if y.dim() != set.dim() {
        return Err(shape_err(format!("barycenter dimension {} vs {}", y.dim(), set.dim())));
    }
    if plans.len() != set.len() {
        return Err(shape_err(format!("{} plans for {} measures", plans.len(), set.len())));
    }
    let shape = (set.support_size(), y.len());
    if let Some(p) = plans.iter().find(|p| p.shape() != shape) {
        return Err(shape_err(format!("plan shape {:?}, expected {shape:?}", p.shape())));
    }
    Ok(())
}

/// `V_π = Σ_l ω_l Σ_ij π^l_ij (x_i − y_j)(x_i − y_j)ᵀ`.
pub fn correlation_matrix(set: &MeasureSet, y: &DiscreteMeasure, plans: &PlanSet) -> Result<CorrelationMatrix> {
    check_plans(set, y, plans.plans())?;
    let d = set.dim();
    let mut v = DMatrix::zeros(d, d);
    let ys = y.support();
    for ((mu, plan), w) in set.measures().iter().zip(plans.plans()).zip(set.omega().iter()) {
        let xs = mu.support();
        let rows = plan.column_sum();
        let cols = plan.row_sum().transpose();
        let x_pi_yt = xs * plan * ys.transpose();
        let term = xs * DMatrix::from_diagonal(&rows) * xs.transpose() - &x_pi_yt - x_pi_yt.transpose()
            + ys * DMatrix::from_diagonal(&cols) * ys.transpose();
        v += term * *w;
    }
    let v = (&v + v.transpose()) * 0.5;
    Ok(CorrelationMatrix { matrix: v })
}

/// `V_π U` without forming the `d × d` matrix.
pub(crate) fn correlation_times(
    set: &MeasureSet,
    y: &DiscreteMeasure,
    plans: &[DMatrix<f64>],
    u: &DMatrix<f64>,
) -> DMatrix<f64> {
    let ys = y.support();
    let yu = ys.transpose() * u;
    let mut out = DMatrix::zeros(u.nrows(), u.ncols());
    for ((mu, plan), w) in set.measures().iter().zip(plans).zip(set.omega().iter()) {
        let xs = mu.support();
        let xu = xs.transpose() * u;
        let rows = plan.column_sum();
        let cols = plan.row_sum().transpose();
        let mut rx = xu.clone();
        for (i, mut row) in rx.row_iter_mut().enumerate() {
            row *= rows[i];
        }
        let mut cy = yu.clone();
        for (j, mut row) in cy.row_iter_mut().enumerate() {
            row *= cols[j];
        }
        let term = xs * (rx - plan * &yu) + ys * (cy - plan.transpose() * &xu);
        out += term * *w;
    }
    out
}

/// `grad_U f(π, U) = Proj_{T_U}(2 V_π U)`.
pub fn riemannian_grad_f<'a>(
    set: &MeasureSet,
    y: &DiscreteMeasure,
    plans: &PlanSet,
    u: &'a StiefelPoint,
) -> Result<TangentVector<'a>> {
    check_plans(set, y, plans.plans())?;
    if u.ambient_dim() != set.dim() {
        return Err(shape_err(format!("U has {} rows, measures have d={}", u.ambient_dim(), set.dim())));
    }
    let vu = correlation_times(set, y, plans.plans(), u.matrix());
    tangent_project(u, &(vu * 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, DVector};
    use proptest::prelude::*;

    #[test]
    fn random_points_are_orthonormal_and_seeded() {
        let u = random_stiefel(5, 2, 11).unwrap();
        assert!(u.defect() <= 1e-12);
        assert_eq!(u, random_stiefel(5, 2, 11).unwrap());
        let square = random_stiefel(4, 4, 3).unwrap();
        assert!(square.defect() <= 1e-12);
        assert!(random_stiefel(2, 3, 0).is_err());
    }

    #[test]
    fn tangent_project_examples() {
        let u = random_stiefel(6, 3, 1).unwrap();
        let zero = tangent_project(&u, u.matrix()).unwrap();
        assert!(zero.norm() <= 1e-14);

        let e1 = StiefelPoint::new(dmatrix![1.0; 0.0]).unwrap();
        let xi = tangent_project(&e1, &dmatrix![0.0; 1.0]).unwrap();
        assert_eq!(xi.matrix(), &dmatrix![0.0; 1.0]);
    }

    #[test]
    fn retract_examples() {
        let u = random_stiefel(5, 2, 4).unwrap();
        assert_eq!(retract(&u, &TangentVector::zero(&u)).unwrap(), u);

        let e1 = StiefelPoint::new(dmatrix![1.0; 0.0]).unwrap();
        let xi = tangent_project(&e1, &dmatrix![0.0; 1.0]).unwrap();
        let r = retract(&e1, &xi).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(r.matrix()[(0, 0)], h, epsilon = 1e-15);
        assert_abs_diff_eq!(r.matrix()[(1, 0)], h, epsilon = 1e-15);
    }

    #[test]
    fn retract_rejects_rank_deficient_input() {
        let e1 = StiefelPoint::new(dmatrix![1.0; 0.0]).unwrap();
        // not tangent: U + ξ = 0
        let bad = TangentVector { matrix: dmatrix![-1.0; 0.0], base: &e1 };
        assert!(matches!(retract(&e1, &bad), Err(PrwbError::RankDeficient(_))));
    }

    #[test]
    fn retraction_agrees_to_first_order() {
        let u = random_stiefel(6, 2, 9).unwrap();
        let g = DMatrix::from_fn(6, 2, |i, j| ((i * 3 + j) as f64).sin());
        let xi = tangent_project(&u, &g).unwrap();
        let err = |t: f64| (retract(&u, &xi.scaled(t)).unwrap().matrix() - (u.matrix() + xi.matrix() * t)).norm();
        let (e2, e4) = (err(1e-2), err(1e-4));
        // second-order remainder: shrinking t by 100 shrinks the error by ~1e4
        assert!(e2 / 1e-2 < 1e-1);
        assert!(e4 / 1e-4 < 1e-3);
        assert!(e2 / e4 > 1e3, "ratio {}", e2 / e4);
    }

    fn single_pair(x: &[f64], y: &[f64]) -> (MeasureSet, DiscreteMeasure, PlanSet) {
        let mu = DiscreteMeasure::new(DMatrix::from_column_slice(x.len(), 1, x), DVector::from_element(1, 1.0)).unwrap();
        let yb = DiscreteMeasure::new(DMatrix::from_column_slice(y.len(), 1, y), DVector::from_element(1, 1.0)).unwrap();
        let set = MeasureSet::uniform(vec![mu]).unwrap();
        (set, yb, PlanSet::new(vec![dmatrix![1.0]]).unwrap())
    }

    #[test]
    fn correlation_single_outer_product() {
        let (set, y, plans) = single_pair(&[1.0, 0.0], &[0.0, 0.0]);
        let v = correlation_matrix(&set, &y, &plans).unwrap();
        assert_eq!(v.matrix(), &dmatrix![1.0, 0.0; 0.0, 0.0]);

        let (set, y, plans) = single_pair(&[2.0, -1.0], &[2.0, -1.0]);
        assert_eq!(correlation_matrix(&set, &y, &plans).unwrap().matrix(), &DMatrix::zeros(2, 2));
        let u = StiefelPoint::identity(2, 1).unwrap();
        assert_eq!(riemannian_grad_f(&set, &y, &plans, &u).unwrap().norm(), 0.0);
    }

    proptest! {
        #[test]
        fn projection_is_tangent_and_idempotent(seed in 0u64..500, d in 2usize..7, kk in 1usize..7, scale in 0.1f64..10.0) {
            let k = kk.min(d);
            let u = random_stiefel(d, k, seed).unwrap();
            let g = DMatrix::from_fn(d, k, |i, j| scale * (((i + 1) * (j + 2)) as f64 + seed as f64).cos());
            let xi = tangent_project(&u, &g).unwrap();
            prop_assert!(xi.tangency_defect() <= 1e-10);
            let again = tangent_project(&u, xi.matrix()).unwrap();
            prop_assert!((again.matrix() - xi.matrix()).norm() <= 1e-12 * (1.0 + xi.norm()));
            let r = retract(&u, &xi).unwrap();
            prop_assert!(r.defect() <= 1e-10);
        }
    }
}
