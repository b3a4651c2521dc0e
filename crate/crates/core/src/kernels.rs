//! Dense building blocks for the AR(1) panel: the lag polynomial matrices,
//! the `F` matrices and their derivatives, maximal invariant statistics and
//! Haar sampling on (stabilisers of) the orthogonal group.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

/// `B`, `D = B^-1 = I - rho J`, the shift `J` and the centering matrix `H`.
#[derive(Debug, Clone)]
pub struct ModelMatrices {
    pub t: usize,
    pub rho: f64,
    pub b: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub j: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

pub fn build_model_matrices(rho: f64, t: usize) -> Result<ModelMatrices> {
    if t < 2 {
        return Err(Error::invalid(format!(
            "time dimension must be >= 2, got {t}"
        )));
    }
    if !rho.is_finite() {
        return Err(Error::invalid("rho must be finite"));
    }
    let b = DMatrix::from_fn(t, t, |i, j| if i >= j { powi(rho, i - j) } else { 0.0 });
    let j = shift_matrix(t);
    let d = DMatrix::identity(t, t) - &j * rho;
    let h = centering_matrix(t);
    Ok(ModelMatrices { t, rho, b, d, j, h })
}

/// Ones on the first subdiagonal.
pub fn shift_matrix(t: usize) -> DMatrix<f64> {
    DMatrix::from_fn(t, t, |i, j| if i == j + 1 { 1.0 } else { 0.0 })
}

pub fn centering_matrix(t: usize) -> DMatrix<f64> {
    let tf = t as f64;
    DMatrix::from_fn(t, t, |i, j| if i == j { 1.0 - 1.0 / tf } else { -1.0 / tf })
}

/// `D = I - rho J` without building the rest of [`ModelMatrices`].
pub fn difference_matrix(rho: f64, t: usize) -> DMatrix<f64> {
    DMatrix::from_fn(t, t, |i, j| {
        if i == j {
            1.0
        } else if i == j + 1 {
            -rho
        } else {
            0.0
        }
    })
}

/// `F0[i][j] = rho^(i-j) / (i-j)` below the diagonal, plus its first two
/// rho-derivatives (computed analytically).
#[derive(Debug, Clone)]
pub struct FMatrices {
    pub rho: f64,
    pub f0: DMatrix<f64>,
    pub f1: DMatrix<f64>,
    pub f2: DMatrix<f64>,
}

impl FMatrices {
    /// `1' F1 1`, the quantity that recurs in every information matrix.
    pub fn ones_f1_ones(&self) -> f64 {
        self.f1.sum()
    }

    pub fn ones_f0_ones(&self) -> f64 {
        self.f0.sum()
    }

    pub fn ones_f2_ones(&self) -> f64 {
        self.f2.sum()
    }

    /// `tr(F1 F1')`.
    pub fn trace_f1_f1t(&self) -> f64 {
        self.f1.iter().map(|v| v * v).sum()
    }

    /// `1' F1' F1 1 = |F1 1|^2`.
    pub fn ones_f1t_f1_ones(&self) -> f64 {
        let row_sums = self.f1.column_sum();
        row_sums.dot(&row_sums)
    }

    /// `1' F1 F1' 1 = |F1' 1|^2`.
    pub fn ones_f1_f1t_ones(&self) -> f64 {
        let col_sums = self.f1.row_sum();
        col_sums.dot(&col_sums)
    }
}

pub fn build_f_matrices(rho: f64, t: usize) -> Result<FMatrices> {
    if t < 2 {
        return Err(Error::invalid(format!(
            "time dimension must be >= 2, got {t}"
        )));
    }
    if !rho.is_finite() {
        return Err(Error::invalid("rho must be finite"));
    }
    let f0 = DMatrix::from_fn(t, t, |i, j| {
        if i > j {
            let k = i - j;
            powi(rho, k) / k as f64
        } else {
            0.0
        }
    });
    let f1 = DMatrix::from_fn(t, t, |i, j| if i > j { powi(rho, i - j - 1) } else { 0.0 });
    let f2 = DMatrix::from_fn(t, t, |i, j| {
        if i > j + 1 {
            let k = i - j;
            (k - 1) as f64 * powi(rho, k - 2)
        } else {
            0.0
        }
    });
    Ok(FMatrices { rho, f0, f1, f2 })
}

/// `(1'F0 1, 1'F1 1, 1'F2 1)` from their closed-form sums, without
/// building the matrices.
pub fn f_sums(rho: f64, t: usize) -> [f64; 3] {
    let mut out = [0.0; 3];
    for k in 1..t {
        let w = (t - k) as f64;
        out[0] += w * powi(rho, k) / k as f64;
        out[1] += w * powi(rho, k - 1);
        if k >= 2 {
            out[2] += w * (k - 1) as f64 * powi(rho, k - 2);
        }
    }
    out
}

/// `rho^k` with `0^0 = 1`.
fn powi(rho: f64, k: usize) -> f64 {
    rho.powi(k as i32)
}

/// The maximal invariant of the panel under rotations of the individuals.
///
/// Unconditionally this is `W = Y'Y`. When conditioning on a vector `x`
/// (the first observations) it is the pair `Z1 = (x'x)^(-1/2) x'Y` and
/// `W = Y' M_x Y`.
#[derive(Debug, Clone)]
pub struct InvariantStats {
    pub w: DMatrix<f64>,
    pub z1: Option<DVector<f64>>,
    pub x_norm: Option<f64>,
    pub n: usize,
}

impl InvariantStats {
    pub fn t(&self) -> usize {
        self.w.nrows()
    }

    pub fn is_conditional(&self) -> bool {
        self.z1.is_some()
    }
}

pub fn maximal_invariant(y: &DMatrix<f64>) -> Result<InvariantStats> {
    let (n, t) = y.shape();
    if n < t {
        return Err(Error::invalid(format!(
            "need at least as many individuals as periods (N={n}, T={t})"
        )));
    }
    let w = symmetrize(y.transpose() * y);
    Ok(InvariantStats {
        w,
        z1: None,
        x_norm: None,
        n,
    })
}

pub fn conditional_invariant(y: &DMatrix<f64>, x: &DVector<f64>) -> Result<InvariantStats> {
    let (n, t) = y.shape();
    if x.len() != n {
        return Err(Error::invalid(format!(
            "conditioning vector has length {} but the panel has {n} rows",
            x.len()
        )));
    }
    if n < t + 1 {
        return Err(Error::invalid(format!(
            "need N >= T + 1 for the conditional invariant (N={n}, T={t})"
        )));
    }
    let x_norm = x.norm();
    if x_norm == 0.0 || !x_norm.is_finite() {
        return Err(Error::invalid("conditioning vector must be nonzero"));
    }
    let z1 = y.tr_mul(x) / x_norm;
    let w = symmetrize(y.transpose() * y - &z1 * z1.transpose());
    Ok(InvariantStats {
        w,
        z1: Some(z1),
        x_norm: Some(x_norm),
        n,
    })
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Haar-distributed `N x N` orthogonal matrix, optionally restricted to the
/// subgroup that fixes `fix`.
pub fn sample_orthogonal(n: usize, fix: Option<&DVector<f64>>, seed: u64) -> Result<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match fix {
        None => Ok(haar_orthogonal(n, &mut rng)),
        Some(v) => {
            if v.len() != n {
                return Err(Error::invalid("fixed vector length must equal N"));
            }
            let norm = v.norm();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::invalid("fixed vector must be nonzero"));
            }
            if n == 1 {
                return Ok(DMatrix::identity(1, 1));
            }
            // P is a symmetric orthogonal map with P e1 = v/|v|; rotate the
            // complement of e1 and conjugate back.
            let p = householder_to_e1(&(v / norm));
            let inner = haar_orthogonal(n - 1, &mut rng);
            let mut block = DMatrix::zeros(n, n);
            block[(0, 0)] = 1.0;
            block.view_mut((1, 1), (n - 1, n - 1)).copy_from(&inner);
            Ok(&p * block * &p)
        }
    }
}

fn haar_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for (k, mut col) in q.column_iter_mut().enumerate() {
        if r[(k, k)] < 0.0 {
            col.neg_mut();
        }
    }
    q
}

/// Symmetric orthogonal `P` with `P e1 = u` for a unit vector `u`.
fn householder_to_e1(u: &DVector<f64>) -> DMatrix<f64> {
    let n = u.len();
    let mut w = u.clone();
    w[0] -= 1.0;
    let wn2 = w.norm_squared();
    if wn2 < 1e-30 {
        return DMatrix::identity(n, n);
    }
    DMatrix::identity(n, n) - (&w * w.transpose()) * (2.0 / wn2)
}

/// `1' M 1`.
pub fn ones_quad(m: &DMatrix<f64>) -> f64 {
    m.sum()
}

/// `tr(A B)` without forming the product.
pub fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(&b.transpose()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs(m: &DMatrix<f64>) -> f64 {
        m.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
    }

    #[test]
    fn b_matrix_half_three() {
        let mm = build_model_matrices(0.5, 3).unwrap();
        let expected =
            DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.5, 1.0, 0.0, 0.25, 0.5, 1.0]);
        assert_eq!(mm.b, expected);
    }

    #[test]
    fn rho_zero_gives_identity() {
        let mm = build_model_matrices(0.0, 4).unwrap();
        assert_eq!(mm.b, DMatrix::identity(4, 4));
        assert_eq!(mm.d, DMatrix::identity(4, 4));
    }

    #[test]
    fn b_inverts_d() {
        let mm = build_model_matrices(0.7, 5).unwrap();
        assert!(max_abs(&(&mm.b * &mm.d - DMatrix::identity(5, 5))) < 1e-12);
        assert_eq!(mm.d, difference_matrix(0.7, 5));
    }

    #[test]
    fn centering_is_idempotent() {
        let h = centering_matrix(6);
        assert!(max_abs(&(&h * &h - &h)) < 1e-12);
        assert!((&h * DVector::from_element(6, 1.0)).norm() < 1e-12);
        assert_eq!(h, h.transpose());
    }

    #[test]
    fn shift_has_single_subdiagonal() {
        let j = shift_matrix(4);
        assert_eq!(j.sum(), 3.0);
        for i in 1..4 {
            assert_eq!(j[(i, i - 1)], 1.0);
        }
    }

    #[test]
    fn rejects_short_panels() {
        assert!(build_model_matrices(0.5, 1).is_err());
        assert!(build_f_matrices(0.5, 1).is_err());
        assert!(build_model_matrices(f64::NAN, 3).is_err());
    }

    #[test]
    fn f_matrices_half_three() {
        let f = build_f_matrices(0.5, 3).unwrap();
        let f0 = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.125, 0.5, 0.0]);
        let f1 = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.5, 1.0, 0.0]);
        assert!(max_abs(&(&f.f0 - f0)) < 1e-15);
        assert!(max_abs(&(&f.f1 - f1)) < 1e-15);
    }

    #[test]
    fn f1_is_shift_times_b() {
        let f = build_f_matrices(0.8, 6).unwrap();
        let mm = build_model_matrices(0.8, 6).unwrap();
        assert!(max_abs(&(&f.f1 - &mm.j * &mm.b)) < 1e-14);
    }

    #[test]
    fn f_derivatives_match_central_differences() {
        let (rho, t, step) = (0.9, 6, 1e-6);
        let f = build_f_matrices(rho, t).unwrap();
        let up = build_f_matrices(rho + step, t).unwrap();
        let dn = build_f_matrices(rho - step, t).unwrap();
        let fd1 = (&up.f0 - &dn.f0) / (2.0 * step);
        let fd2 = (&up.f1 - &dn.f1) / (2.0 * step);
        for (a, b) in f.f1.iter().zip(fd1.iter()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
        for (a, b) in f.f2.iter().zip(fd2.iter()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn f1_sum_closed_form() {
        for t in 2..=8 {
            for &rho in &[-1.7, -0.3, 0.0, 0.4, 1.0, 1.9] {
                let f = build_f_matrices(rho, t).unwrap();
                let closed: f64 = (1..t).map(|k| (t - k) as f64 * powi(rho, k - 1)).sum();
                assert!((f.ones_f1_ones() - closed).abs() < 1e-12 * closed.abs().max(1.0));
            }
        }
    }

    #[test]
    fn f_sums_match_matrices() {
        for t in 2..=7 {
            for &rho in &[-1.3, 0.0, 0.45, 1.0] {
                let f = build_f_matrices(rho, t).unwrap();
                let s = f_sums(rho, t);
                assert!((s[0] - f.ones_f0_ones()).abs() < 1e-12);
                assert!((s[1] - f.ones_f1_ones()).abs() < 1e-12);
                assert!((s[2] - f.ones_f2_ones()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn toeplitz_row_and_column_sums_have_equal_norm() {
        let f = build_f_matrices(0.6, 7).unwrap();
        assert!((f.ones_f1t_f1_ones() - f.ones_f1_f1t_ones()).abs() < 1e-12);
    }

    #[test]
    fn maximal_invariant_identity_like() {
        let y = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let s = maximal_invariant(&y).unwrap();
        assert_eq!(s.w, DMatrix::identity(2, 2));
        assert!(s.z1.is_none());
    }

    #[test]
    fn maximal_invariant_matches_row_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = DMatrix::from_fn(20, 3, |_, _| StandardNormal.sample(&mut rng));
        let s = maximal_invariant(&y).unwrap();
        let mut brute = DMatrix::zeros(3, 3);
        for i in 0..20 {
            let row = y.row(i).transpose();
            brute += &row * row.transpose();
        }
        assert!(max_abs(&(&s.w - brute)) < 1e-12);
    }

    #[test]
    fn maximal_invariant_rejects_short_n() {
        let y = DMatrix::<f64>::zeros(2, 3);
        assert!(maximal_invariant(&y).is_err());
    }

    #[test]
    fn conditional_invariant_orthogonal_x() {
        let y = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 2.0, 3.0, -1.0, 0.5, 0.5]);
        let x = DVector::from_row_slice(&[1.0, 0.0, 0.0, 0.0]);
        let s = conditional_invariant(&y, &x).unwrap();
        assert!(s.z1.as_ref().unwrap().norm() == 0.0);
        assert!(max_abs(&(&s.w - y.transpose() * &y)) < 1e-14);
    }

    #[test]
    fn conditional_invariant_rank_one() {
        let x = DVector::from_row_slice(&[1.0, -2.0, 0.5, 3.0, 1.0]);
        let c = DVector::from_row_slice(&[0.3, -1.2, 2.0]);
        let y = &x * c.transpose();
        let s = conditional_invariant(&y, &x).unwrap();
        assert!(max_abs(&s.w) < 1e-12);
        let z1 = s.z1.unwrap();
        assert!((z1 - &c * x.norm()).norm() < 1e-12);
        assert_eq!(s.x_norm, Some(x.norm()));
    }

    #[test]
    fn conditional_invariant_matches_complement_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, t) = (9, 3);
        let y = DMatrix::from_fn(n, t, |_, _| StandardNormal.sample(&mut rng));
        let x = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let s = conditional_invariant(&y, &x).unwrap();
        // Columns 2..N of the Householder map sending e1 to x/|x| span the
        // orthogonal complement of x.
        let p = householder_to_e1(&(&x / x.norm()));
        let q2 = p.columns(1, n - 1).into_owned();
        let z2 = q2.transpose() * &y;
        let oracle = z2.transpose() * z2;
        assert!(max_abs(&(&s.w - oracle)) < 1e-10);
        let full = y.transpose() * &y;
        let z1 = s.z1.unwrap();
        let rebuilt = &s.w + &z1 * z1.transpose();
        assert!(max_abs(&(rebuilt - &full)) < 1e-10 * max_abs(&full));
    }

    #[test]
    fn conditional_invariant_rejects_zero_x() {
        let y = DMatrix::<f64>::zeros(5, 2);
        let x = DVector::<f64>::zeros(5);
        assert!(conditional_invariant(&y, &x).is_err());
    }

    #[test]
    fn orthogonal_sample_is_orthogonal_and_deterministic() {
        let g = sample_orthogonal(5, None, 11).unwrap();
        assert!(max_abs(&(g.transpose() * &g - DMatrix::identity(5, 5))) < 1e-10);
        let again = sample_orthogonal(5, None, 11).unwrap();
        assert_eq!(g, again);
        let other = sample_orthogonal(5, None, 12).unwrap();
        assert_ne!(g, other);
    }

    #[test]
    fn orthogonal_sample_fixes_vector() {
        let e1 = DVector::from_fn(5, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let g = sample_orthogonal(5, Some(&e1), 4).unwrap();
        assert!((&g * &e1 - &e1).norm() < 1e-12);
        let x = DVector::from_row_slice(&[2.0, -1.0, 0.5, 3.0, 1.5, 0.0, -2.0]);
        let g = sample_orthogonal(7, Some(&x), 5).unwrap();
        assert!((&g * &x - &x).norm() < 1e-10 * x.norm());
        assert!(max_abs(&(g.transpose() * &g - DMatrix::identity(7, 7))) < 1e-10);
    }

    #[test]
    fn haar_first_column_is_uniform_on_sphere() {
        // Mean of the (0,0) entry is zero and its second moment is 1/N for Haar.
        let n = 4;
        let reps = 4000;
        let (mut m1, mut m2) = (0.0, 0.0);
        for s in 0..reps {
            let g = sample_orthogonal(n, None, s).unwrap();
            m1 += g[(0, 0)];
            m2 += g[(0, 0)] * g[(0, 0)];
        }
        m1 /= reps as f64;
        m2 /= reps as f64;
        assert!(m1.abs() < 0.05, "mean {m1}");
        assert!((m2 - 0.25).abs() < 0.03, "second moment {m2}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn b_times_d_is_identity(rho in -2.0f64..2.0, t in 2usize..=8) {
                let mm = build_model_matrices(rho, t).unwrap();
                let err = max_abs(&(&mm.b * &mm.d - DMatrix::identity(t, t)));
                prop_assert!(err < 1e-12);
            }

            #[test]
            fn conditional_split_recovers_gram(seed in 0u64..500) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let y = DMatrix::from_fn(12, 4, |_, _| StandardNormal.sample(&mut rng));
                let x = DVector::from_fn(12, |_, _| StandardNormal.sample(&mut rng));
                let s = conditional_invariant(&y, &x).unwrap();
                let z1 = s.z1.unwrap();
                let full = y.transpose() * &y;
                let err = max_abs(&(&s.w + &z1 * z1.transpose() - &full));
                prop_assert!(err < 1e-10 * max_abs(&full));
                let min_eig = s.w.clone().symmetric_eigenvalues().min();
                prop_assert!(min_eig >= -1e-10 * s.w.trace());
            }
        }
    }
}
