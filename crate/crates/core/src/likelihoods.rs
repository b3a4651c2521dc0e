//! Objective functions, profiles and scores of the invariant likelihoods.
//!
//! All of them depend on the data only through [`InvariantStats`]. With
//! `M(rho) = D W D'` every data-dependent scalar is a quadratic polynomial in
//! `rho`, so [`QuadForms`] precomputes the coefficients once per dataset and
//! the estimators evaluate profiles in O(T) per point.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::kernels::{centering_matrix, f_sums, shift_matrix, InvariantStats};
use crate::{Error, Result};

/// Upper bound on `omega^2` inside every profile.
pub const OMEGA2_MAX: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub rho: f64,
    pub sigma2: f64,
    pub omega2: f64,
}

impl Theta {
    pub fn new(rho: f64, sigma2: f64, omega2: f64) -> Self {
        Theta {
            rho,
            sigma2,
            omega2,
        }
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.rho, self.sigma2, self.omega2]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Theta::new(v[0], v[1], v[2])
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rho.is_finite() {
            return Err(Error::invalid("rho must be finite"));
        }
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return Err(Error::invalid(format!(
                "sigma2 must be positive, got {}",
                self.sigma2
            )));
        }
        if !(self.omega2 >= 0.0) || !self.omega2.is_finite() {
            return Err(Error::invalid(format!(
                "omega2 must be >= 0, got {}",
                self.omega2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theta1 {
    pub rho: f64,
    pub sigma2: f64,
    pub delta: f64,
    pub omega2: f64,
}

impl Theta1 {
    pub fn new(rho: f64, sigma2: f64, delta: f64, omega2: f64) -> Self {
        Theta1 {
            rho,
            sigma2,
            delta,
            omega2,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.rho, self.sigma2, self.delta, self.omega2]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Theta1::new(v[0], v[1], v[2], v[3])
    }

    pub fn validate(&self) -> Result<()> {
        Theta::new(self.rho, self.sigma2, self.omega2).validate()?;
        if !self.delta.is_finite() {
            return Err(Error::invalid("delta must be finite"));
        }
        Ok(())
    }
}

/// `k0 - 2 rho k1 + rho^2 k2` with its first two derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Quadratic([f64; 3]);

impl Quadratic {
    fn at(&self, rho: f64) -> f64 {
        self.0[0] - 2.0 * rho * self.0[1] + rho * rho * self.0[2]
    }

    /// Half the negative derivative, e.g. `tr(J W D' H)` for `tr(D W D' H)`.
    fn half_neg_slope(&self, rho: f64) -> f64 {
        self.0[1] - rho * self.0[2]
    }

    fn d1(&self, rho: f64) -> f64 {
        -2.0 * self.half_neg_slope(rho)
    }

    fn d2(&self) -> f64 {
        2.0 * self.0[2]
    }
}

/// Quadratic-in-rho coefficients of the statistics the objectives need.
#[derive(Debug, Clone)]
pub struct QuadForms {
    pub t: usize,
    pub n: usize,
    /// `tr(M H)`
    tr_mh: Quadratic,
    /// `1' M 1`
    ones_m: Quadratic,
    /// `tr(M)`
    tr_m: Quadratic,
    cond: Option<CondForms>,
}

/// `z(rho) = D Z1 - |y1| rho e1 = z0 - rho v`, the conditional mean residual
/// before the `delta` term.
#[derive(Debug, Clone)]
struct CondForms {
    x_norm: f64,
    z0: DVector<f64>,
    v: DVector<f64>,
    /// `z' H z`
    r_h: Quadratic,
    /// `1' z`
    sum_z0: f64,
    sum_v: f64,
}

impl QuadForms {
    pub fn new(stats: &InvariantStats) -> Result<Self> {
        let t = stats.t();
        if t < 2 {
            return Err(Error::invalid("need T >= 2"));
        }
        let w = &stats.w;
        let j = shift_matrix(t);
        let h = centering_matrix(t);
        let jw = &j * w;
        let jwj = &jw * j.transpose();
        let ones = DVector::from_element(t, 1.0);
        let tr_h = |m: &DMatrix<f64>| (m * &h).trace();
        let quad1 = |m: &DMatrix<f64>| ones.dot(&(m * &ones));
        let tr_mh = Quadratic([tr_h(w), tr_h(&jw), tr_h(&jwj)]);
        let ones_m = Quadratic([quad1(w), quad1(&jw), quad1(&jwj)]);
        let tr_m = Quadratic([w.trace(), jw.trace(), jwj.trace()]);
        let cond = match (&stats.z1, stats.x_norm) {
            (Some(z1), Some(x_norm)) => {
                let mut v = &j * z1;
                v[0] += x_norm;
                let hz = &h * z1;
                let hv = &h * &v;
                Some(CondForms {
                    x_norm,
                    r_h: Quadratic([z1.dot(&hz), z1.dot(&hv), v.dot(&hv)]),
                    sum_z0: z1.sum(),
                    sum_v: v.sum(),
                    z0: z1.clone(),
                    v,
                })
            }
            _ => None,
        };
        Ok(QuadForms {
            t,
            n: stats.n,
            tr_mh,
            ones_m,
            tr_m,
            cond,
        })
    }

    pub fn is_conditional(&self) -> bool {
        self.cond.is_some()
    }

    fn nf(&self) -> f64 {
        self.n as f64
    }

    fn tf(&self) -> f64 {
        self.t as f64
    }

    /// `tr(D W D' H)` at `rho`.
    pub fn tr_mh(&self, rho: f64) -> f64 {
        self.tr_mh.at(rho)
    }

    /// `1' D W D' 1` at `rho`.
    pub fn ones_m(&self, rho: f64) -> f64 {
        self.ones_m.at(rho)
    }

    /// `tr(D W D')` at `rho`.
    pub fn tr_m(&self, rho: f64) -> f64 {
        self.tr_m.at(rho)
    }

    /// `z(rho)' H z(rho)` for the conditional residual; zero without `Z1`.
    pub fn resid_h(&self, rho: f64) -> f64 {
        self.cond.as_ref().map_or(0.0, |c| c.r_h.at(rho))
    }

    fn cond(&self) -> Result<&CondForms> {
        self.cond.as_ref().ok_or_else(|| {
            Error::invalid("conditional objective needs Z1 and |y1| (use conditional_invariant)")
        })
    }
}

/// `g(u) = (sqrt(1+u) - ln(1 + sqrt(1+u))) / (2T)` and two derivatives.
fn g_terms(u: f64, t: f64) -> (f64, f64, f64) {
    let r = (1.0 + u).sqrt();
    // ln(1 + r) without overflow for very large A_N.
    let log_term = if r > 1e8 {
        r.ln() + (1.0 / r).ln_1p()
    } else {
        r.ln_1p()
    };
    let g = (r - log_term) / (2.0 * t);
    let g1 = 1.0 / (4.0 * t * (1.0 + r));
    let g2 = -1.0 / (8.0 * t * r * (1.0 + r) * (1.0 + r));
    (g, g1, g2)
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::invalid(format!(
            "sigma2 must be positive, got {sigma2}"
        )));
    }
    Ok(())
}

fn check_t(stats: &InvariantStats, t: usize) -> Result<()> {
    if stats.t() != t {
        return Err(Error::invalid(format!(
            "statistics are {0}x{0} but T = {t}",
            stats.t()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Unconditional invariant likelihood

impl QuadForms {
    pub fn q_mile(&self, th: &Theta) -> f64 {
        let (n, t) = (self.nf(), self.tf());
        let (s2, w) = (th.sigma2, th.omega2);
        let q = self.ones_m(th.rho) / n;
        let (g, _, _) = g_terms(4.0 * w * q / s2, t);
        -0.5 * s2.ln() - self.tr_m(th.rho) / (2.0 * s2 * n * t) - 0.5 * w + g
    }

    /// Gradient and Hessian in `(rho, sigma2, omega2)`.
    pub fn q_mile_derivatives(&self, th: &Theta) -> ([f64; 3], [[f64; 3]; 3]) {
        let (n, t) = (self.nf(), self.tf());
        let (rho, s2, w) = (th.rho, th.sigma2, th.omega2);
        let s4 = s2 * s2;
        let trm = self.tr_m(rho);
        let trm_r = self.tr_m.d1(rho);
        let trm_rr = self.tr_m.d2();
        let q = self.ones_m(rho) / n;
        let q_r = self.ones_m.d1(rho) / n;
        let q_rr = self.ones_m.d2() / n;
        let u = 4.0 * w * q / s2;
        let (_, g1, g2) = g_terms(u, t);
        let u_r = 4.0 * w * q_r / s2;
        let u_s = -u / s2;
        let u_w = 4.0 * q / s2;
        let u_rr = 4.0 * w * q_rr / s2;
        let u_rs = -4.0 * w * q_r / s4;
        let u_rw = 4.0 * q_r / s2;
        let u_ss = 8.0 * w * q / (s4 * s2);
        let u_sw = -4.0 * q / s4;
        let nt = n * t;
        let grad = [
            -trm_r / (2.0 * s2 * nt) + g1 * u_r,
            -0.5 / s2 + trm / (2.0 * s4 * nt) + g1 * u_s,
            -0.5 + g1 * u_w,
        ];
        let h_rr = -trm_rr / (2.0 * s2 * nt) + g2 * u_r * u_r + g1 * u_rr;
        let h_rs = trm_r / (2.0 * s4 * nt) + g2 * u_r * u_s + g1 * u_rs;
        let h_rw = g2 * u_r * u_w + g1 * u_rw;
        let h_ss = 0.5 / s4 - trm / (s4 * s2 * nt) + g2 * u_s * u_s + g1 * u_ss;
        let h_sw = g2 * u_s * u_w + g1 * u_sw;
        let h_ww = g2 * u_w * u_w;
        (
            grad,
            [[h_rr, h_rs, h_rw], [h_rs, h_ss, h_sw], [h_rw, h_sw, h_ww]],
        )
    }

    /// The closed-form concentrated objective in `rho` (interior branch).
    pub fn q_mile_concentrated(&self, rho: f64) -> Result<f64> {
        let (n, t) = (self.nf(), self.tf());
        let a = self.tr_mh(rho);
        let b = self.ones_m(rho);
        if !(a > 0.0) || !(b > 0.0) {
            return Err(Error::degenerate(format!(
                "concentrated objective undefined at rho = {rho}: tr(DWD'H) = {a}, 1'DWD'1 = {b}"
            )));
        }
        Ok(-0.5 * ((t - 1.0) / t) * (a / (n * (t - 1.0))).ln() - (b / (n * t)).ln() / (2.0 * t))
    }

    /// Exact maximum of `q_mile` over `sigma2 > 0` and `omega2` in `[0, OMEGA2_MAX]`.
    pub fn mile_profile(&self, rho: f64) -> Result<Profile> {
        profile_sigma_omega(self, rho, 0.0, |s2, w| self.q_mile(&Theta::new(rho, s2, w)))
    }

    /// Derivative of [`QuadForms::mile_profile`] in `rho` on whichever branch is active.
    pub fn mile_profile_slope(&self, p: &Profile) -> Result<f64> {
        profile_slope(self, p, 0.0, 0.0, || {
            self.score_components(p.rho).map(|s| s.s_m)
        })
    }

    /// `S^L`, `S^{M-L}` and the directly differentiated `S^M`.
    pub fn score_components(&self, rho: f64) -> Result<ScoreComponents> {
        let t = self.tf();
        let a = self.tr_mh(rho);
        let b = self.ones_m(rho);
        if !(a > 0.0) || !(b > 0.0) {
            return Err(Error::degenerate(format!(
                "score denominators vanish at rho = {rho}: tr(DWD'H) = {a}, 1'DWD'1 = {b}"
            )));
        }
        let f1 = f_sums(rho, self.t)[1];
        let ratio_l = self.tr_mh.half_neg_slope(rho) / a;
        let ratio_m = self.ones_m.half_neg_slope(rho) / b;
        let s_l = f1 / (t * (t - 1.0)) + ratio_l;
        let s_ml = -f1 / (t * t) + ratio_m / t;
        let s_m = ((t - 1.0) / t) * ratio_l + ratio_m / t;
        Ok(ScoreComponents { s_m, s_l, s_ml })
    }

    /// Slope of the concentrated Lancaster score, `d S^L / d rho`.
    pub fn lancaster_score_slope(&self, rho: f64) -> Result<f64> {
        let t = self.tf();
        let a = self.tr_mh(rho);
        if !(a > 0.0) {
            return Err(Error::degenerate(format!("tr(DWD'H) = {a} at rho = {rho}")));
        }
        let f2 = f_sums(rho, self.t)[2];
        let ratio = self.tr_mh.half_neg_slope(rho) / a;
        Ok(f2 / (t * (t - 1.0)) - self.tr_mh.0[2] / a + 2.0 * ratio * ratio)
    }

    pub fn q_lancaster(&self, rho: f64, sigma2: f64) -> f64 {
        let (n, t) = (self.nf(), self.tf());
        let f0 = f_sums(rho, self.t)[0];
        -0.5 * sigma2.ln() + f0 / (t * (t - 1.0)) - self.tr_mh(rho) / (2.0 * sigma2 * n * (t - 1.0))
    }

    pub fn q_lancaster_derivatives(&self, rho: f64, sigma2: f64) -> ([f64; 2], [[f64; 2]; 2]) {
        let (n, t) = (self.nf(), self.tf());
        let s = sigma2;
        let [_, f1, f2] = f_sums(rho, self.t);
        let c = n * (t - 1.0);
        let a = self.tr_mh(rho);
        let jd = self.tr_mh.half_neg_slope(rho);
        let jj = self.tr_mh.0[2];
        let grad = [
            f1 / (t * (t - 1.0)) + jd / (s * c),
            -0.5 / s + a / (2.0 * s * s * c),
        ];
        let h_rr = f2 / (t * (t - 1.0)) - jj / (s * c);
        let h_rs = -jd / (s * s * c);
        let h_ss = 0.5 / (s * s) - a / (s * s * s * c);
        (grad, [[h_rr, h_rs], [h_rs, h_ss]])
    }

    /// `sigma2_hat(rho) = tr(DWD'H) / (N (T-1))` for the Lancaster objective.
    pub fn lancaster_sigma2(&self, rho: f64) -> f64 {
        self.tr_mh(rho) / (self.nf() * (self.tf() - 1.0))
    }

    /// Lancaster's objective with `sigma2` concentrated out.
    pub fn q_lancaster_concentrated(&self, rho: f64) -> Result<f64> {
        let s2 = self.lancaster_sigma2(rho);
        if !(s2 > 0.0) {
            return Err(Error::degenerate(format!("tr(DWD'H) = 0 at rho = {rho}")));
        }
        Ok(self.q_lancaster(rho, s2))
    }

    /// Within (fixed-effects OLS) estimator `tr(J W H) / tr(J W J' H)`.
    pub fn within_rho(&self) -> Result<f64> {
        let den = self.tr_mh.0[2];
        if !(den > 0.0) {
            return Err(Error::degenerate(
                "tr(JWJ'H) = 0: within estimator undefined",
            ));
        }
        Ok(self.tr_mh.0[1] / den)
    }
}

/// Result of profiling the nuisance parameters at fixed `rho`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub rho: f64,
    pub value: f64,
    pub sigma2: f64,
    pub omega2: f64,
    /// `delta` for the conditional objective, zero otherwise.
    pub delta: f64,
    /// `omega2` sits on one of its bounds.
    pub omega_on_bound: bool,
}

/// Profile `f(sigma2, omega2)` where `f` has the invariant-likelihood form
///
/// `-1/2 ln s - (trM + extra)/(2 s N T) - w/2 + g(4 w q / s)`.
///
/// The `omega2` step is closed-form (the objective is concave in `omega2`);
/// the `sigma2` step picks the stationary point of the right branch.
fn profile_sigma_omega<F: Fn(f64, f64) -> f64>(
    qf: &QuadForms,
    rho: f64,
    extra: f64,
    f: F,
) -> Result<Profile> {
    let (n, t) = (qf.nf(), qf.tf());
    let tr_mh = qf.tr_mh(rho) + extra;
    let ones_m = qf.ones_m(rho);
    let tr_m = qf.tr_m(rho) + extra;
    if !(tr_m > 0.0) {
        return Err(Error::degenerate(format!(
            "tr(DWD') = {tr_m} at rho = {rho}"
        )));
    }
    // Interior (omega2 > 0) iff tr(MH)/(T-1) <= 1'M1/T.
    let s_int = tr_mh / (n * (t - 1.0));
    let (mut sigma2, mut omega2, mut on_bound) = if tr_mh > 0.0 && s_int <= ones_m / (n * t) {
        (s_int, omega_hat(ones_m, s_int, n, t), false)
    } else {
        (tr_m / (n * t), 0.0, true)
    };
    if omega2 > OMEGA2_MAX {
        omega2 = OMEGA2_MAX;
        on_bound = true;
        let m = crate::optim::golden_section_max(
            |ls| f(ls.exp(), OMEGA2_MAX),
            s_int.ln() - 20.0,
            (tr_m / (n * t)).ln() + 1.0,
            1e-12,
            500,
        );
        sigma2 = m.x.exp();
    }
    Ok(Profile {
        rho,
        value: f(sigma2, omega2),
        sigma2,
        omega2,
        delta: 0.0,
        omega_on_bound: on_bound,
    })
}

/// Maximiser of the objective in `omega2` at fixed `(rho, sigma2)`, clamped to `[0, OMEGA2_MAX]`.
fn omega_hat(ones_m: f64, sigma2: f64, n: f64, t: f64) -> f64 {
    ((ones_m / (n * t * sigma2) - 1.0) / t).clamp(0.0, OMEGA2_MAX)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreComponents {
    pub s_m: f64,
    pub s_l: f64,
    pub s_ml: f64,
}

/// Slope of an exact profile. Interior: the closed-form concentrated score.
/// `omega2 = 0`: only `sigma2` is profiled, so the slope is
/// `-(trM + extra)' / (2 (trM + extra))`. `omega2` capped: central difference.
fn profile_slope<F: FnOnce() -> Result<f64>>(
    qf: &QuadForms,
    p: &Profile,
    extra: f64,
    extra_d1: f64,
    interior: F,
) -> Result<f64> {
    if !p.omega_on_bound {
        interior()
    } else if p.omega2 == 0.0 {
        let a = qf.tr_m(p.rho) + extra;
        Ok(-0.5 * (qf.tr_m.d1(p.rho) + extra_d1) / a)
    } else {
        let h = 1e-6 * p.rho.abs().max(1.0);
        let f = |r: f64| {
            if qf.is_conditional() {
                qf.conditional_profile(r).map(|p| p.value)
            } else {
                qf.mile_profile(r).map(|p| p.value)
            }
        };
        Ok((f(p.rho + h)? - f(p.rho - h)?) / (2.0 * h))
    }
}

// ---------------------------------------------------------------------------
// Conditional invariant likelihood

impl QuadForms {
    /// Residual `D Z1' - |y1| (rho e1 + delta 1)` as a column.
    fn cond_resid(&self, rho: f64, delta: f64) -> Result<DVector<f64>> {
        let c = self.cond()?;
        Ok(c.z0.add_scalar(-c.x_norm * delta) - &c.v * rho)
    }

    pub fn q_mile_conditional(&self, th: &Theta1) -> Result<f64> {
        let (n, t) = (self.nf(), self.tf());
        let z = self.cond_resid(th.rho, th.delta)?;
        let base = self.q_mile(&Theta::new(th.rho, th.sigma2, th.omega2));
        Ok(base - z.norm_squared() / (2.0 * th.sigma2 * n * t))
    }

    /// Gradient in `(rho, sigma2, delta, omega2)`.
    pub fn q_mile_conditional_gradient(&self, th: &Theta1) -> Result<[f64; 4]> {
        let (n, t) = (self.nf(), self.tf());
        let c = self.cond()?;
        let z = self.cond_resid(th.rho, th.delta)?;
        let (g, _) = self.q_mile_derivatives(&Theta::new(th.rho, th.sigma2, th.omega2));
        let s = th.sigma2;
        let nt = n * t;
        Ok([
            g[0] + z.dot(&c.v) / (s * nt),
            g[1] + z.norm_squared() / (2.0 * s * s * nt),
            c.x_norm * z.sum() / (s * nt),
            g[2],
        ])
    }

    /// `delta_hat(rho) = 1' z(rho) / (T |y1|)`.
    pub fn conditional_delta(&self, rho: f64) -> Result<f64> {
        let c = self.cond()?;
        Ok((c.sum_z0 - rho * c.sum_v) / (self.tf() * c.x_norm))
    }

    /// Maximum over `(delta, omega2)` at fixed `(rho, sigma2)`.
    pub fn conditional_inner(&self, rho: f64, sigma2: f64) -> Result<Profile> {
        check_sigma2(sigma2)?;
        let delta = self.conditional_delta(rho)?;
        let omega2 = omega_hat(self.ones_m(rho), sigma2, self.nf(), self.tf());
        let th = Theta1::new(rho, sigma2, delta, omega2);
        Ok(Profile {
            rho,
            value: self.q_mile_conditional(&th)?,
            sigma2,
            omega2,
            delta,
            omega_on_bound: omega2 == 0.0 || omega2 == OMEGA2_MAX,
        })
    }

    /// The conditional objective with `(delta, omega2)` concentrated out.
    pub fn q_mile_conditional_concentrated(&self, rho: f64, sigma2: f64) -> Result<f64> {
        Ok(self.conditional_inner(rho, sigma2)?.value)
    }

    /// Gradient and Hessian of the concentrated conditional objective in
    /// `(rho, sigma2)`. The branch follows the inner `omega2` solution.
    pub fn q_mile_conditional_concentrated_derivatives(
        &self,
        rho: f64,
        sigma2: f64,
    ) -> Result<([f64; 2], [[f64; 2]; 2])> {
        let (n, t) = (self.nf(), self.tf());
        let c = self.cond()?;
        let s = sigma2;
        let inner = self.conditional_inner(rho, sigma2)?;
        let nt = n * t;
        let r = c.r_h.at(rho);
        let r_r = c.r_h.d1(rho);
        let r_rr = c.r_h.d2();
        if inner.omega2 > 0.0 && inner.omega2 < OMEGA2_MAX {
            let a = self.tr_mh(rho) + r;
            let a_r = self.tr_mh.d1(rho) + r_r;
            let a_rr = self.tr_mh.d2() + r_rr;
            let b = self.ones_m(rho);
            let b_r = self.ones_m.d1(rho);
            let b_rr = self.ones_m.d2();
            let grad = [
                -a_r / (2.0 * s * nt) - b_r / (2.0 * t * b),
                -(t - 1.0) / (2.0 * t * s) + a / (2.0 * s * s * nt),
            ];
            let h_rr = -a_rr / (2.0 * s * nt) - (b_rr * b - b_r * b_r) / (2.0 * t * b * b);
            let h_rs = a_r / (2.0 * s * s * nt);
            let h_ss = (t - 1.0) / (2.0 * t * s * s) - a / (s * s * s * nt);
            Ok((grad, [[h_rr, h_rs], [h_rs, h_ss]]))
        } else {
            // omega2 pinned at a bound: only delta is profiled.
            let w = inner.omega2;
            let (g, h) = self.q_mile_derivatives(&Theta::new(rho, s, w));
            let grad = [g[0] - r_r / (2.0 * s * nt), g[1] + r / (2.0 * s * s * nt)];
            let h_rr = h[0][0] - r_rr / (2.0 * s * nt);
            let h_rs = h[0][1] + r_r / (2.0 * s * s * nt);
            let h_ss = h[1][1] - r / (s * s * s * nt);
            Ok((grad, [[h_rr, h_rs], [h_rs, h_ss]]))
        }
    }

    /// Exact profile of the conditional objective in `rho` alone.
    pub fn conditional_profile(&self, rho: f64) -> Result<Profile> {
        let delta = self.conditional_delta(rho)?;
        let extra = self.resid_h(rho);
        let mut p = profile_sigma_omega(self, rho, extra, |s2, w| {
            self.q_mile_conditional(&Theta1::new(rho, s2, delta, w))
                .unwrap_or(f64::NEG_INFINITY)
        })?;
        p.delta = delta;
        Ok(p)
    }
}

impl QuadForms {
    /// Derivative of [`QuadForms::conditional_profile`] in `rho`.
    pub fn conditional_profile_slope(&self, p: &Profile) -> Result<f64> {
        let c = self.cond()?;
        let t = self.tf();
        let extra = c.r_h.at(p.rho);
        let extra_d1 = c.r_h.d1(p.rho);
        profile_slope(self, p, extra, extra_d1, || {
            let a = self.tr_mh(p.rho) + extra;
            let a_r = self.tr_mh.d1(p.rho) + extra_d1;
            let b = self.ones_m(p.rho);
            let b_r = self.ones_m.d1(p.rho);
            Ok(-(t - 1.0) / (2.0 * t) * a_r / a - b_r / (2.0 * t * b))
        })
    }
}

// ---------------------------------------------------------------------------
// Free-function API over InvariantStats

pub fn q_mile(theta: &Theta, stats: &InvariantStats, t: usize) -> Result<f64> {
    check_t(stats, t)?;
    check_sigma2(theta.sigma2)?;
    Ok(QuadForms::new(stats)?.q_mile(theta))
}

pub fn q_mile_gradient(theta: &Theta, stats: &InvariantStats, t: usize) -> Result<[f64; 3]> {
    check_t(stats, t)?;
    check_sigma2(theta.sigma2)?;
    Ok(QuadForms::new(stats)?.q_mile_derivatives(theta).0)
}

pub fn q_mile_hessian(theta: &Theta, stats: &InvariantStats, t: usize) -> Result<[[f64; 3]; 3]> {
    check_t(stats, t)?;
    check_sigma2(theta.sigma2)?;
    Ok(QuadForms::new(stats)?.q_mile_derivatives(theta).1)
}

pub fn q_mile_concentrated(rho: f64, stats: &InvariantStats, t: usize) -> Result<f64> {
    check_t(stats, t)?;
    QuadForms::new(stats)?.q_mile_concentrated(rho)
}

pub fn q_lancaster(rho: f64, sigma2: f64, stats: &InvariantStats, t: usize) -> Result<f64> {
    check_t(stats, t)?;
    check_sigma2(sigma2)?;
    Ok(QuadForms::new(stats)?.q_lancaster(rho, sigma2))
}

pub fn score_components(rho: f64, stats: &InvariantStats, t: usize) -> Result<ScoreComponents> {
    check_t(stats, t)?;
    QuadForms::new(stats)?.score_components(rho)
}

pub fn q_mile_conditional(theta1: &Theta1, stats: &InvariantStats, t: usize) -> Result<f64> {
    check_t(stats, t)?;
    check_sigma2(theta1.sigma2)?;
    QuadForms::new(stats)?.q_mile_conditional(theta1)
}
