//! Closed-form information matrices, sandwich variances and the
//! score-variance constants of the concentrated scores.
//!
//! The closed-form formulas are evaluated as stated. Alongside them,
//! [`exact_score_covariance`] computes the large-N covariance of any
//! linear-in-`W` score directly from Gaussian quadratic-form moments, which
//! is what the Monte Carlo checks should converge to.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3};
use serde::{Deserialize, Serialize};

use crate::kernels::{build_f_matrices, build_model_matrices, shift_matrix};
use crate::likelihoods::{Theta, Theta1};
use crate::{Error, Result};

pub type Mat2 = [[f64; 2]; 2];
pub type Mat3 = [[f64; 3]; 3];

/// Condition numbers above this attach a singular flag.
pub const COND_LIMIT: f64 = 1e10;

/// Distance from `rho = 1` treated as the unit-root singularity.
pub const UNIT_ROOT_TOL: f64 = 1e-8;

fn check_t(t: usize, min: usize) -> Result<()> {
    if t < min {
        return Err(Error::invalid(format!("need T >= {min}, got {t}")));
    }
    Ok(())
}

/// The 3x3 information matrix of the invariant likelihood in `(rho, sigma2, omega2)`.
pub fn info_mile(theta: &Theta, t: usize) -> Result<Mat3> {
    theta.validate()?;
    check_t(t, 2)?;
    if theta.omega2 <= 0.0 {
        return Err(Error::invalid("info_mile needs omega2 > 0"));
    }
    let f = build_f_matrices(theta.rho, t)?;
    let (s2, w, tf) = (theta.sigma2, theta.omega2, t as f64);
    let a = f.ones_f1_ones();
    let c = f.ones_f1_f1t_ones();
    let tr = f.trace_f1_f1t();
    let d = 1.0 + 2.0 * w * tf;
    let h = tr / tf + w * w * tf / (1.0 + w * tf) * (c / tf + (a / tf).powi(2) / d);
    let i12 = w * w / s2 * a / d;
    let i13 = (1.0 + w * tf) / d * a / tf;
    let i22 = 1.0 / (2.0 * s2 * s2) * (1.0 + w * w * tf / d);
    let i23 = 1.0 / (2.0 * s2) * (1.0 + w * tf) / d;
    let i33 = tf / (2.0 * d);
    Ok([[h, i12, i13], [i12, i22, i23], [i13, i23, i33]])
}

/// Lancaster's information matrix, the variance of his score, and the
/// scalars entering them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LancasterInfo {
    pub info: Mat2,
    pub sigma: Mat2,
    pub h_l: f64,
    pub a_l: f64,
    pub singular_flags: Vec<String>,
}

pub fn info_lancaster(theta: &Theta, t: usize) -> Result<LancasterInfo> {
    theta.validate()?;
    check_t(t, 2)?;
    let f = build_f_matrices(theta.rho, t)?;
    let (s2, w, tf) = (theta.sigma2, theta.omega2, t as f64);
    let a = f.ones_f1_ones();
    let c = f.ones_f1t_f1_ones();
    let tr = f.trace_f1_f1t();
    let f2 = f.ones_f2_ones();
    let h_l = -f2 / (tf * (tf - 1.0)) + tr / (tf - 1.0) + c / tf * (w * tf - 1.0) / (tf - 1.0)
        - w * tf / (tf - 1.0) * (a / tf).powi(2);
    let i12 = -a / (s2 * tf * (tf - 1.0));
    let i22 = 1.0 / (2.0 * s2 * s2);
    let info = [[h_l, i12], [i12, i22]];
    let a_l = 2.0 * h_l + 2.0 * f2 / (tf * (tf - 1.0));
    let k = tf / (tf - 1.0);
    let sigma = [[k * a_l, k * i12], [k * i12, k * i22]];

    let mut singular_flags = Vec::new();
    if t == 2 {
        singular_flags.push("lancaster information is singular at T = 2".to_string());
    }
    if (theta.rho - 1.0).abs() < UNIT_ROOT_TOL {
        singular_flags.push("lancaster information is singular at rho = 1".to_string());
    }
    let cn = condition_number2(&info);
    if !(cn <= COND_LIMIT) {
        singular_flags.push(format!(
            "lancaster information condition number {cn:.3e} exceeds {COND_LIMIT:e}"
        ));
    }
    Ok(LancasterInfo {
        info,
        sigma,
        h_l,
        a_l,
        singular_flags,
    })
}

/// `(b_T, c_T)`, the closed-form limiting variances of `sqrt(NT) S^L` and
/// `sqrt(NT) S^{M-L}`. See [`exact_score_covariance`] for the values the
/// simulation actually reaches.
pub fn score_component_variances(theta: &Theta, t: usize) -> Result<(f64, f64)> {
    check_t(t, 3)?;
    let li = info_lancaster(theta, t)?;
    let f = build_f_matrices(theta.rho, t)?;
    let tf = t as f64;
    let a = f.ones_f1_ones() / tf;
    let c = f.ones_f1t_f1_ones() / tf;
    let b_t = li.a_l - 2.0 * tf / (tf - 1.0).powi(3) * a * a;
    let c_t = 2.0 * tf / (1.0 + theta.omega2 * tf) * (c - a * a);
    Ok((b_t, c_t))
}

/// The 2x2 information matrix of the conditional likelihood in `(rho, sigma2)`.
///
/// `y1_norm_bar2` is the limit of `|y1|^2 / N`.
pub fn info_conditional(theta1: &Theta1, t: usize, y1_norm_bar2: f64) -> Result<Mat2> {
    theta1.validate()?;
    check_t(t, 2)?;
    if theta1.omega2 <= 0.0 {
        return Err(Error::invalid("info_conditional needs omega2 > 0"));
    }
    if !(y1_norm_bar2 > 0.0) || !y1_norm_bar2.is_finite() {
        return Err(Error::invalid(format!(
            "y1_norm_bar2 must be positive and finite, got {y1_norm_bar2}"
        )));
    }
    let f = build_f_matrices(theta1.rho, t)?;
    let (s2, w, tf) = (theta1.sigma2, theta1.omega2, t as f64);
    let a = f.ones_f1_ones() / tf;
    let c = f.ones_f1t_f1_ones() / tf;
    let tr = f.trace_f1_f1t();
    let shift = theta1.delta + theta1.rho - 1.0;
    let d_m1 = 1.0 / (tf * (1.0 + w * tf)) * (c + w * tf * a * a) - 2.0 / tf * a * a
        + (w + y1_norm_bar2 / s2 * shift * shift) * (c - a * a)
        + tr / tf
        - c / tf;
    let off = -f.ones_f1_ones() / (s2 * tf * tf);
    Ok([[d_m1, off], [off, (tf - 1.0) / (2.0 * s2 * s2 * tf)]])
}

/// `omega2` of the differenced model implied by the conditional-model point:
/// `omega2 + (y1_norm_bar2 / sigma2) (delta + rho - 1)^2`.
pub fn differenced_omega2(theta1: &Theta1, y1_norm_bar2: f64) -> f64 {
    let shift = theta1.delta + theta1.rho - 1.0;
    theta1.omega2 + y1_norm_bar2 / theta1.sigma2 * shift * shift
}

fn to_m2(m: &Mat2) -> Matrix2<f64> {
    Matrix2::new(m[0][0], m[0][1], m[1][0], m[1][1])
}

fn to_m3(m: &Mat3) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| m[i][j])
}

fn condition_number(m: DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn condition_number2(m: &Mat2) -> f64 {
    condition_number(DMatrix::from_fn(2, 2, |i, j| m[i][j]))
}

pub fn condition_number3(m: &Mat3) -> f64 {
    condition_number(DMatrix::from_fn(3, 3, |i, j| m[i][j]))
}

/// `A^-1` by an LU solve against the identity.
pub fn inverse3(m: &Mat3) -> Result<Mat3> {
    let lu = to_m3(m).lu();
    let inv = lu
        .solve(&Matrix3::identity())
        .ok_or_else(|| Error::degenerate("3x3 information matrix is singular"))?;
    Ok(std::array::from_fn(|i| {
        std::array::from_fn(|j| inv[(i, j)])
    }))
}

pub fn inverse2(m: &Mat2) -> Result<Mat2> {
    let lu = to_m2(m).lu();
    let inv = lu
        .solve(&Matrix2::identity())
        .ok_or_else(|| Error::degenerate("2x2 information matrix is singular"))?;
    Ok([[inv[(0, 0)], inv[(0, 1)]], [inv[(1, 0)], inv[(1, 1)]]])
}

/// `I^-1 S I^-1` through two linear solves.
pub fn sandwich(info: &Mat2, sigma: &Mat2) -> Result<Mat2> {
    let lu = to_m2(info).lu();
    let left = lu
        .solve(&to_m2(sigma))
        .ok_or_else(|| Error::degenerate("information matrix is singular"))?;
    let out = lu
        .solve(&left.transpose())
        .ok_or_else(|| Error::degenerate("information matrix is singular"))?
        .transpose();
    Ok([[out[(0, 0)], out[(0, 1)]], [out[(1, 0)], out[(1, 1)]]])
}

/// `I^-1 S I^-1` with an explicit inverse, for cross-checking [`sandwich`].
pub fn sandwich_explicit(info: &Mat2, sigma: &Mat2) -> Result<Mat2> {
    let inv = to_m2(info)
        .try_inverse()
        .ok_or_else(|| Error::degenerate("information matrix is singular"))?;
    let out = inv * to_m2(sigma) * inv;
    Ok([[out[(0, 0)], out[(0, 1)]], [out[(1, 0)], out[(1, 1)]]])
}

/// Large-N moments of `tr(A W)/N` for `W = Y'Y` from the zero-initial model
/// with fixed effects normalised so that `sum eta_i^2 = N omega2 sigma2`.
struct Population {
    sigma2: f64,
    omega2: f64,
    /// `B B'`
    v: DMatrix<f64>,
    /// `B 1`
    m: DVector<f64>,
}

impl Population {
    fn new(theta: &Theta, t: usize) -> Result<Self> {
        let mm = build_model_matrices(theta.rho, t)?;
        let v = &mm.b * mm.b.transpose();
        let m = &mm.b * DVector::from_element(t, 1.0);
        Ok(Population {
            sigma2: theta.sigma2,
            omega2: theta.omega2,
            v,
            m,
        })
    }

    fn mean(&self, a: &DMatrix<f64>) -> f64 {
        self.sigma2 * (a * &self.v).trace() + self.omega2 * self.sigma2 * self.m.dot(&(a * &self.m))
    }

    /// Per-individual covariance of `y'Ay` and `y'By`, averaged over individuals.
    fn cov(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let a = (a + a.transpose()) * 0.5;
        let b = (b + b.transpose()) * 0.5;
        let av = &a * &self.v;
        let bv = &b * &self.v;
        let s4 = self.sigma2 * self.sigma2;
        2.0 * s4 * (&av * &bv).trace()
            + 4.0 * self.sigma2 * self.omega2 * self.sigma2 * self.m.dot(&(&av * &b * &self.m))
    }
}

/// Which linear-in-`W` scores [`exact_score_covariance`] evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorePair {
    /// Lancaster's `(rho, sigma2)` score at the truth.
    Lancaster,
    /// The concentrated scores `(S^L, S^{M-L})` at `rho*`.
    Concentrated,
}

/// Limiting covariance of `sqrt(NT)` times the chosen score pair at `theta`,
/// from exact Gaussian quadratic-form moments and the delta method.
pub fn exact_score_covariance(theta: &Theta, t: usize, which: ScorePair) -> Result<Mat2> {
    theta.validate()?;
    check_t(t, 2)?;
    let pop = Population::new(theta, t)?;
    let mm = build_model_matrices(theta.rho, t)?;
    let tf = t as f64;
    let s2 = theta.sigma2;
    let j = shift_matrix(t);
    let ones = DMatrix::from_element(t, t, 1.0);
    let dt = mm.d.transpose();
    // tr(J W D' H) = tr(D' H J W), tr(D W D' H) = tr(D' H D W), and the 11' analogues.
    let a_jd = &dt * &mm.h * &j;
    let a_dd = &dt * &mm.h * &mm.d;
    let o_jd = &dt * &ones * &j;
    let o_dd = &dt * &ones * &mm.d;
    let grads: [Vec<(&DMatrix<f64>, f64)>; 2] = match which {
        ScorePair::Lancaster => {
            let c = tf - 1.0;
            [
                vec![(&a_jd, 1.0 / (s2 * c))],
                vec![(&a_dd, 1.0 / (2.0 * s2 * s2 * c))],
            ]
        }
        ScorePair::Concentrated => {
            let (x, y) = (pop.mean(&a_jd), pop.mean(&a_dd));
            let (p, q) = (pop.mean(&o_jd), pop.mean(&o_dd));
            [
                vec![(&a_jd, 1.0 / y), (&a_dd, -x / (y * y))],
                vec![(&o_jd, 1.0 / (tf * q)), (&o_dd, -p / (tf * q * q))],
            ]
        }
    };
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for k in 0..2 {
            let mut v = 0.0;
            for (a, ca) in &grads[i] {
                for (b, cb) in &grads[k] {
                    v += ca * cb * pop.cov(a, b);
                }
            }
            out[i][k] = tf * v;
        }
    }
    Ok(out)
}

/// Result of the comparison between the conditional and the
/// differenced-data estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyCheck {
    pub delta_plus_rho_minus_one: f64,
    /// `AVar(mile) - AVar(conditional)` for rho.
    pub margin_rho: f64,
    /// Same for sigma2.
    pub margin_sigma2: f64,
    pub knife_edge: bool,
    pub holds: bool,
}

/// Equality tolerance on the knife edge `delta + rho = 1`.
pub const KNIFE_EDGE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterPoint {
    pub t: usize,
    pub rho: f64,
    pub sigma2: f64,
    /// `omega2` of the model the MILE and Lancaster formulas are evaluated at.
    pub omega2: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub delta: Option<f64>,
    /// Conditional-model `omega2`, before the link.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub omega2_conditional: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub y1_norm_bar2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticReport {
    pub point: ParameterPoint,
    pub info_mile: Option<Mat3>,
    pub info_lanc: Mat2,
    pub sigma_lanc: Mat2,
    pub info_cond: Option<Mat2>,
    pub b_t: Option<f64>,
    pub c_t: Option<f64>,
    pub avar_rho: BTreeMap<String, f64>,
    pub avar_sigma2: BTreeMap<String, f64>,
    pub singular_flags: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub efficiency: Option<EfficiencyCheck>,
}

/// MILE and Lancaster asymptotic variances at an unconditional point.
///
/// Rejects `omega2 = 0`, where the MILE information formula does not apply.
pub fn avar_report(theta: &Theta, t: usize) -> Result<AsymptoticReport> {
    theta.validate()?;
    check_t(t, 2)?;
    let mut flags = Vec::new();
    let mut avar_rho = BTreeMap::new();
    let mut avar_sigma2 = BTreeMap::new();

    let m = info_mile(theta, t)?;
    let cn = condition_number3(&m);
    if !(cn <= COND_LIMIT) {
        flags.push(format!(
            "mile information condition number {cn:.3e} exceeds {COND_LIMIT:e}"
        ));
    }
    match inverse3(&m) {
        Ok(inv) => {
            avar_rho.insert("mile".to_string(), inv[0][0]);
            avar_sigma2.insert("mile".to_string(), inv[1][1]);
        }
        Err(e) => flags.push(format!("mile: {e}")),
    }
    let info_m = Some(m);

    let li = info_lancaster(theta, t)?;
    flags.extend(li.singular_flags.iter().cloned());
    match sandwich(&li.info, &li.sigma) {
        Ok(s) => {
            avar_rho.insert("lancaster".to_string(), s[0][0]);
            avar_sigma2.insert("lancaster".to_string(), s[1][1]);
        }
        Err(e) => flags.push(format!("lancaster: {e}")),
    }

    let (b_t, c_t) = if t >= 3 {
        let (b, c) = score_component_variances(theta, t)?;
        if !(b > 0.0) {
            flags.push(format!("b_T = {b:.6e} is not positive"));
        }
        if !(c > 0.0) {
            flags.push(format!("c_T = {c:.6e} is not positive"));
        }
        (Some(b), Some(c))
    } else {
        (None, None)
    };

    Ok(AsymptoticReport {
        point: ParameterPoint {
            t,
            rho: theta.rho,
            sigma2: theta.sigma2,
            omega2: theta.omega2,
            delta: None,
            omega2_conditional: None,
            y1_norm_bar2: None,
        },
        info_mile: info_m,
        info_lanc: li.info,
        sigma_lanc: li.sigma,
        info_cond: None,
        b_t,
        c_t,
        avar_rho,
        avar_sigma2,
        singular_flags: flags,
        efficiency: None,
    })
}

/// Compare MILE and Lancaster on differenced data with the conditional
/// estimator, at linked parameter points.
///
/// `theta_diff`, when given, must agree with the differenced-model point
/// implied by `theta1` and `y1_norm_bar2`.
pub fn avar_compare(
    theta1: &Theta1,
    theta_diff: Option<&Theta>,
    t: usize,
    y1_norm_bar2: f64,
) -> Result<AsymptoticReport> {
    theta1.validate()?;
    let implied = Theta::new(
        theta1.rho,
        theta1.sigma2,
        differenced_omega2(theta1, y1_norm_bar2),
    );
    if let Some(td) = theta_diff {
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
        if rel(td.rho, implied.rho) > 1e-10
            || rel(td.sigma2, implied.sigma2) > 1e-10
            || rel(td.omega2, implied.omega2) > 1e-10
        {
            return Err(Error::invalid(format!(
                "theta_diff {td:?} contradicts the differenced point implied by theta1: \
                 rho = {}, sigma2 = {}, omega2 = {}",
                implied.rho, implied.sigma2, implied.omega2
            )));
        }
    }
    let mut report = avar_report(&implied, t)?;
    let ic = info_conditional(theta1, t, y1_norm_bar2)?;
    let cn = condition_number2(&ic);
    if !(cn <= COND_LIMIT) {
        report.singular_flags.push(format!(
            "conditional information condition number {cn:.3e} exceeds {COND_LIMIT:e}"
        ));
    }
    let inv = inverse2(&ic)?;
    report.avar_rho.insert("conditional".to_string(), inv[0][0]);
    report
        .avar_sigma2
        .insert("conditional".to_string(), inv[1][1]);
    report.info_cond = Some(ic);
    report.point.delta = Some(theta1.delta);
    report.point.omega2_conditional = Some(theta1.omega2);
    report.point.y1_norm_bar2 = Some(y1_norm_bar2);

    let shift = theta1.delta + theta1.rho - 1.0;
    let margin_rho = report.avar_rho["mile"] - inv[0][0];
    let margin_sigma2 = report.avar_sigma2["mile"] - inv[1][1];
    // Tolerate the rounding in user-entered pairs such as (0.9, 0.1).
    let knife_edge = shift.abs() <= 1e-12;
    let holds = if knife_edge {
        margin_rho.abs() <= KNIFE_EDGE_TOL && margin_sigma2.abs() <= KNIFE_EDGE_TOL
    } else {
        margin_rho > 0.0 && margin_sigma2 > 0.0
    };
    if !holds {
        report.singular_flags.push(format!(
            "efficiency ordering violated: margins rho {margin_rho:.3e}, sigma2 {margin_sigma2:.3e}"
        ));
    }
    report.efficiency = Some(EfficiencyCheck {
        delta_plus_rho_minus_one: shift,
        margin_rho,
        margin_sigma2,
        knife_edge,
        holds,
    });
    Ok(report)
}

pub fn report_to_json(reports: &[AsymptoticReport]) -> Result<String> {
    Ok(serde_json::to_string_pretty(reports)?)
}

const CSV_ESTIMATORS: [&str; 3] = ["mile", "lancaster", "conditional"];

/// One row per parameter point; estimators that do not apply leave their
/// columns empty.
pub fn report_to_csv(reports: &[AsymptoticReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = [
        "t",
        "rho",
        "sigma2",
        "omega2",
        "delta",
        "omega2_conditional",
        "y1_norm_bar2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for e in CSV_ESTIMATORS {
        header.push(format!("avar_rho_{e}"));
        header.push(format!("avar_sigma2_{e}"));
    }
    header.extend(
        [
            "b_t",
            "c_t",
            "margin_rho",
            "margin_sigma2",
            "efficiency",
            "flags",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.12e}")).unwrap_or_default();
    for r in reports {
        let p = &r.point;
        let mut row = vec![
            p.t.to_string(),
            format!("{:.12e}", p.rho),
            format!("{:.12e}", p.sigma2),
            format!("{:.12e}", p.omega2),
            opt(p.delta),
            opt(p.omega2_conditional),
            opt(p.y1_norm_bar2),
        ];
        for e in CSV_ESTIMATORS {
            row.push(opt(r.avar_rho.get(e).copied()));
            row.push(opt(r.avar_sigma2.get(e).copied()));
        }
        row.push(opt(r.b_t));
        row.push(opt(r.c_t));
        row.push(opt(r.efficiency.map(|e| e.margin_rho)));
        row.push(opt(r.efficiency.map(|e| e.margin_sigma2)));
        row.push(match r.efficiency {
            None => String::new(),
            Some(e) if e.knife_edge && e.holds => "equal".into(),
            Some(e) if e.holds => "conditional smaller".into(),
            Some(_) => "violated".into(),
        });
        row.push(r.singular_flags.join("; "));
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
}
