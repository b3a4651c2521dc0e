//! Predicted and empirical moments of the invariant statistics under the
//! conditional, differenced and random-effects treatments of the initial
//! condition, plus the Blundell–Bond moment and a Lindeberg diagnostic.
//!
//! Moment vectors use one canonical order: the first-moment block (when the
//! family has one), then the upper triangle of the second-moment block row
//! by row.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dgp::{difference_panel, PanelData};
use crate::kernels::build_model_matrices;
use crate::likelihoods::{Theta, Theta1};
use crate::optim::nelder_mead;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentFamily {
    Conditional,
    Differenced,
    IncidentalInitial,
    Cre,
    BlundellBond,
}

impl MomentFamily {
    pub fn name(&self) -> &'static str {
        match self {
            MomentFamily::Conditional => "conditional",
            MomentFamily::Differenced => "differenced",
            MomentFamily::IncidentalInitial => "incidental-initial",
            MomentFamily::Cre => "cre",
            MomentFamily::BlundellBond => "blundell-bond",
        }
    }

    /// Number of non-redundant moments for `t` periods after the first.
    pub fn n_moments(&self, t: usize) -> usize {
        let tri = |k: usize| k * (k + 1) / 2;
        match self {
            MomentFamily::Conditional => t + tri(t),
            MomentFamily::Differenced => tri(t),
            MomentFamily::IncidentalInitial | MomentFamily::BlundellBond => tri(t + 1),
            MomentFamily::Cre => (t + 1) + tri(t + 1),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            MomentFamily::Conditional => 4,
            MomentFamily::Differenced => 3,
            MomentFamily::IncidentalInitial => 5,
            MomentFamily::Cre => 7,
            MomentFamily::BlundellBond => 4,
        }
    }
}

impl std::str::FromStr for MomentFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conditional" => Ok(MomentFamily::Conditional),
            "differenced" => Ok(MomentFamily::Differenced),
            "incidental-initial" => Ok(MomentFamily::IncidentalInitial),
            "cre" => Ok(MomentFamily::Cre),
            "blundell-bond" => Ok(MomentFamily::BlundellBond),
            other => Err(Error::invalid(format!("unknown moment family {other:?}"))),
        }
    }
}

/// A first-moment row (optional) and a symmetric second-moment block.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentBlocks {
    pub first: Option<DVector<f64>>,
    pub second: DMatrix<f64>,
}

impl MomentBlocks {
    /// Canonical vectorisation.
    pub fn vectorize(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.first.iter().flat_map(|f| f.iter().copied()).collect();
        let k = self.second.nrows();
        for i in 0..k {
            for j in i..k {
                out.push(self.second[(i, j)]);
            }
        }
        out
    }

    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .first
            .iter()
            .flat_map(|f| (1..=f.len()).map(|i| format!("m1[{i}]")))
            .collect();
        let k = self.second.nrows();
        for i in 0..k {
            for j in i..k {
                out.push(format!("m2[{},{}]", i + 1, j + 1));
            }
        }
        out
    }

    /// Smallest eigenvalue of the second-moment block.
    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.second.clone()).eigenvalues.min()
    }
}

fn check_2x2_psd(m: &[[f64; 2]; 2], what: &str) -> Result<()> {
    let tol = 1e-12 * (m[0][0].abs() + m[1][1].abs()).max(1.0);
    if m.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what} must be finite")));
    }
    if (m[0][1] - m[1][0]).abs() > tol {
        return Err(Error::invalid(format!("{what} must be symmetric")));
    }
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if m[0][0] < -tol || m[1][1] < -tol || det < -tol {
        return Err(Error::invalid(format!(
            "{what} must be positive semi-definite, got {m:?}"
        )));
    }
    Ok(())
}

/// Average with the transpose so blocks are symmetric to the last bit.
fn sym(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// `[rho e1, 1] A [rho e1, 1]'` for a 2x2 `A`.
fn level_loading(rho: f64, k: usize, a: &[[f64; 2]; 2]) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(k, 2);
    l[(0, 0)] = rho;
    for i in 0..k {
        l[(i, 1)] = 1.0;
    }
    let am = DMatrix::from_fn(2, 2, |i, j| a[i][j]);
    &l * am * l.transpose()
}

/// Predicted moments conditional on the first column `y1`.
pub fn conditional_moments(theta1: &Theta1, y1: &DVector<f64>, t: usize) -> Result<MomentBlocks> {
    theta1.validate()?;
    let n = y1.len();
    let yy = y1.norm_squared();
    if !(yy > 0.0) {
        return Err(Error::invalid(
            "conditional moments need a nonzero first column",
        ));
    }
    let mm = build_model_matrices(theta1.rho, t)?;
    let (rho, s2, delta, w) = (theta1.rho, theta1.sigma2, theta1.delta, theta1.omega2);
    let ones = DVector::from_element(t, 1.0);
    let mut e1 = DVector::zeros(t);
    e1[0] = 1.0;
    let mean = &mm.b * (&e1 * rho + &ones * delta);
    let w_y1 = yy / (s2 * n as f64);
    let core = DMatrix::from_element(t, t, w) + DMatrix::identity(t, t);
    let second = (&mm.b * core * mm.b.transpose()) * s2 + &mean * mean.transpose() * (s2 * w_y1);
    Ok(MomentBlocks {
        first: Some(mean),
        second: sym(second),
    })
}

/// `E[Y~'Y~/N] = sigma2 B (omega2 11' + I) B'` for the differenced panel.
pub fn differenced_moments(theta: &Theta, t: usize) -> Result<MomentBlocks> {
    theta.validate()?;
    let mm = build_model_matrices(theta.rho, t)?;
    let core = DMatrix::from_element(t, t, theta.omega2) + DMatrix::identity(t, t);
    Ok(MomentBlocks {
        first: None,
        second: sym((&mm.b * core * mm.b.transpose()) * theta.sigma2),
    })
}

/// Parameters of the random-effects treatments of the unobserved `y_{i,0}`.
/// The 2x2 matrices are ordered `(y0, eta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RandomEffectsParams {
    IncidentalInitial {
        rho: f64,
        sigma2: f64,
        omega_tau2: [[f64; 2]; 2],
    },
    Cre {
        rho: f64,
        sigma2: f64,
        iota: [f64; 2],
        phi: [[f64; 2]; 2],
    },
    BlundellBond {
        rho: f64,
        sigma2: f64,
        omega_eta2: f64,
        sigma0_2: f64,
    },
}

impl RandomEffectsParams {
    pub fn family(&self) -> MomentFamily {
        match self {
            RandomEffectsParams::IncidentalInitial { .. } => MomentFamily::IncidentalInitial,
            RandomEffectsParams::Cre { .. } => MomentFamily::Cre,
            RandomEffectsParams::BlundellBond { .. } => MomentFamily::BlundellBond,
        }
    }
}

/// Predicted moments of the full `(T+1)`-column panel `[y1, Y]`.
pub fn random_effects_moments(params: &RandomEffectsParams, t: usize) -> Result<MomentBlocks> {
    let k = t + 1;
    let check = |rho: f64, s2: f64| -> Result<()> {
        if !rho.is_finite() {
            return Err(Error::invalid("rho must be finite"));
        }
        if !(s2 > 0.0) {
            return Err(Error::invalid(format!("sigma2 must be positive, got {s2}")));
        }
        Ok(())
    };
    match params {
        RandomEffectsParams::IncidentalInitial {
            rho,
            sigma2,
            omega_tau2,
        } => {
            check(*rho, *sigma2)?;
            check_2x2_psd(omega_tau2, "omega_tau2")?;
            let mm = build_model_matrices(*rho, k)?;
            let core = level_loading(*rho, k, omega_tau2) + DMatrix::identity(k, k);
            Ok(MomentBlocks {
                first: None,
                second: sym((&mm.b * core * mm.b.transpose()) * *sigma2),
            })
        }
        RandomEffectsParams::Cre {
            rho,
            sigma2,
            iota,
            phi,
        } => {
            check(*rho, *sigma2)?;
            check_2x2_psd(phi, "phi")?;
            if iota.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("iota must be finite"));
            }
            let mm = build_model_matrices(*rho, k)?;
            let mut base = DVector::from_element(k, iota[1]);
            base[0] += rho * iota[0];
            let first = &mm.b * base;
            let total = [
                [phi[0][0] + iota[0] * iota[0], phi[0][1] + iota[0] * iota[1]],
                [phi[1][0] + iota[1] * iota[0], phi[1][1] + iota[1] * iota[1]],
            ];
            let core = level_loading(*rho, k, &total) + DMatrix::identity(k, k) * *sigma2;
            Ok(MomentBlocks {
                first: Some(first),
                second: sym(&mm.b * core * mm.b.transpose()),
            })
        }
        RandomEffectsParams::BlundellBond {
            rho,
            sigma2,
            omega_eta2,
            sigma0_2,
        } => {
            check(*rho, *sigma2)?;
            if rho.abs() >= 1.0 {
                return Err(Error::invalid(format!(
                    "blundell-bond needs |rho| < 1, got {rho}"
                )));
            }
            if !(*omega_eta2 >= 0.0) || !(*sigma0_2 >= 0.0) {
                return Err(Error::invalid(
                    "omega_eta2 and sigma0_2 must be nonnegative",
                ));
            }
            let mm = build_model_matrices(*rho, k)?;
            let mut noise = DMatrix::identity(k, k) * *sigma2;
            noise[(0, 0)] += sigma0_2 * rho * rho;
            let mut b = DVector::from_element(k, 1.0);
            b[0] += rho / (1.0 - rho);
            let effect = &b * b.transpose() * (sigma2 * omega_eta2);
            Ok(MomentBlocks {
                first: None,
                second: sym(&mm.b * (noise + effect) * mm.b.transpose()),
            })
        }
    }
}

/// Sample moments with per-moment standard errors, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMoments {
    pub blocks: MomentBlocks,
    pub std_errors: Vec<f64>,
}

fn mean_and_se(contrib: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mean = contrib.clone().sum::<f64>() / nf;
    let var = contrib.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (nf - 1.0).max(1.0);
    (mean, (var / nf).sqrt())
}

fn second_block(y: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let (n, k) = (y.nrows(), y.ncols());
    let mut m = DMatrix::zeros(k, k);
    let mut se = Vec::with_capacity(k * (k + 1) / 2);
    for a in 0..k {
        for b in a..k {
            let (mean, s) = mean_and_se((0..n).map(|i| y[(i, a)] * y[(i, b)]), n);
            m[(a, b)] = mean;
            m[(b, a)] = mean;
            se.push(s);
        }
    }
    (m, se)
}

/// The sample analogues of a family's moments.
pub fn empirical_moments(family: MomentFamily, data: &PanelData) -> Result<EmpiricalMoments> {
    let n = data.n();
    if n < 2 {
        return Err(Error::invalid("need at least two individuals"));
    }
    match family {
        MomentFamily::Conditional => {
            let y1 = data.y1();
            let yy = y1.norm_squared();
            if !(yy > 0.0) {
                return Err(Error::invalid(
                    "conditional moments need a nonzero first column",
                ));
            }
            let y = data.y();
            let scale = yy / n as f64;
            let mut first = DVector::zeros(y.ncols());
            let mut se = Vec::new();
            for c in 0..y.ncols() {
                let (m, s) = mean_and_se((0..n).map(|i| y1[i] * y[(i, c)] / scale), n);
                first[c] = m;
                se.push(s);
            }
            let (second, se2) = second_block(&y);
            se.extend(se2);
            Ok(EmpiricalMoments {
                blocks: MomentBlocks {
                    first: Some(first),
                    second,
                },
                std_errors: se,
            })
        }
        MomentFamily::Differenced => {
            let y = difference_panel(data).y();
            let (second, se) = second_block(&y);
            Ok(EmpiricalMoments {
                blocks: MomentBlocks {
                    first: None,
                    second,
                },
                std_errors: se,
            })
        }
        MomentFamily::IncidentalInitial | MomentFamily::BlundellBond => {
            let (second, se) = second_block(&data.y_full);
            Ok(EmpiricalMoments {
                blocks: MomentBlocks {
                    first: None,
                    second,
                },
                std_errors: se,
            })
        }
        MomentFamily::Cre => {
            let y = &data.y_full;
            let mut first = DVector::zeros(y.ncols());
            let mut se = Vec::new();
            for c in 0..y.ncols() {
                let (m, s) = mean_and_se((0..n).map(|i| y[(i, c)]), n);
                first[c] = m;
                se.push(s);
            }
            let (second, se2) = second_block(y);
            se.extend(se2);
            Ok(EmpiricalMoments {
                blocks: MomentBlocks {
                    first: Some(first),
                    second,
                },
                std_errors: se,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub family: MomentFamily,
    pub labels: Vec<String>,
    pub predicted: Vec<f64>,
    pub empirical: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Euclidean norm of `empirical - predicted` over the canonical moment set.
    pub residual_norm: f64,
    pub n_moments: usize,
    pub n_params: usize,
}

impl MomentReport {
    /// `sqrt(sum se_k^2)`, the scale `residual_norm` is compared against.
    pub fn std_error_norm(&self) -> f64 {
        self.std_errors.iter().map(|s| s * s).sum::<f64>().sqrt()
    }

    /// Largest `|empirical - predicted| / se` across moments.
    pub fn max_abs_z(&self) -> f64 {
        self.predicted
            .iter()
            .zip(&self.empirical)
            .zip(&self.std_errors)
            .map(|((p, e), s)| (e - p).abs() / s)
            .fold(0.0, f64::max)
    }
}

pub fn moment_report(
    family: MomentFamily,
    predicted: &MomentBlocks,
    data: &PanelData,
) -> Result<MomentReport> {
    let emp = empirical_moments(family, data)?;
    let p = predicted.vectorize();
    let e = emp.blocks.vectorize();
    if p.len() != e.len() {
        return Err(Error::invalid(format!(
            "predicted moments have {} entries but the data give {}",
            p.len(),
            e.len()
        )));
    }
    let expected = family.n_moments(data.t());
    if p.len() != expected {
        return Err(Error::invalid(format!(
            "{} moments for T = {} should number {expected}, got {}",
            family.name(),
            data.t(),
            p.len()
        )));
    }
    let residual_norm = p
        .iter()
        .zip(&e)
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        .sqrt();
    Ok(MomentReport {
        family,
        labels: predicted.labels(),
        predicted: p,
        empirical: e,
        std_errors: emp.std_errors,
        residual_norm,
        n_moments: expected,
        n_params: family.n_params(),
    })
}

/// CSV with columns `family, moment_index, predicted, empirical, residual`.
pub fn report_to_csv(reports: &[MomentReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "family",
        "moment_index",
        "predicted",
        "empirical",
        "residual",
    ])?;
    for r in reports {
        for (k, (p, e)) in r.predicted.iter().zip(&r.empirical).enumerate() {
            w.write_record([
                r.family.name().to_string(),
                k.to_string(),
                format!("{p:.12e}"),
                format!("{e:.12e}"),
                format!("{:.12e}", e - p),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
}

/// Blundell–Bond moment `N^-1 sum (y2 - y1)(y3 - rho y2)` with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bb98Moment {
    pub value: f64,
    pub std_error: f64,
    pub n: usize,
}

impl Bb98Moment {
    pub fn z(&self) -> f64 {
        self.value / self.std_error
    }
}

pub fn bb98_moment(data: &PanelData, rho: f64) -> Result<Bb98Moment> {
    if data.t() < 2 {
        return Err(Error::invalid(
            "the Blundell–Bond moment needs three observed periods (T >= 2)",
        ));
    }
    let n = data.n();
    if n < 2 {
        return Err(Error::invalid("need at least two individuals"));
    }
    let y = &data.y_full;
    let (value, std_error) = mean_and_se(
        (0..n).map(|i| (y[(i, 1)] - y[(i, 0)]) * (y[(i, 2)] - rho * y[(i, 1)])),
        n,
    );
    Ok(Bb98Moment {
        value,
        std_error,
        n,
    })
}

/// `max_j y0_j^2 / sum_i y0_i^2`: the largest share of any single term in
/// `sum_i y0_i u_it`. `sigma2` cancels but is checked.
pub fn lindeberg_ratio(y0: &DVector<f64>, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::invalid(format!(
            "sigma2 must be positive, got {sigma2}"
        )));
    }
    let total: f64 = y0.iter().map(|v| v * v * sigma2).sum();
    if !(total > 0.0) {
        return Err(Error::invalid(
            "lindeberg ratio is undefined for an all-zero vector",
        ));
    }
    let max = y0.iter().map(|v| v * v * sigma2).fold(0.0, f64::max);
    Ok(max / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdFit {
    pub params: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Identity-weighted minimum distance: minimise `|empirical - predict(p)|^2`.
/// `predict` returns `None` outside the parameter space.
pub fn minimum_distance<F>(predict: F, empirical: &[f64], x0: &[f64], max_iter: usize) -> MdFit
where
    F: Fn(&[f64]) -> Option<Vec<f64>>,
{
    let objective = |p: &[f64]| match predict(p) {
        Some(m) if m.len() == empirical.len() => m
            .iter()
            .zip(empirical)
            .map(|(a, b)| (a - b) * (a - b))
            .sum(),
        _ => f64::INFINITY,
    };
    let fit = nelder_mead(objective, x0, 0.1, 1e-14, max_iter);
    MdFit {
        params: fit.x,
        residual_norm: fit.value.sqrt(),
        iterations: fit.iterations,
        converged: fit.converged,
    }
}

/// Minimum-distance fit of `(rho, sigma2, omega2)` to the differenced moments.
pub fn fit_differenced(data: &PanelData, start: &Theta) -> Result<MdFit> {
    let emp = empirical_moments(MomentFamily::Differenced, data)?
        .blocks
        .vectorize();
    let t = data.t();
    Ok(minimum_distance(
        |p| {
            let th = Theta::from_slice(p);
            differenced_moments(&th, t).ok().map(|m| m.vectorize())
        },
        &emp,
        &start.to_array(),
        5000,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{simulate, DgpConfig, EtaLaw, InitRegime};
    use crate::kernels::sample_orthogonal;

    #[test]
    fn moment_counts() {
        for t in 2..9 {
            let tri = |k: usize| k * (k + 1) / 2;
            assert_eq!(
                MomentFamily::Conditional.n_moments(t),
                (t + 1) * (t + 2) / 2 - 1
            );
            assert_eq!(MomentFamily::Differenced.n_moments(t), tri(t));
            assert_eq!(MomentFamily::Cre.n_moments(t), t + 1 + tri(t + 1));
            let p = differenced_moments(&Theta::new(0.3, 1.0, 1.0), t).unwrap();
            assert_eq!(p.vectorize().len(), tri(t));
            assert_eq!(p.labels().len(), tri(t));
        }
    }

    #[test]
    fn trivial_parameter_cases() {
        let y1 = DVector::from_element(10, 1.0);
        let c = conditional_moments(&Theta1::new(0.0, 2.0, 0.0, 0.0), &y1, 3).unwrap();
        assert!(c.first.as_ref().unwrap().iter().all(|v| *v == 0.0));
        assert_eq!(c.second, DMatrix::identity(3, 3) * 2.0);
        let d = differenced_moments(&Theta::new(0.0, 1.5, 0.0), 4).unwrap();
        assert_eq!(d.second, DMatrix::identity(4, 4) * 1.5);
        let bb = random_effects_moments(
            &RandomEffectsParams::BlundellBond {
                rho: 0.4,
                sigma2: 1.0,
                omega_eta2: 0.0,
                sigma0_2: 0.0,
            },
            3,
        )
        .unwrap();
        let b = build_model_matrices(0.4, 4).unwrap().b;
        assert!((bb.second - &b * b.transpose()).abs().max() < 1e-14);
    }

    #[test]
    fn rejects_bad_inputs() {
        let y1 = DVector::zeros(5);
        assert!(conditional_moments(&Theta1::new(0.5, 1.0, 0.5, 1.0), &y1, 3).is_err());
        let bad = RandomEffectsParams::BlundellBond {
            rho: 1.0,
            sigma2: 1.0,
            omega_eta2: 1.0,
            sigma0_2: 1.0,
        };
        assert!(random_effects_moments(&bad, 3).is_err());
        let bad = RandomEffectsParams::IncidentalInitial {
            rho: 0.5,
            sigma2: 1.0,
            omega_tau2: [[1.0, 2.0], [2.0, 1.0]],
        };
        assert!(random_effects_moments(&bad, 3).is_err());
        assert!(lindeberg_ratio(&DVector::zeros(4), 1.0).is_err());
    }

    #[test]
    fn predicted_blocks_are_psd() {
        let y1 = DVector::from_fn(50, |i, _| (i as f64).sin());
        let blocks = [
            conditional_moments(&Theta1::new(0.7, 1.0, -0.3, 0.5), &y1, 5).unwrap(),
            differenced_moments(&Theta::new(-0.5, 2.0, 4.0), 5).unwrap(),
            random_effects_moments(
                &RandomEffectsParams::Cre {
                    rho: 0.9,
                    sigma2: 1.0,
                    iota: [1.0, -0.5],
                    phi: [[1.0, 0.3], [0.3, 0.5]],
                },
                5,
            )
            .unwrap(),
        ];
        for b in &blocks {
            assert!(b.min_eigenvalue() >= -1e-10 * b.second.trace());
            assert_eq!(b.second, b.second.transpose());
        }
    }

    #[test]
    fn cre_matches_incidental_initial() {
        let (rho, s2) = (0.6, 1.3);
        let iota = [0.8, -0.4];
        let phi = [[0.5, 0.1], [0.1, 0.7]];
        let cre = random_effects_moments(
            &RandomEffectsParams::Cre {
                rho,
                sigma2: s2,
                iota,
                phi,
            },
            4,
        )
        .unwrap();
        let total: [[f64; 2]; 2] =
            std::array::from_fn(|i| std::array::from_fn(|j| (phi[i][j] + iota[i] * iota[j]) / s2));
        let inc = random_effects_moments(
            &RandomEffectsParams::IncidentalInitial {
                rho,
                sigma2: s2,
                omega_tau2: total,
            },
            4,
        )
        .unwrap();
        assert!((cre.second - inc.second).abs().max() < 1e-12);
    }

    #[test]
    fn conditional_reduces_to_differenced_without_y1_weight() {
        // With omega_y1 -> 0 the extra term vanishes and the link is the identity.
        let th1 = Theta1::new(0.4, 1.2, 0.9, 0.8);
        let y1 = DVector::from_element(1_000_000, 1e-6);
        let c = conditional_moments(&th1, &y1, 4).unwrap();
        let d = differenced_moments(&Theta::new(0.4, 1.2, 0.8), 4).unwrap();
        assert!((c.second - d.second).abs().max() < 1e-10);
    }

    #[test]
    fn lindeberg_trivial_cases() {
        assert!(
            (lindeberg_ratio(&DVector::from_element(100, 1.0), 2.0).unwrap() - 0.01).abs() < 1e-15
        );
        let mut v = DVector::zeros(10);
        v[0] = 5.0;
        assert_eq!(lindeberg_ratio(&v, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn conditional_empirical_invariance() {
        let d = simulate(
            &DgpConfig::new(0.5, 1.0, 30, 3, 7)
                .with_eta(EtaLaw::ProjectedOnInitial {
                    delta: 0.5,
                    omega2: 1.0,
                })
                .with_init(InitRegime::IidNormal { var: 1.0 }),
        )
        .unwrap();
        let g = sample_orthogonal(30, Some(&d.y1()), 3).unwrap();
        let a = empirical_moments(MomentFamily::Conditional, &d)
            .unwrap()
            .blocks
            .vectorize();
        let b = empirical_moments(MomentFamily::Conditional, &d.rotated(&g).unwrap())
            .unwrap()
            .blocks
            .vectorize();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn differenced_md_fit_recovers_truth() {
        let d = simulate(
            &DgpConfig::new(0.5, 1.0, 20_000, 4, 3).with_init(InitRegime::Constant { k: 1.0 }),
        )
        .unwrap();
        let fit = fit_differenced(&d, &Theta::new(0.2, 0.8, 0.5)).unwrap();
        assert!((fit.params[0] - 0.5).abs() < 0.05, "{fit:?}");
    }
}
