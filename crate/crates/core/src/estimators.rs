//! Point estimators: the invariant likelihood estimator, its conditional
//! version, and Lancaster's estimator with full root enumeration.
//!
//! Every objective is one-dimensional after profiling, so each search is a
//! dense grid over `rho` followed by golden-section refinement and a
//! bisection polish on the analytic profile slope.

use serde::{Deserialize, Serialize};

use crate::dgp::PanelData;
use crate::kernels::{conditional_invariant, maximal_invariant};
use crate::likelihoods::{Profile, QuadForms, Theta, Theta1, OMEGA2_MAX};
use crate::optim::{bisect, golden_section_max};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionRule {
    DhaeneJochmans,
    KruinigerHessian,
    MinAbsSml,
    None,
}

impl SelectionRule {
    pub const ALL: [SelectionRule; 3] = [
        SelectionRule::DhaeneJochmans,
        SelectionRule::KruinigerHessian,
        SelectionRule::MinAbsSml,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SelectionRule::DhaeneJochmans => "dhaene-jochmans",
            SelectionRule::KruinigerHessian => "kruiniger-hessian",
            SelectionRule::MinAbsSml => "min-abs-sml",
            SelectionRule::None => "none",
        }
    }
}

impl std::str::FromStr for SelectionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dhaene-jochmans" => Ok(SelectionRule::DhaeneJochmans),
            "kruiniger-hessian" => Ok(SelectionRule::KruinigerHessian),
            "min-abs-sml" => Ok(SelectionRule::MinAbsSml),
            "none" => Ok(SelectionRule::None),
            other => Err(Error::invalid(format!(
                "unknown selection rule {other:?} (expected dhaene-jochmans, kruiniger-hessian or min-abs-sml)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Mile,
    Conditional,
    Lancaster,
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Mile => "mile",
            EstimatorKind::Conditional => "conditional",
            EstimatorKind::Lancaster => "lancaster",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub rho_bounds: (f64, f64),
    pub grid_points: usize,
    pub gradient_tol: f64,
    pub max_refine_iters: usize,
    pub lancaster_rule: SelectionRule,
    /// Half-width of the interval around the within estimator that the
    /// Dhaene–Jochmans rule reports.
    pub dj_halfwidth: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            rho_bounds: (-0.95, 1.40),
            grid_points: 801,
            gradient_tol: 1e-9,
            max_refine_iters: 200,
            lancaster_rule: SelectionRule::MinAbsSml,
            dj_halfwidth: 1.0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.rho_bounds;
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(Error::invalid(format!(
                "rho_bounds must be finite with lower < upper, got ({lo}, {hi})"
            )));
        }
        if self.grid_points < 51 {
            return Err(Error::invalid(format!(
                "grid_points must be >= 51, got {}",
                self.grid_points
            )));
        }
        if !(self.gradient_tol > 0.0) {
            return Err(Error::invalid("gradient_tol must be positive"));
        }
        if self.max_refine_iters == 0 {
            return Err(Error::invalid("max_refine_iters must be positive"));
        }
        if !(self.dj_halfwidth > 0.0) {
            return Err(Error::invalid("dj_halfwidth must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        let (lo, hi) = self.rho_bounds;
        let m = self.grid_points - 1;
        (0..=m)
            .map(|i| lo + (hi - lo) * i as f64 / m as f64)
            .collect()
    }
}

/// Estimated parameters; `omega2` and `delta` are present only where the
/// estimator identifies them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaHat {
    pub rho: f64,
    pub sigma2: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub omega2: Option<f64>,
}

impl ThetaHat {
    pub fn theta(&self) -> Option<Theta> {
        self.omega2.map(|w| Theta::new(self.rho, self.sigma2, w))
    }

    pub fn theta1(&self) -> Option<Theta1> {
        match (self.delta, self.omega2) {
            (Some(d), Some(w)) => Some(Theta1::new(self.rho, self.sigma2, d, w)),
            _ => None,
        }
    }
}

/// A local maximum of Lancaster's concentrated objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LancasterRoot {
    pub rho: f64,
    pub sigma2: f64,
    /// `|S^{M-L}(rho)|`
    pub score_m_l_abs: f64,
    /// `S^L(rho)` after bisection.
    pub score_l: f64,
    /// `d S^L / d rho`, negative at a local maximum.
    pub score_slope: f64,
    /// Second difference of the concentrated objective (step 1e-4).
    pub second_difference: f64,
    pub objective: f64,
    /// Largest eigenvalue of the `(rho, sigma2)` Hessian of Lancaster's objective.
    pub hessian_max_eig: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub estimator: EstimatorKind,
    pub theta_hat: ThetaHat,
    pub objective_at_max: f64,
    pub converged: bool,
    /// Norm of the projected gradient of the full objective at the estimate.
    pub gradient_norm: f64,
    pub at_rho_boundary: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_local_maxima: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub all_roots: Vec<LancasterRoot>,
    pub selection_rule: SelectionRule,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub within_rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dj_interval: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
}

fn check_dims(data: &PanelData) -> Result<()> {
    let (n, t) = (data.n(), data.t());
    if t < 2 {
        return Err(Error::invalid(format!(
            "need T >= 2 periods after y1, got {t}"
        )));
    }
    if n < t + 1 {
        return Err(Error::invalid(format!(
            "need N >= T + 1 individuals (N={n}, T={t})"
        )));
    }
    Ok(())
}

fn require_zero_initial(data: &PanelData, what: &str) -> Result<()> {
    if !data.has_zero_initial() {
        return Err(Error::invalid(format!(
            "{what} needs a zero first column; difference the panel first (difference_panel) \
             or use the conditional estimator"
        )));
    }
    Ok(())
}

/// Location of the maximum of a profiled objective over the rho grid.
struct Located {
    rho: f64,
    at_boundary: bool,
    /// Profile slope at `rho` (zeroed when it points out of the box at a bound).
    projected_slope: f64,
}

/// Grid, golden section, then bisection on the analytic slope.
fn maximise_profile<V, S>(value: V, slope: S, cfg: &SearchConfig) -> Result<Located>
where
    V: Fn(f64) -> Option<f64>,
    S: Fn(f64) -> Option<f64>,
{
    let grid = cfg.grid();
    let vals: Vec<f64> = grid
        .iter()
        .map(|&r| {
            value(r)
                .filter(|v| v.is_finite())
                .unwrap_or(f64::NEG_INFINITY)
        })
        .collect();
    let (best, best_val) =
        vals.iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
        );
    if best_val == f64::NEG_INFINITY {
        return Err(Error::degenerate(
            "profile objective is undefined on the whole rho grid",
        ));
    }
    let (lo, hi) = cfg.rho_bounds;
    let last = grid.len() - 1;
    let eval = |r: f64| {
        value(r)
            .filter(|v| v.is_finite())
            .unwrap_or(f64::NEG_INFINITY)
    };
    let a = grid[best.saturating_sub(1)];
    let b = grid[(best + 1).min(last)];
    let gs = golden_section_max(eval, a, b, 1e-12 * (hi - lo), cfg.max_refine_iters);
    let mut rho = gs.x;
    let mut val = gs.value;

    // Polish on the slope when it changes sign across the bracket.
    if let (Some(sa), Some(sb)) = (slope(a), slope(b)) {
        if sa > 0.0 && sb < 0.0 {
            if let Some(r) = bisect(
                |r| slope(r).unwrap_or(f64::NAN),
                a,
                b,
                1e-15,
                cfg.max_refine_iters,
            ) {
                let v = eval(r);
                if v >= val - 1e-12 * val.abs().max(1.0) {
                    rho = r;
                    val = v;
                }
            }
        }
    }
    let _ = val;
    let s = slope(rho).unwrap_or(f64::NAN);
    let tol_edge = 1e-9 * (hi - lo);
    let at_boundary = (rho - lo).abs() <= tol_edge || (hi - rho).abs() <= tol_edge;
    let projected_slope =
        if ((rho - lo).abs() <= tol_edge && s < 0.0) || ((hi - rho).abs() <= tol_edge && s > 0.0) {
            0.0
        } else {
            s
        };
    Ok(Located {
        rho,
        at_boundary,
        projected_slope,
    })
}

/// Zero the components of `g` that push `x` out of `[lo, hi]` when `x` sits on a bound.
fn projected(g: f64, x: f64, lo: f64, hi: f64) -> f64 {
    if (x <= lo && g < 0.0) || (x >= hi && g > 0.0) {
        0.0
    } else {
        g
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn boundary_warning(rho: f64, cfg: &SearchConfig) -> String {
    format!(
        "maximum at the edge of rho_bounds ({}, {}): rho_hat = {rho}",
        cfg.rho_bounds.0, cfg.rho_bounds.1
    )
}

/// Maximise the invariant likelihood of `Y = [y_2..y_{T+1}]`.
pub fn estimate_mile(data: &PanelData, cfg: &SearchConfig) -> Result<EstimationResult> {
    cfg.validate()?;
    check_dims(data)?;
    require_zero_initial(data, "estimate_mile")?;
    let qf = QuadForms::new(&maximal_invariant(&data.y())?)?;
    estimate_mile_forms(&qf, cfg)
}

/// [`estimate_mile`] on precomputed quadratic forms.
pub fn estimate_mile_forms(qf: &QuadForms, cfg: &SearchConfig) -> Result<EstimationResult> {
    let loc = maximise_profile(
        |r| qf.mile_profile(r).ok().map(|p| p.value),
        |r| {
            qf.mile_profile(r)
                .ok()
                .and_then(|p| qf.mile_profile_slope(&p).ok())
        },
        cfg,
    )?;
    let p: Profile = qf.mile_profile(loc.rho)?;
    let th = Theta::new(p.rho, p.sigma2, p.omega2);
    let (g, _) = qf.q_mile_derivatives(&th);
    let grad = [
        loc.projected_slope,
        g[1],
        projected(g[2], p.omega2, 0.0, OMEGA2_MAX),
    ];
    let gradient_norm = norm(&grad);
    let mut warnings = Vec::new();
    if loc.at_boundary {
        warnings.push(boundary_warning(p.rho, cfg));
    }
    Ok(EstimationResult {
        estimator: EstimatorKind::Mile,
        theta_hat: ThetaHat {
            rho: p.rho,
            sigma2: p.sigma2,
            delta: None,
            omega2: Some(p.omega2),
        },
        objective_at_max: qf.q_mile(&th),
        converged: gradient_norm < cfg.gradient_tol,
        gradient_norm,
        at_rho_boundary: loc.at_boundary,
        n_local_maxima: None,
        all_roots: Vec::new(),
        selection_rule: SelectionRule::None,
        within_rho: None,
        dj_interval: None,
        warnings,
    })
}

/// Maximise the likelihood of `(Z1, Z2'Z2)` conditional on the first column.
pub fn estimate_mile_conditional(data: &PanelData, cfg: &SearchConfig) -> Result<EstimationResult> {
    cfg.validate()?;
    check_dims(data)?;
    let y1 = data.y1();
    if y1.norm() == 0.0 {
        return Err(Error::invalid(
            "the first column is identically zero, so there is nothing to condition on; use estimate_mile",
        ));
    }
    let qf = QuadForms::new(&conditional_invariant(&data.y(), &y1)?)?;
    estimate_conditional_forms(&qf, cfg)
}

/// [`estimate_mile_conditional`] on precomputed quadratic forms.
pub fn estimate_conditional_forms(qf: &QuadForms, cfg: &SearchConfig) -> Result<EstimationResult> {
    if !qf.is_conditional() {
        return Err(Error::invalid(
            "conditional estimation needs conditional invariant statistics",
        ));
    }
    let loc = maximise_profile(
        |r| qf.conditional_profile(r).ok().map(|p| p.value),
        |r| {
            qf.conditional_profile(r)
                .ok()
                .and_then(|p| qf.conditional_profile_slope(&p).ok())
        },
        cfg,
    )?;
    let p = qf.conditional_profile(loc.rho)?;
    let th = Theta1::new(p.rho, p.sigma2, p.delta, p.omega2);
    let g = qf.q_mile_conditional_gradient(&th)?;
    let grad = [
        loc.projected_slope,
        g[1],
        g[2],
        projected(g[3], p.omega2, 0.0, OMEGA2_MAX),
    ];
    let gradient_norm = norm(&grad);
    let mut warnings = Vec::new();
    if loc.at_boundary {
        warnings.push(boundary_warning(p.rho, cfg));
    }
    Ok(EstimationResult {
        estimator: EstimatorKind::Conditional,
        theta_hat: ThetaHat {
            rho: p.rho,
            sigma2: p.sigma2,
            delta: Some(p.delta),
            omega2: Some(p.omega2),
        },
        objective_at_max: qf.q_mile_conditional(&th)?,
        converged: gradient_norm < cfg.gradient_tol,
        gradient_norm,
        at_rho_boundary: loc.at_boundary,
        n_local_maxima: None,
        all_roots: Vec::new(),
        selection_rule: SelectionRule::None,
        within_rho: None,
        dj_interval: None,
        warnings,
    })
}

/// Enumerate the local maxima of Lancaster's concentrated objective and
/// select one with `cfg.lancaster_rule`.
pub fn lancaster_roots(data: &PanelData, cfg: &SearchConfig) -> Result<EstimationResult> {
    cfg.validate()?;
    check_dims(data)?;
    require_zero_initial(data, "lancaster_roots")?;
    let qf = QuadForms::new(&maximal_invariant(&data.y())?)?;
    lancaster_forms(&qf, cfg)
}

/// All local-maximum roots of `S^L` inside the bounds, sorted by `rho`.
pub fn enumerate_lancaster_roots(qf: &QuadForms, cfg: &SearchConfig) -> Vec<LancasterRoot> {
    let grid = cfg.grid();
    let s_l = |r: f64| qf.score_components(r).map(|s| s.s_l).unwrap_or(f64::NAN);
    let vals: Vec<f64> = grid.iter().map(|&r| s_l(r)).collect();
    let mut roots = Vec::new();
    for i in 0..grid.len() - 1 {
        let (a, b) = (vals[i], vals[i + 1]);
        // Downward crossings are local maxima of the concentrated objective.
        if !(a > 0.0 && b <= 0.0) {
            continue;
        }
        let Some(r) = bisect(s_l, grid[i], grid[i + 1], 1e-15, cfg.max_refine_iters) else {
            continue;
        };
        if let Some(root) = describe_root(qf, r) {
            if root.score_slope < 0.0 {
                roots.push(root);
            }
        }
    }
    roots
}

fn describe_root(qf: &QuadForms, r: f64) -> Option<LancasterRoot> {
    let sc = qf.score_components(r).ok()?;
    let sigma2 = qf.lancaster_sigma2(r);
    let slope = qf.lancaster_score_slope(r).ok()?;
    let h = 1e-4;
    let obj = qf.q_lancaster_concentrated(r).ok()?;
    let second = (qf.q_lancaster_concentrated(r + h).ok()? - 2.0 * obj
        + qf.q_lancaster_concentrated(r - h).ok()?)
        / (h * h);
    let (_, hess) = qf.q_lancaster_derivatives(r, sigma2);
    let tr = hess[0][0] + hess[1][1];
    let det = hess[0][0] * hess[1][1] - hess[0][1] * hess[1][0];
    let max_eig = 0.5 * (tr + (tr * tr - 4.0 * det).max(0.0).sqrt());
    Some(LancasterRoot {
        rho: r,
        sigma2,
        score_m_l_abs: sc.s_ml.abs(),
        score_l: sc.s_l,
        score_slope: slope,
        second_difference: second,
        objective: obj,
        hessian_max_eig: max_eig,
    })
}

/// [`lancaster_roots`] on precomputed quadratic forms.
pub fn lancaster_forms(qf: &QuadForms, cfg: &SearchConfig) -> Result<EstimationResult> {
    let roots = enumerate_lancaster_roots(qf, cfg);
    let within = qf.within_rho().ok();
    let mut warnings = Vec::new();
    if qf.t == 2 {
        warnings.push(
            "T = 2: the Lancaster information matrix is singular in this regime; the estimate is unreliable"
                .to_string(),
        );
    }
    let rule = cfg.lancaster_rule;
    let dj_interval = within.map(|w| (w - cfg.dj_halfwidth, w + cfg.dj_halfwidth));

    if roots.is_empty() {
        // Convention for an empty root set: report rho = 0, not converged.
        warnings.push(
            "no local maximum of Lancaster's objective inside rho_bounds; reporting rho = 0".into(),
        );
        let sigma2 = qf.lancaster_sigma2(0.0);
        return Ok(EstimationResult {
            estimator: EstimatorKind::Lancaster,
            theta_hat: ThetaHat {
                rho: 0.0,
                sigma2,
                delta: None,
                omega2: None,
            },
            objective_at_max: qf.q_lancaster_concentrated(0.0).unwrap_or(f64::NAN),
            converged: false,
            gradient_norm: f64::NAN,
            at_rho_boundary: false,
            n_local_maxima: Some(0),
            all_roots: roots,
            selection_rule: rule,
            within_rho: within,
            dj_interval,
            warnings,
        });
    }

    let idx = select_root(qf, &roots, rule, within, cfg)?;
    let chosen = roots[idx];
    if let (SelectionRule::DhaeneJochmans, Some((lo, hi))) = (rule, dj_interval) {
        if chosen.rho < lo || chosen.rho > hi {
            warnings.push(format!(
                "no root inside the interval ({lo:.4}, {hi:.4}) around the within estimator; took the nearest"
            ));
        }
    }
    if (chosen.rho - 1.0).abs() < 0.05 {
        warnings.push(format!(
            "rho_hat = {:.4} is close to 1, where the Lancaster information matrix is singular; the estimate is unreliable",
            chosen.rho
        ));
    }
    let (g, _) = qf.q_lancaster_derivatives(chosen.rho, chosen.sigma2);
    let gradient_norm = norm(&g);
    Ok(EstimationResult {
        estimator: EstimatorKind::Lancaster,
        theta_hat: ThetaHat {
            rho: chosen.rho,
            sigma2: chosen.sigma2,
            delta: None,
            omega2: None,
        },
        objective_at_max: chosen.objective,
        converged: gradient_norm < cfg.gradient_tol,
        gradient_norm,
        at_rho_boundary: false,
        n_local_maxima: Some(roots.len()),
        all_roots: roots,
        selection_rule: rule,
        within_rho: within,
        dj_interval,
        warnings,
    })
}

fn select_root(
    qf: &QuadForms,
    roots: &[LancasterRoot],
    rule: SelectionRule,
    within: Option<f64>,
    cfg: &SearchConfig,
) -> Result<usize> {
    let by_sml = |a: &usize, b: &usize| roots[*a].score_m_l_abs.total_cmp(&roots[*b].score_m_l_abs);
    let idx: Vec<usize> = (0..roots.len()).collect();
    let pick = match rule {
        SelectionRule::MinAbsSml | SelectionRule::None => idx.iter().copied().min_by(by_sml),
        SelectionRule::DhaeneJochmans => {
            let w = within.ok_or_else(|| {
                Error::degenerate("within estimator undefined; cannot apply dhaene-jochmans")
            })?;
            idx.iter().copied().min_by(|a, b| {
                (roots[*a].rho - w)
                    .abs()
                    .total_cmp(&(roots[*b].rho - w).abs())
            })
        }
        SelectionRule::KruinigerHessian => {
            // Quadratic form S'S of the (rho, sigma2) score, identity weight,
            // over roots with a negative-definite Hessian; near-ties go to |S^{M-L}|.
            let tie = cfg.gradient_tol * cfg.gradient_tol;
            let scored: Vec<(usize, f64)> = idx
                .iter()
                .copied()
                .filter(|&i| roots[i].hessian_max_eig < 0.0)
                .map(|i| {
                    let (g, _) = qf.q_lancaster_derivatives(roots[i].rho, roots[i].sigma2);
                    (i, g[0] * g[0] + g[1] * g[1])
                })
                .collect();
            let best = scored.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
            scored
                .iter()
                .filter(|x| x.1 <= best + tie)
                .map(|x| x.0)
                .min_by(by_sml)
                .or_else(|| idx.iter().copied().min_by(by_sml))
        }
    };
    pick.ok_or_else(|| Error::degenerate("no root to select"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{difference_panel, simulate, DgpConfig, EtaLaw, InitRegime};
    use crate::kernels::sample_orthogonal;

    #[test]
    fn search_config_validation() {
        assert!(SearchConfig::default().validate().is_ok());
        let bad = SearchConfig {
            grid_points: 10,
            ..SearchConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SearchConfig {
            rho_bounds: (1.0, -1.0),
            ..SearchConfig::default()
        };
        assert!(bad.validate().is_err());
        let g = SearchConfig::default().grid();
        assert_eq!(g.len(), 801);
        assert_eq!(g[0], -0.95);
        assert!((g[800] - 1.4).abs() < 1e-15);
    }

    #[test]
    fn rule_names_round_trip() {
        for r in SelectionRule::ALL {
            assert_eq!(r.name().parse::<SelectionRule>().unwrap(), r);
        }
        assert!("bogus".parse::<SelectionRule>().is_err());
    }

    #[test]
    fn mile_recovers_noiseless_data() {
        let d = simulate(
            &DgpConfig::new(0.5, 1e-3, 200, 4, 3).with_eta(EtaLaw::IidNormal {
                mean: 0.0,
                var: 1.0,
            }),
        )
        .unwrap();
        let r = estimate_mile(&d, &SearchConfig::default()).unwrap();
        assert!((r.theta_hat.rho - 0.5).abs() < 1e-3, "{:?}", r.theta_hat);
    }

    #[test]
    fn mile_converges_on_canonical_data() {
        let d = simulate(&DgpConfig::new(0.5, 1.0, 500, 4, 11)).unwrap();
        let r = estimate_mile(&d, &SearchConfig::default()).unwrap();
        assert!(r.converged, "{r:?}");
        assert!((r.theta_hat.rho - 0.5).abs() < 0.15);
        assert!(r.gradient_norm < 1e-9);
    }

    #[test]
    fn mile_rejects_nonzero_initial() {
        let d = simulate(
            &DgpConfig::new(0.5, 1.0, 50, 4, 1).with_init(InitRegime::Constant { k: 1.0 }),
        )
        .unwrap();
        let err = estimate_mile(&d, &SearchConfig::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("difference"), "{err}");
        assert!(estimate_mile(&difference_panel(&d), &SearchConfig::default()).is_ok());
    }

    #[test]
    fn mile_rotation_invariance() {
        let d = simulate(&DgpConfig::new(0.5, 1.0, 40, 4, 5)).unwrap();
        let g = sample_orthogonal(40, None, 1).unwrap();
        let cfg = SearchConfig::default();
        let a = estimate_mile(&d, &cfg).unwrap();
        let b = estimate_mile(&d.rotated(&g).unwrap(), &cfg).unwrap();
        assert!((a.theta_hat.rho - b.theta_hat.rho).abs() < 1e-8);
    }

    fn cond_data(seed: u64, n: usize) -> PanelData {
        simulate(
            &DgpConfig::new(0.5, 1.0, n, 4, seed)
                .with_eta(EtaLaw::ProjectedOnInitial {
                    delta: 0.5,
                    omega2: 1.0,
                })
                .with_init(InitRegime::Constant { k: 1.0 }),
        )
        .unwrap()
    }

    #[test]
    fn conditional_estimates_and_gradient() {
        let d = cond_data(2, 800);
        let r = estimate_mile_conditional(&d, &SearchConfig::default()).unwrap();
        assert!(r.converged, "{r:?}");
        assert!((r.theta_hat.rho - 0.5).abs() < 0.1);
        assert!((r.theta_hat.delta.unwrap() - 0.5).abs() < 0.3);
    }

    #[test]
    fn conditional_rejects_zero_y1() {
        let d = simulate(&DgpConfig::new(0.5, 1.0, 50, 4, 1)).unwrap();
        let err = estimate_mile_conditional(&d, &SearchConfig::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("estimate_mile"));
    }

    #[test]
    fn conditional_rotation_invariance() {
        let d = cond_data(4, 60);
        let g = sample_orthogonal(60, Some(&d.y1()), 2).unwrap();
        let cfg = SearchConfig::default();
        let a = estimate_mile_conditional(&d, &cfg).unwrap();
        let b = estimate_mile_conditional(&d.rotated(&g).unwrap(), &cfg).unwrap();
        assert!((a.theta_hat.rho - b.theta_hat.rho).abs() < 1e-8);
    }

    #[test]
    fn lancaster_well_behaved_instance() {
        let d = simulate(&DgpConfig::new(0.5, 1.0, 2000, 5, 9)).unwrap();
        let mut picks = Vec::new();
        for rule in SelectionRule::ALL {
            let cfg = SearchConfig {
                lancaster_rule: rule,
                ..SearchConfig::default()
            };
            let r = lancaster_roots(&d, &cfg).unwrap();
            assert_eq!(r.n_local_maxima, Some(1));
            assert!(r.converged);
            assert!((r.theta_hat.rho - 0.5).abs() < 0.1);
            for root in &r.all_roots {
                assert!(root.score_l.abs() < cfg.gradient_tol);
                assert!(root.second_difference < 0.0);
            }
            picks.push(r.theta_hat.rho);
        }
        assert!(picks.iter().all(|p| *p == picks[0]));
    }

    #[test]
    fn lancaster_t2_warns() {
        let d = simulate(&DgpConfig::new(0.5, 1.0, 100, 2, 9)).unwrap();
        let r = lancaster_roots(&d, &SearchConfig::default()).unwrap();
        assert!(
            r.warnings.iter().any(|w| w.contains("T = 2")),
            "{:?}",
            r.warnings
        );
    }

    #[test]
    fn lancaster_multimodal_instance() {
        // Strongly negative rho with even T yields two local maxima.
        let cfg = SearchConfig {
            rho_bounds: (-8.0, 1.4),
            ..SearchConfig::default()
        };
        let d = simulate(&DgpConfig::new(-6.0, 1.0, 100, 4, 0)).unwrap();
        let r = lancaster_roots(&d, &cfg).unwrap();
        assert!(r.all_roots.len() >= 2, "{:?}", r.all_roots);
        assert!(r.all_roots.windows(2).all(|w| w[0].rho < w[1].rho));
        assert!(r.all_roots.iter().any(|x| x.rho == r.theta_hat.rho));
    }

    #[test]
    fn empty_root_set_convention() {
        // Bounds far from anything plausible for this data.
        let d = simulate(&DgpConfig::new(0.5, 1.0, 200, 4, 9)).unwrap();
        let cfg = SearchConfig {
            rho_bounds: (3.0, 4.0),
            ..SearchConfig::default()
        };
        let r = lancaster_roots(&d, &cfg).unwrap();
        assert_eq!(r.theta_hat.rho, 0.0);
        assert!(!r.converged);
        assert_eq!(r.n_local_maxima, Some(0));
    }
}
