//! Browser demo. Three operations, each returning a JSON string the page
//! plots on a canvas:
//!
//! * [`profile_curves`]: simulate a panel and trace the MILE profile and
//!   Lancaster's concentrated objective over a `rho` grid, with the estimates.
//! * [`avar_curves`]: asymptotic variance of `rho_hat` for MILE and Lancaster
//!   across `rho*`.
//! * [`conditioning_curve`]: conditional estimator against MILE on differenced data
//!   as the projection slope `delta` varies.
//!
//! The `*_json` functions hold the logic and run natively; the exported
//! wrappers only convert errors for JavaScript.

// `!(x > 0.0)` guards reject NaN as well; keep them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use serde::Serialize;
use wasm_bindgen::prelude::*;

use dynpanel::asymptotics::{
    avar_compare, avar_report, exact_score_covariance, info_lancaster, sandwich, ScorePair,
};
use dynpanel::dgp::{simulate, DgpConfig, EtaLaw, InitRegime};
use dynpanel::estimators::{estimate_mile_forms, lancaster_forms, SearchConfig, SelectionRule};
use dynpanel::kernels::maximal_invariant;
use dynpanel::likelihoods::{QuadForms, Theta, Theta1};

const MAX_POINTS: usize = 2000;
const MAX_CELLS: usize = 2_000_000;

fn grid(lo: f64, hi: f64, points: usize) -> Result<Vec<f64>, String> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(format!("need finite lo < hi, got [{lo}, {hi}]"));
    }
    if !(2..=MAX_POINTS).contains(&points) {
        return Err(format!("points must be in 2..={MAX_POINTS}, got {points}"));
    }
    Ok((0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect())
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
pub struct ProfileCurves {
    pub rho: Vec<f64>,
    /// MILE profile with `(sigma2, omega2)` maximised out.
    pub mile: Vec<Option<f64>>,
    /// Lancaster's objective with `sigma2` maximised out.
    pub lancaster: Vec<Option<f64>>,
    pub mile_rho: f64,
    pub lancaster_roots: Vec<f64>,
    pub lancaster_selected: f64,
    pub rule: String,
    pub warnings: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
pub fn profile_curves_json(
    rho_star: f64,
    sigma2: f64,
    omega2: f64,
    n: usize,
    t: usize,
    seed: u64,
    lo: f64,
    hi: f64,
    points: usize,
    rule: &str,
) -> Result<String, String> {
    if n.saturating_mul(t + 1) > MAX_CELLS {
        return Err(format!(
            "N (T+1) must stay below {MAX_CELLS} in the browser"
        ));
    }
    let rho = grid(lo, hi, points)?;
    let cfg = DgpConfig::new(rho_star, sigma2, n, t, seed)
        .with_eta(EtaLaw::ScaledToOmega { omega2 })
        .with_init(InitRegime::Zero);
    let data = simulate(&cfg).map_err(|e| e.to_string())?;
    let qf = QuadForms::new(&maximal_invariant(&data.y()).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let search = SearchConfig {
        rho_bounds: (lo, hi),
        lancaster_rule: rule.parse::<SelectionRule>().map_err(|e| e.to_string())?,
        ..SearchConfig::default()
    };
    search.validate().map_err(|e| e.to_string())?;
    let mile = estimate_mile_forms(&qf, &search).map_err(|e| e.to_string())?;
    let lanc = lancaster_forms(&qf, &search).map_err(|e| e.to_string())?;
    let mut warnings = mile.warnings.clone();
    warnings.extend(lanc.warnings.iter().cloned());
    to_json(&ProfileCurves {
        mile: rho
            .iter()
            .map(|&r| qf.mile_profile(r).ok().and_then(|p| finite(p.value)))
            .collect(),
        lancaster: rho
            .iter()
            .map(|&r| qf.q_lancaster_concentrated(r).ok().and_then(finite))
            .collect(),
        rho,
        mile_rho: mile.theta_hat.rho,
        lancaster_roots: lanc.all_roots.iter().map(|r| r.rho).collect(),
        lancaster_selected: lanc.theta_hat.rho,
        rule: search.lancaster_rule.name().to_string(),
        warnings,
    })
}

#[derive(Debug, Serialize)]
pub struct AvarCurves {
    pub rho: Vec<f64>,
    pub mile: Vec<Option<f64>>,
    /// Sandwich with the closed-form score variance.
    pub lancaster: Vec<Option<f64>>,
    /// Sandwich with the exact finite-T score variance.
    pub lancaster_exact: Vec<Option<f64>>,
}

pub fn avar_curves_json(
    t: usize,
    sigma2: f64,
    omega2: f64,
    lo: f64,
    hi: f64,
    points: usize,
) -> Result<String, String> {
    if !(3..=50).contains(&t) {
        return Err(format!("T must be in 3..=50, got {t}"));
    }
    let rho = grid(lo, hi, points)?;
    let mut out = AvarCurves {
        mile: Vec::new(),
        lancaster: Vec::new(),
        lancaster_exact: Vec::new(),
        rho: rho.clone(),
    };
    for r in rho {
        let th = Theta::new(r, sigma2, omega2);
        let rep = avar_report(&th, t).map_err(|e| e.to_string())?;
        out.mile
            .push(rep.avar_rho.get("mile").copied().and_then(finite));
        out.lancaster
            .push(rep.avar_rho.get("lancaster").copied().and_then(finite));
        let exact = info_lancaster(&th, t)
            .and_then(|li| {
                sandwich(
                    &li.info,
                    &exact_score_covariance(&th, t, ScorePair::Lancaster)?,
                )
            })
            .ok()
            .and_then(|s| finite(s[0][0]));
        out.lancaster_exact.push(exact);
    }
    to_json(&out)
}

#[derive(Debug, Serialize)]
pub struct ConditioningCurve {
    pub delta: Vec<f64>,
    /// MILE on the differenced panel.
    pub differenced: Vec<Option<f64>>,
    pub conditional: Vec<Option<f64>>,
    /// Where `delta + rho = 1` and the two coincide.
    pub knife_edge_delta: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn conditioning_curve_json(
    rho: f64,
    sigma2: f64,
    omega2: f64,
    y1_norm_bar2: f64,
    t: usize,
    lo: f64,
    hi: f64,
    points: usize,
) -> Result<String, String> {
    if !(2..=50).contains(&t) {
        return Err(format!("T must be in 2..=50, got {t}"));
    }
    let delta = grid(lo, hi, points)?;
    let mut out = ConditioningCurve {
        differenced: Vec::new(),
        conditional: Vec::new(),
        delta: delta.clone(),
        knife_edge_delta: 1.0 - rho,
    };
    for d in delta {
        let rep = avar_compare(&Theta1::new(rho, sigma2, d, omega2), None, t, y1_norm_bar2)
            .map_err(|e| e.to_string())?;
        out.differenced
            .push(rep.avar_rho.get("mile").copied().and_then(finite));
        out.conditional
            .push(rep.avar_rho.get("conditional").copied().and_then(finite));
    }
    to_json(&out)
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn profile_curves(
    rho_star: f64,
    sigma2: f64,
    omega2: f64,
    n: usize,
    t: usize,
    seed: u32,
    lo: f64,
    hi: f64,
    points: usize,
    rule: &str,
) -> Result<String, JsValue> {
    profile_curves_json(
        rho_star,
        sigma2,
        omega2,
        n,
        t,
        seed as u64,
        lo,
        hi,
        points,
        rule,
    )
    .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn avar_curves(
    t: usize,
    sigma2: f64,
    omega2: f64,
    lo: f64,
    hi: f64,
    points: usize,
) -> Result<String, JsValue> {
    avar_curves_json(t, sigma2, omega2, lo, hi, points).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn conditioning_curve(
    rho: f64,
    sigma2: f64,
    omega2: f64,
    y1_norm_bar2: f64,
    t: usize,
    lo: f64,
    hi: f64,
    points: usize,
) -> Result<String, JsValue> {
    conditioning_curve_json(rho, sigma2, omega2, y1_norm_bar2, t, lo, hi, points)
        .map_err(|e| JsValue::from_str(&e))
}
