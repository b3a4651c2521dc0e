//! Replication engine: simulate, estimate, collect scores, and compare the
//! spread of the estimates with the closed-form asymptotic variances.
//!
//! Replication `i` draws from its own seed `replication_seed(master, i)`,
//! results are gathered in index order and every aggregate is a fixed-order
//! compensated sum, so output does not depend on the thread count.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{
    differenced_omega2, exact_score_covariance, info_conditional, info_lancaster, info_mile,
    inverse2, inverse3, sandwich, ScorePair,
};
use crate::dgp::{difference_panel, simulate, DgpConfig, EtaLaw, InitRegime, PanelData};
use crate::estimators::{
    enumerate_lancaster_roots, estimate_conditional_forms, estimate_mile_forms, lancaster_forms,
    EstimationResult, SearchConfig, SelectionRule,
};
use crate::kernels::{conditional_invariant, maximal_invariant};
use crate::likelihoods::{QuadForms, Theta, Theta1};
use crate::optim::compensated_sum;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum McEstimator {
    Mile,
    Lancaster { rule: SelectionRule },
    Conditional,
}

impl McEstimator {
    pub fn label(&self) -> String {
        match self {
            McEstimator::Mile => "mile".to_string(),
            McEstimator::Lancaster { rule } => format!("lancaster({})", rule.name()),
            McEstimator::Conditional => "conditional".to_string(),
        }
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        match self {
            McEstimator::Mile => vec!["rho", "sigma2", "omega2"],
            McEstimator::Lancaster { .. } => vec!["rho", "sigma2"],
            McEstimator::Conditional => vec!["rho", "sigma2", "delta", "omega2"],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectFlags {
    pub score_at_truth: bool,
    pub hessian_at_truth: bool,
    pub root_multiplicity: bool,
    /// Keep per-replication estimates for the long-format CSV.
    pub estimates: bool,
}

impl CollectFlags {
    fn any(&self) -> bool {
        self.score_at_truth || self.hessian_at_truth || self.root_multiplicity || self.estimates
    }
}

/// How the local drift in `omega2` scales with the sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftScale {
    /// `omega2 = omega2* + h / sqrt(N)`
    InvSqrtN,
    /// `omega2 = omega2* + h / sqrt(N T)`, the scaling under which
    /// `sqrt(NT)(omega2_hat - omega2*)` has mean `h`.
    #[default]
    InvSqrtNT,
}

pub const MC_SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    /// `dgp.seed` is the master seed.
    pub dgp: DgpConfig,
    #[serde(default)]
    pub estimators: Vec<McEstimator>,
    pub replications: usize,
    #[serde(default)]
    pub collect: CollectFlags,
    #[serde(default)]
    pub search: SearchConfig,
    /// Run the local-drift design with this `h` when set.
    #[serde(default)]
    pub local_shift_h: Option<f64>,
    #[serde(default)]
    pub drift_scale: DriftScale,
}

impl McConfig {
    pub fn new(dgp: DgpConfig, estimators: Vec<McEstimator>, replications: usize) -> Self {
        McConfig {
            dgp,
            estimators,
            replications,
            collect: CollectFlags::default(),
            search: SearchConfig::default(),
            local_shift_h: None,
            drift_scale: DriftScale::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        self.search.validate()?;
        if self.replications < 2 {
            return Err(Error::invalid(format!(
                "replications must be >= 2, got {}",
                self.replications
            )));
        }
        if self.estimators.is_empty() && !self.collect.any() {
            return Err(Error::invalid(
                "choose at least one estimator or collect flag",
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.estimators {
            if !seen.insert(e.label()) {
                return Err(Error::invalid(format!(
                    "estimator {} listed twice",
                    e.label()
                )));
            }
        }
        let zero_init = matches!(self.dgp.init_regime, InitRegime::Zero);
        if zero_init && self.estimators.contains(&McEstimator::Conditional) {
            return Err(Error::invalid(
                "the conditional estimator needs a nonzero initial condition (init_regime zero gives y1 = 0)",
            ));
        }
        if self.dgp.n < self.dgp.t + 2 {
            return Err(Error::invalid(format!(
                "n must be at least t + 2 for the estimators (n={}, t={})",
                self.dgp.n, self.dgp.t
            )));
        }
        Ok(())
    }
}

/// Deterministic per-replication seed (splitmix64 of master and index).
pub fn replication_seed(master: u64, index: usize) -> u64 {
    let mut z = master.wrapping_add(
        (index as u64)
            .wrapping_add(1)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The `theta` the unconditional estimators target, on differenced data when
/// the initial condition is not zero. `None` when the DGP does not pin it down.
pub fn implied_theta(dgp: &DgpConfig) -> Option<Theta> {
    let s2 = dgp.sigma2_star;
    match (&dgp.init_regime, &dgp.eta_law) {
        (InitRegime::Zero, EtaLaw::ScaledToOmega { omega2 }) => {
            Some(Theta::new(dgp.rho_star, s2, *omega2))
        }
        (InitRegime::Zero, EtaLaw::ProjectedOnInitial { omega2, .. }) => {
            Some(Theta::new(dgp.rho_star, s2, *omega2))
        }
        (InitRegime::Zero, EtaLaw::IidNormal { mean, var }) => {
            Some(Theta::new(dgp.rho_star, s2, (var + mean * mean) / s2))
        }
        (InitRegime::Zero, EtaLaw::Fixed { values }) => {
            let ms = values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64;
            Some(Theta::new(dgp.rho_star, s2, ms / s2))
        }
        (_, EtaLaw::ProjectedOnInitial { .. }) => {
            let (th1, y1bar2) = implied_theta1(dgp)?;
            Some(Theta::new(
                dgp.rho_star,
                s2,
                differenced_omega2(&th1, y1bar2),
            ))
        }
        _ => None,
    }
}

/// Conditional-model point and `|y1|^2/N` limit, when the DGP fixes them.
pub fn implied_theta1(dgp: &DgpConfig) -> Option<(Theta1, f64)> {
    let EtaLaw::ProjectedOnInitial { delta, omega2 } = dgp.eta_law else {
        return None;
    };
    let y1bar2 = match dgp.init_regime {
        InitRegime::Constant { k } => k * k,
        InitRegime::IidNormal { var } => var,
        _ => return None,
    };
    if !(y1bar2 > 0.0) {
        return None;
    }
    Some((
        Theta1::new(dgp.rho_star, dgp.sigma2_star, delta, omega2),
        y1bar2,
    ))
}

/// One replication's outputs; estimator slots follow `config.estimators`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    pub estimates: Vec<std::result::Result<Vec<f64>, String>>,
    /// `sqrt(NT)` times the gradient of the invariant likelihood at the truth.
    pub score: Option<[f64; 3]>,
    /// `sqrt(NT) (S^L, S^{M-L})` at `rho*`.
    pub concentrated_scores: Option<[f64; 2]>,
    /// `sqrt(NT)` times Lancaster's `(rho, sigma2)` score at the truth.
    pub lancaster_score: Option<[f64; 2]>,
    /// Minus the analytic Hessian of the invariant likelihood at the truth.
    pub neg_hessian: Option<[[f64; 3]; 3]>,
    pub n_roots: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: McEstimator,
    pub label: String,
    pub params: Vec<String>,
    /// Mile and Lancaster run on the differenced panel when `y1 != 0`.
    pub differenced: bool,
    pub n_ok: usize,
    pub failures: usize,
    pub failure_reasons: BTreeMap<String, usize>,
    pub mean_bias: Vec<f64>,
    pub mean_abs_error: Vec<f64>,
    /// Mean of `sqrt(NT)(theta_hat - theta*)`.
    pub mean_scaled: Vec<f64>,
    pub mean_scaled_se: Vec<f64>,
    pub empirical_var_scaled: Vec<Vec<f64>>,
    pub theory_avar: Option<Vec<Vec<f64>>>,
    /// Lancaster only: the sandwich with the exact score variance in place of
    /// the closed-form one.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub theory_avar_exact: Option<Vec<Vec<f64>>>,
    pub ratio: Option<Vec<Vec<Option<f64>>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    /// Standard errors of the entries of `cov`, from fourth moments.
    pub cov_se: Vec<Vec<f64>>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub schema_version: String,
    pub config: McConfig,
    pub replications: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub theta_star: Option<Theta>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub theta1_star: Option<Theta1>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub local_shift: Option<LocalShift>,
    pub estimators: Vec<EstimatorSummary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub score_cov_scaled: Option<MomentSummary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub concentrated_score_cov: Option<MomentSummary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lancaster_score_cov: Option<MomentSummary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub neg_hessian_mean: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub root_histogram: Option<BTreeMap<usize, usize>>,
    /// Replications where at least one estimator failed.
    pub failures: usize,
    #[serde(skip)]
    pub records: Vec<ReplicationRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalShift {
    pub h: f64,
    pub scale: DriftScale,
    pub omega2_drifted: f64,
}

impl McSummary {
    pub fn estimator(&self, label: &str) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.label == label)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Long format: `replication, estimator, parameter, estimate`.
    pub fn records_to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["replication", "estimator", "parameter", "estimate"])?;
        for r in &self.records {
            for (e, est) in self.config.estimators.iter().zip(&r.estimates) {
                match est {
                    Ok(v) => {
                        for (name, x) in e.param_names().iter().zip(v) {
                            w.write_record([
                                r.replication.to_string(),
                                e.label(),
                                name.to_string(),
                                format!("{x:.17e}"),
                            ])?;
                        }
                    }
                    Err(reason) => {
                        w.write_record([
                            r.replication.to_string(),
                            e.label(),
                            "failed".to_string(),
                            reason.clone(),
                        ])?;
                    }
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
    }
}

fn estimate_vector(r: &EstimationResult, kind: McEstimator) -> Vec<f64> {
    let th = &r.theta_hat;
    match kind {
        McEstimator::Mile => vec![th.rho, th.sigma2, th.omega2.unwrap_or(f64::NAN)],
        McEstimator::Lancaster { .. } => vec![th.rho, th.sigma2],
        McEstimator::Conditional => vec![
            th.rho,
            th.sigma2,
            th.delta.unwrap_or(f64::NAN),
            th.omega2.unwrap_or(f64::NAN),
        ],
    }
}

fn check_converged(r: EstimationResult) -> std::result::Result<EstimationResult, String> {
    if r.converged {
        Ok(r)
    } else if r.n_local_maxima == Some(0) {
        Err("no lancaster root in bounds".to_string())
    } else if r.at_rho_boundary {
        Err("maximum on rho boundary".to_string())
    } else {
        Err("gradient above tolerance".to_string())
    }
}

fn replicate(
    cfg: &McConfig,
    dgp: &DgpConfig,
    index: usize,
    theta: Option<Theta>,
) -> Result<ReplicationRecord> {
    let seed = replication_seed(cfg.dgp.seed, index);
    let data: PanelData = simulate(&dgp.clone().with_seed(seed))?;
    let nt = ((data.n() * data.t()) as f64).sqrt();
    let level_zero = data.has_zero_initial();
    let uncond = if level_zero {
        data.clone()
    } else {
        difference_panel(&data)
    };

    let needs_uncond = cfg
        .estimators
        .iter()
        .any(|e| !matches!(e, McEstimator::Conditional))
        || cfg.collect.score_at_truth
        || cfg.collect.hessian_at_truth
        || cfg.collect.root_multiplicity;
    let qf = if needs_uncond {
        Some(maximal_invariant(&uncond.y()).and_then(|s| QuadForms::new(&s)))
    } else {
        None
    };
    let qf_err = |qf: &Option<Result<QuadForms>>| -> std::result::Result<QuadForms, String> {
        match qf {
            Some(Ok(q)) => Ok(q.clone()),
            Some(Err(e)) => Err(e.to_string()),
            None => Err("not computed".to_string()),
        }
    };

    let mut estimates = Vec::with_capacity(cfg.estimators.len());
    for &e in &cfg.estimators {
        let res: std::result::Result<Vec<f64>, String> = match e {
            McEstimator::Mile => qf_err(&qf)
                .and_then(|q| estimate_mile_forms(&q, &cfg.search).map_err(|x| x.to_string()))
                .and_then(check_converged)
                .map(|r| estimate_vector(&r, e)),
            McEstimator::Lancaster { rule } => {
                let search = SearchConfig {
                    lancaster_rule: rule,
                    ..cfg.search.clone()
                };
                qf_err(&qf)
                    .and_then(|q| lancaster_forms(&q, &search).map_err(|x| x.to_string()))
                    .and_then(check_converged)
                    .map(|r| estimate_vector(&r, e))
            }
            McEstimator::Conditional => {
                let y1 = data.y1();
                conditional_invariant(&data.y(), &y1)
                    .and_then(|s| QuadForms::new(&s))
                    .and_then(|q| estimate_conditional_forms(&q, &cfg.search))
                    .map_err(|x| x.to_string())
                    .and_then(check_converged)
                    .map(|r| estimate_vector(&r, e))
            }
        };
        estimates.push(res);
    }

    let mut rec = ReplicationRecord {
        replication: index,
        seed,
        estimates,
        score: None,
        concentrated_scores: None,
        lancaster_score: None,
        neg_hessian: None,
        n_roots: None,
    };
    if let Some(Ok(q)) = &qf {
        if let Some(th) = theta {
            if cfg.collect.score_at_truth {
                let (g, _) = q.q_mile_derivatives(&th);
                rec.score = Some(g.map(|x| x * nt));
                if let Ok(sc) = q.score_components(th.rho) {
                    rec.concentrated_scores = Some([sc.s_l * nt, sc.s_ml * nt]);
                }
                let (gl, _) = q.q_lancaster_derivatives(th.rho, th.sigma2);
                rec.lancaster_score = Some(gl.map(|x| x * nt));
            }
            if cfg.collect.hessian_at_truth {
                let (_, h) = q.q_mile_derivatives(&th);
                rec.neg_hessian = Some(h.map(|row| row.map(|x| -x)));
            }
        }
        if cfg.collect.root_multiplicity {
            rec.n_roots = Some(enumerate_lancaster_roots(q, &cfg.search).len());
        }
    }
    Ok(rec)
}

fn mean_of(values: &[Vec<f64>], k: usize) -> f64 {
    compensated_sum(values.iter().map(|v| v[k])) / values.len() as f64
}

fn moment_summary(values: &[Vec<f64>]) -> Option<MomentSummary> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let p = values[0].len();
    let mean: Vec<f64> = (0..p).map(|k| mean_of(values, k)).collect();
    let nf = n as f64;
    let mut cov = vec![vec![0.0; p]; p];
    let mut cov_se = vec![vec![0.0; p]; p];
    for a in 0..p {
        for b in 0..p {
            let prods: Vec<f64> = values
                .iter()
                .map(|v| (v[a] - mean[a]) * (v[b] - mean[b]))
                .collect();
            let c = compensated_sum(prods.iter().copied()) / (nf - 1.0);
            let m = compensated_sum(prods.iter().copied()) / nf;
            let var_prod = compensated_sum(prods.iter().map(|x| (x - m) * (x - m))) / (nf - 1.0);
            cov[a][b] = c;
            cov_se[a][b] = (var_prod / nf).sqrt();
        }
    }
    Some(MomentSummary {
        mean,
        cov,
        cov_se,
        count: n,
    })
}

fn theory_for(
    e: McEstimator,
    theta: Option<Theta>,
    theta1: Option<(Theta1, f64)>,
    t: usize,
) -> (Option<Vec<Vec<f64>>>, Option<Vec<Vec<f64>>>) {
    let m2 = |m: [[f64; 2]; 2]| m.iter().map(|r| r.to_vec()).collect::<Vec<_>>();
    match e {
        McEstimator::Mile => {
            let v = theta
                .filter(|th| th.omega2 > 0.0)
                .and_then(|th| info_mile(&th, t).ok())
                .and_then(|i| inverse3(&i).ok())
                .map(|m| m.iter().map(|r| r.to_vec()).collect());
            (v, None)
        }
        McEstimator::Lancaster { .. } => {
            let Some(th) = theta else { return (None, None) };
            let Ok(li) = info_lancaster(&th, t) else {
                return (None, None);
            };
            let closed_form = sandwich(&li.info, &li.sigma).ok().map(m2);
            let exact = exact_score_covariance(&th, t, ScorePair::Lancaster)
                .ok()
                .and_then(|s| sandwich(&li.info, &s).ok())
                .map(m2);
            (closed_form, exact)
        }
        McEstimator::Conditional => {
            let v = theta1
                .and_then(|(th1, y)| info_conditional(&th1, t, y).ok())
                .and_then(|i| inverse2(&i).ok())
                .map(|m| {
                    // Theory covers (rho, sigma2); pad to the four reported parameters.
                    let mut out = vec![vec![0.0; 4]; 4];
                    for i in 0..2 {
                        for j in 0..2 {
                            out[i][j] = m[i][j];
                        }
                    }
                    out
                });
            (v, None)
        }
    }
}

fn truth_vector(
    e: McEstimator,
    theta: Option<Theta>,
    theta1: Option<(Theta1, f64)>,
) -> Option<Vec<f64>> {
    match e {
        McEstimator::Mile => theta.map(|t| t.to_array().to_vec()),
        McEstimator::Lancaster { .. } => theta.map(|t| vec![t.rho, t.sigma2]),
        McEstimator::Conditional => theta1.map(|(t, _)| t.to_array().to_vec()),
    }
}

fn summarise_estimator(
    e: McEstimator,
    slot: usize,
    records: &[ReplicationRecord],
    theta: Option<Theta>,
    theta1: Option<(Theta1, f64)>,
    dgp: &DgpConfig,
) -> EstimatorSummary {
    let names: Vec<String> = e.param_names().iter().map(|s| s.to_string()).collect();
    let p = names.len();
    let mut ok: Vec<Vec<f64>> = Vec::new();
    let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        match &r.estimates[slot] {
            Ok(v) => ok.push(v.clone()),
            Err(why) => *reasons.entry(why.clone()).or_default() += 1,
        }
    }
    let failures = records.len() - ok.len();
    let nt = ((dgp.n * dgp.t) as f64).sqrt();
    // Without a known truth, center at the sample mean.
    let truth = truth_vector(e, theta, theta1).unwrap_or_else(|| {
        (0..p)
            .map(|k| if ok.is_empty() { 0.0 } else { mean_of(&ok, k) })
            .collect()
    });
    let scaled: Vec<Vec<f64>> = ok
        .iter()
        .map(|v| v.iter().zip(&truth).map(|(x, t)| nt * (x - t)).collect())
        .collect();
    let n_ok = ok.len();
    let (mean_bias, mean_abs_error) = if n_ok > 0 {
        (
            (0..p).map(|k| mean_of(&ok, k) - truth[k]).collect(),
            (0..p)
                .map(|k| compensated_sum(ok.iter().map(|v| (v[k] - truth[k]).abs())) / n_ok as f64)
                .collect(),
        )
    } else {
        (vec![f64::NAN; p], vec![f64::NAN; p])
    };
    let ms = moment_summary(&scaled);
    let (mean_scaled, mean_scaled_se, empirical) = match &ms {
        Some(m) => (
            m.mean.clone(),
            (0..p).map(|k| (m.cov[k][k] / n_ok as f64).sqrt()).collect(),
            m.cov.clone(),
        ),
        None => (
            vec![f64::NAN; p],
            vec![f64::NAN; p],
            vec![vec![f64::NAN; p]; p],
        ),
    };
    let (theory, theory_exact) = theory_for(e, theta, theta1, dgp.t);
    let ratio = theory.as_ref().map(|th| {
        (0..p)
            .map(|i| {
                (0..p)
                    .map(|j| {
                        if th[i][j] != 0.0 {
                            Some(empirical[i][j] / th[i][j])
                        } else {
                            None
                        }
                    })
                    .collect()
            })
            .collect()
    });
    EstimatorSummary {
        estimator: e,
        label: e.label(),
        params: names,
        differenced: !matches!(e, McEstimator::Conditional)
            && !matches!(dgp.init_regime, InitRegime::Zero),
        n_ok,
        failures,
        failure_reasons: reasons,
        mean_bias,
        mean_abs_error,
        mean_scaled,
        mean_scaled_se,
        empirical_var_scaled: empirical,
        theory_avar: theory,
        theory_avar_exact: theory_exact,
        ratio,
    }
}

/// Run the Monte Carlo study on the current rayon pool.
pub fn run(config: &McConfig) -> Result<McSummary> {
    run_inner(config, 0.0)
}

/// [`run`] on a dedicated pool of `threads` workers.
pub fn run_with_threads(config: &McConfig, threads: usize) -> Result<McSummary> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot build thread pool: {e}")))?;
    pool.install(|| dispatch(config))
}

/// [`run`] or [`run_local_shift`] depending on `config.local_shift_h`.
pub fn dispatch(config: &McConfig) -> Result<McSummary> {
    match config.local_shift_h {
        Some(h) => run_local_shift(config, h),
        None => run(config),
    }
}

/// Simulate with `omega2 = omega2* + drift(h)` and center at the undrifted
/// point; the scaled mean of the `omega2` estimate should be near `h`.
pub fn run_local_shift(config: &McConfig, h: f64) -> Result<McSummary> {
    if !h.is_finite() {
        return Err(Error::invalid("h must be finite"));
    }
    run_inner(config, h)
}

fn run_inner(config: &McConfig, h: f64) -> Result<McSummary> {
    config.validate()?;
    let mut dgp = config.dgp.clone();
    let theta = implied_theta(&config.dgp);
    let theta1 = implied_theta1(&config.dgp);
    let mut local_shift = None;
    if h != 0.0 {
        let EtaLaw::ScaledToOmega { omega2 } = dgp.eta_law else {
            return Err(Error::invalid(
                "the local-shift design needs eta_law scaled-to-omega",
            ));
        };
        if !matches!(dgp.init_regime, InitRegime::Zero) {
            return Err(Error::invalid(
                "the local-shift design needs init_regime zero",
            ));
        }
        let denom = match config.drift_scale {
            DriftScale::InvSqrtN => (dgp.n as f64).sqrt(),
            DriftScale::InvSqrtNT => ((dgp.n * dgp.t) as f64).sqrt(),
        };
        let drifted = omega2 + h / denom;
        if drifted < 0.0 {
            return Err(Error::invalid(format!(
                "omega2* + h/scale = {drifted} is negative"
            )));
        }
        dgp.eta_law = EtaLaw::ScaledToOmega { omega2: drifted };
        local_shift = Some(LocalShift {
            h,
            scale: config.drift_scale,
            omega2_drifted: drifted,
        });
    }

    // Collected in index order regardless of scheduling.
    let outcomes: Vec<Result<ReplicationRecord>> = (0..config.replications)
        .into_par_iter()
        .map(|i| replicate(config, &dgp, i, theta))
        .collect();
    let mut records = Vec::with_capacity(outcomes.len());
    let mut sim_failures: BTreeMap<String, usize> = BTreeMap::new();
    for o in outcomes {
        match o {
            Ok(r) => records.push(r),
            Err(e) => *sim_failures.entry(e.to_string()).or_default() += 1,
        }
    }
    let total = config.replications;
    let sim_failed = total - records.len();
    if 2 * sim_failed > total {
        return Err(Error::TooManyFailures {
            failed: sim_failed,
            total,
            reasons: sim_failures.into_iter().collect(),
        });
    }

    let estimators: Vec<EstimatorSummary> = config
        .estimators
        .iter()
        .enumerate()
        .map(|(slot, &e)| summarise_estimator(e, slot, &records, theta, theta1, &config.dgp))
        .collect();
    for (e, s) in config.estimators.iter().zip(&estimators) {
        let failed = s.failures + sim_failed;
        if 2 * failed > total {
            let mut reasons: Vec<(String, usize)> = s
                .failure_reasons
                .iter()
                .map(|(k, v)| (format!("{}: {k}", e.label()), *v))
                .collect();
            reasons.extend(sim_failures.clone());
            return Err(Error::TooManyFailures {
                failed,
                total,
                reasons,
            });
        }
    }
    let failures = sim_failed
        + records
            .iter()
            .filter(|r| r.estimates.iter().any(|e| e.is_err()))
            .count();

    let gather = |f: &dyn Fn(&ReplicationRecord) -> Option<Vec<f64>>| -> Option<MomentSummary> {
        let v: Vec<Vec<f64>> = records.iter().filter_map(f).collect();
        moment_summary(&v)
    };
    let (score_cov_scaled, concentrated_score_cov, lancaster_score_cov) =
        if config.collect.score_at_truth {
            (
                gather(&|r| r.score.map(|s| s.to_vec())),
                gather(&|r| r.concentrated_scores.map(|s| s.to_vec())),
                gather(&|r| r.lancaster_score.map(|s| s.to_vec())),
            )
        } else {
            (None, None, None)
        };
    let neg_hessian_mean = if config.collect.hessian_at_truth {
        let hs: Vec<[[f64; 3]; 3]> = records.iter().filter_map(|r| r.neg_hessian).collect();
        (!hs.is_empty()).then(|| {
            (0..3)
                .map(|i| {
                    (0..3)
                        .map(|j| compensated_sum(hs.iter().map(|h| h[i][j])) / hs.len() as f64)
                        .collect()
                })
                .collect()
        })
    } else {
        None
    };
    let root_histogram = config.collect.root_multiplicity.then(|| {
        let mut h = BTreeMap::new();
        for r in &records {
            if let Some(k) = r.n_roots {
                *h.entry(k).or_default() += 1;
            }
        }
        h
    });

    Ok(McSummary {
        schema_version: MC_SCHEMA_VERSION.to_string(),
        // h = 0 is the undrifted study; echo it as such so the output matches `run`.
        config: McConfig {
            local_shift_h: config.local_shift_h.filter(|h| *h != 0.0),
            ..config.clone()
        },
        replications: total,
        theta_star: theta,
        theta1_star: theta1.map(|x| x.0),
        local_shift,
        estimators,
        score_cov_scaled,
        concentrated_score_cov,
        lancaster_score_cov,
        neg_hessian_mean,
        root_histogram,
        failures,
        records: if config.collect.estimates {
            records
        } else {
            Vec::new()
        },
    })
}
