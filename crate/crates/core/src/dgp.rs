//! Seeded simulation of `y_{i,t+1} = rho y_{i,t} + eta_i + sigma u_{i,t}`
//! under the fixed-effect and initial-condition regimes used throughout the
//! crate, plus CSV/JSON persistence.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How the individual effects are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EtaLaw {
    /// Explicit values; a single value is broadcast to every individual.
    Fixed {
        values: Vec<f64>,
    },
    IidNormal {
        mean: f64,
        var: f64,
    },
    /// Standard normal draws rescaled so that `eta'eta / (sigma^2 N)` equals `omega2`.
    ScaledToOmega {
        omega2: f64,
    },
    /// `eta = delta * y1 + e` with `e` orthogonal to `y1` and
    /// `e'e / (sigma^2 N) = omega2`, so that the regression of `eta` on the
    /// first observation has slope `delta` and residual scale `omega2` exactly.
    ProjectedOnInitial {
        delta: f64,
        omega2: f64,
    },
}

/// How the first observed column `y_{i,1}` is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitRegime {
    Zero,
    Constant {
        k: f64,
    },
    IidNormal {
        var: f64,
    },
    /// `y_{i,0} ~ N(eta_i/(1-rho), sigma0_2)` followed by one model step.
    /// `sigma0_2` defaults to the stationary `sigma^2/(1-rho^2)`.
    Stationary {
        #[serde(default)]
        sigma0_2: Option<f64>,
    },
    /// Exactly zero with probability `p0`, otherwise log-normal(0, scale).
    SkewedMassAtZero {
        p0: f64,
        scale: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpConfig {
    pub rho_star: f64,
    pub sigma2_star: f64,
    pub n: usize,
    pub t: usize,
    pub eta_law: EtaLaw,
    pub init_regime: InitRegime,
    pub seed: u64,
}

impl DgpConfig {
    /// Zero initial condition with `eta` scaled to `omega2 = 1`.
    pub fn new(rho_star: f64, sigma2_star: f64, n: usize, t: usize, seed: u64) -> Self {
        DgpConfig {
            rho_star,
            sigma2_star,
            n,
            t,
            eta_law: EtaLaw::ScaledToOmega { omega2: 1.0 },
            init_regime: InitRegime::Zero,
            seed,
        }
    }

    pub fn with_eta(mut self, eta_law: EtaLaw) -> Self {
        self.eta_law = eta_law;
        self
    }

    pub fn with_init(mut self, init_regime: InitRegime) -> Self {
        self.init_regime = init_regime;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rho_star.is_finite() {
            return Err(Error::invalid("rho_star must be finite"));
        }
        if !(self.sigma2_star > 0.0) || !self.sigma2_star.is_finite() {
            return Err(Error::invalid(format!(
                "sigma2_star must be positive, got {}",
                self.sigma2_star
            )));
        }
        if self.n < 3 {
            return Err(Error::invalid(format!("n must be >= 3, got {}", self.n)));
        }
        if self.t < 2 {
            return Err(Error::invalid(format!("t must be >= 2, got {}", self.t)));
        }
        match &self.eta_law {
            EtaLaw::Fixed { values } => {
                if values.len() != 1 && values.len() != self.n {
                    return Err(Error::invalid(format!(
                        "eta_law.values must have length 1 or n={}, got {}",
                        self.n,
                        values.len()
                    )));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("eta_law.values must be finite"));
                }
            }
            EtaLaw::IidNormal { mean, var } => {
                if !mean.is_finite() || !(*var >= 0.0) {
                    return Err(Error::invalid(
                        "eta_law iid-normal needs finite mean and var >= 0",
                    ));
                }
            }
            EtaLaw::ScaledToOmega { omega2 } => {
                if !(*omega2 >= 0.0) || !omega2.is_finite() {
                    return Err(Error::invalid("eta_law.omega2 must be >= 0"));
                }
            }
            EtaLaw::ProjectedOnInitial { delta, omega2 } => {
                if !delta.is_finite() || !(*omega2 >= 0.0) || !omega2.is_finite() {
                    return Err(Error::invalid(
                        "eta_law projected-on-initial needs finite delta and omega2 >= 0",
                    ));
                }
                if matches!(self.init_regime, InitRegime::Stationary { .. }) {
                    return Err(Error::invalid(
                        "projected-on-initial eta cannot be combined with a stationary initial \
                         condition (the initial draw itself depends on eta)",
                    ));
                }
            }
        }
        match &self.init_regime {
            InitRegime::Zero => {}
            InitRegime::Constant { k } => {
                if !k.is_finite() {
                    return Err(Error::invalid("init_regime.k must be finite"));
                }
            }
            InitRegime::IidNormal { var } => {
                if !(*var >= 0.0) || !var.is_finite() {
                    return Err(Error::invalid("init_regime.var must be >= 0"));
                }
            }
            InitRegime::Stationary { sigma0_2 } => {
                if self.rho_star.abs() >= 1.0 {
                    return Err(Error::invalid(format!(
                        "stationary initial condition requires |rho_star| < 1, got {}",
                        self.rho_star
                    )));
                }
                if let Some(v) = sigma0_2 {
                    if !(*v >= 0.0) || !v.is_finite() {
                        return Err(Error::invalid("init_regime.sigma0_2 must be >= 0"));
                    }
                }
            }
            InitRegime::SkewedMassAtZero { p0, scale } => {
                if !(0.0..=1.0).contains(p0) {
                    return Err(Error::invalid("init_regime.p0 must lie in [0, 1]"));
                }
                if !(*scale > 0.0) || !scale.is_finite() {
                    return Err(Error::invalid("init_regime.scale must be positive"));
                }
            }
        }
        Ok(())
    }
}

/// An observed panel `y_{i,1..T+1}` with optional simulation internals.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    /// N x (T+1); column 0 is the initial observation `y1`.
    pub y_full: DMatrix<f64>,
    pub eta_true: Option<DVector<f64>>,
    /// N x T error draws driving columns 1..=T.
    pub u: Option<DMatrix<f64>>,
    pub config: Option<DgpConfig>,
}

impl PanelData {
    pub fn from_observed(y_full: DMatrix<f64>) -> Result<Self> {
        if y_full.ncols() < 3 {
            return Err(Error::invalid("panel needs at least y1, y2 and y3 columns"));
        }
        if y_full.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("panel contains non-finite values"));
        }
        Ok(PanelData {
            y_full,
            eta_true: None,
            u: None,
            config: None,
        })
    }

    pub fn n(&self) -> usize {
        self.y_full.nrows()
    }

    /// Number of periods after the initial observation.
    pub fn t(&self) -> usize {
        self.y_full.ncols() - 1
    }

    pub fn y1(&self) -> DVector<f64> {
        self.y_full.column(0).into_owned()
    }

    /// Columns `2..T+1`, the N x T matrix the likelihoods work with.
    pub fn y(&self) -> DMatrix<f64> {
        self.y_full.columns(1, self.t()).into_owned()
    }

    pub fn has_zero_initial(&self) -> bool {
        self.y_full.column(0).iter().all(|v| *v == 0.0)
    }

    /// Left-multiply every column by `g` (used for invariance checks).
    pub fn rotated(&self, g: &DMatrix<f64>) -> Result<Self> {
        if g.nrows() != self.n() || g.ncols() != self.n() {
            return Err(Error::invalid("rotation must be N x N"));
        }
        Ok(PanelData {
            y_full: g * &self.y_full,
            eta_true: self.eta_true.as_ref().map(|e| g * e),
            u: self.u.as_ref().map(|u| g * u),
            config: self.config.clone(),
        })
    }
}

pub fn simulate(config: &DgpConfig) -> Result<PanelData> {
    config.validate()?;
    let (n, t) = (config.n, config.t);
    let rho = config.rho_star;
    let sigma = config.sigma2_star.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Draw order is part of the reproducibility contract: eta base draws,
    // then the initial condition, then the N x T errors row by row.
    let eta_base: Option<DVector<f64>> = match &config.eta_law {
        EtaLaw::Fixed { .. } => None,
        _ => Some(DVector::from_fn(n, |_, _| std_normal(&mut rng))),
    };

    let mut eta = match &config.eta_law {
        EtaLaw::Fixed { values } => {
            if values.len() == 1 {
                DVector::from_element(n, values[0])
            } else {
                DVector::from_vec(values.clone())
            }
        }
        EtaLaw::IidNormal { mean, var } => {
            eta_base.as_ref().unwrap().map(|z| mean + var.sqrt() * z)
        }
        EtaLaw::ScaledToOmega { omega2 } => rescale_to(
            eta_base.as_ref().unwrap(),
            *omega2 * config.sigma2_star * n as f64,
        )?,
        // Filled in once y1 is known.
        EtaLaw::ProjectedOnInitial { .. } => DVector::zeros(n),
    };

    let y1 = match &config.init_regime {
        InitRegime::Zero => DVector::zeros(n),
        InitRegime::Constant { k } => DVector::from_element(n, *k),
        InitRegime::IidNormal { var } => {
            let sd = var.sqrt();
            DVector::from_fn(n, |_, _| sd * std_normal(&mut rng))
        }
        InitRegime::Stationary { sigma0_2 } => {
            let v0 = sigma0_2.unwrap_or(config.sigma2_star / (1.0 - rho * rho));
            let sd0 = v0.sqrt();
            let y0 = DVector::from_fn(n, |i, _| eta[i] / (1.0 - rho) + sd0 * std_normal(&mut rng));
            DVector::from_fn(n, |i, _| {
                rho * y0[i] + eta[i] + sigma * std_normal(&mut rng)
            })
        }
        InitRegime::SkewedMassAtZero { p0, scale } => {
            let ln = LogNormal::new(0.0, *scale).map_err(|e| Error::invalid(e.to_string()))?;
            DVector::from_fn(n, |_, _| {
                let u: f64 = rng.random();
                let draw = ln.sample(&mut rng);
                if u < *p0 {
                    0.0
                } else {
                    draw
                }
            })
        }
    };

    if let EtaLaw::ProjectedOnInitial { delta, omega2 } = &config.eta_law {
        let base = eta_base.as_ref().unwrap();
        let target = *omega2 * config.sigma2_star * n as f64;
        let resid = if y1.norm_squared() > 0.0 {
            base - &y1 * (y1.dot(base) / y1.norm_squared())
        } else {
            base.clone()
        };
        eta = &y1 * *delta + rescale_to(&resid, target)?;
    }

    let u = DMatrix::from_fn(n, t, |_, _| std_normal(&mut rng));
    let mut y_full = DMatrix::zeros(n, t + 1);
    y_full.set_column(0, &y1);
    for i in 0..n {
        for s in 0..t {
            y_full[(i, s + 1)] = rho * y_full[(i, s)] + eta[i] + sigma * u[(i, s)];
        }
    }
    Ok(PanelData {
        y_full,
        eta_true: Some(eta),
        u: Some(u),
        config: Some(config.clone()),
    })
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn rescale_to(v: &DVector<f64>, target_sq: f64) -> Result<DVector<f64>> {
    if target_sq == 0.0 {
        return Ok(DVector::zeros(v.len()));
    }
    let ss = v.norm_squared();
    if ss == 0.0 {
        return Err(Error::degenerate("cannot rescale a zero vector"));
    }
    Ok(v * (target_sq / ss).sqrt())
}

/// Subtract `y_{i,1}` from every column: the first column becomes zero and
/// the stored effect becomes `eta - (1 - rho*) y1`.
pub fn difference_panel(data: &PanelData) -> PanelData {
    let y1 = data.y1();
    let mut y_full = data.y_full.clone();
    for mut col in y_full.column_iter_mut() {
        col -= &y1;
    }
    let eta_true = match (&data.eta_true, &data.config) {
        (Some(eta), Some(cfg)) => Some(eta - &y1 * (1.0 - cfg.rho_star)),
        _ => None,
    };
    PanelData {
        y_full,
        eta_true,
        u: data.u.clone(),
        config: data.config.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelMeta {
    pub n: usize,
    pub t: usize,
    pub first_column: String,
    pub config: Option<DgpConfig>,
}

/// Sidecar metadata path: `panel.csv` -> `panel.meta.json`.
pub fn meta_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

/// Header `id,y1,...,y{T+1}`; values in scientific notation with 17
/// significant digits so that reading back is bit-exact.
pub fn panel_to_csv_string(data: &PanelData) -> String {
    let cols = data.y_full.ncols();
    let mut out = String::from("id");
    for c in 1..=cols {
        out.push_str(&format!(",y{c}"));
    }
    out.push('\n');
    for i in 0..data.n() {
        out.push_str(&(i + 1).to_string());
        for c in 0..cols {
            out.push_str(&format!(",{:.16e}", data.y_full[(i, c)]));
        }
        out.push('\n');
    }
    out
}

pub fn write_panel_csv(data: &PanelData, csv_path: &Path) -> Result<PathBuf> {
    fs::write(csv_path, panel_to_csv_string(data))?;
    let meta = PanelMeta {
        n: data.n(),
        t: data.t(),
        first_column: "y1".to_string(),
        config: data.config.clone(),
    };
    let mpath = meta_path(csv_path);
    fs::write(&mpath, serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(mpath)
}

pub fn read_panel_csv(csv_path: &Path) -> Result<PanelData> {
    let mut reader = csv::Reader::from_path(csv_path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 4 || &headers[0] != "id" {
        return Err(Error::invalid(format!(
            "{}: expected header id,y1,...,y{{T+1}} with T >= 2",
            csv_path.display()
        )));
    }
    for (k, h) in headers.iter().enumerate().skip(1) {
        if h != format!("y{k}") {
            return Err(Error::invalid(format!(
                "{}: column {} should be named y{k}, found {h:?}",
                csv_path.display(),
                k + 1
            )));
        }
    }
    let cols = headers.len() - 1;
    let mut values = Vec::new();
    let mut rows = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != cols + 1 {
            return Err(Error::invalid(format!(
                "{}: row {} has {} fields, expected {}",
                csv_path.display(),
                line + 2,
                record.len(),
                cols + 1
            )));
        }
        for (k, field) in record.iter().enumerate().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::invalid(format!(
                    "{}: row {}, column y{k}: cannot parse {field:?}",
                    csv_path.display(),
                    line + 2
                ))
            })?;
            values.push(v);
        }
        rows += 1;
    }
    let y_full = DMatrix::from_row_slice(rows, cols, &values);
    let mut data = PanelData::from_observed(y_full)?;
    let mpath = meta_path(csv_path);
    if mpath.exists() {
        let meta: PanelMeta = serde_json::from_str(&fs::read_to_string(&mpath)?)?;
        if meta.n != rows || meta.t + 1 != cols {
            return Err(Error::invalid(format!(
                "{}: metadata says N={}, T={} but the CSV has N={rows}, T={}",
                mpath.display(),
                meta.n,
                meta.t,
                cols - 1
            )));
        }
        data.config = meta.config;
    }
    Ok(data)
}
