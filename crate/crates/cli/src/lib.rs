//! Command implementations behind the `dynpanel` binary.
//!
//! Every command reads one JSON config (or a dataset CSV), writes its outputs
//! and a run manifest under `--output-dir`, and prints a summary in the
//! requested `--format`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use dynpanel::asymptotics::{avar_compare, avar_report, report_to_csv, AsymptoticReport};
use dynpanel::dgp::{
    difference_panel, read_panel_csv, simulate, write_panel_csv, DgpConfig, PanelData,
};
use dynpanel::estimators::{
    estimate_mile, estimate_mile_conditional, lancaster_roots, EstimationResult, SearchConfig,
    SelectionRule,
};
use dynpanel::likelihoods::{Theta, Theta1};
use dynpanel::montecarlo::{run_with_threads, McConfig, McSummary};

pub const CONFIG_SCHEMA_VERSION: &str = "1";

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "dynpanel",
    version,
    about = "Dynamic panel AR(1): simulate, estimate, asymptotic variances, Monte Carlo"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalOpts {
    /// Override the master seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for Monte Carlo runs (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    pub output_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a panel from a DGP config.
    Simulate { config: PathBuf },
    /// Run estimators on a dataset CSV.
    Estimate(EstimateArgs),
    /// Evaluate asymptotic variances at parameter points.
    Avar { config: PathBuf },
    /// Run a Monte Carlo study.
    Mc {
        config: PathBuf,
        /// Local drift `h` for omega2 (overrides the config).
        #[arg(long)]
        h: Option<f64>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    pub data: PathBuf,
    #[arg(long)]
    pub mile: bool,
    #[arg(long)]
    pub lancaster: bool,
    #[arg(long)]
    pub conditional: bool,
    /// Root-selection rule for Lancaster's estimator.
    #[arg(long, default_value = "min-abs-sml")]
    pub lancaster_rule: String,
    /// JSON file with a search config (bounds, grid, tolerances).
    #[arg(long)]
    pub search: Option<PathBuf>,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_CONFIG,
        message: msg.into(),
    }
}

fn runtime_err(msg: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_RUNTIME,
        message: msg.into(),
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Versions {
    pub tool: String,
    pub config_schema: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: PathBuf,
    pub output_dir: PathBuf,
    pub versions: Versions,
    pub master_seed: Option<u64>,
    pub outputs: Vec<PathBuf>,
}

/// What a command produced: files written and the text for stdout.
#[derive(Debug)]
pub struct Outcome {
    pub stdout: String,
    pub outputs: Vec<PathBuf>,
    pub manifest: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text =
        fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| {
        config_err(format!(
            "{}: line {}, column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents)
        .map_err(|e| runtime_err(format!("cannot write {}: {e}", path.display())))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_string())
}

fn finish(
    command: &str,
    config_path: &Path,
    g: &GlobalOpts,
    seed: Option<u64>,
    outputs: Vec<PathBuf>,
    stdout: String,
) -> CliResult<Outcome> {
    let manifest = RunManifest {
        command: command.to_string(),
        config_path: config_path.to_path_buf(),
        output_dir: g.output_dir.clone(),
        versions: Versions {
            tool: env!("CARGO_PKG_VERSION").to_string(),
            config_schema: CONFIG_SCHEMA_VERSION.to_string(),
        },
        master_seed: seed,
        outputs: outputs.clone(),
    };
    let path = g
        .output_dir
        .join(format!("{}.{command}.manifest.json", stem(config_path)));
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| runtime_err(e.to_string()))? + "\n";
    write_file(&path, &text)?;
    Ok(Outcome {
        stdout,
        outputs,
        manifest: path,
    })
}

/// Run a parsed command line.
pub fn execute(cli: &Cli) -> CliResult<Outcome> {
    fs::create_dir_all(&cli.global.output_dir).map_err(|e| {
        runtime_err(format!(
            "cannot create {}: {e}",
            cli.global.output_dir.display()
        ))
    })?;
    match &cli.command {
        Command::Simulate { config } => cmd_simulate(config, &cli.global),
        Command::Estimate(args) => cmd_estimate(args, &cli.global),
        Command::Avar { config } => cmd_avar(config, &cli.global),
        Command::Mc { config, h } => cmd_mc(config, *h, &cli.global),
    }
}

pub fn cmd_simulate(config_path: &Path, g: &GlobalOpts) -> CliResult<Outcome> {
    let mut cfg: DgpConfig = read_json(config_path)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()
        .map_err(|e| config_err(format!("{}: {e}", config_path.display())))?;
    let data = simulate(&cfg).map_err(|e| runtime_err(e.to_string()))?;
    let csv_path = g.output_dir.join(format!("{}.csv", stem(config_path)));
    let meta = write_panel_csv(&data, &csv_path).map_err(|e| runtime_err(e.to_string()))?;
    let stdout = format!("{}\n{}\n", csv_path.display(), meta.display());
    finish(
        "simulate",
        config_path,
        g,
        Some(cfg.seed),
        vec![csv_path, meta],
        stdout,
    )
}

/// One row of the estimate output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateEntry {
    pub estimator: String,
    /// Estimated on the differenced panel because `y1` was not zero.
    pub differenced: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub result: Option<EstimationResult>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub skipped: Option<String>,
}

pub fn estimate_entries(
    data: &PanelData,
    mile: bool,
    lancaster: bool,
    conditional: bool,
    search: &SearchConfig,
) -> CliResult<Vec<EstimateEntry>> {
    let all = !(mile || lancaster || conditional);
    let level_zero = data.has_zero_initial();
    let uncond = if level_zero {
        data.clone()
    } else {
        difference_panel(data)
    };
    let mut out = Vec::new();
    if all || mile {
        let r = estimate_mile(&uncond, search).map_err(|e| runtime_err(format!("mile: {e}")))?;
        out.push(EstimateEntry {
            estimator: "mile".into(),
            differenced: !level_zero,
            result: Some(r),
            skipped: None,
        });
    }
    if all || lancaster {
        let r =
            lancaster_roots(&uncond, search).map_err(|e| runtime_err(format!("lancaster: {e}")))?;
        out.push(EstimateEntry {
            estimator: "lancaster".into(),
            differenced: !level_zero,
            result: Some(r),
            skipped: None,
        });
    }
    if all || conditional {
        if level_zero {
            let msg = "the first column y1 is identically zero, so the conditional estimator has nothing to \
                       condition on; drop --conditional or use data with a nonzero initial observation";
            if conditional {
                return Err(runtime_err(msg));
            }
            out.push(EstimateEntry {
                estimator: "conditional".into(),
                differenced: false,
                result: None,
                skipped: Some("y1 = 0".into()),
            });
        } else {
            let r = estimate_mile_conditional(data, search)
                .map_err(|e| runtime_err(format!("conditional: {e}")))?;
            out.push(EstimateEntry {
                estimator: "conditional".into(),
                differenced: false,
                result: Some(r),
                skipped: None,
            });
        }
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into())
}

pub fn estimate_table(entries: &[EstimateEntry], format: Format) -> String {
    let header = [
        "estimator",
        "data",
        "rho",
        "sigma2",
        "omega2",
        "delta",
        "converged",
        "roots",
        "warnings",
    ];
    let rows: Vec<Vec<String>> = entries
        .iter()
        .map(|e| {
            let data = if e.differenced {
                "differenced"
            } else {
                "levels"
            }
            .to_string();
            match &e.result {
                Some(r) => vec![
                    e.estimator.clone(),
                    data,
                    format!("{:.6}", r.theta_hat.rho),
                    format!("{:.6}", r.theta_hat.sigma2),
                    fmt_opt(r.theta_hat.omega2),
                    fmt_opt(r.theta_hat.delta),
                    r.converged.to_string(),
                    r.n_local_maxima
                        .map(|n| n.to_string())
                        .unwrap_or_else(|| "-".into()),
                    r.warnings.join("; "),
                ],
                None => {
                    let mut v = vec![e.estimator.clone(), data];
                    v.extend(std::iter::repeat_n("-".to_string(), 6));
                    v.push(format!(
                        "skipped: {}",
                        e.skipped.clone().unwrap_or_default()
                    ));
                    v
                }
            }
        })
        .collect();
    render_table(&header, &rows, format)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Aligned plain text or CSV.
pub fn render_table(header: &[&str], rows: &[Vec<String>], format: Format) -> String {
    let mut out = String::new();
    match format {
        Format::Csv | Format::Json => {
            out.push_str(&header.join(","));
            out.push('\n');
            for r in rows {
                out.push_str(&r.iter().map(|s| csv_field(s)).collect::<Vec<_>>().join(","));
                out.push('\n');
            }
        }
        Format::Text => {
            let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
            for r in rows {
                for (w, c) in widths.iter_mut().zip(r) {
                    *w = (*w).max(c.len());
                }
            }
            let line = |cells: Vec<&str>| -> String {
                let mut s = String::new();
                for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
                    if i + 1 == cells.len() {
                        s.push_str(c);
                    } else {
                        let _ = write!(s, "{c:<w$}  ");
                    }
                }
                s.trim_end().to_string() + "\n"
            };
            out.push_str(&line(header.to_vec()));
            for r in rows {
                out.push_str(&line(r.iter().map(|s| s.as_str()).collect()));
            }
        }
    }
    out
}

pub fn cmd_estimate(args: &EstimateArgs, g: &GlobalOpts) -> CliResult<Outcome> {
    let rule: SelectionRule = args
        .lancaster_rule
        .parse()
        .map_err(|e: dynpanel::Error| config_err(e.to_string()))?;
    let mut search = match &args.search {
        Some(p) => read_json::<SearchConfig>(p)?,
        None => SearchConfig::default(),
    };
    search.lancaster_rule = rule;
    search.validate().map_err(|e| config_err(e.to_string()))?;
    let data = read_panel_csv(&args.data).map_err(|e| match e {
        dynpanel::Error::InvalidInput(_) => config_err(e.to_string()),
        _ => runtime_err(e.to_string()),
    })?;
    let entries = estimate_entries(&data, args.mile, args.lancaster, args.conditional, &search)?;
    let base = format!("{}.{}", stem(&args.data), rule.name());
    let json_path = g.output_dir.join(format!("{base}.estimates.json"));
    let csv_path = g.output_dir.join(format!("{base}.estimates.csv"));
    let json =
        serde_json::to_string_pretty(&entries).map_err(|e| runtime_err(e.to_string()))? + "\n";
    write_file(&json_path, &json)?;
    write_file(&csv_path, &estimate_table(&entries, Format::Csv))?;
    let stdout = match g.format {
        Format::Json => json,
        f => estimate_table(&entries, f),
    };
    let seed = data.config.as_ref().map(|c| c.seed);
    finish(
        "estimate",
        &args.data,
        g,
        seed,
        vec![json_path, csv_path],
        stdout,
    )
}

/// One parameter point for `avar`. With `delta` and `y1_norm_bar2` the point
/// is a conditional-model point and the report includes the comparison with
/// estimation on differenced data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AvarPoint {
    pub t: usize,
    pub rho: f64,
    pub sigma2: f64,
    pub omega2: f64,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub y1_norm_bar2: Option<f64>,
}

/// Cartesian grid of points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AvarSweep {
    pub t: Vec<usize>,
    pub rho: Vec<f64>,
    pub omega2: Vec<f64>,
    #[serde(default = "one")]
    pub sigma2: Vec<f64>,
    #[serde(default)]
    pub delta: Vec<f64>,
    #[serde(default)]
    pub y1_norm_bar2: Option<f64>,
}

fn one() -> Vec<f64> {
    vec![1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AvarConfig {
    #[serde(default)]
    pub schema_version: Option<String>,
    #[serde(default)]
    pub points: Vec<AvarPoint>,
    #[serde(default)]
    pub sweep: Option<AvarSweep>,
}

impl AvarConfig {
    pub fn expand(&self) -> Vec<AvarPoint> {
        let mut out = self.points.clone();
        if let Some(s) = &self.sweep {
            for &t in &s.t {
                for &rho in &s.rho {
                    for &omega2 in &s.omega2 {
                        for &sigma2 in &s.sigma2 {
                            if s.delta.is_empty() {
                                out.push(AvarPoint {
                                    t,
                                    rho,
                                    sigma2,
                                    omega2,
                                    delta: None,
                                    y1_norm_bar2: None,
                                });
                            } else {
                                for &delta in &s.delta {
                                    out.push(AvarPoint {
                                        t,
                                        rho,
                                        sigma2,
                                        omega2,
                                        delta: Some(delta),
                                        y1_norm_bar2: Some(s.y1_norm_bar2.unwrap_or(1.0)),
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

pub fn avar_point_report(p: &AvarPoint) -> dynpanel::Result<AsymptoticReport> {
    match (p.delta, p.y1_norm_bar2) {
        (Some(d), Some(y)) => {
            avar_compare(&Theta1::new(p.rho, p.sigma2, d, p.omega2), None, p.t, y)
        }
        (None, None) => avar_report(&Theta::new(p.rho, p.sigma2, p.omega2), p.t),
        _ => Err(dynpanel::Error::InvalidInput(
            "a conditional point needs both delta and y1_norm_bar2".into(),
        )),
    }
}

pub fn avar_table(reports: &[AsymptoticReport], format: Format) -> String {
    let header = [
        "t",
        "rho",
        "omega2",
        "delta",
        "estimator",
        "avar_rho",
        "avar_sigma2",
        "flags",
    ];
    let mut rows = Vec::new();
    for r in reports {
        for (est, ar) in &r.avar_rho {
            rows.push(vec![
                r.point.t.to_string(),
                format!("{}", r.point.rho),
                format!("{}", r.point.omega2_conditional.unwrap_or(r.point.omega2)),
                r.point
                    .delta
                    .map(|d| d.to_string())
                    .unwrap_or_else(|| "-".into()),
                est.clone(),
                format!("{ar:.6}"),
                fmt_opt(r.avar_sigma2.get(est).copied()),
                r.singular_flags.join("; "),
            ]);
        }
        if let Some(e) = &r.efficiency {
            let verdict = if e.knife_edge {
                "equal (delta + rho = 1)"
            } else if e.holds {
                "conditional strictly smaller"
            } else {
                "ORDERING VIOLATED"
            };
            rows.push(vec![
                r.point.t.to_string(),
                format!("{}", r.point.rho),
                format!("{}", r.point.omega2_conditional.unwrap_or(r.point.omega2)),
                r.point
                    .delta
                    .map(|d| d.to_string())
                    .unwrap_or_else(|| "-".into()),
                "mile - conditional".into(),
                format!("{:.3e}", e.margin_rho),
                format!("{:.3e}", e.margin_sigma2),
                verdict.into(),
            ]);
        }
    }
    render_table(&header, &rows, format)
}

pub fn cmd_avar(config_path: &Path, g: &GlobalOpts) -> CliResult<Outcome> {
    let cfg: AvarConfig = read_json(config_path)?;
    let points = cfg.expand();
    if points.is_empty() {
        return Err(config_err(format!(
            "{}: no points or sweep given",
            config_path.display()
        )));
    }
    let mut reports = Vec::with_capacity(points.len());
    for (k, p) in points.iter().enumerate() {
        let r = avar_point_report(p)
            .map_err(|e| config_err(format!("point {} ({p:?}): {e}", k + 1)))?;
        reports.push(r);
    }
    let base = stem(config_path);
    let json_path = g.output_dir.join(format!("{base}.avar.json"));
    let csv_path = g.output_dir.join(format!("{base}.avar.csv"));
    let json =
        serde_json::to_string_pretty(&reports).map_err(|e| runtime_err(e.to_string()))? + "\n";
    write_file(&json_path, &json)?;
    write_file(
        &csv_path,
        &report_to_csv(&reports).map_err(|e| runtime_err(e.to_string()))?,
    )?;
    let stdout = match g.format {
        Format::Json => json,
        f => avar_table(&reports, f),
    };
    finish(
        "avar",
        config_path,
        g,
        None,
        vec![json_path, csv_path],
        stdout,
    )
}

pub fn mc_table(s: &McSummary, format: Format) -> String {
    let header = [
        "estimator",
        "data",
        "ok",
        "failed",
        "bias_rho",
        "mae_rho",
        "var_rho",
        "avar_rho",
        "ratio_rho",
        "var_sigma2",
        "avar_sigma2",
        "ratio_sigma2",
    ];
    let cell = |m: &Option<Vec<Vec<f64>>>, k: usize| fmt_opt(m.as_ref().map(|m| m[k][k]));
    let ratio =
        |m: &Option<Vec<Vec<Option<f64>>>>, k: usize| fmt_opt(m.as_ref().and_then(|m| m[k][k]));
    let mut rows = Vec::new();
    for e in &s.estimators {
        rows.push(vec![
            e.label.clone(),
            if e.differenced {
                "differenced"
            } else {
                "levels"
            }
            .into(),
            e.n_ok.to_string(),
            e.failures.to_string(),
            format!("{:.6}", e.mean_bias[0]),
            format!("{:.6}", e.mean_abs_error[0]),
            format!("{:.6}", e.empirical_var_scaled[0][0]),
            cell(&e.theory_avar, 0),
            ratio(&e.ratio, 0),
            format!("{:.6}", e.empirical_var_scaled[1][1]),
            cell(&e.theory_avar, 1),
            ratio(&e.ratio, 1),
        ]);
        if let Some(ex) = &e.theory_avar_exact {
            rows.push(vec![
                format!("{} [exact score variance]", e.label),
                if e.differenced {
                    "differenced"
                } else {
                    "levels"
                }
                .into(),
                e.n_ok.to_string(),
                e.failures.to_string(),
                "-".into(),
                "-".into(),
                format!("{:.6}", e.empirical_var_scaled[0][0]),
                format!("{:.6}", ex[0][0]),
                format!("{:.6}", e.empirical_var_scaled[0][0] / ex[0][0]),
                format!("{:.6}", e.empirical_var_scaled[1][1]),
                format!("{:.6}", ex[1][1]),
                format!("{:.6}", e.empirical_var_scaled[1][1] / ex[1][1]),
            ]);
        }
    }
    render_table(&header, &rows, format)
}

pub fn cmd_mc(config_path: &Path, h: Option<f64>, g: &GlobalOpts) -> CliResult<Outcome> {
    let mut cfg: McConfig = read_json(config_path)?;
    if let Some(s) = g.seed {
        cfg.dgp.seed = s;
    }
    if h.is_some() {
        cfg.local_shift_h = h;
    }
    cfg.validate()
        .map_err(|e| config_err(format!("{}: {e}", config_path.display())))?;
    let threads = g.threads.unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    });
    let summary = run_with_threads(&cfg, threads).map_err(|e| match e {
        dynpanel::Error::TooManyFailures {
            failed,
            total,
            reasons,
        } => {
            let mut msg = format!("{failed} of {total} replications failed; reasons:\n");
            for (why, n) in reasons {
                let _ = writeln!(msg, "  {n:>6}  {why}");
            }
            runtime_err(msg)
        }
        dynpanel::Error::InvalidInput(m) => config_err(m),
        other => runtime_err(other.to_string()),
    })?;
    let base = stem(config_path);
    let json_path = g.output_dir.join(format!("{base}.summary.json"));
    let table_path = g.output_dir.join(format!("{base}.table.csv"));
    let json = summary.to_json().map_err(|e| runtime_err(e.to_string()))? + "\n";
    write_file(&json_path, &json)?;
    write_file(&table_path, &mc_table(&summary, Format::Csv))?;
    let mut outputs = vec![json_path, table_path];
    if cfg.collect.estimates {
        let p = g.output_dir.join(format!("{base}.replications.csv"));
        write_file(
            &p,
            &summary
                .records_to_csv()
                .map_err(|e| runtime_err(e.to_string()))?,
        )?;
        outputs.push(p);
    }
    let stdout = match g.format {
        Format::Json => json,
        f => mc_table(&summary, f),
    };
    finish("mc", config_path, g, Some(cfg.dgp.seed), outputs, stdout)
}
