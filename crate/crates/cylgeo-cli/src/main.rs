//! Batch front end for the cylgeo closed-geodesic toolkit.
//!
//! Every command reads one JSON config, writes fixed-name artifacts into the
//! output directory, and finishes with a MANIFEST.json carrying the fully
//! materialized configuration so runs are self-describing and reproducible.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::fs;
use std::path::PathBuf;

use cylgeo::reduction::{circle_energy, random_stiefel};
use cylgeo::{
    compute_w, degree_check_cylinder, find_gamma_critical_points, gamma_discrete, great_circle,
    multiplicity_experiment, phi, spectrum, CircleParam, DiscreteLoop, ExperimentConfig,
    GammaSearchConfig, PerturbationForm, RefineOptions, WOptions,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "cylgeo", version, about = "Closed geodesics on perturbed cylinders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Path to the JSON experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's `output` field).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Search seed (overrides the config's `search.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread count (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Tabulate the reduced functional over an r-grid and report its
    /// critical points.
    GammaScan,
    /// Run the full multiplicity experiment and certify geodesics.
    Find,
    /// Audit the expansion residual in eps and the large-|r| decay.
    Verify,
    /// Eigenvalue spectrum of the projected Hessian at a loop.
    Spectrum,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Self::GammaScan => "gamma-scan",
            Self::Find => "find",
            Self::Verify => "verify",
            Self::Spectrum => "spectrum",
        }
    }
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifold {
    n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct Discretization {
    m: usize,
    m_q: usize,
}

impl Default for Discretization {
    fn default() -> Self {
        Self { m: 128, m_q: 128 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct Search {
    starts: usize,
    seed: u64,
    r_max: f64,
}

impl Default for Search {
    fn default() -> Self {
        Self {
            starts: 64,
            seed: 0,
            r_max: 20.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct Tolerances {
    grad_tol: f64,
    kernel_tol: f64,
    dedup_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            grad_tol: 1e-10,
            kernel_tol: 1e-7,
            dedup_tol: 0.0, // 0 means: derive from M
        }
    }
}

fn default_eps() -> f64 {
    0.02
}
fn default_decay_radii() -> Vec<f64> {
    vec![5.0, 10.0, 20.0]
}
fn default_expansion_samples() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CliConfig {
    manifold: Manifold,
    perturbation: PerturbationForm,
    #[serde(default = "default_eps")]
    eps: f64,
    #[serde(default)]
    eps_list: Option<Vec<f64>>,
    #[serde(default)]
    discretization: Discretization,
    #[serde(default)]
    search: Search,
    #[serde(default)]
    tolerances: Tolerances,
    #[serde(default)]
    output: Option<String>,
    /// Optional loop JSON file for the spectrum command; defaults to the
    /// great circle in the first coordinate plane at r = 0.
    #[serde(default)]
    loop_file: Option<String>,
    #[serde(default = "default_decay_radii")]
    decay_radii: Vec<f64>,
    #[serde(default = "default_expansion_samples")]
    expansion_samples: usize,
}

impl CliConfig {
    fn validate(&self) -> Result<()> {
        if self.manifold.n < 1 {
            bail!("config error at manifold.n: must be >= 1");
        }
        if self.perturbation.sphere_dim() != self.manifold.n {
            bail!(
                "config error at perturbation: block dimension implies N = {}, manifold.n = {}",
                self.perturbation.sphere_dim(),
                self.manifold.n
            );
        }
        if self.discretization.m < 8 {
            bail!("config error at discretization.m: must be >= 8");
        }
        if self.discretization.m_q < 3 {
            bail!("config error at discretization.m_q: must be >= 3");
        }
        for (name, v) in [
            ("tolerances.grad_tol", self.tolerances.grad_tol),
            ("tolerances.kernel_tol", self.tolerances.kernel_tol),
        ] {
            if v <= 0.0 {
                bail!("config error at {name}: must be > 0");
            }
        }
        if self.tolerances.dedup_tol < 0.0 {
            bail!("config error at tolerances.dedup_tol: must be >= 0");
        }
        if self.search.r_max <= 0.0 {
            bail!("config error at search.r_max: must be > 0");
        }
        if let Some(list) = &self.eps_list {
            if list.is_empty() {
                bail!("config error at eps_list: must be nonempty");
            }
        }
        Ok(())
    }

    fn dedup_tol(&self) -> f64 {
        if self.tolerances.dedup_tol > 0.0 {
            self.tolerances.dedup_tol
        } else {
            cylgeo::analysis::default_dedup_tol(self.discretization.m)
        }
    }

    fn gamma_search(&self) -> GammaSearchConfig {
        GammaSearchConfig {
            r_max: self.search.r_max,
            starts: self.search.starts,
            seed: self.search.seed,
            m_q: self.discretization.m_q,
            grad_tol: self.tolerances.grad_tol.max(1e-12),
            ..GammaSearchConfig::new(self.manifold.n)
        }
    }

    fn w_options(&self) -> WOptions {
        let mut o = WOptions::default();
        let needed = self
            .eps_list
            .as_deref()
            .unwrap_or(&[])
            .iter()
            .fold(self.eps.abs(), |a, e| a.max(e.abs()));
        o.eps_max = o.eps_max.max(needed);
        o
    }

    fn refine_options(&self) -> RefineOptions {
        RefineOptions {
            grad_tol: self.tolerances.grad_tol,
            kernel_tol: self.tolerances.kernel_tol,
            ..RefineOptions::default()
        }
    }
}

// ---------------------------------------------------------------------------
// Output helpers
// ---------------------------------------------------------------------------

struct RunDir {
    dir: PathBuf,
    outputs: Vec<String>,
}

impl RunDir {
    fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))?;
        Ok(Self {
            dir,
            outputs: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.dir.join(name), contents)
            .with_context(|| format!("cannot write {name}"))?;
        self.outputs.push(name.to_string());
        Ok(())
    }
}

fn to_pretty(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serialization cannot fail");
    s.push('\n');
    s
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_gamma_scan(cfg: &CliConfig, run: &mut RunDir) -> Result<serde_json::Value> {
    let report = find_gamma_critical_points(&cfg.perturbation, &cfg.gamma_search())?;
    let mut csv = String::from("r,gamma_min,gamma_max\n");
    for s in &report.gamma_samples {
        csv.push_str(&format!(
            "{:.16e},{:.16e},{:.16e}\n",
            s.r, s.gamma_min, s.gamma_max
        ));
    }
    run.write("gamma.csv", &csv)?;
    run.write("critical_points.json", &to_pretty(&report))?;
    Ok(json!({
        "critical_points": report.critical_points.len(),
        "flat": report.flat,
    }))
}

fn cmd_find(cfg: &CliConfig, run: &mut RunDir) -> Result<serde_json::Value> {
    let core = ExperimentConfig {
        n: cfg.manifold.n,
        m: cfg.discretization.m,
        eps: cfg.eps,
        search: cfg.gamma_search(),
        w: cfg.w_options(),
        refine: cfg.refine_options(),
        dedup_tol: cfg.dedup_tol(),
        decay_radius: cfg.search.r_max,
    };
    let report = multiplicity_experiment(&cfg.perturbation, &core)?;
    run.write("certificates.json", &to_pretty(&report.certificates))?;
    run.write("orbits.json", &to_pretty(&report.orbits))?;
    // the cylinder gets the 1-D degree test as well
    let degree = if cfg.manifold.n == 1 {
        Some(degree_check_cylinder(
            &cfg.perturbation,
            cfg.search.r_max.min(5.0),
            8,
            cfg.discretization.m_q,
        )?)
    } else {
        None
    };
    let status = if report.degenerate {
        "degenerate"
    } else if report.distinct_nontrivial >= report.target {
        "target-met"
    } else {
        "below-target"
    };
    Ok(json!({
        "achieved": report.distinct_nontrivial,
        "target": report.target,
        "status": status,
        "degenerate": report.degenerate,
        "warnings": report.warnings,
        "degree": degree.map(|d| json!({
            "degree": d.degree,
            "h3_pass": d.h3_pass,
            "inconclusive": d.inconclusive,
        })),
    }))
}

fn cmd_verify(cfg: &CliConfig, run: &mut RunDir) -> Result<serde_json::Value> {
    let eps_list = cfg
        .eps_list
        .clone()
        .context("config error at eps_list: required for verify")?;
    let n = cfg.manifold.n;
    let m = cfg.discretization.m;
    let form = &cfg.perturbation;
    let wopts = cfg.w_options();

    // sampled circles, deterministic in the seed
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.search.seed);
    let params: Vec<CircleParam> = (0..cfg.expansion_samples)
        .map(|_| {
            let (p, q) = random_stiefel(n, &mut rng);
            CircleParam {
                r: rng.gen_range(-2.0..2.0),
                p,
                q,
            }
        })
        .collect();

    let mut csv = String::from("section,x,y1,y2\n");
    let mut pairs = Vec::new();
    for &eps in &eps_list {
        let mut worst = 0.0f64;
        for param in &params {
            let b = circle_energy(param, m)?;
            let g = gamma_discrete(param, form, m)?;
            let p = phi(param, form, eps, m, &wopts)?;
            worst = worst.max((p - b - eps * g).abs());
        }
        pairs.push((eps, worst));
        csv.push_str(&format!("expansion,{eps:.16e},{worst:.16e},\n"));
    }
    // log-log least-squares slope; a flat zero table fits slope 0
    let slope = if pairs.iter().all(|&(_, r)| r > 0.0) {
        let pts: Vec<(f64, f64)> = pairs.iter().map(|&(e, r)| (e.ln(), r.ln())).collect();
        let np = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        (np * sxy - sx * sy) / (np * sxx - sx * sx)
    } else {
        0.0
    };
    csv.push_str(&format!("slope,,{slope:.16e},\n"));

    // decay in |r| at the configured eps
    let mut decay = Vec::new();
    for &r in &cfg.decay_radii {
        let param = CircleParam::coordinate_plane(n, r, 0, 1);
        let b = circle_energy(&param, m)?;
        let corr = compute_w(&param, form, cfg.eps, m, &wopts)?;
        let p = phi(&param, form, cfg.eps, m, &wopts)?;
        let gap = (p - b).abs();
        let wn = corr.w_norm();
        decay.push((r, gap, wn));
        csv.push_str(&format!("decay,{r:.16e},{gap:.16e},{wn:.16e}\n"));
    }
    run.write("verify.csv", &csv)?;
    Ok(json!({
        "slope": slope,
        "eps_count": eps_list.len(),
        "decay_final_gap": decay.last().map(|d| d.1),
        "decay_final_w": decay.last().map(|d| d.2),
    }))
}

fn cmd_spectrum(cfg: &CliConfig, run: &mut RunDir) -> Result<serde_json::Value> {
    let lp = match &cfg.loop_file {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read loop file {path}"))?;
            DiscreteLoop::from_json(&text)?
        }
        None => great_circle(
            &CircleParam::coordinate_plane(cfg.manifold.n, 0.0, 0, 1),
            cfg.discretization.m,
        )?,
    };
    let summary = spectrum(&lp, &cfg.perturbation, cfg.eps)?;
    run.write("spectrum.csv", &summary.to_csv())?;
    Ok(json!({
        "kernel_dim": summary.kernel_dim,
        "morse_index": summary.morse_index,
        "gap_ratio": summary.gap_ratio,
        "reliable": summary.reliable,
    }))
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

fn write_manifest(
    run: &mut RunDir,
    command: &str,
    cfg: &CliConfig,
    threads: usize,
    result: &std::result::Result<serde_json::Value, String>,
) -> Result<()> {
    let manifest = json!({
        "command": command,
        "status": if result.is_ok() { "complete" } else { "failed" },
        "error": result.as_ref().err(),
        "summary": result.as_ref().ok(),
        "seed": cfg.search.seed,
        "threads": threads,
        "config": cfg,
        "outputs": run.outputs,
    });
    fs::write(
        run.dir.join("MANIFEST.json"),
        to_pretty(&manifest),
    )
    .context("cannot write MANIFEST.json")?;
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let threads = cli.threads.unwrap_or(0);
    if threads > 0 {
        // results never depend on the pool size; ignore double-init errors
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let effective_threads = rayon::current_num_threads();

    let setup = || -> Result<(CliConfig, RunDir)> {
        let config_path = cli
            .config
            .as_ref()
            .context("--config <path> is required")?;
        let text = fs::read_to_string(config_path)
            .with_context(|| format!("cannot read config {}", config_path.display()))?;
        let mut cfg: CliConfig =
            serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("config error: {e}"))?;
        if let Some(seed) = cli.seed {
            cfg.search.seed = seed;
        }
        let out = cli
            .out
            .clone()
            .or_else(|| cfg.output.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("cylgeo-run"));
        cfg.output = Some(out.display().to_string());
        cfg.validate()?;
        Ok((cfg, RunDir::new(out)?))
    };

    let (cfg, mut run) = match setup() {
        Ok(pair) => pair,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    };

    let outcome = match cli.command {
        Command::GammaScan => cmd_gamma_scan(&cfg, &mut run),
        Command::Find => cmd_find(&cfg, &mut run),
        Command::Verify => cmd_verify(&cfg, &mut run),
        Command::Spectrum => cmd_spectrum(&cfg, &mut run),
    };
    let result = outcome.map_err(|e| format!("{e:#}"));
    if let Err(e) = write_manifest(&mut run, cli.command.name(), &cfg, effective_threads, &result) {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
    match result {
        Ok(summary) => {
            println!("{}", to_pretty(&json!({"status": "complete", "summary": summary})));
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
