//! Full variational refinement on the loop space: projected-gradient plus
//! Newton polish to a certified critical point of the perturbed energy,
//! warm-started continuation in epsilon, and the end-to-end multiplicity
//! experiment.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::analysis::{self, SpectrumSummary};
use crate::error::{Error, Result};
use crate::loop_space::{energy, gradient, hessian, DiscreteLoop};
use crate::metric::{check_h1, check_h2, H1Report, H2Report, PerturbationForm};
use crate::reduction::{
    compute_w, find_gamma_critical_points, great_circle, GammaSearchConfig, ReductionReport,
    WOptions,
};

/// Options for [`refine`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineOptions {
    /// Certified residual bound on the projected gradient (L2 norm).
    pub grad_tol: f64,
    /// Gradient norm below which the solver switches to Newton.
    pub switch_tol: f64,
    pub max_gradient_iters: usize,
    pub max_newton_iters: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Backtracking shrink factor.
    pub shrink: f64,
    /// Relative kernel cut for the Newton pseudo-solve.
    pub kernel_tol: f64,
    /// Energy fraction of the great-circle level below which a solution is
    /// flagged as trivial (collapsed).
    pub trivial_fraction: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-10,
            switch_tol: 5e-2,
            max_gradient_iters: 2000,
            max_newton_iters: 60,
            armijo: 1e-4,
            shrink: 0.5,
            kernel_tol: 1e-7,
            trivial_fraction: 0.1,
        }
    }
}

/// Canonical representative data of the O(2) orbit of a loop: the group
/// element sending the loop to its lexicographically minimal form.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct O2NormalForm {
    pub shift: usize,
    pub reflect: bool,
}

/// A certified discrete closed geodesic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeodesicCertificate {
    #[serde(rename = "loop")]
    pub curve: DiscreteLoop,
    pub energy: f64,
    /// L2 norm of the projected energy gradient at the solution.
    pub residual: f64,
    pub spectrum: SpectrumSummary,
    pub o2_normal_form: O2NormalForm,
    pub eps: f64,
    /// Energy collapsed below `trivial_fraction` of the great-circle level;
    /// the loop is a point curve, not a geometrically distinct geodesic.
    pub trivial: bool,
}

/// Discrete energy of a great circle at resolution `m` (the level `b`).
pub fn discrete_circle_energy(m: usize) -> f64 {
    let mf = m as f64;
    mf * mf * (1.0 - (2.0 * PI / mf).cos())
}

fn lex_less(a: &DVector<f64>, b: &DVector<f64>) -> bool {
    for i in 0..a.len() {
        if a[i] < b[i] - 1e-12 {
            return true;
        }
        if a[i] > b[i] + 1e-12 {
            return false;
        }
    }
    false
}

fn o2_normal_form(lp: &DiscreteLoop) -> O2NormalForm {
    let m = lp.node_count();
    let mut best = O2NormalForm {
        shift: 0,
        reflect: false,
    };
    let mut best_data = lp.flat().clone_owned();
    for reflect in [false, true] {
        for shift in 0..m {
            let Ok(cand) = lp.o2_act(shift, reflect) else {
                continue;
            };
            if lex_less(cand.flat(), &best_data) {
                best_data = cand.flat().clone_owned();
                best = O2NormalForm { shift, reflect };
            }
        }
    }
    best
}

/// One refinement step trace entry: phase tag (`'g'` gradient, `'n'`
/// Newton) and the accepted energy.
pub type RefineTrace = Vec<(char, f64)>;

/// Refines an initial loop to a critical point of the perturbed energy.
///
/// Projected gradient descent with Armijo backtracking until the gradient
/// norm drops below `switch_tol`, then Newton with a deflated pseudo-solve
/// of the projected Hessian. Accepted gradient-phase steps never increase
/// the energy.
pub fn refine(
    initial: &DiscreteLoop,
    form: &PerturbationForm,
    eps: f64,
    opts: &RefineOptions,
) -> Result<GeodesicCertificate> {
    refine_with_trace(initial, form, eps, opts).map(|(c, _)| c)
}

/// [`refine`] variant that also returns the accepted-step energy trace.
pub fn refine_with_trace(
    initial: &DiscreteLoop,
    form: &PerturbationForm,
    eps: f64,
    opts: &RefineOptions,
) -> Result<(GeodesicCertificate, RefineTrace)> {
    let m = initial.node_count();
    let n = initial.sphere_dim();
    let mut u = initial.clone();
    let mut trace: RefineTrace = vec![('g', energy(&u, form, eps)?)];

    // --- projected gradient with Armijo backtracking ---
    let mut step = 1.0 / (4.0 * PI * PI * m as f64); // inverse curvature scale
    let mut gnorm = f64::INFINITY;
    for _ in 0..opts.max_gradient_iters {
        let g = gradient(&u, form, eps)?;
        gnorm = g.l2_norm();
        if gnorm <= opts.switch_tol {
            break;
        }
        let e0 = energy(&u, form, eps)?;
        let gg = g.flat().dot(g.flat());
        let mut t = step * 2.0;
        let mut accepted = false;
        for _ in 0..40 {
            let dir = g.scale(-t);
            let cand = u.retract(&dir, 1.0)?;
            let ec = energy(&cand, form, eps)?;
            if ec <= e0 - opts.armijo * t * gg {
                u = cand;
                trace.push(('g', ec));
                step = t;
                accepted = true;
                break;
            }
            t *= opts.shrink;
        }
        if !accepted {
            // gradient direction exhausted at machine precision
            break;
        }
    }
    if gnorm > opts.switch_tol {
        let g = gradient(&u, form, eps)?;
        gnorm = g.l2_norm();
        if gnorm > opts.switch_tol {
            return Err(Error::Divergence {
                iterations: opts.max_gradient_iters,
                residual: gnorm,
            });
        }
    }

    // --- Newton polish with deflated pseudo-solve ---
    let tdim = m * (n + 2);
    for _ in 0..opts.max_newton_iters {
        let g = gradient(&u, form, eps)?;
        gnorm = g.l2_norm();
        if gnorm <= opts.grad_tol {
            break;
        }
        let h = hessian(&u, form, eps)?;
        let sym = 0.5 * (&h + h.transpose());
        let eig = sym.symmetric_eigen();
        let maxabs = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l.abs()));
        let cut = opts.kernel_tol * maxabs;
        let mut delta = DVector::zeros(tdim);
        let rhs = -g.flat();
        for i in 0..tdim {
            let lam = eig.eigenvalues[i];
            if lam.abs() > cut {
                let v = eig.eigenvectors.column(i);
                let c = v.dot(&rhs) / lam;
                delta.axpy(c, &v, 1.0);
            }
        }
        // damped acceptance on the gradient norm
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let dirdata = &delta * t;
            let dir = u.project_tangent(&dirdata);
            let cand = u.retract(&dir, 1.0)?;
            let gc = gradient(&cand, form, eps)?;
            if gc.l2_norm() < gnorm {
                u = cand;
                trace.push(('n', energy(&u, form, eps)?));
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let residual = gradient(&u, form, eps)?.l2_norm();
    if residual > opts.grad_tol {
        return Err(Error::Divergence {
            iterations: opts.max_newton_iters,
            residual,
        });
    }

    let e = energy(&u, form, eps)?;
    let trivial = e <= opts.trivial_fraction * discrete_circle_energy(m);
    let spectrum = analysis::spectrum(&u, form, eps)?;
    let nf = o2_normal_form(&u);
    Ok((
        GeodesicCertificate {
            curve: u,
            energy: e,
            residual,
            spectrum,
            o2_normal_form: nf,
            eps,
            trivial,
        },
        trace,
    ))
}

/// Warm-started continuation in `eps`: refines at each value of an
/// ascending list starting from 0, seeding each solve with the previous
/// solution. On failure returns the prefix computed so far.
pub fn continuation(
    param: &crate::reduction::CircleParam,
    form: &PerturbationForm,
    eps_list: &[f64],
    m: usize,
    opts: &RefineOptions,
) -> Result<Vec<GeodesicCertificate>> {
    if eps_list.is_empty() {
        return Err(Error::InvalidConfig("empty eps list".into()));
    }
    if eps_list.windows(2).any(|w| w[1] <= w[0]) || eps_list[0] < 0.0 {
        return Err(Error::InvalidConfig(
            "eps list must be ascending and nonnegative".into(),
        ));
    }
    let mut out = Vec::with_capacity(eps_list.len());
    let mut current = great_circle(param, m)?;
    for &eps in eps_list {
        match refine(&current, form, eps, opts) {
            Ok(cert) => {
                current = cert.curve.clone();
                out.push(cert);
            }
            Err(_) => break,
        }
    }
    Ok(out)
}

/// Configuration of the end-to-end multiplicity experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Sphere dimension `N`.
    pub n: usize,
    /// Loop resolution.
    pub m: usize,
    pub eps: f64,
    pub search: GammaSearchConfig,
    pub w: WOptions,
    pub refine: RefineOptions,
    /// O(2) alignment tolerance for deduplication (RMS node distance).
    pub dedup_tol: f64,
    /// Radius for the decay hypothesis check.
    pub decay_radius: f64,
}

impl ExperimentConfig {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            m: 128,
            eps: 0.02,
            search: GammaSearchConfig::new(n),
            w: WOptions::default(),
            refine: RefineOptions::default(),
            dedup_tol: analysis::default_dedup_tol(128),
            decay_radius: 20.0,
        }
    }
}

/// One dedup class of certified geodesics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrbitClass {
    pub representative: GeodesicCertificate,
    pub members: usize,
    /// Maximal in-class alignment distance.
    pub alignment_distance: f64,
}

/// Outcome of [`multiplicity_experiment`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub h1: H1Report,
    pub h2: H2Report,
    pub reduction: ReductionReport,
    pub certificates: Vec<GeodesicCertificate>,
    pub orbits: Vec<OrbitClass>,
    /// Count of distinct nontrivial orbit classes actually certified.
    pub distinct_nontrivial: usize,
    /// Multiplicity target suggested by the hypotheses: `2N` when the
    /// sign-definiteness check passes, else `N`.
    pub target: usize,
    /// The reduced functional was numerically flat; no prediction made.
    pub degenerate: bool,
    pub warnings: Vec<String>,
}

/// Full pipeline: hypothesis checks, reduced-functional critical points,
/// corrected seeds, refinement, certification, and O(2) deduplication.
/// Reports honest counts; never fabricates the target multiplicity.
pub fn multiplicity_experiment(
    form: &PerturbationForm,
    cfg: &ExperimentConfig,
) -> Result<ExperimentReport> {
    if form.sphere_dim() != cfg.n {
        return Err(Error::DimensionMismatch {
            expected: cfg.n,
            got: form.sphere_dim(),
            context: "experiment sphere dimension",
        });
    }
    let mut warnings = Vec::new();
    let h1 = check_h1(form, cfg.decay_radius, 512)?;
    if !h1.passes {
        return Err(Error::InvalidConfig(format!(
            "perturbation does not decay: sup |h| = {:.3e} at radius {}",
            h1.sup_plus.max(h1.sup_minus),
            cfg.decay_radius
        )));
    }
    let h2 = check_h2(form, cfg.decay_radius)?;
    let target = if h2.passes { 2 * cfg.n } else { cfg.n };

    let reduction = find_gamma_critical_points(form, &cfg.search)?;
    if reduction.flat {
        return Ok(ExperimentReport {
            h1,
            h2,
            reduction,
            certificates: Vec::new(),
            orbits: Vec::new(),
            distinct_nontrivial: 0,
            target,
            degenerate: true,
            warnings,
        });
    }

    let results: Vec<(usize, Result<GeodesicCertificate>)> = reduction
        .critical_points
        .par_iter()
        .enumerate()
        .map(|(i, cp)| {
            let run = || -> Result<GeodesicCertificate> {
                let corr = compute_w(&cp.param, form, cfg.eps, cfg.m, &cfg.w)?;
                refine(&corr.solution, form, cfg.eps, &cfg.refine)
            };
            (i, run())
        })
        .collect();
    let mut certificates = Vec::new();
    for (i, res) in results {
        match res {
            Ok(cert) => certificates.push(cert),
            Err(e) => warnings.push(format!("seed {i} failed: {e}")),
        }
    }
    // deterministic order before greedy dedup
    certificates.sort_by(|a, b| {
        a.energy
            .partial_cmp(&b.energy)
            .unwrap()
            .then_with(|| a.residual.partial_cmp(&b.residual).unwrap())
    });

    let loops: Vec<DiscreteLoop> = certificates.iter().map(|c| c.curve.clone()).collect();
    let clusters = analysis::dedup_loops(&loops, cfg.dedup_tol)?;
    let orbits: Vec<OrbitClass> = clusters
        .iter()
        .map(|(idx, dist)| OrbitClass {
            representative: certificates[idx[0]].clone(),
            members: idx.len(),
            alignment_distance: *dist,
        })
        .collect();
    let distinct_nontrivial = orbits.iter().filter(|o| !o.representative.trivial).count();
    if distinct_nontrivial < target {
        warnings.push(format!(
            "found {distinct_nontrivial} distinct nontrivial classes; hypothesis target is {target}"
        ));
    }
    Ok(ExperimentReport {
        h1,
        h2,
        reduction,
        certificates,
        orbits,
        distinct_nontrivial,
        target,
        degenerate: false,
        warnings,
    })
}
