//! Symmetry quotient and second-variation analysis: O(2) alignment and
//! dedup of loops, Hessian spectra restricted to the constraint tangent
//! space, the nondegeneracy test on the sphere factor, and the 1-D degree
//! test on the cylinder.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::loop_space::{
    ambient_hessian_raw, euclidean_gradient_raw, hessian, DiscreteLoop,
};
use crate::metric::PerturbationForm;
use crate::reduction::{gamma_grad, CircleParam};

/// Relative kernel threshold: `|lambda| <= KERNEL_REL_TOL * max |lambda|`.
pub const KERNEL_REL_TOL: f64 = 1e-7;
/// Minimal spectral gap ratio at the kernel cut for a reliable count.
pub const GAP_RELIABLE: f64 = 10.0;

/// Eigenvalue summary of a projected Hessian on the tangent space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumSummary {
    /// All eigenvalues on the constraint tangent space, ascending.
    pub eigenvalues: Vec<f64>,
    pub kernel_dim: usize,
    pub morse_index: usize,
    pub positive_count: usize,
    /// Absolute threshold used for the kernel cut.
    pub threshold: f64,
    /// `|lambda_out| / |lambda_in|` at the cut; infinite when clean.
    pub gap_ratio: f64,
    /// False when the gap at the cut is ambiguous (< 10x).
    pub reliable: bool,
}

impl SpectrumSummary {
    fn from_eigenvalues(mut eigs: Vec<f64>) -> Self {
        eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let maxabs = eigs.iter().fold(0.0f64, |a, &l| a.max(l.abs()));
        let threshold = KERNEL_REL_TOL * maxabs;
        let kernel_dim = eigs.iter().filter(|&&l| l.abs() <= threshold).count();
        let morse_index = eigs.iter().filter(|&&l| l < -threshold).count();
        let positive_count = eigs.len() - kernel_dim - morse_index;
        let inner = eigs
            .iter()
            .filter(|l| l.abs() <= threshold)
            .fold(0.0f64, |a, &l| a.max(l.abs()));
        let outer = eigs
            .iter()
            .filter(|l| l.abs() > threshold)
            .fold(f64::INFINITY, |a, &l| a.min(l.abs()));
        let gap_ratio = if kernel_dim == 0 || inner == 0.0 {
            f64::INFINITY
        } else {
            outer / inner
        };
        let reliable = gap_ratio >= GAP_RELIABLE;
        Self {
            eigenvalues: eigs,
            kernel_dim,
            morse_index,
            positive_count,
            threshold,
            gap_ratio,
            reliable,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,eigenvalue\n");
        for (i, l) in self.eigenvalues.iter().enumerate() {
            out.push_str(&format!("{i},{l:.16e}\n"));
        }
        out
    }
}

/// Orthonormal tangent frame at each node: the r-direction and `N` vectors
/// spanning the sphere tangent space. Returns the `M(N+2) x M(N+1)` basis.
fn tangent_frame_matrix(lp: &DiscreteLoop) -> DMatrix<f64> {
    let m = lp.node_count();
    let n = lp.sphere_dim();
    let dim = n + 2;
    let tdim = n + 1;
    let mut q = DMatrix::zeros(m * dim, m * tdim);
    for k in 0..m {
        q[(k * dim, k * tdim)] = 1.0;
        let x = lp.x(k).into_owned();
        // complete x to an orthonormal basis of R^{N+1} by Gram-Schmidt
        let mut basis = vec![x];
        let mut placed = 0;
        for i in 0..=n {
            let mut e = DVector::zeros(n + 1);
            e[i] = 1.0;
            for b in &basis {
                let c = b.dot(&e);
                e.axpy(-c, b, 1.0);
            }
            let norm = e.norm();
            if norm > 1e-6 {
                e /= norm;
                basis.push(e.clone());
                for row in 0..=n {
                    q[(k * dim + 1 + row, k * tdim + 1 + placed)] = e[row];
                }
                placed += 1;
                if placed == n {
                    break;
                }
            }
        }
        debug_assert_eq!(placed, n);
    }
    q
}

/// Full symmetric eigendecomposition of the projected Hessian restricted to
/// the node-tangent coordinates (dimension `M (N+1)`).
pub fn spectrum(lp: &DiscreteLoop, form: &PerturbationForm, eps: f64) -> Result<SpectrumSummary> {
    let h = hessian(lp, form, eps)?;
    let q = tangent_frame_matrix(lp);
    let reduced = q.transpose() * h * &q;
    let sym = 0.5 * (&reduced + reduced.transpose());
    let eigs: Vec<f64> = sym.symmetric_eigen().eigenvalues.iter().cloned().collect();
    Ok(SpectrumSummary::from_eigenvalues(eigs))
}

/// Nondegeneracy verdict for a closed geodesic of the sphere factor alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NondegeneracyReport {
    pub kernel_dim: usize,
    /// Kernel is one-dimensional (the phase direction only).
    pub nondegenerate: bool,
    pub residual: f64,
    pub spectrum: SpectrumSummary,
}

/// Spectrum of the sphere-factor energy Hessian at a critical loop of
/// `E_{M_0}` (the `r` component is ignored). Errors when the input is not
/// critical for the sphere-only energy.
pub fn nondegeneracy_check(lp: &DiscreteLoop) -> Result<NondegeneracyReport> {
    let m = lp.node_count();
    let n = lp.sphere_dim();
    let tdim = n + 1;
    let zero = PerturbationForm::zero(n);
    // pack the sphere components alone
    let mut xflat = DVector::zeros(m * tdim);
    for k in 0..m {
        xflat.rows_mut(k * tdim, tdim).copy_from(&lp.x(k).into_owned());
    }
    let grad = euclidean_gradient_raw(m, tdim, &xflat, &zero, 0.0)?;
    // tangent-project and measure criticality
    let mut proj = grad.clone();
    let mut mus = Vec::with_capacity(m);
    for k in 0..m {
        let x = lp.x(k).into_owned();
        let gseg = proj.rows(k * tdim, tdim).into_owned();
        let mu = x.dot(&gseg);
        proj.rows_mut(k * tdim, tdim).axpy(-mu, &x, 1.0);
        mus.push(mu);
    }
    let residual = proj.norm() / (m as f64).sqrt();
    let crit_tol = 1e-6;
    if residual > crit_tol {
        return Err(Error::NonCritical {
            residual,
            tolerance: crit_tol,
        });
    }

    let mut hess = ambient_hessian_raw(m, tdim, &xflat, &zero, 0.0)?;
    // project rows and columns, then the curvature correction
    #[allow(clippy::needless_range_loop)]
    for k in 0..m {
        let x = lp.x(k).into_owned();
        let off = k * tdim;
        for col in 0..m * tdim {
            let radial: f64 = (0..tdim).map(|i| hess[(off + i, col)] * x[i]).sum();
            for i in 0..tdim {
                hess[(off + i, col)] -= radial * x[i];
            }
        }
        for row in 0..m * tdim {
            let radial: f64 = (0..tdim).map(|i| hess[(row, off + i)] * x[i]).sum();
            for i in 0..tdim {
                hess[(row, off + i)] -= radial * x[i];
            }
        }
        for i in 0..tdim {
            for j in 0..tdim {
                let p = (if i == j { 1.0 } else { 0.0 }) - x[i] * x[j];
                hess[(off + i, off + j)] -= mus[k] * p;
            }
        }
    }
    // restrict to the sphere tangent frame (N directions per node)
    let mut q = DMatrix::zeros(m * tdim, m * n);
    for k in 0..m {
        let x = lp.x(k).into_owned();
        let mut basis = vec![x];
        let mut placed = 0;
        for i in 0..tdim {
            let mut e = DVector::zeros(tdim);
            e[i] = 1.0;
            for b in &basis {
                let c = b.dot(&e);
                e.axpy(-c, b, 1.0);
            }
            let norm = e.norm();
            if norm > 1e-6 {
                e /= norm;
                basis.push(e.clone());
                for row in 0..tdim {
                    q[(k * tdim + row, k * n + placed)] = e[row];
                }
                placed += 1;
                if placed == n {
                    break;
                }
            }
        }
    }
    let reduced = q.transpose() * hess * &q;
    let sym = 0.5 * (&reduced + reduced.transpose());
    let eigs: Vec<f64> = sym.symmetric_eigen().eigenvalues.iter().cloned().collect();
    let summary = SpectrumSummary::from_eigenvalues(eigs);
    Ok(NondegeneracyReport {
        kernel_dim: summary.kernel_dim,
        nondegenerate: summary.kernel_dim == 1,
        residual,
        spectrum: summary,
    })
}

/// Result of the optimal O(2) alignment of two loops.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Alignment {
    pub shift: usize,
    pub reflect: bool,
    /// Root-mean-square node distance after the optimal action.
    pub distance: f64,
}

/// Minimizes the RMS node distance `|o2_act(a, s, rho) - b|` over all `M`
/// cyclic shifts and both reflections.
pub fn align(a: &DiscreteLoop, b: &DiscreteLoop) -> Result<Alignment> {
    let m = a.node_count();
    if b.node_count() != m || b.sphere_dim() != a.sphere_dim() {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: b.node_count(),
            context: "align node counts",
        });
    }
    let mut best = Alignment {
        shift: 0,
        reflect: false,
        distance: f64::INFINITY,
    };
    for reflect in [false, true] {
        for shift in 0..m {
            let mut acc = 0.0;
            for k in 0..m {
                // index arithmetic mirrors DiscreteLoop::o2_act
                let src = if reflect {
                    ((m - k) % m + shift) % m
                } else {
                    (k + shift) % m
                };
                let dr = a.r(src) - b.r(k);
                let dx = a.x(src) - b.x(k);
                acc += dr * dr + dx.norm_squared();
            }
            let dist = (acc / m as f64).sqrt();
            if dist < best.distance {
                best = Alignment {
                    shift,
                    reflect,
                    distance: dist,
                };
            }
        }
    }
    Ok(best)
}

/// Greedy O(2)-orbit clustering of loops. Returns clusters as index lists
/// into the input (which must already be in a deterministic order), plus the
/// maximal in-cluster alignment distance per cluster.
pub fn dedup_loops(loops: &[DiscreteLoop], tol: f64) -> Result<Vec<(Vec<usize>, f64)>> {
    let mut clusters: Vec<(Vec<usize>, f64)> = Vec::new();
    for (i, lp) in loops.iter().enumerate() {
        let mut placed = false;
        for cluster in clusters.iter_mut() {
            let rep = &loops[cluster.0[0]];
            let al = align(lp, rep)?;
            if al.distance <= tol {
                cluster.0.push(i);
                cluster.1 = cluster.1.max(al.distance);
                placed = true;
                break;
            }
        }
        if !placed {
            clusters.push((vec![i], 0.0));
        }
    }
    Ok(clusters)
}

/// Default dedup tolerance for `M`-node loops.
pub fn default_dedup_tol(m: usize) -> f64 {
    1e-4 * (m as f64).sqrt()
}

/// Per-`tau` derivative data for the cylinder degree test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TauSample {
    pub tau: f64,
    /// `dGamma/dr` at `+R`.
    pub d_plus: f64,
    /// `dGamma/dr` at `-R`.
    pub d_minus: f64,
    pub product: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CylinderDegreeReport {
    pub radius: f64,
    pub samples: Vec<TauSample>,
    /// 1-D Brouwer degree of `dGamma/dr` on `[-R, R]`:
    /// `(sign at +R - sign at -R) / 2`.
    pub degree: i32,
    /// Product of the boundary derivatives is nonzero for every sampled tau.
    pub h3_pass: bool,
    /// Derivatives numerically zero at the boundary; test says nothing.
    pub inconclusive: bool,
    /// Gamma is tau-independent on the cylinder; flags if the samples spread.
    pub tau_consistent: bool,
}

/// The reduced degree test on the flat cylinder `R x S^1`: signs of
/// `dGamma/dr` at `+-R` over sampled circle phases `tau`.
pub fn degree_check_cylinder(
    form: &PerturbationForm,
    radius: f64,
    n_tau: usize,
    m_q: usize,
) -> Result<CylinderDegreeReport> {
    if form.sphere_dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: form.sphere_dim(),
            context: "degree test needs the cylinder (N = 1)",
        });
    }
    let deriv_tol = 1e-12;
    let mut samples = Vec::with_capacity(n_tau);
    for i in 0..n_tau.max(1) {
        let tau = 2.0 * PI * i as f64 / n_tau.max(1) as f64;
        let p = DVector::from_vec(vec![tau.cos(), tau.sin()]);
        let q = DVector::from_vec(vec![-tau.sin(), tau.cos()]);
        let at = |r: f64| -> Result<f64> {
            Ok(gamma_grad(
                &CircleParam {
                    r,
                    p: p.clone(),
                    q: q.clone(),
                },
                form,
                m_q,
            )?
            .dr)
        };
        let d_plus = at(radius)?;
        let d_minus = at(-radius)?;
        samples.push(TauSample {
            tau,
            d_plus,
            d_minus,
            product: d_plus * d_minus,
        });
    }
    let inconclusive = samples
        .iter()
        .any(|s| s.d_plus.abs() < deriv_tol || s.d_minus.abs() < deriv_tol);
    let h3_pass = !inconclusive && samples.iter().all(|s| s.product != 0.0);
    let sgn = |v: f64| -> i32 {
        if v > deriv_tol {
            1
        } else if v < -deriv_tol {
            -1
        } else {
            0
        }
    };
    let degree = if samples.is_empty() {
        0
    } else {
        (sgn(samples[0].d_plus) - sgn(samples[0].d_minus)) / 2
    };
    let spread = |get: fn(&TauSample) -> f64| -> f64 {
        let vals: Vec<f64> = samples.iter().map(get).collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    };
    let scale = samples
        .iter()
        .map(|s| s.d_plus.abs().max(s.d_minus.abs()))
        .fold(0.0f64, f64::max)
        .max(1e-300);
    let tau_consistent =
        spread(|s| s.d_plus) / scale <= 1e-8 && spread(|s| s.d_minus) / scale <= 1e-8;
    Ok(CylinderDegreeReport {
        radius,
        samples,
        degree,
        h3_pass,
        inconclusive,
        tau_consistent,
    })
}
