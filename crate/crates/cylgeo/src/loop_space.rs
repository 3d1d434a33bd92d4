//! Discrete loop space: closed curves in `R x S^N` sampled at `M` nodes,
//! with the perturbed energy, its Riemannian gradient and Hessian under the
//! node-wise unit-sphere constraints.
//!
//! Discretization: forward differences `u'_k = M (u_{k+1} - u_k)` and the
//! Riemann sum `(1/M) sum_k`, with the metric coefficient evaluated at the
//! segment midpoint `(r_k + r_{k+1}) / 2`. The midpoint makes the scheme
//! reflection-symmetric, so the energy is O(2)-invariant up to summation
//! order.

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::PerturbationForm;

pub const NODE_UNIT_TOL: f64 = 1e-10;
pub const MIN_NODES: usize = 8;

/// A closed discrete curve in `R x S^N`. Node `k` sits at `t_k = k / M`;
/// indices wrap mod `M`. Data is stored node-major: `[r_k, x_k[0..N+1]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteLoop {
    m: usize,
    n: usize,
    data: DVector<f64>,
}

/// A discrete tangent field along a loop: `(dr_k, dx_k)` with `dx_k` tangent
/// to the sphere at `x_k`. Same node-major layout as [`DiscreteLoop`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopTangent {
    m: usize,
    n: usize,
    data: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct LoopJson {
    r: Vec<f64>,
    x: Vec<Vec<f64>>,
}

impl DiscreteLoop {
    /// Builds a loop from per-node data, validating the sphere constraints.
    pub fn new(r: Vec<f64>, x: Vec<DVector<f64>>) -> Result<Self> {
        if r.len() != x.len() {
            return Err(Error::DimensionMismatch {
                expected: r.len(),
                got: x.len(),
                context: "r vs x node counts",
            });
        }
        let m = r.len();
        if m < MIN_NODES {
            return Err(Error::InvalidConfig(format!(
                "loop needs at least {MIN_NODES} nodes, got {m}"
            )));
        }
        let np1 = x[0].len();
        let mut data = DVector::zeros(m * (np1 + 1));
        for k in 0..m {
            if x[k].len() != np1 {
                return Err(Error::DimensionMismatch {
                    expected: np1,
                    got: x[k].len(),
                    context: "sphere node dimension",
                });
            }
            data[k * (np1 + 1)] = r[k];
            data.rows_mut(k * (np1 + 1) + 1, np1).copy_from(&x[k]);
        }
        Self::from_flat(m, np1 - 1, data)
    }

    /// Builds a loop from flat node-major data, validating constraints.
    pub fn from_flat(m: usize, n: usize, data: DVector<f64>) -> Result<Self> {
        if m < MIN_NODES {
            return Err(Error::InvalidConfig(format!(
                "loop needs at least {MIN_NODES} nodes, got {m}"
            )));
        }
        if data.len() != m * (n + 2) {
            return Err(Error::DimensionMismatch {
                expected: m * (n + 2),
                got: data.len(),
                context: "flat loop data",
            });
        }
        let lp = Self { m, n, data };
        lp.validate()?;
        Ok(lp)
    }

    #[allow(dead_code)]
    pub(crate) fn from_flat_unchecked(m: usize, n: usize, data: DVector<f64>) -> Self {
        Self { m, n, data }
    }

    pub fn validate(&self) -> Result<()> {
        let dev = self.max_constraint_violation();
        if dev > NODE_UNIT_TOL {
            return Err(Error::ConstraintViolation {
                what: "loop node sphere constraint",
                deviation: dev,
                tolerance: NODE_UNIT_TOL,
            });
        }
        Ok(())
    }

    pub fn max_constraint_violation(&self) -> f64 {
        (0..self.m)
            .map(|k| (self.x(k).norm() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Constant loop at `(r0, xi)`.
    pub fn constant(m: usize, r0: f64, xi: &DVector<f64>) -> Result<Self> {
        Self::new(vec![r0; m], vec![xi.clone(); m])
    }

    pub fn node_count(&self) -> usize {
        self.m
    }

    /// Sphere dimension N.
    pub fn sphere_dim(&self) -> usize {
        self.n
    }

    /// Ambient dimension per node, N + 2.
    pub fn ambient_dim(&self) -> usize {
        self.n + 2
    }

    pub fn r(&self, k: usize) -> f64 {
        self.data[(k % self.m) * (self.n + 2)]
    }

    pub fn x(&self, k: usize) -> DVectorView<'_, f64> {
        self.data
            .rows((k % self.m) * (self.n + 2) + 1, self.n + 1)
    }

    pub fn flat(&self) -> &DVector<f64> {
        &self.data
    }

    /// Cyclic shift by `shift` nodes, then optional index reversal
    /// (the discrete O(2) action `u(t) -> u(+-t + theta)`).
    pub fn o2_act(&self, shift: usize, reflect: bool) -> Result<Self> {
        if shift >= self.m {
            return Err(Error::InvalidConfig(format!(
                "shift {shift} out of range for {} nodes",
                self.m
            )));
        }
        let d = self.n + 2;
        let mut data = DVector::zeros(self.m * d);
        for k in 0..self.m {
            let mut src = (k + shift) % self.m;
            if reflect {
                src = (self.m - k) % self.m;
                src = (src + shift) % self.m;
            }
            data.rows_mut(k * d, d).copy_from(&self.data.rows(src * d, d));
        }
        Ok(Self {
            m: self.m,
            n: self.n,
            data,
        })
    }

    /// Retraction: move along a tangent field and renormalize each node.
    pub fn retract(&self, dir: &LoopTangent, step: f64) -> Result<Self> {
        if dir.m != self.m || dir.n != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.m,
                got: dir.m,
                context: "tangent vs loop",
            });
        }
        let d = self.n + 2;
        let mut data = &self.data + step * &dir.data;
        for k in 0..self.m {
            let mut x = data.rows_mut(k * d + 1, self.n + 1);
            let norm = x.norm();
            x /= norm;
        }
        Ok(Self {
            m: self.m,
            n: self.n,
            data,
        })
    }

    /// Projects an ambient coordinate vector onto the tangent space at this
    /// loop (node-wise `I - x x^T` on the sphere blocks).
    pub fn project_tangent(&self, ambient: &DVector<f64>) -> LoopTangent {
        let d = self.n + 2;
        let mut data = ambient.clone();
        for k in 0..self.m {
            let x = self.x(k).into_owned();
            let mut blk = data.rows_mut(k * d + 1, self.n + 1);
            let radial = blk.dot(&x);
            blk.axpy(-radial, &x, 1.0);
        }
        LoopTangent {
            m: self.m,
            n: self.n,
            data,
        }
    }

    pub fn to_json(&self) -> String {
        let r: Vec<f64> = (0..self.m).map(|k| self.r(k)).collect();
        let x: Vec<Vec<f64>> = (0..self.m)
            .map(|k| self.x(k).iter().cloned().collect())
            .collect();
        serde_json::to_string(&LoopJson { r, x }).expect("loop serialization cannot fail")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let lj: LoopJson =
            serde_json::from_str(json).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let x = lj.x.into_iter().map(DVector::from_vec).collect();
        Self::new(lj.r, x)
    }

    /// One CSV row per node: `t, r, x_0, ..., x_N`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,r");
        for j in 0..=self.n {
            out.push_str(&format!(",x{j}"));
        }
        out.push('\n');
        for k in 0..self.m {
            out.push_str(&format!("{:.16e},{:.16e}", k as f64 / self.m as f64, self.r(k)));
            for v in self.x(k).iter() {
                out.push_str(&format!(",{v:.16e}"));
            }
            out.push('\n');
        }
        out
    }
}

impl Serialize for DiscreteLoop {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let r: Vec<f64> = (0..self.m).map(|k| self.r(k)).collect();
        let x: Vec<Vec<f64>> = (0..self.m)
            .map(|k| self.x(k).iter().cloned().collect())
            .collect();
        LoopJson { r, x }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for DiscreteLoop {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let lj = LoopJson::deserialize(d)?;
        let x = lj.x.into_iter().map(DVector::from_vec).collect();
        Self::new(lj.r, x).map_err(serde::de::Error::custom)
    }
}

impl LoopTangent {
    /// Builds a tangent field, validating node-wise tangency against `base`.
    pub fn new(base: &DiscreteLoop, data: DVector<f64>) -> Result<Self> {
        if data.len() != base.m * (base.n + 2) {
            return Err(Error::DimensionMismatch {
                expected: base.m * (base.n + 2),
                got: data.len(),
                context: "tangent data",
            });
        }
        let d = base.n + 2;
        for k in 0..base.m {
            let dev = base.x(k).dot(&data.rows(k * d + 1, base.n + 1)).abs();
            if dev > NODE_UNIT_TOL {
                return Err(Error::ConstraintViolation {
                    what: "loop tangent node tangency",
                    deviation: dev,
                    tolerance: NODE_UNIT_TOL,
                });
            }
        }
        Ok(Self {
            m: base.m,
            n: base.n,
            data,
        })
    }

    pub(crate) fn from_flat_unchecked(m: usize, n: usize, data: DVector<f64>) -> Self {
        Self { m, n, data }
    }

    pub fn zero(base: &DiscreteLoop) -> Self {
        Self {
            m: base.m,
            n: base.n,
            data: DVector::zeros(base.m * (base.n + 2)),
        }
    }

    pub fn node_count(&self) -> usize {
        self.m
    }

    pub fn sphere_dim(&self) -> usize {
        self.n
    }

    pub fn dr(&self, k: usize) -> f64 {
        self.data[(k % self.m) * (self.n + 2)]
    }

    pub fn dx(&self, k: usize) -> DVectorView<'_, f64> {
        self.data
            .rows((k % self.m) * (self.n + 2) + 1, self.n + 1)
    }

    pub fn flat(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut DVector<f64> {
        &mut self.data
    }

    /// Discrete L2 inner product `(1/M) <a, b>`.
    pub fn l2_inner(&self, other: &Self) -> f64 {
        self.data.dot(&other.data) / self.m as f64
    }

    /// Discrete L2 norm.
    pub fn l2_norm(&self) -> f64 {
        self.data.norm() / (self.m as f64).sqrt()
    }

    pub fn scale(&self, a: f64) -> Self {
        Self {
            m: self.m,
            n: self.n,
            data: a * &self.data,
        }
    }
}

fn check_form_dim(lp: &DiscreteLoop, form: &PerturbationForm) -> Result<()> {
    if form.ambient_dim() != lp.ambient_dim() {
        return Err(Error::DimensionMismatch {
            expected: lp.ambient_dim(),
            got: form.ambient_dim(),
            context: "perturbation form vs loop dimension",
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Raw kernels on flat ambient data (no manifold constraints assumed). These
// back both the public loop operations and the bordered reduction solver,
// which needs the energy off the constraint set.
// ---------------------------------------------------------------------------

pub(crate) fn energy_raw(
    m: usize,
    dim: usize,
    data: &DVector<f64>,
    form: &PerturbationForm,
    eps: f64,
) -> f64 {
    let mf = m as f64;
    let mut acc = 0.0;
    let perturbed = eps != 0.0 && !form.is_zero();
    for k in 0..m {
        let a = k * dim;
        let b = ((k + 1) % m) * dim;
        let d = data.rows(b, dim) - data.rows(a, dim);
        let mut q = d.dot(&d);
        if perturbed {
            let mid = 0.5 * (data[a] + data[b]);
            let field = form.field_at(mid);
            q += eps * d.dot(&(&field * &d));
        }
        acc += q;
    }
    0.5 * mf * acc
}

pub(crate) fn euclidean_gradient_raw(
    m: usize,
    dim: usize,
    data: &DVector<f64>,
    form: &PerturbationForm,
    eps: f64,
) -> Result<DVector<f64>> {
    let mf = m as f64;
    let perturbed = eps != 0.0 && !form.is_zero();
    let mut grad = DVector::zeros(m * dim);
    for k in 0..m {
        let a = k * dim;
        let b = ((k + 1) % m) * dim;
        let d = data.rows(b, dim) - data.rows(a, dim);
        let (gd, gprime_quad) = if perturbed {
            let mid = 0.5 * (data[a] + data[b]);
            let field = form.field_at(mid);
            let fd = form.field_deriv_at(mid)?;
            let gd = &d + eps * (&field * &d);
            (gd, eps * d.dot(&(&fd * &d)))
        } else {
            (d.clone_owned(), 0.0)
        };
        // segment k contributes to nodes k (sign -1) and k+1 (sign +1)
        grad.rows_mut(a, dim).axpy(-mf, &gd, 1.0);
        grad.rows_mut(b, dim).axpy(mf, &gd, 1.0);
        if gprime_quad != 0.0 {
            grad[a] += 0.25 * mf * gprime_quad;
            grad[b] += 0.25 * mf * gprime_quad;
        }
    }
    Ok(grad)
}

pub(crate) fn ambient_hessian_raw(
    m: usize,
    dim: usize,
    data: &DVector<f64>,
    form: &PerturbationForm,
    eps: f64,
) -> Result<DMatrix<f64>> {
    let mf = m as f64;
    let perturbed = eps != 0.0 && !form.is_zero();
    let size = m * dim;
    let mut hess = DMatrix::zeros(size, size);
    let identity = DMatrix::identity(dim, dim);
    for k in 0..m {
        let a = k * dim;
        let b = ((k + 1) % m) * dim;
        let d = data.rows(b, dim) - data.rows(a, dim);
        let (g_mat, gp_d, gpp_quad) = if perturbed {
            let mid = 0.5 * (data[a] + data[b]);
            let g = &identity + eps * form.field_at(mid);
            let gp_d = eps * (form.field_deriv_at(mid)? * &d);
            let gpp_quad = eps * d.dot(&(form.field_deriv2_at(mid)? * &d));
            (g, gp_d, gpp_quad)
        } else {
            (identity.clone(), DVector::zeros(dim), 0.0)
        };
        for (ia, sa) in [(a, -1.0), (b, 1.0)] {
            for (ib, sb) in [(a, -1.0), (b, 1.0)] {
                // velocity-velocity block
                let mut blk = hess.view_mut((ia, ib), (dim, dim));
                blk += &g_mat * (sa * sb * mf);
                if perturbed {
                    // velocity-midpoint cross terms and midpoint-midpoint term
                    for i in 0..dim {
                        hess[(ia + i, ib)] += 0.5 * sa * mf * gp_d[i];
                        hess[(ia, ib + i)] += 0.5 * sb * mf * gp_d[i];
                    }
                    hess[(ia, ib)] += 0.125 * mf * gpp_quad;
                }
            }
        }
    }
    Ok(hess)
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

/// Discrete perturbed energy `E_eps = E_0 + eps G`.
pub fn energy(lp: &DiscreteLoop, form: &PerturbationForm, eps: f64) -> Result<f64> {
    check_form_dim(lp, form)?;
    lp.validate()?;
    Ok(energy_raw(lp.m, lp.n + 2, &lp.data, form, eps))
}

/// The two nonnegative pieces of the unperturbed energy: `(L_0, E_{M_0})`.
pub fn energy_split(lp: &DiscreteLoop) -> Result<(f64, f64)> {
    lp.validate()?;
    let mf = lp.m as f64;
    let mut l0 = 0.0;
    let mut em0 = 0.0;
    for k in 0..lp.m {
        let dr = lp.r(k + 1) - lp.r(k);
        let dx = lp.x(k + 1) - lp.x(k);
        l0 += dr * dr;
        em0 += dx.dot(&dx);
    }
    Ok((0.5 * mf * l0, 0.5 * mf * em0))
}

/// Riemannian gradient of the energy: Euclidean partials with each sphere
/// block projected by `I - x_k x_k^T`. Vanishes exactly at discrete critical
/// points.
pub fn gradient(lp: &DiscreteLoop, form: &PerturbationForm, eps: f64) -> Result<LoopTangent> {
    check_form_dim(lp, form)?;
    lp.validate()?;
    let grad = euclidean_gradient_raw(lp.m, lp.n + 2, &lp.data, form, eps)?;
    Ok(lp.project_tangent(&grad))
}

/// Projected second-derivative matrix of the energy restricted to node-wise
/// tangent directions (dense, size `M (N+2)`), including the sphere-constraint
/// curvature correction. Symmetric; the node-radial directions lie in its
/// kernel by construction.
pub fn hessian(lp: &DiscreteLoop, form: &PerturbationForm, eps: f64) -> Result<DMatrix<f64>> {
    check_form_dim(lp, form)?;
    lp.validate()?;
    let dim = lp.n + 2;
    let grad = euclidean_gradient_raw(lp.m, dim, &lp.data, form, eps)?;
    let mut hess = ambient_hessian_raw(lp.m, dim, &lp.data, form, eps)?;

    // P H P with P = blkdiag(1, I - x x^T) per node
    let project = |hess: &mut DMatrix<f64>, lp: &DiscreteLoop, columns: bool| {
        for k in 0..lp.m {
            let x = lp.x(k).into_owned();
            let off = k * dim + 1;
            let nb = lp.n + 1;
            if columns {
                for row in 0..lp.m * dim {
                    let mut blk = hess.view_mut((row, off), (1, nb));
                    let radial: f64 = (0..nb).map(|j| blk[(0, j)] * x[j]).sum();
                    for j in 0..nb {
                        blk[(0, j)] -= radial * x[j];
                    }
                }
            } else {
                for col in 0..lp.m * dim {
                    let mut blk = hess.view_mut((off, col), (nb, 1));
                    let radial: f64 = (0..nb).map(|j| blk[(j, 0)] * x[j]).sum();
                    for j in 0..nb {
                        blk[(j, 0)] -= radial * x[j];
                    }
                }
            }
        }
    };
    project(&mut hess, lp, false);
    project(&mut hess, lp, true);

    // curvature correction: subtract mu_k (I - x x^T) on each sphere block,
    // mu_k = x_k . euclidean sphere gradient
    for k in 0..lp.m {
        let x = lp.x(k).into_owned();
        let off = k * dim + 1;
        let nb = lp.n + 1;
        let mu = x.dot(&grad.rows(off, nb));
        for i in 0..nb {
            for j in 0..nb {
                let p = (if i == j { 1.0 } else { 0.0 }) - x[i] * x[j];
                hess[(off + i, off + j)] -= mu * p;
            }
        }
    }
    Ok(hess)
}

/// Quadratic form `v^T H v` of the projected Hessian.
pub fn hessian_quadratic_form(
    lp: &DiscreteLoop,
    form: &PerturbationForm,
    eps: f64,
    v: &LoopTangent,
) -> Result<f64> {
    let h = hessian(lp, form, eps)?;
    Ok(v.flat().dot(&(&h * v.flat())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::{FormTerm, ProfileSpec};
    use crate::reduction::{great_circle, CircleParam};
    use nalgebra::DVector;
    use std::f64::consts::PI;

    fn unit(n: usize, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(n);
        v[i] = 1.0;
        v
    }

    fn circle(n: usize, m: usize) -> DiscreteLoop {
        let p = unit(n + 1, 0);
        let q = unit(n + 1, 1);
        great_circle(&CircleParam::new(0.0, p, q).unwrap(), m).unwrap()
    }

    /// Independent summation oracle for the unperturbed energy.
    fn energy0_oracle(lp: &DiscreteLoop) -> f64 {
        let m = lp.node_count() as f64;
        let mut acc = 0.0;
        for k in 0..lp.node_count() {
            let dr = lp.r(k + 1) - lp.r(k);
            let dx = lp.x(k + 1) - lp.x(k);
            acc += dr * dr + dx.norm_squared();
        }
        0.5 * m * acc
    }

    #[test]
    fn great_circle_energy_is_two_pi_squared() {
        let lp = circle(2, 256);
        let e = energy(&lp, &PerturbationForm::zero(2), 0.0).unwrap();
        assert!((e - 2.0 * PI * PI).abs() < 0.01, "e = {e}");
        assert!((e - energy0_oracle(&lp)).abs() < 1e-10);
    }

    #[test]
    fn constant_loop_has_zero_energy() {
        let lp = DiscreteLoop::constant(32, 1.5, &unit(3, 2)).unwrap();
        let form = PerturbationForm::odd_decay_identity(2);
        assert_eq!(energy(&lp, &form, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn energy_at_eps_zero_ignores_form() {
        let lp = circle(2, 64);
        let e0 = energy(&lp, &PerturbationForm::zero(2), 0.0).unwrap();
        let e1 = energy(&lp, &PerturbationForm::odd_decay_identity(2), 0.0).unwrap();
        assert_eq!(e0, e1);
    }

    #[test]
    fn gradient_zero_at_constant_loop() {
        let lp = DiscreteLoop::constant(16, 0.0, &unit(3, 0)).unwrap();
        let g = gradient(&lp, &PerturbationForm::zero(2), 0.0).unwrap();
        assert_eq!(g.l2_norm(), 0.0);
    }

    #[test]
    fn gradient_vanishes_on_great_circle() {
        let lp = circle(2, 128);
        let g = gradient(&lp, &PerturbationForm::zero(2), 0.0).unwrap();
        assert!(g.l2_norm() <= 1e-10, "norm = {}", g.l2_norm());
    }

    fn random_tangent(lp: &DiscreteLoop, seed: u64) -> LoopTangent {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let raw =
            DVector::from_fn(lp.node_count() * lp.ambient_dim(), |_, _| rng.gen::<f64>() - 0.5);
        lp.project_tangent(&raw)
    }

    fn perturbed_circle(n: usize, m: usize, seed: u64) -> DiscreteLoop {
        let base = circle(n, m);
        let t = random_tangent(&base, seed);
        base.retract(&t, 0.1).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let form = PerturbationForm::odd_decay_identity(2);
        let eps = 0.3;
        for seed in 0..5 {
            let lp = perturbed_circle(2, 32, seed);
            let g = gradient(&lp, &form, eps).unwrap();
            let dir = random_tangent(&lp, seed + 100);
            let h = 1e-6;
            let ep = energy(&lp.retract(&dir, h).unwrap(), &form, eps).unwrap();
            let em = energy(&lp.retract(&dir, -h).unwrap(), &form, eps).unwrap();
            let fd = (ep - em) / (2.0 * h);
            let dot = g.flat().dot(dir.flat());
            assert!(
                (dot - fd).abs() <= 1e-5 * fd.abs().max(1.0),
                "fd {fd} vs analytic {dot}"
            );
        }
    }

    #[test]
    fn hessian_is_symmetric() {
        let form = PerturbationForm::odd_decay_identity(2);
        let lp = perturbed_circle(2, 24, 7);
        let h = hessian(&lp, &form, 0.2).unwrap();
        assert!((&h - h.transpose()).amax() <= 1e-10);
    }

    #[test]
    fn hessian_matches_gradient_differences() {
        let form = PerturbationForm::odd_decay_identity(2);
        let eps = 0.25;
        let lp = perturbed_circle(2, 24, 3);
        let h = hessian(&lp, &form, eps).unwrap();
        let v = random_tangent(&lp, 42);
        let t = 1e-6;
        let gp = gradient(&lp.retract(&v, t).unwrap(), &form, eps).unwrap();
        let gm = gradient(&lp.retract(&v, -t).unwrap(), &form, eps).unwrap();
        let fd = lp.project_tangent(&((gp.flat() - gm.flat()) / (2.0 * t)));
        let hv = &h * v.flat();
        let err = (&hv - fd.flat()).norm() / hv.norm();
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn hessian_normal_mode_values() {
        // normal-field Fourier modes on a great circle: expected 2 pi^2 (k^2-1)
        let m = 256;
        let lp = circle(2, m);
        let form = PerturbationForm::zero(2);
        let e3 = unit(4, 3); // normal to the (e1, e2) circle plane, node-major offset 1+2
        for kmode in [0usize, 1, 2, 3] {
            let mut data = DVector::zeros(m * 4);
            for k in 0..m {
                let t = k as f64 / m as f64;
                let amp = if kmode == 0 {
                    0.5f64.sqrt()
                } else {
                    (2.0 * PI * kmode as f64 * t).sin()
                };
                data.rows_mut(k * 4, 4).axpy(amp, &e3, 1.0);
            }
            let v = LoopTangent::new(&lp, data).unwrap();
            let val = hessian_quadratic_form(&lp, &form, 0.0, &v).unwrap();
            let expect = 2.0 * PI * PI * ((kmode * kmode) as f64 - 1.0);
            let tol = 0.02 * 2.0 * PI * PI * ((kmode * kmode) as f64).max(1.0);
            assert!(
                (val - expect).abs() <= tol,
                "mode {kmode}: got {val}, expected {expect}"
            );
        }
    }

    #[test]
    fn hessian_annihilates_phase_direction() {
        let lp = circle(2, 64);
        let form = PerturbationForm::zero(2);
        // velocity of the phase action: dx_k = zdot(t_k)
        let mut data = DVector::zeros(64 * 4);
        for k in 0..64 {
            let t = 2.0 * PI * k as f64 / 64.0;
            data[k * 4 + 1] = -2.0 * PI * t.sin();
            data[k * 4 + 2] = 2.0 * PI * t.cos();
        }
        let v = LoopTangent::new(&lp, data).unwrap();
        let h = hessian(&lp, &form, 0.0).unwrap();
        assert!((&h * v.flat()).norm() <= 1e-8);
    }

    #[test]
    fn o2_identity_and_involution() {
        let lp = perturbed_circle(2, 16, 9);
        assert_eq!(lp.o2_act(0, false).unwrap(), lp);
        let twice = lp.o2_act(0, true).unwrap().o2_act(0, true).unwrap();
        assert_eq!(twice, lp);
    }

    #[test]
    fn o2_action_preserves_energy() {
        let form = PerturbationForm::odd_decay_identity(2);
        let eps = 0.2;
        let lp = perturbed_circle(2, 16, 11);
        let e = energy(&lp, &form, eps).unwrap();
        for shift in 0..16 {
            for reflect in [false, true] {
                let moved = lp.o2_act(shift, reflect).unwrap();
                let em = energy(&moved, &form, eps).unwrap();
                assert!(
                    (em - e).abs() <= 1e-14 * e.abs(),
                    "shift {shift} reflect {reflect}: {em} vs {e}"
                );
            }
        }
    }

    #[test]
    fn double_traversal_quadruples_e0() {
        let lp = perturbed_circle(2, 32, 5);
        let m = lp.node_count();
        let mut r = Vec::with_capacity(2 * m);
        let mut x = Vec::with_capacity(2 * m);
        for k in 0..2 * m {
            r.push(lp.r(k % m));
            x.push(lp.x(k % m).into_owned());
        }
        let doubled = DiscreteLoop::new(r, x).unwrap();
        let e1 = energy(&lp, &PerturbationForm::zero(2), 0.0).unwrap();
        let e2 = energy(&doubled, &PerturbationForm::zero(2), 0.0).unwrap();
        assert!((e2 - 4.0 * e1).abs() <= 1e-6 * e1);
    }

    #[test]
    fn energy_split_parts_nonnegative() {
        let lp = perturbed_circle(2, 32, 13);
        let (l0, em0) = energy_split(&lp).unwrap();
        assert!(l0 >= 0.0 && em0 >= 0.0);
        let total = energy(&lp, &PerturbationForm::zero(2), 0.0).unwrap();
        assert!((l0 + em0 - total).abs() <= 1e-10 * total.max(1.0));
    }

    #[test]
    fn too_few_nodes_rejected() {
        let xi = unit(3, 0);
        assert!(DiscreteLoop::constant(4, 0.0, &xi).is_err());
    }

    #[test]
    fn off_sphere_node_rejected() {
        let mut x = vec![unit(3, 0); 8];
        x[3] *= 1.1;
        assert!(matches!(
            DiscreteLoop::new(vec![0.0; 8], x),
            Err(Error::ConstraintViolation { .. })
        ));
    }

    #[test]
    fn json_round_trip() {
        let lp = perturbed_circle(2, 16, 21);
        let back = DiscreteLoop::from_json(&lp.to_json()).unwrap();
        assert_eq!(lp, back);
    }

    #[test]
    fn gradient_with_tabulated_profile_errors_when_perturbed() {
        let lp = circle(1, 16);
        let form = PerturbationForm::new(
            1,
            vec![FormTerm {
                profile: ProfileSpec::Tabulated {
                    s: vec![-1.0, 1.0],
                    values: vec![0.0, 1.0],
                },
                block: nalgebra::DMatrix::identity(3, 3),
            }],
        )
        .unwrap();
        assert!(energy(&lp, &form, 0.1).is_ok());
        assert!(matches!(
            gradient(&lp, &form, 0.1),
            Err(Error::UnsupportedDerivative(_))
        ));
    }
}
