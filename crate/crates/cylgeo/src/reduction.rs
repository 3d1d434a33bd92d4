//! Finite-dimensional reduction: the critical manifold of great circles, the
//! reduced functional `Gamma`, the orthogonal correction `w(z, eps)` from the
//! bordered system, and the reduced energy `Phi_eps = E_eps(z + w)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::loop_space::{
    self, energy, euclidean_gradient_raw, ambient_hessian_raw, DiscreteLoop, LoopTangent,
};
use crate::metric::PerturbationForm;

pub const STIEFEL_TOL: f64 = 1e-10;

/// A point `(r, p, q)` of the critical manifold: the great circle
/// `z_{p,q}(t) = p cos 2 pi t + q sin 2 pi t` at height `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircleParam {
    pub r: f64,
    pub p: DVector<f64>,
    pub q: DVector<f64>,
}

impl CircleParam {
    pub fn new(r: f64, p: DVector<f64>, q: DVector<f64>) -> Result<Self> {
        if p.len() != q.len() {
            return Err(Error::DimensionMismatch {
                expected: p.len(),
                got: q.len(),
                context: "p vs q",
            });
        }
        let dev = (p.norm() - 1.0)
            .abs()
            .max((q.norm() - 1.0).abs())
            .max(p.dot(&q).abs());
        if dev > STIEFEL_TOL {
            return Err(Error::ConstraintViolation {
                what: "Stiefel pair (p, q)",
                deviation: dev,
                tolerance: STIEFEL_TOL,
            });
        }
        Ok(Self { r, p, q })
    }

    /// Sphere dimension N.
    pub fn sphere_dim(&self) -> usize {
        self.p.len() - 1
    }

    /// Coordinate-plane circle in the `(e_i, e_j)` plane.
    pub fn coordinate_plane(n: usize, r: f64, i: usize, j: usize) -> Self {
        let mut p = DVector::zeros(n + 1);
        let mut q = DVector::zeros(n + 1);
        p[i] = 1.0;
        q[j] = 1.0;
        Self { r, p, q }
    }

    /// Orbit-invariant distance to another parameter: combines the height
    /// difference with the distance between the circle planes.
    pub fn plane_distance(&self, other: &Self) -> f64 {
        let pr1 = &self.p * self.p.transpose() + &self.q * self.q.transpose();
        let pr2 = &other.p * other.p.transpose() + &other.q * other.q.transpose();
        let dr = self.r - other.r;
        (dr * dr + (pr1 - pr2).norm_squared()).sqrt()
    }
}

/// Samples the great circle `z(r, p, q)` at `M` nodes.
pub fn great_circle(param: &CircleParam, m: usize) -> Result<DiscreteLoop> {
    // revalidate: params may have drifted through arithmetic
    let param = CircleParam::new(param.r, param.p.clone(), param.q.clone())?;
    let mut r = Vec::with_capacity(m);
    let mut x = Vec::with_capacity(m);
    for k in 0..m {
        let th = 2.0 * PI * k as f64 / m as f64;
        r.push(param.r);
        x.push(th.cos() * &param.p + th.sin() * &param.q);
    }
    DiscreteLoop::new(r, x)
}

/// Unperturbed energy of the discrete great circle: the reduction constant `b`.
pub fn circle_energy(param: &CircleParam, m: usize) -> Result<f64> {
    let z = great_circle(param, m)?;
    energy(&z, &PerturbationForm::zero(param.sphere_dim()), 0.0)
}

/// Orthonormal vectors spanning the orthogonal complement of `span(p, q)`.
fn plane_complement(p: &DVector<f64>, q: &DVector<f64>) -> Vec<DVector<f64>> {
    let n = p.len();
    let mut basis = vec![p.clone(), q.clone()];
    let mut out = Vec::with_capacity(n - 2);
    for i in 0..n {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        for b in &basis {
            let c = b.dot(&e);
            e.axpy(-c, b, 1.0);
        }
        let norm = e.norm();
        if norm > 1e-8 {
            e /= norm;
            basis.push(e.clone());
            out.push(e);
            if out.len() == n - 2 {
                break;
            }
        }
    }
    out
}

/// Orthonormal (discrete L2) basis of the tangent space of the critical
/// manifold at a great circle: the height translation, the phase direction,
/// and the `2(N-1)` plane rotations toward the orthogonal complement.
/// Total `2N` vectors, all in the kernel of the unperturbed Hessian.
pub fn tangent_basis(param: &CircleParam, m: usize) -> Result<Vec<LoopTangent>> {
    let n = param.sphere_dim();
    let dim = n + 2;
    let mut out = Vec::with_capacity(2 * n);

    // height translation: dr = 1, dx = 0; unit L2 norm already
    let mut data = DVector::zeros(m * dim);
    for k in 0..m {
        data[k * dim] = 1.0;
    }
    out.push(LoopTangent::from_flat_unchecked(m, n, data));

    // phase direction: dx = zdot / (2 pi)
    let mut data = DVector::zeros(m * dim);
    for k in 0..m {
        let th = 2.0 * PI * k as f64 / m as f64;
        let v = -th.sin() * &param.p + th.cos() * &param.q;
        data.rows_mut(k * dim + 1, n + 1).copy_from(&v);
    }
    out.push(LoopTangent::from_flat_unchecked(m, n, data));

    // plane rotations: dx = e cos / e sin toward each complement direction
    for e in plane_complement(&param.p, &param.q) {
        for cosine in [true, false] {
            let mut data = DVector::zeros(m * dim);
            for k in 0..m {
                let th = 2.0 * PI * k as f64 / m as f64;
                let amp = if cosine { th.cos() } else { th.sin() };
                data.rows_mut(k * dim + 1, n + 1).axpy(amp, &e, 1.0);
            }
            out.push(LoopTangent::from_flat_unchecked(m, n, data));
        }
    }

    // normalize every vector by its computed discrete norm so the basis is
    // orthonormal at machine precision
    for v in &mut out {
        let norm = v.l2_norm();
        *v = v.scale(1.0 / norm);
    }
    Ok(out)
}

/// Reduced functional `Gamma(r, p, q)`: the perturbation averaged along the
/// great circle with the analytic velocity, by `m_q`-node trapezoidal
/// quadrature (exact for these trigonometric integrands).
pub fn gamma(param: &CircleParam, form: &PerturbationForm, m_q: usize) -> f64 {
    let sphere = form.sphere_block_at(param.r);
    let mut acc = 0.0;
    for k in 0..m_q {
        let th = 2.0 * PI * k as f64 / m_q as f64;
        let zdot = 2.0 * PI * (-th.sin() * &param.p + th.cos() * &param.q);
        acc += zdot.dot(&(&sphere * &zdot));
    }
    0.5 * acc / m_q as f64
}

/// `Gamma` evaluated through the discrete loop energy itself:
/// `G(z) = (E_eps(z) - E_0(z)) / eps`, exact since `G` is linear in `eps`.
/// This is the variant entering the first-order expansion of `Phi_eps`.
pub fn gamma_discrete(param: &CircleParam, form: &PerturbationForm, m: usize) -> Result<f64> {
    let z = great_circle(param, m)?;
    let e1 = energy(&z, form, 1.0)?;
    let e0 = energy(&z, form, 0.0)?;
    Ok(e1 - e0)
}

/// Gradient of `Gamma`: the `r`-derivative and the `(p, q)` gradient
/// projected onto the Stiefel tangent space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GammaGradient {
    pub dr: f64,
    pub dp: DVector<f64>,
    pub dq: DVector<f64>,
}

impl GammaGradient {
    pub fn norm(&self) -> f64 {
        (self.dr * self.dr + self.dp.norm_squared() + self.dq.norm_squared()).sqrt()
    }
}

fn stiefel_project(
    p: &DVector<f64>,
    q: &DVector<f64>,
    gp: &DVector<f64>,
    gq: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let a = p.dot(gp);
    let d = q.dot(gq);
    let c = 0.5 * (p.dot(gq) + q.dot(gp));
    (gp - a * p - c * q, gq - d * q - c * p)
}

fn stiefel_retract(
    p: &DVector<f64>,
    q: &DVector<f64>,
    dp: &DVector<f64>,
    dq: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let mut np = p + dp;
    np /= np.norm();
    let mut nq = q + dq;
    let c = nq.dot(&np);
    nq.axpy(-c, &np, 1.0);
    nq /= nq.norm();
    (np, nq)
}

pub fn gamma_grad(
    param: &CircleParam,
    form: &PerturbationForm,
    m_q: usize,
) -> Result<GammaGradient> {
    if !form.has_analytic_derivative() {
        return Err(Error::UnsupportedDerivative("tabulated"));
    }
    let full = form.field_at(param.r);
    let nb = param.p.len();
    let sphere = full.view((1, 1), (nb, nb)).into_owned();
    let dfull = form.field_deriv_at(param.r)?;
    let dsphere = dfull.view((1, 1), (nb, nb)).into_owned();

    let mut dr = 0.0;
    let mut gp = DVector::zeros(nb);
    let mut gq = DVector::zeros(nb);
    for k in 0..m_q {
        let th = 2.0 * PI * k as f64 / m_q as f64;
        let zdot = 2.0 * PI * (-th.sin() * &param.p + th.cos() * &param.q);
        dr += zdot.dot(&(&dsphere * &zdot));
        let sz = &sphere * &zdot;
        gp.axpy(-2.0 * PI * th.sin(), &sz, 1.0);
        gq.axpy(2.0 * PI * th.cos(), &sz, 1.0);
    }
    dr *= 0.5 / m_q as f64;
    gp *= 1.0 / m_q as f64;
    gq *= 1.0 / m_q as f64;
    let (dp, dq) = stiefel_project(&param.p, &param.q, &gp, &gq);
    Ok(GammaGradient { dr, dp, dq })
}

// ---------------------------------------------------------------------------
// Critical points of Gamma
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticalPointClass {
    Minimum,
    Maximum,
    Saddle,
    Degenerate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GammaCriticalPoint {
    pub param: CircleParam,
    pub gamma: f64,
    pub class: CriticalPointClass,
    pub grad_norm: f64,
    /// Eigenvalues of the finite-difference Gamma Hessian in tangent
    /// coordinates, the known orbit (in-plane rotation) direction excluded.
    pub hessian_eigs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GammaSlice {
    pub r: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReductionReport {
    pub gamma_samples: Vec<GammaSlice>,
    pub critical_points: Vec<GammaCriticalPoint>,
    pub predicted_count: usize,
    /// `(eps, max |Phi_eps - b - eps Gamma|)` pairs, filled by expansion audits.
    pub expansion_residuals: Vec<(f64, f64)>,
    /// Set when Gamma is flat to tolerance (e.g. the zero form).
    pub flat: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GammaSearchConfig {
    /// Sphere dimension N.
    pub n: usize,
    pub r_max: f64,
    pub starts: usize,
    pub seed: u64,
    pub m_q: usize,
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Finite-difference step for the Gamma Hessian.
    pub fd_step: f64,
    /// Absolute eigenvalue threshold for classification ties.
    pub class_tol: f64,
    /// Parameter-space dedup distance.
    pub dedup_tol: f64,
    /// Number of (p, q) samples per r when tabulating Gamma slices.
    pub slice_samples: usize,
    pub slice_points: usize,
}

impl GammaSearchConfig {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            r_max: 20.0,
            starts: 64,
            seed: 0,
            m_q: 128,
            grad_tol: 1e-10,
            max_iter: 200,
            fd_step: 1e-4,
            class_tol: 1e-7,
            dedup_tol: 1e-3,
            slice_samples: 16,
            slice_points: 81,
        }
    }
}

/// Random Stiefel pair from a seeded generator.
pub fn random_stiefel(n: usize, rng: &mut ChaCha8Rng) -> (DVector<f64>, DVector<f64>) {
    loop {
        let p = DVector::from_fn(n + 1, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let q = DVector::from_fn(n + 1, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let np = p.norm();
        if np < 1e-3 {
            continue;
        }
        let p = p / np;
        let mut q = q.clone();
        let c = q.dot(&p);
        q.axpy(-c, &p, 1.0);
        let nq = q.norm();
        if nq < 1e-3 {
            continue;
        }
        return (p, q / nq);
    }
}

/// Orthonormal tangent coordinates at `(r, p, q)`: index 0 is the height
/// direction, index 1 the in-plane (orbit) rotation, then pairs `(e, 0)`,
/// `(0, e)` for each complement direction `e`.
fn param_tangent_frame(param: &CircleParam) -> Vec<(f64, DVector<f64>, DVector<f64>)> {
    let nb = param.p.len();
    let mut frame = Vec::with_capacity(2 * (nb - 1));
    frame.push((1.0, DVector::zeros(nb), DVector::zeros(nb)));
    let s = 0.5_f64.sqrt();
    frame.push((0.0, s * &param.q, -s * &param.p));
    for e in plane_complement(&param.p, &param.q) {
        frame.push((0.0, e.clone(), DVector::zeros(nb)));
        frame.push((0.0, DVector::zeros(nb), e));
    }
    frame
}

fn move_param(param: &CircleParam, coeffs: &DVector<f64>, frame: &[(f64, DVector<f64>, DVector<f64>)]) -> CircleParam {
    let nb = param.p.len();
    let mut dr = 0.0;
    let mut dp = DVector::zeros(nb);
    let mut dq = DVector::zeros(nb);
    for (c, (fr, fp, fq)) in coeffs.iter().zip(frame) {
        dr += c * fr;
        dp.axpy(*c, fp, 1.0);
        dq.axpy(*c, fq, 1.0);
    }
    let (p, q) = stiefel_retract(&param.p, &param.q, &dp, &dq);
    CircleParam {
        r: param.r + dr,
        p,
        q,
    }
}

fn grad_coeffs(g: &GammaGradient, frame: &[(f64, DVector<f64>, DVector<f64>)]) -> DVector<f64> {
    DVector::from_iterator(
        frame.len(),
        frame
            .iter()
            .map(|(fr, fp, fq)| g.dr * fr + g.dp.dot(fp) + g.dq.dot(fq)),
    )
}

/// Finite-difference Hessian of Gamma in the tangent frame at `param`.
fn gamma_fd_hessian(
    param: &CircleParam,
    form: &PerturbationForm,
    m_q: usize,
    step: f64,
) -> Result<DMatrix<f64>> {
    let frame = param_tangent_frame(param);
    let dim = frame.len();
    let mut hess = DMatrix::zeros(dim, dim);
    for j in 0..dim {
        let mut cj = DVector::zeros(dim);
        cj[j] = step;
        let plus = gamma_grad(&move_param(param, &cj, &frame), form, m_q)?;
        cj[j] = -step;
        let minus = gamma_grad(&move_param(param, &cj, &frame), form, m_q)?;
        let gp = grad_coeffs(&plus, &frame);
        let gm = grad_coeffs(&minus, &frame);
        let col = (gp - gm) / (2.0 * step);
        hess.set_column(j, &col);
    }
    // symmetrize
    let ht = hess.transpose();
    Ok(0.5 * (hess + ht))
}

fn pseudo_solve(h: &DMatrix<f64>, g: &DVector<f64>, defl: f64) -> DVector<f64> {
    let eig = h.clone().symmetric_eigen();
    let maxabs = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l.abs()));
    let mut out = DVector::zeros(g.len());
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l.abs() > defl * maxabs.max(1e-300) {
            let v = eig.eigenvectors.column(i);
            out.axpy(v.dot(g) / l, &v.into_owned(), 1.0);
        }
    }
    out
}

fn newton_polish(
    start: &CircleParam,
    form: &PerturbationForm,
    cfg: &GammaSearchConfig,
) -> Result<Option<(CircleParam, f64)>> {
    let mut param = start.clone();
    for _ in 0..cfg.max_iter {
        let g = gamma_grad(&param, form, cfg.m_q)?;
        let gnorm = g.norm();
        if gnorm <= cfg.grad_tol {
            return Ok(Some((param, gnorm)));
        }
        let frame = param_tangent_frame(&param);
        let gc = grad_coeffs(&g, &frame);
        let hess = gamma_fd_hessian(&param, form, cfg.m_q, cfg.fd_step)?;
        let mut step = -pseudo_solve(&hess, &gc, 1e-9);
        let maxstep = 0.5;
        if step.norm() > maxstep {
            step *= maxstep / step.norm();
        }
        if step.norm() < 1e-14 {
            // gradient is in the deflated subspace; flat region
            return Ok(None);
        }
        let mut factor = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let cand = move_param(&param, &(factor * &step), &frame);
            if cand.r.abs() > cfg.r_max {
                factor *= 0.5;
                continue;
            }
            let gn = gamma_grad(&cand, form, cfg.m_q)?.norm();
            if gn < gnorm {
                param = cand;
                accepted = true;
                break;
            }
            factor *= 0.5;
        }
        if !accepted {
            // take the damped step anyway; Newton may be non-monotone near
            // saddles
            param = move_param(&param, &(0.25 * &step), &frame);
            if param.r.abs() > cfg.r_max {
                return Ok(None);
            }
        }
    }
    let g = gamma_grad(&param, form, cfg.m_q)?;
    if g.norm() <= cfg.grad_tol * 10.0 {
        Ok(Some((param, g.norm())))
    } else {
        Ok(None)
    }
}

fn classify(
    param: &CircleParam,
    form: &PerturbationForm,
    cfg: &GammaSearchConfig,
) -> Result<(CriticalPointClass, Vec<f64>)> {
    let hess = gamma_fd_hessian(param, form, cfg.m_q, cfg.fd_step)?;
    // drop the known orbit direction (frame index 1)
    let dim = hess.nrows();
    let keep: Vec<usize> = (0..dim).filter(|&i| i != 1).collect();
    let mut reduced = DMatrix::zeros(keep.len(), keep.len());
    for (a, &i) in keep.iter().enumerate() {
        for (b, &j) in keep.iter().enumerate() {
            reduced[(a, b)] = hess[(i, j)];
        }
    }
    let mut eigs: Vec<f64> = reduced.symmetric_eigen().eigenvalues.iter().cloned().collect();
    eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let neg = eigs.iter().filter(|&&l| l < -cfg.class_tol).count();
    let pos = eigs.iter().filter(|&&l| l > cfg.class_tol).count();
    let class = if neg + pos < eigs.len() {
        CriticalPointClass::Degenerate
    } else if neg == 0 {
        CriticalPointClass::Minimum
    } else if pos == 0 {
        CriticalPointClass::Maximum
    } else {
        CriticalPointClass::Saddle
    };
    Ok((class, eigs))
}

fn gamma_slices(
    form: &PerturbationForm,
    cfg: &GammaSearchConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<GammaSlice> {
    let mut pairs = Vec::with_capacity(cfg.slice_samples);
    for i in 0..=cfg.n {
        for j in (i + 1)..=cfg.n {
            let c = CircleParam::coordinate_plane(cfg.n, 0.0, i, j);
            pairs.push((c.p, c.q));
        }
    }
    while pairs.len() < cfg.slice_samples {
        pairs.push(random_stiefel(cfg.n, rng));
    }
    let mut out = Vec::with_capacity(cfg.slice_points);
    for i in 0..cfg.slice_points {
        let r = -cfg.r_max + 2.0 * cfg.r_max * i as f64 / (cfg.slice_points - 1) as f64;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (p, q) in &pairs {
            let g = gamma(
                &CircleParam {
                    r,
                    p: p.clone(),
                    q: q.clone(),
                },
                form,
                cfg.m_q,
            );
            lo = lo.min(g);
            hi = hi.max(g);
        }
        out.push(GammaSlice {
            r,
            gamma_min: lo,
            gamma_max: hi,
        });
    }
    out
}

/// Multistart search for critical points of `Gamma` over
/// `[-R, R] x V_2(R^{N+1})`: seeded starts, gradient pre-steps, Newton polish
/// (so saddle orbits are found too), orbit-aware dedup, finite-difference
/// classification. Deterministic for a fixed seed.
pub fn find_gamma_critical_points(
    form: &PerturbationForm,
    cfg: &GammaSearchConfig,
) -> Result<ReductionReport> {
    if form.sphere_dim() != cfg.n {
        return Err(Error::DimensionMismatch {
            expected: cfg.n,
            got: form.sphere_dim(),
            context: "form vs search config",
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let slices = gamma_slices(form, cfg, &mut rng);

    // flatness scale from the tabulated slices
    let scale = slices
        .iter()
        .map(|s| s.gamma_min.abs().max(s.gamma_max.abs()))
        .fold(0.0f64, f64::max);
    if scale < 1e-14 {
        return Ok(ReductionReport {
            gamma_samples: slices,
            critical_points: Vec::new(),
            predicted_count: 0,
            expansion_residuals: Vec::new(),
            flat: true,
        });
    }

    let mut starts = Vec::with_capacity(cfg.starts);
    for i in 0..cfg.starts {
        let r = if cfg.starts == 1 {
            0.0
        } else {
            -0.8 * cfg.r_max + 1.6 * cfg.r_max * i as f64 / (cfg.starts - 1) as f64
        };
        let (p, q) = random_stiefel(cfg.n, &mut rng);
        starts.push(CircleParam { r, p, q });
    }
    // coordinate-plane starts near the origin for good measure
    for i in 0..=cfg.n {
        for j in (i + 1)..=cfg.n {
            for r in [-1.0, 0.5] {
                starts.push(CircleParam::coordinate_plane(cfg.n, r, i, j));
            }
        }
    }

    let mut found: Vec<(CircleParam, f64)> = Vec::new();
    for start in &starts {
        if let Some((param, gnorm)) = newton_polish(start, form, cfg)? {
            found.push((param, gnorm));
        }
    }

    // deterministic order before dedup
    let mq = cfg.m_q;
    found.sort_by(|a, b| {
        let ga = gamma(&a.0, form, mq);
        let gb = gamma(&b.0, form, mq);
        ga.partial_cmp(&gb)
            .unwrap()
            .then(a.0.r.partial_cmp(&b.0.r).unwrap())
    });
    let mut reps: Vec<(CircleParam, f64)> = Vec::new();
    for (param, gnorm) in found {
        if !reps
            .iter()
            .any(|(r, _)| r.plane_distance(&param) <= cfg.dedup_tol)
        {
            reps.push((param, gnorm));
        }
    }

    let mut critical_points = Vec::new();
    let mut hess_scale = 0.0f64;
    let mut staged = Vec::new();
    for (param, gnorm) in reps {
        let (class, eigs) = classify(&param, form, cfg)?;
        let local = eigs.iter().fold(0.0f64, |a, &l| a.max(l.abs()));
        hess_scale = hess_scale.max(local);
        staged.push((param, gnorm, class, eigs, local));
    }
    for (param, gnorm, class, eigs, local) in staged {
        // drop spurious "critical points" in the decay plateau: everything
        // there is flat, including the Hessian
        if class == CriticalPointClass::Degenerate && local < 1e-6 * hess_scale {
            continue;
        }
        let value = gamma(&param, form, cfg.m_q);
        critical_points.push(GammaCriticalPoint {
            param,
            gamma: value,
            class,
            grad_norm: gnorm,
            hessian_eigs: eigs,
        });
    }
    critical_points.sort_by(|a, b| {
        a.gamma
            .partial_cmp(&b.gamma)
            .unwrap()
            .then(a.param.r.partial_cmp(&b.param.r).unwrap())
    });
    let predicted_count = critical_points
        .iter()
        .filter(|c| c.class != CriticalPointClass::Degenerate)
        .count();
    Ok(ReductionReport {
        gamma_samples: slices,
        critical_points,
        predicted_count,
        expansion_residuals: Vec::new(),
        flat: false,
    })
}

// ---------------------------------------------------------------------------
// The correction w(z, eps)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WSolverKind {
    /// Newton iteration on the bordered system with the exact Hessian.
    Newton,
    /// The literal contraction map: the bordered Jacobian frozen at
    /// `(z, eps = 0)`, iterated to its fixed point.
    Contraction,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WOptions {
    pub eps_max: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub solver: WSolverKind,
}

impl Default for WOptions {
    fn default() -> Self {
        Self {
            eps_max: 0.05,
            tol: 1e-12,
            max_iter: 60,
            solver: WSolverKind::Newton,
        }
    }
}

/// The orthogonal correction at a great circle: `z + w` solves the bordered
/// system `E'_eps(z+w) = sum_i alpha_i v_i`, `w` L2-orthogonal to the
/// tangent basis of the critical manifold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WCorrection {
    pub w: LoopTangent,
    /// Multipliers along the tangent basis (L2 pairing convention).
    pub alpha: DVector<f64>,
    pub iterations: usize,
    /// Fresh norm of the projected gradient at the solution with the
    /// multiplier part removed.
    pub residual: f64,
    /// The corrected loop `z + w`, renormalized node-wise.
    pub solution: DiscreteLoop,
}

impl WCorrection {
    pub fn w_norm(&self) -> f64 {
        self.w.l2_norm()
    }
}

struct BorderedSystem<'a> {
    m: usize,
    dim: usize,
    z_flat: DVector<f64>,
    basis: &'a [LoopTangent],
    form: &'a PerturbationForm,
    eps: f64,
}

impl<'a> BorderedSystem<'a> {
    fn unknowns(&self) -> usize {
        self.m * self.dim + self.m + self.basis.len()
    }

    fn residual(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let d = self.m * self.dim;
        let u = y.rows(0, d).into_owned();
        let lam = y.rows(d, self.m);
        let alpha = y.rows(d + self.m, self.basis.len());
        let mut f = DVector::zeros(self.unknowns());
        let grad = euclidean_gradient_raw(self.m, self.dim, &u, self.form, self.eps)?;
        f.rows_mut(0, d).copy_from(&grad);
        let mf = self.m as f64;
        for k in 0..self.m {
            let off = k * self.dim + 1;
            let nb = self.dim - 1;
            let x = u.rows(off, nb);
            // gradient of the node constraint
            for i in 0..nb {
                f[off + i] -= lam[k] * x[i];
            }
            f[d + k] = 0.5 * (x.norm_squared() - 1.0);
        }
        for (i, v) in self.basis.iter().enumerate() {
            let vi = v.flat();
            f.rows_mut(0, d).axpy(-alpha[i] / mf, vi, 1.0);
            f[d + self.m + i] = vi.dot(&(&u - &self.z_flat)) / mf;
        }
        Ok(f)
    }

    fn jacobian(&self, y: &DVector<f64>, eps: f64) -> Result<DMatrix<f64>> {
        let d = self.m * self.dim;
        let total = self.unknowns();
        let u = y.rows(0, d).into_owned();
        let lam = y.rows(d, self.m);
        let mut jac = DMatrix::zeros(total, total);
        let hess = ambient_hessian_raw(self.m, self.dim, &u, self.form, eps)?;
        jac.view_mut((0, 0), (d, d)).copy_from(&hess);
        let mf = self.m as f64;
        for k in 0..self.m {
            let off = k * self.dim + 1;
            let nb = self.dim - 1;
            for i in 0..nb {
                jac[(off + i, off + i)] -= lam[k];
                let xi = u[off + i];
                jac[(off + i, d + k)] = -xi;
                jac[(d + k, off + i)] = xi;
            }
        }
        for (i, v) in self.basis.iter().enumerate() {
            let vi = v.flat();
            for row in 0..d {
                jac[(row, d + self.m + i)] = -vi[row] / mf;
                jac[(d + self.m + i, row)] = vi[row] / mf;
            }
        }
        Ok(jac)
    }
}

/// Solves for the correction `w(z, eps)` at a great circle by Newton (or the
/// frozen-Jacobian contraction iteration) on the bordered system.
pub fn compute_w(
    param: &CircleParam,
    form: &PerturbationForm,
    eps: f64,
    m: usize,
    opts: &WOptions,
) -> Result<WCorrection> {
    if eps.abs() > opts.eps_max {
        return Err(Error::InvalidConfig(format!(
            "|eps| = {} exceeds eps_max = {}",
            eps.abs(),
            opts.eps_max
        )));
    }
    let n = param.sphere_dim();
    let dim = n + 2;
    let z = great_circle(param, m)?;
    let basis = tangent_basis(param, m)?;
    let sys = BorderedSystem {
        m,
        dim,
        z_flat: z.flat().clone(),
        basis: &basis,
        form,
        eps,
    };

    let total = sys.unknowns();
    let mut y = DVector::zeros(total);
    y.rows_mut(0, m * dim).copy_from(z.flat());
    // initialize the sphere multipliers from the radial gradient at z
    let g0 = euclidean_gradient_raw(m, dim, z.flat(), form, 0.0)?;
    for k in 0..m {
        let off = k * dim + 1;
        y[m * dim + k] = z.x(k).dot(&g0.rows(off, dim - 1));
    }

    let frozen = match opts.solver {
        WSolverKind::Newton => None,
        WSolverKind::Contraction => {
            let j0 = sys.jacobian(&y, 0.0)?;
            let lu = j0.lu();
            if lu.determinant() == 0.0 {
                return Err(Error::Degeneracy(
                    "frozen bordered Jacobian is singular".into(),
                ));
            }
            Some(lu)
        }
    };

    let max_iter = match opts.solver {
        WSolverKind::Newton => opts.max_iter,
        WSolverKind::Contraction => opts.max_iter.max(400),
    };
    let mut iterations = 0;
    let mut last = f64::INFINITY;
    for it in 0..max_iter {
        let f = sys.residual(&y)?;
        last = f.amax();
        iterations = it;
        if last <= opts.tol {
            break;
        }
        let step = match &frozen {
            Some(lu) => lu.solve(&f).ok_or_else(|| {
                Error::Degeneracy("frozen bordered Jacobian solve failed".into())
            })?,
            None => {
                let jac = sys.jacobian(&y, eps)?;
                jac.lu().solve(&f).ok_or_else(|| {
                    Error::Degeneracy("bordered Jacobian is singular".into())
                })?
            }
        };
        y -= step;
    }
    if last > opts.tol.max(1e-11) {
        return Err(Error::Divergence {
            iterations,
            residual: last,
        });
    }

    // extract the solution loop, renormalized node-wise
    let mut u = y.rows(0, m * dim).into_owned();
    for k in 0..m {
        let mut x = u.rows_mut(k * dim + 1, dim - 1);
        let norm = x.norm();
        x /= norm;
    }
    let solution = DiscreteLoop::from_flat(m, n, u.clone())?;
    let w = z.project_tangent(&(&u - z.flat()));
    let alpha = y.rows(m * dim + m, basis.len()).into_owned() / m as f64;

    // fresh residual: projected gradient minus the multiplier part
    let grad = euclidean_gradient_raw(m, dim, &u, form, eps)?;
    let mut res_vec = grad;
    for (i, v) in basis.iter().enumerate() {
        res_vec.axpy(-alpha[i], v.flat(), 1.0);
    }
    let residual = solution.project_tangent(&res_vec).l2_norm();

    Ok(WCorrection {
        w,
        alpha,
        iterations,
        residual,
        solution,
    })
}

/// The reduced energy `Phi_eps(z) = E_eps(z + w(z, eps))`.
pub fn phi(
    param: &CircleParam,
    form: &PerturbationForm,
    eps: f64,
    m: usize,
    opts: &WOptions,
) -> Result<f64> {
    if eps == 0.0 {
        return circle_energy(param, m);
    }
    let corr = compute_w(param, form, eps, m, opts)?;
    loop_space::energy(&corr.solution, form, eps)
}
