//! Ambient geometry of the cylinder `R x S^N`: the product metric `g0`,
//! the perturbation field `h`, and the decay / definiteness checks on `h`.
//!
//! `h` is encoded on ambient `R^{N+2}` coordinates (the `R` direction first,
//! then the `N+1` sphere coordinates) as a sum of separable terms
//! `profile(s) * B` with `B` a constant symmetric matrix, restricted to the
//! tangent bundle at evaluation time.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNIT_TOL: f64 = 1e-12;
pub const TANGENT_TOL: f64 = 1e-10;
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Default threshold for the decay certificate: the field at `s = +-R` must be
/// below this fraction of the block scale.
pub const DECAY_THRESHOLD: f64 = 1e-2;

/// A point `(s, xi)` of `R x S^N`, with `xi` a unit vector in `R^{N+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbientPoint {
    pub s: f64,
    pub xi: DVector<f64>,
}

impl AmbientPoint {
    pub fn new(s: f64, xi: DVector<f64>) -> Result<Self> {
        let dev = (xi.norm() - 1.0).abs();
        if dev > UNIT_TOL {
            return Err(Error::ConstraintViolation {
                what: "AmbientPoint sphere coordinate",
                deviation: dev,
                tolerance: UNIT_TOL,
            });
        }
        Ok(Self { s, xi })
    }

    /// Sphere dimension N.
    pub fn sphere_dim(&self) -> usize {
        self.xi.len() - 1
    }
}

/// A tangent vector `(rho, eta)` at some point of `R x S^N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    pub rho: f64,
    pub eta: DVector<f64>,
}

impl TangentVector {
    pub fn new(rho: f64, eta: DVector<f64>) -> Self {
        Self { rho, eta }
    }

    /// Ambient coordinates `[rho, eta_0, ..., eta_N]`.
    pub fn ambient(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.eta.len() + 1);
        v[0] = self.rho;
        v.rows_mut(1, self.eta.len()).copy_from(&self.eta);
        v
    }

    fn check_tangent_at(&self, pt: &AmbientPoint) -> Result<()> {
        if self.eta.len() != pt.xi.len() {
            return Err(Error::DimensionMismatch {
                expected: pt.xi.len(),
                got: self.eta.len(),
                context: "tangent vector vs base point",
            });
        }
        let dev = pt.xi.dot(&self.eta).abs();
        if dev > TANGENT_TOL {
            return Err(Error::ConstraintViolation {
                what: "tangent vector sphere component",
                deviation: dev,
                tolerance: TANGENT_TOL,
            });
        }
        Ok(())
    }
}

/// Named scalar profiles of `s`, all bounded; every variant except `Tabulated`
/// carries closed-form first and second derivatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum ProfileSpec {
    Constant { value: f64 },
    /// `exp(-(s - center)^2 / width^2)`
    Gaussian { center: f64, width: f64 },
    /// `tanh(s) / (1 + s^2)`
    OddDecay,
    /// `gaussian(s; +center, width) - gaussian(s; -center, width)`
    BumpPair { center: f64, width: f64 },
    /// `(c0 + c1 s + c2 s^2 + ...) * gaussian(s; center, width)`
    PolyGaussian {
        coeffs: Vec<f64>,
        center: f64,
        width: f64,
    },
    /// Piecewise-linear interpolation of samples; no analytic derivative.
    Tabulated { s: Vec<f64>, values: Vec<f64> },
}

fn gauss(s: f64, c: f64, w: f64) -> f64 {
    (-((s - c) / w).powi(2)).exp()
}

fn gauss_d(s: f64, c: f64, w: f64) -> f64 {
    -2.0 * (s - c) / (w * w) * gauss(s, c, w)
}

fn gauss_dd(s: f64, c: f64, w: f64) -> f64 {
    let w2 = w * w;
    (-2.0 / w2 + 4.0 * (s - c).powi(2) / (w2 * w2)) * gauss(s, c, w)
}

fn poly_eval(coeffs: &[f64], s: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * s + c)
}

fn poly_deriv(coeffs: &[f64]) -> Vec<f64> {
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, &c)| k as f64 * c)
        .collect()
}

impl ProfileSpec {
    pub fn eval(&self, s: f64) -> f64 {
        match self {
            Self::Constant { value } => *value,
            Self::Gaussian { center, width } => gauss(s, *center, *width),
            Self::OddDecay => s.tanh() / (1.0 + s * s),
            Self::BumpPair { center, width } => {
                gauss(s, *center, *width) - gauss(s, -*center, *width)
            }
            Self::PolyGaussian {
                coeffs,
                center,
                width,
            } => poly_eval(coeffs, s) * gauss(s, *center, *width),
            Self::Tabulated { s: xs, values } => {
                if xs.is_empty() {
                    return 0.0;
                }
                if s <= xs[0] {
                    return values[0];
                }
                if s >= xs[xs.len() - 1] {
                    return values[values.len() - 1];
                }
                let i = xs.partition_point(|&x| x < s).max(1);
                let (x0, x1) = (xs[i - 1], xs[i]);
                let t = (s - x0) / (x1 - x0);
                values[i - 1] * (1.0 - t) + values[i] * t
            }
        }
    }

    pub fn deriv(&self, s: f64) -> Result<f64> {
        match self {
            Self::Constant { .. } => Ok(0.0),
            Self::Gaussian { center, width } => Ok(gauss_d(s, *center, *width)),
            Self::OddDecay => {
                let t = s.tanh();
                let u = 1.0 + s * s;
                Ok((1.0 - t * t) / u - 2.0 * s * t / (u * u))
            }
            Self::BumpPair { center, width } => {
                Ok(gauss_d(s, *center, *width) - gauss_d(s, -*center, *width))
            }
            Self::PolyGaussian {
                coeffs,
                center,
                width,
            } => {
                let dp = poly_deriv(coeffs);
                Ok(poly_eval(&dp, s) * gauss(s, *center, *width)
                    + poly_eval(coeffs, s) * gauss_d(s, *center, *width))
            }
            Self::Tabulated { .. } => Err(Error::UnsupportedDerivative("tabulated")),
        }
    }

    pub fn deriv2(&self, s: f64) -> Result<f64> {
        match self {
            Self::Constant { .. } => Ok(0.0),
            Self::Gaussian { center, width } => Ok(gauss_dd(s, *center, *width)),
            Self::OddDecay => {
                let t = s.tanh();
                let sech2 = 1.0 - t * t;
                let u = 1.0 + s * s;
                let u2 = u * u;
                let u3 = u2 * u;
                Ok(-2.0 * t * sech2 / u - 2.0 * s * sech2 / u2
                    - 2.0 * (t + s * sech2) / u2
                    + 8.0 * s * s * t / u3)
            }
            Self::BumpPair { center, width } => {
                Ok(gauss_dd(s, *center, *width) - gauss_dd(s, -*center, *width))
            }
            Self::PolyGaussian {
                coeffs,
                center,
                width,
            } => {
                let dp = poly_deriv(coeffs);
                let ddp = poly_deriv(&dp);
                Ok(poly_eval(&ddp, s) * gauss(s, *center, *width)
                    + 2.0 * poly_eval(&dp, s) * gauss_d(s, *center, *width)
                    + poly_eval(coeffs, s) * gauss_dd(s, *center, *width))
            }
            Self::Tabulated { .. } => Err(Error::UnsupportedDerivative("tabulated")),
        }
    }
}

/// One separable term `profile(s) * block` of the perturbation field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormTerm {
    pub profile: ProfileSpec,
    /// Symmetric `(N+2) x (N+2)` matrix on ambient coordinates, the `R`
    /// direction first. Serialized as row-major nested arrays.
    #[serde(with = "block_serde")]
    pub block: DMatrix<f64>,
}

mod block_serde {
    use nalgebra::DMatrix;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
            .collect();
        serde::Serialize::serialize(&rows, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Deserialize::deserialize(d)?;
        let nr = rows.len();
        let nc = rows.first().map_or(0, Vec::len);
        if nr == 0 || rows.iter().any(|r| r.len() != nc) {
            return Err(D::Error::custom("block must be a nonempty rectangular matrix"));
        }
        Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
    }
}

/// The bilinear perturbation field `h(s, xi) = sum_i profile_i(s) * B_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationForm {
    /// Ambient dimension N + 2.
    dim: usize,
    pub terms: Vec<FormTerm>,
    #[serde(default)]
    pub claims_h1: bool,
    #[serde(default)]
    pub claims_h2: bool,
    #[serde(default)]
    pub claims_h3: bool,
}

impl PerturbationForm {
    pub fn new(n: usize, terms: Vec<FormTerm>) -> Result<Self> {
        let dim = n + 2;
        for term in &terms {
            if term.block.nrows() != dim || term.block.ncols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: term.block.nrows(),
                    context: "perturbation block",
                });
            }
            let asym = (&term.block - term.block.transpose()).amax();
            if asym > SYMMETRY_TOL {
                return Err(Error::ConstraintViolation {
                    what: "perturbation block symmetry",
                    deviation: asym,
                    tolerance: SYMMETRY_TOL,
                });
            }
        }
        Ok(Self {
            dim,
            terms,
            claims_h1: false,
            claims_h2: false,
            claims_h3: false,
        })
    }

    pub fn zero(n: usize) -> Self {
        Self::new(n, Vec::new()).expect("zero form is always valid")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let form: Self =
            serde_json::from_str(json).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        // revalidate through the checked constructor
        let n = form.sphere_dim();
        let mut out = Self::new(n, form.terms)?;
        out.claims_h1 = form.claims_h1;
        out.claims_h2 = form.claims_h2;
        out.claims_h3 = form.claims_h3;
        Ok(out)
    }

    /// Sphere dimension N.
    pub fn sphere_dim(&self) -> usize {
        self.dim - 2
    }

    /// Ambient dimension N + 2.
    pub fn ambient_dim(&self) -> usize {
        self.dim
    }

    /// The summed matrix field at parameter `s`.
    pub fn field_at(&self, s: f64) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for term in &self.terms {
            out += term.profile.eval(s) * &term.block;
        }
        out
    }

    /// `d/ds` of the matrix field.
    pub fn field_deriv_at(&self, s: f64) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for term in &self.terms {
            out += term.profile.deriv(s)? * &term.block;
        }
        Ok(out)
    }

    /// `d^2/ds^2` of the matrix field.
    pub fn field_deriv2_at(&self, s: f64) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for term in &self.terms {
            out += term.profile.deriv2(s)? * &term.block;
        }
        Ok(out)
    }

    /// The sphere block: lower-right `(N+1) x (N+1)` sub-matrix of the field.
    pub fn sphere_block_at(&self, s: f64) -> DMatrix<f64> {
        let f = self.field_at(s);
        f.view((1, 1), (self.dim - 1, self.dim - 1)).into_owned()
    }

    pub fn has_analytic_derivative(&self) -> bool {
        self.terms
            .iter()
            .all(|t| !matches!(t.profile, ProfileSpec::Tabulated { .. }))
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty() || self.terms.iter().all(|t| t.block.amax() == 0.0)
    }

    // -- common builders ----------------------------------------------------

    /// `odd_decay(s) * I`: satisfies (h1) and (h2).
    pub fn odd_decay_identity(n: usize) -> Self {
        let mut f = Self::new(
            n,
            vec![FormTerm {
                profile: ProfileSpec::OddDecay,
                block: DMatrix::identity(n + 2, n + 2),
            }],
        )
        .expect("builder block is symmetric");
        f.claims_h1 = true;
        f.claims_h2 = true;
        f
    }

    /// `odd_decay(s) * diag(0, lambda)`: anisotropic sphere block, (h1)+(h2).
    pub fn odd_decay_diag(n: usize, sphere_eigs: &[f64]) -> Result<Self> {
        if sphere_eigs.len() != n + 1 {
            return Err(Error::DimensionMismatch {
                expected: n + 1,
                got: sphere_eigs.len(),
                context: "sphere block eigenvalue list",
            });
        }
        let mut diag = DVector::zeros(n + 2);
        for (i, &l) in sphere_eigs.iter().enumerate() {
            diag[i + 1] = l;
        }
        let mut f = Self::new(
            n,
            vec![FormTerm {
                profile: ProfileSpec::OddDecay,
                block: DMatrix::from_diagonal(&diag),
            }],
        )?;
        f.claims_h1 = true;
        f.claims_h2 = sphere_eigs.iter().all(|&l| l > 0.0);
        f.claims_h3 = true;
        Ok(f)
    }

    /// `gaussian(s; center, width) * I`: satisfies (h1) and (h3).
    pub fn gaussian_identity(n: usize, center: f64, width: f64) -> Self {
        let mut f = Self::new(
            n,
            vec![FormTerm {
                profile: ProfileSpec::Gaussian { center, width },
                block: DMatrix::identity(n + 2, n + 2),
            }],
        )
        .expect("builder block is symmetric");
        f.claims_h1 = true;
        f.claims_h3 = true;
        f
    }
}

/// Evaluates the unperturbed product metric `g0` on a pair of tangent vectors.
pub fn eval_g0(pt: &AmbientPoint, v: &TangentVector, w: &TangentVector) -> Result<f64> {
    v.check_tangent_at(pt)?;
    w.check_tangent_at(pt)?;
    Ok(v.rho * w.rho + v.eta.dot(&w.eta))
}

/// Evaluates the perturbation field `h` on a pair of tangent vectors.
pub fn eval_h(
    pt: &AmbientPoint,
    v: &TangentVector,
    w: &TangentVector,
    form: &PerturbationForm,
) -> Result<f64> {
    v.check_tangent_at(pt)?;
    w.check_tangent_at(pt)?;
    if pt.xi.len() + 1 != form.ambient_dim() {
        return Err(Error::DimensionMismatch {
            expected: form.ambient_dim(),
            got: pt.xi.len() + 1,
            context: "point vs perturbation form",
        });
    }
    let a = v.ambient();
    let b = w.ambient();
    let mut acc = 0.0;
    for term in &form.terms {
        acc += term.profile.eval(pt.s) * a.dot(&(&term.block * &b));
    }
    Ok(acc)
}

fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    // symmetric blocks: spectral norm = max |eigenvalue|
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(0.0, |acc: f64, &l| acc.max(l.abs()))
}

/// Decay certificate for hypothesis (h1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct H1Report {
    pub radius: f64,
    /// Operator norm of the field at `s = +radius`.
    pub sup_plus: f64,
    /// Operator norm of the field at `s = -radius`.
    pub sup_minus: f64,
    /// Reference scale: sum of operator norms of the term blocks.
    pub scale: f64,
    pub threshold: f64,
    pub passes: bool,
}

/// Checks the pointwise decay `h(s, .) -> 0` as `|s| -> infinity` at a finite
/// radius. `samples` sets the interior grid used only for reporting the
/// maximal field norm seen.
pub fn check_h1(form: &PerturbationForm, radius: f64, samples: usize) -> Result<H1Report> {
    if radius <= 0.0 || samples == 0 {
        return Err(Error::InvalidConfig(
            "check_h1 requires radius > 0 and samples >= 1".into(),
        ));
    }
    let scale: f64 = form.terms.iter().map(|t| operator_norm(&t.block)).sum();
    let sup_plus = operator_norm(&form.field_at(radius));
    let sup_minus = operator_norm(&form.field_at(-radius));
    let sup = sup_plus.max(sup_minus);
    let passes = if scale == 0.0 {
        sup == 0.0
    } else {
        sup <= DECAY_THRESHOLD * scale
    };
    Ok(H1Report {
        radius,
        sup_plus,
        sup_minus,
        scale,
        threshold: DECAY_THRESHOLD,
        passes,
    })
}

/// Asymptotic definiteness certificate for hypothesis (h2).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct H2Report {
    pub radius: f64,
    /// Smallest eigenvalue of the sphere block at `s = +radius`.
    pub min_eig_plus: f64,
    /// Largest eigenvalue of the sphere block at `s = -radius`.
    pub max_eig_minus: f64,
    pub positive_at_plus: bool,
    pub negative_at_minus: bool,
    pub passes: bool,
}

/// Checks sign-definiteness of the sphere block of `h` at `s = +-radius`:
/// positive definite on the right, negative definite on the left.
pub fn check_h2(form: &PerturbationForm, radius: f64) -> Result<H2Report> {
    if radius <= 0.0 {
        return Err(Error::InvalidConfig("check_h2 requires radius > 0".into()));
    }
    let eig_at = |s: f64| -> (f64, f64) {
        let block = form.sphere_block_at(s);
        let eigs = block.symmetric_eigen().eigenvalues;
        let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = eigs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (min, max)
    };
    let (min_plus, _) = eig_at(radius);
    let (_, max_minus) = eig_at(-radius);
    let positive_at_plus = min_plus > 0.0;
    let negative_at_minus = max_minus < 0.0;
    Ok(H2Report {
        radius,
        min_eig_plus: min_plus,
        max_eig_minus: max_minus,
        positive_at_plus,
        negative_at_minus,
        passes: positive_at_plus && negative_at_minus,
    })
}
