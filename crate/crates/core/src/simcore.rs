//! The generalized similarity measure.
//!
//! Three equivalent evaluation routes are provided:
//!
//! - [`score_block`] evaluates the assembled quadratic form directly,
//! - [`score_factorized`] evaluates it from the learned factors,
//! - [`score_projected`] evaluates it from cached per-sample projections, so
//!   that gallery samples can be projected once and matched many times.
//!
//! All scores follow the convention that lower means more similar.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Domain, Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Bias used in the default model; only affects convergence, not ranking.
pub const DEFAULT_F: f64 = -1.9;

/// Tolerance on the smallest eigenvalue when checking positive semi-definiteness.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// Factorized parameters `(L_A, L_B, L_Cx, L_Cy, d, e, f)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityComponents {
    pub l_a: Matrix,
    pub l_b: Matrix,
    pub l_cx: Matrix,
    pub l_cy: Matrix,
    pub d: Vector,
    pub e: Vector,
    /// Fixed during training.
    pub f: f64,
}

impl SimilarityComponents {
    pub fn new(
        l_a: Matrix,
        l_b: Matrix,
        l_cx: Matrix,
        l_cy: Matrix,
        d: Vector,
        e: Vector,
        f: f64,
    ) -> Result<Self> {
        let phi = SimilarityComponents {
            l_a,
            l_b,
            l_cx,
            l_cy,
            d,
            e,
            f,
        };
        phi.validate()?;
        Ok(phi)
    }

    pub fn zeros(r: usize, f: f64) -> Self {
        SimilarityComponents {
            l_a: Matrix::zeros(r, r),
            l_b: Matrix::zeros(r, r),
            l_cx: Matrix::zeros(r, r),
            l_cy: Matrix::zeros(r, r),
            d: Vector::zeros(r),
            e: Vector::zeros(r),
            f,
        }
    }

    /// All four factors set to the identity, zero shifts.
    pub fn identity(r: usize, f: f64) -> Self {
        SimilarityComponents {
            l_a: Matrix::identity(r, r),
            l_b: Matrix::identity(r, r),
            l_cx: Matrix::identity(r, r),
            l_cy: Matrix::identity(r, r),
            d: Vector::zeros(r),
            e: Vector::zeros(r),
            f,
        }
    }

    pub fn dim(&self) -> usize {
        self.d.len()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.d.len();
        for (name, m) in self.matrices() {
            check_square(name, m, r)?;
        }
        check_len("e", &self.e, r)?;
        let finite = self
            .matrices()
            .iter()
            .all(|(_, m)| m.iter().all(|v| v.is_finite()))
            && self.d.iter().chain(self.e.iter()).all(|v| v.is_finite())
            && self.f.is_finite();
        if !finite {
            return Err(Error::NonFinite("similarity components".into()));
        }
        Ok(())
    }

    fn matrices(&self) -> [(&'static str, &Matrix); 4] {
        [
            ("l_a", &self.l_a),
            ("l_b", &self.l_b),
            ("l_cx", &self.l_cx),
            ("l_cy", &self.l_cy),
        ]
    }

    /// Squared norm of every trainable entry (`f` excluded).
    pub fn trainable_norm_sq(&self) -> f64 {
        self.matrices()
            .iter()
            .map(|(_, m)| m.norm_squared())
            .sum::<f64>()
            + self.d.norm_squared()
            + self.e.norm_squared()
    }

    /// Trainable entries as mutable slices in a fixed order:
    /// `l_a, l_b, l_cx, l_cy, d, e`.
    pub fn trainable_slices_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.l_a.as_mut_slice(),
            self.l_b.as_mut_slice(),
            self.l_cx.as_mut_slice(),
            self.l_cy.as_mut_slice(),
            self.d.as_mut_slice(),
            self.e.as_mut_slice(),
        ]
    }

    pub fn trainable_slices(&self) -> [&[f64]; 6] {
        [
            self.l_a.as_slice(),
            self.l_b.as_slice(),
            self.l_cx.as_slice(),
            self.l_cy.as_slice(),
            self.d.as_slice(),
            self.e.as_slice(),
        ]
    }
}

/// The assembled `(A, B, C, d, e, f)` form.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatrix {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub d: Vector,
    pub e: Vector,
    pub f: f64,
}

impl BlockMatrix {
    pub fn dim(&self) -> usize {
        self.d.len()
    }

    fn validate(&self) -> Result<()> {
        let r = self.d.len();
        check_square("a", &self.a, r)?;
        check_square("b", &self.b, r)?;
        check_square("c", &self.c, r)?;
        check_len("e", &self.e, r)
    }

    /// The full symmetric `(2r+1)×(2r+1)` matrix `[[A, C, d], [Cᵀ, B, e], [dᵀ, eᵀ, f]]`.
    pub fn full(&self) -> Matrix {
        let r = self.dim();
        let n = 2 * r + 1;
        let mut s = Matrix::zeros(n, n);
        s.view_mut((0, 0), (r, r)).copy_from(&self.a);
        s.view_mut((0, r), (r, r)).copy_from(&self.c);
        s.view_mut((r, 0), (r, r)).copy_from(&self.c.transpose());
        s.view_mut((r, r), (r, r)).copy_from(&self.b);
        s.view_mut((0, 2 * r), (r, 1)).copy_from(&self.d);
        s.view_mut((r, 2 * r), (r, 1)).copy_from(&self.e);
        s.view_mut((2 * r, 0), (1, r)).copy_from(&self.d.transpose());
        s.view_mut((2 * r, r), (1, r)).copy_from(&self.e.transpose());
        s[(2 * r, 2 * r)] = self.f;
        s
    }
}

/// Weighted fusion of an affine Mahalanobis distance and an affine Cosine
/// similarity: `mu·D_M − lambda·S_I`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineFusionSpec {
    pub mu: f64,
    pub lambda: f64,
    /// Mahalanobis map for the x domain, `L_A x + a`.
    pub l_a_m: Matrix,
    pub a_m: Vector,
    /// Mahalanobis map for the y domain, `L_B y + b`.
    pub l_b_m: Matrix,
    pub b_m: Vector,
    /// Cosine map for the x domain.
    pub l_a_c: Matrix,
    pub a_c: Vector,
    /// Cosine map for the y domain.
    pub l_b_c: Matrix,
    pub b_c: Vector,
}

impl AffineFusionSpec {
    pub fn dim(&self) -> usize {
        self.a_m.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0) {
            return Err(Error::param("mu", format!("must be >= 0, got {}", self.mu)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::param(
                "lambda",
                format!("must be >= 0, got {}", self.lambda),
            ));
        }
        let r = self.dim();
        check_square("l_a_m", &self.l_a_m, r)?;
        check_square("l_b_m", &self.l_b_m, r)?;
        check_square("l_a_c", &self.l_a_c, r)?;
        check_square("l_b_c", &self.l_b_c, r)?;
        check_len("b_m", &self.b_m, r)?;
        check_len("a_c", &self.a_c, r)?;
        check_len("b_c", &self.b_c, r)
    }
}

/// Per-sample projection `[L·f | L_C·f | shiftᵀf]` of length `2r+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedComponents {
    values: Vector,
}

impl ProjectedComponents {
    pub fn from_vector(values: Vector) -> Result<Self> {
        if values.len() % 2 == 0 {
            return Err(Error::dim("projected components", values.len() + 1, values.len()));
        }
        Ok(ProjectedComponents { values })
    }

    pub fn r(&self) -> usize {
        (self.values.len() - 1) / 2
    }

    pub fn as_vector(&self) -> &Vector {
        &self.values
    }

    /// The `L·f` part (selector `P1`).
    pub fn quadratic(&self) -> &[f64] {
        &self.values.as_slice()[..self.r()]
    }

    /// The `L_C·f` part (selector `P2`).
    pub fn cross(&self) -> &[f64] {
        let r = self.r();
        &self.values.as_slice()[r..2 * r]
    }

    /// The `shiftᵀf` scalar (selector `p3`).
    pub fn linear(&self) -> f64 {
        self.values[2 * self.r()]
    }
}

fn check_len(name: &str, v: &Vector, r: usize) -> Result<()> {
    if v.len() != r {
        return Err(Error::dim(name, r, v.len()));
    }
    Ok(())
}

fn check_square(name: &str, m: &Matrix, r: usize) -> Result<()> {
    if m.nrows() != r {
        return Err(Error::dim(format!("{name} (rows)"), r, m.nrows()));
    }
    if m.ncols() != r {
        return Err(Error::dim(format!("{name} (cols)"), r, m.ncols()));
    }
    Ok(())
}

/// Fails unless `m` is symmetric with smallest eigenvalue ≥ `-PSD_TOLERANCE`.
pub fn check_psd(name: &str, m: &Matrix) -> Result<()> {
    if !m.is_square() {
        return Err(Error::dim(format!("{name} (cols)"), m.nrows(), m.ncols()));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::param(name, "matrix is not symmetric"));
    }
    if m.nrows() == 0 {
        return Ok(());
    }
    let min = SymmetricEigen::new(m.clone()).eigenvalues.min();
    if min < -PSD_TOLERANCE {
        return Err(Error::NotPsd {
            name: name.to_string(),
            min_eigenvalue: min,
        });
    }
    Ok(())
}

/// `‖L_A fx‖² + ‖L_B fy‖² + 2dᵀfx − 2(L_Cx fx)ᵀ(L_Cy fy) + 2eᵀfy + f`.
///
/// Not symmetric in its arguments: `fx` always goes through the x-domain
/// factors.
pub fn score_factorized(phi: &SimilarityComponents, fx: &Vector, fy: &Vector) -> Result<f64> {
    let r = phi.dim();
    check_len("fx", fx, r)?;
    check_len("fy", fy, r)?;
    let ax = &phi.l_a * fx;
    let by = &phi.l_b * fy;
    let cx = &phi.l_cx * fx;
    let cy = &phi.l_cy * fy;
    Ok(ax.norm_squared() + by.norm_squared() + 2.0 * phi.d.dot(fx) - 2.0 * cx.dot(&cy)
        + 2.0 * phi.e.dot(fy)
        + phi.f)
}

/// `A = L_AᵀL_A`, `B = L_BᵀL_B`, `C = −L_CxᵀL_Cy`; shifts copied.
pub fn assemble_block(phi: &SimilarityComponents) -> Result<BlockMatrix> {
    phi.validate()?;
    let mut a = phi.l_a.tr_mul(&phi.l_a);
    let mut b = phi.l_b.tr_mul(&phi.l_b);
    // Exact symmetry; the product is symmetric only up to rounding.
    symmetrize(&mut a);
    symmetrize(&mut b);
    Ok(BlockMatrix {
        a,
        b,
        c: -phi.l_cx.tr_mul(&phi.l_cy),
        d: phi.d.clone(),
        e: phi.e.clone(),
        f: phi.f,
    })
}

fn symmetrize(m: &mut Matrix) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// `xᵀAx + yᵀBy + 2xᵀCy + 2dᵀx + 2eᵀy + f`.
pub fn score_block(m: &BlockMatrix, x: &Vector, y: &Vector) -> Result<f64> {
    m.validate()?;
    let r = m.dim();
    check_len("x", x, r)?;
    check_len("y", y, r)?;
    Ok(x.dot(&(&m.a * x))
        + y.dot(&(&m.b * y))
        + 2.0 * x.dot(&(&m.c * y))
        + 2.0 * m.d.dot(x)
        + 2.0 * m.e.dot(y)
        + m.f)
}

/// `‖(L_A x + a) − (L_B y + b)‖²`.
pub fn affine_mahalanobis(spec: &AffineFusionSpec, x: &Vector, y: &Vector) -> Result<f64> {
    spec.validate()?;
    check_len("x", x, spec.dim())?;
    check_len("y", y, spec.dim())?;
    let u = &spec.l_a_m * x + &spec.a_m;
    let v = &spec.l_b_m * y + &spec.b_m;
    Ok((u - v).norm_squared())
}

/// `(L̂_A x + â)ᵀ(L̂_B y + b̂)`.
pub fn affine_cosine(spec: &AffineFusionSpec, x: &Vector, y: &Vector) -> Result<f64> {
    spec.validate()?;
    check_len("x", x, spec.dim())?;
    check_len("y", y, spec.dim())?;
    let u = &spec.l_a_c * x + &spec.a_c;
    let v = &spec.l_b_c * y + &spec.b_c;
    Ok(u.dot(&v))
}

/// Block form of `mu·D_M − lambda·S_I`.
pub fn compose_from_affine(spec: &AffineFusionSpec) -> Result<BlockMatrix> {
    spec.validate()?;
    let (mu, lambda) = (spec.mu, spec.lambda);
    let shift = &spec.a_m - &spec.b_m;

    let mut a = spec.l_a_m.tr_mul(&spec.l_a_m) * mu;
    let mut b = spec.l_b_m.tr_mul(&spec.l_b_m) * mu;
    symmetrize(&mut a);
    symmetrize(&mut b);
    let c = -(spec.l_a_m.tr_mul(&spec.l_b_m) * mu) - spec.l_a_c.tr_mul(&spec.l_b_c) * (lambda / 2.0);
    let d = spec.l_a_m.tr_mul(&shift) * mu - spec.l_a_c.tr_mul(&spec.b_c) * (lambda / 2.0);
    let e = -(spec.l_b_m.tr_mul(&shift) * mu) - spec.l_b_c.tr_mul(&spec.a_c) * (lambda / 2.0);
    let f = mu * shift.norm_squared() - lambda * spec.a_c.dot(&spec.b_c);
    Ok(BlockMatrix { a, b, c, d, e, f })
}

/// Mahalanobis distance `(x−y)ᵀM(x−y)`: `A = B = M`, `C = −M`.
pub fn make_mahalanobis(m: &Matrix) -> Result<BlockMatrix> {
    check_psd("m", m)?;
    let r = m.nrows();
    Ok(BlockMatrix {
        a: m.clone(),
        b: m.clone(),
        c: -m,
        d: Vector::zeros(r),
        e: Vector::zeros(r),
        f: 0.0,
    })
}

/// Bilinear similarity `xᵀMy`: `A = B = 0`, `C = M/2`.
///
/// Note that a larger bilinear similarity yields a larger score here, so the
/// lower-is-more-similar ranking convention does not apply to this form.
pub fn make_bilinear(m: &Matrix) -> Result<BlockMatrix> {
    if !m.is_square() {
        return Err(Error::dim("m (cols)", m.nrows(), m.ncols()));
    }
    let r = m.nrows();
    Ok(BlockMatrix {
        a: Matrix::zeros(r, r),
        b: Matrix::zeros(r, r),
        c: m * 0.5,
        d: Vector::zeros(r),
        e: Vector::zeros(r),
        f: 0.0,
    })
}

/// Locally-adaptive decision function
/// `xᵀAx + yᵀAy + 2xᵀCy + dᵀ(x+y) + f`.
///
/// The block form doubles its linear terms, so `d/2` is stored in both the
/// `d` and `e` slots to reproduce the single `dᵀ(x+y)` term.
pub fn make_ladf(a: &Matrix, c: &Matrix, d: &Vector, f: f64) -> Result<BlockMatrix> {
    check_psd("a", a)?;
    let r = a.nrows();
    check_square("c", c, r)?;
    check_len("d", d, r)?;
    let half = d * 0.5;
    Ok(BlockMatrix {
        a: a.clone(),
        b: a.clone(),
        c: c.clone(),
        d: half.clone(),
        e: half,
        f,
    })
}

/// Joint Bayesian decision function `xᵀAx + yᵀAy − 2xᵀGy`.
pub fn make_joint_bayesian(a: &Matrix, g: &Matrix) -> Result<BlockMatrix> {
    check_psd("a", a)?;
    let r = a.nrows();
    check_square("g", g, r)?;
    Ok(BlockMatrix {
        a: a.clone(),
        b: a.clone(),
        c: -g,
        d: Vector::zeros(r),
        e: Vector::zeros(r),
        f: 0.0,
    })
}

/// `[L_A f; L_Cx f; dᵀf]` for domain X, `[L_B f; L_Cy f; eᵀf]` for domain Y.
pub fn project_components(
    phi: &SimilarityComponents,
    feature: &Vector,
    domain: Domain,
) -> Result<ProjectedComponents> {
    let r = phi.dim();
    check_len("feature", feature, r)?;
    let (l, l_c, shift) = match domain {
        Domain::X => (&phi.l_a, &phi.l_cx, &phi.d),
        Domain::Y => (&phi.l_b, &phi.l_cy, &phi.e),
    };
    let mut values = Vector::zeros(2 * r + 1);
    values.rows_mut(0, r).copy_from(&(l * feature));
    values.rows_mut(r, r).copy_from(&(l_c * feature));
    values[2 * r] = shift.dot(feature);
    Ok(ProjectedComponents { values })
}

/// Score from cached projections of an x-domain and a y-domain sample.
pub fn score_projected(px: &ProjectedComponents, py: &ProjectedComponents, f: f64) -> Result<f64> {
    if px.values.len() != py.values.len() {
        return Err(Error::dim("py", px.values.len(), py.values.len()));
    }
    let sq = |s: &[f64]| s.iter().map(|v| v * v).sum::<f64>();
    let cross: f64 = px.cross().iter().zip(py.cross()).map(|(a, b)| a * b).sum();
    Ok(sq(px.quadratic()) + sq(py.quadratic()) - 2.0 * cross
        + 2.0 * px.linear()
        + 2.0 * py.linear()
        + f)
}
