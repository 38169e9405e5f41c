//! Microscale coefficient families.
//!
//! Every coefficient is built from trigonometric [`Profile`]s, so periodicity
//! on the unit cell `Y = [0,1]^d` holds by construction and all bounds that
//! the solvers and ergodic tests rely on (ellipticity, `sup|alpha|`, the
//! Lipschitz constant of `alpha` in `(eta1, eta2)`) are available in closed
//! form instead of being estimated.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wrap a coordinate into `[0, 1)`.
#[inline]
pub fn wrap_unit(y: f64) -> f64 {
    let w = y.rem_euclid(1.0);
    // rem_euclid can round up to exactly 1.0 for tiny negative inputs
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

fn check_in_cell(y: &[f64]) -> Result<()> {
    if y.iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::OutsideCell { point: y.to_vec() })
    }
}

/// One term `amp * sin(2 pi k.y + phase)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    pub amp: f64,
    pub k: Vec<i32>,
    #[serde(default)]
    pub phase: f64,
}

/// Trigonometric polynomial on the unit cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub mean: f64,
    #[serde(default)]
    pub terms: Vec<Harmonic>,
}

impl Profile {
    pub fn constant(c: f64) -> Self {
        Profile {
            mean: c,
            terms: Vec::new(),
        }
    }

    /// `mean + amp * sin(2 pi k.y)`.
    pub fn sine(mean: f64, amp: f64, k: Vec<i32>) -> Self {
        Profile {
            mean,
            terms: vec![Harmonic { amp, k, phase: 0.0 }],
        }
    }

    pub fn is_constant(&self) -> bool {
        self.terms.iter().all(|t| t.amp == 0.0 || t.k.iter().all(|&k| k == 0))
    }

    /// Evaluate at a point; coordinates are wrapped into the cell first so that
    /// `p(y) == p(y + e_i)` holds bitwise.
    pub fn eval(&self, y: &[f64]) -> f64 {
        let mut v = self.mean;
        for t in &self.terms {
            let mut arg = 0.0;
            for (k, &yi) in t.k.iter().zip(y) {
                arg += f64::from(*k) * wrap_unit(yi);
            }
            v += t.amp * (2.0 * PI * arg + t.phase).sin();
        }
        v
    }

    pub fn lower_bound(&self) -> f64 {
        self.mean - self.terms.iter().map(|t| t.amp.abs()).sum::<f64>()
    }

    pub fn upper_bound(&self) -> f64 {
        self.mean + self.terms.iter().map(|t| t.amp.abs()).sum::<f64>()
    }

    pub fn sup_abs(&self) -> f64 {
        self.lower_bound().abs().max(self.upper_bound().abs())
    }

    /// Exact cell average: only `k = 0` terms survive integration.
    pub fn cell_mean(&self) -> f64 {
        self.mean
            + self
                .terms
                .iter()
                .filter(|t| t.k.iter().all(|&k| k == 0))
                .map(|t| t.amp * t.phase.sin())
                .sum::<f64>()
    }

    fn max_wavenumber_len(&self) -> usize {
        self.terms.iter().map(|t| t.k.len()).max().unwrap_or(0)
    }
}

/// Small dense `d x d` matrix, `d <= 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmallMatrix {
    pub dim: usize,
    pub m: [[f64; 2]; 2],
}

impl SmallMatrix {
    pub fn zeros(dim: usize) -> Self {
        SmallMatrix {
            dim,
            m: [[0.0; 2]; 2],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::diag(dim, &[1.0, 1.0])
    }

    pub fn diag(dim: usize, d: &[f64]) -> Self {
        let mut out = Self::zeros(dim);
        for i in 0..dim {
            out.m[i][i] = d[i];
        }
        out
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if !(1..=2).contains(&dim) || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("tensor must be a square 1x1 or 2x2 matrix"));
        }
        let mut out = Self::zeros(dim);
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                out.m[i][j] = v;
            }
        }
        Ok(out)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[i][j]
    }

    pub fn transpose(&self) -> Self {
        let mut out = *self;
        for i in 0..self.dim {
            for j in 0..self.dim {
                out.m[i][j] = self.m[j][i];
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = *self;
        for row in out.m.iter_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                d = d.max((self.m[i][j] - other.m[i][j]).abs());
            }
        }
        d
    }

    /// Extreme eigenvalues of the symmetric part.
    pub fn sym_eig_range(&self) -> (f64, f64) {
        if self.dim == 1 {
            return (self.m[0][0], self.m[0][0]);
        }
        let a = self.m[0][0];
        let d = self.m[1][1];
        let b = 0.5 * (self.m[0][1] + self.m[1][0]);
        let mid = 0.5 * (a + d);
        let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
        (mid - rad, mid + rad)
    }

    pub fn quadratic_form(&self, xi: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                s += xi[i] * self.m[i][j] * xi[j];
            }
        }
        s
    }
}

/// Tensor-field specification on the unit cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TensorSpec {
    Identity { dim: usize },
    Constant { matrix: Vec<Vec<f64>> },
    Isotropic { dim: usize, profile: Profile },
    Diagonal { profiles: Vec<Profile> },
    Full { entries: Vec<Vec<Profile>> },
}

impl TensorSpec {
    pub fn dim(&self) -> usize {
        match self {
            TensorSpec::Identity { dim } | TensorSpec::Isotropic { dim, .. } => *dim,
            TensorSpec::Constant { matrix } => matrix.len(),
            TensorSpec::Diagonal { profiles } => profiles.len(),
            TensorSpec::Full { entries } => entries.len(),
        }
    }

    /// Structural check of shape and dimension.
    pub fn check(&self) -> Result<()> {
        let d = self.dim();
        if !(1..=2).contains(&d) {
            return Err(Error::invalid(format!("tensor dimension {d} not in {{1,2}}")));
        }
        let profiles: Vec<&Profile> = match self {
            TensorSpec::Identity { .. } => vec![],
            TensorSpec::Constant { matrix } => {
                SmallMatrix::from_rows(matrix)?;
                vec![]
            }
            TensorSpec::Isotropic { profile, .. } => vec![profile],
            TensorSpec::Diagonal { profiles } => profiles.iter().collect(),
            TensorSpec::Full { entries } => {
                if entries.iter().any(|r| r.len() != d) {
                    return Err(Error::invalid("full tensor must be square"));
                }
                entries.iter().flatten().collect()
            }
        };
        if profiles.iter().any(|p| p.max_wavenumber_len() > d) {
            return Err(Error::invalid("profile wavevector longer than cell dimension"));
        }
        Ok(())
    }

    pub fn is_symmetric(&self) -> bool {
        match self {
            TensorSpec::Constant { matrix } => match SmallMatrix::from_rows(matrix) {
                Ok(m) => m == m.transpose(),
                Err(_) => false,
            },
            TensorSpec::Full { entries } => {
                entries.len() < 2 || entries[0][1] == entries[1][0]
            }
            _ => true,
        }
    }

    /// Whether the tensor depends on `y` at all.
    pub fn is_constant(&self) -> bool {
        match self {
            TensorSpec::Identity { .. } | TensorSpec::Constant { .. } => true,
            TensorSpec::Isotropic { profile, .. } => profile.is_constant(),
            TensorSpec::Diagonal { profiles } => profiles.iter().all(Profile::is_constant),
            TensorSpec::Full { entries } => entries.iter().flatten().all(Profile::is_constant),
        }
    }

    /// Whether any off-diagonal entry can be nonzero.
    pub fn has_off_diagonal(&self) -> bool {
        match self {
            TensorSpec::Constant { matrix } => {
                matrix.len() == 2 && (matrix[0][1] != 0.0 || matrix[1][0] != 0.0)
            }
            TensorSpec::Full { entries } => {
                entries.len() == 2
                    && [&entries[0][1], &entries[1][0]]
                        .iter()
                        .any(|p| p.sup_abs() != 0.0)
            }
            _ => false,
        }
    }

    /// Adjoint tensor field `A*(y) = A(y)^T`.
    pub fn transpose(&self) -> TensorSpec {
        match self {
            TensorSpec::Constant { matrix } => {
                let d = matrix.len();
                let t = (0..d).map(|i| (0..d).map(|j| matrix[j][i]).collect()).collect();
                TensorSpec::Constant { matrix: t }
            }
            TensorSpec::Full { entries } => {
                let d = entries.len();
                let t = (0..d)
                    .map(|i| (0..d).map(|j| entries[j][i].clone()).collect())
                    .collect();
                TensorSpec::Full { entries: t }
            }
            other => other.clone(),
        }
    }

    /// Evaluate with periodic wrap; no domain check.
    pub fn eval_periodic(&self, y: &[f64]) -> SmallMatrix {
        let d = self.dim();
        match self {
            TensorSpec::Identity { .. } => SmallMatrix::identity(d),
            TensorSpec::Constant { matrix } => {
                SmallMatrix::from_rows(matrix).expect("checked at construction")
            }
            TensorSpec::Isotropic { profile, .. } => {
                let a = profile.eval(y);
                SmallMatrix::diag(d, &[a, a])
            }
            TensorSpec::Diagonal { profiles } => {
                let mut out = SmallMatrix::zeros(d);
                for (i, p) in profiles.iter().enumerate() {
                    out.m[i][i] = p.eval(y);
                }
                out
            }
            TensorSpec::Full { entries } => {
                let mut out = SmallMatrix::zeros(d);
                for (i, row) in entries.iter().enumerate() {
                    for (j, p) in row.iter().enumerate() {
                        out.m[i][j] = p.eval(y);
                    }
                }
                out
            }
        }
    }

    /// Evaluate `A(y)` for `y` in the closed unit cell.
    pub fn eval_tensor(&self, y: &[f64]) -> Result<SmallMatrix> {
        if y.len() != self.dim() {
            return Err(Error::invalid(format!(
                "point has {} coordinates, tensor dimension is {}",
                y.len(),
                self.dim()
            )));
        }
        check_in_cell(y)?;
        Ok(self.eval_periodic(y))
    }

    /// Analytic ellipticity bounds `(m, M)` of the symmetric part.
    pub fn ellipticity(&self) -> (f64, f64) {
        match self {
            TensorSpec::Identity { .. } => (1.0, 1.0),
            TensorSpec::Constant { matrix } => SmallMatrix::from_rows(matrix)
                .map(|m| m.sym_eig_range())
                .unwrap_or((f64::NAN, f64::NAN)),
            TensorSpec::Isotropic { profile, .. } => (profile.lower_bound(), profile.upper_bound()),
            TensorSpec::Diagonal { profiles } => (
                profiles.iter().map(Profile::lower_bound).fold(f64::INFINITY, f64::min),
                profiles.iter().map(Profile::upper_bound).fold(f64::NEG_INFINITY, f64::max),
            ),
            TensorSpec::Full { entries } => {
                let d = entries.len();
                let radius = if d == 2 {
                    0.5 * (entries[0][1].sup_abs() + entries[1][0].sup_abs())
                } else {
                    0.0
                };
                let lo = (0..d).map(|i| entries[i][i].lower_bound()).fold(f64::INFINITY, f64::min);
                let hi = (0..d)
                    .map(|i| entries[i][i].upper_bound())
                    .fold(f64::NEG_INFINITY, f64::max);
                (lo - radius, hi + radius)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaturationKind {
    One,
    Tanh,
    Sin,
}

/// Bounded Lipschitz ridge function `s(eta) = kind(a1 eta1 + a2 eta2 + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Saturation {
    pub kind: SaturationKind,
    #[serde(default)]
    pub a1: f64,
    #[serde(default)]
    pub a2: f64,
    #[serde(default)]
    pub b: f64,
}

impl Saturation {
    pub fn one() -> Self {
        Saturation {
            kind: SaturationKind::One,
            a1: 0.0,
            a2: 0.0,
            b: 0.0,
        }
    }

    pub fn tanh(a1: f64, a2: f64, b: f64) -> Self {
        Saturation {
            kind: SaturationKind::Tanh,
            a1,
            a2,
            b,
        }
    }

    pub fn sin(a1: f64, a2: f64, b: f64) -> Self {
        Saturation {
            kind: SaturationKind::Sin,
            a1,
            a2,
            b,
        }
    }

    #[inline]
    pub fn eval(&self, eta1: f64, eta2: f64) -> f64 {
        match self.kind {
            SaturationKind::One => 1.0,
            SaturationKind::Tanh => (self.a1 * eta1 + self.a2 * eta2 + self.b).tanh(),
            SaturationKind::Sin => (self.a1 * eta1 + self.a2 * eta2 + self.b).sin(),
        }
    }

    pub fn range(&self) -> (f64, f64) {
        match self.kind {
            SaturationKind::One => (1.0, 1.0),
            _ if self.a1 == 0.0 && self.a2 == 0.0 => {
                let v = self.eval(0.0, 0.0);
                (v, v)
            }
            _ => (-1.0, 1.0),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match self.kind {
            SaturationKind::One => 0.0,
            _ => self.a1.hypot(self.a2),
        }
    }

    pub fn is_constant(&self) -> bool {
        self.kind == SaturationKind::One || (self.a1 == 0.0 && self.a2 == 0.0)
    }
}

/// Exchange coefficient `alpha(y, eta1, eta2)`.
///
/// Every variant has the affine-product form `c0 + scale * g(y) * h(eta)`,
/// which [`AlphaSpec::factors`] exposes to the averaging code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlphaSpec {
    Constant { c: f64 },
    Separable { g: Profile, h: Saturation },
    SmoothMixed { c0: f64, c1: f64, p: Profile, s: Saturation },
}

/// `alpha(y, eta) = offset + scale * profile(y) * ridge(eta)`.
#[derive(Clone, Copy, Debug)]
pub struct AlphaFactors<'a> {
    pub offset: f64,
    pub scale: f64,
    pub profile: Option<&'a Profile>,
    pub ridge: Option<&'a Saturation>,
}

impl AlphaSpec {
    pub fn factors(&self) -> AlphaFactors<'_> {
        match self {
            AlphaSpec::Constant { c } => AlphaFactors {
                offset: *c,
                scale: 0.0,
                profile: None,
                ridge: None,
            },
            AlphaSpec::Separable { g, h } => AlphaFactors {
                offset: 0.0,
                scale: 1.0,
                profile: Some(g),
                ridge: Some(h),
            },
            AlphaSpec::SmoothMixed { c0, c1, p, s } => AlphaFactors {
                offset: *c0,
                scale: *c1,
                profile: Some(p),
                ridge: Some(s),
            },
        }
    }

    /// Evaluate with periodic wrap in `y`; no domain check.
    #[inline]
    pub fn eval_periodic(&self, y: &[f64], eta1: f64, eta2: f64) -> f64 {
        match self {
            AlphaSpec::Constant { c } => *c,
            AlphaSpec::Separable { g, h } => g.eval(y) * h.eval(eta1, eta2),
            AlphaSpec::SmoothMixed { c0, c1, p, s } => c0 + c1 * p.eval(y) * s.eval(eta1, eta2),
        }
    }

    pub fn eval_alpha(&self, y: &[f64], eta1: f64, eta2: f64) -> Result<f64> {
        check_in_cell(y)?;
        Ok(self.eval_periodic(y, eta1, eta2))
    }

    fn product_range(&self) -> (f64, f64) {
        let f = self.factors();
        let (Some(g), Some(h)) = (f.profile, f.ridge) else {
            return (0.0, 0.0);
        };
        let (glo, ghi) = (f.scale * g.lower_bound(), f.scale * g.upper_bound());
        let (hlo, hhi) = h.range();
        let corners = [glo * hlo, glo * hhi, ghi * hlo, ghi * hhi];
        (
            corners.iter().copied().fold(f64::INFINITY, f64::min),
            corners.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    }

    /// Analytic bound on `sup |alpha|`.
    pub fn bound(&self) -> f64 {
        let off = self.factors().offset;
        let (lo, hi) = self.product_range();
        (off + lo).abs().max((off + hi).abs())
    }

    /// Analytic Lipschitz constant in `(eta1, eta2)` (Euclidean norm).
    pub fn lipschitz(&self) -> f64 {
        let f = self.factors();
        match (f.profile, f.ridge) {
            (Some(g), Some(h)) => f.scale.abs() * g.sup_abs() * h.lipschitz(),
            _ => 0.0,
        }
    }

    pub fn lower_bound(&self) -> f64 {
        self.factors().offset + self.product_range().0
    }

    /// The family guarantees `alpha >= 0` everywhere.
    pub fn is_nonnegative(&self) -> bool {
        self.lower_bound() >= 0.0
    }

    pub fn is_y_independent(&self) -> bool {
        let f = self.factors();
        f.profile.is_none_or(Profile::is_constant) || f.scale == 0.0
    }

    pub fn is_eta_independent(&self) -> bool {
        let f = self.factors();
        f.ridge.is_none_or(Saturation::is_constant) || f.scale == 0.0
    }

    fn max_wavenumber_len(&self) -> usize {
        self.factors().profile.map_or(0, Profile::max_wavenumber_len)
    }
}

/// Space-time field `amp * prod_j sin(k_j pi x_j) * exp(-decay t)` on `D = [0,1]^d`,
/// or a constant, or zero. Used for forcing and initial data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldSpec {
    #[default]
    Zero,
    Constant {
        c: f64,
    },
    SineProduct {
        amp: f64,
        modes: Vec<u32>,
        #[serde(default)]
        decay: f64,
    },
}

impl FieldSpec {
    pub fn sine(amp: f64, modes: Vec<u32>, decay: f64) -> Self {
        FieldSpec::SineProduct { amp, modes, decay }
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            FieldSpec::Zero => 0.0,
            FieldSpec::Constant { c } => *c,
            FieldSpec::SineProduct { amp, modes, decay } => {
                let mut v = amp * (-decay * t).exp();
                for (k, xi) in modes.iter().zip(x) {
                    v *= (f64::from(*k) * PI * xi).sin();
                }
                v
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, FieldSpec::Zero)
            || matches!(self, FieldSpec::Constant { c } if *c == 0.0)
            || matches!(self, FieldSpec::SineProduct { amp, .. } if *amp == 0.0)
    }

    /// Vanishes on the boundary of the unit domain.
    pub fn satisfies_dirichlet(&self, dim: usize) -> bool {
        match self {
            FieldSpec::Zero => true,
            FieldSpec::Constant { c } => *c == 0.0,
            FieldSpec::SineProduct { amp, modes, .. } => {
                *amp == 0.0 || modes.len() == dim && modes.iter().all(|&k| k >= 1)
            }
        }
    }
}

/// Full microscale parameterization of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    pub a1: TensorSpec,
    pub a2: TensorSpec,
    pub alpha: AlphaSpec,
    #[serde(default)]
    pub f1: FieldSpec,
    #[serde(default)]
    pub f2: FieldSpec,
    /// Coupling matrix of the fast equations: `xi = beta * (u1, u2)`.
    pub beta: [[f64; 2]; 2],
}

impl CoefficientSet {
    pub fn new(a1: TensorSpec, a2: TensorSpec, alpha: AlphaSpec, beta: [[f64; 2]; 2]) -> Result<Self> {
        let set = CoefficientSet {
            a1,
            a2,
            alpha,
            f1: FieldSpec::Zero,
            f2: FieldSpec::Zero,
            beta,
        };
        set.check()?;
        Ok(set)
    }

    pub fn with_forcing(mut self, f1: FieldSpec, f2: FieldSpec) -> Self {
        self.f1 = f1;
        self.f2 = f2;
        self
    }

    pub fn check(&self) -> Result<()> {
        self.a1.check()?;
        self.a2.check()?;
        if self.a1.dim() != self.a2.dim() {
            return Err(Error::invalid("A1 and A2 have different dimensions"));
        }
        if self.alpha.max_wavenumber_len() > self.dim() {
            return Err(Error::invalid("alpha profile wavevector longer than cell dimension"));
        }
        for (i, t) in [&self.a1, &self.a2].iter().enumerate() {
            let (m, _) = t.ellipticity();
            if !(m > 0.0) {
                return Err(Error::NotPositiveDefinite {
                    location: format!("A{} (analytic lower bound)", i + 1),
                    min_eig: m,
                });
            }
        }
        if self.beta.iter().flatten().any(|b| !b.is_finite()) {
            return Err(Error::invalid("beta must be finite"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.a1.dim()
    }

    pub fn tensor(&self, continuum: usize) -> &TensorSpec {
        if continuum == 0 {
            &self.a1
        } else {
            &self.a2
        }
    }

    pub fn forcing(&self, continuum: usize) -> &FieldSpec {
        if continuum == 0 {
            &self.f1
        } else {
            &self.f2
        }
    }

    /// `(m, M)` for continuum `i` (0-based).
    pub fn ellipticity(&self, continuum: usize) -> (f64, f64) {
        self.tensor(continuum).ellipticity()
    }

    pub fn alpha_bound(&self) -> f64 {
        self.alpha.bound()
    }

    pub fn alpha_lip(&self) -> f64 {
        self.alpha.lipschitz()
    }

    /// `(xi1, xi2) = beta (u1, u2)`.
    #[inline]
    pub fn couple(&self, u1: f64, u2: f64) -> (f64, f64) {
        (
            self.beta[0][0] * u1 + self.beta[0][1] * u2,
            self.beta[1][0] * u1 + self.beta[1][1] * u2,
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub samples: usize,
    /// Empirical Rayleigh-quotient range of A1, A2.
    pub rayleigh: [(f64, f64); 2],
    /// Analytic ellipticity bounds used for the check.
    pub declared: [(f64, f64); 2],
    pub alpha_sup: f64,
    pub alpha_bound: f64,
    pub alpha_lip_quotient: f64,
    pub alpha_lip: f64,
    pub alpha_min: f64,
    pub periodicity_residual: f64,
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

const ELLIPTICITY_SLACK: f64 = 1e-12;

/// Sample the coefficient set densely and compare against its analytic constants.
///
/// Ellipticity violations are errors; the remaining checks are reported in
/// [`ValidationReport::violations`].
pub fn validate(set: &CoefficientSet, samples: usize, seed: u64) -> Result<ValidationReport> {
    if samples == 0 {
        return Err(Error::invalid("validate needs at least one sample"));
    }
    set.check()?;
    let d = set.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = ValidationReport {
        samples,
        rayleigh: [(f64::INFINITY, f64::NEG_INFINITY); 2],
        declared: [set.ellipticity(0), set.ellipticity(1)],
        alpha_bound: set.alpha_bound(),
        alpha_lip: set.alpha_lip(),
        alpha_min: f64::INFINITY,
        ..Default::default()
    };
    let eta_range = 6.0;
    let mut y = vec![0.0; d];
    let mut xi = vec![0.0; d];
    for _ in 0..samples {
        for v in y.iter_mut() {
            *v = rng.random::<f64>();
        }
        let theta = rng.random::<f64>() * 2.0 * PI;
        xi[0] = theta.cos();
        if d == 2 {
            xi[1] = theta.sin();
        } else {
            xi[0] = 1.0;
        }
        for c in 0..2 {
            let a = set.tensor(c).eval_periodic(&y);
            let q = a.quadratic_form(&xi);
            let (lo, hi) = &mut rep.rayleigh[c];
            *lo = lo.min(q);
            *hi = hi.max(q);
            let (m, big_m) = rep.declared[c];
            if q < m - ELLIPTICITY_SLACK || q > big_m + ELLIPTICITY_SLACK {
                return Err(Error::Validation(format!(
                    "A{} violates ellipticity at y={:?}: quotient {q} outside [{m}, {big_m}]",
                    c + 1,
                    y
                )));
            }
        }
        let (e1, e2) = (
            eta_range * (2.0 * rng.random::<f64>() - 1.0),
            eta_range * (2.0 * rng.random::<f64>() - 1.0),
        );
        let (f1, f2) = (
            eta_range * (2.0 * rng.random::<f64>() - 1.0),
            eta_range * (2.0 * rng.random::<f64>() - 1.0),
        );
        let va = set.alpha.eval_periodic(&y, e1, e2);
        let vb = set.alpha.eval_periodic(&y, f1, f2);
        rep.alpha_sup = rep.alpha_sup.max(va.abs()).max(vb.abs());
        rep.alpha_min = rep.alpha_min.min(va).min(vb);
        let dist = (e1 - f1).hypot(e2 - f2);
        if dist > 0.0 {
            rep.alpha_lip_quotient = rep.alpha_lip_quotient.max((va - vb).abs() / dist);
        }
        // boundary pairs y_i = 0 <-> y_i = 1
        for axis in 0..d {
            let mut lo = y.clone();
            let mut hi = y.clone();
            lo[axis] = 0.0;
            hi[axis] = 1.0;
            for c in 0..2 {
                let t = set.tensor(c);
                let r = t.eval_periodic(&lo).max_abs_diff(&t.eval_periodic(&hi));
                rep.periodicity_residual = rep.periodicity_residual.max(r);
            }
            let r = (set.alpha.eval_periodic(&lo, e1, e2) - set.alpha.eval_periodic(&hi, e1, e2)).abs();
            rep.periodicity_residual = rep.periodicity_residual.max(r);
        }
    }
    let tol = 1e-12 * (1.0 + rep.alpha_bound);
    if rep.alpha_sup > rep.alpha_bound + tol {
        rep.violations
            .push(format!("sup|alpha| = {} exceeds bound {}", rep.alpha_sup, rep.alpha_bound));
    }
    if rep.alpha_lip_quotient > rep.alpha_lip + 1e-9 {
        rep.violations.push(format!(
            "Lipschitz quotient {} exceeds constant {}",
            rep.alpha_lip_quotient, rep.alpha_lip
        ));
    }
    if set.alpha.is_nonnegative() && rep.alpha_min < 0.0 {
        rep.violations
            .push(format!("nonnegative family returned {}", rep.alpha_min));
    }
    if rep.periodicity_residual != 0.0 {
        rep.violations
            .push(format!("periodicity residual {}", rep.periodicity_residual));
    }
    Ok(rep)
}

/// Ready-made coefficient families used by tests, benches and the default configs.
pub mod families {
    use super::*;

    /// `2 + sin(2 pi y_1)`.
    pub fn oscillating_profile() -> Profile {
        Profile::sine(2.0, 1.0, vec![1])
    }

    pub fn identity_set(dim: usize) -> CoefficientSet {
        CoefficientSet::new(
            TensorSpec::Identity { dim },
            TensorSpec::Identity { dim },
            AlphaSpec::Constant { c: 1.0 },
            [[1.0, 0.0], [0.0, 1.0]],
        )
        .expect("valid")
    }

    /// Layered medium `diag(a(y1), a(y1))` with `a = 2 + sin(2 pi y1)`.
    pub fn laminate(dim: usize) -> TensorSpec {
        TensorSpec::Isotropic {
            dim,
            profile: oscillating_profile(),
        }
    }

    /// Nonnegative, y- and eta-dependent exchange coefficient.
    pub fn mixed_alpha() -> AlphaSpec {
        AlphaSpec::SmoothMixed {
            c0: 2.0,
            c1: 1.0,
            p: Profile::sine(1.0, 0.5, vec![1]),
            s: Saturation::tanh(1.0, -1.0, 0.0),
        }
    }

    /// Every shipped alpha family.
    pub fn alpha_families() -> Vec<(&'static str, AlphaSpec)> {
        vec![
            ("constant", AlphaSpec::Constant { c: 0.7 }),
            (
                "separable",
                AlphaSpec::Separable {
                    g: Profile::sine(1.0, 0.5, vec![1]),
                    h: Saturation::tanh(1.0, 0.5, 0.2),
                },
            ),
            (
                "separable_sin",
                AlphaSpec::Separable {
                    g: Profile::constant(1.0),
                    h: Saturation::sin(1.0, 0.0, 0.0),
                },
            ),
            ("mixed", mixed_alpha()),
            (
                "mixed_tanh",
                AlphaSpec::SmoothMixed {
                    c0: 0.5,
                    c1: 0.25,
                    p: Profile::sine(0.0, 1.0, vec![1]),
                    s: Saturation::tanh(1.0, 0.0, 0.0),
                },
            ),
        ]
    }

    /// Every shipped tensor family in dimension `dim`.
    pub fn tensor_families(dim: usize) -> Vec<(&'static str, TensorSpec)> {
        let mut out = vec![
            ("identity", TensorSpec::Identity { dim }),
            ("laminate", laminate(dim)),
            (
                "soft",
                TensorSpec::Isotropic {
                    dim,
                    profile: Profile::sine(1.0, 0.5, vec![1]),
                },
            ),
        ];
        if dim == 2 {
            out.push((
                "checker",
                TensorSpec::Isotropic {
                    dim,
                    profile: Profile {
                        mean: 2.0,
                        terms: vec![
                            Harmonic { amp: 0.5, k: vec![1, 0], phase: 0.0 },
                            Harmonic { amp: 0.5, k: vec![0, 1], phase: 0.3 },
                        ],
                    },
                },
            ));
            out.push((
                "anisotropic",
                TensorSpec::Full {
                    entries: vec![
                        vec![Profile::sine(2.0, 0.5, vec![1, 0]), Profile::sine(0.0, 0.3, vec![0, 1])],
                        vec![Profile::sine(0.0, 0.3, vec![0, 1]), Profile::sine(1.5, 0.4, vec![1, 1])],
                    ],
                },
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::families::*;
    use super::*;

    #[test]
    fn identity_tensor_everywhere() {
        let t = TensorSpec::Identity { dim: 2 };
        assert_eq!(t.eval_tensor(&[0.3, 0.7]).unwrap(), SmallMatrix::identity(2));
    }

    #[test]
    fn sinusoid_quarter_point() {
        let t = laminate(1);
        let a = t.eval_tensor(&[0.25]).unwrap();
        assert!((a.get(0, 0) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn laminate_ignores_second_coordinate() {
        let a = laminate(2).eval_tensor(&[0.25, 0.9]).unwrap();
        assert!((a.get(0, 0) - 3.0).abs() < 1e-15);
        assert!((a.get(1, 1) - 3.0).abs() < 1e-15);
        assert_eq!(a.get(0, 1), 0.0);
    }

    #[test]
    fn eval_tensor_rejects_outside_points() {
        assert!(matches!(
            laminate(1).eval_tensor(&[1.2]),
            Err(Error::OutsideCell { .. })
        ));
        assert!(laminate(1).eval_tensor(&[-0.01]).is_err());
        assert!(laminate(1).eval_tensor(&[1.0]).is_ok());
    }

    #[test]
    fn alpha_examples() {
        let c = AlphaSpec::Constant { c: 0.7 };
        assert_eq!(c.eval_alpha(&[0.3], 4.0, -2.0).unwrap(), 0.7);

        let sep = AlphaSpec::Separable {
            g: Profile::sine(1.0, 0.5, vec![1]),
            h: Saturation::one(),
        };
        assert_eq!(sep.eval_alpha(&[0.0], 1.0, 1.0).unwrap(), 1.0);

        let mixed = AlphaSpec::SmoothMixed {
            c0: 0.5,
            c1: 0.25,
            p: Profile::sine(0.0, 1.0, vec![1]),
            s: Saturation::tanh(1.0, 0.0, 0.0),
        };
        let v = mixed.eval_alpha(&[0.25], 20.0, 0.0).unwrap();
        assert!((v - 0.75).abs() < 1e-8, "{v}");
        assert!(mixed.eval_alpha(&[2.0], 0.0, 0.0).is_err());
    }

    #[test]
    fn validate_identity_constant() {
        let rep = validate(&identity_set(2), 1000, 1).unwrap();
        assert!(rep.passed(), "{:?}", rep.violations);
        for c in 0..2 {
            assert!((rep.rayleigh[c].0 - 1.0).abs() < 1e-15);
            assert!((rep.rayleigh[c].1 - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn validate_sinusoid_range() {
        let set = CoefficientSet::new(laminate(1), laminate(1), AlphaSpec::Constant { c: 0.0 }, [[1.0, 0.0], [0.0, 1.0]])
            .unwrap();
        let rep = validate(&set, 5000, 2).unwrap();
        assert!(rep.rayleigh[0].0 >= 1.0 && rep.rayleigh[0].1 <= 3.0);
        assert!(rep.passed());
    }

    #[test]
    fn validate_tanh_lipschitz() {
        let set = CoefficientSet::new(
            laminate(1),
            laminate(1),
            AlphaSpec::Separable {
                g: Profile::constant(1.0),
                h: Saturation::tanh(1.0, 0.0, 0.0),
            },
            [[1.0, 0.0], [0.0, 1.0]],
        )
        .unwrap();
        let rep = validate(&set, 10_000, 3).unwrap();
        assert!(rep.alpha_lip_quotient <= 1.0 + 1e-9);
        assert_eq!(rep.alpha_lip, 1.0);
    }

    #[test]
    fn validate_fails_loudly_on_bad_declared_bounds() {
        // declared (analytic) bounds are exact for isotropic profiles, so fake a
        // violation with a constant matrix whose symmetric part is indefinite
        let bad = TensorSpec::Constant {
            matrix: vec![vec![1.0, 3.0], vec![3.0, 1.0]],
        };
        let set = CoefficientSet {
            a1: bad.clone(),
            a2: bad,
            alpha: AlphaSpec::Constant { c: 1.0 },
            f1: FieldSpec::Zero,
            f2: FieldSpec::Zero,
            beta: [[1.0, 0.0], [0.0, 1.0]],
        };
        assert!(validate(&set, 100, 0).is_err());
    }

    #[test]
    fn shipped_families_validate_clean() {
        for dim in [1, 2] {
            for (tname, t) in tensor_families(dim) {
                for (aname, a) in alpha_families() {
                    let set = CoefficientSet::new(t.clone(), t.clone(), a, [[1.0, 0.5], [-0.5, 1.0]]).unwrap();
                    let rep = validate(&set, 10_000, 7).unwrap();
                    assert!(rep.passed(), "{tname}/{aname}: {:?}", rep.violations);
                    assert_eq!(rep.periodicity_residual, 0.0);
                }
            }
        }
    }

    #[test]
    fn nonneg_flag_matches_family() {
        assert!(mixed_alpha().is_nonnegative());
        let signed = AlphaSpec::Separable {
            g: Profile::constant(1.0),
            h: Saturation::sin(1.0, 0.0, 0.0),
        };
        assert!(!signed.is_nonnegative());
    }

    #[test]
    fn transpose_of_full_tensor() {
        let t = TensorSpec::Full {
            entries: vec![
                vec![Profile::constant(2.0), Profile::constant(0.3)],
                vec![Profile::constant(-0.1), Profile::constant(1.0)],
            ],
        };
        assert!(!t.is_symmetric());
        let tt = t.transpose();
        let y = [0.1, 0.2];
        assert_eq!(tt.eval_periodic(&y), t.eval_periodic(&y).transpose());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn alpha_within_bound_and_lipschitz(
                y in 0.0f64..=1.0, e1 in -50.0f64..50.0, e2 in -50.0f64..50.0,
                f1 in -50.0f64..50.0, f2 in -50.0f64..50.0, which in 0usize..5,
            ) {
                let (_, a) = alpha_families().swap_remove(which);
                let va = a.eval_periodic(&[y], e1, e2);
                let vb = a.eval_periodic(&[y], f1, f2);
                prop_assert!(va.abs() <= a.bound() + 1e-12);
                let dist = (e1 - f1).hypot(e2 - f2);
                prop_assert!((va - vb).abs() <= a.lipschitz() * dist + 1e-12);
                if a.is_nonnegative() {
                    prop_assert!(va >= 0.0);
                }
            }

            #[test]
            fn profiles_are_periodic(y in -3.0f64..3.0, k in -4i32..4, shift in -3i32..3) {
                let p = Profile::sine(1.0, 0.7, vec![k]);
                let a = p.eval(&[wrap_unit(y)]);
                let b = p.eval(&[wrap_unit(y) + f64::from(shift)]);
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
