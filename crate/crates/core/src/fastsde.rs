//! Fast Ornstein-Uhlenbeck pair driven by trace-class spectral noise.
//!
//! Each fast variable is stored as a nodal mean part `m` plus a fluctuation
//! `z` in the Dirichlet sine basis, `v = m + sum_k z_k e_k`. For a frozen
//! relaxation target `xi` over a step of length `dt` the update
//!
//! ```text
//! m   <- xi + (m - xi) r
//! z_k <- z_k r + sqrt(c_k (1 - r^2)) g_k,      r = exp(-dt / eps)
//! ```
//!
//! is exact in law, with `c_k` the stationary variance of mode `k`
//! (`lambda_k / 2` by default). The mean lives on the nodes so `xi` is
//! relaxed towards without being projected onto the truncated basis.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Boundary, FieldPair, Mesh, ScalarField};
use crate::rng::{self, Role, StreamRng};

/// Stationary covariance of a mode with noise eigenvalue `lambda`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvariantCovariance {
    /// `lambda / 2`, the Lyapunov balance of `dv = -(v - xi) dt + sqrt(Q) dW`.
    #[default]
    HalfQ,
    /// `lambda`.
    Q,
}

impl InvariantCovariance {
    fn factor(self) -> f64 {
        match self {
            InvariantCovariance::HalfQ => 0.5,
            InvariantCovariance::Q => 1.0,
        }
    }
}

/// Config-level description of the two noise spectra.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Amplitudes `sigma_1, sigma_2`.
    #[serde(default = "default_sigma")]
    pub sigma: [f64; 2],
    /// Decay exponent; `2` in 1D and `3` in 2D when omitted.
    #[serde(default)]
    pub exponent: Option<f64>,
    /// Modes per dimension.
    #[serde(default = "default_modes")]
    pub modes: usize,
    #[serde(default)]
    pub invariant_covariance: InvariantCovariance,
}

fn default_sigma() -> [f64; 2] {
    [1.0, 1.0]
}

fn default_modes() -> usize {
    32
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            sigma: default_sigma(),
            exponent: None,
            modes: default_modes(),
            invariant_covariance: InvariantCovariance::HalfQ,
        }
    }
}

/// Diagonal noise covariances `Q_1, Q_2` in the sine basis.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralNoise {
    dim: usize,
    modes: usize,
    exponent: f64,
    eigenvalues: [Vec<f64>; 2],
    covariance: InvariantCovariance,
}

impl SpectralNoise {
    /// `lambda_k^(i) = sigma_i^2 |k|^(-p)` over the multi-indices `1..=modes`
    /// per dimension.
    pub fn new(dim: usize, sigma: [f64; 2], exponent: f64, modes: usize) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::invalid(format!("noise dimension {dim} not in {{1,2}}")));
        }
        if modes == 0 {
            return Err(Error::invalid("noise needs at least one mode"));
        }
        if !(exponent > dim as f64) || !exponent.is_finite() {
            return Err(Error::invalid(format!(
                "noise exponent {exponent} must exceed the dimension {dim} for a trace-class covariance"
            )));
        }
        if sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::invalid(format!("noise amplitudes {sigma:?} must be finite and >= 0")));
        }
        let count = modes.pow(dim as u32);
        let eigenvalues = sigma.map(|s| {
            (0..count)
                .map(|idx| {
                    let k2: f64 = multi_index(idx, dim, modes)
                        .iter()
                        .take(dim)
                        .map(|&k| (k as f64).powi(2))
                        .sum();
                    s * s * k2.powf(-exponent / 2.0)
                })
                .collect()
        });
        Ok(SpectralNoise {
            dim,
            modes,
            exponent,
            eigenvalues,
            covariance: InvariantCovariance::HalfQ,
        })
    }

    pub fn from_spec(spec: &NoiseSpec, dim: usize) -> Result<Self> {
        let p = spec.exponent.unwrap_or(if dim == 1 { 2.0 } else { 3.0 });
        Ok(Self::new(dim, spec.sigma, p, spec.modes)?.with_covariance(spec.invariant_covariance))
    }

    /// Explicit eigenvalues, `modes^dim` per continuum.
    pub fn from_eigenvalues(dim: usize, modes: usize, eigenvalues: [Vec<f64>; 2]) -> Result<Self> {
        let count = modes.pow(dim as u32);
        if !(1..=2).contains(&dim) || modes == 0 {
            return Err(Error::invalid("noise needs dim in {1,2} and at least one mode"));
        }
        for ev in &eigenvalues {
            if ev.len() != count {
                return Err(Error::invalid(format!("{} eigenvalues for {count} modes", ev.len())));
            }
            if ev.iter().any(|l| !l.is_finite() || *l < 0.0) {
                return Err(Error::invalid("noise eigenvalues must be finite and >= 0"));
            }
        }
        Ok(SpectralNoise {
            dim,
            modes,
            exponent: f64::NAN,
            eigenvalues,
            covariance: InvariantCovariance::HalfQ,
        })
    }

    pub fn zero(dim: usize, modes: usize) -> Result<Self> {
        let count = modes.pow(dim as u32);
        Self::from_eigenvalues(dim, modes, [vec![0.0; count], vec![0.0; count]])
    }

    pub fn with_covariance(mut self, covariance: InvariantCovariance) -> Self {
        self.covariance = covariance;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Modes per dimension.
    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn mode_count(&self) -> usize {
        self.eigenvalues[0].len()
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn covariance(&self) -> InvariantCovariance {
        self.covariance
    }

    pub fn eigenvalues(&self, i: usize) -> &[f64] {
        &self.eigenvalues[i]
    }

    /// `sum_k lambda_k^(i)`.
    pub fn truncated_trace(&self, i: usize) -> f64 {
        self.eigenvalues[i].iter().sum()
    }

    /// Stationary variance of every mode of continuum `i`.
    pub fn stationary_variances(&self, i: usize) -> Vec<f64> {
        let c = self.covariance.factor();
        self.eigenvalues[i].iter().map(|l| c * l).collect()
    }

    /// Trace of the stationary covariance summed over both continua.
    pub fn stationary_trace(&self) -> f64 {
        self.covariance.factor() * (self.truncated_trace(0) + self.truncated_trace(1))
    }

    pub fn is_zero(&self) -> bool {
        self.eigenvalues.iter().all(|ev| ev.iter().all(|&l| l == 0.0))
    }

    /// Sine tables for a Dirichlet mesh.
    pub fn basis(&self, mesh: &Mesh) -> Result<ModeBasis> {
        ModeBasis::new(mesh, self.modes).and_then(|b| {
            if mesh.dim() != self.dim {
                Err(Error::MeshMismatch(format!(
                    "{}D noise on a {}D mesh",
                    self.dim,
                    mesh.dim()
                )))
            } else {
                Ok(b)
            }
        })
    }
}

/// Ordinals (1-based) of the flat mode index.
fn multi_index(idx: usize, dim: usize, modes: usize) -> [usize; 2] {
    if dim == 1 {
        [idx + 1, 0]
    } else {
        [idx % modes + 1, idx / modes + 1]
    }
}

/// `e_k` sampled on the interior nodes of a Dirichlet mesh.
///
/// With `modes < N` the sampled modes are orthonormal in the discrete `L^2`
/// inner product, so spectral and nodal norms agree.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeBasis {
    mesh: Mesh,
    modes: usize,
    /// `sqrt(2) sin(k pi x_i)`, row `i` (interior node `i+1`), column `k-1`.
    sines: Vec<f64>,
}

impl ModeBasis {
    pub fn new(mesh: &Mesh, modes: usize) -> Result<Self> {
        if mesh.boundary() != Boundary::Dirichlet {
            return Err(Error::invalid("noise basis needs a Dirichlet mesh"));
        }
        if modes == 0 || modes >= mesh.n() {
            return Err(Error::invalid(format!(
                "{modes} modes per dimension need a mesh with N > {modes} (got N = {})",
                mesh.n()
            )));
        }
        let m = mesh.per_side();
        let h = mesh.h();
        let mut sines = Vec::with_capacity(m * modes);
        for i in 0..m {
            let x = (i + 1) as f64 * h;
            for k in 1..=modes {
                sines.push(2f64.sqrt() * (k as f64 * PI * x).sin());
            }
        }
        Ok(ModeBasis {
            mesh: *mesh,
            modes,
            sines,
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn mode_count(&self) -> usize {
        self.modes.pow(self.mesh.dim() as u32)
    }

    #[inline]
    fn s(&self, i: usize, k: usize) -> f64 {
        self.sines[i * self.modes + k]
    }

    /// Value of mode `idx` at dof `dof`.
    pub fn mode_value(&self, idx: usize, dof: usize) -> f64 {
        let m = self.mesh.per_side();
        if self.mesh.dim() == 1 {
            self.s(dof, idx)
        } else {
            self.s(dof % m, idx % self.modes) * self.s(dof / m, idx / self.modes)
        }
    }

    /// `out += sum_k coeffs[k] e_k` on the dofs.
    pub fn synthesize_into(&self, coeffs: &[f64], out: &mut [f64]) {
        let m = self.mesh.per_side();
        let kk = self.modes;
        debug_assert_eq!(coeffs.len(), self.mode_count());
        debug_assert_eq!(out.len(), self.mesh.ndof());
        if self.mesh.dim() == 1 {
            for (i, o) in out.iter_mut().enumerate() {
                let row = &self.sines[i * kk..(i + 1) * kk];
                *o += row.iter().zip(coeffs).map(|(s, c)| s * c).sum::<f64>();
            }
        } else {
            // t[i][k2] = sum_k1 s(i,k1) z[k1,k2]
            let mut t = vec![0.0; m * kk];
            for i in 0..m {
                let row = &self.sines[i * kk..(i + 1) * kk];
                for k2 in 0..kk {
                    let col = &coeffs[k2 * kk..(k2 + 1) * kk];
                    t[i * kk + k2] = row.iter().zip(col).map(|(s, c)| s * c).sum();
                }
            }
            for j in 0..m {
                let sj = &self.sines[j * kk..(j + 1) * kk];
                for i in 0..m {
                    let ti = &t[i * kk..(i + 1) * kk];
                    out[i + m * j] += sj.iter().zip(ti).map(|(s, c)| s * c).sum::<f64>();
                }
            }
        }
    }

    pub fn synthesize(&self, coeffs: &[f64]) -> ScalarField {
        let mut out = vec![0.0; self.mesh.ndof()];
        self.synthesize_into(coeffs, &mut out);
        ScalarField::from_values(self.mesh, out).expect("basis mesh sizes")
    }

    /// Discrete projection `(f, e_k)_h` onto each mode.
    pub fn project(&self, field: &ScalarField) -> Vec<f64> {
        let w = self.mesh.cell_volume();
        (0..self.mode_count())
            .map(|k| {
                w * field
                    .values()
                    .iter()
                    .enumerate()
                    .map(|(d, v)| v * self.mode_value(k, d))
                    .sum::<f64>()
            })
            .collect()
    }
}

/// Independent Brownian drivers for `W_1` and `W_2` on disjoint streams.
#[derive(Clone, Debug)]
pub struct Drivers {
    streams: [StreamRng; 2],
}

impl Drivers {
    pub fn new(base_seed: u64, replica: u64) -> Self {
        Drivers {
            streams: [
                rng::stream(base_seed, Role::W1, replica),
                rng::stream(base_seed, Role::W2, replica),
            ],
        }
    }

    pub fn stream(&mut self, i: usize) -> &mut StreamRng {
        &mut self.streams[i]
    }

    /// One standard normal per mode for each continuum.
    pub fn draw(&mut self, count: usize) -> [Vec<f64>; 2] {
        let mut out = [Vec::with_capacity(count), Vec::with_capacity(count)];
        for (o, s) in out.iter_mut().zip(self.streams.iter_mut()) {
            o.extend((0..count).map(|_| s.sample::<f64, _>(StandardNormal)));
        }
        out
    }
}

/// State of the fast pair.
#[derive(Clone, Debug, PartialEq)]
pub struct OUState {
    mean: FieldPair,
    fluct: [Vec<f64>; 2],
    nodal: FieldPair,
    t: f64,
}

impl OUState {
    /// Deterministic initial datum `eta` at time zero.
    pub fn new(eta: FieldPair, basis: &ModeBasis) -> Result<Self> {
        eta.mesh().same_as(basis.mesh())?;
        let count = basis.mode_count();
        Ok(OUState {
            nodal: eta.clone(),
            mean: eta,
            fluct: [vec![0.0; count], vec![0.0; count]],
            t: 0.0,
        })
    }

    pub fn from_parts(mean: FieldPair, fluct: [Vec<f64>; 2], t: f64, basis: &ModeBasis) -> Result<Self> {
        mean.mesh().same_as(basis.mesh())?;
        if fluct.iter().any(|f| f.len() != basis.mode_count()) {
            return Err(Error::MeshMismatch("fluctuation length differs from the mode count".into()));
        }
        let mut s = OUState {
            nodal: mean.clone(),
            mean,
            fluct,
            t,
        };
        s.refresh(basis);
        Ok(s)
    }

    /// Nodal values of `(v_1, v_2)`.
    pub fn nodal(&self) -> &FieldPair {
        &self.nodal
    }

    pub fn mean(&self) -> &FieldPair {
        &self.mean
    }

    pub fn fluctuation(&self, i: usize) -> &[f64] {
        &self.fluct[i]
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    /// Nodal synthesis from the stored parts, bypassing the cache.
    pub fn reconstruct(&self, basis: &ModeBasis) -> FieldPair {
        let mut out = self.mean.clone();
        for i in 0..2 {
            basis.synthesize_into(&self.fluct[i], out.get_mut(i).values_mut());
        }
        out
    }

    fn refresh(&mut self, basis: &ModeBasis) {
        for i in 0..2 {
            let dst = self.nodal.get_mut(i).values_mut();
            dst.copy_from_slice(self.mean.get(i).values());
            basis.synthesize_into(&self.fluct[i], dst);
        }
    }
}

fn check_step(dt: f64, epsilon: f64) -> Result<()> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("time step {dt} must be > 0")));
    }
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid(format!("epsilon {epsilon} must be > 0")));
    }
    Ok(())
}

/// Per-mode standard deviations of one exact step.
fn step_std(noise: &SpectralNoise, i: usize, dt: f64, epsilon: f64) -> Vec<f64> {
    let one_minus_r2 = -(-2.0 * dt / epsilon).exp_m1();
    noise
        .stationary_variances(i)
        .iter()
        .map(|c| (c * one_minus_r2).sqrt())
        .collect()
}

/// Advance by `dt` with `xi` frozen, drawing fresh normals from `drivers`.
pub fn ou_step(
    state: &mut OUState,
    xi: &FieldPair,
    dt: f64,
    epsilon: f64,
    noise: &SpectralNoise,
    basis: &ModeBasis,
    drivers: &mut Drivers,
) -> Result<()> {
    check_step(dt, epsilon)?;
    let normals = drivers.draw(noise.mode_count());
    ou_step_with_normals(state, xi, dt, epsilon, noise, basis, [&normals[0], &normals[1]])
}

/// Advance by `dt` with `xi` frozen using supplied standard normals.
pub fn ou_step_with_normals(
    state: &mut OUState,
    xi: &FieldPair,
    dt: f64,
    epsilon: f64,
    noise: &SpectralNoise,
    basis: &ModeBasis,
    normals: [&[f64]; 2],
) -> Result<()> {
    check_step(dt, epsilon)?;
    xi.mesh().same_as(state.mean.mesh())?;
    if noise.mode_count() != basis.mode_count() {
        return Err(Error::MeshMismatch("noise and basis mode counts differ".into()));
    }
    if normals.iter().any(|g| g.len() != noise.mode_count()) {
        return Err(Error::PartitionMismatch(format!(
            "expected {} normals per continuum",
            noise.mode_count()
        )));
    }
    let r = (-dt / epsilon).exp();
    for i in 0..2 {
        let target = xi.get(i).values();
        for (m, x) in state.mean.get_mut(i).values_mut().iter_mut().zip(target) {
            *m = x + (*m - x) * r;
        }
        let std = step_std(noise, i, dt, epsilon);
        for ((z, s), g) in state.fluct[i].iter_mut().zip(&std).zip(normals[i]) {
            *z = *z * r + s * g;
        }
    }
    state.t += dt;
    state.refresh(basis);
    Ok(())
}

/// Standard normals pre-drawn on a uniform partition of `[0, steps dt]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePath {
    dt: f64,
    normals: Vec<[Vec<f64>; 2]>,
}

impl NoisePath {
    pub fn draw(noise: &SpectralNoise, steps: usize, dt: f64, drivers: &mut Drivers) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::invalid(format!("time step {dt} must be > 0")));
        }
        let normals = (0..steps).map(|_| drivers.draw(noise.mode_count())).collect();
        Ok(NoisePath { dt, normals })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.normals.len()
    }

    pub fn normals(&self, step: usize) -> [&[f64]; 2] {
        let n = &self.normals[step];
        [&n[0], &n[1]]
    }

    fn check(&self, t: f64, noise: &SpectralNoise) -> Result<()> {
        let end = self.dt * self.steps() as f64;
        if (end - t).abs() > 1e-12 * t.abs().max(1.0) {
            return Err(Error::PartitionMismatch(format!(
                "path covers [0, {end}] but t = {t}"
            )));
        }
        if self.normals.iter().any(|n| n[0].len() != noise.mode_count()) {
            return Err(Error::PartitionMismatch("path drawn for a different mode count".into()));
        }
        Ok(())
    }

    /// Run the stepper along the whole path.
    pub fn run(
        &self,
        eta: &FieldPair,
        xi: &FieldPair,
        epsilon: f64,
        noise: &SpectralNoise,
        basis: &ModeBasis,
    ) -> Result<OUState> {
        let mut state = OUState::new(eta.clone(), basis)?;
        for s in 0..self.steps() {
            ou_step_with_normals(&mut state, xi, self.dt, epsilon, noise, basis, self.normals(s))?;
        }
        Ok(state)
    }
}

/// Closed-form mild solution for constant `xi` on the increments of `path`:
///
/// ```text
/// v(t) = xi + (eta - xi) e^{-t/eps} + sum_j e^{-(t - t_{j+1})/eps} sqrt(c_k (1 - r^2)) g_j
/// ```
pub fn mild_reference(
    eta: &FieldPair,
    xi: &FieldPair,
    t: f64,
    epsilon: f64,
    noise: &SpectralNoise,
    basis: &ModeBasis,
    path: &NoisePath,
) -> Result<FieldPair> {
    if t < 0.0 || !(epsilon > 0.0) {
        return Err(Error::invalid("mild reference needs t >= 0 and epsilon > 0"));
    }
    path.check(t, noise)?;
    eta.mesh().same_as(basis.mesh())?;
    xi.mesh().same_as(basis.mesh())?;
    let n = path.steps();
    let decay = (-t / epsilon).exp();
    let mut out = FieldPair::zeros(*basis.mesh());
    for i in 0..2 {
        let e = eta.get(i).values();
        let x = xi.get(i).values();
        for (o, (a, b)) in out.get_mut(i).values_mut().iter_mut().zip(e.iter().zip(x)) {
            *o = b + (a - b) * decay;
        }
        if n == 0 {
            continue;
        }
        let std = step_std(noise, i, path.dt, epsilon);
        let mut z = vec![0.0; noise.mode_count()];
        for j in 0..n {
            let w = (-((n - 1 - j) as f64) * path.dt / epsilon).exp();
            for ((zk, s), g) in z.iter_mut().zip(&std).zip(path.normals(j)[i]) {
                *zk += w * s * g;
            }
        }
        basis.synthesize_into(&z, out.get_mut(i).values_mut());
    }
    Ok(out)
}

/// Pointwise Gaussian marginals of the invariant measure for frozen `xi`.
#[derive(Clone, Debug, PartialEq)]
pub struct InvariantMarginal {
    pub mean: FieldPair,
    /// `s_i(x) = sum_k c_k e_k(x)^2`.
    pub variance: [ScalarField; 2],
    mode_std: [Vec<f64>; 2],
    basis: ModeBasis,
}

impl InvariantMarginal {
    /// True when both marginals are Dirac masses.
    pub fn is_degenerate(&self) -> bool {
        self.mode_std.iter().all(|s| s.iter().all(|&v| v == 0.0))
    }

    pub fn basis(&self) -> &ModeBasis {
        &self.basis
    }
}

pub fn invariant_marginal(xi: &FieldPair, noise: &SpectralNoise, basis: &ModeBasis) -> Result<InvariantMarginal> {
    xi.mesh().same_as(basis.mesh())?;
    if noise.mode_count() != basis.mode_count() {
        return Err(Error::MeshMismatch("noise and basis mode counts differ".into()));
    }
    let mesh = *basis.mesh();
    let variance = [0, 1].map(|i| {
        let c = noise.stationary_variances(i);
        let vals = (0..mesh.ndof())
            .map(|d| {
                c.iter()
                    .enumerate()
                    .map(|(k, ck)| ck * basis.mode_value(k, d).powi(2))
                    .sum()
            })
            .collect();
        ScalarField::from_values(mesh, vals).expect("sizes")
    });
    let mode_std = [0, 1].map(|i| noise.stationary_variances(i).iter().map(|c| c.sqrt()).collect());
    Ok(InvariantMarginal {
        mean: xi.clone(),
        variance,
        mode_std,
        basis: basis.clone(),
    })
}

/// One draw `xi + sum_k sqrt(c_k) g_k e_k` from the invariant measure.
pub fn sample_invariant(marginal: &InvariantMarginal, drivers: &mut Drivers) -> FieldPair {
    sample_invariant_state(marginal, drivers).nodal
}

/// As [`sample_invariant`], keeping the spectral parts for further stepping.
pub fn sample_invariant_state(marginal: &InvariantMarginal, drivers: &mut Drivers) -> OUState {
    let count = marginal.basis.mode_count();
    let g = drivers.draw(count);
    let fluct = [0, 1].map(|i| {
        marginal.mode_std[i]
            .iter()
            .zip(&g[i])
            .map(|(s, gk)| s * gk)
            .collect::<Vec<f64>>()
    });
    OUState::from_parts(marginal.mean.clone(), fluct, 0.0, &marginal.basis).expect("marginal basis sizes")
}

/// `|v^{eta1}(t) - v^{eta2}(t)| / |eta1 - eta2|` on one shared noise path.
pub fn coupling_contraction_check(
    eta1: &FieldPair,
    eta2: &FieldPair,
    xi: &FieldPair,
    t: f64,
    epsilon: f64,
    noise: &SpectralNoise,
    basis: &ModeBasis,
    path: &NoisePath,
) -> Result<f64> {
    path.check(t, noise)?;
    let d0 = eta1.sub(eta2)?.l2_norm();
    if d0 == 0.0 {
        return Err(Error::invalid("contraction ratio undefined for identical initial data"));
    }
    let a = path.run(eta1, xi, epsilon, noise, basis)?;
    let b = path.run(eta2, xi, epsilon, noise, basis)?;
    Ok(a.nodal().sub(b.nodal())?.l2_norm() / d0)
}

/// `E |v(t)|^2` for deterministic `eta` and constant `xi`, in the discrete
/// norm of the basis mesh.
pub fn exact_second_moment(eta: &FieldPair, xi: &FieldPair, t: f64, epsilon: f64, noise: &SpectralNoise) -> Result<f64> {
    eta.mesh().same_as(xi.mesh())?;
    let decay = (-t / epsilon).exp();
    let mut m = FieldPair::zeros(*xi.mesh());
    for i in 0..2 {
        let e = eta.get(i).values();
        for (o, (a, b)) in m.get_mut(i).values_mut().iter_mut().zip(e.iter().zip(xi.get(i).values())) {
            *o = b + (a - b) * decay;
        }
    }
    Ok(m.l2_norm().powi(2) - (-2.0 * t / epsilon).exp_m1() * noise.stationary_trace())
}

/// `2 (|eta|^2 e^{-2t/eps} + |xi|^2 + Tr C)` with `C` the stationary covariance.
pub fn moment_bound(eta: &FieldPair, xi: &FieldPair, t: f64, epsilon: f64, noise: &SpectralNoise) -> f64 {
    2.0 * (eta.l2_norm().powi(2) * (-2.0 * t / epsilon).exp() + xi.l2_norm().powi(2) + noise.stationary_trace())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mesh1(n: usize) -> Mesh {
        Mesh::dirichlet(1, n).unwrap()
    }

    fn pair(mesh: Mesh, f: impl Fn(&[f64]) -> f64 + Copy, g: impl Fn(&[f64]) -> f64) -> FieldPair {
        FieldPair::new(ScalarField::from_fn(mesh, f), ScalarField::from_fn(mesh, g)).unwrap()
    }

    fn single_mode(dim: usize, modes: usize, lambda: f64) -> SpectralNoise {
        let count = modes.pow(dim as u32);
        let mut ev = vec![0.0; count];
        ev[0] = lambda;
        SpectralNoise::from_eigenvalues(dim, modes, [ev.clone(), ev]).unwrap()
    }

    #[test]
    fn eigenvalues_and_trace() {
        let noise = SpectralNoise::new(1, [1.0, 2.0], 2.0, 32).unwrap();
        assert_eq!(noise.eigenvalues(0)[0], 1.0);
        assert!((noise.eigenvalues(0)[2] - 1.0 / 9.0).abs() < 1e-15);
        assert!((noise.eigenvalues(1)[1] - 1.0).abs() < 1e-15);
        let partial: f64 = (1..=32).map(|k| 1.0 / (k * k) as f64).sum();
        assert!((noise.truncated_trace(0) - partial).abs() < 1e-12);
        assert!(noise.truncated_trace(0) < PI * PI / 6.0);
        let n2 = SpectralNoise::new(2, [1.0, 1.0], 3.0, 4).unwrap();
        assert_eq!(n2.mode_count(), 16);
        // mode (2,1)
        assert!((n2.eigenvalues(0)[1] - 5f64.powf(-1.5)).abs() < 1e-15);
        assert!(SpectralNoise::new(2, [1.0, 1.0], 2.0, 4).is_err());
        assert!(SpectralNoise::new(1, [-1.0, 1.0], 2.0, 4).is_err());
    }

    #[test]
    fn basis_is_discretely_orthonormal() {
        for (dim, n, k) in [(1, 16, 8), (2, 8, 5)] {
            let mesh = Mesh::dirichlet(dim, n).unwrap();
            let basis = ModeBasis::new(&mesh, k).unwrap();
            for a in 0..basis.mode_count() {
                let mut ca = vec![0.0; basis.mode_count()];
                ca[a] = 1.0;
                let p = basis.project(&basis.synthesize(&ca));
                for (b, pb) in p.iter().enumerate() {
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((pb - want).abs() < 1e-12, "{dim}D modes {a},{b}: {pb}");
                }
            }
        }
        assert!(ModeBasis::new(&mesh1(8), 8).is_err());
        assert!(ModeBasis::new(&Mesh::periodic(1, 8).unwrap(), 4).is_err());
    }

    #[test]
    fn separable_synthesis_matches_direct_sum() {
        let mesh = Mesh::dirichlet(2, 9).unwrap();
        let basis = ModeBasis::new(&mesh, 4).unwrap();
        let c: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let fast = basis.synthesize(&c);
        for d in 0..mesh.ndof() {
            let direct: f64 = (0..16).map(|k| c[k] * basis.mode_value(k, d)).sum();
            assert!((fast.values()[d] - direct).abs() < 1e-13);
        }
        let x = mesh.dof_coords(5);
        let want = 2.0 * (2.0 * PI * x[0]).sin() * (PI * x[1]).sin();
        assert!((basis.mode_value(1, 5) - want).abs() < 1e-14);
    }

    #[test]
    fn zero_noise_fixed_point() {
        let mesh = mesh1(32);
        let noise = SpectralNoise::zero(1, 8).unwrap();
        let basis = noise.basis(&mesh).unwrap();
        let xi = pair(mesh, |x| x[0] * (1.0 - x[0]), |x| (3.0 * x[0]).sin());
        let mut s = OUState::new(xi.clone(), &basis).unwrap();
        let mut drv = Drivers::new(1, 0);
        for _ in 0..10 {
            ou_step(&mut s, &xi, 0.1, 0.01, &noise, &basis, &mut drv).unwrap();
        }
        assert_eq!(s.nodal(), &xi);
        assert!((s.time() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_free_decay() {
        let mesh = mesh1(32);
        let noise = SpectralNoise::zero(1, 8).unwrap();
        let basis = noise.basis(&mesh).unwrap();
        let eta = pair(mesh, |x| (PI * x[0]).sin(), |x| x[0]);
        let xi = FieldPair::zeros(mesh);
        let mut s = OUState::new(eta.clone(), &basis).unwrap();
        let mut drv = Drivers::new(1, 0);
        let (dt, eps) = (0.01, 0.05);
        for _ in 0..20 {
            ou_step(&mut s, &xi, dt, eps, &noise, &basis, &mut drv).unwrap();
        }
        let f = (-0.2f64 / eps).exp();
        for i in 0..2 {
            for (v, e) in s.nodal().get(i).values().iter().zip(eta.get(i).values()) {
                assert!((v - e * f).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn step_rejects_bad_parameters() {
        let mesh = mesh1(16);
        let noise = SpectralNoise::zero(1, 4).unwrap();
        let basis = noise.basis(&mesh).unwrap();
        let z = FieldPair::zeros(mesh);
        let mut s = OUState::new(z.clone(), &basis).unwrap();
        let mut drv = Drivers::new(0, 0);
        assert!(ou_step(&mut s, &z, 0.0, 1.0, &noise, &basis, &mut drv).is_err());
        assert!(ou_step(&mut s, &z, 0.1, 0.0, &noise, &basis, &mut drv).is_err());
        assert!(ou_step(&mut s, &z, -0.1, 1.0, &noise, &basis, &mut drv).is_err());
    }

    #[test]
    fn long_run_single_mode_variance_is_half() {
        // Independent oracle: Euler-Maruyama with a small step over many
        // replicas reaches the same stationary variance.
        let mesh = mesh1(8);
        let noise = single_mode(1, 1, 1.0);
        let basis = noise.basis(&mesh).unwrap();
        let z = FieldPair::zeros(mesh);
        let reps = 100_000;
        let mut drv = Drivers::new(2024, 0);
        let mut sum2 = 0.0;
        for _ in 0..reps {
            let mut s = OUState::new(z.clone(), &basis).unwrap();
            for _ in 0..4 {
                ou_step(&mut s, &z, 5.0, 1.0, &noise, &basis, &mut drv).unwrap();
            }
            sum2 += s.fluctuation(0)[0].powi(2);
        }
        let var = sum2 / reps as f64;
        assert!((var - 0.5).abs() < 0.01, "variance {var}");

        let mut em = Drivers::new(7, 0);
        let (h, steps, em_reps) = (0.01, 800, 4000);
        let mut acc = 0.0;
        for _ in 0..em_reps {
            let mut v = 0.0f64;
            for _ in 0..steps {
                let g: f64 = rand::Rng::sample(em.stream(0), StandardNormal);
                v += -v * h + h.sqrt() * g;
            }
            acc += v * v;
        }
        let em_var = acc / em_reps as f64;
        assert!((em_var - 0.5).abs() < 0.05, "Euler-Maruyama variance {em_var}");
    }

    #[test]
    fn q_covariance_switch_doubles_variance() {
        let noise = single_mode(1, 1, 1.0).with_covariance(InvariantCovariance::Q);
        assert_eq!(noise.stationary_variances(0), vec![1.0]);
        let spec: NoiseSpec = toml::from_str("invariant_covariance = \"q\"").unwrap();
        assert_eq!(spec.invariant_covariance, InvariantCovariance::Q);
        assert_eq!(NoiseSpec::default().invariant_covariance, InvariantCovariance::HalfQ);
    }

    #[test]
    fn mild_reference_examples() {
        let mesh = mesh1(32);
        let quiet = SpectralNoise::zero(1, 8).unwrap();
        let basis = quiet.basis(&mesh).unwrap();
        let xi = pair(mesh, |x| x[0], |x| 1.0 - x[0]);
        let zero = FieldPair::zeros(mesh);
        let mut d = Drivers::new(3, 0);
        let path = NoisePath::draw(&quiet, 10, 0.05, &mut d).unwrap();
        let v = mild_reference(&zero, &xi, 0.5, 0.2, &quiet, &basis, &path).unwrap();
        let f = 1.0 - (-0.5f64 / 0.2).exp();
        for i in 0..2 {
            for (a, b) in v.get(i).values().iter().zip(xi.get(i).values()) {
                assert!((a - b * f).abs() < 1e-14);
            }
        }
        let empty = NoisePath::draw(&quiet, 0, 0.05, &mut d).unwrap();
        let eta = pair(mesh, |x| x[0] * x[0], |_| 2.0);
        assert_eq!(mild_reference(&eta, &xi, 0.0, 0.2, &quiet, &basis, &empty).unwrap(), eta);
        assert!(matches!(
            mild_reference(&eta, &xi, 0.4, 0.2, &quiet, &basis, &path),
            Err(Error::PartitionMismatch(_))
        ));
    }

    #[test]
    fn mild_reference_agrees_with_stepper() {
        for dim in [1, 2] {
            let mesh = Mesh::dirichlet(dim, 12).unwrap();
            let noise = SpectralNoise::new(dim, [1.0, 0.7], dim as f64 + 1.0, 6).unwrap();
            let basis = noise.basis(&mesh).unwrap();
            let eta = pair(mesh, |x| x.iter().product::<f64>(), |x| x[0].sin());
            let xi = pair(mesh, |x| 0.3 * x[0], |_| -0.2);
            let path = NoisePath::draw(&noise, 40, 0.025, &mut Drivers::new(11, 4)).unwrap();
            let stepped = path.run(&eta, &xi, 0.3, &noise, &basis).unwrap();
            let mild = mild_reference(&eta, &xi, 1.0, 0.3, &noise, &basis, &path).unwrap();
            assert!(stepped.nodal().sub(&mild).unwrap().first.sup_norm() < 1e-12);
            assert!(stepped.nodal().sub(&mild).unwrap().second.sup_norm() < 1e-12);

            // the live stepper consumes the same normals as the pre-drawn path
            let mut live = OUState::new(eta.clone(), &basis).unwrap();
            let mut drv = Drivers::new(11, 4);
            for _ in 0..40 {
                ou_step(&mut live, &xi, 0.025, 0.3, &noise, &basis, &mut drv).unwrap();
            }
            assert_eq!(live.nodal(), stepped.nodal());
        }
    }

    #[test]
    fn nodal_cache_matches_synthesis() {
        let mesh = Mesh::dirichlet(2, 10).unwrap();
        let noise = SpectralNoise::new(2, [1.0, 1.0], 3.0, 5).unwrap();
        let basis = noise.basis(&mesh).unwrap();
        let xi = pair(mesh, |x| x[0], |x| x[1]);
        let mut s = OUState::new(FieldPair::zeros(mesh), &basis).unwrap();
        let mut drv = Drivers::new(5, 0);
        for _ in 0..5 {
            ou_step(&mut s, &xi, 0.1, 0.5, &noise, &basis, &mut drv).unwrap();
        }
        let r = s.reconstruct(&basis);
        assert!(r.sub(s.nodal()).unwrap().l2_norm() < 1e-12);
    }

    #[test]
    fn invariant_marginal_examples() {
        let mesh = mesh1(16);
        let quiet = SpectralNoise::zero(1, 4).unwrap();
        let basis = quiet.basis(&mesh).unwrap();
        let xi = pair(mesh, |x| x[0], |x| -x[0]);
        let m = invariant_marginal(&xi, &quiet, &basis).unwrap();
        assert!(m.is_degenerate());
        assert_eq!(sample_invariant(&m, &mut Drivers::new(1, 1)), xi);

        let noise = single_mode(1, 4, 1.0);
        let m = invariant_marginal(&xi, &noise, &basis).unwrap();
        // node 8 is x = 0.5
        let s_mid = m.variance[0].values()[7];
        assert!((s_mid - 1.0).abs() < 1e-14);
        assert!(m.variance.iter().all(|v| v.values().iter().all(|&s| s >= 0.0)));
    }

    #[test]
    fn marginal_variance_integrates_to_half_trace() {
        let mesh = mesh1(128);
        let noise = SpectralNoise::new(1, [1.0, 0.5], 2.0, 32).unwrap();
        let basis = noise.basis(&mesh).unwrap();
        let m = invariant_marginal(&FieldPair::zeros(mesh), &noise, &basis).unwrap();
        for i in 0..2 {
            let integral = m.variance[i].values().iter().sum::<f64>() * mesh.h();
            assert!((integral - 0.5 * noise.truncated_trace(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn invariant_sample_mean_within_clt_band() {
        let mesh = mesh1(32);
        let noise = SpectralNoise::new(1, [1.0, 1.0], 2.0, 16).unwrap();
        let basis = noise.basis(&mesh).unwrap();
        let xi = pair(mesh, |x| (PI * x[0]).sin(), |x| x[0] * (1.0 - x[0]));
        let m = invariant_marginal(&xi, &noise, &basis).unwrap();
        let mut drv = Drivers::new(99, 0);
        let n = 100_000;
        let probes = [3, 8, 15, 22, 28];
        let mut sums = [[0.0; 5]; 2];
        for _ in 0..n {
            let s = sample_invariant(&m, &mut drv);
            for i in 0..2 {
                for (acc, &p) in sums[i].iter_mut().zip(&probes) {
                    *acc += s.get(i).values()[p];
                }
            }
        }
        for i in 0..2 {
            for (acc, &p) in sums[i].iter().zip(&probes) {
                let mean = acc / n as f64;
                let band = 3.0 * (m.variance[i].values()[p] / n as f64).sqrt();
                assert!((mean - xi.get(i).values()[p]).abs() < band, "probe {p}");
            }
        }
    }

    #[test]
    fn contraction_examples() {
        let mesh = mesh1(32);
        let noise = SpectralNoise::new(1, [1.0, 1.0], 2.0, 16).unwrap();
        let basis = noise.basis(&mesh).unwrap();
        let e1 = pair(mesh, |x| (PI * x[0]).sin(), |x| x[0]);
        let e2 = pair(mesh, |x| -(2.0 * PI * x[0]).sin(), |_| 0.3);
        let xi = pair(mesh, |x| 0.5 * x[0], |_| 0.1);
        let eps = 0.2;
        let t = eps * 2f64.ln();
        let ratio = |seed| {
            let path = NoisePath::draw(&noise, 8, t / 8.0, &mut Drivers::new(seed, 0)).unwrap();
            coupling_contraction_check(&e1, &e2, &xi, t, eps, &noise, &basis, &path).unwrap()
        };
        let (a, b) = (ratio(1), ratio(2));
        assert!((a - 0.5).abs() < 1e-12, "{a}");
        assert!((a - b).abs() < 1e-12);
        let empty = NoisePath::draw(&noise, 0, 0.1, &mut Drivers::new(1, 0)).unwrap();
        let r0 = coupling_contraction_check(&e1, &e2, &xi, 0.0, eps, &noise, &basis, &empty).unwrap();
        assert!((r0 - 1.0).abs() < 1e-15);
        assert!(coupling_contraction_check(&e1, &e1, &xi, 0.0, eps, &noise, &basis, &empty).is_err());
    }

    #[test]
    fn second_moment_monte_carlo_and_bound() {
        let mesh = mesh1(32);
        let noise = SpectralNoise::new(1, [1.0, 0.8], 2.0, 16).unwrap();
        let basis = noise.basis(&mesh).unwrap();
        let eta = pair(mesh, |x| 2.0 * (PI * x[0]).sin(), |x| x[0]);
        let xi = pair(mesh, |x| 0.5 * x[0], |_| -0.4);
        let (t, eps) = (0.3, 0.25);
        let exact = exact_second_moment(&eta, &xi, t, eps, &noise).unwrap();
        let reps = 20_000;
        let mut drv = Drivers::new(8, 0);
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..reps {
            let mut s = OUState::new(eta.clone(), &basis).unwrap();
            ou_step(&mut s, &xi, t, eps, &noise, &basis, &mut drv).unwrap();
            let q = s.nodal().l2_norm().powi(2);
            s1 += q;
            s2 += q * q;
        }
        let mean = s1 / reps as f64;
        let se = ((s2 / reps as f64 - mean * mean) / reps as f64).sqrt();
        assert!((mean - exact).abs() < 4.0 * se, "mc {mean} exact {exact} se {se}");
        assert!(exact <= moment_bound(&eta, &xi, t, eps, &noise));
        let stated_bound = 2.0
            * (eta.l2_norm().powi(2) * (-2.0 * t / eps).exp()
                + xi.l2_norm().powi(2)
                + noise.truncated_trace(0)
                + noise.truncated_trace(1));
        assert!(exact <= stated_bound);
    }

    #[test]
    fn driver_streams_are_independent_of_each_other() {
        let mut d = Drivers::new(5, 0);
        let g = d.draw(1000);
        assert_ne!(g[0], g[1]);
        let corr: f64 = g[0].iter().zip(&g[1]).map(|(a, b)| a * b).sum::<f64>() / 1000.0;
        assert!(corr.abs() < 0.15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn contraction_ratio_is_exponential(eps in 0.05f64..2.0, t in 0.0f64..1.0, seed in any::<u64>()) {
            let mesh = mesh1(16);
            let noise = SpectralNoise::new(1, [1.0, 1.0], 2.0, 8).unwrap();
            let basis = noise.basis(&mesh).unwrap();
            let e1 = pair(mesh, |x| x[0], |x| x[0] * x[0]);
            let e2 = FieldPair::zeros(mesh);
            let xi = pair(mesh, |_| 0.2, |_| 0.1);
            let steps = 5;
            let path = NoisePath::draw(&noise, steps, (t / steps as f64).max(1e-9), &mut Drivers::new(seed, 0)).unwrap();
            let tt = path.dt() * steps as f64;
            let r = coupling_contraction_check(&e1, &e2, &xi, tt, eps, &noise, &basis, &path).unwrap();
            prop_assert!((r - (-tt / eps).exp()).abs() < 1e-12);
        }

        #[test]
        fn marginal_variance_nonnegative(p in 1.5f64..4.0, s1 in 0.0f64..3.0, s2 in 0.0f64..3.0) {
            let mesh = mesh1(24);
            let noise = SpectralNoise::new(1, [s1, s2], p, 12).unwrap();
            let basis = noise.basis(&mesh).unwrap();
            let m = invariant_marginal(&FieldPair::zeros(mesh), &noise, &basis).unwrap();
            for i in 0..2 {
                prop_assert!(m.variance[i].values().iter().all(|&v| v >= 0.0));
                let integral = m.variance[i].values().iter().sum::<f64>() * mesh.h();
                prop_assert!((integral - 0.5 * noise.truncated_trace(i)).abs() < 1e-10);
            }
        }
    }
}
