//! Periodic cell problems and effective tensors.
//!
//! For each direction `e_l` the corrector `chi_l` solves
//! `div(A (e_l + grad chi_l)) = 0` on the periodic unit cell with zero mean,
//! and the effective tensor is the cell average of `A (I + grad chi)`.
//! Adjoint correctors use `A^T`.

use crate::coeffs::{SmallMatrix, TensorSpec};
use crate::error::{Error, Result};
use crate::grid::testfn::Bump;
use crate::grid::{assemble_diffusion, Boundary, DiffusionOperator, Mesh, ScalarField};
use crate::linalg::{bicgstab, conjugate_gradient, norm, IterativeOptions};
use crate::par::{self, Execution};

#[derive(Clone, Debug)]
pub struct CellSolution {
    pub mesh: Mesh,
    pub correctors: Vec<ScalarField>,
    pub adjoint_correctors: Vec<ScalarField>,
    pub effective: SmallMatrix,
    pub adjoint_effective: SmallMatrix,
    /// `max |A_eff - A_eff^T|` before symmetrization (symmetric tensors only).
    pub asymmetry_defect: f64,
    /// Relative residuals of the direct then adjoint solves.
    pub residuals: Vec<f64>,
    pub iterations: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EffectiveTensor {
    pub matrix: SmallMatrix,
    pub asymmetry_defect: f64,
}

fn unit(l: usize) -> [f64; 2] {
    let mut g = [0.0; 2];
    g[l] = 1.0;
    g
}

struct DirectionSolve {
    chi: ScalarField,
    residual: f64,
    iterations: usize,
}

fn solve_direction(op: &DiffusionOperator, l: usize, symmetric: bool, tolerance: f64) -> Result<DirectionSolve> {
    let mesh = *op.mesh();
    let rhs: Vec<f64> = op.macro_load(unit(l)).iter().map(|v| -v).collect();
    let mut x = vec![0.0; mesh.ndof()];
    let mut opts = IterativeOptions::new(tolerance, mesh.ndof());
    // gauge is always applied: the periodic system is singular otherwise
    opts.mean_zero = true;
    let stats = if symmetric {
        conjugate_gradient(op.matrix(), &rhs, &mut x, opts)?
    } else {
        bicgstab(op.matrix(), &rhs, &mut x, opts)?
    };
    let chi = ScalarField::from_values(mesh, x)?;
    let lchi = op.matrix().apply(chi.values());
    let r: Vec<f64> = lchi.iter().zip(&rhs).map(|(a, b)| a - b).collect();
    let bn = norm(&rhs);
    let residual = if bn > 0.0 { norm(&r) / bn } else { norm(&r) };
    Ok(DirectionSolve {
        chi,
        residual: residual.max(stats.residual),
        iterations: stats.iterations,
    })
}

fn solve_all(
    tensor: &TensorSpec,
    mesh: &Mesh,
    tolerance: f64,
    exec: Execution,
) -> Result<(DiffusionOperator, Vec<DirectionSolve>)> {
    let op = assemble_diffusion(mesh, &|y| tensor.eval_periodic(y))?;
    let symmetric = tensor.is_symmetric();
    let sols = par::map_indexed(exec, mesh.dim(), |l| solve_direction(&op, l, symmetric, tolerance));
    let sols = sols.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((op, sols))
}

/// Solve the cell problems (and their adjoints) for one tensor field.
pub fn solve_cell(tensor: &TensorSpec, mesh: &Mesh, tolerance: f64) -> Result<CellSolution> {
    solve_cell_with(tensor, mesh, tolerance, Execution::default())
}

pub fn solve_cell_with(tensor: &TensorSpec, mesh: &Mesh, tolerance: f64, exec: Execution) -> Result<CellSolution> {
    if mesh.boundary() != Boundary::Periodic {
        return Err(Error::invalid("cell problems need a periodic mesh"));
    }
    if !(tolerance > 0.0) {
        return Err(Error::invalid("cell tolerance must be positive"));
    }
    tensor.check()?;
    if tensor.dim() != mesh.dim() {
        return Err(Error::MeshMismatch("tensor and cell mesh dimensions differ".into()));
    }
    let symmetric = tensor.is_symmetric();
    let (op, direct) = solve_all(tensor, mesh, tolerance, exec)?;
    let correctors: Vec<ScalarField> = direct.iter().map(|s| s.chi.clone()).collect();
    let eff = effective_tensor(&op, &correctors, symmetric)?;
    let mut residuals: Vec<f64> = direct.iter().map(|s| s.residual).collect();
    let mut iterations: Vec<usize> = direct.iter().map(|s| s.iterations).collect();

    let (adjoint_correctors, adjoint_effective) = if symmetric {
        residuals.extend(residuals.clone());
        iterations.extend(iterations.clone());
        (correctors.clone(), eff.matrix)
    } else {
        let t = tensor.transpose();
        let (op_t, adj) = solve_all(&t, mesh, tolerance, exec)?;
        let chis: Vec<ScalarField> = adj.iter().map(|s| s.chi.clone()).collect();
        let e = effective_tensor(&op_t, &chis, false)?;
        residuals.extend(adj.iter().map(|s| s.residual));
        iterations.extend(adj.iter().map(|s| s.iterations));
        (chis, e.matrix)
    };
    Ok(CellSolution {
        mesh: *mesh,
        correctors,
        adjoint_correctors,
        effective: eff.matrix,
        adjoint_effective,
        asymmetry_defect: eff.asymmetry_defect,
        residuals,
        iterations,
    })
}

/// Midpoint quadrature of `int_Y A (I + grad chi) dy`.
///
/// With `symmetrize` the result is replaced by its symmetric part and the
/// removed defect is reported.
pub fn effective_tensor(op: &DiffusionOperator, correctors: &[ScalarField], symmetrize: bool) -> Result<EffectiveTensor> {
    let d = op.mesh().dim();
    if correctors.len() != d {
        return Err(Error::MeshMismatch(format!("{} correctors for dimension {d}", correctors.len())));
    }
    let mut m = SmallMatrix::zeros(d);
    for (l, chi) in correctors.iter().enumerate() {
        let flux = op.mean_flux(chi, unit(l))?;
        for (j, f) in flux.iter().take(d).enumerate() {
            m.m[j][l] = *f;
        }
    }
    let defect = m.max_abs_diff(&m.transpose());
    if symmetrize && d == 2 {
        let s = 0.5 * (m.m[0][1] + m.m[1][0]);
        m.m[0][1] = s;
        m.m[1][0] = s;
    }
    Ok(EffectiveTensor {
        matrix: m,
        asymmetry_defect: defect,
    })
}

/// Multilinear interpolation of a periodic cell field at an arbitrary point
/// (wrapped into the cell).
pub fn interpolate_periodic(field: &ScalarField, y: &[f64]) -> f64 {
    let mesh = field.mesh();
    let n = mesh.n() as f64;
    let d = mesh.dim();
    let mut base = [0i64; 2];
    let mut frac = [0.0; 2];
    for k in 0..d {
        let s = crate::coeffs::wrap_unit(y[k]) * n;
        let f = s.floor();
        base[k] = f as i64;
        frac[k] = s - f;
    }
    if d == 1 {
        let a = field.at([base[0], 0]);
        let b = field.at([base[0] + 1, 0]);
        a + frac[0] * (b - a)
    } else {
        let v00 = field.at([base[0], base[1]]);
        let v10 = field.at([base[0] + 1, base[1]]);
        let v01 = field.at([base[0], base[1] + 1]);
        let v11 = field.at([base[0] + 1, base[1] + 1]);
        let lo = v00 + frac[0] * (v10 - v00);
        let hi = v01 + frac[0] * (v11 - v01);
        lo + frac[1] * (hi - lo)
    }
}

/// `phi(x) + epsilon * grad phi(x) . chi*(x / epsilon)` on the physical mesh.
///
/// The corrector term is carried by `grad phi`, so it vanishes wherever `phi`
/// is locally zero; for bumps supported inside `D` the result satisfies the
/// Dirichlet condition.
pub fn corrector_test_function(phi: &Bump, chi_star: &[ScalarField], epsilon: f64, mesh: &Mesh) -> Result<ScalarField> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let d = mesh.dim();
    if chi_star.len() != d || chi_star.iter().any(|c| c.mesh().dim() != d) {
        return Err(Error::MeshMismatch("adjoint correctors do not match mesh dimension".into()));
    }
    Ok(ScalarField::from_fn(*mesh, |x| {
        let g = phi.gradient(x);
        let mut y = [0.0; 2];
        for k in 0..d {
            y[k] = x[k] / epsilon;
        }
        let mut corr = 0.0;
        for (k, chi) in chi_star.iter().enumerate() {
            if g[k] != 0.0 {
                corr += g[k] * interpolate_periodic(chi, &y[..d]);
            }
        }
        phi.value(x) + epsilon * corr
    }))
}
