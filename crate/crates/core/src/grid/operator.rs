use crate::coeffs::SmallMatrix;
use crate::error::{Error, Result};
use crate::linalg::CsrMatrix;

use super::{Boundary, Mesh, Node, ScalarField};

#[derive(Clone, Copy, Debug)]
struct FaceCoef {
    a: Node,
    b: Node,
    coef: f64,
}

#[derive(Clone, Copy, Debug)]
struct CellCoef {
    corner: Node,
    kxy: f64,
    kyx: f64,
}

const CORNERS: [[i64; 2]; 4] = [[0, 0], [1, 0], [0, 1], [1, 1]];
const DX: [f64; 4] = [-0.5, 0.5, -0.5, 0.5];
const DY: [f64; 4] = [-0.5, -0.5, 0.5, 0.5];

#[inline]
fn harmonic(a: f64, b: f64) -> f64 {
    if a == b {
        a
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Finite-volume discretization of `u -> -div(A grad u)`.
///
/// Diagonal tensor entries live on faces (harmonic mean of the two nodal
/// samples along the flux direction); off-diagonal entries live on cells
/// (arithmetic mean of the four corner samples) and couple through
/// cell-centred gradients. The operator is the gradient of a discrete
/// bilinear form, so it is symmetric whenever `A` is.
#[derive(Clone, Debug)]
pub struct DiffusionOperator {
    mesh: Mesh,
    faces: [Vec<FaceCoef>; 2],
    cells: Vec<CellCoef>,
    matrix: CsrMatrix,
}

/// Assemble the diffusion operator from nodal tensor samples.
///
/// `tensor` is evaluated at every sampling node (boundary nodes included on
/// Dirichlet meshes) in physical coordinates.
pub fn assemble_diffusion(mesh: &Mesh, tensor: &dyn Fn(&[f64]) -> SmallMatrix) -> Result<DiffusionOperator> {
    let d = mesh.dim();
    let side = mesh.node_range().end as usize;
    let mut samples = Vec::with_capacity(side.pow(d as u32));
    for node in mesh.sample_nodes() {
        let x = mesh.node_coords(node);
        let a = tensor(&x[..d]);
        if a.dim != d {
            return Err(Error::invalid("tensor sample dimension does not match mesh"));
        }
        let (lo, _) = a.sym_eig_range();
        if !(lo > 0.0) {
            return Err(Error::NotPositiveDefinite {
                location: format!("node {:?}", &node[..d]),
                min_eig: lo,
            });
        }
        samples.push(a);
    }
    let sample_at = |node: Node| -> &SmallMatrix {
        let idx = |c: i64| -> usize {
            match mesh.boundary() {
                Boundary::Periodic => c.rem_euclid(mesh.n() as i64) as usize,
                Boundary::Dirichlet => c as usize,
            }
        };
        let i = idx(node[0]);
        let j = if d == 2 { idx(node[1]) } else { 0 };
        &samples[i + j * side]
    };

    let mut faces: [Vec<FaceCoef>; 2] = [Vec::new(), Vec::new()];
    for (axis, list) in faces.iter_mut().enumerate().take(d) {
        for (a, b) in mesh.faces(axis) {
            let coef = harmonic(sample_at(a).get(axis, axis), sample_at(b).get(axis, axis));
            list.push(FaceCoef { a, b, coef });
        }
    }
    let mut cells = Vec::new();
    if d == 2 {
        for corner in mesh.cells() {
            let (mut kxy, mut kyx) = (0.0, 0.0);
            for off in CORNERS {
                let s = sample_at([corner[0] + off[0], corner[1] + off[1]]);
                kxy += 0.25 * s.get(0, 1);
                kyx += 0.25 * s.get(1, 0);
            }
            if kxy != 0.0 || kyx != 0.0 {
                cells.push(CellCoef { corner, kxy, kyx });
            }
        }
    }

    let h2 = mesh.h() * mesh.h();
    let mut trip = Vec::new();
    for list in &faces {
        for f in list {
            let (da, db) = (mesh.node_dof(f.a), mesh.node_dof(f.b));
            let c = f.coef / h2;
            for (row, sign_row) in [(da, -1.0), (db, 1.0)] {
                let Some(r) = row else { continue };
                for (col, sign_col) in [(da, -1.0), (db, 1.0)] {
                    if let Some(cc) = col {
                        trip.push((r, cc, c * sign_row * sign_col));
                    }
                }
            }
        }
    }
    for cell in &cells {
        let dofs: Vec<Option<usize>> = CORNERS
            .iter()
            .map(|o| mesh.node_dof([cell.corner[0] + o[0], cell.corner[1] + o[1]]))
            .collect();
        for r in 0..4 {
            let Some(row) = dofs[r] else { continue };
            for c in 0..4 {
                let Some(col) = dofs[c] else { continue };
                let v = (cell.kxy * DX[r] * DY[c] + cell.kyx * DY[r] * DX[c]) / h2;
                if v != 0.0 {
                    trip.push((row, col, v));
                }
            }
        }
    }
    let matrix = CsrMatrix::from_triplets(mesh.ndof(), trip);
    Ok(DiffusionOperator {
        mesh: *mesh,
        faces,
        cells,
        matrix,
    })
}

impl DiffusionOperator {
    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn apply(&self, u: &ScalarField) -> Result<ScalarField> {
        self.mesh.same_as(u.mesh())?;
        ScalarField::from_values(self.mesh, self.matrix.apply(u.values()))
    }

    /// Discrete `int grad w . A grad u`.
    pub fn energy_pairing(&self, w: &ScalarField, u: &ScalarField) -> Result<f64> {
        let lu = self.apply(u)?;
        lu.weak_pairing(w)
    }

    pub fn is_symmetric(&self) -> bool {
        self.matrix.asymmetry() < 1e-14
    }

    /// Load vector `(1/h^d) dB(w, G)/dw` of a constant macroscopic gradient `G`.
    /// The periodic cell problem is `L chi = -macro_load(e_l)`.
    pub fn macro_load(&self, grad: [f64; 2]) -> Vec<f64> {
        let mesh = &self.mesh;
        let h = mesh.h();
        let mut load = vec![0.0; mesh.ndof()];
        for (axis, list) in self.faces.iter().enumerate() {
            for f in list {
                let v = f.coef * grad[axis] / h;
                if let Some(a) = mesh.node_dof(f.a) {
                    load[a] -= v;
                }
                if let Some(b) = mesh.node_dof(f.b) {
                    load[b] += v;
                }
            }
        }
        for cell in &self.cells {
            for (r, o) in CORNERS.iter().enumerate() {
                if let Some(dof) = mesh.node_dof([cell.corner[0] + o[0], cell.corner[1] + o[1]]) {
                    load[dof] += (cell.kxy * DX[r] * grad[1] + cell.kyx * DY[r] * grad[0]) / h;
                }
            }
        }
        load
    }

    /// Domain integral of the flux `A (grad u + G)` with the same quadrature as
    /// the bilinear form.
    pub fn mean_flux(&self, u: &ScalarField, grad: [f64; 2]) -> Result<[f64; 2]> {
        self.mesh.same_as(u.mesh())?;
        let mesh = &self.mesh;
        let h = mesh.h();
        let vol = mesh.cell_volume();
        let mut flux = [0.0; 2];
        for (axis, list) in self.faces.iter().enumerate() {
            let mut s = 0.0;
            for f in list {
                s += f.coef * ((u.at(f.b) - u.at(f.a)) / h + grad[axis]);
            }
            flux[axis] = vol * s;
        }
        let (mut sx, mut sy) = (0.0, 0.0);
        for cell in &self.cells {
            let (mut gx, mut gy) = (grad[0], grad[1]);
            for (r, o) in CORNERS.iter().enumerate() {
                let v = u.at([cell.corner[0] + o[0], cell.corner[1] + o[1]]);
                gx += DX[r] * v / h;
                gy += DY[r] * v / h;
            }
            sx += cell.kxy * gy;
            sy += cell.kyx * gx;
        }
        flux[0] += vol * sx;
        flux[1] += vol * sy;
        Ok(flux)
    }
}
