//! Structured meshes on the unit interval/square, nodal fields and the
//! discrete norms used by every estimate.
//!
//! Nodes sit at `x = i h` with `h = 1/N`. A Dirichlet mesh carries the
//! `(N-1)^d` interior nodes as unknowns (boundary values are zero); a periodic
//! mesh carries nodes `0..N` per side and wraps index `N` back to `0`.

mod operator;
pub mod testfn;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use operator::{assemble_diffusion, DiffusionOperator};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Dirichlet,
    Periodic,
}

/// Node index; components may be out of range and are resolved by the mesh.
pub type Node = [i64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Mesh {
    dim: usize,
    n: usize,
    boundary: Boundary,
}

impl Mesh {
    pub fn new(dim: usize, n: usize, boundary: Boundary) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::invalid(format!("mesh dimension {dim} not in {{1,2}}")));
        }
        if n < 4 {
            return Err(Error::invalid(format!("mesh needs N >= 4, got {n}")));
        }
        Ok(Mesh { dim, n, boundary })
    }

    pub fn dirichlet(dim: usize, n: usize) -> Result<Self> {
        Self::new(dim, n, Boundary::Dirichlet)
    }

    pub fn periodic(dim: usize, n: usize) -> Result<Self> {
        Self::new(dim, n, Boundary::Periodic)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// Quadrature weight of one node, `h^d`.
    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.dim as i32)
    }

    /// Unknowns per side.
    pub fn per_side(&self) -> usize {
        match self.boundary {
            Boundary::Dirichlet => self.n - 1,
            Boundary::Periodic => self.n,
        }
    }

    pub fn ndof(&self) -> usize {
        self.per_side().pow(self.dim as u32)
    }

    /// Node index range (per side) over which sampled coefficients are needed.
    pub fn node_range(&self) -> std::ops::Range<i64> {
        match self.boundary {
            Boundary::Dirichlet => 0..self.n as i64 + 1,
            Boundary::Periodic => 0..self.n as i64,
        }
    }

    /// Dof of a node, or `None` for Dirichlet boundary nodes.
    pub fn node_dof(&self, node: Node) -> Option<usize> {
        let n = self.n as i64;
        let mut idx = 0usize;
        let mut stride = 1usize;
        for &c in node.iter().take(self.dim) {
            let local = match self.boundary {
                Boundary::Periodic => c.rem_euclid(n) as usize,
                Boundary::Dirichlet => {
                    if c <= 0 || c >= n {
                        return None;
                    }
                    (c - 1) as usize
                }
            };
            idx += local * stride;
            stride *= self.per_side();
        }
        Some(idx)
    }

    /// Node of a dof.
    pub fn dof_node(&self, dof: usize) -> Node {
        let side = self.per_side();
        let offset = match self.boundary {
            Boundary::Dirichlet => 1,
            Boundary::Periodic => 0,
        };
        let mut node = [0i64; 2];
        let mut rest = dof;
        for c in node.iter_mut().take(self.dim) {
            *c = (rest % side) as i64 + offset;
            rest /= side;
        }
        node
    }

    pub fn node_coords(&self, node: Node) -> [f64; 2] {
        let h = self.h();
        [node[0] as f64 * h, if self.dim == 2 { node[1] as f64 * h } else { 0.0 }]
    }

    pub fn dof_coords(&self, dof: usize) -> [f64; 2] {
        self.node_coords(self.dof_node(dof))
    }

    /// All sampling nodes (boundary included for Dirichlet meshes).
    pub fn sample_nodes(&self) -> Vec<Node> {
        let r = self.node_range();
        if self.dim == 1 {
            r.map(|i| [i, 0]).collect()
        } else {
            let mut out = Vec::with_capacity(r.clone().count().pow(2));
            for j in r.clone() {
                for i in r.clone() {
                    out.push([i, j]);
                }
            }
            out
        }
    }

    pub fn same_as(&self, other: &Mesh) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::MeshMismatch(format!("{self:?} vs {other:?}")))
        }
    }

    /// Pairs of nodes joined by a face normal to `axis`.
    pub(crate) fn faces(&self, axis: usize) -> Vec<(Node, Node)> {
        let n = self.n as i64;
        let (along, across): (std::ops::Range<i64>, std::ops::Range<i64>) = match self.boundary {
            Boundary::Dirichlet => (0..n, 1..n),
            Boundary::Periodic => (0..n, 0..n),
        };
        let mut out = Vec::new();
        if self.dim == 1 {
            for i in along {
                out.push(([i, 0], [i + 1, 0]));
            }
            return out;
        }
        for j in across {
            for i in along.clone() {
                let (a, b) = if axis == 0 {
                    ([i, j], [i + 1, j])
                } else {
                    ([j, i], [j, i + 1])
                };
                out.push((a, b));
            }
        }
        out
    }

    /// Lower-left nodes of all 2D cells.
    pub(crate) fn cells(&self) -> Vec<Node> {
        let n = self.n as i64;
        let mut out = Vec::new();
        if self.dim == 2 {
            for j in 0..n {
                for i in 0..n {
                    out.push([i, j]);
                }
            }
        }
        out
    }
}

/// Nodal values on the unknowns of a mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    mesh: Mesh,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(mesh: Mesh) -> Self {
        ScalarField {
            mesh,
            values: vec![0.0; mesh.ndof()],
        }
    }

    pub fn from_values(mesh: Mesh, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.ndof() {
            return Err(Error::MeshMismatch(format!(
                "{} values for {} dofs",
                values.len(),
                mesh.ndof()
            )));
        }
        Ok(ScalarField { mesh, values })
    }

    pub fn from_fn(mesh: Mesh, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..mesh.ndof())
            .map(|d| {
                let x = mesh.dof_coords(d);
                f(&x[..mesh.dim()])
            })
            .collect();
        ScalarField { mesh, values }
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Value at a node, zero on Dirichlet boundary nodes.
    #[inline]
    pub fn at(&self, node: Node) -> f64 {
        self.mesh.node_dof(node).map_or(0.0, |d| self.values[d])
    }

    pub fn l2_norm(&self) -> f64 {
        self.weak_pairing_unchecked(self).sqrt()
    }

    /// `sqrt(sum over faces h^d |(u_b - u_a)/h|^2)`.
    pub fn h1_seminorm(&self) -> f64 {
        self.gradient_pairing_unchecked(self).sqrt()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Discrete `int f phi dx`.
    pub fn weak_pairing(&self, phi: &ScalarField) -> Result<f64> {
        self.mesh.same_as(&phi.mesh)?;
        Ok(self.weak_pairing_unchecked(phi))
    }

    fn weak_pairing_unchecked(&self, phi: &ScalarField) -> f64 {
        self.mesh.cell_volume() * self.values.iter().zip(&phi.values).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Discrete `int grad f . grad g dx` with face differences.
    pub fn gradient_pairing(&self, other: &ScalarField) -> Result<f64> {
        self.mesh.same_as(&other.mesh)?;
        Ok(self.gradient_pairing_unchecked(other))
    }

    fn gradient_pairing_unchecked(&self, other: &ScalarField) -> f64 {
        let h = self.mesh.h();
        let w = self.mesh.cell_volume() / (h * h);
        let mut s = 0.0;
        for axis in 0..self.mesh.dim() {
            for (a, b) in self.mesh.faces(axis) {
                s += (self.at(b) - self.at(a)) * (other.at(b) - other.at(a));
            }
        }
        w * s
    }

    /// Cell average (meaningful on periodic meshes).
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn sub(&self, other: &ScalarField) -> Result<ScalarField> {
        self.mesh.same_as(&other.mesh)?;
        Ok(ScalarField {
            mesh: self.mesh,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        })
    }

    /// One CSV row per unknown: coordinates then value.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        if self.mesh.dim() == 1 {
            writeln!(w, "x,value")?;
        } else {
            writeln!(w, "x,y,value")?;
        }
        for (d, v) in self.values.iter().enumerate() {
            let c = self.mesh.dof_coords(d);
            if self.mesh.dim() == 1 {
                writeln!(w, "{},{}", c[0], v)?;
            } else {
                writeln!(w, "{},{},{}", c[0], c[1], v)?;
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(&mut f).map_err(|e| Error::io(path, e))
    }
}

/// The two continua on a common mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldPair {
    pub first: ScalarField,
    pub second: ScalarField,
}

impl FieldPair {
    pub fn new(first: ScalarField, second: ScalarField) -> Result<Self> {
        first.mesh().same_as(second.mesh())?;
        Ok(FieldPair { first, second })
    }

    pub fn zeros(mesh: Mesh) -> Self {
        FieldPair {
            first: ScalarField::zeros(mesh),
            second: ScalarField::zeros(mesh),
        }
    }

    pub fn mesh(&self) -> &Mesh {
        self.first.mesh()
    }

    pub fn get(&self, i: usize) -> &ScalarField {
        if i == 0 {
            &self.first
        } else {
            &self.second
        }
    }

    pub fn get_mut(&mut self, i: usize) -> &mut ScalarField {
        if i == 0 {
            &mut self.first
        } else {
            &mut self.second
        }
    }

    /// `sqrt(|f1|^2 + |f2|^2)` in `L^2(D)^2`.
    pub fn l2_norm(&self) -> f64 {
        self.first.l2_norm().hypot(self.second.l2_norm())
    }

    pub fn sub(&self, other: &FieldPair) -> Result<FieldPair> {
        Ok(FieldPair {
            first: self.first.sub(&other.first)?,
            second: self.second.sub(&other.second)?,
        })
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        let mesh = self.mesh();
        if mesh.dim() == 1 {
            writeln!(w, "x,first,second")?;
        } else {
            writeln!(w, "x,y,first,second")?;
        }
        for d in 0..mesh.ndof() {
            let c = mesh.dof_coords(d);
            let (a, b) = (self.first.values[d], self.second.values[d]);
            if mesh.dim() == 1 {
                writeln!(w, "{},{},{}", c[0], a, b)?;
            } else {
                writeln!(w, "{},{},{},{}", c[0], c[1], a, b)?;
            }
        }
        Ok(())
    }
}
