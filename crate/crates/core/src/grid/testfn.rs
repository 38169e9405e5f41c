//! Smooth compactly supported test functions and time profiles.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Mesh, ScalarField};

/// `exp(1 - 1/(1 - r^2))` with `r = |x - center| / width`, zero for `r >= 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: Vec<f64>,
    pub width: f64,
}

impl Bump {
    pub fn new(center: Vec<f64>, width: f64) -> Self {
        Bump { center, width }
    }

    fn r2(&self, x: &[f64]) -> f64 {
        self.center
            .iter()
            .zip(x)
            .map(|(c, xi)| ((xi - c) / self.width).powi(2))
            .sum()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let r2 = self.r2(x);
        if r2 >= 1.0 {
            0.0
        } else {
            (1.0 - 1.0 / (1.0 - r2)).exp()
        }
    }

    pub fn gradient(&self, x: &[f64]) -> [f64; 2] {
        let r2 = self.r2(x);
        let mut g = [0.0; 2];
        if r2 >= 1.0 {
            return g;
        }
        let s = 1.0 - r2;
        let factor = -self.value(x) * 2.0 / (s * s * self.width * self.width);
        for (gi, (c, xi)) in g.iter_mut().zip(self.center.iter().zip(x)) {
            *gi = factor * (xi - c);
        }
        g
    }

    /// Sample on a mesh; the boundary cutoff is exact when the support lies
    /// inside the domain.
    pub fn sample(&self, mesh: Mesh) -> ScalarField {
        ScalarField::from_fn(mesh, |x| self.value(x))
    }

    /// The panel of three bumps used by the weak metrics.
    pub fn panel(dim: usize) -> Vec<Bump> {
        [0.3, 0.5, 0.7]
            .iter()
            .map(|&c| Bump::new(vec![c; dim], 0.2))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeProfile {
    Constant,
    /// `sin(pi t / T)`.
    HalfSine,
}

impl TimeProfile {
    pub fn eval(&self, t: f64, t_end: f64) -> f64 {
        match self {
            TimeProfile::Constant => 1.0,
            TimeProfile::HalfSine => {
                if t_end > 0.0 {
                    (PI * t / t_end).sin()
                } else {
                    0.0
                }
            }
        }
    }

    pub fn panel() -> [TimeProfile; 2] {
        [TimeProfile::Constant, TimeProfile::HalfSine]
    }
}
