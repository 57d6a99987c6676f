//! Two-dimensional loss-landscape slices around a parameter vector.

use std::fmt::Write as _;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{Objective, ParameterVector};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceGrid {
    /// Coordinates run over `[-extent, extent]` on both axes.
    pub extent: f64,
    /// Points per axis, at least 1. Odd counts put a cell on the origin.
    pub steps: usize,
}

impl SliceGrid {
    pub fn coords(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![0.0];
        }
        let last = (self.steps - 1) as f64;
        (0..self.steps)
            .map(|i| {
                let c = -self.extent + 2.0 * self.extent * i as f64 / last;
                // exact zero on the middle cell
                if 2 * i + 1 == self.steps {
                    0.0
                } else {
                    c
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeSlice {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `loss[i][j]` at `(xs[i], ys[j])`.
    pub loss: Vec<Vec<f64>>,
}

impl LandscapeSlice {
    /// `x,y,loss` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,loss\n");
        for (i, x) in self.xs.iter().enumerate() {
            for (j, y) in self.ys.iter().enumerate() {
                let _ = writeln!(out, "{x},{y},{}", self.loss[i][j]);
            }
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gram-Schmidt on a pair of directions.
pub fn orthonormalize(d1: &[f64], d2: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if d1.len() != d2.len() {
        return Err(Error::DimensionMismatch {
            expected: d1.len(),
            actual: d2.len(),
            context: "second direction",
        });
    }
    let n1 = dot(d1, d1).sqrt();
    if !(n1 > 1e-12) {
        return Err(Error::InvalidArgument("first direction is zero".into()));
    }
    let u1: Vec<f64> = d1.iter().map(|v| v / n1).collect();
    let proj = dot(d2, &u1);
    let r: Vec<f64> = d2.iter().zip(&u1).map(|(v, u)| v - proj * u).collect();
    let n2 = dot(&r, &r).sqrt();
    if !(n2 > 1e-12) {
        return Err(Error::InvalidArgument("directions are collinear".into()));
    }
    let u2 = r.into_iter().map(|v| v / n2).collect();
    Ok((u1, u2))
}

/// Two seeded Gaussian directions, orthonormalized.
pub fn random_directions(dim: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = stream(seed, "landscape-directions", 0);
    let d1: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
    let d2: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
    orthonormalize(&d1, &d2)
}

/// Loss at `params + x d1 + y d2` over the grid, after orthonormalizing the
/// directions.
pub fn landscape_slice(
    objective: &dyn Objective,
    params: &ParameterVector,
    directions: (&[f64], &[f64]),
    grid: SliceGrid,
) -> Result<LandscapeSlice> {
    if grid.steps == 0 || !(grid.extent >= 0.0 && grid.extent.is_finite()) {
        return Err(Error::InvalidArgument(format!("invalid grid {grid:?}")));
    }
    if directions.0.len() != params.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            actual: directions.0.len(),
            context: "landscape direction",
        });
    }
    let (u1, u2) = orthonormalize(directions.0, directions.1)?;
    let coords = grid.coords();
    let mut loss = Vec::with_capacity(coords.len());
    for &x in &coords {
        let row_base = params.offset(&u1, x);
        let row = coords
            .iter()
            .map(|&y| objective.loss(&row_base.offset(&u2, y)))
            .collect::<Result<Vec<f64>>>()?;
        loss.push(row);
    }
    Ok(LandscapeSlice {
        xs: coords.clone(),
        ys: coords,
        loss,
    })
}
