//! Physical grid geometry shared by volumes and masks.
//!
//! Data arrays are indexed `[i, j, k]` along the header axes, so axis `a`
//! of the array pairs with `spacing[a]`. World coordinates are RAS mm:
//! `world = direction * diag(spacing) * index + origin`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DIRECTION_ORTHO_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// Voxel edge lengths in mm, per array axis.
    pub spacing: [f64; 3],
    /// World position of voxel (0,0,0) in mm.
    pub origin: [f64; 3],
    /// Orthonormal axis matrix; column `a` is the world direction of array axis `a`.
    pub direction: [[f64; 3]; 3],
}

impl Geometry {
    pub fn identity(spacing: [f64; 3]) -> Self {
        Geometry {
            spacing,
            origin: [0.0; 3],
            direction: IDENTITY_DIRECTION,
        }
    }

    pub fn direction_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.direction[r][c])
    }

    /// Voxel index -> world mm.
    pub fn index_to_world(&self, idx: [f64; 3]) -> [f64; 3] {
        let d = self.direction_matrix();
        let v = d * Vector3::new(
            idx[0] * self.spacing[0],
            idx[1] * self.spacing[1],
            idx[2] * self.spacing[2],
        );
        [
            v[0] + self.origin[0],
            v[1] + self.origin[1],
            v[2] + self.origin[2],
        ]
    }

    /// World mm -> (continuous) voxel index.
    pub fn world_to_index(&self, world: [f64; 3]) -> [f64; 3] {
        let d = self.direction_matrix();
        // Orthonormal, so the inverse is the transpose.
        let v = d.transpose()
            * Vector3::new(
                world[0] - self.origin[0],
                world[1] - self.origin[1],
                world[2] - self.origin[2],
            );
        [
            v[0] / self.spacing[0],
            v[1] / self.spacing[1],
            v[2] / self.spacing[2],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (a, &s) in self.spacing.iter().enumerate() {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Validation(format!(
                    "spacing[{a}] = {s} must be positive and finite"
                )));
            }
        }
        let d = self.direction_matrix();
        let residual = (d.transpose() * d - Matrix3::identity()).abs().max();
        if residual > DIRECTION_ORTHO_TOL {
            return Err(Error::Validation(format!(
                "direction matrix not orthonormal (max residual {residual:.3e})"
            )));
        }
        Ok(())
    }

    /// Component-wise closeness in mm terms; direction compared entry-wise.
    pub fn approx_eq(&self, other: &Geometry, tol_mm: f64) -> bool {
        let sp = self
            .spacing
            .iter()
            .zip(&other.spacing)
            .all(|(a, b)| (a - b).abs() <= tol_mm);
        let or = self
            .origin
            .iter()
            .zip(&other.origin)
            .all(|(a, b)| (a - b).abs() <= tol_mm);
        let di = (self.direction_matrix() - other.direction_matrix())
            .abs()
            .max()
            <= tol_mm;
        sp && or && di
    }
}

pub const IDENTITY_DIRECTION: [[f64; 3]; 3] =
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// For each world axis, the array axis whose direction column dominates it,
/// with the sign of that component. Greedy max-magnitude assignment keeps the
/// result a permutation even for degenerate oblique matrices.
pub fn closest_canonical_axes(direction: &Matrix3<f64>) -> [(usize, f64); 3] {
    let mut pairs: Vec<(usize, usize, f64)> = Vec::with_capacity(9);
    for world in 0..3 {
        for axis in 0..3 {
            pairs.push((world, axis, direction[(world, axis)]));
        }
    }
    pairs.sort_by(|a, b| b.2.abs().partial_cmp(&a.2.abs()).unwrap());
    let mut out = [(usize::MAX, 0.0); 3];
    let mut world_used = [false; 3];
    let mut axis_used = [false; 3];
    for (world, axis, val) in pairs {
        if !world_used[world] && !axis_used[axis] {
            world_used[world] = true;
            axis_used[axis] = true;
            out[world] = (axis, if val < 0.0 { -1.0 } else { 1.0 });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn world_round_trip() {
        let g = Geometry {
            spacing: [2.0, 1.0, 0.5],
            origin: [10.0, -5.0, 3.0],
            direction: IDENTITY_DIRECTION,
        };
        let w = g.index_to_world([3.0, 4.0, 5.0]);
        assert_eq!(w, [16.0, -1.0, 5.5]);
        let i = g.world_to_index(w);
        for (a, b) in i.iter().zip(&[3.0, 4.0, 5.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_orthonormal() {
        let mut g = Geometry::identity([1.0; 3]);
        g.direction[0][1] = 0.5;
        assert!(g.validate().is_err());
    }

    #[test]
    fn canonical_axes_of_permutation() {
        // Array axis 0 points along -world-y, axis 1 along world-z, axis 2 along world-x.
        let d = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        let axes = closest_canonical_axes(&d);
        assert_eq!(axes[0].0, 2);
        assert_eq!(axes[1], (0, -1.0));
        assert_eq!(axes[2], (1, 1.0));
    }
}
