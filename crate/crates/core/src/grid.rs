//! Planar periodic grid geometry.
//!
//! Values live at cell centers: cell `(row, col)` is centered at
//! `(x0 + (col + 0.5) h, y0 + (row + 0.5) h)`. Both axes wrap.

use serde::{Deserialize, Serialize};

use crate::error::{DriftError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    /// Cell size in km.
    pub h: f64,
    /// Snapshot interval in hours.
    pub delta: f64,
    /// Number of snapshot intervals; fields carry `k_steps + 1` snapshots.
    pub k_steps: usize,
    pub origin: (f64, f64),
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, h: f64, delta: f64, k_steps: usize) -> Result<Self> {
        let spec = GridSpec {
            nx,
            ny,
            h,
            delta,
            k_steps,
            origin: (0.0, 0.0),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_origin(mut self, x0: f64, y0: f64) -> Self {
        self.origin = (x0, y0);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 4 || self.ny < 4 {
            return Err(DriftError::InvalidGrid(format!(
                "need at least 4x4 cells, got {}x{}",
                self.nx, self.ny
            )));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(DriftError::InvalidGrid(format!("cell size {} must be > 0", self.h)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(DriftError::InvalidGrid(format!("time step {} must be > 0", self.delta)));
        }
        if self.k_steps < 1 {
            return Err(DriftError::InvalidGrid("k_steps must be >= 1".into()));
        }
        if !(self.origin.0.is_finite() && self.origin.1.is_finite()) {
            return Err(DriftError::InvalidGrid("origin must be finite".into()));
        }
        Ok(())
    }

    /// Domain width in km.
    pub fn lx(&self) -> f64 {
        self.nx as f64 * self.h
    }

    /// Domain height in km.
    pub fn ly(&self) -> f64 {
        self.ny as f64 * self.h
    }

    /// Duration covered by the snapshots, `K * delta` hours.
    pub fn t_max(&self) -> f64 {
        self.k_steps as f64 * self.delta
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin.0 + (col as f64 + 0.5) * self.h,
            self.origin.1 + (row as f64 + 0.5) * self.h,
        )
    }

    /// Maps a position back into `[x0, x0 + lx) x [y0, y0 + ly)`.
    pub fn wrap(&self, pos: (f64, f64)) -> (f64, f64) {
        (
            self.origin.0 + (pos.0 - self.origin.0).rem_euclid(self.lx()),
            self.origin.1 + (pos.1 - self.origin.1).rem_euclid(self.ly()),
        )
    }

    /// Shortest periodic displacement `b - a`.
    pub fn displacement(&self, a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
        (
            min_image(b.0 - a.0, self.lx()),
            min_image(b.1 - a.1, self.ly()),
        )
    }

    pub fn distance(&self, a: (f64, f64), b: (f64, f64)) -> f64 {
        let (dx, dy) = self.displacement(a, b);
        dx.hypot(dy)
    }

    /// Index of the cell containing `pos` (after wrapping).
    pub fn cell_of(&self, pos: (f64, f64)) -> (usize, usize) {
        let (x, y) = self.wrap(pos);
        let col = (((x - self.origin.0) / self.h).floor() as usize).min(self.nx - 1);
        let row = (((y - self.origin.1) / self.h).floor() as usize).min(self.ny - 1);
        (row, col)
    }

    /// Bilinear stencil of `pos` over cell centers: four `(row, col, weight)`
    /// entries whose weights sum to one.
    pub fn bilinear_stencil(&self, pos: (f64, f64)) -> [(usize, usize, f64); 4] {
        let fx = (pos.0 - self.origin.0) / self.h - 0.5;
        let fy = (pos.1 - self.origin.1) / self.h - 0.5;
        let ix = fx.floor();
        let iy = fy.floor();
        let ax = fx - ix;
        let ay = fy - iy;
        let c0 = (ix as i64).rem_euclid(self.nx as i64) as usize;
        let r0 = (iy as i64).rem_euclid(self.ny as i64) as usize;
        let c1 = (c0 + 1) % self.nx;
        let r1 = (r0 + 1) % self.ny;
        [
            (r0, c0, (1.0 - ax) * (1.0 - ay)),
            (r0, c1, ax * (1.0 - ay)),
            (r1, c0, (1.0 - ax) * ay),
            (r1, c1, ax * ay),
        ]
    }
}

/// Wraps a displacement into `[-period/2, period/2)`.
pub fn min_image(d: f64, period: f64) -> f64 {
    d - period * (d / period + 0.5).floor()
}
