//! Gridded velocity fields: sampling, synthetic generators, vorticity and I/O.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DriftError, Result};
use crate::grid::GridSpec;
use crate::io::{self, Reader, Writer};

pub const FIELD_MAGIC: &[u8; 4] = b"DRFT";

/// Time sequence of collocated `(u, v)` rasters in km/h, laid out
/// `[time][row][col]` with `k_steps + 1` snapshots.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    spec: GridSpec,
    u: Vec<f64>,
    v: Vec<f64>,
    vmax: f64,
}

impl VelocityField {
    pub fn new(spec: GridSpec, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let n = (spec.k_steps + 1) * spec.cells();
        if u.len() != n || v.len() != n {
            return Err(DriftError::ShapeMismatch(format!(
                "velocity rasters must hold {} values, got u={} v={}",
                n,
                u.len(),
                v.len()
            )));
        }
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(DriftError::InvalidArgument("velocity contains non-finite values".into()));
        }
        let vmax = u
            .iter()
            .zip(&v)
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f64::max);
        Ok(VelocityField { spec, u, v, vmax })
    }

    pub fn zeros(spec: GridSpec) -> Result<Self> {
        let n = (spec.k_steps + 1) * spec.cells();
        Self::new(spec, vec![0.0; n], vec![0.0; n])
    }

    pub fn uniform(spec: GridSpec, u0: f64, v0: f64) -> Result<Self> {
        let n = (spec.k_steps + 1) * spec.cells();
        Self::new(spec, vec![u0; n], vec![v0; n])
    }

    /// Samples `f(x, y, t)` at every cell center and snapshot time.
    pub fn from_fn(spec: GridSpec, f: impl Fn(f64, f64, f64) -> (f64, f64)) -> Result<Self> {
        spec.validate()?;
        let n = (spec.k_steps + 1) * spec.cells();
        let mut u = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for k in 0..=spec.k_steps {
            let t = k as f64 * spec.delta;
            for row in 0..spec.ny {
                for col in 0..spec.nx {
                    let (x, y) = spec.cell_center(row, col);
                    let (a, b) = f(x, y, t);
                    u.push(a);
                    v.push(b);
                }
            }
        }
        Self::new(spec, u, v)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    /// Largest speed over all cells and snapshots.
    pub fn vmax(&self) -> f64 {
        self.vmax
    }

    pub fn index(&self, t: usize, row: usize, col: usize) -> usize {
        (t * self.spec.ny + row) * self.spec.nx + col
    }

    pub fn at(&self, t: usize, row: usize, col: usize) -> (f64, f64) {
        let i = self.index(t, row, col);
        (self.u[i], self.v[i])
    }

    /// Pointwise sum with an anomaly on the same grid.
    pub fn add(&self, du: &[f64], dv: &[f64]) -> Result<Self> {
        if du.len() != self.u.len() || dv.len() != self.v.len() {
            return Err(DriftError::ShapeMismatch("anomaly does not match field".into()));
        }
        let u = self.u.iter().zip(du).map(|(a, b)| a + b).collect();
        let v = self.v.iter().zip(dv).map(|(a, b)| a + b).collect();
        Self::new(self.spec, u, v)
    }

    /// Bilinear in space (periodic), linear in time between snapshots.
    pub fn sample(&self, pos: (f64, f64), t: f64) -> Result<(f64, f64)> {
        let t_max = self.spec.t_max();
        // Tolerate round-off from accumulated substep times.
        let slack = 1e-9 * t_max.max(1.0);
        if !(t >= -slack && t <= t_max + slack) {
            return Err(DriftError::TimeOutOfRange { t, t_max });
        }
        let s = (t / self.spec.delta).clamp(0.0, self.spec.k_steps as f64);
        let k0 = (s.floor() as usize).min(self.spec.k_steps - 1);
        let a = s - k0 as f64;
        let stencil = self.spec.bilinear_stencil(pos);
        let plane = self.spec.cells();
        let (mut u0, mut v0, mut u1, mut v1) = (0.0, 0.0, 0.0, 0.0);
        for (row, col, w) in stencil {
            let i = row * self.spec.nx + col;
            u0 += w * self.u[k0 * plane + i];
            v0 += w * self.v[k0 * plane + i];
            u1 += w * self.u[(k0 + 1) * plane + i];
            v1 += w * self.v[(k0 + 1) * plane + i];
        }
        Ok(((1.0 - a) * u0 + a * u1, (1.0 - a) * v0 + a * v1))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_writer().save(path)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_writer().finish()
    }

    fn to_writer(&self) -> Writer {
        let mut w = Writer::new(FIELD_MAGIC);
        w.grid(&self.spec);
        w.f64s(&self.u);
        w.f64s(&self.v);
        w
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&io::read_all(path)?)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data, FIELD_MAGIC, "velocity field")?;
        let spec = r.grid()?;
        let n = (spec.k_steps + 1) * spec.cells();
        let u = r.f64s(n)?;
        let v = r.f64s(n)?;
        r.expect_end()?;
        Self::new(spec, u, v)
    }
}

/// Writes a field to disk in the DRFT container.
pub fn write_field(field: &VelocityField, path: &Path) -> Result<()> {
    field.write(path)
}

pub fn read_field(path: &Path) -> Result<VelocityField> {
    VelocityField::read(path)
}

/// Time-periodic double gyre mapped onto the periodic box: four gyres, with
/// impermeable lines at `x = x0`, `x = x0 + lx/2`, `y = y0`, `y = y0 + ly/2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoubleGyre {
    /// Velocity amplitude, km/h.
    pub amplitude: f64,
    pub eps: f64,
    /// Angular frequency of the perturbation, rad/h.
    pub omega: f64,
    pub lx: f64,
    pub ly: f64,
    pub origin: (f64, f64),
}

impl DoubleGyre {
    pub fn for_grid(spec: &GridSpec, amplitude: f64, eps: f64, omega: f64) -> Self {
        DoubleGyre {
            amplitude,
            eps,
            omega,
            lx: spec.lx(),
            ly: spec.ly(),
            origin: spec.origin,
        }
    }

    fn coords(&self, x: f64, y: f64, t: f64) -> (f64, f64, f64, f64) {
        let xs = 2.0 * (x - self.origin.0).rem_euclid(self.lx) / self.lx;
        let ys = 2.0 * (y - self.origin.1).rem_euclid(self.ly) / self.ly;
        let a = self.eps * (self.omega * t).sin();
        let b = 1.0 - 2.0 * a;
        let f = a * xs * xs + b * xs;
        let df = 2.0 * a * xs + b;
        (f, df, ys, xs)
    }

    /// Stream function in km^2/h.
    pub fn stream(&self, x: f64, y: f64, t: f64) -> f64 {
        let (f, _, ys, _) = self.coords(x, y, t);
        self.amplitude * self.ly / (2.0 * PI) * (PI * f).sin() * (PI * ys).sin()
    }

    pub fn velocity(&self, x: f64, y: f64, t: f64) -> (f64, f64) {
        let (f, df, ys, _) = self.coords(x, y, t);
        let u = -self.amplitude * (PI * f).sin() * (PI * ys).cos();
        let v = self.amplitude * self.ly / self.lx * (PI * f).cos() * (PI * ys).sin() * df;
        (u, v)
    }
}

pub fn make_double_gyre(spec: GridSpec, amplitude: f64, eps: f64, omega: f64) -> Result<VelocityField> {
    if !(amplitude > 0.0) {
        return Err(DriftError::InvalidArgument("double gyre amplitude must be > 0".into()));
    }
    let gyre = DoubleGyre::for_grid(&spec, amplitude, eps, omega);
    VelocityField::from_fn(spec, |x, y, t| gyre.velocity(x, y, t))
}

/// Rigid rotation `u = -omega (y - yc)`, `v = omega (x - xc)` evaluated on
/// unwrapped cell-center coordinates.
pub fn make_solid_rotation(spec: GridSpec, omega: f64, center: (f64, f64)) -> Result<VelocityField> {
    if omega == 0.0 || !omega.is_finite() {
        return Err(DriftError::InvalidArgument("rotation rate must be nonzero".into()));
    }
    VelocityField::from_fn(spec, |x, y, _| (-omega * (y - center.1), omega * (x - center.0)))
}

/// Parameters of the random Gaussian-eddy generator. Lengths in cells,
/// speeds in cells per snapshot interval, so the defaults scale with the grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EddyConfig {
    pub n_eddies: usize,
    pub radius_cells: (f64, f64),
    pub peak_speed_cells: (f64, f64),
    pub drift_speed_cells: f64,
}

impl EddyConfig {
    pub fn new(n_eddies: usize) -> Self {
        EddyConfig {
            n_eddies,
            radius_cells: (2.5, 4.5),
            peak_speed_cells: (0.3, 0.6),
            drift_speed_cells: 0.1,
        }
    }
}

/// One Gaussian vortex: stream function `s * gamma * exp(-r^2 / (2 R^2))`
/// around a center moving at constant velocity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianEddy {
    pub center: (f64, f64),
    pub drift: (f64, f64),
    pub radius: f64,
    /// Signed circulation scale, km^2/h.
    pub gamma: f64,
}

impl GaussianEddy {
    /// Eddy whose azimuthal speed peaks at `peak_speed` (km/h) at `r = radius`.
    pub fn with_peak_speed(center: (f64, f64), radius: f64, peak_speed: f64) -> Self {
        GaussianEddy {
            center,
            drift: (0.0, 0.0),
            radius,
            gamma: peak_speed * radius * 0.5f64.exp(),
        }
    }

    pub fn velocity(&self, spec: &GridSpec, x: f64, y: f64, t: f64) -> (f64, f64) {
        let c = (self.center.0 + self.drift.0 * t, self.center.1 + self.drift.1 * t);
        let (dx, dy) = spec.displacement(c, (x, y));
        let r2 = self.radius * self.radius;
        let e = self.gamma * (-(dx * dx + dy * dy) / (2.0 * r2)).exp() / r2;
        (e * dy, -e * dx)
    }
}

pub fn make_random_eddies(spec: GridSpec, n_eddies: usize, seed: u64) -> Result<VelocityField> {
    make_random_eddies_with(spec, &EddyConfig::new(n_eddies), seed)
}

pub fn random_eddies(spec: &GridSpec, cfg: &EddyConfig, seed: u64) -> Result<Vec<GaussianEddy>> {
    if cfg.n_eddies < 1 {
        return Err(DriftError::InvalidArgument("need at least one eddy".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell_speed = spec.h / spec.delta;
    // Keep the Gaussian tail negligible at half the period.
    let r_cap = spec.lx().min(spec.ly()) / 10.0;
    let mut eddies = Vec::with_capacity(cfg.n_eddies);
    for _ in 0..cfg.n_eddies {
        let cx = spec.origin.0 + rng.gen::<f64>() * spec.lx();
        let cy = spec.origin.1 + rng.gen::<f64>() * spec.ly();
        let radius = (rng.gen_range(cfg.radius_cells.0..=cfg.radius_cells.1) * spec.h).min(r_cap);
        let speed = rng.gen_range(cfg.peak_speed_cells.0..=cfg.peak_speed_cells.1) * cell_speed;
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let angle = rng.gen::<f64>() * 2.0 * PI;
        let drift = rng.gen::<f64>().sqrt() * cfg.drift_speed_cells * cell_speed;
        let mut eddy = GaussianEddy::with_peak_speed((cx, cy), radius, sign * speed);
        eddy.drift = (drift * angle.cos(), drift * angle.sin());
        eddies.push(eddy);
    }
    Ok(eddies)
}

pub fn eddies_field(spec: GridSpec, eddies: &[GaussianEddy]) -> Result<VelocityField> {
    VelocityField::from_fn(spec, |x, y, t| {
        eddies.iter().fold((0.0, 0.0), |acc, e| {
            let (u, v) = e.velocity(&spec, x, y, t);
            (acc.0 + u, acc.1 + v)
        })
    })
}

pub fn make_random_eddies_with(spec: GridSpec, cfg: &EddyConfig, seed: u64) -> Result<VelocityField> {
    let eddies = random_eddies(&spec, cfg, seed)?;
    eddies_field(spec, &eddies)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VorticityField {
    pub spec: GridSpec,
    /// `(K+1, ny, nx)`, 1/h.
    pub zeta: Vec<f64>,
}

impl VorticityField {
    pub fn slice(&self, t: usize) -> &[f64] {
        let n = self.spec.cells();
        &self.zeta[t * n..(t + 1) * n]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        io::write_raster_csv(path, &self.spec, &self.zeta, "zeta")
    }
}

/// Centered-difference curl of a stack of `(u, v)` rasters on the periodic grid.
pub fn curl(spec: &GridSpec, u: &[f64], v: &[f64]) -> Vec<f64> {
    let (nx, ny) = (spec.nx, spec.ny);
    let plane = nx * ny;
    let inv = 1.0 / (2.0 * spec.h);
    let mut zeta = vec![0.0; u.len()];
    for (k, out) in zeta.chunks_mut(plane).enumerate() {
        let us = &u[k * plane..(k + 1) * plane];
        let vs = &v[k * plane..(k + 1) * plane];
        for row in 0..ny {
            let up = (row + 1) % ny;
            let dn = (row + ny - 1) % ny;
            for col in 0..nx {
                let rt = (col + 1) % nx;
                let lt = (col + nx - 1) % nx;
                let dvdx = (vs[row * nx + rt] - vs[row * nx + lt]) * inv;
                let dudy = (us[up * nx + col] - us[dn * nx + col]) * inv;
                out[row * nx + col] = dvdx - dudy;
            }
        }
    }
    zeta
}

pub fn vorticity(field: &VelocityField) -> VorticityField {
    VorticityField {
        spec: field.spec,
        zeta: curl(&field.spec, &field.u, &field.v),
    }
}
