//! Reference particle advection through gridded velocity fields.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DriftError, Result};
use crate::field::VelocityField;
use crate::grid::GridSpec;
use crate::io::{self, Reader, Writer};
use crate::par;

pub const ENSEMBLE_MAGIC: &[u8; 4] = b"DTRJ";

/// Default internal substeps per snapshot interval (1 h for 6 h snapshots).
pub const DEFAULT_SUBSTEPS: usize = 6;

pub type Point = (f64, f64);

/// Positions at `t = k * delta` for `k = 0..=K`, wrapped into the domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub spec: GridSpec,
    pub positions: Vec<Point>,
}

impl Trajectory {
    pub fn new(spec: GridSpec, positions: Vec<Point>) -> Result<Self> {
        if positions.len() != spec.k_steps + 1 {
            return Err(DriftError::ShapeMismatch(format!(
                "trajectory needs {} positions, got {}",
                spec.k_steps + 1,
                positions.len()
            )));
        }
        if positions.iter().any(|p| !(p.0.is_finite() && p.1.is_finite())) {
            return Err(DriftError::InvalidArgument("non-finite trajectory position".into()));
        }
        Ok(Trajectory { spec, positions })
    }

    pub fn seed(&self) -> Point {
        self.positions[0]
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn last(&self) -> Point {
        *self.positions.last().unwrap()
    }

    /// Every position held at the seed.
    pub fn persistence(spec: GridSpec, r0: Point) -> Self {
        Trajectory {
            spec,
            positions: vec![r0; spec.k_steps + 1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    Rk4,
    Euler,
}

fn blowup(step: usize, p: Point) -> DriftError {
    DriftError::NumericalBlowup {
        step,
        what: format!("particle position became ({}, {})", p.0, p.1),
    }
}

fn advect(field: &VelocityField, r0: Point, substeps: usize, method: Integrator) -> Result<Trajectory> {
    if substeps < 1 {
        return Err(DriftError::InvalidArgument("substeps_per_delta must be >= 1".into()));
    }
    if !(r0.0.is_finite() && r0.1.is_finite()) {
        return Err(blowup(0, r0));
    }
    let spec = *field.spec();
    let dt = spec.delta / substeps as f64;
    let mut p = r0;
    let mut positions = Vec::with_capacity(spec.k_steps + 1);
    positions.push(r0);
    for k in 0..spec.k_steps {
        let t0 = k as f64 * spec.delta;
        for s in 0..substeps {
            let t = t0 + s as f64 * dt;
            p = match method {
                Integrator::Rk4 => rk4_step(field, p, t, dt)?,
                Integrator::Euler => {
                    let (u, v) = field.sample(p, t)?;
                    (p.0 + dt * u, p.1 + dt * v)
                }
            };
            if !(p.0.is_finite() && p.1.is_finite()) {
                return Err(blowup(k + 1, p));
            }
        }
        positions.push(spec.wrap(p));
    }
    Ok(Trajectory { spec, positions })
}

fn rk4_step(field: &VelocityField, p: Point, t: f64, dt: f64) -> Result<Point> {
    let half = 0.5 * dt;
    let k1 = field.sample(p, t)?;
    let k2 = field.sample((p.0 + half * k1.0, p.1 + half * k1.1), t + half)?;
    let k3 = field.sample((p.0 + half * k2.0, p.1 + half * k2.1), t + half)?;
    let k4 = field.sample((p.0 + dt * k3.0, p.1 + dt * k3.1), t + dt)?;
    Ok((
        p.0 + dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
        p.1 + dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
    ))
}

/// Classical fourth-order Runge-Kutta with `substeps` internal steps per
/// snapshot interval.
pub fn advect_rk4(field: &VelocityField, r0: Point, substeps: usize) -> Result<Trajectory> {
    advect(field, r0, substeps, Integrator::Rk4)
}

/// Forward Euler; the pointwise one-step update baseline.
pub fn advect_euler(field: &VelocityField, r0: Point, substeps: usize) -> Result<Trajectory> {
    advect(field, r0, substeps, Integrator::Euler)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub seeds: Vec<Point>,
    pub trajectories: Vec<Trajectory>,
}

impl Ensemble {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        if let Some(first) = trajectories.first() {
            if trajectories.iter().any(|t| t.spec != first.spec) {
                return Err(DriftError::ShapeMismatch("ensemble members use different grids".into()));
            }
        }
        Ok(Ensemble {
            seeds: trajectories.iter().map(|t| t.seed()).collect(),
            trajectories,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn spec(&self) -> Option<&GridSpec> {
        self.trajectories.first().map(|t| &t.spec)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let spec = self
            .spec()
            .ok_or_else(|| DriftError::InvalidArgument("cannot serialize an empty ensemble".into()))?;
        let mut w = Writer::new(ENSEMBLE_MAGIC);
        w.grid(spec);
        w.u32(self.len() as u32);
        for s in &self.seeds {
            w.f64(s.0);
            w.f64(s.1);
        }
        for t in &self.trajectories {
            for p in &t.positions {
                w.f64(p.0);
                w.f64(p.1);
            }
        }
        Ok(w.finish())
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data, ENSEMBLE_MAGIC, "trajectory ensemble")?;
        let spec = r.grid()?;
        let n = r.u32()? as usize;
        let seeds = r.f64s(2 * n)?;
        let pos = r.f64s(2 * n * (spec.k_steps + 1))?;
        r.expect_end()?;
        let trajectories = pos
            .chunks(2 * (spec.k_steps + 1))
            .map(|c| Trajectory {
                spec,
                positions: c.chunks(2).map(|p| (p[0], p[1])).collect(),
            })
            .collect();
        Ok(Ensemble {
            seeds: seeds.chunks(2).map(|p| (p[0], p[1])).collect(),
            trajectories,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&io::read_all(path)?)
    }

    /// CSV with header `traj_id,step,t_hours,x_km,y_km`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "traj_id,step,t_hours,x_km,y_km")?;
        for (id, t) in self.trajectories.iter().enumerate() {
            for (k, p) in t.positions.iter().enumerate() {
                writeln!(out, "{},{},{},{},{}", id, k, k as f64 * t.spec.delta, p.0, p.1)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Advects every seed independently. Output order follows `seeds`; results
/// are identical for serial and parallel execution.
pub fn advect_ensemble(
    field: &VelocityField,
    seeds: &[Point],
    integrator: Integrator,
    substeps: usize,
    parallel: bool,
) -> Result<Ensemble> {
    if seeds.is_empty() {
        return Err(DriftError::InvalidArgument("ensemble needs at least one seed".into()));
    }
    let trajectories = par::map(seeds, parallel, |&r0| advect(field, r0, substeps, integrator))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Ensemble {
        seeds: seeds.to_vec(),
        trajectories,
    })
}

/// `n_per_seed` points uniform in the disk of `radius_km` around each seed,
/// grouped by seed.
pub fn perturb_seeds(seeds: &[Point], radius_km: f64, n_per_seed: usize, rng_seed: u64) -> Result<Vec<Point>> {
    if !(radius_km > 0.0) {
        return Err(DriftError::InvalidArgument("perturbation radius must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = Vec::with_capacity(seeds.len() * n_per_seed);
    for s in seeds {
        for _ in 0..n_per_seed {
            let r = radius_km * rng.gen::<f64>().sqrt();
            let theta = 2.0 * PI * rng.gen::<f64>();
            out.push((s.0 + r * theta.cos(), s.1 + r * theta.sin()));
        }
    }
    Ok(out)
}
