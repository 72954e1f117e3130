//! WebAssembly bindings for the static demo page in `www/`.
//!
//! All arrays cross the boundary as flat `Float64Array`s: trajectories as
//! `[traj][step][x, y]` in km, rasters as `[row][col]`.

use std::f64::consts::PI;

use driftlab_core::field::{curl, eddies_field, make_double_gyre, GaussianEddy};
use driftlab_core::fokkerplanck::{init_density, propagate_density};
use driftlab_core::inversion::{corrected_track, invert_through_oracle, AnomalyField, InversionConfig};
use driftlab_core::lagrangian::{advect_ensemble, advect_rk4, perturb_seeds, DEFAULT_SUBSTEPS};
use driftlab_core::{GridSpec, Integrator, Result, Trajectory, VelocityField};
use wasm_bindgen::prelude::*;

fn js<T>(r: Result<T>) -> std::result::Result<T, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

fn flatten(trajectories: &[&Trajectory]) -> Vec<f64> {
    trajectories
        .iter()
        .flat_map(|t| t.positions.iter().flat_map(|p| [p.0, p.1]))
        .collect()
}

/// A perturbed double gyre on a square periodic grid.
#[wasm_bindgen]
pub struct Demo {
    field: VelocityField,
}

impl Demo {
    pub fn build(n: usize, amplitude: f64, eps: f64, period_hours: f64) -> Result<Demo> {
        let spec = GridSpec::new(n, n, 10.0, 6.0, 16)?;
        Ok(Demo {
            field: make_double_gyre(spec, amplitude, eps, 2.0 * PI / period_hours)?,
        })
    }

    pub fn release_drifters(&self, x: f64, y: f64, radius_km: f64, count: usize, seed: u64) -> Result<Vec<f64>> {
        let seeds = perturb_seeds(&[(x, y)], radius_km, count, seed)?;
        let ens = advect_ensemble(&self.field, &seeds, Integrator::Rk4, DEFAULT_SUBSTEPS, false)?;
        Ok(flatten(&ens.trajectories.iter().collect::<Vec<_>>()))
    }

    pub fn spread_density(&self, x: f64, y: f64, sigma_km: f64) -> Result<Vec<f64>> {
        let p0 = init_density(self.field.spec(), (x, y), sigma_km)?;
        Ok(propagate_density(&self.field, &p0)?.p)
    }

    /// Injects an eddy, builds the drifter target under it and retrieves a
    /// time-constant anomaly through the propagator. Returns the target,
    /// uncorrected and corrected tracks followed by the anomaly vorticity.
    pub fn retrieve_eddy(&self, seed: (f64, f64), eddy: (f64, f64), radius_km: f64, peak: f64, steps: usize) -> Result<Vec<f64>> {
        let spec = *self.field.spec();
        let extra = eddies_field(spec, &[GaussianEddy::with_peak_speed(eddy, radius_km, peak)])?;
        let target = advect_rk4(&self.field.add(extra.u(), extra.v())?, seed, DEFAULT_SUBSTEPS)?;
        let config = InversionConfig {
            n_steps: steps,
            time_constant: true,
            ..InversionConfig::default()
        };
        let result = invert_through_oracle(&self.field, &target, &config)?;
        let before = corrected_track(&self.field, &AnomalyField::zeros(spec), seed, 0.0)?;
        let after = corrected_track(&self.field, &result.anomaly, seed, 0.0)?;
        let plane = spec.cells();
        let mut out = flatten(&[&target, &before, &after]);
        out.extend(curl(&spec, &result.anomaly.du[..plane], &result.anomaly.dv[..plane]));
        Ok(out)
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(n: usize, amplitude: f64, eps: f64, period_hours: f64) -> std::result::Result<Demo, JsError> {
        js(Demo::build(n, amplitude, eps, period_hours))
    }

    pub fn n(&self) -> usize {
        self.field.spec().nx
    }

    pub fn steps(&self) -> usize {
        self.field.spec().k_steps
    }

    pub fn domain_km(&self) -> f64 {
        self.field.spec().lx()
    }

    /// Speed magnitude at `t = 0`.
    pub fn speed(&self) -> Vec<f64> {
        let plane = self.field.spec().cells();
        self.field.u()[..plane]
            .iter()
            .zip(&self.field.v()[..plane])
            .map(|(u, v)| u.hypot(*v))
            .collect()
    }

    pub fn release(&self, x: f64, y: f64, radius_km: f64, count: usize, seed: u32) -> std::result::Result<Vec<f64>, JsError> {
        js(self.release_drifters(x, y, radius_km, count, seed as u64))
    }

    pub fn density(&self, x: f64, y: f64, sigma_km: f64) -> std::result::Result<Vec<f64>, JsError> {
        js(self.spread_density(x, y, sigma_km))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn retrieve(
        &self,
        seed_x: f64,
        seed_y: f64,
        eddy_x: f64,
        eddy_y: f64,
        radius_km: f64,
        peak: f64,
        steps: usize,
    ) -> std::result::Result<Vec<f64>, JsError> {
        js(self.retrieve_eddy((seed_x, seed_y), (eddy_x, eddy_y), radius_km, peak, steps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outputs_have_the_documented_layout() {
        let demo = Demo::build(16, 1.0, 0.25, 48.0).unwrap();
        let k = demo.field.spec().k_steps + 1;
        assert_eq!(demo.release_drifters(40.0, 60.0, 10.0, 5, 1).unwrap().len(), 5 * k * 2);
        let d = demo.spread_density(40.0, 60.0, 0.0).unwrap();
        assert_eq!(d.len(), k * 256);
        assert!((d[(k - 1) * 256..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let r = demo.retrieve_eddy((40.0, 60.0), (70.0, 70.0), 30.0, 0.5, 5).unwrap();
        assert_eq!(r.len(), 3 * k * 2 + 256);
    }
}
