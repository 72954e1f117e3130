//! Trajectory skill metrics: separation statistics, position RMSE, velocity
//! autocorrelation and the Lagrangian time scale.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DriftError, Result};
use crate::lagrangian::{Ensemble, Trajectory};
use crate::plot::{self, Series};
use crate::training::loss_liu;

/// Mean and quartiles of the reference-vs-simulation distance at every step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationCurve {
    pub mean: Vec<f64>,
    pub q1: Vec<f64>,
    pub q3: Vec<f64>,
}

fn check_ensembles(reference: &Ensemble, sim: &Ensemble) -> Result<()> {
    if reference.is_empty() || reference.len() != sim.len() {
        return Err(DriftError::ShapeMismatch(format!(
            "ensembles must be non-empty and matched, got {} and {}",
            reference.len(),
            sim.len()
        )));
    }
    for (a, b) in reference.trajectories.iter().zip(&sim.trajectories) {
        if a.len() != b.len() || a.spec != b.spec {
            return Err(DriftError::ShapeMismatch("paired trajectories differ in grid or length".into()));
        }
    }
    Ok(())
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn separation_curve(reference: &Ensemble, sim: &Ensemble) -> Result<SeparationCurve> {
    check_ensembles(reference, sim)?;
    let steps = reference.trajectories[0].len();
    let mut curve = SeparationCurve {
        mean: Vec::with_capacity(steps),
        q1: Vec::with_capacity(steps),
        q3: Vec::with_capacity(steps),
    };
    let mut d = Vec::with_capacity(reference.len());
    for k in 0..steps {
        d.clear();
        for (a, b) in reference.trajectories.iter().zip(&sim.trajectories) {
            d.push(a.spec.distance(a.positions[k], b.positions[k]));
        }
        curve.mean.push(d.iter().sum::<f64>() / d.len() as f64);
        d.sort_by(f64::total_cmp);
        curve.q1.push(quantile(&d, 0.25));
        curve.q3.push(quantile(&d, 0.75));
    }
    Ok(curve)
}

/// Root mean squared periodic distance at one step (km).
pub fn rmse_positions(reference: &Ensemble, sim: &Ensemble, step: usize) -> Result<f64> {
    check_ensembles(reference, sim)?;
    if step >= reference.trajectories[0].len() {
        return Err(DriftError::InvalidArgument(format!("step {step} beyond trajectory length")));
    }
    let total: f64 = reference
        .trajectories
        .iter()
        .zip(&sim.trajectories)
        .map(|(a, b)| {
            let d = a.spec.displacement(a.positions[step], b.positions[step]);
            d.0 * d.0 + d.1 * d.1
        })
        .sum();
    Ok((total / reference.len() as f64).sqrt())
}

/// Ensemble-averaged autocorrelation of the finite-difference velocities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Autocorrelation {
    /// Lags `0..=max_lag`; empty when every trajectory was excluded.
    pub r_u: Vec<f64>,
    pub r_v: Vec<f64>,
    /// Trajectories dropped per component for zero velocity variance.
    pub excluded_u: usize,
    pub excluded_v: usize,
}

/// Variance below this (km^2/h^2) counts as zero.
const VARIANCE_FLOOR: f64 = 1e-20;

fn component_acf(series: &[f64], max_lag: usize) -> Option<Vec<f64>> {
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let x: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let c0 = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if !(c0 > VARIANCE_FLOOR) {
        return None;
    }
    Some(
        (0..=max_lag)
            .map(|lag| x[..n - lag].iter().zip(&x[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64 / c0)
            .collect(),
    )
}

/// Biased sample autocorrelation of mean-removed velocities, normalized per
/// trajectory so `R(0) = 1`, then averaged over the included trajectories.
pub fn velocity_autocorrelation(ensemble: &Ensemble, max_lag: usize) -> Result<Autocorrelation> {
    let first = ensemble
        .trajectories
        .first()
        .ok_or_else(|| DriftError::InvalidArgument("empty ensemble".into()))?;
    let k = first.len() - 1;
    if k < 2 {
        return Err(DriftError::InvalidArgument("autocorrelation needs K >= 2".into()));
    }
    if max_lag >= k {
        return Err(DriftError::InvalidArgument(format!("max_lag {max_lag} must be < K = {k}")));
    }
    let mut sum_u = vec![0.0; max_lag + 1];
    let mut sum_v = vec![0.0; max_lag + 1];
    let (mut n_u, mut n_v) = (0usize, 0usize);
    for t in &ensemble.trajectories {
        let (us, vs) = velocities(t);
        if let Some(r) = component_acf(&us, max_lag) {
            sum_u.iter_mut().zip(&r).for_each(|(a, b)| *a += b);
            n_u += 1;
        }
        if let Some(r) = component_acf(&vs, max_lag) {
            sum_v.iter_mut().zip(&r).for_each(|(a, b)| *a += b);
            n_v += 1;
        }
    }
    let finish = |s: Vec<f64>, n: usize| if n == 0 { Vec::new() } else { s.into_iter().map(|v| v / n as f64).collect() };
    let total = ensemble.len();
    Ok(Autocorrelation {
        r_u: finish(sum_u, n_u),
        r_v: finish(sum_v, n_v),
        excluded_u: total - n_u,
        excluded_v: total - n_v,
    })
}

fn velocities(t: &Trajectory) -> (Vec<f64>, Vec<f64>) {
    t.positions
        .windows(2)
        .map(|w| {
            let d = t.spec.displacement(w[0], w[1]);
            (d.0 / t.spec.delta, d.1 / t.spec.delta)
        })
        .unzip()
}

/// Trapezoidal integral of `R` from lag 0 to its first zero crossing (linear
/// interpolation inside the crossing interval), or to the last lag if it
/// never crosses; `delta_hours` per lag, result in days.
pub fn lagrangian_timescale(r: &[f64], delta_hours: f64) -> f64 {
    let mut area = 0.0;
    for w in r.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b > 0.0 {
            area += 0.5 * (a + b);
        } else {
            if a > 0.0 {
                area += 0.5 * a * a / (a - b);
            }
            break;
        }
    }
    area * delta_hours / 24.0
}

/// Scalars of a reference-vs-simulation comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_trajectories: usize,
    pub k_steps: usize,
    pub delta_hours: f64,
    pub final_separation_mean_km: f64,
    pub final_separation_q1_km: f64,
    pub final_separation_q3_km: f64,
    pub rmse_final_km: f64,
    pub liu_index: Option<f64>,
    pub timescale_u_ref_days: f64,
    pub timescale_v_ref_days: f64,
    pub timescale_u_sim_days: f64,
    pub timescale_v_sim_days: f64,
    pub timescale_u_abs_diff_days: f64,
    pub timescale_v_abs_diff_days: f64,
    pub excluded_ref: [usize; 2],
    pub excluded_sim: [usize; 2],
}

/// Full evaluation bundle: scalars plus curves.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub separation: SeparationCurve,
    pub acf_ref: Autocorrelation,
    pub acf_sim: Autocorrelation,
}

pub fn evaluate(reference: &Ensemble, sim: &Ensemble) -> Result<Evaluation> {
    let separation = separation_curve(reference, sim)?;
    let spec = reference.trajectories[0].spec;
    let k = spec.k_steps;
    let liu = loss_liu(&reference.trajectories, &sim.trajectories).ok();
    let rmse = rmse_positions(reference, sim, k)?;
    let (acf_ref, acf_sim) = if k >= 2 {
        let lag = k - 1;
        (velocity_autocorrelation(reference, lag)?, velocity_autocorrelation(sim, lag)?)
    } else {
        let empty = Autocorrelation {
            r_u: Vec::new(),
            r_v: Vec::new(),
            excluded_u: reference.len(),
            excluded_v: reference.len(),
        };
        (empty.clone(), empty)
    };
    let ts = |r: &[f64]| lagrangian_timescale(r, spec.delta);
    let report = MetricsReport {
        n_trajectories: reference.len(),
        k_steps: k,
        delta_hours: spec.delta,
        final_separation_mean_km: separation.mean[k],
        final_separation_q1_km: separation.q1[k],
        final_separation_q3_km: separation.q3[k],
        rmse_final_km: rmse,
        liu_index: liu,
        timescale_u_ref_days: ts(&acf_ref.r_u),
        timescale_v_ref_days: ts(&acf_ref.r_v),
        timescale_u_sim_days: ts(&acf_sim.r_u),
        timescale_v_sim_days: ts(&acf_sim.r_v),
        timescale_u_abs_diff_days: (ts(&acf_ref.r_u) - ts(&acf_sim.r_u)).abs(),
        timescale_v_abs_diff_days: (ts(&acf_ref.r_v) - ts(&acf_sim.r_v)).abs(),
        excluded_ref: [acf_ref.excluded_u, acf_ref.excluded_v],
        excluded_sim: [acf_sim.excluded_u, acf_sim.excluded_v],
    };
    Ok(Evaluation {
        report,
        separation,
        acf_ref,
        acf_sim,
    })
}

impl Evaluation {
    /// Writes `metrics.json`, `separation.csv`, `autocorrelation.csv`,
    /// `separation.svg` and `autocorrelation.svg` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&self.report)?)?;
        let dt = self.report.delta_hours;

        let mut out = BufWriter::new(File::create(dir.join("separation.csv"))?);
        writeln!(out, "step,t_hours,mean_km,q1_km,q3_km")?;
        for k in 0..self.separation.mean.len() {
            writeln!(
                out,
                "{},{},{},{},{}",
                k,
                k as f64 * dt,
                self.separation.mean[k],
                self.separation.q1[k],
                self.separation.q3[k]
            )?;
        }
        out.flush()?;

        let lags = self.acf_ref.r_u.len().max(self.acf_ref.r_v.len()).max(self.acf_sim.r_u.len()).max(self.acf_sim.r_v.len());
        let cell = |v: &[f64], i: usize| v.get(i).map(|x| x.to_string()).unwrap_or_default();
        let mut out = BufWriter::new(File::create(dir.join("autocorrelation.csv"))?);
        writeln!(out, "lag,t_hours,r_u_ref,r_v_ref,r_u_sim,r_v_sim")?;
        for i in 0..lags {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                i,
                i as f64 * dt,
                cell(&self.acf_ref.r_u, i),
                cell(&self.acf_ref.r_v, i),
                cell(&self.acf_sim.r_u, i),
                cell(&self.acf_sim.r_v, i)
            )?;
        }
        out.flush()?;

        let days: Vec<f64> = (0..self.separation.mean.len()).map(|k| k as f64 * dt / 24.0).collect();
        let svg = plot::line_chart(
            "Separation distance",
            "time (days)",
            "distance (km)",
            &[Series {
                label: "mean (band: q1-q3)",
                x: &days,
                y: &self.separation.mean,
                band: Some((&self.separation.q1, &self.separation.q3)),
            }],
        );
        std::fs::write(dir.join("separation.svg"), svg)?;

        let lag_days: Vec<f64> = (0..lags).map(|i| i as f64 * dt / 24.0).collect();
        let mut series = Vec::new();
        for (label, r) in [
            ("R_u reference", &self.acf_ref.r_u),
            ("R_v reference", &self.acf_ref.r_v),
            ("R_u simulated", &self.acf_sim.r_u),
            ("R_v simulated", &self.acf_sim.r_v),
        ] {
            if !r.is_empty() {
                series.push(Series {
                    label,
                    x: &lag_days[..r.len()],
                    y: r,
                    band: None,
                });
            }
        }
        let svg = plot::line_chart("Velocity autocorrelation", "lag (days)", "R", &series);
        std::fs::write(dir.join("autocorrelation.svg"), svg)?;
        Ok(())
    }
}
