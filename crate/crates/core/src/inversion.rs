//! Retrieval of velocity anomalies by fixed-step gradient descent through a
//! frozen DriftNet or through the density propagator.
//!
//! The misfit is the squared norm of the periodic position error over steps
//! `1..K` in cell units, `sum_k |d_k / h|^2`, plus `l2_weight * ||du||^2`
//! with the anomaly in km/h.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::driftnet::{to_trajectory, DriftNet};
use crate::error::{DriftError, Result};
use crate::field::{curl, VelocityField};
use crate::fokkerplanck::{corrected_snapshots, init_density, track_on_tape};
use crate::grid::GridSpec;
use crate::io;
use crate::lagrangian::Trajectory;
use crate::plot;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub n_steps: usize,
    pub step_size: f64,
    pub l2_weight: f64,
    /// Optimize one `(ny, nx)` anomaly shared by every snapshot.
    pub time_constant: bool,
    /// Width of the initial density for the propagator path (km; 0 = point mass).
    pub sigma_km: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            n_steps: 200,
            step_size: 5e-2,
            l2_weight: 0.0,
            time_constant: false,
            sigma_km: 0.0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 1 || !(self.step_size > 0.0) || !(self.l2_weight >= 0.0) || !(self.sigma_km >= 0.0) {
            return Err(DriftError::InvalidArgument(
                "inversion needs n_steps >= 1, step_size > 0, l2_weight >= 0, sigma >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Velocity correction on the base field's grid, `(K+1, ny, nx)` per
/// component (km/h).
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyField {
    pub spec: GridSpec,
    pub du: Vec<f64>,
    pub dv: Vec<f64>,
}

impl AnomalyField {
    pub fn zeros(spec: GridSpec) -> Self {
        let n = (spec.k_steps + 1) * spec.cells();
        AnomalyField {
            spec,
            du: vec![0.0; n],
            dv: vec![0.0; n],
        }
    }

    /// One plane repeated over every snapshot.
    pub fn broadcast(spec: GridSpec, du: &[f64], dv: &[f64]) -> Self {
        let n = spec.k_steps + 1;
        AnomalyField {
            spec,
            du: du.repeat(n),
            dv: dv.repeat(n),
        }
    }

    pub fn norm(&self) -> f64 {
        self.du.iter().chain(&self.dv).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn as_field(&self) -> Result<VelocityField> {
        VelocityField::new(self.spec, self.du.clone(), self.dv.clone())
    }

    /// `base + self`.
    pub fn apply(&self, base: &VelocityField) -> Result<VelocityField> {
        base.add(&self.du, &self.dv)
    }
}

#[derive(Clone, Debug)]
pub struct InversionResult {
    pub anomaly: AnomalyField,
    /// Loss before each update and after the last one (`n_steps + 1` values).
    pub loss: Vec<f64>,
    pub warnings: Vec<String>,
}

impl InversionResult {
    /// Running minimum of the loss trace.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.loss
            .iter()
            .scan(f64::INFINITY, |m, v| {
                *m = m.min(*v);
                Some(*m)
            })
            .collect()
    }
}

/// Records the misfit of a `(K+1, 2)` prediction against `target`.
fn record_misfit(tape: &mut Tape, sim: Var, target: &Trajectory) -> Result<Var> {
    let spec = target.spec;
    let n = target.len();
    let flat: Vec<f64> = target.positions.iter().flat_map(|p| [p.0, p.1]).collect();
    let t = tape.constant(Tensor::new(vec![n, 2], flat));
    let diff = tape.periodic_diff(sim, t, [spec.lx(), spec.ly()])?;
    let diff = tape.slice(diff, 0, 1, n - 1)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / (spec.h * spec.h)))
}

/// The forward model being inverted: records the predicted trajectory under
/// `base + anomaly` given anomaly variables on the tape.
trait Forward {
    fn record(&self, tape: &mut Tape, du: Var, dv: Var) -> Result<Var>;
}

struct NetForward<'a> {
    net: &'a DriftNet,
    base: &'a VelocityField,
    r0: (f64, f64),
}

impl Forward for NetForward<'_> {
    fn record(&self, tape: &mut Tape, du: Var, dv: Var) -> Result<Var> {
        let spec = *self.base.spec();
        let y0 = self.net.y0(&spec, self.r0)?;
        let pv = self.net.load_params(tape, false);
        let (us, vs) = corrected_snapshots(tape, self.base, du, dv)?;
        let input = self.net.input_on_tape(tape, &us, &vs, &y0)?;
        self.net.record_forward(tape, &pv, input, &spec, self.r0)
    }
}

struct OracleForward<'a> {
    base: &'a VelocityField,
    p0: Vec<f64>,
}

impl Forward for OracleForward<'_> {
    fn record(&self, tape: &mut Tape, du: Var, dv: Var) -> Result<Var> {
        track_on_tape(tape, self.base, du, dv, &self.p0)
    }
}

fn check_target(base: &VelocityField, target: &Trajectory) -> Result<()> {
    if target.spec != *base.spec() {
        return Err(DriftError::ShapeMismatch("target trajectory grid differs from the field grid".into()));
    }
    let r0 = target.seed();
    let s = target.spec;
    if !(r0.0 >= s.origin.0 && r0.0 < s.origin.0 + s.lx() && r0.1 >= s.origin.1 && r0.1 < s.origin.1 + s.ly()) {
        return Err(DriftError::InvalidArgument(format!("target seed ({}, {}) outside the domain", r0.0, r0.1)));
    }
    Ok(())
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 20;

fn descend(
    model: &dyn Forward,
    base: &VelocityField,
    target: &Trajectory,
    config: &InversionConfig,
    initial: Option<&AnomalyField>,
) -> Result<InversionResult> {
    config.validate()?;
    check_target(base, target)?;
    let spec = *base.spec();
    let shape = if config.time_constant {
        vec![spec.ny, spec.nx]
    } else {
        vec![spec.k_steps + 1, spec.ny, spec.nx]
    };
    let n: usize = shape.iter().product();
    let (mut du, mut dv) = match initial {
        Some(a) if a.spec == spec => (a.du[..n].to_vec(), a.dv[..n].to_vec()),
        Some(_) => return Err(DriftError::ShapeMismatch("initial anomaly grid differs from the field grid".into())),
        None => (vec![0.0; n], vec![0.0; n]),
    };
    let mut loss = Vec::with_capacity(config.n_steps + 1);
    let mut warnings = Vec::new();
    let mut streak = 0usize;

    for step in 0..=config.n_steps {
        let mut tape = Tape::new();
        let du_var = tape.param(Tensor::new(shape.clone(), du.clone()));
        let dv_var = tape.param(Tensor::new(shape.clone(), dv.clone()));
        let sim = model.record(&mut tape, du_var, dv_var)?;
        let mut objective = record_misfit(&mut tape, sim, target)?;
        if config.l2_weight > 0.0 {
            let su = tape.mul(du_var, du_var)?;
            let sv = tape.mul(dv_var, dv_var)?;
            let su = tape.sum(su);
            let sv = tape.sum(sv);
            let reg = tape.add(su, sv)?;
            let reg = tape.scale(reg, config.l2_weight);
            objective = tape.add(objective, reg)?;
        }
        let value = tape.value(objective).item();
        if !value.is_finite() {
            return Err(DriftError::NonFiniteLoss {
                context: format!("inversion step {step}"),
            });
        }
        loss.push(value);
        if value > DIVERGENCE_FACTOR * loss[0] {
            streak += 1;
            if streak == DIVERGENCE_PATIENCE {
                warnings.push(format!(
                    "loss above {DIVERGENCE_FACTOR}x its initial value for {DIVERGENCE_PATIENCE} consecutive steps (step {step})"
                ));
            }
        } else {
            streak = 0;
        }
        if step == config.n_steps {
            break;
        }
        let mut grads = tape.backward(objective)?;
        let gu = grads.take(du_var).unwrap_or_else(|| Tensor::zeros(&shape));
        let gv = grads.take(dv_var).unwrap_or_else(|| Tensor::zeros(&shape));
        if !(gu.is_finite() && gv.is_finite()) {
            return Err(DriftError::NonFiniteLoss {
                context: format!("inversion gradient at step {step}"),
            });
        }
        du.iter_mut().zip(&gu.data).for_each(|(a, g)| *a -= config.step_size * g);
        dv.iter_mut().zip(&gv.data).for_each(|(a, g)| *a -= config.step_size * g);
    }

    let anomaly = if config.time_constant {
        AnomalyField::broadcast(spec, &du, &dv)
    } else {
        AnomalyField { spec, du, dv }
    };
    Ok(InversionResult {
        anomaly,
        loss,
        warnings,
    })
}

/// Gradient descent on the anomaly through the frozen network, starting
/// from zero.
pub fn invert(net: &DriftNet, field: &VelocityField, target: &Trajectory, config: &InversionConfig) -> Result<InversionResult> {
    invert_from(net, field, target, config, None)
}

/// [`invert`] starting from `initial` (its first snapshot in time-constant
/// mode).
pub fn invert_from(
    net: &DriftNet,
    field: &VelocityField,
    target: &Trajectory,
    config: &InversionConfig,
    initial: Option<&AnomalyField>,
) -> Result<InversionResult> {
    let model = NetForward {
        net,
        base: field,
        r0: target.seed(),
    };
    descend(&model, field, target, config, initial)
}

/// Gradient descent on the anomaly through density propagation and the
/// expected-position readout.
pub fn invert_through_oracle(field: &VelocityField, target: &Trajectory, config: &InversionConfig) -> Result<InversionResult> {
    let p0 = init_density(field.spec(), target.seed(), config.sigma_km)?;
    let model = OracleForward { base: field, p0 };
    descend(&model, field, target, config, None)
}

/// Trajectory predicted by the network under `base + anomaly`.
pub fn corrected_forward(net: &DriftNet, base: &VelocityField, anomaly: &AnomalyField, r0: (f64, f64)) -> Result<Trajectory> {
    net.forward(&anomaly.apply(base)?, r0)
}

/// Expected-position track of the propagator under `base + anomaly`.
pub fn corrected_track(base: &VelocityField, anomaly: &AnomalyField, r0: (f64, f64), sigma_km: f64) -> Result<Trajectory> {
    let spec = *base.spec();
    let mut tape = Tape::new();
    let shape = vec![spec.k_steps + 1, spec.ny, spec.nx];
    let du = tape.constant(Tensor::new(shape.clone(), anomaly.du.clone()));
    let dv = tape.constant(Tensor::new(shape, anomaly.dv.clone()));
    let p0 = init_density(&spec, r0, sigma_km)?;
    let track = track_on_tape(&mut tape, base, du, dv, &p0)?;
    to_trajectory(&spec, tape.value(track))
}

/// Writes the report bundle into `dir`: `anomaly.drft`, `loss.csv`,
/// `trajectories.csv`, `vorticity_anomaly.csv`/`.svg` and
/// `vorticity_corrected.csv`/`.svg` (both at `t = 0`).
pub fn anomaly_report(
    dir: &Path,
    anomaly: &AnomalyField,
    base: &VelocityField,
    loss: &[f64],
    trajectories: &[(&str, &Trajectory)],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let spec = anomaly.spec;
    if *base.spec() != spec {
        return Err(DriftError::ShapeMismatch("anomaly and base field grids differ".into()));
    }
    anomaly.as_field()?.write(&dir.join("anomaly.drft"))?;

    let mut out = BufWriter::new(File::create(dir.join("loss.csv"))?);
    writeln!(out, "step,loss")?;
    for (i, l) in loss.iter().enumerate() {
        writeln!(out, "{i},{l}")?;
    }
    out.flush()?;

    let mut out = BufWriter::new(File::create(dir.join("trajectories.csv"))?);
    writeln!(out, "label,step,t_hours,x_km,y_km")?;
    for (label, t) in trajectories {
        for (k, p) in t.positions.iter().enumerate() {
            writeln!(out, "{},{},{},{},{}", label, k, k as f64 * spec.delta, p.0, p.1)?;
        }
    }
    out.flush()?;

    let plane = spec.cells();
    let zeta_anom = curl(&spec, &anomaly.du[..plane], &anomaly.dv[..plane]);
    let corrected = anomaly.apply(base)?;
    let zeta_total = curl(&spec, &corrected.u()[..plane], &corrected.v()[..plane]);
    let to_cells = |t: &Trajectory| -> Vec<(f64, f64)> {
        unwrap_path(&spec, t)
            .iter()
            .map(|p| ((p.0 - spec.origin.0) / spec.h, (p.1 - spec.origin.1) / spec.h))
            .collect()
    };
    let overlays: Vec<(&str, Vec<(f64, f64)>)> = trajectories.iter().map(|(l, t)| (*l, to_cells(t))).collect();
    for (name, title, zeta) in [
        ("vorticity_anomaly", "Vorticity of the velocity anomaly, t = 0 (1/h)", &zeta_anom),
        ("vorticity_corrected", "Vorticity of the corrected field, t = 0 (1/h)", &zeta_total),
    ] {
        io::write_raster_csv(&dir.join(format!("{name}.csv")), &spec, zeta, "zeta")?;
        let svg = plot::heatmap(title, zeta, spec.ny, spec.nx, &overlays);
        std::fs::write(dir.join(format!("{name}.svg")), svg)?;
    }
    Ok(())
}

/// Continuous path through the wrapped positions, starting at the seed.
fn unwrap_path(spec: &GridSpec, t: &Trajectory) -> Vec<(f64, f64)> {
    let mut out = vec![t.seed()];
    for w in t.positions.windows(2) {
        let d = spec.displacement(w[0], w[1]);
        let last = *out.last().unwrap();
        out.push((last.0 + d.0, last.1 + d.1));
    }
    out
}
