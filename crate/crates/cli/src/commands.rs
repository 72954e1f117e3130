use std::path::{Path, PathBuf};

use driftlab_core::driftnet::DriftNet;
use driftlab_core::field::vorticity;
use driftlab_core::fokkerplanck::{init_density, propagate_density};
use driftlab_core::inversion::{
    anomaly_report, corrected_forward, corrected_track, invert, invert_through_oracle, AnomalyField,
};
use driftlab_core::lagrangian::{advect_ensemble, advect_rk4, perturb_seeds, DEFAULT_SUBSTEPS};
use driftlab_core::metrics::evaluate;
use driftlab_core::plot::{heatmap, line_chart, Series};
use driftlab_core::training::{generate_dataset_multi, train, write_log_csv, DriftDataset, Split};
use driftlab_core::{selftest, DriftError, Ensemble, Result, Trajectory, VelocityField};
use serde_json::json;

use crate::config::{InversionMethod, RunConfig};

/// Shared state handed to every command.
pub struct Ctx {
    pub config: RunConfig,
    pub parallel: bool,
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| DriftError::InvalidArgument(format!("inputs.{key} is required for this command")))
}

fn summary(value: serde_json::Value) {
    println!("{value}");
}

impl Ctx {
    fn out(&self) -> Result<&Path> {
        self.config.write_snapshot(&self.config.out)?;
        Ok(&self.config.out)
    }

    /// `inputs.field` when given, otherwise the configured flow.
    fn field(&self) -> Result<VelocityField> {
        match &self.config.inputs.field {
            Some(p) => VelocityField::read(p),
            None => self.config.flow.field(self.config.grid.spec()?, self.config.seed),
        }
    }

    pub fn gen_field(&self) -> Result<()> {
        let field = self.field()?;
        let out = self.out()?;
        field.write(&out.join("field.drft"))?;
        let zeta = vorticity(&field);
        zeta.write_csv(&out.join("vorticity.csv"))?;
        let spec = field.spec();
        let svg = heatmap("Vorticity at t = 0 (1/h)", zeta.slice(0), spec.ny, spec.nx, &[]);
        std::fs::write(out.join("vorticity_t0.svg"), svg)?;
        summary(json!({"command": "gen-field", "out": out, "vmax": field.vmax()}));
        Ok(())
    }

    pub fn simulate(&self) -> Result<()> {
        let sim = &self.config.simulate;
        let field = self.field()?;
        let spec = *field.spec();
        let seeds = if sim.perturb_radius_km > 0.0 {
            perturb_seeds(&sim.seeds(&spec), sim.perturb_radius_km, sim.n_per_seed, self.config.seed)?
        } else {
            sim.seeds(&spec)
        };
        let ensemble = advect_ensemble(&field, &seeds, sim.integrator, sim.substeps, self.parallel)?;
        let out = self.out()?;
        ensemble.write(&out.join("ensemble.dtrj"))?;
        ensemble.write_csv(&out.join("trajectories.csv"))?;
        if sim.density {
            let p0 = init_density(&spec, seeds[0], sim.sigma_km)?;
            let density = propagate_density(&field, &p0)?;
            density.write(&out.join("density.dpdf"))?;
            density.write_csv(&out.join("density.csv"))?;
            let track = Trajectory::new(spec, density.track()?)?;
            Ensemble::new(vec![track])?.write_csv(&out.join("density_track.csv"))?;
        }
        summary(json!({"command": "simulate", "out": out, "n_trajectories": ensemble.len()}));
        Ok(())
    }

    fn build_dataset(&self) -> Result<DriftDataset> {
        let c = &self.config;
        let spec = c.grid.spec()?;
        let fields = match &c.inputs.field {
            Some(p) => vec![VelocityField::read(p)?],
            None => (0..c.dataset.n_fields as u64)
                .map(|j| c.flow.field(spec, c.seed.wrapping_add(j)))
                .collect::<Result<Vec<_>>>()?,
        };
        generate_dataset_multi(fields, c.dataset.n_traj, c.seed, self.parallel)
    }

    pub fn gen_dataset(&self) -> Result<()> {
        let data = self.build_dataset()?;
        let out = self.out()?;
        data.save(out)?;
        summary(json!({
            "command": "gen-dataset",
            "out": out,
            "n_traj": data.len(),
            "train": data.count(Split::Train),
            "val": data.count(Split::Val),
            "test": data.count(Split::Test),
        }));
        Ok(())
    }

    pub fn train(&self) -> Result<()> {
        let data = match &self.config.inputs.dataset {
            Some(p) => DriftDataset::load(p)?,
            None => self.build_dataset()?,
        };
        let net = DriftNet::new(self.config.model.clone(), data.vmax())?;
        let out = self.out()?;
        let outcome = train(&data, net, &self.config.train, self.parallel, |e| {
            eprintln!(
                "epoch {:>4}  train {:.5}  val {:.5}  mse {:.3}  liu {:.4}",
                e.epoch, e.train_loss, e.val_loss, e.mse, e.liu
            );
        })?;
        outcome.net.save(&out.join("model"), data.spec())?;
        write_log_csv(&outcome.log, &out.join("train_log.csv"))?;
        let epochs: Vec<f64> = outcome.log.iter().map(|e| e.epoch as f64).collect();
        let tr: Vec<f64> = outcome.log.iter().map(|e| e.train_loss).collect();
        let va: Vec<f64> = outcome.log.iter().map(|e| e.val_loss).collect();
        let svg = line_chart(
            "Training loss",
            "epoch",
            "loss",
            &[
                Series { label: "train", x: &epochs, y: &tr, band: None },
                Series { label: "val", x: &epochs, y: &va, band: None },
            ],
        );
        std::fs::write(out.join("loss.svg"), svg)?;
        summary(json!({
            "command": "train",
            "out": out,
            "best_epoch": outcome.best_epoch,
            "best_val_loss": outcome.log[outcome.best_epoch - 1].val_loss,
        }));
        Ok(())
    }

    pub fn evaluate(&self) -> Result<()> {
        let inputs = &self.config.inputs;
        let out = self.out()?;
        let (reference, sim) = if inputs.model.is_some() || inputs.dataset.is_some() {
            let (net, _) = DriftNet::load(required(&inputs.model, "model")?)?;
            let data = DriftDataset::load(required(&inputs.dataset, "dataset")?)?;
            let test = data.subset(Split::Test);
            let predicted = driftlab_core::par::map(&test, self.parallel, |s| {
                net.forward(&data.fields[s.field], s.trajectory.seed())
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let reference = data.ensemble(Split::Test)?;
            let persistence = Ensemble::new(
                test.iter()
                    .map(|s| Trajectory::persistence(*data.spec(), s.trajectory.seed()))
                    .collect(),
            )?;
            evaluate(&reference, &persistence)?.write(&out.join("persistence"))?;
            let sim = Ensemble::new(predicted)?;
            sim.write(&out.join("predictions.dtrj"))?;
            sim.write_csv(&out.join("predictions.csv"))?;
            (reference, sim)
        } else {
            (
                Ensemble::read(required(&inputs.reference, "reference")?)?,
                Ensemble::read(required(&inputs.simulated, "simulated")?)?,
            )
        };
        let eval = evaluate(&reference, &sim)?;
        eval.write(out)?;
        summary(json!({"command": "evaluate", "out": out, "metrics": eval.report}));
        Ok(())
    }

    pub fn invert(&self) -> Result<()> {
        let c = &self.config;
        let inv = &c.inversion;
        let (base, target) = match (&c.inputs.field, &c.inputs.target) {
            (Some(f), Some(t)) => {
                let ens = Ensemble::read(t)?;
                let target = ens.trajectories.get(inv.target_index).cloned().ok_or_else(|| {
                    DriftError::InvalidArgument(format!(
                        "target_index {} out of range for {} trajectories",
                        inv.target_index,
                        ens.len()
                    ))
                })?;
                (VelocityField::read(f)?, target)
            }
            (None, None) => {
                let spec = c.grid.spec()?;
                let base = c.flow.base_field(spec, c.seed)?;
                let truth = c.flow.field(spec, c.seed)?;
                let r0 = c.simulate.seeds(&spec)[0];
                (base, advect_rk4(&truth, r0, DEFAULT_SUBSTEPS)?)
            }
            _ => {
                return Err(DriftError::InvalidArgument(
                    "inputs.field and inputs.target must be given together".into(),
                ))
            }
        };
        let spec = *base.spec();
        let r0 = target.seed();
        let zero = AnomalyField::zeros(spec);
        let (result, initial, corrected) = match inv.method {
            InversionMethod::Oracle => {
                let result = invert_through_oracle(&base, &target, &inv.descent)?;
                let sigma = inv.descent.sigma_km;
                let initial = corrected_track(&base, &zero, r0, sigma)?;
                let corrected = corrected_track(&base, &result.anomaly, r0, sigma)?;
                (result, initial, corrected)
            }
            InversionMethod::Network => {
                let (net, meta) = DriftNet::load(required(&c.inputs.model, "model")?)?;
                if meta.spec != spec {
                    return Err(DriftError::ShapeMismatch("model grid differs from the base field grid".into()));
                }
                let result = invert(&net, &base, &target, &inv.descent)?;
                let initial = corrected_forward(&net, &base, &zero, r0)?;
                let corrected = corrected_forward(&net, &base, &result.anomaly, r0)?;
                (result, initial, corrected)
            }
        };
        let out = self.out()?;
        anomaly_report(
            out,
            &result.anomaly,
            &base,
            &result.loss,
            &[("target", &target), ("initial", &initial), ("corrected", &corrected)],
        )?;
        for w in &result.warnings {
            eprintln!("warning: {w}");
        }
        let sep0 = spec.distance(initial.last(), target.last());
        let sep1 = spec.distance(corrected.last(), target.last());
        let report = json!({
            "method": inv.method,
            "initial_loss": result.loss[0],
            "final_loss": *result.loss.last().unwrap(),
            "best_loss": *result.best_so_far().last().unwrap(),
            "initial_final_separation_km": sep0,
            "corrected_final_separation_km": sep1,
            "anomaly_norm": result.anomaly.norm(),
            "warnings": result.warnings,
        });
        std::fs::write(out.join("inversion.json"), serde_json::to_string_pretty(&report)?)?;
        summary(json!({"command": "invert", "out": out, "result": report}));
        Ok(())
    }

    /// Returns the number of failed checks.
    pub fn selftest(&self) -> Result<usize> {
        let results = selftest::run_all();
        let out = self.out()?;
        std::fs::write(out.join("selftest.json"), serde_json::to_string_pretty(&results)?)?;
        for r in &results {
            eprintln!("{} {}  {}", if r.passed { "ok  " } else { "FAIL" }, r.name, r.detail);
        }
        let failed = results.iter().filter(|r| !r.passed).count();
        summary(json!({"command": "selftest", "out": out, "checks": results.len(), "failed": failed}));
        Ok(failed)
    }
}
