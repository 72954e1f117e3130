//! Run configuration: one JSON document covering every command, resolved
//! against flag overrides and written next to each command's outputs.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use driftlab_core::driftnet::DriftNetConfig;
use driftlab_core::field::{
    eddies_field, make_double_gyre, make_random_eddies_with, make_solid_rotation, EddyConfig, GaussianEddy,
};
use driftlab_core::inversion::InversionConfig;
use driftlab_core::training::TrainConfig;
use driftlab_core::{DriftError, GridSpec, Integrator, Result, VelocityField};
use serde::{Deserialize, Serialize};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    pub h_km: f64,
    pub delta_hours: f64,
    pub k_steps: usize,
    pub origin_km: (f64, f64),
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            nx: 32,
            ny: 32,
            h_km: 10.0,
            delta_hours: 6.0,
            k_steps: 16,
            origin_km: (0.0, 0.0),
        }
    }
}

impl GridConfig {
    pub fn spec(&self) -> Result<GridSpec> {
        Ok(GridSpec::new(self.nx, self.ny, self.h_km, self.delta_hours, self.k_steps)?
            .with_origin(self.origin_km.0, self.origin_km.1))
    }
}

/// Base flow family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FlowFamily {
    DoubleGyre {
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default = "quarter")]
        eps: f64,
        #[serde(default = "gyre_omega")]
        omega: f64,
    },
    SolidRotation {
        #[serde(default = "rotation_omega")]
        omega: f64,
        /// Defaults to the domain center.
        #[serde(default)]
        center: Option<(f64, f64)>,
    },
    RandomEddies {
        #[serde(default = "four")]
        n_eddies: usize,
        #[serde(default)]
        eddy: Option<EddyConfig>,
    },
}

fn one() -> f64 {
    1.0
}
fn quarter() -> f64 {
    0.25
}
fn four() -> usize {
    4
}
fn gyre_omega() -> f64 {
    2.0 * PI / 48.0
}
fn rotation_omega() -> f64 {
    2.0 * PI / 240.0
}

/// Extra stationary eddy superposed on the base flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyEddy {
    pub center_km: (f64, f64),
    pub radius_km: f64,
    /// Signed peak swirl speed (km/h); positive is counter-clockwise.
    pub peak_speed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    #[serde(flatten)]
    pub family: FlowFamily,
    /// Eddies added on top of the base family, e.g. to build inversion targets.
    pub anomaly: Vec<AnomalyEddy>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            family: FlowFamily::DoubleGyre {
                amplitude: one(),
                eps: quarter(),
                omega: gyre_omega(),
            },
            anomaly: Vec::new(),
        }
    }
}

impl FlowConfig {
    /// Base flow without the anomaly eddies.
    pub fn base_field(&self, spec: GridSpec, seed: u64) -> Result<VelocityField> {
        match &self.family {
            FlowFamily::DoubleGyre { amplitude, eps, omega } => make_double_gyre(spec, *amplitude, *eps, *omega),
            FlowFamily::SolidRotation { omega, center } => {
                let c = center.unwrap_or((spec.origin.0 + 0.5 * spec.lx(), spec.origin.1 + 0.5 * spec.ly()));
                make_solid_rotation(spec, *omega, c)
            }
            FlowFamily::RandomEddies { n_eddies, eddy } => {
                let cfg = eddy.unwrap_or_else(|| EddyConfig::new(*n_eddies));
                if cfg.n_eddies != *n_eddies {
                    return Err(DriftError::InvalidArgument("flow.n_eddies disagrees with flow.eddy.n_eddies".into()));
                }
                make_random_eddies_with(spec, &cfg, seed)
            }
        }
    }

    pub fn anomaly_field(&self, spec: GridSpec) -> Result<VelocityField> {
        let eddies: Vec<GaussianEddy> = self
            .anomaly
            .iter()
            .map(|e| GaussianEddy::with_peak_speed(e.center_km, e.radius_km, e.peak_speed))
            .collect();
        eddies_field(spec, &eddies)
    }

    /// Base flow plus anomaly eddies.
    pub fn field(&self, spec: GridSpec, seed: u64) -> Result<VelocityField> {
        let base = self.base_field(spec, seed)?;
        if self.anomaly.is_empty() {
            return Ok(base);
        }
        let extra = self.anomaly_field(spec)?;
        base.add(extra.u(), extra.v())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Seed positions in km; empty means the domain center.
    pub seeds_km: Vec<(f64, f64)>,
    /// Radius of the seeding disk (km); 0 advects the seeds themselves.
    pub perturb_radius_km: f64,
    pub n_per_seed: usize,
    pub integrator: Integrator,
    pub substeps: usize,
    /// Also propagate a density from the first seed.
    pub density: bool,
    pub sigma_km: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            seeds_km: Vec::new(),
            perturb_radius_km: 0.0,
            n_per_seed: 1,
            integrator: Integrator::Rk4,
            substeps: driftlab_core::lagrangian::DEFAULT_SUBSTEPS,
            density: false,
            sigma_km: 0.0,
        }
    }
}

impl SimulateConfig {
    pub fn seeds(&self, spec: &GridSpec) -> Vec<(f64, f64)> {
        if self.seeds_km.is_empty() {
            vec![(spec.origin.0 + 0.5 * spec.lx(), spec.origin.1 + 0.5 * spec.ly())]
        } else {
            self.seeds_km.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_traj: usize,
    /// Number of flow realizations; realization `j` uses seed `seed + j`.
    pub n_fields: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { n_traj: 2000, n_fields: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InversionMethod {
    Network,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InvertConfig {
    pub method: InversionMethod,
    /// Trajectory of `inputs.target` to match.
    pub target_index: usize,
    #[serde(flatten)]
    pub descent: InversionConfig,
}

impl Default for InvertConfig {
    fn default() -> Self {
        InvertConfig {
            method: InversionMethod::Oracle,
            target_index: 0,
            descent: InversionConfig::default(),
        }
    }
}

/// Files consumed by commands. Relative paths resolve against the working
/// directory and are stored absolute in the snapshot.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub field: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub simulated: Option<PathBuf>,
    pub target: Option<PathBuf>,
}

impl Inputs {
    fn absolutize(&mut self) -> Result<()> {
        let cwd = std::env::current_dir()?;
        for p in [
            &mut self.field,
            &mut self.dataset,
            &mut self.model,
            &mut self.reference,
            &mut self.simulated,
            &mut self.target,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = cwd.join(&*p);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Written into snapshots; ignored on input.
    pub tool_version: String,
    /// Drives flow generation, seeding, splits, initialization and batching.
    pub seed: u64,
    pub out: PathBuf,
    pub grid: GridConfig,
    pub flow: FlowConfig,
    pub simulate: SimulateConfig,
    pub dataset: DatasetConfig,
    pub model: DriftNetConfig,
    pub train: TrainConfig,
    pub inversion: InvertConfig,
    pub inputs: Inputs,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            tool_version: TOOL_VERSION.to_string(),
            seed: 0,
            out: PathBuf::from("driftlab-out"),
            grid: GridConfig::default(),
            flow: FlowConfig::default(),
            simulate: SimulateConfig::default(),
            dataset: DatasetConfig::default(),
            model: DriftNetConfig::default(),
            train: TrainConfig::default(),
            inversion: InvertConfig::default(),
            inputs: Inputs::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(DriftError::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Final consistency pass after overrides.
    pub fn resolve(&mut self) -> Result<()> {
        self.tool_version = TOOL_VERSION.to_string();
        self.train.seed = self.seed;
        self.model.init_seed = self.seed;
        self.inputs.absolutize()?;
        if self.out.is_relative() {
            self.out = std::env::current_dir()?.join(&self.out);
        }
        self.grid.spec()?;
        self.model.validate()?;
        self.train.validate()?;
        self.inversion.descent.validate()?;
        if self.dataset.n_fields == 0 {
            return Err(DriftError::InvalidArgument("dataset.n_fields must be >= 1".into()));
        }
        if self.simulate.n_per_seed == 0 || self.simulate.substeps == 0 {
            return Err(DriftError::InvalidArgument("simulate.n_per_seed and substeps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("resolved_config.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c: RunConfig =
            serde_json::from_str(r#"{"seed": 4, "flow": {"family": "solid_rotation"}, "grid": {"nx": 16}}"#).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.grid.nx, 16);
        assert_eq!(c.grid.ny, 32);
        assert!(matches!(c.flow.family, FlowFamily::SolidRotation { center: None, .. }));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"grdi": {}}"#).is_err());
    }

    #[test]
    fn anomaly_eddies_add_to_the_base_flow() {
        let mut flow = FlowConfig::default();
        let spec = GridConfig::default().spec().unwrap();
        let base = flow.field(spec, 0).unwrap();
        flow.anomaly.push(AnomalyEddy {
            center_km: (100.0, 100.0),
            radius_km: 30.0,
            peak_speed: 0.5,
        });
        let with = flow.field(spec, 0).unwrap();
        assert_ne!(base, with);
        assert_eq!(flow.base_field(spec, 0).unwrap(), base);
    }
}
