//! DriftNet: an Eulerian encoder over velocity snapshots and an initial
//! position map, followed by a spatial-softmax trajectory readout.
//!
//! ```text
//! (u_s, v_s, y0_s) --conv A + LeakyReLU--> ConvLSTM over s --conv B + LeakyReLU--> y_s
//! y_s --softmax per channel--> soft-argmax --temporal conv head--> r_{s+1}
//! ```
//!
//! Step `s = 0..K-1` of the latent predicts the position at `t = (s + 1) delta`
//! and sees the velocity snapshot at `t = s delta`. Soft-argmax features are
//! expected offsets from the seed (in cells), and the head output is an offset
//! from the seed, so a zero head reproduces the seed at every step.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_lstm_cell, ConvLstmWeights, Readout, Tape, Tensor, Var};
use crate::error::{DriftError, Result};
use crate::field::VelocityField;
use crate::grid::GridSpec;
use crate::lagrangian::{Point, Trajectory};
use crate::params::ParamStore;

/// Velocity channels plus the initial-position encoding.
pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftNetConfig {
    /// Output widths of the first convolution stack.
    pub stack_a: Vec<usize>,
    pub hidden: usize,
    /// Output widths of the second convolution stack; the last one is the
    /// latent channel count.
    pub stack_b: Vec<usize>,
    pub leaky_slope: f64,
    pub temperature: f64,
    /// Radius of the initial-position cone at `t = 0`, in cells.
    pub base_radius_cells: f64,
    pub init_seed: u64,
}

impl Default for DriftNetConfig {
    fn default() -> Self {
        DriftNetConfig {
            stack_a: vec![11, 16],
            hidden: 16,
            stack_b: vec![8],
            leaky_slope: 0.1,
            temperature: 1.0,
            base_radius_cells: 2.0,
            init_seed: 0,
        }
    }
}

impl DriftNetConfig {
    pub fn latent_channels(&self) -> usize {
        *self.stack_b.last().unwrap_or(&self.hidden)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stack_a.is_empty() || self.stack_b.is_empty() || self.hidden == 0 {
            return Err(DriftError::InvalidArgument("DriftNet needs non-empty conv stacks and hidden > 0".into()));
        }
        if self.stack_a.iter().chain(&self.stack_b).any(|c| *c == 0) {
            return Err(DriftError::InvalidArgument("conv widths must be positive".into()));
        }
        if !(self.temperature > 0.0) || !(self.base_radius_cells > 0.0) {
            return Err(DriftError::InvalidArgument("temperature and base radius must be > 0".into()));
        }
        Ok(())
    }

    /// `(name, shape, fan_in)` of every parameter tensor, in store order.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let mut cin = INPUT_CHANNELS;
        for (i, &c) in self.stack_a.iter().enumerate() {
            out.push((format!("enc.a{i}.w"), vec![c, cin, 3, 3], cin * 9));
            out.push((format!("enc.a{i}.b"), vec![c], cin * 9));
            cin = c;
        }
        let lstm_in = cin + self.hidden;
        out.push(("enc.lstm.w".into(), vec![4 * self.hidden, lstm_in, 3, 3], lstm_in * 9));
        out.push(("enc.lstm.b".into(), vec![4 * self.hidden], lstm_in * 9));
        cin = self.hidden;
        for (i, &c) in self.stack_b.iter().enumerate() {
            out.push((format!("enc.b{i}.w"), vec![c, cin, 3, 3], cin * 9));
            out.push((format!("enc.b{i}.b"), vec![c], cin * 9));
            cin = c;
        }
        let feats = 2 * cin;
        out.push(("head.w".into(), vec![2, feats, 3], feats * 3));
        out.push(("head.b".into(), vec![2], feats * 3));
        out
    }
}

/// Initial-position encoding, `(K, 1, ny, nx)` values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InitEncoding {
    pub spec: GridSpec,
    pub y0: Vec<f64>,
}

impl InitEncoding {
    pub fn slice(&self, s: usize) -> &[f64] {
        let n = self.spec.cells();
        &self.y0[s * n..(s + 1) * n]
    }
}

/// `y0[s](x) = max(0, 1 - d(x, r0) / (L0 + vmax * s * delta))`, with `d` the
/// periodic distance: a cone whose support widens with the distance a
/// particle could travel at `vmax`.
pub fn build_y0(spec: &GridSpec, r0: Point, vmax: f64, base_radius_km: f64) -> Result<InitEncoding> {
    if !(vmax > 0.0) || !(base_radius_km > 0.0) {
        return Err(DriftError::InvalidArgument(format!(
            "build_y0 needs vmax > 0 and base radius > 0 (got {vmax}, {base_radius_km})"
        )));
    }
    let dist: Vec<f64> = (0..spec.ny)
        .flat_map(|row| (0..spec.nx).map(move |col| (row, col)))
        .map(|(row, col)| spec.distance(r0, spec.cell_center(row, col)))
        .collect();
    let mut y0 = Vec::with_capacity(spec.k_steps * dist.len());
    for s in 0..spec.k_steps {
        let radius = base_radius_km + vmax * s as f64 * spec.delta;
        y0.extend(dist.iter().map(|d| (1.0 - d / radius).max(0.0)));
    }
    Ok(InitEncoding { spec: *spec, y0 })
}

/// Encoder output `(K, C, ny, nx)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub spec: GridSpec,
    pub channels: usize,
    pub y: Vec<f64>,
}

/// Trained or freshly initialized model with its input normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftNet {
    pub config: DriftNetConfig,
    pub params: ParamStore,
    /// Velocity scale (km/h) dividing the inputs; the training-set vmax.
    pub vnorm: f64,
}

/// Parameter leaves of one model on one tape, in store order.
pub struct ParamVars {
    pub vars: Vec<Var>,
}

impl ParamVars {
    fn get(&self, i: usize) -> Var {
        self.vars[i]
    }
}

/// JSON sidecar stored next to the parameter file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub spec: GridSpec,
    pub vnorm: f64,
    pub temperature: f64,
    pub k_steps: usize,
    pub config: DriftNetConfig,
    pub parameter_count: usize,
}

impl DriftNet {
    /// Uniform `+-1/sqrt(fan_in)` initialization with forget-gate bias +1.
    pub fn new(config: DriftNetConfig, vnorm: f64) -> Result<Self> {
        config.validate()?;
        if !(vnorm > 0.0 && vnorm.is_finite()) {
            return Err(DriftError::InvalidArgument(format!("velocity normalization must be > 0, got {vnorm}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        for (name, shape, fan_in) in config.layout() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let mut data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            if name == "enc.lstm.b" {
                for v in &mut data[config.hidden..2 * config.hidden] {
                    *v = 1.0;
                }
            }
            params.insert(&name, Tensor::new(shape, data));
        }
        Ok(DriftNet { config, params, vnorm })
    }

    /// Model with every parameter set to zero.
    pub fn zeroed(config: DriftNetConfig, vnorm: f64) -> Result<Self> {
        let mut net = Self::new(config, vnorm)?;
        for t in net.params.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(net)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn check_params(&self) -> Result<()> {
        let layout = self.config.layout();
        if layout.len() != self.params.len() {
            return Err(DriftError::ShapeMismatch(format!(
                "model expects {} parameter tensors, store has {}",
                layout.len(),
                self.params.len()
            )));
        }
        for ((name, shape, _), (have, t)) in layout.iter().zip(self.params.iter()) {
            if name != have || *shape != t.shape {
                return Err(DriftError::ShapeMismatch(format!(
                    "parameter {have} {:?} does not match expected {name} {shape:?}",
                    t.shape
                )));
            }
        }
        Ok(())
    }

    pub fn load_params(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        ParamVars {
            vars: self.params.tensors().map(|t| tape.leaf(t.clone(), trainable)).collect(),
        }
    }

    pub fn y0(&self, spec: &GridSpec, r0: Point) -> Result<InitEncoding> {
        build_y0(spec, r0, self.vnorm, self.config.base_radius_cells * spec.h)
    }

    /// `(K, 3, ny, nx)` input for a fixed field.
    pub fn input_tensor(&self, field: &VelocityField, y0: &InitEncoding) -> Result<Tensor> {
        let spec = field.spec();
        if y0.spec != *spec {
            return Err(DriftError::ShapeMismatch("y0 grid differs from field grid".into()));
        }
        let plane = spec.cells();
        let inv = 1.0 / self.vnorm;
        let mut data = Vec::with_capacity(spec.k_steps * INPUT_CHANNELS * plane);
        for s in 0..spec.k_steps {
            data.extend(field.u()[s * plane..(s + 1) * plane].iter().map(|x| x * inv));
            data.extend(field.v()[s * plane..(s + 1) * plane].iter().map(|x| x * inv));
            data.extend_from_slice(y0.slice(s));
        }
        Ok(Tensor::new(vec![spec.k_steps, INPUT_CHANNELS, spec.ny, spec.nx], data))
    }

    /// Input built from differentiable `(ny, nx)` velocity snapshots (km/h);
    /// snapshot `s` feeds step `s`, so at least `K` are needed.
    pub fn input_on_tape(&self, tape: &mut Tape, us: &[Var], vs: &[Var], y0: &InitEncoding) -> Result<Var> {
        let spec = y0.spec;
        if us.len() < spec.k_steps || vs.len() < spec.k_steps {
            return Err(DriftError::ShapeMismatch(format!(
                "need {} velocity snapshots, got {} and {}",
                spec.k_steps,
                us.len(),
                vs.len()
            )));
        }
        let plane = [1, spec.ny, spec.nx];
        let inv = 1.0 / self.vnorm;
        let mut steps = Vec::with_capacity(spec.k_steps);
        for s in 0..spec.k_steps {
            let u = tape.reshape(us[s], &plane)?;
            let v = tape.reshape(vs[s], &plane)?;
            let u = tape.scale(u, inv);
            let v = tape.scale(v, inv);
            let y = tape.constant(Tensor::new(plane.to_vec(), y0.slice(s).to_vec()));
            steps.push(tape.concat(&[u, v, y], 0)?);
        }
        tape.stack(&steps)
    }

    /// Records the encoder on `input` `(K, 3, ny, nx)`; returns `(K, C, ny, nx)`.
    pub fn record_encode(&self, tape: &mut Tape, pv: &ParamVars, input: Var) -> Result<Var> {
        let shape = tape.shape(input).to_vec();
        if shape.len() != 4 || shape[1] != INPUT_CHANNELS {
            return Err(DriftError::ShapeMismatch(format!("encoder input must be (K, 3, ny, nx), got {shape:?}")));
        }
        let (k, ny, nx) = (shape[0], shape[2], shape[3]);
        let slope = self.config.leaky_slope;
        let mut idx = 0;
        let mut x = input;
        for _ in &self.config.stack_a {
            x = tape.conv2d(x, pv.get(idx), pv.get(idx + 1))?;
            x = tape.leaky_relu(x, slope);
            idx += 2;
        }
        let lstm = ConvLstmWeights {
            w: pv.get(idx),
            b: pv.get(idx + 1),
        };
        idx += 2;
        let hidden = self.config.hidden;
        let mut h = tape.constant(Tensor::zeros(&[hidden, ny, nx]));
        let mut c = tape.constant(Tensor::zeros(&[hidden, ny, nx]));
        let mut hs = Vec::with_capacity(k);
        for s in 0..k {
            let xs = tape.select(x, s)?;
            let (h1, c1) = conv_lstm_cell(tape, xs, h, c, lstm)?;
            h = h1;
            c = c1;
            hs.push(h);
        }
        let mut y = tape.stack(&hs)?;
        for _ in &self.config.stack_b {
            y = tape.conv2d(y, pv.get(idx), pv.get(idx + 1))?;
            y = tape.leaky_relu(y, slope);
            idx += 2;
        }
        Ok(y)
    }

    /// Records the readout of a `(K, C, ny, nx)` latent; returns the
    /// `(K+1, 2)` trajectory starting at `r0`.
    pub fn record_decode(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        latent: Var,
        spec: &GridSpec,
        r0: Point,
        temperature: f64,
    ) -> Result<Var> {
        let shape = tape.shape(latent).to_vec();
        if shape.len() != 4 || shape[2] != spec.ny || shape[3] != spec.nx {
            return Err(DriftError::ShapeMismatch(format!("latent {shape:?} does not fit the grid")));
        }
        let (k, ch) = (shape[0], shape[1]);
        let n_params = pv.vars.len();
        let (hw, hb) = (pv.get(n_params - 2), pv.get(n_params - 1));
        let probs = tape.spatial_softmax(latent, temperature)?;
        let pos = tape.soft_argmax(probs, spec, Readout::Anchored { anchor: r0 })?;
        let anchor_kc = tape.constant(anchor_tensor(&[k, ch, 2], r0));
        let off = tape.sub(pos, anchor_kc)?;
        let off = tape.scale(off, 1.0 / spec.h);
        let feats = tape.reshape(off, &[k, 2 * ch])?;
        let feats = tape.transpose(feats)?;
        let out = tape.conv1d_time(feats, hw, hb)?;
        let out = tape.transpose(out)?;
        let out = tape.scale(out, spec.h);
        let anchor_k = tape.constant(anchor_tensor(&[k, 2], r0));
        let out = tape.add(out, anchor_k)?;
        let out = tape.wrap_positions(out, spec)?;
        let seed = tape.constant(Tensor::new(vec![1, 2], vec![r0.0, r0.1]));
        tape.concat(&[seed, out], 0)
    }

    /// Full differentiable forward from an input tensor.
    pub fn record_forward(&self, tape: &mut Tape, pv: &ParamVars, input: Var, spec: &GridSpec, r0: Point) -> Result<Var> {
        let latent = self.record_encode(tape, pv, input)?;
        self.record_decode(tape, pv, latent, spec, r0, self.config.temperature)
    }

    pub fn encode(&self, field: &VelocityField, y0: &InitEncoding) -> Result<LatentGrid> {
        let mut tape = Tape::new();
        let pv = self.load_params(&mut tape, false);
        let input = tape.constant(self.input_tensor(field, y0)?);
        let y = self.record_encode(&mut tape, &pv, input)?;
        Ok(LatentGrid {
            spec: *field.spec(),
            channels: self.config.latent_channels(),
            y: tape.value(y).data.clone(),
        })
    }

    pub fn decode(&self, latent: &LatentGrid, r0: Point, temperature: f64) -> Result<Trajectory> {
        let spec = latent.spec;
        let mut tape = Tape::new();
        let pv = self.load_params(&mut tape, false);
        let y = tape.constant(Tensor::new(
            vec![spec.k_steps, latent.channels, spec.ny, spec.nx],
            latent.y.clone(),
        ));
        let traj = self.record_decode(&mut tape, &pv, y, &spec, r0, temperature)?;
        to_trajectory(&spec, tape.value(traj))
    }

    /// Predicted trajectory for a particle seeded at `r0`.
    pub fn forward(&self, field: &VelocityField, r0: Point) -> Result<Trajectory> {
        let spec = *field.spec();
        let y0 = self.y0(&spec, r0)?;
        let mut tape = Tape::new();
        let pv = self.load_params(&mut tape, false);
        let input = tape.constant(self.input_tensor(field, &y0)?);
        let traj = self.record_forward(&mut tape, &pv, input, &spec, r0)?;
        to_trajectory(&spec, tape.value(traj))
    }

    pub fn meta(&self, spec: &GridSpec) -> ModelMeta {
        ModelMeta {
            spec: *spec,
            vnorm: self.vnorm,
            temperature: self.config.temperature,
            k_steps: spec.k_steps,
            config: self.config.clone(),
            parameter_count: self.parameter_count(),
        }
    }

    /// Writes `params.dprm` and `model.json` into `dir`.
    pub fn save(&self, dir: &Path, spec: &GridSpec) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.params.write(&dir.join("params.dprm"))?;
        std::fs::write(dir.join("model.json"), serde_json::to_string_pretty(&self.meta(spec))?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, ModelMeta)> {
        let meta_path = dir.join("model.json");
        let raw = crate::io::read_all(&meta_path)?;
        let meta: ModelMeta = serde_json::from_slice(&raw)?;
        let params = ParamStore::read(&dir.join("params.dprm"))?;
        let net = DriftNet {
            config: meta.config.clone(),
            params,
            vnorm: meta.vnorm,
        };
        net.check_params()?;
        Ok((net, meta))
    }
}

fn anchor_tensor(shape: &[usize], r0: Point) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| if i % 2 == 0 { r0.0 } else { r0.1 }).collect();
    Tensor::new(shape.to_vec(), data)
}

pub(crate) fn to_trajectory(spec: &GridSpec, t: &Tensor) -> Result<Trajectory> {
    let positions = t.data.chunks(2).map(|c| (c[0], c[1])).collect();
    Trajectory::new(*spec, positions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::make_double_gyre;

    fn small_spec() -> GridSpec {
        GridSpec::new(8, 8, 10.0, 6.0, 3).unwrap()
    }

    #[test]
    fn default_channel_plan_parameter_count() {
        let net = DriftNet::new(DriftNetConfig::default(), 1.0).unwrap();
        let expected = (11 * 3 * 9 + 11) + (16 * 11 * 9 + 16) + (64 * 32 * 9 + 64) + (8 * 16 * 9 + 8) + (2 * 16 * 3 + 2);
        assert_eq!(net.parameter_count(), expected);
        net.check_params().unwrap();
        let lstm_b = net.params.get("enc.lstm.b").unwrap();
        assert!(lstm_b.data[16..32].iter().all(|v| *v == 1.0));
    }

    #[test]
    fn y0_cone() {
        let s = small_spec();
        let r0 = s.cell_center(2, 3);
        let y0 = build_y0(&s, r0, 1.0, 20.0).unwrap();
        for k in 0..3 {
            assert_eq!(y0.slice(k)[2 * 8 + 3], 1.0);
        }
        // At t = 0 the cell two cells away (d = L0) is zero.
        assert_eq!(y0.slice(0)[2 * 8 + 5], 0.0);
        for k in 0..2 {
            for (a, b) in y0.slice(k).iter().zip(y0.slice(k + 1)) {
                assert!(*a <= 0.0 || *b > 0.0);
            }
        }
        assert!(build_y0(&s, r0, 0.0, 20.0).is_err());
    }

    #[test]
    fn zero_model_is_persistence() {
        let s = small_spec();
        let f = make_double_gyre(s, 1.0, 0.1, 0.05).unwrap();
        let net = DriftNet::zeroed(DriftNetConfig::default(), f.vmax()).unwrap();
        let r0 = (33.0, 41.0);
        let y0 = net.y0(&s, r0).unwrap();
        let lat = net.encode(&f, &y0).unwrap();
        assert!(lat.y.iter().all(|v| *v == 0.0));
        let t = net.forward(&f, r0).unwrap();
        assert_eq!(t.len(), 4);
        assert!(t.positions.iter().all(|p| *p == r0));
    }

    #[test]
    fn forward_is_deterministic_and_in_domain() {
        let s = small_spec();
        let f = make_double_gyre(s, 1.0, 0.1, 0.05).unwrap();
        let net = DriftNet::new(DriftNetConfig::default(), f.vmax()).unwrap();
        let a = net.forward(&f, (5.0, 77.0)).unwrap();
        let b = net.forward(&f, (5.0, 77.0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.seed(), (5.0, 77.0));
        for p in &a.positions[1..] {
            assert!(p.0 >= 0.0 && p.0 < s.lx() && p.1 >= 0.0 && p.1 < s.ly());
        }
    }

    #[test]
    fn peaked_latent_decodes_to_peak_cell() {
        let s = small_spec();
        let net = DriftNet::zeroed(DriftNetConfig::default(), 1.0).unwrap();
        let mut net = net;
        // Averaging head: x <- mean of the 8 x-features, y likewise.
        let mut w = vec![0.0; 2 * 16 * 3];
        for c in 0..8 {
            w[(2 * c) * 3 + 1] = 1.0 / 8.0;
            w[(16 + 2 * c + 1) * 3 + 1] = 1.0 / 8.0;
        }
        net.params.insert("head.w", Tensor::new(vec![2, 16, 3], w));
        let g = (5, 6);
        let mut y = vec![0.0; 3 * 8 * 64];
        for k in 0..3 {
            for c in 0..8 {
                y[(k * 8 + c) * 64 + g.0 * 8 + g.1] = 40.0;
            }
        }
        let lat = LatentGrid { spec: s, channels: 8, y };
        let r0 = (21.0, 29.0);
        let t = net.decode(&lat, r0, 1.0).unwrap();
        let center = s.cell_center(g.0, g.1);
        for p in &t.positions[1..] {
            assert!((p.0 - center.0).abs() < 1e-6 && (p.1 - center.1).abs() < 1e-6);
        }
        // Weaker peak, sharpened by a small temperature.
        let mut lat2 = lat.clone();
        lat2.y.iter_mut().for_each(|v| *v *= 0.05);
        let soft = net.decode(&lat2, r0, 1.0).unwrap();
        let sharp = net.decode(&lat2, r0, 1e-3).unwrap();
        assert!((soft.last().0 - center.0).abs() > 1e-3);
        assert!((sharp.last().0 - center.0).abs() < 1e-9 && (sharp.last().1 - center.1).abs() < 1e-9);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let s = small_spec();
        let net = DriftNet::new(DriftNetConfig::default(), 2.5).unwrap();
        net.save(dir.path(), &s).unwrap();
        let (back, meta) = DriftNet::load(dir.path()).unwrap();
        assert_eq!(back, net);
        assert_eq!(meta.spec, s);
        assert_eq!(meta.k_steps, 3);
    }
}
