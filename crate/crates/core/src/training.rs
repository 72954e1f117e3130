//! Synthetic drift datasets, the trajectory losses and the Adam training
//! loop for [`DriftNet`].

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::driftnet::DriftNet;
use crate::error::{DriftError, Result};
use crate::field::VelocityField;
use crate::grid::GridSpec;
use crate::lagrangian::{advect_rk4, Ensemble, Point, Trajectory, DEFAULT_SUBSTEPS};
use crate::params::ParamStore;
use crate::par;

/// Default horizon: nine days of 6 h snapshots.
pub const DEFAULT_K_STEPS: usize = 36;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Index into [`DriftDataset::fields`].
    pub field: usize,
    pub trajectory: Trajectory,
    pub split: Split,
}

/// Reference trajectories and the fields they were advected through.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftDataset {
    pub fields: Vec<VelocityField>,
    pub samples: Vec<Sample>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    seed: u64,
    n_traj: usize,
    spec: GridSpec,
    fields: Vec<String>,
    field_index: Vec<usize>,
    split: Vec<Split>,
}

/// Deterministic 80/10/10 assignment: a seeded permutation, the first
/// `floor(0.8 n)` entries train, the next `floor(0.1 n)` validate.
pub fn split_assignment(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    order.shuffle(&mut rng);
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

/// `n_traj` seeds uniform over the domain, advected with RK4 through `field`.
pub fn generate_dataset(field: &VelocityField, n_traj: usize, seed: u64, parallel: bool) -> Result<DriftDataset> {
    generate_dataset_multi(vec![field.clone()], n_traj, seed, parallel)
}

/// Like [`generate_dataset`] over several fields on one grid; trajectory `i`
/// uses field `i mod fields.len()`.
pub fn generate_dataset_multi(
    fields: Vec<VelocityField>,
    n_traj: usize,
    seed: u64,
    parallel: bool,
) -> Result<DriftDataset> {
    if n_traj < 10 {
        return Err(DriftError::InvalidArgument(format!("dataset needs at least 10 trajectories, got {n_traj}")));
    }
    let spec = *fields
        .first()
        .ok_or_else(|| DriftError::InvalidArgument("dataset needs at least one field".into()))?
        .spec();
    if fields.iter().any(|f| *f.spec() != spec) {
        return Err(DriftError::ShapeMismatch("dataset fields use different grids".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jobs: Vec<(usize, Point)> = (0..n_traj)
        .map(|i| {
            let x = spec.origin.0 + rng.gen::<f64>() * spec.lx();
            let y = spec.origin.1 + rng.gen::<f64>() * spec.ly();
            (i % fields.len(), spec.wrap((x, y)))
        })
        .collect();
    let trajectories = par::map(&jobs, parallel, |&(f, r0)| advect_rk4(&fields[f], r0, DEFAULT_SUBSTEPS))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let split = split_assignment(n_traj, seed);
    let samples = jobs
        .iter()
        .zip(trajectories)
        .zip(split)
        .map(|((&(field, _), trajectory), split)| Sample { field, trajectory, split })
        .collect();
    Ok(DriftDataset { fields, samples, seed })
}

impl DriftDataset {
    pub fn spec(&self) -> &GridSpec {
        self.fields[0].spec()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }

    /// Largest speed over all fields; the input normalization of a model
    /// trained on this dataset.
    pub fn vmax(&self) -> f64 {
        self.fields.iter().map(|f| f.vmax()).fold(0.0, f64::max)
    }

    pub fn ensemble(&self, split: Split) -> Result<Ensemble> {
        Ensemble::new(self.subset(split).iter().map(|s| s.trajectory.clone()).collect())
    }

    /// Writes `trajectories.dtrj`, `field_<i>.drft` and `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let names: Vec<String> = (0..self.fields.len()).map(|i| format!("field_{i}.drft")).collect();
        for (f, name) in self.fields.iter().zip(&names) {
            f.write(&dir.join(name))?;
        }
        Ensemble::new(self.samples.iter().map(|s| s.trajectory.clone()).collect())?.write(&dir.join("trajectories.dtrj"))?;
        let manifest = Manifest {
            version: 1,
            seed: self.seed,
            n_traj: self.samples.len(),
            spec: *self.spec(),
            fields: names,
            field_index: self.samples.iter().map(|s| s.field).collect(),
            split: self.samples.iter().map(|s| s.split).collect(),
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&crate::io::read_all(&dir.join("manifest.json"))?)?;
        let fields = manifest
            .fields
            .iter()
            .map(|n| VelocityField::read(&dir.join(n)))
            .collect::<Result<Vec<_>>>()?;
        let ens = Ensemble::read(&dir.join("trajectories.dtrj"))?;
        let n = ens.len();
        if manifest.n_traj != n || manifest.field_index.len() != n || manifest.split.len() != n {
            return Err(DriftError::format("dataset manifest", "entry counts disagree with the trajectory file"));
        }
        if fields.is_empty() || manifest.field_index.iter().any(|i| *i >= fields.len()) {
            return Err(DriftError::format("dataset manifest", "field index out of range"));
        }
        if fields.iter().any(|f| *f.spec() != manifest.spec) || ens.spec() != Some(&manifest.spec) {
            return Err(DriftError::format("dataset manifest", "grid disagrees with stored files"));
        }
        let samples = ens
            .trajectories
            .into_iter()
            .zip(manifest.field_index)
            .zip(manifest.split)
            .map(|((trajectory, field), split)| Sample { field, trajectory, split })
            .collect();
        Ok(DriftDataset {
            fields,
            samples,
            seed: manifest.seed,
        })
    }
}

fn check_pairs(reference: &[Trajectory], sim: &[Trajectory]) -> Result<()> {
    if reference.is_empty() || reference.len() != sim.len() {
        return Err(DriftError::ShapeMismatch(format!(
            "loss needs matched non-empty batches, got {} and {}",
            reference.len(),
            sim.len()
        )));
    }
    for (r, s) in reference.iter().zip(sim) {
        if r.len() != s.len() {
            return Err(DriftError::ShapeMismatch(format!(
                "trajectory lengths differ: {} vs {}",
                r.len(),
                s.len()
            )));
        }
    }
    Ok(())
}

/// Mean over trajectories and steps `0..=K` of the squared periodic
/// displacement, both coordinates summed (km^2).
pub fn loss_mse(reference: &[Trajectory], sim: &[Trajectory]) -> Result<f64> {
    check_pairs(reference, sim)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, s) in reference.iter().zip(sim) {
        for (a, b) in r.positions.iter().zip(&s.positions) {
            let d = r.spec.displacement(*a, *b);
            total += d.0 * d.0 + d.1 * d.1;
        }
        count += r.len();
    }
    Ok(total / count as f64)
}

/// `sum_{j=1..K} l_j` with `l_j` the cumulative reference path length up to
/// step `j`.
fn cumulative_path_sum(reference: &Trajectory) -> f64 {
    let mut l = 0.0;
    let mut total = 0.0;
    for w in reference.positions.windows(2) {
        l += reference.spec.distance(w[0], w[1]);
        total += l;
    }
    total
}

/// Skill of one trajectory: `sum_j d_j / sum_j l_j` over `j = 1..K`.
pub fn liu_index(reference: &Trajectory, sim: &Trajectory, index: usize) -> Result<f64> {
    let denom = cumulative_path_sum(reference);
    if !(denom > 0.0) {
        return Err(DriftError::UndefinedLiuIndex { index });
    }
    let num: f64 = reference.positions[1..]
        .iter()
        .zip(&sim.positions[1..])
        .map(|(a, b)| reference.spec.distance(*a, *b))
        .sum();
    Ok(num / denom)
}

/// Batch mean of [`liu_index`].
pub fn loss_liu(reference: &[Trajectory], sim: &[Trajectory]) -> Result<f64> {
    check_pairs(reference, sim)?;
    let mut total = 0.0;
    for (i, (r, s)) in reference.iter().zip(sim).enumerate() {
        total += liu_index(r, s, i)?;
    }
    Ok(total / reference.len() as f64)
}

pub fn total_loss(reference: &[Trajectory], sim: &[Trajectory], alpha: f64, beta: f64) -> Result<f64> {
    Ok(alpha * loss_mse(reference, sim)? + beta * loss_liu(reference, sim)?)
}

/// Loss terms of one recorded trajectory.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub mse: Var,
    pub liu: Var,
}

/// Records the per-trajectory losses of a `(K+1, 2)` prediction against a
/// fixed reference. Batch losses are the means of these over trajectories.
pub fn record_loss(tape: &mut Tape, sim: Var, reference: &Trajectory, alpha: f64, beta: f64) -> Result<LossVars> {
    let spec = reference.spec;
    let n = reference.len();
    let denom = cumulative_path_sum(reference);
    if !(denom > 0.0) {
        return Err(DriftError::UndefinedLiuIndex { index: 0 });
    }
    let flat: Vec<f64> = reference.positions.iter().flat_map(|p| [p.0, p.1]).collect();
    let r = tape.constant(Tensor::new(vec![n, 2], flat));
    let diff = tape.periodic_diff(sim, r, [spec.lx(), spec.ly()])?;
    let sq = tape.mul(diff, diff)?;
    let sq = tape.sum(sq);
    let mse = tape.scale(sq, 1.0 / n as f64);
    let later = tape.slice(diff, 0, 1, n - 1)?;
    let d = tape.norm2(later)?;
    let d = tape.sum(d);
    let liu = tape.scale(d, 1.0 / denom);
    let a = tape.scale(mse, alpha);
    let b = tape.scale(liu, beta);
    let total = tape.add(a, b)?;
    Ok(LossVars { total, mse, liu })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.2,
            beta: 0.8,
            learning_rate: 5e-3,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(DriftError::InvalidArgument("alpha and beta must be >= 0".into()));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(DriftError::InvalidArgument(
                "learning rate, batch size and epochs must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(DriftError::InvalidArgument("invalid Adam moments".into()));
        }
        Ok(())
    }
}

/// Bias-corrected Adam over a [`ParamStore`].
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, config: &TrainConfig) -> Self {
        Adam {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            t: 0,
            m: params.tensors().map(|t| vec![0.0; t.numel()]).collect(),
            v: params.tensors().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p.data[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.epsilon);
            }
        }
    }
}

/// Mean loss terms over a set of trajectories.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub mse: f64,
    pub liu: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub mse: f64,
    pub liu: f64,
}

pub struct TrainOutcome {
    /// Parameters with the lowest validation loss.
    pub net: DriftNet,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Loss and parameter gradients for one sample.
pub fn sample_gradient(
    net: &DriftNet,
    field: &VelocityField,
    reference: &Trajectory,
    alpha: f64,
    beta: f64,
) -> Result<(LossParts, Vec<Tensor>)> {
    let spec = *field.spec();
    let r0 = reference.seed();
    let y0 = net.y0(&spec, r0)?;
    let mut tape = Tape::new();
    let pv = net.load_params(&mut tape, true);
    let input = tape.constant(net.input_tensor(field, &y0)?);
    let sim = net.record_forward(&mut tape, &pv, input, &spec, r0)?;
    let lv = record_loss(&mut tape, sim, reference, alpha, beta)?;
    let parts = LossParts {
        total: tape.value(lv.total).item(),
        mse: tape.value(lv.mse).item(),
        liu: tape.value(lv.liu).item(),
    };
    if !parts.total.is_finite() {
        return Ok((parts, Vec::new()));
    }
    let mut grads = tape.backward(lv.total)?;
    let out = pv
        .vars
        .iter()
        .map(|v| grads.take(*v).unwrap_or_else(|| Tensor::zeros(tape.shape(*v))))
        .collect();
    Ok((parts, out))
}

/// Mean losses of the model over `samples`.
pub fn evaluate_samples(net: &DriftNet, dataset: &DriftDataset, samples: &[&Sample], alpha: f64, beta: f64, parallel: bool) -> Result<LossParts> {
    if samples.is_empty() {
        return Ok(LossParts::default());
    }
    let preds = par::map(samples, parallel, |s| net.forward(&dataset.fields[s.field], s.trajectory.seed()))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<Trajectory> = samples.iter().map(|s| s.trajectory.clone()).collect();
    let mse = loss_mse(&refs, &preds)?;
    let liu = loss_liu(&refs, &preds)?;
    Ok(LossParts {
        total: alpha * mse + beta * liu,
        mse,
        liu,
    })
}

/// Adam over shuffled mini-batches; per-sample gradients may be computed in
/// parallel and are summed in sample order. Returns the parameters of the
/// epoch with the lowest validation loss (training loss when there is no
/// validation split).
pub fn train(
    dataset: &DriftDataset,
    initial: DriftNet,
    config: &TrainConfig,
    parallel: bool,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    initial.check_params()?;
    let train_set = dataset.subset(Split::Train);
    let val_set = dataset.subset(Split::Val);
    if train_set.is_empty() {
        return Err(DriftError::InvalidArgument("training split is empty".into()));
    }
    let mut net = initial;
    let mut adam = Adam::new(&net.params, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| train_set[i]).collect();
            let results = par::map(&batch, parallel, |s| {
                sample_gradient(&net, &dataset.fields[s.field], &s.trajectory, config.alpha, config.beta)
            });
            let inv = 1.0 / batch.len() as f64;
            let mut grads: Vec<Tensor> = net.params.tensors().map(|t| Tensor::zeros(&t.shape)).collect();
            let mut batch_loss = 0.0;
            for r in results {
                let (parts, g) = r?;
                batch_loss += parts.total;
                if !parts.total.is_finite() || g.iter().any(|t| !t.is_finite()) {
                    return Err(DriftError::NonFiniteLoss {
                        context: format!("epoch {epoch}, batch {}", b + 1),
                    });
                }
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    acc.data.iter_mut().zip(&gi.data).for_each(|(a, x)| *a += inv * x);
                }
            }
            epoch_sum += batch_loss;
            adam.step(&mut net.params, &grads);
        }
        let train_loss = epoch_sum / train_set.len() as f64;
        let val = if val_set.is_empty() {
            LossParts {
                total: train_loss,
                ..LossParts::default()
            }
        } else {
            evaluate_samples(&net, dataset, &val_set, config.alpha, config.beta, parallel)?
        };
        if !val.total.is_finite() {
            return Err(DriftError::NonFiniteLoss {
                context: format!("epoch {epoch}, validation"),
            });
        }
        let entry = EpochLog {
            epoch,
            train_loss,
            val_loss: val.total,
            mse: val.mse,
            liu: val.liu,
        };
        on_epoch(&entry);
        log.push(entry);
        if best.as_ref().map_or(true, |(v, _, _)| val.total < *v) {
            best = Some((val.total, epoch, net.params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    net.params = params;
    Ok(TrainOutcome { net, log, best_epoch })
}

/// CSV with header `epoch,train_loss,val_loss,mse,liu`.
pub fn write_log_csv(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "epoch,train_loss,val_loss,mse,liu")?;
    for e in log {
        writeln!(out, "{},{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.mse, e.liu)?;
    }
    out.flush()?;
    Ok(())
}
