//! Training stages: backbone pretraining (the desk-scale stand-in for a
//! large pretrained text-to-video model) and control-module fine-tuning,
//! with AdamW, cosine annealing, the freeze policy and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{encode, LatentVideo};
use crate::data::{Pair, SourceTag};
use crate::degrade::{degrade, DegradationConfig};
use crate::error::{Error, Result};
use crate::io::Container;
use crate::net::{
    init_backbone, init_control, v_theta_forward, Ablation, Bound, CaptionTokens, Conditioning, NetConfig, ParamStore,
    Partition,
};
use crate::rng::SeedStream;
use crate::schedule::{NoiseSchedule, ScheduleConfig, TimeStep};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }

    /// Which parameters the optimizer may touch in this stage.
    pub fn trains(self, partition: Partition) -> bool {
        match self {
            Stage::Pretrain => partition == Partition::FrozenBackbone,
            Stage::Finetune => partition == Partition::TrainableControl,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub steps: usize,
    /// Clips per micro-batch.
    pub batch: usize,
    /// Micro-batches whose gradients are averaged into one update.
    pub grad_accum: usize,
    /// Square training crop in pixels; `None` trains on full frames.
    pub crop: Option<usize>,
    pub ablation: Ablation,
    pub distill_on: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-2,
            adam_eps: 1e-8,
            steps: 2000,
            batch: 1,
            grad_accum: 1,
            crop: None,
            ablation: Ablation::default(),
            distill_on: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, net: &NetConfig) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("train.steps", "must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta1", "betas must lie in [0, 1)"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 || self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::config("train.weight_decay", "need weight_decay >= 0 and adam_eps > 0"));
        }
        if self.batch == 0 || self.grad_accum == 0 {
            return Err(Error::config("train.batch", "batch and grad_accum must be positive"));
        }
        if let Some(c) = self.crop {
            let unit = 2 * net.patch;
            if c == 0 || c % unit != 0 {
                return Err(Error::config("train.crop", format!("must be a positive multiple of {unit}")));
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `peak` at step 0 to exactly 0 at `total`.
pub fn cosine_lr(peak: f64, step: usize, total: usize) -> f64 {
    if step >= total {
        return 0.0;
    }
    peak * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        Self { beta1: c.beta1, beta2: c.beta2, weight_decay: c.weight_decay, eps: c.adam_eps }
    }
}

/// One AdamW update with decoupled decay; `t` is the 1-based step count.
pub fn adamw_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, h: &AdamHyper) {
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);
    for i in 0..p.len() {
        p[i] -= lr * h.weight_decay * p[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + h.eps);
    }
}

/// First and second moments per trainable tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One prepared training example.
#[derive(Clone, Debug)]
pub struct Example {
    pub x0: LatentVideo,
    /// Encoded degraded clip; `None` during pretraining.
    pub z_lq: Option<LatentVideo>,
    pub caption: CaptionTokens,
    pub t: TimeStep,
    pub eps: LatentVideo,
    pub source: SourceTag,
}

/// Mean squared error between the predicted and target velocity.
pub fn example_loss<'g>(
    g: &'g Graph,
    p: &Bound<'g>,
    net: &NetConfig,
    schedule: &NoiseSchedule,
    ex: &Example,
    ablation: Ablation,
) -> Result<Var<'g>> {
    let x_t = schedule.add_noise(&ex.x0, ex.t, &ex.eps)?;
    let target = schedule.v_target(&ex.x0, &ex.eps, ex.t)?;
    let cond = match &ex.z_lq {
        Some(z_lq) => Conditioning::Control { z_lq, ablation },
        None => Conditioning::Backbone,
    };
    let pred = v_theta_forward(g, p, net, &x_t, &ex.caption, ex.t, cond)?;
    Ok(pred.sub(&g.constant(target.into_tensor())?)?.square()?.mean()?)
}

/// Everything needed to continue training or to run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub net: NetConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub degrade: DegradationConfig,
    pub seed: u64,
    /// Completed optimizer steps of `stage`.
    pub step: usize,
    /// Completed backbone steps, carried into fine-tuning.
    pub pretrain_steps: usize,
    pub params: ParamStore,
    pub opt: AdamState,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub tag_mix: BTreeMap<SourceTag, usize>,
}

pub struct Trainer {
    pub ck: Checkpoint,
    schedule: NoiseSchedule,
}

impl Trainer {
    pub fn pretrain(net: NetConfig, schedule: ScheduleConfig, train: TrainConfig, seed: u64) -> Result<Self> {
        net.validate().map_err(|e| Error::config("net", e.to_string()))?;
        train.validate(&net)?;
        let params = init_backbone(&net, SeedStream::new(seed))?;
        Self::resume(Checkpoint {
            stage: Stage::Pretrain,
            net,
            schedule,
            train,
            degrade: DegradationConfig::default(),
            seed,
            step: 0,
            pretrain_steps: 0,
            params,
            opt: AdamState::default(),
        })
    }

    /// Adds the control modules to a backbone checkpoint.
    pub fn finetune(backbone: &Checkpoint, train: TrainConfig, degrade: DegradationConfig, seed: u64) -> Result<Self> {
        train.validate(&backbone.net)?;
        degrade.validate()?;
        let mut params = backbone.params.clone();
        params.remove_partition(Partition::TrainableControl);
        init_control(&mut params, &backbone.net, SeedStream::new(seed))?;
        Self::resume(Checkpoint {
            stage: Stage::Finetune,
            net: backbone.net.clone(),
            schedule: backbone.schedule.clone(),
            train,
            degrade,
            seed,
            step: 0,
            pretrain_steps: backbone.pretrain_steps,
            params,
            opt: AdamState::default(),
        })
    }

    pub fn resume(ck: Checkpoint) -> Result<Self> {
        let schedule = ck.schedule.build()?;
        Ok(Self { ck, schedule })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.ck
    }

    /// The pairs this stage samples from.
    pub fn pool<'a>(&self, data: &'a [Pair]) -> Result<Vec<&'a Pair>> {
        let pool: Vec<&Pair> = data
            .iter()
            .filter(|p| self.ck.stage == Stage::Pretrain || self.ck.train.distill_on || p.source == SourceTag::Real)
            .collect();
        if pool.is_empty() {
            return Err(Error::invalid("training data", "no usable pairs for this stage"));
        }
        Ok(pool)
    }

    /// Draws the examples of optimizer step `step`, a pure function of
    /// `(seed, stage, step, pool)`.
    pub fn examples(&self, pool: &[&Pair], step: usize) -> Result<Vec<Example>> {
        let ck = &self.ck;
        let base = SeedStream::new(ck.seed).derive(ck.stage.as_str()).index(step as u64);
        (0..ck.train.batch * ck.train.grad_accum)
            .map(|j| {
                let s = base.index(j as u64);
                let mut rng = s.derive("pick").rng();
                let pair = pool[rng.gen_range(0..pool.len())];
                let clean = &pair.video;
                let lq = match ck.stage {
                    Stage::Pretrain => None,
                    Stage::Finetune => Some(degrade(clean, &ck.degrade, s.derive("degrade"))?),
                };
                let (clean, lq) = match ck.train.crop {
                    Some(c) if c < clean.height() || c < clean.width() => {
                        let c_h = c.min(clean.height());
                        let c_w = c.min(clean.width());
                        let top = rng.gen_range(0..=clean.height() - c_h);
                        let left = rng.gen_range(0..=clean.width() - c_w);
                        let lq = lq.map(|v| v.crop(top, left, c_h, c_w)).transpose()?;
                        (clean.crop(top, left, c_h, c_w)?, lq)
                    }
                    _ => (clean.clone(), lq),
                };
                let x0 = encode(&clean)?;
                let t = self.schedule.timestep(rng.gen_range(0..self.schedule.len()))?;
                let eps = LatentVideo::new(Tensor::new(x0.shape(), s.derive("eps").normals(x0.tensor().numel()))?)?;
                Ok(Example {
                    z_lq: lq.as_ref().map(encode).transpose()?,
                    x0,
                    caption: pair.caption.clone(),
                    t,
                    eps,
                    source: pair.source,
                })
            })
            .collect()
    }

    /// Mean loss over `examples` and gradients of every parameter the stage
    /// trains.
    pub fn loss_and_grads(&self, examples: &[Example]) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let ck = &self.ck;
        if let Some((name, _)) = ck.params.iter().find(|(_, p)| !p.tensor.is_finite()) {
            return Err(Error::Divergence(format!(
                "parameter `{name}` is non-finite at {} step {}",
                ck.stage.as_str(),
                ck.step
            )));
        }
        let stage = ck.stage;
        let mut total = 0.0;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let scale = 1.0 / examples.len() as f64;
        // Overflow inside the graph is a numeric failure of the run.
        let diverged = |e: Error| match e {
            Error::Tensor(TensorError::NonFinite { op }) => {
                Error::Divergence(format!("non-finite value in `{op}` at {} step {}", stage.as_str(), ck.step))
            }
            other => other,
        };
        for ex in examples {
            let g = Graph::new();
            let p = ck.params.bind(&g, |_, part| stage.trains(part))?;
            let loss = example_loss(&g, &p, &ck.net, &self.schedule, ex, ck.train.ablation).map_err(diverged)?;
            total += loss.value().item() * scale;
            let gr = g.backward(loss).map_err(|e| diverged(e.into()))?;
            for (name, var) in p.iter() {
                if !var.requires_grad() {
                    continue;
                }
                let acc = grads.entry(name.to_string()).or_insert_with(|| Tensor::zeros(var.shape()));
                if let Some(d) = gr.get(var) {
                    *acc = acc.zip_map(d, |a, b| a + scale * b)?;
                }
            }
        }
        Ok((total, grads))
    }

    /// Relative error between the analytic and central-difference
    /// derivatives of the loss on `ex` along a random direction through
    /// every trained parameter, scaled to unit norm.
    pub fn directional_check(&self, ex: &Example, direction: SeedStream, step: f64) -> Result<f64> {
        let (_, grads) = self.loss_and_grads(std::slice::from_ref(ex))?;
        let raw: Vec<(&String, Vec<f64>)> =
            grads.iter().map(|(n, g)| (n, direction.derive(n).normals(g.numel()))).collect();
        let norm = raw.iter().flat_map(|(_, d)| d).map(|x| x * x).sum::<f64>().sqrt();
        let dirs: BTreeMap<&String, Tensor> = raw
            .into_iter()
            .map(|(n, d)| Ok((n, Tensor::new(grads[n].shape().to_vec(), d.into_iter().map(|x| x / norm).collect())?)))
            .collect::<Result<_>>()?;
        let analytic: f64 =
            grads.iter().map(|(n, g)| g.data().iter().zip(dirs[n].data()).map(|(a, b)| a * b).sum::<f64>()).sum();
        let at = |s: f64| -> Result<f64> {
            let mut params = self.ck.params.clone();
            for (n, d) in &dirs {
                let moved = params.get(n).expect("trained parameter").zip_map(d, |p, d| p + s * d)?;
                params.set(n, moved)?;
            }
            let g = Graph::new();
            let p = params.bind(&g, |_, _| false)?;
            Ok(example_loss(&g, &p, &self.ck.net, &self.schedule, ex, self.ck.train.ablation)?.value().item())
        };
        let numeric = (at(step)? - at(-step)?) / (2.0 * step);
        Ok((analytic - numeric).abs() / numeric.abs().max(1e-8))
    }

    /// Applies one optimizer update from `examples` and returns the loss.
    pub fn training_step(&mut self, examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::invalid("training_step", "empty batch"));
        }
        let (loss, grads) = self.loss_and_grads(examples)?;
        if !loss.is_finite() {
            let culprit = grads
                .iter()
                .find(|(_, g)| !g.is_finite())
                .map(|(n, _)| format!("gradient of `{n}`"))
                .unwrap_or_else(|| "the loss itself".to_string());
            return Err(Error::Divergence(format!(
                "loss is {loss} at {} step {}; first non-finite tensor: {culprit}",
                self.ck.stage.as_str(),
                self.ck.step
            )));
        }
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::Divergence(format!("non-finite gradient of `{name}` at step {}", self.ck.step)));
        }
        let lr = cosine_lr(self.ck.train.learning_rate, self.ck.step, self.ck.train.steps);
        let hyper = AdamHyper::from(&self.ck.train);
        let ck = &mut self.ck;
        ck.opt.t += 1;
        for (name, g) in &grads {
            let mut p = ck.params.get(name).expect("gradient of a bound parameter").to_vec();
            let shape = g.shape().to_vec();
            let m = ck.opt.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape.clone()));
            let mut mv = m.to_vec();
            let v = ck.opt.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape.clone()));
            let mut vv = v.to_vec();
            adamw_update(&mut p, g.data(), &mut mv, &mut vv, ck.opt.t, lr, &hyper);
            *ck.opt.m.get_mut(name).unwrap() = Tensor::new(shape.clone(), mv)?;
            *ck.opt.v.get_mut(name).unwrap() = Tensor::new(shape.clone(), vv)?;
            ck.params.set(name, Tensor::new(shape, p)?)?;
        }
        ck.step += 1;
        if ck.stage == Stage::Pretrain {
            ck.pretrain_steps = ck.step;
        }
        Ok(loss)
    }

    /// Runs up to `n` further steps (stopping at the configured total) and
    /// reports each one to `log`.
    pub fn run(&mut self, data: &[Pair], n: usize, mut log: impl FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        let pool = self.pool(data)?;
        for _ in 0..n {
            if self.ck.step >= self.ck.train.steps {
                break;
            }
            let step = self.ck.step;
            let examples = self.examples(&pool, step)?;
            let lr = cosine_lr(self.ck.train.learning_rate, step, self.ck.train.steps);
            let mut tag_mix = BTreeMap::new();
            for ex in &examples {
                *tag_mix.entry(ex.source).or_insert(0) += 1;
            }
            let loss = self.training_step(&examples)?;
            log(&StepRecord { step, loss, lr, tag_mix })?;
        }
        Ok(())
    }
}

/// Pretrains a backbone on clean clips for `train.steps` steps.
pub fn pretrain(
    data: &[Pair],
    net: NetConfig,
    schedule: ScheduleConfig,
    train: TrainConfig,
    seed: u64,
    log: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<Checkpoint> {
    let mut t = Trainer::pretrain(net, schedule, train, seed)?;
    let n = t.ck.train.steps;
    t.run(data, n, log)?;
    Ok(t.into_checkpoint())
}

/// Fine-tunes the control modules on top of `backbone`.
pub fn finetune(
    backbone: &Checkpoint,
    data: &[Pair],
    train: TrainConfig,
    degrade: DegradationConfig,
    seed: u64,
    log: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<Checkpoint> {
    let mut t = Trainer::finetune(backbone, train, degrade, seed)?;
    let n = t.ck.train.steps;
    t.run(data, n, log)?;
    Ok(t.into_checkpoint())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub partition: String,
    pub shape: Vec<usize>,
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub stage: Stage,
    pub step: usize,
    pub pretrain_steps: usize,
    pub seed: u64,
    pub net: NetConfig,
    pub schedule: ScheduleConfig,
    /// Checksum of the cumulative signal levels the network was trained with.
    pub schedule_checksum: String,
    pub train: TrainConfig,
    pub degrade: DegradationConfig,
    pub optimizer_t: u64,
    pub params: Vec<ParamEntry>,
}

fn schedule_checksum(s: &ScheduleConfig) -> Result<String> {
    let sched = s.build()?;
    Ok(Tensor::new([sched.len()], sched.alpha_bars().to_vec())?.checksum())
}

impl Checkpoint {
    pub fn manifest(&self) -> Result<CheckpointManifest> {
        Ok(CheckpointManifest {
            stage: self.stage,
            step: self.step,
            pretrain_steps: self.pretrain_steps,
            seed: self.seed,
            net: self.net.clone(),
            schedule: self.schedule.clone(),
            schedule_checksum: schedule_checksum(&self.schedule)?,
            train: self.train.clone(),
            degrade: self.degrade.clone(),
            optimizer_t: self.opt.t,
            params: self
                .params
                .iter()
                .map(|(n, p)| ParamEntry {
                    name: n.to_string(),
                    partition: p.partition.as_str().to_string(),
                    shape: p.tensor.shape().to_vec(),
                    checksum: p.tensor.checksum(),
                })
                .collect(),
        })
    }

    /// Writes `path` (tensors) and `path.json` (manifest).
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut c = Container::new();
        for (n, p) in self.params.iter() {
            c.push_tensor(format!("param.{n}"), &p.tensor)?;
        }
        for (n, m) in &self.opt.m {
            c.push_tensor(format!("opt.m.{n}"), m)?;
        }
        for (n, v) in &self.opt.v {
            c.push_tensor(format!("opt.v.{n}"), v)?;
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        c.write(path)?;
        let mp = path.with_extension("json");
        let json = serde_json::to_string_pretty(&self.manifest()?).expect("manifest serializes");
        std::fs::write(&mp, json).map_err(|e| Error::io(&mp, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        let mp = path.with_extension("json");
        let text = std::fs::read_to_string(&mp).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Missing { what: "checkpoint manifest", path: mp.clone() }
            } else {
                Error::io(&mp, e)
            }
        })?;
        let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path: mp.clone(),
            offset: 0,
            msg: e.to_string(),
        })?;
        let corrupt = |msg: String| Error::Corrupt { path: path.to_path_buf(), offset: 0, msg };
        if schedule_checksum(&m.schedule)? != m.schedule_checksum {
            return Err(corrupt("schedule fingerprint mismatch".into()));
        }
        let mut params = ParamStore::new();
        for e in &m.params {
            let t = c.tensor(&format!("param.{}", e.name))?;
            if t.checksum() != e.checksum {
                return Err(corrupt(format!("parameter `{}` fails its checksum", e.name)));
            }
            params.insert(e.name.clone(), t)?;
        }
        let mut opt = AdamState { t: m.optimizer_t, ..AdamState::default() };
        for r in c.records() {
            if let Some(n) = r.name.strip_prefix("opt.m.") {
                opt.m.insert(n.to_string(), c.tensor(&r.name)?);
            } else if let Some(n) = r.name.strip_prefix("opt.v.") {
                opt.v.insert(n.to_string(), c.tensor(&r.name)?);
            }
        }
        Ok(Checkpoint {
            stage: m.stage,
            net: m.net,
            schedule: m.schedule,
            train: m.train,
            degrade: m.degrade,
            seed: m.seed,
            step: m.step,
            pretrain_steps: m.pretrain_steps,
            params,
            opt,
        })
    }

    /// Whether the control modules are present.
    pub fn has_control(&self) -> bool {
        self.params.num_scalars(Partition::TrainableControl) > 0
    }
}
