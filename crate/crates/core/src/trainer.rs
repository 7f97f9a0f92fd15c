//! Warm-up, alternating supervised/semi-supervised updates, schedules,
//! convergence and resumable training state.
//!
//! Every step updates the generator first, then the pair discriminator, then
//! the depth discriminator. Discriminators see the generator output of that
//! same step, detached. All randomness is derived from `(seed, step)` or
//! `(seed, epoch)`, so a run resumed from any checkpoint replays exactly.

use std::collections::VecDeque;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    depth_batch, image_batch, mask_batch, Batch, BatchIterator, BatchKind, BatchMode, DatasetSplit,
    LabeledSample,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{self, LossKind, LossWeights};
use crate::metrics::{self, Aggregation};
use crate::models::checkpoint::{self, network_arrays, network_from_arrays};
use crate::models::{
    build_depth_discriminator, build_generator, build_pair_discriminator, DiscriminatorSpec,
    GeneratorSpec, InitScheme, Mode, NamedTensor, Network, NetworkSpec,
};
use crate::optim::{Adam, AdamConfig};
use crate::seed;
use crate::tensor::Tensor;

const STREAM_WARMUP: u64 = 0x5741;
const STREAM_POOL: u64 = 0x504f;
const STREAM_VALIDATION: u64 = 0x5641;
const STREAM_INIT_G: u64 = 0x4947;
const STREAM_INIT_PD: u64 = 0x4950;
const STREAM_INIT_DD: u64 = 0x4944;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    pub factor: f64,
    pub every_steps: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Convergence {
    FixedEpochs,
    /// Stop once the best validation loss has not improved by more than
    /// `tolerance` for `window` consecutive epochs.
    Plateau { window: usize, tolerance: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discriminators {
    Both,
    PdOnly,
    DdOnly,
}

impl Discriminators {
    fn uses_pd(self) -> bool {
        self != Discriminators::DdOnly
    }

    fn uses_dd(self) -> bool {
        self != Discriminators::PdOnly
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorInit {
    HeNormal,
    Normal002,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub lr_decay: Option<LrDecay>,
    pub weights: LossWeights,
    pub batching: BatchMode,
    /// Labeled and unlabeled batches per alternation group.
    pub alternation_ratio: [usize; 2],
    pub discriminators: Discriminators,
    /// Train the generator with this regression loss alone, no adversaries.
    pub regression_loss: Option<LossKind>,
    pub scale_invariant_coefficient: f64,
    /// Defaults to one pass over the labeled training set.
    pub warmup_steps: Option<u64>,
    pub convergence: Convergence,
    pub validation_fraction: f64,
    pub checkpoint_every_epochs: usize,
    pub history_len: usize,
    pub seed: u64,
    pub generator: GeneratorSpec,
    pub generator_init: GeneratorInit,
    pub warm_start: Option<PathBuf>,
    pub pair_discriminator: DiscriminatorSpec,
    pub depth_discriminator: DiscriminatorSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            optimizer: AdamConfig::default(),
            lr_decay: None,
            weights: LossWeights::default(),
            batching: BatchMode::Alternating,
            alternation_ratio: [1, 1],
            discriminators: Discriminators::Both,
            regression_loss: None,
            scale_invariant_coefficient: losses::SCALE_INVARIANT_COEF,
            warmup_steps: None,
            convergence: Convergence::FixedEpochs,
            validation_fraction: 0.1,
            checkpoint_every_epochs: 1,
            history_len: 64,
            seed: 0,
            generator: GeneratorSpec::default(),
            generator_init: GeneratorInit::HeNormal,
            warm_start: None,
            pair_discriminator: DiscriminatorSpec::pair(),
            depth_discriminator: DiscriminatorSpec::depth(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("alternation_ratio", self.alternation_ratio[0].min(self.alternation_ratio[1])),
            ("checkpoint_every_epochs", self.checkpoint_every_epochs),
            ("history_len", self.history_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        self.optimizer.validate()?;
        self.weights.validate()?;
        self.generator.validate()?;
        let (pd, dd) = self.disc_specs();
        pd.validate()?;
        dd.validate()?;
        if let Some(d) = self.lr_decay {
            if !(d.factor > 0.0 && d.every_steps > 0) {
                return Err(Error::Config("lr decay needs a positive factor and period".into()));
            }
        }
        if let Convergence::Plateau { window, tolerance } = self.convergence {
            if window == 0 || !(tolerance >= 0.0) {
                return Err(Error::Config("plateau needs a positive window and tolerance >= 0".into()));
            }
            if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
                return Err(Error::Config("validation_fraction must be in (0, 1)".into()));
            }
        }
        if self.regression_loss.is_some() && self.batching != BatchMode::Supervised {
            return Err(Error::Config("a regression loss trains on labeled batches only".into()));
        }
        Ok(())
    }

    /// Learning rate in effect at global step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.lr_decay {
            Some(d) => self.optimizer.lr * d.factor.powi((step / d.every_steps) as i32),
            None => self.optimizer.lr,
        }
    }

    /// Weights with λ pinned by the discriminator selection.
    fn effective_weights(&self) -> LossWeights {
        let lambda = match self.discriminators {
            Discriminators::Both => self.weights.lambda,
            Discriminators::PdOnly => 1.0,
            Discriminators::DdOnly => 0.0,
        };
        LossWeights {
            lambda,
            ..self.weights.clone()
        }
    }

    fn history_capacity(&self) -> usize {
        match self.convergence {
            Convergence::Plateau { window, .. } => self.history_len.max(window),
            Convergence::FixedEpochs => self.history_len,
        }
    }

    /// Discriminator specs with their depth scaling tied to the generator range.
    fn disc_specs(&self) -> (DiscriminatorSpec, DiscriminatorSpec) {
        let (lo, hi) = self.generator.depth_range;
        let mut pd = self.pair_discriminator.clone().with_depth_range(lo, hi);
        let mut dd = self.depth_discriminator.clone().with_depth_range(lo, hi);
        pd.in_channels = 4;
        dd.in_channels = 1;
        (pd, dd)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Adversarial,
    Finished,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub step: u64,
    pub warmup_steps: u64,
    pub supervised_steps: u64,
    pub semi_steps: u64,
    pub g_updates: u64,
    pub pd_updates: u64,
    pub dd_updates: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `validation` for a held-out split, `train` when scored on training data.
    pub split: String,
    pub l1: f64,
    pub rmse: f64,
    pub rel: f64,
    pub delta1: f64,
}

/// Bounded epoch history plus plateau bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub capacity: usize,
    pub entries: VecDeque<EpochRecord>,
    pub best: Option<f64>,
    pub epochs_since_best: usize,
}

impl History {
    fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::new(),
            best: None,
            epochs_since_best: 0,
        }
    }

    /// Records an epoch and reports whether the plateau rule fires.
    fn push(&mut self, rec: EpochRecord, convergence: Convergence) -> bool {
        let loss = rec.l1;
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(rec);
        let Convergence::Plateau { window, tolerance } = convergence else {
            return false;
        };
        match self.best {
            Some(b) if !(b - loss > tolerance) => self.epochs_since_best += 1,
            _ => {
                self.best = Some(loss);
                self.epochs_since_best = 0;
            }
        }
        self.epochs_since_best >= window
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub g: Network,
    pub pd: Network,
    pub dd: Network,
    pub opt_g: Adam,
    pub opt_pd: Adam,
    pub opt_dd: Adam,
    pub counters: Counters,
    pub phase: Phase,
    /// Position in the adversarial batch schedule.
    pub epoch: usize,
    pub cursor: usize,
    pub history: History,
    pub seed: u64,
}

/// One row of the training curve.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub phase: String,
    pub loss_g: f64,
    pub loss_g_pd: f64,
    pub loss_g_dd: f64,
    pub loss_l1: f64,
    pub loss_pd: f64,
    pub loss_dd: f64,
    pub lr: f64,
}

pub const CURVE_HEADER: &str = "step,epoch,phase,loss_g,loss_g_pd,loss_g_dd,loss_l1,loss_pd,loss_dd,lr";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.phase,
            self.loss_g,
            self.loss_g_pd,
            self.loss_g_dd,
            self.loss_l1,
            self.loss_pd,
            self.loss_dd,
            self.lr
        )
    }
}

impl TrainState {
    /// Fresh networks and optimizers for `cfg`.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut g = build_generator(&cfg.generator)?;
        match &cfg.warm_start {
            Some(path) => g.init_params(&InitScheme::WarmStart {
                checkpoint: path.clone(),
            })?,
            None => {
                let s = seed::derive(cfg.seed, &[STREAM_INIT_G]);
                g.init_params(&match cfg.generator_init {
                    GeneratorInit::HeNormal => InitScheme::HeNormal { seed: s },
                    GeneratorInit::Normal002 => InitScheme::Normal002 { seed: s },
                })?
            }
        }
        let (pd_spec, dd_spec) = cfg.disc_specs();
        let mut pd = build_pair_discriminator(&pd_spec)?;
        pd.init_params(&InitScheme::Normal002 {
            seed: seed::derive(cfg.seed, &[STREAM_INIT_PD]),
        })?;
        let mut dd = build_depth_discriminator(&dd_spec)?;
        dd.init_params(&InitScheme::Normal002 {
            seed: seed::derive(cfg.seed, &[STREAM_INIT_DD]),
        })?;
        Ok(Self {
            opt_g: Adam::new(cfg.optimizer, g.params()),
            opt_pd: Adam::new(cfg.optimizer, pd.params()),
            opt_dd: Adam::new(cfg.optimizer, dd.params()),
            g,
            pd,
            dd,
            counters: Counters::default(),
            phase: Phase::Warmup,
            epoch: 0,
            cursor: 0,
            history: History::new(cfg.history_capacity()),
            seed: cfg.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut arrays = Vec::new();
        for (scope, net, opt) in [("g/", &self.g, &self.opt_g), ("pd/", &self.pd, &self.opt_pd), ("dd/", &self.dd, &self.opt_dd)] {
            arrays.extend(network_arrays(net, scope));
            for (kind, moments) in [("m", &opt.m), ("v", &opt.v)] {
                for (i, t) in moments.iter().enumerate() {
                    arrays.push(NamedTensor {
                        name: format!("opt/{scope}{kind}/{i}"),
                        value: t.clone(),
                    });
                }
            }
        }
        let meta = serde_json::json!({
            "generator_spec": self.g.spec(),
            "pd_spec": self.pd.spec(),
            "dd_spec": self.dd.spec(),
            "optimizers": [
                {"config": self.opt_g.config, "step": self.opt_g.step},
                {"config": self.opt_pd.config, "step": self.opt_pd.step},
                {"config": self.opt_dd.config, "step": self.opt_dd.step},
            ],
            "counters": self.counters,
            "phase": self.phase,
            "epoch": self.epoch,
            "cursor": self.cursor,
            "history": self.history,
            "seed": self.seed,
        });
        let refs: Vec<&NamedTensor> = arrays.iter().collect();
        checkpoint::write_container(path, "train_state", meta, &refs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, arrays) = checkpoint::read_container(path)?;
        if m.kind != "train_state" {
            return Err(Error::CheckpointCorrupt(format!("{} holds a {}, not a training state", path.display(), m.kind)));
        }
        let field = |k: &str| m.meta.get(k).cloned().ok_or_else(|| Error::CheckpointCorrupt(format!("missing {k}")));
        let parse = |k: &str| -> Result<serde_json::Value> { field(k) };
        fn de<T: serde::de::DeserializeOwned>(v: serde_json::Value) -> Result<T> {
            serde_json::from_value(v).map_err(|e| Error::CheckpointCorrupt(e.to_string()))
        }
        let g = network_from_arrays(&de::<NetworkSpec>(parse("generator_spec")?)?, &arrays, "g/")?;
        let pd = network_from_arrays(&de::<NetworkSpec>(parse("pd_spec")?)?, &arrays, "pd/")?;
        let dd = network_from_arrays(&de::<NetworkSpec>(parse("dd_spec")?)?, &arrays, "dd/")?;

        #[derive(Deserialize)]
        struct OptMeta {
            config: AdamConfig,
            step: u64,
        }
        let opts: Vec<OptMeta> = de(parse("optimizers")?)?;
        if opts.len() != 3 {
            return Err(Error::CheckpointCorrupt("expected three optimizers".into()));
        }
        let restore = |scope: &str, net: &Network, meta: &OptMeta| -> Result<Adam> {
            let mut opt = Adam::new(meta.config, net.params());
            opt.step = meta.step;
            for (kind, slot) in [("m", &mut opt.m), ("v", &mut opt.v)] {
                for (i, t) in slot.iter_mut().enumerate() {
                    let name = format!("opt/{scope}{kind}/{i}");
                    let a = arrays
                        .iter()
                        .find(|a| a.name == name)
                        .ok_or_else(|| Error::CheckpointCorrupt(format!("missing {name}")))?;
                    if a.value.shape() != t.shape() {
                        return Err(Error::CheckpointCorrupt(format!("{name} has the wrong shape")));
                    }
                    *t = a.value.clone();
                }
            }
            Ok(opt)
        };
        Ok(Self {
            opt_g: restore("g/", &g, &opts[0])?,
            opt_pd: restore("pd/", &pd, &opts[1])?,
            opt_dd: restore("dd/", &dd, &opts[2])?,
            g,
            pd,
            dd,
            counters: de(parse("counters")?)?,
            phase: de(parse("phase")?)?,
            epoch: de(parse("epoch")?)?,
            cursor: de(parse("cursor")?)?,
            history: de(parse("history")?)?,
            seed: de(parse("seed")?)?,
        })
    }

    /// Checks that a loaded state belongs to `cfg`.
    fn check_matches(&self, cfg: &TrainConfig) -> Result<()> {
        let (pd_spec, dd_spec) = cfg.disc_specs();
        let expect = [
            (self.g.spec(), NetworkSpec::Generator(cfg.generator.clone())),
            (self.pd.spec(), NetworkSpec::PairDiscriminator(pd_spec)),
            (self.dd.spec(), NetworkSpec::DepthDiscriminator(dd_spec)),
        ];
        for (have, want) in expect {
            if *have != want {
                return Err(Error::SpecMismatch(format!("checkpointed {} differs from the configuration", want.role())));
            }
        }
        if self.seed != cfg.seed {
            return Err(Error::SpecMismatch("checkpoint was trained with a different seed".into()));
        }
        Ok(())
    }
}

struct LabeledTensors {
    images: Tensor,
    depths: Tensor,
    masks: Tensor,
}

fn labeled_tensors(samples: &[LabeledSample], idx: &[usize]) -> Result<LabeledTensors> {
    Ok(LabeledTensors {
        images: image_batch(idx.iter().map(|&i| &samples[i].image))?,
        depths: depth_batch(idx.iter().map(|&i| &samples[i].depth))?,
        masks: mask_batch(idx.iter().map(|&i| &samples[i].mask))?,
    })
}

/// Ground truth with invalid pixels replaced by `fill`, so the
/// discriminators never see sensor holes.
fn filled_depth(depths: &Tensor, masks: &Tensor, fill: &Tensor) -> Tensor {
    let mut out = depths.clone();
    for ((d, &m), &f) in out.data_mut().iter_mut().zip(masks.data()).zip(fill.data()) {
        if m == 0.0 {
            *d = f;
        }
    }
    out
}

fn collect_grads(g: &Graph, root: Var, vars: &[Var], net: &Network) -> Vec<Tensor> {
    let mut grads = g.backward(root);
    vars.iter()
        .zip(net.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect()
}

/// Generator gradients of one step, before the optimizer is applied.
#[derive(Clone, Debug)]
pub struct GeneratorStep {
    pub grads: Vec<Tensor>,
    pub record: StepRecord,
    /// Generator output of this step, detached.
    pub fake: Tensor,
}

enum GenTarget<'a> {
    /// Labeled batch: adversarial terms plus β·L1, or a plain regression loss.
    Supervised { gt: &'a Tensor, mask: &'a Tensor, beta: f64 },
    Semi,
}

/// Computes the generator loss and its gradients without updating anything.
fn generator_grads(state: &TrainState, cfg: &TrainConfig, images: &Tensor, target: GenTarget<'_>) -> Result<(GeneratorStep, crate::models::BnUpdates)> {
    let mut graph = Graph::new();
    let gv = state.g.bind(&mut graph, true);
    let x = graph.constant(images.clone());
    let fwd = state.g.forward(&mut graph, &gv, &[x], Mode::Train)?;
    let pred = fwd.output;
    let fake = graph.value(pred).clone();
    let mut rec = StepRecord::default();

    if let (Some(kind), GenTarget::Supervised { gt, mask, .. }) = (cfg.regression_loss, &target) {
        let loss = losses::pixel_loss_with(&mut graph, kind, cfg.scale_invariant_coefficient, pred, gt, mask)?;
        rec.loss_g = loss.value.scalar;
        rec.loss_l1 = losses::pixel_loss_value(LossKind::L1, 0.0, &fake, gt, mask)?.0.scalar;
        let grads = collect_grads(&graph, loss.var, &gv, &state.g);
        return Ok((GeneratorStep { grads, record: rec, fake }, fwd.bn));
    }

    let w = cfg.effective_weights();
    let pd_fake = if cfg.discriminators.uses_pd() {
        let pv = state.pd.bind(&mut graph, false);
        Some(state.pd.forward(&mut graph, &pv, &[x, pred], Mode::Train)?.output)
    } else {
        None
    };
    let dd_fake = if cfg.discriminators.uses_dd() {
        let dv = state.dd.bind(&mut graph, false);
        Some(state.dd.forward(&mut graph, &dv, &[pred], Mode::Train)?.output)
    } else {
        None
    };
    let loss = match target {
        GenTarget::Supervised { gt, mask, beta } => losses::loss_g_sup(&mut graph, &w, beta, pd_fake, dd_fake, pred, gt, mask)?,
        GenTarget::Semi => losses::loss_g_semi(&mut graph, &w, pd_fake, dd_fake)?,
    };
    rec.loss_g = loss.value.scalar;
    rec.loss_g_pd = if w.lambda != 0.0 { loss.value.component("g_pd").unwrap_or(0.0) } else { 0.0 };
    rec.loss_g_dd = if w.lambda != 1.0 { loss.value.component("g_dd").unwrap_or(0.0) } else { 0.0 };
    rec.loss_l1 = loss.value.component("l1").unwrap_or(0.0);
    let grads = collect_grads(&graph, loss.var, &gv, &state.g);
    Ok((GeneratorStep { grads, record: rec, fake }, fwd.bn))
}

/// One discriminator update on a real and a fake input set.
fn discriminator_update(
    net: &mut Network,
    opt: &mut Adam,
    real: &[&Tensor],
    fake: &[&Tensor],
    w: &LossWeights,
    lr: f64,
    objective: fn(&mut Graph, Var, Var, &LossWeights) -> Result<losses::Loss>,
) -> Result<f64> {
    let mut graph = Graph::new();
    let vars = net.bind(&mut graph, true);
    let rv: Vec<Var> = real.iter().map(|t| graph.constant((*t).clone())).collect();
    let fv: Vec<Var> = fake.iter().map(|t| graph.constant((*t).clone())).collect();
    let fr = net.forward(&mut graph, &vars, &rv, Mode::Train)?;
    let ff = net.forward(&mut graph, &vars, &fv, Mode::Train)?;
    let loss = objective(&mut graph, fr.output, ff.output, w)?;
    let grads = collect_grads(&graph, loss.var, &vars, net);
    opt.update(net.params_mut(), &grads, lr)?;
    net.commit_bn(fr.bn);
    net.commit_bn(ff.bn);
    Ok(loss.value.scalar)
}

fn apply_generator(state: &mut TrainState, step: &GeneratorStep, bn: crate::models::BnUpdates, lr: f64) -> Result<()> {
    state.opt_g.update(state.g.params_mut(), &step.grads, lr)?;
    state.g.commit_bn(bn);
    state.counters.g_updates += 1;
    Ok(())
}

fn update_discriminators(
    state: &mut TrainState,
    cfg: &TrainConfig,
    real_images: &Tensor,
    real_depths: &Tensor,
    fake_images: &Tensor,
    fake: &Tensor,
    lr: f64,
    rec: &mut StepRecord,
) -> Result<()> {
    if cfg.regression_loss.is_some() {
        return Ok(());
    }
    let w = cfg.effective_weights();
    if cfg.discriminators.uses_pd() {
        rec.loss_pd = discriminator_update(&mut state.pd, &mut state.opt_pd, &[real_images, real_depths], &[fake_images, fake], &w, lr, losses::loss_pd)?;
        state.counters.pd_updates += 1;
    }
    if cfg.discriminators.uses_dd() {
        rec.loss_dd = discriminator_update(&mut state.dd, &mut state.opt_dd, &[real_depths], &[fake], &w, lr, losses::loss_dd)?;
        state.counters.dd_updates += 1;
    }
    Ok(())
}

fn adversarial_progress(cfg: &TrainConfig, state: &TrainState, epoch_len: usize) -> f64 {
    let total = (cfg.epochs * epoch_len).max(1) as f64;
    (state.counters.supervised_steps + state.counters.semi_steps) as f64 / total
}

/// G by the supervised objective, then PD, then DD, all on one labeled batch.
pub fn train_step_supervised(
    state: &mut TrainState,
    cfg: &TrainConfig,
    split: &DatasetSplit,
    batch: &Batch,
    progress: f64,
) -> Result<StepRecord> {
    if batch.kind != BatchKind::Labeled {
        return Err(Error::BatchKind {
            expected: BatchKind::Labeled.name(),
            found: batch.kind.name(),
        });
    }
    let t = labeled_tensors(&split.labeled, &batch.indices)?;
    let lr = cfg.lr_at(state.counters.step);
    let beta = cfg.weights.beta_at(progress);
    let (gs, bn) = generator_grads(
        state,
        cfg,
        &t.images,
        GenTarget::Supervised {
            gt: &t.depths,
            mask: &t.masks,
            beta,
        },
    )?;
    apply_generator(state, &gs, bn, lr)?;
    let mut rec = gs.record.clone();
    let real = filled_depth(&t.depths, &t.masks, &gs.fake);
    update_discriminators(state, cfg, &t.images, &real, &t.images, &gs.fake, lr, &mut rec)?;
    state.counters.supervised_steps += 1;
    rec.phase = "supervised".into();
    Ok(finish_step(state, rec, batch.epoch, lr))
}

/// Labeled indices standing in for real samples during a semi step.
pub fn real_pool(n_labeled: usize, size: usize, seed: u64, step: u64) -> Result<Vec<usize>> {
    if n_labeled == 0 {
        return Err(Error::Data("semi-supervised step needs a nonempty real pool".into()));
    }
    let mut rng = seed::rng(seed, &[STREAM_POOL, step]);
    Ok(if size <= n_labeled {
        index::sample(&mut rng, n_labeled, size).into_vec()
    } else {
        (0..size).map(|_| rng.random_range(0..n_labeled)).collect()
    })
}

/// G by the adversarial objective on unlabeled images, then PD and DD
/// against real samples drawn from the labeled set.
pub fn train_step_semi(state: &mut TrainState, cfg: &TrainConfig, split: &DatasetSplit, batch: &Batch) -> Result<StepRecord> {
    if batch.kind != BatchKind::Unlabeled {
        return Err(Error::BatchKind {
            expected: BatchKind::Unlabeled.name(),
            found: batch.kind.name(),
        });
    }
    if cfg.regression_loss.is_some() {
        return Err(Error::Config("regression training has no semi-supervised step".into()));
    }
    let images = image_batch(batch.indices.iter().map(|&i| &split.unlabeled[i].image))?;
    let pool = real_pool(split.labeled.len(), batch.indices.len(), state.seed, state.counters.step)?;
    let real = labeled_tensors(&split.labeled, &pool)?;
    let lr = cfg.lr_at(state.counters.step);
    let (gs, bn) = generator_grads(state, cfg, &images, GenTarget::Semi)?;
    apply_generator(state, &gs, bn, lr)?;
    let mut rec = gs.record.clone();
    let real_depths = if real.masks.data().iter().any(|&m| m == 0.0) {
        let fill = state.g.infer(&[&real.images])?;
        filled_depth(&real.depths, &real.masks, &fill)
    } else {
        real.depths.clone()
    };
    update_discriminators(state, cfg, &real.images, &real_depths, &images, &gs.fake, lr, &mut rec)?;
    state.counters.semi_steps += 1;
    rec.phase = "semi".into();
    Ok(finish_step(state, rec, batch.epoch, lr))
}

fn finish_step(state: &mut TrainState, mut rec: StepRecord, epoch: usize, lr: f64) -> StepRecord {
    state.counters.step += 1;
    rec.step = state.counters.step;
    rec.epoch = epoch;
    rec.lr = lr;
    rec
}

/// Gradients of the supervised generator objective on a labeled batch, for
/// inspection; nothing is updated.
pub fn supervised_generator_grads(state: &TrainState, cfg: &TrainConfig, split: &DatasetSplit, indices: &[usize], beta: f64) -> Result<GeneratorStep> {
    let t = labeled_tensors(&split.labeled, indices)?;
    Ok(generator_grads(state, cfg, &t.images, GenTarget::Supervised { gt: &t.depths, mask: &t.masks, beta })?.0)
}

/// Gradients of the semi generator objective on unlabeled images.
pub fn semi_generator_grads(state: &TrainState, cfg: &TrainConfig, split: &DatasetSplit, indices: &[usize]) -> Result<GeneratorStep> {
    let images = image_batch(indices.iter().map(|&i| &split.unlabeled[i].image))?;
    Ok(generator_grads(state, cfg, &images, GenTarget::Semi)?.0)
}

fn warmup_iterator(cfg: &TrainConfig, n_labeled: usize) -> Result<BatchIterator> {
    BatchIterator::with_counts(n_labeled, 0, cfg.batch_size, BatchMode::Supervised, seed::derive(cfg.seed, &[STREAM_WARMUP]))
}

pub fn default_warmup_steps(cfg: &TrainConfig, n_labeled: usize) -> u64 {
    cfg.warmup_steps.unwrap_or(n_labeled.div_ceil(cfg.batch_size) as u64)
}

/// Trains the generator with masked L1 until `steps` warm-up steps have run
/// in total. Discriminators are untouched.
pub fn warmup_generator(
    state: &mut TrainState,
    cfg: &TrainConfig,
    labeled: &[LabeledSample],
    steps: u64,
    mut sink: impl FnMut(&StepRecord) -> Result<bool>,
) -> Result<()> {
    if labeled.is_empty() {
        return Err(Error::Data("warm-up needs labeled samples".into()));
    }
    if steps == 0 {
        return Ok(());
    }
    let mut it = warmup_iterator(cfg, labeled.len())?;
    let per_epoch = it.epoch_len() as u64;
    it.seek((state.counters.warmup_steps / per_epoch) as usize, (state.counters.warmup_steps % per_epoch) as usize);
    while state.counters.warmup_steps < steps {
        let batch = it.next().expect("supervised stream is endless");
        let t = labeled_tensors(labeled, &batch.indices)?;
        let lr = cfg.lr_at(state.counters.step);
        let mut graph = Graph::new();
        let gv = state.g.bind(&mut graph, true);
        let x = graph.constant(t.images);
        let fwd = state.g.forward(&mut graph, &gv, &[x], Mode::Train)?;
        let loss = losses::pixel_loss(&mut graph, LossKind::L1, fwd.output, &t.depths, &t.masks)?;
        let grads = collect_grads(&graph, loss.var, &gv, &state.g);
        state.opt_g.update(state.g.params_mut(), &grads, lr)?;
        state.g.commit_bn(fwd.bn);
        state.counters.g_updates += 1;
        state.counters.warmup_steps += 1;
        let rec = StepRecord {
            phase: "warmup".into(),
            loss_g: loss.value.scalar,
            loss_l1: loss.value.scalar,
            ..Default::default()
        };
        let rec = finish_step(state, rec, batch.epoch, lr);
        if !sink(&rec)? {
            return Ok(());
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for checkpoints and curve files.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Save and return after this many global steps, as if interrupted.
    pub stop_after_steps: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Rows produced by this call.
    pub curve: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub interrupted: bool,
    pub plateaued: bool,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const FINAL_FILE: &str = "final.ckpt";
pub const CURVE_FILE: &str = "curve.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";
const EPOCHS_HEADER: &str = "epoch,split,l1,rmse,rel,delta1";

/// Deterministic split of the labeled set into (train, validation) indices.
pub fn validation_split(cfg: &TrainConfig, n: usize) -> (Vec<usize>, Vec<usize>) {
    if !matches!(cfg.convergence, Convergence::Plateau { .. }) || n < 2 {
        return ((0..n).collect(), Vec::new());
    }
    let k = ((n as f64 * cfg.validation_fraction).round() as usize).clamp(1, n - 1);
    let perm = seed::permutation(n, cfg.seed, &[STREAM_VALIDATION]);
    let mut val = perm[..k].to_vec();
    let mut train = perm[k..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Keeps the header and the rows whose first column is below `limit`.
fn truncate_csv(path: &Path, header: &str, limit: u64) -> Result<()> {
    let mut keep = vec![header.to_string()];
    if path.exists() {
        for line in BufReader::new(fs::File::open(path)?).lines().skip(1) {
            let line = line?;
            let key: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
            if key.is_some_and(|k| k < limit) {
                keep.push(line);
            }
        }
    }
    fs::write(path, keep.join("\n") + "\n")?;
    Ok(())
}

struct CsvSink {
    curve: Option<BufWriter<fs::File>>,
    epochs: Option<BufWriter<fs::File>>,
}

impl CsvSink {
    fn open(out: Option<&Path>, state: &TrainState) -> Result<Self> {
        let Some(dir) = out else {
            return Ok(Self { curve: None, epochs: None });
        };
        fs::create_dir_all(dir)?;
        let curve = dir.join(CURVE_FILE);
        let epochs = dir.join(EPOCHS_FILE);
        truncate_csv(&curve, CURVE_HEADER, state.counters.step + 1)?;
        truncate_csv(&epochs, EPOCHS_HEADER, state.epoch as u64)?;
        let append = |p: &Path| -> Result<BufWriter<fs::File>> { Ok(BufWriter::new(fs::OpenOptions::new().append(true).open(p)?)) };
        Ok(Self {
            curve: Some(append(&curve)?),
            epochs: Some(append(&epochs)?),
        })
    }

    fn step(&mut self, rec: &StepRecord) -> Result<()> {
        if let Some(w) = &mut self.curve {
            writeln!(w, "{}", rec.csv_row())?;
        }
        Ok(())
    }

    fn epoch(&mut self, rec: &EpochRecord) -> Result<()> {
        if let Some(w) = &mut self.epochs {
            writeln!(w, "{},{},{},{},{},{}", rec.epoch, rec.split, rec.l1, rec.rmse, rec.rel, rec.delta1)?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        for w in [&mut self.curve, &mut self.epochs].into_iter().flatten() {
            w.flush()?;
        }
        Ok(())
    }
}

fn evaluate_epoch(g: &Network, samples: &[LabeledSample], epoch: usize, split: &str) -> Result<EpochRecord> {
    let l1 = metrics::masked_l1(g, samples)?;
    let (rmse, rel, delta1) = match metrics::evaluate_model(g, samples, None, Aggregation::Pixel) {
        Ok(e) => (e.report.rmse, e.report.rel, e.report.delta1),
        Err(e) => {
            warn!("epoch {epoch}: metrics unavailable: {e}");
            (f64::NAN, f64::NAN, f64::NAN)
        }
    };
    Ok(EpochRecord {
        epoch,
        split: split.to_string(),
        l1,
        rmse,
        rel,
        delta1,
    })
}

/// Warm-up followed by the alternating schedule until the epoch budget or
/// the plateau rule ends the run.
pub fn train(cfg: &TrainConfig, split: &DatasetSplit, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.batching != BatchMode::Supervised && split.unlabeled.is_empty() {
        return Err(Error::Config(format!("{:?} batching needs unlabeled images", cfg.batching)));
    }
    let (train_idx, val_idx) = validation_split(cfg, split.labeled.len());
    let train_split = DatasetSplit {
        labeled: train_idx.iter().map(|&i| split.labeled[i].clone()).collect(),
        unlabeled: split.unlabeled.clone(),
        seed: split.seed,
    };
    let (val_samples, val_name): (Vec<LabeledSample>, &str) = if val_idx.is_empty() {
        (train_split.labeled.clone(), "train")
    } else {
        (val_idx.iter().map(|&i| split.labeled[i].clone()).collect(), "validation")
    };

    let mut state = match &opts.resume {
        Some(p) => {
            let s = TrainState::load(p)?;
            s.check_matches(cfg)?;
            info!("resuming from {} at step {}", p.display(), s.counters.step);
            s
        }
        None => TrainState::new(cfg)?,
    };
    let mut sink = CsvSink::open(opts.out_dir.as_deref(), &state)?;
    let mut curve = Vec::new();
    let mut epochs = Vec::new();
    let stop_at = opts.stop_after_steps.unwrap_or(u64::MAX);
    let save = |state: &TrainState, sink: &mut CsvSink, name: &str| -> Result<()> {
        sink.flush()?;
        if let Some(dir) = &opts.out_dir {
            state.save(&dir.join(name))?;
        }
        Ok(())
    };
    let interrupted = |state: TrainState, curve, epochs| TrainOutcome {
        state,
        curve,
        epochs,
        interrupted: true,
        plateaued: false,
    };

    if state.phase == Phase::Warmup {
        let steps = default_warmup_steps(cfg, train_split.labeled.len());
        warmup_generator(&mut state, cfg, &train_split.labeled, steps, |rec| {
            sink.step(rec)?;
            curve.push(rec.clone());
            Ok(rec.step < stop_at)
        })?;
        if state.counters.warmup_steps < steps {
            save(&state, &mut sink, CHECKPOINT_FILE)?;
            return Ok(interrupted(state, curve, epochs));
        }
        state.phase = Phase::Adversarial;
        info!("warm-up finished after {steps} steps");
    }

    let it = BatchIterator::with_counts(
        train_split.labeled.len(),
        train_split.unlabeled.len(),
        cfg.batch_size,
        cfg.batching,
        cfg.seed,
    )?
    .with_ratio(cfg.alternation_ratio[0], cfg.alternation_ratio[1])?;
    let epoch_len = it.epoch_len();
    let mut plateaued = false;
    while state.phase == Phase::Adversarial && state.epoch < cfg.epochs {
        let batches = it.epoch_batches(state.epoch);
        while state.cursor < batches.len() {
            if state.counters.step >= stop_at {
                save(&state, &mut sink, CHECKPOINT_FILE)?;
                return Ok(interrupted(state, curve, epochs));
            }
            let batch = &batches[state.cursor];
            let rec = match batch.kind {
                BatchKind::Labeled => {
                    let progress = adversarial_progress(cfg, &state, epoch_len);
                    train_step_supervised(&mut state, cfg, &train_split, batch, progress)?
                }
                BatchKind::Unlabeled => train_step_semi(&mut state, cfg, &train_split, batch)?,
            };
            state.cursor += 1;
            sink.step(&rec)?;
            curve.push(rec);
        }
        let rec = evaluate_epoch(&state.g, &val_samples, state.epoch, val_name)?;
        info!("epoch {} {} l1 {:.4} rmse {:.4}", rec.epoch, rec.split, rec.l1, rec.rmse);
        sink.epoch(&rec)?;
        epochs.push(rec.clone());
        plateaued = state.history.push(rec, cfg.convergence);
        state.epoch += 1;
        state.cursor = 0;
        if plateaued {
            info!("validation loss plateaued after epoch {}", state.epoch - 1);
            state.phase = Phase::Finished;
        } else if state.epoch % cfg.checkpoint_every_epochs == 0 {
            save(&state, &mut sink, CHECKPOINT_FILE)?;
        }
    }
    state.phase = Phase::Finished;
    save(&state, &mut sink, CHECKPOINT_FILE)?;
    if let Some(dir) = &opts.out_dir {
        checkpoint::save_network(&dir.join(FINAL_FILE), &state.g)?;
    }
    Ok(TrainOutcome {
        state,
        curve,
        epochs,
        interrupted: false,
        plateaued,
    })
}
