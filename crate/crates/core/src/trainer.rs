//! Alternating augmenter / target training.
//!
//! Each step samples a training batch, updates every active augmenter in
//! turn (meta + regularizer + adversarial terms), then updates the target
//! on the clean batch and the augmented views.

use onlineaug_tape::{BatchStats, Graph, Tensor, Var};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmenters::{AugKind, AugNoise, AugPass, Augmenter, AugmenterConfigs};
use crate::data::{Batch, DatasetHandle, TaskKind};
use crate::error::{Error, Result};
use crate::geometry::{grid_sample_nearest, GridMap, MaskBatch};
use crate::meta::{meta_gradient_from, Bilevel, MetaGrad, TrainEval};
use crate::metrics::{argmax, predict_masks, DiceCounts};
use crate::models::{ModelConfig, TargetModel};
use crate::nn::Mode;
use crate::optim::{Adam, AdamConfig, Sgd, SgdConfig};
use crate::params::ParamSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Virtual-step learning rate; follows the target learning rate when unset.
    pub eta: Option<f64>,
    /// Finite-difference radius is `fd_scale / ||g_val||`.
    pub fd_scale: f64,
    pub augmenters: Vec<AugKind>,
    pub weights: AugmenterConfigs,
    pub augmenter_optimizer: AdamConfig,
    pub target_optimizer: SgdConfig,
    pub model: ModelConfig,
    pub max_steps: usize,
    pub batch_size: usize,
    /// Evaluate on held-out data every this many steps (0 disables).
    pub eval_every: usize,
    pub eval_batch: usize,
    /// Set from the run's top-level seed.
    #[serde(skip)]
    pub seed: u64,
    /// Consecutive divergent steps tolerated before aborting.
    pub abort_after: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            eta: None,
            fd_scale: 0.01,
            augmenters: vec![],
            weights: AugmenterConfigs::default(),
            augmenter_optimizer: AdamConfig::default(),
            target_optimizer: SgdConfig::default(),
            model: ModelConfig::default(),
            max_steps: 1000,
            batch_size: 32,
            eval_every: 0,
            eval_batch: 200,
            seed: 0,
            abort_after: 10,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if let Some(eta) = self.eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return bad(format!("eta must be positive, got {eta}"));
            }
        }
        if !(self.fd_scale > 0.0 && self.fd_scale.is_finite()) {
            return bad(format!("fd_scale must be positive, got {}", self.fd_scale));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 (batch normalization)".into());
        }
        if self.eval_batch == 0 {
            return bad("eval_batch must be positive".into());
        }
        let w = &self.weights;
        let all = [
            ("astn.lambda_cycle", w.astn.lambda_cycle),
            ("astn.beta", w.astn.beta),
            ("astn.meta_weight", w.astn.meta_weight),
            ("dvae.lambda_vae", w.dvae.lambda_vae),
            ("dvae.lambda_smooth", w.dvae.lambda_smooth),
            ("dvae.beta", w.dvae.beta),
            ("dvae.meta_weight", w.dvae.meta_weight),
            ("pvae.lambda_vae", w.pvae.lambda_vae),
            ("pvae.beta", w.pvae.beta),
            ("pvae.meta_weight", w.pvae.meta_weight),
        ];
        for (name, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative weight, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&w.astn.dropout) {
            return bad(format!("astn.dropout must lie in [0, 1), got {}", w.astn.dropout));
        }
        let mut seen = self.augmenters.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.augmenters.len() {
            return bad("augmenter listed twice".into());
        }
        let o = &self.augmenter_optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return bad("invalid augmenter optimizer settings".into());
        }
        let t = &self.target_optimizer;
        if !(t.lr > 0.0 && (0.0..1.0).contains(&t.momentum) && t.weight_decay >= 0.0) {
            return bad("invalid target optimizer settings".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugReport {
    pub kind: AugKind,
    /// Validation loss at the virtually updated target.
    pub meta_loss: f64,
    /// Weighted regularizer value.
    pub regularizer: f64,
    /// `-L(x_tr; theta, phi)` on the augmented views.
    pub adversarial: f64,
    /// Update skipped because of a non-finite gradient.
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub target_loss: f64,
    pub augmenters: Vec<AugReport>,
    /// Mean meta validation loss over augmenters (none without augmenters).
    pub val_loss: Option<f64>,
    /// Held-out loss and metric, on evaluation steps.
    pub eval_loss: Option<f64>,
    pub eval_metric: Option<f64>,
    pub divergent: bool,
}

impl StepReport {
    pub fn is_finite(&self) -> bool {
        let opt = |v: Option<f64>| v.is_none_or(f64::is_finite);
        self.target_loss.is_finite()
            && opt(self.val_loss)
            && opt(self.eval_loss)
            && opt(self.eval_metric)
            && self
                .augmenters
                .iter()
                .all(|a| a.meta_loss.is_finite() && a.regularizer.is_finite() && a.adversarial.is_finite())
    }
}

/// Training data and the optional held-out splits.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub train: &'a DatasetHandle,
    /// Source of validation batches for the meta term; disjoint training
    /// batches are used when absent.
    pub val: Option<&'a DatasetHandle>,
    /// Periodic evaluation split.
    pub eval: Option<&'a DatasetHandle>,
}

#[derive(Clone, Debug)]
pub struct AugmenterSlot {
    pub aug: Augmenter,
    pub opt: Adam,
}

/// Complete mutable training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainerConfig,
    pub task: TaskKind,
    pub target: TargetModel,
    pub target_opt: Sgd,
    pub slots: Vec<AugmenterSlot>,
    pub step: usize,
    pub consecutive_divergent: usize,
    pub rng_data: ChaCha8Rng,
    pub rng_noise: ChaCha8Rng,
}

/// RNG streams derived from the run seed.
pub const STREAM_TARGET_INIT: u64 = 1;
pub const STREAM_AUG_INIT: u64 = 2;
pub const STREAM_DATA: u64 = 10;
pub const STREAM_NOISE: u64 = 11;

pub fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

impl Trainer {
    /// Fresh state for a dataset with the given layout.
    pub fn new(cfg: TrainerConfig, task: TaskKind, channels: usize, size: usize, classes: usize) -> Result<Self> {
        cfg.validate()?;
        let banks = 1 + cfg.augmenters.len();
        let target = TargetModel::new(&cfg.model, channels, classes, banks, &mut stream(cfg.seed, STREAM_TARGET_INIT))?;
        let target_opt = Sgd::new(cfg.target_optimizer.clone(), &target.params);
        let mut slots = Vec::with_capacity(cfg.augmenters.len());
        for &kind in &cfg.augmenters {
            let mut rng = stream(cfg.seed, STREAM_AUG_INIT + 100 * (kind as u64 + 1));
            let aug = Augmenter::new(kind, &cfg.weights, channels, size, &mut rng)?;
            let opt = Adam::new(cfg.augmenter_optimizer.clone(), aug.params());
            slots.push(AugmenterSlot { aug, opt });
        }
        Ok(Self {
            rng_data: stream(cfg.seed, STREAM_DATA),
            rng_noise: stream(cfg.seed, STREAM_NOISE),
            cfg,
            task,
            target,
            target_opt,
            slots,
            step: 0,
            consecutive_divergent: 0,
        })
    }

    pub fn for_dataset(cfg: TrainerConfig, d: &DatasetHandle) -> Result<Self> {
        if d.height != d.width {
            return Err(Error::InvalidArgument(format!("square images required, got {}x{}", d.height, d.width)));
        }
        Self::new(cfg, d.task, d.channels, d.height, d.classes)
    }

    pub fn lr(&self) -> f64 {
        self.cfg.target_optimizer.lr_at(self.step, self.cfg.max_steps)
    }

    pub fn eta(&self) -> f64 {
        self.cfg.eta.unwrap_or_else(|| self.lr())
    }

    /// Indices of one training batch and one validation batch per augmenter.
    fn sample_indices(&mut self, data: &TrainData) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
        let b = self.cfg.batch_size;
        let k = self.slots.len();
        match data.val {
            Some(val) => {
                let tr = sample(&mut self.rng_data, data.train.len(), b)?;
                let mut vals = Vec::with_capacity(k);
                for _ in 0..k {
                    vals.push(sample(&mut self.rng_data, val.len(), b)?);
                }
                Ok((tr, vals))
            }
            None => {
                let tr = sample(&mut self.rng_data, data.train.len(), b)?;
                let mut vals = Vec::with_capacity(k);
                for _ in 0..k {
                    // a second mini-batch disjoint from the training one
                    let rest: Vec<usize> = (0..data.train.len()).filter(|i| !tr.contains(i)).collect();
                    let pick = sample(&mut self.rng_data, rest.len(), b)?;
                    vals.push(pick.into_iter().map(|j| rest[j]).collect());
                }
                Ok((tr, vals))
            }
        }
    }

    /// One full iteration. Divergent steps are reported, not returned as
    /// errors, until `abort_after` of them occur in a row.
    pub fn train_step(&mut self, data: &TrainData) -> Result<StepReport> {
        let (tr_idx, val_idx) = self.sample_indices(data)?;
        let x_tr = data.train.batch(&tr_idx);
        let lr = self.lr();
        let eta = self.eta();
        let mut noises = Vec::with_capacity(self.slots.len());
        let mut reports = Vec::with_capacity(self.slots.len());
        let mut divergent = false;
        for (i, vi) in val_idx.iter().enumerate() {
            let val_src = data.val.unwrap_or(data.train);
            let x_val = val_src.batch(vi);
            let noise = self.slots[i].aug.sample_noise(x_tr.images.shape()[0], &mut self.rng_noise)?;
            let rep = match self.augmenter_step(i, &x_tr, &x_val, &noise, eta) {
                Ok(r) => r,
                Err(Error::Divergent(_)) => AugReport {
                    kind: self.slots[i].aug.kind(),
                    meta_loss: f64::NAN,
                    regularizer: f64::NAN,
                    adversarial: f64::NAN,
                    skipped: true,
                },
                Err(e) => return Err(e),
            };
            divergent |= rep.skipped;
            reports.push(rep);
            noises.push(noise);
        }
        let target_loss = match self.target_step(&x_tr, &noises, lr) {
            Ok(l) => l,
            Err(Error::Divergent(_)) => {
                divergent = true;
                f64::NAN
            }
            Err(e) => return Err(e),
        };
        let metas: Vec<f64> = reports.iter().filter(|r| !r.skipped).map(|r| r.meta_loss).collect();
        let val_loss = (!metas.is_empty()).then(|| metas.iter().sum::<f64>() / metas.len() as f64);
        self.step += 1;
        let (eval_loss, eval_metric) = match data.eval {
            Some(ev) if self.cfg.eval_every > 0 && self.step % self.cfg.eval_every == 0 => {
                let (l, m) = self.evaluate(ev)?;
                (Some(l), Some(m))
            }
            _ => (None, None),
        };
        let report = StepReport {
            step: self.step,
            lr,
            target_loss,
            augmenters: reports,
            val_loss,
            eval_loss,
            eval_metric,
            divergent,
        };
        if report.divergent || !report.is_finite() {
            self.consecutive_divergent += 1;
            log::warn!("step {} divergent ({} in a row)", self.step, self.consecutive_divergent);
            if self.consecutive_divergent >= self.cfg.abort_after {
                return Err(Error::Aborted(self.consecutive_divergent));
            }
        } else {
            self.consecutive_divergent = 0;
        }
        Ok(StepReport {
            divergent: report.divergent || !report.is_finite(),
            ..report
        })
    }

    fn view_labels(&self, labels: &[usize], grid: Option<&Tensor>, n: usize) -> Result<Vec<usize>> {
        match (self.task, grid) {
            (TaskKind::Segmentation, Some(grid)) => {
                let (h, w) = (grid.shape()[1], grid.shape()[2]);
                let m = MaskBatch::new(n, h, w, labels.to_vec(), self.target.classes())?;
                Ok(grid_sample_nearest(&m, &GridMap::new(grid.clone())?)?.into_labels())
            }
            _ => Ok(labels.to_vec()),
        }
    }

    /// Runs the augmenter's forward pass and collects view values and labels.
    fn views(&self, g: &Graph, pass: &AugPass, labels: &[usize], n: usize) -> Result<Vec<(Tensor, Vec<usize>)>> {
        pass.views
            .iter()
            .zip(&pass.grids)
            .map(|(&v, grid)| {
                let lab = self.view_labels(labels, grid.map(|gv| g.value(gv)), n)?;
                Ok((g.value(v).clone(), lab))
            })
            .collect()
    }

    /// One update of augmenter `i`.
    pub fn augmenter_step(&mut self, i: usize, x_tr: &Batch, x_val: &Batch, noise: &AugNoise, eta: f64) -> Result<AugReport> {
        let n = x_tr.images.shape()[0];
        let slot = &self.slots[i];
        let mut g = Graph::new();
        let p = slot.aug.params().bind(&mut g);
        let x = g.constant(x_tr.images.clone());
        let pass = slot.aug.forward(&mut g, &p, x, noise, Mode::Train)?;
        let views = self.views(&g, &pass, &x_tr.labels, n)?;
        let reg_value = g.value(pass.reg).item();
        let mut problem = ViewProblem {
            target: &self.target,
            views,
            bank: i + 1,
            val: x_val,
        };
        let theta = &self.target.params;
        let at = problem.train(theta)?;
        let meta_w = slot.aug.meta_weight();
        let beta = slot.aug.beta();
        let meta = if meta_w > 0.0 {
            meta_gradient_from(&mut problem, theta, &at, eta, self.cfg.fd_scale)?
        } else {
            MetaGrad {
                sens: at.sens.zeros_like(),
                val_loss: problem.val(theta)?.0,
                val_grad_norm: 0.0,
                fd_step: 0.0,
            }
        };
        let mut total = meta.sens.clone();
        total.scale(meta_w);
        total.axpy(-beta, &at.sens);
        let mut seeds: Vec<(Var, Tensor)> = pass.views.iter().copied().zip(total.tensors().iter().cloned()).collect();
        seeds.push((pass.reg, Tensor::ones(g.value(pass.reg).shape())));
        let grads = g.backward_seeded(&seeds);
        let gphi = slot.aug.params().collect_grads(&p, &grads);
        let kind = slot.aug.kind();
        if !gphi.all_finite() || !reg_value.is_finite() {
            return Ok(AugReport {
                kind,
                meta_loss: meta.val_loss,
                regularizer: reg_value,
                adversarial: -at.loss,
                skipped: true,
            });
        }
        let slot = &mut self.slots[i];
        slot.opt.update(slot.aug.params_mut(), &gphi);
        Ok(AugReport {
            kind,
            meta_loss: meta.val_loss,
            regularizer: reg_value,
            adversarial: -at.loss,
            skipped: false,
        })
    }

    /// Target update on the clean batch (main bank) and every augmenter's
    /// views (its auxiliary bank). Returns the loss before the update.
    pub fn target_step(&mut self, x_tr: &Batch, noises: &[AugNoise], lr: f64) -> Result<f64> {
        let n = x_tr.images.shape()[0];
        let mut g = Graph::new();
        let tp = self.target.params.bind(&mut g);
        let x = g.constant(x_tr.images.clone());
        let mut losses = Vec::new();
        let mut observed: Vec<(usize, Vec<(usize, BatchStats)>)> = Vec::new();
        let (logits, obs) = self.target.forward(&mut g, &tp, x, Mode::Train, 0)?;
        losses.push(g.cross_entropy(logits, &x_tr.labels));
        observed.push((0, obs));
        let mut aug_observed = Vec::with_capacity(self.slots.len());
        for (i, (slot, noise)) in self.slots.iter().zip(noises).enumerate() {
            let mut ag = Graph::new();
            let ap = slot.aug.params().bind_const(&mut ag);
            let ax = ag.constant(x_tr.images.clone());
            let pass = slot.aug.forward(&mut ag, &ap, ax, noise, Mode::Train)?;
            for (view, labels) in self.views(&ag, &pass, &x_tr.labels, n)? {
                let v = g.constant(view);
                let (logits, obs) = self.target.forward(&mut g, &tp, v, Mode::Train, i + 1)?;
                losses.push(g.cross_entropy(logits, &labels));
                observed.push((i + 1, obs));
            }
            aug_observed.push(pass.observed);
        }
        let mut loss = losses[0];
        for &l in &losses[1..] {
            loss = g.add(loss, l);
        }
        let loss = g.scale(loss, 1.0 / losses.len() as f64);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergent(format!("target loss {value}")));
        }
        let grads = g.backward(loss);
        let gt = self.target.params.collect_grads(&tp, &grads);
        if !gt.all_finite() {
            return Err(Error::Divergent("non-finite target gradient".into()));
        }
        self.target_opt.update(&mut self.target.params, &gt, lr);
        for (bank, obs) in &observed {
            self.target.bn.commit(*bank, obs);
        }
        for (slot, obs) in self.slots.iter_mut().zip(&aug_observed) {
            if let Some(bn) = slot.aug.bn_mut() {
                bn.commit(0, obs);
            }
        }
        Ok(value)
    }

    /// Held-out loss and metric (top-1 or foreground mean dice) through the
    /// main bank in inference mode.
    pub fn evaluate(&self, d: &DatasetHandle) -> Result<(f64, f64)> {
        evaluate(&self.target, d, self.cfg.eval_batch)
    }

    pub fn evaluate_detailed(&self, d: &DatasetHandle) -> Result<Evaluation> {
        evaluate_detailed(&self.target, d, self.cfg.eval_batch)
    }

    /// Runs until `max_steps`, calling `on_step` after every step.
    pub fn run(&mut self, data: &TrainData, mut on_step: impl FnMut(&Trainer, &StepReport) -> Result<()>) -> Result<Vec<StepReport>> {
        if data.train.is_empty() || data.val.is_some_and(DatasetHandle::is_empty) {
            return Err(Error::InvalidArgument("datasets must be non-empty".into()));
        }
        let mut history = Vec::with_capacity(self.cfg.max_steps.saturating_sub(self.step));
        while self.step < self.cfg.max_steps {
            let r = self.train_step(data)?;
            on_step(self, &r)?;
            history.push(r);
        }
        Ok(history)
    }
}

/// Distinct random indices in `0..n`.
pub fn sample(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::InvalidArgument(format!("cannot draw a batch of {k} from {n} items")));
    }
    Ok(index::sample(rng, n, k).into_vec())
}

/// Held-out results of the target through its main bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    /// Top-1 accuracy, or mean dice over the foreground classes.
    pub metric: f64,
    /// Dice of every class (segmentation only).
    pub dice: Vec<f64>,
}

pub fn evaluate(target: &TargetModel, d: &DatasetHandle, chunk: usize) -> Result<(f64, f64)> {
    let e = evaluate_detailed(target, d, chunk)?;
    Ok((e.loss, e.metric))
}

pub fn evaluate_detailed(target: &TargetModel, d: &DatasetHandle, chunk: usize) -> Result<Evaluation> {
    let idx: Vec<usize> = (0..d.len()).collect();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut counts = DiceCounts::new(d.classes);
    for part in idx.chunks(chunk.max(1)) {
        let b = d.batch(part);
        let mut g = Graph::new();
        let tp = target.params.bind_const(&mut g);
        let x = g.constant(b.images);
        let (logits, _) = target.forward(&mut g, &tp, x, Mode::Eval, 0)?;
        let ce = g.cross_entropy(logits, &b.labels);
        loss_sum += g.value(ce).item() * part.len() as f64;
        let lv = g.value(logits);
        match d.task {
            TaskKind::Classification => {
                let k = lv.shape()[1];
                correct += lv
                    .data()
                    .chunks(k)
                    .zip(&b.labels)
                    .filter(|(row, &y)| argmax(row.iter().copied()) == y)
                    .count();
            }
            TaskKind::Segmentation => counts.add(&predict_masks(lv), &b.labels),
        }
    }
    let n = d.len().max(1) as f64;
    Ok(match d.task {
        TaskKind::Classification => Evaluation {
            loss: loss_sum / n,
            metric: correct as f64 / n,
            dice: vec![],
        },
        TaskKind::Segmentation => Evaluation {
            loss: loss_sum / n,
            metric: counts.mean_foreground(),
            dice: counts.dice(),
        },
    })
}

/// Training loss on fixed augmented views through one auxiliary bank,
/// validation loss on a clean batch through the main bank.
struct ViewProblem<'a> {
    target: &'a TargetModel,
    views: Vec<(Tensor, Vec<usize>)>,
    bank: usize,
    val: &'a Batch,
}

impl Bilevel for ViewProblem<'_> {
    fn train(&mut self, theta: &ParamSet) -> Result<TrainEval> {
        let mut g = Graph::new();
        let tp = theta.bind(&mut g);
        let mut leaves = Vec::with_capacity(self.views.len());
        let mut loss = None;
        for (view, labels) in &self.views {
            let v = g.leaf(view.clone(), true);
            leaves.push(v);
            let (logits, _) = self.target.forward(&mut g, &tp, v, Mode::Train, self.bank)?;
            let ce = g.cross_entropy(logits, labels);
            loss = Some(match loss {
                None => ce,
                Some(acc) => g.add(acc, ce),
            });
        }
        let loss = loss.expect("at least one view");
        let loss = g.scale(loss, 1.0 / self.views.len() as f64);
        let grads = g.backward(loss);
        let mut sens = ParamSet::new();
        for (k, (&v, (view, _))) in leaves.iter().zip(&self.views).enumerate() {
            sens.push(format!("view{k}"), grads.get_or_zeros(v, view));
        }
        Ok(TrainEval {
            loss: g.value(loss).item(),
            grad_theta: theta.collect_grads(&tp, &grads),
            sens,
        })
    }

    fn val(&mut self, theta: &ParamSet) -> Result<(f64, ParamSet)> {
        let mut g = Graph::new();
        let tp = theta.bind(&mut g);
        let x = g.constant(self.val.images.clone());
        let (logits, _) = self.target.forward(&mut g, &tp, x, Mode::Train, 0)?;
        let ce = g.cross_entropy(logits, &self.val.labels);
        let grads = g.backward(ce);
        Ok((g.value(ce).item(), theta.collect_grads(&tp, &grads)))
    }
}
