//! Training pipeline: PK batch sampling, augmentation, the warmup + step
//! learning-rate schedule, SGD with momentum, and the training loop.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::{batch_hard_triplet, cross_entropy, smoothed_label_matrix, total_loss};
use crate::model::{ModelConfig, ReidModel};
use crate::reg::{AdaptiveRegularizer, RegMode, RegSnapshot, Regularizer};
use crate::stream::{stream, TAG_AUGMENT, TAG_INIT, TAG_SAMPLER};
use crate::tape::{ParamId, Tape};
use crate::tensor::Tensor;
use crate::Real;

// ---------------------------------------------------------------------
// PK sampling
// ---------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PkConfig {
    /// Identities per batch.
    pub p: usize,
    /// Instances per identity.
    pub k: usize,
}

impl PkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(Error::invalid(
                "pk config",
                format!(
                    "P >= 2 and K >= 2 required for triplet mining, got P={} K={}",
                    self.p, self.k
                ),
            ));
        }
        Ok(())
    }
}

/// Per-class index of training sample positions.
pub struct ClassIndex {
    /// classes[c] = dataset identity of class c (0-based, ascending).
    pub classes: Vec<u32>,
    /// members[c] = dataset sample indices of class c.
    pub members: Vec<Vec<usize>>,
}

impl ClassIndex {
    pub fn build(dataset: &Dataset) -> Self {
        let classes = dataset.train_classes();
        let pos: HashMap<u32, usize> = classes.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut members = vec![Vec::new(); classes.len()];
        for (i, s) in dataset.samples.iter().enumerate() {
            if s.split == Split::Train {
                members[pos[&s.identity]].push(i);
            }
        }
        ClassIndex { classes, members }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

/// One PK batch: exactly P distinct identities with K instances each,
/// sampling with replacement inside identities that have fewer than K.
/// Returns (dataset sample index, 0-based class) pairs.
pub fn pk_sample(
    index: &ClassIndex,
    cfg: PkConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize)>> {
    cfg.validate()?;
    let n = index.num_classes();
    if n < cfg.p {
        return Err(Error::invalid(
            "pk sampling",
            format!("need {} identities, dataset has {}", cfg.p, n),
        ));
    }
    // partial Fisher-Yates for the P identities
    let mut ids: Vec<usize> = (0..n).collect();
    for i in 0..cfg.p {
        let j = rng.gen_range(i..n);
        ids.swap(i, j);
    }
    let mut batch = Vec::with_capacity(cfg.p * cfg.k);
    for &class in ids.iter().take(cfg.p) {
        let members = &index.members[class];
        if members.len() >= cfg.k {
            let mut order: Vec<usize> = (0..members.len()).collect();
            for i in 0..cfg.k {
                let j = rng.gen_range(i..members.len());
                order.swap(i, j);
            }
            for &m in order.iter().take(cfg.k) {
                batch.push((members[m], class));
            }
        } else {
            for _ in 0..cfg.k {
                let m = rng.gen_range(0..members.len());
                batch.push((members[m], class));
            }
        }
    }
    Ok(batch)
}

// ---------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct AugConfig {
    pub flip_prob: f64,
    /// Zero padding on every side before the random crop back to size.
    pub pad: usize,
    pub erase_prob: f64,
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            flip_prob: 0.5,
            pad: 2,
            erase_prob: 0.5,
            erase_area: (0.02, 0.4),
            erase_aspect: (0.3, 3.3),
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("flip_prob", self.flip_prob), ("erase_prob", self.erase_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(
                    "aug config",
                    format!("{} must be in [0, 1], got {}", name, p),
                ));
            }
        }
        let (a_lo, a_hi) = self.erase_area;
        if !(a_lo > 0.0 && a_lo <= a_hi && a_hi < 1.0) {
            return Err(Error::invalid(
                "aug config",
                format!("erase area range ({}, {}) must lie inside (0, 1)", a_lo, a_hi),
            ));
        }
        let (r_lo, r_hi) = self.erase_aspect;
        if !(r_lo > 0.0 && r_lo <= r_hi) {
            return Err(Error::invalid(
                "aug config",
                format!("erase aspect range ({}, {}) invalid", r_lo, r_hi),
            ));
        }
        Ok(())
    }
}

/// Train-time augmentation, in order: horizontal flip, zero-pad + random
/// crop back to size, random erasing filled with uniform noise. The RNG is
/// consumed in a fixed pattern so streams stay aligned across images.
pub fn augment(pixels: &mut Vec<f64>, h: usize, w: usize, cfg: &AugConfig, rng: &mut ChaCha8Rng) {
    // flip
    let flip = rng.gen::<f64>() < cfg.flip_prob;
    if flip {
        for y in 0..h {
            pixels[y * w..(y + 1) * w].reverse();
        }
    }
    // pad + crop
    let pad = cfg.pad;
    let top = rng.gen_range(0..=2 * pad);
    let left = rng.gen_range(0..=2 * pad);
    if pad > 0 {
        let ph = h + 2 * pad;
        let pw = w + 2 * pad;
        let mut padded = vec![0.0; ph * pw];
        for y in 0..h {
            padded[(y + pad) * pw + pad..(y + pad) * pw + pad + w]
                .copy_from_slice(&pixels[y * w..(y + 1) * w]);
        }
        for y in 0..h {
            for x in 0..w {
                pixels[y * w + x] = padded[(y + top) * pw + (x + left)];
            }
        }
    }
    // erase
    if rng.gen::<f64>() < cfg.erase_prob {
        for _ in 0..100 {
            let frac = rng.gen_range(cfg.erase_area.0..=cfg.erase_area.1);
            let ratio = rng.gen_range(cfg.erase_aspect.0..=cfg.erase_aspect.1);
            let area = frac * (h * w) as f64;
            let eh = (area * ratio).sqrt().round() as usize;
            let ew = (area / ratio).sqrt().round() as usize;
            if eh < 1 || ew < 1 || eh > h || ew > w {
                continue;
            }
            let top = rng.gen_range(0..=h - eh);
            let left = rng.gen_range(0..=w - ew);
            for y in top..top + eh {
                for x in left..left + ew {
                    pixels[y * w + x] = rng.gen::<f64>();
                }
            }
            break;
        }
    }
}

// ---------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_iters: u64,
    pub warmup_start_factor: f64,
    pub milestones: Vec<u64>,
    pub decay: f64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.base <= 0.0 {
            return Err(Error::invalid("lr schedule", "base rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.warmup_start_factor) {
            return Err(Error::invalid(
                "lr schedule",
                "warmup start factor must be in [0, 1]",
            ));
        }
        if !(0.0..1.0).contains(&self.decay) {
            return Err(Error::invalid("lr schedule", "decay must be in (0, 1)"));
        }
        let mut prev = self.warmup_iters;
        for &m in &self.milestones {
            if m <= prev {
                return Err(Error::invalid(
                    "lr schedule",
                    format!("milestones must be strictly increasing and past warmup, got {:?}", self.milestones),
                ));
            }
            prev = m;
        }
        Ok(())
    }

    /// Linear warmup from start_factor * base to base (inclusive at
    /// `warmup_iters`), then base * decay^(number of passed milestones).
    pub fn lr_at(&self, iter: u64) -> f64 {
        if iter < self.warmup_iters {
            let t = iter as f64 / self.warmup_iters as f64;
            self.base * (self.warmup_start_factor + (1.0 - self.warmup_start_factor) * t)
        } else {
            let passed = self.milestones.iter().filter(|&&m| iter >= m).count();
            self.base * self.decay.powi(passed as i32)
        }
    }
}

// ---------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------

/// SGD with momentum: v <- mu * v + g; w <- w - lr * v.
pub struct SgdMomentum {
    pub momentum: f64,
    velocity: HashMap<ParamId, Tensor<Real>>,
}

impl SgdMomentum {
    pub fn new(momentum: f64) -> Self {
        SgdMomentum {
            momentum,
            velocity: HashMap::new(),
        }
    }

    pub fn apply(&mut self, id: ParamId, value: &mut Tensor<Real>, grad: &Tensor<Real>, lr: f64) {
        let v = self
            .velocity
            .entry(id)
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        for (vi, gi) in v.data_mut().iter_mut().zip(grad.data()) {
            *vi = self.momentum * *vi + gi;
        }
        for (wi, vi) in value.data_mut().iter_mut().zip(v.data()) {
            *wi -= lr * vi;
        }
    }
}

// ---------------------------------------------------------------------
// Training step and loop
// ---------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub ce_total: f64,
    pub triplet_total: f64,
    pub penalty: f64,
    pub total: f64,
    pub grad_norm: f64,
}

pub struct TrainState {
    pub model: ReidModel,
    pub reg: Regularizer,
    pub opt: SgdMomentum,
    pub iteration: u64,
}

/// Options controlling one step; `include_task: false` trains on the
/// penalty alone (used to study the theta dynamics in isolation).
#[derive(Clone, Copy, Debug)]
pub struct StepOptions {
    pub smoothing_eps: f64,
    pub triplet_margin: f64,
    pub lr: f64,
    pub theta_lr: Option<f64>,
    pub include_task: bool,
}

/// One optimization step: forward (3 CE + 3 triplet + penalty), backward,
/// SGD update of the weights and the theta scalars.
pub fn train_step(
    state: &mut TrainState,
    images: &Tensor<Real>,
    classes: &[usize],
    opts: &StepOptions,
) -> Result<StepStats> {
    let mut tape = Tape::new();
    let mut ce_terms = Vec::new();
    let mut triplet_terms = Vec::new();
    let mut ce_total = 0.0;
    let mut triplet_total = 0.0;
    if opts.include_task {
        let heads = state.model.forward_train(&mut tape, images)?;
        let labels_1based: Vec<usize> = classes.iter().map(|&c| c + 1).collect();
        let targets = smoothed_label_matrix(
            &labels_1based,
            opts.smoothing_eps,
            state.model.cfg.num_classes,
        )?;
        for head in &heads {
            let ce = cross_entropy(&mut tape, head.logits, &targets)?;
            ce_total += tape.value(ce).item();
            ce_terms.push(ce);
        }
        for head in &heads {
            let tr = batch_hard_triplet(&mut tape, head.embedding, classes, opts.triplet_margin)?;
            triplet_total += tape.value(tr).item();
            triplet_terms.push(tr);
        }
    }
    let params = state.model.param_values();
    let param_refs: Vec<(ParamId, &Tensor<Real>)> =
        params.iter().map(|(id, t)| (*id, t)).collect();
    let penalty = state.reg.penalty(&mut tape, &param_refs)?;
    let penalty_val = penalty.map(|p| tape.value(p).item()).unwrap_or(0.0);
    let loss = total_loss(&mut tape, &ce_terms, &triplet_terms, penalty)?;
    let total = tape.value(loss).item();
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at iteration {}: ce={} triplet={} penalty={} total={}",
            state.iteration, ce_total, triplet_total, penalty_val, total
        )));
    }
    let grads = tape.backward(loss)?;

    let mut grad_sq = 0.0;
    state.model.for_each_param_mut(|id, value| {
        if let Some(g) = grads.get(id) {
            grad_sq += g.sum_squares();
            state.opt.apply(id, value, g, opts.lr);
        }
    });
    let theta_lr = opts.theta_lr.unwrap_or(opts.lr);
    let opt = &mut state.opt;
    state.reg.for_each_theta_mut(|id, value| {
        if let Some(g) = grads.get(id) {
            grad_sq += g.sum_squares();
            opt.apply(id, value, g, theta_lr);
        }
    });
    state.iteration += 1;
    Ok(StepStats {
        ce_total,
        triplet_total,
        penalty: penalty_val,
        total,
        grad_norm: grad_sq.sqrt(),
    })
}

#[derive(Clone, Debug)]
pub struct LossRow {
    pub iteration: u64,
    pub lr: f64,
    pub ce_total: f64,
    pub triplet_total: f64,
    pub penalty: f64,
    pub total: f64,
}

pub struct TrainOutput {
    pub model: ReidModel,
    pub reg: Regularizer,
    pub loss_rows: Vec<LossRow>,
    pub snapshots: Vec<RegSnapshot>,
    pub checkpoint: Vec<u8>,
}

/// Builds a model and regularizer for `cfg` against the dataset's class
/// count, seeded deterministically.
pub fn build_run(cfg: &RunConfig, dataset: &Dataset, reg_mode: RegMode) -> Result<TrainState> {
    let index = ClassIndex::build(dataset);
    if index.num_classes() == 0 {
        return Err(Error::invalid("dataset", "no training identities"));
    }
    let model_cfg = ModelConfig {
        num_classes: index.num_classes(),
        input_h: dataset.height,
        input_w: dataset.width,
        ..cfg.model_config()
    };
    let mut init_rng = stream(cfg.seed, TAG_INIT);
    let model = ReidModel::build(model_cfg, Some(&mut init_rng))?;
    let reg = build_regularizer(cfg, &model, reg_mode)?;
    Ok(TrainState {
        model,
        reg,
        opt: SgdMomentum::new(cfg.train.momentum),
        iteration: 0,
    })
}

pub fn build_regularizer(
    cfg: &RunConfig,
    model: &ReidModel,
    mode: RegMode,
) -> Result<Regularizer> {
    // theta ids live above the model's parameter ids
    let make = |theta_init: f64| -> Result<AdaptiveRegularizer<f64>> {
        let mut next = model.inventory().len();
        AdaptiveRegularizer::new(
            model.inventory(),
            cfg.reg.amplitude,
            cfg.reg.half_width,
            theta_init,
            |_| {
                let id = ParamId(next);
                next += 1;
                id
            },
        )
    };
    Ok(match mode {
        RegMode::Adaptive => Regularizer::Adaptive(make(cfg.reg.theta_init)?),
        RegMode::Unconstrained => Regularizer::Unconstrained(make(cfg.reg.theta_init)?),
        RegMode::Constant => {
            if cfg.reg.constant_lambda < 0.0 {
                return Err(Error::invalid("reg config", "constant lambda must be >= 0"));
            }
            Regularizer::Constant {
                lambda: cfg.reg.constant_lambda,
            }
        }
        RegMode::Off => Regularizer::Off,
    })
}

/// Assembles the NCHW batch tensor plus class labels for a sampled batch,
/// applying train-time augmentation.
pub fn make_batch(
    dataset: &Dataset,
    picks: &[(usize, usize)],
    aug: &AugConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<Real>, Vec<usize>)> {
    let (h, w) = (dataset.height, dataset.width);
    let mut data = Vec::with_capacity(picks.len() * h * w);
    let mut classes = Vec::with_capacity(picks.len());
    for &(sample_idx, class) in picks {
        let mut px = dataset.samples[sample_idx].pixels.clone();
        augment(&mut px, h, w, aug, rng);
        data.extend_from_slice(&px);
        classes.push(class);
    }
    let images = Tensor::new(vec![picks.len(), 1, h, w], data)?;
    Ok((images, classes))
}

/// Full deterministic training run: PK sampling, augmentation, schedule,
/// snapshots every `snapshot_every` iterations (plus the final state when
/// the total is a multiple), loss log and checkpoint.
pub fn run_training(cfg: &RunConfig, dataset: &Dataset, reg_mode: RegMode) -> Result<TrainOutput> {
    cfg.validate()?;
    let schedule = cfg.lr_schedule();
    schedule.validate()?;
    cfg.aug.validate()?;
    let pk = PkConfig {
        p: cfg.train.batch_p,
        k: cfg.train.batch_k,
    };
    pk.validate()?;
    let index = ClassIndex::build(dataset);
    let mut state = build_run(cfg, dataset, reg_mode)?;
    let mut sampler_rng = stream(cfg.seed, TAG_SAMPLER);
    let mut aug_rng = stream(cfg.seed, TAG_AUGMENT);
    let mut loss_rows = Vec::with_capacity(cfg.train.iters as usize);
    let mut snapshots = Vec::new();
    for iter in 0..cfg.train.iters {
        if iter % cfg.train.snapshot_every == 0 {
            snapshots.push(state.reg.snapshot(iter, state.model.inventory()));
        }
        let picks = pk_sample(&index, pk, &mut sampler_rng)?;
        let (images, classes) = make_batch(dataset, &picks, &cfg.aug, &mut aug_rng)?;
        let lr = schedule.lr_at(iter);
        let opts = StepOptions {
            smoothing_eps: cfg.loss.smoothing_epsilon,
            triplet_margin: cfg.loss.triplet_margin,
            lr,
            theta_lr: cfg.reg.theta_lr,
            include_task: true,
        };
        let stats = train_step(&mut state, &images, &classes, &opts)?;
        loss_rows.push(LossRow {
            iteration: iter,
            lr,
            ce_total: stats.ce_total,
            triplet_total: stats.triplet_total,
            penalty: stats.penalty,
            total: stats.total,
        });
        if iter % 200 == 0 {
            log::info!(
                "iter {:>6} lr {:.5} ce {:.4} triplet {:.4} penalty {:.6} total {:.4}",
                iter,
                lr,
                stats.ce_total,
                stats.triplet_total,
                stats.penalty,
                stats.total
            );
        }
    }
    if cfg.train.iters % cfg.train.snapshot_every == 0 {
        snapshots.push(state.reg.snapshot(cfg.train.iters, state.model.inventory()));
    }
    let checkpoint = crate::checkpoint::encode(
        &state.model,
        &state.reg,
        state.iteration,
        &cfg.to_document(),
    );
    Ok(TrainOutput {
        model: state.model,
        reg: state.reg,
        loss_rows,
        snapshots,
        checkpoint,
    })
}

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut out = String::from("iteration,lr,ce_total,triplet_total,penalty,total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            r.iteration, r.lr, r.ce_total, r.triplet_total, r.penalty, r.total
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
