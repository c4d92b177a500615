//! Joint optimization of the depth and pose networks: Adam with a step
//! learning-rate schedule, per-step structured logging, atomic epoch
//! checkpoints and validation-loss tracking.

use crate::autodiff::{Arr, Tape, Var};
use crate::data::{load_split, load_triplet, Augmentation, FrameTriplet, SplitMode};
use crate::depthnet::{DepthNet, DepthNetConfig, EncoderKind, ScaleMode};
use crate::graph::Activation;
use crate::losses::{total_loss_var, LossBreakdown, LossConfig, ScaleLosses};
use crate::params::{Binder, Checkpoint, ParamInit, ParamStore};
use crate::posenet::{PoseNet, PoseNetConfig};
use crate::{Error, Result};
use rand::SeedableRng;
use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Training hyperparameters; defaults follow the published recipe
/// (20 epochs, batch 10, Adam at 1e-4 halved after 75% of the iterations,
/// multi-scale decoder with P = 0.7 and log-softmax output).
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_drop_fraction: f64,
    pub lr_drop_factor: f64,
    pub seed: u64,
    pub p_threshold: f64,
    pub scale_mode: ScaleMode,
    pub gcn_activation: Activation,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Global-norm gradient clipping; off by default.
    pub grad_clip: Option<f64>,
    /// Seeded color jitter + flip; off by default (tests need exact replay).
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 10,
            lr: 1e-4,
            lr_drop_fraction: 0.75,
            lr_drop_factor: 0.5,
            seed: 1,
            p_threshold: 0.7,
            scale_mode: ScaleMode::MultiScale,
            gcn_activation: Activation::LogSoftmax,
            lambda: crate::losses::DEFAULT_LAMBDA,
            alpha: crate::losses::DEFAULT_ALPHA,
            beta: crate::losses::DEFAULT_BETA,
            grad_clip: None,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) && self.lr != 0.0 {
            return Err(Error::InvalidConfig("lr must be non-negative".into()));
        }
        if !(0.0 < self.lr_drop_fraction && self.lr_drop_fraction < 1.0) {
            return Err(Error::InvalidConfig("lr_drop_fraction must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.p_threshold) {
            return Err(Error::InvalidConfig("P must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            alpha: self.alpha,
            beta: self.beta,
            ..LossConfig::default()
        }
    }
}

/// Network size and input resolution.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub encoder: EncoderKind,
    pub width: usize,
    pub height: usize,
    /// Divide adjacency rows by their weight sums inside the graph
    /// convolutions (stability escape hatch; default follows the
    /// unnormalized definition).
    pub row_normalize: bool,
}

/// Both networks plus their shared parameter store.
pub struct Models {
    pub depth: DepthNet,
    pub pose: PoseNet,
    pub store: ParamStore,
}

pub fn build_models(spec: &ModelSpec, cfg: &TrainConfig) -> Result<Models> {
    let mut store = ParamStore::new();
    let mut init = ParamInit::new(cfg.seed);
    let depth_cfg = DepthNetConfig {
        encoder: spec.encoder,
        input_width: spec.width,
        input_height: spec.height,
        p_threshold: cfg.p_threshold,
        scale_mode: cfg.scale_mode,
        gcn_activation: cfg.gcn_activation,
        row_normalize: spec.row_normalize,
    };
    let depth = DepthNet::new(depth_cfg, &mut store, &mut init)?;
    let pose = PoseNet::new(PoseNetConfig { encoder: spec.encoder }, &mut store, &mut init);
    Ok(Models { depth, pose, store })
}

/// Adam optimizer state (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: HashMap<String, Arr>,
    v: HashMap<String, Arr>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: HashMap::new(), v: HashMap::new() }
    }
}

impl Adam {
    /// One update over every parameter that received a gradient. Iteration
    /// follows the store's insertion order, so updates are deterministic.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &HashMap<String, Arr>,
        lr: f64,
        clip: Option<f64>,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let scale = match clip {
            Some(max_norm) => {
                let total: f64 = grads.values().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum();
                let norm = total.sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let g = if scale != 1.0 { g * scale } else { g.clone() };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *m).and(&g).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(&g).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let param = store.get_mut(&name).expect("param exists");
            ndarray::Zip::from(&mut *param).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        let mut names: Vec<&String> = self.m.keys().collect();
        names.sort();
        for name in names {
            ck.tensors.push((format!("optim.m.{name}"), self.m[name].clone()));
            ck.tensors.push((format!("optim.v.{name}"), self.v[name].clone()));
        }
        ck.strings.push(("optim.step".into(), self.step.to_string()));
    }

    pub fn load_from(ck: &Checkpoint) -> Result<Self> {
        let mut out = Adam::default();
        for (name, arr) in &ck.tensors {
            if let Some(p) = name.strip_prefix("optim.m.") {
                out.m.insert(p.to_string(), arr.clone());
            } else if let Some(p) = name.strip_prefix("optim.v.") {
                out.v.insert(p.to_string(), arr.clone());
            }
        }
        out.step = ck
            .string("optim.step")
            .unwrap_or("0")
            .parse()
            .map_err(|_| Error::Checkpoint("bad optim.step".into()))?;
        Ok(out)
    }
}

/// Learning rate at a global iteration: the base rate, halved once the
/// configured fraction of all iterations has passed.
pub fn lr_at(iteration: usize, total_iterations: usize, cfg: &TrainConfig) -> f64 {
    let threshold = (cfg.lr_drop_fraction * total_iterations as f64).ceil() as usize;
    if iteration < threshold {
        cfg.lr
    } else {
        cfg.lr * cfg.lr_drop_factor
    }
}

/// Forward both networks on one triplet and assemble the total loss.
fn triplet_loss(
    models: &Models,
    binder: &Binder,
    triplet: &FrameTriplet,
    loss_cfg: &LossConfig,
) -> Result<crate::losses::TotalLossVars> {
    let target = Var::constant(triplet.target.clone().into_dyn());
    let pyramid = models.depth.predict_disparity(binder, &target)?;
    // Both frame pairs are fed in temporal order (earlier frame first), so
    // the regressor sees a consistent motion target; the direction flip for
    // the earlier source happens analytically in the loss. Feeding the raw
    // (source, target) pairs instead makes the two calls pull the shared
    // weights toward opposite translations, which cancels at init and
    // deadlocks joint training.
    let before = Var::constant(triplet.sources[0].clone().into_dyn());
    let after = Var::constant(triplet.sources[1].clone().into_dyn());
    let poses = vec![
        models.pose.predict_pose_var(binder, &before, &target)?,
        models.pose.predict_pose_var(binder, &target, &after)?,
    ];
    total_loss_var(
        &pyramid.disps,
        &triplet.target,
        &triplet.sources,
        &[&poses[0], &poses[1]],
        &triplet.intrinsics,
        loss_cfg,
    )
}

fn mean_breakdowns(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len() as f64;
    let scales = items[0].per_scale.len();
    let mut out = LossBreakdown {
        per_scale: vec![ScaleLosses::default(); scales],
        ..LossBreakdown::default()
    };
    for b in items {
        out.l_rec += b.l_rec / n;
        out.l_pl += b.l_pl / n;
        out.l_dis += b.l_dis / n;
        out.l_cvt += b.l_cvt / n;
        out.l_smooth += b.l_smooth / n;
        out.l_final += b.l_final / n;
        for (acc, s) in out.per_scale.iter_mut().zip(&b.per_scale) {
            acc.l_rec += s.l_rec / n;
            acc.l_pl += s.l_pl / n;
            acc.l_dis += s.l_dis / n;
            acc.l_cvt += s.l_cvt / n;
            acc.l_smooth += s.l_smooth / n;
            acc.l_final += s.l_final / n;
        }
    }
    out
}

/// One optimization step over a batch: forward both networks, average the
/// triplet losses, backpropagate and apply one Adam update to every
/// trainable parameter (networks and learnable adjacency weights alike).
/// A non-finite loss aborts the step, naming the offending term.
pub fn train_step(
    models: &mut Models,
    batch: &[FrameTriplet],
    opt: &mut Adam,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    assert!(!batch.is_empty());
    let loss_cfg = cfg.loss_config();
    let tape = Tape::new();
    let binder = Binder::new(&models.store, Some(&tape));
    let mut total: Option<Var> = None;
    let mut breakdowns = Vec::with_capacity(batch.len());
    for triplet in batch {
        let out = triplet_loss(models, &binder, triplet, &loss_cfg)?;
        if let Some(term) = out.breakdown.non_finite_term() {
            return Err(Error::NonFinite(format!("loss term {term} on {}", triplet.id)));
        }
        total = Some(match total {
            Some(acc) => acc.add(&out.l_final),
            None => out.l_final.clone(),
        });
        breakdowns.push(out.breakdown);
    }
    let loss = total.expect("non-empty batch").mul_scalar(1.0 / batch.len() as f64);
    let grads = tape.backward(&loss);
    let named = binder.collect_grads(&grads);
    opt.update(&mut models.store, &named, lr, cfg.grad_clip);
    Ok(mean_breakdowns(&breakdowns))
}

/// Forward-only loss of a batch (validation).
pub fn eval_loss(models: &Models, batch: &[FrameTriplet], cfg: &TrainConfig) -> Result<LossBreakdown> {
    let loss_cfg = cfg.loss_config();
    let binder = Binder::new(&models.store, None);
    let mut breakdowns = Vec::with_capacity(batch.len());
    for triplet in batch {
        let out = triplet_loss(models, &binder, triplet, &loss_cfg)?;
        breakdowns.push(out.breakdown);
    }
    Ok(mean_breakdowns(&breakdowns))
}

/// Where the training data lives.
#[derive(Clone, Debug)]
pub struct DataSpec {
    pub root: PathBuf,
    pub train_split: PathBuf,
    pub val_split: PathBuf,
}

/// Outcome of a fit run.
#[derive(Clone, Debug)]
pub struct FitReport {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub best_val_loss: f64,
}

/// Driver for the optimization loop. Epochs can be run one at a time; every
/// epoch ends with an atomic checkpoint write, so an interrupted run always
/// leaves the last completed epoch loadable.
pub struct Trainer {
    pub models: Models,
    pub opt: Adam,
    pub cfg: TrainConfig,
    pub spec: ModelSpec,
    data: DataSpec,
    out_dir: PathBuf,
    train_ids: Vec<String>,
    val_ids: Vec<String>,
    pub global_step: usize,
    pub total_iterations: usize,
    config_snapshot: String,
    best_val: f64,
}

impl Trainer {
    pub fn new(
        cfg: TrainConfig,
        spec: ModelSpec,
        data: DataSpec,
        out_dir: impl Into<PathBuf>,
        config_snapshot: String,
    ) -> Result<Self> {
        cfg.validate()?;
        let out_dir = out_dir.into();
        std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
        let train_ids = load_split(&data.root, &data.train_split, SplitMode::Train)?;
        let val_ids = load_split(&data.root, &data.val_split, SplitMode::Val)?;
        if train_ids.is_empty() {
            return Err(Error::Dataset("training split is empty".into()));
        }
        let models = build_models(&spec, &cfg)?;
        let steps_per_epoch = train_ids.len().div_ceil(cfg.batch_size);
        let total_iterations = steps_per_epoch * cfg.epochs;
        Ok(Trainer {
            models,
            opt: Adam::default(),
            cfg,
            spec,
            data,
            out_dir,
            train_ids,
            val_ids,
            global_step: 0,
            total_iterations,
            config_snapshot,
            best_val: f64::INFINITY,
        })
    }

    /// Restore parameters, optimizer state and the iteration counter from a
    /// checkpoint produced by this trainer.
    pub fn resume_from(&mut self, path: &Path) -> Result<()> {
        let ck = Checkpoint::load(path)?;
        let params = ck.params_with_prefix("params.");
        self.models.store.load_from(&params)?;
        self.opt = Adam::load_from(&ck)?;
        self.global_step = ck
            .string("iteration")
            .unwrap_or("0")
            .parse()
            .map_err(|_| Error::Checkpoint("bad iteration counter".into()))?;
        if let Some(v) = ck.string("best_val") {
            self.best_val = v.parse().unwrap_or(f64::INFINITY);
        }
        Ok(())
    }

    fn load_batch(&self, ids: &[String], augment: bool) -> Result<Vec<FrameTriplet>> {
        let mut out = Vec::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            let mut t = load_triplet(&self.data.root, id, (self.spec.width, self.spec.height))?;
            if augment {
                // Stateless draw keyed by (seed, step, index): resuming a run
                // replays the identical augmentations.
                let key = self
                    .cfg
                    .seed
                    .wrapping_mul(0x9e3779b97f4a7c15)
                    .wrapping_add((self.global_step as u64) << 16)
                    .wrapping_add(i as u64);
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(key);
                t = Augmentation::sample(&mut rng).apply(&t);
            }
            out.push(t);
        }
        Ok(out)
    }

    /// Checkpoint with parameters, optimizer state, iteration counter and
    /// the config snapshot.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.put_params("params.", &self.models.store);
        self.opt.save_into(&mut ck);
        ck.strings.push(("iteration".into(), self.global_step.to_string()));
        ck.strings.push(("best_val".into(), format!("{:.17e}", self.best_val)));
        ck.strings.push(("config".into(), self.config_snapshot.clone()));
        ck
    }

    /// Run one epoch; logs one tab-separated `key=value` line per step and
    /// writes `epoch_<n>.ckpt` + `last.ckpt` when the epoch completes.
    pub fn train_epoch(&mut self, epoch: usize, log: &mut dyn Write) -> Result<f64> {
        let ids = self.train_ids.clone();
        let mut losses = Vec::new();
        for chunk in ids.chunks(self.cfg.batch_size) {
            let batch = self.load_batch(chunk, self.cfg.augment)?;
            let lr = lr_at(self.global_step, self.total_iterations, &self.cfg);
            let br = {
                let cfg = self.cfg.clone();
                train_step(&mut self.models, &batch, &mut self.opt, lr, &cfg)?
            };
            self.global_step += 1;
            writeln!(
                log,
                "epoch={epoch}\tstep={}\tlr={lr:e}\tl_final={:.12}\tl_pl={:.12}\tl_rec={:.12}\tl_dis={:.12}\tl_cvt={:.12}\tl_smooth={:.12}",
                self.global_step, br.l_final, br.l_pl, br.l_rec, br.l_dis, br.l_cvt, br.l_smooth
            )
            .map_err(|e| Error::io("log", e))?;
            losses.push(br.l_final);
        }
        let ck = self.checkpoint();
        ck.save(&self.out_dir.join(format!("epoch_{epoch}.ckpt")))?;
        ck.save(&self.out_dir.join("last.ckpt"))?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Mean validation loss over the validation split.
    pub fn validate(&self) -> Result<f64> {
        if self.val_ids.is_empty() {
            return Ok(f64::NAN);
        }
        let mut total = 0.0;
        let mut count = 0.0;
        for chunk in self.val_ids.clone().chunks(self.cfg.batch_size) {
            let batch = self.load_batch(chunk, false)?;
            let br = eval_loss(&self.models, &batch, &self.cfg)?;
            total += br.l_final * batch.len() as f64;
            count += batch.len() as f64;
        }
        Ok(total / count)
    }

    /// Full training run: all epochs, per-epoch validation, best-checkpoint
    /// tracking by validation loss.
    pub fn fit(&mut self, log: &mut dyn Write) -> Result<FitReport> {
        let mut initial = None;
        let mut last = 0.0;
        for epoch in 1..=self.cfg.epochs {
            let train_loss = self.train_epoch(epoch, log)?;
            initial.get_or_insert(train_loss);
            last = train_loss;
            let val = self.validate()?;
            writeln!(log, "epoch={epoch}\tval_l_final={val:.12}")
                .map_err(|e| Error::io("log", e))?;
            if val.is_finite() && val < self.best_val {
                self.best_val = val;
                self.checkpoint().save(&self.out_dir.join("best.ckpt"))?;
            }
        }
        if !self.out_dir.join("best.ckpt").exists() {
            self.checkpoint().save(&self.out_dir.join("best.ckpt"))?;
        }
        Ok(FitReport {
            best_checkpoint: self.out_dir.join("best.ckpt"),
            last_checkpoint: self.out_dir.join("last.ckpt"),
            initial_train_loss: initial.unwrap_or(f64::NAN),
            final_train_loss: last,
            best_val_loss: self.best_val,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    fn tiny_dataset(dir: &Path, frames: usize, side: usize) -> DataSpec {
        let cfg = SynthConfig {
            frames,
            width: side,
            height: side,
            ..SynthConfig::new(dir.join("data"))
        };
        let root = generate_synthetic(&cfg).unwrap();
        DataSpec {
            train_split: root.join("splits/train.txt"),
            val_split: root.join("splits/val.txt"),
            root,
        }
    }

    fn toy_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 2,
            lr: 1e-3,
            seed,
            p_threshold: 0.0,
            ..TrainConfig::default()
        }
    }

    fn toy_spec(side: usize) -> ModelSpec {
        ModelSpec { encoder: EncoderKind::Toy, width: side, height: side, row_normalize: false }
    }

    #[test]
    fn lr_schedule_halves_after_the_threshold() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, 1000, &cfg), 1e-4);
        assert_eq!(lr_at(749, 1000, &cfg), 1e-4);
        assert_eq!(lr_at(750, 1000, &cfg), 5e-5);
        assert_eq!(lr_at(999, 1000, &cfg), 5e-5);
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(dir.path(), 4, 32);
        let cfg = TrainConfig { lr: 0.0, ..toy_cfg(3) };
        let mut models = build_models(&toy_spec(32), &cfg).unwrap();
        let before: Vec<(String, Arr)> = models
            .store
            .iter()
            .map(|(n, a)| (n.to_string(), a.clone()))
            .collect();
        let ids = load_split(&data.root, &data.train_split, SplitMode::Train).unwrap();
        let batch = vec![load_triplet(&data.root, &ids[0], (32, 32)).unwrap()];
        let mut opt = Adam::default();
        let br = train_step(&mut models, &batch, &mut opt, 0.0, &cfg).unwrap();
        assert!(br.l_final.is_finite());
        for (name, old) in &before {
            let new = models.store.get(name).unwrap();
            for (a, b) in old.iter().zip(new.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name} changed under lr=0");
            }
        }
    }

    #[test]
    fn consecutive_steps_descend_on_most_seeds() {
        // Empirical descent: two steps on the same batch reduce the loss in
        // at least 9 of 10 seeded trials.
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(dir.path(), 5, 32);
        let ids = load_split(&data.root, &data.train_split, SplitMode::Train).unwrap();
        let mut wins = 0;
        for seed in 0..10u64 {
            let cfg = TrainConfig { lr: 1e-3, ..toy_cfg(seed) };
            let mut models = build_models(&toy_spec(32), &cfg).unwrap();
            let batch: Vec<FrameTriplet> = ids
                .iter()
                .take(2)
                .map(|id| load_triplet(&data.root, id, (32, 32)).unwrap())
                .collect();
            let mut opt = Adam::default();
            let first = train_step(&mut models, &batch, &mut opt, cfg.lr, &cfg).unwrap();
            let second = train_step(&mut models, &batch, &mut opt, cfg.lr, &cfg).unwrap();
            // Breakdown identity holds at every step.
            for br in [&first, &second] {
                assert!((br.l_final - (br.l_pl + br.l_rec + br.l_smooth)).abs() < 1e-9);
            }
            if second.l_final < first.l_final {
                wins += 1;
            }
        }
        assert!(wins >= 9, "loss decreased in only {wins}/10 trials");
    }

    #[test]
    fn fixed_seed_runs_are_bit_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(dir.path(), 5, 32);
        let run = |out: &str| -> Vec<u64> {
            let cfg = toy_cfg(11);
            let mut trainer = Trainer::new(
                cfg,
                toy_spec(32),
                data.clone(),
                dir.path().join(out),
                String::new(),
            )
            .unwrap();
            let mut log = Vec::new();
            trainer.train_epoch(1, &mut log).unwrap();
            String::from_utf8(log)
                .unwrap()
                .lines()
                .map(|l| {
                    let field = l.split('\t').find(|f| f.starts_with("l_final=")).unwrap();
                    field["l_final=".len()..].parse::<f64>().unwrap().to_bits()
                })
                .collect()
        };
        assert_eq!(run("a"), run("b"));
    }

    #[test]
    fn checkpoint_resume_reproduces_next_step_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(dir.path(), 5, 32);
        let cfg = toy_cfg(7);

        // Continuous run: two epochs.
        let mut cont = Trainer::new(
            cfg.clone(),
            toy_spec(32),
            data.clone(),
            dir.path().join("cont"),
            String::new(),
        )
        .unwrap();
        let mut log = Vec::new();
        cont.train_epoch(1, &mut log).unwrap();
        let continued = cont.train_epoch(2, &mut log).unwrap();

        // Interrupted run: one epoch, then resume from the checkpoint.
        let mut first = Trainer::new(
            cfg.clone(),
            toy_spec(32),
            data.clone(),
            dir.path().join("int1"),
            String::new(),
        )
        .unwrap();
        first.train_epoch(1, &mut log).unwrap();
        let ckpt = dir.path().join("int1/last.ckpt");
        let mut resumed = Trainer::new(cfg, toy_spec(32), data, dir.path().join("int2"), String::new())
            .unwrap();
        resumed.resume_from(&ckpt).unwrap();
        let after_resume = resumed.train_epoch(2, &mut log).unwrap();
        assert_eq!(continued.to_bits(), after_resume.to_bits());
    }

    #[test]
    fn checkpoints_round_trip_all_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(dir.path(), 4, 32);
        let cfg = toy_cfg(5);
        let mut trainer =
            Trainer::new(cfg, toy_spec(32), data, dir.path().join("out"), "cfg".into()).unwrap();
        let mut log = Vec::new();
        trainer.train_epoch(1, &mut log).unwrap();
        let ck = Checkpoint::load(&dir.path().join("out/last.ckpt")).unwrap();
        let params = ck.params_with_prefix("params.");
        assert_eq!(params.len(), trainer.models.store.len());
        for (name, value) in trainer.models.store.iter() {
            let loaded = params.get(name).unwrap();
            for (a, b) in value.iter().zip(loaded.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name}");
            }
        }
        assert_eq!(ck.string("config"), Some("cfg"));
    }
}
