//! The training loop: sample a batch, run one forward pass, build the loss,
//! back-propagate, and take an SGD step.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bake::BakeConfig;
use crate::data::{flip_horizontal, Dataset};
use crate::error::{Error, Result};
use crate::losses::{bake_loss, cross_entropy, label_smoothing_loss, LossConfig};
use crate::models::Model;
use crate::numerics::{Graph, Tensor};
use crate::sampling::{epoch_batches, SamplerConfig};

const EVAL_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    /// Linear warm-up from 0, then half-cosine decay to 0 at the last epoch.
    Cosine { warmup_epochs: f64 },
    /// Multiply by `factor` at each milestone epoch.
    Step { milestones: Vec<usize>, factor: f64 },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Cosine { warmup_epochs: 1.0 }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Cosine { warmup_epochs } => write!(f, "cosine:{warmup_epochs}"),
            Schedule::Step { milestones, factor } => {
                let m: Vec<String> = milestones.iter().map(ToString::to_string).collect();
                write!(f, "step:{}:{factor}", m.join(","))
            }
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    /// `cosine:<warmup>` or `step:<m1,m2,…>:<factor>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("bad schedule `{s}` (cosine:<warmup> | step:<m1,m2,...>:<factor>)"));
        let mut parts = s.split(':');
        match parts.next() {
            Some("cosine") => {
                let warmup_epochs = match parts.next() {
                    Some(w) => w.parse().map_err(|_| bad())?,
                    None => 0.0,
                };
                Ok(Schedule::Cosine { warmup_epochs })
            }
            Some("step") => {
                let milestones = parts
                    .next()
                    .ok_or_else(bad)?
                    .split(',')
                    .map(|m| m.trim().parse::<usize>().map_err(|_| bad()))
                    .collect::<Result<Vec<_>>>()?;
                let factor = match parts.next() {
                    Some(f) => f.parse().map_err(|_| bad())?,
                    None => 0.1,
                };
                Ok(Schedule::Step { milestones, factor })
            }
            _ => Err(bad()),
        }
    }
}

serde_via_str!(Schedule);

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            Schedule::Cosine { warmup_epochs } if !(*warmup_epochs >= 0.0) => {
                Err(Error::config("warm-up epochs must be >= 0"))
            }
            Schedule::Step { milestones, factor } => {
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::config("step milestones must be strictly increasing"));
                }
                if !(*factor > 0.0) {
                    return Err(Error::config("step factor must be > 0"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Learning rate at a (possibly fractional) epoch of a run lasting
/// `total_epochs`.
pub fn lr_at(schedule: &Schedule, epoch: f64, total_epochs: usize, base_lr: f64) -> f64 {
    match schedule {
        Schedule::Cosine { warmup_epochs } => {
            let w = *warmup_epochs;
            if epoch < w {
                return base_lr * epoch / w;
            }
            let span = total_epochs as f64 - w;
            if span <= 0.0 {
                return base_lr;
            }
            let progress = ((epoch - w) / span).clamp(0.0, 1.0);
            base_lr * 0.5 * (1.0 + (PI * progress).cos())
        }
        Schedule::Step { milestones, factor } => {
            let passed = milestones.iter().filter(|&&m| epoch >= m as f64).count();
            base_lr * factor.powi(passed as i32)
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μv + g + λw`, `w ← w − ηv`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("sgd_step", &[params.len()], &[grads.len()]));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || v.shape() != p.shape() {
                return Err(Error::shape("sgd_step", p.shape(), g.shape()));
            }
            for ((pw, &gw), vw) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vw = self.momentum * *vw + gw + self.weight_decay * *pw;
                *pw -= lr * *vw;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Vanilla,
    LabelSmoothing,
    Bake,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Vanilla => "vanilla",
            Method::LabelSmoothing => "label-smoothing",
            Method::Bake => "bake",
        })
    }
}

serde_via_str!(Method);

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Method::Vanilla),
            "label-smoothing" | "ls" => Ok(Method::LabelSmoothing),
            "bake" => Ok(Method::Bake),
            _ => Err(Error::config(format!("unknown method `{s}` (vanilla|label-smoothing|bake)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub method: Method,
    /// Used when `method` is `Bake`.
    pub bake: BakeConfig,
    /// For vanilla and label smoothing, `m` is forced to 0.
    pub sampler: SamplerConfig,
    pub loss: LossConfig,
    /// Seeds the flip augmentation.
    pub seed: u64,
    pub augment_flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            schedule: Schedule::default(),
            method: Method::Bake,
            bake: BakeConfig::default(),
            sampler: SamplerConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            augment_flip: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be > 0, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0,1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be >= 0"));
        }
        self.schedule.validate()?;
        self.sampler.validate()?;
        self.loss.validate()?;
        if self.method == Method::Bake {
            self.bake.validate()?;
            if self.bake.tau != self.loss.tau {
                return Err(Error::config("target temperature and loss temperature must agree"));
            }
            if self.sampler.batch_size() < 2 {
                return Err(Error::DegenerateBatch {
                    size: self.sampler.batch_size(),
                });
            }
        }
        Ok(())
    }

    /// The sampler actually used: baselines train without companions.
    pub fn effective_sampler(&self) -> SamplerConfig {
        match self.method {
            Method::Bake => self.sampler,
            Method::Vanilla | Method::LabelSmoothing => SamplerConfig { m: 0, ..self.sampler },
        }
    }
}

/// Per-epoch record. `wall_seconds` and `mean_iter_seconds` are timing
/// measurements and vary between runs; every other field is deterministic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_ce: f64,
    /// Distillation term, `τ²·KL`, before λ weighting.
    pub train_kl: f64,
    pub test_top1: f64,
    pub test_top5: f64,
    pub wall_seconds: f64,
    pub mean_iter_seconds: f64,
}

/// Top-1 and top-5 accuracy. Ties in the logits are broken in favour of the
/// lower class index.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::config("cannot evaluate on an empty dataset"));
    }
    let mut hits1 = 0usize;
    let mut hits5 = 0usize;
    let ids: Vec<usize> = (0..dataset.len()).collect();
    for chunk in ids.chunks(EVAL_CHUNK) {
        let (x, y) = dataset.batch(chunk);
        let (_, logits) = model.forward(&x)?;
        for (i, &label) in y.iter().enumerate() {
            let row = logits.row(i);
            let rank = rank_of(row, label);
            hits1 += (rank < 1) as usize;
            hits5 += (rank < 5) as usize;
        }
    }
    let n = dataset.len() as f64;
    Ok((hits1 as f64 / n, hits5 as f64 / n))
}

/// Number of classes ranked ahead of `label`.
fn rank_of(row: &[f64], label: usize) -> usize {
    let target = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > target || (v == target && j < label))
        .count()
}

/// Trains `model` and returns it with one metrics record per epoch.
pub fn train(model: Model, train_set: &Dataset, test_set: &Dataset, cfg: &TrainConfig) -> Result<(Model, Vec<EpochMetrics>)> {
    train_with(model, train_set, test_set, cfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    mut model: Model,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Model, Vec<EpochMetrics>)> {
    cfg.validate()?;
    let input_dim = model.architecture().input_dim;
    for ds in [train_set, test_set] {
        if ds.input_dim() != input_dim {
            return Err(Error::shape("train", &[ds.len(), ds.input_dim()], &[ds.len(), input_dim]));
        }
        if ds.num_classes() != model.architecture().num_classes {
            return Err(Error::config("dataset and model disagree on the number of classes"));
        }
    }
    let sampler = cfg.effective_sampler();
    if train_set.len() < sampler.n_hat {
        return Err(Error::config(format!(
            "training set of {} examples is smaller than one batch of {} anchors",
            train_set.len(),
            sampler.n_hat
        )));
    }
    let flip_shape = match (cfg.augment_flip, train_set.image) {
        (true, Some(shape)) => Some(shape),
        (true, None) => return Err(Error::config("flip augmentation needs image-shaped inputs")),
        (false, _) => None,
    };
    let mut flip_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let batches = epoch_batches(train_set.class_index(), &sampler, epoch as u64);
        let iters = batches.len();
        let (mut sum_loss, mut sum_ce, mut sum_kl) = (0.0, 0.0, 0.0);
        let mut lr = 0.0;
        let mut iter_seconds = 0.0;
        for (it, ids) in batches.iter().enumerate() {
            let iter_start = Instant::now();
            let (mut x, y) = train_set.batch(ids);
            if let Some(shape) = &flip_shape {
                for r in 0..x.rows() {
                    if flip_rng.random_bool(0.5) {
                        flip_horizontal(x.row_mut(r), shape);
                    }
                }
            }
            lr = lr_at(&cfg.schedule, epoch as f64 + it as f64 / iters as f64, cfg.epochs, cfg.base_lr);

            let mut g = Graph::new();
            let params = model.register(&mut g);
            let input = g.constant(x);
            let (features, logits) = model.forward_graph(&mut g, input, &params)?;
            let (total, ce, kl) = match cfg.method {
                Method::Vanilla => {
                    let ce = cross_entropy(&mut g, logits, &y)?;
                    (ce, ce, None)
                }
                Method::LabelSmoothing => {
                    let ls = label_smoothing_loss(&mut g, logits, &y, cfg.loss.smoothing_epsilon)?;
                    (ls, ls, None)
                }
                Method::Bake => {
                    let parts = bake_loss(&mut g, logits, features, &y, &cfg.bake, &cfg.loss)?;
                    (parts.total, parts.ce, Some(parts.kl))
                }
            };
            let value = |id| g.value(id).data()[0];
            let loss_value = value(total);
            if !loss_value.is_finite() {
                return Err(Error::config(format!(
                    "training diverged at epoch {epoch}, iteration {it} (loss {loss_value}); lower the learning rate"
                )));
            }
            sum_loss += loss_value;
            sum_ce += value(ce);
            sum_kl += kl.map_or(0.0, value);

            let mut grads = g.backward(total)?;
            let grads: Vec<Tensor> = params.iter().map(|&p| grads.take(p)).collect();
            opt.step(model.params_mut(), &grads, lr)?;
            iter_seconds += iter_start.elapsed().as_secs_f64();
        }
        let (top1, top5) = evaluate(&model, test_set)?;
        let n = iters as f64;
        let metrics = EpochMetrics {
            epoch,
            lr,
            train_loss: sum_loss / n,
            train_ce: sum_ce / n,
            train_kl: sum_kl / n,
            test_top1: top1,
            test_top5: top5,
            wall_seconds: started.elapsed().as_secs_f64(),
            mean_iter_seconds: iter_seconds / n,
        };
        on_epoch(&metrics);
        history.push(metrics);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_clusters, Split};
    use crate::models::{Activation, Architecture};

    #[test]
    fn plain_gradient_step() {
        let mut p = vec![Tensor::from_rows(&[[1.0, 2.0]])];
        let g = vec![Tensor::from_rows(&[[0.5, -1.0]])];
        Sgd::new(0.0, 0.0).step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p[0].data(), &[1.0 - 0.05, 2.0 + 0.1]);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::from_rows(&[[1.0, 2.0]])];
        let g = vec![Tensor::zeros(&[1, 2])];
        Sgd::new(0.9, 0.0).step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p[0].data(), &[1.0, 2.0]);
    }

    #[test]
    fn momentum_unrolls() {
        let mut p = vec![Tensor::scalar(0.0)];
        let g = vec![Tensor::scalar(2.0)];
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step(&mut p, &g, 0.1).unwrap();
        opt.step(&mut p, &g, 0.1).unwrap();
        let expected = -0.1 * (2.0 + 1.9 * 2.0);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut p = vec![Tensor::scalar(2.0)];
        Sgd::new(0.0, 0.5).step(&mut p, &[Tensor::scalar(0.0)], 0.1).unwrap();
        assert!((p[0].data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_shape_mismatch() {
        let mut p = vec![Tensor::zeros(&[2])];
        assert!(Sgd::new(0.9, 0.0).step(&mut p, &[Tensor::zeros(&[3])], 0.1).is_err());
    }

    #[test]
    fn cosine_schedule_points() {
        let s = Schedule::Cosine { warmup_epochs: 5.0 };
        assert_eq!(lr_at(&s, 0.0, 100, 0.2), 0.0);
        assert!((lr_at(&s, 2.5, 100, 0.2) - 0.1).abs() < 1e-15);
        assert!((lr_at(&s, 5.0, 100, 0.2) - 0.2).abs() < 1e-15);
        let last = lr_at(&s, 99.0, 100, 0.2);
        assert!(last <= 0.02 * 0.2, "{last}");
        // halfway through the decay
        assert!((lr_at(&s, 52.5, 100, 0.2) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn step_schedule_points() {
        let s = Schedule::Step {
            milestones: vec![100, 150],
            factor: 0.1,
        };
        assert_eq!(lr_at(&s, 99.0, 200, 0.1), 0.1);
        assert!((lr_at(&s, 120.0, 200, 0.1) - 0.01).abs() < 1e-15);
        assert!((lr_at(&s, 150.0, 200, 0.1) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn schedule_strings() {
        assert_eq!("cosine:5".parse::<Schedule>().unwrap(), Schedule::Cosine { warmup_epochs: 5.0 });
        let s: Schedule = "step:100,150:0.1".parse().unwrap();
        assert_eq!(s.to_string().parse::<Schedule>().unwrap(), s);
        assert!("step:150,100".parse::<Schedule>().unwrap().validate().is_err());
        assert!("linear".parse::<Schedule>().is_err());
    }

    #[test]
    fn evaluate_tie_rule() {
        let arch = Architecture {
            input_dim: 1,
            stem: None,
            hidden: vec![],
            activation: Activation::Relu,
            num_classes: 10,
        };
        let m = Model::from_params(arch, vec![Tensor::zeros(&[1, 10]), Tensor::zeros(&[10])]).unwrap();
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let ds = Dataset::new(Tensor::zeros(&[100, 1]), labels, 10, Split::Test).unwrap();
        let (t1, t5) = evaluate(&m, &ds).unwrap();
        assert_eq!((t1, t5), (0.1, 0.5));
    }

    #[test]
    fn evaluate_perfect_predictor() {
        let arch = Architecture {
            input_dim: 3,
            stem: None,
            hidden: vec![],
            activation: Activation::Relu,
            num_classes: 3,
        };
        let m = Model::from_params(arch, vec![Tensor::identity(3), Tensor::zeros(&[3])]).unwrap();
        let ds = Dataset::new(Tensor::identity(3), vec![0, 1, 2], 3, Split::Test).unwrap();
        assert_eq!(evaluate(&m, &ds).unwrap(), (1.0, 1.0));
    }

    fn small_cfg(method: Method) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            base_lr: 0.01,
            method,
            sampler: SamplerConfig { n_hat: 8, m: 1, seed: 1 },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (train_set, test_set) = synth_clusters(3, 10, 4, 0.5, 0).unwrap();
        let model = Model::init(Architecture::mlp(4, 3), 0).unwrap();
        let cfg = TrainConfig { epochs: 0, ..small_cfg(Method::Bake) };
        let (out, metrics) = train(model.clone(), &train_set, &test_set, &cfg).unwrap();
        assert_eq!(out, model);
        assert!(metrics.is_empty());
    }

    #[test]
    fn loss_decomposition_and_determinism() {
        let (train_set, test_set) = synth_clusters(4, 20, 6, 0.8, 2).unwrap();
        let model = Model::init(Architecture::mlp(6, 4), 3).unwrap();
        let cfg = small_cfg(Method::Bake);
        let (_, a) = train(model.clone(), &train_set, &test_set, &cfg).unwrap();
        let (_, b) = train(model, &train_set, &test_set, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.train_loss - (x.train_ce + cfg.loss.lambda * x.train_kl)).abs() <= 1e-6);
            assert!(x.test_top1 <= x.test_top5);
            assert_eq!(
                (x.train_loss, x.train_ce, x.train_kl, x.test_top1, x.lr),
                (y.train_loss, y.train_ce, y.train_kl, y.test_top1, y.lr)
            );
        }
    }

    #[test]
    fn baselines_run_without_companions() {
        let (train_set, test_set) = synth_clusters(3, 16, 4, 0.5, 0).unwrap();
        for method in [Method::Vanilla, Method::LabelSmoothing] {
            let cfg = small_cfg(method);
            assert_eq!(cfg.effective_sampler().m, 0);
            let model = Model::init(Architecture::mlp(4, 3), 0).unwrap();
            let (_, m) = train(model, &train_set, &test_set, &cfg).unwrap();
            assert_eq!(m.len(), 3);
            assert!(m.iter().all(|e| e.train_kl == 0.0));
        }
    }

    #[test]
    fn config_errors() {
        let bad = |f: &dyn Fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(&|c| c.base_lr = 0.0));
        assert!(bad(&|c| c.momentum = 1.0));
        assert!(bad(&|c| c.bake.omega = 1.5));
        assert!(bad(&|c| c.bake.tau = 2.0));
        assert!(bad(&|c| c.sampler = SamplerConfig { n_hat: 1, m: 0, seed: 0 }));
        assert!(bad(&|c| c.schedule = Schedule::Step { milestones: vec![5, 5], factor: 0.1 }));
        assert!(!bad(&|_| ()));
    }
}
