//! Training loops: traditional empirical-risk minimization, saliency-
//! guided training with a fixed mask count, and the adaptive variant
//! that keeps a per-image mask count and moves it each epoch from the
//! softmax response to masking.
//!
//! One step of the guided methods runs two graphs. The first is a
//! dropout-free forward with input gradients enabled; it yields the
//! saliency ranking per image and the original softmax outputs. The
//! second binds the parameters once and runs two forwards over them — a
//! training-mode pass on the clean batch for the cross-entropy term and
//! an eval-mode pass on the masked batch for the KL term — so one
//! backward accumulates both contributions into the shared parameters.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_order, Dataset};
use crate::model::{MnistCnn, NoRng};
use crate::optim::{Optimizer, OptimizerKind};
use crate::saliency::{
    input_gradient_batch, mask_features, rank_features, MaskDirection, MaskSpec, RankBy,
    SaliencyTarget,
};
use crate::tensor::{Element, Graph, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Traditional,
    Sgt,
    Smoot,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Traditional => "traditional",
            Method::Sgt => "sgt",
            Method::Smoot => "smoot",
        })
    }
}

fn default_lr_gamma() -> f64 {
    0.7
}
fn default_tau() -> f64 {
    1.0
}
fn default_lambda() -> f64 {
    1.0
}
fn default_alpha() -> f64 {
    0.95
}
fn default_mu() -> f64 {
    10.0
}
fn default_n() -> usize {
    5
}
fn default_k_min_frac() -> f64 {
    0.2
}
fn default_k_max_frac() -> f64 {
    0.8
}
fn default_epochs() -> usize {
    5
}
fn default_batch_size() -> usize {
    256
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adadelta
}

/// Run hyperparameters. Defaults follow the reference setup: τ=1, λ=1,
/// α=0.95, μ=10, n=5, Adadelta, batch 256, mask count initialized to
/// half the pixels and clamped to [20%, 80%].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    /// Learning rate.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Per-epoch multiplicative step decay: epoch e runs at
    /// `tau * lr_gamma^e`. 1 disables the schedule.
    #[serde(default = "default_lr_gamma")]
    pub lr_gamma: f64,
    /// KL weight in the combined loss.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Weight of the top-1 softmax delta.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Mask-count update speed.
    #[serde(default = "default_mu")]
    pub mu: f64,
    /// Top-n depth of the secondary softmax delta.
    #[serde(default = "default_n")]
    pub n: usize,
    /// Initial mask count in pixels; defaults to half the features.
    #[serde(default)]
    pub k_init: Option<usize>,
    #[serde(default = "default_k_min_frac")]
    pub k_min_frac: f64,
    #[serde(default = "default_k_max_frac")]
    pub k_max_frac: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub rank_by: RankBy,
    #[serde(default)]
    pub target: SaliencyTarget,
}

impl TrainConfig {
    pub fn new(method: Method) -> Self {
        TrainConfig {
            method,
            tau: default_tau(),
            lr_gamma: default_lr_gamma(),
            lambda: default_lambda(),
            alpha: default_alpha(),
            mu: default_mu(),
            n: default_n(),
            k_init: None,
            k_min_frac: default_k_min_frac(),
            k_max_frac: default_k_max_frac(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            optimizer: default_optimizer(),
            seed: 0,
            rank_by: RankBy::default(),
            target: SaliencyTarget::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha: {} outside [0, 1]", self.alpha)));
        }
        if self.n < 2 {
            return Err(Error::Config(format!("n: {} below the minimum of 2", self.n)));
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::Config(format!("tau: {} must be positive", self.tau)));
        }
        if !self.lr_gamma.is_finite() || self.lr_gamma <= 0.0 || self.lr_gamma > 1.0 {
            return Err(Error::Config(format!(
                "lr_gamma: {} outside (0, 1]",
                self.lr_gamma
            )));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda: {} must be nonnegative",
                self.lambda
            )));
        }
        if !self.mu.is_finite() {
            return Err(Error::Config(format!("mu: {} must be finite", self.mu)));
        }
        if !(0.0..1.0).contains(&self.k_min_frac)
            || self.k_max_frac > 1.0
            || self.k_min_frac >= self.k_max_frac
        {
            return Err(Error::Config(format!(
                "k_min_frac/k_max_frac: need 0 <= {} < {} <= 1",
                self.k_min_frac, self.k_max_frac
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs: must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size: must be >= 1".into()));
        }
        Ok(())
    }

    /// Pixel-count mask bounds for an image with `p` features.
    pub fn mask_bounds(&self, p: usize) -> Result<MaskBounds> {
        self.validate()?;
        let k_min = (self.k_min_frac * p as f64).floor() as usize;
        let k_max = (self.k_max_frac * p as f64).floor() as usize;
        let k_init = self.k_init.unwrap_or((p as f64 * 0.5).floor() as usize);
        if k_init < k_min || k_init > k_max {
            return Err(Error::Config(format!(
                "k_init: {k_init} outside derived bounds [{k_min}, {k_max}]"
            )));
        }
        Ok(MaskBounds { k_min, k_max, k_init })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MaskBounds {
    pub k_min: usize,
    pub k_max: usize,
    pub k_init: usize,
}

/// Per-sample mask counts, keyed by stable sample id and persisted
/// across epochs (and runs, via the CSV sidecar).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SampleMaskState {
    k: BTreeMap<usize, usize>,
}

impl SampleMaskState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn init<I: IntoIterator<Item = usize>>(ids: I, k_init: usize) -> Self {
        SampleMaskState {
            k: ids.into_iter().map(|id| (id, k_init)).collect(),
        }
    }

    pub fn get(&self, id: usize) -> Result<usize> {
        self.k
            .get(&id)
            .copied()
            .ok_or_else(|| Error::State(format!("mask state: no entry for sample {id}")))
    }

    pub fn set(&mut self, id: usize, k: usize) {
        self.k.insert(id, k);
    }

    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.k.iter().map(|(&id, &k)| (id, k))
    }

    /// (min, median, max) of the stored counts; zeros when empty. The
    /// median of an even count is the mean of the middle pair.
    pub fn summary(&self) -> (usize, f64, usize) {
        if self.k.is_empty() {
            return (0, 0.0, 0);
        }
        let mut counts: Vec<usize> = self.k.values().copied().collect();
        counts.sort_unstable();
        let median = if counts.len() % 2 == 1 {
            counts[counts.len() / 2] as f64
        } else {
            (counts[counts.len() / 2 - 1] + counts[counts.len() / 2]) as f64 / 2.0
        };
        (counts[0], median, *counts.last().unwrap())
    }

    pub fn save_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "sample_id,k")?;
        for (&id, &k) in &self.k {
            writeln!(out, "{id},{k}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load_csv<P: AsRef<Path>>(path: P) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut state = SampleMaskState::new();
        for (lineno, line) in file.lines().enumerate() {
            let line = line?;
            if lineno == 0 {
                if line.trim() != "sample_id,k" {
                    return Err(Error::Format(format!(
                        "mask state: expected header 'sample_id,k', got '{line}'"
                    )));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (id, k) = line
                .split_once(',')
                .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
                .ok_or_else(|| {
                    Error::Format(format!("mask state: bad row {}: '{line}'", lineno + 1))
                })?;
            state.set(id, k);
        }
        Ok(state)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from the run seed, a purpose tag
/// and two stream coordinates (typically epoch and sample id).
pub fn mix_seed(base: u64, tag: &str, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(base ^ 0x5321_9d1c_ab0c_90f7);
    for &byte in tag.as_bytes() {
        h = splitmix64(h ^ byte as u64);
    }
    h = splitmix64(h ^ a);
    splitmix64(h ^ b)
}

fn check_probs(name: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric(format!("{name}: NaN probability")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-4 {
        return Err(Error::Parameter(format!(
            "{name}: probabilities sum to {sum}, not 1"
        )));
    }
    Ok(())
}

/// Softmax deltas between the masked and original outputs of one image.
///
/// Classes are ranked by descending original probability (ties by
/// ascending index). `delta1` is the masked-minus-original difference at
/// the top class; `delta2` averages the same differences over ranks
/// 2..n; `delta = alpha*delta1 + (1-alpha)*delta2`.
pub fn delta_scores(
    sm_masked: &[f64],
    sm_orig: &[f64],
    alpha: f64,
    n: usize,
) -> Result<(f64, f64, f64)> {
    if sm_masked.len() != sm_orig.len() {
        return Err(Error::Shape(format!(
            "delta_scores: {} masked vs {} original classes",
            sm_masked.len(),
            sm_orig.len()
        )));
    }
    let c = sm_orig.len();
    if n < 2 || n > c {
        return Err(Error::Parameter(format!(
            "delta_scores: n={n} outside [2, {c}]"
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!(
            "delta_scores: alpha={alpha} outside [0, 1]"
        )));
    }
    check_probs("delta_scores: masked", sm_masked)?;
    check_probs("delta_scores: original", sm_orig)?;
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| sm_orig[b].partial_cmp(&sm_orig[a]).unwrap().then(a.cmp(&b)));
    let delta1 = sm_masked[order[0]] - sm_orig[order[0]];
    let delta2 = order[1..n]
        .iter()
        .map(|&cls| sm_masked[cls] - sm_orig[cls])
        .sum::<f64>()
        / (n - 1) as f64;
    Ok((delta1, delta2, alpha * delta1 + (1.0 - alpha) * delta2))
}

/// Clamped mask-count update: `k' = clamp(k + floor(mu*delta))` with
/// mathematical floor (toward negative infinity).
pub fn update_mask_count(k: usize, delta: f64, mu: f64, k_min: usize, k_max: usize) -> usize {
    let step = (mu * delta).floor() as i64;
    (k as i64 + step).clamp(k_min as i64, k_max as i64) as usize
}

/// Standard nonnegative KL divergence `sum p*ln(p/q)` with both operands
/// clamped below at 1e-12.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "kl_divergence: {} vs {} classes",
            p.len(),
            q.len()
        )));
    }
    if p.iter().chain(q).any(|v| v.is_nan()) {
        return Err(Error::Numeric("kl_divergence: NaN input".into()));
    }
    check_probs("kl_divergence: p", p)?;
    check_probs("kl_divergence: q", q)?;
    const CLAMP: f64 = 1e-12;
    Ok(p.iter()
        .zip(q)
        .map(|(&pv, &qv)| {
            let pc = pv.max(CLAMP);
            pc * (pc.ln() - qv.max(CLAMP).ln())
        })
        .sum())
}

/// Running totals of one optimizer step.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepStats {
    pub ce: f64,
    pub kl: f64,
    pub correct: usize,
    pub total: usize,
}

/// Per-epoch log row.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub ce_loss: f64,
    pub kl_loss: f64,
    pub k_min: usize,
    pub k_median: f64,
    pub k_max: usize,
}

pub struct TrainOutcome<T: Element> {
    pub model: MnistCnn<T>,
    pub mask_state: SampleMaskState,
    pub metrics: Vec<EpochMetrics>,
}

/// Drives one training run: owns the model, the optimizer, the per-image
/// mask counts and the run's dropout stream.
pub struct Trainer<T: Element> {
    pub model: MnistCnn<T>,
    pub mask_state: SampleMaskState,
    cfg: TrainConfig,
    bounds: MaskBounds,
    opt: Optimizer<T>,
    dropout_rng: ChaCha8Rng,
}

impl<T: Element> Trainer<T> {
    pub fn new(model: MnistCnn<T>, cfg: TrainConfig) -> Result<Self> {
        let p = model.in_channels * model.in_height * model.in_width;
        let bounds = cfg.mask_bounds(p)?;
        if cfg.method == Method::Smoot && cfg.n > model.num_classes {
            return Err(Error::Config(format!(
                "n: {} exceeds the {} model classes",
                cfg.n, model.num_classes
            )));
        }
        let dropout_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, "dropout", 0, 0));
        let opt = Optimizer::new(cfg.optimizer, cfg.tau);
        Ok(Trainer {
            model,
            mask_state: SampleMaskState::new(),
            cfg,
            bounds,
            opt,
            dropout_rng,
        })
    }

    pub fn bounds(&self) -> MaskBounds {
        self.bounds
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Mask count for one sample under the active method.
    fn sample_k(&self, id: usize) -> Result<usize> {
        match self.cfg.method {
            Method::Traditional => Ok(0),
            Method::Sgt => Ok(self.bounds.k_init),
            Method::Smoot => self.mask_state.get(id),
        }
    }

    /// One optimizer step on a batch. `epoch` feeds the per-image mask
    /// RNG streams so re-visiting a sample in a later epoch draws fresh
    /// fill values, and positions the step-decay schedule.
    pub fn step(
        &mut self,
        ids: &[usize],
        images: &Tensor<T>,
        labels: &[usize],
        epoch: usize,
    ) -> Result<StepStats> {
        self.opt
            .set_lr(self.cfg.tau * self.cfg.lr_gamma.powi(epoch as i32));
        let n = ids.len();
        let p = images.len() / n;
        let (c, h, w) = (
            images.shape()[1],
            images.shape()[2],
            images.shape()[3],
        );
        let guided = self.cfg.method != Method::Traditional;
        let want_kl = guided && self.cfg.lambda != 0.0;
        let want_delta = self.cfg.method == Method::Smoot && self.cfg.mu != 0.0;
        let ks: Vec<usize> = ids
            .iter()
            .map(|&id| self.sample_k(id))
            .collect::<Result<_>>()?;
        let any_mask = ks.iter().any(|&k| k > 0);
        // The saliency pass is only needed when a mask is applied or the
        // original softmax serves as the KL target / delta baseline.
        let need_saliency = guided && (any_mask || want_kl || want_delta);

        let mut masked_images = None;
        let mut probs_orig = None;
        if need_saliency {
            let model = &self.model;
            let sal = input_gradient_batch(
                |g, x| {
                    let bound = model.bind(g, false);
                    model.forward::<NoRng>(g, &bound, x, None)
                },
                images,
                Some(labels),
                self.cfg.target,
            )?;
            let mut masked = Vec::with_capacity(images.len());
            for (i, (&id, &k)) in ids.iter().zip(&ks).enumerate() {
                let row =
                    Tensor::new(vec![p], images.data()[i * p..(i + 1) * p].to_vec())?;
                let ranking = rank_features(&sal.grads[i], self.cfg.rank_by)?;
                let mut mask_rng = ChaCha8Rng::seed_from_u64(mix_seed(
                    self.cfg.seed,
                    "mask",
                    epoch as u64,
                    id as u64,
                ));
                let spec = MaskSpec {
                    k,
                    direction: MaskDirection::Bottom,
                };
                let out = mask_features(&row, &ranking, &spec, &mut mask_rng)?;
                masked.extend_from_slice(out.data());
            }
            masked_images = Some(Tensor::new(vec![n, c, h, w], masked)?);
            probs_orig = Some(sal.probs);
        }

        let mut g: Graph<T> = Graph::new();
        let bound = self.model.bind(&mut g, true);
        let x = g.leaf(images.clone(), false);
        let logits = self
            .model
            .forward(&mut g, &bound, x, Some(&mut self.dropout_rng))?;
        let ce = g.cross_entropy(logits, labels)?;
        let mut loss = ce;
        let mut q_probs = None;
        if need_saliency && (want_kl || want_delta) {
            let masked = masked_images.as_ref().unwrap();
            let xm = g.leaf(masked.clone(), false);
            let logits_m = self.model.forward::<NoRng>(&mut g, &bound, xm, None)?;
            let q = g.softmax(logits_m)?;
            q_probs = Some(
                (0..n)
                    .map(|i| {
                        g.value(q)
                            .row(i)
                            .iter()
                            .map(|v| v.to_f64())
                            .collect::<Vec<f64>>()
                    })
                    .collect::<Vec<_>>(),
            );
            if want_kl {
                let orig = probs_orig.as_ref().unwrap();
                let flat: Vec<T> = orig
                    .iter()
                    .flatten()
                    .map(|&v| T::from_f64(v))
                    .collect();
                let num_classes = orig[0].len();
                let pt = g.leaf(Tensor::new(vec![n, num_classes], flat)?, false);
                let kl = g.kl_div(pt, q)?;
                let kl_scaled = g.scale(kl, T::from_f64(self.cfg.lambda));
                loss = g.add(ce, kl_scaled)?;
            }
        }
        g.backward(loss)?;

        let mut stats = StepStats {
            ce: g.value(ce).item()?.to_f64(),
            kl: 0.0,
            correct: 0,
            total: n,
        };
        if want_kl {
            let total = g.value(loss).item()?.to_f64();
            stats.kl = (total - stats.ce) / self.cfg.lambda;
        }
        for (i, &label) in labels.iter().enumerate() {
            let row = g.value(logits).row(i);
            let pred = (0..row.len())
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap().then(b.cmp(&a)))
                .unwrap();
            if pred == label {
                stats.correct += 1;
            }
        }

        let grads: Vec<Option<&Tensor<T>>> =
            bound.vars().iter().map(|&v| g.grad(v)).collect();
        self.opt.step(self.model.param_tensors_mut(), &grads)?;

        if want_delta {
            let orig = probs_orig.as_ref().unwrap();
            let q = q_probs.as_ref().unwrap();
            for (i, (&id, &k)) in ids.iter().zip(&ks).enumerate() {
                let (_, _, delta) =
                    delta_scores(&q[i], &orig[i], self.cfg.alpha, self.cfg.n)?;
                let k_next = update_mask_count(
                    k,
                    delta,
                    self.cfg.mu,
                    self.bounds.k_min,
                    self.bounds.k_max,
                );
                self.mask_state.set(id, k_next);
            }
        }
        Ok(stats)
    }
}

/// Full training run over `cfg.epochs` epochs of shuffled minibatches.
/// `hidden` sizes the first fully connected layer; `test` (when given)
/// supplies the per-epoch held-out accuracy column.
pub fn train<T: Element>(
    train_set: &Dataset<T>,
    test: Option<&Dataset<T>>,
    cfg: &TrainConfig,
    hidden: usize,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Parameter("train: empty dataset".into()));
    }
    let (c, h, w) = train_set.image_dims();
    let classes = train_set.num_classes();
    let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, "init", 0, 0));
    let model = MnistCnn::new(c, h, w, classes, hidden, &mut init_rng)?;
    let mut trainer = Trainer::new(model, cfg.clone())?;
    if cfg.method == Method::Smoot {
        trainer.mask_state =
            SampleMaskState::init(train_set.ids.iter().copied(), trainer.bounds().k_init);
    }

    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = batch_order(
            train_set.len(),
            cfg.batch_size,
            true,
            mix_seed(cfg.seed, "shuffle", epoch as u64, 0),
        )?;
        let mut ce_sum = 0.0;
        let mut kl_sum = 0.0;
        let mut correct = 0;
        for positions in &batches {
            let (ids, images, labels) = train_set.gather(positions)?;
            let stats = trainer.step(&ids, &images, &labels, epoch)?;
            ce_sum += stats.ce * stats.total as f64;
            kl_sum += stats.kl * stats.total as f64;
            correct += stats.correct;
        }
        let n = train_set.len() as f64;
        let test_acc = match test {
            Some(t) => crate::eval::top_n_accuracy(&trainer.model, t, 1, cfg.batch_size)?,
            None => 0.0,
        };
        let (k_min, k_median, k_max) = match cfg.method {
            Method::Traditional => (0, 0.0, 0),
            Method::Sgt => {
                let k = trainer.bounds().k_init;
                (k, k as f64, k)
            }
            Method::Smoot => trainer.mask_state.summary(),
        };
        metrics.push(EpochMetrics {
            epoch,
            train_acc: 100.0 * correct as f64 / n,
            test_acc,
            ce_loss: ce_sum / n,
            kl_loss: kl_sum / n,
            k_min,
            k_median,
            k_max,
        });
    }
    Ok(TrainOutcome {
        model: trainer.model,
        mask_state: trainer.mask_state,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_planted, PlantedSpec};

    #[test]
    fn delta_identical_distributions_is_zero() {
        let p = [0.25, 0.25, 0.25, 0.25];
        assert_eq!(delta_scores(&p, &p, 0.5, 3).unwrap(), (0.0, 0.0, 0.0));
    }

    #[test]
    fn delta_hand_case() {
        let orig = [0.7, 0.2, 0.1];
        let masked = [0.5, 0.3, 0.2];
        let (d1, d2, d) = delta_scores(&masked, &orig, 0.7, 3).unwrap();
        assert!((d1 - (-0.2)).abs() < 1e-12);
        assert!((d2 - 0.1).abs() < 1e-12);
        assert!((d - (-0.11)).abs() < 1e-12);
    }

    #[test]
    fn delta_alpha_one_ignores_delta2() {
        let orig = [0.6, 0.3, 0.1];
        let masked = [0.4, 0.4, 0.2];
        let (d1, _, d) = delta_scores(&masked, &orig, 1.0, 3).unwrap();
        assert_eq!(d, d1);
    }

    #[test]
    fn delta_rejects_unnormalized_input() {
        let bad = [0.5, 0.2, 0.1];
        let ok = [0.5, 0.3, 0.2];
        assert!(matches!(
            delta_scores(&bad, &ok, 0.5, 2),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn mask_count_update_hand_cases() {
        assert_eq!(update_mask_count(100, 0.0, 10.0, 0, 1000), 100);
        assert_eq!(update_mask_count(392, 0.35, 10.0, 156, 627), 395);
        // floor(-2.5) = -3: 157 - 3 = 154, clamped up to 156
        assert_eq!(update_mask_count(157, -0.25, 10.0, 156, 627), 156);
    }

    #[test]
    fn kl_hand_case_and_zero() {
        let p = [0.5, 0.5];
        assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-15);
        let q = [0.9, 0.1];
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl_divergence(&p, &q).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.510826).abs() < 1e-6);
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let mut p: Vec<f64> = (0..5).map(|_| rng.random::<f64>() + 1e-3).collect();
            let mut q: Vec<f64> = (0..5).map(|_| rng.random::<f64>() + 1e-3).collect();
            let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
            p.iter_mut().for_each(|v| *v /= sp);
            q.iter_mut().for_each(|v| *v /= sq);
            assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        }
    }

    #[test]
    fn mask_state_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.csv");
        let mut state = SampleMaskState::new();
        state.set(0, 392);
        state.set(7, 156);
        state.set(3, 627);
        state.save_csv(&path).unwrap();
        assert_eq!(SampleMaskState::load_csv(&path).unwrap(), state);
    }

    #[test]
    fn mask_state_missing_id_is_a_state_error() {
        let state = SampleMaskState::init([0, 1], 10);
        assert!(matches!(state.get(2), Err(Error::State(_))));
    }

    #[test]
    fn mask_state_summary_orders() {
        let mut state = SampleMaskState::new();
        for (id, k) in [(0, 30), (1, 10), (2, 20), (3, 40)] {
            state.set(id, k);
        }
        assert_eq!(state.summary(), (10, 25.0, 40));
    }

    #[test]
    fn config_validation_names_fields() {
        let mut cfg = TrainConfig::new(Method::Smoot);
        cfg.alpha = 1.5;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("alpha"), "{msg}");

        let mut cfg = TrainConfig::new(Method::Smoot);
        cfg.k_min_frac = 0.9;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::new(Method::Sgt);
        cfg.k_init = Some(5);
        assert!(matches!(cfg.mask_bounds(784), Err(Error::Config(_))));
    }

    fn tiny_run(method: Method, lambda: f64, mu: f64, zero_k: bool) -> Vec<f32> {
        let mut spec = PlantedSpec::default_28x28();
        spec.seed = 3;
        let (ds, _) = generate_planted::<f32>(&spec, 12).unwrap();
        let mut cfg = TrainConfig::new(method);
        cfg.lambda = lambda;
        cfg.mu = mu;
        cfg.epochs = 2;
        cfg.batch_size = 6;
        cfg.seed = 42;
        cfg.n = 4;
        if zero_k {
            cfg.k_min_frac = 0.0;
            cfg.k_init = Some(0);
        }
        let out = train(&ds, None, &cfg, 16).unwrap();
        out.model
            .param_tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    #[test]
    fn smoot_with_frozen_k_matches_sgt_bitwise() {
        assert_eq!(
            tiny_run(Method::Smoot, 1.0, 0.0, false),
            tiny_run(Method::Sgt, 1.0, 0.0, false)
        );
    }

    #[test]
    fn guided_methods_with_everything_off_match_traditional_bitwise() {
        let base = tiny_run(Method::Traditional, 0.0, 0.0, true);
        assert_eq!(tiny_run(Method::Sgt, 0.0, 0.0, true), base);
        assert_eq!(tiny_run(Method::Smoot, 0.0, 0.0, true), base);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let a = tiny_run(Method::Smoot, 1.0, 10.0, false);
        let b = tiny_run(Method::Smoot, 1.0, 10.0, false);
        assert_eq!(a, b);
    }

    #[test]
    fn smoot_counts_stay_in_bounds() {
        let mut spec = PlantedSpec::default_28x28();
        spec.seed = 9;
        let (ds, _) = generate_planted::<f32>(&spec, 20).unwrap();
        let mut cfg = TrainConfig::new(Method::Smoot);
        cfg.epochs = 3;
        cfg.batch_size = 10;
        cfg.mu = 100.0;
        cfg.n = 4;
        let out = train(&ds, None, &cfg, 16).unwrap();
        let bounds = cfg.mask_bounds(784).unwrap();
        for (_, k) in out.mask_state.iter() {
            assert!((bounds.k_min..=bounds.k_max).contains(&k));
        }
        for m in &out.metrics {
            assert!(m.k_min as f64 <= m.k_median && m.k_median <= m.k_max as f64);
        }
    }

    #[test]
    fn traditional_metrics_have_zero_mask_columns() {
        let mut spec = PlantedSpec::default_28x28();
        spec.noise = 0.1;
        let (ds, _) = generate_planted::<f32>(&spec, 8).unwrap();
        let mut cfg = TrainConfig::new(Method::Traditional);
        cfg.epochs = 2;
        cfg.batch_size = 4;
        let out = train(&ds, None, &cfg, 8).unwrap();
        assert_eq!(out.metrics.len(), 2);
        for m in &out.metrics {
            assert_eq!((m.k_min, m.k_median, m.k_max), (0, 0.0, 0));
            assert_eq!(m.kl_loss, 0.0);
        }
    }
}
