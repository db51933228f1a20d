//! Modification-based evaluation: accuracy-drop curves under
//! top-saliency masking, their trapezoidal AUC (smaller = more faithful
//! saliency), and the per-image class I / class II diagnostic.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::model::{MnistCnn, NoRng};
use crate::saliency::{
    input_gradient_batch, mask_features, rank_features, MaskDirection, MaskSpec, RankBy,
    SaliencyTarget,
};
use crate::tensor::{Element, Graph, Tensor};
use crate::train::mix_seed;
use crate::{Error, Result};

/// Accuracy (percent) against masked-fraction, plus its AUC.
#[derive(Clone, Debug, PartialEq)]
pub struct DropCurve {
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// One image's response to increasing top-saliency masking: label-class
/// probability per fraction. Class I peaks at fraction 0 (masking only
/// hurts); class II peaks later (masking first helps).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMaskProfile {
    pub sample_id: usize,
    pub curve: Vec<(f64, f64)>,
    pub peak_fraction: f64,
    pub class_two: bool,
}

/// Trapezoidal mean of `y` over `x`: sum of trapezoid areas divided by
/// the spanned range.
pub fn auc(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Parameter(format!(
            "auc: need at least 2 points, got {}",
            points.len()
        )));
    }
    for pair in points.windows(2) {
        if pair[1].0 == pair[0].0 {
            return Err(Error::Parameter(format!(
                "auc: duplicate fraction {}",
                pair[0].0
            )));
        }
        if pair[1].0 < pair[0].0 {
            return Err(Error::Parameter("auc: fractions must increase".into()));
        }
    }
    let span = points.last().unwrap().0 - points[0].0;
    let area: f64 = points
        .windows(2)
        .map(|pair| (pair[1].0 - pair[0].0) * (pair[0].1 + pair[1].1) / 2.0)
        .sum();
    Ok(area / span)
}

fn batch_logits<T: Element>(model: &MnistCnn<T>, images: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let n = images.shape()[0];
    let mut g: Graph<T> = Graph::new();
    let x = g.leaf(images.clone(), false);
    let logits = model.forward_eval(&mut g, x)?;
    Ok((0..n)
        .map(|i| g.value(logits).row(i).iter().map(|v| v.to_f64()).collect())
        .collect())
}

/// True when `label` is among the `n` largest entries (ties broken by
/// ascending index, so earlier classes win disputed slots).
pub fn label_in_top_n(row: &[f64], label: usize, n: usize) -> bool {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    order[..n].contains(&label)
}

/// Share (percent) of samples whose label ranks in the model's top n.
pub fn top_n_accuracy<T: Element>(
    model: &MnistCnn<T>,
    dataset: &Dataset<T>,
    n: usize,
    batch_size: usize,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Parameter("top_n_accuracy: empty dataset".into()));
    }
    if n == 0 || n > model.num_classes {
        return Err(Error::Parameter(format!(
            "top_n_accuracy: n={n} outside [1, {}]",
            model.num_classes
        )));
    }
    let mut correct = 0usize;
    let positions: Vec<usize> = (0..dataset.len()).collect();
    for chunk in positions.chunks(batch_size.max(1)) {
        let (_, images, labels) = dataset.gather(chunk)?;
        for (row, &label) in batch_logits(model, &images)?.iter().zip(&labels) {
            if label_in_top_n(row, label, n) {
                correct += 1;
            }
        }
    }
    Ok(100.0 * correct as f64 / dataset.len() as f64)
}

fn check_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.len() < 2 {
        return Err(Error::Parameter(format!(
            "fractions: need at least 2, got {}",
            fractions.len()
        )));
    }
    if fractions[0] != 0.0 {
        return Err(Error::Parameter(format!(
            "fractions: must start at 0, got {}",
            fractions[0]
        )));
    }
    let last = *fractions.last().unwrap();
    if last > 0.8 + 1e-12 {
        return Err(Error::Parameter(format!(
            "fractions: {last} exceeds the 0.8 cap (fill range degenerates toward 1)"
        )));
    }
    for pair in fractions.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::Parameter(format!(
                "fractions: {} after {} is not strictly increasing",
                pair[1], pair[0]
            )));
        }
    }
    Ok(())
}

/// Default sweep 0, 0.1, …, 0.8.
pub fn default_fractions() -> Vec<f64> {
    (0..=8).map(|i| i as f64 / 10.0).collect()
}

/// Per-image label-class probabilities at each masked fraction, masking
/// the HIGHEST-saliency features. The backbone of both the drop curve
/// and the class I/II diagnostic: saliency is computed once per image
/// and reused across fractions.
fn masked_response<T: Element>(
    model: &MnistCnn<T>,
    dataset: &Dataset<T>,
    fractions: &[f64],
    target: SaliencyTarget,
    rank_by: RankBy,
    batch_size: usize,
    seed: u64,
) -> Result<(Vec<Vec<Vec<f64>>>, Vec<usize>)> {
    let p = dataset.features();
    let (c, h, w) = dataset.image_dims();
    // probs[f][i] = softmax row of image i at fraction index f
    let mut probs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); fractions.len()];
    let mut all_labels = Vec::new();
    let positions: Vec<usize> = (0..dataset.len()).collect();
    for chunk in positions.chunks(batch_size.max(1)) {
        let (ids, images, labels) = dataset.gather(chunk)?;
        all_labels.extend_from_slice(&labels);
        let sal = input_gradient_batch(
            |g, x| {
                let bound = model.bind(g, false);
                model.forward::<NoRng>(g, &bound, x, None)
            },
            &images,
            Some(&labels),
            target,
        )?;
        let rankings: Vec<_> = sal
            .grads
            .iter()
            .map(|grad| rank_features(grad, rank_by))
            .collect::<Result<_>>()?;
        for (fi, &fraction) in fractions.iter().enumerate() {
            let k = (fraction * p as f64).floor() as usize;
            let mut data = Vec::with_capacity(images.len());
            for (i, &id) in ids.iter().enumerate() {
                let row =
                    Tensor::new(vec![p], images.data()[i * p..(i + 1) * p].to_vec())?;
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                    seed,
                    "eval-mask",
                    fi as u64,
                    id as u64,
                ));
                let spec = MaskSpec {
                    k,
                    direction: MaskDirection::Top,
                };
                let out = mask_features(&row, &rankings[i], &spec, &mut rng)?;
                data.extend_from_slice(out.data());
            }
            let masked = Tensor::new(vec![ids.len(), c, h, w], data)?;
            for row in batch_logits(model, &masked)? {
                probs[fi].push(softmax_f64(&row));
            }
        }
    }
    Ok((probs, all_labels))
}

fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Top-1 accuracy after masking each fraction of highest-saliency
/// features, with the AUC of the resulting curve.
pub fn accuracy_drop_curve<T: Element>(
    model: &MnistCnn<T>,
    dataset: &Dataset<T>,
    fractions: &[f64],
    target: SaliencyTarget,
    rank_by: RankBy,
    batch_size: usize,
    seed: u64,
) -> Result<DropCurve> {
    check_fractions(fractions)?;
    if dataset.is_empty() {
        return Err(Error::Parameter("accuracy_drop_curve: empty dataset".into()));
    }
    let (probs, labels) = masked_response(
        model, dataset, fractions, target, rank_by, batch_size, seed,
    )?;
    let points: Vec<(f64, f64)> = fractions
        .iter()
        .zip(&probs)
        .map(|(&fraction, rows)| {
            let correct = rows
                .iter()
                .zip(&labels)
                .filter(|(row, l)| label_in_top_n(row, **l, 1))
                .count();
            (fraction, 100.0 * correct as f64 / labels.len() as f64)
        })
        .collect();
    let auc = auc(&points)?;
    Ok(DropCurve { points, auc })
}

/// Peak index of a probability profile; ties resolve to the smallest
/// fraction, so a flat profile is class I.
pub fn profile_peak(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in probs.iter().enumerate() {
        if v > probs[best] {
            best = i;
        }
    }
    best
}

fn step_fractions(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || 0.8 / step < 5.0 - 1e-9 {
        return Err(Error::Parameter(format!(
            "step: {step} must divide [0, 0.8] into at least 5 steps"
        )));
    }
    let mut fractions = Vec::new();
    let mut i = 0usize;
    loop {
        let f = i as f64 * step;
        if f > 0.8 + 1e-9 {
            break;
        }
        fractions.push(f.min(0.8));
        i += 1;
    }
    Ok(fractions)
}

/// Sweeps top-gradient masking over one dataset and classifies each
/// image by where its label-class probability peaks.
pub fn diagnose_dataset<T: Element>(
    model: &MnistCnn<T>,
    dataset: &Dataset<T>,
    step: f64,
    target: SaliencyTarget,
    rank_by: RankBy,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<ImageMaskProfile>> {
    if dataset.is_empty() {
        return Err(Error::Parameter("diagnose: empty dataset".into()));
    }
    let fractions = step_fractions(step)?;
    let (probs, labels) = masked_response(
        model, dataset, &fractions, target, rank_by, batch_size, seed,
    )?;
    let mut profiles = Vec::with_capacity(dataset.len());
    for (i, &label) in labels.iter().enumerate() {
        let curve: Vec<(f64, f64)> = fractions
            .iter()
            .enumerate()
            .map(|(fi, &f)| (f, probs[fi][i][label]))
            .collect();
        let peak = profile_peak(&curve.iter().map(|&(_, p)| p).collect::<Vec<_>>());
        profiles.push(ImageMaskProfile {
            sample_id: dataset.ids[i],
            peak_fraction: fractions[peak],
            class_two: peak > 0,
            curve,
        });
    }
    Ok(profiles)
}

/// Single-image convenience wrapper over [`diagnose_dataset`].
pub fn diagnose_image<T: Element>(
    model: &MnistCnn<T>,
    dataset: &Dataset<T>,
    position: usize,
    step: f64,
    target: SaliencyTarget,
    rank_by: RankBy,
    seed: u64,
) -> Result<ImageMaskProfile> {
    let (ids, images, labels) = dataset.gather(&[position])?;
    let one = Dataset {
        images,
        labels,
        ids,
    };
    Ok(diagnose_dataset(model, &one, step, target, rank_by, 1, seed)?.remove(0))
}

/// Share (percent) of a dataset diagnosed as class II.
pub fn class2_fraction(profiles: &[ImageMaskProfile]) -> f64 {
    if profiles.is_empty() {
        return 0.0;
    }
    100.0 * profiles.iter().filter(|p| p.class_two).count() as f64 / profiles.len() as f64
}
