//! Input-gradient saliency, feature ranking and the masking function.
//!
//! A saliency map here is the gradient of a chosen scalar model output
//! with respect to the input pixels. Ranking sorts flattened feature
//! indices ascending by that gradient; masking replaces the bottom-k
//! (training) or top-k (evaluation) features with uniform random values
//! drawn from the value range of the surviving features.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Element, Graph, Tensor, Var};
use crate::{Error, Result};

/// Scalar whose input gradient is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SaliencyTarget {
    /// Log-probability of the model's predicted class (default).
    #[default]
    PredictedLogProb,
    /// Log-probability of the ground-truth class.
    LabelLogProb,
    /// The cross-entropy loss.
    Loss,
}

/// Ranking key: the raw signed gradient, or its absolute value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankBy {
    #[default]
    Signed,
    Magnitude,
}

/// Per-image saliency for a batch: flattened input gradients plus the
/// softmax outputs and argmax predictions of the same eval-mode forward.
pub struct SaliencyBatch {
    pub grads: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
    pub predicted: Vec<usize>,
}

/// Computes input gradients for a batch of images under `target`.
///
/// `forward` must run an eval-mode (dropout-free) forward pass from the
/// input var to the logits. Each image's scalar depends only on its own
/// input row, so one backward pass yields every per-image gradient.
pub fn input_gradient_batch<T, F>(
    forward: F,
    images: &Tensor<T>,
    labels: Option<&[usize]>,
    target: SaliencyTarget,
) -> Result<SaliencyBatch>
where
    T: Element,
    F: FnOnce(&mut Graph<T>, Var) -> Result<Var>,
{
    let n = images.shape()[0];
    let p = images.len() / n;
    let mut g = Graph::new();
    let x = g.leaf(images.clone(), true);
    let logits = forward(&mut g, x)?;
    let ls = g.value(logits).shape();
    if ls.len() != 2 || ls[0] != n {
        return Err(Error::Shape(format!(
            "input_gradient: model produced {ls:?} logits for {n} images"
        )));
    }
    let sm = g.softmax(logits)?;
    let probs: Vec<Vec<f64>> = (0..n)
        .map(|i| g.value(sm).row(i).iter().map(|v| v.to_f64()).collect())
        .collect();
    let predicted: Vec<usize> = probs.iter().map(|row| argmax(row)).collect();

    let scalar = match target {
        SaliencyTarget::PredictedLogProb => g.class_log_prob_sum(logits, &predicted)?,
        SaliencyTarget::LabelLogProb => {
            let labels = labels.ok_or_else(|| {
                Error::Usage("input_gradient: label target requires labels".into())
            })?;
            g.class_log_prob_sum(logits, labels)?
        }
        SaliencyTarget::Loss => {
            let labels = labels.ok_or_else(|| {
                Error::Usage("input_gradient: loss target requires labels".into())
            })?;
            g.cross_entropy(logits, labels)?
        }
    };
    g.backward(scalar)?;
    let grad = g
        .grad(x)
        .ok_or_else(|| Error::Usage("input_gradient: no gradient reached the input".into()))?;
    let grads = (0..n)
        .map(|i| grad.data()[i * p..(i + 1) * p].iter().map(|v| v.to_f64()).collect())
        .collect();
    Ok(SaliencyBatch {
        grads,
        probs,
        predicted,
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Permutation of flattened feature indices, ascending by gradient key.
#[derive(Clone, Debug)]
pub struct SaliencyRanking {
    indices: Vec<usize>,
    gradients: Vec<f64>,
}

impl SaliencyRanking {
    /// Feature indices, ascending by ranking key; ties broken by ascending
    /// feature index.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// The raw gradient values, in feature order.
    pub fn gradients(&self) -> &[f64] {
        &self.gradients
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Sorts feature indices ascending by gradient (or |gradient|).
pub fn rank_features(grad: &[f64], rank_by: RankBy) -> Result<SaliencyRanking> {
    if grad.is_empty() {
        return Err(Error::Parameter("rank_features: empty gradient".into()));
    }
    if grad.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("rank_features: NaN gradient".into()));
    }
    let key = |i: usize| match rank_by {
        RankBy::Signed => grad[i],
        RankBy::Magnitude => grad[i].abs(),
    };
    let mut indices: Vec<usize> = (0..grad.len()).collect();
    indices.sort_by(|&a, &b| key(a).partial_cmp(&key(b)).unwrap().then(a.cmp(&b)));
    Ok(SaliencyRanking {
        indices,
        gradients: grad.to_vec(),
    })
}

/// Which end of the ranking gets masked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskDirection {
    /// Lowest-ranked features — the training-time mask.
    Bottom,
    /// Highest-ranked features — the evaluation/diagnosis mask.
    Top,
}

/// How many features to mask and from which end.
#[derive(Clone, Copy, Debug)]
pub struct MaskSpec {
    pub k: usize,
    pub direction: MaskDirection,
}

/// Replaces the selected features of `x` with i.i.d. uniform draws from
/// the `[min, max]` value range of the surviving features. Unmasked
/// features are bit-identical to the input.
pub fn mask_features<T: Element, R: Rng>(
    x: &Tensor<T>,
    ranking: &SaliencyRanking,
    spec: &MaskSpec,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let p = x.len();
    if ranking.len() != p {
        return Err(Error::Shape(format!(
            "mask_features: ranking over {} features, input has {p}",
            ranking.len()
        )));
    }
    if spec.k > p {
        return Err(Error::Parameter(format!(
            "mask_features: k={} exceeds feature count {p}",
            spec.k
        )));
    }
    if spec.k == p {
        return Err(Error::Parameter(
            "mask_features: k equals the feature count, fill range is undefined".into(),
        ));
    }
    let mut out = x.clone();
    if spec.k == 0 {
        return Ok(out);
    }
    let masked = match spec.direction {
        MaskDirection::Bottom => &ranking.indices()[..spec.k],
        MaskDirection::Top => &ranking.indices()[p - spec.k..],
    };
    let survivors = match spec.direction {
        MaskDirection::Bottom => &ranking.indices()[spec.k..],
        MaskDirection::Top => &ranking.indices()[..p - spec.k],
    };
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &i in survivors {
        let v = x.data()[i].to_f64();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    for &i in masked {
        let u: f64 = rng.random();
        out.data_mut()[i] = T::from_f64(lo + u * (hi - lo));
    }
    Ok(out)
}

/// Mid-gray sample used when the gradient is constant and min-max
/// normalization degenerates.
pub const PGM_MID_GRAY: u16 = 32768;

/// Quantizes |gradient| to 16-bit grayscale by min-max normalization.
/// A constant gradient maps to uniform mid-gray.
pub fn quantize_saliency(grad: &[f64], shape: (usize, usize)) -> Result<Vec<u16>> {
    let (h, w) = shape;
    if grad.len() != h * w {
        return Err(Error::Parameter(format!(
            "saliency export: {} gradients for a {h}x{w} image",
            grad.len()
        )));
    }
    let mags: Vec<f64> = grad.iter().map(|v| v.abs()).collect();
    let lo = mags.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mags.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![PGM_MID_GRAY; h * w]);
    }
    Ok(mags
        .iter()
        .map(|&m| ((m - lo) / (hi - lo) * 65535.0).round() as u16)
        .collect())
}

/// Writes a saliency map as a binary PGM (P5), 16-bit big-endian samples,
/// maxval 65535.
pub fn saliency_map_export<P: AsRef<Path>>(
    grad: &[f64],
    shape: (usize, usize),
    path: P,
) -> Result<()> {
    let (h, w) = shape;
    let samples = quantize_saliency(grad, shape)?;
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P5\n{w} {h}\n65535\n")?;
    for s in samples {
        out.write_all(&s.to_be_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a binary P5 PGM with maxval 65535 back into samples.
pub fn read_pgm16<P: AsRef<Path>>(path: P) -> Result<(usize, usize, Vec<u16>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let header_end = bytes
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .ok_or_else(|| Error::Format("pgm: truncated header".into()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Format("pgm: non-utf8 header".into()))?;
    let mut fields = header.split_ascii_whitespace();
    if fields.next() != Some("P5") {
        return Err(Error::Format("pgm: not a P5 file".into()));
    }
    let w: usize = fields
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format("pgm: bad width".into()))?;
    let h: usize = fields
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format("pgm: bad height".into()))?;
    let maxval: usize = fields
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format("pgm: bad maxval".into()))?;
    if maxval != 65535 {
        return Err(Error::Format(format!("pgm: expected maxval 65535, got {maxval}")));
    }
    let body = &bytes[header_end + 1..];
    if body.len() != w * h * 2 {
        return Err(Error::Format(format!(
            "pgm: expected {} sample bytes, got {}",
            w * h * 2,
            body.len()
        )));
    }
    let samples = body
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((h, w, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ranking_hand_case_and_ties() {
        let r = rank_features(&[0.9, 0.1, 0.5, 0.3], RankBy::Signed).unwrap();
        assert_eq!(r.indices(), &[1, 3, 2, 0]);

        let r = rank_features(&[0.5; 5], RankBy::Signed).unwrap();
        assert_eq!(r.indices(), &[0, 1, 2, 3, 4]);

        let r = rank_features(&[1.0, 2.0, 3.0], RankBy::Signed).unwrap();
        assert_eq!(r.indices(), &[0, 1, 2]);
    }

    #[test]
    fn ranking_by_magnitude() {
        let r = rank_features(&[-0.9, 0.1, -0.2], RankBy::Magnitude).unwrap();
        assert_eq!(r.indices(), &[1, 2, 0]);
    }

    #[test]
    fn ranking_rejects_nan() {
        assert!(matches!(
            rank_features(&[0.0, f64::NAN], RankBy::Signed),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn mask_zero_is_identity() {
        let x = Tensor::new(vec![4], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let r = rank_features(&[0.9, 0.1, 0.5, 0.3], RankBy::Signed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = mask_features(
            &x,
            &r,
            &MaskSpec {
                k: 0,
                direction: MaskDirection::Bottom,
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn mask_bottom_two_respects_survivor_range() {
        // grads [0.9, 0.1, 0.5, 0.3] -> ranking [1, 3, 2, 0]; bottom k=2
        // masks pixels 1 and 3, survivors {10, 30} bound the fill range.
        let x = Tensor::new(vec![4], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let r = rank_features(&[0.9, 0.1, 0.5, 0.3], RankBy::Signed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = mask_features(
            &x,
            &r,
            &MaskSpec {
                k: 2,
                direction: MaskDirection::Bottom,
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(y.data()[0], 10.0);
        assert_eq!(y.data()[2], 30.0);
        for i in [1, 3] {
            assert!((10.0..=30.0).contains(&y.data()[i]), "pixel {i}: {}", y.data()[i]);
        }
    }

    #[test]
    fn mask_constant_image_stays_constant() {
        let x = Tensor::full(vec![6], 0.75f64);
        let r = rank_features(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], RankBy::Signed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = mask_features(
            &x,
            &r,
            &MaskSpec {
                k: 3,
                direction: MaskDirection::Top,
            },
            &mut rng,
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn mask_rejects_degenerate_and_oversized_k() {
        let x = Tensor::full(vec![4], 1.0f64);
        let r = rank_features(&[0.1, 0.2, 0.3, 0.4], RankBy::Signed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in [4, 5] {
            assert!(matches!(
                mask_features(
                    &x,
                    &r,
                    &MaskSpec {
                        k,
                        direction: MaskDirection::Bottom
                    },
                    &mut rng
                ),
                Err(Error::Parameter(_))
            ));
        }
    }

    #[test]
    fn mask_is_deterministic_for_fixed_seed() {
        let x = Tensor::new(vec![5], vec![0.1, 0.9, 0.4, 0.6, 0.2]).unwrap();
        let r = rank_features(&[5.0, 4.0, 3.0, 2.0, 1.0], RankBy::Signed).unwrap();
        let spec = MaskSpec {
            k: 2,
            direction: MaskDirection::Bottom,
        };
        let a = mask_features(&x, &r, &spec, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        let b = mask_features(&x, &r, &spec, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn quantize_constant_gradient_is_mid_gray() {
        let q = quantize_saliency(&[0.3; 6], (2, 3)).unwrap();
        assert!(q.iter().all(|&v| v == PGM_MID_GRAY));
    }

    #[test]
    fn quantize_endpoints() {
        let q = quantize_saliency(&[0.0, 0.5, 2.0, 1.0], (2, 2)).unwrap();
        assert_eq!(q[0], 0);
        assert_eq!(q[2], 65535);
    }

    #[test]
    fn linear_model_input_gradient_is_the_weight_vector() {
        // f(x) = w·x with a single raw output; gradient = w exactly.
        let w = vec![0.5, -1.5, 2.0];
        let x = Tensor::new(vec![1, 3], vec![0.3, 0.7, -0.2]).unwrap();
        let wt = Tensor::new(vec![3, 1], w.clone()).unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(x, true);
        let wv = g.leaf(wt, false);
        let y = g.matmul(xv, wv).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(xv).unwrap().data(), w.as_slice());
    }
}
