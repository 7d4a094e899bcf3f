//! Extreme value machine probabilities.
//!
//! Every positive example of a class becomes an extreme vector. Its margin
//! distribution is a two-parameter Weibull fitted by maximum likelihood to the
//! smallest half-distances from that vector to the negatives. The probability
//! that a query belongs to the class is the Weibull survival function of its
//! distance to the closest extreme vector:
//!
//! ```text
//! psi(x) = exp(-(d(x_i, x) / scale_i) ^ shape_i),   x_i = argmin_i d(x_i, x)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{squared_distance, EmbeddingVector, VisualObject, VisualObjectId};

/// Shape used when the tail carries no spread information (one sample, or
/// all samples equal).
pub const DEGENERATE_SHAPE: f64 = 20.0;
pub const DEFAULT_TAIL_SIZE: usize = 16;

const SHAPE_TOLERANCE: f64 = 1e-8;
const MAX_ITERATIONS: usize = 200;
const MAX_SHAPE: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeibullModel {
    pub shape: f64,
    pub scale: f64,
}

impl WeibullModel {
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        if !(shape.is_finite() && shape > 0.0 && scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid(format!(
                "weibull parameters must be positive and finite (shape {shape}, scale {scale})"
            )));
        }
        Ok(Self { shape, scale })
    }

    /// `P(X > x)`.
    pub fn survival(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 1.0;
        }
        (-(x / self.scale).powf(self.shape)).exp()
    }

    pub fn log_likelihood(&self, samples: &[f64]) -> f64 {
        let (k, lambda) = (self.shape, self.scale);
        samples
            .iter()
            .map(|&x| {
                let z = x / lambda;
                k.ln() - lambda.ln() + (k - 1.0) * z.ln() - z.powf(k)
            })
            .sum()
    }
}

/// Maximum-likelihood Weibull fit.
///
/// The shape solves the profile-likelihood equation
/// `sum(x^k ln x) / sum(x^k) - 1/k - mean(ln x) = 0`, found by Newton steps
/// from `k = 1` kept inside a sign-change bracket (bisection when a step
/// leaves it). The scale is then `(mean(x^k))^(1/k)`.
///
/// Samples are normalised by their maximum first; the equation is invariant
/// to that and it keeps `x^k` from overflowing for steep tails.
pub fn fit_weibull(samples: &[f64]) -> Result<WeibullModel> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot fit a Weibull to zero samples"));
    }
    if let Some(bad) = samples.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
        return Err(Error::invalid(format!("Weibull samples must be positive, got {bad}")));
    }
    let max = samples.iter().copied().fold(f64::MIN, f64::max);
    let min = samples.iter().copied().fold(f64::MAX, f64::min);
    if max - min <= 1e-12 * max {
        return Ok(WeibullModel {
            shape: DEGENERATE_SHAPE,
            scale: max,
        });
    }

    let n = samples.len() as f64;
    let logs: Vec<f64> = samples.iter().map(|x| (x / max).ln()).collect();
    let mean_log = logs.iter().sum::<f64>() / n;

    // g(k) and g'(k); g is strictly increasing.
    let eval = |k: f64| -> (f64, f64) {
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for &l in &logs {
            let w = (k * l).exp();
            s0 += w;
            s1 += w * l;
            s2 += w * l * l;
        }
        let g = s1 / s0 - 1.0 / k - mean_log;
        let dg = (s2 * s0 - s1 * s1) / (s0 * s0) + 1.0 / (k * k);
        (g, dg)
    };

    let mut k = 1.0;
    let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
    for _ in 0..MAX_ITERATIONS {
        let (g, dg) = eval(k);
        if g < 0.0 {
            lo = lo.max(k);
        } else {
            hi = hi.min(k);
        }
        let mut next = k - g / dg;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * k.max(lo) };
        }
        if next > MAX_SHAPE {
            next = MAX_SHAPE;
        }
        let step = (next - k).abs();
        k = next;
        if step < SHAPE_TOLERANCE || k >= MAX_SHAPE {
            break;
        }
    }

    let mean_pow = logs.iter().map(|l| (k * l).exp()).sum::<f64>() / n;
    let scale = max * mean_pow.powf(1.0 / k);
    Ok(WeibullModel { shape: k, scale })
}

/// Where the zero-negatives default model gets its scale from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpenSpaceScale {
    Fixed(f64),
    /// `factor` times the RMS distance of the positives to their centroid
    /// (1.0 when the positives have no spread).
    FromSpread { factor: f64 },
}

impl Default for OpenSpaceScale {
    fn default() -> Self {
        OpenSpaceScale::FromSpread { factor: 10.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvmConfig {
    pub tail_size: usize,
    pub open_space: OpenSpaceScale,
}

impl Default for EvmConfig {
    fn default() -> Self {
        Self {
            tail_size: DEFAULT_TAIL_SIZE,
            open_space: OpenSpaceScale::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtremeVector {
    pub embedding: EmbeddingVector,
    pub weibull: WeibullModel,
    pub source: VisualObjectId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvmClassModel {
    /// Sorted by source visual object id.
    pub extreme_vectors: Vec<ExtremeVector>,
    pub tail_size: usize,
}

/// Fits one Weibull per positive on the `tail_size` smallest half-distances
/// to the negatives.
///
/// Negatives that coincide exactly with a positive carry no margin and are
/// skipped. A positive left without any negative gets the open-space default
/// (shape 1, scale from `config.open_space`).
pub fn fit_class_model(
    positives: &[&VisualObject],
    negatives: &[&VisualObject],
    config: &EvmConfig,
) -> Result<EvmClassModel> {
    if positives.is_empty() {
        return Err(Error::invalid("class model needs at least one positive"));
    }
    if config.tail_size == 0 {
        return Err(Error::invalid("tail size must be positive"));
    }
    let dim = positives[0].embedding.dim();
    if let Some(bad) = positives.iter().chain(negatives).find(|v| v.embedding.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.embedding.dim(),
        });
    }

    let mut order: Vec<&VisualObject> = positives.to_vec();
    order.sort_by_key(|v| v.id);

    let mut open_space: Option<WeibullModel> = None;
    let mut tail = Vec::with_capacity(negatives.len());
    let mut extreme_vectors = Vec::with_capacity(order.len());
    for pos in order {
        tail.clear();
        tail.extend(
            negatives
                .iter()
                .map(|neg| squared_distance(pos.embedding.as_slice(), neg.embedding.as_slice()))
                .filter(|&d| d > 0.0),
        );
        let weibull = if tail.is_empty() {
            *open_space.get_or_insert_with(|| open_space_model(positives, config.open_space))
        } else {
            let keep = config.tail_size.min(tail.len());
            if keep < tail.len() {
                tail.select_nth_unstable_by(keep - 1, f64::total_cmp);
                tail.truncate(keep);
            }
            tail.sort_by(f64::total_cmp);
            for d in tail.iter_mut() {
                *d = 0.5 * d.sqrt();
            }
            fit_weibull(&tail)?
        };
        extreme_vectors.push(ExtremeVector {
            embedding: pos.embedding.clone(),
            weibull,
            source: pos.id,
        });
    }
    Ok(EvmClassModel {
        extreme_vectors,
        tail_size: config.tail_size,
    })
}

fn open_space_model(positives: &[&VisualObject], scale: OpenSpaceScale) -> WeibullModel {
    let scale = match scale {
        OpenSpaceScale::Fixed(s) => s,
        OpenSpaceScale::FromSpread { factor } => {
            let dim = positives[0].embedding.dim();
            let n = positives.len() as f64;
            let mut centroid = vec![0.0; dim];
            for p in positives {
                for (c, x) in centroid.iter_mut().zip(p.embedding.as_slice()) {
                    *c += x / n;
                }
            }
            let rms = (positives
                .iter()
                .map(|p| squared_distance(p.embedding.as_slice(), &centroid))
                .sum::<f64>()
                / n)
                .sqrt();
            factor * if rms > 0.0 { rms } else { 1.0 }
        }
    };
    WeibullModel { shape: 1.0, scale }
}

impl EvmClassModel {
    /// The extreme vector closest to `x`; ties go to the lowest source id.
    pub fn nearest(&self, x: &EmbeddingVector) -> (&ExtremeVector, f64) {
        let mut best = &self.extreme_vectors[0];
        let mut best_d = f64::INFINITY;
        // Sorted by source id, so a strict comparison keeps the lowest id.
        for ev in &self.extreme_vectors {
            let d = squared_distance(ev.embedding.as_slice(), x.as_slice());
            if d < best_d {
                best = ev;
                best_d = d;
            }
        }
        (best, best_d.sqrt())
    }
}

/// Probability that `x` belongs to the class, from its closest extreme
/// vector.
pub fn inclusion_probability(model: &EvmClassModel, x: &EmbeddingVector) -> f64 {
    let (ev, d) = model.nearest(x);
    ev.weibull.survival(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncounterId;

    fn vo(id: u64, v: &[f64]) -> VisualObject {
        VisualObject {
            id: VisualObjectId(id),
            embedding: EmbeddingVector::new(v.to_vec()).unwrap(),
            frame_span: (0, 0),
            encounter_id: EncounterId("e".into()),
        }
    }

    #[test]
    fn degenerate_tail_uses_steep_fallback() {
        let m = fit_weibull(&[2.5; 7]).unwrap();
        assert_eq!(m, WeibullModel { shape: 20.0, scale: 2.5 });
        let single = fit_weibull(&[0.3]).unwrap();
        assert_eq!(single, WeibullModel { shape: 20.0, scale: 0.3 });
    }

    #[test]
    fn rejects_non_positive_samples() {
        assert!(fit_weibull(&[]).is_err());
        assert!(fit_weibull(&[1.0, 0.0]).is_err());
        assert!(fit_weibull(&[1.0, -2.0]).is_err());
        assert!(fit_weibull(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn two_point_fit_is_stationary() {
        let m = fit_weibull(&[1.0, 2.0]).unwrap();
        // Scale equation holds at the fitted shape.
        let expected_scale = ((1f64.powf(m.shape) + 2f64.powf(m.shape)) / 2.0).powf(1.0 / m.shape);
        assert!((m.scale - expected_scale).abs() < 1e-12);
        // Log-likelihood does not improve when nudging the shape.
        let ll = m.log_likelihood(&[1.0, 2.0]);
        for dk in [-1e-3, 1e-3] {
            let k = m.shape + dk;
            let s = ((1f64.powf(k) + 2f64.powf(k)) / 2.0).powf(1.0 / k);
            assert!(WeibullModel::new(k, s).unwrap().log_likelihood(&[1.0, 2.0]) <= ll);
        }
    }

    #[test]
    fn class_model_uses_half_distances() {
        let pos = vo(0, &[0.0]);
        let n1 = vo(1, &[2.0]);
        let n2 = vo(2, &[-4.0]);
        let m = fit_class_model(&[&pos], &[&n1, &n2], &EvmConfig { tail_size: 2, ..Default::default() })
            .unwrap();
        assert_eq!(m.extreme_vectors.len(), 1);
        assert_eq!(m.extreme_vectors[0].weibull, fit_weibull(&[1.0, 2.0]).unwrap());
    }

    #[test]
    fn tail_is_clipped_to_smallest() {
        let pos = vo(0, &[0.0, 0.0]);
        let negs: Vec<_> = (1..=5).map(|i| vo(i, &[2.0 * i as f64, 0.0])).collect();
        let refs: Vec<_> = negs.iter().collect();
        let m = fit_class_model(&[&pos], &refs, &EvmConfig { tail_size: 3, ..Default::default() })
            .unwrap();
        assert_eq!(m.extreme_vectors[0].weibull, fit_weibull(&[1.0, 2.0, 3.0]).unwrap());
    }

    #[test]
    fn zero_negatives_get_open_space_default() {
        let a = vo(0, &[0.0, 0.0]);
        let b = vo(1, &[3.0, 4.0]);
        let cfg = EvmConfig {
            tail_size: 4,
            open_space: OpenSpaceScale::Fixed(7.0),
        };
        let m = fit_class_model(&[&a, &b], &[], &cfg).unwrap();
        for ev in &m.extreme_vectors {
            assert_eq!(ev.weibull, WeibullModel { shape: 1.0, scale: 7.0 });
        }
        // RMS distance to the centroid is 2.5.
        let m = fit_class_model(&[&a, &b], &[], &EvmConfig::default()).unwrap();
        assert!((m.extreme_vectors[0].weibull.scale - 25.0).abs() < 1e-12);
    }

    #[test]
    fn inclusion_probability_formula() {
        let m = EvmClassModel {
            extreme_vectors: vec![ExtremeVector {
                embedding: EmbeddingVector::new(vec![0.0, 0.0]).unwrap(),
                weibull: WeibullModel { shape: 1.0, scale: 2.0 },
                source: VisualObjectId(0),
            }],
            tail_size: 1,
        };
        let at = |x: f64| inclusion_probability(&m, &EmbeddingVector::new(vec![x, 0.0]).unwrap());
        assert_eq!(at(0.0), 1.0);
        assert!((at(2.0) - (-1f64).exp()).abs() < 1e-15);
        assert!((at(2.0) - 0.367879).abs() < 1e-6);
        assert!(at(1.0) > at(2.0) && at(2.0) > at(3.0));
    }

    #[test]
    fn nearest_breaks_ties_by_lowest_source() {
        let a = vo(5, &[1.0, 0.0]);
        let b = vo(3, &[-1.0, 0.0]);
        let n = vo(9, &[0.0, 10.0]);
        let m = fit_class_model(&[&a, &b], &[&n], &EvmConfig::default()).unwrap();
        let (ev, d) = m.nearest(&EmbeddingVector::new(vec![0.0, 0.0]).unwrap());
        assert_eq!(ev.source, VisualObjectId(3));
        assert_eq!(d, 1.0);
    }

    #[test]
    fn coincident_negatives_are_skipped() {
        let a = vo(0, &[1.0, 1.0]);
        let same = vo(1, &[1.0, 1.0]);
        let far = vo(2, &[1.0, 5.0]);
        let cfg = EvmConfig::default();
        let m = fit_class_model(&[&a], &[&same, &far], &cfg).unwrap();
        assert_eq!(m.extreme_vectors[0].weibull, WeibullModel { shape: 20.0, scale: 2.0 });
        let m = fit_class_model(&[&a], &[&same], &cfg).unwrap();
        assert_eq!(m.extreme_vectors[0].weibull.shape, 1.0);
    }
}
