//! The four training objectives and their weighted total.
//!
//! * illumination loss — summed squared error over both predicted
//!   environment maps,
//! * feature-consistency loss — mean squared difference between the
//!   object's non-illumination bottleneck features under two lightings,
//! * perceptual loss — MSE between frozen-extractor features of prediction
//!   and target, for both environment maps and the relit image,
//! * adversarial loss — the classic real/fake log objective with a
//!   non-saturating generator term.
//!
//! Each term is an ordinary tape expression, so gradients flow to whatever
//! inputs require them. Disabled terms never enter the total: they are gated
//! out structurally, not multiplied by zero.

use ndarray::ArrayD;

use crate::autograd::{ops, Scalar, Tape, Tensor};
use crate::data::{AblationFlags, LossWeights};
use crate::nn::{he_normal, param_seed};
use crate::{Error, Result};

/// Clamp bound applied to discriminator scores before logarithms.
pub const ADV_EPS: f64 = 1e-7;
/// Smallest spatial side the feature extractor accepts; smaller inputs are
/// nearest-upsampled per dimension.
pub const EXTRACTOR_MIN_SIDE: usize = 8;

// ---------------------------------------------------------------------------
// Frozen feature extractor
// ---------------------------------------------------------------------------

enum ExtractorLayer {
    /// 3x3 same-padded convolution (no bias) followed by ReLU.
    Conv { weight: ArrayD<f32> },
    /// 2x2 max pooling; the output is also a tap point.
    Pool,
}

/// Frozen convolutional stack for perceptual features: 3x3 conv pairs/triples
/// at widths 64, 128 and 256, each group closed by a 2x2 max pool whose
/// output is a tap. Weights are drawn once from a seeded initializer and
/// never trained, so the features define a fixed metric — the same topology
/// can host externally trained weights via [`FeatureExtractor::with_weights`].
pub struct FeatureExtractor {
    layers: Vec<ExtractorLayer>,
}

impl FeatureExtractor {
    /// Build the extractor with seeded frozen weights.
    pub fn new(seed: u64) -> Self {
        let plan: [(usize, usize, bool); 8] = [
            (3, 64, false),
            (64, 64, true),
            (64, 128, false),
            (128, 128, true),
            (128, 256, false),
            (256, 256, false),
            (256, 256, true),
            (0, 0, false),
        ];
        let mut layers = Vec::new();
        let mut index = 0;
        for &(c_in, c_out, pool_after) in plan.iter().take(7) {
            index += 1;
            let name = format!("extractor.c{index}.weight");
            let weight =
                he_normal::<f32>(&[c_out, c_in, 3, 3], c_in * 9, param_seed(seed, &name));
            layers.push(ExtractorLayer::Conv { weight });
            if pool_after {
                layers.push(ExtractorLayer::Pool);
            }
        }
        FeatureExtractor { layers }
    }

    /// Feature maps at each tap (after every pooling step).
    pub fn features<S: Scalar>(&self, x: &Tensor<S>) -> Vec<Tensor<S>> {
        let tape = x.tape.clone();
        let shape = x.shape();
        assert_eq!(shape[0], 3, "extractor expects a 3-channel input, got {shape:?}");
        let (h, w) = (shape[1], shape[2]);
        let mut y = if h < EXTRACTOR_MIN_SIDE || w < EXTRACTOR_MIN_SIDE {
            ops::resize_nearest(x, h.max(EXTRACTOR_MIN_SIDE), w.max(EXTRACTOR_MIN_SIDE))
        } else {
            x.clone()
        };
        let mut taps = Vec::with_capacity(3);
        for layer in &self.layers {
            match layer {
                ExtractorLayer::Conv { weight } => {
                    let w_t = tape.constant(weight.mapv(|v| S::from_f64(v as f64)));
                    y = ops::relu(&ops::conv2d(&y, &w_t, None, crate::autograd::ops::ConvSpec::same(3)));
                }
                ExtractorLayer::Pool => {
                    y = ops::max_pool2(&y);
                    taps.push(y.clone());
                }
            }
        }
        taps
    }

    /// Materialized features of a constant input — for caching targets.
    pub fn features_raw(&self, tape: &Tape<f32>, image: &ndarray::Array3<f32>) -> Vec<ArrayD<f32>> {
        let x = tape.constant(image.clone().into_dyn());
        self.features(&x).iter().map(|t| t.to_array()).collect()
    }
}

// ---------------------------------------------------------------------------
// Loss terms
// ---------------------------------------------------------------------------

/// Illumination loss: summed squared error of the object map plus the same
/// for the background map.
pub fn l_illu<S: Scalar>(
    pred_obj: &Tensor<S>,
    gt_obj: &Tensor<S>,
    pred_bg: &Tensor<S>,
    gt_bg: &Tensor<S>,
) -> Tensor<S> {
    pred_obj.sum_sq_diff(gt_obj).add_t(&pred_bg.sum_sq_diff(gt_bg))
}

/// Feature-consistency loss: mean squared difference between two
/// non-illumination object features of the same object under different
/// lights.
pub fn l_nonillu<S: Scalar>(f1: &Tensor<S>, f2: &Tensor<S>) -> Tensor<S> {
    f1.mse(f2)
}

/// Perceptual distance of one prediction against precomputed target
/// features: the sum of per-tap feature MSEs.
pub fn l_per_slot<S: Scalar>(
    extractor: &FeatureExtractor,
    pred: &Tensor<S>,
    target_features: &[Tensor<S>],
) -> Tensor<S> {
    let pred_features = extractor.features(pred);
    assert_eq!(pred_features.len(), target_features.len(), "tap count mismatch");
    let mut total: Option<Tensor<S>> = None;
    for (p, t) in pred_features.iter().zip(target_features) {
        let term = p.mse(t);
        total = Some(match total {
            None => term,
            Some(acc) => acc.add_t(&term),
        });
    }
    total.expect("extractor has at least one tap")
}

/// Perceptual loss over (prediction, target) pairs — conventionally the two
/// environment maps and the relit image. Targets get their features computed
/// on the spot; use [`l_per_slot`] with cached features in hot loops.
pub fn l_per<S: Scalar>(
    extractor: &FeatureExtractor,
    slots: &[(&Tensor<S>, &Tensor<S>)],
) -> Tensor<S> {
    assert!(!slots.is_empty(), "perceptual loss needs at least one slot");
    let mut total: Option<Tensor<S>> = None;
    for (pred, target) in slots {
        let target_features = extractor.features(target);
        let term = l_per_slot(extractor, pred, &target_features);
        total = Some(match total {
            None => term,
            Some(acc) => acc.add_t(&term),
        });
    }
    total.expect("at least one slot")
}

/// Adversarial losses from the two discriminator scores:
/// `d_loss = -[ln d_real + ln(1 - d_fake)]`, `g_loss = -ln d_fake`
/// (non-saturating). Scores are clamped to `[ADV_EPS, 1 - ADV_EPS]` so exact
/// 0/1 scores stay finite.
pub fn l_adv<S: Scalar>(d_real: &Tensor<S>, d_fake: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
    let real = ops::clamp(d_real, ADV_EPS, 1.0 - ADV_EPS);
    let fake = ops::clamp(d_fake, ADV_EPS, 1.0 - ADV_EPS);
    let one_minus_fake = ops::scale(&fake, -1.0).add_t(&ones_like(&fake));
    let d_loss = ops::scale(&ops::ln(&real).add_t(&ops::ln(&one_minus_fake)), -1.0);
    (d_loss, l_adv_generator(d_fake))
}

/// Generator side alone: `-ln d_fake` after clamping. Used when the
/// discriminator's real-image score is not on the same tape.
pub fn l_adv_generator<S: Scalar>(d_fake: &Tensor<S>) -> Tensor<S> {
    let fake = ops::clamp(d_fake, ADV_EPS, 1.0 - ADV_EPS);
    ops::scale(&ops::ln(&fake), -1.0)
}

fn ones_like<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.tape.constant(ArrayD::from_elem(x.shape().to_vec(), S::from_f64(1.0)))
}

/// Closed-form adversarial losses on plain scalars (reporting, oracles).
pub fn l_adv_scalars(d_real: f64, d_fake: f64) -> (f64, f64) {
    let r = d_real.clamp(ADV_EPS, 1.0 - ADV_EPS);
    let f = d_fake.clamp(ADV_EPS, 1.0 - ADV_EPS);
    (-(r.ln() + (1.0 - f).ln()), -f.ln())
}

/// Weighted total. Terms whose flag is off contribute exactly zero: they are
/// omitted from the expression, not scaled away.
pub fn l_total<S: Scalar>(
    illu: &Tensor<S>,
    nonillu: Option<&Tensor<S>>,
    per: Option<&Tensor<S>>,
    adv_g: Option<&Tensor<S>>,
    weights: &LossWeights,
    flags: &AblationFlags,
) -> Result<Tensor<S>> {
    let mut total = ops::scale(illu, weights.beta_illu);
    if flags.use_l_nonillu {
        let term = nonillu.ok_or_else(|| {
            Error::Config("use_l_nonillu is set but no feature-consistency term was supplied".into())
        })?;
        total = total.add_t(&ops::scale(term, weights.beta_nonillu));
    }
    if flags.use_l_per {
        let term = per.ok_or_else(|| {
            Error::Config("use_l_per is set but no perceptual term was supplied".into())
        })?;
        total = total.add_t(&ops::scale(term, weights.beta_per));
    }
    if flags.use_l_adv {
        let term = adv_g.ok_or_else(|| {
            Error::Config("use_l_adv is set but no adversarial term was supplied".into())
        })?;
        total = total.add_t(&ops::scale(term, weights.beta_adv));
    }
    Ok(total)
}

/// Scalar mirror of [`l_total`] for reports and oracles.
pub fn total_of(
    illu: f64,
    nonillu: f64,
    per: f64,
    adv_g: f64,
    weights: &LossWeights,
    flags: &AblationFlags,
) -> f64 {
    let mut total = weights.beta_illu * illu;
    if flags.use_l_nonillu {
        total += weights.beta_nonillu * nonillu;
    }
    if flags.use_l_per {
        total += weights.beta_per * per;
    }
    if flags.use_l_adv {
        total += weights.beta_adv * adv_g;
    }
    total
}

/// Per-step loss readout. Gated-off terms are reported as exactly `0.0`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l_illu: f64,
    pub l_nonillu: f64,
    pub l_per: f64,
    pub l_adv_g: f64,
    pub l_adv_d: f64,
    pub l_total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_illu, self.l_nonillu, self.l_per, self.l_adv_g, self.l_adv_d, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("l_illu", self.l_illu),
            ("l_nonillu", self.l_nonillu),
            ("l_per", self.l_per),
            ("l_adv_g", self.l_adv_g),
            ("l_adv_d", self.l_adv_d),
            ("l_total", self.l_total),
        ]
        .iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| *name)
    }
}
