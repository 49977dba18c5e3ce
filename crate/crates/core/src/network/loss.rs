use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ScalePrediction;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_LAMBDA_P: f64 = 0.1;

const FEATURE_SEED: u64 = 0x5eed_f00d;
const FEATURE_CHANNELS: usize = 8;
const FEATURE_LAYERS: usize = 3;
const NORM_EPS: f64 = 1e-10;

/// Fixed random three-layer conv-relu feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualExtractor {
    layers: Vec<(Tensor, Tensor)>,
}

impl PerceptualExtractor {
    pub fn new(image_channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(FEATURE_SEED);
        let mut layers = Vec::with_capacity(FEATURE_LAYERS);
        let mut inp = image_channels;
        for _ in 0..FEATURE_LAYERS {
            let bound = (6.0 / (inp * 9) as f64).sqrt();
            let w = Tensor::uniform(&[FEATURE_CHANNELS, inp, 3, 3], -bound, bound, &mut rng);
            let b = Tensor::uniform(&[FEATURE_CHANNELS], -0.1, 0.1, &mut rng);
            layers.push((w, b));
            inp = FEATURE_CHANNELS;
        }
        Self { layers }
    }

    /// Channel-normalized activations of every layer.
    fn features(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (w, b) in &self.layers {
            let (w, b) = (tape.constant(w.clone()), tape.constant(b.clone()));
            let z = tape.conv2d(h, w, Some(b), 1, 1)?;
            h = tape.relu(z)?;
            out.push(tape.normalize_channels(h, NORM_EPS)?);
        }
        Ok(out)
    }

    /// Sum over layers of the per-pixel squared distance between
    /// unit-normalized features, averaged over pixels.
    pub fn distance(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        tape.value(a).check_same_shape(tape.value(b))?;
        let fa = self.features(tape, a)?;
        let fb = self.features(tape, b)?;
        let mut total: Option<Var> = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let d = tape.sub(x, y)?;
            let sq = tape.mul(d, d)?;
            let m = tape.mean(sq)?;
            let term = tape.scale(m, FEATURE_CHANNELS as f64)?;
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
        Ok(total.expect("at least one layer"))
    }
}

/// The scalar loss and its per-scale contributions.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub per_scale: Vec<f64>,
}

/// `sum_l L1(I_l, gt_l) + lambda_p * perceptual(I_l, gt_l)` with `gt_l`
/// the `l`-times 2x2 average-pooled ground truth.
pub fn loss_multiscale(
    tape: &mut Tape,
    preds: &[ScalePrediction],
    gt: Var,
    lambda_p: f64,
    extractor: &PerceptualExtractor,
) -> Result<LossTerms> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no predictions".into()));
    }
    let mut target = gt;
    let mut total: Option<Var> = None;
    let mut per_scale = Vec::with_capacity(preds.len());
    for (l, pr) in preds.iter().enumerate() {
        if l > 0 {
            target = tape.avgpool2(target)?;
        }
        if tape.value(pr.estimate).shape() != tape.value(target).shape() {
            return Err(Error::Shape(format!(
                "scale {l}: prediction {:?} vs target {:?}",
                tape.value(pr.estimate).shape(),
                tape.value(target).shape()
            )));
        }
        let mut term = tape.l1_mean(pr.estimate, target)?;
        if lambda_p != 0.0 {
            let p = extractor.distance(tape, pr.estimate, target)?;
            let p = tape.scale(p, lambda_p)?;
            term = tape.add(term, p)?;
        }
        per_scale.push(tape.value(term).item());
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(LossTerms {
        total: total.expect("nonempty"),
        per_scale,
    })
}
