//! Training objective: masked l1 terms plus perceptual and style terms over
//! a small fixed feature extractor.

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{dim_err, Result};
use crate::layers::{Activation, LayerKind, LayerSpec, NormMode};
use crate::partial_conv::MaskMap;
use crate::tensor::Tensor;

/// Output channels of the three extractor stages.
pub const EXTRACTOR_CHANNELS: [usize; 3] = [8, 16, 32];

/// Three fixed `conv3x3 -> ReLU -> 2x2 average pool` stages. Parameters are
/// seeded and frozen, so they enter every tape as constants.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub stages: Vec<LayerSpec>,
    pub params: ParamStore,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &cout) in EXTRACTOR_CHANNELS.iter().enumerate() {
            let spec = LayerSpec::new(
                format!("extractor.stage{}", i + 1),
                LayerKind::Conv,
                cin,
                cout,
                3,
                1,
                1,
                false,
                Activation::Relu,
            );
            spec.init(&mut params, &mut rng)?;
            stages.push(spec);
            cin = cout;
        }
        let names: Vec<String> = params.names().cloned().collect();
        for n in names {
            params.set_frozen(&n, true)?;
        }
        Ok(FeatureExtractor { stages, params })
    }

    /// Pooled features of every stage, at 1/2, 1/4 and 1/8 resolution.
    pub fn features(&self, tape: &Tape, img: &Var) -> Result<Vec<Var>> {
        let mut x = img.clone();
        let mut out = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            x = tape.avg_pool2(&s.forward(tape, &self.params, &x, NormMode::Eval)?);
            out.push(x.clone());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub hole: f64,
    pub valid: f64,
    pub perceptual: f64,
    pub style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            hole: 6.0,
            valid: 1.0,
            perceptual: 0.1,
            style: 180.0,
        }
    }
}

/// Scalar values of the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub hole: f64,
    pub valid: f64,
    pub perceptual: f64,
    pub style: f64,
}

impl LossWeights {
    pub fn total(&self, c: &LossComponents) -> f64 {
        self.hole * c.hole + self.valid * c.valid + self.style * c.style + self.perceptual * c.perceptual
    }
}

/// Differentiable loss terms of one forward pass.
pub struct LossTerms {
    pub total: Var,
    pub hole: Var,
    pub valid: Var,
    pub perceptual: Var,
    pub style: Var,
}

impl LossTerms {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            hole: self.hole.value().item(),
            valid: self.valid.value().item(),
            perceptual: self.perceptual.value().item(),
            style: self.style.value().item(),
        }
    }
}

/// Mean over all elements of `|(1-M)(pred-gt)|` and `|M(pred-gt)|`.
pub fn l1_region_losses(tape: &Tape, pred: &Var, gt: &Var, mask: &MaskMap) -> Result<(Var, Var)> {
    if pred.shape() != gt.shape() {
        return Err(dim_err!("prediction {:?} and target {:?} differ", pred.shape(), gt.shape()));
    }
    let diff = tape.sub(pred, gt)?;
    let m = tape.constant(mask.tensor().clone());
    let valid_part = tape.mul(&diff, &m)?;
    let hole_part = tape.sub(&diff, &valid_part)?;
    Ok((tape.mean(&tape.abs(&hole_part)), tape.mean(&tape.abs(&valid_part))))
}

/// Sum over stages of the mean absolute feature difference.
pub fn perceptual_loss(tape: &Tape, pred_feats: &[Var], gt_feats: &[Var]) -> Result<Var> {
    let mut terms = Vec::new();
    for (p, g) in pred_feats.iter().zip(gt_feats) {
        terms.push(tape.mean(&tape.abs(&tape.sub(g, p)?)));
    }
    let refs: Vec<(f64, &Var)> = terms.iter().map(|t| (1.0, t)).collect();
    tape.weighted_sum(&refs)
}

/// Sum over stages of `mean |G_gt - G_pred| / (h w c)`, where `G` is the
/// unnormalised channel Gram matrix and the mean runs over its `c*c`
/// entries (and the batch).
pub fn style_loss(tape: &Tape, pred_feats: &[Var], gt_feats: &[Var]) -> Result<Var> {
    let mut terms = Vec::new();
    for (p, g) in pred_feats.iter().zip(gt_feats) {
        let s = p.shape();
        let norm = 1.0 / (s.c() * s.h() * s.w()) as f64;
        let d = tape.sub(&tape.channel_gram(g), &tape.channel_gram(p))?;
        terms.push(tape.scale(&tape.mean(&tape.abs(&d)), norm));
    }
    let refs: Vec<(f64, &Var)> = terms.iter().map(|t| (1.0, t)).collect();
    tape.weighted_sum(&refs)
}

/// All four terms and their weighted total for a prediction against `gt`.
pub fn compute_losses(
    tape: &Tape,
    extractor: &FeatureExtractor,
    pred: &Var,
    gt: &Tensor,
    mask: &MaskMap,
    weights: &LossWeights,
) -> Result<LossTerms> {
    let gt = tape.constant(gt.clone());
    let (hole, valid) = l1_region_losses(tape, pred, &gt, mask)?;
    let pf = extractor.features(tape, pred)?;
    let gf = extractor.features(tape, &gt)?;
    let perceptual = perceptual_loss(tape, &pf, &gf)?;
    let style = style_loss(tape, &pf, &gf)?;
    let total = tape.weighted_sum(&[
        (weights.hole, &hole),
        (weights.valid, &valid),
        (weights.style, &style),
        (weights.perceptual, &perceptual),
    ])?;
    Ok(LossTerms {
        total,
        hole,
        valid,
        perceptual,
        style,
    })
}
