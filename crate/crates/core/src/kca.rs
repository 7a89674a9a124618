//! Knowledge consistent attention.
//!
//! Scores are laid out `(n, h*w, h, w)`: the channel axis indexes the key
//! position `(x', y')` and the spatial axes the query `(x, y)`, so the
//! slice `score[b, :, y, x]` is the distribution of query `(x, y)` over
//! all keys.
//!
//! 1. cosine similarity between every pair of feature vectors,
//! 2. mean over an `s x s` neighbourhood of the query (in-bounds terms only),
//! 3. softmax over keys,
//! 4. for queries valid in the previous recurrence, a convex blend with the
//!    previous recurrence's final scores gated by `sigmoid(lambda_raw)`,
//! 5. feature reconstruction as the score-weighted sum over keys,
//! 6. 1x1 convolution of `concat(reconstructed, input)`.

use rand::Rng;

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{contract_err, dim_err, Result};
use crate::layers::{Activation, LayerKind, LayerSpec, NormMode};
use crate::partial_conv::MaskMap;
use crate::tensor::Tensor;

/// Lower bound on feature norms in the cosine similarity.
pub const NORM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KcaConfig {
    /// Side of the query smoothing window; odd.
    pub smoothing: usize,
}

impl Default for KcaConfig {
    fn default() -> Self {
        KcaConfig { smoothing: 3 }
    }
}

/// Scores and validity carried from one recurrence to the next.
#[derive(Debug, Clone)]
pub struct AttentionState {
    pub prev_score: Var,
    pub prev_valid: MaskMap,
    pub recurrence_index: usize,
}

pub fn cosine_scores(tape: &Tape, f: &Var) -> Var {
    let unit = tape.normalize_channels(f, NORM_FLOOR);
    tape.spatial_gram(&unit)
}

pub fn smooth_and_softmax(tape: &Tape, sim: &Var, side: usize) -> Result<Var> {
    if side % 2 == 0 {
        return Err(contract_err!("smoothing window must be odd, got {side}"));
    }
    let smoothed = if side == 1 { sim.clone() } else { tape.box_mean(sim, side) };
    Ok(tape.softmax_channels(&smoothed))
}

/// Blend current scores with the previous recurrence's scores.
pub fn blend_scores(
    tape: &Tape,
    score_prime: &Var,
    state: Option<&AttentionState>,
    recurrence_index: usize,
    lambda_raw: &Var,
) -> Result<Var> {
    if recurrence_index == 0 {
        return Ok(score_prime.clone());
    }
    let state = state.ok_or_else(|| {
        contract_err!("recurrence {recurrence_index} needs the previous attention state")
    })?;
    let (sp, pv) = (score_prime.shape(), state.prev_valid.shape());
    if state.prev_score.shape() != sp || pv.n() != sp.n() || pv.h() != sp.h() || pv.w() != sp.w() {
        return Err(dim_err!(
            "attention state {:?} / {:?} does not match scores {sp:?}",
            state.prev_score.shape(),
            pv
        ));
    }
    // score' + (1 - gate) * valid * (prev - score')
    let gate = tape.sigmoid(lambda_raw);
    let keep = tape.add_scalar(&tape.scale(&gate, -1.0), 1.0);
    let diff = tape.sub(&state.prev_score, score_prime)?;
    let masked = tape.mul(&diff, &tape.constant(state.prev_valid.tensor().clone()))?;
    let carried = tape.mul(&masked, &keep)?;
    tape.add(score_prime, &carried)
}

/// Score-weighted sum of features over all keys.
pub fn reconstruct(tape: &Tape, f: &Var, score: &Var) -> Result<Var> {
    tape.attend(score, f)
}

/// The attention block with its learnable gate and fusion convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Kca {
    pub name: String,
    pub channels: usize,
    pub config: KcaConfig,
}

impl Kca {
    pub fn new(name: impl Into<String>, channels: usize, config: KcaConfig) -> Self {
        Kca {
            name: name.into(),
            channels,
            config,
        }
    }

    pub fn lambda_name(&self) -> String {
        format!("{}.lambda", self.name)
    }

    pub fn fusion(&self) -> LayerSpec {
        LayerSpec::new(
            format!("{}.fuse", self.name),
            LayerKind::Conv,
            2 * self.channels,
            self.channels,
            1,
            1,
            0,
            false,
            Activation::None,
        )
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        store.insert_param(&self.lambda_name(), Tensor::scalar(0.0))?;
        self.fusion().init(store, rng)
    }

    pub fn param_count(&self) -> usize {
        1 + self.fusion().param_count()
    }

    /// Returns the fused features and the state for the next recurrence.
    /// `valid` is this recurrence's mask at attention resolution.
    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        f: &Var,
        valid: &MaskMap,
        state: Option<&AttentionState>,
        recurrence_index: usize,
    ) -> Result<(Var, AttentionState)> {
        let lambda = tape.param(store, &self.lambda_name())?;
        let sim = cosine_scores(tape, f);
        let score_prime = smooth_and_softmax(tape, &sim, self.config.smoothing)?;
        let score = blend_scores(tape, &score_prime, state, recurrence_index, &lambda)?;
        let rebuilt = reconstruct(tape, f, &score)?;
        let cat = tape.concat(&[&rebuilt, f])?;
        let fused = self.fusion().forward(tape, store, &cat, NormMode::Eval)?;
        let next = AttentionState {
            prev_score: score,
            prev_valid: valid.clone(),
            recurrence_index,
        };
        Ok((fused, next))
    }
}
