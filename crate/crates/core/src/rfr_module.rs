//! The recurrent feature reasoning module.
//!
//! Each recurrence identifies the ring of hole pixels that the current
//! features can reach (two stride-1 7x7 partial convolutions), fills it with
//! a shared encoder-decoder that carries the attention block, and records
//! the resulting feature map and mask. After `iter_num` recurrences the
//! recorded maps are merged. All recurrences share one set of parameters.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{contract_err, Result, RfrError};
use crate::kca::{AttentionState, Kca, KcaConfig};
use crate::layers::{Activation, LayerKind, LayerSpec, NormMode};
use crate::partial_conv::MaskMap;
use crate::tensor::{Shape, Tensor};

/// Channels entering and leaving the module at `channel_scale = 1`.
pub const MODULE_CHANNELS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MergeMode {
    /// Per-location mean over the recurrences in which the location was valid.
    #[default]
    Adaptive,
    Average,
    LastOnly,
}

impl FromStr for MergeMode {
    type Err = RfrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(MergeMode::Adaptive),
            "average" => Ok(MergeMode::Average),
            "last" | "last_only" => Ok(MergeMode::LastOnly),
            other => Err(RfrError::Config(format!(
                "unknown merge mode `{other}` (expected adaptive, average or last)"
            ))),
        }
    }
}

impl fmt::Display for MergeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeMode::Adaptive => "adaptive",
            MergeMode::Average => "average",
            MergeMode::LastOnly => "last",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningConfig {
    pub iter_num: usize,
    pub merge_mode: MergeMode,
    pub attention_enabled: bool,
    /// Divides every channel count; 1 reproduces the full-size module.
    pub channel_scale: usize,
    pub kca: KcaConfig,
}

impl Default for ReasoningConfig {
    fn default() -> Self {
        ReasoningConfig {
            iter_num: 6,
            merge_mode: MergeMode::Adaptive,
            attention_enabled: true,
            channel_scale: 1,
            kca: KcaConfig::default(),
        }
    }
}

impl ReasoningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iter_num == 0 {
            return Err(RfrError::Config("iter_num must be at least 1".into()));
        }
        if self.channel_scale == 0 || MODULE_CHANNELS % self.channel_scale != 0 {
            return Err(RfrError::Config(format!(
                "channel_scale {} must divide {MODULE_CHANNELS}",
                self.channel_scale
            )));
        }
        if self.kca.smoothing % 2 == 0 {
            return Err(RfrError::Config("attention smoothing window must be odd".into()));
        }
        Ok(())
    }
}

/// Per-recurrence outputs, in recurrence order.
#[derive(Debug, Clone, Default)]
pub struct RecurrenceState {
    pub features: Vec<Var>,
    pub masks: Vec<MaskMap>,
    /// Pixels newly filled in each recurrence.
    pub regions: Vec<MaskMap>,
}

impl RecurrenceState {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn push(&mut self, features: Var, mask: MaskMap, region: MaskMap) -> Result<()> {
        if let Some(first) = self.features.first() {
            if first.shape() != features.shape() || self.masks[0].shape() != mask.shape() {
                return Err(contract_err!("recurrence outputs must all share one shape"));
            }
        }
        self.features.push(features);
        self.masks.push(mask);
        self.regions.push(region);
        Ok(())
    }
}

/// Merge recorded feature maps.
pub fn merge_features(tape: &Tape, state: &RecurrenceState, mode: MergeMode) -> Result<Var> {
    if state.is_empty() {
        return Err(contract_err!("cannot merge an empty recurrence state"));
    }
    let n = state.len();
    match mode {
        MergeMode::LastOnly => Ok(state.features[n - 1].clone()),
        MergeMode::Average => {
            let mut acc = state.features[0].clone();
            for f in &state.features[1..] {
                acc = tape.add(&acc, f)?;
            }
            Ok(tape.scale(&acc, 1.0 / n as f64))
        }
        MergeMode::Adaptive => {
            let shape = state.masks[0].shape();
            let mut count = vec![0.0; shape.numel()];
            let mut acc: Option<Var> = None;
            for (f, m) in state.features.iter().zip(&state.masks) {
                for (c, &v) in count.iter_mut().zip(m.tensor().data()) {
                    *c += v;
                }
                let masked = tape.mul(f, &tape.constant(m.tensor().clone()))?;
                acc = Some(match acc {
                    None => masked,
                    Some(a) => tape.add(&a, &masked)?,
                });
            }
            let count = tape.constant(Tensor::from_vec(shape, count)?);
            tape.div_or_zero(&acc.expect("non-empty"), &count)
        }
    }
}

/// Output of one module pass.
pub struct RfrOutput {
    pub merged: Var,
    pub state: RecurrenceState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RfrModule {
    pub name: String,
    pub config: ReasoningConfig,
    pub channels: usize,
    pub area: [LayerSpec; 2],
    /// conv1..conv8
    pub encoder: Vec<LayerSpec>,
    pub kca: Kca,
    /// deconv1..deconv3
    pub decoder: Vec<LayerSpec>,
}

impl RfrModule {
    pub fn new(name: &str, config: ReasoningConfig) -> Result<Self> {
        config.validate()?;
        let c = MODULE_CHANNELS / config.channel_scale;
        let q = |s: &str| format!("{name}.{s}");
        use Activation::{LeakyRelu, Relu};
        use LayerKind::{Conv, Deconv, PartialConv};
        let area = [
            LayerSpec::new(q("pconv2"), PartialConv, c, c, 7, 1, 3, false, Activation::None),
            LayerSpec::new(q("pconv3"), PartialConv, c, c, 7, 1, 3, true, Relu),
        ];
        let encoder = vec![
            LayerSpec::new(q("conv1"), Conv, c, 2 * c, 3, 2, 1, true, Relu),
            LayerSpec::new(q("conv2"), Conv, 2 * c, 4 * c, 3, 2, 1, true, Relu),
            LayerSpec::new(q("conv3"), Conv, 4 * c, 8 * c, 3, 2, 1, true, Relu),
            LayerSpec::new(q("conv4"), Conv, 8 * c, 8 * c, 3, 1, 1, true, Relu),
            LayerSpec::new(q("conv5"), Conv, 8 * c, 8 * c, 3, 1, 1, true, Relu),
            LayerSpec::new(q("conv6"), Conv, 8 * c, 8 * c, 3, 1, 1, true, Relu),
            LayerSpec::new(q("conv7"), Conv, 16 * c, 8 * c, 3, 1, 1, true, LeakyRelu),
            LayerSpec::new(q("conv8"), Conv, 16 * c, 8 * c, 3, 1, 1, true, LeakyRelu),
        ];
        let decoder = vec![
            LayerSpec::new(q("deconv1"), Deconv, 16 * c, 4 * c, 4, 2, 1, true, LeakyRelu),
            LayerSpec::new(q("deconv2"), Deconv, 8 * c, 2 * c, 4, 2, 1, true, LeakyRelu),
            LayerSpec::new(q("deconv3"), Deconv, 4 * c, c, 4, 2, 1, true, LeakyRelu),
        ];
        let kca = Kca::new(q("kca"), 8 * c, config.kca);
        Ok(RfrModule {
            name: name.to_string(),
            config,
            channels: c,
            area,
            encoder,
            kca,
            decoder,
        })
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.area.iter().chain(&self.encoder).chain(&self.decoder)
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for l in self.area.iter().chain(&self.encoder) {
            l.init(store, rng)?;
        }
        if self.config.attention_enabled {
            self.kca.init(store, rng)?;
        }
        for l in &self.decoder {
            l.init(store, rng)?;
        }
        Ok(())
    }

    /// Scalar parameter count; independent of `iter_num`.
    pub fn param_count(&self) -> usize {
        let layers: usize = self.layers().map(LayerSpec::param_count).sum();
        layers + if self.config.attention_enabled { self.kca.param_count() } else { 0 }
    }

    /// Two cascaded partial convolutions. Returns features (zero in the
    /// remaining hole), the updated mask, and the newly valid region.
    pub fn area_identify(
        &self,
        tape: &Tape,
        store: &ParamStore,
        f: &Var,
        mask: &MaskMap,
        mode: NormMode,
    ) -> Result<(Var, MaskMap, MaskMap)> {
        let (f1, m1) = self.area[0].forward_partial(tape, store, f, mask, mode)?;
        let (f2, m2) = self.area[1].forward_partial(tape, store, &f1, &m1, mode)?;
        let f2 = tape.mul(&f2, &tape.constant(m2.tensor().clone()))?;
        let region = m2.newly_valid(mask)?;
        Ok((f2, m2, region))
    }

    /// The encoder-decoder with skip connections. `valid` is the current
    /// mask at module resolution; it is resized to the attention resolution.
    #[allow(clippy::too_many_arguments)]
    pub fn feature_reason(
        &self,
        tape: &Tape,
        store: &ParamStore,
        f: &Var,
        valid: &MaskMap,
        attn: Option<&AttentionState>,
        recurrence_index: usize,
        mode: NormMode,
    ) -> Result<(Var, Option<AttentionState>)> {
        let e = &self.encoder;
        let x1 = e[0].forward(tape, store, f, mode)?;
        let x2 = e[1].forward(tape, store, &x1, mode)?;
        let x3 = e[2].forward(tape, store, &x2, mode)?;
        let x4 = e[3].forward(tape, store, &x3, mode)?;
        let x5 = e[4].forward(tape, store, &x4, mode)?;
        let x6 = e[5].forward(tape, store, &x5, mode)?;
        let x7 = e[6].forward(tape, store, &tape.concat(&[&x6, &x5])?, mode)?;
        let x8 = e[7].forward(tape, store, &tape.concat(&[&x7, &x4])?, mode)?;
        let (xa, next) = if self.config.attention_enabled {
            let s = x8.shape();
            let small = valid.resize_nearest(s.h(), s.w());
            let (out, st) = self.kca.forward(tape, store, &x8, &small, attn, recurrence_index)?;
            (out, Some(st))
        } else {
            (x8, None)
        };
        let d = &self.decoder;
        let y1 = d[0].forward(tape, store, &tape.concat(&[&xa, &x3])?, mode)?;
        let y2 = d[1].forward(tape, store, &tape.concat(&[&y1, &x2])?, mode)?;
        let y3 = d[2].forward(tape, store, &tape.concat(&[&y2, &x1])?, mode)?;
        Ok((y3, next))
    }

    /// Run all recurrences and merge.
    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        f0: &Var,
        m0: &MaskMap,
        mode: NormMode,
    ) -> Result<RfrOutput> {
        let mut state = RecurrenceState::default();
        let mut f = f0.clone();
        let mut m = m0.clone();
        let mut attn: Option<AttentionState> = None;
        for i in 0..self.config.iter_num {
            let (f2, m2, region) = self.area_identify(tape, store, &f, &m, mode)?;
            let (reasoned, next) = self.feature_reason(tape, store, &f2, &m2, attn.as_ref(), i, mode)?;
            let fi = tape.mul(&reasoned, &tape.constant(m2.tensor().clone()))?;
            state.push(fi.clone(), m2.clone(), region)?;
            f = fi;
            m = m2;
            attn = next;
        }
        let merged = merge_features(tape, &state, self.config.merge_mode)?;
        Ok(RfrOutput { merged, state })
    }

    /// Shapes of every layer output for a module input of `input`.
    pub fn trace_shapes(&self, input: Shape) -> Result<Vec<(String, Shape)>> {
        let mut out = Vec::new();
        let mut s = input;
        for l in &self.area {
            s = Shape::new(s.n(), l.out_channels, l.out_size(s.h())?, l.out_size(s.w())?);
            out.push((l.name.clone(), s));
        }
        let mut skips = Vec::new();
        for l in &self.encoder {
            s = Shape::new(s.n(), l.out_channels, l.out_size(s.h())?, l.out_size(s.w())?);
            out.push((l.name.clone(), s));
            skips.push(s);
        }
        if self.config.attention_enabled {
            out.push((self.kca.name.clone(), s));
        }
        for l in &self.decoder {
            s = Shape::new(s.n(), l.out_channels, l.out_size(s.h())?, l.out_size(s.w())?);
            out.push((l.name.clone(), s));
        }
        out.push((format!("{}.merge", self.name), s));
        Ok(out)
    }
}
