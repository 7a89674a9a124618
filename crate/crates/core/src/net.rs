//! The full inpainting network around the reasoning module.
//!
//! Default wiring at depth 1:
//!
//! ```text
//! pconv0 (k7 s2) -> pconv1 (k7 s1) -> rfr -> deconv4 (k4 s2)
//!   -> pconv4 on cat(masked image, deconv4) -> conv9 -> conv10
//!   -> output conv on cat(pconv4, conv10)
//! ```
//!
//! Depths 2 and 3 insert stride-2 partial convolutions before the module and
//! the same number of stride-2 transposed convolutions after it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{Result, RfrError};
use crate::layers::{Activation, LayerKind, LayerSpec, NormMode};
use crate::partial_conv::MaskMap;
use crate::rfr_module::{ReasoningConfig, RecurrenceState, RfrModule, MODULE_CHANNELS};
use crate::tensor::{Shape, Tensor};

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Number of stride-2 stages before the reasoning module, 1..=3.
    pub depth: usize,
    /// Square input side used for shape tracing and validation.
    pub resolution: usize,
    /// Reasoning settings; its `channel_scale` applies to the whole network.
    pub reasoning: ReasoningConfig,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            depth: 1,
            resolution: 256,
            reasoning: ReasoningConfig::default(),
        }
    }
}

impl NetConfig {
    /// Small network used by tests and the toy training run.
    pub fn micro(resolution: usize, iter_num: usize) -> Self {
        NetConfig {
            depth: 1,
            resolution,
            reasoning: ReasoningConfig {
                iter_num,
                channel_scale: 8,
                ..ReasoningConfig::default()
            },
        }
    }

    pub fn channel_scale(&self) -> usize {
        self.reasoning.channel_scale
    }

    /// Input sides must be a multiple of this.
    pub fn resolution_multiple(&self) -> usize {
        16 << (self.depth.max(1) - 1)
    }

    pub fn validate(&self) -> Result<()> {
        self.reasoning.validate()?;
        if !(1..=3).contains(&self.depth) {
            return Err(RfrError::Config(format!("depth must be 1, 2 or 3, got {}", self.depth)));
        }
        self.check_resolution(self.resolution, self.resolution)
    }

    pub fn check_resolution(&self, h: usize, w: usize) -> Result<()> {
        let m = self.resolution_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(RfrError::Config(format!(
                "input {h}x{w} is not divisible by {m} (required at depth {})",
                self.depth
            )));
        }
        Ok(())
    }
}

/// Layer layout of the network; parameters live in a separate store.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub config: NetConfig,
    /// pconv0, pconv1, then any extra stride-2 stages.
    pub encoder: Vec<LayerSpec>,
    pub rfr: RfrModule,
    /// Extra stride-2 transposed convolutions, then deconv4.
    pub decoder: Vec<LayerSpec>,
    pub pconv4: LayerSpec,
    pub conv9: LayerSpec,
    pub conv10: LayerSpec,
    pub output: LayerSpec,
}

/// One row of the per-layer parameter breakdown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRow {
    pub name: String,
    pub kind: String,
    pub params: usize,
}

pub struct NetOutput {
    pub prediction: Var,
    /// `mask * input + (1 - mask) * prediction`
    pub composite: Var,
    pub recurrence: RecurrenceState,
    /// Mask handed to the reasoning module.
    pub module_mask: MaskMap,
}

impl Architecture {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let c = MODULE_CHANNELS / config.channel_scale();
        let half = c / 2;
        use Activation::{LeakyRelu, Relu};
        use LayerKind::{Conv, Deconv, PartialConv};
        let mut encoder = vec![
            LayerSpec::new("pconv0", PartialConv, IMAGE_CHANNELS, c, 7, 2, 3, true, Relu),
            LayerSpec::new("pconv1", PartialConv, c, c, 7, 1, 3, true, Relu),
        ];
        let mut decoder = Vec::new();
        for j in 1..config.depth {
            encoder.push(LayerSpec::new(format!("pconv_down{j}"), PartialConv, c, c, 3, 2, 1, true, Relu));
            decoder.push(LayerSpec::new(format!("deconv_up{j}"), Deconv, c, c, 4, 2, 1, true, LeakyRelu));
        }
        decoder.push(LayerSpec::new("deconv4", Deconv, c, c, 4, 2, 1, true, LeakyRelu));
        let rfr = RfrModule::new("rfr", config.reasoning.clone())?;
        Ok(Architecture {
            encoder,
            rfr,
            decoder,
            pconv4: LayerSpec::new("pconv4", PartialConv, IMAGE_CHANNELS + c, half, 3, 1, 1, false, LeakyRelu),
            conv9: LayerSpec::new("conv9", Conv, half, half, 3, 1, 1, true, LeakyRelu),
            conv10: LayerSpec::new("conv10", Conv, half, half, 3, 1, 1, true, LeakyRelu),
            output: LayerSpec::new("output", Conv, 2 * half, IMAGE_CHANNELS, 3, 1, 1, false, Activation::None),
            config,
        })
    }

    fn outer_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .chain([&self.pconv4, &self.conv9, &self.conv10, &self.output])
    }

    /// Every convolution-family layer, module layers included.
    pub fn layers(&self) -> Vec<&LayerSpec> {
        let mut all: Vec<&LayerSpec> = self.encoder.iter().collect();
        all.extend(self.rfr.layers());
        all.extend(&self.decoder);
        all.extend([&self.pconv4, &self.conv9, &self.conv10, &self.output]);
        all
    }

    /// Seeded parameter initialisation.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for l in &self.encoder {
            l.init(&mut store, &mut rng)?;
        }
        self.rfr.init(&mut store, &mut rng)?;
        for l in self.decoder.iter().chain([&self.pconv4, &self.conv9, &self.conv10, &self.output]) {
            l.init(&mut store, &mut rng)?;
        }
        Ok(store)
    }

    /// Per-layer trainable parameter counts in wiring order.
    pub fn param_rows(&self) -> Vec<LayerRow> {
        let row = |l: &LayerSpec| LayerRow {
            name: l.name.clone(),
            kind: l.kind.to_string(),
            params: l.param_count(),
        };
        let mut rows: Vec<LayerRow> = self.encoder.iter().map(row).collect();
        rows.extend(self.rfr.area.iter().chain(&self.rfr.encoder).map(row));
        if self.rfr.config.attention_enabled {
            rows.push(LayerRow {
                name: self.rfr.kca.name.clone(),
                kind: "attention".into(),
                params: self.rfr.kca.param_count(),
            });
        }
        rows.extend(self.rfr.decoder.iter().map(row));
        rows.extend(self.decoder.iter().map(row));
        rows.extend([&self.pconv4, &self.conv9, &self.conv10, &self.output].into_iter().map(row));
        rows
    }

    pub fn param_count(&self) -> usize {
        self.outer_layers().map(LayerSpec::param_count).sum::<usize>() + self.rfr.param_count()
    }

    /// Output shape of every stage for an `(n, 3, h, w)` input.
    pub fn trace_shapes(&self, n: usize, h: usize, w: usize) -> Result<Vec<(String, Shape)>> {
        self.config.check_resolution(h, w)?;
        let mut rows = Vec::new();
        let step = |l: &LayerSpec, s: Shape| -> Result<Shape> {
            Ok(Shape::new(s.n(), l.out_channels, l.out_size(s.h())?, l.out_size(s.w())?))
        };
        let mut s = Shape::new(n, IMAGE_CHANNELS, h, w);
        for l in &self.encoder {
            s = step(l, s)?;
            rows.push((l.name.clone(), s));
        }
        let inner = self.rfr.trace_shapes(s)?;
        s = inner.last().map(|r| r.1).unwrap_or(s);
        rows.extend(inner);
        for l in &self.decoder {
            s = step(l, s)?;
            rows.push((l.name.clone(), s));
        }
        for l in [&self.pconv4, &self.conv9, &self.conv10, &self.output] {
            s = step(l, s)?;
            rows.push((l.name.clone(), s));
        }
        Ok(rows)
    }

    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        img_masked: &Var,
        mask: &MaskMap,
        mode: NormMode,
    ) -> Result<NetOutput> {
        let s = img_masked.shape();
        if s.c() != IMAGE_CHANNELS {
            return Err(crate::error::dim_err!("expected a 3-channel image, got {s:?}"));
        }
        self.config.check_resolution(s.h(), s.w())?;

        let mut f = img_masked.clone();
        let mut m = mask.clone();
        for l in &self.encoder {
            let (nf, nm) = l.forward_partial(tape, store, &f, &m, mode)?;
            f = nf;
            m = nm;
        }
        let fs = f.shape();
        let module_mask = mask.resize_nearest(fs.h(), fs.w());
        let out = self.rfr.forward(tape, store, &f, &module_mask, mode)?;
        let mut f = out.merged;
        for l in &self.decoder {
            f = l.forward(tape, store, &f, mode)?;
        }

        let last = out.state.masks.last().expect("at least one recurrence");
        let filled = last.resize_nearest(s.h(), s.w()).union(mask)?;
        let cat = tape.concat(&[img_masked, &f])?;
        let (p4, _) = self.pconv4.forward_partial(tape, store, &cat, &filled, mode)?;
        let c9 = self.conv9.forward(tape, store, &p4, mode)?;
        let c10 = self.conv10.forward(tape, store, &c9, mode)?;
        let prediction = self.output.forward(tape, store, &tape.concat(&[&p4, &c10])?, mode)?;
        let composite = composite(tape, img_masked, &prediction, mask)?;
        Ok(NetOutput {
            prediction,
            composite,
            recurrence: out.state,
            module_mask,
        })
    }
}

/// `mask * input + (1 - mask) * prediction`.
pub fn composite(tape: &Tape, input: &Var, prediction: &Var, mask: &MaskMap) -> Result<Var> {
    let m = mask.tensor();
    let kept = tape.mul(input, &tape.constant(m.clone()))?;
    let filled = tape.mul(prediction, &tape.constant(m.map(|v| 1.0 - v)))?;
    tape.add(&kept, &filled)
}

/// An architecture together with its parameters.
#[derive(Debug, Clone)]
pub struct RfrNet {
    pub arch: Architecture,
    pub params: ParamStore,
}

impl RfrNet {
    pub fn build(config: NetConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::new(config)?;
        let params = arch.init_params(seed)?;
        Ok(RfrNet { arch, params })
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    /// Evaluation-mode forward pass returning `(prediction, composite)`.
    pub fn inpaint(&self, tape: &Tape, img_masked: &Tensor, mask: &MaskMap) -> Result<(Tensor, Tensor)> {
        let out = self
            .arch
            .forward(tape, &self.params, &tape.constant(img_masked.clone()), mask, NormMode::Eval)?;
        Ok((out.prediction.to_tensor(), out.composite.to_tensor()))
    }
}
