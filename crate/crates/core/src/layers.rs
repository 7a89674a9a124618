//! Layer descriptors shared by the network, the reasoning module and the
//! loss feature extractor.

use std::fmt;

use rand::Rng;

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::Result;
use crate::ops;
use crate::partial_conv::{self, MaskMap};
use crate::tensor::{Precision, Tensor};

/// Negative slope of every leaky ReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    LeakyRelu,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::None => "None",
            Activation::Relu => "ReLU",
            Activation::LeakyRelu => "Leaky_ReLU",
        })
    }
}

/// How batch-normalisation layers behave during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormMode {
    /// Batch statistics; running statistics are updated.
    #[default]
    Train,
    /// Running statistics.
    Eval,
    /// Running statistics, and gamma/beta receive no gradient.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    PartialConv,
    Conv,
    Deconv,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::PartialConv => "partial_conv",
            LayerKind::Conv => "conv",
            LayerKind::Deconv => "deconv",
        })
    }
}

/// One convolution-family layer with optional batch norm and activation.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub norm: bool,
    pub activation: Activation,
}

impl LayerSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        kind: LayerKind,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        norm: bool,
        activation: Activation,
    ) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            norm,
            activation,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    fn bn_name(&self, field: &str) -> String {
        format!("{}.bn.{field}", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        match self.kind {
            LayerKind::Deconv => [self.in_channels, self.out_channels, self.kernel, self.kernel],
            _ => [self.out_channels, self.in_channels, self.kernel, self.kernel],
        }
    }

    /// Weights plus bias plus batch-norm gamma and beta.
    pub fn param_count(&self) -> usize {
        let weights = self.in_channels * self.out_channels * self.kernel * self.kernel;
        let bn = if self.norm { 2 * self.out_channels } else { 0 };
        weights + self.out_channels + bn
    }

    pub fn out_size(&self, input: usize) -> Result<usize> {
        match self.kind {
            LayerKind::Deconv => ops::conv_transpose_out_size(input, self.kernel, self.stride, self.padding),
            _ => ops::conv_out_size(input, self.kernel, self.stride, self.padding),
        }
    }

    /// Kaiming-uniform (fan-in) weights, zero bias, unit gamma, zero beta.
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let shape = self.weight_shape();
        let fan_in = shape[1] * shape[2] * shape[3];
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = Tensor::uniform(shape, -bound, bound, rng).rounded(Precision::Single);
        store.insert_param(&self.weight_name(), w)?;
        store.insert_param(&self.bias_name(), Tensor::vector(vec![0.0; self.out_channels]))?;
        if self.norm {
            let c = self.out_channels;
            store.insert_param(&self.bn_name("gamma"), Tensor::vector(vec![1.0; c]))?;
            store.insert_param(&self.bn_name("beta"), Tensor::vector(vec![0.0; c]))?;
            store.insert_buffer(&self.bn_name("running_mean"), Tensor::vector(vec![0.0; c]))?;
            store.insert_buffer(&self.bn_name("running_var"), Tensor::vector(vec![1.0; c]))?;
        }
        Ok(())
    }

    /// Names of the batch-norm affine parameters, if any.
    pub fn norm_param_names(&self) -> Vec<String> {
        if self.norm {
            vec![self.bn_name("gamma"), self.bn_name("beta")]
        } else {
            Vec::new()
        }
    }

    /// Convolution or transposed convolution followed by norm and activation.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &Var, mode: NormMode) -> Result<Var> {
        let w = tape.param(store, &self.weight_name())?;
        let b = tape.param(store, &self.bias_name())?;
        let y = match self.kind {
            LayerKind::Deconv => tape.conv_transpose2d(x, &w, Some(&b), self.stride, self.padding)?,
            _ => tape.conv2d(x, &w, Some(&b), self.stride, self.padding)?,
        };
        self.post(tape, store, &y, mode)
    }

    /// Partial convolution followed by norm and activation.
    pub fn forward_partial(
        &self,
        tape: &Tape,
        store: &ParamStore,
        x: &Var,
        mask: &MaskMap,
        mode: NormMode,
    ) -> Result<(Var, MaskMap)> {
        let w = tape.param(store, &self.weight_name())?;
        let b = tape.param(store, &self.bias_name())?;
        let (y, new_mask) = partial_conv::partial_conv(tape, x, mask, &w, &b, self.stride, self.padding)?;
        Ok((self.post(tape, store, &y, mode)?, new_mask))
    }

    fn post(&self, tape: &Tape, store: &ParamStore, y: &Var, mode: NormMode) -> Result<Var> {
        let y = if self.norm {
            batch_norm_layer(tape, store, &format!("{}.bn", self.name), y, mode)?
        } else {
            y.clone()
        };
        Ok(activate(tape, &y, self.activation))
    }
}

pub fn activate(tape: &Tape, x: &Var, act: Activation) -> Var {
    match act {
        Activation::None => x.clone(),
        Activation::Relu => tape.relu(x),
        Activation::LeakyRelu => tape.leaky_relu(x, LEAKY_SLOPE),
    }
}

/// Batch normalisation reading `{prefix}.gamma`, `.beta`, `.running_mean`
/// and `.running_var` from `store`.
pub fn batch_norm_layer(
    tape: &Tape,
    store: &ParamStore,
    prefix: &str,
    x: &Var,
    mode: NormMode,
) -> Result<Var> {
    let (g_name, b_name) = (format!("{prefix}.gamma"), format!("{prefix}.beta"));
    let (rm_name, rv_name) = (format!("{prefix}.running_mean"), format!("{prefix}.running_var"));
    let (gamma, beta) = match mode {
        NormMode::Frozen => (
            tape.constant(store.value(&g_name)?.clone()),
            tape.constant(store.value(&b_name)?.clone()),
        ),
        _ => (tape.param(store, &g_name)?, tape.param(store, &b_name)?),
    };
    match mode {
        NormMode::Train => {
            let (y, batch) = tape.batch_norm(x, &gamma, &beta, None)?;
            let (mean, var) = batch.expect("training mode returns batch statistics");
            let s = x.shape();
            let count = (s.n() * s.h() * s.w()) as f64;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let old_mean = tape.buffer(store, &rm_name)?;
            let old_var = tape.buffer(store, &rv_name)?;
            let m = ops::BN_MOMENTUM;
            let new_mean: Vec<f64> = old_mean
                .data()
                .iter()
                .zip(&mean)
                .map(|(o, b)| (1.0 - m) * o + m * b)
                .collect();
            let new_var: Vec<f64> = old_var
                .data()
                .iter()
                .zip(&var)
                .map(|(o, b)| (1.0 - m) * o + m * b * unbias)
                .collect();
            tape.update_buffer(&rm_name, Tensor::vector(new_mean));
            tape.update_buffer(&rv_name, Tensor::vector(new_var));
            Ok(y)
        }
        NormMode::Eval | NormMode::Frozen => {
            let rm = tape.buffer(store, &rm_name)?;
            let rv = tape.buffer(store, &rv_name)?;
            Ok(tape.batch_norm(x, &gamma, &beta, Some((&rm, &rv)))?.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bn_store(c: usize) -> ParamStore {
        let spec = LayerSpec::new("l", LayerKind::Conv, c, c, 1, 1, 0, true, Activation::None);
        let mut store = ParamStore::new();
        spec.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        store
    }

    #[test]
    fn eval_identity_stats() {
        let store = bn_store(2);
        let tape = Tape::new(Precision::Double);
        let x = Tensor::from_vec([1, 2, 1, 2], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let y = batch_norm_layer(&tape, &store, "l.bn", &tape.constant(x.clone()), NormMode::Eval).unwrap();
        for (a, b) in y.value().data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs());
        }
    }

    #[test]
    fn train_normalises_two_values() {
        let store = bn_store(1);
        let tape = Tape::new(Precision::Double);
        let x = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let y = batch_norm_layer(&tape, &store, "l.bn", &tape.constant(x), NormMode::Train).unwrap();
        assert!((y.value().data()[0] + 1.0).abs() < 1e-4);
        assert!((y.value().data()[1] - 1.0).abs() < 1e-4);
        let updates = tape.take_buffer_updates();
        // running mean 0.9*0 + 0.1*2, running var 0.9*1 + 0.1*2 (unbiased)
        assert!((updates["l.bn.running_mean"].data()[0] - 0.2).abs() < 1e-12);
        assert!((updates["l.bn.running_var"].data()[0] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn frozen_mode_leaves_gamma_gradient_zero() {
        let mut store = bn_store(1);
        let tape = Tape::new(Precision::Double);
        let x = tape.input(Tensor::from_vec([1, 1, 1, 3], vec![1.0, 2.0, 4.0]).unwrap());
        let y = batch_norm_layer(&tape, &store, "l.bn", &x, NormMode::Frozen).unwrap();
        let loss = tape.sum(&tape.square(&y));
        let grads = tape.backward(&loss, Some(&mut store)).unwrap();
        assert!(store.grad("l.bn.gamma").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(store.grad("l.bn.beta").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grads.wrt(&x).is_some());
        assert!(tape.take_buffer_updates().is_empty());
    }

    #[test]
    fn conv4_row_count() {
        let spec = LayerSpec::new("conv4", LayerKind::Conv, 512, 512, 3, 1, 1, false, Activation::Relu);
        assert_eq!(spec.param_count(), 2_359_808);
    }
}
