//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] is the execution context for a forward pass. While it is
//! recording, every differentiable operation whose inputs require a
//! gradient appends a node holding a backward closure and whatever
//! intermediates that closure needs. [`Tape::backward`] replays the nodes
//! in reverse order and accumulates parameter gradients into a
//! [`ParamStore`]. A non-recording tape runs the same code as a pure
//! forward pass and keeps nothing alive.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{contract_err, dim_err, Result};
use crate::ops;
use crate::tensor::{Precision, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    /// Learned parameter with a gradient slot.
    Trainable,
    /// Non-learned state such as running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    pub kind: EntryKind,
    /// Frozen entries enter the tape as constants and are skipped by the optimizer.
    pub frozen: bool,
}

/// Named parameters keyed by dotted layer-qualified names, in sorted order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, value: Tensor, kind: EntryKind) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(contract_err!("duplicate parameter name `{name}`"));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                grad,
                kind,
                frozen: false,
            },
        );
        Ok(())
    }

    pub fn insert_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.insert(name, value, EntryKind::Trainable)
    }

    pub fn insert_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.insert(name, value, EntryKind::Buffer)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| contract_err!("unknown parameter `{name}`"))
    }

    pub fn entry_mut(&mut self, name: &str) -> Result<&mut ParamEntry> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| contract_err!("unknown parameter `{name}`"))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entry(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entry(name)?.grad)
    }

    /// Replace a value, keeping the shape.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let entry = self.entry_mut(name)?;
        entry.value.expect_shape(value.shape(), name)?;
        entry.value = value;
        Ok(())
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        self.entry_mut(name)?.grad.add_assign(grad)
    }

    pub fn zero_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(0.0);
        }
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.entry_mut(name)?.frozen = frozen;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Scalar count over trainable entries.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind == EntryKind::Trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Bitwise equality of names, kinds and values.
    pub fn same_values(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(other.entries.iter()).all(|((na, a), (nb, b))| {
                na == nb
                    && a.kind == b.kind
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Write running-statistic updates collected by a training-mode tape.
    pub fn apply_buffer_updates(&mut self, updates: BTreeMap<String, Tensor>) -> Result<()> {
        for (name, value) in updates {
            let entry = self.entry_mut(&name)?;
            if entry.kind != EntryKind::Buffer {
                return Err(contract_err!("`{name}` is not a buffer"));
            }
            entry.value.expect_shape(value.shape(), &name)?;
            entry.value = value;
        }
        Ok(())
    }
}

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
    param: Option<String>,
}

/// A value in a forward computation. Cheap to clone.
#[derive(Clone)]
pub struct Var {
    value: Rc<Tensor>,
    node: Option<usize>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn to_tensor(&self) -> Tensor {
        (*self.value).clone()
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({:?}, node {:?})", self.value, self.node)
    }
}

/// Gradients of one backward pass, indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient reaching `var`, if it is a recorded leaf.
    pub fn wrt(&self, var: &Var) -> Option<&Tensor> {
        var.node.and_then(|i| self.grads.get(i)).and_then(Option::as_ref)
    }
}

pub struct Tape {
    precision: Precision,
    recording: bool,
    nodes: RefCell<Vec<Node>>,
    buffer_updates: RefCell<BTreeMap<String, Tensor>>,
}

impl Tape {
    /// A recording context.
    pub fn new(precision: Precision) -> Self {
        Tape {
            precision,
            recording: true,
            nodes: RefCell::new(Vec::new()),
            buffer_updates: RefCell::new(BTreeMap::new()),
        }
    }

    /// A pure forward context: nothing is recorded and no gradients flow.
    pub fn inference(precision: Precision) -> Self {
        Tape {
            recording: false,
            ..Tape::new(precision)
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, t: Tensor) -> Var {
        Var {
            value: Rc::new(t.rounded(self.precision)),
            node: None,
        }
    }

    fn leaf(&self, t: Tensor, param: Option<String>) -> Var {
        let value = Rc::new(t.rounded(self.precision));
        if !self.recording {
            return Var { value, node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            inputs: Vec::new(),
            backward: None,
            param,
        });
        Var {
            value,
            node: Some(nodes.len() - 1),
        }
    }

    /// A leaf that receives a gradient but is not a stored parameter.
    pub fn input(&self, t: Tensor) -> Var {
        self.leaf(t, None)
    }

    /// Load a stored entry. Frozen entries and buffers come in as constants.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Var> {
        let entry = store.entry(name)?;
        if entry.frozen || entry.kind == EntryKind::Buffer {
            return Ok(self.constant(entry.value.clone()));
        }
        Ok(self.leaf(entry.value.clone(), Some(name.to_string())))
    }

    /// Latest value of a buffer: a pending update from this tape, else the store.
    pub fn buffer(&self, store: &ParamStore, name: &str) -> Result<Tensor> {
        if let Some(t) = self.buffer_updates.borrow().get(name) {
            return Ok(t.clone());
        }
        Ok(store.value(name)?.clone())
    }

    pub fn update_buffer(&self, name: &str, value: Tensor) {
        self.buffer_updates
            .borrow_mut()
            .insert(name.to_string(), value.rounded(self.precision));
    }

    pub fn take_buffer_updates(&self) -> BTreeMap<String, Tensor> {
        std::mem::take(&mut *self.buffer_updates.borrow_mut())
    }

    fn record(
        &self,
        value: Tensor,
        inputs: &[&Var],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        let value = Rc::new(value.rounded(self.precision));
        if !self.recording || inputs.iter().all(|v| v.node.is_none()) {
            return Var { value, node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            inputs: inputs.iter().map(|v| v.node).collect(),
            backward: Some(Box::new(backward)),
            param: None,
        });
        Var {
            value,
            node: Some(nodes.len() - 1),
        }
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients are added to
    /// `store`; gradients of other leaves are returned.
    pub fn backward(&self, loss: &Var, store: Option<&mut ParamStore>) -> Result<Gradients> {
        if loss.value.numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            ));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = loss.node else {
            return Ok(Gradients { grads });
        };
        let mut store = store;
        grads[root] = Some(Tensor::full(loss.shape(), 1.0));
        for i in (0..=root).rev() {
            let node = &nodes[i];
            let Some(g) = grads[i].take() else { continue };
            if let Some(name) = &node.param {
                if let Some(store) = store.as_deref_mut() {
                    store.accumulate_grad(name, &g)?;
                }
            }
            let Some(backward) = &node.backward else {
                // leaves keep their gradient for `Gradients::wrt`
                grads[i] = Some(g);
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let outs = backward(&g, &needs);
            for (input, out) in node.inputs.iter().zip(outs) {
                let (Some(j), Some(out)) = (input, out) else { continue };
                let out = out.rounded(self.precision);
                match &mut grads[*j] {
                    Some(acc) => acc.add_assign(&out)?,
                    slot @ None => *slot = Some(out),
                }
            }
        }
        Ok(Gradients { grads })
    }

    // ---- elementwise ----

    fn binary(
        &self,
        a: &Var,
        b: &Var,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64, f64) -> f64,
        db: fn(f64, f64, f64) -> f64,
    ) -> Result<Var> {
        let out = ops::broadcast_binary(&a.value, &b.value, f)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.record(out, &[a, b], move |g, needs| {
            let grad_for = |d: fn(f64, f64, f64) -> f64, target: Shape| {
                let full = broadcast_ternary(&av, &bv, g, d);
                ops::reduce_to(&full, target)
            };
            vec![
                needs[0].then(|| grad_for(da, av.shape())),
                needs[1].then(|| grad_for(db, bv.shape())),
            ]
        }))
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, |_, _, g| g, |_, _, g| g)
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, |_, _, g| g, |_, _, g| -g)
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, |_, y, g| g * y, |x, _, g| g * x)
    }

    /// `a / b`, with 0 wherever `b` is 0.
    pub fn div_or_zero(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(
            a,
            b,
            |x, y| if y != 0.0 { x / y } else { 0.0 },
            |_, y, g| if y != 0.0 { g / y } else { 0.0 },
            |x, y, g| if y != 0.0 { -g * x / (y * y) } else { 0.0 },
        )
    }

    fn unary(&self, a: &Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let out = a.value.map(f);
        let x = a.value.clone();
        self.record(out, &[a], move |g, _| {
            vec![Some(x.zip_map(g, &df).expect("gradient shape"))]
        })
    }

    pub fn scale(&self, a: &Var, k: f64) -> Var {
        self.unary(a, move |x| x * k, move |_, g| g * k)
    }

    pub fn add_scalar(&self, a: &Var, k: f64) -> Var {
        self.unary(a, move |x| x + k, |_, g| g)
    }

    pub fn relu(&self, a: &Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, g| if x > 0.0 { g } else { 0.0 })
    }

    pub fn leaky_relu(&self, a: &Var, slope: f64) -> Var {
        self.unary(
            a,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, g| if x > 0.0 { g } else { slope * g },
        )
    }

    pub fn sigmoid(&self, a: &Var) -> Var {
        self.unary(a, sigmoid, |x, g| {
            let s = sigmoid(x);
            g * s * (1.0 - s)
        })
    }

    pub fn abs(&self, a: &Var) -> Var {
        self.unary(a, f64::abs, |x, g| g * sign(x))
    }

    pub fn square(&self, a: &Var) -> Var {
        self.unary(a, |x| x * x, |x, g| 2.0 * x * g)
    }

    // ---- reductions ----

    pub fn sum(&self, a: &Var) -> Var {
        let shape = a.shape();
        self.record(Tensor::scalar(a.value.sum()), &[a], move |g, _| {
            vec![Some(Tensor::full(shape, g.item()))]
        })
    }

    pub fn mean(&self, a: &Var) -> Var {
        let shape = a.shape();
        let n = shape.numel() as f64;
        self.record(Tensor::scalar(a.value.sum() / n), &[a], move |g, _| {
            vec![Some(Tensor::full(shape, g.item() / n))]
        })
    }

    /// Weighted sum of scalar vars.
    pub fn weighted_sum(&self, terms: &[(f64, &Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (w, v) in terms {
            if v.value.numel() != 1 {
                return Err(dim_err!("weighted_sum expects scalars, got {:?}", v.shape()));
            }
            let term = self.scale(v, *w);
            acc = Some(match acc {
                None => term,
                Some(a) => self.add(&a, &term)?,
            });
        }
        acc.ok_or_else(|| contract_err!("weighted_sum of no terms"))
    }

    // ---- shape ----

    pub fn concat(&self, parts: &[&Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|v| v.value.as_ref()).collect();
        let out = ops::concat_channels(&tensors)?;
        let sizes: Vec<usize> = parts.iter().map(|v| v.shape().c()).collect();
        Ok(self.record(out, parts, move |g, _| {
            ops::split_channels(g, &sizes).into_iter().map(Some).collect()
        }))
    }

    // ---- convolution ----

    pub fn conv2d(
        &self,
        x: &Var,
        weight: &Var,
        bias: Option<&Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = ops::conv2d(&x.value, &weight.value, bias.map(|b| b.value.as_ref()), stride, padding)?;
        let (xv, wv) = (x.value.clone(), weight.value.clone());
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.record(out, &inputs, move |g, needs| {
            let mut grads = vec![
                needs[0].then(|| ops::conv2d_grad_input(g, &wv, xv.shape(), stride, padding)),
                needs[1].then(|| ops::conv2d_grad_weight(g, &xv, wv.shape(), stride, padding)),
            ];
            if needs.len() > 2 {
                grads.push(needs[2].then(|| ops::channel_sum(g)));
            }
            grads
        }))
    }

    /// Transposed convolution with weight `(c_in, c_out, k, k)`.
    pub fn conv_transpose2d(
        &self,
        x: &Var,
        weight: &Var,
        bias: Option<&Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = ops::conv_transpose2d(
            &x.value,
            &weight.value,
            bias.map(|b| b.value.as_ref()),
            stride,
            padding,
        )?;
        let (xv, wv) = (x.value.clone(), weight.value.clone());
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.record(out, &inputs, move |g, needs| {
            let mut grads = vec![
                needs[0].then(|| ops::conv2d(g, &wv, None, stride, padding).expect("adjoint geometry")),
                needs[1].then(|| ops::conv2d_grad_weight(&xv, g, wv.shape(), stride, padding)),
            ];
            if needs.len() > 2 {
                grads.push(needs[2].then(|| ops::channel_sum(g)));
            }
            grads
        }))
    }

    // ---- normalisation ----

    /// Batch normalisation with statistics supplied by the caller.
    /// `stats = None` normalises by the batch's own statistics (training);
    /// returns the output and the batch `(mean, biased variance)` in that case.
    pub fn batch_norm(
        &self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        stats: Option<(&Tensor, &Tensor)>,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let s = x.shape();
        let c = s.c();
        for (v, what) in [(gamma, "gamma"), (beta, "beta")] {
            if v.value.numel() != c {
                return Err(dim_err!(
                    "batch_norm: {what} has {} entries for {c} channels",
                    v.value.numel()
                ));
            }
        }
        if s.n() * s.h() * s.w() == 0 {
            return Err(dim_err!("batch_norm: zero-element channel in {s:?}"));
        }
        let (mean, var, batch) = match stats {
            None => {
                let (m, v) = ops::channel_moments(&x.value)?;
                (m.clone(), v.clone(), Some((m, v)))
            }
            Some((m, v)) => {
                if m.numel() != c || v.numel() != c {
                    return Err(dim_err!("batch_norm: running statistics do not have {c} channels"));
                }
                (m.data().to_vec(), v.data().to_vec(), None)
            }
        };
        let train = batch.is_some();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + ops::BN_EPS).sqrt()).collect();
        let xhat = ops::normalize_with(&x.value, &mean, &inv_std);
        let gamma_v: Vec<f64> = gamma.value.data().to_vec();
        let mut out = xhat.clone();
        {
            let plane = s.h() * s.w();
            let beta_d = beta.value.data();
            for b in 0..s.n() {
                for ch in 0..c {
                    let start = (b * c + ch) * plane;
                    for v in &mut out.data_mut()[start..start + plane] {
                        *v = *v * gamma_v[ch] + beta_d[ch];
                    }
                }
            }
        }
        let var_out = self.record(out, &[x, gamma, beta], move |g, needs| {
            let gx = needs[0].then(|| {
                if train {
                    ops::batch_norm_train_grad(&xhat, &gamma_v, &inv_std, g)
                } else {
                    let k: Vec<f64> = gamma_v.iter().zip(&inv_std).map(|(a, b)| a * b).collect();
                    let mut gx = g.clone();
                    let plane = s.h() * s.w();
                    for b in 0..s.n() {
                        for ch in 0..c {
                            let start = (b * c + ch) * plane;
                            for v in &mut gx.data_mut()[start..start + plane] {
                                *v *= k[ch];
                            }
                        }
                    }
                    gx
                }
            });
            let ggamma = needs[1].then(|| {
                let prod = g.zip_map(&xhat, |a, b| a * b).expect("same shape");
                ops::channel_sum(&prod)
            });
            let gbeta = needs[2].then(|| ops::channel_sum(g));
            vec![gx, ggamma, gbeta]
        });
        Ok((var_out, batch))
    }

    pub fn softmax_channels(&self, a: &Var) -> Var {
        let out = ops::softmax_channels(&a.value);
        let y = Rc::new(out.clone());
        self.record(out, &[a], move |g, _| vec![Some(ops::softmax_channels_grad(&y, g))])
    }

    pub fn box_mean(&self, a: &Var, side: usize) -> Var {
        self.record(ops::box_mean(&a.value, side), &[a], move |g, _| {
            vec![Some(ops::box_mean_adjoint(g, side))]
        })
    }

    pub fn normalize_channels(&self, a: &Var, floor: f64) -> Var {
        let (out, norms) = ops::normalize_channels(&a.value, floor);
        let y = Rc::new(out.clone());
        self.record(out, &[a], move |g, _| {
            vec![Some(ops::normalize_channels_grad(&y, &norms, g, floor))]
        })
    }

    pub fn spatial_gram(&self, a: &Var) -> Var {
        let av = a.value.clone();
        self.record(ops::spatial_gram(&a.value), &[a], move |g, _| {
            vec![Some(ops::spatial_gram_grad(&av, g))]
        })
    }

    pub fn attend(&self, score: &Var, f: &Var) -> Result<Var> {
        let out = ops::attend(&score.value, &f.value)?;
        let (sv, fv) = (score.value.clone(), f.value.clone());
        Ok(self.record(out, &[score, f], move |g, _| {
            let (gs, gf) = ops::attend_grad(&sv, &fv, g);
            vec![Some(gs), Some(gf)]
        }))
    }

    pub fn channel_gram(&self, f: &Var) -> Var {
        let fv = f.value.clone();
        self.record(ops::channel_gram(&f.value), &[f], move |g, _| {
            vec![Some(ops::channel_gram_grad(&fv, g))]
        })
    }

    pub fn avg_pool2(&self, a: &Var) -> Var {
        let shape = a.shape();
        self.record(ops::avg_pool2(&a.value), &[a], move |g, _| {
            vec![Some(ops::avg_pool2_grad(g, shape))]
        })
    }
}

fn broadcast_ternary(a: &Tensor, b: &Tensor, g: &Tensor, f: fn(f64, f64, f64) -> f64) -> Tensor {
    // g has the broadcast shape; expand a and b to it.
    let ea = ops::broadcast_binary(g, a, |_, x| x).expect("broadcast");
    let eb = ops::broadcast_binary(g, b, |_, y| y).expect("broadcast");
    let data = ea
        .data()
        .iter()
        .zip(eb.data())
        .zip(g.data())
        .map(|((&x, &y), &gv)| f(x, y, gv))
        .collect();
    Tensor::from_parts(g.shape(), data)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_gradient_is_input() {
        let mut store = ParamStore::new();
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1., -2., 3., 0.5]).unwrap();
        store.insert_param("w", Tensor::full([1, 1, 2, 2], 0.3)).unwrap();
        let tape = Tape::new(Precision::Double);
        let w = tape.param(&store, "w").unwrap();
        let xc = tape.constant(x.clone());
        let loss = tape.sum(&tape.mul(&w, &xc).unwrap());
        tape.backward(&loss, Some(&mut store)).unwrap();
        assert_eq!(store.grad("w").unwrap(), &x);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut store = ParamStore::new();
        store.insert_param("w", Tensor::full([1, 2, 1, 1], 2.0)).unwrap();
        let tape = Tape::new(Precision::Double);
        let w = tape.param(&store, "w").unwrap();
        let loss = tape.sum(&tape.square(&w));
        tape.backward(&loss, Some(&mut store)).unwrap();
        let once = store.grad("w").unwrap().clone();
        tape.backward(&loss, Some(&mut store)).unwrap();
        assert_eq!(store.grad("w").unwrap(), &once.scale(2.0));
        store.zero_grad();
        assert!(store.grad("w").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        use crate::error::RfrError;
        let tape = Tape::new(Precision::Double);
        let x = tape.input(Tensor::ones([1, 1, 2, 2]));
        let err = tape.backward(&x, None).unwrap_err();
        assert!(matches!(err, RfrError::Contract(_)));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new(Precision::Double);
        let c = tape.constant(Tensor::ones([1, 1, 1, 1]));
        let x = tape.input(Tensor::full([1, 1, 1, 1], 3.0));
        let loss = tape.sum(&tape.mul(&c, &x).unwrap());
        let g = tape.backward(&loss, None).unwrap();
        assert!(g.wrt(&c).is_none());
        assert_eq!(g.wrt(&x).unwrap().item(), 1.0);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::inference(Precision::Single);
        let mut store = ParamStore::new();
        store.insert_param("w", Tensor::ones([1, 1, 1, 1])).unwrap();
        let w = tape.param(&store, "w").unwrap();
        let y = tape.square(&w);
        assert!(!y.requires_grad());
        assert!(tape.is_empty());
    }

    #[test]
    fn frozen_params_are_constants() {
        let mut store = ParamStore::new();
        store.insert_param("g", Tensor::ones([1, 1, 1, 1])).unwrap();
        store.set_frozen("g", true).unwrap();
        let tape = Tape::new(Precision::Double);
        let g = tape.param(&store, "g").unwrap();
        assert!(!g.requires_grad());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert_param("a", Tensor::zeros([1, 1, 1, 1])).unwrap();
        assert!(store.insert_buffer("a", Tensor::zeros([1, 1, 1, 1])).is_err());
    }

    #[test]
    fn broadcast_mul_gradient_reduces() {
        let tape = Tape::new(Precision::Double);
        let a = tape.input(Tensor::from_vec([1, 2, 1, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = tape.input(Tensor::from_vec([1, 1, 1, 2], vec![10., 20.]).unwrap());
        let loss = tape.sum(&tape.mul(&a, &b).unwrap());
        let g = tape.backward(&loss, None).unwrap();
        assert_eq!(g.wrt(&b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(g.wrt(&a).unwrap().data(), &[10., 20., 10., 20.]);
    }
}
