//! Python bindings: tensors, masks, partial convolution, metrics and the
//! inpainting network.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use rfr_core::autograd::Tape;
use rfr_core::config::RunConfig;
use rfr_core::partial_conv::{mask_update_only, partial_conv_forward};
use rfr_core::train::masked_image;
use rfr_core::{metrics, ops, weights};
use rfr_core::{MaskMap, MergeMode, NetConfig, Precision, RfrError, RfrNet};

fn err(e: RfrError) -> PyErr {
    match e {
        RfrError::Io { .. } | RfrError::Format(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn precision(double: bool) -> Precision {
    if double {
        Precision::Double
    } else {
        Precision::Single
    }
}

/// Dense NCHW tensor of floats.
#[pyclass(name = "Tensor", module = "rfr", from_py_object)]
#[derive(Clone)]
struct PyTensor(rfr_core::Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: [usize; 4], data: Vec<f64>) -> PyResult<Self> {
        rfr_core::Tensor::from_vec(shape, data).map(PyTensor).map_err(err)
    }

    #[staticmethod]
    fn zeros(shape: [usize; 4]) -> Self {
        PyTensor(rfr_core::Tensor::zeros(shape))
    }

    #[staticmethod]
    fn full(shape: [usize; 4], value: f64) -> Self {
        PyTensor(rfr_core::Tensor::full(shape, value))
    }

    #[getter]
    fn shape(&self) -> [usize; 4] {
        self.0.shape().0
    }

    fn tolist(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn at(&self, n: usize, c: usize, y: usize, x: usize) -> PyResult<f64> {
        let s = self.0.shape();
        if n >= s.n() || c >= s.c() || y >= s.h() || x >= s.w() {
            return Err(PyValueError::new_err(format!("index out of range for shape {s:?}")));
        }
        Ok(self.0.at(n, c, y, x))
    }

    fn max_abs_diff(&self, other: &PyTensor) -> PyResult<f64> {
        self.0.max_abs_diff(&other.0).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape().0)
    }
}

/// Binary validity mask of shape (n, 1, h, w); 1 marks a known pixel.
#[pyclass(name = "Mask", module = "rfr", from_py_object)]
#[derive(Clone)]
struct PyMask(MaskMap);

#[pymethods]
impl PyMask {
    #[new]
    fn new(t: &PyTensor) -> PyResult<Self> {
        MaskMap::new(t.0.clone()).map(PyMask).map_err(err)
    }

    #[staticmethod]
    fn full(n: usize, h: usize, w: usize) -> Self {
        PyMask(MaskMap::full(n, h, w))
    }

    /// A single mask with a square hole of side `size` in the middle.
    #[staticmethod]
    fn centered_hole(h: usize, w: usize, size: usize) -> Self {
        PyMask(MaskMap::centered_hole(h, w, size))
    }

    #[getter]
    fn shape(&self) -> [usize; 4] {
        self.0.shape().0
    }

    fn valid_count(&self) -> usize {
        self.0.valid_count()
    }

    fn hole_fraction(&self) -> f64 {
        self.0.hole_fraction()
    }

    fn tensor(&self) -> PyTensor {
        PyTensor(self.0.tensor().clone())
    }

    /// The mask a partial convolution with this geometry would produce.
    #[pyo3(signature = (kernel, stride=1, padding=0))]
    fn update(&self, kernel: usize, stride: usize, padding: usize) -> PyResult<PyMask> {
        mask_update_only(&self.0, kernel, stride, padding).map(PyMask).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Mask(shape={:?}, valid={})", self.0.shape().0, self.0.valid_count())
    }
}

#[pyfunction]
#[pyo3(signature = (x, weight, bias=None, stride=1, padding=0))]
fn conv2d(x: &PyTensor, weight: &PyTensor, bias: Option<PyTensor>, stride: usize, padding: usize) -> PyResult<PyTensor> {
    ops::conv2d(&x.0, &weight.0, bias.as_ref().map(|b| &b.0), stride, padding)
        .map(PyTensor)
        .map_err(err)
}

/// Returns `(features, updated_mask)`. `bias` has shape (1, c_out, 1, 1).
#[pyfunction]
#[pyo3(signature = (x, mask, weight, bias, stride=1, padding=0, double=false))]
fn partial_conv(
    x: &PyTensor,
    mask: &PyMask,
    weight: &PyTensor,
    bias: &PyTensor,
    stride: usize,
    padding: usize,
    double: bool,
) -> PyResult<(PyTensor, PyMask)> {
    let (y, m) =
        partial_conv_forward(&x.0, &mask.0, &weight.0, &bias.0, stride, padding, precision(double)).map_err(err)?;
    Ok((PyTensor(y), PyMask(m)))
}

#[pyfunction]
fn psnr(pred: &PyTensor, gt: &PyTensor) -> PyResult<f64> {
    metrics::psnr(&pred.0, &gt.0).map_err(err)
}

#[pyfunction]
fn ssim(a: &PyTensor, b: &PyTensor) -> PyResult<f64> {
    metrics::ssim(&a.0, &b.0).map_err(err)
}

#[pyfunction]
fn mean_l1(pred: &PyTensor, gt: &PyTensor) -> PyResult<f64> {
    metrics::mean_l1(&pred.0, &gt.0).map_err(err)
}

/// Parses `key = value` configuration text and returns it normalized.
#[pyfunction]
fn parse_config(text: &str) -> PyResult<String> {
    RunConfig::parse(text).map(|c| c.to_string()).map_err(err)
}

fn merge_mode(name: &str) -> PyResult<MergeMode> {
    match name {
        "adaptive" => Ok(MergeMode::Adaptive),
        "average" => Ok(MergeMode::Average),
        "last" => Ok(MergeMode::LastOnly),
        other => Err(PyValueError::new_err(format!("unknown merge mode {other:?}"))),
    }
}

/// The inpainting network with its parameters.
#[pyclass(name = "Net", module = "rfr")]
struct PyNet(RfrNet);

#[pymethods]
impl PyNet {
    #[new]
    #[pyo3(signature = (seed=0, resolution=256, iter_num=6, merge_mode="adaptive", attention=true, depth=1, channel_scale=1))]
    fn new(
        seed: u64,
        resolution: usize,
        iter_num: usize,
        merge_mode: &str,
        attention: bool,
        depth: usize,
        channel_scale: usize,
    ) -> PyResult<Self> {
        let cfg = build_config(resolution, iter_num, merge_mode, attention, depth, channel_scale)?;
        RfrNet::build(cfg, seed).map(PyNet).map_err(err)
    }

    /// Builds the network a configuration text describes.
    #[staticmethod]
    fn from_config(text: &str) -> PyResult<Self> {
        let run = RunConfig::parse(text).map_err(err)?;
        let net = match &run.weights {
            Some(path) => weights::load(path, rfr_core::Architecture::new(run.net_config().map_err(err)?).map_err(err)?),
            None => RfrNet::build(run.net_config().map_err(err)?, run.seed),
        };
        net.map(PyNet).map_err(err)
    }

    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    /// `(layer, kind, parameter count)` per layer.
    fn param_rows(&self) -> Vec<(String, String, usize)> {
        self.0.arch.param_rows().into_iter().map(|r| (r.name, r.kind, r.params)).collect()
    }

    /// Output shape of every stage for an input of the given size.
    #[pyo3(signature = (h, w, n=1))]
    fn trace_shapes(&self, h: usize, w: usize, n: usize) -> PyResult<Vec<(String, [usize; 4])>> {
        let rows = self.0.arch.trace_shapes(n, h, w).map_err(err)?;
        Ok(rows.into_iter().map(|(name, s)| (name, s.0)).collect())
    }

    /// Fills the holes of `image` (values in [0, 1]); returns
    /// `(prediction, composite)`.
    #[pyo3(signature = (image, mask, double=false))]
    fn inpaint(&self, py: Python<'_>, image: &PyTensor, mask: &PyMask, double: bool) -> PyResult<(PyTensor, PyTensor)> {
        let (img, m) = (image.0.clone(), mask.0.clone());
        let net = &self.0;
        let (pred, comp) = py
            .detach(move || {
                let x = masked_image(&img, &m)?;
                net.inpaint(&Tape::inference(precision(double)), &x, &m)
            })
            .map_err(err)?;
        Ok((PyTensor(pred), PyTensor(comp)))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        weights::save(path, &self.0.params).map_err(err)
    }

    /// Replaces the parameters with those stored at `path`.
    fn load(&mut self, path: &str) -> PyResult<()> {
        self.0 = weights::load(path, self.0.arch.clone()).map_err(err)?;
        Ok(())
    }

    fn to_bytes(&self) -> Vec<u8> {
        weights::encode(&self.0.params)
    }

    fn __repr__(&self) -> String {
        let c = &self.0.arch.config;
        format!(
            "Net(resolution={}, iter_num={}, depth={}, params={})",
            c.resolution,
            c.reasoning.iter_num,
            c.depth,
            self.0.param_count()
        )
    }
}

fn build_config(
    resolution: usize,
    iter_num: usize,
    merge: &str,
    attention: bool,
    depth: usize,
    channel_scale: usize,
) -> PyResult<NetConfig> {
    let mut cfg = NetConfig::default();
    cfg.resolution = resolution;
    cfg.depth = depth;
    cfg.reasoning.iter_num = iter_num;
    cfg.reasoning.merge_mode = merge_mode(merge)?;
    cfg.reasoning.attention_enabled = attention;
    cfg.reasoning.channel_scale = channel_scale;
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

#[pymodule]
fn rfr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyMask>()?;
    m.add_class::<PyNet>()?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(partial_conv, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(mean_l1, m)?)?;
    m.add_function(wrap_pyfunction!(parse_config, m)?)?;
    Ok(())
}
