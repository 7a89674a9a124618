//! Adam, the two-phase training loop, and synthetic training data.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{EntryKind, ParamStore, Tape};
use crate::error::{Result, RfrError};
use crate::layers::NormMode;
use crate::loss::{compute_losses, FeatureExtractor, LossComponents, LossWeights};
use crate::net::RfrNet;
use crate::partial_conv::MaskMap;
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_main: f64,
    pub lr_finetune: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub main_steps: usize,
    pub finetune_steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            lr_main: 1e-4,
            lr_finetune: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            main_steps: 100,
            finetune_steps: 0,
            seed: 0,
            weights: LossWeights::default(),
            precision: Precision::Single,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(RfrError::Config("batch_size must be positive".into()));
        }
        if !(self.lr_main >= 0.0 && self.lr_finetune >= 0.0) {
            return Err(RfrError::Config("learning rates must be non-negative".into()));
        }
        let w = &self.weights;
        if [w.hole, w.valid, w.perceptual, w.style].iter().any(|&v| !(v >= 0.0)) {
            return Err(RfrError::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction. Frozen entries and buffers are skipped.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            ..Default::default()
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update from the gradients held in `store`. Updated values are
    /// rounded to `precision`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, precision: Precision) -> Result<()> {
        for (name, e) in store.iter() {
            if e.kind == EntryKind::Trainable && !e.frozen && !e.grad.is_finite() {
                return Err(RfrError::NonFinite(format!("gradient of `{name}`")));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, e) in store.iter_mut() {
            if e.kind != EntryKind::Trainable || e.frozen {
                continue;
            }
            let n = e.value.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let g = e.grad.data();
            let p = e.value.data_mut();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p[i] = precision.round(p[i] - step);
            }
        }
        Ok(())
    }
}

/// Hole-ratio bands for generated masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskBand {
    Small,
    #[default]
    Medium,
    Large,
}

/// Accepted distance outside a band's nominal range.
pub const BAND_SLACK: f64 = 0.02;

impl MaskBand {
    pub fn range(self) -> (f64, f64) {
        match self {
            MaskBand::Small => (0.10, 0.20),
            MaskBand::Medium => (0.30, 0.40),
            MaskBand::Large => (0.50, 0.60),
        }
    }
}

impl FromStr for MaskBand {
    type Err = RfrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "10-20" => Ok(MaskBand::Small),
            "30-40" => Ok(MaskBand::Medium),
            "50-60" => Ok(MaskBand::Large),
            other => Err(RfrError::Config(format!(
                "unknown mask band `{other}` (expected 10-20, 30-40 or 50-60)"
            ))),
        }
    }
}

impl fmt::Display for MaskBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (lo, hi) = self.range();
        write!(f, "{}-{}", (lo * 100.0).round(), (hi * 100.0).round())
    }
}

fn stamp_disc(hole: &mut [bool], size: usize, cx: f64, cy: f64, radius: f64) {
    let r2 = radius * radius;
    let (y0, y1) = ((cy - radius).floor().max(0.0) as usize, (cy + radius).ceil() as usize);
    let (x0, x1) = ((cx - radius).floor().max(0.0) as usize, (cx + radius).ceil() as usize);
    for y in y0..y1.min(size) {
        for x in x0..x1.min(size) {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if dx * dx + dy * dy <= r2 {
                hole[y * size + x] = true;
            }
        }
    }
}

fn add_rectangle<R: Rng>(hole: &mut [bool], size: usize, rng: &mut R) {
    let max_side = (size / 3).max(3);
    let (rh, rw) = (rng.gen_range(3..=max_side), rng.gen_range(3..=max_side));
    let (y0, x0) = (rng.gen_range(0..=size - rh), rng.gen_range(0..=size - rw));
    for y in y0..y0 + rh {
        for x in x0..x0 + rw {
            hole[y * size + x] = true;
        }
    }
}

/// A polyline of 3-8 vertices drawn with a round brush 3-6 pixels wide.
fn add_stroke<R: Rng>(hole: &mut [bool], size: usize, rng: &mut R) {
    let width: f64 = rng.gen_range(3..=6) as f64;
    let vertices = rng.gen_range(3..=8);
    let reach = (size as f64 / 4.0).max(2.0);
    let mut p = (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64));
    for _ in 1..vertices {
        let q = (
            (p.0 + rng.gen_range(-reach..reach)).clamp(0.0, size as f64 - 1.0),
            (p.1 + rng.gen_range(-reach..reach)).clamp(0.0, size as f64 - 1.0),
        );
        let len = ((q.0 - p.0).powi(2) + (q.1 - p.1).powi(2)).sqrt();
        let steps = (len * 2.0).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            stamp_disc(hole, size, p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1), width / 2.0);
        }
        p = q;
    }
}

fn one_mask<R: Rng>(band: MaskBand, size: usize, rng: &mut R) -> Option<MaskMap> {
    let (lo, hi) = band.range();
    let target = rng.gen_range(lo..hi);
    let mut hole = vec![false; size * size];
    let mut fraction = 0.0;
    while fraction < target {
        if rng.gen_bool(0.5) {
            add_rectangle(&mut hole, size, rng);
        } else {
            add_stroke(&mut hole, size, rng);
        }
        fraction = hole.iter().filter(|&&h| h).count() as f64 / (size * size) as f64;
    }
    if fraction > hi + BAND_SLACK {
        return None;
    }
    Some(MaskMap::from_fn(1, size, size, |_, y, x| !hole[y * size + x]))
}

/// `count` square masks whose hole fraction lies within `band` plus or minus
/// two percentage points, reproducible from `seed`.
pub fn generate_masks(band: MaskBand, count: usize, size: usize, seed: u64) -> Result<Vec<MaskMap>> {
    if size < 16 {
        return Err(RfrError::Config(format!("masks need at least 16x16 pixels, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mask = (0..1000).find_map(|_| one_mask(band, size, &mut rng)).ok_or_else(|| {
            RfrError::Config(format!("could not hit mask band {band} at {size}x{size}"))
        })?;
        out.push(mask);
    }
    Ok(out)
}

/// A colour image built from a linear gradient, a checkerboard and a few
/// Gaussian blobs, with values in `[0, 1]`.
pub fn synthetic_image<R: Rng>(size: usize, rng: &mut R) -> Tensor {
    let mut img = Tensor::zeros([1, 3, size, size]);
    let s = size as f64;
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ga, gb): ([f64; 3], [f64; 3]) = (rng.gen(), rng.gen());
    let cell = rng.gen_range(2..=(size / 4).max(2));
    let check: [f64; 3] = rng.gen();
    let check_amp = rng.gen_range(0.05..0.25);
    let blobs: Vec<(f64, f64, f64, [f64; 3], f64)> = (0..rng.gen_range(1..=3))
        .map(|_| {
            (
                rng.gen_range(0.0..s),
                rng.gen_range(0.0..s),
                rng.gen_range(s / 10.0..s / 4.0),
                rng.gen(),
                rng.gen_range(-0.5..0.5),
            )
        })
        .collect();
    let (ca, sa) = (angle.cos(), angle.sin());
    for y in 0..size {
        for x in 0..size {
            let t = (((x as f64 - s / 2.0) * ca + (y as f64 - s / 2.0) * sa) / s + 0.5).clamp(0.0, 1.0);
            let parity = if (x / cell + y / cell) % 2 == 0 { 1.0 } else { -1.0 };
            for c in 0..3 {
                let mut v = ga[c] * (1.0 - t) + gb[c] * t + parity * check_amp * (check[c] - 0.5);
                for &(bx, by, r, col, amp) in &blobs {
                    let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                    v += amp * col[c] * (-d2 / (2.0 * r * r)).exp();
                }
                img.set(0, c, y, x, Precision::Single.round(v.clamp(0.0, 1.0)));
            }
        }
    }
    img
}

/// Ground-truth images paired with masks.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub images: Vec<Tensor>,
    pub masks: Vec<MaskMap>,
}

/// One batch: ground truth, mask, and `gt * mask`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub gt: Tensor,
    pub mask: MaskMap,
    pub masked: Tensor,
}

impl SyntheticDataset {
    pub fn generate(count: usize, size: usize, band: MaskBand, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..count).map(|_| synthetic_image(size, &mut rng)).collect();
        let masks = generate_masks(band, count, size, seed.wrapping_add(1))?;
        Ok(SyntheticDataset { images, masks })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Samples `step*batch .. step*batch + batch`, wrapping around.
    pub fn batch(&self, step: usize, batch: usize) -> Result<Batch> {
        if self.is_empty() {
            return Err(RfrError::Config("empty dataset".into()));
        }
        let idx: Vec<usize> = (0..batch).map(|k| (step * batch + k) % self.len()).collect();
        let gt = Tensor::stack_batch(&idx.iter().map(|&i| self.images[i].clone()).collect::<Vec<_>>())?;
        let mask = MaskMap::stack(&idx.iter().map(|&i| self.masks[i].clone()).collect::<Vec<_>>())?;
        let masked = masked_image(&gt, &mask)?;
        Ok(Batch { gt, mask, masked })
    }
}

/// `img * mask`, with the mask broadcast over channels.
pub fn masked_image(img: &Tensor, mask: &MaskMap) -> Result<Tensor> {
    let s = img.shape();
    let ms = mask.shape();
    if ms.n() != s.n() || ms.h() != s.h() || ms.w() != s.w() {
        return Err(crate::error::dim_err!("image {s:?} and mask {ms:?} differ"));
    }
    let mut out = img.clone();
    let hw = s.h() * s.w();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (b, p) = (i / (s.c() * hw), i % hw);
        *v *= mask.tensor().data()[b * hw + p];
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub components: LossComponents,
}

pub const HISTORY_HEADER: &str = "step,total,hole,valid,perceptual,style";

pub fn history_csv(history: &[StepRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        let c = &r.components;
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.total, c.hole, c.valid, c.perceptual, c.style
        ));
    }
    s
}

/// Training state: optimizer and a step counter across phases.
pub struct Trainer {
    pub config: TrainConfig,
    pub extractor: FeatureExtractor,
    pub adam: Adam,
    pub history: Vec<StepRecord>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let extractor = FeatureExtractor::new(config.seed ^ 0x5eed)?;
        let adam = Adam::new(config.beta1, config.beta2, config.eps);
        Ok(Trainer {
            config,
            extractor,
            adam,
            history: Vec::new(),
        })
    }

    /// One optimisation step on `batch`.
    pub fn step(&mut self, net: &mut RfrNet, batch: &Batch, lr: f64, mode: NormMode) -> Result<StepRecord> {
        let tape = Tape::new(self.config.precision);
        let x = tape.constant(batch.masked.clone());
        let out = net.arch.forward(&tape, &net.params, &x, &batch.mask, mode)?;
        let terms = compute_losses(
            &tape,
            &self.extractor,
            &out.prediction,
            &batch.gt,
            &batch.mask,
            &self.config.weights,
        )?;
        let step = self.history.len();
        let total = terms.total.value().item();
        if !total.is_finite() {
            return Err(RfrError::NonFinite(format!("total loss at step {step}")));
        }
        net.params.zero_grad();
        tape.backward(&terms.total, Some(&mut net.params))?;
        net.params.apply_buffer_updates(tape.take_buffer_updates())?;
        self.adam.step(&mut net.params, lr, self.config.precision)?;
        let rec = StepRecord {
            step,
            total,
            components: terms.components(),
        };
        self.history.push(rec);
        Ok(rec)
    }

    /// Main phase at `lr_main` with batch statistics, then the fine-tune
    /// phase at `lr_finetune` with every batch-norm layer frozen.
    pub fn train(&mut self, net: &mut RfrNet, data: &SyntheticDataset) -> Result<()> {
        let bs = self.config.batch_size;
        for _ in 0..self.config.main_steps {
            let batch = data.batch(self.history.len(), bs)?;
            self.step(net, &batch, self.config.lr_main, NormMode::Train)?;
        }
        if self.config.finetune_steps == 0 {
            return Ok(());
        }
        let names = norm_param_names(net);
        for n in &names {
            net.params.set_frozen(n, true)?;
        }
        let result = (0..self.config.finetune_steps).try_for_each(|_| {
            let batch = data.batch(self.history.len(), bs)?;
            self.step(net, &batch, self.config.lr_finetune, NormMode::Frozen).map(|_| ())
        });
        for n in &names {
            net.params.set_frozen(n, false)?;
        }
        result
    }
}

/// Batch-norm gamma and beta names across the network.
pub fn norm_param_names(net: &RfrNet) -> Vec<String> {
    net.arch.layers().iter().flat_map(|l| l.norm_param_names()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert_param("w", Tensor::full([1, 1, 2, 2], 0.5)).unwrap();
        store.accumulate_grad("w", &Tensor::ones([1, 1, 2, 2])).unwrap();
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        adam.step(&mut store, 1e-4, Precision::Double).unwrap();
        for &v in store.value("w").unwrap().data() {
            let d = 0.5 - v;
            assert!((0.99e-4..=1.0e-4).contains(&d), "{d}");
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = ParamStore::new();
        store.insert_param("w", Tensor::full([1, 1, 1, 3], 0.25)).unwrap();
        let before = store.clone();
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        adam.step(&mut store, 1e-3, Precision::Single).unwrap();
        assert!(store.same_values(&before));
    }

    #[test]
    fn nan_gradient_names_the_tensor() {
        let mut store = ParamStore::new();
        store.insert_param("layer.weight", Tensor::zeros([1, 1, 1, 1])).unwrap();
        store.accumulate_grad("layer.weight", &Tensor::full([1, 1, 1, 1], f64::NAN)).unwrap();
        let e = Adam::new(0.9, 0.999, 1e-8)
            .step(&mut store, 1e-3, Precision::Single)
            .unwrap_err();
        assert!(e.to_string().contains("layer.weight"));
    }

    #[test]
    fn frozen_entries_are_skipped() {
        let mut store = ParamStore::new();
        store.insert_param("g", Tensor::full([1, 1, 1, 1], 1.0)).unwrap();
        store.accumulate_grad("g", &Tensor::ones([1, 1, 1, 1])).unwrap();
        store.set_frozen("g", true).unwrap();
        Adam::new(0.9, 0.999, 1e-8).step(&mut store, 1e-2, Precision::Single).unwrap();
        assert_eq!(store.value("g").unwrap().item(), 1.0);
    }

    #[test]
    fn masked_image_zeroes_holes() {
        let img = Tensor::full([1, 3, 4, 4], 0.7);
        let mask = MaskMap::centered_hole(4, 4, 2);
        let m = masked_image(&img, &mask).unwrap();
        for c in 0..3 {
            assert_eq!(m.at(0, c, 1, 1), 0.0);
            assert_eq!(m.at(0, c, 0, 0), 0.7);
        }
    }

    #[test]
    fn band_parsing() {
        assert_eq!("50-60".parse::<MaskBand>().unwrap(), MaskBand::Large);
        assert_eq!(MaskBand::Small.to_string(), "10-20");
        assert!("20-30".parse::<MaskBand>().is_err());
    }

    #[test]
    fn csv_header() {
        let csv = history_csv(&[StepRecord {
            step: 0,
            total: 1.5,
            components: LossComponents::default(),
        }]);
        assert_eq!(csv, "step,total,hole,valid,perceptual,style\n0,1.5,0,0,0,0\n");
    }
}
