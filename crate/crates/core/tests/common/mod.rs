//! Helpers shared by the integration tests: the architecture table, a
//! hand-summed parameter table, and a straight-line re-implementation of
//! the network wiring built only from the brute-force reference functions.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rfr_core::autograd::ParamStore;
use rfr_core::oracle::{mask_dilation, naive_attention, naive_conv2d, naive_merge, naive_partial_conv, PreviousScores};
use rfr_core::{RfrNet, Tensor};

/// `(layer, channels, Ori / divisor)` for a 256x256 input.
pub const TABLE_256: &[(&str, usize, usize)] = &[
    ("pconv0", 64, 2),
    ("pconv1", 64, 2),
    ("rfr.pconv2", 64, 2),
    ("rfr.pconv3", 64, 2),
    ("rfr.conv1", 128, 4),
    ("rfr.conv2", 256, 8),
    ("rfr.conv3", 512, 16),
    ("rfr.conv4", 512, 16),
    ("rfr.conv5", 512, 16),
    ("rfr.conv6", 512, 16),
    ("rfr.conv7", 512, 16),
    ("rfr.conv8", 512, 16),
    ("rfr.kca", 512, 16),
    ("rfr.deconv1", 256, 8),
    ("rfr.deconv2", 128, 4),
    ("rfr.deconv3", 64, 2),
    ("rfr.merge", 64, 2),
    ("deconv4", 64, 1),
    ("pconv4", 32, 1),
    ("conv9", 32, 1),
    ("conv10", 32, 1),
    ("output", 3, 1),
];

/// Weights + bias + batch-norm gamma/beta, multiplied out by hand per row
/// of the default network without attention.
pub const HAND_PARAM_ROWS: &[(&str, usize)] = &[
    ("pconv0", 3 * 64 * 49 + 64 + 128),
    ("pconv1", 64 * 64 * 49 + 64 + 128),
    ("rfr.pconv2", 64 * 64 * 49 + 64),
    ("rfr.pconv3", 64 * 64 * 49 + 64 + 128),
    ("rfr.conv1", 64 * 128 * 9 + 128 + 256),
    ("rfr.conv2", 128 * 256 * 9 + 256 + 512),
    ("rfr.conv3", 256 * 512 * 9 + 512 + 1024),
    ("rfr.conv4", 512 * 512 * 9 + 512 + 1024),
    ("rfr.conv5", 512 * 512 * 9 + 512 + 1024),
    ("rfr.conv6", 512 * 512 * 9 + 512 + 1024),
    ("rfr.conv7", 1024 * 512 * 9 + 512 + 1024),
    ("rfr.conv8", 1024 * 512 * 9 + 512 + 1024),
    ("rfr.deconv1", 1024 * 256 * 16 + 256 + 512),
    ("rfr.deconv2", 512 * 128 * 16 + 128 + 256),
    ("rfr.deconv3", 256 * 64 * 16 + 64 + 128),
    ("deconv4", 64 * 64 * 16 + 64 + 128),
    ("pconv4", 67 * 32 * 9 + 32),
    ("conv9", 32 * 32 * 9 + 32 + 64),
    ("conv10", 32 * 32 * 9 + 32 + 64),
    ("output", 64 * 3 * 9 + 3),
];

/// Sum of [`HAND_PARAM_ROWS`], written out.
pub const BARE_PARAM_TOTAL: usize = 24_297_667;

/// Attention gate scalar plus the 1024 -> 512 fusion convolution.
pub const ATTENTION_PARAMS: usize = 1 + 1024 * 512 + 512;

pub const REPORTED_MODEL_SIZE: f64 = 31e6;

/// Replace every entry with seeded random values so that batch-norm
/// running statistics and affine terms are not the identity.
pub fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let mut new = store.value(&name).unwrap().clone();
        for v in new.data_mut() {
            *v = if name.ends_with("running_var") || name.ends_with("gamma") {
                rng.gen_range(0.5..1.5)
            } else if name.ends_with("running_mean") || name.ends_with("beta") || name.ends_with("bias") {
                rng.gen_range(-0.1..0.1)
            } else if name.ends_with("lambda") {
                rng.gen_range(-1.0..1.0)
            } else {
                *v
            };
        }
        store.set_value(&name, new).unwrap();
    }
}

pub fn random_image(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform([n, c, h, w], 0.0, 1.0, &mut rng)
}

/// `(n, 1, h, w)` mask that is valid outside an axis-aligned box.
pub fn box_mask(n: usize, h: usize, w: usize, y0: usize, x0: usize, side: usize) -> Tensor {
    let mut m = Tensor::ones([n, 1, h, w]);
    for b in 0..n {
        for y in y0..(y0 + side).min(h) {
            for x in x0..(x0 + side).min(w) {
                m.set(b, 0, y, x, 0.0);
            }
        }
    }
    m
}

// ---- straight-line reference network ----

const BN_EPS: f64 = 1e-5;
const SLOPE: f64 = 0.2;

fn p<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    store.value(name).unwrap_or_else(|_| panic!("missing {name}"))
}

fn bn(x: &Tensor, store: &ParamStore, layer: &str) -> Tensor {
    let g = p(store, &format!("{layer}.bn.gamma"));
    let b = p(store, &format!("{layer}.bn.beta"));
    let rm = p(store, &format!("{layer}.bn.running_mean"));
    let rv = p(store, &format!("{layer}.bn.running_var"));
    let [n, c, h, w] = x.shape().0;
    let mut out = x.clone();
    for bi in 0..n {
        for ch in 0..c {
            let scale = g.data()[ch] / (rv.data()[ch] + BN_EPS).sqrt();
            for y in 0..h {
                for xx in 0..w {
                    let v = (x.at(bi, ch, y, xx) - rm.data()[ch]) * scale + b.data()[ch];
                    out.set(bi, ch, y, xx, v);
                }
            }
        }
    }
    out
}

fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

fn leaky(x: &Tensor) -> Tensor {
    x.map(|v| if v >= 0.0 { v } else { SLOPE * v })
}

fn cat(a: &Tensor, b: &Tensor) -> Tensor {
    let [n, ca, h, w] = a.shape().0;
    let cb = b.shape().c();
    let mut out = Tensor::zeros([n, ca + cb, h, w]);
    for bi in 0..n {
        for y in 0..h {
            for x in 0..w {
                for c in 0..ca {
                    out.set(bi, c, y, x, a.at(bi, c, y, x));
                }
                for c in 0..cb {
                    out.set(bi, ca + c, y, x, b.at(bi, c, y, x));
                }
            }
        }
    }
    out
}

/// Multiply every channel by a one-channel mask.
fn masked(x: &Tensor, m: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape().0;
    let mut out = x.clone();
    for bi in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out.set(bi, ch, y, xx, x.at(bi, ch, y, xx) * m.at(bi, 0, y, xx));
                }
            }
        }
    }
    out
}

fn resize(m: &Tensor, oh: usize, ow: usize) -> Tensor {
    let [n, _, h, w] = m.shape().0;
    let mut out = Tensor::zeros([n, 1, oh, ow]);
    for b in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                out.set(b, 0, y, x, m.at(b, 0, y * h / oh, x * w / ow));
            }
        }
    }
    out
}

/// Transposed convolution by scattering every input pixel. Weight `(ci, co, k, k)`.
pub fn naive_deconv(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, ci, h, wd] = x.shape().0;
    let [_, co, k, _] = w.shape().0;
    let (oh, ow) = ((h - 1) * stride + k - 2 * pad, (wd - 1) * stride + k - 2 * pad);
    let mut out = Tensor::zeros([n, co, oh, ow]);
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    out.set(b, o, y, xx, bias.data()[o]);
                }
            }
        }
        for i in 0..ci {
            for iy in 0..h {
                for ix in 0..wd {
                    let v = x.at(b, i, iy, ix);
                    for o in 0..co {
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (iy * stride + ky) as isize - pad as isize;
                                let xx = (ix * stride + kx) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= oh as isize || xx >= ow as isize {
                                    continue;
                                }
                                let (y, xx) = (y as usize, xx as usize);
                                let cur = out.at(b, o, y, xx);
                                out.set(b, o, y, xx, cur + v * w.at(i, o, ky, kx));
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv(store: &ParamStore, name: &str, x: &Tensor, stride: usize, pad: usize) -> Tensor {
    naive_conv2d(
        x,
        p(store, &format!("{name}.weight")),
        Some(p(store, &format!("{name}.bias"))),
        stride,
        pad,
    )
}

fn pconv(store: &ParamStore, name: &str, x: &Tensor, m: &Tensor, stride: usize, pad: usize) -> (Tensor, Tensor) {
    naive_partial_conv(
        x,
        m,
        p(store, &format!("{name}.weight")),
        p(store, &format!("{name}.bias")),
        stride,
        pad,
    )
}

fn deconv(store: &ParamStore, name: &str, x: &Tensor) -> Tensor {
    naive_deconv(
        x,
        p(store, &format!("{name}.weight")),
        p(store, &format!("{name}.bias")),
        2,
        1,
    )
}

fn union(a: &Tensor, b: &Tensor) -> Tensor {
    a.zip_map(b, f64::max).unwrap()
}

/// Evaluation-mode output of a depth-1 network with attention and
/// adaptive merging, written out layer by layer from the table.
pub fn wiring_oracle(net: &RfrNet, image: &Tensor, mask: &Tensor) -> Tensor {
    let s = &net.params;
    let iters = net.arch.config.reasoning.iter_num;
    let (h, w) = (image.shape().h(), image.shape().w());
    let x = masked(image, mask);

    let (f, m) = pconv(s, "pconv0", &x, mask, 2, 3);
    let f = relu(&bn(&f, s, "pconv0"));
    let (f, _) = pconv(s, "pconv1", &f, &m, 1, 3);
    let f0 = relu(&bn(&f, s, "pconv1"));
    let m0 = resize(mask, h / 2, w / 2);

    let (mut feat, mut cur) = (f0, m0);
    let mut features = Vec::new();
    let mut masks = Vec::new();
    let mut previous: Option<(Tensor, Tensor)> = None;
    for _ in 0..iters {
        let (f1, m1) = pconv(s, "rfr.pconv2", &feat, &cur, 1, 3);
        let (f2, m2) = pconv(s, "rfr.pconv3", &f1, &m1, 1, 3);
        let f2 = masked(&relu(&bn(&f2, s, "rfr.pconv3")), &m2);

        let x1 = relu(&bn(&conv(s, "rfr.conv1", &f2, 2, 1), s, "rfr.conv1"));
        let x2 = relu(&bn(&conv(s, "rfr.conv2", &x1, 2, 1), s, "rfr.conv2"));
        let x3 = relu(&bn(&conv(s, "rfr.conv3", &x2, 2, 1), s, "rfr.conv3"));
        let x4 = relu(&bn(&conv(s, "rfr.conv4", &x3, 1, 1), s, "rfr.conv4"));
        let x5 = relu(&bn(&conv(s, "rfr.conv5", &x4, 1, 1), s, "rfr.conv5"));
        let x6 = relu(&bn(&conv(s, "rfr.conv6", &x5, 1, 1), s, "rfr.conv6"));
        let x7 = leaky(&bn(&conv(s, "rfr.conv7", &cat(&x6, &x5), 1, 1), s, "rfr.conv7"));
        let x8 = leaky(&bn(&conv(s, "rfr.conv8", &cat(&x7, &x4), 1, 1), s, "rfr.conv8"));

        let small = resize(&m2, x8.shape().h(), x8.shape().w());
        let lambda_raw = p(s, "rfr.kca.lambda").item();
        let prev = previous.as_ref().map(|(score, valid)| PreviousScores {
            score,
            valid,
            lambda_raw,
        });
        let (score, rebuilt) = naive_attention(&x8, prev, 3, 1e-8);
        let xa = conv(s, "rfr.kca.fuse", &cat(&rebuilt, &x8), 1, 0);
        previous = Some((score, small));

        let y1 = leaky(&bn(&deconv(s, "rfr.deconv1", &cat(&xa, &x3)), s, "rfr.deconv1"));
        let y2 = leaky(&bn(&deconv(s, "rfr.deconv2", &cat(&y1, &x2)), s, "rfr.deconv2"));
        let y3 = leaky(&bn(&deconv(s, "rfr.deconv3", &cat(&y2, &x1)), s, "rfr.deconv3"));
        let fi = masked(&y3, &m2);
        features.push(fi.clone());
        masks.push(m2.clone());
        feat = fi;
        cur = m2;
    }
    let merged = naive_merge(&features, &masks);

    let d4 = leaky(&bn(&deconv(s, "deconv4", &merged), s, "deconv4"));
    let filled = union(&resize(masks.last().unwrap(), h, w), mask);
    let (p4, _) = pconv(s, "pconv4", &cat(&x, &d4), &filled, 1, 1);
    let p4 = leaky(&p4);
    let c9 = leaky(&bn(&conv(s, "conv9", &p4, 1, 1), s, "conv9"));
    let c10 = leaky(&bn(&conv(s, "conv10", &c9, 1, 1), s, "conv10"));
    conv(s, "output", &cat(&p4, &c10), 1, 1)
}

/// Two applications of a 7x7 dilation, the mask growth of one recurrence.
pub fn recurrence_growth(mask: &Tensor) -> Tensor {
    mask_dilation(mask, 7, 2)
}
