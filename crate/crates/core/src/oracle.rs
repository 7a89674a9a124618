//! Brute-force reference implementations used to cross-check the main
//! code paths. Everything here is written as literal nested loops over
//! plain [`Tensor`]s and shares no code with the operators it checks.
//! Masks are passed as `(n, 1, h, w)` tensors of zeros and ones.

use std::fmt;

use crate::autograd::ParamStore;
use crate::error::Result;
use crate::tensor::Tensor;

/// Outcome of comparing an implementation against a reference.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub case: String,
    pub max_abs: f64,
    pub max_rel: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    /// Relative error is `|actual - expected| / max(|expected|, floor)`;
    /// the floor keeps near-zero references from dominating.
    pub fn compare(case: impl Into<String>, expected: &Tensor, actual: &Tensor, tolerance: f64, floor: f64) -> Self {
        let case = case.into();
        if expected.shape() != actual.shape() {
            return OracleReport {
                case: format!("{case} (shape {:?} vs {:?})", expected.shape(), actual.shape()),
                max_abs: f64::INFINITY,
                max_rel: f64::INFINITY,
                tolerance,
                pass: false,
            };
        }
        let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
        for (&e, &a) in expected.data().iter().zip(actual.data()) {
            let d = (a - e).abs();
            let d = if d.is_nan() { f64::INFINITY } else { d };
            max_abs = max_abs.max(d);
            max_rel = max_rel.max(d / e.abs().max(floor));
        }
        OracleReport {
            case,
            max_abs,
            max_rel,
            tolerance,
            pass: max_rel <= tolerance,
        }
    }

    /// A yes/no check with no numeric error.
    pub fn flag(case: impl Into<String>, pass: bool) -> Self {
        OracleReport {
            case: case.into(),
            max_abs: if pass { 0.0 } else { f64::INFINITY },
            max_rel: if pass { 0.0 } else { f64::INFINITY },
            tolerance: 0.0,
            pass,
        }
    }

    /// Merge several reports into one covering all of them.
    pub fn combine(case: impl Into<String>, reports: &[OracleReport]) -> Self {
        let tolerance = reports.iter().map(|r| r.tolerance).fold(0.0, f64::max);
        OracleReport {
            case: format!("{} ({} cases)", case.into(), reports.len()),
            max_abs: reports.iter().map(|r| r.max_abs).fold(0.0, f64::max),
            max_rel: reports.iter().map(|r| r.max_rel).fold(0.0, f64::max),
            tolerance,
            pass: reports.iter().all(|r| r.pass),
        }
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} max_abs={:.3e} max_rel={:.3e} tol={:.1e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.case,
            self.max_abs,
            self.max_rel,
            self.tolerance
        )
    }
}

fn out_len(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Direct convolution. Weight `(co, ci, k, k)`, optional bias of `co` values.
pub fn naive_conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let [n, ci, h, wd] = x.shape().0;
    let [co, _, k, _] = w.shape().0;
    let (oh, ow) = (out_len(h, k, stride, pad), out_len(wd, k, stride, pad));
    let mut out = Tensor::zeros([n, co, oh, ow]);
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = match bias {
                        Some(t) => t.data()[o],
                        None => 0.0,
                    };
                    for i in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at(o, i, ky, kx) * x.at(b, i, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(b, o, y, xo, acc);
                }
            }
        }
    }
    out
}

/// Window-by-window partial convolution: inside each window, if any mask
/// pixel is valid the output is `W . (X * M) * (k*k / valid) + b` and the
/// new mask is 1; otherwise both are 0.
pub fn naive_partial_conv(
    x: &Tensor,
    mask: &Tensor,
    w: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor) {
    let [n, ci, h, wd] = x.shape().0;
    let [co, _, k, _] = w.shape().0;
    let (oh, ow) = (out_len(h, k, stride, pad), out_len(wd, k, stride, pad));
    let mut out = Tensor::zeros([n, co, oh, ow]);
    let mut new_mask = Tensor::zeros([n, 1, oh, ow]);
    for b in 0..n {
        for y in 0..oh {
            for xo in 0..ow {
                let mut valid = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (y * stride + ky) as isize - pad as isize;
                        let ix = (xo * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && iy < h as isize && ix < wd as isize {
                            valid += mask.at(b, 0, iy as usize, ix as usize);
                        }
                    }
                }
                if valid == 0.0 {
                    continue;
                }
                new_mask.set(b, 0, y, xo, 1.0);
                for o in 0..co {
                    let mut acc = 0.0;
                    for i in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let (iy, ix) = (iy as usize, ix as usize);
                                acc += w.at(o, i, ky, kx) * x.at(b, i, iy, ix) * mask.at(b, 0, iy, ix);
                            }
                        }
                    }
                    out.set(b, o, y, xo, acc * (k * k) as f64 / valid + bias.data()[o]);
                }
            }
        }
    }
    (out, new_mask)
}

/// Binary dilation of the valid set by a centred `k x k` square, `times` times.
pub fn mask_dilation(mask: &Tensor, k: usize, times: usize) -> Tensor {
    let [n, _, h, w] = mask.shape().0;
    let r = (k / 2) as isize;
    let mut cur = mask.clone();
    for _ in 0..times {
        let mut next = Tensor::zeros([n, 1, h, w]);
        for b in 0..n {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut hit = false;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (yy, xx) = (y + dy, x + dx);
                            if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize
                                && cur.at(b, 0, yy as usize, xx as usize) == 1.0
                            {
                                hit = true;
                            }
                        }
                    }
                    if hit {
                        next.set(b, 0, y as usize, x as usize, 1.0);
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

/// Per-location mean of `features[i]` over the `i` whose mask is 1 there;
/// 0 where no mask is 1.
pub fn naive_merge(features: &[Tensor], masks: &[Tensor]) -> Tensor {
    let [n, c, h, w] = features[0].shape().0;
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (mut num, mut den) = (0.0, 0.0);
                    for (f, m) in features.iter().zip(masks) {
                        let mv = m.at(b, 0, y, x);
                        num += mv * f.at(b, ch, y, x);
                        den += mv;
                    }
                    if den > 0.0 {
                        out.set(b, ch, y, x, num / den);
                    }
                }
            }
        }
    }
    out
}

/// Previous-recurrence inputs to the attention oracle.
pub struct PreviousScores<'a> {
    /// `(n, h*w, h, w)`: channel = key index `y'*w + x'`, spatial = query.
    pub score: &'a Tensor,
    /// `(n, 1, h, w)` validity of each query in the previous recurrence.
    pub valid: &'a Tensor,
    pub lambda_raw: f64,
}

/// Attention scores and reconstructed features, one scalar at a time.
/// Returns `(score, reconstructed)` with score laid out as in
/// [`PreviousScores::score`].
pub fn naive_attention(
    f: &Tensor,
    prev: Option<PreviousScores<'_>>,
    smoothing: usize,
    norm_floor: f64,
) -> (Tensor, Tensor) {
    let [n, c, h, w] = f.shape().0;
    let hw = h * w;
    let r = (smoothing / 2) as isize;
    let mut score = Tensor::zeros([n, hw, h, w]);
    let mut rebuilt = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        let norm = |p: usize| -> f64 {
            let mut s = 0.0;
            for ch in 0..c {
                let v = f.at(b, ch, p / w, p % w);
                s += v * v;
            }
            s.sqrt().max(norm_floor)
        };
        let mut sim = vec![vec![0.0; hw]; hw];
        for (q, row) in sim.iter_mut().enumerate() {
            for (key, out) in row.iter_mut().enumerate() {
                let mut dot = 0.0;
                for ch in 0..c {
                    dot += f.at(b, ch, q / w, q % w) * f.at(b, ch, key / w, key % w);
                }
                *out = dot / (norm(q) * norm(key));
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut smooth = vec![0.0; hw];
                for (key, s) in smooth.iter_mut().enumerate() {
                    let (mut acc, mut cnt) = (0.0, 0.0);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (yy, xx) = (y as isize + dy, x as isize + dx);
                            if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                                acc += sim[yy as usize * w + xx as usize][key];
                                cnt += 1.0;
                            }
                        }
                    }
                    *s = acc / cnt;
                }
                let mx = smooth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in &smooth {
                    z += (s - mx).exp();
                }
                for key in 0..hw {
                    let mut sc = (smooth[key] - mx).exp() / z;
                    if let Some(p) = &prev {
                        if p.valid.at(b, 0, y, x) == 1.0 {
                            let lam = 1.0 / (1.0 + (-p.lambda_raw).exp());
                            sc = lam * sc + (1.0 - lam) * p.score.at(b, key, y, x);
                        }
                    }
                    score.set(b, key, y, x, sc);
                }
                for ch in 0..c {
                    let mut acc = 0.0;
                    for key in 0..hw {
                        acc += score.at(b, key, y, x) * f.at(b, ch, key / w, key % w);
                    }
                    rebuilt.set(b, ch, y, x, acc);
                }
            }
        }
    }
    (score, rebuilt)
}

/// Central differences of `f` with respect to every element of the store
/// entry `name`. Elements whose perturbed evaluations are not finite are
/// left at 0 and their indices returned.
pub fn finite_diff(
    f: impl FnMut(&ParamStore) -> Result<f64>,
    store: &ParamStore,
    name: &str,
    eps: f64,
) -> Result<(Tensor, Vec<usize>)> {
    let base = store.value(name)?;
    let all: Vec<usize> = (0..base.numel()).collect();
    let (values, skipped) = finite_diff_at(f, store, name, &all, eps)?;
    Ok((Tensor::from_vec(base.shape(), values)?, skipped))
}

/// Central differences at the given flat indices of the entry `name`.
pub fn finite_diff_at(
    mut f: impl FnMut(&ParamStore) -> Result<f64>,
    store: &ParamStore,
    name: &str,
    indices: &[usize],
    eps: f64,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut work = store.clone();
    let base = store.value(name)?.clone();
    let mut grad = vec![0.0; indices.len()];
    let mut skipped = Vec::new();
    for (slot, &i) in grad.iter_mut().zip(indices) {
        let mut plus = base.clone();
        plus.data_mut()[i] += eps;
        work.set_value(name, plus)?;
        let fp = f(&work)?;
        let mut minus = base.clone();
        minus.data_mut()[i] -= eps;
        work.set_value(name, minus)?;
        let fm = f(&work)?;
        if fp.is_finite() && fm.is_finite() {
            *slot = (fp - fm) / (2.0 * eps);
        } else {
            skipped.push(i);
        }
    }
    Ok((grad, skipped))
}

/// Central differences of `f` with respect to every element of `x`.
pub fn finite_diff_tensor(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> (Tensor, Vec<usize>) {
    let mut grad = Tensor::zeros(x.shape());
    let mut skipped = Vec::new();
    let mut work = x.clone();
    for i in 0..x.numel() {
        let v = x.data()[i];
        work.data_mut()[i] = v + eps;
        let fp = f(&work);
        work.data_mut()[i] = v - eps;
        let fm = f(&work);
        work.data_mut()[i] = v;
        if fp.is_finite() && fm.is_finite() {
            grad.data_mut()[i] = (fp - fm) / (2.0 * eps);
        } else {
            skipped.push(i);
        }
    }
    (grad, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_of_square() {
        let x = Tensor::scalar(3.0);
        let (g, skipped) = finite_diff_tensor(|t| t.item() * t.item(), &x, 1e-4);
        assert!((g.item() - 6.0).abs() < 1e-6);
        assert!(skipped.is_empty());
    }

    #[test]
    fn finite_diff_of_linear_store_function() {
        let mut store = ParamStore::new();
        store.insert_param("w", Tensor::vector(vec![1.0, -2.0])).unwrap();
        let f = |s: &ParamStore| Ok(3.0 * s.value("w")?.data()[0] - 0.5 * s.value("w")?.data()[1]);
        let (g, _) = finite_diff(f, &store, "w", 1e-4).unwrap();
        assert!((g.data()[0] - 3.0).abs() < 1e-9);
        assert!((g.data()[1] + 0.5).abs() < 1e-9);
    }

    #[test]
    fn non_finite_points_are_skipped() {
        let x = Tensor::vector(vec![0.0, 1.0]);
        let (_, skipped) = finite_diff_tensor(|t| if t.data()[0] > 0.0 { f64::NAN } else { t.sum() }, &x, 1e-4);
        assert_eq!(skipped, vec![0]);
    }

    #[test]
    fn dilation_of_point_and_full() {
        let mut m = Tensor::zeros([1, 1, 7, 7]);
        m.set(0, 0, 3, 3, 1.0);
        assert_eq!(mask_dilation(&m, 3, 1).sum(), 9.0);
        assert_eq!(mask_dilation(&m, 3, 2).sum(), 25.0);
        let full = Tensor::ones([1, 1, 4, 4]);
        assert_eq!(mask_dilation(&full, 7, 1), full);
    }

    #[test]
    fn partial_conv_center_27_and_empty() {
        let x = Tensor::from_vec([1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let m = Tensor::from_vec([1, 1, 3, 3], vec![1., 1., 0., 1., 1., 0., 0., 0., 0.]).unwrap();
        let w = Tensor::ones([1, 1, 3, 3]);
        let b = Tensor::vector(vec![0.0]);
        let (y, _) = naive_partial_conv(&x, &m, &w, &b, 1, 1);
        assert_eq!(y.at(0, 0, 1, 1), 27.0);
        let (y, nm) = naive_partial_conv(&x, &Tensor::zeros([1, 1, 3, 3]), &w, &Tensor::vector(vec![5.0]), 1, 1);
        assert_eq!(y.max_abs(), 0.0);
        assert_eq!(nm.max_abs(), 0.0);
    }

    #[test]
    fn two_pixel_orthogonal_attention() {
        let f = Tensor::from_vec([1, 2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (s, _) = naive_attention(&f, None, 1, 1e-8);
        assert!((s.at(0, 0, 0, 0) - 0.7311).abs() < 1e-4);
        assert!((s.at(0, 1, 0, 0) - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn report_line() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![1.0, 2.00001]);
        let r = OracleReport::compare("case", &a, &b, 1e-4, 1.0);
        assert!(r.pass);
        assert!(r.to_string().starts_with("PASS case"));
        let r = OracleReport::compare("case", &a, &b, 1e-7, 1.0);
        assert!(!r.pass);
    }
}
