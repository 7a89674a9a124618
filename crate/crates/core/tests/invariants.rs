use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rfr_core::autograd::{ParamStore, Tape};
use rfr_core::config::RunConfig;
use rfr_core::image_io::Image;
use rfr_core::kca::{blend_scores, cosine_scores, smooth_and_softmax, AttentionState};
use rfr_core::metrics;
use rfr_core::net::composite;
use rfr_core::ops;
use rfr_core::oracle::{mask_dilation, naive_conv2d, naive_partial_conv};
use rfr_core::partial_conv::{mask_update_only, partial_conv_forward};
use rfr_core::rfr_module::{merge_features, MergeMode, RecurrenceState};
use rfr_core::weights;
use rfr_core::{MaskMap, Precision, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: [usize; 4], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

fn random_mask(n: usize, h: usize, w: usize, p_valid: f64, seed: u64) -> MaskMap {
    let mut r = rng(seed);
    let bits: Vec<bool> = (0..n * h * w).map(|_| r.gen_bool(p_valid)).collect();
    MaskMap::from_fn(n, h, w, |b, y, x| bits[(b * h + y) * w + x])
}

fn max_rel(a: &Tensor, e: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(e.data())
        .map(|(a, e)| (a - e).abs() / e.abs().max(1.0))
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn transposed_conv_is_the_adjoint_of_conv(
        seed in any::<u64>(), k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..=2, oh in 1usize..5, ci in 1usize..4, co in 1usize..4,
    ) {
        let pad = seed as usize % (k / 2 + 1);
        let h = (oh - 1) * stride + k - 2 * pad;
        prop_assume!(h >= 1);
        let x = uniform([2, ci, h, h], seed);
        let w = uniform([co, ci, k, k], seed ^ 1);
        let y = uniform([2, co, oh, oh], seed ^ 2);
        let cx = ops::conv2d(&x, &w, None, stride, pad).unwrap();
        prop_assert_eq!(cx.shape(), y.shape());
        let ty = ops::conv_transpose2d(&y, &w, None, stride, pad).unwrap();
        prop_assert_eq!(ty.shape(), x.shape());
        let (lhs, rhs) = (cx.dot(&y).unwrap(), x.dot(&ty).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn conv_matches_direct_loops(
        seed in any::<u64>(), k in 1usize..=4, stride in 1usize..=2, h in 4usize..10,
    ) {
        let pad = k / 2;
        let x = uniform([1, 2, h, h + 1], seed);
        let w = uniform([3, 2, k, k], seed ^ 1);
        let b = Tensor::vector(uniform([1, 1, 1, 3], seed ^ 2).into_vec());
        let got = ops::conv2d(&x, &w, Some(&b), stride, pad).unwrap();
        let want = naive_conv2d(&x, &w, Some(&b), stride, pad);
        prop_assert!(max_rel(&got, &want) < 1e-12);
    }

    #[test]
    fn partial_conv_matches_window_oracle(
        seed in any::<u64>(), k in prop::sample::select(vec![3usize, 7]),
        stride in 1usize..=2, h in 4usize..12, p_valid in 0.0f64..1.0,
    ) {
        let pad = k / 2;
        let x = uniform([2, 2, h, h], seed);
        let m = random_mask(2, h, h, p_valid, seed ^ 3);
        let w = uniform([3, 2, k, k], seed ^ 1);
        let b = Tensor::vector(vec![0.1, -0.2, 0.3]);
        let (y, nm) = partial_conv_forward(&x, &m, &w, &b, stride, pad, Precision::Double).unwrap();
        let (ey, em) = naive_partial_conv(&x, m.tensor(), &w, &b, stride, pad);
        prop_assert!(max_rel(&y, &ey) < 1e-10);
        prop_assert_eq!(nm.tensor().data(), em.data());
    }

    #[test]
    fn mask_update_is_dilation_and_only_grows(
        seed in any::<u64>(), k in prop::sample::select(vec![3usize, 7]),
        h in 3usize..20, p_valid in 0.0f64..0.3,
    ) {
        let m = random_mask(1, h, h + 2, p_valid, seed);
        let grown = mask_update_only(&m, k, 1, k / 2).unwrap();
        let dilated = mask_dilation(m.tensor(), k, 1);
        prop_assert_eq!(grown.tensor().data(), dilated.data());
        prop_assert!(grown.covers(&m));
        prop_assert!(grown.hole_count() <= m.hole_count());
    }

    #[test]
    fn softmax_slices_are_distributions(seed in any::<u64>(), c in 1usize..8) {
        let x = uniform([2, c, 3, 3], seed).scale(20.0);
        let y = ops::softmax_channels(&x);
        for b in 0..2 {
            for yy in 0..3 {
                for xx in 0..3 {
                    let s: f64 = (0..c).map(|ch| y.at(b, ch, yy, xx)).sum();
                    prop_assert!((s - 1.0).abs() < 1e-12);
                    prop_assert!((0..c).all(|ch| y.at(b, ch, yy, xx) >= 0.0));
                }
            }
        }
    }

    #[test]
    fn blended_attention_scores_stay_distributions(
        seed in any::<u64>(), side in 1usize..5, lambda in -40.0f64..40.0,
    ) {
        let tape = Tape::inference(Precision::Double);
        let f0 = tape.constant(uniform([1, 4, side, side], seed));
        let f1 = tape.constant(uniform([1, 4, side, side], seed ^ 1));
        let s0 = smooth_and_softmax(&tape, &cosine_scores(&tape, &f0), 3).unwrap();
        let s1 = smooth_and_softmax(&tape, &cosine_scores(&tape, &f1), 3).unwrap();
        let state = AttentionState {
            prev_score: s0,
            prev_valid: random_mask(1, side, side, 0.5, seed ^ 2),
            recurrence_index: 0,
        };
        let lam = tape.constant(Tensor::scalar(lambda));
        let blended = blend_scores(&tape, &s1, Some(&state), 1, &lam).unwrap().to_tensor();
        let keys = side * side;
        for y in 0..side {
            for x in 0..side {
                let s: f64 = (0..keys).map(|k| blended.at(0, k, y, x)).sum();
                prop_assert!((s - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn adaptive_merge_stays_within_valid_features(seed in any::<u64>(), n in 1usize..5) {
        let tape = Tape::inference(Precision::Double);
        let mut state = RecurrenceState::default();
        let mut mask = random_mask(1, 5, 5, 0.3, seed);
        for i in 0..n {
            let f = uniform([1, 2, 5, 5], seed ^ (i as u64 + 10));
            let f = ops::broadcast_binary(&f, mask.tensor(), |a, m| a * m).unwrap();
            let next = mask_update_only(&mask, 3, 1, 1).unwrap();
            state.push(tape.constant(f), mask.clone(), mask.clone()).unwrap();
            mask = next;
        }
        let merged = merge_features(&tape, &state, MergeMode::Adaptive).unwrap().to_tensor();
        for c in 0..2 {
            for y in 0..5 {
                for x in 0..5 {
                    let vals: Vec<f64> = state
                        .features
                        .iter()
                        .zip(&state.masks)
                        .filter(|(_, m)| m.is_valid(0, y, x))
                        .map(|(f, _)| f.value().at(0, c, y, x))
                        .collect();
                    let v = merged.at(0, c, y, x);
                    if vals.is_empty() {
                        prop_assert_eq!(v, 0.0);
                    } else {
                        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn composite_keeps_known_pixels(seed in any::<u64>(), p_valid in 0.0f64..1.0) {
        let tape = Tape::inference(Precision::Double);
        let img = uniform([1, 3, 6, 6], seed);
        let pred = uniform([1, 3, 6, 6], seed ^ 1);
        let m = random_mask(1, 6, 6, p_valid, seed ^ 2);
        let c = composite(&tape, &tape.constant(img.clone()), &tape.constant(pred.clone()), &m)
            .unwrap()
            .to_tensor();
        for ch in 0..3 {
            for y in 0..6 {
                for x in 0..6 {
                    let want = if m.is_valid(0, y, x) { img.at(0, ch, y, x) } else { pred.at(0, ch, y, x) };
                    prop_assert_eq!(c.at(0, ch, y, x), want);
                }
            }
        }
    }

    #[test]
    fn weight_files_round_trip(seed in any::<u64>(), entries in 1usize..6) {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        for i in 0..entries {
            let shape = [r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4)];
            let t = Tensor::uniform(shape, -5.0, 5.0, &mut r).rounded(Precision::Single);
            if i % 2 == 0 {
                store.insert_param(&format!("p{i}"), t).unwrap();
            } else {
                store.insert_buffer(&format!("b{i}"), t).unwrap();
            }
        }
        let bytes = weights::encode(&store);
        let mut back = store.clone();
        for name in store.names() {
            let z = Tensor::zeros(store.value(name).unwrap().shape());
            back.set_value(name, z).unwrap();
        }
        weights::decode_into(&bytes, &mut back).unwrap();
        prop_assert!(back.same_values(&store));
        prop_assert_eq!(weights::encode(&back), bytes);
    }

    #[test]
    fn pnm_bytes_round_trip(seed in any::<u64>(), w in 1usize..9, h in 1usize..9, color in any::<bool>()) {
        let channels = if color { 3 } else { 1 };
        let mut r = rng(seed);
        let data: Vec<u8> = (0..w * h * channels).map(|_| r.gen()).collect();
        let img = Image { width: w, height: h, channels, data };
        let bytes = img.encode();
        let back = Image::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &img);
        let through_tensor = Image::from_tensor(&img.to_tensor(), 0).unwrap();
        prop_assert_eq!(&through_tensor, &img);
        let single = Image::from_tensor(&img.to_tensor().rounded(Precision::Single), 0).unwrap();
        prop_assert_eq!(single, img);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in any::<u64>()) {
        let a = Tensor::uniform([1, 3, 16, 16], 0.0, 1.0, &mut rng(seed));
        let b = Tensor::uniform([1, 3, 16, 16], 0.0, 1.0, &mut rng(seed ^ 1));
        let (ab, ba) = (metrics::ssim(&a, &b).unwrap(), metrics::ssim(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
        prop_assert!((metrics::ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!(metrics::psnr(&a, &b).unwrap().is_finite());
    }

    #[test]
    fn run_config_text_round_trips(
        iter in 1usize..10, depth in 1usize..=3, scale in prop::sample::select(vec![1usize, 2, 4, 8]),
        attention in any::<bool>(), mode in prop::sample::select(vec!["adaptive", "average", "last"]),
        seed in any::<u64>(),
    ) {
        let mut cfg = RunConfig::default();
        cfg.iter_num = iter;
        cfg.depth = depth;
        cfg.channel_scale = scale;
        cfg.attention = attention;
        cfg.merge_mode = mode.parse().unwrap();
        cfg.seed = seed;
        prop_assert_eq!(RunConfig::parse(&cfg.to_string()).unwrap(), cfg);
    }
}
