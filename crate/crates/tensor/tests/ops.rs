use demonet_tensor::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, Session};
use demonet_tensor::{
    AdamW, AdamWConfig, Conv2dConfig, ParamStore, Tape, Tensor, TensorError, WarmupCosine,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct nested-loop cross-correlation, independent of the im2col path.
fn naive_conv(x: &Tensor, w: &Tensor, cfg: Conv2dConfig) -> Tensor {
    let [b, c, h, wd] = x.dims4("t").unwrap();
    let [o, _, kh, kw] = w.dims4("t").unwrap();
    let oh = (h + 2 * cfg.padding.0 - kh) / cfg.stride.0 + 1;
    let ow = (wd + 2 * cfg.padding.1 - kw) / cfg.stride.1 + 1;
    let mut out = vec![0.0; b * o * oh * ow];
    for bi in 0..b {
        for oi in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for a in 0..kh {
                            for e in 0..kw {
                                let r = (i * cfg.stride.0 + a) as isize - cfg.padding.0 as isize;
                                let q = (j * cfg.stride.1 + e) as isize - cfg.padding.1 as isize;
                                if r < 0 || q < 0 || r as usize >= h || q as usize >= wd {
                                    continue;
                                }
                                s += x.data()[((bi * c + ci) * h + r as usize) * wd + q as usize]
                                    * w.data()[((oi * c + ci) * kh + a) * kw + e];
                            }
                        }
                    }
                    out[((bi * o + oi) * oh + i) * ow + j] = s;
                }
            }
        }
    }
    Tensor::new([b, o, oh, ow], out).unwrap()
}

#[test]
fn conv2d_matches_nested_loops() {
    let mut r = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..10 {
        let x = Tensor::randn([2, 3, r.random_range(4..9), r.random_range(4..9)], 1.0, &mut r);
        let k = r.random_range(1..4);
        let cfg = Conv2dConfig::square(k, r.random_range(1..3), r.random_range(0..k));
        let w = Tensor::randn([4, 3, k, k], 1.0, &mut r);
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x.clone()).unwrap(), t.constant(w.clone()).unwrap());
        let y = t.conv2d(xv, wv, None, cfg).unwrap();
        let want = naive_conv(&x, &w, cfg);
        assert_eq!(t.shape(y), want.shape());
        for (a, b) in t.value(y).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn identity_kernel_conv_is_identity() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::randn([2, 1, 5, 6], 1.0, &mut r);
    let mut t = Tape::new();
    let xv = t.constant(x.clone()).unwrap();
    let w = t.constant(Tensor::ones([1, 1, 1, 1])).unwrap();
    let b = t.constant(Tensor::zeros([1])).unwrap();
    let y = t.conv2d(xv, w, Some(b), Conv2dConfig::square(1, 1, 0)).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn transpose_conv_k4_s2_p1_doubles_extent() {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    for (h, w) in [(1, 287), (7, 5), (14, 586)] {
        let mut t = Tape::new();
        let x = t.constant(Tensor::randn([1, 2, h, w], 1.0, &mut r)).unwrap();
        let k = t.constant(Tensor::randn([2, 3, 4, 4], 1.0, &mut r)).unwrap();
        let y = t.conv_transpose2d(x, k, None, Conv2dConfig::square(4, 2, 1)).unwrap();
        assert_eq!(t.shape(y), &[1, 3, 2 * h, 2 * w]);
    }
}

#[test]
fn conv_and_transpose_are_adjoint() {
    let mut r = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let (b, cin, cout) = (r.random_range(1..4), r.random_range(1..5), r.random_range(1..5));
        let (kh, kw) = (r.random_range(1..5), r.random_range(1..5));
        let cfg = Conv2dConfig {
            kernel: (kh, kw),
            stride: (r.random_range(1..4), r.random_range(1..4)),
            padding: (r.random_range(0..kh), r.random_range(0..kw)),
        };
        // Choose an input size consistent with an exact transpose round trip.
        let (oh, ow) = (r.random_range(1..6), r.random_range(1..6));
        let h = ((oh - 1) * cfg.stride.0 + kh).checked_sub(2 * cfg.padding.0);
        let w = ((ow - 1) * cfg.stride.1 + kw).checked_sub(2 * cfg.padding.1);
        let (Some(h @ 1..), Some(w @ 1..)) = (h, w) else {
            continue;
        };
        let x = Tensor::randn([b, cin, h, w], 1.0, &mut r);
        let y = Tensor::randn([b, cout, oh, ow], 1.0, &mut r);
        let k = Tensor::randn([cout, cin, kh, kw], 1.0, &mut r);
        let mut t = Tape::new();
        let (xv, yv, kv) = (
            t.constant(x.clone()).unwrap(),
            t.constant(y.clone()).unwrap(),
            t.constant(k).unwrap(),
        );
        let cx = t.conv2d(xv, kv, None, cfg).unwrap();
        let ty = t.conv_transpose2d(yv, kv, None, cfg).unwrap();
        let lhs = t.value(cx).dot(&y).unwrap();
        let rhs = x.dot(t.value(ty)).unwrap();
        assert!(
            (lhs - rhs).abs() <= 1e-9 * lhs.abs().max(rhs.abs()).max(1.0),
            "{lhs} vs {rhs} for {cfg:?}"
        );
    }
}

#[test]
fn backward_basics() {
    let x = Tensor::new([4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
    let mut t = Tape::new();
    let v = t.leaf(x.clone()).unwrap();
    let s = t.sum(v).unwrap();
    assert_eq!(t.backward(s).unwrap().wrt(v).unwrap(), &Tensor::ones([4]));

    let mut t = Tape::new();
    let v = t.leaf(x.clone()).unwrap();
    let sq = t.square(v).unwrap();
    let s = t.sum(sq).unwrap();
    let half = t.scale(s, 0.5).unwrap();
    assert_eq!(t.backward(half).unwrap().wrt(v).unwrap(), &x);

    assert!(matches!(t.backward(sq), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn losses_on_trivial_inputs() {
    let mut t = Tape::new();
    let logits = t.constant(Tensor::full([3, 5], 0.7)).unwrap();
    let ce = t.cross_entropy(logits, &[0, 4, 2]).unwrap();
    assert!((t.value(ce).item().unwrap() - 5f64.ln()).abs() < 1e-12);
    assert!(matches!(
        t.cross_entropy(logits, &[0, 5, 2]),
        Err(TensorError::LabelOutOfRange { label: 5, classes: 5 })
    ));
    let x = t.constant(Tensor::full([2, 3], 1.5)).unwrap();
    let m = t.mse(x, x).unwrap();
    assert_eq!(t.value(m).item().unwrap(), 0.0);
    // Large logits stay finite thanks to max subtraction.
    let big = t.constant(Tensor::new([1, 2], vec![1000.0, -1000.0]).unwrap()).unwrap();
    let ce = t.cross_entropy(big, &[1]).unwrap();
    assert!((t.value(ce).item().unwrap() - 2000.0).abs() < 1e-9);
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros([2, 3])).unwrap();
    let b = t.constant(Tensor::zeros([3, 2])).unwrap();
    let err = t.add(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
}

#[test]
fn non_finite_values_fail_fast() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::full([2], 800.0)).unwrap();
    assert!(matches!(t.exp(a), Err(TensorError::NonFinite { op: "exp" })));
}

#[test]
fn batch_norm_running_stats_and_eval_affinity() {
    let mut r = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::new();
    let bn = BatchNorm2d::new(&mut store, "bn", 2).unwrap();
    let x = Tensor::randn([4, 2, 3, 3], 2.0, &mut r);
    {
        let mut s = Session::train(&mut store);
        let xv = s.input(x.clone()).unwrap();
        bn.forward(&mut s, xv).unwrap();
    }
    // Oracle: running = 0.9·init + 0.1·batch statistic (unbiased variance).
    for ch in 0..2 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|b| x.data()[(b * 2 + ch) * 9..(b * 2 + ch + 1) * 9].to_vec())
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((store.get(bn.running_mean).data()[ch] - 0.1 * mean).abs() < 1e-12);
        assert!((store.get(bn.running_var).data()[ch] - (0.9 + 0.1 * var)).abs() < 1e-12);
    }
    // Eval is affine per channel: f(a·x + (1−a)·y) = a·f(x) + (1−a)·f(y).
    let y = Tensor::randn([4, 2, 3, 3], 1.0, &mut r);
    let mix = Tensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(y.data()).map(|(p, q)| 0.3 * p + 0.7 * q).collect(),
    )
    .unwrap();
    let before = store.fingerprint_all();
    let mut s = Session::eval(&mut store);
    let outs: Vec<Tensor> = [x, y, mix]
        .into_iter()
        .map(|v| {
            let iv = s.input(v).unwrap();
            let o = bn.forward(&mut s, iv).unwrap();
            s.tape.value(o).clone()
        })
        .collect();
    for i in 0..outs[0].numel() {
        let lin = 0.3 * outs[0].data()[i] + 0.7 * outs[1].data()[i];
        assert!((outs[2].data()[i] - lin).abs() < 1e-12);
    }
    drop(s);
    assert_eq!(store.fingerprint_all(), before);
}

#[test]
fn layers_register_named_parameters() {
    let mut r = ChaCha8Rng::seed_from_u64(15);
    let mut store = ParamStore::new();
    let conv = Conv2d::new(&mut store, "enc.conv1", 1, 8, Conv2dConfig::square(3, 1, 1), true, &mut r)
        .unwrap();
    let up = ConvTranspose2d::new(&mut store, "dec.up1", 8, 1, Conv2dConfig::square(4, 2, 1), false, &mut r)
        .unwrap();
    assert_eq!(store.name(conv.weight), "enc.conv1.weight");
    assert_eq!(store.get(up.weight).shape(), &[8, 1, 4, 4]);
    assert!(Conv2d::new(&mut store, "enc.conv1", 1, 8, Conv2dConfig::square(3, 1, 1), true, &mut r).is_err());
    // He-normal spread: variance close to 2 / fan_in over many draws.
    let mut big = ParamStore::new();
    let c = Conv2d::new(&mut big, "c", 16, 64, Conv2dConfig::square(3, 1, 1), false, &mut r).unwrap();
    let w = big.get(c.weight);
    let var = w.data().iter().map(|v| v * v).sum::<f64>() / w.numel() as f64;
    assert!((var - 2.0 / 144.0).abs() < 0.1 * 2.0 / 144.0);
}

/// Reference AdamW step written out for one scalar.
fn adamw_reference(theta: f64, grads: &[f64], lr: f64, wd: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut m, mut v, mut th) = (0.0, 0.0, theta);
    let mut out = Vec::new();
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        th -= lr * wd * th;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        th -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        out.push(th);
    }
    out
}

fn grads_for(store: &ParamStore, g: f64) -> demonet_tensor::Gradients {
    // Builds a gradient of exactly `g` for the scalar parameter "p".
    let id = store.id("p").unwrap();
    let mut t = Tape::new();
    let p = t.param(store, id);
    let c = t.scale(p, g).unwrap();
    let s = t.sum(c).unwrap();
    t.backward(s).unwrap()
}

#[test]
fn adamw_matches_hand_stepped_reference() {
    let mut store = ParamStore::new();
    let id = store.add_param("p", Tensor::new([1], vec![1.5]).unwrap()).unwrap();
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: 1e-3,
        ..Default::default()
    });
    let want = adamw_reference(1.5, &[0.3; 5], 5e-3, 1e-3);
    for w in want {
        let g = grads_for(&store, 0.3);
        opt.step(&mut store, &g, 5e-3).unwrap();
        assert!((store.get(id).data()[0] - w).abs() < 1e-12);
    }
    assert_eq!(opt.moments(id).unwrap().step, 5);
}

#[test]
fn adamw_decoupled_decay_and_zero_gradient() {
    let mut store = ParamStore::new();
    let id = store.add_param("p", Tensor::new([1], vec![2.0]).unwrap()).unwrap();
    let mut plain = AdamW::new(AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    });
    let g = grads_for(&store, 0.0);
    plain.step(&mut store, &g, 0.1).unwrap();
    assert_eq!(store.get(id).data()[0], 2.0);

    let mut decay = AdamW::new(AdamWConfig {
        weight_decay: 0.1,
        ..Default::default()
    });
    let mut expect = 2.0;
    for _ in 0..3 {
        let g = grads_for(&store, 0.0);
        decay.step(&mut store, &g, 0.1).unwrap();
        expect *= 1.0 - 0.01;
        assert!((store.get(id).data()[0] - expect).abs() < 1e-15);
    }
}

#[test]
fn adamw_rejects_missing_gradients_and_skips_untouched() {
    let mut store = ParamStore::new();
    let a = store.add_param("p", Tensor::ones([2])).unwrap();
    let b = store.add_param("q", Tensor::ones([2])).unwrap();
    let g = grads_for(&store, 1.0);
    let mut opt = AdamW::new(AdamWConfig::default());
    assert!(matches!(
        opt.step_params(&mut store, &g, &[a, b], 1e-3),
        Err(TensorError::MissingGrad(name)) if name == "q"
    ));
    let before = store.fingerprint(&[b]);
    assert_eq!(opt.step(&mut store, &g, 1e-3).unwrap(), 1);
    assert_eq!(store.fingerprint(&[b]), before);
}

#[test]
fn schedule_endpoints() {
    let s = WarmupCosine::new(5e-3, 5.0, 200.0).unwrap();
    assert_eq!(s.lr_at(0.0).unwrap(), 0.0);
    assert_eq!(s.lr_at(5.0).unwrap(), 5e-3);
    assert!((s.lr_at(102.5).unwrap() - 2.5e-3).abs() < 1e-12);
    let step = 5e-3 * (1.0 - (std::f64::consts::PI / 195.0).cos()) / 2.0;
    assert!(s.lr_at(199.0).unwrap() <= step + 1e-15);
    assert!(s.lr_at(200.0).is_err());
    assert!(s.lr_at(-0.5).is_err());
}

proptest! {
    #[test]
    fn schedule_is_bounded_and_peaks_at_warmup(e in 0.0f64..200.0) {
        let s = WarmupCosine::new(5e-3, 5.0, 200.0).unwrap();
        let lr = s.lr_at(e).unwrap();
        prop_assert!((0.0..=5e-3).contains(&lr));
    }

    #[test]
    fn index_select_then_sum_counts_multiplicity(idx in proptest::collection::vec(0usize..5, 1..12)) {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::randn([5, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(0))).unwrap();
        let y = t.index_select(x, &idx).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        let gx = g.wrt(x).unwrap();
        for row in 0..5 {
            let count = idx.iter().filter(|&&i| i == row).count() as f64;
            for c in 0..3 {
                prop_assert_eq!(gx.data()[row * 3 + c], count);
            }
        }
    }
}
