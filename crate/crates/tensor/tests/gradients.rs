use demonet_tensor::gradcheck::check_gradients;
use demonet_tensor::{Conv2dConfig, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Σ y ⊙ R for a fixed random R, so every output element contributes.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let r = Tensor::randn(tape.shape(y).to_vec(), 1.0, &mut rng(seed));
    let p = tape.mul_const(y, r)?;
    tape.sum(p)
}

/// Values bounded away from zero, for inputs to kinks such as relu.
fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = r.random_range(0.05..1.0);
            if r.random_bool(0.5) { mag } else { -mag }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values spaced well beyond the finite-difference step.
fn distinct(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, r.random_range(0..=i));
    }
    let data = idx.iter().map(|&k| k as f64 * 0.01).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn random_shape(r: &mut ChaCha8Rng) -> [usize; 4] {
    [
        r.random_range(1..=4),
        r.random_range(1..=8),
        r.random_range(3..=12),
        r.random_range(3..=12),
    ]
}

fn assert_ok(name: &str, err: f64) {
    assert!(err <= TOL, "{name}: relative error {err:e}");
}

#[test]
fn conv2d_gradients() {
    let mut r = rng(1);
    for trial in 0..4 {
        let [b, c, h, w] = random_shape(&mut r);
        let k = r.random_range(1..=3.min(h).min(w));
        let cfg = Conv2dConfig::square(k, r.random_range(1..=2), r.random_range(0..k));
        let o = r.random_range(1..=4);
        let inputs = [
            Tensor::randn([b, c, h, w], 1.0, &mut r),
            Tensor::randn([o, c, k, k], 0.5, &mut r),
            Tensor::randn([o], 0.5, &mut r),
        ];
        let rep = check_gradients(&inputs, H, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), cfg)?;
            project(t, y, trial)
        })
        .unwrap();
        assert_ok("conv2d", rep.max_rel_error());
    }
}

#[test]
fn conv_transpose2d_gradients() {
    let mut r = rng(2);
    for trial in 0..4 {
        let b = r.random_range(1..=3);
        let (c, h, w) = (r.random_range(1..=6), r.random_range(2..=6), r.random_range(2..=6));
        let k = r.random_range(2..=4);
        let cfg = Conv2dConfig::square(k, r.random_range(1..=2), r.random_range(0..k / 2 + 1));
        let o = r.random_range(1..=4);
        let inputs = [
            Tensor::randn([b, c, h, w], 1.0, &mut r),
            Tensor::randn([c, o, k, k], 0.5, &mut r),
            Tensor::randn([o], 0.5, &mut r),
        ];
        let rep = check_gradients(&inputs, H, |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), cfg)?;
            project(t, y, trial)
        })
        .unwrap();
        assert_ok("conv_transpose2d", rep.max_rel_error());
    }
}

#[test]
fn batch_norm_gradients_train_and_eval() {
    let mut r = rng(3);
    for train in [true, false] {
        let [b, c, h, w] = random_shape(&mut r);
        let rm = Tensor::randn([c], 0.3, &mut r);
        let rv = Tensor::full([c], 1.7);
        let inputs = [
            Tensor::randn([b, c, h, w], 1.0, &mut r),
            Tensor::randn([c], 1.0, &mut r),
            Tensor::randn([c], 1.0, &mut r),
        ];
        let rep = check_gradients(&inputs, H, |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], (&rm, &rv), train, 1e-5)?;
            project(t, y, 7)
        })
        .unwrap();
        assert_ok("batch_norm", rep.max_rel_error());
    }
}

#[test]
fn elementwise_activation_gradients() {
    let mut r = rng(4);
    let shape = random_shape(&mut r);
    let x = away_from_zero(&shape, &mut r);
    type Act = fn(&mut Tape, Var) -> Result<Var>;
    let acts: [(&str, Act); 5] = [
        ("relu", |t, x| t.relu(x)),
        ("tanh", |t, x| t.tanh(x)),
        ("sigmoid", |t, x| t.sigmoid(x)),
        ("exp", |t, x| t.exp(x)),
        ("square", |t, x| t.square(x)),
    ];
    for (name, act) in acts {
        let rep = check_gradients(std::slice::from_ref(&x), H, |t, v| {
            let y = act(t, v[0])?;
            project(t, y, 11)
        })
        .unwrap();
        assert_ok(name, rep.max_rel_error());
    }
}

#[test]
fn pooling_gradients() {
    let mut r = rng(5);
    for trial in 0..3 {
        let shape = random_shape(&mut r);
        let x = distinct(&shape, &mut r);
        let rep = check_gradients(std::slice::from_ref(&x), H, |t, v| {
            let y = t.max_pool2d(v[0], Conv2dConfig::square(3, 2, 1))?;
            project(t, y, trial)
        })
        .unwrap();
        assert_ok("max_pool2d", rep.max_rel_error());

        let out = (r.random_range(1..=shape[2]), r.random_range(1..=shape[3]));
        let rep = check_gradients(std::slice::from_ref(&x), H, |t, v| {
            let y = t.adaptive_avg_pool2d(v[0], out)?;
            project(t, y, trial)
        })
        .unwrap();
        assert_ok("adaptive_avg_pool2d", rep.max_rel_error());
    }
}

#[test]
fn linear_and_structural_gradients() {
    let mut r = rng(6);
    let (b, fin, fout) = (4, 7, 5);
    let inputs = [
        Tensor::randn([b, fin], 1.0, &mut r),
        Tensor::randn([fout, fin], 0.5, &mut r),
        Tensor::randn([fout], 0.5, &mut r),
    ];
    let rep = check_gradients(&inputs, H, |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        project(t, y, 1)
    })
    .unwrap();
    assert_ok("linear", rep.max_rel_error());

    let x = Tensor::randn([4, 6, 3, 3], 1.0, &mut r);
    let rep = check_gradients(std::slice::from_ref(&x), H, |t, v| {
        let halves = t.chunk(v[0], 1, 2)?;
        let picked = t.index_select(halves[1], &[2, 0, 2])?;
        let rest = t.index_select(halves[0], &[1])?;
        let cat = t.concat(&[picked, rest])?;
        let flat = t.flatten(cat)?;
        let s = t.add_scalar(flat, 0.3)?;
        let s = t.scale(s, -1.5)?;
        project(t, s, 2)
    })
    .unwrap();
    assert_ok("narrow/index_select/concat", rep.max_rel_error());

    let p = Tensor::new([3, 4], (0..12).map(|i| 0.2 + i as f64 * 0.1).collect()).unwrap();
    let rep = check_gradients(std::slice::from_ref(&p), H, |t, v| {
        let y = t.row_normalize(v[0])?;
        project(t, y, 3)
    })
    .unwrap();
    assert_ok("row_normalize", rep.max_rel_error());
}

#[test]
fn loss_gradients() {
    let mut r = rng(7);
    let logits = Tensor::randn([5, 4], 2.0, &mut r);
    let labels = [0, 3, 1, 1, 2];
    let rep = check_gradients(std::slice::from_ref(&logits), H, |t, v| t.cross_entropy(v[0], &labels))
        .unwrap();
    assert_ok("cross_entropy", rep.max_rel_error());

    let a = Tensor::randn([3, 2, 4], 1.0, &mut r);
    let b = Tensor::randn([3, 2, 4], 1.0, &mut r);
    let rep = check_gradients(&[a, b], H, |t, v| t.mse(v[0], v[1])).unwrap();
    assert_ok("mse", rep.max_rel_error());
}

#[test]
fn product_rule_through_shared_input() {
    let x = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
    let rep = check_gradients(std::slice::from_ref(&x), H, |t, v| {
        let y = t.mul(v[0], v[0])?;
        let z = t.sub(y, v[0])?;
        let m = t.mean(z)?;
        t.add(m, m)
    })
    .unwrap();
    assert_ok("shared input", rep.max_rel_error());
}
