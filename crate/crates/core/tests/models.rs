use demonet::model::checkpoint::{load_demonet, load_vae, save_demonet, save_vae, SaveInfo};
use demonet::model::{
    reparameterize, vae_loss, Demonet, DemonetConfig, LatentVars, Vae, VaeConfig,
};
use demonet_tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_demonet(seed: u64) -> Demonet {
    let cfg = DemonetConfig {
        widths: [4, 4, 8, 8],
        ..DemonetConfig::new(16, 3, 4)
    };
    Demonet::new(cfg, seed).unwrap()
}

fn rows(t: &Tensor, b: usize) -> Vec<Vec<f64>> {
    t.data().chunks(t.numel() / b).map(|r| r.to_vec()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn kl_is_nonnegative(mu in prop::collection::vec(-3.0f64..3.0, 8), lv in prop::collection::vec(-4.0f64..4.0, 8)) {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros([1, 1, 2, 2])).unwrap();
        let m = t.leaf(Tensor::new([2, 2, 1, 2], mu).unwrap()).unwrap();
        let l = t.leaf(Tensor::new([2, 2, 1, 2], lv).unwrap()).unwrap();
        let (_, parts) = vae_loss(&mut t, x, x, LatentVars { mu: m, logvar: l }).unwrap();
        prop_assert!(parts.kl >= 0.0);
        prop_assert_eq!(parts.recon, 0.0);
    }

    #[test]
    fn decoder_output_lies_in_unit_range(seed in 0u64..50, scale in 0.1f64..20.0) {
        let mut vae = Vae::new(VaeConfig { hidden: 4, latent: 3 }, seed).unwrap();
        let z = Tensor::randn([2, 3, 1, 5], scale, &mut ChaCha8Rng::seed_from_u64(seed));
        let y = vae.decode_eval(&z).unwrap();
        prop_assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn prediction_is_permutation_equivariant(seed in 0u64..100, perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut model = small_demonet(seed);
        let mut r = ChaCha8Rng::seed_from_u64(seed + 1);
        let b = 6;
        let x = Tensor::randn([b, 1, 12, 10], 1.0, &mut r);
        let d = Tensor::randn([b, 16], 1.0, &mut r);
        let (logits, routing) = model.predict(&x, &d).unwrap();

        let mut order: Vec<usize> = (0..b).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let pick = |t: &Tensor| {
            let rs = rows(t, b);
            let mut shape = t.shape().to_vec();
            shape[0] = b;
            Tensor::new(shape, order.iter().flat_map(|&i| rs[i].clone()).collect()).unwrap()
        };
        let (plogits, prouting) = model.predict(&pick(&x), &pick(&d)).unwrap();
        let (a, p) = (rows(&logits, b), rows(&plogits, b));
        for (k, &i) in order.iter().enumerate() {
            prop_assert_eq!(prouting.selected[k], routing.selected[i]);
            for (u, v) in p[k].iter().zip(&a[i]) {
                prop_assert!((u - v).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn reparameterized_samples_have_the_posterior_moments() {
    let (mu, logvar) = (0.7, (0.25f64).ln());
    let n = 20_000;
    let mut t = Tape::inference();
    let m = t.constant(Tensor::full([n], mu)).unwrap();
    let l = t.constant(Tensor::full([n], logvar)).unwrap();
    let z = reparameterize(&mut t, LatentVars { mu: m, logvar: l }, 3).unwrap();
    let s = t.value(z).data();
    let mean = s.iter().sum::<f64>() / n as f64;
    let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    // Standard errors: 0.5/√n ≈ 0.0035 for the mean, ~0.0025 for the variance.
    assert!((mean - mu).abs() < 0.015, "{mean}");
    assert!((var - 0.25).abs() < 0.012, "{var}");
}

#[test]
fn router_inputs_are_divided_by_their_training_rms() {
    let mut model = small_demonet(0);
    let train: Vec<Vec<f64>> = (0..4).map(|i| (0..16).map(|j| (i + j) as f64).collect()).collect();
    model.fit_input_scaling(&train).unwrap();
    let scaled = model.scale_inputs(&train).unwrap();
    for j in 0..16 {
        let ms = (0..4).map(|i| scaled.data()[i * 16 + j].powi(2)).sum::<f64>() / 4.0;
        assert!((ms - 1.0).abs() < 1e-12, "bin {j}: {ms}");
    }
}

#[test]
fn checkpoints_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut vae = Vae::new(VaeConfig { hidden: 4, latent: 3 }, 8).unwrap();
    save_vae(&dir.path().join("vae"), &vae, &SaveInfo { seed: 8, ..SaveInfo::default() }).unwrap();
    let (mut back, m) = load_vae(&dir.path().join("vae")).unwrap();
    assert_eq!(m.seed, 8);
    assert_eq!(back.store.fingerprint_all(), vae.store.fingerprint_all());
    let z = Tensor::randn([1, 3, 1, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(back.decode_eval(&z).unwrap(), vae.decode_eval(&z).unwrap());

    let mut model = small_demonet(2);
    model.fit_input_scaling(&[vec![2.0; 16]]).unwrap();
    let info = SaveInfo { seed: 2, epoch: Some(4), ..SaveInfo::default() };
    save_demonet(&dir.path().join("net"), &model, (&vae, &info), &info).unwrap();
    let (mut m2, man, v2, _) = load_demonet(&dir.path().join("net")).unwrap();
    assert_eq!(man.epoch, Some(4));
    assert_eq!(m2.store.fingerprint_all(), model.store.fingerprint_all());
    assert_eq!(v2.store.fingerprint_all(), vae.store.fingerprint_all());
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let (x, d) = (Tensor::randn([2, 1, 12, 10], 1.0, &mut r), Tensor::randn([2, 16], 1.0, &mut r));
    assert_eq!(m2.predict(&x, &d).unwrap().0, model.predict(&x, &d).unwrap().0);
}
