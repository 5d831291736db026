use std::f64::consts::PI;

use demonet::demon::{demon1d, demon2d, find_fundamental, subband_edges, DemonParams};
use demonet::dsp::synth::{synthesize, Carrier, ModulationSpec};
use demonet::dsp::wav::{read_wav, write_wav};
use demonet::dsp::{bandpass, normalize, Waveform};
use proptest::prelude::*;

fn tone(hz: f64, sr: u32, secs: f64) -> Waveform {
    let n = (secs * sr as f64) as usize;
    let s = (0..n).map(|i| (2.0 * PI * hz * i as f64 / sr as f64).sin()).collect();
    Waveform::new(s, sr, "t").unwrap()
}

fn rms_mid(w: &Waveform) -> f64 {
    let q = w.len() / 4;
    let mid = &w.samples[q..w.len() - q];
    (mid.iter().map(|v| v * v).sum::<f64>() / mid.len() as f64).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bandpass_keeps_the_band_and_rejects_the_rest(f in 330.0f64..500.0) {
        let sr = 8000;
        let inside = bandpass(&tone(f, sr, 1.0), 200.0, 800.0).unwrap();
        prop_assert!((rms_mid(&inside) / (0.5f64).sqrt() - 1.0).abs() < 0.02);
        let outside = bandpass(&tone(f * 4.0, sr, 1.0), 200.0, 800.0).unwrap();
        prop_assert!(rms_mid(&outside) < 0.01 * (0.5f64).sqrt());
    }

    #[test]
    fn normalized_signals_have_unit_moments(xs in prop::collection::vec(-5.0f64..5.0, 2..300)) {
        prop_assume!(xs.iter().any(|&x| (x - xs[0]).abs() > 1e-6));
        let w = normalize(&Waveform::new(xs, 100, "x").unwrap()).unwrap();
        let n = w.len() as f64;
        let mean = w.samples.iter().sum::<f64>() / n;
        let var = w.samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn subbands_partition_the_passband(lo in 0.0f64..200.0, width in 500.0f64..4000.0, interval in 50.0f64..300.0) {
        let hi = lo + width;
        let edges = subband_edges((lo, hi), interval, None).unwrap();
        prop_assert_eq!(edges.len(), (width / interval).floor() as usize);
        for (k, &(a, b)) in edges.iter().enumerate() {
            prop_assert!((b - a - interval).abs() < 1e-9);
            prop_assert!((a - (lo + k as f64 * interval)).abs() < 1e-9);
            prop_assert!(b <= hi + 1e-9);
        }
    }

    #[test]
    fn demon_recovers_the_shaft_rate(mod_hz in 2.0f64..25.0, seed in 0u64..1000) {
        let p = DemonParams {
            passband: (20.0, 1980.0),
            interval_hz: 70.0,
            mod_f_max_hz: 64.0,
            n_mod_bins: 128,
            ..DemonParams::default()
        };
        let mut spec = ModulationSpec {
            carrier: Carrier::Broadband { lo_hz: 300.0, hi_hz: 1500.0 },
            ..ModulationSpec::tone(1.0, mod_hz, 0.6, 20.0)
        };
        spec.noise_floor = spec.noise_floor_for_snr(15.0);
        let w = synthesize(&spec, 4000, seed, "p").unwrap();
        let d = demon1d(&demon2d(&w, &p).unwrap());
        let f = find_fundamental(&d, 1.0, 30.0).unwrap();
        prop_assert!((f - mod_hz).abs() <= d.mod_bin_hz, "{f} vs {mod_hz}");
    }
}

#[test]
fn demon_shape_follows_parameters() {
    let p = DemonParams {
        passband: (20.0, 1980.0),
        interval_hz: 70.0,
        mod_f_max_hz: 64.0,
        n_mod_bins: 128,
        ..DemonParams::default()
    };
    let w = synthesize(&ModulationSpec::tone(600.0, 5.0, 0.5, 10.0), 4000, 0, "s").unwrap();
    let d = demon2d(&w, &p).unwrap();
    assert_eq!(d.values.dim(), (28, 128));
    assert!(d.values.iter().all(|v| v.is_finite() && *v >= 0.0));
    assert!((d.mod_bin_hz - 64.0 / 127.0).abs() < 1e-12);
}

#[test]
fn wav_round_trip_is_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rt.wav");
    let t = tone(440.0, 8000, 0.25);
    let w = t.with_samples(t.samples.iter().map(|v| 0.8 * v).collect());
    write_wav(&path, &w).unwrap();
    let r = read_wav(&path).unwrap();
    assert_eq!(r.sample_rate, 8000);
    assert_eq!(r.track_id, "rt");
    assert_eq!(r.len(), w.len());
    let worst = w.samples.iter().zip(&r.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 1.0 / 32768.0, "{worst}");
}
