//! Recovers the shaft rate of a synthetic propeller signature from its 1-D
//! DEMON spectrum.
//!
//! cargo run --release --example demon_fundamental -- [mod_hz] [snr_db]

use demonet::demon::{demon1d, demon2d, find_fundamental, DemonParams};
use demonet::dsp::synth::{synthesize, Carrier, Harmonic, ModulationSpec};

fn main() -> demonet::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mod_hz = args.first().copied().unwrap_or(7.3);
    let snr_db = args.get(1).copied().unwrap_or(10.0);
    let sr = 4000;
    let params = DemonParams {
        passband: (20.0, 1980.0),
        interval_hz: 70.0,
        mod_f_max_hz: 64.0,
        n_mod_bins: 128,
        ..DemonParams::default()
    };
    let mut spec = ModulationSpec {
        carrier: Carrier::Broadband { lo_hz: 200.0, hi_hz: 1800.0 },
        harmonics: vec![Harmonic { multiple: 1, depth: 1.0 }],
        ..ModulationSpec::tone(1.0, mod_hz, 0.5, 30.0)
    };
    spec.noise_floor = spec.noise_floor_for_snr(snr_db);
    for seed in 0..5 {
        let w = synthesize(&spec, sr, seed, "demo")?;
        let t = std::time::Instant::now();
        let d1 = demon1d(&demon2d(&w, &params)?);
        let f0 = find_fundamental(&d1, 1.0, 30.0)?;
        println!(
            "seed {seed}: fundamental {f0:.3} Hz (true {mod_hz} Hz, bin {:.3} Hz, {:.2?})",
            d1.mod_bin_hz,
            t.elapsed()
        );
    }
    Ok(())
}
