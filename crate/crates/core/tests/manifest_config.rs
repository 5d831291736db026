use std::collections::BTreeSet;

use demonet::config::{Config, SynthConfig};
use demonet::pipeline::corpus::plan;
use demonet::pipeline::manifest::{split_violations, validate_split};
use demonet::pipeline::{Manifest, Record, Split};
use demonet::Error;
use proptest::prelude::*;

fn rec(track: &str, label: &str, split: Split) -> Record {
    Record {
        path: format!("audio/{track}.wav").into(),
        label: label.into(),
        track_id: track.into(),
        split,
    }
}

#[test]
fn manifest_round_trips_with_header() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    let m = Manifest::new(vec![
        rec("a1", "cargo", Split::Train),
        rec("a2", "tug", Split::Val),
        rec("a3", "cargo", Split::Test),
    ])
    .unwrap();
    m.save(&p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().next().unwrap(), "path,label,track_id,split");
    let back = Manifest::load(&p).unwrap();
    assert_eq!(back.classes, vec!["cargo".to_string(), "tug".to_string()]);
    assert_eq!(back.records.len(), 3);
    assert_eq!(back.records[1].split, Split::Val);
}

#[test]
fn a_track_in_two_splits_is_leakage() {
    let m = Manifest::new(vec![rec("x", "a", Split::Train), rec("x", "a", Split::Test), rec("y", "a", Split::Train)]).unwrap();
    assert!(matches!(validate_split(&m), Err(Error::Leakage(v)) if v == ["x"]));
}

proptest! {
    #[test]
    fn validation_carving_keeps_tracks_whole(
        n in 2usize..40,
        segs in 1usize..4,
        fraction in 0.05f64..0.5,
        seed in any::<u64>(),
    ) {
        let mut recs = Vec::new();
        for t in 0..n {
            for _ in 0..segs {
                recs.push(rec(&format!("t{t}"), "a", Split::Train));
            }
        }
        recs.push(rec("held", "a", Split::Test));
        let mut m = Manifest::new(recs).unwrap();
        m.ensure_validation(fraction, seed);
        prop_assert!(split_violations(&m.records).is_empty());
        let val: BTreeSet<_> = m.records.iter().filter(|r| r.split == Split::Val).map(|r| r.track_id.clone()).collect();
        let expected = ((n as f64 * fraction).round() as usize).min(n - 1);
        prop_assert_eq!(val.len(), expected);
        prop_assert!(!val.contains("held"));
        prop_assert!(m.count(Split::Train) > 0);
    }

    #[test]
    fn synthetic_splits_never_leak(seed in any::<u64>(), per_class in 3usize..30) {
        let mut cfg = SynthConfig { seed, ..SynthConfig::default() };
        for c in &mut cfg.classes {
            c.recordings = per_class;
        }
        let planned = plan(&cfg, std::path::Path::new("audio")).unwrap();
        let recs: Vec<Record> = planned.iter().map(|p| p.record.clone()).collect();
        prop_assert!(split_violations(&recs).is_empty());
        for c in &cfg.classes {
            let test = recs.iter().filter(|r| r.label == c.name && r.split == Split::Test).count();
            prop_assert_eq!(test, (per_class as f64 * cfg.test_fraction).round() as usize);
        }
    }
}

#[test]
fn config_defaults_and_rejections() {
    let cfg = Config::from_toml("").unwrap();
    assert_eq!(cfg.model.n_experts, 5);
    assert_eq!(cfg.model.alpha, 0.01);
    assert!(cfg.synth.is_none());

    let round = Config::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(round.to_toml(), cfg.to_toml());

    for bad in [
        "[model]\nexperts = 5\n",
        "[dsp]\npassband = [900.0, 100.0]\n",
        "[train]\nlr = -1.0\n",
        "[features]\nkind = \"wavelet\"\n",
    ] {
        assert!(matches!(Config::from_toml(bad), Err(Error::Config(_))), "{bad}");
    }
}

#[test]
fn desk_config_parses() {
    let cfg = Config::from_toml(include_str!("../configs/desk.toml")).unwrap();
    assert_eq!(cfg.synth, Some(SynthConfig::default()));
    assert_eq!(cfg.train.seeds, vec![123, 3407]);
}
