use std::fs::File;

use proptest::prelude::*;
use squeezelab::distributions::JointDistribution;
use squeezelab::inference::sample_counts;
use squeezelab::io::{
    format_f64, read_jpnd, read_traces, write_counts, write_distribution, write_g_surface,
    write_traces, Jpnd,
};
use squeezelab::statistics::{g2, g_surface};
use squeezelab::tes::{synth_trace, TraceModel};
use squeezelab::{multimode_pdc, Arm, Error};

proptest! {
    #[test]
    fn floats_survive_text(bits in any::<u64>()) {
        let v = f64::from_bits(bits);
        prop_assume!(v.is_finite());
        prop_assert_eq!(format_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
    }

    #[test]
    fn distributions_survive_files(weights in prop::collection::vec(0.0f64..1.0, 1..50), tail in 0.0f64..1e-3) {
        prop_assume!(weights.iter().sum::<f64>() > 0.0);
        let total: f64 = weights.iter().sum::<f64>() / (1.0 - tail);
        let j = JointDistribution::new(1, weights.len(), weights.iter().map(|w| w / total).collect(), tail)
            .unwrap()
            .with_n_events(Some(12345));
        let mut buf = Vec::new();
        write_distribution(&mut buf, &j).unwrap();
        prop_assert_eq!(read_jpnd(buf.as_slice()).unwrap(), Jpnd::Probs(j));
    }
}

#[test]
fn files_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let j = multimode_pdc(1.2, 1.1, 60).unwrap();

    let path = dir.path().join("state.json");
    write_distribution(File::create(&path).unwrap(), &j).unwrap();
    let back = read_jpnd(File::open(&path).unwrap()).unwrap().into_distribution().unwrap();
    assert_eq!(back, j);
    assert_eq!(g2(&back.marginal(Arm::Signal)).unwrap(), g2(&j.marginal(Arm::Signal)).unwrap());

    let counts = sample_counts(&j, 50_000, 2).unwrap();
    let path = dir.path().join("counts.json");
    write_counts(File::create(&path).unwrap(), &counts).unwrap();
    let read = read_jpnd(File::open(&path).unwrap()).unwrap();
    assert_eq!(read.n_events(), Some(50_000));
    assert_eq!(read, Jpnd::Counts(counts));
}

#[test]
fn malformed_files_are_format_errors() {
    let wrong = br#"{"format":"other","dim_s":1,"dim_i":1,"probs":[1.0]}"#;
    assert!(matches!(read_jpnd(&wrong[..]), Err(Error::Format(_))));
    assert!(read_jpnd(&b"not json"[..]).is_err());
}

#[test]
fn g_surface_csv_layout() {
    let j = multimode_pdc(1.0, 1.3, 80).unwrap();
    let s = g_surface(&j, 3, 2).unwrap();
    let mut buf = Vec::new();
    write_g_surface(&mut buf, 3, 2, &s.values, None).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "m,n,value,mc_std");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("1,1,") && lines[1].ends_with(','));
    assert!(lines[6].starts_with("3,2,"));
    let value: f64 = lines[1].split(',').nth(2).unwrap().parse().unwrap();
    assert_eq!(value, s.get(1, 1));
    assert!(write_g_surface(Vec::new(), 2, 2, &s.values, None).is_err());
}

#[test]
fn traces_round_trip_exactly() {
    let model = TraceModel::design();
    let traces: Vec<_> = (0..5).map(|n| synth_trace(n, &model, n as u64).unwrap()).collect();
    let mut buf = Vec::new();
    write_traces(&mut buf, &traces).unwrap();
    let (ids, back) = read_traces(buf.as_slice()).unwrap();
    assert_eq!(ids, vec!["0", "1", "2", "3", "4"]);
    assert_eq!(back, traces);
    assert!(read_traces(&b"0,1.0,abc\n"[..]).is_err());
}
