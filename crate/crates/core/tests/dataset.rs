use driftforge::dataset::*;
use driftforge::Error;
use proptest::prelude::*;
use std::collections::BTreeMap;

fn sample(id: &str, month: u32, y: u8, family: u32, features: Vec<u32>) -> Sample {
    Sample {
        id: id.into(),
        features,
        y,
        family,
        month,
    }
}

#[test]
fn loads_two_samples_in_one_month() {
    let text = "#dim 10\na\t0\t0\t0\t1,2\nb\t0\t1\t4\t\n";
    let s = read_stream(text.as_bytes()).unwrap();
    assert_eq!(s.months.len(), 1);
    assert_eq!(s.months[0].len(), 2);
    assert!(s.months[0][1].features.is_empty());
}

#[test]
fn benign_with_family_is_rejected_by_id() {
    let text = "#dim 10\nbad-one\t0\t0\t3\t1\n";
    match read_stream(text.as_bytes()) {
        Err(Error::InvalidSample { id, .. }) => assert_eq!(id, "bad-one"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn parse_errors_carry_line_numbers() {
    let text = "#dim 10\na\t0\t0\t0\t1\nb\tx\t0\t0\t1\n";
    match read_stream(text.as_bytes()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("unexpected {other:?}"),
    }
    let dup = "#dim 10\na\t0\t0\t0\t1\na\t1\t0\t0\t1\n";
    assert!(matches!(
        read_stream(dup.as_bytes()),
        Err(Error::InvalidSample { .. })
    ));
    let range = "#dim 3\na\t0\t0\t0\t1,3\n";
    assert!(read_stream(range.as_bytes()).is_err());
    let unsorted = "#dim 9\na\t0\t0\t0\t3,1\n";
    assert!(read_stream(unsorted.as_bytes()).is_err());
    assert!(read_stream("a\t0\t0\t0\t1\n".as_bytes()).is_err());
}

#[test]
fn synthetic_round_trip_is_identity() {
    let cfg = SynthConfig {
        months: 4,
        samples_per_month: 50,
        seed: 3,
        ..Default::default()
    };
    let s = synthesize_stream(&cfg).unwrap();
    let mut buf = Vec::new();
    write_stream(&mut buf, &s).unwrap();
    let back = read_stream(&buf[..]).unwrap();
    assert_eq!(back, s);
    let mut again = Vec::new();
    write_stream(&mut again, &back).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn no_drift_keeps_prototypes() {
    let cfg = SynthConfig {
        drift_flip_prob: 0.0,
        months: 6,
        ..Default::default()
    };
    let traj = prototype_trajectory(&cfg);
    assert_eq!(traj[0], traj[5]);
    let drifting = SynthConfig {
        drift_flip_prob: 0.2,
        ..cfg
    };
    let traj = prototype_trajectory(&drifting);
    assert_ne!(traj[0][1], traj[5][1]);
}

#[test]
fn birth_schedule_is_respected() {
    let cfg = SynthConfig {
        n_families: 2,
        family_birth_month: vec![0, 5],
        months: 8,
        samples_per_month: 100,
        ..Default::default()
    };
    let s = synthesize_stream(&cfg).unwrap();
    for m in 0..5 {
        assert!(s.month(m).iter().all(|x| x.family != 2));
    }
    assert!((5..8).any(|m| s.month(m).iter().any(|x| x.family == 2)));
}

#[test]
fn same_seed_same_stream() {
    let cfg = SynthConfig {
        seed: 17,
        ..Default::default()
    };
    assert_eq!(
        synthesize_stream(&cfg).unwrap(),
        synthesize_stream(&cfg).unwrap()
    );
    let other = SynthConfig {
        seed: 18,
        ..cfg.clone()
    };
    assert_ne!(
        synthesize_stream(&cfg).unwrap(),
        synthesize_stream(&other).unwrap()
    );
}

#[test]
fn malicious_fraction_is_ten_percent() {
    let cfg = SynthConfig {
        samples_per_month: 600,
        months: 3,
        ..Default::default()
    };
    let s = synthesize_stream(&cfg).unwrap();
    for m in &s.months {
        let frac = m.iter().filter(|x| x.y == 1).count() as f64 / m.len() as f64;
        assert!((frac - 0.1).abs() <= 0.01, "{frac}");
    }
}

#[test]
fn invalid_synth_configs() {
    let bad = [
        SynthConfig {
            benign_fraction: 1.0,
            ..Default::default()
        },
        SynthConfig {
            samples_per_month: 1,
            benign_fraction: 0.5,
            ..Default::default()
        },
        SynthConfig {
            family_birth_month: vec![20],
            n_families: 1,
            ..Default::default()
        },
        SynthConfig {
            family_birth_month: vec![3, 4],
            n_families: 2,
            ..Default::default()
        },
        SynthConfig {
            dim: 0,
            ..Default::default()
        },
    ];
    for cfg in bad {
        assert!(synthesize_stream(&cfg).is_err(), "{cfg:?}");
    }
}

fn toy_pool(n: usize) -> LabeledPool {
    LabeledPool::from_initial(
        (0..n)
            .map(|i| {
                let fam = (i % 5) as u32 % 3;
                sample(
                    &format!("s{i:03}"),
                    0,
                    u8::from(fam > 0),
                    fam,
                    vec![i as u32 % 7],
                )
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn ten_sample_split_sizes() {
    let pool = toy_pool(10);
    let splits = random_splits(&pool, 5, 0.2, 1).unwrap();
    assert_eq!(splits.len(), 5);
    for (train, valid) in &splits {
        assert_eq!(train.len(), 8);
        assert_eq!(valid.len(), 2);
        let mut ids: Vec<&str> = train
            .samples()
            .iter()
            .chain(valid.samples())
            .map(|s| s.id.as_str())
            .collect();
        ids.sort();
        let mut all: Vec<&str> = pool.samples().iter().map(|s| s.id.as_str()).collect();
        all.sort();
        assert_eq!(ids, all);
    }
    assert!(random_splits(&pool, 5, 1.0, 1).is_err());
    assert!(random_splits(&pool, 5, 0.0, 1).is_err());
}

#[test]
fn splits_are_stratified() {
    let pool = toy_pool(97);
    let frac = 0.3;
    for (_, valid) in random_splits(&pool, 5, frac, 9).unwrap() {
        // Counting oracle: per-group totals vs validation counts.
        let mut total: BTreeMap<(u8, u32), usize> = BTreeMap::new();
        for s in pool.samples() {
            *total.entry((s.y, s.family)).or_default() += 1;
        }
        for (key, &count) in &total {
            let got = valid
                .samples()
                .iter()
                .filter(|s| (s.y, s.family) == *key)
                .count() as f64;
            let want = count as f64 * (frac * 97.0).round() / 97.0;
            assert!((got - want).abs() <= 1.0, "{key:?}: {got} vs {want}");
        }
    }
}

fn twelve_month_stream() -> MonthlyStream {
    let cfg = SynthConfig {
        months: 12,
        samples_per_month: 30,
        seed: 5,
        ..Default::default()
    };
    synthesize_stream(&cfg).unwrap()
}

#[test]
fn temporal_split_all_train() {
    let s = twelve_month_stream();
    let (pool, valid, test) = temporal_split(&s, 0..12, 12..12, 12..12).unwrap();
    assert_eq!(pool.len(), s.len());
    assert!(valid.is_empty() && test.is_empty());
    assert!(temporal_split(&s, 0..5, 4..8, 8..12).is_err());
    assert!(temporal_split(&s, 6..8, 0..3, 8..12).is_err());
}

#[test]
fn temporal_split_counts_and_no_leakage() {
    let s = twelve_month_stream();
    let (pool, valid, test) = temporal_split(&s, 0..4, 4..7, 7..12).unwrap();
    let per_month: Vec<usize> = s.months.iter().map(Vec::len).collect();
    assert_eq!(pool.len(), per_month[0..4].iter().sum::<usize>());
    assert_eq!(valid.len(), per_month[4..7].iter().sum::<usize>());
    assert_eq!(test.len(), per_month[7..12].iter().sum::<usize>());
    assert_eq!(test.first_month, 7);
    assert!(test.validate().is_ok());
    assert!(pool.max_month().unwrap() < 7);
    assert!(test.samples().all(|x| !pool.contains(&x.id)));
}

#[test]
fn pool_rejects_future_analyst_labels() {
    let mut pool = LabeledPool::new();
    let s = sample("a", 5, 0, 0, vec![]);
    assert!(pool.push(s.clone(), Provenance::Analyst(4)).is_err());
    pool.push(s.clone(), Provenance::Analyst(5)).unwrap();
    assert!(pool.push(s, Provenance::Initial).is_err());
}

proptest! {
    #[test]
    fn single_field_corruptions_are_caught(which in 0usize..5, seed in 0u64..50) {
        let cfg = SynthConfig { months: 2, samples_per_month: 20, seed, ..Default::default() };
        let mut s = synthesize_stream(&cfg).unwrap();
        let victim = (seed as usize) % s.months[1].len();
        let dup_id = s.months[0][0].id.clone();
        let x = &mut s.months[1][victim];
        match which {
            0 => x.y = if x.y == 1 { 0 } else { 1 },
            1 => x.month = 0,
            2 => x.features.push(cfg.dim as u32 + 3),
            3 => x.id = dup_id,
            _ => { x.features = vec![5, 5]; }
        }
        prop_assert!(s.validate().is_err());
    }
}
