use driftforge::dataset::{synthesize_stream, SynthConfig};
use driftforge::dataset::{LabeledPool, MonthlyStream};
use driftforge::harness::*;
use driftforge::hcc::{HccArch, StartMode, TrainConfig, WarmConfig};
use driftforge::mlp::MlpConfig;
use driftforge::ndcore::LrSchedule;
use driftforge::selectors::CadeConfig;
use driftforge::{Error, Exec};
use std::collections::BTreeSet;

fn desk_config(method: Method, budget: usize, mode: StartMode) -> ALConfig {
    ALConfig {
        method,
        budget_per_month: budget,
        start_mode: mode,
        seed: 3,
        hcc: TrainConfig {
            arch: HccArch {
                encoder_hidden: vec![16],
                embedding_dim: 8,
                classifier_hidden: vec![8],
            },
            epochs: 5,
            batch_half: 16,
            schedule: LrSchedule::Constant { base_lr: 0.01 },
            ..Default::default()
        },
        hcc_warm: WarmConfig {
            epochs: 2,
            ..Default::default()
        },
        mlp: MlpConfig {
            hidden: vec![8],
            epochs: 3,
            warm_epochs: 1,
            ..Default::default()
        },
        cade: CadeConfig {
            encoder_hidden: vec![16],
            embedding_dim: 4,
            epochs: 3,
            batch_size: 64,
            warm_epochs: 1,
            ..Default::default()
        },
        cade_mlp: MlpConfig {
            hidden: vec![8],
            epochs: 3,
            batch_size: 64,
            warm_epochs: 1,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn small_stream(seed_value: u64) -> MonthlyStream {
    synthesize_stream(&SynthConfig {
        dim: 40,
        n_families: 3,
        months: 5,
        samples_per_month: 60,
        benign_fraction: 0.7,
        family_birth_month: vec![0, 0, 3],
        seed: seed_value,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn metrics_examples() {
    let c = Confusion {
        tp: 90,
        fn_: 10,
        fp: 10,
        tn: 990,
    };
    let m = compute_metrics(&c);
    assert_eq!(pct(m.fnr), "10.00");
    assert_eq!(pct(m.fpr), "1.00");
    assert_eq!(pct(m.f1), "90.00");
    let empty = compute_metrics(&Confusion {
        tn: 5,
        ..Default::default()
    });
    assert_eq!((empty.fnr, empty.fpr, empty.f1), (0.0, 0.0, 0.0));
}

#[test]
fn oracle_charges_each_id_once() {
    let stream = small_stream(1);
    let mal = stream.samples().find(|s| s.y == 1).unwrap().clone();
    let ben = stream.samples().find(|s| s.y == 0).unwrap().clone();
    let mut o = AnalystOracle::new(&stream);
    assert_eq!(o.label(&mal.id).unwrap(), (1, mal.family));
    assert_eq!(o.label(&mal.id).unwrap(), (1, mal.family));
    assert_eq!(o.charged(), 1);
    assert_eq!(o.label(&ben.id).unwrap(), (0, 0));
    assert_eq!(o.charged(), 2);
    assert!(o.label("nope").is_err());
}

#[test]
fn warm_svm_is_rejected() {
    for m in [
        Method::SvmUncertainty,
        Method::TranscendentCred,
        Method::CadeOodSvm,
    ] {
        assert!(matches!(
            desk_config(m, 5, StartMode::Warm).validate(),
            Err(Error::Config(_))
        ));
    }
}

#[test]
fn every_method_runs_without_leakage() {
    let stream = small_stream(2);
    for method in [
        Method::HccPseudoLoss,
        Method::MlpUncertainty,
        Method::SvmUncertainty,
        Method::TranscendentCred,
        Method::TranscendentCredconf,
        Method::CadeOodSvm,
        Method::CadeOodMlp,
        Method::Random,
    ] {
        let mode = if method.supports_warm() {
            StartMode::Warm
        } else {
            StartMode::Cold
        };
        let cfg = desk_config(method, 7, mode);
        let (report, log) = run_active_learning(&stream, 0..2, &cfg).unwrap();
        assert_eq!(report.months.len(), 3, "{method:?}");
        check_no_leakage(&log).unwrap();
        for m in &log.months {
            assert!(m.selected.len() <= 7);
            assert_eq!(m.confusion.total() as usize, stream.month(m.month).len());
        }
        let (again, log2) = run_active_learning(&stream, 0..2, &cfg).unwrap();
        assert_eq!(report, again, "{method:?} is not deterministic");
        assert_eq!(log, log2);
    }
}

#[test]
fn zero_budget_is_a_fixed_classifier() {
    let stream = small_stream(3);
    let cfg = desk_config(Method::HccPseudoLoss, 0, StartMode::Warm);
    let (_, log) = run_active_learning(&stream, 0..2, &cfg).unwrap();
    let hashes: BTreeSet<&str> = log.months.iter().map(|m| m.pool_hash.as_str()).collect();
    assert_eq!(hashes.len(), 1);
    assert!(log.months.iter().all(|m| m.selected.is_empty()));
}

#[test]
fn leakage_check_catches_future_pool() {
    let stream = small_stream(4);
    let cfg = desk_config(Method::Random, 3, StartMode::Cold);
    let (_, mut log) = run_active_learning(&stream, 0..2, &cfg).unwrap();
    log.months[1].pool_max_month = Some(log.months[1].month);
    assert!(matches!(check_no_leakage(&log), Err(Error::Invariant(_))));
}

#[test]
fn rejects_bad_ranges() {
    let stream = small_stream(5);
    let cfg = desk_config(Method::Random, 3, StartMode::Cold);
    assert!(run_active_learning(&stream, 0..5, &cfg).is_err());
    assert!(run_active_learning(&stream, 2..2, &cfg).is_err());
}

#[test]
fn round1_single_candidate_and_ordering() {
    let stream = small_stream(6);
    let pool = LabeledPool::from_initial(stream.samples().cloned().collect()).unwrap();
    let cands = vec![desk_config(Method::SvmUncertainty, 0, StartMode::Cold)];
    let r = tune_round1(&pool, 40, &cands, 2, 1, Exec::Parallel).unwrap();
    assert_eq!(r.len(), 1);
    assert_eq!(r[0].candidate, 0);
    assert!(tune_round1(&pool, 40, &[], 2, 1, Exec::Parallel).is_err());
}
