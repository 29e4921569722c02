use driftforge::dataset::{to_dense, Sample};
use driftforge::hcc::Tag;
use driftforge::hcc::{EncoderClassifier, HccArch};
use driftforge::ndcore::LrSchedule;
use driftforge::selectors::*;
use driftforge::{seed, Exec};
use ndarray::array;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;

fn idx(vectors: Array2<f64>, ys: &[u8]) -> EmbeddingIndex {
    EmbeddingIndex {
        vectors: normalize_rows(vectors),
        tags: ys
            .iter()
            .map(|&y| Tag {
                y,
                family: u32::from(y),
            })
            .collect(),
        model_version: 0,
    }
}

#[test]
fn softmax_uncertainty_values() {
    assert_eq!(max_softmax_uncertainty(0.5), 0.5);
    assert!((max_softmax_uncertainty(0.9) - 0.1).abs() < 1e-15);
    assert_eq!(max_softmax_uncertainty(1.0), 0.0);
    assert!((pseudo_ce(0.5) - 0.693147).abs() < 1e-6);
    assert!((pseudo_ce(0.9) - 0.105361).abs() < 1e-6);
    assert!(pseudo_ce(1.0).is_finite());
}

#[test]
fn knn_examples() {
    let index = idx(array![[0.0, 1.0], [1.0, 0.0], [0.0, -1.0]], &[0, 0, 1]);
    let q = array![0.0, 1.0];
    let nn = knn(&index, q.view(), 1).unwrap();
    assert_eq!(
        nn,
        vec![Neighbor {
            position: 0,
            distance: 0.0
        }]
    );
    let all = knn(&index, q.view(), 3).unwrap();
    assert_eq!(
        all.iter().map(|n| n.position).collect::<Vec<_>>(),
        vec![0, 1, 2]
    );
    assert!(knn(&index, q.view(), 4).is_err());
}

#[test]
fn knn_matches_exhaustive_sort() {
    let mut rng = seed::rng(5, &[]);
    for _ in 0..5 {
        let v = Array2::from_shape_fn((500, 6), |_| rng.random_range(-1.0..1.0));
        let index = idx(v, &vec![0; 500]);
        let q = normalize_rows(Array2::from_shape_fn((1, 6), |_| {
            rng.random_range(-1.0..1.0)
        }));
        let mut brute: Vec<(f64, usize)> = (0..500)
            .map(|i| {
                let d: f64 = (0..6)
                    .map(|c| (index.vectors[[i, c]] - q[[0, c]]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                (d, i)
            })
            .collect();
        brute.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for k in [1, 17, 500] {
            let got: Vec<usize> = knn(&index, q.row(0), k)
                .unwrap()
                .iter()
                .map(|n| n.position)
                .collect();
            let want: Vec<usize> = brute.iter().take(k).map(|p| p.1).collect();
            assert_eq!(got, want);
        }
    }
}

#[test]
fn pseudo_hc_examples() {
    // Opposite label at distance 0, m = 1 -> 2m = 2.
    let index = idx(array![[1.0, 0.0]], &[1]);
    let q = array![1.0, 0.0];
    let r = pseudo_hc_loss(q.view(), 0, &index, 1, 1.0).unwrap();
    assert_eq!(r.value, 2.0);
    assert!(!r.short_index);
    // All neighbours share y_hat within the margin -> 0.
    let index = idx(array![[1.0, 0.0], [0.9, 0.1], [0.8, 0.3]], &[1, 1, 1]);
    let r = pseudo_hc_loss(q.view(), 1, &index, 2, 1.0).unwrap();
    assert_eq!(r.value, 0.0);
    // Index smaller than 2N - 1 is used whole and flagged.
    let r = pseudo_hc_loss(q.view(), 1, &index, 5, 1.0).unwrap();
    assert!(r.short_index);
    assert_eq!(pseudo_loss_total(0.7, 0.2, 0.0), 0.7);
    assert_eq!(pseudo_loss_total(0.0, 0.2, 3.0), 0.6000000000000001);
}

#[test]
fn pseudo_hc_ignores_index_order() {
    let mut rng = seed::rng(6, &[]);
    let v = Array2::from_shape_fn((40, 4), |_| rng.random_range(-1.0..1.0));
    let ys: Vec<u8> = (0..40).map(|_| rng.random_range(0..2u8)).collect();
    let a = idx(v.clone(), &ys);
    let mut perm: Vec<usize> = (0..40).collect();
    perm.shuffle(&mut rng);
    let b = idx(
        v.select(Axis(0), &perm),
        &perm.iter().map(|&i| ys[i]).collect::<Vec<_>>(),
    );
    let q = normalize_rows(Array2::from_shape_fn((1, 4), |_| {
        rng.random_range(-1.0..1.0)
    }));
    for n in [1, 3, 8] {
        let x = pseudo_hc_loss(q.row(0), 1, &a, n, 0.3).unwrap().value;
        let y = pseudo_hc_loss(q.row(0), 1, &b, n, 0.3).unwrap().value;
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn index_is_unit_norm_and_matches_reencode() {
    let mut rng = seed::rng(7, &[]);
    let arch = HccArch {
        encoder_hidden: vec![8],
        embedding_dim: 4,
        classifier_hidden: vec![4],
    };
    let model = EncoderClassifier::init(10, &arch, 1.0, &mut rng).unwrap();
    let pool: Vec<Sample> = (0..30)
        .map(|i| Sample {
            id: format!("s{i}"),
            features: (0..10).filter(|_| rng.random::<f64>() < 0.4).collect(),
            y: (i % 2) as u8,
            family: (i % 2) as u32,
            month: 0,
        })
        .collect();
    let index = build_index(&model, &pool, Exec::Parallel).unwrap();
    assert_eq!(index.len(), 30);
    for (i, row) in index.vectors.rows().into_iter().enumerate() {
        assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-9);
        let direct = model.embed(to_dense([&pool[i]], 10).view()).unwrap();
        let direct = normalize_rows(direct);
        assert_eq!(direct.row(0), row);
    }
    assert!(build_index(&model, &[], Exec::Parallel).is_err());
    let one = build_index(&model, &pool[..1], Exec::Sequential).unwrap();
    assert_eq!(one.len(), 1);
    let scores = pseudo_loss_scores(&model, &index, &pool, 4, Exec::Parallel).unwrap();
    assert_eq!(
        scores,
        pseudo_loss_scores(&model, &index, &pool, 4, Exec::Sequential).unwrap()
    );
    assert!(scores.iter().all(|s| s.total.is_finite() && s.total >= 0.0));
}

#[test]
fn select_top_examples() {
    let s = |v: &[(&str, f64)]| {
        v.iter()
            .map(|(a, b)| (a.to_string(), *b))
            .collect::<Vec<_>>()
    };
    assert_eq!(
        select_top(&s(&[("a", 3.0), ("b", 1.0), ("c", 2.0)]), 2),
        vec!["a", "c"]
    );
    assert!(select_top(&s(&[("a", 3.0)]), 0).is_empty());
    assert_eq!(select_top(&s(&[("b", 1.0), ("a", 1.0)]), 5), vec!["a", "b"]);
}

#[test]
fn cade_pair_and_ood_definitions() {
    assert_eq!(cade_pair_loss(0.0, true, 10.0), 0.0);
    assert_eq!(cade_pair_loss(3.0, false, 10.0), 49.0);
    assert_eq!(cade_pair_loss(12.0, false, 10.0), 0.0);
    let stats = vec![
        ClassStats {
            class: 0,
            centroid: vec![0.0, 0.0],
            median: 0.0,
            mad: 1.0,
        },
        ClassStats {
            class: 3,
            centroid: vec![5.0, 0.0],
            median: 1.0,
            mad: 0.5,
        },
    ];
    assert_eq!(cade_ood_embedded(&stats, array![0.0, 0.0].view()), 0.0);
    assert_eq!(cade_ood_embedded(&stats, array![5.0, 1.0].view()), 0.0);
    assert!((cade_ood_embedded(&stats, array![2.5, 0.0].view()) - 2.5).abs() < 1e-9);
}

fn tiny_cade(rng: &mut seed::Rng, dims: &[usize]) -> CadeModel {
    let cfg = CadeConfig {
        encoder_hidden: dims[1..dims.len() - 1].to_vec(),
        embedding_dim: *dims.last().unwrap(),
        margin: 1.5,
        contrastive_weight: 0.7,
        ..Default::default()
    };
    let mut m = CadeModel::init(dims[0], &cfg, rng).unwrap();
    for b in m
        .encoder
        .biases_mut()
        .iter_mut()
        .chain(m.decoder.biases_mut())
    {
        b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    m
}

#[test]
fn cade_gradient_matches_finite_differences() {
    let mut rng = seed::rng(8, &[]);
    for trial in 0..10 {
        let model = tiny_cade(&mut rng, &[5, 4, 3]);
        let x = Array2::from_shape_fn((5, 5), |_| f64::from(rng.random_range(0..2u8)));
        let classes: Vec<u32> = (0..5).map(|_| rng.random_range(0..3u32)).collect();
        let (_, ge, gd) = cade_loss_and_grad(&model, x.view(), &classes, Exec::Sequential).unwrap();
        for (which, g) in [(0, ge), (1, gd)] {
            let analytic = g.flatten();
            let mut k = 0;
            let net_of = |m: &CadeModel| {
                if which == 0 {
                    m.encoder.clone()
                } else {
                    m.decoder.clone()
                }
            };
            let net = net_of(&model);
            for l in 0..net.weights().len() {
                let nw = net.weights()[l].len();
                for p in 0..nw + net.biases()[l].len() {
                    let eval = |delta: f64| {
                        let mut m = model.clone();
                        let n = if which == 0 {
                            &mut m.encoder
                        } else {
                            &mut m.decoder
                        };
                        if p < nw {
                            n.weights_mut()[l].as_slice_mut().unwrap()[p] += delta;
                        } else {
                            n.biases_mut()[l][p - nw] += delta;
                        }
                        cade_loss_and_grad(&m, x.view(), &classes, Exec::Sequential)
                            .unwrap()
                            .0
                            .total
                    };
                    let h = 1e-5;
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let a = analytic[k];
                    let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                    assert!(
                        err < 1e-4,
                        "trial {trial} net {which} layer {l} p {p}: {a} vs {fd}"
                    );
                    k += 1;
                }
            }
        }
    }
}

#[test]
fn cade_overfits_one_repeated_sample() {
    let s = Sample {
        id: "x".into(),
        features: vec![0, 2, 3],
        y: 1,
        family: 4,
        month: 0,
    };
    let pool: Vec<Sample> = (0..8)
        .map(|i| Sample {
            id: format!("x{i}"),
            ..s.clone()
        })
        .collect();
    let cfg = CadeConfig {
        encoder_hidden: vec![8],
        embedding_dim: 4,
        schedule: LrSchedule::Constant { base_lr: 0.01 },
        epochs: 400,
        batch_size: 8,
        ..Default::default()
    };
    let model = train_cade(&pool, 5, &cfg, 1, Exec::Sequential).unwrap();
    let x = to_dense(&pool, 5);
    let (loss, _, _) = cade_loss_and_grad(&model, x.view(), &vec![4; 8], Exec::Sequential).unwrap();
    assert!(loss.mse < 1e-4, "{}", loss.mse);
    assert_eq!(model.stats.len(), 1);
    assert!(train_cade(&[], 5, &cfg, 1, Exec::Sequential).is_err());
    let scores = cade_ood_scores(&model, &pool, Exec::Parallel).unwrap();
    assert!(scores.iter().all(|v| v.is_finite() && *v >= 0.0));
}

#[test]
fn embeddings_csv_layout() {
    let samples = vec![Sample {
        id: "a".into(),
        features: vec![],
        y: 1,
        family: 2,
        month: 0,
    }];
    let mut buf = Vec::new();
    write_embeddings_csv(&mut buf, &samples, array![[0.5, -1.0]].view()).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "id,y,family,e1,e2\na,1,2,0.5,-1\n"
    );
}
