use driftforge::dataset::Sample;
use driftforge::dataset::{synthesize_stream, SynthConfig};
use driftforge::mlp::*;
use driftforge::ndcore::{DenseNet, Head};
use driftforge::{seed, Exec};
use ndarray::Array2;
use rand::Rng as _;

#[test]
fn ce_gradient_matches_finite_differences() {
    let mut rng = seed::rng(3, &[]);
    for _ in 0..20 {
        let mut net = DenseNet::he_uniform(&[5, 4, 3, 2], Head::Softmax2, &mut rng).unwrap();
        // Non-zero biases keep pre-activations off the ReLU kink.
        for b in net.biases_mut() {
            b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        let x = Array2::from_shape_fn((6, 5), |_| rng.random_range(-1.0..1.0));
        let y: Vec<u8> = (0..6).map(|_| rng.random_range(0..2u8)).collect();
        let (_, g) = mean_ce_and_grad(&net, x.view(), &y).unwrap();
        let analytic = g.flatten();
        let mut k = 0;
        for l in 0..net.weights().len() {
            for idx in 0..net.weights()[l].len() + net.biases()[l].len() {
                let eval = |delta: f64| {
                    let mut n = net.clone();
                    let nw = n.weights()[l].len();
                    if idx < nw {
                        n.weights_mut()[l].as_slice_mut().unwrap()[idx] += delta;
                    } else {
                        n.biases_mut()[l][idx - nw] += delta;
                    }
                    mean_ce_and_grad(&n, x.view(), &y).unwrap().0
                };
                let h = 1e-5;
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[k];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(err < 1e-4, "layer {l} idx {idx}: {a} vs {fd}");
                k += 1;
            }
        }
    }
}

#[test]
fn learns_a_separable_stream_and_is_deterministic() {
    let cfg = SynthConfig {
        dim: 60,
        months: 2,
        samples_per_month: 150,
        benign_fraction: 0.7,
        drift_flip_prob: 0.0,
        seed: 4,
        ..Default::default()
    };
    let data: Vec<Sample> = synthesize_stream(&cfg)
        .unwrap()
        .samples()
        .cloned()
        .collect();
    let y: Vec<u8> = data.iter().map(|s| s.y).collect();
    let rows = SampleRows {
        samples: &data,
        dim: 60,
    };
    let m = train_mlp(&rows, &y, &MlpConfig::default(), 9).unwrap();
    assert_eq!(m, train_mlp(&rows, &y, &MlpConfig::default(), 9).unwrap());
    let pred = m.predict_samples(&data, Exec::Sequential).unwrap();
    let acc = pred.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
    assert!(acc > 0.95, "{acc}");
    let warm = update_mlp(&m, &rows, &y, &MlpConfig::default(), 9).unwrap();
    assert_eq!(warm.trained_epochs, 35);
    assert_eq!(warm.version, 2);
    assert_eq!(
        m.prob_samples(&data, Exec::Parallel).unwrap(),
        m.prob_samples(&data, Exec::Sequential).unwrap()
    );
}

#[test]
fn rejects_mismatched_inputs() {
    let x = Array2::<f64>::zeros((3, 4));
    assert!(train_mlp(&x.view(), &[0, 1], &MlpConfig::default(), 0).is_err());
    let empty = Array2::<f64>::zeros((0, 4));
    assert!(train_mlp(&empty.view(), &[], &MlpConfig::default(), 0).is_err());
    let m = train_mlp(
        &x.view(),
        &[0, 1, 0],
        &MlpConfig {
            epochs: 1,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    let wide = Array2::<f64>::zeros((3, 5));
    assert!(update_mlp(&m, &wide.view(), &[0, 1, 0], &MlpConfig::default(), 0).is_err());
}
