use driftforge::ndcore::*;
use driftforge::{seed, Error};
use ndarray::array;
use ndarray::Array2;
use rand::Rng as _;

/// Straight-line per-sample re-implementation used as an oracle.
fn naive_forward(net: &DenseNet, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let n = net.weights().len();
    for l in 0..n {
        let w = &net.weights()[l];
        let mut z = vec![0.0; w.nrows()];
        for (r, zr) in z.iter_mut().enumerate() {
            let mut s = net.biases()[l][r];
            for (c, ac) in a.iter().enumerate() {
                s += w[[r, c]] * ac;
            }
            *zr = if l + 1 < n { s.max(0.0) } else { s };
        }
        a = z;
    }
    if net.head() == Head::Softmax2 {
        let m = a[0].max(a[1]);
        let e0 = (a[0] - m).exp();
        let e1 = (a[1] - m).exp();
        a = vec![e0 / (e0 + e1), e1 / (e0 + e1)];
    }
    a
}

fn random_net(seed: u64, dims: &[usize], head: Head) -> DenseNet {
    let mut rng = seed::rng(seed, &[]);
    let mut net = DenseNet::he_uniform(dims, head, &mut rng).unwrap();
    for b in net.biases_mut().iter_mut() {
        b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    net
}

#[test]
fn zero_net_softmax_is_half() {
    let net = DenseNet::zeros(&[3, 4, 2], Head::Softmax2).unwrap();
    let out = net.forward(&[1.0, -2.0, 3.0]).unwrap().output;
    assert_eq!(out.row(0).to_vec(), vec![0.5, 0.5]);
}

#[test]
fn one_layer_linear() {
    let net = DenseNet::from_parts(
        vec![1, 1],
        vec![array![[2.0]]],
        vec![array![1.0]],
        Head::Linear,
    )
    .unwrap();
    assert_eq!(net.forward(&[3.0]).unwrap().output[[0, 0]], 7.0);
}

#[test]
fn forward_matches_naive_oracle() {
    let mut rng = seed::rng(11, &[]);
    for s in 0..20 {
        let net = random_net(s, &[5, 7, 6, 2], Head::Softmax2);
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let got = net.forward(&x).unwrap().output.row(0).to_vec();
        let want = naive_forward(&net, &x);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        assert!((got[0] + got[1] - 1.0).abs() < 1e-9);
    }
}

#[test]
fn input_dim_mismatch_is_shape_error() {
    let net = DenseNet::zeros(&[3, 2], Head::Linear).unwrap();
    assert!(matches!(net.forward(&[1.0]), Err(Error::Shape(_))));
}

#[test]
fn scalar_chain_rule() {
    let net = DenseNet::from_parts(
        vec![1, 1],
        vec![array![[0.7]]],
        vec![array![0.0]],
        Head::Linear,
    )
    .unwrap();
    let fwd = net.forward(&[2.0]).unwrap();
    let (g, dx) = net.backward(&fwd, array![[1.0]].view()).unwrap();
    assert_eq!(g.weights[0][[0, 0]], 2.0);
    assert_eq!(g.biases[0][0], 1.0);
    assert_eq!(dx[[0, 0]], 0.7);
}

#[test]
fn zero_output_gradient_gives_zero_grads() {
    let net = random_net(3, &[4, 5, 2], Head::Softmax2);
    let fwd = net.forward(&[0.1, 0.2, 0.3, 0.4]).unwrap();
    let (g, _) = net.backward(&fwd, Array2::zeros((1, 2)).view()).unwrap();
    assert_eq!(g.max_abs(), 0.0);
}

#[test]
fn cache_from_other_net_is_usage_error() {
    let a = random_net(1, &[3, 4, 2], Head::Linear);
    let b = random_net(1, &[3, 5, 2], Head::Linear);
    let fwd = a.forward(&[1.0, 2.0, 3.0]).unwrap();
    assert!(matches!(
        b.backward(&fwd, Array2::zeros((1, 2)).view()),
        Err(Error::Usage(_))
    ));
}

fn loss_of(net: &DenseNet, x: &Array2<f64>, coef: &Array2<f64>) -> f64 {
    (&net.forward_batch(x.view()).unwrap().output * coef).sum()
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = seed::rng(99, &[]);
    for trial in 0..100u64 {
        let depth = rng.random_range(1..4);
        let mut dims = vec![rng.random_range(1..9)];
        for _ in 0..depth {
            dims.push(rng.random_range(1..9));
        }
        let head = if trial % 2 == 0 {
            Head::Softmax2
        } else {
            Head::Linear
        };
        if head == Head::Softmax2 {
            *dims.last_mut().unwrap() = 2;
        }
        let net = random_net(trial, &dims, head);
        let x = Array2::from_shape_fn((3, dims[0]), |_| rng.random_range(-1.0..1.0));
        let coef = Array2::from_shape_fn((3, net.output_dim()), |_| rng.random_range(-1.0..1.0));
        let fwd = net.forward_batch(x.view()).unwrap();
        let (g, dx) = net.backward(&fwd, coef.view()).unwrap();
        let h = 1e-5;
        for l in 0..net.weights().len() {
            for idx in 0..net.weights()[l].len() {
                let (r, c) = (
                    idx / net.weights()[l].ncols(),
                    idx % net.weights()[l].ncols(),
                );
                let mut p = net.clone();
                p.weights_mut()[l][[r, c]] += h;
                let mut m = net.clone();
                m.weights_mut()[l][[r, c]] -= h;
                let fd = (loss_of(&p, &x, &coef) - loss_of(&m, &x, &coef)) / (2.0 * h);
                assert_close(g.weights[l][[r, c]], fd);
            }
            for r in 0..net.biases()[l].len() {
                let mut p = net.clone();
                p.biases_mut()[l][r] += h;
                let mut m = net.clone();
                m.biases_mut()[l][r] -= h;
                let fd = (loss_of(&p, &x, &coef) - loss_of(&m, &x, &coef)) / (2.0 * h);
                assert_close(g.biases[l][r], fd);
            }
        }
        for r in 0..3 {
            for c in 0..dims[0] {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                let fd = (loss_of(&net, &xp, &coef) - loss_of(&net, &xm, &coef)) / (2.0 * h);
                assert_close(dx[[r, c]], fd);
            }
        }
    }
}

fn assert_close(analytic: f64, fd: f64) {
    let err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
    assert!(err < 1e-4, "analytic {analytic} vs fd {fd}");
}

fn scalar_net(p: f64) -> DenseNet {
    DenseNet::from_parts(
        vec![1, 1],
        vec![array![[p]]],
        vec![array![0.0]],
        Head::Linear,
    )
    .unwrap()
}

fn scalar_grad(g: f64) -> Gradients {
    Gradients {
        weights: vec![array![[g]]],
        biases: vec![array![0.0]],
    }
}

#[test]
fn sgd_step() {
    let mut net = scalar_net(1.0);
    let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, &net);
    opt.step(&mut net, &scalar_grad(2.0)).unwrap();
    assert!((net.weights()[0][[0, 0]] - 0.8).abs() < 1e-15);
    opt.step(&mut net, &scalar_grad(0.0)).unwrap();
    assert!((net.weights()[0][[0, 0]] - 0.8).abs() < 1e-15);
}

#[test]
fn adam_first_step_by_hand() {
    // m = 0.1, v = 0.001; m_hat = 1, v_hat = 1; p = -lr / (1 + eps)
    let mut net = scalar_net(0.0);
    let mut opt = Optimizer::new(OptimizerKind::Adam, 0.001, &net);
    opt.step(&mut net, &scalar_grad(1.0)).unwrap();
    let want = -0.001 / (1.0 + 1e-8);
    assert!((net.weights()[0][[0, 0]] - want).abs() < 1e-18);
    assert_eq!(opt.steps(), 1);
}

#[test]
fn optimizer_rejects_mismatched_grads() {
    let mut net = scalar_net(0.0);
    let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, &net);
    let bad = Gradients::zeros_like(&DenseNet::zeros(&[2, 1], Head::Linear).unwrap());
    assert!(opt.step(&mut net, &bad).is_err());
}

#[test]
fn schedules() {
    let step = LrSchedule::StepDecay {
        base_lr: 0.005,
        decay_factor: 0.95,
        decay_every: 10,
    };
    assert_eq!(step.lr_at(0), 0.005);
    assert_eq!(step.lr_at(9), 0.005);
    assert!((step.lr_at(10) - 0.00475).abs() < 1e-15);
    let cos = LrSchedule::Cosine {
        base_lr: 1.0,
        total_epochs: 100,
    };
    assert!((cos.lr_at(50) - 0.5).abs() < 1e-12);
    assert!((0..100).all(|e| cos.lr_at(e) > 0.0));
    assert_eq!(LrSchedule::Constant { base_lr: 0.3 }.lr_at(77), 0.3);
}

#[test]
fn same_seed_same_init() {
    let a = random_net(5, &[6, 4, 2], Head::Softmax2);
    let b = random_net(5, &[6, 4, 2], Head::Softmax2);
    assert_eq!(a, b);
}
