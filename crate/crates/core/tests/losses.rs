mod oracles;

use maod_core::graph::Graph;
use maod_core::heads::{fine_loss, weighted_ce_loss, BoxTarget, ClassWeights};
use maod_core::tensor::Tensor;
use maod_core::Rng;
use oracles::{fine_loss_by_hand, plain_ce, uniform};
use rand::{Rng as _, SeedableRng};

#[test]
fn unit_weights_give_plain_cross_entropy() {
    let mut rng = Rng::seed_from_u64(21);
    for _ in 0..500 {
        let n = rng.random_range(2..=20);
        let logits = uniform(&[n], -8.0, 8.0, &mut rng).into_data();
        let t = rng.random_range(0..n);
        let got = weighted_ce_loss(&logits, t, &ClassWeights::uniform(n)).unwrap();
        let want = plain_ce(&logits, t);
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}

#[test]
fn scaling_weights_scales_loss_and_gradient() {
    let mut rng = Rng::seed_from_u64(22);
    for _ in 0..100 {
        let n = rng.random_range(2..=10);
        let logits = uniform(&[n], -3.0, 3.0, &mut rng);
        let mut target = vec![0.0; n];
        target[rng.random_range(0..n)] = 1.0;
        let alpha: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
        let k = rng.random_range(0.1..10.0);
        let scaled: Vec<f64> = alpha.iter().map(|a| a * k).collect();
        let run = |alpha: &[f64]| {
            let mut g = Graph::new();
            let x = g.variable(logits.clone());
            let l = g.weighted_ce(x, &target, alpha).unwrap();
            let grads = g.backward(l).unwrap();
            (g.value(l).data()[0], grads.wrt(x).unwrap().data().to_vec())
        };
        let (l1, g1) = run(&alpha);
        let (l2, g2) = run(&scaled);
        assert!((l2 - k * l1).abs() <= 1e-12 * l2.abs().max(1.0));
        for (a, b) in g1.iter().zip(&g2) {
            assert!((b - k * a).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}

#[test]
fn box_loss_hand_cases() {
    let a = BoxTarget::new(0.5, 0.5, 0.2, 0.2).unwrap();
    let b = BoxTarget::new(0.6, 0.4, 0.1, 0.3).unwrap();
    assert_eq!(fine_loss(&a, &a), 0.0);
    let got = fine_loss(&a, &b);
    let hand = fine_loss_by_hand([0.5, 0.5, 0.2, 0.2], [0.6, 0.4, 0.1, 0.3]);
    assert_eq!(got, hand);
    assert!((got - 0.04).abs() <= 1e-15, "{got}");
}

#[test]
fn box_loss_gradient_is_twice_the_difference() {
    let mut rng = Rng::seed_from_u64(23);
    for _ in 0..100 {
        let p: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..0.99)).collect();
        let t: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..0.99)).collect();
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(p.clone()));
        let l = g.squared_error(x, &t).unwrap();
        let grads = g.backward(l).unwrap();
        for ((gv, pv), tv) in grads.wrt(x).unwrap().data().iter().zip(&p).zip(&t) {
            assert!((gv - 2.0 * (pv - tv)).abs() <= 1e-15);
        }
        let pb = BoxTarget::new(p[0], p[1], p[2], p[3]).unwrap();
        let tb = BoxTarget::new(t[0], t[1], t[2], t[3]).unwrap();
        assert!((fine_loss(&pb, &tb) - g.value(l).data()[0]).abs() <= 1e-15);
        assert!(fine_loss(&pb, &tb) < 4.0);
    }
}
