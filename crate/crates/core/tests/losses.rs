use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpbsd_core::losses::{
    l1_loss, mse_loss, soft_dice_loss, student_loss, teacher_pretrain_loss, LossWeights,
    StudentTargets,
};
use vpbsd_tensor::gradcheck::check;
use vpbsd_tensor::{Graph, Tensor, TensorError};

fn lift<T>(r: vpbsd_core::Result<T>) -> vpbsd_tensor::Result<T> {
    r.map_err(|e| TensorError::Contract(e.to_string()))
}

fn random(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new([n], (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn binary(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
        .collect()
}

#[test]
fn mse_gradient_is_scaled_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (x, y) = (
        random(&mut rng, 7, -1.0, 1.0),
        random(&mut rng, 7, -1.0, 1.0),
    );
    let mut g = Graph::new();
    let xv = g.variable([7], x.data().to_vec()).unwrap();
    let yv = g.constant([7], y.data().to_vec()).unwrap();
    let l = mse_loss(&mut g, xv, yv).unwrap();
    g.backward(l).unwrap();
    for (i, d) in g.grad(xv).unwrap().iter().enumerate() {
        let expect = 2.0 * (x.data()[i] - y.data()[i]) / 7.0;
        assert!((d - expect).abs() < 1e-15);
    }
    let r = check(&[x, y], 1e-5, |g, v| lift(mse_loss(g, v[0], v[1]))).unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn l1_gradient_off_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&mut rng, 9, 0.1, 1.0);
    let b = random(&mut rng, 9, -1.0, -0.1);
    let r = check(&[a.clone(), b], 1e-5, |g, v| lift(l1_loss(g, v[0], v[1]))).unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
    let mut g = Graph::new();
    let av = g.variable([9], a.data().to_vec()).unwrap();
    let bv = g.constant([9], a.data().to_vec()).unwrap();
    let l = l1_loss(&mut g, av, bv).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(av).unwrap().iter().all(|&d| d == 0.0));
}

#[test]
fn dice_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [4, 11, 27] {
        let p = random(&mut rng, n, 0.05, 0.95);
        let t = binary(&mut rng, n);
        let r = check(&[p], 1e-5, |g, v| {
            let tv = g.constant([n], t.clone())?;
            lift(soft_dice_loss(g, v[0], tv, 1.0))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}

#[test]
fn composite_losses_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 8;
    let w = LossWeights::default();
    let inputs = [
        random(&mut rng, n, 0.05, 0.95),
        random(&mut rng, n, -1.0, 1.0),
        random(&mut rng, n, -1.0, 1.0),
    ];
    let yg = binary(&mut rng, n);
    let yp = binary(&mut rng, n);
    let zt: Vec<f64> = inputs[2].data().iter().map(|v| v + 0.3).collect();
    for epoch in [0, 30, 90] {
        let r = check(&inputs, 1e-5, |g, v| {
            let y = g.constant([n], yg.clone())?;
            let ps = g.constant([n], yp.clone())?;
            let z = g.constant([n], zt.clone())?;
            let t = StudentTargets {
                y_gt: Some(y),
                y_pse: Some(ps),
                z_tea: Some(z),
            };
            Ok(lift(student_loss(g, v[0], v[2], t, &w, epoch))?.total)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "epoch {epoch}: {r:?}");
    }
    let r = check(&inputs, 1e-5, |g, v| {
        let cb = g.square(v[2]);
        let cb = g.mean(cb);
        Ok(lift(teacher_pretrain_loss(g, v[0], v[1], cb, &w))?.total)
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn zero_weights_isolate_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 6;
    let seg = random(&mut rng, n, 0.1, 0.9);
    let zs = random(&mut rng, n, -1.0, 1.0);
    let w = LossWeights {
        beta_max: 0.0,
        gamma: 0.0,
        ..Default::default()
    };
    let mut g = Graph::new();
    let s = g.variable([n], seg.data().to_vec()).unwrap();
    let z = g.variable([n], zs.data().to_vec()).unwrap();
    let yp = g.constant([n], binary(&mut rng, n)).unwrap();
    let zt = g.constant([n], vec![0.5; n]).unwrap();
    let t = StudentTargets {
        y_pse: Some(yp),
        z_tea: Some(zt),
        ..Default::default()
    };
    let l = student_loss(&mut g, s, z, t, &w, 100).unwrap();
    g.backward(l.total).unwrap();
    assert!(g.grad(s).is_none_or(|d| d.iter().all(|&x| x == 0.0)));
    assert!(g.grad(z).is_none_or(|d| d.iter().all(|&x| x == 0.0)));
    assert!(l.report.semi > 0.0 && l.report.dis > 0.0);
    assert_eq!(l.report.total, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn report_total_is_weighted_sum(seed in any::<u64>(), epoch in 0usize..200, beta_max in 0.0f64..2.0, gamma in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 10;
        let w = LossWeights { beta_max, gamma, ..Default::default() };
        let mut g = Graph::new();
        let s = g.constant([n], random(&mut rng, n, 0.0, 1.0).into_data()).unwrap();
        let z = g.constant([n], random(&mut rng, n, -1.0, 1.0).into_data()).unwrap();
        let zt = g.constant([n], random(&mut rng, n, -1.0, 1.0).into_data()).unwrap();
        let y = g.constant([n], binary(&mut rng, n)).unwrap();
        let labeled = rng.random_bool(0.5);
        let t = StudentTargets {
            y_gt: labeled.then_some(y),
            y_pse: (!labeled).then_some(y),
            z_tea: Some(zt),
        };
        let l = student_loss(&mut g, s, z, t, &w, epoch).unwrap();
        prop_assert!((l.report.total - l.report.weighted_sum()).abs() < 1e-12);

        let x = g.constant([n], random(&mut rng, n, 0.0, 1.0).into_data()).unwrap();
        let cbv = g.constant(Vec::<usize>::new(), vec![rng.random_range(0.0..3.0)]).unwrap();
        let p = teacher_pretrain_loss(&mut g, x, s, cbv, &w).unwrap();
        prop_assert!((p.report.total - p.report.weighted_sum()).abs() < 1e-12);
    }

    #[test]
    fn dice_in_unit_interval(seed in any::<u64>(), n in 1usize..40, smooth in 1e-3f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let p = g.constant([n], random(&mut rng, n, 0.0, 1.0).into_data()).unwrap();
        let t = g.constant([n], binary(&mut rng, n)).unwrap();
        let l = soft_dice_loss(&mut g, p, t, smooth).unwrap();
        let v = g.item(l);
        prop_assert!((0.0..1.0).contains(&v), "{v}");
    }
}
