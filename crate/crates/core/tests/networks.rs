use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vpbsd_core::networks::*;
use vpbsd_tensor::{Graph, ParamSet};

fn input(g: &mut Graph, seed: u64, b: usize, e: usize) -> vpbsd_tensor::Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = b * e * e * e;
    g.constant(
        [b, 1, e, e, e],
        (0..n).map(|_| rng.random::<f64>()).collect(),
    )
    .unwrap()
}

#[test]
fn single_conv_has_28_parameters() {
    let mut ps = ParamSet::new();
    ConvUnit::new(
        &mut ps,
        &mut ChaCha8Rng::seed_from_u64(0),
        "c",
        1,
        1,
        3,
        None,
    );
    assert_eq!(count_parameters(&ps), 28);
}

#[test]
fn parameter_budget() {
    let s = Student::new(StudentConfig::default(), 0).unwrap();
    let t = Teacher::new(TeacherConfig::default(), 0).unwrap();
    let (ns, nt) = (count_parameters(&s.params), count_parameters(&t.params));
    assert!(ns < 200_000, "{ns}");
    assert!(nt > 10 * ns, "{nt} vs {ns}");
}

#[test]
fn teacher_shapes_and_ranges() {
    let t = Teacher::new(TeacherConfig::default(), 1).unwrap();
    let mut g = Graph::new();
    let b = t.params.bind(&mut g);
    let x = input(&mut g, 2, 1, 32);
    let (seg, enc) = t.segment(&mut g, &b, x).unwrap();
    assert_eq!(g.shape(seg), &[1, 1, 32, 32, 32]);
    assert!(g.value(seg).iter().all(|&p| (0.0..=1.0).contains(&p)));
    assert_eq!(g.shape(enc.z), &[1, 128, 2, 2, 2]);
    let rec = t.reconstruct(&mut g, &b, enc.z).unwrap();
    assert_eq!(g.shape(rec), g.shape(x));

    let mut g = Graph::new();
    let b = t.params.bind(&mut g);
    let c = g.constant([1, 1, 16, 16, 16], vec![0.3; 4096]).unwrap();
    let (seg, _) = t.segment(&mut g, &b, c).unwrap();
    assert!(g.value(seg).iter().all(|v| v.is_finite()));
}

#[test]
fn indivisible_extent_is_rejected() {
    let s = Student::new(StudentConfig::default(), 0).unwrap();
    let mut g = Graph::new();
    let b = s.params.bind(&mut g);
    let x = g
        .constant([1, 1, 24, 32, 32], vec![0.0; 24 * 1024])
        .unwrap();
    assert!(s.forward(&mut g, &b, x).is_err());
}

#[test]
fn student_shapes_and_gradient_reach() {
    let s = Student::new(StudentConfig::default(), 3).unwrap();
    let mut g = Graph::new();
    let b = s.params.bind(&mut g);
    let x = input(&mut g, 4, 2, 32);
    let out = s.forward(&mut g, &b, x).unwrap();
    assert_eq!(g.shape(out.seg), g.shape(x));
    assert_eq!(g.shape(out.z), &[2, 32, 2, 2, 2]);
    assert!(g.value(out.seg).iter().all(|&p| (0.0..=1.0).contains(&p)));
    let loss = g.mean(out.seg);
    g.backward(loss).unwrap();
    let mut ps = s.params.clone();
    ps.collect_grads(&g, &b).unwrap();
    let first = ps.by_name("enc1.conv.w").unwrap().grad().unwrap();
    assert!(first.iter().any(|&v| v != 0.0));
}

#[test]
fn zero_weights_give_one_half() {
    let mut s = Student::new(StudentConfig::default(), 5).unwrap();
    s.params.iter_mut().for_each(|(n, t)| {
        if !n.ends_with("gamma") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    });
    let mut g = Graph::new();
    let b = s.params.bind(&mut g);
    let x = input(&mut g, 6, 1, 16);
    let out = s.forward(&mut g, &b, x).unwrap();
    assert!(g.value(out.seg).iter().all(|&p| p == 0.5));
}

#[test]
fn identical_inputs_give_identical_outputs() {
    let s = Student::new(StudentConfig::default(), 8).unwrap();
    let run = || {
        let mut g = Graph::new();
        let b = s.params.bind(&mut g);
        let x = input(&mut g, 9, 1, 16);
        let out = s.forward(&mut g, &b, x).unwrap();
        g.value(out.seg).to_vec()
    };
    assert_eq!(run(), run());
}
