use super::*;
use crate::autodiff::gradcheck::{gradcheck, GradcheckOptions};

fn rand_t(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn value(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).data()[0]
}

const SHAPES: [[usize; 4]; 3] = [[1, 1, 4, 4], [2, 1, 5, 3], [2, 3, 6, 7]];

#[test]
fn euclidean_hand_values() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::full(&[1, 1, 2, 2], 3.0));
    let t = g.constant(Tensor::full(&[1, 1, 2, 2], 2.0));
    let l = euclidean_loss(&mut g, p, t, true).unwrap();
    assert_eq!(value(&g, l), 4.0);
    let same = euclidean_loss(&mut g, p, p, true).unwrap();
    assert_eq!(value(&g, same), 0.0);

    let p2 = g.constant(Tensor::full(&[2, 1, 2, 2], 1.0));
    let t2 = g.constant(Tensor::zeros(&[2, 1, 2, 2]));
    let half = euclidean_loss(&mut g, p2, t2, true).unwrap();
    let raw = euclidean_loss(&mut g, p2, t2, false).unwrap();
    assert_eq!(value(&g, half), 4.0);
    assert_eq!(value(&g, raw), 8.0);

    let bad = g.constant(Tensor::zeros(&[1, 1, 2, 3]));
    assert!(matches!(
        euclidean_loss(&mut g, p, bad, true),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn euclidean_gradient_is_scaled_residual() {
    let pred = rand_t(&[2, 1, 3, 3], 0.0, 1.0, 1);
    let target = rand_t(&[2, 1, 3, 3], 0.0, 1.0, 2);
    let mut g = Graph::new();
    let p = g.param(pred.clone());
    let t = g.constant(target.clone());
    let l = euclidean_loss(&mut g, p, t, true).unwrap();
    g.backward(l).unwrap();
    let expect = pred.zip_map(&target, |a, b| a - b).unwrap();
    for (gr, e) in g.grad(p).unwrap().data().iter().zip(expect.data()) {
        assert!((gr - e).abs() < 1e-15);
    }
}

#[test]
fn adversarial_hand_values() {
    let mut g = Graph::new();
    let ones = g.constant(Tensor::ones(&[2, 1, 3, 3]));
    let zeros = g.constant(Tensor::zeros(&[2, 1, 3, 3]));
    let half = g.constant(Tensor::full(&[2, 1, 3, 3], 0.5));
    let fooled = adversarial_g_loss(&mut g, ones).unwrap();
    assert!(value(&g, fooled).abs() < 1e-7);
    let l = adversarial_g_loss(&mut g, half).unwrap();
    assert!((value(&g, l) - std::f64::consts::LN_2).abs() < 1e-7);
    let perfect = adversarial_d_loss(&mut g, ones, zeros).unwrap();
    assert!(value(&g, perfect).abs() < 1e-7);
    let confused = adversarial_d_loss(&mut g, half, half).unwrap();
    assert!((value(&g, confused) - 2.0 * std::f64::consts::LN_2).abs() < 1e-7);
}

#[test]
fn gradient_ops_hand_values() {
    let mut g = Graph::new();
    let row =
        g.constant(Tensor::from_vec(&[1, 1, 2, 3], vec![1.0, 3.0, 6.0, 1.0, 3.0, 6.0]).unwrap());
    let (hx, hy) = gradient_ops(&mut g, row).unwrap();
    assert_eq!(g.value(hx).data(), &[2.0, 3.0, 2.0, 3.0]);
    assert!(g.value(hy).data().iter().all(|&v| v == 0.0));

    let ramp = g.constant(Tensor::from_fn(&[1, 1, 4, 4], |k| {
        (k % 4) as f64 * 0.5 + (k / 4) as f64
    }));
    let (hx, hy) = gradient_ops(&mut g, ramp).unwrap();
    assert!(g.value(hx).data().iter().all(|&v| v == 0.5));
    assert!(g.value(hy).data().iter().all(|&v| v == 1.0));

    let thin = g.constant(Tensor::zeros(&[1, 1, 1, 4]));
    assert!(matches!(
        gradient_ops(&mut g, thin),
        Err(Error::Degenerate(_))
    ));
}

#[test]
fn gradient_loss_matches_loop_oracle() {
    let a = rand_t(&[1, 1, 4, 4], 0.0, 1.0, 3);
    let b = rand_t(&[1, 1, 4, 4], 0.0, 1.0, 4);
    let mut oracle = 0.0;
    let at = |t: &Tensor<f64>, i: usize, j: usize| t.data()[i * 4 + j];
    for i in 0..4 {
        for j in 0..4 {
            if j + 1 < 4 {
                let d = (at(&a, i, j + 1) - at(&a, i, j)) - (at(&b, i, j + 1) - at(&b, i, j));
                oracle += d * d;
            }
            if i + 1 < 4 {
                let d = (at(&a, i + 1, j) - at(&a, i, j)) - (at(&b, i + 1, j) - at(&b, i, j));
                oracle += d * d;
            }
        }
    }
    let mut g = Graph::new();
    let (pa, pb) = (g.constant(a.clone()), g.constant(b));
    let l = gradient_loss(&mut g, pa, pb, true).unwrap();
    assert!((value(&g, l) - oracle).abs() < 1e-12);

    let shifted = g.constant(a.map(|v| v + 0.37));
    let l = gradient_loss(&mut g, shifted, pa, true).unwrap();
    assert!(value(&g, l) < 1e-28);
    let l = gradient_loss(&mut g, pa, pa, true).unwrap();
    assert_eq!(value(&g, l), 0.0);
}

#[test]
fn perceptual_identity_and_zero() {
    let a = rand_t(&[2, 3, 8, 8], 0.0, 1.0, 5);
    let b = rand_t(&[2, 3, 8, 8], 0.0, 1.0, 6);
    let mut g = Graph::new();
    let (pa, pb) = (g.constant(a.clone()), g.constant(b.clone()));
    let id = FeatureNet::identity();
    let p = perceptual_loss(&mut g, pa, pb, &id, true).unwrap();
    let e = euclidean_loss(&mut g, pa, pb, false).unwrap();
    let expect = value(&g, e) / a.len() as f64;
    assert!((value(&g, p) - expect).abs() < 1e-14);

    let net = FeatureNet::new(0);
    let z = perceptual_loss(&mut g, pa, pa, &net, true).unwrap();
    assert_eq!(value(&g, z), 0.0);
    let nz = perceptual_loss(&mut g, pa, pb, &net, true).unwrap();
    assert!(value(&g, nz) > 0.0);
    assert_eq!(FeatureNet::<f64>::new(0), net);

    let gray = g.constant(Tensor::zeros(&[2, 1, 8, 8]));
    assert!(perceptual_loss(&mut g, gray, gray, &net, true).is_err());
}

#[test]
fn composites_recompose_from_terms() {
    let pt = rand_t(&[2, 1, 8, 8], 0.0, 1.0, 7);
    let tt = rand_t(&[2, 1, 8, 8], 0.0, 1.0, 8);
    let df = rand_t(&[2, 1, 3, 3], 0.1, 0.9, 9);
    let w = LossWeights::default();
    let mut g = Graph::new();
    let (p, t, d) = (g.constant(pt), g.constant(tt), g.constant(df));
    let terms = transmission_loss(&mut g, p, t, Some(d), &w).unwrap();
    let e = euclidean_loss(&mut g, p, t, true).unwrap();
    let a = adversarial_g_loss(&mut g, d).unwrap();
    let gr = gradient_loss(&mut g, p, t, true).unwrap();
    let manual = value(&g, e) + 0.003 * value(&g, a) + value(&g, gr);
    assert!((value(&g, terms.total) - manual).abs() < 1e-12);

    // Dropping a term removes exactly its weighted contribution.
    let no_adv = LossWeights {
        enable_adv: false,
        ..w.clone()
    };
    let t2 = transmission_loss(&mut g, p, t, None, &no_adv).unwrap();
    assert!((value(&g, terms.total) - value(&g, t2.total) - 0.003 * value(&g, a)).abs() < 1e-12);
    assert!(transmission_loss(&mut g, p, t, None, &w).is_err());

    let l2_only = Preset::TL2.weights();
    let zero = transmission_loss(&mut g, p, p, None, &l2_only).unwrap();
    assert_eq!(value(&g, zero.total), 0.0);

    let pj = rand_t(&[2, 3, 8, 8], 0.0, 1.0, 10);
    let tj = rand_t(&[2, 3, 8, 8], 0.0, 1.0, 11);
    let (pj, tj) = (g.constant(pj), g.constant(tj));
    let feat = FeatureNet::new(1);
    let dl = dehazing_loss(&mut g, pj, tj, Some(&feat), &w).unwrap();
    let e = euclidean_loss(&mut g, pj, tj, true).unwrap();
    let pc = perceptual_loss(&mut g, pj, tj, &feat, true).unwrap();
    assert!((value(&g, dl.total) - value(&g, e) - 1.5 * value(&g, pc)).abs() < 1e-12);
    assert!(dehazing_loss(&mut g, pj, tj, None, &w).is_err());
    let z = dehazing_loss(&mut g, pj, pj, Some(&feat), &w).unwrap();
    assert_eq!(value(&g, z.total), 0.0);
}

#[test]
fn presets_round_trip_and_defaults() {
    let w = LossWeights::default();
    assert_eq!((w.lambda_a, w.lambda_g, w.lambda_p), (0.003, 1.0, 1.5));
    for p in Preset::ALL {
        assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        let pw = p.weights();
        assert_eq!((pw.lambda_a, pw.lambda_g, pw.lambda_p), (0.003, 1.0, 1.5));
    }
    assert!("T-L3".parse::<Preset>().is_err());
    assert!(!Preset::IL2NoT.weights().enable_transmission_branch);
    assert!(Preset::IL2PerT.weights().enable_perc);
    assert!(!Preset::IL2T.weights().enable_perc);
    assert!(LossWeights {
        lambda_p: -1.0,
        ..w
    }
    .validate()
    .is_err());
}

fn check(inputs: &[(&str, Tensor<f64>)], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
    let rep = gradcheck(inputs, f, GradcheckOptions::default()).unwrap();
    assert!(rep.passes(1e-4), "{rep:?}");
}

#[test]
fn gradcheck_pixel_losses() {
    for (k, s) in SHAPES.iter().enumerate() {
        let k = k as u64 * 10;
        let a = rand_t(s, 0.0, 1.0, k + 1);
        let b = rand_t(s, 0.0, 1.0, k + 2);
        check(&[("pred", a.clone()), ("target", b.clone())], |g, v| {
            euclidean_loss(g, v[0], v[1], true)
        });
        check(&[("pred", a.clone()), ("target", b.clone())], |g, v| {
            gradient_loss(g, v[0], v[1], true)
        });
        let d1 = rand_t(s, 0.05, 0.95, k + 3);
        let d2 = rand_t(s, 0.05, 0.95, k + 4);
        check(&[("fake", d1.clone())], |g, v| adversarial_g_loss(g, v[0]));
        check(&[("real", d2), ("fake", d1.clone())], |g, v| {
            adversarial_d_loss(g, v[0], v[1])
        });
        check(&[("pred", a), ("target", b), ("d", d1)], |g, v| {
            let w = LossWeights::default();
            Ok(transmission_loss(g, v[0], v[1], Some(v[2]), &w)?.total)
        });
    }
}

#[test]
fn gradcheck_perceptual_and_dehazing() {
    let feat = FeatureNet::new(3);
    for (k, s) in [[1usize, 3, 4, 4], [2, 3, 6, 5], [1, 3, 8, 8]]
        .iter()
        .enumerate()
    {
        let k = k as u64 * 10;
        let a = rand_t(s, 0.0, 1.0, k + 1);
        let b = rand_t(s, 0.0, 1.0, k + 2);
        check(&[("pred", a.clone()), ("target", b.clone())], |g, v| {
            perceptual_loss(g, v[0], v[1], &feat, true)
        });
        check(&[("pred", a), ("target", b)], |g, v| {
            Ok(dehazing_loss(g, v[0], v[1], Some(&feat), &LossWeights::default())?.total)
        });
    }
}
