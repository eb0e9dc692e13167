use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::diffcore::{grad_check, logistic};
use crate::seeded;

fn latents(rng: &mut crate::Rng, n: usize, dim: usize) -> Array {
    let data = (0..n * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
    Array::matrix(n, dim, data).unwrap()
}

fn row(v: &[f64]) -> Array {
    Array::matrix(1, v.len(), v.to_vec()).unwrap()
}

fn build(spec: &HeadSpec, seed: u64) -> Box<dyn LatentHead> {
    HeadRegistry::with_defaults().build(spec, &mut seeded(seed)).unwrap()
}

fn components(u: &[f64], v: &[f64], k: usize, l: usize) -> Vec<f64> {
    let mut t = Tape::new();
    let (u, v) = (t.constant(row(u)), t.constant(row(v)));
    let c = iqe_components(&mut t, u, v, k, l).unwrap();
    t.value(c).data().to_vec()
}

/// Small configurations of every latent family, cheap enough for sampling.
fn small_specs() -> Vec<HeadSpec> {
    HeadFamily::ALL
        .into_iter()
        .filter(|f| f.is_latent())
        .map(|f| {
            let spec = HeadSpec::new(f, 3, 4);
            match f {
                HeadFamily::DeepNormOrig | HeadFamily::DeepNormFixed => spec.with_hidden(vec![3, 8]),
                HeadFamily::WideNorm => spec.with_hidden(vec![3, 5]),
                HeadFamily::MrnOrig | HeadFamily::MrnFixed => spec.with_hidden(vec![6]),
                _ => spec,
            }
        })
        .collect()
}

/// Pixelated measure of a union of intervals.
fn pixel_measure(u: &[f64], v: &[f64], res: f64) -> f64 {
    let lo = u.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = u.iter().zip(v).map(|(a, b)| a.max(*b)).fold(f64::NEG_INFINITY, f64::max);
    let n = ((hi - lo) / res).ceil() as usize;
    let covered = (0..n)
        .filter(|&i| {
            let x = lo + (i as f64 + 0.5) * res;
            u.iter().zip(v).any(|(&a, &b)| a <= x && x <= a.max(b))
        })
        .count();
    covered as f64 * res
}

#[test]
fn iqe_component_examples() {
    assert_eq!(components(&[0.0, 2.0, 5.0], &[1.0, 3.0, 4.0], 1, 3), vec![2.0]);
    assert_eq!(components(&[0.0, 0.5, 3.0], &[2.0, 1.0, 3.0], 1, 3), vec![2.0]);
    assert_eq!(components(&[0.3, -1.0, 2.0, 4.0], &[0.3, -1.0, 2.0, 4.0], 2, 2), vec![0.0, 0.0]);
    assert_eq!(components(&[1.0], &[0.0], 1, 1), vec![0.0]);
    assert_eq!(components(&[0.0], &[1.0], 1, 1), vec![1.0]);
}

#[test]
fn iqe_rejects_mismatched_latents() {
    let mut t = Tape::new();
    let u = t.constant(Array::zeros(&[1, 4]));
    let v = t.constant(Array::zeros(&[1, 3]));
    assert!(iqe_components(&mut t, u, v, 2, 2).is_err());
    let head = build(&HeadSpec::new(HeadFamily::IqeSum, 2, 2), 0);
    assert!(head.eval(&Array::zeros(&[1, 4]), &Array::zeros(&[2, 4])).is_err());
}

#[test]
fn iqe_sum_examples() {
    let head = build(&HeadSpec::new(HeadFamily::IqeSum, 2, 3), 0);
    let u = [0.0, 2.0, 5.0, 0.0, 0.5, 3.0];
    let v = [1.0, 3.0, 4.0, 2.0, 1.0, 3.0];
    assert_eq!(head.eval_pair(&u, &v).unwrap(), 4.0);
    assert_eq!(head.eval_pair(&u, &u).unwrap(), 0.0);
    let (u3, v3): (Vec<f64>, Vec<f64>) = (u.iter().map(|x| 3.0 * x).collect(), v.iter().map(|x| 3.0 * x).collect());
    assert!((head.eval_pair(&u3, &v3).unwrap() - 12.0).abs() < 1e-12);
    assert_eq!(head.param_count(), 0);
}

#[test]
fn maxmean_examples() {
    assert_eq!(maxmean_reduce(&[1.0, 3.0], 1.0).unwrap(), 3.0);
    assert_eq!(maxmean_reduce(&[1.0, 3.0], 0.0).unwrap(), 2.0);
    assert_eq!(maxmean_reduce(&[1.0, 3.0], 0.5).unwrap(), 2.5);
    assert_eq!(maxmean_reduce(&[2.0, 0.0], 0.5).unwrap(), 1.5);
    assert!(maxmean_reduce(&[], 0.5).is_err());
}

#[test]
fn iqe_maxmean_examples() {
    let mut head = build(&HeadSpec::new(HeadFamily::IqeMaxmean, 2, 3), 0);
    assert_eq!(head.param_count(), 1);
    assert_eq!(logistic(head.params().values()[0].data()[0]), 0.5);
    // components (2, 0)
    let u = [0.0, 0.5, 3.0, 1.0, 1.0, 1.0];
    let v = [2.0, 1.0, 3.0, 0.0, 0.0, 0.0];
    assert_eq!(head.eval_pair(&u, &v).unwrap(), 1.5);
    assert_eq!(head.eval_pair(&u, &u).unwrap(), 0.0);

    // l = 1 with α at 1 recovers max_i (v_i − u_i)^+
    let mut h1 = build(&HeadSpec::new(HeadFamily::IqeMaxmean, 4, 1), 0);
    h1.params_mut().values_mut()[0].data_mut()[0] = 40.0;
    let mut rng = seeded(3);
    for _ in 0..50 {
        let a = latents(&mut rng, 1, 4);
        let b = latents(&mut rng, 1, 4);
        let want = a.data().iter().zip(b.data()).map(|(x, y)| (y - x).max(0.0)).fold(0.0, f64::max);
        assert!((h1.eval_pair(a.data(), b.data()).unwrap() - want).abs() < 1e-12);
    }
    head.params_mut().values_mut()[0].data_mut()[0] = 0.0;
}

#[test]
fn pqe_lh_examples() {
    let head = build(&HeadSpec::new(HeadFamily::PqeLh, 1, 1), 0);
    // α initialised to 1/k = 1
    let d = head.eval_pair(&[1.0], &[0.0]).unwrap();
    assert!((d - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
    assert!((d - 0.63212).abs() < 1e-5);
    assert_eq!(head.eval_pair(&[0.4], &[0.4]).unwrap(), 0.0);

    let head = build(&HeadSpec::new(HeadFamily::PqeLh, 4, 2), 1);
    let mut rng = seeded(9);
    let total: f64 = head.params().values()[0].data().iter().map(|&r| crate::diffcore::softplus(r)).sum();
    let u = latents(&mut rng, 200, 8);
    let v = latents(&mut rng, 200, 8);
    for d in head.eval(&u, &v).unwrap() {
        assert!(d < total && d >= 0.0);
    }
}

#[test]
fn deep_norm_default_size_and_identity() {
    let orig = build(&HeadSpec::new(HeadFamily::DeepNormOrig, 6, 8), 0);
    let fixed = build(&HeadSpec::new(HeadFamily::DeepNormFixed, 6, 8), 0);
    // three 48×48 input maps, two 48×48 inner maps, maxrelu pairs, alpha
    assert_eq!(orig.param_count(), 5 * 48 * 48 + 3 * 2 + 1);
    assert_eq!(fixed.param_count(), 5 * 48 * 48 + 2 * 2 + 1);
    let mut rng = seeded(1);
    let u = latents(&mut rng, 5, 48);
    for head in [&orig, &fixed] {
        for d in head.eval(&u, &u).unwrap() {
            assert_eq!(d, 0.0);
        }
    }
}

#[test]
fn wide_norm_identity() {
    let head = build(&HeadSpec::new(HeadFamily::WideNorm, 4, 4), 0);
    assert_eq!(head.param_count(), 12 * 11 * 32 + 1);
    let mut rng = seeded(2);
    let u = latents(&mut rng, 5, 16);
    assert!(head.eval(&u, &u).unwrap().iter().all(|&d| d == 0.0));
}

fn collinear_mrn(family: HeadFamily) -> Box<dyn LatentHead> {
    let mut head = build(&HeadSpec::new(family, 1, 1).with_hidden(vec![1]), 0);
    let vals = head.params_mut().values_mut();
    vals[0] = Array::matrix(1, 1, vec![1.0]).unwrap();
    vals[1] = Array::matrix(1, 1, vec![1.0]).unwrap();
    vals[2] = Array::matrix(1, 1, vec![0.0]).unwrap();
    vals[3] = Array::matrix(1, 1, vec![0.0]).unwrap();
    head
}

#[test]
fn mrn_collinear_examples() {
    let orig = collinear_mrn(HeadFamily::MrnOrig);
    let d = |h: &dyn LatentHead, a: f64, b: f64| h.eval_pair(&[a], &[b]).unwrap();
    assert_eq!(d(orig.as_ref(), 0.0, 2.0), 4.0);
    assert_eq!(d(orig.as_ref(), 0.0, 1.0) + d(orig.as_ref(), 1.0, 2.0), 2.0);
    let fixed = collinear_mrn(HeadFamily::MrnFixed);
    assert_eq!(d(fixed.as_ref(), 0.0, 2.0), 2.0);
    assert_eq!(d(fixed.as_ref(), 0.0, 1.0) + d(fixed.as_ref(), 1.0, 2.0), 2.0);
    for h in [&orig, &fixed] {
        assert_eq!(d(h.as_ref(), 1.5, 1.5), 0.0);
    }
}

#[test]
fn metric_examples() {
    let e = build(&HeadSpec::new(HeadFamily::MetricEuclid, 1, 2), 0);
    let m = build(&HeadSpec::new(HeadFamily::MetricL1, 1, 2), 0);
    assert_eq!(e.eval_pair(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
    assert_eq!(m.eval_pair(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 7.0);
    let s = build(&HeadSpec::new(HeadFamily::MetricSphere, 1, 2), 0);
    let right = s.eval_pair(&[1.0, 0.0], &[0.0, 2.0]).unwrap();
    assert!((right - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    let opposite = s.eval_pair(&[1.0, 0.0], &[-3.0, 0.0]).unwrap();
    assert!((opposite - std::f64::consts::PI).abs() < 1e-12);
    assert!(s.eval_pair(&[0.0, 0.0], &[1.0, 0.0]).is_err());

    let mut rng = seeded(4);
    for spec in small_specs().into_iter().filter(|s| s.family.is_metric()) {
        let head = build(&spec, 1);
        let u = latents(&mut rng, 100, spec.dim());
        let v = latents(&mut rng, 100, spec.dim());
        let (a, b) = (head.eval(&u, &v).unwrap(), head.eval(&v, &u).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-9);
        }
    }
}

#[test]
fn transform_examples() {
    let run = |t: OutputTransform, o: f64| {
        let mut tape = Tape::new();
        let o = tape.constant(Array::vector(vec![o]));
        let (d, clamped) = t.apply(&mut tape, o, 0.9).unwrap();
        (tape.value(d).data()[0], clamped)
    };
    assert_eq!(run(OutputTransform::Square, -3.0), (9.0, 0));
    assert_eq!(run(OutputTransform::Direct, -3.0), (-3.0, 0));
    assert!((run(OutputTransform::Exp, 1.0).0 - std::f64::consts::E).abs() < 1e-15);
    let (d, c) = run(OutputTransform::Discounted, 0.9);
    assert!((d - 1.0).abs() < 1e-12 && c == 0);
    let (d, c) = run(OutputTransform::Discounted, -0.5);
    assert_eq!(c, 1);
    assert!((d - DISCOUNT_FLOOR.ln() / 0.9f64.ln()).abs() < 1e-9);
    let (d, c) = run(OutputTransform::Discounted, 1.5);
    assert_eq!((d, c), (0.0, 1));
    let (d, _) = run(OutputTransform::SigmoidDiscounted, 0.0);
    assert!((d - 0.5f64.ln() / 0.9f64.ln()).abs() < 1e-12);
}

#[test]
fn head_spec_json_round_trips() {
    for f in HeadFamily::ALL {
        let spec = HeadSpec::new(f, 4, 3);
        let json = spec.to_json().unwrap();
        assert!(json.contains(f.tag()));
        assert_eq!(HeadSpec::from_json(&json).unwrap(), spec);
    }
    let bad = r#"{"family":"iqe-sum","k":0,"l":3}"#;
    assert!(HeadSpec::from_json(bad).is_err());
    let bad = r#"{"family":"deep-norm-orig","k":2,"l":3,"hidden":[3,47]}"#;
    assert!(HeadSpec::from_json(bad).is_err());
    let bad = r#"{"family":"unconstrained","k":2,"l":3}"#;
    assert!(HeadSpec::from_json(bad).is_err());
    let bad = r#"{"family":"iqe-sum","k":2,"l":3,"transform":"exp"}"#;
    assert!(HeadSpec::from_json(bad).is_err());
    assert!(HeadSpec::from_json(r#"{"family":"nope","k":1,"l":1}"#).is_err());
}

#[test]
fn param_counts_per_family() {
    assert_eq!(head_param_count(&HeadSpec::new(HeadFamily::IqeSum, 8, 6)).unwrap(), 0);
    assert_eq!(head_param_count(&HeadSpec::new(HeadFamily::IqeMaxmean, 8, 6)).unwrap(), 1);
    assert_eq!(head_param_count(&HeadSpec::new(HeadFamily::PqeLh, 8, 6)).unwrap(), 8);
    assert_eq!(head_param_count(&HeadSpec::new(HeadFamily::DeepNormOrig, 8, 6)).unwrap(), 11527);
    assert_eq!(head_param_count(&HeadSpec::new(HeadFamily::AsymDot, 8, 6)).unwrap(), 0);
    let unc = HeadSpec::new(HeadFamily::Unconstrained, 2, 2).with_hidden(vec![5]);
    assert_eq!(head_param_count(&unc).unwrap(), 8 * 5 + 5 + 5 + 1);
}

#[test]
fn registry_lists_latent_families_and_accepts_new_ones() {
    let mut r = HeadRegistry::with_defaults();
    let names: Vec<&str> = r.names().collect();
    assert_eq!(names.len(), 12);
    assert!(r.build(&HeadSpec::new(HeadFamily::AsymDot, 2, 2), &mut seeded(0)).is_err());
    r.register("asym-dot", |spec, rng| {
        HeadRegistry::with_defaults().build(&HeadSpec { family: HeadFamily::IqeSum, transform: None, ..spec.clone() }, rng)
    });
    assert!(r.build(&HeadSpec::new(HeadFamily::AsymDot, 2, 2), &mut seeded(0)).is_ok());
}

#[test]
fn profiles_start_at_zero_and_iqe_is_linear() {
    let mut rng = seeded(5);
    let u0 = latents(&mut rng, 1, 12).into_data();
    let v0 = latents(&mut rng, 1, 12).into_data();
    let scales = [0.0, 0.5, 1.0, 2.0, 4.0, 8.0];
    for spec in small_specs().into_iter().filter(|s| s.family.is_quasimetric()) {
        let table = profile_head(build(&spec, 0).as_ref(), &u0, &v0, &scales).unwrap();
        assert_eq!(table.rows[0].distance, 0.0, "{}", spec.family);
        assert!(table.to_csv().lines().count() == scales.len() + 1);
    }
    let iqe = profile_head(build(&HeadSpec::new(HeadFamily::IqeSum, 3, 4), 0).as_ref(), &u0, &v0, &scales)
        .unwrap();
    let unit = iqe.rows[2].distance;
    for r in &iqe.rows {
        assert!((r.distance - r.scale * unit).abs() <= 1e-12 * (1.0 + r.distance));
        assert_eq!(r.components.len(), 3);
    }
    let pqe_head = build(&HeadSpec::new(HeadFamily::PqeLh, 3, 4), 0);
    let total: f64 = pqe_head.params().values()[0].data().iter().map(|&r| crate::diffcore::softplus(r)).sum();
    let pqe = profile_head(pqe_head.as_ref(), &u0, &v0, &[1.0, 10.0, 100.0, 1000.0]).unwrap();
    for r in &pqe.rows {
        assert!(r.distance <= total * (1.0 + 1e-12));
    }
    // saturated: a hundredfold step barely moves the distance
    assert!(pqe.rows[3].distance - pqe.rows[2].distance < 1e-6 * total);
}

#[test]
fn identity_holds_on_random_latents() {
    for spec in small_specs() {
        let head = build(&spec, 7);
        let u = latents(&mut seeded(8), 10_000, spec.dim());
        let worst = head.eval(&u, &u).unwrap().into_iter().fold(0.0, |m: f64, d| m.max(d.abs()));
        assert!(worst <= 1e-9, "{}: {worst}", spec.family);
    }
}

#[test]
fn triangle_and_nonnegativity_on_random_triples() {
    let n = 100_000;
    for spec in small_specs() {
        let head = build(&spec, 11);
        let mut rng = seeded(12);
        let (x, y, z) = (latents(&mut rng, n, spec.dim()), latents(&mut rng, n, spec.dim()), latents(&mut rng, n, spec.dim()));
        let xy = head.eval(&x, &y).unwrap();
        if spec.family != HeadFamily::DeepNormOrig {
            assert!(xy.iter().all(|&d| d >= -1e-12), "{}", spec.family);
        }
        if !spec.family.is_quasimetric() && !spec.family.is_metric() {
            continue;
        }
        let yz = head.eval(&y, &z).unwrap();
        let xz = head.eval(&x, &z).unwrap();
        let worst = (0..n).map(|i| xz[i] - xy[i] - yz[i]).fold(f64::NEG_INFINITY, f64::max);
        assert!(worst <= 1e-9, "{}: {worst}", spec.family);
    }
}

#[test]
fn homogeneity_holds_exactly_where_claimed() {
    let mut rng = seeded(13);
    for spec in small_specs() {
        let head = build(&spec, 3);
        let u = latents(&mut rng, 500, spec.dim());
        let v = latents(&mut rng, 500, spec.dim());
        let base = head.eval(&u, &v).unwrap();
        for alpha in [0.5, 2.0, 10.0] {
            let scaled = head.eval(&u.map(|x| alpha * x), &v.map(|x| alpha * x)).unwrap();
            let worst = base
                .iter()
                .zip(&scaled)
                .map(|(b, s)| (s - alpha * b).abs() / (alpha * b.abs()).max(1e-12))
                .fold(0.0, f64::max);
            if spec.family.is_positively_homogeneous() {
                assert!(worst <= 1e-9, "{} at {alpha}: {worst}", spec.family);
            } else if spec.family == HeadFamily::PqeLh && alpha == 10.0 {
                assert!(worst > 0.1, "pqe-lh at 10: {worst}");
            }
        }
    }
}

#[test]
fn components_match_pixel_oracle() {
    let mut rng = seeded(14);
    for _ in 0..1000 {
        let l = rng.random_range(1..5);
        let u: Vec<f64> = (0..l).map(|_| rng.random_range(-3.0..3.0)).collect();
        let v: Vec<f64> = (0..l).map(|_| rng.random_range(-3.0..3.0)).collect();
        let got = components(&u, &v, 1, l)[0];
        let want = pixel_measure(&u, &v, 1e-4);
        assert!((got - want).abs() <= 1e-3, "{u:?} {v:?}: {got} vs {want}");
    }
}

#[test]
fn every_head_matches_finite_differences() {
    let specs = small_specs();
    let mut rng = seeded(15);
    for trial in 0..100 {
        let spec = &specs[trial % specs.len()];
        let head = build(spec, trial as u64);
        let b = rng.random_range(1..4);
        let mut inputs = vec![latents(&mut rng, b, spec.dim()), latents(&mut rng, b, spec.dim())];
        inputs.extend(head.params().values().iter().cloned());
        let report = grad_check(
            |t, p| {
                let d = head.distance(t, &p[2..], p[0], p[1]).map_err(|e| match e {
                    crate::Error::Diff(d) => d,
                    other => panic!("{other}"),
                })?;
                let w = t.constant(Array::vector((1..=b).map(|i| i as f64 * 0.7).collect()));
                let d = t.mul(d, w)?;
                Ok(t.sum(d))
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{} trial {trial}: {report:?}", spec.family);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iqe_sum_is_a_quasimetric(
        x in prop::collection::vec(-5.0f64..5.0, 6),
        y in prop::collection::vec(-5.0f64..5.0, 6),
        z in prop::collection::vec(-5.0f64..5.0, 6),
    ) {
        let head = build(&HeadSpec::new(HeadFamily::IqeSum, 2, 3), 0);
        let d = |a: &[f64], b: &[f64]| head.eval_pair(a, b).unwrap();
        prop_assert_eq!(d(&x, &x), 0.0);
        prop_assert!(d(&x, &y) >= 0.0);
        prop_assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z) + 1e-9);
    }

    #[test]
    fn iqe_components_shift_invariant(
        u in prop::collection::vec(-5.0f64..5.0, 4),
        v in prop::collection::vec(-5.0f64..5.0, 4),
        c in -10.0f64..10.0,
    ) {
        let a = components(&u, &v, 1, 4)[0];
        let us: Vec<f64> = u.iter().map(|x| x + c).collect();
        let vs: Vec<f64> = v.iter().map(|x| x + c).collect();
        prop_assert!((components(&us, &vs, 1, 4)[0] - a).abs() < 1e-9);
    }
}
