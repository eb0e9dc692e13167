use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vec_arr(v: &[f64]) -> Array {
    Array::vector(v.to_vec())
}

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn relu_clips_negatives() {
    let out = forward_primitive(&Primitive::Relu, &[vec_arr(&[-1.0, 0.0, 2.0])]).unwrap();
    assert_eq!(out.value.data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn max_reduce_picks_largest() {
    let out =
        forward_primitive(&Primitive::MaxReduce { axis: 0 }, &[vec_arr(&[1.0, 3.0])]).unwrap();
    assert_eq!(out.value.item().unwrap(), 3.0);
}

#[test]
fn matmul_of_ones_gives_row_sums() {
    let a = Array::full(&[2, 3], 1.0);
    let b = Array::full(&[3, 1], 1.0);
    let out = forward_primitive(&Primitive::Matmul, &[a, b]).unwrap();
    assert_eq!(out.value.shape(), &[2, 1]);
    assert_eq!(out.value.data(), &[3.0, 3.0]);
}

#[test]
fn sort_reports_permutation() {
    let x = Array::matrix(2, 3, vec![3.0, 1.0, 2.0, 0.0, -1.0, 5.0]).unwrap();
    let out = forward_primitive(&Primitive::Sort, &[x]).unwrap();
    assert_eq!(out.value.data(), &[1.0, 2.0, 3.0, -1.0, 0.0, 5.0]);
    assert_eq!(out.permutation.unwrap(), vec![1, 2, 0, 1, 0, 2]);
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let err = forward_primitive(&Primitive::Add, &[Array::zeros(&[2]), Array::zeros(&[3])])
        .unwrap_err();
    assert_eq!(err, DiffError::ShapeMismatch { op: "add", left: vec![2], right: vec![3] });
    assert!(err.to_string().contains("[2]") && err.to_string().contains("[3]"));
}

#[test]
fn exp_and_log_reject_non_finite_input() {
    let bad = vec_arr(&[1.0, f64::NAN]);
    assert!(matches!(
        forward_primitive(&Primitive::Exp, &[bad.clone()]),
        Err(DiffError::NonFinite { op: "exp" })
    ));
    assert!(matches!(
        forward_primitive(&Primitive::Log, &[vec_arr(&[f64::INFINITY])]),
        Err(DiffError::NonFinite { op: "log" })
    ));
}

#[test]
fn sum_of_squares_gradient() {
    let mut tape = Tape::new();
    let p = tape.param(vec_arr(&[1.0, 2.0]));
    let sq = tape.square(p);
    let root = tape.sum(sq);
    tape.backward(root).unwrap();
    assert_eq!(tape.grad(p).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn repeated_backward_accumulates_until_reset() {
    let mut tape = Tape::new();
    let p = tape.param(vec_arr(&[1.0, 2.0]));
    let sq = tape.square(p);
    let root = tape.sum(sq);
    tape.backward(root).unwrap();
    tape.backward(root).unwrap();
    assert_eq!(tape.grad(p).unwrap().data(), &[4.0, 8.0]);
    tape.zero_grad();
    assert_eq!(tape.grad(p).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn constant_root_gives_zero_gradients() {
    let mut tape = Tape::new();
    let p = tape.param(vec_arr(&[1.0, 2.0]));
    let _unused = tape.square(p);
    let c = tape.scalar(7.0);
    tape.backward(c).unwrap();
    assert_eq!(tape.grad(p).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut tape = Tape::new();
    let p = tape.param(vec_arr(&[1.0, 2.0]));
    let sq = tape.square(p);
    assert!(matches!(tape.backward(sq), Err(DiffError::NotScalar { .. })));
}

#[test]
fn grad_check_linear_is_exact() {
    let report = grad_check(
        |t, p| {
            let s = t.scale(p[0], 3.5);
            Ok(t.sum(s))
        },
        &[vec_arr(&[0.3, -1.2, 4.0])],
        0.1,
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-12, "{report:?}");
    assert_eq!(report.checked, 3);
}

#[test]
fn grad_check_square_at_three() {
    let report = grad_check(
        |t, p| {
            let s = t.square(p[0]);
            Ok(t.sum(s))
        },
        &[vec_arr(&[3.0])],
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn grad_check_flags_relu_kink() {
    let report = grad_check(
        |t, p| {
            let r = t.relu(p[0]);
            Ok(t.sum(r))
        },
        &[vec_arr(&[0.0, 1.0])],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert_eq!(report.excluded, 1);
    assert_eq!(report.checked, 1);
    assert!(report.nondifferentiable());
    assert!(report.passed());
}

#[test]
fn grad_check_rejects_nonpositive_step() {
    let r = grad_check(|t, p| Ok(t.sum(p[0])), &[vec_arr(&[1.0])], 0.0, 1e-4);
    assert!(r.is_err());
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let p = tape.param(vec_arr(&[0.0]));
    let r = tape.relu(p);
    let root = tape.sum(r);
    tape.backward(root).unwrap();
    assert_eq!(tape.grad(p).unwrap().data(), &[0.0]);
}

#[test]
fn max_ties_route_to_lowest_index() {
    let mut tape = Tape::new();
    let p = tape.param(vec_arr(&[2.0, 2.0, 1.0]));
    let m = tape.max_axis(p, 0).unwrap();
    tape.backward(m).unwrap();
    assert_eq!(tape.grad(p).unwrap().data(), &[1.0, 0.0, 0.0]);

    let mut tape = Tape::new();
    let a = tape.param(vec_arr(&[1.0]));
    let b = tape.param(vec_arr(&[1.0]));
    let m = tape.maximum(a, b).unwrap();
    let root = tape.sum(m);
    tape.backward(root).unwrap();
    assert_eq!(tape.grad(a).unwrap().data(), &[1.0]);
    assert_eq!(tape.grad(b).unwrap().data(), &[0.0]);
}

#[test]
fn sort_backward_scatters_through_permutation() {
    let mut tape = Tape::new();
    let p = tape.param(vec_arr(&[3.0, 1.0, 2.0]));
    let s = tape.sort_last(p);
    let w = tape.constant(vec_arr(&[10.0, 20.0, 30.0]));
    let prod = tape.mul(s, w).unwrap();
    let root = tape.sum(prod);
    tape.backward(root).unwrap();
    // sorted = [1, 2, 3] from positions [1, 2, 0]
    assert_eq!(tape.grad(p).unwrap().data(), &[30.0, 10.0, 20.0]);
}

#[test]
fn broadcast_backward_sums_expanded_axes() {
    let mut tape = Tape::new();
    let p = tape.param(vec_arr(&[1.0, 2.0]));
    let b = tape.broadcast(p, &[3, 2]).unwrap();
    let root = tape.sum(b);
    tape.backward(root).unwrap();
    assert_eq!(tape.grad(p).unwrap().data(), &[3.0, 3.0]);
    assert!(tape.broadcast(p, &[3, 4]).is_err());
}

fn check(build: impl Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>, params: &[Array]) {
    let report = grad_check(build, params, 1e-5, 1e-4).unwrap();
    assert!(report.passed(), "{report:?}");
}

/// Weighted sum so that every output element carries a distinct cotangent.
fn weigh(t: &mut Tape, x: Var, rng_seed: u64) -> Result<Var, DiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = random_array(&mut rng, t.shape(x));
    let w = t.constant(w);
    let p = t.mul(x, w)?;
    Ok(t.sum(p))
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..100u64 {
        let rows = rng.random_range(1..4);
        let cols = rng.random_range(1..5);
        let a = random_array(&mut rng, &[rows, cols]);
        let b = random_array(&mut rng, &[rows, cols]);
        let c = random_array(&mut rng, &[cols, 2]);
        let pos = a.map(|x| x.abs() + 0.5);
        let unit = a.map(|x| x / 2.5);
        let s = trial;
        check(|t, p| { let y = t.add(p[0], p[1])?; weigh(t, y, s) }, &[a.clone(), b.clone()]);
        check(|t, p| { let y = t.sub(p[0], p[1])?; weigh(t, y, s) }, &[a.clone(), b.clone()]);
        check(|t, p| { let y = t.mul(p[0], p[1])?; weigh(t, y, s) }, &[a.clone(), b.clone()]);
        check(|t, p| { let y = t.div(p[0], p[1])?; weigh(t, y, s) }, &[a.clone(), pos.clone()]);
        check(|t, p| { let y = t.matmul(p[0], p[1])?; weigh(t, y, s) }, &[a.clone(), c.clone()]);
        check(|t, p| { let y = t.relu(p[0]); weigh(t, y, s) }, &[a.clone()]);
        check(|t, p| { let y = t.exp(p[0])?; weigh(t, y, s) }, &[a.clone()]);
        check(|t, p| { let y = t.log(p[0])?; weigh(t, y, s) }, &[pos.clone()]);
        check(|t, p| { let y = t.sqrt(p[0]); weigh(t, y, s) }, &[pos.clone()]);
        check(|t, p| { let y = t.square(p[0]); weigh(t, y, s) }, &[a.clone()]);
        check(|t, p| { let y = t.logistic(p[0]); weigh(t, y, s) }, &[a.clone()]);
        check(|t, p| { let y = t.softplus(p[0]); weigh(t, y, s) }, &[a.clone()]);
        check(|t, p| { let y = t.abs(p[0]); weigh(t, y, s) }, &[a.clone()]);
        check(|t, p| { let y = t.asin(p[0])?; weigh(t, y, s) }, &[unit.clone()]);
        check(|t, p| { let y = t.clamp_min(p[0], 0.3); weigh(t, y, s) }, &[a.clone()]);
        check(|t, p| { let y = t.maximum(p[0], p[1])?; weigh(t, y, s) }, &[a.clone(), b.clone()]);
        check(|t, p| { let y = t.max_axis(p[0], 1)?; weigh(t, y, s) }, &[a.clone()]);
        check(|t, p| { let y = t.max_axis(p[0], 0)?; weigh(t, y, s) }, &[a.clone()]);
        check(|t, p| { let y = t.mean_axis(p[0], 0)?; weigh(t, y, s) }, &[a.clone()]);
        check(|t, p| { let y = t.sum_axis(p[0], 1)?; weigh(t, y, s) }, &[a.clone()]);
        check(|t, p| { let y = t.sort_last(p[0]); weigh(t, y, s) }, &[a.clone()]);
        check(
            |t, p| {
                let sorted = t.sort_last(p[0]);
                let y = t.permute_like(p[1], sorted)?;
                weigh(t, y, s)
            },
            &[a.clone(), b.clone()],
        );
        check(|t, p| { let y = t.cummax_last(p[0]); weigh(t, y, s) }, &[a.clone()]);
        check(|t, p| { let y = t.union_length(p[0], p[1])?; weigh(t, y, s) }, &[a.clone(), b.clone()]);
        check(|t, p| { let y = t.concat(&[p[0], p[1]], 1)?; weigh(t, y, s) }, &[a.clone(), b.clone()]);
        check(|t, p| { let y = t.concat(&[p[0], p[1]], 0)?; weigh(t, y, s) }, &[a.clone(), b.clone()]);
        check(|t, p| { let y = t.slice(p[0], 1, 0, cols.min(2))?; weigh(t, y, s) }, &[a.clone()]);
        check(|t, p| { let y = t.broadcast(p[0], &[2, rows, cols])?; weigh(t, y, s) }, &[a.clone()]);
        check(|t, p| { let y = t.gather_rows(p[0], &[0, 0, rows - 1])?; weigh(t, y, s) }, &[a.clone()]);
        check(|t, p| { let y = t.mean(p[0])?; weigh(t, y, s) }, &[a.clone()]);
    }
}

#[test]
fn regrouped_sums_give_identical_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vals: Vec<Array> = (0..3).map(|_| random_array(&mut rng, &[4])).collect();
    let grads = |left_first: bool| {
        let mut t = Tape::new();
        let p: Vec<Var> = vals.iter().map(|v| t.param(v.clone())).collect();
        let sq: Vec<Var> = p.iter().map(|&v| t.square(v)).collect();
        let s = if left_first {
            let ab = t.add(sq[0], sq[1]).unwrap();
            t.add(ab, sq[2]).unwrap()
        } else {
            let bc = t.add(sq[1], sq[2]).unwrap();
            t.add(sq[0], bc).unwrap()
        };
        let root = t.sum(s);
        t.backward(root).unwrap();
        p.iter().map(|&v| t.grad(v).unwrap().clone()).collect::<Vec<_>>()
    };
    let (g1, g2) = (grads(true), grads(false));
    for (x, y) in g1.iter().zip(&g2) {
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

/// Covered length by scanning the elementary segments between endpoints.
fn covered_length(iv: &[(f64, f64)]) -> f64 {
    let mut pts: Vec<f64> = iv.iter().flat_map(|&(a, b)| [a, b]).collect();
    pts.sort_by(f64::total_cmp);
    pts.windows(2)
        .filter(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            iv.iter().any(|&(a, b)| a < mid && mid < b)
        })
        .map(|w| w[1] - w[0])
        .sum()
}

#[test]
fn union_length_skips_buried_endpoints() {
    let mut tape = Tape::new();
    let l = tape.param(vec_arr(&[0.0, 1.0, 2.0, 5.0, 4.0]));
    let r = tape.param(vec_arr(&[3.0, 2.5, 3.5, 6.0, 3.0]));
    let len = tape.union_length(l, r).unwrap();
    assert_eq!(tape.value(len).data(), &[4.5]);
    tape.backward(len).unwrap();
    assert_eq!(tape.grad(l).unwrap().data(), &[-1.0, 0.0, 0.0, -1.0, 0.0]);
    assert_eq!(tape.grad(r).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 0.0]);
}

proptest! {
    #[test]
    fn union_length_matches_segment_scan(
        iv in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..8)
    ) {
        let mut tape = Tape::new();
        let l = tape.constant(vec_arr(&iv.iter().map(|p| p.0).collect::<Vec<_>>()));
        let r = tape.constant(vec_arr(&iv.iter().map(|p| p.1).collect::<Vec<_>>()));
        let len = tape.union_length(l, r).unwrap();
        let got = tape.value(len).item().unwrap();
        prop_assert!((got - covered_length(&iv)).abs() < 1e-9);
    }

    #[test]
    fn forward_and_backward_are_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_array(&mut rng, &[3, 4]);
            let w = random_array(&mut rng, &[4, 2]);
            let mut t = Tape::new();
            let pa = t.param(a);
            let pw = t.param(w);
            let h = t.matmul(pa, pw).unwrap();
            let h = t.relu(h);
            let s = t.sort_last(h);
            let root = t.sum(s);
            t.backward(root).unwrap();
            (t.value(root).item().unwrap().to_bits(),
             t.grad(pw).unwrap().data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }
}
