use proptest::prelude::*;
use rand::Rng as _;

use super::rng::seeded;
use super::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `sum(v ⊙ w)` for a fixed random `w`, so linear primitives get non-uniform upstream gradients.
fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var, KernelError> {
    let w = tape.constant(random(tape.shape(v), seed))?;
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

fn check<F>(f: F, point: &[Tensor<f64>]) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, KernelError>,
{
    gradient_check(f, point, 1e-5).unwrap().max_relative_error
}

#[test]
fn square_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1], &[3.0])).unwrap();
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).data(), &[6.0]);
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1, 4], &[0.1, -2.0, 3.0, 0.7])).unwrap();
    let s = tape.softmax(x).unwrap();
    let y = tape.sum(s).unwrap();
    let g = tape.backward(y).unwrap();
    assert!(g.get(x).data().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn fan_out_accumulates() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0])).unwrap();
    let y = tape.add(x, x).unwrap();
    let z = tape.mul(y, x).unwrap();
    let s = tape.sum(z).unwrap();
    // s = 2 Σ x², ds/dx = 4x
    assert_eq!(tape.backward(s).unwrap().get(x).data(), &[4.0, 8.0]);
}

#[test]
fn uninfluential_leaf_gets_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0])).unwrap();
    let unused = tape.leaf(t(&[3], &[1.0, 1.0, 1.0])).unwrap();
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(unused).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0])).unwrap();
    assert!(matches!(tape.backward(x), Err(KernelError::NotScalar { .. })));
}

#[test]
fn matmul_shape_error() {
    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.leaf(Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(tape.matmul(a, b), Err(KernelError::Shape { .. })));
}

#[test]
fn records_are_topological() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(t(&[1], &[1.0])).unwrap();
    let b = tape.scale(a, 2.0).unwrap();
    let c = tape.add(a, b).unwrap();
    assert!(a.index() < b.index() && b.index() < c.index());
}

#[test]
fn gradcheck_matmul() {
    let err = check(|tp, v| { let y = tp.matmul(v[0], v[1])?; weighted_sum(tp, y, 1) }, &[random(&[3, 4], 10), random(&[4, 2], 11)]);
    assert!(err < 1e-4, "{err}");
    let err = check(|tp, v| { let y = tp.matmul_nt(v[0], v[1])?; weighted_sum(tp, y, 2) }, &[random(&[3, 4], 12), random(&[5, 4], 13)]);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradcheck_bmm() {
    let err = check(|tp, v| { let y = tp.bmm(v[0], v[1], false)?; weighted_sum(tp, y, 3) }, &[random(&[2, 3, 4], 14), random(&[2, 4, 2], 15)]);
    assert!(err < 1e-4, "{err}");
    let err = check(|tp, v| { let y = tp.bmm(v[0], v[1], true)?; weighted_sum(tp, y, 4) }, &[random(&[2, 3, 4], 16), random(&[2, 5, 4], 17)]);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradcheck_elementwise() {
    let pts = [random(&[3, 4], 20), random(&[3, 4], 21)];
    for (k, f) in [
        (0, Tape::add as fn(&mut Tape<f64>, Var, Var) -> Result<Var, KernelError>),
        (1, Tape::sub),
        (2, Tape::mul),
    ] {
        let err = check(|tp, v| { let y = f(tp, v[0], v[1])?; weighted_sum(tp, y, 30 + k) }, &pts);
        assert!(err < 1e-4, "{k}: {err}");
    }
    let err = check(|tp, v| { let y = tp.scale(v[0], -1.7)?; weighted_sum(tp, y, 5) }, &pts[..1]);
    assert!(err < 1e-4);
    let err = check(|tp, v| { let y = tp.gelu(v[0])?; weighted_sum(tp, y, 6) }, &pts[..1]);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradcheck_broadcasts() {
    let err = check(|tp, v| { let y = tp.add_row(v[0], v[1])?; let y = tp.mul(y, y)?; weighted_sum(tp, y, 7) }, &[random(&[3, 4], 22), random(&[4], 23)]);
    assert!(err < 1e-4, "{err}");
    let err = check(|tp, v| { let y = tp.mul_col(v[0], v[1])?; weighted_sum(tp, y, 8) }, &[random(&[3, 4], 24), random(&[3, 1], 25)]);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradcheck_softmax_family() {
    let x = random(&[3, 5], 26);
    let err = check(|tp, v| { let y = tp.softmax(v[0])?; weighted_sum(tp, y, 9) }, &[x.clone()]);
    assert!(err < 1e-4, "{err}");
    let mask: Vec<bool> = (0..15).map(|i| i % 3 != 1).collect();
    let m2 = mask.clone();
    let err = check(move |tp, v| { let y = tp.masked_softmax(v[0], Some(m2.clone()))?; weighted_sum(tp, y, 10) }, &[x.clone()]);
    assert!(err < 1e-4, "{err}");
    let err = check(move |tp, v| { let y = tp.logsumexp(v[0], Some(mask.clone()))?; weighted_sum(tp, y, 11) }, &[x]);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradcheck_layer_norm() {
    let err = check(
        |tp, v| { let y = tp.layer_norm(v[0], v[1], v[2], 1e-12)?; weighted_sum(tp, y, 12) },
        &[random(&[3, 6], 27), random(&[6], 28), random(&[6], 29)],
    );
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradcheck_dropout_with_replayed_mask() {
    let err = check(
        |tp, v| {
            let mut rng = seeded(99);
            let y = tp.dropout(v[0], 0.5, true, &mut rng)?;
            weighted_sum(tp, y, 13)
        },
        &[random(&[4, 4], 30)],
    );
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradcheck_structural() {
    let x = random(&[4, 6], 31);
    let err = check(|tp, v| { let y = tp.gather_rows(v[0], vec![Some(2), None, Some(0), Some(2)])?; weighted_sum(tp, y, 14) }, &[x.clone()]);
    assert!(err < 1e-4);
    let err = check(|tp, v| { let y = tp.slice_cols(v[0], 1, 3)?; weighted_sum(tp, y, 15) }, &[x.clone()]);
    assert!(err < 1e-4);
    let err = check(|tp, v| { let a = tp.slice_cols(v[0], 0, 2)?; let y = tp.concat_cols(&[v[0], a])?; weighted_sum(tp, y, 16) }, &[x.clone()]);
    assert!(err < 1e-4);
    let err = check(|tp, v| { let y = tp.concat_rows(&[v[0], v[1]])?; weighted_sum(tp, y, 17) }, &[x.clone(), random(&[2, 6], 32)]);
    assert!(err < 1e-4);
    let err = check(|tp, v| { let y = tp.select_rows(vec![true, false, false, true], v[0], v[1])?; weighted_sum(tp, y, 18) }, &[x.clone(), random(&[4, 6], 33)]);
    assert!(err < 1e-4);
    let err = check(|tp, v| { let y = tp.reshape(v[0], &[2, 2, 6])?; weighted_sum(tp, y, 19) }, &[x.clone()]);
    assert!(err < 1e-4);
    let err = check(|tp, v| { let y = tp.l2_normalize(v[0], 1e-12)?; weighted_sum(tp, y, 20) }, &[x.clone()]);
    assert!(err < 1e-4, "{err}");
    let err = check(|tp, v| { let y = tp.pick(v[0], vec![0, 5, 3, 3])?; weighted_sum(tp, y, 21) }, &[x]);
    assert!(err < 1e-4);
}

#[test]
fn layer_norm_hand_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 2], &[1.0, 3.0])).unwrap();
    let g = tape.constant(t(&[2], &[1.0, 1.0])).unwrap();
    let b = tape.constant(t(&[2], &[0.0, 0.0])).unwrap();
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    let out = tape.value(y).data();
    assert!((out[0] + 1.0).abs() < 1e-9 && (out[1] - 1.0).abs() < 1e-9);

    let c = tape.constant(t(&[1, 3], &[2.5, 2.5, 2.5])).unwrap();
    let g3 = tape.constant(t(&[3], &[0.3, 2.0, -1.0])).unwrap();
    let b3 = tape.constant(t(&[3], &[0.1, 0.2, 0.3])).unwrap();
    let y = tape.layer_norm(c, g3, b3, 1e-12).unwrap();
    assert_eq!(tape.value(y).data(), &[0.1, 0.2, 0.3]);
}

#[test]
fn dropout_contracts() {
    let mut rng = seeded(1);
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::full(&[8, 8], 1.0)).unwrap();
    assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(tape.dropout(x, 0.7, false, &mut rng).unwrap(), x);
    assert!(matches!(tape.dropout(x, 1.0, true, &mut rng), Err(KernelError::Config(_))));
    assert!(matches!(tape.dropout(x, -0.1, true, &mut rng), Err(KernelError::Config(_))));

    let a = tape.dropout(x, 0.5, true, &mut seeded(5)).unwrap();
    let b = tape.dropout(x, 0.5, true, &mut seeded(5)).unwrap();
    assert!(tape.value(a).bit_eq(tape.value(b)));
    assert!(tape.value(a).data().iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn masked_attention_ignores_masked_contents() {
    // Keys at masked positions carry arbitrary values; outputs must not move.
    let build = |fill: f64| {
        let mut tape = Tape::<f64>::new();
        let scores = tape.constant(t(&[1, 3], &[0.2, fill, -0.4])).unwrap();
        let p = tape.masked_softmax(scores, Some(vec![true, false, true])).unwrap();
        tape.value(p).clone()
    };
    assert!(build(1.0).bit_eq(&build(-123.0)));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 1..40)) {
        let n = vals.len();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, n], vals).unwrap()).unwrap();
        let y = tape.softmax(x).unwrap();
        let row = tape.value(y).data();
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(row.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn layer_norm_standardizes(vals in proptest::collection::vec(-10.0f64..10.0, 2..32)) {
        let n = vals.len();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        prop_assume!(var > 1e-3);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, n], vals).unwrap()).unwrap();
        let g = tape.constant(Tensor::full(&[n], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros(&[n])).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let out = tape.value(y).data();
        let m = out.iter().sum::<f64>() / n as f64;
        let v = out.iter().map(|o| (o - m).powi(2)).sum::<f64>() / n as f64;
        prop_assert!(m.abs() < 1e-6);
        prop_assert!((v - 1.0).abs() < 1e-5);
    }

    #[test]
    fn forward_replay_is_bit_identical(seed in any::<u64>()) {
        let run = || {
            let mut rng = seeded(seed);
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(random(&[4, 5], seed).cast()).unwrap();
            let d = tape.dropout(x, 0.3, true, &mut rng).unwrap();
            let s = tape.softmax(d).unwrap();
            tape.value(s).clone()
        };
        prop_assert!(run().bit_eq(&run()));
    }
}
