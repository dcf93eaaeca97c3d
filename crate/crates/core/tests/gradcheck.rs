//! Reverse-mode gradients against central finite differences.

use proptest::prelude::*;
use wdlab_core::models::{MlpConfig, Model};
use wdlab_core::{NodeId, Result, Tape, Tensor};

type Build = dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>;

/// Largest relative disagreement between autodiff and finite differences over every input entry.
fn max_rel_error(inputs: &[Tensor], build: &Build, h: f64) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let root = build(&mut tape, &ids).unwrap();
    let grads = tape.gradients(root).unwrap();
    let eval = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| t.input(x.clone())).collect();
        let r = build(&mut t, &ids).unwrap();
        t.value(r).item().unwrap()
    };
    let mut worst: f64 = 0.0;
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads
            .wrt(&tape, *id)
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

/// Reduces a node to a scalar through a fixed random projection.
fn project(tape: &mut Tape, x: NodeId, r: &Tensor) -> Result<NodeId> {
    let r = tape.input(r.clone());
    let m = tape.mul(x, r)?;
    Ok(tape.sum(m))
}

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn ramp(n: usize, a: f64, b: f64) -> Vec<f64> {
    (0..n).map(|i| (i as f64 * a + b).sin() * 1.7).collect()
}

#[test]
fn matmul_matches_finite_differences() {
    let a = t(&[3, 4], ramp(12, 0.7, 0.1));
    let b = t(&[4, 2], ramp(8, 1.3, 0.5));
    let r = t(&[3, 2], ramp(6, 2.1, 0.2));
    let err = max_rel_error(
        &[a, b],
        &move |tp, ids| {
            let m = tp.matmul(ids[0], ids[1])?;
            project(tp, m, &r)
        },
        1e-5,
    );
    assert!(err < 1e-6, "{err}");
}

#[test]
fn batch_norm_matches_finite_differences() {
    let x = t(&[5, 3], ramp(15, 0.9, 0.3));
    let gamma = t(&[3], vec![1.2, -0.4, 0.8]);
    let beta = t(&[3], vec![0.1, 0.0, -0.3]);
    let r = t(&[5, 3], ramp(15, 1.7, 0.4));
    let err = max_rel_error(
        &[x, gamma, beta],
        &move |tp, ids| {
            let y = tp.batch_norm(ids[0], ids[1], ids[2], 1e-12)?;
            project(tp, y, &r)
        },
        1e-5,
    );
    assert!(err < 1e-5, "{err}");
}

#[test]
fn cross_entropy_parts_match_finite_differences() {
    let logits = t(&[4, 3], ramp(12, 1.1, 0.2));
    let labels = [0usize, 2, 1, 2];
    for part in 0..3 {
        let err = max_rel_error(
            std::slice::from_ref(&logits),
            &move |tp, ids| {
                let s = tp.cross_entropy_split(ids[0], &labels)?;
                Ok([s.loss, s.pos, s.neg][part])
            },
            1e-5,
        );
        assert!(err < 1e-6, "part {part}: {err}");
    }
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    for bn in [false, true] {
        let model = Model::build(MlpConfig::new(vec![3, 6, 4, 3], bn, 11)).unwrap();
        let x = t(&[6, 3], ramp(18, 0.8, 0.6));
        let labels = [0usize, 1, 2, 1, 0, 2];
        let (_, grads) = model.loss_grads(&model.params, &x, &labels).unwrap();
        let analytic = wdlab_core::tensor::flatten_all(&grads);
        let w0 = model.params.flatten();
        let h = 1e-5;
        let loss_at = |w: &[f64]| {
            let mut ps = model.params.clone();
            ps.assign_flat(w).unwrap();
            model.evaluate_with(&ps, &x, &labels).unwrap().loss
        };
        for i in 0..w0.len() {
            let mut p = w0.clone();
            p[i] += h;
            let mut m = w0.clone();
            m[i] -= h;
            let fd = (loss_at(&p) - loss_at(&m)) / (2.0 * h);
            let err = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-3);
            assert!(err < 1e-5, "bn={bn} param {i}: {} vs {fd}", analytic[i]);
        }
    }
}

#[test]
fn backward_of_sum_and_half_square() {
    let w = t(&[2, 2], vec![1.0, -2.0, 0.5, 3.0]);
    let mut tape = Tape::new();
    let id = tape.input(w.clone());
    let s = tape.sum(id);
    assert!(tape
        .gradients(s)
        .unwrap()
        .wrt(&tape, id)
        .unwrap()
        .data()
        .iter()
        .all(|&g| g == 1.0));

    let mut tape = Tape::new();
    let id = tape.input(w.clone());
    let sq = tape.mul(id, id).unwrap();
    let s = tape.sum(sq);
    let half = tape.scale(s, 0.5);
    let g = tape.gradients(half).unwrap().wrt(&tape, id).unwrap();
    assert_eq!(g.data(), w.data());
}

fn bounded(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn elementwise_ops_agree_with_finite_differences(a in bounded(6), b in bounded(6), r in bounded(6), c in -2.0f64..2.0) {
        let a = t(&[2, 3], a);
        let b = t(&[2, 3], b);
        let r = t(&[2, 3], r);
        let err = max_rel_error(&[a, b], &move |tp, ids| {
            let s = tp.add(ids[0], ids[1])?;
            let m = tp.mul(s, ids[1])?;
            let k = tp.scale(m, c);
            project(tp, k, &r)
        }, 1e-5);
        prop_assert!(err < 1e-4, "{}", err);
    }

    #[test]
    fn relu_agrees_away_from_the_kink(x in bounded(8), r in bounded(8)) {
        prop_assume!(x.iter().all(|v| v.abs() > 1e-3));
        let x = t(&[2, 4], x);
        let r = t(&[2, 4], r);
        let err = max_rel_error(&[x], &move |tp, ids| {
            let y = tp.relu(ids[0]);
            project(tp, y, &r)
        }, 1e-5);
        prop_assert!(err < 1e-4, "{}", err);
    }

    #[test]
    fn affine_ops_agree_with_finite_differences(a in bounded(6), b in bounded(8), bias in bounded(4), r in bounded(12)) {
        let a = t(&[3, 2], a);
        let b = t(&[2, 4], b);
        let bias = t(&[4], bias);
        let r = t(&[3, 4], r);
        let err = max_rel_error(&[a, b, bias], &move |tp, ids| {
            let m = tp.matmul(ids[0], ids[1])?;
            let z = tp.add_row(m, ids[2])?;
            project(tp, z, &r)
        }, 1e-5);
        prop_assert!(err < 1e-4, "{}", err);
    }

    #[test]
    fn batch_norm_agrees_with_finite_differences(x in bounded(12), gamma in bounded(3), beta in bounded(3), r in bounded(12)) {
        let x = t(&[4, 3], x);
        // Near-constant columns make the normalization ill-conditioned for finite differences.
        for j in 0..3 {
            let col: Vec<f64> = (0..4).map(|i| x.data()[i * 3 + j]).collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            prop_assume!(col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() > 0.05);
        }
        let r = t(&[4, 3], r);
        let err = max_rel_error(&[x, t(&[3], gamma), t(&[3], beta)], &move |tp, ids| {
            let y = tp.batch_norm(ids[0], ids[1], ids[2], 1e-12)?;
            project(tp, y, &r)
        }, 1e-5);
        prop_assert!(err < 1e-4, "{}", err);
    }

    #[test]
    fn cross_entropy_agrees_with_finite_differences(z in bounded(9), labels in prop::collection::vec(0usize..3, 3)) {
        let z = t(&[3, 3], z);
        let err = max_rel_error(&[z], &move |tp, ids| Ok(tp.cross_entropy_split(ids[0], &labels)?.loss), 1e-5);
        prop_assert!(err < 1e-4, "{}", err);
    }
}
