//! Central-difference checks of every differentiable op in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Projects an arbitrary output to a scalar with fixed pseudo-random weights.
fn project(y: &Var<f64>) -> Var<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = random_tensor(y.shape(), &mut rng);
    y.mul(&Var::constant(w)).mean_all()
}

fn check_op(shapes: &[&[usize]], f: impl Fn(&[Var<f64>]) -> Var<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let values: Vec<Tensor<f64>> = shapes.iter().map(|s| random_tensor(s, &mut rng)).collect();
    let eval = |vals: &[Tensor<f64>]| {
        let vars: Vec<Var<f64>> = vals.iter().map(|v| Var::constant(v.clone())).collect();
        project(&f(&vars)).value().item()
    };
    let leaves: Vec<Var<f64>> =
        values.iter().enumerate().map(|(i, v)| Var::leaf(v.clone(), i)).collect();
    let grads = project(&f(&leaves)).backward();
    let h = 1e-6;
    for (i, v) in values.iter().enumerate() {
        let analytic = grads.get(i).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()));
        for j in 0..v.numel() {
            let mut plus = values.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = values.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / (1e-6 + a.abs().max(numeric.abs()));
            assert!(
                err < 1e-4 || (a - numeric).abs() < 1e-9,
                "input {i} element {j}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

#[test]
fn elementwise_ops() {
    check_op(&[&[3, 4], &[3, 4]], |v| v[0].add(&v[1]).mul(&v[0]).sub(&v[1]));
    check_op(&[&[2, 5]], |v| v[0].gelu());
    check_op(&[&[2, 5]], |v| v[0].sigmoid().scale(3.0));
    check_op(&[&[2, 3, 4], &[3, 4]], |v| v[0].add_broadcast(&v[1]));
    check_op(&[&[2, 3, 4], &[4]], |v| v[0].add_broadcast(&v[1]));
}

#[test]
fn relu_away_from_kink() {
    check_op(&[&[4, 4]], |v| v[0].scale(2.0).add(&Var::constant(Tensor::full(&[4, 4], 0.01))).relu());
}

#[test]
fn linear_and_bmm() {
    check_op(&[&[2, 3, 4], &[5, 4], &[5]], |v| v[0].linear(&v[1], Some(&v[2])));
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a: &[usize] = if ta { &[2, 4, 3] } else { &[2, 3, 4] };
        let b: &[usize] = if tb { &[2, 5, 4] } else { &[2, 4, 5] };
        check_op(&[a, b], move |v| v[0].bmm(&v[1], ta, tb));
    }
}

#[test]
fn shape_ops() {
    check_op(&[&[2, 3, 4]], |v| v[0].permute(&[2, 0, 1]));
    check_op(&[&[2, 3, 4]], |v| v[0].reshape(&[6, 4]));
    check_op(&[&[2, 3, 4], &[2, 1, 4]], |v| Var::concat(&[v[0].clone(), v[1].clone()], 1));
    check_op(&[&[2, 3, 4]], |v| v[0].select(1, 2));
    check_op(&[&[2, 3, 4], &[4]], |v| v[0].prepend_token(&v[1]));
    check_op(&[&[2, 3, 2, 3, 2]], |v| v[0].spatial_mean_seq());
    check_op(&[&[2, 2, 5, 4]], |v| v[0].upsample2x());
    check_op(&[&[2, 2, 5, 4]], |v| v[0].max_pool2x());
}

#[test]
fn normalization_and_softmax() {
    check_op(&[&[3, 5]], |v| v[0].softmax_last());
    check_op(&[&[3, 5], &[5], &[5]], |v| v[0].layer_norm(&v[1], &v[2], 1e-5));
    check_op(&[&[3, 2, 2, 3, 1], &[2], &[2]], |v| v[0].batch_norm_train(&v[1], &v[2], 1e-5).0);
    check_op(&[&[3, 2, 4], &[2], &[2]], |v| {
        v[0].batch_norm_eval(&v[1], &v[2], &[0.1, -0.2], &[0.5, 1.5], 1e-5)
    });
}

#[test]
fn losses() {
    check_op(&[&[6]], |v| v[0].scale(3.0).bce_with_logits(&[1.0, 0.0, 1.0, 0.0, 0.5, 1.0]));
    check_op(&[&[4, 3]], |v| v[0].cross_entropy(&[0, 2, 1, 2], None));
    check_op(&[&[4, 3]], |v| v[0].cross_entropy(&[0, 2, 1, 2], Some(&[1.0, 2.0, 0.5])));
}

#[test]
fn convolutions() {
    let geoms = [
        ConvGeom::new([1, 3, 3], [1, 2, 2], [0, 1, 1]),
        ConvGeom::new([3, 1, 1], [2, 1, 1], [1, 0, 0]),
        ConvGeom::new([1, 1, 1], [1, 1, 1], [0, 0, 0]),
        ConvGeom::new([1, 1, 1], [2, 2, 2], [0, 0, 0]),
    ];
    for g in geoms {
        let k = g.kernel;
        check_op(&[&[2, 2, 4, 5, 5], &[3, 2, k[0], k[1], k[2]], &[3]], move |v| {
            v[0].conv3d(&v[1], Some(&v[2]), g)
        });
    }
}

#[test]
fn shared_subexpressions_accumulate() {
    check_op(&[&[3]], |v| {
        let a = v[0].gelu();
        a.mul(&a).add(&a)
    });
}

#[test]
fn constants_carry_no_history() {
    let a = Var::constant(Tensor::<f32>::full(&[2], 1.0));
    let b = a.add(&a).gelu();
    assert!(!b.requires_grad());
    let leaf = Var::leaf(Tensor::<f32>::full(&[2], 1.0), 3);
    let loss = leaf.mul(&b).mean_all();
    assert!(loss.requires_grad());
    let grads = loss.backward();
    assert_eq!(grads.len(), 1);
    assert!(grads.get(3).is_some());
}

#[test]
fn permute_matches_manual_transpose() {
    let t = Tensor::from_vec(&[2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert_eq!(t.permute(&[1, 0]).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
}
