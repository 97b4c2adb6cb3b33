use diffcore::gradcheck::check;
use diffcore::nn::key_padding_bias;
use diffcore::{Bound, Error, Init, Params, Rng, Tape, Tensor, TransformerBlock, Var};
use proptest::prelude::*;

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn rand(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rng.normal(shape)
}

fn assert_grad<F>(name: &str, inputs: &[Tensor<f64>], f: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> diffcore::Result<Var<'t, f64>>,
{
    let report = check(inputs, H, f).unwrap();
    assert!(
        report.max_rel_error <= TOL,
        "{name}: max relative error {:.3e} (scale {:.3e})",
        report.max_rel_error,
        report.scale
    );
}

/// Reduces an arbitrary output to a scalar with fixed random weights so every
/// output entry contributes a distinct coefficient.
fn weighted<'t>(y: Var<'t, f64>, seed: u64) -> diffcore::Result<Var<'t, f64>> {
    let w: Tensor<f64> = Rng::new(seed).normal(&y.shape());
    y.mul(y.tape().constant(w))?.sum()
}

#[test]
fn matmul_shapes_and_identity() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::from_f64([2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
    let b = tape.constant(Tensor::zeros([3, 4]));
    assert_eq!(a.matmul(b).unwrap().shape(), vec![2, 4]);

    let eye = tape.constant(Tensor::from_f64([3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
    assert_eq!(a.matmul(eye).unwrap().to_tensor(), a.to_tensor());

    let bad = tape.constant(Tensor::zeros([4, 2]));
    match a.matmul(bad) {
        Err(Error::Shape { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let tape = Tape::<f64>::new();
    let s = tape.constant(Tensor::zeros([3])).softmax().unwrap().to_tensor();
    for &v in s.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let tape = Tape::<f64>::new();
    let y = tape.constant(Tensor::full([5], 3.25)).layer_norm().unwrap().to_tensor();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn non_finite_output_is_an_error() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full([2], 1e300));
    assert!(matches!(x.mul(x), Err(Error::NonFinite { op: "mul" })));
}

#[test]
fn backward_of_sum_of_squares() {
    let tape = Tape::<f64>::new();
    let x = tape.var(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
    let loss = x.mul(x).unwrap().sum().unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_and_second_pass() {
    let tape = Tape::<f64>::new();
    let x = tape.var(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
    let y = x.scale(2.0).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));

    let tape = Tape::<f64>::new();
    let x = tape.var(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
    let loss = x.sum().unwrap();
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
}

#[test]
fn unused_leaves_get_zero_gradients() {
    let tape = Tape::<f64>::new();
    let x = tape.var(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
    let unused = tape.var(Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap());
    let g = tape.backward(x.sum().unwrap()).unwrap();
    assert_eq!(g.get(unused).unwrap(), &Tensor::zeros([3]));
}

#[test]
fn cosine_gradient_at_identical_unit_vectors() {
    // d/dx cos(x, y) = y/(|x||y|) - cos·x/|x|², which vanishes at x = y.
    let u = Tensor::from_f64([1, 3], &[0.6, 0.0, 0.8]).unwrap();
    let report = check(&[u.clone(), u.clone()], H, |_, v| v[0].cosine_rows(v[1])?.sum()).unwrap();
    let gx = &report.analytic[0];
    let along_x: f64 = gx.data().iter().zip(u.data()).map(|(a, b)| a * b).sum();
    assert!(along_x.abs() < 1e-12);
    for (a, n) in gx.data().iter().zip(report.numeric[0].data()) {
        assert!((a - n).abs() < 1e-9, "{a} vs {n}");
        assert!(a.abs() < 1e-9);
    }
}

#[test]
fn gradients_of_every_primitive() {
    let mut rng = Rng::new(11);
    let a23 = rand(&mut rng, &[2, 3]);
    let b23 = rand(&mut rng, &[2, 3]);
    let b3 = rand(&mut rng, &[3]);
    let m34 = rand(&mut rng, &[3, 4]);
    let bat_a = rand(&mut rng, &[2, 3, 4]);
    let bat_b = rand(&mut rng, &[2, 4, 2]);
    let x3 = rand(&mut rng, &[2, 6, 3]);
    let w = rand(&mut rng, &[3, 3, 4]);

    assert_grad("add", &[a23.clone(), b23.clone()], |_, v| weighted(v[0].add(v[1])?, 1));
    assert_grad("add_bias", &[a23.clone(), b3.clone()], |_, v| weighted(v[0].add(v[1])?, 2));
    assert_grad("sub", &[a23.clone(), b3.clone()], |_, v| weighted(v[0].sub(v[1])?, 3));
    assert_grad("mul", &[a23.clone(), b23.clone()], |_, v| weighted(v[0].mul(v[1])?, 4));
    assert_grad("mul_bias", &[a23.clone(), b3.clone()], |_, v| weighted(v[0].mul(v[1])?, 5));
    assert_grad("scale", &[a23.clone()], |_, v| weighted(v[0].scale(-1.7)?.add_scalar(0.3)?, 6));
    assert_grad("matmul", &[a23.clone(), m34.clone()], |_, v| weighted(v[0].matmul(v[1])?, 7));
    assert_grad("matmul_batched", &[bat_a.clone(), bat_b.clone()], |_, v| weighted(v[0].matmul(v[1])?, 8));
    assert_grad("matmul_nt", &[bat_a.clone(), bat_a.clone()], |_, v| weighted(v[0].matmul_nt(v[1])?, 9));
    assert_grad("transpose", &[bat_a.clone()], |_, v| weighted(v[0].transpose()?, 10));
    assert_grad("permute", &[bat_a.clone()], |_, v| weighted(v[0].permute(&[2, 0, 1])?, 11));
    assert_grad("reshape", &[bat_a.clone()], |_, v| weighted(v[0].reshape(&[4, 6])?, 12));
    assert_grad("concat", &[a23.clone(), b23.clone()], |_, v| weighted(Var::concat(&[v[0], v[1]], 1)?, 13));
    assert_grad("concat0", &[a23.clone(), b23.clone()], |_, v| weighted(Var::concat(&[v[0], v[1]], 0)?, 14));
    assert_grad("slice", &[bat_a.clone()], |_, v| weighted(v[0].slice(2, 1, 2)?, 15));
    assert_grad("gather", &[a23.clone()], |_, v| weighted(v[0].gather(&[1, 0, 1])?, 16));
    assert_grad("mask_select", &[bat_a.clone()], |_, v| weighted(v[0].mask_select(&[false, true])?, 17));
    assert_grad("conv1d", &[x3.clone(), w.clone()], |_, v| weighted(v[0].conv1d(v[1], 1, 1)?, 18));
    assert_grad("conv1d_strided", &[x3.clone(), rand(&mut Rng::new(5), &[4, 3, 2])], |_, v| {
        weighted(v[0].conv1d(v[1], 2, 1)?, 19)
    });
    assert_grad("upsample", &[x3.clone()], |_, v| weighted(v[0].upsample(2)?, 20));
    assert_grad("layer_norm", &[bat_a.clone()], |_, v| weighted(v[0].layer_norm()?, 21));
    assert_grad("softmax", &[bat_a.clone()], |_, v| weighted(v[0].softmax()?, 22));
    assert_grad("log_softmax", &[bat_a.clone()], |_, v| weighted(v[0].log_softmax()?, 23));
    assert_grad("gelu", &[bat_a.clone()], |_, v| weighted(v[0].gelu()?, 24));
    assert_grad("sum", &[a23.clone()], |_, v| v[0].sum());
    assert_grad("mean", &[a23.clone()], |_, v| v[0].mean());
    assert_grad("sum_axis", &[bat_a.clone()], |_, v| weighted(v[0].sum_axis(1)?, 25));
    assert_grad("mean_axis", &[bat_a.clone()], |_, v| weighted(v[0].mean_axis(2)?, 26));
    assert_grad("l1_loss", &[a23.clone(), b23.clone()], |_, v| v[0].l1_loss(v[1]));
    assert_grad("mse_loss", &[a23.clone(), b23.clone()], |_, v| v[0].mse_loss(v[1]));
    assert_grad("cosine_rows", &[a23.clone(), b23.clone()], |_, v| weighted(v[0].cosine_rows(v[1])?, 27));
    assert_grad("l2_normalize", &[a23.clone()], |_, v| weighted(v[0].l2_normalize()?, 28));
    assert_grad("l2_norm", &[a23.clone()], |_, v| v[0].l2_norm());
}

#[test]
fn transformer_block_gradient() {
    let mut params = Params::<f64>::new();
    let mut rng = Rng::new(3);
    let block = TransformerBlock::new(&mut Init { params: &mut params, rng: &mut rng }, "blk", 8, 2, 16);
    let x = rand(&mut rng, &[2, 3, 8]);
    let bias: Tensor<f64> = key_padding_bias(&[3, 2], 2, 3);
    let mut inputs = vec![x];
    inputs.extend(params.tensors().iter().cloned());
    let report = check(&inputs, H, move |tape, v| {
        let bound = Bound::from_vars(v[1..].to_vec());
        let b = tape.constant(bias.clone());
        weighted(block.forward(&bound, v[0], Some(b))?, 30)
    })
    .unwrap();
    assert!(report.max_rel_error <= TOL, "{:.3e}", report.max_rel_error);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in 0u64..1000) {
        let tape = Tape::<f64>::new();
        let x: Tensor<f64> = Rng::new(seed).normal(&[rows, cols]);
        let y = tape.constant(x.clone()).scale(4.0).unwrap().softmax().unwrap().to_tensor();
        for r in y.data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(rows in 1usize..5, cols in 2usize..17, seed in 0u64..1000) {
        let tape = Tape::<f64>::new();
        let x: Tensor<f64> = Rng::new(seed).normal(&[rows, cols]);
        let y = tape.constant(x).layer_norm().unwrap().to_tensor();
        for r in y.data().chunks(cols) {
            let n = cols as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            prop_assert!(mean.abs() <= 1e-6);
            prop_assert!((var - 1.0).abs() <= 1e-4 || var == 0.0, "var {}", var);
        }
    }

    #[test]
    fn random_small_shape_gradients(rows in 1usize..5, cols in 1usize..9, seed in 0u64..10_000) {
        let mut rng = Rng::new(seed);
        let a = rand(&mut rng, &[rows, cols]);
        let b = rand(&mut rng, &[rows, cols]);
        let m = rand(&mut rng, &[cols, 3]);
        let r = check(&[a.clone(), b.clone(), m], H, |_, v| {
            let h = v[0].mul(v[1])?.gelu()?.matmul(v[2])?.softmax()?;
            let c = v[0].cosine_rows(v[1])?.sum()?;
            weighted(h, seed)?.add(c)
        }).unwrap();
        prop_assert!(r.max_rel_error <= TOL, "{:.3e}", r.max_rel_error);
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let x: Tensor<f32> = Rng::new(seed).normal(&[3, 5]);
        let run = || {
            let tape = Tape::<f32>::new();
            tape.constant(x.clone()).layer_norm().unwrap().gelu().unwrap().softmax().unwrap().to_tensor()
        };
        prop_assert_eq!(run(), run());
    }
}
