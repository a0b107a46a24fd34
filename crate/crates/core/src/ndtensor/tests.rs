use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

/// Central-difference gradient of the scalar built by `f` wrt every input.
fn numeric_grads(inputs: &[Tensor<f64>], f: &Build, h: f64) -> Vec<Vec<f64>> {
    let eval = |vals: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.item(out)
    };
    inputs
        .iter()
        .enumerate()
        .map(|(k, t)| {
            (0..t.numel())
                .map(|e| {
                    let mut plus = inputs.to_vec();
                    plus[k].data_mut()[e] += h;
                    let mut minus = inputs.to_vec();
                    minus[k].data_mut()[e] -= h;
                    (eval(&plus) - eval(&minus)) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}

fn analytic_grads(inputs: &[Tensor<f64>], f: &Build) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    vars.iter()
        .map(|&v| {
            g.grad(v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
        })
        .collect()
}

fn max_rel_err(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let scale = a
        .iter()
        .chain(b)
        .flat_map(|v| v.iter())
        .fold(0.0f64, |m, &x| m.max(x.abs()))
        .max(1e-8);
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs() / scale)
        .fold(0.0, f64::max)
}

fn check(inputs: Vec<Tensor<f64>>, f: &Build, tol: f64) {
    let num = numeric_grads(&inputs, f, 1e-6);
    let ana = analytic_grads(&inputs, f);
    let err = max_rel_err(&num, &ana);
    assert!(
        err < tol,
        "rel err {err:e}\nnumeric {num:?}\nanalytic {ana:?}"
    );
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn matmul_identity_and_definition() {
    let mut g = Graph::<f64>::new();
    let i2 = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    assert!(matches!(g.matmul(a, b), Err(TensorError::Dimension { .. })));
}

#[test]
fn matmul_gradient_matches_hand_value() {
    // d/da sum(a·b) at a=[[1,1]], b=[[2],[5]] is [[2,5]]
    let a = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
    let b = Tensor::matrix(2, 1, vec![2.0, 5.0]).unwrap();
    let f: &Build = &|g, v| {
        let p = g.matmul(v[0], v[1]).unwrap();
        g.sum(p)
    };
    let num = numeric_grads(&[a.clone(), b.clone()], f, 1e-6);
    assert!((num[0][0] - 2.0).abs() < 1e-8 && (num[0][1] - 5.0).abs() < 1e-8);
    let ana = analytic_grads(&[a, b], f);
    assert_eq!(ana[0], vec![2.0, 5.0]);
}

#[test]
fn conv_identity_kernel() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let w = g.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
    for d in [1, 3, 7] {
        let y = g.conv1d_dilated(x, w, d).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}

#[test]
fn conv_dilated_hand_example() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let w = g.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap());
    let y = g.conv1d_dilated(x, w, 2).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 4.0, 6.0]);
}

#[test]
fn conv_rejects_bad_params() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(vec![1, 4]));
    let w = g.constant(Tensor::zeros(vec![1, 1, 2]));
    assert!(matches!(
        g.conv1d_dilated(x, w, 0),
        Err(TensorError::Parameter(_))
    ));
    let w0 = g.constant(Tensor::zeros(vec![1, 1, 0]));
    assert!(matches!(
        g.conv1d_dilated(x, w0, 1),
        Err(TensorError::Parameter(_))
    ));
    let wbad = g.constant(Tensor::zeros(vec![1, 3, 2]));
    assert!(matches!(
        g.conv1d_dilated(x, wbad, 1),
        Err(TensorError::Dimension { .. })
    ));
}

#[test]
fn conv_gradient_vs_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for d in [1, 2, 4] {
        let x = rand_tensor(&mut rng, vec![2, 8]);
        let w = rand_tensor(&mut rng, vec![3, 2, 3]);
        let f: &Build = &move |g, v| {
            let y = g.conv1d_dilated(v[0], v[1], d).unwrap();
            let y = g.tanh(y);
            g.sum(y)
        };
        let num = numeric_grads(&[x.clone(), w.clone()], f, 1e-6);
        let ana = analytic_grads(&[x, w], f);
        let err = max_rel_err(&num, &ana);
        assert!(err < 1e-6, "dilation {d}: {err:e}");
    }
}

#[test]
fn conv_keeps_length() {
    let mut g = Graph::<f64>::new();
    for t in 1..12 {
        let x = g.constant(Tensor::zeros(vec![2, t]));
        let w = g.constant(Tensor::zeros(vec![5, 2, 3]));
        let y = g.conv1d_dilated(x, w, 4).unwrap();
        assert_eq!(g.shape(y), &[5, t]);
    }
}

#[test]
fn max_pool_values_and_ties() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::matrix(1, 3, vec![1.0, 5.0, 3.0]).unwrap());
    let pa = g.global_max_pool(a).unwrap();
    assert_eq!(g.value(pa).data(), &[5.0]);
    let b = g.constant(Tensor::matrix(2, 2, vec![-1.0, -2.0, 0.0, 0.0]).unwrap());
    let pb = g.global_max_pool(b).unwrap();
    assert_eq!(g.value(pb).data(), &[-1.0, 0.0]);

    let t = g.variable(Tensor::matrix(1, 2, vec![2.0, 2.0]).unwrap());
    let pt = g.global_max_pool(t).unwrap();
    assert_eq!(g.value(pt).data(), &[2.0]);
    let s = g.sum(pt);
    g.backward(s).unwrap();
    assert_eq!(g.grad(t).unwrap(), &[1.0, 0.0]);

    let empty = g.constant(Tensor::zeros(vec![2, 0]));
    assert!(g.global_max_pool(empty).is_err());
}

#[test]
fn backward_basic_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::vector(vec![0.3, -1.0, 2.0]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
    let sq = g.square(x);
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(TensorError::Contract(_))));
}

#[test]
fn repeated_backward_accumulates() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
    let sq = g.square(x);
    let s = g.sum(sq);
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
    g.zero_grad();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn shared_subexpression_sums_gradients() {
    // y = x*x + x, using the same node three times
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::vector(vec![3.0]));
    let sq = g.mul(x, x).unwrap();
    let y = g.add(sq, x).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[7.0]);
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let b = rand_tensor(&mut rng, vec![3, 4]);
        let m = rand_tensor(&mut rng, vec![4, 2]);
        let bias = rand_tensor(&mut rng, vec![3]);
        let f: &Build = &|g, v| {
            let s = g.add(v[0], v[1]).unwrap();
            let d = g.sub(s, v[1]).unwrap();
            let p = g.mul(d, v[1]).unwrap();
            let t = g.tanh(p);
            let r = g.relu(v[0]);
            let q = g.add(t, r).unwrap();
            let q = g.add_channel_bias(q, v[3]).unwrap();
            let mm = g.matmul(q, v[2]).unwrap();
            let sg = g.sigmoid(mm);
            let tr = g.transpose(sg).unwrap();
            let e = g.exp(tr);
            let l = g.log(e);
            let l = g.affine(l, 0.7, 0.2);
            let pooled = g.global_max_pool(l).unwrap();
            let flat = g.reshape(q, vec![12]).unwrap();
            let sl = g.slice(flat, 2, 5).unwrap();
            let c = g.concat(&[pooled, sl]).unwrap();
            let c = g.clamp(c, -0.9, 0.9);
            let ls = g.log_softmax(c).unwrap();
            let m1 = g.mean(ls);
            let m2 = g.sum(c);
            let out = g.add(m1, m2).unwrap();
            g.square(out)
        };
        check(vec![a, b, m, bias], f, 1e-5);
    }
}

#[test]
fn linear_helper() {
    let mut g = Graph::<f64>::new();
    let w = g.constant(Tensor::matrix(2, 3, vec![1.0, 0.0, 2.0, 0.0, 1.0, -1.0]).unwrap());
    let b = g.constant(Tensor::vector(vec![0.5, -0.5]));
    let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let y = g.linear(w, b, x).unwrap();
    assert_eq!(g.value(y).data(), &[7.5, -1.5]);
}

#[test]
fn params_survive_reset_and_checkpoint_round_trips() {
    let mut g = Graph::<f64>::new();
    let w = g.param("w", Tensor::vector(vec![0.1, 1.0 / 3.0])).unwrap();
    let x = g.constant(Tensor::vector(vec![1.0, 1.0]));
    let y = g.mul(w, x).unwrap();
    let s = g.sum(y);
    assert!(g.param("late", Tensor::scalar(0.0)).is_err());
    g.backward(s).unwrap();
    g.reset();
    assert_eq!(g.len(), 1);
    assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0]);

    let ck = g.to_checkpoint();
    let mut h = Graph::<f64>::new();
    h.param("w", Tensor::zeros(vec![2])).unwrap();
    h.load_checkpoint(&Checkpoint::from_json(&ck.to_json().unwrap()).unwrap())
        .unwrap();
    assert_eq!(h.value(Var(0)).data(), g.value(w).data());

    let mut missing = Graph::<f64>::new();
    missing.param("other", Tensor::zeros(vec![2])).unwrap();
    assert!(matches!(
        missing.load_checkpoint(&ck),
        Err(TensorError::Checkpoint(_))
    ));
}

#[test]
fn generic_over_f32() {
    let mut g = Graph::<f32>::new();
    let x = g.variable(Tensor::vector(vec![1.0f32, 2.0]));
    let sq = g.square(x);
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0f32, 4.0]);
}
