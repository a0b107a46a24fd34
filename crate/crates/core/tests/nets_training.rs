use maneuverlab::ndtensor::{Adam, AdamConfig, Graph, Tensor, Var};
use maneuverlab::nets::{ClassifierHead, Discriminator, DiscriminatorSpec, Encoder, EncoderSpec};
use maneuverlab::tnc::{pu_loss, tnc_loss, TncModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            sd * e
        })
        .collect()
}

/// Pairs labelled by the sign of `a₀ + b₀`, with a margin around zero.
fn separable_pairs(
    rng: &mut ChaCha8Rng,
    n: usize,
    repr: usize,
) -> (Vec<[Tensor<f64>; 2]>, Vec<[Tensor<f64>; 2]>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    while pos.len() < n || neg.len() < n {
        let a: Vec<f64> = (0..repr).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..repr).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = a[0] + b[0];
        let pair = [Tensor::vector(a), Tensor::vector(b)];
        if s > 0.2 && pos.len() < n {
            pos.push(pair);
        } else if s < -0.2 && neg.len() < n {
            neg.push(pair);
        }
    }
    (pos, neg)
}

fn probs(g: &mut Graph<f64>, d: &Discriminator, pairs: &[[Tensor<f64>; 2]]) -> Vec<Var> {
    pairs
        .iter()
        .map(|[a, b]| {
            let a = g.constant(a.clone());
            let b = g.constant(b.clone());
            d.forward(g, a, b).unwrap()
        })
        .collect()
}

#[test]
fn discriminator_learns_separable_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::<f64>::new();
    let d = Discriminator::new(
        &mut g,
        "d",
        DiscriminatorSpec {
            repr: 4,
            hidden: 32,
        },
        &mut rng,
    )
    .unwrap();
    let params = d.params();
    let (train_pos, train_neg) = separable_pairs(&mut rng, 100, 4);
    let (test_pos, test_neg) = separable_pairs(&mut rng, 100, 4);
    let mut adam = Adam::new(AdamConfig::with_lr(0.01));
    for _ in 0..300 {
        g.zero_grad();
        let p = probs(&mut g, &d, &train_pos);
        let n = probs(&mut g, &d, &train_neg);
        let (loss, _) = pu_loss(&mut g, &p, &n, 0.0).unwrap();
        g.backward(loss).unwrap();
        g.reset();
        adam.step(&mut g, &params).unwrap();
    }
    let p = probs(&mut g, &d, &test_pos);
    let n = probs(&mut g, &d, &test_neg);
    let correct = p.iter().filter(|&&v| g.item(v) > 0.5).count()
        + n.iter().filter(|&&v| g.item(v) < 0.5).count();
    let accuracy = correct as f64 / 200.0;
    assert!(accuracy > 0.95, "held-out pair accuracy {accuracy}");
}

#[test]
fn classifier_head_separates_frozen_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dim = 16;
    let centers: Vec<Vec<f64>> = (0..4).map(|_| gaussian(&mut rng, dim, 1.0)).collect();
    let sample = |rng: &mut ChaCha8Rng, per: usize| {
        let mut out = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per {
                let noise = gaussian(rng, dim, 0.3);
                out.push((
                    center
                        .iter()
                        .zip(noise)
                        .map(|(a, b)| a + b)
                        .collect::<Vec<f64>>(),
                    c,
                ));
            }
        }
        out
    };
    let train = sample(&mut rng, 50);
    let test = sample(&mut rng, 50);

    let mut g = Graph::<f64>::new();
    let head = ClassifierHead::new(&mut g, "head", dim, 4, 0.5, &mut rng).unwrap();
    let params = head.params();
    let mut adam = Adam::new(AdamConfig::with_lr(0.01));
    let mut dropout = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        g.zero_grad();
        let mut terms = Vec::new();
        for (x, c) in &train {
            let z = g.constant(Tensor::vector(x.clone()));
            let s = head.forward(&mut g, z, Some(&mut dropout)).unwrap();
            let ls = g.log_softmax(s).unwrap();
            terms.push(g.slice(ls, *c, 1).unwrap());
        }
        let all = g.concat(&terms).unwrap();
        let m = g.mean(all);
        let nll = g.neg(m);
        g.backward(nll).unwrap();
        g.reset();
        adam.step(&mut g, &params).unwrap();
    }
    let mut correct = 0;
    for (x, c) in &test {
        let z = g.constant(Tensor::vector(x.clone()));
        let s = head.forward::<f64, ChaCha8Rng>(&mut g, z, None).unwrap();
        let scores = g.value(s).data();
        let pred = (0..4)
            .max_by(|&a, &b| scores[a].total_cmp(&scores[b]))
            .unwrap();
        correct += usize::from(pred == *c);
        g.reset();
    }
    let accuracy = correct as f64 / test.len() as f64;
    assert!(accuracy > 0.9, "held-out accuracy {accuracy}");
}

/// Encoder with non-negative weights and zero biases, so a large positive
/// spike dominates every channel's activations over its receptive span.
fn monotone_encoder(g: &mut Graph<f64>) -> Encoder {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let enc = Encoder::new(g, "enc", EncoderSpec::standard(2, 19, 16, false), &mut rng).unwrap();
    for p in enc.params() {
        let name = g.param_name(p).unwrap().to_string();
        let mut t = g.value(p).clone();
        for v in t.data_mut() {
            *v = if name.ends_with(".b") { 0.0 } else { v.abs() };
        }
        g.set_value(p, t).unwrap();
    }
    enc
}

fn swap_columns(window: &[f64], i: usize, j: usize) -> Vec<f64> {
    let mut w = window.to_vec();
    for f in 0..2 {
        w.swap(f * 19 + i, f * 19 + j);
    }
    w
}

fn run(g: &mut Graph<f64>, enc: &Encoder, window: &[f64]) -> (Vec<f64>, Vec<usize>, Vec<f64>) {
    let x = g.constant(Tensor::new(vec![2, 19], window.to_vec()).unwrap());
    let h = enc.features(g, x).unwrap();
    let feats = g.value(h).data().to_vec();
    let pooled = g.global_max_pool(h).unwrap();
    let idx = g.pool_indices(pooled).unwrap().to_vec();
    let out = enc.forward(g, x).unwrap();
    let z = g.value(out).data().to_vec();
    g.reset();
    (z, idx, feats)
}

#[test]
fn permuting_columns_outside_pooled_positions_keeps_output() {
    let mut g = Graph::<f64>::new();
    let enc = monotone_encoder(&mut g);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut window: Vec<f64> = (0..38).map(|_| rng.random_range(0.0..0.01)).collect();
    window[2] = 100.0;
    window[19 + 2] = 100.0;

    // columns 17 and 18 only reach last-layer positions 17 and 18
    let (z, idx, feats) = run(&mut g, &enc, &window);
    let swapped = swap_columns(&window, 17, 18);
    let (z2, idx2, feats2) = run(&mut g, &enc, &swapped);
    assert!(idx.iter().chain(&idx2).all(|&s| s < 17), "{idx:?} {idx2:?}");
    let channels = feats.len() / 19;
    for c in 0..channels {
        assert_eq!(feats[c * 19..c * 19 + 17], feats2[c * 19..c * 19 + 17]);
    }
    assert_ne!(feats, feats2);
    assert_eq!(z, z2);

    // moving the spike itself changes the pooled candidates and the output
    let (z3, _, _) = run(&mut g, &enc, &swap_columns(&window, 2, 17));
    assert_ne!(z, z3);
}

fn tiny_spec() -> EncoderSpec {
    EncoderSpec {
        in_features: 2,
        window: 8,
        kernel: 3,
        channels: vec![4, 4, 4],
        dilations: vec![1, 2, 4],
        out: 4,
        variational: false,
        first_layer_bias: false,
        linear: false,
    }
}

/// Loss trajectory under plain gradient descent; the first conv layer uses
/// `first_lr`, everything else `lr`.
fn trajectory(
    tuples: &[[Tensor<f64>; 3]],
    weight_scale: f64,
    first_lr: f64,
    lr: f64,
    steps: usize,
) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = TncModel::new(&mut g, tiny_spec(), 6, &mut rng).unwrap();
    let w0 = model.encoder.first_conv_weight();
    let mut t = g.value(w0).clone();
    t.data_mut().iter_mut().for_each(|v| *v *= weight_scale);
    g.set_value(w0, t).unwrap();
    let mut losses = Vec::new();
    for _ in 0..steps {
        g.zero_grad();
        let (loss, terms) = tnc_loss(&mut g, &model, tuples, 0.05).unwrap();
        g.backward(loss).unwrap();
        g.reset();
        losses.push(terms.loss);
        for p in model.params() {
            let step = if p == w0 { first_lr } else { lr };
            let grad = g.grad(p).unwrap().to_vec();
            let mut v = g.value(p).clone();
            for (x, d) in v.data_mut().iter_mut().zip(grad) {
                *x -= step * d;
            }
            g.set_value(p, v).unwrap();
        }
    }
    losses
}

#[test]
fn first_layer_scale_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let window = |rng: &mut ChaCha8Rng| Tensor::new(vec![2, 8], gaussian(rng, 16, 1.0)).unwrap();
    let tuples: Vec<[Tensor<f64>; 3]> = (0..4)
        .map(|_| [window(&mut rng), window(&mut rng), window(&mut rng)])
        .collect();
    let (lr, steps) = (0.05, 20);
    let base = trajectory(&tuples, 1.0, lr, lr, steps);
    for c in [0.1, 3.0, 40.0] {
        let scaled: Vec<[Tensor<f64>; 3]> = tuples
            .iter()
            .map(|tu| {
                tu.clone().map(|mut t| {
                    t.data_mut().iter_mut().for_each(|v| *v *= c);
                    t
                })
            })
            .collect();
        let other = trajectory(&scaled, 1.0 / c, lr / (c * c), lr, steps);
        for (k, (a, b)) in base.iter().zip(&other).enumerate() {
            assert!(
                (a - b).abs() < 1e-9 * a.abs().max(1.0),
                "c={c} step {k}: {a} vs {b}"
            );
        }
    }
    assert!(base.last() < base.first());
}
