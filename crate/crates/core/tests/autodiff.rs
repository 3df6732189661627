use gala_core::tensor::{grad_check, Graph, NodeId, Padding, ParamStore, Tensor};
use gala_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Check d(sum(w * op(x...)))/dx for every input against central differences.
/// The random weights `w` make every output element matter.
fn check_op(inputs: &[Tensor], op: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>) {
    let eval = |xs: &[Tensor], w: Option<&Tensor>| -> (f64, Vec<Tensor>, Tensor) {
        let mut g = Graph::new();
        let nodes: Vec<NodeId> = xs.iter().map(|x| g.input(x.clone(), true).unwrap()).collect();
        let y = op(&mut g, &nodes).unwrap();
        let w = w.cloned().unwrap_or_else(|| {
            let n = g.value(y).len();
            let mut r = ChaCha8Rng::seed_from_u64(n as u64);
            random(g.value(y).shape(), &mut r)
        });
        let wn = g.constant(w.clone()).unwrap();
        let prod = g.mul(y, wn).unwrap();
        let s = g.sum(prod).unwrap();
        let grads = g.backward(s).unwrap();
        let gx = nodes.iter().map(|&n| grads.wrt(n).unwrap()).collect();
        (g.value(s).item().unwrap(), gx, w)
    };
    let (_, analytic, w) = eval(inputs, None);
    let eps = 1e-6;
    for (k, x) in inputs.iter().enumerate() {
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= eps;
            let numeric = (eval(&plus, Some(&w)).0 - eval(&minus, Some(&w)).0) / (2.0 * eps);
            let a = analytic[k].data()[j];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                "input {k}[{j}]: analytic {a} numeric {numeric}"
            );
        }
    }
}

#[test]
fn conv2d_same_and_valid_with_stride() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [random(&[2, 5, 4, 3], &mut rng), random(&[3, 3, 3, 2], &mut rng), random(&[2], &mut rng)];
    for stride in [1, 2] {
        for pad in [Padding::Same, Padding::Valid] {
            check_op(&inputs, |g, n| g.conv2d(n[0], n[1], Some(n[2]), stride, pad));
        }
    }
}

#[test]
fn dense_relu_tanh() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [random(&[3, 4], &mut rng), random(&[4, 5], &mut rng), random(&[5], &mut rng)];
    check_op(&inputs, |g, n| {
        let d = g.dense(n[0], n[1], Some(n[2]))?;
        let t = g.tanh(d)?;
        g.relu(t)
    });
}

#[test]
fn pooling_tiling_and_reshape() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    check_op(&[random(&[2, 3, 4, 5], &mut rng)], |g, n| {
        let p = g.global_avg_pool(n[0])?;
        let r = g.reshape(p, &[2, 1, 1, 5])?;
        g.tile(r, &[2, 3, 2, 5])
    });
}

#[test]
fn elementwise_add_mul_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [random(&[2, 3, 3], &mut rng), random(&[2, 3, 3], &mut rng)];
    check_op(&inputs, |g, n| {
        let a = g.add(n[0], n[1])?;
        let m = g.mul(a, n[0])?;
        g.scale(m, -2.5)
    });
}

#[test]
fn channel_norm_and_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [random(&[2, 3, 2, 4], &mut rng), random(&[4], &mut rng), random(&[4], &mut rng)];
    check_op(&inputs, |g, n| {
        let a = g.channel_affine(n[0], n[1], n[2])?;
        g.channel_l2(a)
    });
}

#[test]
fn batch_norm_through_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    check_op(&[random(&[3, 2, 2, 3], &mut rng)], |g, n| Ok(g.batch_norm(n[0], 1e-5)?.0));
}

#[test]
fn softmax_cross_entropy_and_unit_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    check_op(&[random(&[4, 6], &mut rng)], |g, n| g.softmax_cross_entropy(n[0], &[0, 5, 2, 2]));
    let target = random(&[3, 2, 2, 1], &mut rng);
    check_op(&[random(&[3, 2, 2, 1], &mut rng)], move |g, n| g.l2_distance(n[0], &target, &[1.0, 0.0, 2.0]));
}

#[test]
fn random_three_layer_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let shapes = [("w1", vec![6, 8]), ("b1", vec![8]), ("w2", vec![8, 8]), ("b2", vec![8]), ("w3", vec![8, 4]), ("b3", vec![4])];
    for (name, shape) in &shapes {
        store.insert(*name, random(shape, &mut rng)).unwrap();
    }
    let x = random(&[5, 6], &mut rng);
    let labels = [0, 3, 1, 1, 2];
    let report = grad_check(&store, 1e-5, |p| {
        let mut g = Graph::new();
        let mut h = g.constant(x.clone())?;
        for (layer, act) in [(0, "tanh"), (2, "relu"), (4, "")] {
            let w = g.param(p, p.id(shapes[layer].0)?)?;
            let b = g.param(p, p.id(shapes[layer + 1].0)?)?;
            h = g.dense(h, w, Some(b))?;
            h = match act {
                "tanh" => g.tanh(h)?,
                "relu" => g.relu(h)?,
                _ => h,
            };
        }
        let loss = g.softmax_cross_entropy(h, &labels)?;
        let grads = g.backward(loss)?;
        let analytic = p.ids().map(|id| (id, grads.param(id).unwrap().data().to_vec())).collect();
        Ok((g.value(loss).item()?, analytic))
    })
    .unwrap();
    assert!(report.max_rel_error() < 1e-6, "{:?}", report.worst());
    assert_eq!(report.entries.len(), 6);
}
