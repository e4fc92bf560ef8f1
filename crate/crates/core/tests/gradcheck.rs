use std::sync::Arc;

use lext::autodiff::{Graph, ParamStore, Tensor, Var};
use lext::dsp::{StftConfig, StftPlan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Compares analytic gradients of every parameter with central differences.
fn check(params: &ParamStore<f64>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var, tol: f64) {
    let forward = |ps: &ParamStore<f64>| {
        let mut g = Graph::new();
        let vars: Vec<Var> = (0..ps.len()).map(|i| g.param(i, ps.get(i))).collect();
        let out = build(&mut g, &vars);
        (g, out)
    };
    let (g, out) = forward(params);
    let grads = g.backward(out);
    let analytic = g.param_grads(&grads);
    let h = 1e-6;
    for (slot, ga) in analytic {
        for i in 0..ga.len() {
            let mut p = params.clone();
            p.get_mut(slot).data[i] += h;
            let (gp, op) = forward(&p);
            let fp = gp.value(op).data[0];
            p.get_mut(slot).data[i] -= 2.0 * h;
            let (gm, om) = forward(&p);
            let fm = gm.value(om).data[0];
            let numeric = (fp - fm) / (2.0 * h);
            let err = (numeric - ga[i]).abs() / (1.0 + numeric.abs());
            assert!(err < tol, "{}[{i}]: analytic {} numeric {numeric}", params.name(slot), ga[i]);
        }
    }
}

/// Reduces any tensor to a scalar with fixed random weights.
fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let shape = g.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let w = g.input(Tensor::new(vec![n, 1], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()));
    let flat = g.reshape(x, vec![1, n]);
    let y = g.linear(flat, w, None);
    g.reshape(y, vec![1])
}

#[test]
fn linear_activations_and_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamStore::new();
    ps.add("x", rand_tensor(vec![3, 4], &mut rng));
    ps.add("w", rand_tensor(vec![4, 6], &mut rng));
    ps.add("b", rand_tensor(vec![6], &mut rng));
    ps.add("alpha", Tensor::scalar(0.25));
    ps.add("gamma", rand_tensor(vec![3], &mut rng));
    ps.add("beta", rand_tensor(vec![3], &mut rng));
    check(
        &ps,
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]));
            let a = g.prelu(y, v[3]);
            let t = g.tanh(a);
            let s = g.sigmoid(y);
            let m = g.mul(t, s);
            let u = g.silu(m);
            let gl = g.glu(u);
            let n = g.layer_norm(gl, v[4], v[5]);
            weighted_sum(g, n, 11)
        },
        1e-6,
    );
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = ParamStore::new();
    ps.add("x", rand_tensor(vec![2, 5, 3], &mut rng));
    ps.add("y", rand_tensor(vec![5, 2, 2], &mut rng));
    ps.add("gamma", rand_tensor(vec![3], &mut rng));
    ps.add("beta", rand_tensor(vec![3], &mut rng));
    check(
        &ps,
        |g, v| {
            let u0 = g.unfold(v[0], 0, 3);
            let u1 = g.unfold(v[0], 1, 3);
            let u = g.concat(u0, u1);
            let s = g.swap01(v[0]);
            let c = g.concat(s, v[1]);
            let p = g.permute(c, &[2, 0, 1]);
            let f = g.film(v[0], v[2], v[3]);
            let m = g.mean_rows(f);
            let a = weighted_sum(g, u, 3);
            let b = weighted_sum(g, p, 4);
            let c2 = weighted_sum(g, m, 5);
            let ab = g.add(a, b);
            g.add(ab, c2)
        },
        1e-6,
    );
}

#[test]
fn attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamStore::new();
    ps.add("q", rand_tensor(vec![4, 3, 4], &mut rng));
    ps.add("k", rand_tensor(vec![4, 3, 4], &mut rng));
    ps.add("v", rand_tensor(vec![4, 3, 6], &mut rng));
    check(
        &ps,
        |g, v| {
            let o = g.attention(v[0], v[1], v[2], 2);
            weighted_sum(g, o, 7)
        },
        1e-6,
    );
}

#[test]
fn gru_both_directions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ps = ParamStore::new();
    ps.add("x", rand_tensor(vec![2, 4, 3], &mut rng));
    ps.add("w_ih", rand_tensor(vec![3, 6], &mut rng));
    ps.add("w_hh", rand_tensor(vec![2, 6], &mut rng));
    ps.add("b_ih", rand_tensor(vec![6], &mut rng));
    ps.add("b_hh", rand_tensor(vec![6], &mut rng));
    for reverse in [false, true] {
        check(
            &ps,
            |g, v| {
                let o = g.gru(v[0], v[1], v[2], v[3], v[4], reverse);
                weighted_sum(g, o, 9)
            },
            1e-6,
        );
    }
}

#[test]
fn synthesis_and_si_sdr_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let plan = Arc::new(StftPlan::<f64>::new(StftConfig::default()).unwrap());
    let len = 200;
    let frames = plan.num_frames(len);
    let target: Vec<f64> = (0..len).map(|n| (n as f64 * 0.31).sin()).collect();
    let spec = plan.analyze(&target).unwrap();
    let mut ri = spec.to_interleaved();
    for v in ri.iter_mut() {
        *v += rng.gen_range(-0.3..0.3);
    }
    let mut ps = ParamStore::new();
    ps.add("ri", Tensor::new(vec![frames, plan.bins(), 2], ri));
    check(
        &ps,
        |g, v| {
            let y = g.synthesize(v[0], plan.clone(), len);
            g.neg_si_sdr(y, &target, (20, 180))
        },
        1e-5,
    );
}

#[test]
fn clamped_loss_has_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let target: Vec<f64> = (0..64).map(|n| (n as f64 * 0.2).sin()).collect();
    let est = g.watched_input(Tensor::new(vec![64], target.clone()));
    let l = g.neg_si_sdr(est, &target, (0, 64));
    assert_eq!(g.value(l).data[0], -60.0);
    let grads = g.backward(l);
    assert!(grads.get(est).unwrap().iter().all(|&v| v == 0.0));
}
