use pcic_nn::gradcheck::check_params;
use pcic_nn::layers::{AttentionBlock, Conv2d, ConvTranspose2d, Gdn, ResBlock};
use pcic_nn::{Init, ParamStore, Params, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-3;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Weighted sum with fixed random weights, so no gradient cancels by symmetry.
fn project(v: &Var<f64>, seed: u64) -> Var<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Var::constant(random(v.shape(), &mut rng, -1.0, 1.0));
    v.mul(&w).sum()
}

fn assert_passes(store: &mut ParamStore<f64>, f: impl Fn(&Params<f64>) -> Var<f64>) {
    let report = check_params(store, None, STEP, TOL, f);
    assert!(report.passed(0.05), "{report:#?}");
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let a = store.insert("a", random(&[2, 3, 4], &mut rng, -2.0, 2.0));
    let b = store.insert("b", random(&[2, 3, 4], &mut rng, -2.0, 2.0));
    let pos = store.insert("pos", random(&[2, 3, 4], &mut rng, 0.5, 2.0));
    assert_passes(&mut store, |p| {
        let (a, b, pos) = (&p[a], &p[b], &p[pos]);
        let t = a.add(b).mul(&a.sub(b)).sigmoid();
        let u = a.tanh().add(&b.softplus()).mul_scalar(0.7).add_scalar(0.3);
        let v = pos.sqrt().add(&pos.rsqrt()).add(&a.square());
        project(&t.add(&u).add(&v), 9).add(&a.mse(b))
    });
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let a = store.insert("a", random(&[2, 3, 2, 2], &mut rng, -1.0, 1.0));
    let b = store.insert("b", random(&[2, 2, 2, 2], &mut rng, -1.0, 1.0));
    assert_passes(&mut store, |p| {
        let cat = Var::cat(&[&p[a], &p[b]]);
        let mid = cat.narrow(1, 3).square();
        let rows = mid.channel_rows().reshape(&[3, 8]).mean();
        project(&cat, 3).add(&project(&mid, 4)).add(&rows)
    });
}

#[test]
fn channel_matmul_and_broadcasts() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let m = store.insert("m", random(&[2, 3, 4], &mut rng, -1.0, 1.0));
    let x = store.insert("x", random(&[2, 4, 5], &mut rng, -1.0, 1.0));
    let bias = store.insert("bias", random(&[2, 3, 1], &mut rng, -1.0, 1.0));
    let gain = store.insert("gain", random(&[2, 3, 1], &mut rng, -1.0, 1.0));
    assert_passes(&mut store, |p| {
        let h = p[m].channel_matmul(&p[x]).add_last(&p[bias]);
        project(&h.mul_last(&p[gain].tanh()), 5)
    });
}

#[test]
fn convolutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let x = store.insert("x", random(&[2, 2, 6, 6], &mut rng, -1.0, 1.0));
    let (c3, c5, t5) = {
        let mut init = Init::new(&mut store, &mut rng);
        (
            Conv2d::new(&mut init, "c3", 2, 3, 3, 1),
            Conv2d::new(&mut init, "c5", 3, 2, 5, 2),
            ConvTranspose2d::new(&mut init, "t5", 2, 3, 5, 2),
        )
    };
    randomize_biases(&mut store, 40);
    assert_passes(&mut store, |p| {
        let h = c3.forward(p, &p[x]);
        let d = c5.forward(p, &h);
        let u = t5.forward(p, &d);
        assert_eq!(u.shape(), &[2, 3, 6, 6]);
        project(&u, 6)
    });
}

#[test]
fn gdn_and_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let x = store.insert("x", random(&[1, 3, 4, 4], &mut rng, -2.0, 2.0));
    let (gdn, igdn) = {
        let mut init = Init::new(&mut store, &mut rng);
        (Gdn::new(&mut init, "gdn", 3, false), Gdn::new(&mut init, "igdn", 3, true))
    };
    assert_passes(&mut store, |p| project(&igdn.forward(p, &gdn.forward(p, &p[x])), 7));
}

#[test]
fn residual_and_attention_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let x = store.insert("x", random(&[1, 2, 5, 5], &mut rng, -1.0, 1.0));
    let (res, att) = {
        let mut init = Init::new(&mut store, &mut rng);
        (ResBlock::new(&mut init, "res", 2), AttentionBlock::new(&mut init, "att", 2))
    };
    randomize_biases(&mut store, 41);
    assert_passes(&mut store, |p| project(&att.forward(p, &res.forward(p, &p[x])), 8));
}

#[test]
fn gaussian_bits_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let y = store.insert("y", random(&[40], &mut rng, -4.0, 4.0));
    let mu = store.insert("mu", random(&[40], &mut rng, -1.0, 1.0));
    let sigma = store.insert("sigma", random(&[40], &mut rng, 0.2, 3.0));
    assert_passes(&mut store, |p| p[y].gaussian_bits(&p[mu], &p[sigma], 1e-9).sum());
}

#[test]
fn logistic_bits_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let lo = store.insert("lo", random(&[30], &mut rng, -6.0, 6.0));
    let gap = store.insert("gap", random(&[30], &mut rng, 0.1, 2.0));
    assert_passes(&mut store, |p| {
        let upper = p[lo].add(&p[gap]);
        upper.logistic_bits(&p[lo], 1e-9).sum()
    });
}

fn randomize_biases(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, name, _)| name.ends_with("bias"))
        .map(|(id, _, _)| id)
        .collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
    }
}
