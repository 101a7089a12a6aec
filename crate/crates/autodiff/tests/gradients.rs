use cardio_autodiff::gradcheck::{check_inputs, check_params};
use cardio_autodiff::layers::{attention, Conv1d, LayerNorm, Linear, MultiHeadAttention};
use cardio_autodiff::{Graph, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0, rng)
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.2..2.0)).collect()).unwrap()
}

/// Reduce any tensor to a scalar with a fixed random projection so that every
/// output element contributes a distinct weight.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let w = g.constant(Tensor::uniform(shape, 1.0, &mut rng));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn assert_check(name: &str, inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let report = check_inputs(inputs, f, EPS).unwrap();
    assert!(
        report.passes(TOL),
        "{name}: worst {:?}",
        report.worst()
    );
}

#[test]
fn elementwise_and_reduction_primitives() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]);
        let col = rand_tensor(&mut rng, &[3, 1]);
        let row = rand_tensor(&mut rng, &[4]);
        let pos = positive(&mut rng, &[3, 4]);

        assert_check("add", &[a.clone(), row.clone()], |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, 1)
        });
        assert_check("sub", &[a.clone(), col.clone()], |g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y, 2)
        });
        assert_check("mul", &[a.clone(), b.clone()], |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 3)
        });
        assert_check("div", &[a.clone(), pos.clone()], |g, v| {
            let y = g.div(v[0], v[1])?;
            project(g, y, 4)
        });
        assert_check("unary chain", &[a.clone()], |g, v| {
            let x = g.gelu(v[0]);
            let s = g.sigmoid(x);
            let sp = g.softplus(v[0]);
            let e = g.exp(sp);
            let q = g.square(s);
            let y = g.add(q, e)?;
            let y = g.scale(y, 0.7);
            let y = g.add_scalar(y, 0.1);
            let y = g.neg(y);
            project(g, y, 5)
        });
        assert_check("log/sqrt/pow", &[pos.clone()], |g, v| {
            let l = g.log(v[0]);
            let r = g.sqrt(v[0]);
            let p = g.powf(v[0], 2.5);
            let y = g.add(l, r)?;
            let y = g.add(y, p)?;
            project(g, y, 6)
        });
        assert_check("relu", &[a.clone()], |g, v| {
            let y = g.relu(v[0]);
            project(g, y, 7)
        });
        assert_check("layer_norm", &[a.clone()], |g, v| {
            let y = g.layer_norm(v[0], 1e-5);
            project(g, y, 8)
        });
        assert_check("softmax", &[a.clone()], |g, v| {
            let y = g.softmax(v[0]);
            project(g, y, 9)
        });
        assert_check("mean/sum/mean_axis", &[a.clone()], |g, v| {
            let m0 = g.mean_axis(v[0], 0)?;
            let m1 = g.mean_axis(v[0], 1)?;
            let s0 = project(g, m0, 10)?;
            let s1 = project(g, m1, 11)?;
            let m = g.mean(v[0]);
            let s = g.sum(v[0]);
            let t = g.add(s0, s1)?;
            let t = g.add(t, m)?;
            g.add(t, s)
        });
        assert_check("concat/slice/transpose/reshape/upsample", &[a.clone(), b.clone()], |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let s = g.slice(c, 1, 2, 7)?;
            let t = g.transpose(s)?;
            let r = g.reshape(t, &[3, 5])?;
            let u = g.upsample(r, 3)?;
            project(g, u, 12)
        });
        assert_check("matmul", &[a.clone(), rand_tensor(&mut rng, &[4, 2])], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 13)
        });
        let x = rand_tensor(&mut rng, &[2, 23]);
        let w = rand_tensor(&mut rng, &[3, 2, 5]);
        let bias = rand_tensor(&mut rng, &[3]);
        for (stride, pad) in [(1, 0), (1, 2), (4, 2), (3, 0)] {
            assert_check("conv1d", &[x.clone(), w.clone(), bias.clone()], |g, v| {
                let y = g.conv1d(v[0], v[1], Some(v[2]), stride, pad)?;
                project(g, y, 14)
            });
        }
    }
}

#[test]
fn attention_gradients() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let q = rand_tensor(&mut rng, &[3, 4]);
        let k = rand_tensor(&mut rng, &[5, 4]);
        let v = rand_tensor(&mut rng, &[5, 4]);
        assert_check("attention", &[q, k, v], |g, x| {
            let y = attention(g, x[0], x[1], x[2], 2)?;
            project(g, y, 15)
        });
    }
}

#[test]
fn layer_parameter_gradients() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let mut store = ParamStore::new();
        let conv = Conv1d::new(&mut store, "conv", 2, 4, 7, 4, 3, &mut rng).unwrap();
        let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
        let mha = MultiHeadAttention::new(&mut store, "mha", 4, 2, &mut rng).unwrap();
        let lin = Linear::new(&mut store, "lin", 4, 3, &mut rng).unwrap();
        // perturb layer-norm affine away from its identity initialisation
        for name in ["ln.gamma", "ln.beta"] {
            let id = store.id(name).unwrap();
            store.get_mut(id).value = rand_tensor(&mut rng, &[4]);
        }
        let x = rand_tensor(&mut rng, &[2, 40]);
        let report = check_params(
            &mut store,
            None,
            |g, s| {
                let xv = g.constant(x.clone());
                let h = conv.forward(g, s, xv)?;
                let h = g.gelu(h);
                let tokens = g.transpose(h)?;
                let n = ln.forward(g, s, tokens)?;
                let a = mha.forward(g, s, n)?;
                let r = g.add(tokens, a)?;
                let o = lin.forward(g, s, r)?;
                project(g, o, 16)
            },
            EPS,
        )
        .unwrap();
        assert!(report.passes(TOL), "seed {seed}: {:?}", report.worst());
    }
}

#[test]
fn forward_is_deterministic() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let conv = Conv1d::new(&mut store, "c", 1, 3, 5, 2, 2, &mut rng).unwrap();
        let x = rand_tensor(&mut rng, &[1, 64]);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = conv.forward(&mut g, &store, xv).unwrap();
        let y = g.softmax(y);
        g.data(y).to_vec()
    };
    let a = build();
    let b = build();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}
