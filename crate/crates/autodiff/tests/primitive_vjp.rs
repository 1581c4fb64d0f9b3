//! Every primitive's vector-Jacobian product against central finite
//! differences. The difference quotient here is computed from forward values
//! only, so it does not share code with the backward pass.

use pathmoe_autodiff::{EdgeIndex, ParamStore, Result, SeededRng, Tape, Tensor, Var};

const TRIALS: u64 = 100;
const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

type Build = dyn Fn(&mut Tape, &ParamStore, &mut SeededRng) -> Result<Var>;

fn random_tensor(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.uniform(lo, hi)).collect(),
    )
    .unwrap()
}

/// Contracts an arbitrary output with fixed random weights so the check
/// covers the full Jacobian, not just its row sums.
fn contract(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = SeededRng::new(seed ^ 0xabcd);
    let w = random_tensor(&mut rng, &shape, -1.0, 1.0);
    let n = w.len();
    let wv = tape.constant(w);
    let prod = tape.mul(out, wv)?;
    let flat = tape.reshape(prod, &[n])?;
    Ok(tape.sum(flat))
}

fn loss_value(build: &Build, store: &ParamStore, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let mut rng = SeededRng::new(seed);
    let out = build(&mut tape, store, &mut rng).unwrap();
    let l = contract(&mut tape, out, seed).unwrap();
    tape.scalar_value(l)
}

fn check(name: &str, shapes: &[(&str, Vec<usize>, f64, f64)], build: &Build) {
    let mut worst: f64 = 0.0;
    for seed in 0..TRIALS {
        let mut rng = SeededRng::new(1000 + seed);
        let mut store = ParamStore::new();
        for (pname, shape, lo, hi) in shapes {
            store
                .insert(*pname, random_tensor(&mut rng, shape, *lo, *hi))
                .unwrap();
        }
        let mut tape = Tape::new();
        let mut brng = SeededRng::new(seed);
        let out = build(&mut tape, &store, &mut brng).unwrap();
        let l = contract(&mut tape, out, seed).unwrap();
        let grads = tape.backward(l, &store).unwrap();

        let mut work = store.clone();
        for (pname, _, _, _) in shapes {
            let n = store.get(pname).unwrap().len();
            for k in 0..n {
                let orig = store.get(pname).unwrap().data()[k];
                work.get_mut(pname).unwrap().data_mut()[k] = orig + STEP;
                let up = loss_value(build, &work, seed);
                work.get_mut(pname).unwrap().data_mut()[k] = orig - STEP;
                let down = loss_value(build, &work, seed);
                work.get_mut(pname).unwrap().data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * STEP);
                let analytic = grads[*pname].data()[k];
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
                worst = worst.max(err);
                assert!(
                    err < TOL,
                    "{name}: seed {seed} param {pname}[{k}] analytic {analytic} numeric {numeric} err {err}"
                );
            }
        }
    }
    println!("{name}: worst relative error {worst:.3e}");
}

fn p(tape: &mut Tape, store: &ParamStore, name: &str) -> Var {
    tape.param(store, name).unwrap()
}

#[test]
fn elementwise_binary() {
    let s = vec![("a", vec![3, 2], -2.0, 2.0), ("b", vec![3, 2], 0.5, 2.0)];
    check("add", &s, &|t, st, _| {
        let (a, b) = (p(t, st, "a"), p(t, st, "b"));
        t.add(a, b)
    });
    check("sub", &s, &|t, st, _| {
        let (a, b) = (p(t, st, "a"), p(t, st, "b"));
        t.sub(a, b)
    });
    check("mul", &s, &|t, st, _| {
        let (a, b) = (p(t, st, "a"), p(t, st, "b"));
        t.mul(a, b)
    });
    check("div", &s, &|t, st, _| {
        let (a, b) = (p(t, st, "a"), p(t, st, "b"));
        t.div(a, b)
    });
}

#[test]
fn broadcasting_and_scalars() {
    let s = vec![
        ("x", vec![4, 3], -2.0, 2.0),
        ("b", vec![3], -1.0, 1.0),
        ("k", vec![], 0.5, 2.0),
    ];
    check("add_row", &s, &|t, st, _| {
        let (x, b) = (p(t, st, "x"), p(t, st, "b"));
        t.add_row(x, b)
    });
    check("mul_scalar", &s, &|t, st, _| {
        let (x, k) = (p(t, st, "x"), p(t, st, "k"));
        t.mul_scalar(x, k)
    });
    check("div_scalar", &s, &|t, st, _| {
        let (x, k) = (p(t, st, "x"), p(t, st, "k"));
        t.div_scalar(x, k)
    });
    check("scale+add_const", &s, &|t, st, _| {
        let x = p(t, st, "x");
        let y = t.scale(x, -1.7);
        Ok(t.add_const(y, 0.3))
    });
}

#[test]
fn linear_algebra() {
    let s = vec![
        ("a", vec![3, 4], -1.0, 1.0),
        ("b", vec![4, 2], -1.0, 1.0),
        ("w", vec![5, 4], -1.0, 1.0),
    ];
    check("matmul", &s, &|t, st, _| {
        let (a, b) = (p(t, st, "a"), p(t, st, "b"));
        t.matmul(a, b)
    });
    check("matmul_nt", &s, &|t, st, _| {
        let (a, w) = (p(t, st, "a"), p(t, st, "w"));
        t.matmul_nt(a, w)
    });
    let v = vec![("m", vec![3, 4], -1.0, 1.0), ("v", vec![4], -1.0, 1.0)];
    check("matvec", &v, &|t, st, _| {
        let (m, v) = (p(t, st, "m"), p(t, st, "v"));
        t.matvec(m, v)
    });
}

#[test]
fn shape_ops() {
    let s = vec![
        ("a", vec![2, 3], -1.0, 1.0),
        ("b", vec![2, 2], -1.0, 1.0),
        ("s", vec![], -1.0, 1.0),
    ];
    check("concat", &s, &|t, st, _| {
        let (a, b) = (p(t, st, "a"), p(t, st, "b"));
        t.concat(&[a, b, a])
    });
    check("slice_last", &s, &|t, st, _| {
        let a = p(t, st, "a");
        t.slice_last(a, 1, 2)
    });
    check("stack", &s, &|t, st, _| {
        let (s, a) = (p(t, st, "s"), p(t, st, "a"));
        let m = t.mean(a);
        t.stack(&[s, m, s])
    });
    check("reshape", &s, &|t, st, _| {
        let a = p(t, st, "a");
        t.reshape(a, &[3, 2])
    });
}

#[test]
fn activations() {
    let s = vec![("x", vec![3, 3], -3.0, 3.0)];
    check("relu", &s, &|t, st, _| {
        let x = p(t, st, "x");
        Ok(t.relu(x))
    });
    check("sigmoid", &s, &|t, st, _| {
        let x = p(t, st, "x");
        Ok(t.sigmoid(x))
    });
    check("softplus", &s, &|t, st, _| {
        let x = p(t, st, "x");
        Ok(t.softplus(x))
    });
    check("exp", &s, &|t, st, _| {
        let x = p(t, st, "x");
        Ok(t.exp(x))
    });
    check("normal_cdf", &s, &|t, st, _| {
        let x = p(t, st, "x");
        Ok(t.normal_cdf(x))
    });
    let pos = vec![("x", vec![3, 3], 0.2, 3.0)];
    check("log", &pos, &|t, st, _| {
        let x = p(t, st, "x");
        Ok(t.log(x))
    });
}

#[test]
fn segment_kernels() {
    let s = vec![("x", vec![6, 2], -2.0, 2.0)];
    check("gather_rows", &s, &|t, st, rng| {
        let x = p(t, st, "x");
        let idx = (0..8).map(|_| rng.below(6)).collect();
        t.gather_rows(x, idx)
    });
    check("scatter_add_rows", &s, &|t, st, rng| {
        let x = p(t, st, "x");
        let idx = (0..6).map(|_| rng.below(4)).collect();
        t.scatter_add_rows(x, idx, 4)
    });
    check("segment_max", &s, &|t, st, rng| {
        let x = p(t, st, "x");
        let idx = (0..6).map(|_| rng.below(3)).collect();
        t.segment_max(x, idx, 3)
    });
    let e = vec![
        ("h", vec![4, 3], -1.0, 1.0),
        ("r", vec![3, 3], -1.0, 1.0),
        ("a", vec![7], 0.05, 0.95),
    ];
    check("edge_message_sum", &e, &|t, st, rng| {
        let (h, r, a) = (p(t, st, "h"), p(t, st, "r"), p(t, st, "a"));
        let edges = EdgeIndex {
            src: (0..7).map(|_| rng.below(4)).collect(),
            rel: (0..7).map(|_| rng.below(3)).collect(),
            dst: (0..7).map(|_| rng.below(5)).collect(),
            out_rows: 5,
        };
        t.edge_message_sum(h, r, a, edges)
    });
}

#[test]
fn reductions() {
    let s = vec![
        ("x", vec![5], -2.0, 2.0),
        ("m", vec![3, 4], -1.0, 1.0),
        ("v", vec![4], 0.2, 1.0),
    ];
    check("softmax", &s, &|t, st, _| {
        let x = p(t, st, "x");
        t.softmax(x, 0.7)
    });
    check("logsumexp", &s, &|t, st, _| {
        let x = p(t, st, "x");
        Ok(t.logsumexp(x))
    });
    check("mean", &s, &|t, st, _| {
        let m = p(t, st, "m");
        Ok(t.mean(m))
    });
    check("mean_rows", &s, &|t, st, _| {
        let m = p(t, st, "m");
        t.mean_rows(m)
    });
    check("std", &s, &|t, st, _| {
        let m = p(t, st, "m");
        Ok(t.std(m))
    });
    check("sum", &s, &|t, st, _| {
        let m = p(t, st, "m");
        Ok(t.sum(m))
    });
    check("cosine_rows", &s, &|t, st, _| {
        let (m, v) = (p(t, st, "m"), p(t, st, "v"));
        t.cosine_rows(m, v)
    });
}

#[test]
fn two_layer_mlp_with_sigmoid_loss() {
    let s = vec![
        ("w1", vec![6, 3], -1.0, 1.0),
        ("b1", vec![6], -0.5, 0.5),
        ("w2", vec![1, 6], -1.0, 1.0),
        ("x", vec![4, 3], -1.0, 1.0),
    ];
    check("mlp", &s, &|t, st, _| {
        let (w1, b1, w2, x) = (
            p(t, st, "w1"),
            p(t, st, "b1"),
            p(t, st, "w2"),
            p(t, st, "x"),
        );
        let h = t.matmul_nt(x, w1)?;
        let h = t.add_row(h, b1)?;
        let h = t.relu(h);
        let o = t.matmul_nt(h, w2)?;
        Ok(t.sigmoid(o))
    });
}
