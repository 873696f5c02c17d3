//! Central finite differences against the tape's reverse pass.

use ahnet::nets::{build_ahnet, build_mcgcn, Mode, NetConfig, ParamStore};
use ahnet::objectives::{FocalMode, FocalSpec};
use ahnet::tensor::autograd::{Exec, Gradients, LossSpec, Tape, Var};
use ahnet::tensor::{ConvSpec, PoolSpec, Scalar, Tensor};
use ahnet::ModelGraph;
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Params<T> = IndexMap<String, Tensor<T>>;

/// Finite-difference step and the relative error allowed at that precision.
pub trait Precision: Scalar {
    const EPS: f64;
    const TOL: f64;
}

impl Precision for f32 {
    const EPS: f64 = 1e-2;
    const TOL: f64 = 1e-2;
}

impl Precision for f64 {
    const EPS: f64 = 1e-6;
    const TOL: f64 = 1e-5;
}

fn rand<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::<f64>::uniform(shape, -1.0, 1.0, rng).cast()
}

/// Entries drawn away from zero, so ReLU and max-pool kinks sit further from
/// each probe than the step.
fn rand_off_zero<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.2..1.0);
            T::from_f64(if rng.gen_bool(0.5) { m } else { -m })
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), v).unwrap()
}

/// Loss value and gradients for a given set of tensors.
type Eval<'a, T> = Box<dyn Fn(&Params<T>) -> (f64, Gradients<T>) + 'a>;

/// Records `f` on a fresh tape with every tensor as a trainable parameter.
fn on_tape<'a, T: Scalar>(f: impl Fn(&mut Tape<T>, &IndexMap<String, Var>) -> Var + 'a) -> Eval<'a, T> {
    Box::new(move |p: &Params<T>| {
        let mut tape = Tape::<T>::new();
        let vars = p.iter().map(|(k, t)| (k.clone(), tape.param(k, t, true))).collect();
        let l = f(&mut tape, &vars);
        (tape.value(&l).item().as_f64(), tape.backward(l).unwrap())
    })
}

/// Compares the analytic gradient with central differences of `reference`
/// on up to `probes` entries per tensor. The error is the norm of the
/// difference over the norm of the larger of the two sampled gradient
/// vectors, floored at a thousandth of the norm over every probe so tensors
/// whose gradient is numerically zero do not divide noise by noise.
fn compare<T: Scalar, R: Scalar>(
    what: &str,
    params: &Params<T>,
    probes: usize,
    analytic: &Gradients<T>,
    reference: &Params<R>,
    eps: f64,
    tol: f64,
    eval: &Eval<'_, R>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut rows = Vec::new();
    for (name, t) in params {
        let g = analytic.get(name).unwrap_or_else(|| panic!("{what}: no gradient for {name}"));
        assert_eq!(g.shape(), t.shape(), "{what}: gradient shape of {name}");
        let idx: Vec<usize> = if t.len() <= probes {
            (0..t.len()).collect()
        } else {
            (0..probes).map(|_| rng.gen_range(0..t.len())).collect()
        };
        let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
        let mut p = reference.clone();
        for &i in &idx {
            let x = reference[name].data()[i];
            p.get_mut(name).unwrap().data_mut()[i] = R::from_f64(x.as_f64() + eps);
            let up = eval(&p).0;
            p.get_mut(name).unwrap().data_mut()[i] = R::from_f64(x.as_f64() - eps);
            let down = eval(&p).0;
            p.get_mut(name).unwrap().data_mut()[i] = x;
            let num = (up - down) / (2.0 * eps);
            let a = g.data()[i].as_f64();
            diff += (a - num) * (a - num);
            an += a * a;
            nn += num * num;
        }
        rows.push((name, idx.len(), diff.sqrt(), an.max(nn).sqrt()));
    }
    let total = rows.iter().map(|r| r.3 * r.3).sum::<f64>().sqrt();
    for (name, n, diff, scale) in rows {
        let floor = (1e-3 * total).max(1e-12);
        let rel = diff / scale.max(floor);
        assert!(
            rel < tol,
            "{what} [{}]: {name} relative error {rel:.3e} over {n} probes (norm {scale:.3e})",
            T::NAME
        );
    }
}

/// Finite differences at the precision under test.
fn check<T: Precision>(what: &str, params: &Params<T>, probes: usize, eval: Eval<'_, T>) {
    let (_, grads) = eval(params);
    compare(what, params, probes, &grads, params, T::EPS, T::TOL, &eval);
}

fn weighted<T: Scalar>(tape: &mut Tape<T>, y: Var, seed: u64) -> Var {
    let shape = tape.value(&y).shape().to_vec();
    let w = rand(&shape, &mut ChaCha8Rng::seed_from_u64(seed));
    tape.loss(y, LossSpec::WeightedSum(w)).unwrap()
}

fn params<T: Scalar>(items: &[(&str, Tensor<T>)]) -> Params<T> {
    items.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

pub fn op_suite<T: Precision>() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    for (k, s, p) in [([3, 3], [1, 1], [1, 1]), ([3, 2], [2, 1], [0, 1]), ([1, 5], [1, 1], [0, 2])] {
        let spec = ConvSpec::new(2, 3, &k, &s, &p).unwrap();
        let ps = params(&[
            ("x", rand::<T>(&[2, 2, 5, 6], &mut rng)),
            ("w", rand(&[3, 2, k[0], k[1]], &mut rng)),
            ("b", rand(&[3], &mut rng)),
        ]);
        check("conv2d", &ps, 20, on_tape(|t, v| {
            let y = t.conv(&v["x"], &v["w"], Some(&v["b"]), &spec).unwrap();
            weighted(t, y, 2)
        }));
    }
    for (k, s, p) in [([3, 3, 1], [1, 1, 1], [1, 1, 0]), ([1, 1, 3], [1, 1, 1], [0, 0, 1]), ([1, 1, 1], [2, 2, 1], [0, 0, 0])] {
        let spec = ConvSpec::new(2, 2, &k, &s, &p).unwrap();
        let ps = params(&[
            ("x", rand::<T>(&[1, 2, 4, 5, 3], &mut rng)),
            ("w", rand(&[2, 2, k[0], k[1], k[2]], &mut rng)),
        ]);
        check("conv3d", &ps, 20, on_tape(|t, v| {
            let y = t.conv(&v["x"], &v["w"], None, &spec).unwrap();
            weighted(t, y, 3)
        }));
    }

    let ps = params(&[
        ("x", rand::<T>(&[3, 2, 3, 4], &mut rng)),
        ("gamma", rand(&[2], &mut rng)),
        ("beta", rand(&[2], &mut rng)),
    ]);
    for train in [true, false] {
        let rm = rand::<T>(&[2], &mut rng);
        let rv = Tensor::full(&[2], T::from_f64(1.5));
        check(if train { "batchnorm-train" } else { "batchnorm-infer" }, &ps, 24, on_tape(|t, v| {
            let (y, _) = t.batchnorm(&v["x"], &v["gamma"], &v["beta"], &rm, &rv, train).unwrap();
            weighted(t, y, 4)
        }));
    }

    let ps = params(&[("x", rand_off_zero::<T>(&[2, 3, 4, 2], &mut rng))]);
    check("relu", &ps, 48, on_tape(|t, v| {
        let y = t.relu(&v["x"]).unwrap();
        weighted(t, y, 5)
    }));

    let ps = params(&[("a", rand::<T>(&[2, 3, 4], &mut rng)), ("b", rand(&[2, 3, 4], &mut rng))]);
    check("add", &ps, 24, on_tape(|t, v| {
        let y = t.add(&v["a"], &v["b"]).unwrap();
        weighted(t, y, 6)
    }));

    let ps = params(&[("a", rand::<T>(&[2, 1, 3, 3], &mut rng)), ("b", rand(&[2, 2, 3, 3], &mut rng))]);
    check("concat", &ps, 36, on_tape(|t, v| {
        let y = t.concat(&[v["a"], v["b"]]).unwrap();
        weighted(t, y, 7)
    }));

    // Distinct well-separated values keep every window's maximum unique.
    let distinct = |shape: &[usize], rng: &mut ChaCha8Rng| {
        let n: usize = shape.iter().product();
        let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
        for i in (1..n).rev() {
            v.swap(i, rng.gen_range(0..=i));
        }
        Tensor::from_vec(shape.to_vec(), v.into_iter().map(T::from_f64).collect()).unwrap()
    };
    let pool2 = PoolSpec::with_pad(&[3, 3], &[2, 2], &[1, 1]).unwrap();
    let ps = params(&[("x", distinct(&[1, 2, 5, 5], &mut rng))]);
    check("maxpool2d", &ps, 50, on_tape(|t, v| {
        let y = t.maxpool(&v["x"], &pool2).unwrap();
        weighted(t, y, 8)
    }));
    let pool3 = PoolSpec::new(&[1, 1, 2], &[1, 1, 2]).unwrap();
    let ps = params(&[("x", distinct(&[1, 2, 3, 3, 4], &mut rng))]);
    check("maxpool3d-z", &ps, 72, on_tape(|t, v| {
        let y = t.maxpool(&v["x"], &pool3).unwrap();
        weighted(t, y, 9)
    }));

    let ps = params(&[("x", rand::<T>(&[1, 2, 3, 2], &mut rng))]);
    check("upsample2d", &ps, 12, on_tape(|t, v| {
        let y = t.upsample(&v["x"], &[6, 5]).unwrap();
        weighted(t, y, 10)
    }));
    let ps = params(&[("x", rand::<T>(&[1, 1, 2, 3, 2], &mut rng))]);
    check("upsample3d", &ps, 12, on_tape(|t, v| {
        let y = t.upsample(&v["x"], &[4, 6, 3]).unwrap();
        weighted(t, y, 11)
    }));
}

pub fn loss_suite<T: Precision>() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let target: Tensor<T> = rand(&[2, 1, 3, 3], &mut rng).map(|v| v * T::from_f64(3.0));
    let ps = params(&[("x", rand::<T>(&[2, 1, 3, 3], &mut rng))]);
    check("l2", &ps, 18, on_tape(|t, v| {
        t.loss(v["x"], LossSpec::L2 { target: target.clone() }).unwrap()
    }));
    // Errors of order 1..10 put the squared error inside (1, D_max).
    let far: Tensor<T> = rand_off_zero(&[2, 1, 3, 3], &mut rng).map(|v| v * T::from_f64(4.0));
    let ps = params(&[("x", far)]);
    let zero = Tensor::zeros(&[2, 1, 3, 3]);
    for mode in [FocalMode::PerVoxel, FocalMode::BatchScalar] {
        check("focal-l2", &ps, 18, on_tape(|t, v| {
            let spec = FocalSpec::new(2.0, 100.0).unwrap();
            t.loss(v["x"], LossSpec::FocalL2 { target: zero.clone(), spec, mode })
                .unwrap()
        }));
    }
    let labels: Vec<usize> = (0..2 * 4 * 3).map(|i| (i * 7 + 1) % 3).collect();
    let ps = params(&[("x", rand::<T>(&[2, 3, 4, 3], &mut rng))]);
    for weights in [None, Some(vec![T::from_f64(0.5), T::from_f64(1.0), T::from_f64(2.0)])] {
        check("cross-entropy", &ps, 24, on_tape(|t, v| {
            t.loss(
                v["x"],
                LossSpec::CrossEntropy {
                    labels: labels.clone(),
                    class_weights: weights.clone(),
                },
            )
            .unwrap()
        }));
        check("focal-ce", &ps, 24, on_tape(|t, v| {
            t.loss(
                v["x"],
                LossSpec::FocalCe {
                    labels: labels.clone(),
                    gamma: 2.0,
                    class_weights: weights.clone(),
                },
            )
            .unwrap()
        }));
    }
}

/// Both desk networks in batch-statistics mode on tiny inputs. Only the
/// parameters are perturbed, with a few probes per tensor.
pub fn network_suite<T: Precision>(probes: usize) {
    let cfg = NetConfig::desk();
    let g2 = build_mcgcn(&cfg, 3).unwrap();
    let (g3, _) = build_ahnet(&cfg, 4, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (what, g, shape) in [("mcgcn", &g2, vec![2, 3, 6, 6]), ("ahnet", &g3, vec![2, 1, 16, 16, 8])] {
        // Biases and scales start at exact constants, which on inputs this
        // small leaves dead channels sitting right on a ReLU kink. Drawing
        // them moves the check to a generic point.
        let mut store: ParamStore<T> = g.params.cast();
        for name in store.params().keys().cloned().collect::<Vec<_>>() {
            let t = &store.params()[&name];
            if t.shape().len() == 1 {
                let v = rand_off_zero::<T>(t.shape(), &mut rng);
                let v = if name.ends_with(".weight") { v.map(|a| T::from_f64(1.0 + 0.5 * a.as_f64())) } else { v };
                store.assign(&name, v).unwrap();
            }
        }
        let x: Tensor<T> = rand(&shape, &mut rng);
        let (_, grads) = network_eval(g, &store, &x)(store.params());
        // The reference derivative always comes from 64-bit differences at
        // the same point: 32-bit differences through a deep stack of kinks
        // measure rounding rather than the derivative.
        let wide: ParamStore<f64> = store.cast();
        let xw: Tensor<f64> = x.cast();
        let eval = network_eval(g, &wide, &xw);
        compare(what, store.params(), probes, &grads, wide.params(), 1e-6, T::TOL, &eval);
    }
}

fn network_eval<'a, T: Scalar>(g: &'a ModelGraph, store: &'a ParamStore<T>, x: &'a Tensor<T>) -> Eval<'a, T> {
    Box::new(move |p: &Params<T>| {
        let mut s = store.clone();
        for (k, v) in p {
            s.assign(k, v.clone()).unwrap();
        }
        let mut tape = Tape::<T>::new();
        let input = tape.constant(x.clone());
        let out = g.forward(&s, &mut tape, input, Mode::train(), false).unwrap().output;
        let l = weighted(&mut tape, out, 12);
        (tape.value(&l).item().as_f64(), tape.backward(l).unwrap())
    })
}
