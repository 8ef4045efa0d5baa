//! Naive reference implementations and a finite-difference harness shared
//! by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unipool::gradcheck::relative_error;
use unipool::layers::ForwardCtx;
use unipool::pooling::{B1Init, PoolLayer, PoolMethod};
use unipool::{ParamStore, Result, Tape, Tensor, Var};

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), 1.0, rng)
}

/// Seven nested loops: batch, output channel, output row, output column,
/// input channel of the group, kernel row, kernel column.
pub fn conv2d_naive(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Tensor<f64> {
    let [n, cin, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [cout, gin, kh, kw] = <[usize; 4]>::try_from(k.shape()).unwrap();
    let gout = cout / groups;
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    assert_eq!(gin * groups, cin);
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for o in 0..cout {
            let g = o / gout;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..gin {
                        for u in 0..kh {
                            for v in 0..kw {
                                let r = (i * stride + u) as isize - padding as isize;
                                let s = (j * stride + v) as isize - padding as isize;
                                if r < 0 || s < 0 || r >= h as isize || s >= w as isize {
                                    continue;
                                }
                                acc += x.at(&[b, g * gin + c, r as usize, s as usize])
                                    * k.at(&[o, c, u, v]);
                            }
                        }
                    }
                    out[((b * cout + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out).unwrap()
}

pub fn matmul_naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

#[derive(Clone, Copy, Debug)]
pub enum NaivePool {
    Max,
    Avg,
    Stride(usize, usize),
}

/// Disjoint `size`×`size` blocks over the top-left ⌊H/S⌋·S × ⌊W/S⌋·S region;
/// max ties resolve to the first element in row-major order.
pub fn pool_naive(x: &Tensor<f64>, size: usize, kind: NaivePool) -> Tensor<f64> {
    let [n, c, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            for p in 0..oh {
                for q in 0..ow {
                    let at = |r: usize, s: usize| x.at(&[b, ch, p * size + r, q * size + s]);
                    out.push(match kind {
                        NaivePool::Max => {
                            let mut best = at(0, 0);
                            for r in 0..size {
                                for s in 0..size {
                                    if at(r, s) > best {
                                        best = at(r, s);
                                    }
                                }
                            }
                            best
                        }
                        NaivePool::Avg => {
                            let mut acc = 0.0;
                            for r in 0..size {
                                for s in 0..size {
                                    acc += at(r, s);
                                }
                            }
                            acc / (size * size) as f64
                        }
                        NaivePool::Stride(r, s) => at(r, s),
                    });
                }
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).unwrap()
}

/// Largest entrywise `|a − b|`.
pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Outcome of comparing backward gradients with central differences.
#[derive(Debug, Clone, Copy, Default)]
pub struct FdReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
}

impl FdReport {
    pub fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }
}

/// Scalar probe `Σ out ⊙ R` with a fixed random `R`, so every output
/// element contributes a distinct weight to the gradient.
pub fn probe_loss(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random_tensor(&mut rng, tape.shape(out));
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    tape.sum(prod)
}

/// Checks the gradient of `build(inputs)` with respect to every input.
/// Elements whose ±h probes switch a ReLU or max branch are skipped.
pub fn check_inputs(
    inputs: &[Tensor<f64>],
    h: f64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> FdReport {
    let eval = |vals: &[Tensor<f64>]| -> (f64, u64) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        let loss = probe_loss(&mut tape, out, 99).unwrap();
        (tape.value(loss).item().unwrap(), tape.branch_signature())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let loss = probe_loss(&mut tape, out, 99).unwrap();
    let base_sig = tape.branch_signature();
    let grads = tape.backward(loss).unwrap();
    let mut report = FdReport::default();
    let mut vals = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(&tape, v);
        for e in 0..vals[k].numel() {
            let orig = vals[k].data()[e];
            vals[k].data_mut()[e] = orig + h;
            let (lp, sp) = eval(&vals);
            vals[k].data_mut()[e] = orig - h;
            let (lm, sm) = eval(&vals);
            vals[k].data_mut()[e] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            report.checked += 1;
            report.max_rel_err = report
                .max_rel_err
                .max(relative_error(analytic.data()[e], numeric));
        }
    }
    report
}

/// Loss, branch signature and, on request, input and parameter gradients.
type LayerEval = (f64, u64, Option<(Tensor<f64>, Vec<Tensor<f64>>)>);

/// Gradients of a realized pooling layer with respect to its input and
/// every parameter, in training mode. The site is the whole map when
/// `global`, otherwise 2×2 blocks.
pub fn check_pool_layer(
    method: PoolMethod,
    global: bool,
    shape: [usize; 4],
    seed: u64,
    step: f64,
) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [n, c, h, w] = shape;
    let size = if global { h } else { 2 };
    let spec = method.at_site(size, global, seed.is_multiple_of(2));
    let mut store = ParamStore::<f64>::new();
    let layer =
        PoolLayer::build(&spec, &mut store, "p", [c, h, w], B1Init::Default, &mut rng).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.value_mut(id);
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let x = random_tensor(&mut rng, &[n, c, h, w]);
    let run = |store: &ParamStore<f64>, x: &Tensor<f64>, grads: bool| -> LayerEval {
        let mut tape = Tape::new();
        let (xv, out) = {
            let mut ctx = ForwardCtx::new(&mut tape, store, true);
            let xv = ctx.tape.leaf(x.clone());
            (xv, layer.forward(&mut ctx, xv).unwrap().output)
        };
        let loss = probe_loss(&mut tape, out, 5).unwrap();
        let value = tape.value(loss).item().unwrap();
        let sig = tape.branch_signature();
        if !grads {
            return (value, sig, None);
        }
        let g = tape.backward(loss).unwrap();
        let mut s = store.clone();
        s.zero_grad();
        s.accumulate_grads(&tape, &g);
        let pg = s.ids().map(|id| s.grad(id).clone()).collect();
        (value, sig, Some((g.get(&tape, xv), pg)))
    };
    let (_, base, grads) = run(&store, &x, true);
    let (gx, gp) = grads.unwrap();
    let mut report = FdReport::default();
    let mut probe = |f: &mut dyn FnMut(f64) -> (f64, u64), analytic: f64, orig: f64| {
        let (lp, sp) = f(orig + step);
        let (lm, sm) = f(orig - step);
        f(orig);
        if sp != base || sm != base {
            report.skipped += 1;
            return;
        }
        report.checked += 1;
        report.max_rel_err = report
            .max_rel_err
            .max(relative_error(analytic, (lp - lm) / (2.0 * step)));
    };
    let mut xp = x.clone();
    for e in 0..x.numel() {
        let orig = x.data()[e];
        probe(
            &mut |v| {
                xp.data_mut()[e] = v;
                let (l, s, _) = run(&store, &xp, false);
                (l, s)
            },
            gx.data()[e],
            orig,
        );
    }
    let ids: Vec<_> = store.ids().collect();
    for (k, &id) in ids.iter().enumerate() {
        for e in 0..store.value(id).numel() {
            let orig = store.value(id).data()[e];
            let mut sp = store.clone();
            probe(
                &mut |v| {
                    sp.value_mut(id).data_mut()[e] = v;
                    let (l, s, _) = run(&sp, &x, false);
                    (l, s)
                },
                gp[k].data()[e],
                orig,
            );
        }
    }
    report
}

/// Worst deviation of grouped, strided, padded `conv2d` from the naive loop
/// over `cases` random configurations.
pub fn conv2d_oracle_error(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let groups = [1, 1, 2, 3][rng.gen_range(0..4)];
        let gin = rng.gen_range(1..4);
        let gout = rng.gen_range(1..4);
        let (kh, kw) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let stride = rng.gen_range(1..3);
        let padding = rng.gen_range(0..2);
        let h = rng.gen_range(kh.max(2)..9);
        let w = rng.gen_range(kw.max(2)..9);
        let n = rng.gen_range(1..3);
        let x = random_tensor(&mut rng, &[n, gin * groups, h, w]);
        let k = random_tensor(&mut rng, &[gout * groups, gin, kh, kw]);
        let mut tape = Tape::new();
        let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
        let y = tape
            .conv2d_grouped(xv, kv, stride, padding, groups)
            .unwrap();
        worst = worst.max(max_abs_diff(
            tape.value(y),
            &conv2d_naive(&x, &k, stride, padding, groups),
        ));
    }
    worst
}

/// Worst deviation of `matmul` from the triple loop over `cases` random shapes.
pub fn matmul_oracle_error(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (m, k, n) = (
            rng.gen_range(1..40),
            rng.gen_range(1..40),
            rng.gen_range(1..40),
        );
        let a = random_tensor(&mut rng, &[m, k]);
        let b = random_tensor(&mut rng, &[k, n]);
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let y = tape.matmul(av, bv).unwrap();
        worst = worst.max(max_abs_diff(tape.value(y), &matmul_naive(&a, &b)));
    }
    worst
}

/// Worst deviation of max, average and stride pooling from the block loops
/// over `cases` random shapes. Every fourth input is quantized so that max
/// pooling meets ties, which must resolve to the first element.
pub fn pool_oracle_error(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let size = rng.gen_range(1..5);
        let (h, w) = (rng.gen_range(size..14), rng.gen_range(size..14));
        let shape = [rng.gen_range(1..3), rng.gen_range(1..4), h, w];
        let mut x = random_tensor(&mut rng, &shape);
        if case % 4 == 0 {
            for v in x.data_mut() {
                *v = (*v * 2.0).round();
            }
        }
        let offset = (rng.gen_range(0..size), rng.gen_range(0..size));
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let max = tape.max_pool(xv, size).unwrap();
        let avg = tape.avg_pool(xv, size).unwrap();
        let stride = tape.stride_pool(xv, size, offset).unwrap();
        for (got, kind) in [
            (max, NaivePool::Max),
            (avg, NaivePool::Avg),
            (stride, NaivePool::Stride(offset.0, offset.1)),
        ] {
            worst = worst.max(max_abs_diff(tape.value(got), &pool_naive(&x, size, kind)));
        }
    }
    worst
}
