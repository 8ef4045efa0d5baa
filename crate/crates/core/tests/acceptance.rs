//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Each criterion runs in isolation; a panic counts as a failure and the
//! measured wall time is checked against the criterion's budget. Criteria in
//! `KNOWN_FAILURES` still print their honest result but do not fail the test.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::{
    check_inputs, check_pool_layer, conv2d_oracle_error, matmul_oracle_error, pool_oracle_error,
    random_tensor, FdReport,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unipool::analysis::{categorize, Category, SiteWeights, Thresholds};
use unipool::data::{
    load_binary_dir, load_cifar10, synthetic_split, write_binary_dir, Dataset, SyntheticSpec,
    CIFAR10_TEST_FILE, CIFAR10_TRAIN_FILES,
};
use unipool::layers::ForwardCtx;
use unipool::models::{build_model, Architecture, ModelConfig};
use unipool::pooling::{B1Init, B1Spec, GateGranularity, PoolMethod, UniversalPool};
use unipool::train::{grad_check, randomize_zero_params, TrainConfig, Trainer, GRAD_CHECK_STEP};
use unipool::{ParamStore, Precision, Tape, Tensor};

type Outcome = std::result::Result<String, String>;

/// Criteria that cannot pass as stated, with the reason printed next to them.
const KNOWN_FAILURES: &[(usize, &str)] = &[(
    4,
    "a logit gap of 10 leaves (S^2 - 1) e^-10 = 1.4e-4 of weight off target at S = 2, so the 1e-4 bound only holds for block ranges below 0.73",
)];

const FD_STEP: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-5;

fn pass_if(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// `(label, spec, global)` for every B1 variant;
/// global variants span the whole map.
fn b1_variants() -> Vec<(&'static str, B1Spec, bool)> {
    vec![
        ("local-fc1", B1Spec::local_fc(1), false),
        ("local-fc2", B1Spec::local_fc(2), false),
        ("global-fc1", B1Spec::global_fc(1), true),
        ("global-fc2", B1Spec::global_fc(2), true),
        ("global-conv", B1Spec::global_conv(), true),
    ]
}

fn universal(
    spec: &B1Spec,
    size: usize,
    shape: [usize; 3],
    init: B1Init,
    rng: &mut ChaCha8Rng,
) -> (ParamStore<f64>, UniversalPool) {
    let mut store = ParamStore::new();
    let u = UniversalPool::new(&mut store, "u", spec, size, shape, init, rng).unwrap();
    (store, u)
}

/// Pooled output and π of a universal module in evaluation mode.
fn pool_eval(
    u: &UniversalPool,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
) -> (Tensor<f64>, Tensor<f64>) {
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::new(&mut tape, store, false);
    let xv = ctx.tape.constant(x.clone());
    let out = u.forward(&mut ctx, xv).unwrap();
    let pi = out.weights.expect("universal pooling returns weights");
    (tape.value(out.output).clone(), tape.value(pi).clone())
}

fn reference_pool(
    x: &Tensor<f64>,
    op: impl Fn(&mut Tape<f64>, unipool::Var) -> unipool::Result<unipool::Var>,
) -> Tensor<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = op(&mut tape, xv).unwrap();
    tape.value(y).clone()
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.max_abs_diff(b).unwrap()
}

fn block_sum_error(pi: &Tensor<f64>, size: usize) -> f64 {
    SiteWeights {
        site: 0,
        name: "pi".into(),
        size,
        weights: pi.clone(),
        features: pi.clone(),
    }
    .max_block_sum_error()
}

fn c1_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let variants = b1_variants();
    let mut worst: f64 = 0.0;
    for t in 0..1000 {
        let size = [2, 4][t % 2];
        let kind = (t / 2) % (variants.len() + 1);
        let n = rng.gen_range(1..3);
        let c = rng.gen_range(1..4);
        let pi = if kind == variants.len() {
            // Raw block softmax on wide logits, with cropped borders.
            let (h, w) = (
                size * rng.gen_range(1..4) + rng.gen_range(0..2),
                size * rng.gen_range(1..4) + rng.gen_range(0..2),
            );
            let logits = random_tensor(&mut rng, &[n, c, h, w]).map(|v| 30.0 * v);
            reference_pool(&logits, |tape, x| tape.block_softmax(x, size))
        } else {
            let (_, spec, global) = &variants[kind];
            let spec = spec.clone().with_shared(t % 3 == 0);
            let (h, w) = if *global {
                (size, size)
            } else {
                (
                    size * rng.gen_range(1..4) + rng.gen_range(0..2),
                    size * rng.gen_range(1..4) + rng.gen_range(0..2),
                )
            };
            let (mut store, u) = universal(&spec, size, [c, h, w], B1Init::Default, &mut rng);
            for id in store.ids().collect::<Vec<_>>() {
                for v in store.value_mut(id).data_mut() {
                    *v += rng.gen_range(-1.0..1.0);
                }
            }
            let x = random_tensor(&mut rng, &[n, c, h, w]);
            pool_eval(&u, &store, &x).1
        };
        worst = worst.max(block_sum_error(&pi, size));
    }
    pass_if(
        worst <= 1e-12,
        format!("1000 tensors, max |block sum - 1| = {worst:.2e}"),
    )
}

fn c2_average_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let variants = b1_variants();
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let (_, spec, global) = &variants[i % variants.len()];
        let spec = spec.clone().with_shared(i % 2 == 1);
        let size = if *global {
            rng.gen_range(2..5)
        } else {
            [2, 3][i % 2]
        };
        let (h, w) = if *global {
            (size, size)
        } else {
            (
                size * rng.gen_range(1..4) + rng.gen_range(0..2),
                size * rng.gen_range(1..4) + rng.gen_range(0..2),
            )
        };
        let shape = [rng.gen_range(1..3), rng.gen_range(1..4), h, w];
        let (store, u) = universal(&spec, size, [shape[1], h, w], B1Init::Zeros, &mut rng);
        let x = random_tensor(&mut rng, &shape);
        let (out, _) = pool_eval(&u, &store, &x);
        let avg = reference_pool(&x, |tape, v| tape.avg_pool(v, size));
        worst = worst.max(max_diff(&out, &avg));
    }
    pass_if(
        worst <= 1e-12,
        format!("100 inputs over 5 variants, max |universal - avg| = {worst:.2e}"),
    )
}

/// Per-block `(max, second max)` of an NCHW tensor, in output order.
fn block_top_two(x: &Tensor<f64>, size: usize) -> Vec<(f64, f64)> {
    let [n, c, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let mut out = Vec::new();
    for i in 0..n {
        for ch in 0..c {
            for p in 0..h / size {
                for q in 0..w / size {
                    let mut vals: Vec<f64> = (0..size * size)
                        .map(|k| x.at(&[i, ch, p * size + k / size, q * size + k % size]))
                        .collect();
                    vals.sort_by(|a, b| b.total_cmp(a));
                    out.push((vals[0], vals[1]));
                }
            }
        }
    }
    out
}

fn c3_max_limit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut details = Vec::new();
    let mut ok = true;
    for size in [2, 4] {
        let shape = [4, 3, 4 * size, 4 * size];
        let (mut store, u) = universal(
            &B1Spec::local_fc(1),
            size,
            [3, 4 * size, 4 * size],
            B1Init::Default,
            &mut rng,
        );
        let x = random_tensor(&mut rng, &shape);
        let max = reference_pool(&x, |tape, v| tape.max_pool(v, size));
        let tops = block_top_two(&x, size);
        let mut means = Vec::new();
        let mut margin_err: f64 = 0.0;
        for alpha in [1.0, 10.0, 100.0] {
            u.set_scaled_identity(&mut store, alpha).unwrap();
            let (out, _) = pool_eval(&u, &store, &x);
            let diffs: Vec<f64> = out
                .data()
                .iter()
                .zip(max.data())
                .map(|(a, b)| (a - b).abs())
                .collect();
            means.push(diffs.iter().sum::<f64>() / diffs.len() as f64);
            if alpha == 100.0 {
                for (d, (m1, m2)) in diffs.iter().zip(&tops) {
                    if m1 - m2 >= 0.1 {
                        margin_err = margin_err.max(*d);
                    }
                }
            }
        }
        ok &= means[0] > means[1] && means[1] > means[2] && margin_err < 1e-3;
        details.push(format!(
            "S={size}: mean |u - max| {:.2e} > {:.2e} > {:.2e}, margin>=0.1 max {margin_err:.2e}",
            means[0], means[1], means[2]
        ));
    }
    pass_if(ok, details.join("; "))
}

fn c4_stride_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let size = 2;
    let shape = [8, 3, 8, 8];
    let mut worst: f64 = 0.0;
    let mut mean = 0.0;
    let mut count = 0.0;
    for spec in [
        B1Spec::local_fc(1),
        B1Spec::local_fc(2),
        B1Spec::local_fc(1).with_shared(true),
    ] {
        let (mut store, u) = universal(&spec, size, [3, 8, 8], B1Init::Default, &mut rng);
        u.set_constant_block_logits(&mut store, &[10.0, 0.0, 0.0, 0.0])
            .unwrap();
        let x = random_tensor(&mut rng, &shape);
        let (out, _) = pool_eval(&u, &store, &x);
        let stride = reference_pool(&x, |tape, v| tape.stride_pool(v, size, (0, 0)));
        worst = worst.max(max_diff(&out, &stride));
        for (a, b) in out.data().iter().zip(stride.data()) {
            mean += (a - b).abs();
            count += 1.0;
        }
    }
    let off = (-10.0f64).exp() / (1.0 + 3.0 * (-10.0f64).exp());
    pass_if(
        worst <= 1e-4,
        format!(
            "logits (10,0,0,0), inputs U(-1,1): max |universal - stride| = {worst:.2e}, mean {:.2e}; off-target weight {off:.2e}, worst-case bound 3 x {off:.2e} x block range",
            mean / count
        ),
    )
}

fn c5_gradients() -> Outcome {
    let mut total = FdReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    // Primitive pooling operators.
    for case in 0..8u64 {
        let size = 2;
        let shape = [2, 2, 4 + (case as usize % 2), 4];
        let x = random_tensor(&mut rng, &shape);
        total.merge(check_inputs(std::slice::from_ref(&x), FD_STEP, |t, v| {
            t.max_pool(v[0], size)
        }));
        total.merge(check_inputs(std::slice::from_ref(&x), FD_STEP, |t, v| {
            t.avg_pool(v[0], size)
        }));
        total.merge(check_inputs(std::slice::from_ref(&x), FD_STEP, |t, v| {
            t.stride_pool(v[0], size, (1, 0))
        }));
        total.merge(check_inputs(std::slice::from_ref(&x), FD_STEP, |t, v| {
            t.block_softmax(v[0], size)
        }));
        let mix = random_tensor(&mut rng, &[1]);
        total.merge(check_inputs(&[x.clone(), mix], FD_STEP, |t, v| {
            t.mixed_pool(v[0], v[1], size)
        }));
        let gate_c = random_tensor(&mut rng, &[2, 4]);
        total.merge(check_inputs(&[x.clone(), gate_c], FD_STEP, |t, v| {
            t.gated_pool(v[0], v[1], size, GateGranularity::Channel)
        }));
        let gate_l = random_tensor(&mut rng, &[4]);
        total.merge(check_inputs(&[x.clone(), gate_l], FD_STEP, |t, v| {
            t.gated_pool(v[0], v[1], size, GateGranularity::Layer)
        }));
        let logits = random_tensor(&mut rng, &shape);
        total.merge(check_inputs(&[logits, x], FD_STEP, |t, v| {
            let pi = t.block_softmax(v[0], size)?;
            t.block_weighted_sum(pi, v[1], size)
        }));
    }
    // Realized layers of every method, local and global, through input and parameters.
    let methods = [
        PoolMethod::Max,
        PoolMethod::Avg,
        PoolMethod::Stride {
            offset_row: 1,
            offset_col: 1,
        },
        PoolMethod::Mixed,
        PoolMethod::GatedChannel,
        PoolMethod::GatedLayer,
        PoolMethod::UniversalFc1,
        PoolMethod::UniversalFc2,
        PoolMethod::UniversalConv,
    ];
    for (k, m) in methods.into_iter().enumerate() {
        for global in [false, true] {
            total.merge(check_pool_layer(
                m,
                global,
                [2, 2, 4, 4],
                500 + k as u64,
                FD_STEP,
            ));
        }
    }
    let isolated = total;
    if isolated.max_rel_err >= GRAD_TOL || isolated.checked == 0 {
        return Err(format!(
            "isolated operators: max rel err {:.2e}",
            isolated.max_rel_err
        ));
    }
    // End to end on the tiny networks with every universal variant.
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut parts = Vec::new();
    for (arch, hw) in [(Architecture::TinyVgg, 32), (Architecture::TinyResNet, 16)] {
        let spec = SyntheticSpec {
            image_size: hw,
            ..SyntheticSpec::default()
        };
        let (train, _) = synthetic_split(&spec, 2).unwrap();
        let (x, labels) = train.batch::<f64>(&[0, 1]);
        for m in [
            PoolMethod::UniversalFc1,
            PoolMethod::UniversalFc2,
            PoolMethod::UniversalConv,
        ] {
            let cfg = ModelConfig::new(arch, m, m).with_input([3, hw, hw], train.num_classes());
            let mut model = build_model::<f64>(cfg, 5).unwrap();
            randomize_zero_params(&mut model, 0.1, 5);
            let r = grad_check(&mut model, &x, &labels, 250, GRAD_CHECK_STEP, 5).unwrap();
            worst = worst.max(r.max_rel_err);
            checked += r.checked;
            parts.push(format!("{arch}/{m} {:.1e}", r.max_rel_err));
            if r.checked == 0 {
                return Err(format!("{arch}/{m}: no element checked"));
            }
        }
    }
    pass_if(
        worst < GRAD_TOL,
        format!(
            "isolated: {} elements, max rel err {:.2e}; end to end: {checked} elements, max {worst:.2e} ({})",
            isolated.checked,
            isolated.max_rel_err,
            parts.join(", ")
        ),
    )
}

fn c6_oracles() -> Outcome {
    let conv = conv2d_oracle_error(200, 11);
    let mm = matmul_oracle_error(200, 12);
    let pool = pool_oracle_error(200, 13);
    pass_if(
        conv.max(mm).max(pool) <= 1e-12,
        format!("200 shapes each: conv2d {conv:.1e}, matmul {mm:.1e}, max/avg/stride {pool:.1e}"),
    )
}

/// Best train top-1 over the epochs and final test top-1.
fn desk_run(
    train: &Dataset,
    test: &Dataset,
    local: PoolMethod,
    global: PoolMethod,
    seed: u64,
) -> (f64, f64) {
    let cfg = ModelConfig::new(Architecture::TinyResNet, local, global)
        .with_input(train.image_shape(), train.num_classes());
    let tc = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::<f32>::new(build_model(cfg, seed).unwrap(), tc).unwrap();
    let history = trainer.run(train, test, |_, _| Ok(())).unwrap();
    let best = history.iter().map(|m| m.train_top1).fold(0.0, f64::max);
    (best, history.last().unwrap().test_top1)
}

fn c7_desk_learning() -> Outcome {
    let (train, test) = synthetic_split(&SyntheticSpec::default(), 32).unwrap();
    let seeds = [0u64, 1, 2];
    let mut uni = Vec::new();
    let mut avg = Vec::new();
    for &s in &seeds {
        uni.push(desk_run(
            &train,
            &test,
            PoolMethod::UniversalFc1,
            PoolMethod::UniversalFc2,
            s,
        ));
        avg.push(desk_run(&train, &test, PoolMethod::Avg, PoolMethod::Avg, s));
    }
    let mean = |v: &[(f64, f64)]| 100.0 * v.iter().map(|r| r.1).sum::<f64>() / v.len() as f64;
    let (mu, ma) = (mean(&uni), mean(&avg));
    let min_train = uni.iter().map(|r| r.0).fold(1.0, f64::min);
    pass_if(
        min_train >= 0.95 && mu >= ma - 2.0,
        format!(
            "universal train top-1 >= {:.1}% on every seed; test top-1 mean universal {mu:.2}% vs avg {ma:.2}%",
            100.0 * min_train
        ),
    )
}

/// Synthetic π maps for `n` inputs of random features, by generator kind.
fn taxonomy_site(rng: &mut ChaCha8Rng, kind: Category) -> SiteWeights {
    let size = rng.gen_range(2..5);
    let (n, c) = (rng.gen_range(4..10), rng.gen_range(1..6));
    let (h, w) = (
        size * rng.gen_range(2..5) + rng.gen_range(0..2),
        size * rng.gen_range(2..5) + rng.gen_range(0..2),
    );
    let features = random_tensor(rng, &[n, c, h, w]);
    let mut pi = Tensor::<f64>::zeros(vec![n, c, h, w]);
    for i in 0..n {
        for ch in 0..c {
            for p in 0..h / size {
                for q in 0..w / size {
                    let cells: Vec<[usize; 4]> = (0..size * size)
                        .map(|k| [i, ch, p * size + k / size, q * size + k % size])
                        .collect();
                    match kind {
                        Category::Average => {
                            for cell in &cells {
                                let o = pi.offset(cell);
                                pi.data_mut()[o] = 1.0 / (size * size) as f64;
                            }
                        }
                        Category::Flexible => {
                            let arg = cells
                                .iter()
                                .max_by(|a, b| features.at(&a[..]).total_cmp(&features.at(&b[..])))
                                .unwrap();
                            let o = pi.offset(arg);
                            pi.data_mut()[o] = 1.0;
                        }
                        Category::Fixed => {
                            let o = pi.offset(&cells[0]);
                            pi.data_mut()[o] = 1.0;
                        }
                    }
                }
            }
        }
    }
    SiteWeights {
        site: 0,
        name: "constructed".into(),
        size,
        weights: pi,
        features,
    }
}

fn c8_taxonomy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let thresholds = Thresholds::default();
    let mut channels = 0;
    for trial in 0..20 {
        for kind in [Category::Average, Category::Flexible, Category::Fixed] {
            let site = taxonomy_site(&mut rng, kind);
            for p in categorize(&site, &thresholds).unwrap() {
                if p.category != kind {
                    return Err(format!(
                        "trial {trial}: {kind} generator, channel {} labelled {} (u={:.3}, s={:.3})",
                        p.channel, p.category, p.uniformity, p.sensitivity
                    ));
                }
                channels += 1;
            }
        }
    }
    // The limiting module configurations land in the matching categories.
    let x = random_tensor(&mut rng, &[8, 3, 8, 8]);
    let (zero_store, zero) = universal(&B1Spec::local_fc(1), 2, [3, 8, 8], B1Init::Zeros, &mut rng);
    let (mut id_store, ident) = universal(
        &B1Spec::local_fc(1),
        2,
        [3, 8, 8],
        B1Init::Default,
        &mut rng,
    );
    ident.set_scaled_identity(&mut id_store, 100.0).unwrap();
    let (mut st_store, stride) = universal(
        &B1Spec::local_fc(1),
        2,
        [3, 8, 8],
        B1Init::Default,
        &mut rng,
    );
    stride
        .set_constant_block_logits(&mut st_store, &[10.0, 0.0, 0.0, 0.0])
        .unwrap();
    for (u, store, expect) in [
        (&zero, &zero_store, Category::Average),
        (&ident, &id_store, Category::Flexible),
        (&stride, &st_store, Category::Fixed),
    ] {
        let (_, pi) = pool_eval(u, store, &x);
        let site = SiteWeights {
            site: 0,
            name: "module".into(),
            size: 2,
            weights: pi,
            features: x.clone(),
        };
        for p in categorize(&site, &thresholds).unwrap() {
            if p.category != expect {
                return Err(format!(
                    "{expect} module configuration labelled {}",
                    p.category
                ));
            }
            channels += 1;
        }
    }
    Ok(format!(
        "{channels} channels over 20 trials and 3 module limits, all labelled correctly"
    ))
}

fn determinism_trainer() -> Trainer<f64> {
    let cfg = ModelConfig::new(
        Architecture::TinyResNet,
        PoolMethod::UniversalFc1,
        PoolMethod::UniversalFc2,
    )
    .with_input([3, 16, 16], 4);
    let tc = TrainConfig {
        lr0: 0.05,
        epochs: 5,
        lr_decay_interval: 2,
        batch_size: 16,
        seed: 9,
        precision: Precision::F64,
        augment: true,
        ..TrainConfig::default()
    };
    Trainer::new(build_model(cfg, 9).unwrap(), tc).unwrap()
}

fn c9_determinism() -> Outcome {
    let spec = SyntheticSpec {
        samples_per_class: 16,
        ..SyntheticSpec::default()
    };
    let (train, test) = synthetic_split(&spec, 8).unwrap();
    let bits = |h: &[unipool::train::EpochMetrics]| {
        h.iter().map(|m| m.train_loss.to_bits()).collect::<Vec<_>>()
    };
    let mut a = determinism_trainer();
    let la = bits(&a.run(&train, &test, |_, _| Ok(())).unwrap());
    let mut b = determinism_trainer();
    let lb = bits(&b.run(&train, &test, |_, _| Ok(())).unwrap());
    if la != lb {
        return Err("two fixed-seed runs produced different loss traces".into());
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("epoch2.upl");
    let mut c = determinism_trainer();
    let mut first = Vec::new();
    for _ in 0..2 {
        first.push(c.run_epoch(&train, &test).unwrap());
    }
    c.save(&path).unwrap();
    drop(c);
    let mut resumed = Trainer::<f64>::load(&path).unwrap();
    first.extend(resumed.run(&train, &test, |_, _| Ok(())).unwrap());
    let lr = bits(&first);
    let same_state = resumed.to_checkpoint().encode() == a.to_checkpoint().encode();
    pass_if(
        lr == la && same_state,
        format!(
            "5-epoch loss trace bitwise equal across runs; save at epoch 2, load, continue: trace {} and final state {}",
            if lr == la { "identical" } else { "differs" },
            if same_state { "identical" } else { "differs" }
        ),
    )
}

fn cifar_dir() -> Option<PathBuf> {
    let root = PathBuf::from(std::env::var(unipool::cli::DATA_DIR_ENV).ok()?);
    [root.join("cifar-10-batches-bin"), root]
        .into_iter()
        .find(|d| d.join(CIFAR10_TRAIN_FILES[0]).exists())
}

fn concat_files(dir: &Path, names: &[&str]) -> Vec<u8> {
    names
        .iter()
        .flat_map(|n| std::fs::read(dir.join(n)).unwrap())
        .collect()
}

fn c10_ingestion() -> Outcome {
    let cifar = match cifar_dir() {
        None => format!(
            "CIFAR-10 skipped: set {} to a directory holding the binary batches",
            unipool::cli::DATA_DIR_ENV
        ),
        Some(dir) => {
            let (train, test) = load_cifar10(&dir).map_err(|e| e.to_string())?;
            let labels_ok = train.labels().iter().chain(test.labels()).all(|&l| l < 10);
            let bytes_ok = train.to_binary() == concat_files(&dir, &CIFAR10_TRAIN_FILES)
                && test.to_binary() == concat_files(&dir, &[CIFAR10_TEST_FILE]);
            if train.len() != 50_000 || test.len() != 10_000 || !labels_ok || !bytes_ok {
                return Err(format!(
                    "CIFAR-10: {}/{} records, labels in range {labels_ok}, bytes reproduced {bytes_ok}",
                    train.len(),
                    test.len()
                ));
            }
            "CIFAR-10 50000/10000, labels in [0,10), bytes reproduced".to_string()
        }
    };
    let spec = SyntheticSpec {
        samples_per_class: 20,
        ..SyntheticSpec::default()
    };
    let (train, test) = synthetic_split(&spec, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_binary_dir(dir.path(), &train, &test).unwrap();
    let (train2, test2) = load_binary_dir(dir.path()).unwrap();
    let files_ok = std::fs::read(dir.path().join("data_batch_1.bin")).unwrap() == train.to_binary()
        && std::fs::read(dir.path().join(CIFAR10_TEST_FILE)).unwrap() == test.to_binary();
    let reload_ok =
        train2.to_binary() == train.to_binary() && test2.to_binary() == test.to_binary();
    pass_if(
        files_ok && reload_ok,
        format!(
            "{cifar}; synthetic round trip of {}/{} records {}",
            train.len(),
            test.len(),
            if files_ok && reload_ok {
                "byte-identical"
            } else {
                "differs"
            }
        ),
    )
}

#[test]
fn acceptance() {
    type Criterion = (usize, &'static str, u64, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        (1, "normalization", 5, c1_normalization),
        (2, "average-pooling reduction", 5, c2_average_reduction),
        (3, "max-pooling limit", 5, c3_max_limit),
        (4, "stride-pooling reduction", 5, c4_stride_reduction),
        (5, "gradient correctness", 120, c5_gradients),
        (6, "oracle equivalence", 60, c6_oracles),
        (7, "desk-scale learning", 600, c7_desk_learning),
        (8, "taxonomy correctness", 5, c8_taxonomy),
        (9, "determinism and persistence", 120, c9_determinism),
        (10, "dataset ingestion", 120, c10_ingestion),
    ];
    let mut unexpected = Vec::new();
    // Written to the stderr handle directly so the lines survive output capture.
    let mut report = std::io::stderr().lock();
    writeln!(report).unwrap();
    for (id, name, budget, run) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > Duration::from_secs(budget) => {
                Err(format!("{d}; over the {budget} s budget"))
            }
            other => other,
        };
        let known = KNOWN_FAILURES
            .iter()
            .find(|(k, _)| *k == id)
            .map(|(_, why)| *why);
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d.clone()),
            Err(d) => ("FAIL", d.clone()),
        };
        let note = match (outcome.is_ok(), known) {
            (false, Some(why)) => format!(" [known: {why}]"),
            _ => String::new(),
        };
        writeln!(
            report,
            "{tag} C{id} {name}: {detail} ({:.1} s){note}",
            elapsed.as_secs_f64()
        )
        .unwrap();
        if outcome.is_err() && known.is_none() {
            unexpected.push(id);
        }
    }
    assert!(unexpected.is_empty(), "criteria failed: {unexpected:?}");
}
