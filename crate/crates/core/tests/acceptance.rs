//! End-to-end acceptance checks, one line per criterion.
//!
//! Training-trend criteria are read from the frozen desk run in
//! `tests/fixtures/desk`. Set `LATENT_GATE_FULL_ACCEPTANCE=1` to regenerate
//! that run from scratch instead (about half an hour on one core).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use latent_gate::harness::{
    cell_name, cmd_compare, cmd_eval, cmd_generate, cmd_sweep, evaluate, load_checkpoint, open_dataset, quiet,
    read_csv, save_checkpoint, CellResult, Checkpoint, RunConfig, SplitSizes, SummaryRow, TrainMeta, SWEEP_CELLS,
    SWEEP_SUMMARY, SWEEP_TABLE,
};
use latent_gate::info::{verify_dpi, verify_prop2_discrete, Channel, LesionWorld, MarkovChain};
use latent_gate::metrics::{auroc, average_precision, best_dice, pixel_ap, ErrorMap};
use latent_gate::models::{
    build_model, kl_divergence, memae_address, train, training_objective, ArchSpec, ModelKind, TrainConfig,
};
use latent_gate::prop1::verification_grid;
use latent_gate::synth::{dequantize, load_dataset, read_manifest, read_pgm, write_pgm, IMAGE_SIDE, MANIFEST_NAME};
use latent_gate::tensor::{finite_difference_grad, BnMode, RunningStats};
use latent_gate::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rnd(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = rnd(shape, rng);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    t
}

fn vector_rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

// ---------------------------------------------------------------- gradients

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> latent_gate::Result<Var> + 'a;

/// Tape gradient of `Σ out ⊙ R` against central differences, worst input.
fn op_error(inputs: &[Tensor], build: &Build<'_>, rng: &mut ChaCha8Rng) -> f64 {
    let shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).shape().to_vec()
    };
    let weights = rnd(&shape, rng);
    let loss_of = |ins: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).dot(&weights).unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = build(&mut tape, &vars).unwrap();
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let numeric = finite_difference_grad(
            |x| {
                let mut ins = inputs.to_vec();
                ins[k] = x.clone();
                loss_of(&ins)
            },
            input,
            1e-6,
        );
        let analytic = grads.get(vars[k]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
        worst = worst.max(vector_rel_error(&analytic, numeric.data()));
    }
    worst
}

fn op_instances(rng: &mut ChaCha8Rng, trial: usize) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let (n, m, k) = (2 + trial % 3, 1 + trial % 4, 2 + trial % 5);
    let pair = [rnd(&[n, k], rng), rnd(&[n, k], rng)];
    let one = [pair[0].clone()];
    let kinked = [away_from_zero(&[n, k], rng)];
    let positive = [Tensor::uniform(&[n, k + 2], 0.05, 1.0, rng)];
    let mm = [rnd(&[n, m], rng), rnd(&[m, k], rng)];
    let lin = [rnd(&[n, m], rng), rnd(&[m, k], rng), rnd(&[k], rng)];
    let (c, f, hw) = (1 + trial % 2, 1 + trial % 3, 4 + 2 * (trial % 2));
    let conv = [rnd(&[2, c, hw, hw], rng), rnd(&[f, c, 4, 4], rng), rnd(&[f], rng)];
    let deconv = [rnd(&[2, c, hw / 2, hw / 2], rng), rnd(&[c, f, 4, 4], rng), rnd(&[f], rng)];
    let bn2 = [rnd(&[3, c, 2, 2], rng), rnd(&[c], rng), rnd(&[c], rng)];
    let bn1 = [rnd(&[4, k], rng), rnd(&[k], rng), rnd(&[k], rng)];
    let mut frozen = RunningStats::new(c);
    frozen.mean.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    frozen.var.iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));

    let cases: Vec<(&'static str, &[Tensor], Box<Build<'_>>)> = vec![
        ("matmul", &mm, Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("linear", &lin, Box::new(|t, v| t.linear(v[0], v[1], v[2]))),
        ("add", &pair, Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", &pair, Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", &pair, Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", &one, Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("exp", &one, Box::new(|t, v| Ok(t.exp(v[0])))),
        ("sigmoid", &one, Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        ("sum", &one, Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", &one, Box::new(|t, v| Ok(t.mean(v[0])))),
        ("transpose", &one, Box::new(|t, v| t.transpose(v[0]))),
        ("reshape", &one, Box::new(move |t, v| t.reshape(v[0], &[k, n]))),
        ("relu", &kinked, Box::new(|t, v| Ok(t.relu(v[0])))),
        ("clamp", &kinked, Box::new(|t, v| Ok(t.clamp(v[0], -0.48, 0.51)))),
        ("mse", &pair, Box::new(|t, v| t.mse_loss(v[0], v[1]))),
        ("kl", &pair, Box::new(|t, v| t.kl_std_normal(v[0], v[1]))),
        ("row_l2_normalize", &one, Box::new(|t, v| t.row_l2_normalize(v[0]))),
        ("row_softmax", &one, Box::new(|t, v| t.row_softmax(v[0]))),
        ("shrink_renorm", &positive, Box::new(|t, v| Ok(t.shrink_renorm(v[0], 0.02)?.0))),
        ("row_entropy", &positive, Box::new(|t, v| t.row_entropy(v[0]))),
        ("conv2d", &conv, Box::new(|t, v| t.conv2d(v[0], v[1], v[2]))),
        ("conv_transpose2d", &deconv, Box::new(|t, v| t.conv_transpose2d(v[0], v[1], v[2]))),
        (
            "batch_norm2d",
            &bn2,
            Box::new(move |t, v| t.batch_norm(v[0], v[1], v[2], BnMode::Train, &mut RunningStats::new(c))),
        ),
        (
            "batch_norm1d",
            &bn1,
            Box::new(move |t, v| t.batch_norm(v[0], v[1], v[2], BnMode::Train, &mut RunningStats::new(k))),
        ),
        (
            "batch_norm_eval",
            &bn2,
            Box::new(move |t, v| t.batch_norm(v[0], v[1], v[2], BnMode::Eval, &mut frozen.clone())),
        ),
    ];
    for (name, inputs, build) in &cases {
        out.push((*name, op_error(inputs, build.as_ref(), rng)));
    }
    out
}

/// Directional derivatives of the AE training loss along three random unit
/// directions through every parameter, against central differences.
fn composite_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ArchSpec::new(1 + (seed % 4) as usize).with_bottleneck(16);
    let model = build_model(ModelKind::Ae, &spec, seed).unwrap();
    let batch = Tensor::uniform(&[2, 1, 64, 64], 0.0, 1.0, &mut rng);
    let analytic = training_objective(&model, &batch, &batch, None).unwrap();
    let h = 1e-6;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for _ in 0..3 {
        let mut dirs: Vec<Tensor> = model.params.iter().map(|p| rnd(p.tensor.shape(), &mut rng)).collect();
        let norm = dirs.iter().map(|v| v.dot(v).unwrap()).sum::<f64>().sqrt();
        dirs.iter_mut().for_each(|v| v.data_mut().iter_mut().for_each(|x| *x /= norm));
        a.push(
            analytic
                .grads
                .iter()
                .zip(&dirs)
                .map(|(g, v)| g.as_ref().map_or(0.0, |g| g.iter().zip(v.data()).map(|(x, y)| x * y).sum()))
                .sum(),
        );
        let shifted = |sign: f64| {
            let mut m = model.clone();
            for (p, v) in m.params.iter_mut().zip(&dirs) {
                p.tensor.data_mut().iter_mut().zip(v.data()).for_each(|(x, d)| *x += sign * h * d);
            }
            training_objective(&m, &batch, &batch, None).unwrap().loss
        };
        b.push((shifted(1.0) - shifted(-1.0)) / (2.0 * h));
    }
    vector_rel_error(&a, &b)
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6ead);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for trial in 0..100 {
        for (name, e) in op_instances(&mut rng, trial) {
            let w = worst.entry(name).or_default();
            *w = w.max(e);
        }
        let e = composite_error(1000 + trial as u64);
        let w = worst.entry("ae_composite").or_default();
        *w = w.max(e);
    }
    let elapsed = start.elapsed();
    let (name, max) = worst.iter().fold(("", 0.0f64), |acc, (n, &e)| if e > acc.1 { (n, e) } else { acc });
    ensure(max < 1e-4, || format!("{name} relative error {max:.3e}"))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:.1?}"))?;
    Ok(format!("{} ops + AE composite, worst {max:.2e} ({name}), {elapsed:.1?}", worst.len() - 1))
}

// ------------------------------------------------------ bottleneck identity

fn bottleneck_grid() -> Outcome {
    let start = Instant::now();
    let rows = verification_grid(&[4, 8, 16], |big_d| big_d + 2, 7).map_err(|e| e.to_string())?;
    let mut strict = false;
    for r in &rows {
        let (big_d, d) = (r.big_d, r.d);
        if d < big_d {
            let want = (big_d - d) as f64;
            ensure((r.residual - want).abs() <= 1e-3, || format!("D={big_d} d={d}: residual {} vs {want}", r.residual))?;
        } else {
            ensure(r.residual < 1e-6, || format!("D={big_d} d={d}: residual {}", r.residual))?;
        }
        ensure(r.rank_bound_blocks == (d < big_d), || format!("D={big_d} d={d}: rank bound flag"))?;
        ensure(r.half_bound_blocks == (2 * d < big_d), || format!("D={big_d} d={d}: half bound flag"))?;
        ensure(!r.half_bound_blocks || r.rank_bound_blocks, || format!("D={big_d} d={d}: half bound outside rank bound"))?;
        strict |= r.rank_bound_blocks && !r.half_bound_blocks;
    }
    ensure(strict, || "half bound covers every blocking case".into())?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:.1?}"))?;
    Ok(format!("{} grid points, {elapsed:.1?}", rows.len()))
}

// ------------------------------------------------------ information checks

fn random_dist(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..m).map(|_| rng.random::<f64>().powi(2) + 1e-4).collect();
    let s: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|v| v / s).collect();
    let rest: f64 = p[1..].iter().sum();
    p[0] = 1.0 - rest;
    p
}

/// `Σ p(x,y) log₂ p(x,y) / (p(x) p(y))` straight from the definition.
fn mi_definition(px: &[f64], channel: &[Vec<f64>]) -> f64 {
    let ny = channel[0].len();
    let py: Vec<f64> = (0..ny).map(|y| px.iter().zip(channel).map(|(p, r)| p * r[y]).sum()).collect();
    let mut mi = 0.0;
    for (x, row) in channel.iter().enumerate() {
        for y in 0..ny {
            let pxy = px[x] * row[y];
            if pxy > 0.0 {
                mi += pxy * (pxy / (px[x] * py[y])).log2();
            }
        }
    }
    mi
}

fn compose(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|r| (0..b[0].len()).map(|k| r.iter().zip(b).map(|(p, row)| p * row[k]).sum()).collect())
        .collect()
}

fn binary_entropy(p: f64) -> f64 {
    -(p * p.log2() + (1.0 - p) * (1.0 - p).log2())
}

fn information() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xd91);
    let mut worst_dpi: f64 = f64::INFINITY;
    for i in 0..100 {
        let (a, b, c) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8));
        let px = random_dist(&mut rng, a);
        let enc: Vec<Vec<f64>> = (0..a).map(|_| random_dist(&mut rng, b)).collect();
        let dec: Vec<Vec<f64>> = (0..b).map(|_| random_dist(&mut rng, c)).collect();
        let chain = MarkovChain {
            px: px.clone(),
            encoder: Channel::new(enc.clone()).map_err(|e| e.to_string())?,
            decoder: Channel::new(dec.clone()).map_err(|e| e.to_string())?,
        };
        let r = verify_dpi(&chain).map_err(|e| e.to_string())?;
        let i_xz = mi_definition(&px, &enc);
        let i_xxhat = mi_definition(&px, &compose(&enc, &dec));
        ensure((r.i_xz - i_xz).abs() <= 1e-12 && (r.i_xxhat - i_xxhat).abs() <= 1e-12, || {
            format!("chain {i}: library MI ({}, {}) vs definition ({i_xz}, {i_xxhat})", r.i_xz, r.i_xxhat)
        })?;
        ensure(r.i_xz >= r.i_xxhat - 1e-12 && r.holds, || format!("chain {i}: DPI violated"))?;
        worst_dpi = worst_dpi.min(r.i_xz - r.i_xxhat);
    }
    for (m_n, p) in [(4usize, 0.5), (3, 0.1), (8, 0.25)] {
        let world = LesionWorld::with_lesion_bit(m_n, p).map_err(|e| e.to_string())?;
        let h_xn = (m_n as f64).log2();
        let copy = verify_prop2_discrete(&world, &world.copy_encoder().map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let want = h_xn + binary_entropy(p);
        ensure((copy.i_xa_z - want).abs() <= 1e-9 && copy.i_xa_z > h_xn + 1e-9, || {
            format!("copy encoder m_n={m_n} p={p}: I(X_a;Z)={} want {want}", copy.i_xa_z)
        })?;
        let keep = verify_prop2_discrete(&world, &world.lesion_discarding_encoder().map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        ensure(
            (keep.i_xn_z - h_xn).abs() <= 1e-9 && (keep.i_xa_z - h_xn).abs() <= 1e-9,
            || format!("lesion-discarding encoder m_n={m_n} p={p}: {keep:?}"),
        )?;
        ensure(keep.normal_preserved && keep.abnormal_bounded, || format!("flags {keep:?}"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:.1?}"))?;
    Ok(format!("100 chains, min I(X;Z)-I(X;X^) = {worst_dpi:.2e} bits, 3 lesion worlds, {elapsed:.1?}"))
}

// ---------------------------------------------------------------- metrics

fn brute_auroc(s: &[f64], l: &[bool]) -> f64 {
    let (mut total, mut pairs) = (0.0, 0.0);
    for i in (0..s.len()).filter(|&i| l[i]) {
        for j in (0..s.len()).filter(|&j| !l[j]) {
            pairs += 1.0;
            total += if s[i] > s[j] {
                1.0
            } else if s[i] == s[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    total / pairs
}

// precision at each positive, ranks taken in stable descending order
fn brute_ap(s: &[f64], l: &[bool]) -> f64 {
    let n_pos = l.iter().filter(|&&v| v).count() as f64;
    let mut ap = 0.0;
    for i in (0..s.len()).filter(|&i| l[i]) {
        let ahead = |j: usize| s[j] > s[i] || (s[j] == s[i] && j < i);
        let rank = (0..s.len()).filter(|&j| ahead(j)).count() + 1;
        let hits = (0..s.len()).filter(|&j| l[j] && ahead(j)).count() + 1;
        ap += hits as f64 / rank as f64 / n_pos;
    }
    ap
}

fn exhaustive_dice(s: &[f64], l: &[bool]) -> f64 {
    let n_pos = l.iter().filter(|&&v| v).count();
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let (mut tp, mut fp, mut best) = (0usize, 0usize, 0.0f64);
    for (pos, &i) in order.iter().enumerate() {
        if l[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_value = order.get(pos + 1).is_none_or(|&j| s[j] != s[i]);
        if last_of_value {
            best = best.max(2.0 * tp as f64 / (2 * tp + fp + (n_pos - tp)) as f64);
        }
    }
    best
}

fn instance(rng: &mut ChaCha8Rng, n: usize, ties: bool) -> (Vec<f64>, Vec<bool>) {
    loop {
        let l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let s: Vec<f64> = l
            .iter()
            .map(|&a| {
                let shift = if a { 0.3 } else { 0.0 };
                if ties {
                    (rng.random_range(0..6) as f64 + 4.0 * shift) / 8.0
                } else {
                    rng.random::<f64>() + shift
                }
            })
            .collect();
        if l.iter().any(|&v| v) && l.iter().any(|&v| !v) {
            return (s, l);
        }
    }
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x3e7);
    let mut worst_dice: f64 = 0.0;
    let transforms: [fn(f64) -> f64; 3] = [|v| (3.0 * v).exp() + 7.0, |v| v * v * v - 2.0, |v| (v - 0.4).atan()];
    for i in 0..200 {
        let n = rng.random_range(4..60);
        let (s, l) = instance(&mut rng, n, i % 3 == 0);
        let (a, p) = (auroc(&s, &l).map_err(|e| e.to_string())?, average_precision(&s, &l).map_err(|e| e.to_string())?);
        let (ba, bp) = (brute_auroc(&s, &l), brute_ap(&s, &l));
        ensure((a - ba).abs() <= 1e-12 && (p - bp).abs() <= 1e-12, || {
            format!("instance {i}: auc {a} vs {ba}, ap {p} vs {bp}")
        })?;
        for f in transforms {
            let t: Vec<f64> = s.iter().map(|&v| f(v)).collect();
            let (ta, tp) = (auroc(&t, &l).unwrap(), average_precision(&t, &l).unwrap());
            ensure((ta - a).abs() <= 1e-12 && (tp - p).abs() <= 1e-12, || format!("instance {i}: not invariant"))?;
        }

        // pixel metrics: a few maps, large enough on some instances to force
        // threshold subsampling
        let side = if i % 4 == 0 { rng.random_range(30..48) } else { rng.random_range(2..8) };
        let n_maps = rng.random_range(1..4);
        let mut maps = Vec::new();
        let mut masks = Vec::new();
        let mut pooled_s = Vec::new();
        let mut pooled_l = Vec::new();
        while masks.iter().all(|m: &Vec<u8>| m.iter().all(|&v| v == 0)) {
            maps.clear();
            masks.clear();
            pooled_s.clear();
            pooled_l.clear();
            for k in 0..n_maps {
                let (s, l) = instance(&mut rng, side * side, i % 5 == 1);
                masks.push(l.iter().map(|&v| u8::from(v)).collect());
                maps.push(ErrorMap {
                    id: format!("m{k}"),
                    values: s.iter().map(|v| v * v).collect(),
                });
                pooled_s.extend(s.iter().map(|v| v * v));
                pooled_l.extend(l);
            }
        }
        let pa = pixel_ap(&maps, &masks).map_err(|e| e.to_string())?;
        let bpa = brute_ap(&pooled_s, &pooled_l);
        ensure((pa - bpa).abs() <= 1e-12, || format!("instance {i}: pixel AP {pa} vs {bpa}"))?;
        let (d, _) = best_dice(&maps, &masks).map_err(|e| e.to_string())?;
        let bd = exhaustive_dice(&pooled_s, &pooled_l);
        ensure(d <= bd + 1e-12 && bd - d <= 0.005, || format!("instance {i}: dice {d} vs exhaustive {bd}"))?;
        worst_dice = worst_dice.max(bd - d);
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:.1?}"))?;
    Ok(format!("200 instances, worst Dice shortfall {worst_dice:.2e}, {elapsed:.1?}"))
}

// -------------------------------------------------------- training trends

struct DeskRun {
    cells: Vec<CellResult>,
    summary: Vec<SummaryRow>,
    compare: Vec<SummaryRow>,
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/desk")
}

fn desk_run() -> Result<(DeskRun, Option<Duration>), String> {
    let full = std::env::var("LATENT_GATE_FULL_ACCEPTANCE").is_ok_and(|v| v == "1");
    let (root, elapsed, _keep) = if full {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = RunConfig::default();
        let data = dir.path().join("data");
        let start = Instant::now();
        cmd_generate(&cfg, &data).map_err(|e| e.to_string())?;
        cmd_sweep(&cfg, &data, &dir.path().join("sweep"), &quiet).map_err(|e| e.to_string())?;
        let sweep_time = start.elapsed();
        cmd_compare(&cfg, &data, &dir.path().join("sweep"), &dir.path().join("compare"), &quiet)
            .map_err(|e| e.to_string())?;
        (dir.path().to_path_buf(), Some(sweep_time), Some(dir))
    } else {
        (fixture_dir(), None, None)
    };
    let run = DeskRun {
        cells: read_csv(&root.join("sweep").join(SWEEP_CELLS)).map_err(|e| e.to_string())?,
        summary: read_csv(&root.join("sweep").join(SWEEP_SUMMARY)).map_err(|e| e.to_string())?,
        compare: read_csv(&root.join("compare/compare.csv")).map_err(|e| e.to_string())?,
    };
    Ok((run, elapsed))
}

fn mean_auc_by_d(cells: &[CellResult]) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for c in cells.iter().filter(|c| c.kind == ModelKind::Ae) {
        acc.entry(c.latent_dim).or_default().push(c.auroc);
    }
    acc.into_iter().map(|(d, v)| (d, v.iter().sum::<f64>() / v.len() as f64)).collect()
}

fn auc_trend(run: &DeskRun, elapsed: Option<Duration>) -> Outcome {
    let auc = mean_auc_by_d(&run.cells);
    ensure(auc.keys().copied().eq([1, 2, 4, 8, 16, 32, 64, 128]), || format!("sweep covers {:?}", auc.keys()))?;
    for row in &run.summary {
        ensure((auc[&row.latent_dim] - row.auroc_mean).abs() < 1e-12, || format!("summary disagrees at d={}", row.latent_dim))?;
    }
    let (&d_star, &best) = auc.iter().fold((&0, &f64::NEG_INFINITY), |acc, kv| if kv.1 > acc.1 { kv } else { acc });
    let table: Vec<String> = auc.iter().map(|(d, a)| format!("{d}:{a:.3}")).collect();
    let detail = format!("d*={d_star}, AUC {}", table.join(" "));
    ensure([2, 4, 8, 16].contains(&d_star), || format!("{detail}; d* outside 2..16"))?;
    ensure(best - auc[&128] >= 0.05, || format!("{detail}; gap to d=128 is {:.3}", best - auc[&128]))?;
    ensure(best - auc[&1] >= 0.02, || format!("{detail}; gap to d=1 is {:.3}", best - auc[&1]))?;
    if let Some(t) = elapsed {
        ensure(t < Duration::from_secs(1800), || format!("{detail}; sweep took {t:.0?}"))?;
    }
    Ok(detail)
}

fn mse_ordering(run: &DeskRun) -> Outcome {
    let mut bad = Vec::new();
    let mut n = 0;
    for c in run.cells.iter().filter(|c| c.latent_dim <= 64) {
        n += 1;
        let g1 = c.mse_test_normal / c.mse_train_normal - 1.0;
        let g2 = c.mse_test_abnormal / c.mse_test_normal - 1.0;
        if g1 < 0.02 || g2 < 0.02 {
            bad.push(format!("{} ({:+.1}%, {:+.1}%)", cell_name(c.kind, c.latent_dim, c.repeat), 100.0 * g1, 100.0 * g2));
        }
    }
    ensure(bad.is_empty(), || format!("{} of {n} cells miss the 2% gaps: {}", bad.len(), bad.join(", ")))?;
    Ok(format!("{n} cells ordered with both gaps >= 2%"))
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            ranks[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    ranks
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn entropy_trend(run: &DeskRun) -> Outcome {
    let ae: Vec<&CellResult> = run.cells.iter().filter(|c| c.kind == ModelKind::Ae).collect();
    let d: Vec<f64> = ae.iter().map(|c| c.latent_dim as f64).collect();
    let h: Vec<f64> = ae.iter().map(|c| c.h_z).collect();
    let rho = spearman(&d, &h);
    let dims: Vec<f64> = run.summary.iter().map(|r| r.latent_dim as f64).collect();
    let h_means: Vec<f64> = run.summary.iter().map(|r| r.h_z_mean).collect();
    let means: Vec<String> = run.summary.iter().map(|r| format!("{}:{:.2}", r.latent_dim, r.h_z_mean)).collect();
    let detail = format!(
        "spearman {rho:.3} over {} cells ({:.3} over per-d means); mean H(Z) {}",
        ae.len(),
        spearman(&dims, &h_means),
        means.join(" ")
    );
    ensure(rho >= 0.8, || detail.clone())?;
    Ok(detail)
}

fn compare_table(run: &DeskRun) -> Outcome {
    let methods: Vec<&str> = run.compare.iter().map(|r| r.method.as_str()).collect();
    ensure(methods.len() == 5, || format!("{} rows: {methods:?}", methods.len()))?;
    for (m, want) in methods.iter().zip(["AE", "VAE", "MemAE", "CeAE", "AE[d_optimal]"]) {
        ensure(*m == want, || format!("rows {methods:?}"))?;
    }
    ensure(run.compare[..4].iter().all(|r| r.latent_dim == 16), || "baselines not at d=16".into())?;
    let auc = mean_auc_by_d(&run.cells);
    let (&d_star, _) = auc.iter().fold((&0, &f64::NEG_INFINITY), |acc, kv| if kv.1 > acc.1 { kv } else { acc });
    let opt = &run.compare[4];
    ensure(opt.latent_dim == d_star, || format!("AE[d_optimal] at d={} but sweep optimum is {d_star}", opt.latent_dim))?;
    let ae16 = run.compare[0].auroc_mean;
    let detail = format!(
        "AE[d={}] {:.3} vs AE[16] {ae16:.3}; VAE {:.3} MemAE {:.3} CeAE {:.3}",
        opt.latent_dim, opt.auroc_mean, run.compare[1].auroc_mean, run.compare[2].auroc_mean, run.compare[3].auroc_mean
    );
    ensure(opt.auroc_mean >= ae16, || detail.clone())?;
    Ok(detail)
}

// --------------------------------------------------------------- variants

fn variants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7a3);
    let mut worst_kl: f64 = 0.0;
    for _ in 0..4 {
        let (n, d) = (rng.random_range(1..4), rng.random_range(1..5));
        let mu = Tensor::uniform(&[n, d], -1.5, 1.5, &mut rng);
        let logvar = Tensor::uniform(&[n, d], -1.5, 1.0, &mut rng);
        let closed = kl_divergence(&mu, &logvar).map_err(|e| e.to_string())?;
        // E_q[log q(z) − log p(z)] with z = μ + σε
        let samples = 1_000_000;
        let mut total = 0.0;
        for _ in 0..samples {
            for (&m, &lv) in mu.data().iter().zip(logvar.data()) {
                let e: f64 = rng.sample(StandardNormal);
                let z = m + (0.5 * lv).exp() * e;
                total += 0.5 * (z * z - e * e - lv);
            }
        }
        let mc = total / (samples * n) as f64;
        let rel = (mc - closed).abs() / closed;
        ensure(rel < 0.01, || format!("KL closed {closed} vs Monte-Carlo {mc}"))?;
        worst_kl = worst_kl.max(rel);
    }
    let mut checked = 0;
    for _ in 0..50 {
        let (n, d, slots) = (rng.random_range(1..6), rng.random_range(1..9), rng.random_range(2..40));
        let z = rnd(&[n, d], &mut rng);
        let memory = Tensor::uniform(&[slots, d], -2.0, 2.0, &mut rng);
        let base = memae_address(&z, &memory, 0.0).map_err(|e| e.to_string())?;
        let mut prev = vec![slots; n];
        for frac in [0.0, 0.1, 0.3, 0.6, 0.9, 1.0] {
            let lambda = frac / slots as f64;
            let a = memae_address(&z, &memory, lambda).map_err(|e| e.to_string())?;
            for r in 0..n {
                let row = &a.weights.data()[r * slots..(r + 1) * slots];
                let s: f64 = row.iter().sum();
                ensure((s - 1.0).abs() <= 1e-9 && row.iter().all(|&w| w >= 0.0), || format!("row sums to {s}"))?;
                let support = row.iter().filter(|&&w| w > 0.0).count();
                let soft = base.weights.data()[r * slots..(r + 1) * slots].iter().filter(|&&w| w > 0.0).count();
                ensure(support <= soft, || format!("shrinkage grew support {soft} -> {support}"))?;
                if !a.fallback_rows[r] {
                    ensure(support <= prev[r], || format!("support grew with lambda={lambda}"))?;
                    prev[r] = support;
                }
                checked += 1;
            }
        }
    }
    Ok(format!("worst KL deviation {:.3}%, {checked} addressing rows", 100.0 * worst_kl))
}

// --------------------------------------------------------- infrastructure

fn tiny_config() -> RunConfig {
    RunConfig {
        splits: SplitSizes {
            train: 24,
            test_normal: 30,
            test_abnormal: 12,
        },
        bottleneck_width: 32,
        sweep: vec![2, 4],
        repeats: 2,
        compare_latent_dim: 2,
        train: TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    }
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn infrastructure() -> Outcome {
    let err = |e: latent_gate::Error| e.to_string();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = tiny_config();
    let data = dir.path().join("data");
    let manifest = cmd_generate(&cfg, &data).map_err(err)?;

    // manifest and image files
    ensure(read_manifest(&data.join(MANIFEST_NAME)).map_err(err)? == manifest, || "manifest round trip".into())?;
    let ds = open_dataset(&data).map_err(err)?;
    let reloaded = load_dataset(&data.join(MANIFEST_NAME)).map_err(err)?;
    for (rec, entry) in ds.train.iter().zip(&manifest.splits.train) {
        let bytes = read_pgm(&data.join(&entry.image_path), IMAGE_SIDE).map_err(err)?;
        ensure(dequantize(&bytes) == rec.image, || format!("{} differs from its file", entry.image_path))?;
    }
    ensure(reloaded.test_abnormal.iter().zip(&ds.test_abnormal).all(|(a, b)| a.mask == b.mask), || "masks".into())?;
    let levels: Vec<u8> = (0..IMAGE_SIDE * IMAGE_SIDE).map(|i| (i % 256) as u8).collect();
    let pgm = dir.path().join("levels.pgm");
    write_pgm(&pgm, &dequantize(&levels), IMAGE_SIDE).map_err(err)?;
    ensure(read_pgm(&pgm, IMAGE_SIDE).map_err(err)? == levels, || "8-bit levels not preserved".into())?;

    // checkpoint
    let mut model = build_model(ModelKind::Ae, &cfg.arch(3), 11).map_err(err)?;
    train(&mut model, &ds.train, &cfg.train).map_err(err)?;
    let before = evaluate(&model, &ds).map_err(err)?;
    let ck_path = dir.path().join("model.lgck");
    let ck = Checkpoint {
        model,
        meta: TrainMeta::default(),
        adam: None,
    };
    save_checkpoint(&ck_path, &ck).map_err(err)?;
    let loaded = load_checkpoint(&ck_path).map_err(err)?;
    let after = evaluate(&loaded.model, &ds).map_err(err)?;
    let bits = |e: &latent_gate::harness::Evaluation| -> Vec<u64> {
        e.scores.iter().map(|s| s.score.to_bits()).chain(e.maps.iter().flat_map(|m| m.values.iter().map(|v| v.to_bits()))).collect()
    };
    ensure(bits(&before) == bits(&after) && before.summary == after.summary, || "eval changed after reload".into())?;
    let (e1, e2) = (dir.path().join("eval1"), dir.path().join("eval2"));
    cmd_eval(&ck_path, &data, &e1, (None, None)).map_err(err)?;
    cmd_eval(&ck_path, &data, &e2, (None, None)).map_err(err)?;
    for f in ["scores.csv", "metrics.json"] {
        ensure(read(&e1.join(f))? == read(&e2.join(f))?, || format!("{f} differs between evals"))?;
    }

    // sweep determinism and resume
    let (a, b, part) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("part"));
    cmd_sweep(&cfg, &data, &a, &quiet).map_err(err)?;
    cmd_sweep(&cfg, &data, &b, &quiet).map_err(err)?;
    let first = RunConfig {
        sweep: vec![2],
        repeats: 1,
        ..cfg.clone()
    };
    cmd_sweep(&first, &data, &part, &quiet).map_err(err)?;
    let torn = part.join("cells").join(cell_name(ModelKind::Ae, 4, 1));
    std::fs::create_dir_all(&torn).map_err(|e| e.to_string())?;
    std::fs::write(torn.join("checkpoint.lgck"), b"LGCK").map_err(|e| e.to_string())?;
    cmd_sweep(&cfg, &data, &part, &quiet).map_err(err)?;
    for f in [SWEEP_CELLS, SWEEP_SUMMARY, SWEEP_TABLE] {
        let want = read(&a.join(f))?;
        ensure(read(&b.join(f))? == want, || format!("{f} differs between identical runs"))?;
        ensure(read(&part.join(f))? == want, || format!("{f} differs after resume"))?;
    }
    Ok("manifest, PGM, checkpoint and resumed sweep all byte-identical".into())
}

fn main() {
    let mut failures = 0;
    let mut report = |name: &str, outcome: Outcome| {
        match &outcome {
            Ok(msg) => println!("PASS  {name}: {msg}"),
            Err(msg) => {
                failures += 1;
                println!("FAIL  {name}: {msg}");
            }
        }
    };
    report("gradient correctness", gradients());
    report("bottleneck identity grid", bottleneck_grid());
    report("information-theoretic checks", information());
    report("metric oracles", metric_oracles());
    match desk_run() {
        Ok((run, elapsed)) => {
            report("AUC rises then falls with d", auc_trend(&run, elapsed));
            report("reconstruction error ordering", mse_ordering(&run));
            report("latent entropy grows with d", entropy_trend(&run));
            report("comparison table", compare_table(&run));
        }
        Err(e) => {
            for name in ["AUC rises then falls with d", "reconstruction error ordering", "latent entropy grows with d", "comparison table"] {
                report(name, Err(format!("desk run unavailable: {e}")));
            }
        }
    }
    report("VAE and MemAE internals", variants());
    report("checkpoints, datasets and resumable sweeps", infrastructure());
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
