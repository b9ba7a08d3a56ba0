//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use taylorfold::checkpoint::Checkpoint;
use taylorfold::composer::{compose_model, compose_orders};
use taylorfold::gradcheck::{check_composed_model, check_gradients};
use taylorfold::metrics::{psnr, ssim};
use taylorfold::nets::init_params;
use taylorfold::rng::SplitMix64;
use taylorfold::train::{lr_at, TrainConfig};
use taylorfold::{ComposerConfig, Graph, ModelSpec, RecurrenceVariant, Tensor, Var};
use taylorfold_cli::commands::{gradcheck_model, GRADCHECK_STEP};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const SEEDS: [u64; 3] = [1, 2, 3];
const TEST_SEED_OFFSET: u64 = 1000;
const TRAIN_IMAGES: &str = "200";
const TEST_IMAGES: &str = "50";
const IMAGE_SIZE: &str = "64";

fn cli(args: &[&str]) -> Check {
    let out = Command::new(env!("CARGO_BIN_EXE_taylorfold"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "`taylorfold {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn random(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.range(-1.0, 1.0))
}

fn weighted_sum(g: &mut Graph, v: Var, w: &Tensor) -> taylorfold::Result<Var> {
    let wv = g.constant(w.clone());
    let prod = g.mul(v, wv)?;
    Ok(g.sum(prod))
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let (spec, shape) = gradcheck_model();
    let mut composed = Vec::new();
    for variant in [RecurrenceVariant::WithKResidual, RecurrenceVariant::ConcatOnly] {
        let cfg = ComposerConfig {
            order: 3,
            variant,
            ..Default::default()
        };
        let r = check_composed_model(&spec, &cfg, shape, 7, GRADCHECK_STEP).map_err(|e| e.to_string())?;
        ensure!(r.max_rel_error < 1e-4, "{variant:?} composed error {:.3e}", r.max_rel_error);
        composed.push(r.max_rel_error);
    }

    let mut rng = SplitMix64::new(2024);
    let x = random(&[2, 3, 6, 6], &mut rng);
    let a = random(&[2, 3, 6, 6], &mut rng);
    let c = random(&[2, 2, 6, 6], &mut rng);
    let w = random(&[4, 3, 3, 3], &mut rng);
    let b = random(&[4], &mut rng);
    let wy = random(&[2, 4, 6, 6], &mut rng);
    let w3 = random(&[2, 3, 6, 6], &mut rng);
    let w5 = random(&[2, 5, 6, 6], &mut rng);
    let w2 = random(&[2, 2, 6, 6], &mut rng);
    type Program<'a> = Box<dyn Fn(&mut Graph, &[Var]) -> taylorfold::Result<Var> + 'a>;
    let ops: Vec<(&str, Vec<Tensor>, Program)> = vec![
        ("conv2d", vec![x.clone(), w.clone(), b.clone()], Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
            weighted_sum(g, y, &wy)
        })),
        ("relu", vec![x.clone()], Box::new(|g, v| {
            let y = g.relu(v[0]);
            weighted_sum(g, y, &w3)
        })),
        ("concat", vec![a.clone(), c.clone()], Box::new(|g, v| {
            let y = g.concat_channels(v[0], v[1])?;
            weighted_sum(g, y, &w5)
        })),
        ("slice", vec![a.clone()], Box::new(|g, v| {
            let y = g.slice_channels(v[0], 1, 3)?;
            weighted_sum(g, y, &w2)
        })),
        ("add", vec![a.clone(), x.clone()], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, &w3)
        })),
        ("mul", vec![a.clone(), x.clone()], Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, &w3)
        })),
        ("scale", vec![a.clone()], Box::new(|g, v| {
            let y = g.scale(v[0], 1.75);
            weighted_sum(g, y, &w3)
        })),
        ("mean", vec![a.clone()], Box::new(|g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.mean(y))
        })),
        ("l1_loss", vec![a.clone(), x.clone()], Box::new(|g, v| g.l1_loss(v[0], v[1]))),
    ];
    let mut worst = (0.0, "");
    for (name, params, f) in &ops {
        let err = check_gradients(f, params, 1e-5).map_err(|e| e.to_string())?;
        ensure!(err < 1e-6, "{name} per-op error {err:.3e}");
        if err >= worst.0 {
            worst = (err, name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!(
        "composed n=3 with_k_residual {:.2e}, concat_only {:.2e} (< 1e-4); per-op max {:.2e} ({}) (< 1e-6); {secs:.2} s",
        composed[0], composed[1], worst.0, worst.1
    ))
}

fn criterion_2() -> Check {
    let shape = [1, 3, 6, 6];
    let mut rng = SplitMix64::new(99);
    let f = random(&shape, &mut rng);
    let c = 0.37;
    let mut g = Graph::new();
    let y = g.constant(random(&shape, &mut rng));
    let cfg = ComposerConfig {
        order: 3,
        variant: RecurrenceVariant::WithKResidual,
        ..Default::default()
    };
    let trace = compose_orders(
        &mut g,
        y,
        &cfg,
        |g, _| Ok(g.constant(f.clone())),
        |g, _, _| Ok(g.constant(Tensor::full(shape, c))),
    )
    .map_err(|e| e.to_string())?;
    let v = trace.values(&g);
    let mut worst: f64 = 0.0;
    for (t, m) in v.terms.iter().zip([1.0, 2.0, 5.0]) {
        for e in t.data() {
            worst = worst.max((e - m * c).abs());
        }
    }
    for (o, fv) in v.output.data().iter().zip(f.data()) {
        worst = worst.max((o - (fv + 17.0 / 6.0 * c)).abs());
    }
    ensure!(v.terms.len() == 3 && worst <= 1e-12, "stub deviation {worst:e}");

    let spec = ModelSpec::desk();
    let params = init_params(&spec, 5);
    let input = Tensor::from_fn([1, 3, 16, 16], |_| rng.uniform());
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let yv = g.constant(input.clone());
    let zero = ComposerConfig {
        order: 0,
        ..Default::default()
    };
    let trace = compose_model(&mut g, &spec, &vars, yv, &zero).map_err(|e| e.to_string())?;
    let mut h = Graph::new();
    let vars_h = params.bind(&mut h);
    let yh = h.constant(input);
    let f_alone = spec.forward_f(&mut h, &vars_h, yh).map_err(|e| e.to_string())?;
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure!(bits(g.value(trace.output)) == bits(h.value(f_alone)), "order-0 output differs from F");
    Ok(format!("g = [c, 2c, 5c], O = f + 17/6 c within {worst:.1e}; n=0 output bit-identical to F"))
}

fn criterion_3() -> Check {
    let cfg = TrainConfig::default();
    let got: Vec<f64> = [0, 30, 50, 80].iter().map(|&e| lr_at(e, &cfg)).collect();
    ensure!(got == [1e-3, 2e-4, 4e-5, 8e-6], "lr_at gave {got:?}");
    Ok(format!("epochs 0/30/50/80 -> {got:?}"))
}

fn psnr_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel() as f64;
    10.0 * (1.0 / mse).log10()
}

fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let s = a.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let mut win = vec![0.0; 121];
    for i in 0..11 {
        for j in 0..11 {
            let d2 = ((i as f64) - 5.0).powi(2) + ((j as f64) - 5.0).powi(2);
            win[i * 11 + j] = (-d2 / 4.5).exp();
        }
    }
    let total: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (1e-4, 9e-4);
    let (mut sum, mut count) = (0.0, 0.0);
    for p in 0..planes {
        let px = |t: &Tensor, y: usize, x: usize| t.data()[(p * h + y) * w + x];
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let mut m = [0.0; 2];
                for k in 0..121 {
                    m[0] += win[k] * px(a, y0 + k / 11, x0 + k % 11);
                    m[1] += win[k] * px(b, y0 + k / 11, x0 + k % 11);
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for k in 0..121 {
                    let da = px(a, y0 + k / 11, x0 + k % 11) - m[0];
                    let db = px(b, y0 + k / 11, x0 + k % 11) - m[1];
                    va += win[k] * da * da;
                    vb += win[k] * db * db;
                    cov += win[k] * da * db;
                }
                sum += ((2.0 * m[0] * m[1] + c1) * (2.0 * cov + c2))
                    / ((m[0] * m[0] + m[1] * m[1] + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
    }
    sum / count
}

fn criterion_4() -> Check {
    let (mut dp, mut ds): (f64, f64) = (0.0, 0.0);
    for seed in 0..5u64 {
        let mut rng = SplitMix64::new(500 + seed);
        let shape = [1, 3, 20 + seed as usize, 24];
        let a = Tensor::from_fn(shape, |_| rng.uniform());
        let sigma = 0.02 * (seed + 1) as f64;
        let b = Tensor::from_fn(shape, |i| (a.data()[i] + sigma * rng.normal()).clamp(0.0, 1.0));
        dp = dp.max((psnr(&a, &b, 1.0).map_err(|e| e.to_string())? - psnr_oracle(&a, &b)).abs());
        ds = ds.max((ssim(&a, &b, 1.0).map_err(|e| e.to_string())? - ssim_oracle(&a, &b)).abs());
    }
    ensure!(dp < 1e-9, "PSNR deviation {dp:e}");
    ensure!(ds < 1e-6, "SSIM deviation {ds:e}");
    let mut rng = SplitMix64::new(7);
    let a = Tensor::from_fn([1, 3, 16, 16], |_| rng.uniform());
    let same_p = psnr(&a, &a, 1.0).map_err(|e| e.to_string())?;
    let same_s = ssim(&a, &a, 1.0).map_err(|e| e.to_string())?;
    ensure!(same_p == f64::INFINITY, "identical PSNR {same_p}");
    ensure!(same_s == 1.0, "identical SSIM {same_s}");
    Ok(format!("5 pairs: max PSNR dev {dp:.1e} (< 1e-9), max SSIM dev {ds:.1e} (< 1e-6); identical -> inf / 1"))
}

fn corpora(root: &Path, seed: u64) -> Check {
    for (name, s, count) in [("train", seed, TRAIN_IMAGES), ("test", seed + TEST_SEED_OFFSET, TEST_IMAGES)] {
        let dir = root.join(format!("{name}_{seed}"));
        if dir.join("manifest.tsv").exists() {
            continue;
        }
        cli(&[
            "synthesize", "--preset", "desk", "--kind", "rain", "--count", count, "--height", IMAGE_SIZE,
            "--width", IMAGE_SIZE, "--seed", &s.to_string(), "--out", p(&dir),
        ])?;
    }
    Ok(String::new())
}

fn sweep(root: &Path, seed: u64, orders: &str, out: &Path) -> Check {
    corpora(root, seed)?;
    let train = root.join(format!("train_{seed}"));
    let test = root.join(format!("test_{seed}"));
    cli(&[
        "sweep-order", "--preset", "desk", "--orders", orders, "--seed", &seed.to_string(), "--train-corpus",
        p(&train), "--test-corpus", p(&test), "--out", p(out),
    ])
}

/// `(order, psnr, ssim)` rows of a sweep table; every row must be `ok`.
fn read_sweep(path: &Path) -> Result<Vec<(usize, f64, f64)>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    ensure!(lines.next() == Some("order\tpsnr\tssim\tstatus"), "bad sweep header in {}", path.display());
    lines
        .map(|l| {
            let c: Vec<&str> = l.split('\t').collect();
            ensure!(c.len() == 4 && c[3] == "ok", "bad sweep row `{l}`");
            let parse = |s: &str| s.parse::<f64>().map_err(|e| format!("`{s}`: {e}"));
            let order = c[0].parse::<usize>().map_err(|e| e.to_string())?;
            let (ps, ss) = (parse(c[1])?, parse(c[2])?);
            ensure!(ps.is_finite() && ss.is_finite(), "non-finite metrics in `{l}`");
            Ok((order, ps, ss))
        })
        .collect()
}

fn criterion_5(root: &Path) -> Check {
    let start = Instant::now();
    let mut gains = Vec::new();
    let mut detail = Vec::new();
    let (mut sum0, mut sum3) = (0.0, 0.0);
    for seed in SEEDS {
        let out = root.join(format!("trend_{seed}"));
        sweep(root, seed, "0,3", &out)?;
        let rows = read_sweep(&out.join("sweep.tsv"))?;
        ensure!(rows.len() == 2 && rows[0].0 == 0 && rows[1].0 == 3, "unexpected rows {rows:?}");
        let (p0, p3) = (rows[0].1, rows[1].1);
        sum0 += p0;
        sum3 += p3;
        gains.push(p3 - p0);
        detail.push(format!("seed {seed}: {p0:.3} -> {p3:.3}"));
    }
    let n = SEEDS.len() as f64;
    let (mean0, mean3) = (sum0 / n, sum3 / n);
    let mean_gain = gains.iter().sum::<f64>() / n;
    let secs = start.elapsed().as_secs_f64();
    let summary = format!(
        "order-0 {mean0:.3} dB, order-3 {mean3:.3} dB, mean gain {mean_gain:+.3} dB ({}); {secs:.0} s",
        detail.join(", ")
    );
    ensure!(mean3 >= mean0 && mean_gain >= 0.05, "{summary}");
    ensure!(secs <= 1800.0, "over budget: {summary}");
    Ok(summary)
}

fn criterion_6(root: &Path) -> Check {
    let seed = SEEDS[0];
    let out = root.join("sweep_0_4");
    sweep(root, seed, "0..4", &out)?;
    let rows = read_sweep(&out.join("sweep.tsv"))?;
    let orders: Vec<usize> = rows.iter().map(|r| r.0).collect();
    ensure!(orders == [0, 1, 2, 3, 4], "orders {orders:?}");

    let plain = root.join("plain_f");
    let train = root.join(format!("train_{seed}"));
    let test = root.join(format!("test_{seed}"));
    cli(&[
        "train", "--preset", "desk", "--seed", &seed.to_string(), "--corpus", p(&train), "--order", "0", "--set",
        "model.g_features=none", "--out", p(&plain),
    ])?;
    let epochs = TrainConfig::desk().epochs;
    let ckpt = format!("ckpt_epoch{epochs:04}.bin");
    cli(&["eval", "--checkpoint", p(&plain.join(&ckpt)), "--corpus", p(&test), "--out", p(&plain)])?;

    let order0 = out.join("order_0");
    for f in ["loss.tsv", "metrics.tsv"] {
        let a = fs::read(order0.join(f)).map_err(|e| e.to_string())?;
        let b = fs::read(plain.join(f)).map_err(|e| e.to_string())?;
        ensure!(a == b, "order-0 {f} differs from plain F");
    }
    let swept = Checkpoint::load(order0.join(&ckpt)).map_err(|e| e.to_string())?;
    let alone = Checkpoint::load(plain.join(&ckpt)).map_err(|e| e.to_string())?;
    let mut compared = 0;
    for (name, t) in alone.tensors.iter().filter(|(n, _)| n.starts_with("F.")) {
        let u = swept.tensors.get(name).ok_or(format!("{name} missing from sweep checkpoint"))?;
        ensure!(t == u, "{name} differs");
        compared += 1;
    }
    let table: Vec<String> = rows.iter().map(|r| format!("{}:{:.3}/{:.4}", r.0, r.1, r.2)).collect();
    Ok(format!(
        "5 rows [{}]; order-0 loss log, metrics and {compared} F tensors equal plain F bit-for-bit",
        table.join(" ")
    ))
}

/// Every `loss.tsv`, `metrics.tsv`, `sweep.tsv`, checkpoint and corpus file
/// under `dir`, keyed by relative path.
fn artifacts(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).into_iter().flatten().flatten() {
            let path = e.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "config.echo") {
                let bytes = fs::read(&path).unwrap_or_default();
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}

fn criterion_7(first: &Path, second: &Path) -> Check {
    criterion_5(second).map_err(|e| format!("rerun of 5 failed: {e}"))?;
    criterion_6(second).map_err(|e| format!("rerun of 6 failed: {e}"))?;
    let (a, b) = (artifacts(first), artifacts(second));
    ensure!(a.len() == b.len(), "file sets differ: {} vs {}", a.len(), b.len());
    for ((pa, ba), (pb, bb)) in a.iter().zip(&b) {
        ensure!(pa == pb, "file sets differ at {}", pa.display());
        ensure!(ba == bb, "{} differs between runs", pa.display());
    }
    let logs = a.iter().filter(|(p, _)| p.ends_with("loss.tsv")).count();
    let tables = a
        .iter()
        .filter(|(p, _)| p.ends_with("metrics.tsv") || p.ends_with("sweep.tsv"))
        .count();
    Ok(format!("{} files identical, including {logs} loss logs and {tables} metric tables", a.len()))
}

fn criterion_8(root: &Path) -> Check {
    let data = root.join("resume_data");
    cli(&[
        "synthesize", "--kind", "rain", "--count", "16", "--height", "48", "--width", "48", "--seed", "8", "--out",
        p(&data),
    ])?;
    let (a, b) = (root.join("continuous"), root.join("split"));
    let common = ["--preset", "desk", "--seed", "8", "--corpus", p(&data), "--order", "3", "--set", "train.checkpoint_every=5"];
    let run = |epochs: &str, out: &Path, resume: Option<&Path>| {
        let mut args = vec!["train", "--epochs", epochs, "--out", p(out)];
        args.extend_from_slice(&common);
        if let Some(r) = resume {
            args.extend_from_slice(&["--resume", p(r)]);
        }
        cli(&args)
    };
    run("10", &a, None)?;
    run("5", &b, None)?;
    run("10", &b, Some(&b.join("ckpt_epoch0005.bin")))?;
    for f in ["ckpt_epoch0010.bin", "loss.tsv"] {
        let x = fs::read(a.join(f)).map_err(|e| e.to_string())?;
        let y = fs::read(b.join(f)).map_err(|e| e.to_string())?;
        ensure!(x == y, "{f} differs between continuous and split training");
    }
    let ck = Checkpoint::load(a.join("ckpt_epoch0010.bin")).map_err(|e| e.to_string())?;
    Ok(format!(
        "10 epochs vs 5 + resume 5 (order 3, {} steps): final checkpoint and loss log byte-identical",
        ck.meta("state.step").map_err(|e| e.to_string())?
    ))
}

fn report(id: u8, name: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &result {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} criterion {id} ({name}): {detail} [{secs:.1} s]");
    result.is_ok()
}

fn main() {
    // `cargo test -- --list` and filters probe the binary; run only when
    // invoked plainly or with the name of this target.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if let Some(filter) = args.iter().find(|a| !a.starts_with('-')) {
        if !"acceptance".contains(filter.as_str()) {
            return;
        }
    }

    let tmp = tempfile::tempdir().expect("temp dir");
    let (first, second) = (tmp.path().join("run_a"), tmp.path().join("run_b"));
    let start = Instant::now();
    let results = [
        report(1, "gradient correctness", criterion_1),
        report(2, "composer oracle", criterion_2),
        report(3, "learning-rate schedule", criterion_3),
        report(4, "metric oracles", criterion_4),
        report(5, "desk-scale order-3 vs order-0 trend", || criterion_5(&first)),
        report(6, "order sweep 0..4", || criterion_6(&first)),
        report(7, "determinism of 5-6", || criterion_7(&first, &second)),
        report(8, "checkpoint resume", || criterion_8(tmp.path())),
    ];
    let passed = results.iter().filter(|&&ok| ok).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.0} s",
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if passed != results.len() {
        std::process::exit(1);
    }
}
