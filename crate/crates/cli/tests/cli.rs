use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clap::Parser;
use proptest::prelude::*;
use taylorfold::checkpoint::{self, Checkpoint};
use taylorfold::nets::zero_params;
use taylorfold::{ComposerConfig, ModelSpec};
use taylorfold_cli::cli::{resolve, Cli};
use taylorfold_cli::config::KEYS;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taylorfold"))
        .args(args)
        .output()
        .expect("spawn taylorfold")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Two distinct, parseable values for every key.
fn values(key: &str) -> [&'static str; 2] {
    match key {
        "preset" => ["paper", "desk"],
        "out" | "train.corpus" | "train.resume" | "eval.corpus" | "eval.checkpoint" => ["a/b", "c"],
        "data.kind" => ["rain", "blur"],
        "blur.kernel" => ["box", "motion"],
        "model.g_features" => ["none", "7"],
        "composer.variant" => ["with_k_residual", "concat_only"],
        "composer.seed_term" => ["f_out", "input"],
        "train.decay_epochs" | "sweep.orders" => ["1,2", "3"],
        "train.frozen" => ["G.", "F.conv_in,G.conv2"],
        k if k.starts_with("rain.")
            && !k.starts_with("rain.streaks") =>
        {
            ["0.5", "2.25"]
        }
        k if k.starts_with("blur.") && k != "blur.size" => ["0.5", "2.25"],
        "composer.lambda" | "train.lr" | "train.decay_factor" | "train.beta1" | "train.beta2"
        | "train.eps" | "train.output_init_scale" => ["0.5", "0.125"],
        _ => ["3", "11"],
    }
}

fn parse(args: &[String]) -> taylorfold_cli::RunConfig {
    let cli = Cli::try_parse_from(std::iter::once("taylorfold".to_owned()).chain(args.iter().cloned())).unwrap();
    resolve(&cli).unwrap()
}

#[test]
fn every_key_accepts_its_test_values() {
    for key in KEYS {
        for v in values(key) {
            let cfg = parse(&["--set".into(), format!("{key}={v}"), "gradcheck".into()]);
            assert_eq!(cfg.get(key).unwrap(), v, "{key}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn flags_override_config_file(k in 0..KEYS.len(), flip in any::<bool>()) {
        let key = KEYS[k];
        let [a, b] = values(key);
        let (file_v, flag_v) = if flip { (b, a) } else { (a, b) };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, format!("# test\n{key} = {file_v}\n")).unwrap();
        let from_file = parse(&["--config".into(), s(&path).into(), "gradcheck".into()]);
        prop_assert_eq!(from_file.get(key).unwrap(), file_v);
        let cfg = parse(&[
            "--config".into(), s(&path).into(),
            "--set".into(), format!("{key}={flag_v}"),
            "gradcheck".into(),
        ]);
        prop_assert_eq!(cfg.get(key).unwrap(), flag_v);
    }
}

#[test]
fn named_flags_override_file_and_set() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    fs::write(&path, "seed = 1\nout = x\npreset = paper\ndata.count = 2\ntrain.epochs = 4\ncomposer.order = 1\n").unwrap();
    let cfg = parse(
        &[
            "--config", s(&path), "--set", "seed=2", "--seed", "3", "--out", "y", "--preset", "desk",
            "synthesize", "--count", "9",
        ]
        .map(String::from),
    );
    assert_eq!((cfg.seed, cfg.out.clone(), cfg.count), (3, PathBuf::from("y"), 9));
    assert_eq!(cfg.train.epochs, 4);
    assert_eq!(cfg.train.patch, 32);
    let cfg = parse(&["--config", s(&path), "train", "--epochs", "7", "--order", "2"].map(String::from));
    assert_eq!((cfg.train.epochs, cfg.composer.order), (7, 2));
}

fn synth(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["synthesize", "--out", s(dir)];
    args.extend_from_slice(extra);
    bin(&args)
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synthesize_writes_reproducible_corpus() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let args = ["--kind", "rain", "--count", "8", "--seed", "7"];
    let o = synth(&a, &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("8 rain samples (seed 7)"));
    let files = read_dir_bytes(&a);
    assert_eq!(files.iter().filter(|(n, _)| n.ends_with(".ppm")).count(), 16);
    assert!(files.iter().any(|(n, _)| n == "manifest.tsv"));
    assert!(files.iter().any(|(n, _)| n == "config.echo"));
    synth(&a, &args);
    assert_eq!(read_dir_bytes(&a), files);

    // config.echo records the output directory, so it alone differs.
    synth(&b, &args);
    let strip = |mut v: Vec<(String, Vec<u8>)>| {
        v.retain(|(n, _)| n != "config.echo");
        v
    };
    assert_eq!(strip(read_dir_bytes(&b)), strip(files));
}

#[test]
fn exit_codes() {
    let root = tempfile::tempdir().unwrap();
    assert_eq!(code(&synth(root.path(), &["--count", "0"])), 2);
    assert_eq!(code(&bin(&["gradcheck", "--set", "no.such=1"])), 2);
    assert_eq!(code(&bin(&["gradcheck", "--set", "seed=-4"])), 2);
    assert_eq!(code(&bin(&["frobnicate"])), 2);
    let missing = root.path().join("missing");
    assert_eq!(
        code(&bin(&["eval", "--checkpoint", s(&missing), "--corpus", s(&missing), "--out", s(root.path())])),
        3
    );
    assert_eq!(code(&bin(&["train", "--out", s(root.path())])), 2);
}

#[test]
fn gradcheck_passes_for_both_variants() {
    let root = tempfile::tempdir().unwrap();
    let o = bin(&["gradcheck", "--seed", "7", "--out", s(root.path())]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for variant in ["with_k_residual", "concat_only"] {
        let line = text.lines().find(|l| l.starts_with(variant)).unwrap();
        let err: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
        assert!(err < 1e-4, "{line}");
    }
}

const TINY: [&str; 8] = [
    "--preset", "desk", "--set", "train.patch=12", "--set", "model.f_features=4", "--set", "model.g_features=4",
];

fn tiny_corpus(dir: &Path, extra: &[&str]) {
    let mut args = vec!["--count", "4", "--set", "data.height=16", "--set", "data.width=16"];
    args.extend_from_slice(extra);
    assert_eq!(code(&synth(dir, &args)), 0);
}

#[test]
fn train_then_eval_writes_documented_files() {
    let root = tempfile::tempdir().unwrap();
    let (data, run, ev) = (root.path().join("data"), root.path().join("run"), root.path().join("eval"));
    tiny_corpus(&data, &[]);
    let mut args = vec!["train", "--corpus", s(&data), "--epochs", "2", "--order", "2", "--out", s(&run)];
    args.extend_from_slice(&TINY);
    let o = bin(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.echo", "loss.tsv", "ckpt_epoch0002.bin"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let ck = run.join("ckpt_epoch0002.bin");
    let o = bin(&["eval", "--checkpoint", s(&ck), "--corpus", s(&data), "--out", s(&ev)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(ev.join("metrics.tsv")).unwrap();
    assert!(metrics.starts_with("index\tfile\tpsnr\tssim\n"));
    assert_eq!(metrics.lines().count(), 6);

    let loss = fs::read_to_string(run.join("loss.tsv")).unwrap();
    let mut resume = vec!["train", "--corpus", s(&data), "--epochs", "3", "--resume", s(&ck), "--out", s(&run)];
    resume.extend_from_slice(&TINY);
    assert_eq!(code(&bin(&resume)), 0);
    let resumed = fs::read_to_string(run.join("loss.tsv")).unwrap();
    assert!(resumed.starts_with(&loss) && resumed.len() > loss.len());
    assert!(run.join("ckpt_epoch0003.bin").exists());
}

#[test]
fn diverging_training_exits_four() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    tiny_corpus(&data, &[]);
    let mut args = vec!["train", "--corpus", s(&data), "--epochs", "5", "--out", s(root.path()), "--set", "train.lr=1e300"];
    args.extend_from_slice(&TINY);
    let o = bin(&args);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lr"));
}

#[test]
fn zero_checkpoint_on_clean_corpus_scores_perfectly() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    tiny_corpus(&data, &["--set", "rain.streaks_min=0", "--set", "rain.streaks_max=0"]);
    let spec = ModelSpec::desk();
    let mut ck = Checkpoint::default();
    checkpoint::put_model_spec(&mut ck, &spec);
    checkpoint::put_composer(&mut ck, &ComposerConfig::default());
    ck.put_params(&zero_params(&spec));
    let path = root.path().join("zero.bin");
    ck.save(&path).unwrap();
    let out = root.path().join("eval");
    assert_eq!(code(&bin(&["eval", "--checkpoint", s(&path), "--corpus", s(&data), "--out", s(&out)])), 0);
    let metrics = fs::read_to_string(out.join("metrics.tsv")).unwrap();
    for line in metrics.lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols[2], "inf");
        assert!((cols[3].parse::<f64>().unwrap() - 1.0).abs() < 1e-9);
    }
}

fn sweep(root: &Path, data: &Path, orders: &str, jobs: &str, out: &str, extra: &[&str]) -> Output {
    let out = root.join(out);
    let mut args = vec![
        "sweep-order", "--orders", orders, "--jobs", jobs, "--train-corpus", s(data), "--test-corpus", s(data),
        "--out", s(&out), "--set", "train.epochs=2",
    ];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(extra);
    bin(&args)
}

#[test]
fn sweep_order_zero_is_plain_mapping() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    tiny_corpus(&data, &[]);
    let o = sweep(root.path(), &data, "0", "1", "sweep", &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(root.path().join("sweep/sweep.tsv")).unwrap();
    assert_eq!(table.lines().count(), 2);

    let plain = root.path().join("plain");
    let mut args = vec![
        "train", "--corpus", s(&data), "--order", "0", "--out", s(&plain), "--set", "train.epochs=2",
    ];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(&["--set", "model.g_features=none"]);
    assert_eq!(code(&bin(&args)), 0);
    let ck = plain.join("ckpt_epoch0002.bin");
    assert_eq!(code(&bin(&["eval", "--checkpoint", s(&ck), "--corpus", s(&data), "--out", s(&plain)])), 0);
    let order0 = root.path().join("sweep/order_0");
    for f in ["loss.tsv", "metrics.tsv"] {
        assert_eq!(fs::read(order0.join(f)).unwrap(), fs::read(plain.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn sweep_marks_failures_and_keeps_partial_table() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    tiny_corpus(&data, &[]);
    let o = sweep(root.path(), &data, "0,1", "2", "sweep", &["--set", "model.g_features=none"]);
    assert_eq!(code(&o), 1);
    let table = fs::read_to_string(root.path().join("sweep/sweep.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("0\t") && rows[1].ends_with("\tok"));
    assert!(rows[2].starts_with("1\t-\t-\tfailed"));
}

#[test]
fn sweep_is_independent_of_job_count() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    tiny_corpus(&data, &[]);
    assert_eq!(code(&sweep(root.path(), &data, "0..2", "1", "serial", &[])), 0);
    assert_eq!(code(&sweep(root.path(), &data, "0..2", "3", "parallel", &[])), 0);
    let table = |d: &str| fs::read_to_string(root.path().join(d).join("sweep.tsv")).unwrap();
    assert_eq!(table("serial"), table("parallel"));
    assert_eq!(table("serial").lines().count(), 4);
}
