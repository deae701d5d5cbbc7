use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fuse_core::checkpoint;
use fuse_core::taxonomy;
use fuse_core::trainer::{self, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fuse")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small synthetic taxonomy plus a quick trained model.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
}

impl Fixture {
    fn taxonomy(&self) -> PathBuf {
        self.data.join("taxonomy.tsv")
    }

    fn embeddings(&self) -> PathBuf {
        self.data.join("embeddings.tsv")
    }
}

const QUICK: &[&str] = &["--d", "24", "--hidden", "16", "--epochs", "20"];

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert_eq!(code(&fuse(&["synth", "--out-dir", s(&data)])), 0);
    let (taxonomy, embeddings) = (data.join("taxonomy.tsv"), data.join("embeddings.tsv"));
    let mut args = vec!["train", "--taxonomy", s(&taxonomy), "--embeddings", s(&embeddings), "--out-dir", s(&run)];
    args.extend_from_slice(QUICK);
    let out = fuse(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    Fixture { _dir: dir, data, run }
}

fn eval(f: &Fixture, queries: &Path, mode: &str, out_dir: &Path) -> Output {
    fuse(&[
        "eval",
        "--checkpoint",
        s(&f.run.join("checkpoint.fuse")),
        "--taxonomy",
        s(&f.run.join("train_taxonomy.tsv")),
        "--embeddings",
        s(&f.embeddings()),
        "--queries",
        s(queries),
        "--score-mode",
        mode,
        "--out-dir",
        s(out_dir),
    ])
}

fn metric(dir: &Path, name: &str) -> f64 {
    fs::read_to_string(dir.join("metrics.tsv"))
        .unwrap()
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{name}\t")).map(|v| v.parse().unwrap()))
        .unwrap()
}

#[test]
fn missing_embeddings_exit_2_and_name_the_path() {
    let f = fixture();
    let missing = f.data.join("absent.tsv");
    let out = fuse(&["train", "--taxonomy", s(&f.taxonomy()), "--embeddings", s(&missing), "--out-dir", s(&f.run)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn embeddings_missing_a_term_exit_2() {
    let f = fixture();
    let partial = f.data.join("partial.tsv");
    let text = fs::read_to_string(f.embeddings()).unwrap();
    fs::write(&partial, text.lines().skip(1).map(|l| format!("{l}\n")).collect::<String>()).unwrap();
    let out = fuse(&["train", "--taxonomy", s(&f.taxonomy()), "--embeddings", s(&partial), "--out-dir", s(&f.run)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("partial.tsv"));
}

#[test]
fn zero_epochs_writes_an_untrained_checkpoint() {
    let f = fixture();
    let out_dir = f.run.join("untrained");
    let (t, e) = (f.taxonomy(), f.embeddings());
    let mut args = vec!["train", "--taxonomy", s(&t), "--embeddings", s(&e), "--out-dir", s(&out_dir)];
    args.extend_from_slice(&["--epochs", "0"]);
    assert_eq!(code(&fuse(&args)), 0);
    assert_eq!(fs::read_to_string(out_dir.join("train_log.tsv")).unwrap().lines().count(), 1);

    let train = taxonomy::load_taxonomy(&out_dir.join("train_taxonomy.tsv")).unwrap();
    let table = taxonomy::load_embeddings(&e, &train).unwrap();
    let config = TrainConfig { epochs: 0, ..TrainConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = trainer::init_model(&config, table.dim(), &mut rng).unwrap();
    let saved = checkpoint::load_checkpoint(&out_dir.join("checkpoint.fuse")).unwrap();
    assert_eq!(saved.to_model().unwrap(), init);
}

#[test]
fn eval_score_modes_and_metric_rows() {
    let f = fixture();
    for mode in ["containment", "psi", "sum"] {
        let dir = f.run.join(format!("eval-{mode}"));
        let out = eval(&f, &f.run.join("test_queries.tsv"), mode, &dir);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let text = fs::read_to_string(dir.join("metrics.tsv")).unwrap();
        let keys: Vec<&str> = text.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
        assert_eq!(keys, ["acc", "mrr", "wup"]);
        for k in keys {
            assert!((0.0..=1.0).contains(&metric(&dir, k)));
        }
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(stdout.contains("containment\t") && stdout.contains("psi\t"));
    }
    assert_eq!(code(&eval(&f, &f.run.join("test_queries.tsv"), "cosine", &f.run)), 64);
}

#[test]
fn training_edges_score_at_least_as_well_as_held_out_queries() {
    let f = fixture();
    // every training edge doubles as a query with a known parent
    let train_edges = fs::read_to_string(f.run.join("train_taxonomy.tsv")).unwrap();
    let train_queries = f.run.join("train_queries.tsv");
    fs::write(&train_queries, &train_edges).unwrap();
    let seen = f.run.join("eval-seen");
    let unseen = f.run.join("eval-unseen");
    assert_eq!(code(&eval(&f, &train_queries, "containment", &seen)), 0);
    assert_eq!(code(&eval(&f, &f.run.join("test_queries.tsv"), "containment", &unseen)), 0);
    assert!(metric(&seen, "acc") >= metric(&unseen, "acc"), "{} < {}", metric(&seen, "acc"), metric(&unseen, "acc"));
}

#[test]
fn bad_checkpoints_exit_3() {
    let f = fixture();
    let ckpt = f.run.join("checkpoint.fuse");
    let queries = f.run.join("test_queries.tsv");
    let original = fs::read_to_string(&ckpt).unwrap();
    fs::write(&ckpt, original.replacen("fuse-checkpoint v1", "fuse-checkpoint v2", 1)).unwrap();
    let out = eval(&f, &queries, "containment", &f.run.join("e"));
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));

    let mut bytes = original.into_bytes();
    let i = bytes.len() / 2;
    bytes[i] = if bytes[i] == b'1' { b'2' } else { b'1' };
    fs::write(&ckpt, bytes).unwrap();
    assert_eq!(code(&eval(&f, &queries, "containment", &f.run.join("e"))), 3);
}

#[test]
fn approx_identity_gaps() {
    let out = fuse(&["approx", "--function", "identity", "--ns", "2,4"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let gaps: Vec<f64> = text.lines().skip(1).map(|l| l.split('\t').nth(3).unwrap().parse().unwrap()).collect();
    assert_eq!(gaps.len(), 2);
    assert!((gaps[0] - 0.25).abs() < 1e-12 && (gaps[1] - 0.125).abs() < 1e-12, "{gaps:?}");
}

#[test]
fn approx_assertions() {
    assert_eq!(code(&fuse(&["approx", "--function", "constant:0.3", "--assert"])), 0);
    let ns = "64,128,256,512";
    assert_eq!(code(&fuse(&["approx", "--function", "gaussian:0.5,0.02", "--ns", ns, "--assert"])), 0);
    assert_eq!(code(&fuse(&["approx", "--function", "wobbly", "--assert"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.tsv");
    assert_eq!(code(&fuse(&["approx", "--function", "identity", "--ns", "2,4", "--out", s(&path)])), 0);
    assert_eq!(fs::read_to_string(path).unwrap().lines().count(), 3);
}

#[test]
fn synth_writes_the_default_tree() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&fuse(&["synth", "--out-dir", s(dir.path())])), 0);
    let edges = fs::read_to_string(dir.path().join("taxonomy.tsv")).unwrap();
    assert_eq!(edges.lines().count(), 84);
    assert_eq!(fs::read_to_string(dir.path().join("embeddings.tsv")).unwrap().lines().count(), 85);
    assert!(dir.path().join("manifest.tsv").is_file());
}

#[test]
fn gradcheck_passes_and_catches_a_broken_gradient() {
    let out = fuse(&["gradcheck", "--init", "zero"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("max_rel_error\t"));
    assert_eq!(code(&fuse(&["gradcheck", "--init", "random"])), 0);
    assert_eq!(code(&fuse(&["gradcheck", "--corrupt-gradient"])), 1);
}

#[test]
fn gradcheck_on_a_trained_checkpoint() {
    let f = fixture();
    let out = fuse(&[
        "gradcheck",
        "--checkpoint",
        s(&f.run.join("checkpoint.fuse")),
        "--taxonomy",
        s(&f.run.join("train_taxonomy.tsv")),
        "--embeddings",
        s(&f.embeddings()),
        "--max-coordinates",
        "300",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn config_file_and_flag_overrides() {
    let f = fixture();
    let cfg = f.data.join("train.cfg");
    fs::write(&cfg, "d=12\nhidden=8\nepochs=1\n").unwrap();
    let out_dir = f.run.join("cfg");
    let (t, e) = (f.taxonomy(), f.embeddings());
    let args = ["train", "--taxonomy", s(&t), "--embeddings", s(&e), "--out-dir", s(&out_dir)];
    let mut with_cfg = args.to_vec();
    with_cfg.extend_from_slice(&["--config", s(&cfg), "--d", "10"]);
    assert_eq!(code(&fuse(&with_cfg)), 0);
    let ckpt = fs::read_to_string(out_dir.join("checkpoint.fuse")).unwrap();
    assert!(ckpt.contains("\nd=10\n") && ckpt.contains("\nhidden=8\n"));

    fs::write(&cfg, "colour=blue\n").unwrap();
    let mut bad = args.to_vec();
    bad.extend_from_slice(&["--config", s(&cfg)]);
    assert_eq!(code(&fuse(&bad)), 2);
    let mut bad_value = args.to_vec();
    bad_value.extend_from_slice(&["--learning-rate", "fast"]);
    assert_eq!(code(&fuse(&bad_value)), 2);
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(code(&fuse(&["train", "--no-such-flag"])), 64);
    assert_eq!(code(&fuse(&["frobnicate"])), 64);
    assert_eq!(code(&fuse(&[])), 64);
    let config_flags = [
        "--config",
        "--d",
        "--hidden",
        "--output-norm",
        "--weight-norm",
        "--lambda",
        "--gamma-p",
        "--gamma-n",
        "--k-rank-negatives",
        "--k-asym-negatives",
        "--learning-rate",
        "--epochs",
        "--batch-size",
        "--seed",
        "--euclid-norm-in-score",
        "--logic",
    ];
    let commands: [(&str, &[&str]); 5] = [
        ("train", &["--taxonomy", "--embeddings", "--out-dir", "--test-fraction", "--split-seed", "--no-split"]),
        (
            "eval",
            &[
                "--checkpoint",
                "--taxonomy",
                "--embeddings",
                "--queries",
                "--score-mode",
                "--union",
                "--complement",
                "--out-dir",
            ],
        ),
        ("approx", &["--function", "--lo", "--hi", "--ns", "--resolution", "--assert", "--out"]),
        ("synth", &["--depth", "--branching", "--dim", "--noise", "--seed", "--out-dir"]),
        ("gradcheck", &["--checkpoint", "--taxonomy", "--embeddings", "--init", "--batch", "--max-coordinates"]),
    ];
    for (cmd, flags) in commands {
        let out = fuse(&[cmd, "--help"]);
        assert_eq!(code(&out), 0);
        let help = String::from_utf8(out.stdout).unwrap();
        let takes_config = cmd == "train" || cmd == "gradcheck";
        for flag in flags.iter().chain(if takes_config { &config_flags[..] } else { &[] }) {
            assert!(
                help.contains(&format!("{flag} ")) || help.contains(&format!("{flag}\n")),
                "{cmd}: {flag} missing from help"
            );
        }
    }
    assert!(!fuse(&["--version"]).stdout.is_empty());
}
