use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
# small enough to train in well under a second
model.patch = 16
model.enc_width = 8
model.enc_layers = 1
model.enc_heads = 2
model.visual_vocab = 16
model.llm_width = 8
model.llm_layers = 1
model.llm_heads = 2
model.mlp_ratio = 2
train.stage1.steps = 3
train.stage2.steps = 3
train.stage3.steps = 3
train.batch_size = 4
";

struct Scratch(PathBuf);

impl Scratch {
    fn new(name: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("ovis-cli-{name}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        Self(dir)
    }

    fn path(&self, file: &str) -> PathBuf {
        self.0.join(file)
    }

    fn s(&self, file: &str) -> String {
        self.path(file).display().to_string()
    }

    fn write(&self, file: &str, text: &str) -> String {
        std::fs::write(self.path(file), text).unwrap();
        self.s(file)
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovis-toy")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

fn gen(dir: &Scratch, name: &str, seed: &str) -> String {
    let out = dir.s(name);
    ok(&[
        "gen-data", "--seed", seed, "--captions", "10", "--descriptions", "10", "--instructions", "12",
        "--heldout", "8", "--out", &out,
    ]);
    out
}

fn stage1(dir: &Scratch, data: &str, cfg: &str, ckpt: &str, extra: &[&str]) -> Vec<u8> {
    let ckpt = dir.s(ckpt);
    let mut args = vec!["train", "--stage", "1", "--data", data, "--config", cfg, "--ckpt-out", &ckpt];
    args.extend_from_slice(extra);
    ok(&args);
    read(&ckpt)
}

#[test]
fn gen_data_is_deterministic() {
    let dir = Scratch::new("gen");
    let a = gen(&dir, "a", "7");
    let b = gen(&dir, "b", "7");
    let c = gen(&dir, "c", "8");
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    let mut differs = false;
    for n in &names {
        let x = read(Path::new(&a).join(n));
        assert_eq!(x, read(Path::new(&b).join(n)), "{n:?}");
        differs |= x != read(Path::new(&c).join(n));
    }
    assert!(differs);
}

#[test]
fn later_stages_need_a_checkpoint() {
    let out = run(&["train", "--stage", "2", "--data", "x", "--ckpt-out", "y"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--ckpt-in"));
    assert_eq!(run(&["train", "--stage", "4", "--data", "x", "--ckpt-out", "y"]).status.code(), Some(2));
}

#[test]
fn grad_check_ops_exits_zero() {
    let out = ok(&["grad-check", "--scope", "ops", "--cases", "1"]);
    assert!(out.contains("max relative error"));
    assert_eq!(run(&["grad-check", "--cases", "1", "--tol", "0"]).status.code(), Some(1));
}

#[test]
fn staged_training_eval_and_sparsity() {
    let dir = Scratch::new("stages");
    let data = gen(&dir, "data", "1");
    let cfg = dir.write("tiny.cfg", TINY);
    let metrics = dir.s("metrics.tsv");
    let mut prev: Option<String> = None;
    for stage in 1..=3 {
        let out = dir.s(&format!("s{stage}.ckpt"));
        let st = stage.to_string();
        let mut args = vec!["train", "--stage", &st, "--data", &data, "--config", &cfg, "--ckpt-out", &out, "--metrics", &metrics];
        if let Some(p) = &prev {
            args.extend_from_slice(&["--ckpt-in", p]);
        }
        ok(&args);
        prev = Some(out);
    }
    let log = String::from_utf8(read(&metrics)).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 9);
    for (i, l) in lines.iter().enumerate() {
        let f: Vec<&str> = l.split('\t').collect();
        assert_eq!(f.len(), 4);
        assert_eq!(f[1], (i / 3 + 1).to_string());
        assert!(f[3].parse::<f64>().unwrap().is_finite());
    }

    // A checkpoint from the wrong stage is refused with a one-line diagnostic.
    let bad = run(&[
        "train", "--stage", "3", "--data", &data, "--config", &cfg, "--ckpt-in", &dir.s("s1.ckpt"), "--ckpt-out",
        &dir.s("bad.ckpt"),
    ]);
    assert_eq!(bad.status.code(), Some(1));
    assert_eq!(String::from_utf8_lossy(&bad.stderr).lines().count(), 1);

    let s3 = dir.s("s3.ckpt");
    let e = ok(&["eval", "--ckpt", &s3, "--data", &data, "--metric", "token-accuracy", "--detail"]);
    let acc: f64 = e.lines().next().unwrap().split('\t').nth(1).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(e, ok(&["eval", "--ckpt", &s3, "--data", &data, "--detail"]));

    let table = dir.s("sparsity.tsv");
    let s = ok(&["sparsity", "--ckpt", &s3, "--data", &data, "--thresholds", "1e-4,1e-5,1e-6", "--out", &table]);
    assert_eq!(s.as_bytes(), read(&table));
    let rows: Vec<&str> = s.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    let total: f64 = rows.iter().map(|r| r.split('\t').nth(2).unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-6);
    assert_eq!(run(&["sparsity", "--ckpt", &s3, "--data", &data, "--thresholds", "1e-6,1e-4"]).status.code(), Some(1));

    let mut corrupt = read(&s3);
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x40;
    std::fs::write(dir.path("corrupt.ckpt"), corrupt).unwrap();
    assert_eq!(run(&["eval", "--ckpt", &dir.s("corrupt.ckpt"), "--data", &data]).status.code(), Some(1));
}

#[test]
fn compare_rows_merge_into_a_report() {
    let dir = Scratch::new("compare");
    let data = gen(&dir, "data", "2");
    let cfg = dir.write("tiny.cfg", TINY);
    let rows = dir.s("rows.tsv");
    for arch in ["ovis", "connector"] {
        ok(&["compare", "--arch", arch, "--data", &data, "--config", &cfg, "--out", &rows]);
    }
    let text = String::from_utf8(read(&rows)).unwrap();
    assert_eq!(text.lines().count(), 3);
    let report = ok(&["compare-report", &rows]);
    assert!(report.contains("Ovis") && report.contains("Connector"));
    assert_eq!(report, ok(&["compare-report", &rows]));
    assert_eq!(run(&["compare-report", &dir.s("missing.tsv")]).status.code(), Some(1));
}

/// Flag beats config file beats built-in default, one knob at a time.
#[test]
fn config_precedence_per_knob() {
    let dir = Scratch::new("precedence");
    let data = gen(&dir, "data", "3");
    let base = dir.write("base.cfg", TINY);
    let def = stage1(&dir, &data, &base, "def.ckpt", &[]);

    // seed
    let file = dir.write("seed.cfg", &format!("{TINY}seed = 5\n"));
    let from_file = stage1(&dir, &data, &file, "seed_file.ckpt", &[]);
    assert_ne!(from_file, def);
    assert_eq!(from_file, stage1(&dir, &data, &base, "seed_flag5.ckpt", &["--seed", "5"]));
    assert_eq!(def, stage1(&dir, &data, &file, "seed_flag0.ckpt", &["--seed", "0"]));

    // batch size
    let file = dir.write("batch.cfg", &format!("{TINY}train.batch_size = 2\n"));
    let from_file = stage1(&dir, &data, &file, "batch_file.ckpt", &[]);
    assert_ne!(from_file, def);
    assert_eq!(from_file, stage1(&dir, &data, &base, "batch_flag2.ckpt", &["--batch-size", "2"]));
    assert_eq!(def, stage1(&dir, &data, &file, "batch_flag4.ckpt", &["--batch-size", "4"]));

    // steps and lr, read back from the metrics log
    let file = dir.write("stage.cfg", &format!("{TINY}train.stage1.steps = 5\ntrain.stage1.lr = 0.25\n"));
    let log = |extra: &[&str], name: &str| {
        let m = dir.s(name);
        let mut args = vec!["--metrics", m.as_str()];
        args.extend_from_slice(extra);
        stage1(&dir, &data, &file, &format!("{name}.ckpt"), &args);
        String::from_utf8(read(&m)).unwrap()
    };
    let peak = |text: &str| {
        text.lines()
            .map(|l| l.split('\t').nth(2).unwrap().parse::<f64>().unwrap())
            .fold(0.0, f64::max)
    };
    let file_only = log(&[], "file.tsv");
    assert_eq!(file_only.lines().count(), 5);
    assert!(peak(&file_only) <= 0.25 && peak(&file_only) > 0.1);
    let flags = log(&["--steps", "7", "--lr", "0.001"], "flags.tsv");
    assert_eq!(flags.lines().count(), 7);
    assert!(peak(&flags) <= 0.001 && peak(&flags) > 0.0004);
    let set = log(&["--set", "train.stage1.steps=6"], "set.tsv");
    assert_eq!(set.lines().count(), 6);

    // Built-in defaults apply when neither file nor flag names a knob.
    let default_steps = dir.s("default.tsv");
    ok(&["train", "--stage", "1", "--data", &data, "--ckpt-out", &dir.s("d.ckpt"), "--metrics", &default_steps,
        "--set", "model.patch=16", "--set", "model.enc_width=8", "--set", "model.enc_layers=1",
        "--set", "model.visual_vocab=16", "--set", "model.llm_width=8", "--set", "model.llm_layers=1",
        "--set", "model.enc_heads=2", "--set", "model.llm_heads=2", "--batch-size", "1"]);
    assert_eq!(String::from_utf8(read(&default_steps)).unwrap().lines().count(), 500);
}

#[test]
fn bad_config_is_a_one_line_error() {
    let dir = Scratch::new("badcfg");
    let data = gen(&dir, "data", "4");
    let cfg = dir.write("bad.cfg", "model.nonsense = 3\n");
    let out = run(&["train", "--stage", "1", "--data", &data, "--config", &cfg, "--ckpt-out", &dir.s("x.ckpt")]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error:"));
}
