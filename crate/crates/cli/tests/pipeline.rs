use std::path::Path;
use std::process::{Command, Output};

fn biospeech(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biospeech"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = biospeech(args);
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(out.status.success(), "{args:?} failed:\n{stderr}");
    stderr
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SYNTH: &str = "n_test = 2\nn_eeg = 6\nn_emg = 2\nphonemes_min = 2\nphonemes_max = 6\ngap_ms = 300\nmodes = overt,imagined\n";
const TRAIN: &str = "model = compact\nconv_channels = 8\ngroups = 2\ngru_hidden = 4\nmax_epochs = 2\nseq_len = 256\nval_fraction = 0.25\n";

struct Fixture {
    _dir: tempfile::TempDir,
    root: std::path::PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("synth.txt"), SYNTH).unwrap();
        std::fs::write(root.join("train.txt"), TRAIN).unwrap();
        ok(&[
            "synth",
            "--config",
            p(&root.join("synth.txt")),
            "--sentences",
            "6",
            "--seed",
            "7",
            "--out-dir",
            p(&root.join("data")),
        ]);
        Self { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> std::path::PathBuf {
        self.root.join(rel)
    }

    fn train(&self, out: &str, extra: &[&str]) -> String {
        let mut args = vec![
            "train",
            "--config",
            self.root.join("train.txt").to_str().unwrap(),
            "--data-dir",
            self.root.join("data").to_str().unwrap(),
            "--out-dir",
            self.root.join(out).to_str().unwrap(),
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
        args.extend(extra.iter().map(|s| s.to_string()));
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
    }
}

#[test]
fn synth_train_eval_analyze() {
    let f = Fixture::new();
    assert!(f.path("data/manifest.tsv").exists());
    assert!(f.path("data/config.txt").exists());
    assert_eq!(std::fs::read_to_string(f.path("data/split.txt")).unwrap().lines().filter(|l| l.starts_with('s')).count(), 2);

    let log = f.train("run", &["--mode", "overt"]);
    assert!(log.contains("with loss overt"), "{log}");
    for file in ["model.ckpt", "train_log.csv", "train.log", "config.txt", "run.txt"] {
        assert!(f.path("run").join(file).exists(), "missing {file}");
    }
    let resolved = std::fs::read_to_string(f.path("run/config.txt")).unwrap();
    assert!(resolved.contains("in_channels = 8"), "{resolved}");
    assert!(resolved.contains("seed = 0"), "{resolved}");

    ok(&[
        "eval",
        "--run-dir",
        p(&f.path("run")),
        "--data-dir",
        p(&f.path("data")),
        "--out-dir",
        p(&f.path("eval")),
    ]);
    let csv = std::fs::read_to_string(f.path("eval/eval.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "sentence_id,phoneme_accuracy,rmse,mcd,f1,error_rate");
    assert_eq!(rows.len(), 1 + 2 + 1, "{csv}");
    for row in &rows[1..] {
        for v in row.split(',').skip(1) {
            assert!(v.parse::<f64>().unwrap().is_finite(), "{row}");
        }
    }
    assert!(f.path("eval/eval_confusion.svg").exists());

    ok(&[
        "analyze",
        "--data-dir",
        p(&f.path("data")),
        "--out-dir",
        p(&f.path("analysis")),
        "--report",
        p(&f.path("eval/eval.csv")),
    ]);
    for file in ["w_scores.csv", "sentence_properties.csv", "config.txt"] {
        assert!(f.path("analysis").join(file).exists(), "missing {file}");
    }
    let w = std::fs::read_to_string(f.path("analysis/w_scores.csv")).unwrap();
    assert_eq!(w.lines().count(), 41);
}

#[test]
fn analyze_correlates_and_compares_reports() {
    let f = Fixture::new();
    let split = std::fs::read_to_string(f.path("data/split.txt")).unwrap();
    let held: Vec<&str> = split.lines().filter(|l| !l.starts_with('#')).collect();
    // Four held out for the correlation; the reports cover all six sentences.
    let all: Vec<String> = (0..6).map(|i| format!("s{i:04}")).collect();
    std::fs::write(f.path("four.txt"), all[..4].join("\n")).unwrap();
    let header = "sentence_id,phoneme_accuracy,rmse,mcd,f1,error_rate\n";
    let mut a = String::from(header);
    let mut b = String::from(header);
    for (i, id) in all.iter().enumerate() {
        let x = 20.0 + 7.0 * i as f64 + (i % 2) as f64;
        a.push_str(&format!("{id},{x},1,2,0.5,0.4\n"));
        b.push_str(&format!("{id},{},1,2,0.5,0.4\n", x - 3.0 - i as f64));
    }
    std::fs::write(f.path("a.csv"), a).unwrap();
    std::fs::write(f.path("b.csv"), b).unwrap();
    assert_eq!(held.len(), 2);
    ok(&[
        "analyze",
        "--data-dir",
        p(&f.path("data")),
        "--split-file",
        p(&f.path("four.txt")),
        "--out-dir",
        p(&f.path("analysis")),
        "--report",
        p(&f.path("a.csv")),
        "--baseline",
        p(&f.path("b.csv")),
    ]);
    let props = std::fs::read_to_string(f.path("analysis/properties.csv")).unwrap();
    assert_eq!(props.lines().filter(|l| l.starts_with("s0")).count(), 4, "{props}");
    assert!(props.contains("# pcc_length"));
    assert!(std::fs::read_to_string(f.path("analysis/properties.svg")).unwrap().contains("PCC = "));
    let wil = std::fs::read_to_string(f.path("analysis/wilcoxon.csv")).unwrap();
    let acc = wil.lines().find(|l| l.starts_with("phoneme_accuracy,")).expect(&wil);
    let cols: Vec<&str> = acc.split(',').collect();
    // Six paired improvements: W- = 0 and exact two-sided p = 2/64.
    assert_eq!(cols[1], "6");
    assert_eq!(cols[3], "0");
    assert!((cols[5].parse::<f64>().unwrap() - 2.0 / 64.0).abs() < 1e-12, "{acc}");
    assert_eq!(cols[6], "true");
}

#[test]
fn silent_modes_select_the_dtw_objective() {
    let f = Fixture::new();
    let log = f.train("imagined", &["--mode", "imagined", "--modality", "eeg"]);
    assert!(log.contains("with loss silent"), "{log}");
    let resolved = std::fs::read_to_string(f.path("imagined/config.txt")).unwrap();
    assert!(resolved.contains("in_channels = 6"), "{resolved}");
}

#[test]
fn reruns_are_bit_identical() {
    let f = Fixture::new();
    f.train("a", &["--seed", "3"]);
    f.train("b", &["--seed", "3"]);
    for file in ["model.ckpt", "train_log.csv", "config.txt", "train.log"] {
        assert_eq!(
            std::fs::read(f.path("a").join(file)).unwrap(),
            std::fs::read(f.path("b").join(file)).unwrap(),
            "{file} differs"
        );
    }
}

#[test]
fn preprocess_writes_epochs_for_every_record() {
    let f = Fixture::new();
    ok(&[
        "preprocess",
        "--data-dir",
        p(&f.path("data")),
        "--out-dir",
        p(&f.path("pre")),
        "--band",
        "theta",
    ]);
    let index = std::fs::read_to_string(f.path("pre/epochs.tsv")).unwrap();
    assert_eq!(index.lines().count(), 1 + 6 * 2);
    assert!(f.path("pre/epochs/imagined/s0000.f32").exists());
    assert!(std::fs::read_to_string(f.path("pre/config.txt")).unwrap().contains("band = theta"));
}

#[test]
fn failures_name_the_culprit() {
    let f = Fixture::new();
    let missing = biospeech(&["train", "--data-dir", "/nonexistent/corpus", "--out-dir", p(&f.path("x"))]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/corpus/manifest.tsv"));

    std::fs::write(f.path("bad.txt"), "learning_rate = 0.1\n").unwrap();
    let unknown = biospeech(&[
        "train",
        "--config",
        p(&f.path("bad.txt")),
        "--data-dir",
        p(&f.path("data")),
        "--out-dir",
        p(&f.path("x")),
    ]);
    assert!(!unknown.status.success());
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("learning_rate"));

    let bad_value = biospeech(&["train", "--data-dir", p(&f.path("data")), "--out-dir", p(&f.path("x")), "--mode", "shouted"]);
    assert!(!bad_value.status.success());
    assert!(String::from_utf8_lossy(&bad_value.stderr).contains("mode"));

    let no_ckpt = biospeech(&[
        "eval",
        "--run-dir",
        p(&f.path("nowhere")),
        "--data-dir",
        p(&f.path("data")),
        "--out-dir",
        p(&f.path("x")),
    ]);
    assert!(!no_ckpt.status.success());
    assert!(String::from_utf8_lossy(&no_ckpt.stderr).contains("config.txt"));
}
