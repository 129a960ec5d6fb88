//! `biospeech` command-line driver.
//!
//! ```text
//! synth ─▶ data dir ─▶ preprocess (epochs, optional)
//!                  └─▶ train ─▶ run dir ─▶ eval ─▶ report ─▶ analyze
//! ```
//!
//! Every command reads an optional `key = value` file (`--config`), applies
//! flag overrides on top, rejects unknown keys, and writes the resolved
//! settings to `config.txt` in its output directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use biospeech::analysis::{
    band_ablation, band_table_csv, property_correlation_report, sentence_properties, w_scores,
    wilcoxon_signed_rank, AblationSetup, SentenceProperties,
};
use biospeech::dataset::{load_trials, read_split, split_by_sentence, LoadedTrial, Manifest, ManifestRecord, MANIFEST_FILE, SPLIT_FILE};
use biospeech::kv::KvMap;
use biospeech::metrics::evaluate_trials;
use biospeech::model::{init_parameters, load_parameters, parameter_count, save_parameters, ModelConfig};
use biospeech::phoneme::{AlignedTranscript, PhonemeInventory};
use biospeech::signalproc::{parse_band_choice, preprocess, Band, PreprocessConfig, RawRecording};
use biospeech::synthgen::{generate, SynthConfig};
use biospeech::trainer::{fit, write_log_csv, FitStatus, Modality, Mode, TrainConfig, Trial};
use clap::{Args, Parser, Subcommand};

const CONFIG_FILE: &str = "config.txt";
const RUN_FILE: &str = "run.txt";
const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Parser, Debug)]
#[command(name = "biospeech", version, about = "EEG/EMG-to-speech decoding pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with planted phoneme signatures.
    Synth(SynthArgs),
    /// Filter, re-reference and epoch recordings; writes one file pair per trial.
    Preprocess(DataArgs),
    /// Fit a model on the training sentences.
    Train(DataArgs),
    /// Score a trained model on the held-out sentences.
    Eval(EvalArgs),
    /// Corpus statistics, accuracy correlations, paired tests and band ablation.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of sentences.
    #[arg(long)]
    sentences: Option<usize>,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Corpus directory holding `manifest.tsv`.
    #[arg(long)]
    data_dir: PathBuf,
    /// overt, whispered or imagined.
    #[arg(long)]
    mode: Option<String>,
    /// eeg or eeg+emg.
    #[arg(long)]
    modality: Option<String>,
    /// full, delta, theta, alpha, beta, gamma or high_gamma.
    #[arg(long)]
    band: Option<String>,
    /// Held-out sentence ids; defaults to `<data-dir>/split.txt`.
    #[arg(long)]
    split_file: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory of a `train` run.
    #[arg(long)]
    run_dir: PathBuf,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Per-sentence metrics CSV from `eval`, correlated with sentence properties.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Second metrics CSV; paired Wilcoxon tests against `--report`.
    #[arg(long, requires = "report")]
    baseline: Option<PathBuf>,
    /// Comma-separated bands for ablation, e.g. `full,delta,high_gamma`.
    #[arg(long)]
    bands: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Preprocess(a) => cmd_preprocess(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Analyze(a) => cmd_analyze(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn read_kv(path: Option<&Path>) -> Result<KvMap> {
    match path {
        None => Ok(KvMap::new()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            KvMap::parse(&text).with_context(|| format!("in {}", p.display()))
        }
    }
}

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).with_context(|| format!("cannot write {}", path.display()))
}

/// `config.txt` with the resolved settings and `run.txt` with paths.
fn write_run_files(out: &Path, command: &str, config: &KvMap, paths: &[(&str, &Path)]) -> Result<()> {
    write_file(&out.join(CONFIG_FILE), config.to_string())?;
    let mut run = KvMap::new();
    run.set("command", command);
    for (k, p) in paths {
        run.set(k, p.display());
    }
    write_file(&out.join(RUN_FILE), run.to_string())
}

fn merged(parts: &[KvMap]) -> KvMap {
    let mut kv = KvMap::new();
    for p in parts {
        kv.merge(p.clone());
    }
    kv
}

/// Fully resolved settings for data-driven commands.
struct Resolved {
    model: ModelConfig,
    train: TrainConfig,
    preprocess: PreprocessConfig,
}

impl Resolved {
    fn to_kv(&self) -> KvMap {
        merged(&[self.model.to_kv(), self.train.to_kv(), self.preprocess.to_kv()])
    }
}

/// Layers `base`, then `--config`, then flags, and hands the keys to each
/// component. `model = full | compact` picks the starting network size.
fn resolve(base: KvMap, args: &DataArgs) -> Result<Resolved> {
    let mut kv = base;
    kv.merge(read_kv(args.common.config.as_deref())?);
    if let Some(s) = args.common.seed {
        kv.set("seed", s);
    }
    for (key, flag) in [("mode", &args.mode), ("modality", &args.modality), ("band", &args.band)] {
        if let Some(v) = flag {
            kv.set(key, v);
        }
    }
    let mut model = match kv.take::<String>("model")?.as_deref() {
        None | Some("full") => ModelConfig::default(),
        Some("compact") => ModelConfig::compact(ModelConfig::default().in_channels),
        Some(other) => bail!("config key `model`: expected `full` or `compact`, got `{other}`"),
    };
    model.update_from(&mut kv)?;
    let mut train = TrainConfig::default();
    train.update_from(&mut kv)?;
    let mut pre = PreprocessConfig::default();
    pre.update_from(&mut kv)?;
    pre.eeg_only = train.modality == Modality::Eeg;
    kv.finish()?;
    Ok(Resolved {
        model,
        train,
        preprocess: pre,
    })
}

fn read_manifest(data_dir: &Path) -> Result<Manifest> {
    let p = data_dir.join(MANIFEST_FILE);
    if !p.exists() {
        bail!("missing manifest {}", p.display());
    }
    Ok(Manifest::read(&p)?)
}

fn split_path(args: &DataArgs) -> PathBuf {
    args.split_file.clone().unwrap_or_else(|| args.data_dir.join(SPLIT_FILE))
}

fn read_test_ids(args: &DataArgs) -> Result<BTreeSet<String>> {
    let p = split_path(args);
    if !p.exists() {
        bail!("missing split file {}", p.display());
    }
    Ok(read_split(&p)?)
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut kv = read_kv(a.common.config.as_deref())?;
    if let Some(s) = a.common.seed {
        kv.set("seed", s);
    }
    if let Some(n) = a.sentences {
        kv.set("n_sentences", n);
    }
    let mut cfg = SynthConfig::default();
    cfg.update_from(&mut kv)?;
    kv.finish()?;
    let inv = PhonemeInventory::arpabet();
    let ds = generate(&cfg, &inv)?;
    create_out_dir(&a.common.out_dir)?;
    let manifest = ds.write(&a.common.out_dir, &inv)?;
    write_run_files(&a.common.out_dir, "synth", &cfg.to_kv(), &[("out_dir", &a.common.out_dir)])?;
    eprintln!(
        "wrote {} sentences ({} held out, {} records) to {}",
        ds.sentences.len(),
        ds.test_ids.len(),
        manifest.records.len(),
        a.common.out_dir.display()
    );
    Ok(())
}

fn cmd_preprocess(a: &DataArgs) -> Result<()> {
    let mode_given = a.mode.is_some();
    let r = resolve(KvMap::new(), a)?;
    let manifest = read_manifest(&a.data_dir)?;
    let modes: BTreeSet<Mode> = if mode_given {
        [r.train.mode].into()
    } else {
        manifest.records.iter().map(|m| m.mode).collect()
    };
    let out = &a.common.out_dir;
    create_out_dir(out)?;
    let mut index = String::from("sentence_id\tmode\tepoch\tn_frames\tn_channels\n");
    for mode in modes {
        let records: Vec<&ManifestRecord> = manifest.for_mode(mode).collect();
        let recordings: BTreeSet<&PathBuf> = records.iter().map(|r| &r.recording).collect();
        let wanted: BTreeSet<(&PathBuf, &str)> = records.iter().map(|r| (&r.recording, r.sentence_id.as_str())).collect();
        let dir = out.join("epochs").join(mode.to_string());
        create_out_dir(&dir)?;
        for rec_path in recordings {
            let rec = RawRecording::<f32>::read(&a.data_dir.join(rec_path))?;
            for e in preprocess(&rec, &r.preprocess)? {
                if !wanted.contains(&(rec_path, e.sentence_id.as_str())) {
                    continue;
                }
                let rel = Path::new("epochs").join(mode.to_string()).join(&e.sentence_id);
                e.write(&out.join(&rel))?;
                let _ = writeln!(
                    index,
                    "{}\t{mode}\t{}\t{}\t{}",
                    e.sentence_id,
                    rel.display(),
                    e.n_frames(),
                    e.n_channels()
                );
            }
        }
    }
    write_file(&out.join("epochs.tsv"), index)?;
    write_run_files(out, "preprocess", &r.preprocess.to_kv(), &[("data_dir", &a.data_dir)])?;
    eprintln!("wrote epochs to {}", out.join("epochs").display());
    Ok(())
}

fn load_split_trials(a: &DataArgs, r: &mut Resolved) -> Result<(Vec<LoadedTrial<f32>>, Vec<LoadedTrial<f32>>)> {
    let manifest = read_manifest(&a.data_dir)?;
    let test_ids = read_test_ids(a)?;
    let inv = PhonemeInventory::arpabet();
    let trials = load_trials::<f32>(&a.data_dir, &manifest, r.train.mode, &r.preprocess, &inv)?;
    if trials.is_empty() {
        bail!("no {} trials in {}", r.train.mode, a.data_dir.join(MANIFEST_FILE).display());
    }
    let (train, test) = split_by_sentence(trials, &test_ids);
    if let Some(t) = train.first().or(test.first()) {
        r.model.in_channels = t.trial.signal.n_channels();
    }
    Ok((train, test))
}

fn cmd_train(a: &DataArgs) -> Result<()> {
    let mut r = resolve(KvMap::new(), a)?;
    let (train, _) = load_split_trials(a, &mut r)?;
    if train.is_empty() {
        bail!("every {} trial is listed in {}", r.train.mode, split_path(a).display());
    }
    let out = &a.common.out_dir;
    create_out_dir(out)?;
    let inv = PhonemeInventory::arpabet();
    let log_path = out.join("train.log");
    let mut log = fs::File::create(&log_path).with_context(|| format!("cannot write {}", log_path.display()))?;
    let head = format!(
        "training {} on {} trials ({}) with loss {}",
        r.train.mode,
        train.len(),
        r.train.modality,
        r.train.mode.loss_name()
    );
    eprintln!("{head}");
    writeln!(log, "{head}")?;

    let init = init_parameters::<f32>(&r.model, r.train.seed)?;
    writeln!(log, "parameters {}", parameter_count(&init))?;
    let inputs: Vec<Trial<f32>> = train.iter().map(|t| t.trial.clone()).collect();
    let mut lines = Vec::new();
    let result = fit(&r.model, &r.train, init, &inputs, inv.sil(), |s, _| {
        let line = format!(
            "epoch {} lr {:.3e} train {:.5} val {:.5} (audio {:.4} phoneme {:.4} ctc {:.4} dtw {:.4})",
            s.epoch, s.lr, s.train.total, s.val.total, s.train.audio, s.train.phoneme, s.train.ctc, s.train.dtw
        );
        eprintln!("{line}");
        lines.push(line);
    })?;
    for l in &lines {
        writeln!(log, "{l}")?;
    }
    let status = match &result.status {
        FitStatus::MaxEpochs => "reached max_epochs".to_string(),
        FitStatus::EarlyStopped => "stopped early".to_string(),
        FitStatus::Aborted(why) => format!("aborted: {why}"),
    };
    let tail = format!(
        "{status}; best epoch {} with validation loss {:.5}",
        result.best_epoch, result.best_val_loss
    );
    eprintln!("{tail}");
    writeln!(log, "{tail}")?;

    save_parameters(&out.join(CHECKPOINT_FILE), &result.best_params)?;
    write_log_csv(&out.join("train_log.csv"), &result.log)?;
    let split = split_path(a);
    write_run_files(out, "train", &r.to_kv(), &[("data_dir", &a.data_dir), ("split_file", &split)])?;
    if matches!(result.status, FitStatus::Aborted(_)) {
        bail!("training {status}");
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg_path = a.run_dir.join(CONFIG_FILE);
    let base = read_kv(Some(&cfg_path))?;
    let mut r = resolve(base, &a.data)?;
    let (_, test) = load_split_trials(&a.data, &mut r)?;
    if test.is_empty() {
        bail!("no held-out {} trials listed in {}", r.train.mode, split_path(&a.data).display());
    }
    let ckpt = a.run_dir.join(CHECKPOINT_FILE);
    if !ckpt.exists() {
        bail!("missing checkpoint {}", ckpt.display());
    }
    let params = load_parameters::<f32>(&ckpt, &r.model)?;
    let inv = PhonemeInventory::arpabet();
    let report = evaluate_trials(&r.model, &r.train, &params, &test, &inv)?;
    let out = &a.data.common.out_dir;
    create_out_dir(out)?;
    report.write(out, "eval", &inv)?;
    let split = split_path(&a.data);
    write_run_files(
        out,
        "eval",
        &r.to_kv(),
        &[("data_dir", &a.data.data_dir), ("run_dir", &a.run_dir), ("split_file", &split)],
    )?;
    let m = report.aggregate();
    eprintln!(
        "{} held-out sentences: accuracy {:.2}% rmse {:.4} mcd {:.4} f1 {:.4} per {:.4}",
        report.per_sentence.len(),
        m.phoneme_accuracy,
        m.rmse,
        m.mcd,
        m.f1,
        m.error_rate
    );
    Ok(())
}

/// Per-sentence columns of an `eval` CSV, keyed by sentence id.
fn read_metric_csv(path: &Path) -> Result<(Vec<String>, BTreeMap<String, Vec<f64>>)> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| anyhow!("{}: empty file", path.display()))?
        .split(',')
        .map(str::to_string)
        .collect();
    if header.first().map(String::as_str) != Some("sentence_id") {
        bail!("{}: expected a `sentence_id` first column", path.display());
    }
    let mut rows = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != header.len() {
            bail!("{}:{}: expected {} fields", path.display(), i + 2, header.len());
        }
        if f[0] == "mean" {
            continue;
        }
        let vals = f[1..]
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .with_context(|| format!("{}:{}", path.display(), i + 2))?;
        rows.insert(f[0].to_string(), vals);
    }
    Ok((header[1..].to_vec(), rows))
}

/// One transcript per sentence id, from the first manifest record naming it.
fn sentence_tokens(data_dir: &Path, manifest: &Manifest, inv: &PhonemeInventory) -> Result<BTreeMap<String, Vec<usize>>> {
    let mut out = BTreeMap::new();
    for r in &manifest.records {
        if out.contains_key(&r.sentence_id) {
            continue;
        }
        let t = AlignedTranscript::read(&data_dir.join(&r.alignment), &r.sentence_id, &r.text, inv)?;
        out.insert(r.sentence_id.clone(), t.phonemes());
    }
    Ok(out)
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    let d = &a.data;
    let mut r = resolve(KvMap::new(), d)?;
    let manifest = read_manifest(&d.data_dir)?;
    let test_ids = read_test_ids(d)?;
    let inv = PhonemeInventory::arpabet();
    let out = &d.common.out_dir;
    create_out_dir(out)?;

    let tokens = sentence_tokens(&d.data_dir, &manifest, &inv)?;
    let corpus: Vec<Vec<usize>> = tokens
        .iter()
        .filter(|(id, _)| !test_ids.contains(*id))
        .map(|(_, t)| t.clone())
        .collect();
    let w = w_scores(&corpus, inv.len(), inv.sil())?;
    let mut s = String::from("phoneme,w_with_sil,w_without_sil\n");
    for p in 0..inv.len() {
        let _ = writeln!(s, "{},{},{}", inv.symbol(p), w.with_sil[p], w.without_sil[p]);
    }
    write_file(&out.join("w_scores.csv"), s)?;

    let props: Vec<SentenceProperties> = tokens
        .iter()
        .filter(|(id, _)| test_ids.contains(*id))
        .map(|(id, t)| sentence_properties(id, t, &w, inv.sil()))
        .collect::<biospeech::Result<_>>()?;
    let mut s = String::from("sentence_id,phoneme_seq_len,w_score_with_sil,w_score_without_sil\n");
    for p in &props {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            p.sentence_id, p.phoneme_seq_len, p.w_score_with_sil, p.w_score_without_sil
        );
    }
    write_file(&out.join("sentence_properties.csv"), s)?;
    eprintln!("W scores over {} training sentences; {} held-out sentences profiled", corpus.len(), props.len());

    if let Some(report) = &a.report {
        let (cols, rows) = read_metric_csv(report)?;
        let acc_col = cols
            .iter()
            .position(|c| c == "phoneme_accuracy")
            .ok_or_else(|| anyhow!("{}: no phoneme_accuracy column", report.display()))?;
        let matched: Vec<&SentenceProperties> = props.iter().filter(|p| rows.contains_key(&p.sentence_id)).collect();
        let accs: Vec<f64> = matched.iter().map(|p| rows[&p.sentence_id][acc_col]).collect();
        let owned: Vec<SentenceProperties> = matched.into_iter().cloned().collect();
        match property_correlation_report(&owned, &accs) {
            Ok(pr) => {
                write_file(&out.join("properties.csv"), pr.to_csv())?;
                write_file(&out.join("properties.svg"), pr.to_svg())?;
                eprintln!(
                    "PCC accuracy vs length {:.3}, vs W (with sil) {:.3}, vs W (without sil) {:.3}",
                    pr.pcc_length, pr.pcc_w_with_sil, pr.pcc_w_without_sil
                );
            }
            Err(e) => eprintln!("property correlations skipped: {e}"),
        }

        if let Some(baseline) = &a.baseline {
            let (bcols, brows) = read_metric_csv(baseline)?;
            let mut s = String::from("metric,n,w_plus,w_minus,statistic,p_value,exact\n");
            for (ci, col) in cols.iter().enumerate() {
                let Some(bi) = bcols.iter().position(|c| c == col) else { continue };
                let paired: Vec<(f64, f64)> = rows
                    .iter()
                    .filter_map(|(id, v)| brows.get(id).map(|b| (v[ci], b[bi])))
                    .collect();
                let (x, y): (Vec<f64>, Vec<f64>) = paired.into_iter().unzip();
                match wilcoxon_signed_rank(&x, &y) {
                    Ok(t) => {
                        let _ = writeln!(
                            s,
                            "{col},{},{},{},{},{},{}",
                            t.n, t.w_plus, t.w_minus, t.statistic, t.p_value, t.exact
                        );
                    }
                    Err(e) => eprintln!("wilcoxon on {col} skipped: {e}"),
                }
            }
            write_file(&out.join("wilcoxon.csv"), s)?;
        }
    }

    if let Some(list) = &a.bands {
        let bands: Vec<Option<Band>> = list
            .split(',')
            .map(|b| parse_band_choice(b).map_err(|e| anyhow!("--bands: {e}")))
            .collect::<Result<_>>()?;
        let (train, _) = load_split_trials(d, &mut r)?;
        if train.is_empty() {
            bail!("no training trials for band ablation");
        }
        let setup = AblationSetup {
            data_dir: &d.data_dir,
            manifest: &manifest,
            test_ids: &test_ids,
            model: &r.model,
            train: &r.train,
            preprocess: &r.preprocess,
            inventory: &inv,
        };
        let rows = band_ablation::<f32>(&setup, &bands, &[r.train.mode])?;
        write_file(&out.join("bands.csv"), band_table_csv(&rows))?;
        for row in &rows {
            eprintln!(
                "{} {}: accuracy {:.2}%",
                row.band.map_or("full", Band::name),
                row.mode,
                row.metrics.phoneme_accuracy
            );
        }
    }
    let split = split_path(d);
    write_run_files(out, "analyze", &r.to_kv(), &[("data_dir", &d.data_dir), ("split_file", &split)])
}
