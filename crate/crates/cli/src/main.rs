//! `mpn`: data generation, training, evaluation, ablations and gradient checks.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mpn::ablation::{format_table, run_axis, AblationAxis, REGIMES};
use mpn::config::RunConfig;
use mpn::data::{generate, nearest_prototype_labels, prototypes, read_bundle, write_bundle, Dataset, Split};
use mpn::gradsuite::{format_report, run_suite, TinyScale};
use mpn::model::{decode, Mpn, Regime, DECODE_THRESHOLD};
use mpn::rng::Rng;
use mpn::tensor::FaultSite;
use mpn::train::{overall_accuracy, predict_all, train, SavedModel};
use mpn::MpnError;

#[derive(Parser)]
#[command(name = "mpn", version, about = "Multimodal parallel network for audio-visual event localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle and its split manifest.
    GenData(GenData),
    /// Train a model and write final and best-validation parameter files.
    Train(TrainCmd),
    /// Report segment accuracy of a model (or the prototype oracle) on a split.
    Eval(Eval),
    /// Compare architecture variants along one axis in both regimes.
    Ablate(Ablate),
    /// Finite-difference gradient checks over every block.
    GradCheck(GradCheck),
    /// List every configuration key with its default.
    Config,
}

#[derive(Args)]
struct Overrides {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct GenData {
    /// key=value file with dataset keys.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise: Option<f32>,
    #[arg(long)]
    n_videos: Option<usize>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    regime: Option<Regime>,
    /// Final parameters; best-validation parameters go next to it with a `.best` suffix.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Epoch log (JSON lines); defaults to `<out>.log`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    data: PathBuf,
    /// Model file; omit together with --oracle.
    #[arg(long, required_unless_present = "oracle")]
    model: Option<PathBuf>,
    /// Evaluate the nearest-prototype template matcher instead of a model.
    #[arg(long, conflicts_with = "model")]
    oracle: bool,
    #[arg(long, default_value = "test")]
    split: String,
    /// Decoding regime; defaults to the regime the model was trained in.
    #[arg(long)]
    regime: Option<Regime>,
    /// Per-segment predictions as a tab-separated table.
    #[arg(long)]
    dump_preds: Option<PathBuf>,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    axis: String,
    /// Comma-separated seeds.
    #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Restrict to one regime; both by default.
    #[arg(long)]
    regime: Option<Regime>,
}

#[derive(Args)]
struct GradCheck {
    #[arg(long, default_value = "tiny")]
    scale: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Corrupt one backward rule (negative control).
    #[arg(long, hide = true)]
    inject_fault: Option<FaultSite>,
}

/// Failure with its exit code: 1 usage, 2 data, 3 numerical.
struct Failure {
    code: u8,
    message: String,
}

impl From<MpnError> for Failure {
    fn from(e: MpnError) -> Self {
        let code = match e {
            MpnError::Numerical(_) => 3,
            MpnError::Data(_)
            | MpnError::BadMagic(_)
            | MpnError::VersionMismatch { .. }
            | MpnError::Truncated { .. }
            | MpnError::Io(_)
            | MpnError::Json(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        MpnError::from(e).into()
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Config => {
            for (key, doc) in mpn::config::KEYS {
                println!("{key} = {}\t# {doc}", RunConfig::default().get(key).unwrap_or_default());
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// Defaults, then `MPN_SEED`, then the file, then flag overrides.
fn load_config(file: Option<&Path>, sets: &[String]) -> Result<RunConfig, Failure> {
    let mut rc = RunConfig::default();
    if let Ok(seed) = std::env::var("MPN_SEED") {
        rc.set("seed", &seed)?;
        rc.set("data_seed", &seed)?;
    }
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::from(MpnError::Config(format!("cannot read {}: {e}", path.display()))))?;
        rc.apply_text(&text)?;
    }
    for kv in sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::from(MpnError::Config(format!("--set expects KEY=VALUE, got {kv:?}"))))?;
        rc.set(k.trim(), v)?;
    }
    Ok(rc)
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

fn write_config_sidecar(path: &Path, rc: &RunConfig) -> std::io::Result<()> {
    std::fs::write(sidecar(path, ".config"), rc.to_text())
}

/// Best-validation file name: `model.json` becomes `model.best.json`.
pub fn best_path(out: &Path) -> PathBuf {
    match (out.file_stem(), out.extension()) {
        (Some(stem), Some(ext)) => {
            let mut name = stem.to_owned();
            name.push(".best.");
            name.push(ext);
            out.with_file_name(name)
        }
        _ => sidecar(out, ".best"),
    }
}

fn gen_data(a: GenData) -> CmdResult {
    let mut rc = load_config(a.spec.as_deref(), &a.set)?;
    if let Some(seed) = a.seed {
        rc.data.seed = seed;
    }
    if let Some(noise) = a.noise {
        rc.data.noise_sigma = noise;
    }
    if let Some(n) = a.n_videos {
        rc.data.n_videos = n;
    }
    let ds = generate(&rc.data)?;
    write_bundle(&ds, &a.out)?;
    write_config_sidecar(&a.out, &rc)?;
    let mut counts = vec![0usize; rc.data.classes];
    for s in &ds.samples {
        counts[s.video_label] += 1;
    }
    println!("class\tvideos");
    for (c, n) in counts.iter().enumerate() {
        println!("{c}\t{n}");
    }
    eprintln!(
        "wrote {} videos ({} train / {} val / {} test) to {}",
        ds.samples.len(),
        ds.manifest.train.len(),
        ds.manifest.val.len(),
        ds.manifest.test.len(),
        a.out.display()
    );
    Ok(())
}

/// Data geometry comes from the bundle; a config that names a different
/// geometry is rejected.
fn bind_data(rc: &mut RunConfig, file: Option<&Path>, sets: &[String], ds: &Dataset) -> CmdResult {
    let explicit = load_config(file, sets)?;
    let default = RunConfig::default();
    let keys = ["segments", "classes", "regions", "visual_dim", "audio_dim"];
    for key in keys {
        let (want, have) = (explicit.get(key), ds_value(ds, key));
        if want != default.get(key) && want != have {
            return Err(MpnError::Data(format!(
                "config sets {key} = {} but the data has {}",
                want.unwrap_or_default(),
                have.unwrap_or_default()
            ))
            .into());
        }
    }
    rc.data = ds.spec;
    Ok(())
}

fn ds_value(ds: &Dataset, key: &str) -> Option<String> {
    let rc = RunConfig {
        data: ds.spec,
        ..RunConfig::default()
    };
    rc.get(key)
}

fn train_cmd(a: TrainCmd) -> CmdResult {
    let mut rc = load_config(a.overrides.config.as_deref(), &a.overrides.set)?;
    if let Some(r) = a.regime {
        rc.train.regime = r;
    }
    if let Some(e) = a.epochs {
        rc.train.epochs = e;
    }
    if let Some(s) = a.seed {
        rc.train.seed = s;
    }
    if let Some(l) = a.lambda {
        rc.train.loss_lambda = l;
    }
    let mut ds = read_bundle(&a.data)?;
    bind_data(&mut rc, a.overrides.config.as_deref(), &a.overrides.set, &ds)?;
    rc.validate()?;
    if rc.train.regime == Regime::Weak {
        // Segment labels of the training split are never read in this regime;
        // blank them so nothing downstream can.
        let bg = ds.spec.classes;
        for &id in &ds.manifest.train {
            ds.samples[id as usize].segment_labels.iter_mut().for_each(|l| *l = bg);
        }
    }

    let (mpn, store) = Mpn::init::<f32>(rc.model_config(), &mut Rng::new(rc.train.seed))?;
    let log_path = a.log.clone().unwrap_or_else(|| sidecar(&a.out, ".log"));
    let mut log = BufWriter::new(File::create(&log_path)?);
    let mut io_err = None;
    let outcome = train(&mpn, store, &ds.split(Split::Train), &ds.split(Split::Val), &rc.train, |r| {
        let line = serde_json::to_string(r).expect("report serializes");
        println!("{line}");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }

    let effective = rc.to_text();
    let save = |params: &mpn::nn::ParamStore<f32>, path: &Path| -> CmdResult {
        SavedModel {
            model: rc.model_config(),
            train: rc.train,
            effective_config: effective.clone(),
            best_epoch: outcome.best_epoch,
            params: params.to_named(),
        }
        .save(path)?;
        Ok(())
    };
    save(&outcome.final_params, &a.out)?;
    let best = best_path(&a.out);
    save(&outcome.best_params, &best)?;
    eprintln!(
        "best validation accuracy {:.4} at epoch {}; wrote {} and {}",
        outcome.best_val_accuracy,
        outcome.best_epoch,
        a.out.display(),
        best.display()
    );
    Ok(())
}

fn label(l: usize, background: usize) -> String {
    if l == background {
        "bg".into()
    } else {
        l.to_string()
    }
}

fn eval(a: Eval) -> CmdResult {
    let split: Split = a.split.parse()?;
    let ds = read_bundle(&a.data)?;
    let samples = ds.split(split);
    if samples.is_empty() {
        return Err(MpnError::Data(format!("split {} is empty", a.split)).into());
    }
    let bg = ds.spec.classes;

    let (labels, rows, regime, source): (Vec<Vec<usize>>, Vec<Option<mpn::model::Predictions>>, Regime, String) =
        if a.oracle {
            let protos = prototypes(&ds.spec);
            let labels = samples
                .iter()
                .map(|s| nearest_prototype_labels(&ds.spec, &protos, s))
                .collect();
            (labels, vec![None; samples.len()], Regime::Full, "oracle".into())
        } else {
            let path = a.model.as_ref().expect("clap enforces --model");
            if !path.exists() {
                return Err(MpnError::Data(format!("model file {} not found", path.display())).into());
            }
            let saved = SavedModel::load(path)?;
            let (mpn, store) = saved.instantiate()?;
            if mpn.cfg.classes != ds.spec.classes || mpn.cfg.fbc.p != ds.spec.visual_dim || mpn.cfg.fbc.q != ds.spec.audio_dim {
                return Err(MpnError::Data("model geometry does not match the data".into()).into());
            }
            let regime = a.regime.unwrap_or(saved.train.regime);
            let preds = predict_all(&mpn, &store, &samples, saved.train.schedule.tau_end)?;
            let labels = preds.iter().map(|p| decode(p, regime, DECODE_THRESHOLD)).collect();
            (labels, preds.into_iter().map(Some).collect(), regime, path.display().to_string())
        };

    let pred: Vec<usize> = labels.iter().flatten().copied().collect();
    let truth: Vec<usize> = samples.iter().flat_map(|s| s.segment_labels.iter().copied()).collect();
    let acc = overall_accuracy(&pred, &truth)?;

    if let Some(path) = &a.dump_preds {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "video\tsegment\ttrue_label\tpred_label\tp_r")?;
        for r in 0..ds.spec.regions {
            write!(w, "\tagva_w{r}")?;
        }
        writeln!(w)?;
        for ((s, lab), p) in samples.iter().zip(&labels).zip(&rows) {
            for t in 0..ds.spec.segments {
                write!(w, "{}\t{t}\t{}\t{}", s.id, label(s.segment_labels[t], bg), label(lab[t], bg))?;
                match p {
                    Some(p) => {
                        write!(w, "\t{:.6}", p.p_r[t])?;
                        for x in &p.agva_weights[t] {
                            write!(w, "\t{x:.6}")?;
                        }
                    }
                    None => {
                        write!(w, "\t-")?;
                        for _ in 0..ds.spec.regions {
                            write!(w, "\t-")?;
                        }
                    }
                }
                writeln!(w)?;
            }
        }
        w.flush()?;
        std::fs::write(sidecar(path, ".config"), format!("source = {source}\nsplit = {}\nregime = {regime}\n", a.split))?;
    }
    println!("split\tregime\tvideos\tsegments\taccuracy");
    println!("{}\t{regime}\t{}\t{}\t{acc:.6}", a.split, samples.len(), pred.len());
    Ok(())
}

fn ablate(a: Ablate) -> CmdResult {
    let axis: AblationAxis = a.axis.parse()?;
    let mut rc = load_config(a.overrides.config.as_deref(), &a.overrides.set)?;
    if let Some(e) = a.epochs {
        rc.train.epochs = e;
    }
    let ds = read_bundle(&a.data)?;
    bind_data(&mut rc, a.overrides.config.as_deref(), &a.overrides.set, &ds)?;
    rc.validate()?;
    for line in rc.to_text().lines() {
        eprintln!("# {line}");
    }
    let regimes: Vec<Regime> = match a.regime {
        Some(r) => vec![r],
        None => REGIMES.to_vec(),
    };
    let rows = run_axis(&ds, &rc, axis, &a.seeds, &regimes, |v, r, s, acc| {
        eprintln!("{axis}\t{v}\t{r}\tseed {s}\t{acc:.4}");
    })?;
    print!("{}", format_table(axis, &rows));
    Ok(())
}

fn grad_check(a: GradCheck) -> CmdResult {
    if a.scale != "tiny" {
        return Err(MpnError::Config(format!("unknown scale {:?} (only tiny is supported)", a.scale)).into());
    }
    let results = run_suite(TinyScale::default(), a.seed, a.inject_fault)?;
    print!("{}", format_report(&results));
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(MpnError::Numerical(format!("gradient check failed for: {}", failed.join(", "))).into())
    }
}
