//! Command-line front end: synthesize a corpus, split it by patient, audit
//! splits, train, evaluate and compare runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use chestloc::data::synth::DatasetSynth;
use chestloc::data::{
    load_corpus_manifests, load_prepared, synth_generate, Manifest, Normalization, PreparedSample,
    SynthConfig,
};
use chestloc::eval::{compare_runs, evaluate, read_score_file, AucReport};
use chestloc::labelspace::{build_combined_labelspace, LabelSpace, LabelVector, MaskVector};
use chestloc::lossfns::LossMode;
use chestloc::netcore::Checkpoint;
use chestloc::splits::{
    patient_split_all, read_split_files, verify_no_leakage, write_split_files, SplitAssignment,
    Subset, DEFAULT_RATIOS,
};
use chestloc::train::{train, write_run, TrainConfig};
use chestloc::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "chestloc",
    version,
    about = "Pooled multi-dataset chest X-ray classification with location supervision"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-dataset corpus.
    Synth(SynthArgs),
    /// Split every dataset of a corpus by patient and write split files.
    Split(SplitArgs),
    /// Check split files for patient leakage.
    Audit(AuditArgs),
    /// Train a model and save the best-validation checkpoint.
    Train(TrainArgs),
    /// Score a subset and write per-label AUC reports.
    Eval(EvalArgs),
    /// Per-label AUC deltas between two evaluated runs.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        matches!(self, Switch::On)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Weighted,
    Unweighted,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Faithful,
}

#[derive(Clone, Copy, ValueEnum)]
enum SubsetArg {
    Train,
    Val,
    Test,
}

impl From<SubsetArg> for Subset {
    fn from(s: SubsetArg) -> Subset {
        match s {
            SubsetArg::Train => Subset::Train,
            SubsetArg::Val => Subset::Val,
            SubsetArg::Test => Subset::Test,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Patients per dataset.
    #[arg(long)]
    patients: Option<usize>,
    #[arg(long)]
    images_per_patient_mean: Option<f64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    prevalence: Option<f64>,
    #[arg(long, value_enum)]
    location_correlated: Option<Switch>,
}

#[derive(Args)]
struct SplitArgs {
    /// Corpus directory with `<dataset>/manifest.csv`.
    #[arg(long)]
    data: PathBuf,
    /// Directory for the split files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, num_args = 3, default_values_t = DEFAULT_RATIOS)]
    ratios: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    splits: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Key=value config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    splits: Option<PathBuf>,
    /// Run directory for logs, config and checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    loss_mode: Option<LossArg>,
    #[arg(long, value_enum)]
    location: Option<Switch>,
    #[arg(long, value_enum)]
    pooled: Option<Switch>,
    /// Any config key as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    splits: PathBuf,
    #[arg(long, conflicts_with = "scores", required_unless_present = "scores")]
    checkpoint: Option<PathBuf>,
    /// Precomputed scores: `image_id` plus one column per label.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    subset: SubsetArg,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
}

#[derive(Args)]
struct CompareArgs {
    /// Report of the first run (`report.json` or its directory).
    a: PathBuf,
    /// Report of the second run; deltas are `b - a`.
    b: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_DATA
            },
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn data_error(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_DATA,
        message: message.into(),
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Split(a) => cmd_split(a),
        Command::Audit(a) => cmd_audit(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// `key = value` lines; `#` starts a comment.
fn read_kv(path: &Path) -> Result<Vec<(String, String)>, Failure> {
    let text =
        fs::read_to_string(path).map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            usage(format!(
                "{}:{}: expected key = value",
                path.display(),
                n + 1
            ))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn split_override(s: &str) -> Result<(String, String), Failure> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| usage(format!("--set expects key=value, got `{s}`")))
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let mut cfg = SynthConfig::default();
    let mut patients = None;
    let mut ipp = None;
    let mut prevalence = None;
    if let Some(path) = &a.config {
        for (k, v) in read_kv(path)? {
            let num = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| usage(format!("bad value `{v}` for `{k}`")))
            };
            match k.as_str() {
                "seed" => cfg.seed = num(&v)? as u64,
                "patients" => patients = Some(num(&v)? as usize),
                "images_per_patient_mean" => ipp = Some(num(&v)?),
                "image_size" => cfg.image_size = num(&v)? as usize,
                "prevalence" => prevalence = Some(num(&v)?),
                "noise_std" => cfg.noise_std = num(&v)?,
                "location_unavailable_rate" => cfg.location_unavailable_rate = num(&v)?,
                "persistence" => cfg.persistence = num(&v)?,
                "location_correlated" => {
                    cfg.location_correlated = match v.as_str() {
                        "on" | "true" => true,
                        "off" | "false" => false,
                        _ => return Err(usage(format!("bad value `{v}` for `{k}`"))),
                    }
                }
                _ => return Err(usage(format!("unknown synth key `{k}`"))),
            }
        }
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.image_size {
        cfg.image_size = s;
    }
    if let Some(l) = a.location_correlated {
        cfg.location_correlated = l.on();
    }
    patients = a.patients.or(patients);
    ipp = a.images_per_patient_mean.or(ipp);
    prevalence = a.prevalence.or(prevalence);
    for d in &mut cfg.datasets {
        let DatasetSynth {
            patients: p,
            images_per_patient: i,
            prevalence: q,
            ..
        } = d;
        *p = patients.unwrap_or(*p);
        *i = ipp.unwrap_or(*i);
        *q = prevalence.unwrap_or(*q);
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let corpus = synth_generate(&cfg)?;
    corpus.write(&a.out)?;
    for m in &corpus.manifests {
        let st = m.stats();
        println!(
            "{}: {} images, {} patients, {:.3} images/patient",
            m.dataset, st.images, st.patients, st.images_per_patient
        );
    }
    Ok(())
}

fn manifest_refs(manifests: &[Manifest]) -> Vec<&Manifest> {
    manifests.iter().collect()
}

fn cmd_split(a: SplitArgs) -> CmdResult {
    let ratios: [f64; 3] = a
        .ratios
        .as_slice()
        .try_into()
        .map_err(|_| usage("--ratios takes three values"))?;
    let manifests = load_corpus_manifests(&a.data)?;
    let refs = manifest_refs(&manifests);
    let assignment = patient_split_all(&refs, ratios, a.seed).map_err(|e| match e {
        Error::InvalidArgument(m) => usage(m),
        other => other.into(),
    })?;
    write_split_files(&a.out, &assignment)?;
    let report = verify_no_leakage(&assignment, &refs);
    print!("{report}");
    if !report.is_clean() {
        return Err(data_error("split audit failed"));
    }
    Ok(())
}

fn cmd_audit(a: AuditArgs) -> CmdResult {
    let manifests = load_corpus_manifests(&a.data)?;
    let refs = manifest_refs(&manifests);
    let assignment = read_split_files(&a.splits, &refs)?;
    let report = verify_no_leakage(&assignment, &refs);
    print!("{report}");
    if report.is_clean() {
        Ok(())
    } else {
        Err(data_error(format!(
            "{} patient(s) leak across subsets",
            report.violations.len()
        )))
    }
}

/// All samples of the corpus plus the split assignment.
fn load_split_corpus(
    space: &LabelSpace,
    data: &Path,
    splits: &Path,
) -> Result<(Vec<PreparedSample>, SplitAssignment), Failure> {
    let manifests = load_corpus_manifests(data)?;
    let refs = manifest_refs(&manifests);
    let assignment = read_split_files(splits, &refs)?;
    let report = verify_no_leakage(&assignment, &refs);
    if !report.is_clean() {
        return Err(data_error(format!("split files leak patients:\n{report}")));
    }
    let mut samples = Vec::new();
    for m in &manifests {
        samples.extend(load_prepared(space, m)?);
    }
    Ok((samples, assignment))
}

fn subset_indices(samples: &[PreparedSample], a: &SplitAssignment, s: Subset) -> Vec<usize> {
    (0..samples.len())
        .filter(|&i| a.subset_of(&samples[i].image_id) == Some(s))
        .collect()
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut cfg = match a.preset {
        Some(Preset::Faithful) => TrainConfig::faithful(),
        _ => TrainConfig::default(),
    };
    let mut paths: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut apply = |cfg: &mut TrainConfig, k: &str, v: &str| -> CmdResult {
        if k == "data" || k == "splits" {
            paths.insert(k.to_string(), PathBuf::from(v));
            return Ok(());
        }
        match cfg.set(k, v) {
            Ok(true) => Ok(()),
            Ok(false) => Err(usage(format!("unknown config key `{k}`"))),
            Err(e) => Err(usage(e.to_string())),
        }
    };
    if let Some(path) = &a.config {
        for (k, v) in read_kv(path)? {
            apply(&mut cfg, &k, &v)?;
        }
    }
    for s in &a.overrides {
        let (k, v) = split_override(s)?;
        apply(&mut cfg, &k, &v)?;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.loss_mode {
        cfg.loss_mode = match v {
            LossArg::Weighted => LossMode::Weighted,
            LossArg::Unweighted => LossMode::Unweighted,
        };
    }
    if let Some(v) = a.location {
        cfg.location = v.on();
    }
    if let Some(v) = a.pooled {
        cfg.pooled = v.on();
    }
    if let Some(p) = a.data {
        paths.insert("data".into(), p);
    }
    if let Some(p) = a.splits {
        paths.insert("splits".into(), p);
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let data = paths
        .get("data")
        .cloned()
        .ok_or_else(|| usage("--data is required"))?;
    let splits = paths
        .get("splits")
        .cloned()
        .ok_or_else(|| usage("--splits is required"))?;

    let space = build_combined_labelspace();
    let (samples, assignment) = load_split_corpus(&space, &data, &splits)?;
    let tr = subset_indices(&samples, &assignment, Subset::Train);
    let va = subset_indices(&samples, &assignment, Subset::Val);
    fs::create_dir_all(&a.out)
        .map_err(|e| data_error(format!("creating {}: {e}", a.out.display())))?;
    let stored = format!(
        "data = {}\nsplits = {}\n{}",
        data.display(),
        splits.display(),
        cfg.to_kv()
    );
    fs::write(a.out.join("config.txt"), stored)
        .map_err(|e| data_error(format!("writing config: {e}")))?;
    let outcome = train(&cfg, &space, &samples, &tr, &va, |r| {
        println!(
            "epoch {:>3}  lr {:.1e}  train {:.5}  val {:.5}  val auc {}",
            r.epoch,
            r.lr,
            r.train_loss,
            r.val_loss,
            r.val_auc
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "n/a".into())
        )
    })?;
    write_run(&a.out, &space, &outcome)?;
    println!(
        "best epoch {}; checkpoint {}",
        outcome.best_epoch,
        a.out.join("checkpoint.json").display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let space = build_combined_labelspace();
    let subset: Subset = a.subset.into();
    let report = if let Some(scores) = &a.scores {
        let manifests = load_corpus_manifests(&a.data)?;
        let refs = manifest_refs(&manifests);
        let assignment = read_split_files(&a.splits, &refs)?;
        let mut ids = Vec::new();
        let mut labels: Vec<LabelVector> = Vec::new();
        let mut masks: Vec<MaskVector> = Vec::new();
        for m in &manifests {
            for r in &m.records {
                if assignment.subset_of(&r.image_id) == Some(subset) {
                    ids.push(r.image_id.clone());
                    labels.push(space.label_vector(r)?);
                    masks.push(space.mask_vector(r));
                }
            }
        }
        let preds = read_score_file(scores, &space, &ids)?;
        AucReport::from_predictions(&space, &preds, &labels, &masks, &ids)?
    } else {
        let path = a
            .checkpoint
            .as_ref()
            .expect("clap enforces checkpoint or scores");
        let ckpt = Checkpoint::load(path)?;
        let model = ckpt.restore_model()?;
        let norm = if ckpt.normalization.is_empty() {
            Normalization::imagenet()
        } else {
            Normalization {
                per_dataset: ckpt.normalization.clone(),
            }
        };
        let (samples, assignment) = load_split_corpus(&space, &a.data, &a.splits)?;
        let idx = subset_indices(&samples, &assignment, subset);
        if idx.is_empty() {
            return Err(data_error(format!("{} subset is empty", subset.as_str())));
        }
        evaluate(&model, &samples, &idx, &norm, &space, a.batch_size)?
    };
    report.write(&a.out)?;
    print!("{report}");
    Ok(())
}

fn report_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("report.json")
    } else {
        p.to_path_buf()
    }
}

fn cmd_compare(a: CompareArgs) -> CmdResult {
    let ra = AucReport::load(&report_path(&a.a))?;
    let rb = AucReport::load(&report_path(&a.b))?;
    let table = compare_runs(&ra, &rb)?;
    if let Some(out) = &a.out {
        fs::create_dir_all(out)
            .map_err(|e| data_error(format!("creating {}: {e}", out.display())))?;
        fs::write(out.join("delta.csv"), table.to_csv())
            .map_err(|e| data_error(format!("writing delta: {e}")))?;
    }
    print!("{table}");
    Ok(())
}
