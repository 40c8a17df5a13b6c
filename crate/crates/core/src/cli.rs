//! Command-line front end. Every subcommand writes deterministic pretty JSON
//! (or CSV) to `--out`, or to stdout when `--out` is absent.

use std::ffi::OsString;
use std::fmt::Debug;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::io::{self, FormatError, HeadDocument};
use crate::metrics::{self, MetricsError, RobustnessScores};
use crate::model::{empirical_confusion, ConfusionMatrix, ModelError, SampleTable, Taxonomy};
use crate::probing::{self, HeadKind, TrainOptions};
use crate::report::{self, EstimatorInputs, InputRecord, PriorDocument, Provenance, ReportError};
use crate::simulator::{self, SimConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "fairprobe", version, about = "Demographic fairness auditing for face pipelines")]
struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "FAIRPROBE_THREADS")]
    threads: Option<usize>,
    /// Fail instead of skipping groups with no observations.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Accuracy, fairness and robustness report, optionally with the estimator block.
    Audit(AuditArgs),
    /// HomE, MaMA and MiMA from per-image predictions.
    Robustness(RobustnessArgs),
    /// Empirical confusion matrix from true and predicted segments.
    Confusion(ConfusionArgs),
    /// Plug-in and corrected per-group success rates.
    Correct(CorrectArgs),
    /// Monte Carlo check of the plug-in bias and the corrected estimator.
    Simulate(SimulateArgs),
    /// Train a one-vs-rest SVM head on embeddings.
    TrainHead(TrainHeadArgs),
    /// Predict segments with a trained head.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
struct AuditArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    /// Labels CSV; may also carry predicted_segment.
    #[arg(long)]
    labels: PathBuf,
    /// Predictions CSV, joined to labels by image_id.
    #[arg(long)]
    preds: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    min_images: u64,
    #[arg(long, requires = "confusion")]
    trials: Option<PathBuf>,
    #[arg(long, requires = "trials")]
    confusion: Option<PathBuf>,
    #[arg(long, requires = "trials")]
    prior: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RobustnessArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    preds: PathBuf,
    #[arg(long, default_value_t = 1)]
    min_images: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ConfusionArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    preds: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CorrectArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    trials: PathBuf,
    #[arg(long)]
    confusion: PathBuf,
    #[arg(long)]
    prior: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// A single config object, or an array of configs for a sweep.
    #[arg(long)]
    config: PathBuf,
    /// Per-group result rows as CSV.
    #[arg(long)]
    results: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainHeadArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    /// Labels CSV with a true_segment for every embedded image.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value = "linear")]
    kind: HeadKind,
    #[arg(long)]
    balanced: bool,
    #[arg(long, default_value_t = probing::DEFAULT_REGULARIZATION)]
    reg: f64,
    #[arg(long, default_value_t = probing::DEFAULT_MAX_ITER)]
    max_iter: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    head: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    /// Training embeddings of an RBF head, overriding the recorded path.
    #[arg(long)]
    train_embeddings: Option<PathBuf>,
    /// Labels CSV supplying identity ids and true segments.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Error reported on stderr as a JSON object.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    pub error: String,
    pub message: String,
    pub file: Option<String>,
    pub record: Option<u64>,
    #[serde(skip)]
    pub code: i32,
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        let code = if matches!(e, FormatError::Io { .. }) { EXIT_IO } else { EXIT_INVALID };
        CliError {
            error: e.kind().to_string(),
            message: e.to_string(),
            file: Some(e.path().display().to_string()),
            record: e.record(),
            code,
        }
    }
}

const WRAPPERS: &[&str] = &["Model", "Metrics", "Estimator", "Linalg", "Report", "Sim", "Probe"];

/// Innermost variant name of a possibly wrapped error.
fn variant_name<E: Debug>(e: &E) -> String {
    let text = format!("{e:?}");
    let mut rest = text.as_str();
    loop {
        let end = rest.find(|c: char| !c.is_alphanumeric() && c != '_').unwrap_or(rest.len());
        let name = &rest[..end];
        if WRAPPERS.contains(&name) && rest[end..].starts_with('(') {
            rest = &rest[end + 1..];
        } else {
            return name.to_string();
        }
    }
}

/// Data row of a table-level error, as a 1-based CSV line.
fn table_record(e: &ModelError) -> Option<u64> {
    match e {
        ModelError::MissingLabel { row, .. } | ModelError::SegmentOutOfRange { row, .. } => Some(*row as u64 + 2),
        _ => None,
    }
}

fn invalid<E: Debug + std::fmt::Display>(e: E, file: Option<&Path>) -> CliError {
    CliError {
        error: variant_name(&e),
        message: e.to_string(),
        file: file.map(|p| p.display().to_string()),
        record: None,
        code: EXIT_INVALID,
    }
}

fn metrics_err(e: MetricsError, file: &Path) -> CliError {
    let record = match &e {
        MetricsError::Model(m) => table_record(m),
        MetricsError::MissingPrediction { row, .. } => Some(*row as u64 + 2),
        _ => None,
    };
    CliError { record, ..invalid(e, Some(file)) }
}

fn report_err(e: ReportError, file: &Path) -> CliError {
    match e {
        ReportError::Metrics(m) => metrics_err(m, file),
        ReportError::Model(m) => {
            let record = table_record(&m);
            CliError { record, ..invalid(m, Some(file)) }
        }
        other => invalid(other, Some(file)),
    }
}

struct Context {
    seed: u64,
    strict: bool,
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(path) => Ok(io::write_bytes(path, bytes)?),
        None => {
            use std::io::Write;
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes).and_then(|_| stdout.flush()).map_err(|e| CliError {
                error: "Io".into(),
                message: e.to_string(),
                file: None,
                record: None,
                code: EXIT_IO,
            })
        }
    }
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<(), CliError> {
    emit(out, &io::to_json_bytes(value))
}

fn input(role: &str, path: &Path) -> Result<InputRecord, CliError> {
    Ok(InputRecord { role: role.into(), file: path.display().to_string(), sha256: io::file_digest(path)? })
}

fn load_taxonomy(path: &Path) -> Result<Taxonomy, CliError> {
    Ok(io::read_json(path)?)
}

/// Labels, with predictions overlaid when a separate file is given.
fn load_joined(taxonomy: &Taxonomy, labels: &Path, preds: Option<&Path>) -> Result<SampleTable, CliError> {
    let table = io::read_labels(labels, taxonomy)?;
    match preds {
        None => Ok(table),
        Some(p) => {
            let preds = io::read_labels(p, taxonomy)?;
            report::merge_predictions(&table, &preds).map_err(|e| report_err(e, p))
        }
    }
}

fn load_prior(path: Option<&Path>) -> Result<Option<Vec<f64>>, CliError> {
    path.map(|p| io::read_json::<PriorDocument>(p).map(PriorDocument::into_vec))
        .transpose()
        .map_err(CliError::from)
}

fn audit(ctx: &Context, a: &AuditArgs) -> Result<(), CliError> {
    let taxonomy = load_taxonomy(&a.taxonomy)?;
    let table = load_joined(&taxonomy, &a.labels, a.preds.as_deref())?;
    let mut inputs = vec![input("taxonomy", &a.taxonomy)?, input("labels", &a.labels)?];
    if let Some(p) = &a.preds {
        inputs.push(input("predictions", p)?);
    }
    let est = match (&a.trials, &a.confusion) {
        (Some(t), Some(c)) => {
            let trials = io::read_trials(t, &taxonomy)?;
            let confusion: ConfusionMatrix = io::read_json(c)?;
            check_k(&confusion, &taxonomy, c)?;
            let prior = load_prior(a.prior.as_deref())?;
            inputs.push(input("trials", t)?);
            inputs.push(input("confusion", c)?);
            if let Some(p) = &a.prior {
                inputs.push(input("prior", p)?);
            }
            Some((trials, confusion, prior))
        }
        _ => None,
    };
    let est_inputs = est.as_ref().map(|(trials, confusion, prior)| EstimatorInputs {
        trials,
        confusion,
        prior: prior.clone(),
        strict: ctx.strict,
        seed: ctx.seed,
    });
    let blame = a.trials.as_deref().unwrap_or(&a.labels);
    let report = report::build_audit(&table, &taxonomy, a.min_images, est_inputs, Provenance::new(ctx.seed, inputs))
        .map_err(|e| match e {
            ReportError::Estimator(_) | ReportError::PriorLength { .. } | ReportError::PriorNotSimplex
            | ReportError::NonPositivePrior(_) => report_err(e, blame),
            other => report_err(other, a.preds.as_deref().unwrap_or(&a.labels)),
        })?;
    emit_json(a.out.as_deref(), &report)
}

fn check_k(c: &ConfusionMatrix, taxonomy: &Taxonomy, file: &Path) -> Result<(), CliError> {
    if c.k() != taxonomy.k() {
        return Err(invalid(ModelError::LengthMismatch { expected: taxonomy.k(), actual: c.k() }, Some(file)));
    }
    Ok(())
}

#[derive(Serialize)]
struct RobustnessOutput {
    min_images: u64,
    #[serde(flatten)]
    scores: RobustnessScores,
    provenance: Provenance,
}

fn robustness(ctx: &Context, a: &RobustnessArgs) -> Result<(), CliError> {
    let taxonomy = load_taxonomy(&a.taxonomy)?;
    let table = io::read_labels(&a.preds, &taxonomy)?;
    let scores = metrics::robustness_scores(&table, &taxonomy, a.min_images).map_err(|e| metrics_err(e, &a.preds))?;
    let provenance = Provenance::new(ctx.seed, vec![input("taxonomy", &a.taxonomy)?, input("predictions", &a.preds)?]);
    emit_json(a.out.as_deref(), &RobustnessOutput { min_images: a.min_images, scores, provenance })
}

fn confusion(a: &ConfusionArgs) -> Result<(), CliError> {
    let taxonomy = load_taxonomy(&a.taxonomy)?;
    let table = load_joined(&taxonomy, &a.labels, a.preds.as_deref())?;
    let blame = a.preds.as_deref().unwrap_or(&a.labels);
    let c = empirical_confusion(&table, &taxonomy).map_err(|e| {
        let record = table_record(&e);
        CliError { record, ..invalid(e, Some(blame)) }
    })?;
    emit_json(a.out.as_deref(), &c)
}

#[derive(Serialize)]
struct CorrectOutput {
    #[serde(flatten)]
    block: report::EstimatorBlock,
    provenance: Provenance,
}

fn correct(ctx: &Context, a: &CorrectArgs) -> Result<(), CliError> {
    let taxonomy = load_taxonomy(&a.taxonomy)?;
    let trials = io::read_trials(&a.trials, &taxonomy)?;
    let c: ConfusionMatrix = io::read_json(&a.confusion)?;
    check_k(&c, &taxonomy, &a.confusion)?;
    let prior = load_prior(a.prior.as_deref())?;
    let block = report::estimator_block(EstimatorInputs {
        trials: &trials,
        confusion: &c,
        prior,
        strict: ctx.strict,
        seed: ctx.seed,
    })
    .map_err(|e| {
        let blame = match e {
            ReportError::PriorLength { .. } | ReportError::PriorNotSimplex => a.prior.as_deref().unwrap_or(&a.trials),
            ReportError::Estimator(crate::estimator::EstimatorError::SingularConfusion { .. }) => &a.confusion,
            _ => &a.trials,
        };
        report_err(e, blame)
    })?;
    let mut inputs = vec![input("taxonomy", &a.taxonomy)?, input("trials", &a.trials)?, input("confusion", &a.confusion)?];
    if let Some(p) = &a.prior {
        inputs.push(input("prior", p)?);
    }
    emit_json(a.out.as_deref(), &CorrectOutput { block, provenance: Provenance::new(ctx.seed, inputs) })
}

fn simulate(seed: Option<u64>, a: &SimulateArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&a.config)
        .map_err(|source| FormatError::Io { path: a.config.clone(), source })?;
    let override_seed = |mut c: SimConfig| {
        if let Some(s) = seed {
            c.seed = s;
        }
        c
    };
    let (json, rows) = if text.trim_start().starts_with('[') {
        let configs: Vec<SimConfig> = io::read_json(&a.config)?;
        let configs: Vec<SimConfig> = configs.into_iter().map(override_seed).collect();
        let out = simulator::sweep(&configs);
        (io::to_json_bytes(&out), out.rows)
    } else {
        let config = override_seed(io::read_json(&a.config)?);
        let report = simulator::simulate(&config).map_err(|e| invalid(e, Some(&a.config)))?;
        let rows = report.result_rows(0);
        (io::to_json_bytes(&report), rows)
    };
    if let Some(path) = &a.results {
        let csv = io::encode_csv(&rows).map_err(|e| invalid(e, Some(path)))?;
        io::write_bytes(path, &csv)?;
    }
    emit(a.out.as_deref(), &json)
}

fn train_head(a: &TrainHeadArgs) -> Result<(), CliError> {
    let taxonomy = load_taxonomy(&a.taxonomy)?;
    let x = io::read_embeddings(&a.embeddings)?;
    let table = io::read_labels(&a.labels, &taxonomy)?;
    let by_image: std::collections::HashMap<&str, Option<usize>> =
        table.rows().iter().map(|r| (r.image_id.as_str(), r.true_segment)).collect();
    let mut labels = Vec::with_capacity(x.len());
    for (i, id) in x.image_ids().iter().enumerate() {
        match by_image.get(id.as_str()).copied().flatten() {
            Some(l) => labels.push(l),
            None => {
                return Err(CliError {
                    error: "MissingLabel".into(),
                    message: format!("embedded image {id:?} has no true_segment in {}", a.labels.display()),
                    file: Some(a.embeddings.display().to_string()),
                    record: Some(i as u64),
                    code: EXIT_INVALID,
                })
            }
        }
    }
    let mut opts = TrainOptions::new(a.kind);
    opts.regularization = a.reg;
    opts.max_iter = a.max_iter;
    let mut generalized = false;
    if a.balanced {
        let w = probing::balanced_class_weights(&labels, taxonomy.k()).map_err(|e| invalid(e, Some(&a.labels)))?;
        generalized = w.generalized;
        opts.class_weights = Some(w.weights);
    }
    let head = probing::train_head(&x, &labels, taxonomy.k(), &opts).map_err(|e| invalid(e, Some(&a.embeddings)))?;
    let path = a.embeddings.display().to_string();
    let digest = io::file_digest(&a.embeddings)?;
    let doc = HeadDocument::from_head(&head, &taxonomy, generalized, Some((&path, &digest)))
        .map_err(|e| invalid(e, Some(&a.embeddings)))?;
    emit_json(a.out.as_deref(), &doc)
}

/// Recorded training path, tried as given and then beside the head file.
fn locate_training(recorded: &str, head_path: &Path) -> PathBuf {
    let p = PathBuf::from(recorded);
    if p.is_absolute() || p.exists() {
        return p;
    }
    match head_path.parent() {
        Some(dir) => dir.join(&p),
        None => p,
    }
}

fn predict(a: &PredictArgs) -> Result<(), CliError> {
    let doc: HeadDocument = io::read_json(&a.head)?;
    let taxonomy = doc.taxonomy.clone();
    let training = match (&doc.kind, &doc.support) {
        (HeadKind::Rbf, Some(sref)) => {
            let path = a.train_embeddings.clone().unwrap_or_else(|| locate_training(&sref.embeddings, &a.head));
            let actual = io::file_digest(&path)?;
            if actual != sref.sha256 {
                return Err(FormatError::DigestMismatch { path, expected: sref.sha256.clone(), actual }.into());
            }
            Some(io::read_embeddings(&path)?)
        }
        _ => None,
    };
    let head = doc.into_head(training.as_ref()).map_err(|e| invalid(e, Some(&a.head)))?;
    let x = io::read_embeddings(&a.embeddings)?;
    let preds = probing::predict(&head, &x).map_err(|e| invalid(e, Some(&a.embeddings)))?;
    let labels = a.labels.as_deref().map(|p| io::read_labels(p, &taxonomy)).transpose()?;
    let lookup: std::collections::HashMap<String, (String, Option<usize>)> = labels
        .iter()
        .flat_map(|t| t.rows())
        .map(|r| (r.image_id.clone(), (r.identity_id.clone(), r.true_segment)))
        .collect();
    let mut table = preds.to_table(taxonomy.k(), |id| lookup.get(id).map(|(ident, _)| ident.clone())).into_rows();
    for r in &mut table {
        r.true_segment = lookup.get(&r.image_id).and_then(|(_, t)| *t);
    }
    let table = SampleTable::new(table, taxonomy.k()).map_err(|e| invalid(e, Some(&a.embeddings)))?;
    let csv = io::encode_labels(&table, &taxonomy).map_err(|e| invalid(e, a.out.as_deref()))?;
    emit(a.out.as_deref(), &csv)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let ctx = Context { seed: cli.seed.unwrap_or(crate::linalg::DEFAULT_POWER_SEED), strict: cli.strict };
    match &cli.command {
        Command::Audit(a) => audit(&ctx, a),
        Command::Robustness(a) => robustness(&ctx, a),
        Command::Confusion(a) => confusion(a),
        Command::Correct(a) => correct(&ctx, a),
        Command::Simulate(a) => simulate(cli.seed, a),
        Command::TrainHead(a) => train_head(a),
        Command::Predict(a) => predict(a),
    }
}

fn report_failure(e: &CliError) -> i32 {
    let text = serde_json::to_string(e).expect("error serializes");
    eprintln!("{text}");
    e.code
}

/// Parses `argv` (program name first) and runs the subcommand, returning the
/// process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let threads = cli.threads;
    let run = move || dispatch(cli);
    let result = match threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(run),
            Err(e) => Err(invalid(e, None)),
        },
        None => run(),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => report_failure(&e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_name_unwraps() {
        let e = MetricsError::Model(ModelError::EmptyRow(vec![1]));
        assert_eq!(variant_name(&e), "EmptyRow");
        assert_eq!(variant_name(&MetricsError::ZeroMean), "ZeroMean");
        let r = ReportError::Estimator(crate::estimator::EstimatorError::SingularConfusion { condition: 1e13 });
        assert_eq!(variant_name(&r), "SingularConfusion");
    }

    #[test]
    fn missing_flags_exit_two() {
        assert_eq!(run_cli(["fairprobe", "audit", "--labels", "x.csv"]), EXIT_INVALID);
        assert_eq!(run_cli(["fairprobe"]), EXIT_INVALID);
    }
}
