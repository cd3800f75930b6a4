//! Command-line front end. [`run`] parses arguments, executes one
//! subcommand and returns the process exit code: 0 on success, 1 for
//! invalid input or usage, 2 for internal failures such as unwritable
//! output.

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::correlation::{self, ModalCorrelation};
use crate::ft::{Method, MethodConfig};
use crate::ingest::{
    load_manifest, read_attention_records, DatasetManifest, EmbeddingMatrix, LabeledEmbedding, Modality, ModalityTag,
};
use crate::modality;
use crate::report::{self, fmt_opt, Table};
use crate::shift::{self, MmdEstimator, ShiftHeatmap, ShiftSeries};
use crate::stats::{self, Shrinkage, Standardizer};
use crate::toy::{self, SyntheticTask};

pub const DEFAULT_TJ: f64 = 60.0;
pub const DEFAULT_TV: f64 = 45.0;
pub const DEFAULT_TQ: f64 = 50.0;
pub const DEFAULT_MMD_GAMMA: f64 = 1.0;
pub const DEFAULT_MMD_SCALE: f64 = 1e4;
pub const DEFAULT_BINS: usize = 50;

#[derive(Debug, Parser)]
#[command(name = "mmshift", version, about = "Multi-modal distribution-shift analysis and robust fine-tuning benchmark")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Dataset manifest (JSON).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Covariance shrinkage: `auto` or `fixed=<eps>`.
    #[arg(long, global = true, default_value = "auto", value_parser = parse_shrinkage)]
    pub shrinkage: Shrinkage,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Z-score embeddings with ID-train column statistics before fitting.
    #[arg(long, global = true)]
    pub standardize: bool,
    /// Joint-shift threshold.
    #[arg(long, global = true, default_value_t = DEFAULT_TJ)]
    pub tj: f64,
    /// Visual-shift threshold.
    #[arg(long, global = true, default_value_t = DEFAULT_TV)]
    pub tv: f64,
    /// Question-shift threshold.
    #[arg(long, global = true, default_value_t = DEFAULT_TQ)]
    pub tq: f64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-sample shift scores, histograms and OOD composition.
    Score(ScoreArgs),
    /// Average shift per (descriptor, dataset).
    Heatmap(HeatmapArgs),
    /// Shift vs. published accuracy and per-sample modality correlations.
    Correlate(CorrelateArgs),
    /// Attention-based modality importance against joint shift.
    Mi(MiArgs),
    /// Sample test indices from the tails, peak and train overlap of a score histogram.
    SampleRegions(RegionArgs),
    /// RBF-kernel MMD between ID-train and test embeddings.
    Mmd(MmdArgs),
    /// Fine-tuning benchmark on the synthetic task.
    Toybench(ToybenchArgs),
    /// Load every file referenced by the manifest and check shapes.
    Validate,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Descriptor such as `VQ:pali:PT`; repeatable.
    #[arg(long = "tag", required = true)]
    pub tags: Vec<ModalityTag>,
    /// Restrict to these test datasets; repeatable.
    #[arg(long = "dataset")]
    pub datasets: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    /// Descriptors to include; defaults to every descriptor on ID-train.
    #[arg(long = "tag")]
    pub tags: Vec<ModalityTag>,
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    /// Fine-tuning method label, or `PT`.
    #[arg(long)]
    pub method: String,
    /// Precomputed heatmap CSV; computed from the manifest when absent.
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
    /// Also correlate per-sample V and Q shifts with joint shift.
    #[arg(long)]
    pub modal: bool,
    /// Model id, required when several models share the method.
    #[arg(long)]
    pub model: Option<String>,
}

#[derive(Debug, Args)]
pub struct MiArgs {
    /// Dataset with an attention file.
    #[arg(long)]
    pub dataset: String,
    /// Joint descriptor used for shift scores.
    #[arg(long)]
    pub tag: ModalityTag,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    /// Explicit bin edges, comma separated; overrides `--bins`.
    #[arg(long, value_delimiter = ',')]
    pub edges: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct RegionArgs {
    #[arg(long)]
    pub tag: ModalityTag,
    #[arg(long)]
    pub dataset: String,
    /// Samples per region.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct MmdArgs {
    #[arg(long)]
    pub tag: ModalityTag,
    #[arg(long = "dataset")]
    pub datasets: Vec<String>,
    /// RBF kernel width.
    #[arg(long, default_value_t = DEFAULT_MMD_GAMMA)]
    pub gamma: f64,
    /// Multiplier applied to MMD².
    #[arg(long, default_value_t = DEFAULT_MMD_SCALE)]
    pub scale: f64,
    /// Use the unbiased estimator.
    #[arg(long)]
    pub unbiased: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskKind {
    QuestionShift,
    NoShift,
}

#[derive(Debug, Args)]
pub struct ToybenchArgs {
    /// `all` or a comma list such as `vanilla,l2sp=1,wise=0.5,ftp=0.5`.
    #[arg(long, default_value = "all")]
    pub methods: String,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = TaskKind::QuestionShift)]
    pub task: TaskKind,
}

fn parse_shrinkage(s: &str) -> Result<Shrinkage, String> {
    if s == "auto" {
        return Ok(Shrinkage::Auto);
    }
    let eps = s
        .strip_prefix("fixed=")
        .ok_or_else(|| format!("expected 'auto' or 'fixed=<eps>', got '{s}'"))?;
    match eps.parse::<f64>() {
        Ok(e) if e.is_finite() && e >= 0.0 => Ok(Shrinkage::Fixed(e)),
        _ => Err(format!("invalid shrinkage '{eps}'")),
    }
}

/// Parses a `--methods` value.
pub fn parse_methods(spec: &str) -> Result<Vec<MethodConfig>, String> {
    if spec.trim() == "all" {
        return Ok(Method::ALL.into_iter().map(MethodConfig::new).collect());
    }
    spec.split(',')
        .map(|item| {
            let (name, value) = match item.split_once('=') {
                Some((n, v)) => (n, Some(v)),
                None => (item, None),
            };
            let method: Method = name.parse().map_err(|e: crate::ft::FtError| e.to_string())?;
            let mut cfg = MethodConfig::new(method);
            if let Some(v) = value {
                let v: f64 = v.parse().map_err(|_| format!("bad value in '{item}'"))?;
                cfg = match method {
                    Method::WiSE => cfg.with_alpha(v),
                    Method::L2SP => cfg.with_lambda(v),
                    Method::FTP => cfg.with_kappa(v),
                    _ => return Err(format!("method '{name}' takes no parameter")),
                };
            }
            cfg.validate().map_err(|e| e.to_string())?;
            Ok(cfg)
        })
        .collect()
}

#[derive(Debug)]
enum CliError {
    Input(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Internal(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Internal(m) => m,
        }
    }
}

macro_rules! input_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Input(e.to_string())
            }
        }
    )*};
}

input_error!(
    crate::ingest::IngestError,
    crate::stats::StatsError,
    crate::shift::ShiftError,
    crate::correlation::CorrelationError,
    crate::modality::MiError,
    crate::ft::FtError
);

impl From<report::ReportError> for CliError {
    fn from(e: report::ReportError) -> Self {
        match e {
            report::ReportError::Malformed { .. } | report::ReportError::Csv { .. } => CliError::Input(e.to_string()),
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<toy::ToyError> for CliError {
    fn from(e: toy::ToyError) -> Self {
        match e {
            toy::ToyError::InvalidArgument(_) | toy::ToyError::Ft(_) => CliError::Input(e.to_string()),
            other => CliError::Internal(other.to_string()),
        }
    }
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    let rendered = e.to_string();
                    eprintln!("{}", rendered.lines().next().unwrap_or("error: invalid arguments"));
                    1
                }
            };
        }
    };
    match execute(&cli) {
        Ok(written) => {
            for p in written {
                println!("{}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {}", e.message().replace('\n', " "));
            e.code()
        }
    }
}

fn execute(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads)
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    pool.install(|| dispatch(cli))
}

fn dispatch(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let g = &cli.global;
    if let Command::Toybench(a) = &cli.command {
        prepare_out(&g.out)?;
        return toybench(g, a);
    }
    let manifest_path = g
        .manifest
        .as_ref()
        .ok_or_else(|| CliError::Input("--manifest is required for this command".into()))?;
    let manifest = load_manifest(manifest_path)?;
    if let Command::Validate = cli.command {
        validate(&manifest)?;
        return Ok(Vec::new());
    }
    prepare_out(&g.out)?;
    match &cli.command {
        Command::Score(a) => score(g, &manifest, a),
        Command::Heatmap(a) => heatmap(g, &manifest, a),
        Command::Correlate(a) => correlate(g, &manifest, a),
        Command::Mi(a) => mi(g, &manifest, a),
        Command::SampleRegions(a) => sample_regions(g, &manifest, a),
        Command::Mmd(a) => mmd(g, &manifest, a),
        Command::Toybench(_) | Command::Validate => unreachable!(),
    }
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Internal(format!("{}: {e}", dir.display())))
}

/// ID-train and selected test embeddings for one descriptor, standardized
/// with train statistics when requested.
struct Loaded {
    train: LabeledEmbedding,
    tests: Vec<LabeledEmbedding>,
}

fn test_ids(manifest: &DatasetManifest, tag: &ModalityTag, only: &[String]) -> Result<Vec<String>, CliError> {
    for id in only {
        let e = manifest
            .entry(id)
            .ok_or_else(|| CliError::Input(format!("unknown dataset '{id}'")))?;
        if e.dataset_id == manifest.id_train().dataset_id {
            return Err(CliError::Input(format!("'{id}' is the ID-train set")));
        }
    }
    Ok(manifest
        .test_entries()
        .filter(|e| e.embedding_paths.contains_key(tag))
        .filter(|e| only.is_empty() || only.contains(&e.dataset_id))
        .map(|e| e.dataset_id.clone())
        .collect())
}

fn load(manifest: &DatasetManifest, tag: &ModalityTag, ids: &[String], standardize: bool) -> Result<Loaded, CliError> {
    let train = manifest.load_embedding(&manifest.id_train().dataset_id, tag)?;
    let tests = ids
        .iter()
        .map(|id| manifest.load_embedding(id, tag))
        .collect::<Result<Vec<_>, _>>()?;
    if !standardize {
        return Ok(Loaded { train, tests });
    }
    let z = Standardizer::fit(train.matrix.data().view())?;
    let apply = |mut e: LabeledEmbedding| -> Result<LabeledEmbedding, CliError> {
        let data = z.apply(e.matrix.data().view())?;
        e.matrix = EmbeddingMatrix::new(data, e.matrix.dtype())?;
        Ok(e)
    };
    Ok(Loaded {
        train: apply(train)?,
        tests: tests.into_iter().map(apply).collect::<Result<_, _>>()?,
    })
}

/// Train series followed by one series per test dataset.
fn score_tag(
    g: &GlobalArgs,
    manifest: &DatasetManifest,
    tag: &ModalityTag,
    ids: &[String],
) -> Result<(ShiftSeries, Vec<ShiftSeries>), CliError> {
    let data = load(manifest, tag, ids, g.standardize)?;
    let model = stats::fit_gaussian(&data.train.matrix, g.shrinkage)?;
    let train = shift::score_dataset(&model, &data.train)?;
    let tests = data
        .tests
        .iter()
        .map(|t| shift::score_dataset(&model, t))
        .collect::<Result<_, _>>()?;
    Ok((train, tests))
}

fn score(g: &GlobalArgs, manifest: &DatasetManifest, a: &ScoreArgs) -> Result<Vec<PathBuf>, CliError> {
    if a.bins == 0 {
        return Err(CliError::Input("--bins must be at least 1".into()));
    }
    let mut scores = Table::new(["dataset_id", "tag", "sample_id", "score"]);
    let mut summary = Table::new(["dataset_id", "tag", "score_mean", "n"]);
    let mut hist = Table::new(["tag", "dataset_id", "edge_lo", "edge_hi", "count"]);
    let mut by_tag: Vec<(ModalityTag, Vec<ShiftSeries>)> = Vec::new();
    for tag in &a.tags {
        let ids = test_ids(manifest, tag, &a.datasets)?;
        let (train, tests) = score_tag(g, manifest, tag, &ids)?;
        let hi = std::iter::once(&train)
            .chain(&tests)
            .flat_map(|s| s.scores.iter().copied())
            .fold(0.0, f64::max);
        let edges = stats::linspace_edges(0.0, if hi > 0.0 { hi.next_up() } else { 1.0 }, a.bins);
        for s in std::iter::once(&train).chain(&tests) {
            for (id, v) in s.sample_ids.iter().zip(&s.scores) {
                scores.push([s.dataset_id.clone(), tag.to_string(), id.clone(), v.to_string()]);
            }
            summary.push([s.dataset_id.clone(), tag.to_string(), s.average.to_string(), s.len().to_string()]);
            let h = stats::histogram(&s.scores, &edges)?;
            for (lo, hi, c) in h.bins() {
                hist.push([tag.to_string(), s.dataset_id.clone(), lo.to_string(), hi.to_string(), c.to_string()]);
            }
        }
        by_tag.push((tag.clone(), tests));
    }
    let mut written = report::write_table(&g.out, "shift_scores", &scores)?;
    written.extend(report::write_table(&g.out, "shift_summary", &summary)?);
    written.extend(report::write_table(&g.out, "histograms", &hist)?);
    let comp = composition(g, &by_tag)?;
    if !comp.rows.is_empty() {
        written.extend(report::write_table(&g.out, "ood_composition", &comp)?);
    }
    Ok(written)
}

/// One row per (joint descriptor, dataset) whose V and Q counterparts were
/// also scored.
fn composition(g: &GlobalArgs, by_tag: &[(ModalityTag, Vec<ShiftSeries>)]) -> Result<Table, CliError> {
    let mut t = Table::new([
        "tag",
        "dataset_id",
        "joint_ood",
        "pct_oodv_idq",
        "pct_idv_oodq",
        "pct_oodv_oodq",
        "pct_idv_idq",
    ]);
    let find = |m: Modality, like: &ModalityTag, ds: &str| -> Option<&ShiftSeries> {
        by_tag
            .iter()
            .find(|(t, _)| t.modality == m && t.model_id == like.model_id && t.training_state == like.training_state)
            .and_then(|(_, series)| series.iter().find(|s| s.dataset_id == ds))
    };
    for (tag, series) in by_tag.iter().filter(|(t, _)| t.modality == Modality::VQ) {
        for joint in series {
            let (Some(v), Some(q)) = (find(Modality::V, tag, &joint.dataset_id), find(Modality::Q, tag, &joint.dataset_id))
            else {
                continue;
            };
            let c = shift::ood_composition(v, q, joint, g.tv, g.tq, g.tj)?;
            t.push([
                tag.to_string(),
                joint.dataset_id.clone(),
                c.joint_ood.to_string(),
                c.pct_oodv_idq.to_string(),
                c.pct_idv_oodq.to_string(),
                c.pct_oodv_oodq.to_string(),
                c.pct_idv_idq.to_string(),
            ]);
        }
    }
    Ok(t)
}

fn heatmap_tags(manifest: &DatasetManifest, requested: &[ModalityTag]) -> Vec<ModalityTag> {
    if requested.is_empty() {
        manifest.id_train().embedding_paths.keys().cloned().collect()
    } else {
        requested.to_vec()
    }
}

fn compute_heatmap(g: &GlobalArgs, manifest: &DatasetManifest, tags: &[ModalityTag]) -> Result<ShiftHeatmap, CliError> {
    if !g.standardize {
        return Ok(shift::build_heatmap(manifest, tags, g.shrinkage)?);
    }
    let ids: Vec<String> = manifest.test_entries().map(|e| e.dataset_id.clone()).collect();
    let mut cache: HashMap<(String, ModalityTag), LabeledEmbedding> = HashMap::new();
    for tag in tags {
        let present: Vec<String> = ids
            .iter()
            .filter(|id| manifest.entry(id).is_some_and(|e| e.embedding_paths.contains_key(tag)))
            .cloned()
            .collect();
        if !manifest.id_train().embedding_paths.contains_key(tag) {
            continue;
        }
        let data = load(manifest, tag, &present, true)?;
        for e in std::iter::once(data.train).chain(data.tests) {
            cache.insert((e.dataset_id.clone(), tag.clone()), e);
        }
    }
    Ok(shift::build_heatmap_with(
        manifest,
        tags,
        |id, tag| {
            cache
                .get(&(id.to_string(), tag.clone()))
                .cloned()
                .ok_or_else(|| crate::ingest::IngestError::MissingEmbedding {
                    tag: tag.to_string(),
                    dataset_id: id.to_string(),
                })
        },
        g.shrinkage,
    )?)
}

fn heatmap(g: &GlobalArgs, manifest: &DatasetManifest, a: &HeatmapArgs) -> Result<Vec<PathBuf>, CliError> {
    let tags = heatmap_tags(manifest, &a.tags);
    let h = compute_heatmap(g, manifest, &tags)?;
    Ok(report::write_table(&g.out, "heatmap", &report::heatmap_table(&h))?)
}

fn method_tags(manifest: &DatasetManifest, method: &str, model: Option<&str>) -> Result<[ModalityTag; 3], CliError> {
    let candidates: Vec<&ModalityTag> = manifest
        .id_train()
        .embedding_paths
        .keys()
        .filter(|t| t.training_state.method() == method && model.is_none_or(|m| t.model_id == m))
        .collect();
    let pick = |m: Modality| -> Result<ModalityTag, CliError> {
        let hits: Vec<&&ModalityTag> = candidates.iter().filter(|t| t.modality == m).collect();
        match hits.as_slice() {
            [one] => Ok((**one).clone()),
            [] => Err(CliError::Input(format!("no {} descriptor for method '{method}'", m.as_str()))),
            _ => Err(CliError::Input(format!(
                "several {} descriptors for method '{method}'; pass --model",
                m.as_str()
            ))),
        }
    };
    Ok([pick(Modality::V)?, pick(Modality::Q)?, pick(Modality::VQ)?])
}

fn correlate(g: &GlobalArgs, manifest: &DatasetManifest, a: &CorrelateArgs) -> Result<Vec<PathBuf>, CliError> {
    let h = match &a.heatmap {
        Some(p) => report::read_heatmap(p)?,
        None => compute_heatmap(g, manifest, &method_tags(manifest, &a.method, a.model.as_deref())?)?,
    };
    let c = correlation::shift_perf_correlation(&h, manifest, &a.method)?;
    let mut t = Table::new(["method", "r_v", "r_q", "r_joint", "n_datasets"]);
    t.push([
        c.method.clone(),
        c.r_v.to_string(),
        c.r_q.to_string(),
        c.r_joint.to_string(),
        c.datasets_used.len().to_string(),
    ]);
    let mut written = report::write_table(&g.out, "shift_perf_correlation", &t)?;
    if a.modal {
        let [tv, tq, tj] = method_tags(manifest, &a.method, a.model.as_deref())?;
        let ids: Vec<String> = manifest
            .test_entries()
            .filter(|e| [&tv, &tq, &tj].iter().all(|t| e.embedding_paths.contains_key(*t)))
            .map(|e| e.dataset_id.clone())
            .collect();
        let (_, v) = score_tag(g, manifest, &tv, &ids)?;
        let (_, q) = score_tag(g, manifest, &tq, &ids)?;
        let (_, j) = score_tag(g, manifest, &tj, &ids)?;
        let per: Vec<ModalCorrelation> = v
            .iter()
            .zip(&q)
            .zip(&j)
            .map(|((v, q), j)| correlation::modal_correlation(v, q, j))
            .collect::<Result<_, _>>()?;
        let (av, aq) = correlation::average_modal_correlation(&per)?;
        let mut mt = Table::new(["dataset_id", "r_v_joint", "r_q_joint", "n"]);
        for c in &per {
            mt.push([c.dataset_id.clone(), c.r_v_joint.to_string(), c.r_q_joint.to_string(), c.n.to_string()]);
        }
        mt.push(["average".to_string(), av.to_string(), aq.to_string(), String::new()]);
        written.extend(report::write_table(&g.out, "modal_correlation", &mt)?);
    }
    Ok(written)
}

fn mi(g: &GlobalArgs, manifest: &DatasetManifest, a: &MiArgs) -> Result<Vec<PathBuf>, CliError> {
    let entry = manifest
        .entry(&a.dataset)
        .ok_or_else(|| CliError::Input(format!("unknown dataset '{}'", a.dataset)))?;
    let att_path = entry
        .attention_path
        .as_ref()
        .ok_or_else(|| CliError::Input(format!("dataset '{}' has no attention file", a.dataset)))?;
    let records = read_attention_records(att_path)?;
    let results = modality::sample_mi_all(&records)?;
    let (_, mut series) = score_tag(g, manifest, &a.tag, std::slice::from_ref(&a.dataset))?;
    let shifts = series
        .pop()
        .ok_or_else(|| CliError::Input(format!("dataset '{}' has no {} embedding", a.dataset, a.tag)))?;
    let edges = if a.edges.is_empty() {
        if a.bins == 0 {
            return Err(CliError::Input("--bins must be at least 1".into()));
        }
        let hi = shifts.scores.iter().copied().fold(0.0, f64::max);
        stats::linspace_edges(0.0, if hi > 0.0 { hi.next_up() } else { 1.0 }, a.bins)
    } else {
        a.edges.clone()
    };
    let profile = modality::mi_vs_shift(&results, &shifts, &edges)?;
    let table = modality::id_ood_mi_table(&results, &shifts, g.tj)?;

    let shift_of: HashMap<&str, f64> = shifts
        .sample_ids
        .iter()
        .map(String::as_str)
        .zip(shifts.scores.iter().copied())
        .collect();
    let mut samples = Table::new(["sample_id", "mi_v", "mi_q", "n_image", "n_question", "shift"]);
    for r in &results {
        samples.push([
            r.sample_id.clone(),
            r.mi_v.to_string(),
            r.mi_q.to_string(),
            r.n_image.to_string(),
            r.n_question.to_string(),
            fmt_opt(shift_of.get(r.sample_id.as_str()).copied()),
        ]);
    }
    let mut prof = Table::new(["bin_lo", "bin_hi", "count", "mi_v_mean", "mi_q_mean"]);
    for i in 0..profile.counts.len() {
        prof.push([
            profile.bin_edges[i].to_string(),
            profile.bin_edges[i + 1].to_string(),
            profile.counts[i].to_string(),
            fmt_opt(profile.mi_v_mean[i]),
            fmt_opt(profile.mi_q_mean[i]),
        ]);
    }
    let mut tab = Table::new(["split", "mi_v", "mi_q", "n"]);
    for (name, pair, n) in [
        ("ID", table.id, table.n_id),
        ("OOD", table.ood, table.n_ood),
        ("overall", table.overall, table.n_id + table.n_ood),
    ] {
        tab.push([
            name.to_string(),
            fmt_opt(pair.map(|p| p.mi_v)),
            fmt_opt(pair.map(|p| p.mi_q)),
            n.to_string(),
        ]);
    }
    let mut written = report::write_table(&g.out, "mi_samples", &samples)?;
    written.extend(report::write_table(&g.out, "mi_profile", &prof)?);
    written.extend(report::write_table(&g.out, "mi_table", &tab)?);
    Ok(written)
}

fn sample_regions(g: &GlobalArgs, manifest: &DatasetManifest, a: &RegionArgs) -> Result<Vec<PathBuf>, CliError> {
    let (train, mut tests) = score_tag(g, manifest, &a.tag, std::slice::from_ref(&a.dataset))?;
    let test = tests
        .pop()
        .ok_or_else(|| CliError::Input(format!("dataset '{}' has no {} embedding", a.dataset, a.tag)))?;
    let regions = shift::sample_regions(&train.scores, &test.scores, a.k, g.seed)?;
    let mut t = Table::new(["region", "population", "index", "sample_id", "score"]);
    for r in &regions {
        for &i in &r.sample_ids {
            t.push([
                r.region.as_str().to_string(),
                r.population.to_string(),
                i.to_string(),
                test.sample_ids[i].clone(),
                test.scores[i].to_string(),
            ]);
        }
    }
    Ok(report::write_table(&g.out, "regions", &t)?)
}

fn mmd(g: &GlobalArgs, manifest: &DatasetManifest, a: &MmdArgs) -> Result<Vec<PathBuf>, CliError> {
    let ids = test_ids(manifest, &a.tag, &a.datasets)?;
    let data = load(manifest, &a.tag, &ids, g.standardize)?;
    let est = if a.unbiased {
        MmdEstimator::Unbiased
    } else {
        MmdEstimator::Biased
    };
    let mut t = Table::new(["tag", "dataset_id", "mmd"]);
    for test in &data.tests {
        let v = shift::mmd_rbf(
            data.train.matrix.data().view(),
            test.matrix.data().view(),
            a.gamma,
            a.scale,
            est,
        )?;
        t.push([a.tag.to_string(), test.dataset_id.clone(), v.to_string()]);
    }
    Ok(report::write_table(&g.out, "mmd", &t)?)
}

fn validate(manifest: &DatasetManifest) -> Result<(), CliError> {
    let mut dims: HashMap<&ModalityTag, (usize, String)> = HashMap::new();
    let (mut n_emb, mut n_att) = (0usize, 0usize);
    for e in &manifest.entries {
        let mut rows: Option<(usize, &ModalityTag)> = None;
        for tag in e.embedding_paths.keys() {
            let emb = manifest.load_embedding(&e.dataset_id, tag)?;
            n_emb += 1;
            match dims.get(tag) {
                Some((d, first)) if *d != emb.matrix.cols() => {
                    return Err(CliError::Input(format!(
                        "{tag}: '{}' has dimension {} but '{first}' has {d}",
                        e.dataset_id,
                        emb.matrix.cols()
                    )));
                }
                Some(_) => {}
                None => {
                    dims.insert(tag, (emb.matrix.cols(), e.dataset_id.clone()));
                }
            }
            match rows {
                Some((n, other)) if n != emb.matrix.rows() => {
                    return Err(CliError::Input(format!(
                        "dataset '{}': {tag} has {} rows but {other} has {n}",
                        e.dataset_id,
                        emb.matrix.rows()
                    )));
                }
                Some(_) => {}
                None => rows = Some((emb.matrix.rows(), tag)),
            }
        }
        if let Some(p) = &e.attention_path {
            read_attention_records(p)?;
            n_att += 1;
        }
    }
    println!(
        "ok: {} datasets, {n_emb} embedding files, {n_att} attention files",
        manifest.entries.len()
    );
    Ok(())
}

fn toybench(g: &GlobalArgs, a: &ToybenchArgs) -> Result<Vec<PathBuf>, CliError> {
    let methods = parse_methods(&a.methods).map_err(CliError::Input)?;
    if a.epochs == 0 {
        return Err(CliError::Input("--epochs must be at least 1".into()));
    }
    if !(a.lr > 0.0 && a.lr.is_finite()) {
        return Err(CliError::Input(format!("--lr must be positive, got {}", a.lr)));
    }
    let task = match a.task {
        TaskKind::QuestionShift => SyntheticTask::question_shift(g.seed),
        TaskKind::NoShift => SyntheticTask::no_shift(g.seed),
    };
    let run = toy::run_benchmark(&task, &methods, a.epochs, a.lr)?;
    let names = &run.table.ood_names;
    let mut t = Table::new(
        ["method".to_string(), "id_acc".to_string()]
            .into_iter()
            .chain(names.iter().map(|n| format!("ood_{n}")))
            .chain(["ood_avg".to_string(), "error".to_string()]),
    );
    for row in std::iter::once(&run.table.pretrained).chain(&run.table.rows) {
        t.push(
            [row.method.clone(), fmt_opt(row.id_acc)]
                .into_iter()
                .chain(row.ood_acc.iter().map(|(_, v)| fmt_opt(*v)))
                .chain([fmt_opt(row.ood_avg), row.error.clone().unwrap_or_default()]),
        );
    }
    let mut gamma = Table::new(["method", "layer", "epoch", "gamma", "deviation"]);
    let mut loss = Table::new(["method", "epoch", "loss"]);
    for (cfg, out) in methods.iter().zip(&run.outcomes) {
        let Ok(o) = out else { continue };
        for tr in &o.gamma_history {
            for (e, (gm, dv)) in tr.gamma.iter().zip(&tr.deviation).enumerate() {
                gamma.push([cfg.label(), tr.layer.clone(), (e + 1).to_string(), gm.to_string(), dv.to_string()]);
            }
        }
        for (e, l) in o.loss_history.iter().enumerate() {
            loss.push([cfg.label(), (e + 1).to_string(), l.to_string()]);
        }
    }
    let mut written = report::write_table(&g.out, "toybench", &t)?;
    written.extend(report::write_table(&g.out, "gamma_history", &gamma)?);
    written.extend(report::write_table(&g.out, "loss_history", &loss)?);
    Ok(written)
}
