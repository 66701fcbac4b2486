//! Metrics and the end-to-end experiment runner.
//!
//! `run_experiment` reads a TOML file with `[data]`, `[predictor]`,
//! `[generator]`, `[explainers]`, `[dse]` and `[sweep]` sections, runs (or
//! resumes) every stage and writes `report.json`, `table2.csv`, `table4.csv`,
//! `fig2.svg` + `fig2.csv`, `losses.csv` and `manifest.json` to the run
//! directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use crate::cvgae::{self, random_mask, Cvgae, EpochLosses, GeneratorConfig, RandomGenerator, SurrogateGenerator};
use crate::error::{DseError, Result};
use crate::explainers::{explain_all, ExplainerConfig, ExplainerKind, MaskRecord};
use crate::frontdoor::{evaluate_all, Dse, DseConfig, ImportanceRecord};
use crate::graph::{parse_dataset, serialize_dataset, EdgeMask, Graph};
use crate::nn::Checkpoint;
use crate::predictor::{self, Predictor, PredictorConfig};
use crate::seeds;
use crate::tr3::{self, Tr3Config};

/// `|selected ∩ ground truth| / |selected|`, 0 for an empty selection.
pub fn precision(mask: &EdgeMask, g: &Graph) -> Result<f64> {
    let gt = g.ground_truth().ok_or_else(|| DseError::InvalidGraph {
        id: g.id().to_string(),
        reason: "no ground-truth explanation".into(),
    })?;
    if mask.parent_id != g.id() {
        return Err(DseError::Identity {
            mask: mask.parent_id.clone(),
            graph: g.id().to_string(),
        });
    }
    if mask.selected.is_empty() {
        return Ok(0.0);
    }
    let hits = mask.selected.intersection(gt).count();
    Ok(hits as f64 / mask.selected.len() as f64)
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(DseError::Shape(format!("{} vs {} values", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(DseError::UndefinedCorrelation("fewer than two values".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(DseError::UndefinedCorrelation("a list has zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Relative gap below which two scores count as tied when ranking.
pub const TIE_TOLERANCE: f64 = 1e-9;

fn tied(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= TIE_TOLERANCE * a.abs().max(b.abs()).max(1.0)
}

/// 1-based ranks, ties (equal up to [`TIE_TOLERANCE`]) sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && tied(xs[idx[j + 1]], xs[idx[i]]) {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// A correlation that may be undefined, with the reason when it is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub value: Option<f64>,
    pub reason: Option<String>,
}

impl Correlation {
    pub fn from_result(r: Result<f64>) -> Result<Self> {
        match r {
            Ok(v) => Ok(Self {
                value: Some(v),
                reason: None,
            }),
            Err(DseError::UndefinedCorrelation(reason)) => Ok(Self {
                value: None,
                reason: Some(reason),
            }),
            Err(e) => Err(e),
        }
    }
}

/// Per-explainer precision and importance lists, aligned by graph id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExplainerSeries {
    pub graph_ids: Vec<String>,
    pub precision: Vec<f64>,
    pub imp_re: Vec<f64>,
    pub imp_dse: Vec<f64>,
    pub imp_dse_deletion: Vec<f64>,
}

impl ExplainerSeries {
    pub fn mean(xs: &[f64]) -> f64 {
        xs.iter().sum::<f64>() / xs.len().max(1) as f64
    }
}

/// Groups records by explainer and attaches mask precision.
pub fn collect_series(
    dataset: &[Graph],
    masks: &[MaskRecord],
    records: &[ImportanceRecord],
) -> Result<BTreeMap<ExplainerKind, ExplainerSeries>> {
    let graphs: BTreeMap<&str, &Graph> = dataset.iter().map(|g| (g.id(), g)).collect();
    let masks: BTreeMap<(&str, ExplainerKind), &MaskRecord> =
        masks.iter().map(|m| ((m.graph_id.as_str(), m.explainer), m)).collect();
    let mut sorted: Vec<&ImportanceRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.graph_id, a.explainer).cmp(&(&b.graph_id, b.explainer)));
    let mut out: BTreeMap<ExplainerKind, ExplainerSeries> = BTreeMap::new();
    for r in sorted {
        let key = (r.graph_id.as_str(), r.explainer);
        let mask = masks
            .get(&key)
            .ok_or_else(|| DseError::Config(format!("no mask for {} / {}", r.graph_id, r.explainer)))?;
        let g = graphs
            .get(r.graph_id.as_str())
            .ok_or_else(|| DseError::Config(format!("unknown graph `{}`", r.graph_id)))?;
        let s = out.entry(r.explainer).or_default();
        s.graph_ids.push(r.graph_id.clone());
        s.precision.push(precision(&mask.to_mask(), g)?);
        s.imp_re.push(r.imp_re);
        s.imp_dse.push(r.imp_dse);
        s.imp_dse_deletion.push(r.imp_dse_deletion);
    }
    Ok(out)
}

/// Pearson correlation of precision with removal and with DSE importance.
pub fn rho_comparison(
    dataset: &[Graph],
    masks: &[MaskRecord],
    records: &[ImportanceRecord],
) -> Result<BTreeMap<ExplainerKind, (Correlation, Correlation)>> {
    collect_series(dataset, masks, records)?
        .into_iter()
        .map(|(k, s)| {
            Ok((
                k,
                (
                    Correlation::from_result(pearson(&s.precision, &s.imp_re))?,
                    Correlation::from_result(pearson(&s.precision, &s.imp_dse))?,
                ),
            ))
        })
        .collect()
}

/// Explainer names ordered by descending score; ties by name.
pub fn ranking(scores: &BTreeMap<ExplainerKind, f64>) -> Vec<ExplainerKind> {
    let mut v: Vec<(ExplainerKind, f64)> = scores.iter().map(|(k, s)| (*k, *s)).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().map(|(k, _)| k).collect()
}

/// Mean over graphs with a ground truth of `Imp_dse(G_s+) - Imp_re(G_s+)`.
pub fn val_metric(dse: &Dse<'_>, dataset: &[Graph]) -> Result<f64> {
    let gaps = dataset
        .par_iter()
        .filter_map(|g| EdgeMask::ground_truth(g).map(|m| (g, m)))
        .map(|(g, m)| {
            let (re, ds) = crate::frontdoor::removal_and_dse(dse, g, &m, "val")?;
            Ok(ds - re)
        })
        .collect::<Result<Vec<f64>>>()?;
    if gaps.is_empty() {
        return Err(DseError::EmptyInput("graphs with ground truth"));
    }
    Ok(gaps.iter().sum::<f64>() / gaps.len() as f64)
}

/// Mean over graphs, random masks at `ratio` and classes of
/// `(f_y(G) - mean over surrogates f_y(G*))^2`.
pub fn fid_metric(dse: &Dse<'_>, dataset: &[Graph], num_random_masks: usize, ratio: f64) -> Result<f64> {
    if dataset.is_empty() || num_random_masks == 0 {
        return Err(DseError::EmptyInput("graphs or random masks for FID"));
    }
    let per_graph = dataset
        .par_iter()
        .map(|g| {
            let full = dse.predictor.forward(g)?;
            let mut rng = seeds::rng_for(dse.config.seed, &format!("{}/fid-masks", g.id()), 0);
            let mut total = 0.0;
            for r in 0..num_random_masks {
                let mask = random_mask(g, ratio, &mut rng);
                let set = dse.surrogates(g, &mask, &format!("fid/{r}"))?;
                let probs = dse.surrogate_probs(&set)?;
                let k = full.len();
                let gap: f64 = (0..k)
                    .map(|y| {
                        let avg: f64 = probs.iter().zip(&set.weights).map(|(p, w)| p[y] * w).sum();
                        (full[y] - avg).powi(2)
                    })
                    .sum::<f64>()
                    / k as f64;
                total += gap;
            }
            Ok(total / num_random_masks as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_graph.iter().sum::<f64>() / per_graph.len() as f64)
}

/// Git blob hash: SHA-1 over `"blob <len>\0" + content`.
pub fn git_blob_hash(content: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// Existing dataset file; generated from `tr3` when absent.
    pub path: Option<PathBuf>,
    pub tr3: Tr3Config,
    /// Held-out graphs that get explained and evaluated.
    pub eval_graphs: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            tr3: Tr3Config::default(),
            eval_graphs: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorSection {
    /// Pretrained checkpoint; trained from scratch when absent.
    pub checkpoint: Option<PathBuf>,
    #[serde(flatten)]
    pub config: PredictorConfig,
}

impl Default for PredictorSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            config: PredictorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSection {
    /// One independently seeded CVGAE per entry.
    pub seeds: Vec<u64>,
    /// Also train `gamma = 0` and `lambda = 0` variants on the same seeds.
    pub ablations: bool,
    /// Also train a plain VGAE (`gamma = omega = 0`) on the first seed.
    pub vgae_baseline: bool,
    /// Random subgraphs per graph for FID.
    pub fid_masks: usize,
    /// Graphs used for VAL and FID.
    pub metric_graphs: usize,
    /// Cap on the training graphs the generators see; all when absent.
    pub train_graphs: Option<usize>,
    #[serde(flatten)]
    pub config: GeneratorConfig,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            ablations: true,
            vgae_baseline: true,
            fid_masks: 3,
            metric_graphs: 200,
            train_graphs: None,
            config: GeneratorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainersSection {
    pub kinds: Vec<ExplainerKind>,
    #[serde(flatten)]
    pub config: ExplainerConfig,
}

impl Default for ExplainersSection {
    fn default() -> Self {
        Self {
            kinds: ExplainerKind::ALL.to_vec(),
            config: ExplainerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Run directory; relative paths resolve against the config file.
    pub out_dir: Option<PathBuf>,
    pub data: DataSection,
    pub predictor: PredictorSection,
    pub generator: GeneratorSection,
    pub explainers: ExplainersSection,
    pub dse: DseConfig,
    pub sweep: SweepSection,
}

impl ExperimentConfig {
    /// Parses a config, rejecting keys that no field reads.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| DseError::Config(e.to_string()))?;
        let given: toml::Table = toml::from_str(text).map_err(|e| DseError::Config(e.to_string()))?;
        let known = toml::Table::try_from(&cfg).map_err(|e| DseError::Config(e.to_string()))?;
        let mut unknown = Vec::new();
        unknown_keys(&given, &known, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(DseError::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        Ok(cfg)
    }
}

fn unknown_keys(given: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let path = format!("{prefix}{k}");
        match (v, known.get(k)) {
            (_, None) => out.push(path),
            (toml::Value::Table(g), Some(toml::Value::Table(n))) => unknown_keys(g, n, &format!("{path}."), out),
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainerSummary {
    pub mean_precision: f64,
    pub mean_imp_re: f64,
    pub mean_imp_dse: f64,
    pub mean_imp_dse_deletion: f64,
    pub rho_re: Correlation,
    pub rho_dse: Correlation,
    pub series: ExplainerSeries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMetrics {
    pub variant: String,
    pub seed: u64,
    pub contrastive_weight: f64,
    pub penalty_weight: f64,
    pub val: f64,
    pub fid: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodGap {
    pub graphs: usize,
    pub mean_full_prob: f64,
    pub mean_imp_re_ground_truth: f64,
    pub mean_imp_dse_ground_truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rankings {
    pub precision: Vec<ExplainerKind>,
    pub imp_re: Vec<ExplainerKind>,
    pub imp_dse: Vec<ExplainerKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config: ExperimentConfig,
    pub predictor_train_accuracy: f64,
    pub predictor_test_accuracy: Option<f64>,
    pub evaluation_graphs: usize,
    pub explainers: BTreeMap<ExplainerKind, ExplainerSummary>,
    pub rankings: Rankings,
    pub spearman_re: Correlation,
    pub spearman_dse: Correlation,
    pub ood_gap: OodGap,
    pub generators: Vec<GeneratorMetrics>,
    pub sweep: Vec<GeneratorMetrics>,
    pub notes: BTreeMap<String, String>,
}

fn notes() -> BTreeMap<String, String> {
    [
        ("correlation", "rho is the Pearson coefficient; rank agreement is Spearman with average ranks"),
        ("ranking_aggregation", "explainers are ranked by the mean over evaluation graphs"),
        ("isolated_nodes", "subgraph induction keeps every node and its features"),
        ("crane_motif", "crane is an 8-node, 9-edge two-triangle template"),
        ("node_features", "constant [1] per node; the optional degree column would carry full-graph structure into induced subgraphs"),
        ("target_class", "importance is read for the graph's label"),
        ("dse_generator", "table-2 importances use the CVGAE trained with the first seed"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

/// Everything `run_experiment` produced.
pub struct ExperimentOutput {
    pub report: EvaluationReport,
    pub out_dir: PathBuf,
}

fn write(dir: &Path, name: &str, bytes: &[u8], manifest: &mut BTreeMap<String, String>) -> Result<()> {
    fs::write(dir.join(name), bytes)?;
    manifest.insert(name.to_string(), git_blob_hash(bytes));
    Ok(())
}

fn load_or_generate(cfg: &ExperimentConfig, base: &Path) -> Result<(Vec<Graph>, Vec<u8>)> {
    match &cfg.data.path {
        Some(p) => {
            let path = base.join(p);
            if !path.exists() {
                return Err(DseError::MissingArtifact(path));
            }
            let bytes = fs::read(&path)?;
            Ok((parse_dataset(&bytes)?, bytes))
        }
        None => {
            let graphs = tr3::generate_dataset(&cfg.data.tr3)?;
            let bytes = serialize_dataset(&graphs);
            Ok((graphs, bytes))
        }
    }
}

fn train_variant(
    train: &[Graph],
    base: &GeneratorConfig,
    seed: u64,
    gamma: f64,
    lambda: f64,
    omega: f64,
    label: &str,
) -> Result<(Cvgae, Vec<EpochLosses>)> {
    let cfg = GeneratorConfig {
        seed,
        contrastive_weight: gamma,
        penalty_weight: lambda,
        adversarial_weight: omega,
        ..base.clone()
    };
    log::info!("training generator `{label}` (seed {seed})");
    let mut trained = cvgae::train_generator(train, &cfg)?;
    trained.generator.label = label.to_string();
    Ok((trained.generator, trained.losses))
}

fn generator_metrics(
    predictor: &Predictor,
    generator: &dyn SurrogateGenerator,
    graphs: &[Graph],
    cfg: &ExperimentConfig,
    seed: u64,
    gamma: f64,
    lambda: f64,
) -> Result<GeneratorMetrics> {
    let dse_cfg = DseConfig {
        seed,
        ..cfg.dse.clone()
    };
    let dse = Dse::new(predictor, generator, dse_cfg)?;
    Ok(GeneratorMetrics {
        variant: generator.name().to_string(),
        seed,
        contrastive_weight: gamma,
        penalty_weight: lambda,
        val: val_metric(&dse, graphs)?,
        fid: fid_metric(&dse, graphs, cfg.generator.fid_masks, cfg.explainers.config.mask_ratio)?,
    })
}

/// Runs the configured pipeline and writes every artifact.
pub fn run_experiment(config_path: &Path) -> Result<ExperimentOutput> {
    if !config_path.exists() {
        return Err(DseError::MissingArtifact(config_path.to_path_buf()));
    }
    let text = fs::read_to_string(config_path)?;
    let cfg = ExperimentConfig::from_toml(&text)?;
    let base = config_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let stem = config_path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    let out_dir = base.join(cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from(format!("runs/{stem}"))));
    let report = run_with_config(&cfg, &base, &out_dir, text.as_bytes())?;
    Ok(ExperimentOutput { report, out_dir })
}

/// [`run_experiment`] for an already parsed config.
pub fn run_with_config(cfg: &ExperimentConfig, base: &Path, out_dir: &Path, config_bytes: &[u8]) -> Result<EvaluationReport> {
    fs::create_dir_all(out_dir)?;
    let mut manifest = BTreeMap::new();
    let mut inputs = BTreeMap::new();
    inputs.insert("config".to_string(), git_blob_hash(config_bytes));

    let (dataset, data_bytes) = load_or_generate(cfg, base)?;
    inputs.insert("dataset".to_string(), git_blob_hash(&data_bytes));
    let model = match &cfg.predictor.checkpoint {
        Some(p) => {
            let path = base.join(p);
            inputs.insert("predictor_checkpoint".to_string(), git_blob_hash(&fs::read(&path).map_err(|_| DseError::MissingArtifact(path.clone()))?));
            Predictor::from_checkpoint(&Checkpoint::load(&path)?)?
        }
        None => {
            log::info!("training predictor on {} graphs", dataset.len());
            let m = predictor::train(&dataset, &cfg.predictor.config)?;
            write(out_dir, "predictor.ckpt", &m.to_checkpoint().to_bytes(), &mut manifest)?;
            m
        }
    };

    let test_ids: BTreeSet<&str> = model.metrics.test_ids.iter().map(String::as_str).collect();
    let (mut held_out, train): (Vec<Graph>, Vec<Graph>) = dataset
        .iter()
        .cloned()
        .partition(|g| test_ids.contains(g.id()));
    if held_out.is_empty() {
        held_out = dataset.clone();
    }
    held_out.sort_by(|a, b| a.id().cmp(b.id()));
    let train = if train.is_empty() { dataset.clone() } else { train };
    let gen_train: Vec<Graph> = match cfg.generator.train_graphs {
        Some(n) => train.iter().take(n).cloned().collect(),
        None => train.clone(),
    };
    let eval: Vec<Graph> = held_out.iter().take(cfg.data.eval_graphs).cloned().collect();
    let metric_graphs: Vec<Graph> = held_out.iter().take(cfg.generator.metric_graphs).cloned().collect();

    // Generators.
    let g = &cfg.generator;
    let mut losses_text = String::from("variant,seed,epoch,l_vae,l_c,l_d,total\n");
    let mut trained: Vec<(Cvgae, u64, f64, f64)> = Vec::new();
    let push_losses = |label: &str, seed: u64, losses: &[EpochLosses], text: &mut String| {
        for l in losses {
            writeln!(text, "{label},{seed},{},{},{},{},{}", l.epoch, l.vae, l.contrastive, l.discriminator, l.total).unwrap();
        }
    };
    let gc = &g.config;
    for &seed in &g.seeds {
        let (m, l) = train_variant(&gen_train, gc, seed, gc.contrastive_weight, gc.penalty_weight, gc.adversarial_weight, "cvgae")?;
        push_losses("cvgae", seed, &l, &mut losses_text);
        trained.push((m, seed, gc.contrastive_weight, gc.penalty_weight));
        if g.ablations {
            let (m, l) = train_variant(&gen_train, gc, seed, 0.0, gc.penalty_weight, gc.adversarial_weight, "cvgae_no_contrastive")?;
            push_losses("cvgae_no_contrastive", seed, &l, &mut losses_text);
            trained.push((m, seed, 0.0, gc.penalty_weight));
            let (m, l) = train_variant(&gen_train, gc, seed, gc.contrastive_weight, 0.0, gc.adversarial_weight, "cvgae_no_penalty")?;
            push_losses("cvgae_no_penalty", seed, &l, &mut losses_text);
            trained.push((m, seed, gc.contrastive_weight, 0.0));
        }
    }
    if g.vgae_baseline {
        let seed = g.seeds.first().copied().unwrap_or(gc.seed);
        let (m, l) = train_variant(&gen_train, gc, seed, 0.0, 0.0, 0.0, "vgae")?;
        push_losses("vgae", seed, &l, &mut losses_text);
        trained.push((m, seed, 0.0, 0.0));
    }
    if let Some((first, ..)) = trained.first() {
        write(out_dir, "generator.ckpt", &first.to_checkpoint().to_bytes(), &mut manifest)?;
    }

    let mut generators = Vec::new();
    for (m, seed, gamma, lambda) in &trained {
        generators.push(generator_metrics(&model, m, &metric_graphs, cfg, *seed, *gamma, *lambda)?);
    }
    for &seed in &g.seeds {
        generators.push(generator_metrics(&model, &RandomGenerator, &metric_graphs, cfg, seed, 0.0, 0.0)?);
    }

    // Sensitivity sweep: vary one weight at a time around the defaults.
    let mut sweep = Vec::new();
    let sweep_seed = g.seeds.first().copied().unwrap_or(gc.seed);
    let mut cells: Vec<(f64, f64)> = Vec::new();
    for cell in cfg
        .sweep
        .lambda
        .iter()
        .map(|&l| (gc.contrastive_weight, l))
        .chain(cfg.sweep.gamma.iter().map(|&c| (c, gc.penalty_weight)))
    {
        if !cells.contains(&cell) {
            cells.push(cell);
        }
    }
    for (gamma, lambda) in cells {
        let label = format!("sweep_gamma{gamma}_lambda{lambda}");
        let (m, l) = train_variant(&gen_train, gc, sweep_seed, gamma, lambda, gc.adversarial_weight, &label)?;
        push_losses(&label, sweep_seed, &l, &mut losses_text);
        sweep.push(generator_metrics(&model, &m, &metric_graphs, cfg, sweep_seed, gamma, lambda)?);
    }

    // Explanations and importance.
    let masks = explain_all(&model, &eval, &cfg.explainers.kinds, &cfg.explainers.config)?;
    write(out_dir, "masks.jsonl", crate::explainers::write_masks_jsonl(&masks)?.as_bytes(), &mut manifest)?;
    let dse_gen: &dyn SurrogateGenerator = match trained.first() {
        Some((m, ..)) => m,
        None => &RandomGenerator,
    };
    let dse = Dse::new(&model, dse_gen, cfg.dse.clone())?;
    let records = evaluate_all(&dse, &eval, &masks)?;
    write(out_dir, "records.jsonl", crate::frontdoor::write_records_jsonl(&records)?.as_bytes(), &mut manifest)?;

    let series = collect_series(&eval, &masks, &records)?;
    let mut explainers = BTreeMap::new();
    for (kind, s) in series {
        explainers.insert(
            kind,
            ExplainerSummary {
                mean_precision: ExplainerSeries::mean(&s.precision),
                mean_imp_re: ExplainerSeries::mean(&s.imp_re),
                mean_imp_dse: ExplainerSeries::mean(&s.imp_dse),
                mean_imp_dse_deletion: ExplainerSeries::mean(&s.imp_dse_deletion),
                rho_re: Correlation::from_result(pearson(&s.precision, &s.imp_re))?,
                rho_dse: Correlation::from_result(pearson(&s.precision, &s.imp_dse))?,
                series: s,
            },
        );
    }
    let by = |f: fn(&ExplainerSummary) -> f64| explainers.iter().map(|(k, s)| (*k, f(s))).collect::<BTreeMap<_, _>>();
    let (p, re, ds) = (by(|s| s.mean_precision), by(|s| s.mean_imp_re), by(|s| s.mean_imp_dse));
    let vals = |m: &BTreeMap<ExplainerKind, f64>| m.values().copied().collect::<Vec<_>>();
    let rankings = Rankings {
        precision: ranking(&p),
        imp_re: ranking(&re),
        imp_dse: ranking(&ds),
    };
    let spearman_re = Correlation::from_result(spearman(&vals(&p), &vals(&re)))?;
    let spearman_dse = Correlation::from_result(spearman(&vals(&p), &vals(&ds)))?;

    let gt_eval: Vec<(Graph, EdgeMask)> = eval
        .iter()
        .filter_map(|g| EdgeMask::ground_truth(g).map(|m| (g.clone(), m)))
        .collect();
    let gaps = gt_eval
        .par_iter()
        .map(|(g, m)| {
            let (re, ds) = crate::frontdoor::removal_and_dse(&dse, g, m, "gt")?;
            Ok((model.forward(g)?[g.label()], re, ds))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = gaps.len().max(1) as f64;
    let ood_gap = OodGap {
        graphs: gaps.len(),
        mean_full_prob: gaps.iter().map(|x| x.0).sum::<f64>() / n,
        mean_imp_re_ground_truth: gaps.iter().map(|x| x.1).sum::<f64>() / n,
        mean_imp_dse_ground_truth: gaps.iter().map(|x| x.2).sum::<f64>() / n,
    };

    let report = EvaluationReport {
        config: cfg.clone(),
        predictor_train_accuracy: model.metrics.train_accuracy,
        predictor_test_accuracy: model.metrics.test_accuracy,
        evaluation_graphs: eval.len(),
        explainers,
        rankings,
        spearman_re,
        spearman_dse,
        ood_gap,
        generators,
        sweep,
        notes: notes(),
    };

    write(out_dir, "report.json", serde_json::to_string_pretty(&report)?.as_bytes(), &mut manifest)?;
    write(out_dir, "table2.csv", table2_csv(&report).as_bytes(), &mut manifest)?;
    write(out_dir, "table4.csv", table4_csv(&report).as_bytes(), &mut manifest)?;
    write(out_dir, "fig2.csv", fig2_csv(&report).as_bytes(), &mut manifest)?;
    write(out_dir, "fig2.svg", fig2_svg(&report).as_bytes(), &mut manifest)?;
    write(out_dir, "losses.csv", losses_text.as_bytes(), &mut manifest)?;
    let manifest_json = serde_json::json!({ "inputs": inputs, "outputs": manifest });
    fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest_json)?)?;
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Explainer ranks by precision, removal and DSE importance.
pub fn table2_csv(r: &EvaluationReport) -> String {
    let pos = |list: &[ExplainerKind], k: ExplainerKind| list.iter().position(|x| *x == k).map_or(0, |p| p + 1);
    let mut out = String::from("explainer,mean_precision,mean_imp_re,mean_imp_dse,rank_precision,rank_re,rank_dse\n");
    for (k, s) in &r.explainers {
        writeln!(
            out,
            "{k},{},{},{},{},{},{}",
            s.mean_precision,
            s.mean_imp_re,
            s.mean_imp_dse,
            pos(&r.rankings.precision, *k),
            pos(&r.rankings.imp_re, *k),
            pos(&r.rankings.imp_dse, *k)
        )
        .unwrap();
    }
    writeln!(out, "spearman,,,,,{},{}", opt(r.spearman_re.value), opt(r.spearman_dse.value)).unwrap();
    out
}

/// Generator validity and fidelity per variant and seed.
pub fn table4_csv(r: &EvaluationReport) -> String {
    let mut out = String::from("variant,seed,gamma,lambda,val,fid\n");
    for m in r.generators.iter().chain(&r.sweep) {
        writeln!(out, "{},{},{},{},{},{}", m.variant, m.seed, m.contrastive_weight, m.penalty_weight, m.val, m.fid).unwrap();
    }
    out
}

pub fn fig2_csv(r: &EvaluationReport) -> String {
    let mut out = String::from("explainer,rho_re,rho_dse\n");
    for (k, s) in &r.explainers {
        writeln!(out, "{k},{},{}", opt(s.rho_re.value), opt(s.rho_dse.value)).unwrap();
    }
    out
}

/// Grouped bar chart of `rho_re` and `rho_dse` per explainer.
pub fn fig2_svg(r: &EvaluationReport) -> String {
    let (w, h, pad, zero) = (640.0, 320.0, 40.0, 160.0);
    let n = r.explainers.len().max(1) as f64;
    let slot = (w - 2.0 * pad) / n;
    let bar = slot * 0.35;
    let scale = 120.0;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <line x1=\"{pad}\" y1=\"{zero}\" x2=\"{}\" y2=\"{zero}\" stroke=\"black\"/>\n",
        w - pad
    );
    for (i, (k, e)) in r.explainers.iter().enumerate() {
        let x0 = pad + slot * i as f64 + slot * 0.15;
        for (j, (v, color)) in [(e.rho_re.value, "#999999"), (e.rho_dse.value, "#1f77b4")].into_iter().enumerate() {
            let v = v.unwrap_or(0.0);
            let (y, height) = if v >= 0.0 { (zero - v * scale, v * scale) } else { (zero, -v * scale) };
            writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{y:.2}\" width=\"{bar:.2}\" height=\"{height:.2}\" fill=\"{color}\"/>",
                x0 + j as f64 * bar
            )
            .unwrap();
        }
        writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{k}</text>",
            x0 + bar,
            h - 12.0
        )
        .unwrap();
    }
    s.push_str("<text x=\"40\" y=\"20\" font-size=\"12\">grey: rho_re, blue: rho_dse</text>\n</svg>\n");
    s
}
