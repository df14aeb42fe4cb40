//! End-to-end runs, run manifests and report emission.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{extract_features, select_k_and_report, ClusterReport, KMeansConfig, FEATURE_NAMES};
use crate::error::{Error, Result};
use crate::eval::{
    alignment_rows, baselines, ccdf, contrast, fit_levels, group_scores, select_config, stability_rows,
    summarize_stability, AggScores, AlignmentRow, BaselineConfig, BaselineResult, CcdfPoint, ContrastRow, LevelFit, OverlapReport, Selection,
    SelectionConfig, StabilityRow, StabilitySummary,
};
use crate::iforest::{write_rows_csv, ForestConfig};
use crate::ingest::{build_scenes, parse_csv, BuildConfig, Unit};
use crate::io::{csv_writer, file_digest, fmt_f64, read_json, read_jsonl, write_json, write_jsonl};
use crate::predictor::{
    evaluate_ade_fde, load_model, predict_cv, save_model, train_transformer, PredictionResult, PredictorConfig,
};
use crate::proxies::{compute_all, write_proxies_csv, ProxyConfig, ProxyRow, ALIGNMENT_PROXIES};
use crate::residual::{score_scenes, write_scores_csv, Aggregator, ResidualWeights};
use crate::scene::{split, SceneTensor, SplitSpec};
use crate::seed::derive_seed;
use crate::synth::{generate, AnomalyKind, GroundTruthLabel, SynthConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const SCENES_FILE: &str = "scenes.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const PREDS_FILE: &str = "preds.jsonl";
pub const PROXIES_FILE: &str = "proxies.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const BASELINES_FILE: &str = "baselines.csv";
pub const CLUSTERS_FILE: &str = "clusters.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.md";

/// JSON Schema that every `report.json` satisfies.
pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    #[default]
    Cv,
    Transformer,
}

impl fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PredictorKind::Cv => "cv",
            PredictorKind::Transformer => "transformer",
        })
    }
}

impl FromStr for PredictorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cv" => Ok(PredictorKind::Cv),
            "transformer" => Ok(PredictorKind::Transformer),
            other => Err(Error::InvalidConfig(format!("unknown predictor `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Raw trajectory CSV or scene JSON-lines; synthetic scenes when unset.
    pub scenes: Option<PathBuf>,
    pub unit: Unit,
    pub labels: Option<PathBuf>,
    /// Trained transformer; trained in the run when unset.
    pub model: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub synth: SynthConfig,
    pub build: BuildConfig,
    pub split: SplitSpec,
    pub predictor: PredictorKind,
    pub transformer: PredictorConfig,
    pub weights: ResidualWeights,
    pub aggregators: Vec<Aggregator>,
    pub contaminations: Vec<f64>,
    /// Separate forest per contamination level.
    pub refit: bool,
    pub forest: ForestConfig,
    pub selection: SelectionConfig,
    pub baseline: BaselineConfig,
    pub proxies: ProxyConfig,
    pub kmeans: KMeansConfig,
    pub k_min: usize,
    pub k_max: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            scenes: None,
            unit: Unit::Feet,
            labels: None,
            model: None,
            out_dir: PathBuf::from("run"),
            seed: 7,
            synth: SynthConfig::default(),
            build: BuildConfig::default(),
            split: SplitSpec::default(),
            predictor: PredictorKind::Cv,
            transformer: PredictorConfig::default(),
            weights: ResidualWeights::default(),
            aggregators: Aggregator::DEFAULTS.to_vec(),
            contaminations: crate::eval::DEFAULT_LEVELS.to_vec(),
            refit: true,
            forest: ForestConfig::default(),
            selection: SelectionConfig::default(),
            baseline: BaselineConfig::default(),
            proxies: ProxyConfig::default(),
            kmeans: KMeansConfig::default(),
            k_min: 2,
            k_max: 8,
        }
    }
}

impl PipelineConfig {
    /// Copy of the config with the root seed pushed into every stage.
    pub fn resolved(&self) -> PipelineConfig {
        let mut c = self.clone();
        c.synth.seed = self.seed;
        c.split.seed = self.seed;
        c.transformer.seed = self.seed;
        c.forest.seed = self.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.aggregators.is_empty() {
            return Err(Error::InvalidConfig("at least one aggregator is required".into()));
        }
        let mut seen = Vec::new();
        for a in &self.aggregators {
            if seen.contains(a) {
                return Err(Error::InvalidConfig(format!("aggregator {a} listed twice")));
            }
            seen.push(*a);
        }
        if self.contaminations.len() < 2 {
            return Err(Error::InvalidConfig("at least two contamination levels are required".into()));
        }
        for &c in self.contaminations.iter().chain([&self.selection.contamination, &self.baseline.contamination]) {
            if !(c > 0.0 && c <= 0.5) {
                return Err(Error::InvalidConfig(format!("contamination {c} outside (0, 0.5]")));
            }
        }
        if self.k_min < 2 || self.k_max < self.k_min {
            return Err(Error::InvalidConfig("k range must satisfy 2 <= k_min <= k_max".into()));
        }
        self.synth.validate()?;
        self.split.validate()?;
        self.weights.validate()?;
        self.forest.validate()?;
        if self.predictor == PredictorKind::Transformer {
            self.transformer.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: PipelineConfig,
    pub complete: bool,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    /// Stage digests without timings, for reproducibility checks.
    pub fn digests(&self) -> Vec<(String, BTreeMap<String, String>, BTreeMap<String, String>)> {
        self.stages.iter().map(|s| (s.stage.clone(), s.inputs.clone(), s.outputs.clone())).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindCounts {
    pub total: usize,
    pub flagged: usize,
    pub ttc_flagged: usize,
    pub unique_ours: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub n_scenes: usize,
    pub n_anomalies: usize,
    pub flagged: usize,
    pub true_positives: usize,
    pub recall: f64,
    pub precision: f64,
    /// Precision over the anomaly base rate.
    pub lift: f64,
    pub by_kind: BTreeMap<String, KindCounts>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stability: Vec<StabilityRow>,
    pub stability_summary: Vec<StabilitySummary>,
    pub alignment: Vec<AlignmentRow>,
    pub selection: Selection,
    pub baseline: BaselineConfig,
    pub overlap: OverlapReport,
    pub contrast: Vec<ContrastRow>,
    pub ccdf: Vec<CcdfPoint>,
    pub detection: Option<DetectionSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMetrics {
    pub predictor: PredictorKind,
    pub n_scenes: usize,
    pub ade: f64,
    pub fde: f64,
}

pub fn level_tag(c: f64) -> String {
    format!("{c:.2}")
}

pub fn scores_file(agg: Aggregator) -> String {
    format!("scores/{agg}.csv")
}

pub fn iforest_file(agg: Aggregator, c: f64) -> String {
    format!("iforest/{agg}_c{}.csv", level_tag(c))
}

struct Recorder {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Recorder {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn digests(&self, files: &[String]) -> Result<BTreeMap<String, String>> {
        files.iter().map(|f| Ok((f.clone(), file_digest(&self.path(f))?))).collect()
    }

    /// Run one stage; `body` returns the run-relative files it wrote.
    fn stage<T>(&mut self, name: &str, inputs: &[String], body: impl FnOnce(&Self) -> Result<(T, Vec<String>)>) -> Result<T> {
        let start = Instant::now();
        log::info!("stage {name}");
        let run = || -> Result<(T, BTreeMap<String, String>, BTreeMap<String, String>)> {
            let inputs = self.digests(inputs)?;
            let (value, outputs) = body(self)?;
            Ok((value, inputs, self.digests(&outputs)?))
        };
        let (value, inputs, outputs) = run().map_err(|e| Error::stage(name, e))?;
        self.manifest.stages.push(StageRecord {
            stage: name.to_string(),
            inputs,
            outputs,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        write_json(&self.path(MANIFEST_FILE), &self.manifest).map_err(|e| Error::stage(name, e))?;
        Ok(value)
    }
}

fn load_scenes(cfg: &PipelineConfig, path: &Path) -> Result<Vec<SceneTensor>> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "scenes file not found")));
    }
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let (scenes, report) = build_scenes(&parse_csv(path, cfg.unit)?, &cfg.build)?;
        log::info!("built {} scenes from {} candidates", report.scenes_kept, report.candidates());
        Ok(scenes)
    } else {
        read_jsonl(path)
    }
}

fn predict_all(cfg: &PipelineConfig, rec: &Recorder, scenes: &[SceneTensor]) -> Result<(Vec<PredictionResult>, Vec<String>)> {
    let mut files = Vec::new();
    let preds = match cfg.predictor {
        PredictorKind::Cv => scenes.par_iter().map(predict_cv).collect(),
        PredictorKind::Transformer => {
            let model = match &cfg.model {
                Some(p) => load_model(p)?,
                None => {
                    let (train, val, _) = split(scenes, &cfg.split)?;
                    let (model, log) = train_transformer(&train, &val, &cfg.transformer)?;
                    save_model(&model, &rec.path("model.bin"))?;
                    log.write_csv(&rec.path("train_log.csv"))?;
                    files.extend(["model.bin".to_string(), "train_log.csv".to_string()]);
                    model
                }
            };
            scenes.par_iter().map(|s| model.predict(s)).collect()
        }
    };
    Ok((preds, files))
}

fn detection_summary(ids: &[String], ours: &[bool], ttc: &[bool], labels: &[GroundTruthLabel]) -> Result<DetectionSummary> {
    let by_id: BTreeMap<&str, &GroundTruthLabel> = labels.iter().map(|l| (l.scene_id.as_str(), l)).collect();
    let mut by_kind: BTreeMap<String, KindCounts> = BTreeMap::new();
    let (mut n_anom, mut tp) = (0, 0);
    for (i, id) in ids.iter().enumerate() {
        let l = by_id.get(id.as_str()).ok_or_else(|| Error::SceneSetMismatch(format!("no label for {id}")))?;
        let e = by_kind
            .entry(format!("{:?}", l.kind))
            .or_insert(KindCounts { total: 0, flagged: 0, ttc_flagged: 0, unique_ours: 0 });
        e.total += 1;
        e.flagged += ours[i] as usize;
        e.ttc_flagged += ttc[i] as usize;
        n_anom += l.is_anomaly as usize;
        tp += (l.is_anomaly && ours[i]) as usize;
    }
    let flagged = ours.iter().filter(|f| **f).count();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, flagged);
    let base = ratio(n_anom, ids.len());
    Ok(DetectionSummary {
        n_scenes: ids.len(),
        n_anomalies: n_anom,
        flagged,
        true_positives: tp,
        recall: ratio(tp, n_anom),
        precision,
        lift: if base > 0.0 { precision / base } else { 0.0 },
        by_kind,
    })
}

/// Result of the dual evaluation plus the selected detector's output.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub chosen: LevelFit,
    pub baselines: BaselineResult,
}

/// Stability, alignment, selection, baselines and (with labels) detection
/// metrics over already fitted levels.
pub fn evaluate(
    fits: &[LevelFit],
    groups: &[AggScores],
    proxies: &[ProxyRow],
    labels: &[GroundTruthLabel],
    cfg: &PipelineConfig,
) -> Result<Evaluation> {
    let stability = stability_rows(fits)?;
    let alignment = alignment_rows(fits, proxies, &ALIGNMENT_PROXIES)?;
    let selection = select_config(&stability, &alignment, &cfg.selection)?;
    let chosen = match fits
        .iter()
        .find(|f| f.aggregator == selection.aggregator && (f.contamination - selection.contamination).abs() < 1e-12)
    {
        Some(f) => f.clone(),
        None => {
            let g: Vec<_> = groups.iter().filter(|g| g.aggregator == selection.aggregator).cloned().collect();
            fit_levels(&g, &[selection.contamination], &cfg.forest, true)?.remove(0)
        }
    };
    let forest = ForestConfig { seed: derive_seed(cfg.seed, "baseline/iforest"), ..cfg.forest.clone() };
    let base = baselines(&chosen.ids, &chosen.flags, proxies, &cfg.baseline, &forest)?;
    let detection = if labels.is_empty() {
        None
    } else {
        let mut d = detection_summary(&chosen.ids, &chosen.flags, &base.ttc_flags, labels)?;
        let feat = base.feature_flags();
        let by_id: BTreeMap<&str, AnomalyKind> = labels.iter().map(|l| (l.scene_id.as_str(), l.kind)).collect();
        for (i, id) in chosen.ids.iter().enumerate() {
            if chosen.flags[i] && !base.ttc_flags[i] && !feat[i] {
                if let Some(e) = d.by_kind.get_mut(&format!("{:?}", by_id[id.as_str()])) {
                    e.unique_ours += 1;
                }
            }
        }
        Some(d)
    };
    let report = EvalReport {
        stability_summary: summarize_stability(&stability),
        stability,
        alignment,
        overlap: base.overlap.clone(),
        contrast: contrast(&chosen.ids, &chosen.flags, proxies, cfg.baseline.ttc_cap)?,
        ccdf: ccdf(&chosen.iso_scores),
        baseline: cfg.baseline.clone(),
        selection,
        detection,
    };
    Ok(Evaluation { report, chosen, baselines: base })
}

pub fn write_baselines_csv(path: &Path, ids: &[String], ours: &[bool], b: &BaselineResult) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["scene_id", "ours", "ttc_flag", "feature_iso_score", "feature_flag"])?;
    for (i, id) in ids.iter().enumerate() {
        let r = &b.feature_rows[i];
        w.write_record([id.clone(), ours[i].to_string(), b.ttc_flags[i].to_string(), fmt_f64(r.iso_score), r.flagged.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Everything a finished run produced, kept in memory for callers.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub eval: EvalReport,
    pub clusters: ClusterReport,
    pub labels: Vec<GroundTruthLabel>,
    pub fits: Vec<LevelFit>,
    pub proxies: Vec<ProxyRow>,
    pub preds: Vec<PredictionResult>,
}

/// Execute every stage in order, persisting each stage's outputs under
/// `out_dir` before the next one starts.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunOutput> {
    config.validate()?;
    let cfg = config.resolved();
    let dir = cfg.out_dir.clone();
    for sub in ["", "scores", "iforest"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut rec = Recorder {
        dir: dir.clone(),
        manifest: RunManifest { tool_version: VERSION.to_string(), config: cfg.clone(), complete: false, stages: Vec::new() },
    };

    let (scenes, labels) = rec.stage("ingest", &[], |r| {
        let (scenes, labels) = match &cfg.scenes {
            None => generate(&cfg.synth)?,
            Some(p) => {
                let scenes = load_scenes(&cfg, p)?;
                let labels = match &cfg.labels {
                    Some(l) => read_jsonl(l)?,
                    None => Vec::new(),
                };
                (scenes, labels)
            }
        };
        if scenes.is_empty() {
            return Err(Error::EmptyInput("no scenes"));
        }
        write_jsonl(&r.path(SCENES_FILE), &scenes)?;
        let mut files = vec![SCENES_FILE.to_string()];
        if !labels.is_empty() {
            write_jsonl(&r.path(LABELS_FILE), &labels)?;
            files.push(LABELS_FILE.to_string());
        }
        Ok(((scenes, labels), files))
    })?;

    let preds = rec.stage("predict", &[SCENES_FILE.to_string()], |r| {
        let (preds, mut files) = predict_all(&cfg, r, &scenes)?;
        write_jsonl(&r.path(PREDS_FILE), &preds)?;
        let (ade, fde) = evaluate_ade_fde(&preds)?;
        write_json(&r.path("prediction_metrics.json"), &PredictionMetrics { predictor: cfg.predictor, n_scenes: preds.len(), ade, fde })?;
        files.extend([PREDS_FILE.to_string(), "prediction_metrics.json".to_string()]);
        Ok((preds, files))
    })?;

    let groups = rec.stage("score", &[PREDS_FILE.to_string()], |r| {
        let rows = score_scenes(&preds, &cfg.weights, &cfg.aggregators)?;
        let groups = group_scores(&rows);
        let mut files = Vec::new();
        for &agg in &cfg.aggregators {
            let f = scores_file(agg);
            let mine: Vec<_> = rows.iter().filter(|s| s.aggregator == agg).cloned().collect();
            write_scores_csv(&r.path(&f), &mine)?;
            files.push(f);
        }
        Ok((groups, files))
    })?;

    let score_files: Vec<String> = cfg.aggregators.iter().map(|&a| scores_file(a)).collect();
    let fits = rec.stage("iforest", &score_files, |r| {
        let fits = fit_levels(&groups, &cfg.contaminations, &cfg.forest, cfg.refit)?;
        let mut files = Vec::new();
        for f in &fits {
            let name = iforest_file(f.aggregator, f.contamination);
            write_rows_csv(&r.path(&name), &f.rows())?;
            files.push(name);
        }
        Ok((fits, files))
    })?;
    let fit_files: Vec<String> = fits.iter().map(|f| iforest_file(f.aggregator, f.contamination)).collect();

    let proxies = rec.stage("proxies", &[SCENES_FILE.to_string()], |r| {
        let rows = compute_all(&scenes, &cfg.proxies);
        write_proxies_csv(&r.path(PROXIES_FILE), &rows)?;
        Ok((rows, vec![PROXIES_FILE.to_string()]))
    })?;

    let mut eval_inputs = fit_files.clone();
    eval_inputs.push(PROXIES_FILE.to_string());
    let (eval, ours) = rec.stage("evaluate", &eval_inputs, |r| {
        let ev = evaluate(&fits, &groups, &proxies, &labels, &cfg)?;
        write_json(&r.path(EVAL_FILE), &ev.report)?;
        write_baselines_csv(&r.path(BASELINES_FILE), &ev.chosen.ids, &ev.chosen.flags, &ev.baselines)?;
        Ok(((ev.report, ev.chosen), vec![EVAL_FILE.to_string(), BASELINES_FILE.to_string()]))
    })?;

    let clusters = rec.stage("cluster", &[PREDS_FILE.to_string(), BASELINES_FILE.to_string()], |r| {
        let flagged: Vec<_> = preds
            .iter()
            .zip(&ours.flags)
            .filter(|(_, f)| **f)
            .map(|(p, _)| extract_features(p))
            .collect();
        let report = select_k_and_report(&flagged, cfg.k_min..=cfg.k_max, derive_seed(cfg.seed, "cluster"), &cfg.kmeans)?;
        write_json(&r.path(CLUSTERS_FILE), &report)?;
        Ok((report, vec![CLUSTERS_FILE.to_string()]))
    })?;

    rec.manifest.complete = true;
    write_json(&rec.path(MANIFEST_FILE), &rec.manifest)?;
    Ok(RunOutput { manifest: rec.manifest, eval, clusters, labels, fits, proxies, preds })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tool_version: String,
    pub seed: u64,
    pub predictor: PredictorKind,
    pub prediction: PredictionMetrics,
    pub selection: Selection,
    pub stability: Vec<StabilityRow>,
    pub stability_summary: Vec<StabilitySummary>,
    pub alignment: Vec<AlignmentRow>,
    pub overlap: OverlapReport,
    pub contrast: Vec<ContrastRow>,
    pub clusters: ClusterReport,
    pub ccdf: Vec<CcdfPoint>,
    pub detection: Option<DetectionSummary>,
}

fn require(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::IncompleteRun { dir: dir.to_path_buf(), missing: name.to_string() })
    }
}

/// Collect a finished run into `report.json` and `summary.md`.
pub fn emit_report(run_dir: &Path) -> Result<Report> {
    let manifest: RunManifest = read_json(&require(run_dir, MANIFEST_FILE)?)?;
    if !manifest.complete {
        let done: Vec<&str> = manifest.stages.iter().map(|s| s.stage.as_str()).collect();
        return Err(Error::IncompleteRun { dir: run_dir.to_path_buf(), missing: format!("stages after {}", done.join(", ")) });
    }
    let eval: EvalReport = read_json(&require(run_dir, EVAL_FILE)?)?;
    let clusters: ClusterReport = read_json(&require(run_dir, CLUSTERS_FILE)?)?;
    let prediction: PredictionMetrics = read_json(&require(run_dir, "prediction_metrics.json")?)?;
    let report = Report {
        tool_version: manifest.tool_version.clone(),
        seed: manifest.config.seed,
        predictor: manifest.config.predictor,
        prediction,
        selection: eval.selection,
        stability: eval.stability,
        stability_summary: eval.stability_summary,
        alignment: eval.alignment,
        overlap: eval.overlap,
        contrast: eval.contrast,
        clusters,
        ccdf: eval.ccdf,
        detection: eval.detection,
    };
    write_json(&run_dir.join(REPORT_FILE), &report)?;
    let summary = render_summary(&report);
    std::fs::write(run_dir.join(SUMMARY_FILE), summary).map_err(|e| Error::io(run_dir.join(SUMMARY_FILE), e))?;
    Ok(report)
}

fn proxy_header(name: &str) -> &str {
    match name {
        "harsh_closing_ratio" => "Harsh closing",
        "lateral_excursion" => "Lat. excursion",
        "min_long_gap" => "Min gap",
        "min_ttc" => "Min TTC",
        "rel_speed_std" => "Rel. speed std",
        "min_dist" => "Min dist (m)",
        "max_dv" => "Max Δv (m/s)",
        "max_acc" => "Max acc (m/s²)",
        other => other,
    }
}

pub fn render_summary(r: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Run summary\n");
    let _ = writeln!(
        s,
        "Predictor `{}` (ADE {:.3} m, FDE {:.3} m over {} scenes), seed {}.\n",
        r.predictor, r.prediction.ade, r.prediction.fde, r.prediction.n_scenes, r.seed
    );
    let sel = &r.selection;
    let _ = writeln!(
        s,
        "Selected configuration: `{}` at c = {}{}.\n",
        sel.aggregator,
        sel.contamination,
        if sel.qualified { String::new() } else { format!(" (fallback: no aggregator reached mean τ ≥ {})", sel.tau_min) }
    );

    let _ = writeln!(s, "## Ranking stability\n");
    let _ = writeln!(s, "| Aggregator | Kendall τ | Jaccard@K | Jaccard (flag sets) |");
    let _ = writeln!(s, "|---|---|---|---|");
    for m in &r.stability_summary {
        let _ = writeln!(s, "| {} | {:.3} | {:.3} | {:.3} |", m.aggregator, m.mean_tau, m.mean_jaccard, m.mean_jaccard_flags);
    }

    let _ = writeln!(s, "\n## Proxy alignment (Spearman ρ, mean over contamination levels)\n");
    let _ = write!(s, "| Aggregator |");
    for p in ALIGNMENT_PROXIES {
        let _ = write!(s, " {} |", proxy_header(p));
    }
    let _ = writeln!(s, "\n|---|{}", "---|".repeat(ALIGNMENT_PROXIES.len()));
    for m in &r.stability_summary {
        let _ = write!(s, "| {} |", m.aggregator);
        for p in ALIGNMENT_PROXIES {
            match r.alignment.iter().find(|a| a.aggregator == m.aggregator && a.proxy == p) {
                Some(a) => {
                    let _ = write!(s, " {:.3} |", a.spearman_rho);
                }
                None => s.push_str(" – |"),
            }
        }
        s.push('\n');
    }

    let _ = writeln!(s, "\n## Flagged vs unflagged scenes\n");
    let _ = writeln!(s, "| Metric | Flagged | Unflagged |");
    let _ = writeln!(s, "|---|---|---|");
    for c in &r.contrast {
        let _ = writeln!(
            s,
            "| {} | {:.3} ± {:.3} | {:.3} ± {:.3} |",
            proxy_header(&c.metric),
            c.flagged_mean,
            c.flagged_std,
            c.normal_mean,
            c.normal_std
        );
    }

    let _ = writeln!(s, "\n## Cluster centers (min-max normalized, k = {})\n", r.clusters.k);
    let _ = write!(s, "| Cluster | Size |");
    for f in FEATURE_NAMES {
        let _ = write!(s, " {f} |");
    }
    let _ = writeln!(s, "\n|---|---|{}", "---|".repeat(FEATURE_NAMES.len()));
    for (i, c) in r.clusters.centers_minmax.iter().enumerate() {
        let _ = write!(s, "| {i} | {} |", r.clusters.sizes[i]);
        for v in c {
            let _ = write!(s, " {v:.3} |");
        }
        s.push('\n');
    }
    if r.clusters.low_silhouette {
        let _ = writeln!(s, "\nWarning: best silhouette is low; cluster structure is weak.");
    }

    let o = &r.overlap;
    let _ = writeln!(s, "\n## Baseline overlap\n");
    let _ = writeln!(
        s,
        "Ours {} flagged; TTC threshold {}; feature forest {}. Unique to ours {}, shared with TTC only {}, with feature forest only {}, with both {}.",
        o.ours_total, o.ttc_total, o.if_total, o.unique_ours, o.ours_ttc_only, o.ours_if_only, o.ours_both
    );
    if let Some(d) = &r.detection {
        let _ = writeln!(
            s,
            "\nAgainst labels: recall {:.3}, precision {:.3}, lift {:.2}× ({} of {} anomalies).",
            d.recall, d.precision, d.lift, d.true_positives, d.n_anomalies
        );
    }
    s
}
