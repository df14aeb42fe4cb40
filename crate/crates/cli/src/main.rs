use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use scenewatch::cluster::{extract_features, select_k_and_report};
use scenewatch::eval::{fit_levels, group_scores, AggScores};
use scenewatch::iforest::{column, detect, read_rows_csv, write_rows_csv};
use scenewatch::ingest::{build_scenes, parse_csv, Unit};
use scenewatch::io::{read_json, read_jsonl, write_json, write_jsonl};
use scenewatch::pipeline::{
    emit_report, evaluate, run_pipeline, scores_file, write_baselines_csv, PipelineConfig, PredictorKind,
};
use scenewatch::predictor::{load_model, predict_cv, save_model, train_transformer, PredictionResult};
use scenewatch::proxies::{compute_all, read_proxies_csv, write_proxies_csv};
use scenewatch::residual::{read_scores_csv, score_scenes, write_scores_csv, Aggregator};
use scenewatch::scene::{split, SceneTensor};
use scenewatch::seed::derive_seed;
use scenewatch::synth::{generate, GroundTruthLabel};
use scenewatch::Error;

#[derive(Parser, Debug)]
#[command(name = "scenewatch", version, about = "Unsupervised detection of safety-critical traffic scenes")]
struct Cli {
    /// Root seed for every stochastic stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON pipeline configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cut a trajectory CSV into ego-centric scenes.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "feet")]
        unit: Unit,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Where to write filter counts as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate labelled synthetic scenes.
    Synth {
        #[arg(long)]
        n_scenes: Option<usize>,
        #[arg(long)]
        anomaly_fraction: Option<f64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the transformer predictor.
    Train {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Predict the future half of every scene.
    Predict {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, default_value = "cv")]
        predictor: PredictorKind,
        #[arg(long, required_if_eq("predictor", "transformer"))]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn predictions into scene-level residual scores.
    Score {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long, value_delimiter = ',')]
        aggregators: Option<Vec<Aggregator>>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fit an Isolation Forest on one aggregator's scores and flag scenes.
    Iforest {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        contamination: Option<f64>,
        #[arg(long)]
        n_trees: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute surrogate safety measures per scene.
    Proxies {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stability, alignment, selection and baselines.
    Evaluate {
        /// Directory of residual score CSVs, one per aggregator.
        #[arg(long)]
        scores_dir: PathBuf,
        #[arg(long)]
        proxies: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Share one forest across contamination levels.
        #[arg(long)]
        no_refit: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster flagged scenes by prediction-error profile.
    Cluster {
        #[arg(long)]
        preds: PathBuf,
        /// Isolation Forest output with a `flagged` column.
        #[arg(long)]
        flags: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage and write the report.
    Run {
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        scenes: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        predictor: Option<PredictorKind>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        n_scenes: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        aggregators: Option<Vec<Aggregator>>,
        #[arg(long)]
        no_refit: bool,
    },
    /// Write report.json and summary.md for a finished run.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Stage(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(m) => Failure::Usage(m),
            other => Failure::Stage(other),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn load_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => read_json::<PipelineConfig>(p).map_err(|e| Failure::Usage(format!("config {}: {e}", p.display())))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn mkdir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Stage(Error::io(dir, e)))
}

fn parent_dir(path: &Path) -> CliResult {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => mkdir(p),
        _ => Ok(()),
    }
}

fn execute(cli: Cli) -> CliResult {
    let base = load_config(&cli)?;
    let cfg = base.resolved();
    match cli.command {
        Command::Ingest { input, unit, stride, out, report } => {
            let mut build = cfg.build;
            if let Some(s) = stride {
                build.stride = s;
            }
            let (scenes, filters) = build_scenes(&parse_csv(&input, unit)?, &build)?;
            parent_dir(&out)?;
            write_jsonl(&out, &scenes)?;
            if let Some(r) = report {
                write_json(&r, &filters)?;
            }
            println!("{} scenes kept of {} candidates", filters.scenes_kept, filters.candidates());
        }
        Command::Synth { n_scenes, anomaly_fraction, out_dir } => {
            let mut s = cfg.synth;
            s.n_scenes = n_scenes.unwrap_or(s.n_scenes);
            s.anomaly_fraction = anomaly_fraction.unwrap_or(s.anomaly_fraction);
            s.validate()?;
            let (scenes, labels) = generate(&s)?;
            mkdir(&out_dir)?;
            write_jsonl(&out_dir.join("scenes.jsonl"), &scenes)?;
            write_jsonl(&out_dir.join("labels.jsonl"), &labels)?;
            println!("{} scenes, {} anomalies", scenes.len(), labels.iter().filter(|l| l.is_anomaly).count());
        }
        Command::Train { scenes, out, log, epochs } => {
            let scenes: Vec<SceneTensor> = read_jsonl(&scenes)?;
            let mut t = cfg.transformer.clone();
            t.epochs = epochs.unwrap_or(t.epochs);
            t.validate()?;
            let (train, val, _) = split(&scenes, &cfg.split)?;
            let (model, tlog) = train_transformer(&train, &val, &t)?;
            parent_dir(&out)?;
            save_model(&model, &out)?;
            if let Some(l) = log {
                tlog.write_csv(&l)?;
            }
            println!("best epoch {} (val {:.4})", tlog.best_epoch, tlog.best_val);
        }
        Command::Predict { scenes, predictor, model, out } => {
            let scenes: Vec<SceneTensor> = read_jsonl(&scenes)?;
            let preds: Vec<PredictionResult> = match predictor {
                PredictorKind::Cv => scenes.iter().map(predict_cv).collect(),
                PredictorKind::Transformer => {
                    let path = model.ok_or_else(|| Failure::Usage("--model is required for the transformer".into()))?;
                    let m = load_model(&path)?;
                    scenes.iter().map(|s| m.predict(s)).collect()
                }
            };
            parent_dir(&out)?;
            write_jsonl(&out, &preds)?;
        }
        Command::Score { preds, aggregators, out_dir } => {
            let preds: Vec<PredictionResult> = read_jsonl(&preds)?;
            let aggs = aggregators.unwrap_or(cfg.aggregators.clone());
            let rows = score_scenes(&preds, &cfg.weights, &aggs)?;
            mkdir(&out_dir)?;
            for agg in aggs {
                let mine: Vec<_> = rows.iter().filter(|r| r.aggregator == agg).cloned().collect();
                let name = scores_file(agg);
                write_scores_csv(&out_dir.join(name.trim_start_matches("scores/")), &mine)?;
            }
        }
        Command::Iforest { scores, contamination, n_trees, out } => {
            let groups = group_scores(&read_scores_csv(&scores)?);
            let [g]: [AggScores; 1] = groups
                .try_into()
                .map_err(|_| Failure::Usage("score file must hold exactly one aggregator".into()))?;
            let mut forest = cfg.forest.clone();
            forest.contamination = contamination.unwrap_or(cfg.selection.contamination);
            forest.n_trees = n_trees.unwrap_or(forest.n_trees);
            forest.validate()?;
            let pts = column(&g.scores);
            let rows = detect(&g.ids, pts.view(), &forest)?;
            parent_dir(&out)?;
            write_rows_csv(&out, &rows)?;
            println!("{} of {} scenes flagged", rows.iter().filter(|r| r.flagged).count(), rows.len());
        }
        Command::Proxies { scenes, out } => {
            let scenes: Vec<SceneTensor> = read_jsonl(&scenes)?;
            parent_dir(&out)?;
            write_proxies_csv(&out, &compute_all(&scenes, &cfg.proxies))?;
        }
        Command::Evaluate { scores_dir, proxies, labels, no_refit, out } => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(&scores_dir)
                .map_err(|e| Failure::Stage(Error::io(&scores_dir, e)))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            files.sort();
            let mut rows = Vec::new();
            for f in &files {
                rows.extend(read_scores_csv(f)?);
            }
            if rows.is_empty() {
                return Err(Failure::Usage(format!("no score CSVs in {}", scores_dir.display())));
            }
            let groups = group_scores(&rows);
            let fits = fit_levels(&groups, &cfg.contaminations, &cfg.forest, cfg.refit && !no_refit)?;
            let proxies = read_proxies_csv(&proxies)?;
            let labels: Vec<GroundTruthLabel> = match labels {
                Some(l) => read_jsonl(&l)?,
                None => Vec::new(),
            };
            let ev = evaluate(&fits, &groups, &proxies, &labels, &cfg)?;
            parent_dir(&out)?;
            write_json(&out, &ev.report)?;
            write_baselines_csv(&out.with_file_name("baselines.csv"), &ev.chosen.ids, &ev.chosen.flags, &ev.baselines)?;
            let s = &ev.report.selection;
            println!("selected {} at c = {}{}", s.aggregator, s.contamination, if s.qualified { "" } else { " (fallback)" });
        }
        Command::Cluster { preds, flags, out } => {
            let preds: Vec<PredictionResult> = read_jsonl(&preds)?;
            let flagged: std::collections::BTreeSet<String> =
                read_rows_csv(&flags)?.into_iter().filter(|r| r.flagged).map(|r| r.scene_id).collect();
            let feats: Vec<_> = preds.iter().filter(|p| flagged.contains(&p.scene_id)).map(extract_features).collect();
            let report = select_k_and_report(&feats, cfg.k_min..=cfg.k_max, derive_seed(cfg.seed, "cluster"), &cfg.kmeans)?;
            parent_dir(&out)?;
            write_json(&out, &report)?;
            println!("k = {} over {} scenes", report.k, feats.len());
        }
        Command::Run { out_dir, scenes, labels, predictor, model, n_scenes, aggregators, no_refit } => {
            let mut run = base;
            if let Some(d) = out_dir {
                run.out_dir = d;
            }
            run.scenes = scenes.or(run.scenes);
            run.labels = labels.or(run.labels);
            run.model = model.or(run.model);
            run.predictor = predictor.unwrap_or(run.predictor);
            run.synth.n_scenes = n_scenes.unwrap_or(run.synth.n_scenes);
            if let Some(a) = aggregators {
                run.aggregators = a;
            }
            run.refit &= !no_refit;
            run_pipeline(&run)?;
            let report = emit_report(&run.out_dir)?;
            let s = &report.selection;
            println!("run complete in {}; selected {} at c = {}", run.out_dir.display(), s.aggregator, s.contamination);
        }
        Command::Report { run_dir } => {
            emit_report(&run_dir)?;
            println!("wrote {}", run_dir.join("report.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(2)
        }
    }
}
