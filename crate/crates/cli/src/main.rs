use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fortress::data::{
    parse_csv, partition_entities, ParseOptions, Partition, PartitionAssignment, SnapshotDataset,
};
use fortress::flipflop::{flip_flop_from_scores, percentile_threshold, FlipFlopComparison};
use fortress::model::{train_with_history, BoostedModel, FeatureMask, TrainSet};
use fortress::pipeline::{
    evaluate, experiment_models, fortress_on_splits, summarize_experiment, FortressConfig,
    PruneMode,
};
use fortress::report::Artifact;
use fortress::stability::{analyze, group_scores};
use fortress::synth::{generate, write_csv, SynthConfig};
use fortress::{Error, Result};
use serde::{Deserialize, Serialize};

const SEED_ENV: &str = "FORTRESS_SEED";
const DEFAULT_SEED: u64 = 42;

#[derive(Parser, Debug)]
#[command(name = "fortress", version, about = "Stability-aware feature pruning for snapshot data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON run config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every section. Falls back to the config, then $FORTRESS_SEED, then 42.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (for `report`, the markdown file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[arg(long, global = true)]
    partition: Option<PathBuf>,
    /// JSON array of active feature names.
    #[arg(long, global = true)]
    mask: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Percentile for the high-CV entity threshold.
    #[arg(long, global = true)]
    percentile: Option<f64>,
    #[arg(long = "bootstrap-b", global = true)]
    bootstrap_b: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic snapshot dataset.
    Gen,
    /// Assign entities to train/val/test.
    Split,
    /// Train a model on the TRAIN partition.
    Train,
    /// Per-entity score CV and per-feature CV ranking.
    Stability {
        #[arg(long, value_enum, default_value_t = Subset::Val)]
        subset: Subset,
    },
    /// Run the greedy pruning procedure.
    Prune,
    /// PR-AUC and mean entity CV with bootstrap CIs.
    Eval {
        #[arg(long, value_enum, default_value_t = Subset::Test)]
        subset: Subset,
    },
    /// Compare flip-flop rates of two models.
    Flipflop {
        #[arg(long)]
        base_model: Option<PathBuf>,
        /// Set tau at this percentile of the base model's scores instead.
        #[arg(long, conflicts_with = "tau")]
        threshold_percentile: Option<f64>,
        #[arg(long, value_enum, default_value_t = Subset::Test)]
        subset: Subset,
    },
    /// Four-row model comparison on the TEST partition.
    Experiment,
    /// Render a JSON artifact as markdown.
    Report { artifact: PathBuf },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Subset {
    Train,
    Val,
    Test,
    All,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Strict,
    #[value(alias = "non-inferior", alias = "non_inferior")]
    Noninferior,
}

impl From<ModeArg> for PruneMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Strict => PruneMode::Strict,
            ModeArg::Noninferior => PruneMode::NonInferior,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Paths {
    data: Option<PathBuf>,
    model: Option<PathBuf>,
    base_model: Option<PathBuf>,
    partition: Option<PathBuf>,
    mask: Option<PathBuf>,
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    seed: Option<u64>,
    synth: SynthConfig,
    pipeline: FortressConfig,
    flipflop_threshold_percentile: Option<f64>,
    paths: Paths,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

impl RunConfig {
    fn resolve(common: &Common, env_seed: Option<&str>) -> Result<Self> {
        let mut cfg: RunConfig = match &common.config {
            Some(path) => serde_json::from_str(&read_text(path)?)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?,
            None => RunConfig::default(),
        };
        let env_seed = match env_seed {
            Some(raw) => Some(
                raw.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?,
            ),
            None => None,
        };
        let seed = common.seed.or(cfg.seed).or(env_seed).unwrap_or(DEFAULT_SEED);
        cfg.seed = Some(seed);
        cfg.synth.seed = seed;
        cfg.pipeline.seed = seed;
        cfg.pipeline.train.seed = seed;

        if let Some(m) = common.mode {
            cfg.pipeline.mode = m.into();
        }
        if let Some(t) = common.tau {
            cfg.pipeline.flipflop_tau = t;
        }
        if let Some(p) = common.percentile {
            cfg.pipeline.percentile = p;
        }
        if let Some(b) = common.bootstrap_b {
            cfg.pipeline.bootstrap_resamples = b;
        }
        let p = &mut cfg.paths;
        for (flag, slot) in [
            (&common.data, &mut p.data),
            (&common.model, &mut p.model),
            (&common.partition, &mut p.partition),
            (&common.mask, &mut p.mask),
            (&common.out, &mut p.out),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        cfg.synth.validate()?;
        cfg.pipeline.validate()?;
        Ok(cfg)
    }

    fn require<'a>(slot: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        slot.as_deref()
            .ok_or_else(|| Error::InvalidConfig(format!("--{flag} is required for this command")))
    }

    fn data(&self) -> Result<SnapshotDataset> {
        parse_csv(Self::require(&self.paths.data, "data")?, &ParseOptions::default())
    }

    fn out_dir(&self) -> Result<&Path> {
        let dir = Self::require(&self.paths.out, "out")?;
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(dir)
    }

    fn partition(&self, dataset: &SnapshotDataset) -> Result<PartitionAssignment> {
        match &self.paths.partition {
            Some(path) => {
                let assignment: PartitionAssignment = serde_json::from_str(&read_text(path)?)
                    .map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))?;
                if let Some(e) = dataset.entity_ids().find(|e| assignment.get(e).is_none()) {
                    return Err(Error::UnknownEntity(format!("{e} (not in {})", path.display())));
                }
                Ok(assignment)
            }
            None => partition_entities(dataset, self.pipeline.fractions, &self.pipeline.salt),
        }
    }

    fn subset(&self, dataset: &SnapshotDataset, subset: Subset) -> Result<SnapshotDataset> {
        let part = match subset {
            Subset::All => return Ok(dataset.clone()),
            Subset::Train => Partition::Train,
            Subset::Val => Partition::Val,
            Subset::Test => Partition::Test,
        };
        Ok(self.partition(dataset)?.select(dataset, part))
    }

    fn mask(&self, schema: &[String]) -> Result<FeatureMask> {
        match &self.paths.mask {
            Some(path) => {
                let names: Vec<String> = serde_json::from_str(&read_text(path)?)
                    .map_err(|e| Error::InvalidConfig(format!("{}: expected a JSON array of names: {e}", path.display())))?;
                FeatureMask::from_names(schema, &names)
            }
            None => Ok(FeatureMask::all(schema.len())),
        }
    }

    fn load_model(&self) -> Result<BoostedModel> {
        BoostedModel::load(Self::require(&self.paths.model, "model")?)
    }

    /// Persist the resolved config next to the command's outputs.
    fn persist(&self, dir: &Path, command: &str) -> Result<()> {
        write_text(&dir.join(format!("{command}.config.json")), &to_json(self))
    }
}

#[derive(Serialize)]
struct TrainMetrics<'a> {
    rows: usize,
    entities: usize,
    active_features: Vec<&'a str>,
    log_loss: &'a [f64],
}

fn write_artifact(dir: &Path, name: &str, artifact: &Artifact) -> Result<PathBuf> {
    let path = dir.join(name);
    artifact.save(&path)?;
    Ok(path)
}

fn run(cli: Cli) -> Result<()> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let mut cfg = RunConfig::resolve(&cli.common, env_seed.as_deref())?;
    match cli.command {
        Command::Gen => {
            let dir = cfg.out_dir()?;
            let (dataset, truth) = generate(&cfg.synth)?;
            let csv = dir.join("data.csv");
            write_csv(&dataset, &csv)?;
            write_text(&dir.join("truth.json"), &to_json(&truth))?;
            cfg.persist(dir, "gen")?;
            let s = dataset.summary();
            println!("{} rows, {} entities, {} snapshots -> {}", s.rows, s.entities, s.snapshots, csv.display());
        }
        Command::Split => {
            let dataset = cfg.data()?;
            let dir = cfg.out_dir()?;
            let assignment = partition_entities(&dataset, cfg.pipeline.fractions, &cfg.pipeline.salt)?;
            write_text(&dir.join("partition.json"), &to_json(&assignment))?;
            cfg.persist(dir, "split")?;
            for (part, n) in assignment.counts() {
                println!("{part}: {n} entities");
            }
        }
        Command::Train => {
            let dataset = cfg.data()?;
            let dir = cfg.out_dir()?;
            let train_set = cfg.subset(&dataset, Subset::Train)?;
            let mask = cfg.mask(dataset.schema())?;
            let outcome = train_with_history(&TrainSet::from_dataset(&train_set), &mask, &cfg.pipeline.train)?;
            outcome.model.save(dir.join("model.json"))?;
            let metrics = TrainMetrics {
                rows: train_set.len(),
                entities: train_set.n_entities(),
                active_features: outcome.model.active_features(),
                log_loss: &outcome.log_loss,
            };
            write_text(&dir.join("train_metrics.json"), &to_json(&metrics))?;
            cfg.persist(dir, "train")?;
            println!(
                "trained {} trees on {} rows, final log-loss {:.6}",
                outcome.model.trees.len(),
                train_set.len(),
                outcome.log_loss.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Stability { subset } => {
            let dataset = cfg.data()?;
            let model = cfg.load_model()?;
            let dir = cfg.out_dir()?;
            let report = analyze(&model, &cfg.subset(&dataset, subset)?, cfg.pipeline.percentile)?;
            let artifact = Artifact::Stability(report);
            write_artifact(dir, "stability.json", &artifact)?;
            cfg.persist(dir, "stability")?;
            print!("{}", artifact.to_markdown());
        }
        Command::Prune => {
            let dataset = cfg.data()?;
            let dir = cfg.out_dir()?;
            let assignment = cfg.partition(&dataset)?;
            let train = assignment.select(&dataset, Partition::Train);
            let val = assignment.select(&dataset, Partition::Val);
            let outcome = fortress_on_splits(&train, &val, &cfg.pipeline, None)?;
            outcome.model.save(dir.join("model.json"))?;
            write_text(&dir.join("mask.json"), &to_json(&outcome.model.active_features()))?;
            write_artifact(dir, "stability.json", &Artifact::Stability(outcome.stability))?;
            let trace = Artifact::Trace(outcome.trace);
            write_artifact(dir, "trace.json", &trace)?;
            cfg.persist(dir, "prune")?;
            print!("{}", trace.to_markdown());
        }
        Command::Eval { subset } => {
            let dataset = cfg.data()?;
            let model = cfg.load_model()?;
            let dir = cfg.out_dir()?;
            let report = evaluate(&model, &cfg.subset(&dataset, subset)?, &cfg.pipeline.bootstrap())?;
            let artifact = Artifact::Eval(report);
            write_artifact(dir, "eval.json", &artifact)?;
            cfg.persist(dir, "eval")?;
            print!("{}", artifact.to_markdown());
        }
        Command::Flipflop {
            base_model,
            threshold_percentile,
            subset,
        } => {
            if base_model.is_some() {
                cfg.paths.base_model = base_model;
            }
            if threshold_percentile.is_some() {
                cfg.flipflop_threshold_percentile = threshold_percentile;
            }
            let dataset = cfg.data()?;
            let base = BoostedModel::load(RunConfig::require(&cfg.paths.base_model, "base-model")?)?;
            let model = cfg.load_model()?;
            let dir = cfg.out_dir()?;
            let eval_set = cfg.subset(&dataset, subset)?;
            let base_scores = group_scores(&eval_set, &base.predict_dataset(&eval_set)?);
            let scores = group_scores(&eval_set, &model.predict_dataset(&eval_set)?);
            let tau = match cfg.flipflop_threshold_percentile {
                Some(p) => percentile_threshold(&base_scores, p)?,
                None => cfg.pipeline.flipflop_tau,
            };
            let comparison = FlipFlopComparison::new(
                flip_flop_from_scores(&eval_set, &base_scores, tau)?,
                flip_flop_from_scores(&eval_set, &scores, tau)?,
            )?;
            let artifact = Artifact::FlipFlopComparison(comparison);
            write_artifact(dir, "flipflop.json", &artifact)?;
            cfg.persist(dir, "flipflop")?;
            print!("{}", artifact.to_markdown());
        }
        Command::Experiment => {
            let dataset = cfg.data()?;
            let dir = cfg.out_dir()?;
            let models = experiment_models(&dataset, &cfg.pipeline)?;
            let result = summarize_experiment(&models, &cfg.pipeline)?;
            models.fortress.model.save(dir.join("fortress_model.json"))?;
            write_artifact(dir, "trace.json", &Artifact::Trace(models.fortress.trace))?;
            let artifact = Artifact::Experiment(result);
            write_artifact(dir, "experiment.json", &artifact)?;
            let md = artifact.to_markdown();
            write_text(&dir.join("experiment.md"), &md)?;
            cfg.persist(dir, "experiment")?;
            print!("{md}");
        }
        Command::Report { artifact } => {
            let md = Artifact::load(&artifact)?.to_markdown();
            match &cfg.paths.out {
                Some(path) => write_text(path, &md)?,
                None => print!("{md}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
