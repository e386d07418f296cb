//! Command-line entry point.
//!
//! Exit codes: 0 on success or `--help`, 1 on usage errors, 2 when input data
//! or configuration fail validation.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{assign_playstyles, parse_assignments, KMeansOptions, PlaystyleOptions};
use crate::discretizer::ResolutionPair;
use crate::error::Error;
use crate::ingest::{parse_samples, parse_synergy_table, save_samples, split_dataset};
use crate::model::{ContextKind, Model, PipelineVariant, Variant};
use crate::profiler::{context_heatmaps, export_profile_set, general_heatmaps, player_profiles, DEFAULT_TOP_N};
use crate::synth::{generate, PlantedSpec};
use crate::trainer::{evaluate, run_pipeline, ModelFile, TrainConfig, MODEL_FORMAT};

pub const THREADS_ENV: &str = "COURTGRID_THREADS";

#[derive(Parser, Debug)]
#[command(name = "courtgrid", version, about = "Multiresolution tensor models of shot selection")]
struct Cli {
    /// Worker threads (falls back to COURTGRID_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate labelled samples from a planted low-rank model.
    Synth(SynthArgs),
    /// Cluster players into playstyles from a synergy table.
    Cluster(ClusterArgs),
    /// Train a model through the multiresolution schedule.
    Train(TrainArgs),
    /// Score a trained model on a sample file.
    Evaluate(EvaluateArgs),
    /// Export heatmap profiles of a trained model.
    Heatmap(HeatmapArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory for samples.jsonl and spec.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    players: usize,
    #[arg(long, default_value_t = 3)]
    rank: usize,
    #[arg(long, default_value = "8x10/6x6")]
    resolution: ResolutionPair,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Plant quarter-dependent court patterns with this block correlation.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, default_value_t = -2.0, allow_negative_numbers = true)]
    bias: f64,
    /// Standard deviation of the interaction part of the logit.
    #[arg(long, default_value_t = 2.0)]
    signal: f64,
    /// Label flip probability.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
}

#[derive(Args, Debug)]
struct ClusterArgs {
    /// Synergy play-type table (CSV).
    #[arg(long)]
    synergy: PathBuf,
    /// Output assignment CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    /// Comma-separated cluster names, one per id.
    #[arg(long, value_delimiter = ',')]
    names: Option<Vec<String>>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<PipelineVariant>,
    #[arg(long = "k-rank")]
    k_rank: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Player to playstyle assignment CSV.
    #[arg(long)]
    clusters: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Directory written by `train`, or its model.json.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Override the stored decision threshold.
    #[arg(long)]
    threshold: Option<f64>,
    /// Also write the metrics JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    /// Directory written by `train`, or its model.json.
    #[arg(long)]
    model: PathBuf,
    /// Raw player id; general heatmaps when absent.
    #[arg(long, allow_negative_numbers = true)]
    player: Option<i64>,
    #[arg(long, default_value_t = DEFAULT_TOP_N)]
    top: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Everything `train` needs, as read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub variant: PipelineVariant,
    pub data: Option<PathBuf>,
    pub clusters: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Train, validation and test fractions.
    pub split: (f64, f64, f64),
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: PipelineVariant::Base,
            data: None,
            clusters: None,
            out: None,
            split: (0.8, 0.1, 0.1),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> crate::Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> crate::Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("cannot serialize config: {e}")))
    }

    /// Hash of the path-free configuration and the bytes of every input file.
    pub fn fingerprint(&self) -> crate::Result<String> {
        let mut stripped = self.clone();
        stripped.data = None;
        stripped.clusters = None;
        stripped.out = None;
        let mut h = Sha256::new();
        h.update(stripped.to_toml()?.as_bytes());
        for path in [&self.data, &self.clusters].into_iter().flatten() {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            h.update(Sha256::digest(&bytes));
        }
        Ok(hex::encode(h.finalize()))
    }
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type CliResult = std::result::Result<(), Failure>;

/// Runs the command line `args` (program name first) and returns the exit
/// code.
pub fn dispatch(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let threads = match thread_count(cli.threads) {
        Ok(t) => t,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 1;
        }
    };
    let result = match threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(cli.command)),
            Err(e) => Err(Failure::Usage(format!("cannot start {n} threads: {e}"))),
        },
        None => run(cli.command),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn thread_count(flag: Option<usize>) -> std::result::Result<Option<usize>, String> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) if !v.trim().is_empty() => v
                .trim()
                .parse()
                .map_err(|_| format!("{THREADS_ENV}={v} is not a thread count"))?,
            _ => return Ok(None),
        },
    };
    if n == 0 {
        return Err("thread count must be at least 1".into());
    }
    Ok(Some(n))
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Synth(a) => synth(a),
        Command::Cluster(a) => cluster(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Heatmap(a) => heatmap(a),
    }
}

fn create_dir(dir: &Path) -> crate::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> crate::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn synth(a: SynthArgs) -> CliResult {
    let mut spec = match a.rho {
        Some(rho) => PlantedSpec::quarter_varying(a.players, a.rank, a.resolution, rho, a.bias, a.signal, a.seed)?,
        None => PlantedSpec::base(a.players, a.rank, a.resolution, a.bias, a.signal, a.seed)?,
    };
    spec.label_noise = a.noise;
    let samples = generate(&spec, a.samples, a.seed.wrapping_add(1))?;
    create_dir(&a.out)?;
    save_samples(a.out.join("samples.jsonl"), &samples, &spec.player_map())?;
    spec.save(a.out.join("spec.json"))?;
    let positives = samples.iter().filter(|s| s.label == 1).count();
    eprintln!(
        "wrote {} samples ({positives} positive) to {}",
        samples.len(),
        a.out.display()
    );
    Ok(())
}

fn cluster(a: ClusterArgs) -> CliResult {
    let rows = parse_synergy_table(&a.synergy)?;
    let opts = PlaystyleOptions {
        kmeans: KMeansOptions {
            k: a.k,
            seed: a.seed,
            restarts: a.restarts,
            ..KMeansOptions::default()
        },
        names: a.names,
        ..PlaystyleOptions::default()
    };
    let model = assign_playstyles(&rows, &opts)?;
    model.save_assignments(&a.out)?;
    let ratio: f64 = model.pca.explained_variance_ratio().iter().sum();
    eprintln!(
        "{} players in {} clusters; explained variance {ratio:.3}; inertia {:.4}; silhouette {}",
        rows.len(),
        model.k(),
        model.inertia,
        model.silhouette.map_or("n/a".into(), |s| format!("{s:.4}"))
    );
    Ok(())
}

fn resolve_run_config(a: &TrainArgs) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(k) = a.k_rank {
        cfg.train.rank = k;
    }
    if let Some(l) = a.lambda {
        cfg.train.lambda = Some(l);
    }
    if let Some(e) = a.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if a.data.is_some() {
        cfg.data = a.data.clone();
    }
    if a.clusters.is_some() {
        cfg.clusters = a.clusters.clone();
    }
    if a.out.is_some() {
        cfg.out = a.out.clone();
    }
    if cfg.data.is_none() {
        return Err(Failure::Usage("train needs --data or `data` in the config".into()));
    }
    if cfg.out.is_none() {
        return Err(Failure::Usage("train needs --out or `out` in the config".into()));
    }
    if cfg.variant.context_kind() == Some(ContextKind::Playstyle) && cfg.clusters.is_none() {
        return Err(Failure::Usage(format!(
            "variant {} needs --clusters or `clusters` in the config",
            cfg.variant
        )));
    }
    cfg.train.validate()?;
    cfg.train.lambda_for(cfg.variant)?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> CliResult {
    let cfg = resolve_run_config(&a)?;
    let (data, out) = (cfg.data.clone().unwrap(), cfg.out.clone().unwrap());
    let fingerprint = cfg.fingerprint()?;
    let (samples, players) = parse_samples(&data)?;
    let playstyles = match (&cfg.clusters, cfg.variant.context_kind()) {
        (Some(p), Some(ContextKind::Playstyle)) => Some(parse_assignments(p)?),
        _ => None,
    };
    let split = split_dataset(&samples, cfg.split, cfg.train.seed)?;
    eprintln!(
        "training {} on {} samples ({} players), fingerprint {fingerprint}",
        cfg.variant,
        samples.len(),
        players.len()
    );
    let outcome = run_pipeline(&split, &players, playstyles.as_ref(), &cfg.train, cfg.variant)?;
    let report = &outcome.report;
    for s in &report.stages {
        eprintln!(
            "{} {}: {} epochs, best epoch {}",
            s.kind.as_str(),
            s.stage,
            s.epochs.len(),
            s.best_epoch
        );
    }
    eprintln!(
        "test f1 {:.4} precision {:.4} recall {:.4} at threshold {}",
        report.test.f1, report.test.precision, report.test.recall, report.threshold
    );

    create_dir(&out)?;
    let file = ModelFile {
        format: MODEL_FORMAT.into(),
        variant: cfg.variant,
        model: outcome.model,
        encoder: outcome.encoder,
        players,
        playstyles,
        threshold: report.threshold,
        fingerprint: fingerprint.clone(),
    };
    file.save(out.join("model.json"))?;
    write_json(&out.join("report.json"), report)?;
    write_json(&out.join("timings.json"), &report.timings)?;
    let metrics = out.join("metrics.csv");
    let f = File::create(&metrics).map_err(|e| Error::io(&metrics, e))?;
    report.write_metrics_csv(BufWriter::new(f))?;
    let config_path = out.join("config.toml");
    std::fs::write(&config_path, cfg.to_toml()?).map_err(|e| Error::io(&config_path, e))?;
    let fp_path = out.join("fingerprint.txt");
    std::fs::write(&fp_path, fingerprint + "\n").map_err(|e| Error::io(&fp_path, e))?;
    Ok(())
}

fn load_model(path: &Path) -> crate::Result<ModelFile> {
    if path.is_dir() {
        ModelFile::load(path.join("model.json"))
    } else {
        ModelFile::load(path)
    }
}

fn evaluate_cmd(a: EvaluateArgs) -> CliResult {
    let file = load_model(&a.model)?;
    let (samples, players) = parse_samples(&a.data)?;
    let encs = file.encode(&samples, &players)?;
    let threshold = a.threshold.unwrap_or(file.threshold);
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Failure::Usage(format!("threshold {threshold} outside (0, 1)")));
    }
    let metrics = evaluate(&Model::LowRank(file.model), &encs, threshold)?;
    let text = serde_json::to_string_pretty(&metrics).map_err(Error::from)?;
    println!("{text}");
    if let Some(out) = &a.out {
        write_json(out, &metrics)?;
    }
    Ok(())
}

fn context_label(variant: PipelineVariant, t: u32) -> String {
    match variant.context_kind() {
        Some(ContextKind::Quarter) => format!("q{}", t + 1),
        Some(ContextKind::Playstyle) => format!("c{t}"),
        None => "all".into(),
    }
}

fn heatmap(a: HeatmapArgs) -> CliResult {
    let file = load_model(&a.model)?;
    if a.top == 0 {
        return Err(Failure::Usage("--top must be at least 1".into()));
    }
    create_dir(&a.out)?;
    let model = &file.model;
    let variant = file.variant.as_str();
    let mut written = Vec::new();
    match a.player {
        None => {
            let set = general_heatmaps(model)?.truncate(a.top);
            written.extend(export_profile_set(&set, &a.out, variant, None, None)?);
        }
        Some(raw) => {
            let dense = file
                .players
                .dense(raw)
                .ok_or_else(|| Error::invalid(format!("player {raw} is not in the model")))?;
            let name = raw.to_string();
            match model.layout.variant {
                Variant::Base => {
                    let set = player_profiles(model, dense, None, a.top)?;
                    written.extend(export_profile_set(&set, &a.out, variant, Some(&name), None)?);
                }
                Variant::St => {
                    for t in 0..model.layout.contexts as u32 {
                        let set = player_profiles(model, dense, Some(t), a.top)?;
                        let ctx = context_label(file.variant, t);
                        written.extend(export_profile_set(&set, &a.out, variant, Some(&name), Some(&ctx))?);
                    }
                }
                Variant::Dynamic => {
                    for (f, set) in context_heatmaps(model, dense, a.top)? {
                        let ctx = context_label(file.variant, f);
                        written.extend(export_profile_set(&set, &a.out, variant, Some(&name), Some(&ctx))?);
                    }
                }
            }
        }
    }
    eprintln!("wrote {} files to {}", written.len(), a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        std::iter::once("courtgrid").chain(s.split_whitespace()).map(String::from).collect()
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(dispatch(&argv("--help")), 0);
        assert_eq!(dispatch(&argv("train --help")), 0);
    }

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        assert_eq!(dispatch(&argv("frobnicate")), 1);
        assert_eq!(dispatch(&argv("")), 1);
        assert_eq!(dispatch(&argv("train --variant nope --data x --out y")), 1);
    }

    #[test]
    fn missing_inputs_are_usage_errors() {
        assert_eq!(dispatch(&argv("train --variant base")), 1);
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().display();
        assert_eq!(dispatch(&argv(&format!("train --variant st_playstyle --data {d}/x --out {d}/o"))), 1);
    }

    #[test]
    fn missing_data_file_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().display();
        assert_eq!(dispatch(&argv(&format!("train --data {d}/missing.jsonl --out {d}/o"))), 2);
    }

    #[test]
    fn lambda_on_base_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().display();
        assert_eq!(dispatch(&argv(&format!("train --data {d}/x --out {d}/o --lambda 0.1"))), 2);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "variant = \"base\"\nbogus = 1\n").unwrap();
        let err = RunConfig::load(&p).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
        std::fs::write(&p, "[train]\nlearning_rte = 1.0\n").unwrap();
        assert!(RunConfig::load(&p).is_err());
    }

    #[test]
    fn run_config_round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.variant = PipelineVariant::DynamicQuarter;
        cfg.data = Some("d.jsonl".into());
        cfg.train.lambda = Some(0.5);
        cfg.train.threshold = crate::trainer::ThresholdPolicy::Fixed(0.3);
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn flags_override_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "variant = \"st_quarter\"\ndata = \"a.jsonl\"\nout = \"o\"\n[train]\nrank = 4\nseed = 3\n").unwrap();
        let cli = Cli::try_parse_from(argv(&format!("train --config {} --k-rank 6 --data b.jsonl", p.display()))).unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        let Ok(cfg) = resolve_run_config(&a) else { panic!() };
        assert_eq!(cfg.variant, PipelineVariant::StQuarter);
        assert_eq!(cfg.train.rank, 6);
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.data, Some(PathBuf::from("b.jsonl")));
    }

    #[test]
    fn fingerprint_ignores_paths_but_not_settings() {
        let dir = tempfile::tempdir().unwrap();
        let (x, y) = (dir.path().join("x"), dir.path().join("y"));
        std::fs::write(&x, "same").unwrap();
        std::fs::write(&y, "same").unwrap();
        let mut a = RunConfig::default();
        a.data = Some(x);
        let mut b = a.clone();
        b.data = Some(y.clone());
        b.out = Some("elsewhere".into());
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        b.train.seed = 1;
        assert_ne!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        std::fs::write(&y, "different").unwrap();
        b.train.seed = 0;
        assert_ne!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
    }

    #[test]
    fn thread_flag_must_be_positive() {
        assert_eq!(thread_count(Some(3)), Ok(Some(3)));
        assert!(thread_count(Some(0)).is_err());
    }
}
