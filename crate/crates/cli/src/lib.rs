//! Command-line front end: synthesis, labeling, training, encoding,
//! evaluation and reconstruction, each run leaving a manifest beside its
//! outputs.

pub mod manifest;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use maneuverlab::config::ConfigError;
use maneuverlab::dlg::{train_dlg, DlgError, DLG_LOG_HEADER, RECON_HEADER};
use maneuverlab::eval::{
    evaluate_all, EvalConfig, EvalError, ProbeConfig, Report, RepresentationSet,
};
use maneuverlab::ndtensor::{Checkpoint, TensorError};
use maneuverlab::signals::{
    label_states, load_csv, make_windows, preset, save_csv, synthesize, SignalsError,
    StationarityConvention, FEATURE_NAMES, LABEL_WINDOW, PRESETS,
};
use maneuverlab::stationarity::adf_test;
use maneuverlab::tnc::{train_tnc, TncError, TncOptions, TNC_LOG_HEADER};
use maneuverlab::{DlgRun, MultivariateSeries, TncRun, TrainConfig};

use manifest::{manifest_for_file, Recorder};

/// Environment variable read as the lowest-priority seed.
pub const SEED_ENV: &str = "MANEUVERLAB_SEED";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("digest mismatch for {path}: {manifest} records {expected}, file has {actual}; rerun with --force to accept")]
    Digest {
        path: String,
        manifest: String,
        expected: String,
        actual: String,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Signals(#[from] SignalsError),
    #[error(transparent)]
    Tnc(#[from] TncError),
    #[error(transparent)]
    Dlg(#[from] DlgError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Convention {
    /// Stationary when the ADF test rejects the unit root (p ≤ threshold).
    RejectsUnitRoot,
    /// Stationary when p > threshold.
    PValueAbove,
}

impl From<Convention> for StationarityConvention {
    fn from(c: Convention) -> Self {
        match c {
            Convention::RejectsUnitRoot => Self::RejectsUnitRoot,
            Convention::PValueAbove => Self::PValueAbove,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "maneuverlab",
    version,
    about = "Representation learning for vehicle acceleration series"
)]
pub struct Cli {
    /// Plain-text `key=value` config file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run seed; overrides the config and the environment.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Proceed even when an input digest differs from its manifest.
    #[arg(long, global = true)]
    pub force: bool,
    #[arg(long, global = true, value_enum, default_value_t = Convention::RejectsUnitRoot)]
    pub stationarity_convention: Convention,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic series from a preset.
    Synth {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
        preset: String,
        /// Fraction of values removed at random.
        #[arg(long, default_value_t = 0.0)]
        missing_rate: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label every step with a stationarity state.
    Label {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = LABEL_WINDOW)]
        window: usize,
    },
    /// ADF test per non-overlapping window and feature.
    Adf {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        window: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_lags: Option<usize>,
    },
    /// Train the contrastive encoder.
    TrainTnc {
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Train the local/global generative model.
    TrainDlg {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write per-window representations from a checkpoint.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score representations and write the report.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tnc: Option<PathBuf>,
        #[arg(long)]
        dlg: Option<PathBuf>,
        /// Representation CSVs written by `encode`.
        #[arg(long, num_args = 1..)]
        reps: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a DLG reconstruction with its residual band.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a saved report as a table.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Synth { .. } => "synth",
            Self::Label { .. } => "label",
            Self::Adf { .. } => "adf",
            Self::TrainTnc { .. } => "train-tnc",
            Self::TrainDlg { .. } => "train-dlg",
            Self::Encode { .. } => "encode",
            Self::Evaluate { .. } => "evaluate",
            Self::Reconstruct { .. } => "reconstruct",
            Self::Report { .. } => "report",
        }
    }
}

/// Resolves the config: defaults, then the seed environment variable, the
/// config file, `--set` overrides and `--seed`, then validation.
pub fn resolve_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v.trim().parse().map_err(|_| {
            CliError::Argument(format!("{SEED_ENV}={v} is not an unsigned integer"))
        })?;
    }
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        cfg.apply_text(&text)?;
    }
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Argument(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

struct Ctx {
    cfg: TrainConfig,
    config_text: String,
    force: bool,
    convention: StationarityConvention,
}

impl Ctx {
    fn recorder(&self, manifest: PathBuf, cli: &Cli) -> Result<Recorder> {
        let mut rec = Recorder::new(manifest, self.force)?;
        if let Some(path) = &cli.config {
            rec.input("config", path)?;
        }
        Ok(rec)
    }

    fn finish(&self, rec: Recorder, command: &str) -> Result<()> {
        let m = rec.finish(command, self.cfg.seed, &self.config_text)?;
        for d in m.outputs.values() {
            log::info!("wrote {}", d.path);
        }
        Ok(())
    }
}

/// Loads a series and rescales each feature to zero mean, unit variance.
fn load_series(path: &Path) -> Result<MultivariateSeries> {
    Ok(load_csv(path)?.normalize()?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn csv_line(fields: impl IntoIterator<Item = String>) -> String {
    let mut s = fields.into_iter().collect::<Vec<_>>().join(",");
    s.push('\n');
    s
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

fn model_kind(ckpt: &Checkpoint, path: &Path) -> Result<String> {
    ckpt.meta
        .get("model")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .ok_or_else(|| {
            CliError::Argument(format!(
                "{}: checkpoint does not name its model",
                path.display()
            ))
        })
}

fn representations(path: &Path, series: &MultivariateSeries) -> Result<(RepresentationSet, usize)> {
    let ckpt = load_checkpoint(path)?;
    match model_kind(&ckpt, path)?.as_str() {
        "tnc" => {
            let mut run = TncRun::from_checkpoint(&ckpt)?;
            let window = run.model.encoder.spec.window;
            let z = run.encode(series)?;
            let starts = make_windows(series, window)?.start_indices;
            Ok((RepresentationSet::new(z, None, starts, "TNC")?, window))
        }
        "dlg" => {
            let mut run = DlgRun::from_checkpoint(&ckpt)?;
            let window = run.spec.window;
            let (zl, zg) = run.encode(series)?;
            let starts = make_windows(series, window)?.start_indices;
            Ok((RepresentationSet::new(zl, Some(zg), starts, "DLG")?, window))
        }
        other => Err(CliError::Argument(format!(
            "{}: unknown model `{other}`",
            path.display()
        ))),
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let ctx = Ctx {
        config_text: cfg.to_text(),
        cfg,
        force: cli.force,
        convention: cli.stationarity_convention.into(),
    };
    let name = cli.command.name();
    match &cli.command {
        Command::Synth {
            preset: p,
            missing_rate,
            out,
        } => {
            let mut rec = ctx.recorder(manifest_for_file(out), cli)?;
            let mut sc = preset(p, ctx.cfg.seed)?;
            sc.missing_rate = *missing_rate;
            let s = synthesize(&sc)?;
            let mut buf = Vec::new();
            maneuverlab::signals::write_csv(&s, &mut buf)?;
            write_text(out, &String::from_utf8_lossy(&buf))?;
            rec.output("series", out);
            ctx.finish(rec, name)
        }
        Command::Label { data, out, window } => {
            let mut rec = ctx.recorder(manifest_for_file(out), cli)?;
            rec.input("data", data)?;
            let s = load_series(data)?;
            let labelled = label_states(&s, *window, ctx.cfg.adf_threshold, ctx.convention)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            save_csv(&labelled, out)?;
            rec.output("labelled", out);
            ctx.finish(rec, name)
        }
        Command::Adf {
            data,
            window,
            out,
            max_lags,
        } => {
            if *window == 0 {
                return Err(CliError::Argument("--window must be positive".into()));
            }
            let mut rec = ctx.recorder(manifest_for_file(out), cli)?;
            rec.input("data", data)?;
            let s = load_series(data)?;
            let mut text =
                csv_line(["start", "feature", "statistic", "p_value", "lags"].map(String::from));
            let mut start = 0;
            while start + window <= s.len() {
                for f in 0..s.n_features() {
                    let x = &s.feature(f)[start..start + window];
                    let fname = FEATURE_NAMES
                        .get(f)
                        .map_or_else(|| format!("f{f}"), |n| n.to_string());
                    let fields = match adf_test(x, *max_lags) {
                        Ok(r) => [
                            r.statistic.to_string(),
                            r.p_value.to_string(),
                            r.lags_used.to_string(),
                        ],
                        Err(e) => {
                            log::info!("window at {start}, {fname}: {e}");
                            ["NA".into(), "NA".into(), "NA".into()]
                        }
                    };
                    let [stat, p, lags] = fields;
                    text.push_str(&csv_line([start.to_string(), fname, stat, p, lags]));
                }
                start += window;
            }
            write_text(out, &text)?;
            rec.output("adf", out);
            ctx.finish(rec, name)
        }
        Command::TrainTnc { data, out } => {
            fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
            let mut rec = ctx.recorder(out.join("train-tnc.manifest.json"), cli)?;
            rec.input("data", data)?;
            let s = load_series(data)?;
            let opts = TncOptions {
                convention: ctx.convention,
                ..TncOptions::default()
            };
            let run = train_tnc::<f64>(&ctx.cfg, &s, &opts)?;
            let ckpt_path = out.join("tnc.ckpt.json");
            run.checkpoint(&ctx.cfg).save(&ckpt_path)?;
            let mut log_text = csv_line(TNC_LOG_HEADER.map(String::from));
            for e in &run.log {
                log_text.push_str(&csv_line([
                    e.epoch.to_string(),
                    e.train_loss.to_string(),
                    e.heldout_loss.to_string(),
                    e.disc_accuracy.to_string(),
                ]));
            }
            let log_path = out.join("tnc_log.csv");
            write_text(&log_path, &log_text)?;
            rec.output("checkpoint", &ckpt_path);
            rec.output("log", &log_path);
            ctx.finish(rec, name)
        }
        Command::TrainDlg { data, out } => {
            fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
            let mut rec = ctx.recorder(out.join("train-dlg.manifest.json"), cli)?;
            rec.input("data", data)?;
            let s = load_series(data)?;
            let run = train_dlg::<f64>(&ctx.cfg, &s)?;
            let ckpt_path = out.join("dlg.ckpt.json");
            run.checkpoint(&ctx.cfg).save(&ckpt_path)?;
            let mut log_text = csv_line(DLG_LOG_HEADER.map(String::from));
            for e in &run.log {
                log_text.push_str(&csv_line(e.row().map(|v| v.to_string())));
            }
            let log_path = out.join("dlg_log.csv");
            write_text(&log_path, &log_text)?;
            rec.output("checkpoint", &ckpt_path);
            rec.output("log", &log_path);
            ctx.finish(rec, name)
        }
        Command::Encode {
            checkpoint,
            data,
            out,
        } => {
            let mut rec = ctx.recorder(manifest_for_file(out), cli)?;
            rec.input("checkpoint", checkpoint)?;
            rec.input("data", data)?;
            let s = load_series(data)?;
            let (set, _) = representations(checkpoint, &s)?;
            let mut buf = Vec::new();
            set.write_csv(&mut buf)?;
            write_text(out, &String::from_utf8_lossy(&buf))?;
            rec.output("representations", out);
            ctx.finish(rec, name)
        }
        Command::Evaluate {
            data,
            tnc,
            dlg,
            reps,
            out,
        } => {
            if tnc.is_none() && dlg.is_none() && reps.is_empty() {
                return Err(CliError::MissingArtifact(
                    "no model checkpoint to evaluate; pass --tnc CHECKPOINT, --dlg CHECKPOINT or --reps FILE".into(),
                ));
            }
            let mut rec = ctx.recorder(manifest_for_file(out), cli)?;
            rec.input("data", data)?;
            for (role, p) in [("tnc", tnc), ("dlg", dlg)] {
                if let Some(p) = p {
                    rec.input(role, p)?;
                }
            }
            for (i, p) in reps.iter().enumerate() {
                rec.input(&format!("reps{i}"), p)?;
            }
            let mut s = load_series(data)?;
            if s.labels().is_none() {
                log::info!("{} has no state column; labeling with ADF", data.display());
                s = label_states(&s, LABEL_WINDOW, ctx.cfg.adf_threshold, ctx.convention)?;
            }
            let mut sets = Vec::new();
            let mut window = None;
            for p in [tnc, dlg].into_iter().flatten() {
                let (set, w) = representations(p, &s)?;
                if window.is_some_and(|v| v != w) {
                    return Err(CliError::Argument(
                        "checkpoints were trained with different windows".into(),
                    ));
                }
                window = Some(w);
                sets.push(set);
            }
            for p in reps {
                let f = fs::File::open(p).map_err(|e| CliError::io(p, e))?;
                sets.push(RepresentationSet::read_csv(std::io::BufReader::new(f))?);
            }
            let ecfg = EvalConfig {
                window: window.unwrap_or(ctx.cfg.window),
                probe: ProbeConfig {
                    seed: ctx.cfg.seed,
                    ..ProbeConfig::default()
                },
                seed: ctx.cfg.seed,
                ..EvalConfig::default()
            };
            let report = evaluate_all(&sets, &s, &ecfg)?;
            write_text(out, &report.to_csv())?;
            print!("{}", report.to_table());
            rec.output("report", out);
            ctx.finish(rec, name)
        }
        Command::Reconstruct {
            checkpoint,
            data,
            out,
        } => {
            let mut rec = ctx.recorder(manifest_for_file(out), cli)?;
            rec.input("checkpoint", checkpoint)?;
            rec.input("data", data)?;
            let ckpt = load_checkpoint(checkpoint)?;
            if model_kind(&ckpt, checkpoint)? != "dlg" {
                return Err(CliError::Argument(format!(
                    "{}: reconstruction needs a DLG checkpoint",
                    checkpoint.display()
                )));
            }
            let s = load_series(data)?;
            let mut run = DlgRun::from_checkpoint(&ckpt)?;
            let r = run.reconstruct(&s, None)?;
            let mut text = csv_line(RECON_HEADER.map(String::from));
            for t in 0..s.len() {
                let mut row = vec![t.to_string()];
                for f in 0..2 {
                    row.push(if s.is_observed(f, t) {
                        s.feature(f)[t].to_string()
                    } else {
                        String::new()
                    });
                }
                for f in 0..2 {
                    row.push(r.values[f][t].to_string());
                }
                for f in 0..2 {
                    row.push(r.sigma[f].to_string());
                }
                text.push_str(&csv_line(row));
            }
            write_text(out, &text)?;
            rec.output("reconstruction", out);
            ctx.finish(rec, name)
        }
        Command::Report { input } => {
            let text = fs::read_to_string(input).map_err(|e| CliError::io(input, e))?;
            let report = Report::from_csv(&text)?;
            print!("{}", report.to_table());
            Ok(())
        }
    }
}
