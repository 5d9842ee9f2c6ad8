use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use isla_core::data::{DataError, Dataset};
use isla_core::eval::evaluate;
use isla_core::layout::LayoutFile;
use isla_core::nn::FeatureExtractor;
use isla_core::objectives::{load_checkpoint, CheckpointError, ObjectiveError, Trainer};
use isla_core::pipeline::{self, semi_setup, PipelineError, RunConfig};
use isla_core::service::{self, Model};

#[derive(Parser)]
#[command(name = "isla", version, about = "Layout-to-image synthesis with instance-aware normalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic dataset tools.
    Dataset {
        #[command(subcommand)]
        action: DatasetCmd,
    },
    /// Train a generator/discriminator pair.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset directory; rendered from the config when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        /// Replace unlabeled layouts with simulated detections.
        #[arg(long)]
        semi: bool,
        #[arg(long)]
        semi_fraction: Option<f64>,
        /// Print the effective configuration and exit.
        #[arg(long)]
        dump_config: bool,
    },
    /// Write the JSON evaluation report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        layouts: usize,
        #[arg(long, default_value_t = 4)]
        styles: usize,
    },
    /// Render one layout file to PNGs.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Style seed used when the layout file has none.
        #[arg(long)]
        seed: Option<u64>,
        /// Force every mask blend weight to zero.
        #[arg(long)]
        alpha_zero: bool,
    },
    /// Serve the HTTP inference API.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        alpha_zero: bool,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Render the shapes dataset to a directory.
    Make {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
    },
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Data(String),
    Checkpoint(String),
    Numeric(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 3,
            Failure::Data(_) => 4,
            Failure::Checkpoint(_) => 5,
            Failure::Numeric(_) => 6,
            Failure::Io(_) => 7,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (kind, msg) = match self {
            Failure::Config(m) => ("config", m),
            Failure::Data(m) => ("data", m),
            Failure::Checkpoint(m) => ("checkpoint", m),
            Failure::Numeric(m) => ("numeric", m),
            Failure::Io(m) => ("io", m),
        };
        write!(f, "{kind} error: {msg}")
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::Checkpoint(e.to_string())
    }
}

impl From<ObjectiveError> for Failure {
    fn from(e: ObjectiveError) -> Self {
        match e {
            ObjectiveError::NonFinite { .. } => Failure::Numeric(e.to_string()),
            ObjectiveError::Checkpoint(c) => c.into(),
            ObjectiveError::Config(m) => Failure::Config(m),
            other => Failure::Numeric(other.to_string()),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(m) => Failure::Config(m),
            PipelineError::Data(d) => d.into(),
            PipelineError::Checkpoint(c) => c.into(),
            PipelineError::Objective(o) => o.into(),
            PipelineError::Io(e) => e.into(),
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            RunConfig::from_toml(&text).map_err(Failure::Config)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate().map_err(Failure::Config)?;
    Ok(cfg)
}

fn dataset_for(cfg: &RunConfig, dir: Option<&Path>) -> Result<Dataset, Failure> {
    Ok(match dir {
        Some(d) => Dataset::load(d)?,
        None => Dataset::generate(cfg.data.render.clone(), cfg.data.samples, cfg.data.seed)?,
    })
}

/// Exclusive claim on a run directory, released on drop.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self, Failure> {
        let path = dir.join(".lock");
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Failure::Io(format!("cannot lock {}: {e}", dir.display())))?;
        Ok(RunLock(path))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    common: Common,
    out: Option<PathBuf>,
    dataset: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    steps: Option<u64>,
    semi: bool,
    semi_fraction: Option<f64>,
    dump_config: bool,
) -> Result<(), Failure> {
    let mut cfg = load_config(&common)?;
    if let Some(f) = semi_fraction {
        cfg.semi.supervised_fraction = f;
    }
    if let Some(s) = steps {
        cfg.schedule.steps = s;
    }
    cfg.validate().map_err(Failure::Config)?;
    if dump_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let mut ds = dataset_for(&cfg, dataset.as_deref())?;
    let setup = semi.then(|| semi_setup(&mut ds, &cfg));
    let trainer = match &checkpoint {
        Some(p) => {
            let t = Trainer::from_checkpoint(&load_checkpoint(p)?)?;
            if t.config != cfg.trainer {
                return Err(Failure::Config("checkpoint was trained with a different trainer config".into()));
            }
            t
        }
        None => Trainer::new(cfg.trainer.clone(), ds.categories.clone())?,
    };
    let _lock = match &out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.toml"), cfg.to_toml())?;
            Some(RunLock::acquire(dir)?)
        }
        None => None,
    };
    let mut log = match &out {
        Some(dir) => Some(io::BufWriter::new(fs::File::create(dir.join("metrics.ndjson"))?)),
        None => None,
    };
    let stdout = io::stdout();
    let mut io_err = None;
    let steps = cfg.schedule.steps;
    pipeline::train(trainer, &ds, &cfg, setup.as_ref(), steps, out.as_deref(), |m| {
        let mut lock = stdout.lock();
        let r = pipeline::write_metrics(&mut lock, m).and_then(|_| match log.as_mut() {
            Some(w) => pipeline::write_metrics(w, m),
            None => Ok(()),
        });
        if let Err(e) = r {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(mut w) = log {
        w.flush()?;
    }
    match io_err {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn cmd_eval(
    common: Common,
    checkpoint: PathBuf,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
    layouts: usize,
    styles: usize,
) -> Result<(), Failure> {
    let cfg = load_config(&common)?;
    let trainer = Trainer::from_checkpoint(&load_checkpoint(&checkpoint)?)?;
    let ds = dataset_for(&cfg, dataset.as_deref())?;
    if ds.resolution() != trainer.resolution() {
        return Err(Failure::Config(format!(
            "dataset resolution {} differs from model resolution {}",
            ds.resolution(),
            trainer.resolution()
        )));
    }
    let report = evaluate(&trainer.generator, &FeatureExtractor::new(), &ds, layouts, styles, cfg.trainer.seed)
        .map_err(|e| Failure::Numeric(e.to_string()))?;
    let doc = serde_json::json!({"config": cfg, "step": trainer.step, "report": report});
    let text = serde_json::to_string_pretty(&doc).expect("report serializes");
    match out {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_generate(checkpoint: PathBuf, layout: PathBuf, out: PathBuf, seed: Option<u64>, alpha_zero: bool) -> Result<(), Failure> {
    let model = Model::from_checkpoint(&load_checkpoint(&checkpoint)?, alpha_zero)?;
    let text = fs::read_to_string(&layout).map_err(|e| Failure::Data(format!("{}: {e}", layout.display())))?;
    let mut file = LayoutFile::parse(&text).map_err(|e| Failure::Data(e.to_string()))?;
    if file.style.is_none() {
        file.style = seed.map(|s| isla_core::layout::StyleSpec { seed: s, per_object_seeds: None });
    }
    let r = model.render(&file).map_err(|e| match e {
        service::RenderError::Invalid(v) => {
            Failure::Data(v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; "))
        }
        service::RenderError::Mismatch(m) => Failure::Config(m),
        service::RenderError::Internal(m) => Failure::Numeric(m),
    })?;
    fs::create_dir_all(&out)?;
    fs::write(out.join("image.png"), &r.image_png)?;
    fs::write(out.join("label_map.png"), &r.label_png)?;
    for (i, m) in r.mask_pngs.iter().enumerate() {
        fs::write(out.join(format!("mask_{i}.png")), m)?;
    }
    fs::write(out.join("style.json"), serde_json::to_string_pretty(&r.style).expect("style serializes"))?;
    Ok(())
}

fn cmd_serve(checkpoint: PathBuf, port: u16, alpha_zero: bool) -> Result<(), Failure> {
    let model = Arc::new(Model::from_checkpoint(&load_checkpoint(&checkpoint)?, alpha_zero)?);
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    eprintln!("listening on 127.0.0.1:{port}");
    rt.block_on(service::serve(model, port))?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Dataset { action: DatasetCmd::Make { common, out, samples } } => {
            let cfg = load_config(&common)?;
            let n = samples.unwrap_or(cfg.data.samples);
            isla_core::data::make_dataset(cfg.data.render.clone(), n, cfg.data.seed, &out)?;
            Ok(())
        }
        Command::Train { common, out, dataset, checkpoint, steps, semi, semi_fraction, dump_config } => {
            cmd_train(common, out, dataset, checkpoint, steps, semi, semi_fraction, dump_config)
        }
        Command::Eval { common, checkpoint, dataset, out, layouts, styles } => {
            cmd_eval(common, checkpoint, dataset, out, layouts, styles)
        }
        Command::Generate { checkpoint, layout, out, seed, alpha_zero } => cmd_generate(checkpoint, layout, out, seed, alpha_zero),
        Command::Serve { checkpoint, port, alpha_zero } => cmd_serve(checkpoint, port, alpha_zero),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
