//! Command-line front end. [`run`] parses arguments, executes one subcommand,
//! and returns the process exit code.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::axlstm::{CellKind, ForgetMode};
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::model::{gradcheck_model, ModelConfig, Variant};
use crate::model_file::{load_model, read_manifest, save_model};
use crate::synth::{generate_dataset, load_dataset, GeneratorSpec, Mode, DEFAULT_FPS};
use crate::train::{ablate, evaluate, train, Arm};

#[derive(Debug, Parser)]
#[command(name = "axgcn", version, about = "Two-stream GCN + sLSTM skeleton classifier")]
pub struct Cli {
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labelled dataset.
    Synth(SynthArgs),
    /// Train a model on a directory of sessions.
    Train(TrainArgs),
    /// Score a model on a labelled directory.
    Eval(EvalArgs),
    /// Finite-difference check of the full model at reduced size.
    Gradcheck(GradcheckArgs),
    /// Train and score model variants over several seeds.
    Ablate(AblateArgs),
    /// Print the manifest and configuration of a model file.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_asd: usize,
    #[arg(long)]
    pub n_td: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = "clip")]
    pub mode: Mode,
    #[arg(long, default_value_t = 1.0)]
    pub separation: f64,
    #[arg(long, default_value_t = DEFAULT_FPS)]
    pub fps: f64,
    /// Gaussian pixel noise.
    #[arg(long, default_value_t = 1.5)]
    pub noise: f64,
}

/// Model tunables. Unset flags fall back to the config file, then to defaults.
#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    /// Key-value TOML file with ModelConfig fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub scales: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub cell: Option<CellKind>,
    #[arg(long)]
    pub forget: Option<ForgetMode>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub variant: Option<Variant>,
}

impl ModelArgs {
    pub fn resolve(&self, seed: Option<u64>) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => ModelConfig::default(),
        };
        macro_rules! over {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { cfg.$field = v; })*
            };
        }
        over!(frames => frames, channels => channels, scales => scales, lambda => lambda,
              window => window, hidden => hidden, cell => cell, forget => forget,
              lr => learning_rate, epochs => epochs, batch_size => batch_size, variant => variant);
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Optional JSON file for the per-epoch history.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Number of seeds; seeds 0..K are used.
    #[arg(long)]
    pub seeds: u64,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "head-only,body-only,fused,fused+attention")]
    pub variants: Vec<Variant>,
    #[arg(long, value_delimiter = ',', default_value = "slstm")]
    pub cells: Vec<CellKind>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Serialize)]
struct EvalReport<'a> {
    model: &'a Path,
    data: &'a Path,
    sessions: u64,
    #[serde(flatten)]
    metrics: Metrics,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serialises");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn print_metrics(m: &Metrics) {
    let c = m.confusion.0;
    println!("confusion (rows true ASD/TD, cols predicted): [[{}, {}], [{}, {}]]", c[0][0], c[0][1], c[1][0], c[1][1]);
    println!("accuracy {:.4}  uar {:.4}", m.accuracy, m.uar);
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => {
            let spec = GeneratorSpec {
                n_asd: a.n_asd,
                n_td: a.n_td,
                mode: a.mode,
                fps: a.fps,
                separation: a.separation,
                seed: a.seed,
                noise: a.noise,
            };
            let recs = generate_dataset(&spec, &a.out)?;
            println!("wrote {} sessions and manifest to {}", recs.len(), a.out.display());
        }
        Command::Train(a) => {
            let cfg = a.model.resolve(Some(a.seed))?;
            let data = load_dataset(&a.data)?;
            let (model, history) = train(&data, &cfg)?;
            for h in &history {
                println!("epoch {:>4}  loss {:.6}  train-acc {:.4}", h.epoch + 1, h.mean_loss, h.train_accuracy);
            }
            save_model(&model, &a.out)?;
            if let Some(p) = &a.history {
                write_json(p, &history)?;
            }
            println!("saved {} ({} parameters)", a.out.display(), model.params.count());
        }
        Command::Eval(a) => {
            let model = load_model(&a.model)?;
            let data = load_dataset(&a.data)?;
            let metrics = evaluate(&model, &data)?;
            print_metrics(&metrics);
            write_json(
                &a.report,
                &EvalReport {
                    model: &a.model,
                    data: &a.data,
                    sessions: metrics.confusion.total(),
                    metrics,
                },
            )?;
        }
        Command::Gradcheck(a) => {
            let r = gradcheck_model(a.seed, a.eps)?;
            println!(
                "max relative error {:.3e} over {} coordinates (worst: {}[{}])",
                r.max_relative_error, r.coordinates, r.worst_param, r.worst_index
            );
            if !(r.max_relative_error <= a.tol) {
                return Err(Error::Numerical(format!(
                    "gradient check failed: {:.3e} > tolerance {:.1e}",
                    r.max_relative_error, a.tol
                )));
            }
            println!("ok (tolerance {:.1e})", a.tol);
        }
        Command::Ablate(a) => {
            if a.seeds == 0 {
                return Err(Error::Usage("--seeds must be >= 1".into()));
            }
            let base = a.model.resolve(None)?;
            let data = load_dataset(&a.data)?;
            let arms: Vec<Arm> = a
                .cells
                .iter()
                .flat_map(|&cell| a.variants.iter().map(move |&variant| Arm { variant, cell }))
                .collect();
            let seeds: Vec<u64> = (0..a.seeds).collect();
            let report = ablate(&data, &base, &arms, &seeds)?;
            print!("{}", report.table());
            write_json(&a.report, &report)?;
        }
        Command::Inspect(a) => {
            let bytes = std::fs::read(&a.model).map_err(|e| Error::io(&a.model, e))?;
            let (manifest, _) = read_manifest(&bytes)?;
            let model = load_model(&a.model)?;
            println!("{} entries", manifest.len());
            for e in &manifest {
                println!("  {:<28} {:?}", e.name, e.shape);
            }
            println!("parameters: {}", model.params.count());
            println!("config:\n{}", serde_json::to_string_pretty(&model.config).expect("config serialises"));
        }
    }
    Ok(())
}

/// Runs the CLI on `args` (including the program name) and returns the exit
/// code: 0 success, 1 usage, 2 data, 3 numerical.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be >= 1");
        return 1;
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return 1;
        }
    };
    match pool.install(|| execute(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
