//! `mars` command-line tool: synth, quantize, prune, map, simulate,
//! reference and report over the file formats in [`formats`].

pub mod commands;
pub mod descriptor;
pub mod formats;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mars_core::MarsError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONSTRAINT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mars", version, about = "Quantize, prune, map and simulate CNNs on a multi-macro SRAM CIM accelerator")]
pub struct Cli {
    /// JSON file with a `sim` block overriding simulator settings.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded random network, its weights and an input image.
    Synth(SynthArgs),
    /// Fold batch-norm and quantize float weights.
    Quantize(QuantizeArgs),
    /// Zero whole group-sets of a quantized model.
    Prune(PruneArgs),
    /// Pack nonzero group-sets and index codes into a core image.
    Map(MapArgs),
    /// Run a mapped image on an input.
    Simulate(SimulateArgs),
    /// Golden integer forward pass of a quantized model.
    Reference(ReferenceArgs),
    /// Storage, VGG16 and sparsity-sweep data tables.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Tiny,
    Vgg16,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value_t = Preset::Tiny)]
    pub preset: Preset,
    /// Output channels per conv layer (tiny preset).
    #[arg(long, value_delimiter = ',', default_values_t = vec![16, 32])]
    pub channels: Vec<usize>,
    /// Input as `C,H,W` (tiny preset).
    #[arg(long, value_delimiter = ',', default_values_t = vec![3, 8, 8])]
    pub input: Vec<usize>,
    /// 2x2 max pool after the last layer (tiny preset).
    #[arg(long)]
    pub pool: bool,
    #[arg(long, default_value_t = 8)]
    pub bw: u32,
    #[arg(long, default_value_t = 8)]
    pub ba: u32,
    #[arg(long, default_value_t = 0.1)]
    pub weight_std: f64,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub net: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    /// Weight bits; overrides the descriptor.
    #[arg(long)]
    pub bw: Option<u32>,
    /// Activation bits; overrides the descriptor.
    #[arg(long)]
    pub ba: Option<u32>,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Descriptor whose `sparsity` block supplies defaults.
    #[arg(long)]
    pub net: Option<PathBuf>,
    /// Fraction of group-sets to zero.
    #[arg(long, conflicts_with_all = ["element_budget", "mask"])]
    pub target: Option<f64>,
    /// Prune while element sparsity stays within this fraction.
    #[arg(long, conflicts_with = "mask")]
    pub element_budget: Option<f64>,
    /// Apply an existing mask file instead of pruning by norm.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Store every group-set with no index (the baseline mapping).
    #[arg(long)]
    pub dense: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Behavioral,
    BitSerial,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Also run the dense baseline and report ratios against it.
    #[arg(long)]
    pub baseline: bool,
    /// Write the shunter grant trace, one byte per system cycle.
    #[arg(long)]
    pub trace: bool,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
}

#[derive(Debug, Args)]
pub struct ReferenceArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Descriptor the model must agree with.
    #[arg(long)]
    pub net: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportKind {
    Table4,
    Vgg16,
    Sweep,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(value_enum)]
    pub kind: ReportKind,
    /// Sweep layer as `KH,KW,IN,OUT`.
    #[arg(long, value_delimiter = ',', default_values_t = vec![3, 3, 64, 64])]
    pub shape: Vec<usize>,
    /// Sweep input height and width.
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])]
    pub ratios: Vec<f64>,
}

/// Exit code for an error: 3 for mapping or simulation constraint
/// violations, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let constraint = err
        .chain()
        .filter_map(|e| e.downcast_ref::<MarsError>())
        .any(MarsError::is_constraint_violation);
    if constraint {
        EXIT_CONSTRAINT
    } else {
        EXIT_USAGE
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
