use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Debug, Parser)]
#[command(name = "s3sharp", version, about = "S3 loss, degradation protocol and quality metrics for pan-sharpening")]
struct Cli {
    /// Worker threads for data-parallel kernels (default: all cores)
    #[arg(long, global = true, env = "S3SHARP_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene directory with planted misalignment
    Synth(SynthArgs),
    /// Blur and decimate a raster by the scale ratio
    Degrade(DegradeArgs),
    /// Add the degraded inputs p1 and m2 to a scene directory
    Pair(PairArgs),
    /// Compute the correlation map S between an MS raster and a PAN plane
    CorrMap(CorrMapArgs),
    /// Evaluate the S3 loss of an output against MS and PAN
    Loss(LossArgs),
    /// Score original-scale outputs with ERGAS1, SCC1, SCC0 and n-ERGAS1
    Eval(EvalArgs),
    /// Train the toy sharpener on scene directories
    TrainToy(TrainArgs),
    /// Evaluate a spectral-L2 model and an S3 model side by side
    Compare(CompareArgs),
    /// Summarize metric CSV files as mean and standard error per column
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Scene built from the individual flags
    Custom,
    /// Benchmark scene with seeded global shift and displaced movers
    Misaligned,
    /// Benchmark scene with every misalignment removed
    Aligned,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output scene directory
    #[arg(long)]
    out: PathBuf,
    /// Generator seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scene family; presets ignore the geometry flags below
    #[arg(long, value_enum, default_value_t = Preset::Custom)]
    preset: Preset,
    /// Level-1 size as WxH
    #[arg(long, default_value = "128x128", value_parser = parse_size)]
    size: (usize, usize),
    /// Resolution ratio between PAN and MS
    #[arg(long, default_value_t = 4)]
    scale: usize,
    /// MS-vs-PAN shift in level-0 pixels as DX,DY
    #[arg(long, default_value = "0,0", value_parser = parse_pair, allow_hyphen_values = true)]
    shift: (f64, f64),
    /// Number of moving objects
    #[arg(long, default_value_t = 0)]
    movers: usize,
    /// Mover size in level-0 pixels as WxH
    #[arg(long, default_value = "24x16", value_parser = parse_size)]
    mover_size: (usize, usize),
    /// Extra mover displacement in level-0 pixels as DX,DY
    #[arg(long, default_value = "0,0", value_parser = parse_pair, allow_hyphen_values = true)]
    mover_displacement: (f64, f64),
    /// Comma-separated per-band gains
    #[arg(long, default_value = "0.92,1.0,1.08", value_delimiter = ',')]
    gains: Vec<f64>,
    /// Statistics window the scene must accommodate
    #[arg(long, default_value_t = 31)]
    window: usize,
    /// Also write the degraded training inputs p1 and m2
    #[arg(long)]
    pair: bool,
}

#[derive(Debug, Args)]
struct DegradeArgs {
    /// Raster to degrade (.raw or .png)
    #[arg(long)]
    input: PathBuf,
    /// Degraded raster, one level down
    #[arg(long)]
    out: PathBuf,
    /// Resolution ratio
    #[arg(long, default_value_t = 4)]
    scale: usize,
}

#[derive(Debug, Args)]
struct PairArgs {
    /// Scene directory holding p0 and m1
    #[arg(long)]
    scene: PathBuf,
    /// Write the completed scene here instead of in place
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct CorrFlags {
    /// Exponent applied to |corr|
    #[arg(long, default_value_t = 4.0)]
    gamma: f64,
    /// Odd side of the square statistics window
    #[arg(long, default_value_t = 31)]
    window: usize,
    /// Standard deviation stabilizer e
    #[arg(long, default_value = "1e-10")]
    eps: f64,
}

#[derive(Debug, Args)]
struct CorrMapArgs {
    /// MS raster on the PAN grid
    #[arg(long)]
    ms: PathBuf,
    /// Single-band PAN raster
    #[arg(long)]
    pan: PathBuf,
    /// Output plane (.raw or .png)
    #[arg(long)]
    out: PathBuf,
    /// Optional 8-bit heatmap of S
    #[arg(long)]
    heatmap: Option<PathBuf>,
    #[command(flatten)]
    corr: CorrFlags,
}

#[derive(Debug, Args)]
struct LossArgs {
    /// Output being scored
    #[arg(long)]
    g: PathBuf,
    /// MS target on the same grid
    #[arg(long)]
    ms: PathBuf,
    /// Single-band PAN raster on the same grid
    #[arg(long)]
    pan: PathBuf,
    #[command(flatten)]
    corr: CorrFlags,
    /// Weight of the spatial term
    #[arg(long, default_value_t = 1.0)]
    wa: f64,
    /// Replace S by all ones
    #[arg(long)]
    no_corr_map: bool,
    /// CSV output (stdout when absent)
    #[arg(long)]
    out: Option<PathBuf>,
    /// 8-bit heatmap of the per-pixel spectral term
    #[arg(long)]
    spectral_heatmap: Option<PathBuf>,
    /// 8-bit heatmap of the per-pixel spatial term
    #[arg(long)]
    spatial_heatmap: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SccModeArg {
    Gray,
    BandAverage,
}

#[derive(Debug, Clone, Args)]
struct EvalFlags {
    /// Largest translation searched by n-ERGAS, in level-0 pixels
    #[arg(long, default_value_t = 6)]
    max_shift: usize,
    /// How multi-band outputs are compared against PAN
    #[arg(long, value_enum, default_value_t = SccModeArg::Gray)]
    scc_mode: SccModeArg,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Scene directory (repeatable)
    #[arg(long, required = true)]
    scene: Vec<PathBuf>,
    /// g0 file name inside each scene directory (default: the manifest's g0)
    #[arg(long, conflicts_with = "params")]
    g0: Option<PathBuf>,
    /// Produce g0 by running a trained toy model instead
    #[arg(long)]
    params: Option<PathBuf>,
    #[command(flatten)]
    eval: EvalFlags,
    /// CSV output (stdout when absent)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    SpectralL2,
    S3,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML training config; missing keys take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training scene directory (repeatable)
    #[arg(long, required = true)]
    scene: Vec<PathBuf>,
    /// Parameter file; a JSON manifest is written next to it
    #[arg(long)]
    out: PathBuf,
    /// Loss-curve CSV (default: <out>.curve.csv)
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Overrides the config's loss mode [config default: spectral-l2]
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Overrides the config's seed [config default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's iteration count [config default: 2000]
    #[arg(long)]
    iterations: Option<usize>,
    /// Overrides the config's learning rate [config default: 0.002]
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Parameters of the spectral-L2 model
    #[arg(long)]
    spectral: PathBuf,
    /// Parameters of the S3 model
    #[arg(long)]
    s3: PathBuf,
    /// Test scene directory (repeatable)
    #[arg(long, required = true)]
    scene: Vec<PathBuf>,
    #[command(flatten)]
    eval: EvalFlags,
    /// CSV output (stdout when absent)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Metric CSV written by eval or compare (repeatable)
    #[arg(long, required = true)]
    input: Vec<PathBuf>,
    /// CSV output (stdout when absent)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected DX,DY, got `{s}`"))?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|_| format!("invalid number `{v}`"));
    Ok((num(a)?, num(b)?))
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once('x').ok_or_else(|| format!("expected WxH, got `{s}`"))?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("invalid size `{v}`"));
    Ok((num(a)?, num(b)?))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
