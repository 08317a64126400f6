use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use s3sharp::corrmap::{corr_map, CorrMap, CorrParams};
use s3sharp::io::{load, load_plane, load_scene, save, save_heatmap, save_plane, save_scene, write_atomic};
use s3sharp::metrics::{evaluate_scene, EvalConfig, MetricReport, SccMode, TranslationSearch};
use s3sharp::raster::StatConfig;
use s3sharp::s3loss::{s3_loss_with_contributions, LossConfig};
use s3sharp::scalepipe::{degrade, make_training_pair, synth_scene, MoverSpec, ScenePair, SynthConfig};
use s3sharp::toytrain::{compare_modes, evaluate_model, load_params, save_params, train, LossMode, TrainConfig};
use thiserror::Error;

use crate::{
    Cli, Command, CompareArgs, CorrFlags, CorrMapArgs, DegradeArgs, EvalArgs, EvalFlags, LossArgs, ModeArg, PairArgs,
    Preset, ReportArgs, SccModeArg, SynthArgs, TrainArgs,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] s3sharp::Error),

    #[error("bad config {path}: {msg}")]
    Config { path: PathBuf, msg: String },

    #[error("bad table {path}: {msg}")]
    Table { path: PathBuf, msg: String },

    #[error("cannot write to stdout: {0}")]
    Stdout(std::io::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Config { .. } => "config",
            CliError::Table { .. } => "table",
            CliError::Stdout(_) => "io",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        // only fails if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Degrade(a) => degrade_cmd(a),
        Command::Pair(a) => pair(a),
        Command::CorrMap(a) => corr_map_cmd(a),
        Command::Loss(a) => loss(a),
        Command::Eval(a) => eval(a),
        Command::TrainToy(a) => train_toy(a),
        Command::Compare(a) => compare(a),
        Command::Report(a) => report(a),
    }
}

/// Writes `text` atomically to `out`, or to stdout when no path is given.
fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => Ok(write_atomic(path, text.as_bytes())?),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(CliError::Stdout),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = match a.preset {
        Preset::Misaligned => SynthConfig::misaligned_benchmark(a.seed),
        Preset::Aligned => SynthConfig::aligned_benchmark(a.seed),
        Preset::Custom => SynthConfig {
            size: a.size,
            scale: a.scale,
            global_shift: a.shift,
            movers: (0..a.movers)
                .map(|_| MoverSpec {
                    size: a.mover_size,
                    displacement: a.mover_displacement,
                })
                .collect(),
            seed: a.seed,
            band_gains: a.gains,
            window: a.window,
        },
    };
    let mut sp = synth_scene::<f32>(&cfg)?;
    if a.pair {
        sp = make_training_pair(&sp)?;
    }
    save_scene(&sp, &a.out, Some(&cfg))?;
    Ok(())
}

fn degrade_cmd(a: DegradeArgs) -> Result<()> {
    let x = load::<f32>(&a.input)?;
    save(&degrade(&x, a.scale)?, &a.out)?;
    Ok(())
}

fn pair(a: PairArgs) -> Result<()> {
    let (sp, manifest) = load_scene::<f32>(&a.scene)?;
    let out = a.out.as_deref().unwrap_or(&a.scene);
    save_scene(&make_training_pair(&sp)?, out, manifest.synth.as_ref())?;
    Ok(())
}

fn corr_params(c: &CorrFlags) -> Result<CorrParams> {
    Ok(CorrParams::new(c.gamma, StatConfig::new(c.window, c.eps)?)?)
}

fn corr_map_cmd(a: CorrMapArgs) -> Result<()> {
    let ms = load::<f64>(&a.ms)?;
    let pan = load_plane::<f64>(&a.pan)?;
    let s = corr_map(&ms, &pan, &corr_params(&a.corr)?)?;
    save_plane(s.plane(), ms.level(), &a.out)?;
    if let Some(h) = &a.heatmap {
        save_heatmap(s.plane(), h, Some((0.0, 1.0)))?;
    }
    Ok(())
}

fn loss(a: LossArgs) -> Result<()> {
    let g = load::<f64>(&a.g)?;
    let ms = load::<f64>(&a.ms)?;
    let pan = load_plane::<f64>(&a.pan)?;
    let corr = corr_params(&a.corr)?;
    let cfg = LossConfig {
        w_a: a.wa,
        corr,
        use_corr_map: !a.no_corr_map,
        stat: corr.stat,
    };
    cfg.validate()?;
    let s = if cfg.use_corr_map {
        corr_map(&ms, &pan, &corr)?
    } else {
        CorrMap::ones(pan.width(), pan.height())
    };
    let b = s3_loss_with_contributions(&g, &ms, &pan, &s, &cfg)?;
    if let Some(c) = &b.contributions {
        if let Some(path) = &a.spectral_heatmap {
            save_heatmap(&c.spectral, path, None)?;
        }
        if let Some(path) = &a.spatial_heatmap {
            save_heatmap(&c.spatial, path, None)?;
        }
    }
    let text = format!("l_c,l_a,l_s3\n{},{},{}\n", b.l_c, b.l_a, b.l_s3);
    emit(&text, a.out.as_deref())
}

fn eval_config(e: &EvalFlags) -> Result<EvalConfig> {
    Ok(EvalConfig {
        search: TranslationSearch::new(e.max_shift, TranslationSearch::full_grid(e.max_shift).offsets)?,
        scc_mode: match e.scc_mode {
            SccModeArg::Gray => SccMode::Gray,
            SccModeArg::BandAverage => SccMode::BandAverage,
        },
    })
}

fn scene_label(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn load_scenes(dirs: &[PathBuf]) -> Result<Vec<ScenePair<f64>>> {
    dirs.iter().map(|d| Ok(load_scene::<f64>(d)?.0)).collect()
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = eval_config(&a.eval)?;
    let labels: Vec<String> = a.scene.iter().map(|d| scene_label(d)).collect();
    let report = match &a.params {
        Some(p) => evaluate_model(&load_params(p)?, &load_scenes(&a.scene)?, &cfg)?,
        None => {
            let mut rows = Vec::with_capacity(a.scene.len());
            for dir in &a.scene {
                let (mut sp, _) = load_scene::<f64>(dir)?;
                if let Some(name) = &a.g0 {
                    sp = sp.with_g0(load::<f64>(&dir.join(name))?)?;
                }
                rows.push(evaluate_scene(&sp, &cfg)?);
            }
            MetricReport::from_rows(rows)?
        }
    };
    emit(&report.to_csv(&labels), a.out.as_deref())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| s3sharp::Error::Io {
                path: path.clone(),
                source: e,
            })?;
            toml::from_str::<TrainConfig>(&text).map_err(|e| CliError::Config {
                path: path.clone(),
                msg: e.message().to_string(),
            })?
        }
        None => TrainConfig::default(),
    };
    if let Some(m) = a.mode {
        cfg.mode = match m {
            ModeArg::SpectralL2 => LossMode::SpectralL2,
            ModeArg::S3 => LossMode::S3,
        };
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_toy(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let scenes = load_scenes(&a.scene)?;
    let out = train(&scenes, &cfg)?;
    save_params(&out.params, &a.out)?;
    let curve = a.curve.clone().unwrap_or_else(|| {
        let mut name = a.out.as_os_str().to_os_string();
        name.push(".curve.csv");
        PathBuf::from(name)
    });
    let mut text = String::from("iteration,loss\n");
    for (i, l) in out.losses.iter().enumerate() {
        text.push_str(&format!("{i},{l}\n"));
    }
    Ok(write_atomic(&curve, text.as_bytes())?)
}

fn compare(a: CompareArgs) -> Result<()> {
    let cfg = eval_config(&a.eval)?;
    let spectral = load_params(&a.spectral)?;
    let s3 = load_params(&a.s3)?;
    let scenes = load_scenes(&a.scene)?;
    let labels: Vec<String> = a.scene.iter().map(|d| scene_label(d)).collect();
    let cmp = compare_modes(&scenes, &spectral, &s3, &cfg)?;
    emit(&cmp.to_csv(&labels), a.out.as_deref())
}

/// Per-scene numeric columns of a metric CSV; `mean` and `stderr` rows are
/// recomputed rather than trusted.
fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path).map_err(|e| s3sharp::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let bad = |msg: String| CliError::Table {
        path: path.to_path_buf(),
        msg,
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .split(',')
        .skip(1)
        .map(|c| c.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let mut cells = line.split(',');
        let label = cells.next().unwrap_or("").trim();
        if label == "mean" || label == "stderr" {
            continue;
        }
        let row = cells
            .map(|c| c.trim().parse::<f64>().map_err(|_| bad(format!("row {}: invalid number `{c}`", i + 2))))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != header.len() {
            return Err(bad(format!("row {} has {} values, expected {}", i + 2, row.len(), header.len())));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(bad("no data rows".into()));
    }
    Ok((header, rows))
}

fn report(a: ReportArgs) -> Result<()> {
    let mut text = String::from("source,column,n,mean,stderr\n");
    for path in &a.input {
        let (header, rows) = read_table(path)?;
        let source = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let n = rows.len() as f64;
        for (k, col) in header.iter().enumerate() {
            let mean = rows.iter().map(|r| r[k]).sum::<f64>() / n;
            let se = if rows.len() > 1 {
                let var = rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            } else {
                0.0
            };
            text.push_str(&format!("{source},{col},{},{mean:.6},{se:.6}\n", rows.len()));
        }
    }
    emit(&text, a.out.as_deref())
}
