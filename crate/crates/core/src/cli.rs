//! Command-line front end.
//!
//! Every subcommand is a thin wrapper over library calls. Exit codes: 0 on
//! success, 1 for usage errors (unknown subcommand or flag, malformed
//! option), 2 for data errors (unreadable files, bad formats, invalid
//! configuration).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::classical::Method;
use crate::config;
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::network::BranchMode;
use crate::raster::{
    read_change_map, read_image, write_change_map, write_image, write_scalar_map, ChangeMap,
    RasterImage,
};
use crate::selftrain::{predetect, run_student_stage, run_teacher_stage, run_usta, TrainConfig};
use crate::synth::gen_scene;
use crate::threshold::otsu;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "usta",
    version,
    about = "Unsupervised self-training change detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SweepParam {
    Beta,
    W,
    Alpha,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Single,
    Double,
    Composite,
}

impl From<ModeArg> for BranchMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Single => BranchMode::Single,
            ModeArg::Double => BranchMode::Double,
            ModeArg::Composite => BranchMode::Composite,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Diff,
    Ratio,
    Cva,
    Pca,
    Mad,
    Irmad,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Diff => Method::Diff,
            MethodArg::Ratio => Method::Ratio,
            MethodArg::Cva => Method::Cva,
            MethodArg::Pca => Method::Pca,
            MethodArg::Mad => Method::Mad,
            MethodArg::Irmad => Method::Irmad,
        }
    }
}

#[derive(Debug, clap::Args)]
struct Pair {
    /// First-date image (PGM or PPM).
    #[arg(long)]
    x1: PathBuf,
    /// Second-date image (PGM or PPM).
    #[arg(long)]
    x2: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic scene: x1.ppm, x2.ppm and ref.pgm.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 224)]
        h: usize,
        #[arg(long, default_value_t = 224)]
        w: usize,
        /// Target fraction of changed pixels.
        #[arg(long, default_value_t = 0.1)]
        change: f64,
        /// Standard deviation of the additive noise.
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Classical difference image and its Otsu map: di.ustaf, map.pgm.
    Baseline {
        #[arg(long, value_enum)]
        method: MethodArg,
        #[command(flatten)]
        pair: Pair,
        #[arg(long)]
        out: PathBuf,
    },
    /// First pseudo label and its weights: cm1.pgm, pc1.ustaf.
    Predetect {
        #[command(flatten)]
        pair: Pair,
        /// Configuration file (`key = value` lines).
        #[arg(long)]
        cfg: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline: pseudo labels, both networks and the final map.
    Run {
        #[command(flatten)]
        pair: Pair,
        #[arg(long)]
        cfg: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Precision, recall and F1 (percent) of a change map.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Final-map F1 for each value of one parameter, as CSV.
    Sweep {
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[command(flatten)]
        pair: Pair,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        cfg: Option<PathBuf>,
        /// Comma-separated seeds; defaults to the configured seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Final-map F1 per encoder branch mode, as CSV.
    AblateBranch {
        /// Modes to compare; all three when omitted.
        #[arg(long, value_enum, value_delimiter = ',')]
        mode: Vec<ModeArg>,
        #[command(flatten)]
        pair: Pair,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        cfg: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

/// Parse `args` (including the program name), run, and return the exit
/// code. Normal output goes to `out`, diagnostics to `err`.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_DATA
        }
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_pair(pair: &Pair) -> Result<(RasterImage, RasterImage)> {
    Ok((read_image(&pair.x1)?, read_image(&pair.x2)?))
}

fn load_cfg(path: &Option<PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => config::read(p),
        None => Ok(TrainConfig::default()),
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Synth {
            out: dir,
            seed,
            h,
            w,
            change,
            noise,
        } => {
            let scene = gen_scene(h, w, change, noise, seed)?;
            ensure_dir(&dir)?;
            write_image(&scene.x1, dir.join("x1.ppm"))?;
            write_image(&scene.x2, dir.join("x2.ppm"))?;
            write_change_map(&scene.reference, dir.join("ref.pgm"))
        }
        Command::Baseline {
            method,
            pair,
            out: dir,
        } => {
            let (x1, x2) = load_pair(&pair)?;
            let di = Method::from(method).apply(&x1, &x2)?;
            let (map, t) = otsu(&di);
            ensure_dir(&dir)?;
            write_scalar_map(&di, dir.join("di.ustaf"))?;
            write_change_map(&map, dir.join("map.pgm"))?;
            write_out(out, &format!("threshold {t}\n"))
        }
        Command::Predetect {
            pair,
            cfg,
            out: dir,
        } => {
            let (x1, x2) = load_pair(&pair)?;
            let cfg = load_cfg(&cfg)?;
            let (cm1, pc1) = predetect(&x1, &x2, &cfg)?;
            ensure_dir(&dir)?;
            write_change_map(&cm1, dir.join("cm1.pgm"))?;
            write_scalar_map(&pc1, dir.join("pc1.ustaf"))
        }
        Command::Run {
            pair,
            cfg,
            out: dir,
        } => {
            let (x1, x2) = load_pair(&pair)?;
            let cfg = load_cfg(&cfg)?;
            let r = run_usta(&x1, &x2, &cfg)?;
            ensure_dir(&dir)?;
            write_change_map(&r.cm1, dir.join("cm1.pgm"))?;
            write_scalar_map(&r.pc1, dir.join("pc1.ustaf"))?;
            write_scalar_map(&r.teacher_di, dir.join("teacher_di.ustaf"))?;
            write_change_map(&r.cm2, dir.join("cm2.pgm"))?;
            write_scalar_map(&r.pc2, dir.join("pc2.ustaf"))?;
            write_scalar_map(&r.final_di, dir.join("final_di.ustaf"))?;
            write_change_map(&r.final_map, dir.join("final.pgm"))?;
            r.teacher.save(&dir.join("teacher.ustaw"))?;
            r.student.save(&dir.join("student.ustaw"))?;
            let log = dir.join("train.log");
            fs::write(&log, r.log.to_text()).map_err(|e| Error::io(&log, e))
        }
        Command::Eval { pred, reference } => {
            let scores = evaluate(&read_change_map(&pred)?, &read_change_map(&reference)?)?;
            write_out(out, &format!("{}\n", scores.csv_fields()))
        }
        Command::Sweep {
            param,
            values,
            pair,
            reference,
            cfg,
            seeds,
        } => {
            let (x1, x2) = load_pair(&pair)?;
            let reference = read_change_map(&reference)?;
            let cfg = load_cfg(&cfg)?;
            let seeds = if seeds.is_empty() {
                vec![cfg.seed]
            } else {
                seeds
            };
            let param = match param {
                SweepParam::Beta => "beta",
                SweepParam::W => "w",
                SweepParam::Alpha => "alpha",
            };
            write_out(out, "param,value,seed,f1\n")?;
            for row in sweep(&x1, &x2, &reference, &cfg, param, &values, &seeds)? {
                write_out(
                    out,
                    &format!("{param},{},{},{:.1}\n", row.value, row.seed, 100.0 * row.f1),
                )?;
            }
            Ok(())
        }
        Command::AblateBranch {
            mode,
            pair,
            reference,
            cfg,
            seeds,
        } => {
            let (x1, x2) = load_pair(&pair)?;
            let reference = read_change_map(&reference)?;
            let cfg = load_cfg(&cfg)?;
            let seeds = if seeds.is_empty() {
                vec![cfg.seed]
            } else {
                seeds
            };
            let modes: Vec<BranchMode> = if mode.is_empty() {
                BranchMode::ALL.to_vec()
            } else {
                mode.into_iter().map(BranchMode::from).collect()
            };
            write_out(out, "mode,seed,f1\n")?;
            for m in modes {
                for &seed in &seeds {
                    let run_cfg = TrainConfig {
                        branch_mode: m,
                        seed,
                        ..cfg
                    };
                    let r = run_usta(&x1, &x2, &run_cfg)?;
                    let f1 = evaluate(&r.final_map, &reference)?.f1;
                    write_out(out, &format!("{m},{seed},{:.1}\n", 100.0 * f1))?;
                }
            }
            Ok(())
        }
    }
}

/// One point of a parameter sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub f1: f64,
}

/// Final-map F1 against `reference` for every (value, seed). `param` is one
/// of `beta`, `w` or `alpha`. A beta sweep trains one teacher per seed and
/// reuses it for every value, which gives the same maps as separate runs.
pub fn sweep(
    x1: &RasterImage,
    x2: &RasterImage,
    reference: &ChangeMap,
    cfg: &TrainConfig,
    param: &str,
    values: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    let with = |value: f64, seed: u64| -> Result<TrainConfig> {
        let mut c = TrainConfig { seed, ..*cfg };
        match param {
            "beta" => c.beta = value,
            "alpha" => c.alpha = value,
            "w" => {
                if value.fract() != 0.0 || value < 0.0 {
                    return Err(Error::Config(format!(
                        "window size {value} is not an integer"
                    )));
                }
                c.w = value as usize;
            }
            _ => return Err(Error::Argument(format!("cannot sweep {param:?}"))),
        }
        c.validate()?;
        Ok(c)
    };
    let mut rows = Vec::new();
    for &seed in seeds {
        if param == "beta" {
            let configs = values
                .iter()
                .map(|&v| with(v, seed))
                .collect::<Result<Vec<_>>>()?;
            let stage = run_teacher_stage(x1, x2, &TrainConfig { seed, ..*cfg })?;
            for (c, &value) in configs.iter().zip(values) {
                let s = run_student_stage(&stage, x1, x2, c)?;
                rows.push(SweepRow {
                    value,
                    seed,
                    f1: evaluate(&s.final_map, reference)?.f1,
                });
            }
        } else {
            for &value in values {
                let r = run_usta(x1, x2, &with(value, seed)?)?;
                rows.push(SweepRow {
                    value,
                    seed,
                    f1: evaluate(&r.final_map, reference)?.f1,
                });
            }
        }
    }
    rows.sort_by(|a, b| a.value.total_cmp(&b.value).then(a.seed.cmp(&b.seed)));
    Ok(rows)
}
