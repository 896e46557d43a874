//! Line-oriented `key = value` configuration files for training runs.
//!
//! Blank lines and lines starting with `#` are ignored. Recognized keys are
//! exactly `w`, `alpha`, `beta`, `lr`, `batch_size`, `epochs_teacher`,
//! `epochs_student`, `crop`, `stride`, `scale` and `seed`; any other key, a
//! repeated key or an unparsable value is an error. Keys that are absent keep
//! their defaults.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::selftrain::TrainConfig;

pub const KEYS: [&str; 11] = [
    "w",
    "alpha",
    "beta",
    "lr",
    "batch_size",
    "epochs_teacher",
    "epochs_student",
    "crop",
    "stride",
    "scale",
    "seed",
];

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: invalid value {value:?} for {key}")))
}

/// Apply one setting to `cfg`.
pub fn set(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    set_at(cfg, 0, key, value)
}

fn set_at(cfg: &mut TrainConfig, line: usize, key: &str, value: &str) -> Result<()> {
    match key {
        "w" => cfg.w = parse_value(line, key, value)?,
        "alpha" => cfg.alpha = parse_value(line, key, value)?,
        "beta" => cfg.beta = parse_value(line, key, value)?,
        "lr" => cfg.lr = parse_value(line, key, value)?,
        "batch_size" => cfg.batch_size = parse_value(line, key, value)?,
        "epochs_teacher" => cfg.epochs_teacher = parse_value(line, key, value)?,
        "epochs_student" => cfg.epochs_student = parse_value(line, key, value)?,
        "crop" => cfg.crop = parse_value(line, key, value)?,
        "stride" => cfg.stride = parse_value(line, key, value)?,
        "scale" => cfg.scale = parse_value(line, key, value)?,
        "seed" => cfg.seed = parse_value(line, key, value)?,
        _ => return Err(Error::Config(format!("line {line}: unknown key {key:?}"))),
    }
    Ok(())
}

/// Parse configuration text on top of the defaults and validate the result.
pub fn parse(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut seen = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`")))?;
        let (key, value) = (key.trim(), value.trim());
        if seen.contains(&key) {
            return Err(Error::Config(format!("line {line}: duplicate key {key:?}")));
        }
        set_at(&mut cfg, line, key, value)?;
        seen.push(key);
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn read(path: &Path) -> Result<TrainConfig> {
    parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Configuration text listing every key.
pub fn to_text(cfg: &TrainConfig) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "w = {}", cfg.w);
    let _ = writeln!(out, "alpha = {}", cfg.alpha);
    let _ = writeln!(out, "beta = {}", cfg.beta);
    let _ = writeln!(out, "lr = {}", cfg.lr);
    let _ = writeln!(out, "batch_size = {}", cfg.batch_size);
    let _ = writeln!(out, "epochs_teacher = {}", cfg.epochs_teacher);
    let _ = writeln!(out, "epochs_student = {}", cfg.epochs_student);
    let _ = writeln!(out, "crop = {}", cfg.crop);
    let _ = writeln!(out, "stride = {}", cfg.stride);
    let _ = writeln!(out, "scale = {}", cfg.scale);
    let _ = writeln!(out, "seed = {}", cfg.seed);
    out
}
