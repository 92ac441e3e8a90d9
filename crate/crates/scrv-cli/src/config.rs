//! Flat key/value config files and resolved-config snapshots.
//!
//! The accepted grammar is a YAML subset: one `key: value` pair per line,
//! `#` comments, blank lines. That is exactly what the tool writes back as
//! `resolved_config.yaml`, so any snapshot can be fed to `--config` verbatim.
//! Unknown keys, duplicates, and malformed values are rejected loudly; config
//! problems are usage errors, not runtime ones.

use std::fmt::Display;
use std::path::{Path, PathBuf};

use scrv_core::backbones::ArchKind;
use scrv_core::trainer::TrainMode;
use scrv_core::Error;

/// Every file-settable field, pre-merge. `None` means "not mentioned".
#[derive(Debug, Default)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub mode: Option<TrainMode>,
    pub backbone: Option<ArchKind>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub margin: Option<f64>,
    pub val_fraction: Option<f64>,
    pub image_size: Option<(usize, usize)>,
    pub threads: Option<usize>,
    pub scribes: Option<usize>,
    pub train: Option<usize>,
    pub test: Option<usize>,
    pub canvas: Option<usize>,
    pub n: Option<usize>,
    pub pairs: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub eval_batch: Option<usize>,
}

/// `"64"` means square; `"48x64"` is height x width.
pub fn parse_image_size(s: &str) -> Result<(usize, usize), String> {
    let parse_side = |side: &str| {
        side.trim()
            .parse::<usize>()
            .map_err(|_| format!("invalid image size '{s}' (expected N or HxW)"))
    };
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse_side(h)?, parse_side(w)?)),
        None => {
            let side = parse_side(s)?;
            Ok((side, side))
        }
    }
}

fn bad_value(line_no: usize, key: &str, value: &str, hint: impl Display) -> Error {
    Error::InvalidConfig(format!(
        "config line {line_no}: bad value '{value}' for '{key}': {hint}"
    ))
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
            .map_err(|e| Error::InvalidConfig(format!("in config {}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut cfg = FileConfig::default();
        let mut seen = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once(':').ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "config line {line_no}: expected 'key: value', got '{line}'"
                ))
            })?;
            let key = key.trim();
            let value = value.trim();
            if value.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "config line {line_no}: key '{key}' has no value"
                )));
            }
            if seen.contains(&key.to_string()) {
                return Err(Error::InvalidConfig(format!(
                    "config line {line_no}: duplicate key '{key}'"
                )));
            }
            seen.push(key.to_string());
            cfg.set(key, value, line_no)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str, line_no: usize) -> Result<(), Error> {
        macro_rules! num {
            ($ty:ty) => {
                value
                    .parse::<$ty>()
                    .map_err(|e| bad_value(line_no, key, value, e))?
            };
        }
        match key {
            "seed" => self.seed = Some(num!(u64)),
            "out" => self.out = Some(PathBuf::from(value)),
            "data" => self.data = Some(PathBuf::from(value)),
            "mode" => self.mode = Some(value.parse().map_err(|e| bad_value(line_no, key, value, e))?),
            "backbone" => {
                self.backbone = Some(value.parse().map_err(|e| bad_value(line_no, key, value, e))?)
            }
            "lr" => self.lr = Some(num!(f64)),
            "weight_decay" => self.weight_decay = Some(num!(f64)),
            "batch_size" => self.batch_size = Some(num!(usize)),
            "epochs" => self.epochs = Some(num!(usize)),
            "margin" => self.margin = Some(num!(f64)),
            "val_fraction" => self.val_fraction = Some(num!(f64)),
            "image_size" => {
                self.image_size =
                    Some(parse_image_size(value).map_err(|e| bad_value(line_no, key, value, e))?)
            }
            "threads" => self.threads = Some(num!(usize)),
            "scribes" => self.scribes = Some(num!(usize)),
            "train" => self.train = Some(num!(usize)),
            "test" => self.test = Some(num!(usize)),
            "canvas" => self.canvas = Some(num!(usize)),
            "n" => self.n = Some(num!(usize)),
            "pairs" => self.pairs = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "eval_batch" => self.eval_batch = Some(num!(usize)),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "config line {line_no}: unknown key '{other}'"
                )))
            }
        }
        Ok(())
    }
}

/// Ordered key/value lines, rendered in the same grammar `parse` accepts.
pub struct Resolved {
    command: &'static str,
    entries: Vec<(String, String)>,
}

impl Resolved {
    pub fn new(command: &'static str) -> Self {
        Resolved {
            command,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, key: &str, value: impl Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn push_path(&mut self, key: &str, value: &Path) {
        self.entries.push((key.to_string(), value.display().to_string()));
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "# written by scrv {}; feed back with --config to reproduce the run\n",
            self.command
        );
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(": ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    /// Writes `resolved_config.yaml` into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("resolved_config.yaml");
        std::fs::write(&path, self.render())?;
        Ok(path)
    }
}
