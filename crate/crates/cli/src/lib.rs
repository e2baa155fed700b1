//! Library behind the `yoloface` binary. Every subcommand writes to a
//! caller-supplied sink so tests can drive it without spawning a process.

pub mod args;
pub mod bench;
pub mod detect;
pub mod draw;
pub mod eval;
pub mod info;

use std::fmt;
use std::io::Write;
use std::path::Path;

use yoloface::archive::TensorArchive;
use yoloface::model::{Model, ModelConfig, Weights, PRESETS};

pub use args::{Cli, Command};

/// Process exit statuses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 1,
    Data = 2,
    Internal = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError {
            kind: ExitKind::Usage,
            msg: msg.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError {
            kind: ExitKind::Data,
            msg: msg.into(),
        }
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }

    /// Prefixes the message with the file it concerns.
    pub fn at(mut self, path: &Path) -> Self {
        self.msg = format!("{}: {}", path.display(), self.msg);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for CliError {}

impl From<yoloface::Error> for CliError {
    fn from(e: yoloface::Error) -> Self {
        use yoloface::Error as E;
        let kind = match e {
            E::Shape { .. } | E::NonFinite { .. } => ExitKind::Internal,
            _ => ExitKind::Data,
        };
        CliError { kind, msg: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError {
            kind: ExitKind::Internal,
            msg: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// `--config` accepts a JSON file or a preset name.
pub fn load_config(spec: &str) -> CliResult<ModelConfig> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::from(e).at(path))?;
        return ModelConfig::from_json(&text).map_err(|e| CliError::from(e).at(path));
    }
    ModelConfig::preset(spec).ok_or_else(|| {
        let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
        CliError::usage(format!(
            "`{spec}` is neither a config file nor a preset ({})",
            names.join(", ")
        ))
    })
}

/// Builds from an archive when given, otherwise from seeded random weights.
pub fn load_model(config: &ModelConfig, weights: Option<&Path>, seed: u64) -> CliResult<Model> {
    match weights {
        Some(path) => {
            let archive = TensorArchive::load(path).map_err(|e| CliError::from(e).at(path))?;
            Model::build(config, Weights::Archive(&archive)).map_err(|e| CliError::data(e.to_string()).at(path))
        }
        None => Ok(Model::build(config, Weights::Seeded(seed))?),
    }
}

/// Letterbox target: `--size` when given, else the configured input size.
pub fn input_size(config: &ModelConfig, size: Option<usize>) -> CliResult<usize> {
    let size = size.unwrap_or(config.input_size);
    let stride = config.max_stride();
    if size == 0 || !size.is_multiple_of(stride) {
        return Err(CliError::usage(format!("--size {size} must be a positive multiple of {stride}")));
    }
    Ok(size)
}

/// Applies `YOLOFACE_THREADS` to the global worker pool.
pub fn configure_threads(value: Option<&str>) -> CliResult<()> {
    let Some(v) = value else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| CliError::usage(format!("YOLOFACE_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(e.to_string()))
}

pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Detect(a) => detect::run(&a, out, err),
        Command::Eval(a) => eval::run(&a, out, err),
        Command::Info(a) => info::run(&a, out),
        Command::Bench(a) => bench::run(&a, out),
    }
}

/// Writes to `path`, or to `out` when no path is given.
pub(crate) fn emit(path: Option<&Path>, out: &mut dyn Write, text: &str) -> CliResult<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::from(e).at(p)),
        None => Ok(out.write_all(text.as_bytes())?),
    }
}
