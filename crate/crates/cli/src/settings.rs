//! Flag/config-file resolution and the failure taxonomy shared by every
//! subcommand.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use deepsd::config::KeyValues;

/// Failure classes, each with its own process exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(anyhow::Error),
    Numeric(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage: {m}"),
            Failure::Data(e) => write!(f, "data: {e:#}"),
            Failure::Numeric(e) => write!(f, "numerical: {e:#}"),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let diverged = matches!(
            e.downcast_ref::<deepsd::train::TrainError>(),
            Some(deepsd::train::TrainError::Diverged { .. })
        );
        if diverged {
            Failure::Numeric(e)
        } else {
            Failure::Data(e)
        }
    }
}

macro_rules! data_errors {
    ($($t:ty),* $(,)?) => {
        $(impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                anyhow::Error::new(e).into()
            }
        })*
    };
}

data_errors!(
    std::io::Error,
    deepsd::asd::AsdError,
    deepsd::bcsd::BcsdError,
    deepsd::config::ConfigError,
    deepsd::grid::GridError,
    deepsd::metrics::MetricsError,
    deepsd::nn::NnError,
    deepsd::stack::StackError,
    deepsd::synth::SynthError,
    deepsd::train::TrainError,
);

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

pub type Outcome<T> = Result<T, Failure>;

/// Values resolved from flags first, then the `--config` file, then defaults.
/// Every resolved value is recorded for the provenance file.
pub struct Settings {
    file: KeyValues,
    resolved: RefCell<BTreeMap<String, String>>,
    unrecorded: RefCell<BTreeSet<String>>,
}

impl Settings {
    pub fn load(config: Option<&Path>) -> Outcome<Self> {
        let file = match config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Failure::Data(anyhow::anyhow!("{}: {e}", path.display())))?;
                KeyValues::parse(&text).map_err(|e| Failure::Data(anyhow::anyhow!("{}: {e}", path.display())))?
            }
            None => KeyValues::default(),
        };
        Ok(Self { file, resolved: RefCell::default(), unrecorded: RefCell::default() })
    }

    fn from_file<T: FromStr>(&self, key: &str) -> Outcome<Option<T>> {
        self.file.parsed(key).map_err(|e| Failure::Data(anyhow::anyhow!("config: {e}")))
    }

    fn record(&self, key: &str, value: &impl Display) {
        self.resolved.borrow_mut().insert(key.into(), value.to_string());
    }

    pub fn optional<T: FromStr + Display>(&self, key: &str, flag: Option<T>) -> Outcome<Option<T>> {
        let value = match flag {
            Some(v) => Some(v),
            None => self.from_file(key)?,
        };
        if let Some(v) = &value {
            self.record(key, v);
        }
        Ok(value)
    }

    pub fn value<T: FromStr + Display>(&self, key: &str, flag: Option<T>, default: T) -> Outcome<T> {
        let value = self.optional(key, flag)?.unwrap_or(default);
        self.record(key, &value);
        Ok(value)
    }

    pub fn path(&self, key: &str, flag: Option<PathBuf>) -> Outcome<Option<PathBuf>> {
        let value = match flag {
            Some(p) => Some(p),
            None => self.file.get(key).map(PathBuf::from),
        };
        if let Some(p) = &value {
            self.record(key, &p.display());
        }
        Ok(value)
    }

    pub fn required_path(&self, key: &str, flag: Option<PathBuf>) -> Outcome<PathBuf> {
        self.path(key, flag)?.ok_or_else(|| usage(format!("--{key} is required")))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr + Display>(&self, key: &str, flag: Option<String>, default: &[T]) -> Outcome<Vec<T>>
    where
        T: Clone,
    {
        let raw = match flag {
            Some(v) => Some(v),
            None => self.file.get(key).map(str::to_string),
        };
        let Some(raw) = raw else {
            let text = default.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
            self.record(key, &text);
            return Ok(default.to_vec());
        };
        let values = raw
            .split(',')
            .map(|s| s.trim().parse::<T>().map_err(|_| usage(format!("--{key}: cannot parse {s:?}"))))
            .collect::<Outcome<Vec<T>>>()?;
        if values.is_empty() {
            return Err(usage(format!("--{key} is empty")));
        }
        self.record(key, &raw);
        Ok(values)
    }

    /// A file value kept out of the provenance record (output locations).
    pub fn take_unrecorded(&self, key: &str) -> Option<String> {
        self.unrecorded.borrow_mut().insert(key.into());
        self.file.get(key).map(str::to_string)
    }

    /// Resolved values; fails if the config file named a key no flag consumed.
    pub fn finish(&self) -> Outcome<BTreeMap<String, String>> {
        let resolved = self.resolved.borrow();
        let unrecorded = self.unrecorded.borrow();
        if let Some((k, _)) = self.file.iter().find(|(k, _)| !resolved.contains_key(*k) && !unrecorded.contains(*k)) {
            return Err(usage(format!("config key {k:?} is not an option of this command")));
        }
        Ok(resolved.clone())
    }
}

/// Fails unless `path` exists.
pub fn must_exist(key: &str, path: &Path) -> Outcome<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Data(anyhow::anyhow!("--{key} {}: no such file or directory", path.display())))
    }
}
