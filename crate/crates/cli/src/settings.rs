//! Option resolution (flag > config file > default) and artifact sidecars.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Values from an optional JSON config file. Top-level keys apply to every
/// subcommand; an object under the subcommand's name overrides them.
#[derive(Debug, Default)]
pub struct Settings {
    values: Map<String, Value>,
    resolved: Map<String, Value>,
}

impl Settings {
    pub fn load(path: Option<&Path>, command: &str) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let root: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        let Value::Object(mut root) = root else {
            return Err(CliError::Usage(format!("config {} must be a JSON object", path.display())));
        };
        let section = root.remove(command);
        let mut values: Map<String, Value> = root.into_iter().filter(|(_, v)| !v.is_object()).collect();
        match section {
            Some(Value::Object(s)) => values.extend(s),
            Some(_) => return Err(CliError::Usage(format!("config section {command:?} must be an object"))),
            None => {}
        }
        Ok(Self { values, resolved: Map::new() })
    }

    /// The flag value if given, else the config value, else `default`.
    pub fn pick<T: Serialize + DeserializeOwned>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError> {
        let value = match flag {
            Some(v) => v,
            None => match self.values.get(key) {
                Some(v) => serde_json::from_value(v.clone())
                    .map_err(|e| CliError::Usage(format!("config value for {key:?} is invalid: {e}")))?,
                None => default,
            },
        };
        self.record(key, &value);
        Ok(value)
    }

    /// Like [`Settings::pick`] for options that may stay unset.
    pub fn pick_opt<T: Serialize + DeserializeOwned>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError> {
        let value = match flag {
            Some(v) => Some(v),
            None => match self.values.get(key) {
                Some(v) => Some(
                    serde_json::from_value(v.clone())
                        .map_err(|e| CliError::Usage(format!("config value for {key:?} is invalid: {e}")))?,
                ),
                None => None,
            },
        };
        self.record(key, &value);
        Ok(value)
    }

    /// Like [`Settings::pick`] for options without a default.
    pub fn require<T: Serialize + DeserializeOwned>(&mut self, key: &str, flag: Option<T>) -> Result<T, CliError> {
        let value = match flag {
            Some(v) => v,
            None => {
                let v = self.values.get(key).ok_or_else(|| CliError::Usage(format!("--{key} is required")))?;
                serde_json::from_value(v.clone()).map_err(|e| CliError::Usage(format!("config value for {key:?} is invalid: {e}")))?
            }
        };
        self.record(key, &value);
        Ok(value)
    }

    pub fn record<T: Serialize>(&mut self, key: &str, value: &T) {
        self.resolved.insert(key.to_string(), serde_json::to_value(value).expect("option values serialise"));
    }

    pub fn resolved(&self) -> &Map<String, Value> {
        &self.resolved
    }
}

/// Where a report goes: a file, or standard output for `-`.
#[derive(Debug, Clone)]
pub enum Output {
    Stdout,
    File(PathBuf),
}

impl Output {
    pub fn parse(s: &str) -> Self {
        if s == "-" {
            Output::Stdout
        } else {
            Output::File(PathBuf::from(s))
        }
    }

    pub fn write(&self, content: &str) -> Result<(), CliError> {
        match self {
            Output::Stdout => {
                print!("{content}");
                Ok(())
            }
            Output::File(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| octangle::Error::io(dir, e))?;
                }
                std::fs::write(p, content).map_err(|e| octangle::Error::io(p, e).into())
            }
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match self {
            Output::Stdout => None,
            Output::File(p) => Some(p),
        }
    }
}

/// Path of the sidecar that describes `artifact`.
pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `<artifact>.json` recording the command and its resolved options.
pub fn write_sidecar(artifact: &Path, command: &str, settings: &Settings, extra: Value) -> Result<(), CliError> {
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let doc = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "artifact": artifact.display().to_string(),
        "config": settings.resolved(),
        "details": extra,
        "created_unix": created,
    });
    let path = sidecar_path(artifact);
    let text = serde_json::to_string_pretty(&doc).map_err(octangle::Error::from)? + "\n";
    std::fs::write(&path, text).map_err(|e| octangle::Error::io(&path, e).into())
}
