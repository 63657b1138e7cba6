//! Flag values with a JSON config file as fallback.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::CliError;

/// Keys are long flag names (`inner-max`, `nmix`, …). Explicit flags win
/// over the file, the file wins over built-in defaults. Every resolved
/// value is recorded for the reproducibility header.
#[derive(Debug, Default)]
pub struct Settings {
    file: Map<String, Value>,
    used: Map<String, Value>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        match serde_json::from_str::<Value>(&text) {
            Ok(Value::Object(file)) => Ok(Self {
                file,
                used: Map::new(),
            }),
            Ok(_) => Err(CliError::Usage(format!("config {} must be a JSON object", path.display()))),
            Err(e) => Err(CliError::Usage(format!("config {}: {e}", path.display()))),
        }
    }

    fn from_file<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.file.get(key) {
            None => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| CliError::Usage(format!("config key '{key}': {e}"))),
        }
    }

    fn record<T: serde::Serialize>(&mut self, key: &str, v: &T) {
        self.used
            .insert(key.to_owned(), serde_json::to_value(v).unwrap_or(Value::Null));
    }

    pub fn opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T: DeserializeOwned + serde::Serialize,
    {
        let v = match flag {
            Some(v) => Some(v),
            None => self.from_file(key)?,
        };
        if let Some(v) = &v {
            self.record(key, v);
        }
        Ok(v)
    }

    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T: DeserializeOwned + serde::Serialize,
    {
        let v = self.opt(key, flag)?.unwrap_or(default);
        self.record(key, &v);
        Ok(v)
    }

    pub fn required<T>(&mut self, key: &str, flag: Option<T>) -> Result<T, CliError>
    where
        T: DeserializeOwned + serde::Serialize,
    {
        self.opt(key, flag)?
            .ok_or_else(|| CliError::Usage(format!("--{key} is required (flag or config key)")))
    }

    /// Boolean switch: set by the flag or by `true` in the file.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool, CliError> {
        let v = flag || self.from_file::<bool>(key)?.unwrap_or(false);
        self.record(key, &v);
        Ok(v)
    }

    pub fn snapshot(&self) -> String {
        serde_json::to_string(&self.used).unwrap_or_default()
    }
}
