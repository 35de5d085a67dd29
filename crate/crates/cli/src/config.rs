//! Flat `key = value` config files, layered under command-line flags.
//!
//! Blank lines and lines starting with `#` are ignored. Keys use the long
//! flag names with `_` for `-` (`batch_size`, `learning_rate`, ...). A value
//! comes from the flag if given, else the file, else the built-in default.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Default, Clone)]
pub struct FileLayer {
    values: BTreeMap<String, String>,
    origin: String,
}

impl FileLayer {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::Usage(format!("{origin}:{}: expected key = value", i + 1)));
            };
            let key = k.trim().replace('-', "_");
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(CliError::Usage(format!("{origin}:{}: duplicate key `{key}`", i + 1)));
            }
        }
        Ok(Self {
            values,
            origin: origin.to_string(),
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                Self::parse(&text, &p.display().to_string())
            }
        }
    }

    /// Flag value if present, else the parsed file value, else `default`.
    /// Consumes the key so leftovers can be reported.
    pub fn resolve<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.resolve_opt(key, flag)?.unwrap_or(default))
    }

    pub fn resolve_opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let from_file = self.values.remove(key);
        if flag.is_some() {
            return Ok(flag);
        }
        from_file
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::Usage(format!("{}: bad value `{v}` for `{key}`: {e}", self.origin)))
            })
            .transpose()
    }

    /// Boolean switches: a flag can only turn them on.
    pub fn resolve_switch(&mut self, key: &str, flag: bool) -> Result<bool, CliError> {
        let file = self.resolve_opt::<bool>(key, None)?.unwrap_or(false);
        Ok(flag || file)
    }

    /// Errors on keys no resolver asked for.
    pub fn finish(self) -> Result<(), CliError> {
        match self.values.keys().next() {
            None => Ok(()),
            Some(k) => Err(CliError::Usage(format!("{}: unknown key `{k}`", self.origin))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_flag_then_file_then_default() {
        let mut layer = FileLayer::parse("# comment\nalpha = 10\nbatch-size=4\n\n", "cfg").unwrap();
        assert_eq!(layer.resolve("alpha", Some(7.0), 5.0).unwrap(), 7.0);
        assert_eq!(layer.resolve("batch_size", None, 8usize).unwrap(), 4);
        assert_eq!(layer.resolve("max_steps", None, 100u64).unwrap(), 100);
        layer.finish().unwrap();
    }

    #[test]
    fn bad_lines_and_leftovers_are_usage_errors() {
        assert!(FileLayer::parse("alpha 5", "cfg").is_err());
        assert!(FileLayer::parse("a=1\na=2", "cfg").is_err());
        let mut layer = FileLayer::parse("alpha = x\nbogus = 1", "cfg").unwrap();
        assert!(layer.resolve("alpha", None, 5.0).is_err());
        assert!(layer.finish().is_err());
    }
}
