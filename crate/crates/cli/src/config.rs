//! Layered run settings.
//!
//! Every command owns a settings struct with defaults. Resolution is
//! last-writer-wins over three layers: built-in defaults, then the command's
//! section of the config file (`[analyze.snr]`, `[train]`, ...), then flags.
//! The resolved settings are written next to the outputs as `config.toml`, in
//! the same sectioned form, so `--config <out>/config.toml` replays a run.

use crate::CliError;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use toml::{Table, Value};

/// Comma-separated list flag, e.g. `--d 32,64,128`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(',')
            .map(|p| p.trim().parse::<T>().map_err(|e| format!("`{p}`: {e}")))
            .collect::<Result<Vec<_>, _>>()
            .map(List)
    }
}

/// Real-valued list flag: either `a,b,c` or an inclusive range `start:stop:step`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Reals(pub Vec<f64>);

impl FromStr for Reals {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            [_] => List::<f64>::from_str(s).map(|l| Reals(l.0)),
            [a, b, step] => {
                let num = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}"));
                let (a, b, step) = (num(a)?, num(b)?, num(step)?);
                if !(step > 0.0) || b < a {
                    return Err(format!("range {s} needs start <= stop and step > 0"));
                }
                let count = ((b - a) / step + 1e-9).floor() as usize + 1;
                // Rounded so that 0.1:2.0:0.1 yields the literals 0.3, 0.7, ...
                Ok(Reals(
                    (0..count)
                        .map(|i| ((a + i as f64 * step) * 1e12).round() / 1e12)
                        .collect(),
                ))
            }
            _ => Err(format!("expected a list or start:stop:step, got `{s}`")),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// The table at a dotted section path, e.g. `analyze.snr`.
fn section<'a>(root: &'a Table, path: &str) -> Result<Option<&'a Table>, CliError> {
    let mut cur = root;
    for key in path.split('.') {
        match cur.get(key) {
            None => return Ok(None),
            Some(Value::Table(t)) => cur = t,
            Some(_) => return Err(usage(format!("config: `{key}` in [{path}] is not a table"))),
        }
    }
    Ok(Some(cur))
}

fn to_table<T: Serialize>(value: &T) -> Result<Table, CliError> {
    Table::try_from(value).map_err(|e| CliError::Internal(format!("settings do not serialize: {e}")))
}

/// Defaults, then the file's `[section]`, then set flags; later layers win
/// key by key.
pub fn resolve<S, F>(file: Option<&Path>, path: &str, flags: &F) -> Result<S, CliError>
where
    S: Serialize + DeserializeOwned + Default,
    F: Serialize,
{
    let mut merged = to_table(&S::default())?;
    if let Some(file) = file {
        let text =
            std::fs::read_to_string(file).map_err(|e| usage(format!("cannot read config {}: {e}", file.display())))?;
        let root: Table = text
            .parse()
            .map_err(|e| usage(format!("config {}: {e}", file.display())))?;
        if let Some(t) = section(&root, path)? {
            merged.extend(t.clone());
        }
    }
    merged.extend(to_table(flags)?);
    S::deserialize(Value::Table(merged)).map_err(|e| usage(format!("[{path}]: {e}")))
}

/// `settings` nested under its dotted section path, as TOML text.
pub fn record<S: Serialize>(path: &str, settings: &S) -> Result<String, CliError> {
    let mut value = Value::Table(to_table(settings)?);
    for key in path.rsplit('.') {
        let mut t = Table::new();
        t.insert(key.to_string(), value);
        value = Value::Table(t);
    }
    toml::to_string(&value).map_err(|e| CliError::Internal(format!("config does not serialize: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reals_parse_lists_and_ranges() {
        assert_eq!("0.5,1,2".parse::<Reals>().unwrap().0, vec![0.5, 1.0, 2.0]);
        let r = "0.1:2.0:0.1".parse::<Reals>().unwrap().0;
        assert_eq!(r.len(), 20);
        assert_eq!((r[2], r[19]), (0.3, 2.0));
        assert_eq!("1:1:0.5".parse::<Reals>().unwrap().0, vec![1.0]);
        assert!("2:1:0.1".parse::<Reals>().is_err());
        assert!("0:1:0".parse::<Reals>().is_err());
        assert!("a,b".parse::<Reals>().is_err());
        assert_eq!("32, 64".parse::<List<usize>>().unwrap().0, vec![32, 64]);
    }

    #[derive(Serialize, Deserialize, Debug, PartialEq)]
    #[serde(deny_unknown_fields, default)]
    struct S {
        a: u32,
        b: Vec<f64>,
    }

    impl Default for S {
        fn default() -> Self {
            S { a: 1, b: vec![2.0] }
        }
    }

    #[derive(Serialize, Default)]
    struct F {
        #[serde(skip_serializing_if = "Option::is_none")]
        a: Option<u32>,
    }

    #[test]
    fn layers_resolve_last_writer_wins() {
        let dir = std::env::temp_dir().join(format!("ialab-config-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let file = dir.join("c.toml");
        std::fs::write(&file, "[x.y]\na = 5\nb = [3.0]\n").unwrap();
        let s: S = resolve(None, "x.y", &F::default()).unwrap();
        assert_eq!(s, S::default());
        let s: S = resolve(Some(&file), "x.y", &F::default()).unwrap();
        assert_eq!(s, S { a: 5, b: vec![3.0] });
        let s: S = resolve(Some(&file), "x.y", &F { a: Some(9) }).unwrap();
        assert_eq!(s, S { a: 9, b: vec![3.0] });
        let text = record("x.y", &s).unwrap();
        std::fs::write(&file, &text).unwrap();
        let back: S = resolve(Some(&file), "x.y", &F::default()).unwrap();
        assert_eq!(back, s);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
