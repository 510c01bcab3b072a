//! Flag / config-file / default resolution.
//!
//! The config file is `key = value` lines; `#` starts a comment. Keys are
//! long flag names (`steps = 300`, `w-nal = 0.01`); `_` and `-` are
//! interchangeable.
//! Flags win over the file, the file over built-in defaults. Keys the command
//! does not know are an error.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use crate::CliError;

pub struct Resolver {
    file: BTreeMap<String, String>,
    used: BTreeSet<String>,
    resolved: Vec<(String, String)>,
}

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!("config line {}: expected key = value", i + 1)));
        };
        let k = k.trim().replace('_', "-");
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::Usage(format!("config line {}: duplicate key {k}", i + 1)));
        }
    }
    Ok(out)
}

impl Resolver {
    pub fn new(path: Option<&Path>) -> Result<Self, CliError> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("config file {}: {e}", p.display())))?;
                parse_kv(&text)?
            }
            None => BTreeMap::new(),
        };
        Ok(Resolver {
            file,
            used: BTreeSet::new(),
            resolved: Vec::new(),
        })
    }

    fn from_file<T>(&mut self, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        self.used.insert(key.to_string());
        self.file
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| CliError::Usage(format!("config key {key}: {e}"))))
            .transpose()
    }

    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T: FromStr + fmt::Display,
        T::Err: fmt::Display,
    {
        let file = self.from_file(key)?;
        let v = flag.or(file).unwrap_or(default);
        self.resolved.push((key.into(), v.to_string()));
        Ok(v)
    }

    pub fn opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T: FromStr + fmt::Display,
        T::Err: fmt::Display,
    {
        let file = self.from_file(key)?;
        let v = flag.or(file);
        let shown = v.as_ref().map_or_else(|| "-".to_string(), |v| v.to_string());
        self.resolved.push((key.into(), shown));
        Ok(v)
    }

    /// A boolean switch: set on the command line, or `true`/`false` in the file.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool, CliError> {
        let file: Option<bool> = self.from_file(key)?;
        let v = flag || file.unwrap_or(false);
        self.resolved.push((key.into(), v.to_string()));
        Ok(v)
    }

    /// Rejects unknown file keys and echoes the resolved configuration.
    pub fn finish(self, command: &str) -> Result<Vec<(String, String)>, CliError> {
        let unknown: Vec<_> = self.file.keys().filter(|k| !self.used.contains(*k)).cloned().collect();
        if !unknown.is_empty() {
            return Err(CliError::Usage(format!("unknown config key(s) for {command}: {}", unknown.join(", "))));
        }
        eprintln!("# seqrank {command}: resolved config");
        for (k, v) in &self.resolved {
            eprintln!("{k} = {v}");
        }
        Ok(self.resolved)
    }
}

/// `30s`, `500ms`, `2m`, `1.5s`, or bare seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dur(pub Duration);

impl FromStr for Dur {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let split = s.find(|c: char| c.is_ascii_alphabetic()).unwrap_or(s.len());
        let (num, unit) = s.split_at(split);
        let n: f64 = num.trim().parse().map_err(|_| format!("bad duration {s:?}"))?;
        let scale = match unit {
            "" | "s" => 1.0,
            "ms" => 1e-3,
            "m" | "min" => 60.0,
            "h" => 3600.0,
            _ => return Err(format!("bad duration unit {unit:?}")),
        };
        let secs = n * scale;
        if !(secs.is_finite() && secs >= 0.0) {
            return Err(format!("duration must be >= 0, got {s:?}"));
        }
        Ok(Dur(Duration::from_secs_f64(secs)))
    }
}

impl fmt::Display for Dur {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}s", self.0.as_secs_f64())
    }
}

/// Comma-separated list.
#[derive(Clone, Debug, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(str::trim)
            .filter(|x| !x.is_empty())
            .map(|x| x.parse::<T>().map_err(|e| format!("{x:?}: {e}")))
            .collect::<Result<_, _>>()
            .map(List)
    }
}

impl<T: fmt::Display> fmt::Display for List<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, x) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{x}")?;
        }
        Ok(())
    }
}

/// Any snake_case serde enum, parsed and printed by its variant name.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Named<T>(pub T);

impl<T: serde::de::DeserializeOwned> FromStr for Named<T> {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
            .map(Named)
            .map_err(|_| format!("unknown value {s:?}"))
    }
}

impl<T: serde::Serialize> fmt::Display for Named<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match serde_json::to_value(&self.0) {
            Ok(serde_json::Value::String(s)) => f.write_str(&s),
            _ => f.write_str("?"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn durations() {
        assert_eq!("30s".parse::<Dur>().unwrap().0, Duration::from_secs(30));
        assert_eq!("500ms".parse::<Dur>().unwrap().0, Duration::from_millis(500));
        assert_eq!("2m".parse::<Dur>().unwrap().0, Duration::from_secs(120));
        assert_eq!("1.5".parse::<Dur>().unwrap().0, Duration::from_millis(1500));
        assert!("-1s".parse::<Dur>().is_err());
        assert!("3 weeks".parse::<Dur>().is_err());
    }

    #[test]
    fn kv_file() {
        let m = parse_kv("# comment\nsteps = 10\n w_nal=0.5 # trailing\n\n").unwrap();
        assert_eq!(m["steps"], "10");
        assert_eq!(m["w-nal"], "0.5");
        assert!(parse_kv("steps").is_err());
        assert!(parse_kv("a=1\na=2").is_err());
    }

    #[test]
    fn precedence_and_unknown_keys() {
        let mut r = Resolver {
            file: parse_kv("steps = 10\nlr = 0.5").unwrap(),
            used: BTreeSet::new(),
            resolved: Vec::new(),
        };
        assert_eq!(r.get("steps", Some(3usize), 1).unwrap(), 3);
        assert_eq!(r.get("lr", None, 0.1f64).unwrap(), 0.5);
        assert_eq!(r.get("batch-size", None, 64usize).unwrap(), 64);
        assert!(r.finish("train").is_ok());

        let mut r = Resolver {
            file: parse_kv("stepz = 10").unwrap(),
            used: BTreeSet::new(),
            resolved: Vec::new(),
        };
        r.get("steps", None, 1usize).unwrap();
        assert!(matches!(r.finish("train"), Err(CliError::Usage(_))));
    }

    #[test]
    fn lists_and_names() {
        let l: List<f64> = "0, 1e-3,0.1".parse().unwrap();
        assert_eq!(l.0, vec![0.0, 1e-3, 0.1]);
        let n: Named<seqrank_core::losses::NegativeMode> = "in-batch".parse().unwrap();
        assert_eq!(n.to_string(), "in_batch");
        assert!("sideways".parse::<Named<seqrank_core::losses::NegativeMode>>().is_err());
    }
}
