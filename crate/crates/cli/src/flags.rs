//! Value types shared by the flag structs, and `--config` file expansion.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fmt;
use std::str::FromStr;

use clap::CommandFactory;
use msmamba_core::{Error, Result};

use crate::args::Cli;

/// Comma-separated list taken as a single flag value, so a later flag
/// replaces an earlier one instead of appending to it.
#[derive(Clone, Debug, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let items = s
            .split(',')
            .map(|p| p.trim())
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<T>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if items.is_empty() {
            return Err("empty list".into());
        }
        Ok(List(items))
    }
}

impl<T: fmt::Display> fmt::Display for List<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Optional value spelled `none` when absent, so manifests can echo it.
#[derive(Clone, Debug, PartialEq)]
pub struct Maybe<T>(pub Option<T>);

impl<T: FromStr> FromStr for Maybe<T>
where
    T::Err: fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.trim().eq_ignore_ascii_case("none") {
            return Ok(Maybe(None));
        }
        s.trim().parse::<T>().map(|v| Maybe(Some(v))).map_err(|e| e.to_string())
    }
}

impl<T: fmt::Display> fmt::Display for Maybe<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.0 {
            Some(v) => write!(f, "{v}"),
            None => f.write_str("none"),
        }
    }
}

/// Ordered key=value pairs echoing a fully resolved run.
#[derive(Default, Debug)]
pub struct Manifest(Vec<(String, String)>);

impl Manifest {
    pub fn put(&mut self, key: &str, value: impl fmt::Display) {
        self.0.push((key.to_string(), value.to_string()));
    }

    /// Replaces an existing key in place, or appends it.
    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        match self.0.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value.to_string(),
            None => self.put(key, value),
        }
    }

    pub fn render(&self, command: &str) -> String {
        let mut s = format!("# msmamba {command}\n");
        for (k, v) in &self.0 {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }
}

fn long_names(cmd: &clap::Command) -> HashSet<String> {
    cmd.get_arguments().filter_map(|a| a.get_long().map(str::to_string)).collect()
}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped;
/// underscores in keys read as dashes.
pub fn parse_config(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{origin} line {}: expected key=value", i + 1)))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(Error::Config(format!("{origin} line {}: empty key", i + 1)));
        }
        pairs.push((key, v.trim().to_string()));
    }
    Ok(pairs)
}

/// Splices `--config FILE` entries in right after the subcommand, so flags
/// given on the command line (which come later) override them. Keys that
/// belong to another subcommand are skipped, which lets a train manifest
/// seed an eval or forecast run; keys no subcommand knows are an error.
pub fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    let mut rest = Vec::with_capacity(argv.len());
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        match a.to_str() {
            Some("--config") => {
                let p = it.next().ok_or_else(|| Error::Config("--config needs a file".into()))?;
                path = Some(p);
            }
            Some(s) if s.starts_with("--config=") => path = Some(OsString::from(&s["--config=".len()..])),
            _ => rest.push(a),
        }
    }
    let Some(path) = path else { return Ok(rest) };
    let shown = path.to_string_lossy().into_owned();
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Config(format!("cannot read config {shown}: {e}")))?;
    let pairs = parse_config(&text, &shown)?;

    let root = Cli::command();
    let sub_name = rest.get(1).and_then(|s| s.to_str()).unwrap_or_default().to_string();
    let Some(sub) = root.find_subcommand(&sub_name) else {
        return Err(Error::Config("--config must follow a subcommand".into()));
    };
    let own = long_names(sub);
    let any: HashSet<String> = root.get_subcommands().flat_map(long_names).collect();
    let mut spliced = Vec::new();
    for (k, v) in pairs {
        if own.contains(&k) {
            spliced.push(OsString::from(format!("--{k}")));
            spliced.push(OsString::from(v));
        } else if !any.contains(&k) {
            return Err(Error::Config(format!("{shown}: unknown key {k:?}")));
        }
    }
    let tail = rest.split_off(2);
    rest.extend(spliced);
    rest.extend(tail);
    Ok(rest)
}
