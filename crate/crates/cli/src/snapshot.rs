//! Canonical, key-sorted record of a command and all of its resolved flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use clap::{ArgMatches, Command};

use crate::error::CliError;

pub const SNAPSHOT_FILE: &str = "config.snapshot";

/// Flags that name input files; recorded as absolute paths.
const PATH_KEYS: [&str; 3] = ["data", "model", "framing"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snapshot {
    pub command: String,
    /// Flag name (without `--`) to value; lists are comma-joined.
    pub flags: BTreeMap<String, String>,
}

impl Snapshot {
    /// `cmd` is the subcommand definition; ids that are not its arguments
    /// (argument groups from flattened structs) are skipped.
    pub fn from_matches(cmd: &Command, m: &ArgMatches) -> Result<Self, CliError> {
        let mut flags = BTreeMap::new();
        for id in m.ids() {
            if !cmd.get_arguments().any(|a| a.get_id() == id) {
                continue;
            }
            let key = id.as_str().replace('_', "-");
            if key == "out" {
                continue;
            }
            let Some(raw) = m.get_raw(id.as_str()) else { continue };
            let values: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
            let mut value = values.join(",");
            if PATH_KEYS.contains(&key.as_str()) {
                let abs = std::fs::canonicalize(&value).map_err(|e| CliError::io(Path::new(&value), e))?;
                value = abs.to_string_lossy().into_owned();
            }
            flags.insert(key, value);
        }
        Ok(Self { command: cmd.get_name().to_string(), flags })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.flags.get(key).map(String::as_str)
    }

    pub fn render(&self) -> String {
        let mut all = self.flags.clone();
        all.insert("command".into(), self.command.clone());
        let mut out = String::from("# advframe config snapshot\n");
        for (k, v) in &all {
            writeln!(out, "{k} = {v}").expect("writing to a string");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut flags = BTreeMap::new();
        let mut command = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| CliError::Invalid(format!("snapshot line {}: expected `key = value`", n + 1)))?;
            if k == "command" {
                command = Some(v.to_string());
            } else {
                flags.insert(k.to_string(), v.to_string());
            }
        }
        let command = command.ok_or_else(|| CliError::Invalid("snapshot has no command".into()))?;
        if command == "replay" {
            return Err(CliError::Invalid("a replay cannot be replayed".into()));
        }
        Ok(Self { command, flags })
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write_into(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(SNAPSHOT_FILE);
        std::fs::write(&path, self.render()).map_err(|e| CliError::io(&path, e))
    }

    /// Command-line arguments (without program name and `--out`) that reproduce this run.
    pub fn to_args(&self) -> Vec<String> {
        let mut args = vec![self.command.clone()];
        for (k, v) in &self.flags {
            args.push(format!("--{k}"));
            args.push(v.clone());
        }
        args
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        let mut flags = BTreeMap::new();
        flags.insert("widths".to_string(), "1,2,3".to_string());
        flags.insert("seed".to_string(), "7".to_string());
        let s = Snapshot { command: "sweep".into(), flags };
        let text = s.render();
        assert_eq!(text, "# advframe config snapshot\ncommand = sweep\nseed = 7\nwidths = 1,2,3\n");
        assert_eq!(Snapshot::parse(&text).unwrap(), s);
        assert_eq!(s.to_args(), ["sweep", "--seed", "7", "--widths", "1,2,3"]);
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(Snapshot::parse("command = eval\nbogus\n").is_err());
        assert!(Snapshot::parse("seed = 1\n").is_err());
    }
}
