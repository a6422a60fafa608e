//! `--config` files: one `key = value` per line, keys named like the long
//! flags (`top-k = 10`, `tolerances = 20,50,100`, `macro = true`). Blank
//! lines and `#` comments are ignored.
//!
//! Entries become flags spliced in right after the subcommand, except those
//! whose flag already appears on the command line.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context};
use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory, FromArgMatches};

use crate::args::Cli;
use crate::UsageError;

const GLOBAL_WITH_VALUE: [&str; 2] = ["--config", "--threads"];

fn command() -> clap::Command {
    let mut cmd = Cli::command().args_override_self(true);
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        cmd = cmd.mut_subcommand(name, |s| s.args_override_self(true));
    }
    cmd
}

fn matches(args: &[OsString]) -> Result<ArgMatches, clap::Error> {
    command().try_get_matches_from(args)
}

fn cli_from(m: &ArgMatches) -> Result<Cli, clap::Error> {
    Cli::from_arg_matches(m)
}

pub fn parse_entries(text: &str) -> anyhow::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!(UsageError(format!("config line {}: expected key = value", n + 1)));
        };
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() {
            bail!(UsageError(format!("config line {}: empty key", n + 1)));
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

fn parse_bool(key: &str, value: &str) -> anyhow::Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => bail!(UsageError(format!("config key {key}: {value:?} is not a boolean"))),
    }
}

/// Translate config entries into flags understood by `subcommand`. Keys the
/// subcommand does not take are skipped with a warning, so one file can serve
/// several subcommands.
fn entries_to_flags(
    entries: &[(String, String)],
    subcommand: &str,
    given: impl Fn(&str) -> bool,
) -> anyhow::Result<Vec<OsString>> {
    let root = command();
    let sub = root
        .find_subcommand(subcommand)
        .with_context(|| format!("unknown subcommand {subcommand}"))?;
    let mut flags = Vec::new();
    for (key, value) in entries {
        if key == "config" {
            bail!(UsageError("config files cannot include other config files".into()));
        }
        let arg = sub
            .get_arguments()
            .chain(root.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()));
        let Some(arg) = arg else {
            log::warn!("config key {key} does not apply to {subcommand}; ignored");
            continue;
        };
        if given(arg.get_id().as_str()) {
            continue;
        }
        if arg.get_action().takes_values() {
            flags.push(OsString::from(format!("--{key}")));
            let list: Vec<&str> = value.split(',').map(str::trim).collect();
            flags.push(OsString::from(list.join(",")));
        } else if parse_bool(key, value)? {
            flags.push(OsString::from(format!("--{key}")));
        }
    }
    Ok(flags)
}

/// Position of the subcommand name in `args`, skipping global flags.
fn subcommand_position(args: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if GLOBAL_WITH_VALUE.contains(&a.as_ref()) {
            i += 2;
        } else if a.starts_with('-') {
            i += 1;
        } else {
            return Some(i);
        }
    }
    None
}

pub fn load(path: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    parse_entries(&text)
}

/// Parse the command line, applying `--config` if present.
pub fn parse_args(args: Vec<OsString>) -> anyhow::Result<Cli> {
    let direct_matches = matches(&args)?;
    let mut direct = cli_from(&direct_matches)?;
    let Some(path) = direct.config.clone() else {
        return Ok(direct);
    };
    let entries = load(&path)?;
    let name = direct.command.name();
    let given = |id: &str| {
        let on_line =
            |m: &ArgMatches| m.try_get_raw(id).is_ok() && m.value_source(id) == Some(ValueSource::CommandLine);
        on_line(&direct_matches) || direct_matches.subcommand().is_some_and(|(_, m)| on_line(m))
    };
    let flags = entries_to_flags(&entries, name, given)?;
    let pos = subcommand_position(&args).context("subcommand not found")?;
    let mut merged_args: Vec<OsString> = args[..=pos].to_vec();
    merged_args.extend(flags);
    merged_args.extend_from_slice(&args[pos + 1..]);
    let mut merged = cli_from(&matches(&merged_args)?)?;

    // The strategy flags are alternatives: one given on the command line
    // replaces whichever the file picked.
    if let (Some(cli), Some(out)) = (direct.command.strategy_mut(), merged.command.strategy_mut()) {
        if cli.any_set() {
            let criterion = out.criterion;
            let tol = out.oracle_tolerance_ms;
            *out = cli.clone();
            out.criterion = criterion;
            out.oracle_tolerance_ms = tol;
        }
    }
    Ok(merged)
}
