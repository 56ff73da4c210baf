use clap::parser::ValueSource;
use clap::{ArgAction, Command};
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::Path;

/// Flat `key = value` settings; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("config line {}: expected key=value", i + 1))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(format!("config line {}: empty key", i + 1));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

pub fn load_config(path: &Path) -> Result<BTreeMap<String, String>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    parse_config(&text)
}

/// Append file settings for every flag of the chosen subcommand that the
/// command line left unset, so explicit flags always win.
pub fn merge_into_argv(
    cmd: &Command,
    argv: &[OsString],
    settings: &BTreeMap<String, String>,
) -> Result<Vec<OsString>, clap::Error> {
    let matches = cmd.clone().try_get_matches_from(argv)?;
    let mut out = argv.to_vec();
    let Some((name, sub)) = matches.subcommand() else {
        return Ok(out);
    };
    let Some(def) = cmd.find_subcommand(name) else {
        return Ok(out);
    };
    for arg in def.get_arguments() {
        let Some(long) = arg.get_long() else { continue };
        let Some(value) = settings.get(long) else { continue };
        if sub.value_source(arg.get_id().as_str()) == Some(ValueSource::CommandLine) {
            continue;
        }
        match arg.get_action() {
            ArgAction::SetTrue => {
                if matches!(value.as_str(), "true" | "1" | "yes") {
                    out.push(format!("--{long}").into());
                }
            }
            _ => out.push(format!("--{long}={value}").into()),
        }
    }
    Ok(out)
}
