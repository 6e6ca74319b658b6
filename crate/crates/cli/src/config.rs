//! `--config <file>` support: each `key=value` line becomes `--key=value`
//! appended after the command line, so file entries win over flags.

use std::ffi::OsString;
use std::fs;

use anyhow::{bail, Context, Result};

pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("line {}: expected key=value, got `{line}`", n + 1);
        };
        let key = key.trim().trim_start_matches("--");
        if key.is_empty() || key == "config" {
            bail!("line {}: invalid key `{key}`", n + 1);
        }
        out.push((key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

pub fn expand(mut argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    let mut i = 0;
    while i < argv.len() {
        let arg = argv[i].to_string_lossy().into_owned();
        if arg == "--config" {
            let Some(p) = argv.get(i + 1).cloned() else {
                bail!("--config needs a file");
            };
            path = Some(p);
            argv.drain(i..i + 2);
        } else if let Some(p) = arg.strip_prefix("--config=") {
            path = Some(OsString::from(p));
            argv.remove(i);
        } else {
            i += 1;
        }
    }
    if let Some(path) = path {
        let text = fs::read_to_string(&path).with_context(|| format!("reading config {}", path.to_string_lossy()))?;
        for (key, value) in parse(&text).with_context(|| format!("in config {}", path.to_string_lossy()))? {
            argv.push(format!("--{key}={value}").into());
        }
    }
    Ok(argv)
}
