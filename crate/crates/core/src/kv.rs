//! Flat `key = value` configuration text.
//!
//! One pair per line; `#` starts a comment; blank lines are ignored; values
//! may be wrapped in double quotes. Later keys override earlier ones.

use std::path::Path;

use crate::error::{Error, Result};

pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', found '{line}'", n + 1)))?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        let v = v.trim();
        let value = v
            .strip_prefix('"')
            .and_then(|s| s.strip_suffix('"'))
            .unwrap_or(v);
        out.push((key.to_string(), value.to_string()));
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{s}' is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

pub fn value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

pub fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, found '{v}'"))),
    }
}

/// Whitespace- or comma-separated numbers of a fixed count.
pub fn array<const N: usize>(key: &str, v: &str) -> Result<[f64; N]> {
    let items: Vec<f64> = v
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| value::<f64>(key, s))
        .collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|v: Vec<f64>| Error::Config(format!("{key}: expected {N} numbers, found {}", v.len())))
}

pub fn unknown(key: &str) -> Error {
    Error::Config(format!("unknown key '{key}'"))
}
