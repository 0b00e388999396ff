//! Plain-text `key=value` configuration.
//!
//! One pair per line; blank lines and lines starting with `#` are ignored.
//! Lists are comma-separated. Canonical output sorts keys and prints floats
//! with Rust's shortest round-trip formatting, so text round trips are exact.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

pub type KvMap = BTreeMap<String, String>;

pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn to_text(map: &KvMap) -> String {
    map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

pub fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// The known key closest to `key` by edit distance.
pub fn nearest_key<'a>(key: &str, known: impl IntoIterator<Item = &'a str>) -> Option<&'a str> {
    known.into_iter().min_by_key(|k| strsim::levenshtein(key, k))
}

pub fn unknown_key<'a>(key: &str, known: impl IntoIterator<Item = &'a str>) -> Error {
    match nearest_key(key, known) {
        Some(near) => Error::Config(format!("unknown key {key:?} (did you mean {near:?}?)")),
        None => Error::Config(format!("unknown key {key:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let kv = parse_kv("# comment\n\n a = 1 \nb=2,3\n").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b".into(), "2,3".into())]);
        assert_eq!(parse_list::<usize>("b", "2, 3").unwrap(), vec![2, 3]);
        assert!(parse_kv("novalue").is_err());
        assert!(parse_bool("x", "maybe").is_err());
    }

    #[test]
    fn floats_round_trip_through_text() {
        for v in [0.1, 0.004, 1e-300, -0.29000000000000004, std::f64::consts::PI] {
            let s = v.to_string();
            assert_eq!(parse_value::<f64>("k", &s).unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn nearest_key_suggestion() {
        let e = unknown_key("train.lrr", ["train.lr", "train.momentum"]).to_string();
        assert!(e.contains("train.lr\""), "{e}");
    }
}
