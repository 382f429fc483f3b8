//! Flat `key = value` text format used for run configs and checkpoint
//! metadata. `#` starts a comment; blank lines are ignored.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One `key = value` line with its 1-based line number.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::config(format!("line {}: empty key", i + 1)));
        }
        if out.iter().any(|e: &Entry| e.key == key) {
            return Err(Error::config(format!("line {}: duplicate key `{key}`", i + 1)));
        }
        out.push(Entry {
            key: key.to_string(),
            value: value.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

pub fn value<T: FromStr>(e: &Entry) -> Result<T>
where
    T::Err: Display,
{
    e.value
        .parse()
        .map_err(|err| Error::config(format!("line {}: bad value for `{}`: {err}", e.line, e.key)))
}

/// Comma-separated list.
pub fn list<T: FromStr>(e: &Entry) -> Result<Vec<T>>
where
    T::Err: Display,
{
    e.value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|err| Error::config(format!("line {}: bad list item for `{}`: {err}", e.line, e.key)))
        })
        .collect()
}

pub fn unknown(e: &Entry) -> Error {
    Error::config(format!("line {}: unknown config key `{}`", e.line, e.key))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let e = parse("# header\n\na = 1  # trailing\n b=x,y \n").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].key.as_str(), e[0].value.as_str(), e[0].line), ("a", "1", 3));
        assert_eq!(list::<String>(&e[1]).unwrap(), vec!["x", "y"]);
        assert_eq!(value::<u32>(&e[0]).unwrap(), 1);
    }

    #[test]
    fn rejects_malformed() {
        assert!(parse("novalue\n").is_err());
        assert!(parse("= 3\n").is_err());
        assert!(parse("a = 1\na = 2\n").is_err());
        let e = parse("a = z").unwrap();
        assert!(matches!(value::<f64>(&e[0]), Err(Error::Config(_))));
    }
}
