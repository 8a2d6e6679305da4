//! Flat key=value configuration files.
//!
//! One `key = value` pair per line, `#` starts a comment, blank lines are
//! ignored. Consumers take keys out of the map and call [`KvFile::finish`],
//! which rejects anything left over so typos surface instead of silently
//! falling back to defaults.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct KvFile {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<KvFile> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::Parse {
                line: idx + 1,
                msg: "expected key=value".to_string(),
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(Error::Parse { line: idx + 1, msg: "empty key".to_string() });
            }
            if entries.insert(key.to_string(), (idx + 1, value.to_string())).is_some() {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("duplicate key {key}"),
                });
            }
        }
        Ok(KvFile { entries })
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(_, v)| v)
    }

    pub fn take_f64(&mut self, key: &str) -> Result<Option<f64>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse::<f64>()
                .map_err(|_| Error::Parse { line, msg: format!("{key}: not a number: {v}") })
                .and_then(|x| {
                    if x.is_finite() {
                        Ok(Some(x))
                    } else {
                        Err(Error::Parse { line, msg: format!("{key}: not finite: {v}") })
                    }
                }),
        }
    }

    pub fn take_usize(&mut self, key: &str) -> Result<Option<usize>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse::<usize>()
                .map(Some)
                .map_err(|_| Error::Parse { line, msg: format!("{key}: not a non-negative integer: {v}") }),
        }
    }

    pub fn take_u64(&mut self, key: &str) -> Result<Option<u64>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse::<u64>()
                .map(Some)
                .map_err(|_| Error::Parse { line, msg: format!("{key}: not a non-negative integer: {v}") }),
        }
    }

    pub fn take_bool(&mut self, key: &str) -> Result<Option<bool>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => match v.as_str() {
                "true" | "1" => Ok(Some(true)),
                "false" | "0" => Ok(Some(false)),
                _ => Err(Error::Parse { line, msg: format!("{key}: expected true/false: {v}") }),
            },
        }
    }

    /// Comma-separated list of numbers.
    pub fn take_vec_f64(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => {
                let mut out = Vec::new();
                for part in v.split(',') {
                    let part = part.trim();
                    let x: f64 = part.parse().map_err(|_| Error::Parse {
                        line,
                        msg: format!("{key}: not a number: {part}"),
                    })?;
                    if !x.is_finite() {
                        return Err(Error::Parse { line, msg: format!("{key}: not finite: {part}") });
                    }
                    out.push(x);
                }
                Ok(Some(out))
            }
        }
    }

    /// Comma-separated list of names.
    pub fn take_vec_str(&mut self, key: &str) -> Option<Vec<String>> {
        self.entries
            .remove(key)
            .map(|(_, v)| v.split(',').map(|s| s.trim().to_string()).collect())
    }

    /// Error out if any keys were never consumed.
    pub fn finish(self) -> Result<()> {
        if self.entries.is_empty() {
            Ok(())
        } else {
            let keys: Vec<&str> = self.entries.keys().map(|s| s.as_str()).collect();
            Err(Error::Config(format!("unknown keys: {}", keys.join(", "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let mut kv = KvFile::parse("a = 1\n\n# comment\nb = x,y # trailing\n").unwrap();
        assert_eq!(kv.take_f64("a").unwrap(), Some(1.0));
        assert_eq!(kv.take_vec_str("b").unwrap(), vec!["x".to_string(), "y".to_string()]);
        kv.finish().unwrap();
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(KvFile::parse("a=1\na=2\n").is_err());
        assert!(KvFile::parse("just a line\n").is_err());
        assert!(KvFile::parse("=1\n").is_err());
    }

    #[test]
    fn finish_rejects_unknown_keys() {
        let kv = KvFile::parse("whoops = 3\n").unwrap();
        let err = kv.finish().unwrap_err();
        assert!(err.to_string().contains("whoops"));
    }

    #[test]
    fn type_errors_carry_line_numbers() {
        let mut kv = KvFile::parse("a = 1\nn = wat\n").unwrap();
        let err = kv.take_usize("n").unwrap_err();
        assert!(err.to_string().contains("line 2"));
        let _ = kv.take_f64("a");
    }
}
