//! `key=value` configuration text shared by every trainer and the CLI.
//!
//! Lines are `key=value`; blank lines and `#` comments are ignored. Unknown keys are errors.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

pub trait KvConfig {
    fn kv_keys() -> &'static [&'static str];
    fn kv_get(&self, key: &str) -> Option<String>;
    fn kv_set(&mut self, key: &str, value: &str) -> Result<()>;

    /// Serializes every key in declaration order.
    fn to_kv_string(&self) -> String {
        let mut s = String::new();
        for k in Self::kv_keys() {
            s.push_str(k);
            s.push('=');
            s.push_str(&self.kv_get(k).unwrap_or_default());
            s.push('\n');
        }
        s
    }

    /// Applies `key=value` lines on top of `self`.
    fn apply_kv_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (key, value, line) in parse_lines(text, origin)? {
            self.kv_set(&key, &value).map_err(|e| match e {
                Error::Config(msg) => Error::Parse {
                    path: origin.to_string(),
                    line,
                    msg,
                },
                other => other,
            })?;
        }
        Ok(())
    }
}

/// Splits text into `(key, value, line number)` triples.
pub fn parse_lines(text: &str, origin: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.to_string(),
            line: n + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string(), n + 1));
    }
    Ok(out)
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("invalid value {value:?} for {key}: {e}")))
}

pub fn unknown_key(key: &str) -> Error {
    Error::Config(format!("unknown config key {key:?}"))
}

/// Implements [`KvConfig`] for a struct from a list of `"key" => field.path` pairs.
#[macro_export]
macro_rules! kv_config {
    ($ty:ty { $($key:literal => $($field:ident).+),* $(,)? }) => {
        impl $crate::config::KvConfig for $ty {
            fn kv_keys() -> &'static [&'static str] {
                &[$($key),*]
            }

            fn kv_get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(self.$($field).+.to_string()),)*
                    _ => None,
                }
            }

            fn kv_set(&mut self, key: &str, value: &str) -> $crate::Result<()> {
                match key {
                    $($key => {
                        self.$($field).+ = $crate::config::parse_value(key, value)?;
                        Ok(())
                    })*
                    _ => Err($crate::config::unknown_key(key)),
                }
            }
        }
    };
}
