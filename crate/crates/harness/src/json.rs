// SPDX-License-Identifier: Apache-2.0

//! JSON file helpers that report failures as JSON pointers.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_path_to_error::{Path as FieldPath, Segment};

use crate::error::{HarnessError, Result};

/// Renders a deserializer path as an RFC 6901 pointer.
pub fn pointer(path: &FieldPath) -> String {
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } | Segment::Enum { variant: key } => {
                out.push_str(&key.replace('~', "~0").replace('/', "~1"))
            }
            Segment::Unknown => out.push('?'),
        }
    }
    out
}

pub fn parse<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let ptr = pointer(e.path());
        HarnessError::config(if ptr.is_empty() { "/".into() } else { ptr }, e.into_inner().to_string())
    })
}

pub fn read<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    parse(&text)
}

pub fn write<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    #[allow(dead_code)]
    struct Inner {
        count: usize,
    }

    #[derive(Debug, Deserialize)]
    #[allow(dead_code)]
    struct Outer {
        items: Vec<Inner>,
    }

    #[test]
    fn pointer_names_the_bad_field() {
        let err = parse::<Outer>(r#"{"items": [{"count": 1}, {"count": -2}]}"#).unwrap_err();
        match err {
            HarnessError::Config { pointer, .. } => assert_eq!(pointer, "/items/1/count"),
            other => panic!("unexpected {other}"),
        }
    }
}
