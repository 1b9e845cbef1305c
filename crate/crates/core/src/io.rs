//! JSON/TOML file helpers that report the offending file and field.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Error::data(path, field, e.into_inner())
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::data(path, ".", e))?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = toml::Deserializer::parse(&text).map_err(|e| Error::data(path, ".", one_line(&e.to_string())))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Error::data(path, field, one_line(&e.into_inner().to_string()))
    })
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value).map_err(|e| Error::data(path, ".", e))?;
    write_bytes(path, text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Inner {
        value: u32,
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Outer {
        items: Vec<Inner>,
    }

    #[test]
    fn json_error_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        std::fs::write(&path, r#"{"items": [{"value": 1}, {"value": "two"}]}"#).unwrap();
        let msg = read_json::<Outer>(&path).unwrap_err().to_string();
        assert!(msg.contains("x.json") && msg.contains("items[1].value"), "{msg}");
    }

    #[test]
    fn toml_round_trip_creates_parents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/c.toml");
        let v = Outer { items: vec![Inner { value: 3 }] };
        write_toml(&path, &v).unwrap();
        assert_eq!(read_toml::<Outer>(&path).unwrap(), v);
    }

    #[test]
    fn toml_error_is_one_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[[items]]\nvalue = 1\nextra = 2\n").unwrap();
        let msg = read_toml::<Outer>(&path).unwrap_err().to_string();
        assert!(!msg.contains('\n') && msg.contains("bad.toml"), "{msg}");
    }
}
