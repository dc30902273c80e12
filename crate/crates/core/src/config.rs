//! Flat `key = value` configuration files with `#` comments.

use std::path::Path;

use crate::error::{Error, Result};

/// Parses config text into ordered `(key, value)` pairs. Blank lines and
/// text after `#` are ignored; repeated keys are rejected.
pub fn parse_config(text: &str) -> std::result::Result<Vec<(String, String)>, String> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("line {}: expected `key = value`", lineno + 1));
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(format!("line {}: invalid key `{key}`", lineno + 1));
        }
        if out.iter().any(|(k, _)| k == key) {
            return Err(format!("line {}: duplicate key `{key}`", lineno + 1));
        }
        out.push((key.to_string(), value.to_string()));
    }
    Ok(out)
}

pub fn load_config(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|message| Error::Parse {
        path: path.to_path_buf(),
        message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let text = "# desk run\nepochs = 300\n\n  lr_decoder=0.01   # tuned\nmatching_scheme = p2r\n";
        let kv = parse_config(text).unwrap();
        assert_eq!(
            kv,
            vec![
                ("epochs".to_string(), "300".to_string()),
                ("lr_decoder".to_string(), "0.01".to_string()),
                ("matching_scheme".to_string(), "p2r".to_string()),
            ]
        );
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(parse_config("epochs 300").unwrap_err().contains("line 1"));
        assert!(parse_config("a = 1\na = 2").unwrap_err().contains("duplicate"));
        assert!(parse_config(" = 1").is_err());
        assert!(parse_config("").unwrap().is_empty());
    }
}
