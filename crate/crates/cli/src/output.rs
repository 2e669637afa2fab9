//! Deterministic output writers.
//!
//! Every file starts with (CSV) or contains (JSON) the hex SHA-256 hash of
//! the effective configuration that produced it, floats are written with 17
//! significant digits, and rows are emitted in a fixed order, so reruns with
//! an identical configuration are byte-identical. The column layouts are
//! documented in `SCHEMA.md` at the repository root.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::CliError;

/// Formats a float with 17 significant digits (one mantissa digit before the
/// decimal point, sixteen after). The result is a valid JSON number literal.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Output directory bound to one effective configuration hash.
pub struct OutputSink {
    dir: PathBuf,
    hash: String,
    quiet: bool,
}

impl OutputSink {
    /// Creates the directory (and parents) if needed.
    pub fn create(dir: &Path, hash: &str, quiet: bool) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| {
            CliError::Io(format!("cannot create output directory {}: {e}", dir.display()))
        })?;
        Ok(Self { dir: dir.to_path_buf(), hash: hash.to_string(), quiet })
    }

    /// Writes a CSV file: a `# config_hash=...` comment line, the header,
    /// then one line per row. Cells must already be formatted.
    pub fn write_csv(
        &self,
        name: &str,
        header: &str,
        rows: &[Vec<String>],
    ) -> Result<PathBuf, CliError> {
        let mut text = String::new();
        text.push_str("# config_hash=");
        text.push_str(&self.hash);
        text.push('\n');
        text.push_str(header);
        text.push('\n');
        for row in rows {
            text.push_str(&row.join(","));
            text.push('\n');
        }
        self.write_file(name, text.as_bytes())
    }

    /// Writes a JSON file from a prebuilt object body (the pairs inside the
    /// outer braces, without the `config_hash` entry, which is added here).
    pub fn write_json(&self, name: &str, body: &JsonObject) -> Result<PathBuf, CliError> {
        let mut full = JsonObject::new();
        full.string("config_hash", &self.hash);
        let mut text = String::from("{\n");
        let mut entries = full.entries;
        entries.extend(body.entries.iter().cloned());
        for (i, (key, value)) in entries.iter().enumerate() {
            text.push_str("  ");
            text.push_str(&json_escape(key));
            text.push_str(": ");
            text.push_str(value);
            if i + 1 < entries.len() {
                text.push(',');
            }
            text.push('\n');
        }
        text.push_str("}\n");
        self.write_file(name, text.as_bytes())
    }

    fn write_file(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        let mut file = fs::File::create(&path)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", path.display())))?;
        file.write_all(bytes)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        if !self.quiet {
            println!("wrote {}", path.display());
        }
        Ok(path)
    }
}

/// Tiny ordered JSON-object builder. Values are stored pre-serialized so
/// numbers keep the 17-significant-digit format of [`fmt_float`].
#[derive(Default, Clone)]
pub struct JsonObject {
    entries: Vec<(String, String)>,
}

impl JsonObject {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a float entry (17 significant digits).
    pub fn float(&mut self, key: &str, v: f64) -> &mut Self {
        self.entries.push((key.to_string(), fmt_float(v)));
        self
    }

    /// Adds an integer entry.
    pub fn int(&mut self, key: &str, v: i64) -> &mut Self {
        self.entries.push((key.to_string(), v.to_string()));
        self
    }

    /// Adds a string entry.
    pub fn string(&mut self, key: &str, v: &str) -> &mut Self {
        self.entries.push((key.to_string(), json_escape(v)));
        self
    }

    /// Adds `null` or a string.
    pub fn string_or_null(&mut self, key: &str, v: Option<&str>) -> &mut Self {
        let text = match v {
            Some(s) => json_escape(s),
            None => "null".to_string(),
        };
        self.entries.push((key.to_string(), text));
        self
    }

    /// Adds `null` or a float.
    pub fn float_or_null(&mut self, key: &str, v: Option<f64>) -> &mut Self {
        let text = match v {
            Some(x) => fmt_float(x),
            None => "null".to_string(),
        };
        self.entries.push((key.to_string(), text));
        self
    }

    /// Adds an array of floats (17 significant digits each).
    pub fn float_array(&mut self, key: &str, vs: &[f64]) -> &mut Self {
        let items: Vec<String> = vs.iter().map(|&v| fmt_float(v)).collect();
        self.entries.push((key.to_string(), format!("[{}]", items.join(", "))));
        self
    }
}

fn json_escape(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization cannot fail")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_carry_seventeen_significant_digits() {
        assert_eq!(fmt_float(1.0), "1.0000000000000000e0");
        assert_eq!(fmt_float(-0.1), "-1.0000000000000001e-1");
        let round_trip: f64 = fmt_float(std::f64::consts::PI).parse().unwrap();
        assert_eq!(round_trip, std::f64::consts::PI);
    }

    #[test]
    fn json_builder_emits_parseable_output() {
        let dir = tempfile::tempdir().unwrap();
        let sink = OutputSink::create(dir.path(), "abc123", true).unwrap();
        let mut body = JsonObject::new();
        body.float("value", 0.5)
            .int("count", 3)
            .string("note", "with \"quotes\"")
            .float_array("xs", &[1.0, 2.0])
            .string_or_null("warning", None);
        let path = sink.write_json("t.json", &body).unwrap();
        let text = fs::read_to_string(path).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed["config_hash"], "abc123");
        assert_eq!(parsed["value"], 0.5);
        assert_eq!(parsed["count"], 3);
        assert_eq!(parsed["note"], "with \"quotes\"");
        assert!(parsed["warning"].is_null());
        assert_eq!(parsed["xs"][1], 2.0);
    }

    #[test]
    fn csv_starts_with_the_hash_line() {
        let dir = tempfile::tempdir().unwrap();
        let sink = OutputSink::create(dir.path(), "deadbeef", true).unwrap();
        let rows = vec![vec![fmt_float(1.0), fmt_float(2.0)]];
        let path = sink.write_csv("t.csv", "a,b", &rows).unwrap();
        let text = fs::read_to_string(path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# config_hash=deadbeef"));
        assert_eq!(lines.next(), Some("a,b"));
        assert_eq!(lines.next(), Some("1.0000000000000000e0,2.0000000000000000e0"));
    }
}
