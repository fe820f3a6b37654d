//! Reports: JSON documents or CSV tables stamped with the seed and a hash of
//! the resolved config. Floats are written at 6 significant digits.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::config::{Format, RunConfig};

/// Rows with named columns; nested fields are flattened with `_`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

fn flatten(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    let key = |k: &str| {
        if prefix.is_empty() {
            k.to_string()
        } else {
            format!("{prefix}_{k}")
        }
    };
    match v {
        Value::Object(m) => m.iter().for_each(|(k, v)| flatten(&key(k), v, out)),
        Value::Array(a) => a
            .iter()
            .enumerate()
            .for_each(|(i, v)| flatten(&key(&i.to_string()), v, out)),
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Appends one row; columns missing from `row` are left empty.
    pub fn push<T: Serialize>(&mut self, row: &T) -> serde_json::Result<()> {
        let mut flat = Map::new();
        flatten("", &serde_json::to_value(row)?, &mut flat);
        self.rows.push(
            self.columns
                .iter()
                .map(|c| flat.get(c).cloned().unwrap_or(Value::Null))
                .collect(),
        );
        Ok(())
    }
}

pub fn round_sig6(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.5e}").parse().expect("formatted float parses")
}

/// Rounds every float in a JSON tree to 6 significant digits.
pub fn round_value(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => n
            .as_f64()
            .map(|f| serde_json::json!(round_sig6(f)))
            .unwrap_or(Value::Null),
        Value::Array(a) => Value::Array(a.into_iter().map(round_value).collect()),
        Value::Object(m) => {
            Value::Object(m.into_iter().map(|(k, v)| (k, round_value(v))).collect())
        }
        other => other,
    }
}

/// SHA-256 of the resolved config's JSON form.
pub fn config_hash(cfg: &RunConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    Sha256::digest(json.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        Value::Number(n) => match n.as_f64() {
            Some(f) if n.is_f64() => round_sig6(f).to_string(),
            _ => n.to_string(),
        },
        other => other.to_string(),
    }
}

pub struct Report<'a> {
    pub command: &'a str,
    pub config: &'a RunConfig,
    pub results: Value,
    pub table: Table,
}

impl Report<'_> {
    pub fn to_json(&self) -> serde_json::Result<String> {
        let doc = serde_json::json!({
            "command": self.command,
            "seed": self.config.seed,
            "config_hash": config_hash(self.config),
            "config": serde_json::to_value(self.config)?,
            "results": self.results,
        });
        Ok(serde_json::to_string_pretty(&round_value(doc))? + "\n")
    }

    pub fn to_csv(&self) -> csv::Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["seed".to_string(), "config_hash".to_string()];
        header.extend(self.table.columns.iter().cloned());
        w.write_record(&header)?;
        let (seed, hash) = (self.config.seed.to_string(), config_hash(self.config));
        for row in &self.table.rows {
            let mut rec = vec![seed.clone(), hash.clone()];
            rec.extend(row.iter().map(cell));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(w.into_inner().expect("flushed"))
    }

    /// Writes `report.json` or `report.csv` under `dir`.
    pub fn emit(&self, dir: &Path, format: Format) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let (path, bytes) = match format {
            Format::Json => (
                dir.join("report.json"),
                self.to_json().map_err(std::io::Error::other)?.into_bytes(),
            ),
            Format::Csv => (
                dir.join("report.csv"),
                self.to_csv().map_err(std::io::Error::other)?,
            ),
        };
        std::fs::File::create(&path)?.write_all(&bytes)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        a: f64,
        ci: (f64, f64),
        name: &'static str,
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(round_sig6(2.574), 2.574);
        assert_eq!(round_sig6(1.0 / 3.0), 0.333333);
        assert_eq!(round_sig6(123456789.0), 123457000.0);
        assert_eq!(round_sig6(-0.000123456789), -0.000123457);
        assert_eq!(round_sig6(0.0), 0.0);
    }

    #[test]
    fn flattening_and_csv() {
        let cfg = RunConfig::default();
        let mut t = Table::new(&["name", "a", "ci_0", "ci_1", "missing"]);
        t.push(&Row {
            a: 1.0 / 7.0,
            ci: (0.1, 0.2),
            name: "x",
        })
        .unwrap();
        let r = Report {
            command: "t",
            config: &cfg,
            results: Value::Null,
            table: t,
        };
        let text = String::from_utf8(r.to_csv().unwrap()).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "seed,config_hash,name,a,ci_0,ci_1,missing"
        );
        assert_eq!(
            lines.next().unwrap(),
            format!("0,{},x,0.142857,0.1,0.2,", config_hash(&cfg))
        );
    }

    #[test]
    fn empty_table_is_header_only() {
        let cfg = RunConfig::default();
        let r = Report {
            command: "sweep",
            config: &cfg,
            results: Value::Array(vec![]),
            table: Table::new(&["bits", "rho"]),
        };
        assert_eq!(
            String::from_utf8(r.to_csv().unwrap()).unwrap(),
            "seed,config_hash,bits,rho\n"
        );
    }

    #[test]
    fn json_is_stable_and_parses_back() {
        let cfg = RunConfig::default();
        let results = serde_json::json!({ "x": 1.0 / 3.0, "v": [2.0 / 3.0, 5] });
        let r = Report {
            command: "t",
            config: &cfg,
            results: results.clone(),
            table: Table::default(),
        };
        let a = r.to_json().unwrap();
        assert_eq!(a, r.to_json().unwrap());
        let back: Value = serde_json::from_str(&a).unwrap();
        assert_eq!(back["results"]["x"], serde_json::json!(0.333333));
        assert_eq!(
            back["results"]["v"][0].as_f64().unwrap(),
            round_sig6(2.0 / 3.0)
        );
        assert_eq!(back["config_hash"].as_str().unwrap().len(), 64);
        assert_eq!(back["seed"], 0);
    }

    #[test]
    fn hash_tracks_config() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.seed = 1;
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
