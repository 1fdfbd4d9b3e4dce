//! Labelled text corpora.
//!
//! Two on-disk formats are read and written:
//!
//! * JSON lines (`.jsonl`/`.json`): one object per line with `label` and
//!   either `text` or `text_a` plus optional `text_b`.
//! * TSV (`.tsv`): a header row naming the columns `text` or
//!   `text_a`/`text_b`, and `label`. Fields may not contain tabs.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub text_a: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_b: Option<String>,
    pub label: String,
}

impl RawExample {
    pub fn single(text: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            text_a: text.into(),
            text_b: None,
            label: label.into(),
        }
    }

    pub fn pair(a: impl Into<String>, b: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            text_a: a.into(),
            text_b: Some(b.into()),
            label: label.into(),
        }
    }

    pub fn texts(&self) -> Vec<&str> {
        std::iter::once(self.text_a.as_str())
            .chain(self.text_b.as_deref())
            .collect()
    }
}

#[derive(Deserialize)]
struct JsonLine {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    text_a: Option<String>,
    #[serde(default)]
    text_b: Option<String>,
    label: serde_json::Value,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub examples: Vec<RawExample>,
}

impl Corpus {
    pub fn new(examples: Vec<RawExample>) -> Self {
        Self { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn is_pair(&self) -> bool {
        self.examples.iter().any(|e| e.text_b.is_some())
    }

    /// Distinct labels; numeric when every label parses as an integer,
    /// lexicographic otherwise.
    pub fn classes(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.examples.iter().map(|e| e.label.as_str()).collect();
        let mut v: Vec<String> = set.into_iter().map(str::to_string).collect();
        if v.iter().all(|l| l.parse::<i64>().is_ok()) {
            v.sort_by_key(|l| l.parse::<i64>().unwrap());
        }
        v
    }

    pub fn load(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") => Self::read_tsv(path),
            Some("jsonl") | Some("json") => Self::read_jsonl(path),
            _ => Err(Error::Input(format!(
                "{}: expected a .tsv or .jsonl corpus",
                path.display()
            ))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") => self.write_tsv(path),
            _ => self.write_jsonl(path),
        }
    }

    fn read_jsonl(path: &Path) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut examples = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: JsonLine = serde_json::from_str(&line)
                .map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), n + 1)))?;
            let label = match row.label {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            let text_a = row.text.or(row.text_a).ok_or_else(|| {
                Error::Input(format!("{}:{}: missing text", path.display(), n + 1))
            })?;
            examples.push(RawExample {
                text_a,
                text_b: row.text_b,
                label,
            });
        }
        Ok(Self { examples })
    }

    fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for e in &self.examples {
            let line = match &e.text_b {
                None => serde_json::json!({ "text": e.text_a, "label": e.label }),
                Some(b) => serde_json::json!({ "text_a": e.text_a, "text_b": b, "label": e.label }),
            };
            writeln!(f, "{line}")?;
        }
        f.flush()?;
        Ok(())
    }

    fn read_tsv(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .quoting(false)
            .from_path(path)?;
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let label_col = col("label")
            .ok_or_else(|| Error::Input(format!("{}: no label column", path.display())))?;
        let a_col = col("text")
            .or_else(|| col("text_a"))
            .ok_or_else(|| Error::Input(format!("{}: no text column", path.display())))?;
        let b_col = col("text_b");
        let mut examples = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or_default().to_string();
            examples.push(RawExample {
                text_a: field(a_col),
                text_b: b_col.map(field),
                label: field(label_col),
            });
        }
        Ok(Self { examples })
    }

    fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .delimiter(b'\t')
            .quote_style(csv::QuoteStyle::Never)
            .from_path(path)?;
        if self.is_pair() {
            w.write_record(["text_a", "text_b", "label"])?;
            for e in &self.examples {
                w.write_record([&e.text_a, e.text_b.as_deref().unwrap_or(""), &e.label])?;
            }
        } else {
            w.write_record(["text", "label"])?;
            for e in &self.examples {
                w.write_record([&e.text_a, &e.label])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
