use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::vocab::normalize_tokens;
use crate::error::{Error, Result};

/// Binary veracity label. Serialized as `0` (real) / `1` (fake).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Real => Label::Fake,
            Label::Fake => Label::Real,
        }
    }
}

impl From<Label> for u8 {
    fn from(label: Label) -> u8 {
        match label {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            0 => Ok(Label::Real),
            1 => Ok(Label::Fake),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

/// One news piece.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewsItem {
    pub id: String,
    pub text: String,
    pub label: Label,
    pub domain: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DomainCounts {
    pub fake: usize,
    pub real: usize,
}

impl DomainCounts {
    pub fn total(&self) -> usize {
        self.fake + self.real
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IngestMode {
    /// First bad record aborts ingestion.
    #[default]
    Strict,
    /// Bad records are skipped and listed in [`IngestReport::rejected`].
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub items: Vec<NewsItem>,
    pub counts: BTreeMap<String, DomainCounts>,
    pub total_lines: usize,
    /// Blank lines are always listed here, in either mode.
    pub rejected: Vec<Rejection>,
}

impl IngestReport {
    pub fn total_fake(&self) -> usize {
        self.counts.values().map(|c| c.fake).sum()
    }

    pub fn total_real(&self) -> usize {
        self.counts.values().map(|c| c.real).sum()
    }
}

/// Strict JSONL ingestion with no domain restriction.
pub fn ingest(path: &Path) -> Result<IngestReport> {
    ingest_with(path, IngestMode::Strict, None)
}

/// Reads a JSONL corpus: one object per line with `text`, `label` (0/1),
/// `domain` and an optional `id` (autogenerated as `domain:line` when absent).
pub fn ingest_with(
    path: &Path,
    mode: IngestMode,
    domains: Option<&BTreeSet<String>>,
) -> Result<IngestReport> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if raw.trim().is_empty() {
        return Err(Error::EmptyInput(path.display().to_string()));
    }

    let mut items = Vec::new();
    let mut counts: BTreeMap<String, DomainCounts> = BTreeMap::new();
    let mut rejected = Vec::new();
    let mut seen = HashSet::new();
    let mut total_lines = 0;

    for (idx, line) in raw.lines().enumerate() {
        let lineno = idx + 1;
        total_lines += 1;
        if line.trim().is_empty() {
            rejected.push(Rejection {
                line: lineno,
                reason: "blank line".into(),
            });
            continue;
        }
        let parsed = parse_record(line, lineno, domains).and_then(|item| {
            if seen.contains(&item.id) {
                Err(Error::DuplicateId {
                    line: lineno,
                    id: item.id.clone(),
                })
            } else {
                Ok(item)
            }
        });
        match parsed {
            Ok(item) => {
                seen.insert(item.id.clone());
                let c = counts.entry(item.domain.clone()).or_default();
                match item.label {
                    Label::Fake => c.fake += 1,
                    Label::Real => c.real += 1,
                }
                items.push(item);
            }
            Err(e) if mode == IngestMode::Lenient => rejected.push(Rejection {
                line: lineno,
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }

    if items.is_empty() {
        return Err(Error::EmptyInput(format!(
            "{} (no valid records)",
            path.display()
        )));
    }
    Ok(IngestReport {
        items,
        counts,
        total_lines,
        rejected,
    })
}

fn parse_record(line: &str, lineno: usize, domains: Option<&BTreeSet<String>>) -> Result<NewsItem> {
    let malformed = |reason: String| Error::MalformedRecord {
        line: lineno,
        reason,
    };
    let value: Value = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("expected a JSON object".into()))?;

    let text = match obj.get("text") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(malformed("`text` must be a string".into())),
        None => return Err(malformed("missing `text`".into())),
    };
    let domain = match obj.get("domain") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.trim().to_string(),
        Some(_) => return Err(malformed("`domain` must be a non-empty string".into())),
        None => return Err(malformed("missing `domain`".into())),
    };
    let label = match obj.get("label") {
        Some(Value::Number(n)) => match n.as_u64() {
            Some(0) => Label::Real,
            Some(1) => Label::Fake,
            _ => {
                return Err(Error::InvalidLabel {
                    line: lineno,
                    value: n.to_string(),
                })
            }
        },
        Some(other) => {
            return Err(Error::InvalidLabel {
                line: lineno,
                value: other.to_string(),
            })
        }
        None => return Err(malformed("missing `label`".into())),
    };
    let id = match obj.get("id") {
        None | Some(Value::Null) => format!("{domain}:{lineno}"),
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => return Err(malformed("`id` must be a string or number".into())),
    };

    if let Some(allowed) = domains {
        if !allowed.contains(&domain) {
            return Err(malformed(format!("unknown domain {domain:?}")));
        }
    }
    if normalize_tokens(&text).is_empty() {
        return Err(malformed("text is empty after tokenization".into()));
    }
    Ok(NewsItem {
        id,
        text,
        label,
        domain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn counts_per_domain_and_label() {
        let f = write_tmp(concat!(
            r#"{"id":"a","text":"cure found","label":1,"domain":"health"}"#,
            "\n",
            r#"{"id":"b","text":"clinic opens","label":0,"domain":"health"}"#,
            "\n",
            r#"{"id":"c","text":"vote rigged","label":1,"domain":"politics"}"#,
            "\n",
        ));
        let report = ingest(f.path()).unwrap();
        assert_eq!(report.items.len(), 3);
        assert_eq!(report.counts["health"], DomainCounts { fake: 1, real: 1 });
        assert_eq!(report.counts["politics"], DomainCounts { fake: 1, real: 0 });
    }

    #[test]
    fn invalid_label_names_line() {
        let f = write_tmp(concat!(
            r#"{"text":"ok","label":0,"domain":"x"}"#,
            "\n",
            r#"{"text":"bad","label":2,"domain":"x"}"#,
            "\n"
        ));
        let err = ingest(f.path()).unwrap_err();
        assert!(err.to_string().starts_with("invalid label at line 2"), "{err}");
    }

    #[test]
    fn malformed_json_names_line() {
        let f = write_tmp("{\"text\":\"ok\",\"label\":0,\"domain\":\"x\"}\n{not json\n");
        match ingest(f.path()).unwrap_err() {
            Error::MalformedRecord { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_field_is_malformed() {
        let f = write_tmp("{\"text\":\"ok\",\"domain\":\"x\"}\n");
        assert!(matches!(
            ingest(f.path()).unwrap_err(),
            Error::MalformedRecord { line: 1, .. }
        ));
    }

    #[test]
    fn empty_file_is_error() {
        let f = write_tmp("");
        assert!(matches!(ingest(f.path()).unwrap_err(), Error::EmptyInput(_)));
        let f = write_tmp("\n  \n");
        assert!(matches!(ingest(f.path()).unwrap_err(), Error::EmptyInput(_)));
    }

    #[test]
    fn autogenerated_ids_and_duplicates() {
        let f = write_tmp(concat!(
            r#"{"text":"one","label":0,"domain":"x"}"#,
            "\n",
            r#"{"id":"x:1","text":"two","label":0,"domain":"x"}"#,
            "\n"
        ));
        assert_eq!(
            ingest(f.path()).unwrap_err().to_string(),
            "duplicate id \"x:1\" at line 2"
        );
    }

    #[test]
    fn punctuation_only_text_rejected() {
        let f = write_tmp("{\"text\":\"!!!\",\"label\":0,\"domain\":\"x\"}\n");
        assert!(ingest(f.path()).is_err());
    }

    #[test]
    fn lenient_mode_accounts_for_every_line() {
        let f = write_tmp(concat!(
            r#"{"text":"one","label":0,"domain":"x"}"#,
            "\n\n",
            r#"{"text":"two","label":7,"domain":"x"}"#,
            "\n",
            r#"{"text":"three","label":1,"domain":"y"}"#,
            "\n",
            "garbage\n"
        ));
        let r = ingest_with(f.path(), IngestMode::Lenient, None).unwrap();
        let counted: usize = r.counts.values().map(DomainCounts::total).sum();
        assert_eq!(counted, r.total_lines - r.rejected.len());
        assert_eq!(counted, 2);
        assert_eq!(
            r.rejected.iter().map(|x| x.line).collect::<Vec<_>>(),
            vec![2, 3, 5]
        );
    }

    #[test]
    fn undeclared_domain_rejected() {
        let f = write_tmp("{\"text\":\"a b\",\"label\":0,\"domain\":\"sports\"}\n");
        let allowed: BTreeSet<String> = ["health".to_string()].into();
        assert!(ingest_with(f.path(), IngestMode::Strict, Some(&allowed)).is_err());
    }

    #[test]
    fn label_serde_round_trip() {
        let item = NewsItem {
            id: "i".into(),
            text: "t".into(),
            label: Label::Fake,
            domain: "d".into(),
        };
        let json = serde_json::to_string(&item).unwrap();
        assert!(json.contains("\"label\":1"));
        assert_eq!(serde_json::from_str::<NewsItem>(&json).unwrap(), item);
    }
}
