//! File formats.
//!
//! | data | format |
//! |------|--------|
//! | STS pairs | TSV `score<TAB>sentence_a<TAB>sentence_b` |
//! | transfer split | TSV `label<TAB>text` |
//! | NLI triplets | CSV with header `sent0,sent1,hard_neg` |
//! | dictionary | TSV `word<TAB>definition` |
//! | sentences | one per line |
//! | demonstration set | JSON array of `{"sentence", "word", "source"}` |
//! | embeddings | `SEMB`, `u32` dim, `u32` count, then row-major `f32`, all little-endian |
//!
//! Lines that are completely empty are ignored in the line-based formats;
//! any other malformed line is an error naming its 1-based line number.

use std::io::{Read, Write};

use thiserror::Error;

use crate::icl::DemonstrationSet;
use crate::types::{Demonstration, LabeledExample, NliTriplet, ScoredSentencePair};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"SEMB";
pub const EMBEDDING_HEADER_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("missing CSV column {0}")]
    MissingColumn(&'static str),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.is_empty())
}

fn line_err(line: usize, reason: impl Into<String>) -> FormatError {
    FormatError::Line {
        line,
        reason: reason.into(),
    }
}

pub fn parse_sts_tsv(text: &str) -> Result<Vec<ScoredSentencePair>, FormatError> {
    lines(text)
        .map(|(n, l)| {
            let mut parts = l.splitn(3, '\t');
            let (Some(score), Some(a), Some(b)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(line_err(n, "expected score<TAB>sentence_a<TAB>sentence_b"));
            };
            let score: f64 = score
                .trim()
                .parse()
                .map_err(|_| line_err(n, format!("bad score {score:?}")))?;
            Ok(ScoredSentencePair::new(a, b, score))
        })
        .collect()
}

pub fn write_sts_tsv(pairs: &[ScoredSentencePair]) -> String {
    pairs
        .iter()
        .map(|p| format!("{}\t{}\t{}\n", p.gold_score, p.sentence_a, p.sentence_b))
        .collect()
}

pub fn parse_labeled_tsv(text: &str) -> Result<Vec<LabeledExample>, FormatError> {
    lines(text)
        .map(|(n, l)| {
            let (label, text) = l
                .split_once('\t')
                .ok_or_else(|| line_err(n, "expected label<TAB>text"))?;
            let label = label
                .trim()
                .parse()
                .map_err(|_| line_err(n, format!("bad label {label:?}")))?;
            Ok(LabeledExample {
                text: text.trim().to_string(),
                label,
            })
        })
        .collect()
}

pub fn parse_dictionary_tsv(text: &str) -> Result<Vec<(String, String)>, FormatError> {
    lines(text)
        .map(|(n, l)| {
            let (word, def) = l
                .split_once('\t')
                .ok_or_else(|| line_err(n, "expected word<TAB>definition"))?;
            Ok((word.trim().to_string(), def.trim().to_string()))
        })
        .collect()
}

/// Non-blank lines, trimmed.
pub fn parse_sentences(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

pub fn parse_nli_csv<R: Read>(reader: R) -> Result<Vec<NliTriplet>, FormatError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| FormatError::Invalid(e.to_string()))?
        .clone();
    let col = |name: &'static str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or(FormatError::MissingColumn(name))
    };
    let (a, p, n) = (col("sent0")?, col("sent1")?, col("hard_neg")?);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| line_err(i + 2, e.to_string()))?;
        let field = |k: usize| rec.get(k).unwrap_or("");
        out.push(NliTriplet::new(field(a), field(p), field(n)));
    }
    Ok(out)
}

pub fn write_nli_csv(triplets: &[NliTriplet]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["sent0", "sent1", "hard_neg"]).expect("in-memory write");
    for t in triplets {
        w.write_record([&t.anchor, &t.positive, &t.hard_negative])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

pub fn parse_demo_set(text: &str) -> Result<Vec<Demonstration>, FormatError> {
    serde_json::from_str(text).map_err(|e| FormatError::Invalid(e.to_string()))
}

pub fn write_demo_set(set: &DemonstrationSet) -> String {
    serde_json::to_string_pretty(set).expect("demonstrations serialize")
}

pub fn write_embeddings<W: Write>(mut w: W, dim: usize, rows: &[Vec<f32>]) -> Result<(), FormatError> {
    if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
        return Err(FormatError::Invalid(format!("row {bad} does not have dimension {dim}")));
    }
    let (dim32, count32) = (
        u32::try_from(dim).map_err(|_| FormatError::Invalid("dimension too large".into()))?,
        u32::try_from(rows.len()).map_err(|_| FormatError::Invalid("too many rows".into()))?,
    );
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&dim32.to_le_bytes())?;
    w.write_all(&count32.to_le_bytes())?;
    for row in rows {
        for v in row {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_embeddings(bytes: &[u8]) -> Result<(usize, Vec<Vec<f32>>), FormatError> {
    if bytes.len() < EMBEDDING_HEADER_LEN || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(FormatError::Invalid("not an embedding file".into()));
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload = &bytes[EMBEDDING_HEADER_LEN..];
    if payload.len() != dim * count * 4 {
        return Err(FormatError::Invalid(format!(
            "expected {} payload bytes, found {}",
            dim * count * 4,
            payload.len()
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let rows = if dim == 0 {
        vec![Vec::new(); count]
    } else {
        values.chunks(dim).map(<[f32]>::to_vec).collect()
    };
    Ok((dim, rows))
}
