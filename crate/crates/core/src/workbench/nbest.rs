//! Tab-separated n-best lists.
//!
//! One header line, then one record per hypothesis:
//! `utt_id rank text alignment_length transducer source_lm external_lm score`.
//! Rank 1 is the system output for the utterance.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const NBEST_HEADER: &str = "utt_id\trank\ttext\talignment_length\ttransducer\tsource_lm\texternal_lm\tscore";

#[derive(Debug, Clone, PartialEq)]
pub struct NBestRecord {
    pub utt_id: String,
    /// 1-based.
    pub rank: usize,
    pub text: String,
    pub alignment_length: usize,
    pub transducer: f64,
    pub source_lm: f64,
    pub external_lm: f64,
    /// Ranking score under the weights that produced the list.
    pub score: f64,
}

/// `{:?}` on `f64` prints the shortest round-tripping form.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_nbest(path: &Path, records: &[NBestRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{NBEST_HEADER}")?;
    for r in records {
        if r.utt_id.contains(['\t', '\n']) || r.text.contains(['\t', '\n']) {
            return Err(Error::Ingest(format!("n-best record for {:?} contains a tab or newline", r.utt_id)));
        }
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.utt_id,
            r.rank,
            r.text,
            r.alignment_length,
            fmt_f64(r.transducer),
            fmt_f64(r.source_lm),
            fmt_f64(r.external_lm),
            fmt_f64(r.score)
        )?;
    }
    w.flush()?;
    Ok(())
}

fn parse_f64(field: &str, what: &str, line: usize) -> Result<f64> {
    match field {
        "-inf" => Ok(f64::NEG_INFINITY),
        "inf" => Ok(f64::INFINITY),
        _ => field.parse().map_err(|_| Error::Ingest(format!("line {line}: bad {what} {field:?}"))),
    }
}

pub fn parse_nbest(text: &str) -> Result<Vec<NBestRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == NBEST_HEADER => {}
        _ => return Err(Error::Ingest("n-best file lacks the expected header".into())),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let n = i + 1;
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 8 {
                return Err(Error::Ingest(format!("line {n}: expected 8 fields, got {}", f.len())));
            }
            let int = |s: &str, what: &str| s.parse::<usize>().map_err(|_| Error::Ingest(format!("line {n}: bad {what} {s:?}")));
            Ok(NBestRecord {
                utt_id: f[0].to_string(),
                rank: int(f[1], "rank")?,
                text: f[2].to_string(),
                alignment_length: int(f[3], "alignment length")?,
                transducer: parse_f64(f[4], "transducer score", n)?,
                source_lm: parse_f64(f[5], "source LM score", n)?,
                external_lm: parse_f64(f[6], "external LM score", n)?,
                score: parse_f64(f[7], "score", n)?,
            })
        })
        .collect()
}

pub fn read_nbest(path: &Path) -> Result<Vec<NBestRecord>> {
    parse_nbest(&fs::read_to_string(path)?).map_err(|e| match e {
        Error::Ingest(m) => Error::Ingest(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Rank-1 text per utterance, in file order.
pub fn one_best(records: &[NBestRecord]) -> Vec<(&str, &str)> {
    records.iter().filter(|r| r.rank == 1).map(|r| (r.utt_id.as_str(), r.text.as_str())).collect()
}
