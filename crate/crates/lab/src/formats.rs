//! Line-oriented text formats.
//!
//! | file       | line                                        |
//! |------------|---------------------------------------------|
//! | run        | `{qid} Q0 {docid} {rank} {score:.6} {tag}`  |
//! | qrels      | `{qid} 0 {docid} {rel}`                     |
//! | triplets   | `{query}\t{pos_docid}\t{neg_docid}`         |
//! | documents  | `{docid}\t{text}`                           |
//! | queries    | `{qid}\t{text}`                             |
//! | candidates | `{qid}\t{docid}[,{docid}...]`               |
//! | epoch log  | `{epoch}\t{loss:.6}\t{metric:.6}\t{stage}`  |
//!
//! Scores and losses are written with six decimals, so `0.1234567` reads
//! back as `0.123457`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use lft_core::eval::{Qrels, RunRecord, Triplet};
use lft_core::train::EpochLog;

use crate::error::{LabError, Result};
use crate::fsutil;

struct Lines<'a> {
    path: &'a Path,
}

impl Lines<'_> {
    fn err(&self, line: usize, content: &str, message: impl Into<String>) -> LabError {
        LabError::Parse {
            path: self.path.to_path_buf(),
            line,
            content: content.to_string(),
            message: message.into(),
        }
    }

    fn each<'t>(&self, text: &'t str, mut f: impl FnMut(usize, &'t str) -> Result<()>) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                return Err(self.err(i + 1, line, "empty line"));
            }
            f(i + 1, line)?;
        }
        Ok(())
    }

    fn fields<'t>(&self, n: usize, line: &'t str, sep: char, no: usize) -> Result<Vec<&'t str>> {
        let f: Vec<&str> = line.split(sep).collect();
        if f.len() != n || f.iter().any(|s| s.is_empty()) {
            return Err(self.err(no, line, format!("expected {n} non-empty fields, found {}", f.len())));
        }
        Ok(f)
    }

    fn num<N: FromStr>(&self, s: &str, what: &str, line: &str, no: usize) -> Result<N> {
        s.parse().map_err(|_| self.err(no, line, format!("invalid {what} `{s}`")))
    }
}

fn check_field(s: &str, what: &str) -> Result<()> {
    if s.is_empty() || s.contains(['\t', '\n', '\r']) {
        return Err(LabError::Config(format!("{what} `{s}` is empty or contains a tab or newline")));
    }
    Ok(())
}

fn check_token(s: &str, what: &str) -> Result<()> {
    check_field(s, what)?;
    if s.contains(' ') || s.contains(',') {
        return Err(LabError::Config(format!("{what} `{s}` contains a space or comma")));
    }
    Ok(())
}

// ------------------------------------------------------------ run

pub fn format_run(records: &[RunRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        check_token(&r.qid, "qid")?;
        check_token(&r.docid, "docid")?;
        check_token(&r.tag, "run tag")?;
        writeln!(out, "{} Q0 {} {} {:.6} {}", r.qid, r.docid, r.rank, r.score, r.tag).unwrap();
    }
    Ok(out)
}

pub fn parse_run(text: &str, path: &Path) -> Result<Vec<RunRecord>> {
    let l = Lines { path };
    let mut out = Vec::new();
    l.each(text, |no, line| {
        let f = l.fields(6, line, ' ', no)?;
        if f[1] != "Q0" {
            return Err(l.err(no, line, "second field must be `Q0`"));
        }
        let rank: usize = l.num(f[3], "rank", line, no)?;
        let score: f64 = l.num(f[4], "score", line, no)?;
        if rank == 0 || !score.is_finite() {
            return Err(l.err(no, line, "rank must be ≥ 1 and score finite"));
        }
        out.push(RunRecord {
            qid: f[0].into(),
            docid: f[2].into(),
            rank,
            score,
            tag: f[5].into(),
        });
        Ok(())
    })?;
    Ok(out)
}

// ------------------------------------------------------------ qrels

pub fn format_qrels(qrels: &Qrels) -> Result<String> {
    let mut out = String::new();
    for (q, d, rel) in qrels.iter() {
        check_token(q, "qid")?;
        check_token(d, "docid")?;
        writeln!(out, "{q} 0 {d} {rel}").unwrap();
    }
    Ok(out)
}

pub fn parse_qrels(text: &str, path: &Path) -> Result<Qrels> {
    let l = Lines { path };
    let mut qrels = Qrels::default();
    l.each(text, |no, line| {
        let f = l.fields(4, line, ' ', no)?;
        if f[1] != "0" {
            return Err(l.err(no, line, "second field must be `0`"));
        }
        let rel: u32 = l.num(f[3], "relevance", line, no)?;
        qrels.insert(f[0], f[2], rel);
        Ok(())
    })?;
    Ok(qrels)
}

// ------------------------------------------------------------ triplets

pub fn format_triplets(triplets: &[Triplet]) -> Result<String> {
    let mut out = String::new();
    for t in triplets {
        check_field(&t.query, "query")?;
        check_token(&t.positive, "docid")?;
        check_token(&t.negative, "docid")?;
        writeln!(out, "{}\t{}\t{}", t.query, t.positive, t.negative).unwrap();
    }
    Ok(out)
}

pub fn parse_triplets(text: &str, path: &Path) -> Result<Vec<Triplet>> {
    let l = Lines { path };
    let mut out = Vec::new();
    l.each(text, |no, line| {
        let f = l.fields(3, line, '\t', no)?;
        out.push(Triplet::new(f[0], f[1], f[2]).map_err(|e| l.err(no, line, e.to_string()))?);
        Ok(())
    })?;
    Ok(out)
}

// ------------------------------------------------------------ id<TAB>text

/// Documents or queries: `(id, text)` pairs.
pub fn format_texts(items: &[(String, String)]) -> Result<String> {
    let mut out = String::new();
    for (id, text) in items {
        check_token(id, "id")?;
        check_field(text, "text")?;
        writeln!(out, "{id}\t{text}").unwrap();
    }
    Ok(out)
}

pub fn parse_texts(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let l = Lines { path };
    let mut out: Vec<(String, String)> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    l.each(text, |no, line| {
        let f = l.fields(2, line, '\t', no)?;
        if !seen.insert(f[0]) {
            return Err(l.err(no, line, format!("duplicate id `{}`", f[0])));
        }
        out.push((f[0].into(), f[1].into()));
        Ok(())
    })?;
    Ok(out)
}

// ------------------------------------------------------------ candidates

pub fn format_candidates(c: &BTreeMap<String, Vec<String>>) -> Result<String> {
    let mut out = String::new();
    for (q, docs) in c {
        check_token(q, "qid")?;
        if docs.is_empty() {
            return Err(LabError::Config(format!("query `{q}` has no candidates")));
        }
        for d in docs {
            check_token(d, "docid")?;
        }
        writeln!(out, "{q}\t{}", docs.join(",")).unwrap();
    }
    Ok(out)
}

pub fn parse_candidates(text: &str, path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let l = Lines { path };
    let mut out = BTreeMap::new();
    l.each(text, |no, line| {
        let f = l.fields(2, line, '\t', no)?;
        let docs: Vec<String> = f[1].split(',').map(String::from).collect();
        if docs.iter().any(String::is_empty) {
            return Err(l.err(no, line, "empty document id"));
        }
        if out.insert(f[0].to_string(), docs).is_some() {
            return Err(l.err(no, line, format!("duplicate qid `{}`", f[0])));
        }
        Ok(())
    })?;
    Ok(out)
}

// ------------------------------------------------------------ epoch log

pub fn format_epoch_log(log: &[EpochLog]) -> Result<String> {
    let mut out = String::new();
    for e in log {
        check_token(&e.stage, "stage")?;
        writeln!(out, "{}\t{:.6}\t{:.6}\t{}", e.epoch, e.train_loss, e.val_metric, e.stage).unwrap();
    }
    Ok(out)
}

pub fn parse_epoch_log(text: &str, path: &Path) -> Result<Vec<EpochLog>> {
    let l = Lines { path };
    let mut out = Vec::new();
    l.each(text, |no, line| {
        let f = l.fields(4, line, '\t', no)?;
        out.push(EpochLog {
            epoch: l.num(f[0], "epoch", line, no)?,
            train_loss: l.num(f[1], "loss", line, no)?,
            val_metric: l.num(f[2], "metric", line, no)?,
            stage: f[3].into(),
        });
        Ok(())
    })?;
    Ok(out)
}

// ------------------------------------------------------------ files

macro_rules! file_io {
    ($read:ident, $write:ident, $parse:ident, $format:ident, $ty:ty, $arg:ty) => {
        pub fn $read(path: &Path) -> Result<$ty> {
            $parse(&fsutil::read_to_string(path)?, path)
        }

        pub fn $write(path: &Path, value: $arg) -> Result<()> {
            fsutil::write_atomic(path, $format(value)?.as_bytes())
        }
    };
}

file_io!(read_run, write_run, parse_run, format_run, Vec<RunRecord>, &[RunRecord]);
file_io!(read_qrels, write_qrels, parse_qrels, format_qrels, Qrels, &Qrels);
file_io!(read_triplets, write_triplets, parse_triplets, format_triplets, Vec<Triplet>, &[Triplet]);
file_io!(read_texts, write_texts, parse_texts, format_texts, Vec<(String, String)>, &[(String, String)]);
file_io!(
    read_candidates,
    write_candidates,
    parse_candidates,
    format_candidates,
    BTreeMap<String, Vec<String>>,
    &BTreeMap<String, Vec<String>>
);
file_io!(read_epoch_log, write_epoch_log, parse_epoch_log, format_epoch_log, Vec<EpochLog>, &[EpochLog]);
