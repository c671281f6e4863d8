//! FASTA reading and writing.
//!
//! Header tokens of the form `family=a,b` and `fitness=1.5` round-trip the
//! corpus labels; everything else after `>` up to the first space is the id.

use std::fmt::Write as _;
use std::path::Path;

use super::corpus::{Corpus, Sequence};
use super::vocab;
use crate::error::{Error, Result};

pub fn parse_fasta(text: &str, max_len: usize) -> Result<Corpus> {
    let mut sequences = Vec::new();
    let mut current: Option<(String, String)> = None;
    for line in text.lines() {
        let line = line.trim_end();
        if let Some(header) = line.strip_prefix('>') {
            if let Some(rec) = current.take() {
                sequences.push(rec);
            }
            current = Some((header.trim().to_string(), String::new()));
        } else if !line.trim().is_empty() {
            match current.as_mut() {
                Some((_, body)) => body.push_str(line.trim()),
                None => {
                    return Err(Error::InvalidInput(
                        "FASTA residues before the first header".into(),
                    ))
                }
            }
        }
    }
    if let Some(rec) = current.take() {
        sequences.push(rec);
    }
    if sequences.is_empty() {
        return Err(Error::InvalidInput("FASTA input has no records".into()));
    }

    let mut truncated = 0usize;
    let mut unknown = 0usize;
    let records = sequences
        .into_iter()
        .enumerate()
        .map(|(i, (header, body))| {
            let (mut tokens, unk) = vocab::encode(&body);
            unknown += unk;
            if tokens.len() > max_len {
                tokens.truncate(max_len);
                truncated += 1;
            }
            let mut fields = header.split_whitespace();
            let id = fields
                .next()
                .map(str::to_string)
                .unwrap_or_else(|| format!("seq_{i}"));
            let mut seq = Sequence::from_tokens(id, tokens);
            for field in fields {
                if let Some(f) = field.strip_prefix("family=") {
                    seq.families = f
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(str::to_string)
                        .collect();
                } else if let Some(f) = field.strip_prefix("fitness=") {
                    seq.fitness = f.parse().ok();
                }
            }
            seq
        })
        .collect();
    if unknown > 0 {
        log::warn!("{unknown} unknown residue characters mapped to UNK");
    }
    if truncated > 0 {
        log::info!("truncated {truncated} sequences to {max_len} residues");
    }
    Ok(Corpus { sequences: records })
}

pub fn read_fasta(path: &Path, max_len: usize) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|e| {
        Error::InvalidInput(format!(
            "{} is not valid UTF-8 (byte {})",
            path.display(),
            e.utf8_error().valid_up_to()
        ))
    })?;
    if text.trim().is_empty() {
        return Err(Error::InvalidInput(format!("{} is empty", path.display())));
    }
    parse_fasta(&text, max_len)
}

pub fn format_fasta(corpus: &Corpus) -> String {
    let mut out = String::new();
    for s in &corpus.sequences {
        out.push('>');
        out.push_str(&s.id);
        if !s.families.is_empty() {
            let _ = write!(out, " family={}", s.families.join(","));
        }
        if let Some(f) = s.fitness {
            let _ = write!(out, " fitness={f}");
        }
        out.push('\n');
        out.push_str(&s.residues());
        out.push('\n');
    }
    out
}

pub fn write_fasta(corpus: &Corpus, path: &Path) -> Result<()> {
    std::fs::write(path, format_fasta(corpus)).map_err(|e| Error::io(path, e))
}
