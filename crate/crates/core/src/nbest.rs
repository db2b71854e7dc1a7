//! N-best candidate lists and their on-disk record format.
//!
//! Files are line-delimited, tab-separated, one candidate per line:
//!
//! ```text
//! utterance-id <TAB> rank <TAB> space-separated token ids <TAB> s_infer
//! ```
//!
//! Ranks are 1-based in first-pass score order. Floats are printed with
//! Rust's shortest round-trip formatting, so files are byte-stable across
//! runs and parse back to the exact value.

use std::io::{BufRead, Write};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Content tokens, without BOS/EOS.
    pub tokens: Vec<usize>,
    /// Length-normalized log probability from the first pass.
    pub s_infer: f64,
    /// True when the hypothesis hit the generation cap without emitting EOS.
    pub forced: bool,
}

#[derive(Debug, Clone)]
pub struct NBestList {
    pub utt_id: String,
    /// Candidates sorted by s_infer descending; all token sequences distinct.
    pub hyps: Vec<Hypothesis>,
}

impl NBestList {
    pub fn new(utt_id: String, hyps: Vec<Hypothesis>) -> Result<Self> {
        let list = NBestList { utt_id, hyps };
        list.validate()?;
        Ok(list)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hyps.len() < 2 {
            return Err(CoreError::InvalidArg(format!(
                "n-best list {} needs at least 2 candidates, got {}",
                self.utt_id,
                self.hyps.len()
            )));
        }
        for w in self.hyps.windows(2) {
            if w[0].s_infer < w[1].s_infer {
                return Err(CoreError::InvalidArg(format!(
                    "n-best list {} not sorted by s_infer",
                    self.utt_id
                )));
            }
        }
        for i in 0..self.hyps.len() {
            for j in i + 1..self.hyps.len() {
                if self.hyps[i].tokens == self.hyps[j].tokens {
                    return Err(CoreError::InvalidArg(format!(
                        "n-best list {} has duplicate candidates",
                        self.utt_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.hyps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hyps.is_empty()
    }

    pub fn top1(&self) -> &Hypothesis {
        &self.hyps[0]
    }
}

pub fn write_nbest<W: Write>(w: &mut W, lists: &[NBestList]) -> Result<()> {
    for list in lists {
        for (rank, hyp) in list.hyps.iter().enumerate() {
            let toks: Vec<String> = hyp.tokens.iter().map(|t| t.to_string()).collect();
            writeln!(w, "{}\t{}\t{}\t{}", list.utt_id, rank + 1, toks.join(" "), hyp.s_infer)?;
        }
    }
    Ok(())
}

pub fn nbest_to_string(lists: &[NBestList]) -> String {
    let mut buf = Vec::new();
    write_nbest(&mut buf, lists).expect("write to vec");
    String::from_utf8(buf).expect("utf8")
}

pub fn read_nbest<R: BufRead>(r: R) -> Result<Vec<NBestList>> {
    let mut lists: Vec<NBestList> = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(CoreError::Format(format!(
                "n-best line {}: expected 4 tab-separated fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let utt_id = fields[0].to_string();
        let rank: usize = fields[1]
            .parse()
            .map_err(|_| CoreError::Format(format!("n-best line {}: bad rank", lineno + 1)))?;
        let tokens: Vec<usize> = if fields[2].is_empty() {
            Vec::new()
        } else {
            fields[2]
                .split(' ')
                .map(|t| {
                    t.parse().map_err(|_| {
                        CoreError::Format(format!("n-best line {}: bad token id", lineno + 1))
                    })
                })
                .collect::<Result<_>>()?
        };
        let s_infer: f64 = fields[3]
            .parse()
            .map_err(|_| CoreError::Format(format!("n-best line {}: bad score", lineno + 1)))?;
        let hyp = Hypothesis { tokens, s_infer, forced: false };
        match lists.last_mut() {
            Some(last) if last.utt_id == utt_id => {
                if rank != last.hyps.len() + 1 {
                    return Err(CoreError::Format(format!(
                        "n-best line {}: rank {} out of order",
                        lineno + 1,
                        rank
                    )));
                }
                last.hyps.push(hyp);
            }
            _ => {
                if rank != 1 {
                    return Err(CoreError::Format(format!(
                        "n-best line {}: new utterance must start at rank 1",
                        lineno + 1
                    )));
                }
                lists.push(NBestList { utt_id, hyps: vec![hyp] });
            }
        }
    }
    for list in &lists {
        list.validate()?;
    }
    Ok(lists)
}

pub fn write_nbest_file(path: &std::path::Path, lists: &[NBestList]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_nbest(&mut f, lists)
}

pub fn read_nbest_file(path: &std::path::Path) -> Result<Vec<NBestList>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_nbest(f)
}
