//! Reader for the WikiQA release layout.
//!
//! The corpus ships one TSV per split with a header row:
//! `QuestionID Question DocumentID DocumentTitle SentenceID Sentence Label`.
//! Only the question id, question, sentence and label columns are kept.

use super::{Candidate, QADataset, QAQuestion, Split};
use crate::embedding::tokenize;
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

const COLUMNS: [&str; 4] = ["QuestionID", "Question", "Sentence", "Label"];

pub fn read_wikiqa(r: impl BufRead, split: Split) -> Result<QADataset> {
    let mut lines = r.lines().enumerate();
    let header = match lines.next() {
        Some((_, l)) => l.map_err(|e| Error::Data(format!("line 1: {e}")))?,
        None => return Err(Error::Data("empty WikiQA file".into())),
    };
    let names: Vec<&str> = header.trim_end_matches('\r').split('\t').collect();
    let mut col = [0usize; 4];
    for (slot, want) in col.iter_mut().zip(COLUMNS) {
        *slot = names
            .iter()
            .position(|n| *n == want)
            .ok_or_else(|| Error::Data(format!("WikiQA header lacks column {want}")))?;
    }
    let width = names.len();
    let mut questions: Vec<QAQuestion> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (n, line) in lines {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::Data(format!("line {lineno}: {e}")))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != width {
            return Err(Error::Data(format!(
                "line {lineno}: expected {width} fields, found {}",
                f.len()
            )));
        }
        let label = match f[col[3]].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::Data(format!("line {lineno}: unknown label {other:?}"))),
        };
        let tokens = tokenize(f[col[2]]);
        if tokens.is_empty() {
            continue;
        }
        let cand = Candidate {
            text: f[col[2]].to_string(),
            tokens,
            label,
        };
        let qid = f[col[0]];
        match index.get(qid) {
            Some(&i) => questions[i].candidates.push(cand),
            None => {
                index.insert(qid.to_string(), questions.len());
                questions.push(QAQuestion {
                    id: qid.to_string(),
                    text: f[col[1]].to_string(),
                    tokens: tokenize(f[col[1]]),
                    candidates: vec![cand],
                });
            }
        }
    }
    Ok(QADataset::new(split, questions))
}

pub fn load_wikiqa(path: &Path, split: Split) -> Result<QADataset> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_wikiqa(std::io::BufReader::new(f), split)
}

/// `WikiQA-{train,dev,test}.tsv` inside `dir`.
pub fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("WikiQA-{split}.tsv"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converts_native_rows() {
        let text = "QuestionID\tQuestion\tDocumentID\tDocumentTitle\tSentenceID\tSentence\tLabel\n\
                    Q1\thow are glacier caves formed?\tD1\tGlacier cave\tD1-0\tA partly submerged glacier cave.\t0\n\
                    Q1\thow are glacier caves formed?\tD1\tGlacier cave\tD1-1\tA glacier cave is a cave formed within the ice.\t1\n\
                    Q2\twho is x\tD2\tX\tD2-0\tunrelated\t0\n";
        let mut ds = read_wikiqa(text.as_bytes(), Split::Train).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.questions[0].candidates.len(), 2);
        assert_eq!(ds.retain_rankable(), 1);
        let mut buf = Vec::new();
        ds.write_tsv(&mut buf).unwrap();
        let back = QADataset::read_tsv(&buf[..], Split::Train).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn missing_column_is_rejected() {
        assert!(read_wikiqa("QuestionID\tQuestion\n".as_bytes(), Split::Dev).is_err());
    }
}
