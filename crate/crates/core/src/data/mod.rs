//! Question/answer datasets in the four-column TSV format, vocabulary
//! construction and model checkpoints.
//!
//! One row per candidate:
//!
//! ```text
//! question_id <TAB> question_text <TAB> answer_text <TAB> label
//! ```
//!
//! Rows sharing a question id form that question's candidate pool, in file
//! order. Labels are `0` or `1`.

pub mod checkpoint;
pub mod wikiqa;

use crate::embedding::{tokenize, Vocabulary};
use crate::error::{Error, Result};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub text: String,
    pub tokens: Vec<String>,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QAQuestion {
    pub id: String,
    pub text: String,
    pub tokens: Vec<String>,
    pub candidates: Vec<Candidate>,
}

impl QAQuestion {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.candidates.iter().enumerate().filter(|(_, c)| c.label == 1).map(|(i, _)| i)
    }

    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        self.candidates.iter().enumerate().filter(|(_, c)| c.label == 0).map(|(i, _)| i)
    }

    pub fn has_positive(&self) -> bool {
        self.candidates.iter().any(|c| c.label == 1)
    }

    pub fn has_negative(&self) -> bool {
        self.candidates.iter().any(|c| c.label == 0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QADataset {
    pub split: Split,
    pub questions: Vec<QAQuestion>,
}

impl QADataset {
    pub fn new(split: Split, questions: Vec<QAQuestion>) -> Self {
        Self { split, questions }
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn candidate_count(&self) -> usize {
        self.questions.iter().map(|q| q.candidates.len()).sum()
    }

    /// Drops questions without a positive candidate; they cannot be ranked.
    pub fn retain_rankable(&mut self) -> usize {
        let before = self.questions.len();
        self.questions.retain(QAQuestion::has_positive);
        before - self.questions.len()
    }

    /// Parses TSV rows. Blank lines are ignored; question ids are grouped
    /// in order of first appearance.
    pub fn read_tsv(r: impl BufRead, split: Split) -> Result<Self> {
        let mut questions: Vec<QAQuestion> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut rows = 0usize;
        for (n, line) in r.lines().enumerate() {
            let lineno = n + 1;
            let line = line.map_err(|e| Error::Data(format!("line {lineno}: {e}")))?;
            let line = line.strip_suffix('\r').unwrap_or(&line);
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Data(format!(
                    "line {lineno}: expected 4 tab-separated fields, found {}",
                    fields.len()
                )));
            }
            let (qid, qtext, atext, label) = (fields[0].trim(), fields[1], fields[2], fields[3].trim());
            if qid.is_empty() {
                return Err(Error::Data(format!("line {lineno}: empty question id")));
            }
            let label = match label {
                "0" => 0,
                "1" => 1,
                other => return Err(Error::Data(format!("line {lineno}: unknown label {other:?}"))),
            };
            let atokens = tokenize(atext);
            if atokens.is_empty() {
                return Err(Error::Data(format!("line {lineno}: answer has no tokens")));
            }
            let cand = Candidate {
                text: atext.to_string(),
                tokens: atokens,
                label,
            };
            match index.get(qid) {
                Some(&i) => {
                    if questions[i].text != qtext {
                        return Err(Error::Data(format!(
                            "line {lineno}: question {qid} appears with different text"
                        )));
                    }
                    questions[i].candidates.push(cand);
                }
                None => {
                    let qtokens = tokenize(qtext);
                    if qtokens.is_empty() {
                        return Err(Error::Data(format!("line {lineno}: question has no tokens")));
                    }
                    index.insert(qid.to_string(), questions.len());
                    questions.push(QAQuestion {
                        id: qid.to_string(),
                        text: qtext.to_string(),
                        tokens: qtokens,
                        candidates: vec![cand],
                    });
                }
            }
            rows += 1;
        }
        if rows == 0 {
            return Err(Error::Data("dataset file holds no rows".into()));
        }
        Ok(Self { split, questions })
    }

    pub fn load_tsv(path: &Path, split: Split) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_tsv(std::io::BufReader::new(f), split).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn write_tsv(&self, mut w: impl Write) -> std::io::Result<()> {
        for q in &self.questions {
            for c in &q.candidates {
                writeln!(w, "{}\t{}\t{}\t{}", q.id, q.text, c.text, c.label)?;
            }
        }
        Ok(())
    }

    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_tsv(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Vocabulary over the training text. Each question's tokens count once,
/// however many candidates it has. Ids follow descending frequency, ties
/// broken lexicographically.
pub fn build_vocab(dataset: &QADataset, min_count: usize) -> Result<Vocabulary> {
    if min_count == 0 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for q in &dataset.questions {
        let sentences = std::iter::once(&q.tokens).chain(q.candidates.iter().map(|c| &c.tokens));
        for tok in sentences.flatten() {
            *counts.entry(tok.as_str()).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Data("training text is empty".into()));
    }
    let mut entries: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    // BTreeMap order is lexicographic and the sort is stable
    entries.sort_by_key(|e| std::cmp::Reverse(e.1));
    Vocabulary::from_tokens(entries.into_iter().map(|(t, _)| t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::UNK_ID;

    const SMALL: &str = "q1\twho wrote it?\tshakespeare wrote it\t1\n\
                         q1\twho wrote it?\tthe sky is blue\t0\n\
                         q1\twho wrote it?\tnobody\t0\n";

    #[test]
    fn groups_one_question() {
        let ds = QADataset::read_tsv(SMALL.as_bytes(), Split::Train).unwrap();
        assert_eq!(ds.len(), 1);
        let q = &ds.questions[0];
        assert_eq!(q.candidates.iter().map(|c| c.label).collect::<Vec<_>>(), vec![1, 0, 0]);
        assert_eq!(q.tokens, vec!["who", "wrote", "it", "?"]);
    }

    #[test]
    fn interleaved_ids_keep_first_appearance_order() {
        let text = "b\tx\ty\t1\na\tz\tw\t0\nb\tx\tv\t0\n";
        let ds = QADataset::read_tsv(text.as_bytes(), Split::Dev).unwrap();
        assert_eq!(ds.questions.iter().map(|q| q.id.as_str()).collect::<Vec<_>>(), vec!["b", "a"]);
        assert_eq!(ds.questions[0].candidates.len(), 2);
    }

    #[test]
    fn malformed_rows_name_the_line() {
        let err = QADataset::read_tsv("q\ta\tb\t1\nq\ta\tb\n".as_bytes(), Split::Train).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = QADataset::read_tsv("q\ta\tb\tyes\n".as_bytes(), Split::Train).unwrap_err();
        assert!(err.to_string().contains("unknown label"), "{err}");
        assert!(QADataset::read_tsv("".as_bytes(), Split::Train).is_err());
        assert!(QADataset::read_tsv("\n\n".as_bytes(), Split::Train).is_err());
        assert!(QADataset::read_tsv("q\ta\tb\t1\nq\tc\td\t0\n".as_bytes(), Split::Train).is_err());
    }

    #[test]
    fn tsv_round_trip() {
        let ds = QADataset::read_tsv(SMALL.as_bytes(), Split::Test).unwrap();
        let mut buf = Vec::new();
        ds.write_tsv(&mut buf).unwrap();
        assert_eq!(buf, SMALL.as_bytes());
        assert_eq!(QADataset::read_tsv(&buf[..], Split::Test).unwrap(), ds);
    }

    #[test]
    fn filtering_keeps_every_question_with_a_positive() {
        let text = "a\tx\ty\t0\nb\tx\ty\t1\nb\tx\tz\t0\nc\tw\ty\t1\n";
        let mut ds = QADataset::read_tsv(text.as_bytes(), Split::Dev).unwrap();
        assert_eq!(ds.retain_rankable(), 1);
        assert_eq!(ds.questions.iter().map(|q| q.id.as_str()).collect::<Vec<_>>(), vec!["b", "c"]);
    }

    #[test]
    fn vocab_frequency_then_lexicographic() {
        let ds = QADataset::new(
            Split::Train,
            vec![QAQuestion {
                id: "q".into(),
                text: "a a b".into(),
                tokens: tokenize("a a b"),
                candidates: vec![],
            }],
        );
        let v = build_vocab(&ds, 1).unwrap();
        assert_eq!((v.id_of("a"), v.id_of("b")), (2, 3));
        let v2 = build_vocab(&ds, 2).unwrap();
        assert_eq!(v2.id_of("a"), 2);
        assert_eq!(v2.id_of("b"), UNK_ID);
        assert_eq!(build_vocab(&ds, 1).unwrap(), v);

        let tie = QADataset::new(
            Split::Train,
            vec![QAQuestion {
                id: "q".into(),
                text: String::new(),
                tokens: tokenize("zeta alpha mid"),
                candidates: vec![],
            }],
        );
        assert_eq!(build_vocab(&tie, 1).unwrap().tokens(), &["alpha", "mid", "zeta"]);
        assert!(build_vocab(&QADataset::new(Split::Train, vec![]), 1).is_err());
    }

    #[test]
    fn question_tokens_count_once_per_question() {
        let text = "q\tx\ty\t1\nq\tx\tz\t0\nq\tx\tw\t0\n";
        let ds = QADataset::read_tsv(text.as_bytes(), Split::Train).unwrap();
        let v = build_vocab(&ds, 2).unwrap();
        assert!(v.tokens().is_empty());
    }
}
