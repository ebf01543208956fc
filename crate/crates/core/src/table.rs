//! Table model, closed template vocabulary, and the tokenizer that turns a
//! proxy-task example into a segment-tagged token stream.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TpeError};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";
pub const ROW_SEP: &str = "<row>";
pub const PAD: &str = "<pad>";
pub const STAR: &str = "★";

/// Every fixed word emitted by the task templates.
pub const TEMPLATE_WORDS: &[&str] = &[
    "What", "is", "are", "the", "value", "columns", "to", "right", "left", "of", "and", "rows", "below",
    "above", "stars", "in", "same", "row", "column", "as", "number", "Answer:", "?",
];

const SYMBOLS: &[&str] = &["-", ",", "[", "]"];

/// Rectangular grid of non-empty cell strings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    cells: Vec<Vec<String>>,
}

impl Table {
    pub fn new(cells: Vec<Vec<String>>) -> Result<Self> {
        let cols = cells.first().map_or(0, Vec::len);
        for (r, row) in cells.iter().enumerate() {
            if row.len() != cols {
                return Err(TpeError::NotRectangular { row: r, expected: cols, found: row.len() });
            }
            if let Some(c) = row.iter().position(String::is_empty) {
                return Err(TpeError::EmptyCell { row: r, col: c });
            }
        }
        Ok(Table { cells })
    }

    pub fn rows(&self) -> usize {
        self.cells.len()
    }

    pub fn cols(&self) -> usize {
        self.cells.first().map_or(0, Vec::len)
    }

    pub fn cell(&self, row: usize, col: usize) -> &str {
        &self.cells[row][col]
    }

    pub fn cells(&self) -> &[Vec<String>] {
        &self.cells
    }
}

/// Token label: free text, or a token belonging to cell `(row, col)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Segment {
    Text,
    Cell { row: usize, col: usize },
}

impl Segment {
    pub fn is_text(self) -> bool {
        matches!(self, Segment::Text)
    }
}

/// Closed vocabulary; ids are assigned in sorted string order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn build() -> Self {
        let mut all: Vec<String> = [BOS, EOS, SEP, ROW_SEP, PAD, STAR]
            .iter()
            .chain(SYMBOLS)
            .chain(TEMPLATE_WORDS)
            .map(|s| s.to_string())
            .chain((0..10).map(|d| d.to_string()))
            .collect();
        all.sort();
        all.dedup();
        let ids = all.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Vocab { tokens: all, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn encode(&self, token: &str) -> Result<usize> {
        self.ids.get(token).copied().ok_or_else(|| TpeError::UnknownToken(token.to_string()))
    }

    pub fn decode(&self, id: usize) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or(TpeError::UnknownId(id))
    }

    pub fn bos(&self) -> usize {
        self.ids[BOS]
    }

    pub fn eos(&self) -> usize {
        self.ids[EOS]
    }

    pub fn sep(&self) -> usize {
        self.ids[SEP]
    }

    pub fn row_sep(&self) -> usize {
        self.ids[ROW_SEP]
    }

    pub fn pad(&self) -> usize {
        self.ids[PAD]
    }

    /// Whitespace-separated words; a word missing from the vocabulary is split
    /// into single characters, each of which must be known.
    pub fn tokenize_text(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            if let Some(&id) = self.ids.get(word) {
                out.push(id);
                continue;
            }
            for ch in word.chars() {
                let mut buf = [0u8; 4];
                let s: &str = ch.encode_utf8(&mut buf);
                out.push(self.ids.get(s).copied().ok_or_else(|| TpeError::UnknownToken(word.to_string()))?);
            }
        }
        Ok(out)
    }

    /// Concatenates token strings with no spacing (answers are character-level).
    pub fn detokenize_compact(&self, ids: &[usize]) -> Result<String> {
        ids.iter().map(|&i| self.decode(i)).collect()
    }

    /// Cell text: one token per digit, `★` as its own token.
    pub fn tokenize_cell(&self, cell: &str) -> Result<Vec<usize>> {
        cell.chars()
            .map(|ch| match ch {
                '0'..='9' => Ok(self.ids[ch.to_string().as_str()]),
                '★' => Ok(self.ids[STAR]),
                _ => Err(TpeError::UnknownToken(ch.to_string())),
            })
            .collect()
    }
}

/// Flat token sequence in which every token knows whether it is text or part of a cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenStream {
    pub ids: Vec<usize>,
    pub segments: Vec<Segment>,
    /// Index of the first answer token (`len()` when the stream is a bare prompt).
    pub answer_start: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The prompt part: everything before the answer.
    pub fn prompt(&self) -> TokenStream {
        TokenStream {
            ids: self.ids[..self.answer_start].to_vec(),
            segments: self.segments[..self.answer_start].to_vec(),
            answer_start: self.answer_start,
            rows: self.rows,
            cols: self.cols,
        }
    }

    /// Appends a generated (text) token.
    pub fn push_text(&mut self, id: usize) {
        self.ids.push(id);
        self.segments.push(Segment::Text);
    }

    pub fn cell_token_count(&self) -> usize {
        self.segments.iter().filter(|s| !s.is_text()).count()
    }

    /// Checks the structural invariants of a stream.
    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.segments.len() {
            return Err(TpeError::MalformedSegments(format!(
                "{} ids but {} segments",
                self.ids.len(),
                self.segments.len()
            )));
        }
        if self.answer_start > self.ids.len() {
            return Err(TpeError::MalformedSegments("answer_start past the end".into()));
        }
        if self.segments[self.answer_start..].iter().any(|s| !s.is_text()) {
            return Err(TpeError::MalformedSegments("cell token inside the answer".into()));
        }
        let mut finished = std::collections::BTreeSet::new();
        let mut current: Option<(usize, usize)> = None;
        for s in &self.segments {
            match *s {
                Segment::Cell { row, col } => {
                    if row >= self.rows || col >= self.cols {
                        return Err(TpeError::MalformedSegments(format!("cell ({row}, {col}) outside table")));
                    }
                    if current != Some((row, col)) {
                        if let Some(prev) = current {
                            finished.insert(prev);
                        }
                        if finished.contains(&(row, col)) {
                            return Err(TpeError::MalformedSegments(format!(
                                "tokens of cell ({row}, {col}) are not contiguous"
                            )));
                        }
                        current = Some((row, col));
                    }
                }
                Segment::Text => {
                    if let Some(prev) = current.take() {
                        finished.insert(prev);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Serializes `prefix + table + suffix + answer` into a tagged stream.
///
/// Layout: `<bos>`, prefix words, then each cell in row-major order as its
/// characters followed by a `<sep>` terminator (all tagged with the cell),
/// a `<row>` text token after every row, then the suffix words, the answer
/// characters and `<eos>`.
pub fn tokenize_example(prefix: &str, table: &Table, suffix: &str, answer: &str, vocab: &Vocab) -> Result<TokenStream> {
    let mut ids = vec![vocab.bos()];
    let mut segments = vec![Segment::Text];
    for id in vocab.tokenize_text(prefix)? {
        ids.push(id);
        segments.push(Segment::Text);
    }
    for (r, row) in table.cells().iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let seg = Segment::Cell { row: r, col: c };
            for id in vocab.tokenize_cell(cell)? {
                ids.push(id);
                segments.push(seg);
            }
            ids.push(vocab.sep());
            segments.push(seg);
        }
        ids.push(vocab.row_sep());
        segments.push(Segment::Text);
    }
    for id in vocab.tokenize_text(suffix)? {
        ids.push(id);
        segments.push(Segment::Text);
    }
    let answer_start = ids.len();
    for id in vocab.tokenize_text(answer)? {
        ids.push(id);
        segments.push(Segment::Text);
    }
    ids.push(vocab.eos());
    segments.push(Segment::Text);
    Ok(TokenStream { ids, segments, answer_start, rows: table.rows(), cols: table.cols() })
}

/// Regroups the cell-tagged tokens of a stream into a table (terminators dropped).
pub fn reconstruct_table(stream: &TokenStream, vocab: &Vocab) -> Result<Table> {
    let mut cells = vec![vec![String::new(); stream.cols]; stream.rows];
    for (&id, seg) in stream.ids.iter().zip(&stream.segments) {
        if let Segment::Cell { row, col } = *seg {
            if id != vocab.sep() {
                cells[row][col].push_str(vocab.decode(id)?);
            }
        }
    }
    Table::new(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(cells: &[&[&str]]) -> Table {
        Table::new(cells.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect()).unwrap()
    }

    #[test]
    fn vocab_is_deterministic_small_and_bijective() {
        let a = Vocab::build();
        assert_eq!(a, Vocab::build());
        assert!(a.len() < 100);
        for id in 0..a.len() {
            assert_eq!(a.encode(a.decode(id).unwrap()).unwrap(), id);
        }
        assert_eq!(a.decode(a.encode("★").unwrap()).unwrap(), "★");
        assert!(matches!(a.encode("banana"), Err(TpeError::UnknownToken(_))));
        assert!(a.tokenize_text("What is banana ?").is_err());
    }

    #[test]
    fn cells_tokenize_digit_by_digit() {
        let v = Vocab::build();
        assert_eq!(v.tokenize_cell("5").unwrap().len(), 1);
        assert_eq!(v.tokenize_cell("9★").unwrap(), vec![v.encode("9").unwrap(), v.encode("★").unwrap()]);
        let ids = v.tokenize_cell("360").unwrap();
        assert_eq!(ids, ["3", "6", "0"].map(|s| v.encode(s).unwrap()));
        assert!(v.tokenize_cell("1a").is_err());
    }

    #[test]
    fn table_validation() {
        assert!(matches!(
            Table::new(vec![vec!["1".into(), "2".into()], vec!["3".into()]]),
            Err(TpeError::NotRectangular { row: 1, .. })
        ));
        assert!(matches!(Table::new(vec![vec!["".into()]]), Err(TpeError::EmptyCell { row: 0, col: 0 })));
    }

    #[test]
    fn minimal_stream() {
        let v = Vocab::build();
        let s = tokenize_example("", &table(&[&["7"]]), "", "", &v).unwrap();
        let cell = Segment::Cell { row: 0, col: 0 };
        assert_eq!(s.ids, vec![v.bos(), v.encode("7").unwrap(), v.sep(), v.row_sep(), v.eos()]);
        assert_eq!(s.segments, vec![Segment::Text, cell, cell, Segment::Text, Segment::Text]);
        assert_eq!(s.answer_start, 4);
        s.validate().unwrap();
    }

    #[test]
    fn row_major_cell_order() {
        let v = Vocab::build();
        let s = tokenize_example("", &table(&[&["1", "2"], &["3", "4"]]), "", "", &v).unwrap();
        let order: Vec<_> = s
            .ids
            .iter()
            .zip(&s.segments)
            .filter(|(&id, seg)| !seg.is_text() && id != v.sep())
            .map(|(_, seg)| *seg)
            .collect();
        let cell = |row, col| Segment::Cell { row, col };
        assert_eq!(order, vec![cell(0, 0), cell(0, 1), cell(1, 0), cell(1, 1)]);
        assert_eq!(s.ids.iter().filter(|&&i| i == v.sep()).count(), 4);
        assert_eq!(s.ids.iter().filter(|&&i| i == v.row_sep()).count(), 2);
    }

    #[test]
    fn answer_start_points_at_first_answer_token() {
        let v = Vocab::build();
        let s = tokenize_example("What is the value ?", &table(&[&["8", "9★"]]), "Answer:", "15", &v).unwrap();
        assert_eq!(s.ids[s.answer_start], v.encode("1").unwrap());
        assert_eq!(s.ids[s.answer_start - 1], v.encode("Answer:").unwrap());
        assert_eq!(*s.ids.last().unwrap(), v.eos());
        assert_eq!(s.prompt().len(), s.answer_start);
        assert_eq!(reconstruct_table(&s, &v).unwrap(), table(&[&["8", "9★"]]));
    }

    #[test]
    fn validate_catches_broken_contiguity() {
        let v = Vocab::build();
        let mut s = tokenize_example("", &table(&[&["12", "3"]]), "", "", &v).unwrap();
        s.segments.swap(2, 4);
        assert!(s.validate().is_err());
    }
}
