//! Seeded generators, scorers and JSONL IO for the Counting-Stars and
//! Locating-Values proxy tasks.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TpeError};
use crate::table::{tokenize_example, Table, TokenStream, Vocab};

/// Instruction appended after the table.
pub const ANSWER_PROMPT: &str = "Answer:";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CountingStars,
    LocatingValues,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::CountingStars => "counting_stars",
            TaskKind::LocatingValues => "locating_values",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = TpeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "counting_stars" => Ok(TaskKind::CountingStars),
            "locating_values" => Ok(TaskKind::LocatingValues),
            _ => Err(TpeError::Config(format!("unknown task {s:?}"))),
        }
    }
}

/// Task-specific ground truth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskMeta {
    CountingStars { reference: (usize, usize), stars: Vec<(usize, usize)> },
    LocatingValues { star: (usize, usize), target: (usize, usize), rows_offset: usize, cols_offset: usize, below: bool, right: bool },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ExampleRecord", into = "ExampleRecord")]
pub struct Example {
    pub task: TaskKind,
    pub table: Table,
    pub question: String,
    pub answer: String,
    pub seed: u64,
    pub meta: TaskMeta,
}

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    task: TaskKind,
    rows: usize,
    cols: usize,
    table: Vec<Vec<String>>,
    question: String,
    answer: String,
    seed: u64,
    meta: TaskMeta,
}

impl From<Example> for ExampleRecord {
    fn from(e: Example) -> Self {
        ExampleRecord {
            task: e.task,
            rows: e.table.rows(),
            cols: e.table.cols(),
            table: e.table.cells().to_vec(),
            question: e.question,
            answer: e.answer,
            seed: e.seed,
            meta: e.meta,
        }
    }
}

impl TryFrom<ExampleRecord> for Example {
    type Error = TpeError;

    fn try_from(r: ExampleRecord) -> Result<Self> {
        let table = Table::new(r.table)?;
        if table.rows() != r.rows || table.cols() != r.cols {
            return Err(TpeError::Config(format!(
                "declared {}x{} but table is {}x{}",
                r.rows,
                r.cols,
                table.rows(),
                table.cols()
            )));
        }
        Ok(Example { task: r.task, table, question: r.question, answer: r.answer, seed: r.seed, meta: r.meta })
    }
}

impl Example {
    /// `question + table + "Answer:" + answer` as a tagged stream.
    pub fn to_stream(&self, vocab: &Vocab) -> Result<TokenStream> {
        tokenize_example(&self.question, &self.table, ANSWER_PROMPT, &self.answer, vocab)
    }

    /// Scores a predicted answer string with the task's rule.
    pub fn score(&self, predicted: &str) -> bool {
        match self.task {
            TaskKind::CountingStars => eval_counting_stars(predicted, self),
            TaskKind::LocatingValues => eval_locating_values(predicted, self),
        }
    }
}

/// Per-example seed: `splitmix64(splitmix64(base ^ salt(split)) + index)`.
pub fn example_seed(base: u64, split: &str, index: u64) -> u64 {
    let salt = split.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    splitmix64(splitmix64(base ^ salt).wrapping_add(index))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generates one example from a seed.
pub fn generate(task: TaskKind, rows: usize, cols: usize, seed: u64) -> Result<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ex = match task {
        TaskKind::CountingStars => gen_counting_stars(rows, cols, &mut rng)?,
        TaskKind::LocatingValues => gen_locating_values(rows, cols, &mut rng)?,
    };
    ex.seed = seed;
    Ok(ex)
}

/// `n` examples of one split, each seeded by [`example_seed`].
pub fn generate_split(task: TaskKind, rows: usize, cols: usize, n: usize, base_seed: u64, split: &str) -> Result<Vec<Example>> {
    (0..n as u64).map(|i| generate(task, rows, cols, example_seed(base_seed, split, i))).collect()
}

fn check_dims(rows: usize, cols: usize) -> Result<()> {
    if rows < 2 || cols < 2 {
        return Err(TpeError::Infeasible(format!("{rows}x{cols}: tables need at least 2 rows and 2 columns")));
    }
    Ok(())
}

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

/// Random 0/1 grid with 1-3 stars in every row and column and at least one
/// empty cell, or `None` if the sampled degree sequences are not realisable.
fn place_stars(rows: usize, cols: usize, rng: &mut impl Rng) -> Option<Vec<Vec<bool>>> {
    let lo = rows.max(cols);
    let hi = (3 * rows).min(3 * cols).min(rows * cols - 1);
    if lo > hi {
        return None;
    }
    let total = rng.gen_range(lo..=hi);
    let degrees = |n: usize, cap: usize, rng: &mut dyn rand::RngCore| -> Option<Vec<usize>> {
        let mut d = vec![1; n];
        for _ in n..total {
            let open: Vec<usize> = (0..n).filter(|&i| d[i] < cap).collect();
            d[*open.get(rng.gen_range(0..open.len().max(1)))?] += 1;
        }
        Some(d)
    };
    let row_deg = degrees(rows, 3.min(cols), rng)?;
    let mut col_left = degrees(cols, 3.min(rows), rng)?;

    // largest-remaining-demand construction, which succeeds whenever the pair is realisable
    let mut grid = vec![vec![false; cols]; rows];
    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_by_key(|&r| std::cmp::Reverse(row_deg[r]));
    for r in order {
        let mut cand: Vec<(usize, u32, usize)> = (0..cols).map(|c| (col_left[c], rng.gen(), c)).collect();
        cand.sort_unstable_by(|a, b| b.cmp(a));
        for &(left, _, c) in &cand[..row_deg[r]] {
            if left == 0 {
                return None;
            }
            grid[r][c] = true;
            col_left[c] -= 1;
        }
    }
    // degree-preserving checkerboard swaps to mix the layout
    for _ in 0..10 * total {
        let (r1, r2) = (rng.gen_range(0..rows), rng.gen_range(0..rows));
        let (c1, c2) = (rng.gen_range(0..cols), rng.gen_range(0..cols));
        if grid[r1][c1] && grid[r2][c2] && !grid[r1][c2] && !grid[r2][c1] {
            grid[r1][c1] = false;
            grid[r2][c2] = false;
            grid[r1][c2] = true;
            grid[r2][c1] = true;
        }
    }
    Some(grid)
}

/// Counting-Stars: list the starred cells sharing the reference number's row or column.
pub fn gen_counting_stars(rows: usize, cols: usize, rng: &mut impl Rng) -> Result<Example> {
    check_dims(rows, cols)?;
    if cols > 3 * rows || rows > 3 * cols {
        return Err(TpeError::Infeasible(format!("{rows}x{cols}: cannot hold 1-3 stars per row and column")));
    }
    let mut grid = None;
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        if let Some(g) = place_stars(rows, cols, rng) {
            grid = Some(g);
            break;
        }
    }
    let grid = grid.ok_or_else(|| TpeError::Infeasible(format!("{rows}x{cols}: star placement failed")))?;
    let plain: Vec<(usize, usize)> =
        (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).filter(|&(r, c)| !grid[r][c]).collect();
    if plain.len() > 1000 {
        return Err(TpeError::Infeasible(format!("{} unstarred cells exceed the 0-999 pool", plain.len())));
    }
    let values = sample(rng, 1000, plain.len()).into_vec();
    let mut cells = vec![vec![String::new(); cols]; rows];
    let mut stars = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if grid[r][c] {
                cells[r][c] = format!("{}★", rng.gen_range(1..=9));
                stars.push((r, c));
            }
        }
    }
    for (&(r, c), v) in plain.iter().zip(values) {
        cells[r][c] = v.to_string();
    }
    let reference = plain[rng.gen_range(0..plain.len())];
    let (rr, rc) = reference;
    let mut listed: Vec<&str> = (0..cols).filter(|&c| grid[rr][c]).map(|c| cells[rr][c].as_str()).collect();
    listed.extend((0..rows).filter(|&r| grid[r][rc]).map(|r| cells[r][rc].as_str()));
    let answer = format!("[{}]", listed.join(","));
    let question = format!("What are the stars in the same row and column as the number {} ?", cells[rr][rc]);
    Ok(Example {
        task: TaskKind::CountingStars,
        table: Table::new(cells)?,
        question,
        answer,
        seed: 0,
        meta: TaskMeta::CountingStars { reference, stars },
    })
}

/// Locating-Values: the value `c` columns left/right of and `r` rows above/below the star.
pub fn gen_locating_values(rows: usize, cols: usize, rng: &mut impl Rng) -> Result<Example> {
    check_dims(rows, cols)?;
    if rows * cols > 1000 {
        return Err(TpeError::Infeasible(format!("{rows}x{cols} needs more than 1000 distinct values")));
    }
    let values = sample(rng, 1000, rows * cols).into_vec();
    let mut cells: Vec<Vec<String>> =
        (0..rows).map(|r| (0..cols).map(|c| values[r * cols + c].to_string()).collect()).collect();
    let star = (rng.gen_range(0..rows), rng.gen_range(0..cols));
    cells[star.0][star.1] = "★".to_string();
    let mut options = Vec::new();
    for dr in 1..rows {
        for below in [true, false] {
            let tr = if below { star.0 + dr } else { star.0.wrapping_sub(dr) };
            if tr >= rows {
                continue;
            }
            for dc in 1..cols {
                for right in [true, false] {
                    let tc = if right { star.1 + dc } else { star.1.wrapping_sub(dc) };
                    if tc < cols {
                        options.push((dr, below, dc, right, (tr, tc)));
                    }
                }
            }
        }
    }
    let (dr, below, dc, right, target) = options[rng.gen_range(0..options.len())];
    let question = format!(
        "What is the value {dc} columns to the {} of and {dr} rows {} ★ ?",
        if right { "right" } else { "left" },
        if below { "below" } else { "above" }
    );
    let answer = cells[target.0][target.1].clone();
    Ok(Example {
        task: TaskKind::LocatingValues,
        table: Table::new(cells)?,
        question,
        answer,
        seed: 0,
        meta: TaskMeta::LocatingValues { star, target, rows_offset: dr, cols_offset: dc, below, right },
    })
}

fn parse_list(s: &str) -> Option<Vec<String>> {
    let inner = s.trim().strip_prefix('[')?.strip_suffix(']')?;
    if inner.trim().is_empty() {
        return Some(Vec::new());
    }
    Some(inner.split(',').map(|x| x.trim().to_string()).collect())
}

/// Order-insensitive multiset match of a bracketed list.
pub fn eval_counting_stars(predicted: &str, gold: &Example) -> bool {
    match (parse_list(predicted), parse_list(&gold.answer)) {
        (Some(mut p), Some(mut g)) => {
            p.sort();
            g.sort();
            p == g
        }
        _ => false,
    }
}

/// Exact match after trimming whitespace.
pub fn eval_locating_values(predicted: &str, gold: &Example) -> bool {
    predicted.trim() == gold.answer.trim()
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for e in examples {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Example = serde_json::from_str(&line).map_err(|e| TpeError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(e);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_names() {
        assert_eq!("counting-stars".parse::<TaskKind>().unwrap(), TaskKind::CountingStars);
        assert!("sudoku".parse::<TaskKind>().is_err());
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        for task in [TaskKind::CountingStars, TaskKind::LocatingValues] {
            assert_eq!(generate(task, 5, 4, 9).unwrap(), generate(task, 5, 4, 9).unwrap());
        }
        assert_ne!(example_seed(1, "train", 0), example_seed(1, "val", 0));
    }

    #[test]
    fn minimal_counting_stars_answer_size() {
        for seed in 0..500 {
            let e = generate(TaskKind::CountingStars, 2, 2, seed).unwrap();
            let n = parse_list(&e.answer).unwrap().len();
            assert!((2..=6).contains(&n), "{}", e.answer);
        }
    }

    #[test]
    fn infeasible_dimensions() {
        assert!(generate(TaskKind::CountingStars, 1, 5, 0).is_err());
        assert!(generate(TaskKind::CountingStars, 2, 7, 0).is_err());
        assert!(generate(TaskKind::LocatingValues, 40, 30, 0).is_err());
        assert!(generate(TaskKind::LocatingValues, 2, 1, 0).is_err());
    }

    fn gold(task: TaskKind, answer: &str) -> Example {
        Example {
            task,
            table: Table::new(vec![vec!["1".into()]]).unwrap(),
            question: String::new(),
            answer: answer.into(),
            seed: 0,
            meta: TaskMeta::CountingStars { reference: (0, 0), stars: vec![] },
        }
    }

    #[test]
    fn counting_stars_scoring() {
        let g = gold(TaskKind::CountingStars, "[3★,4★,2★,9★]");
        assert!(eval_counting_stars("[9★,2★,4★,3★]", &g));
        assert!(!eval_counting_stars("[9★,2★,4★]", &g));
        assert!(!eval_counting_stars("9★,2★,4★,3★", &g));
        let g = gold(TaskKind::CountingStars, "[1★,3★]");
        assert!(!eval_counting_stars("[1★,1★,3★]", &g));
    }

    #[test]
    fn locating_values_scoring() {
        let g = gold(TaskKind::LocatingValues, "360");
        assert!(eval_locating_values("360", &g));
        assert!(!eval_locating_values("481", &g));
        assert!(eval_locating_values(" 360 ", &g));
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.jsonl");
        write_jsonl(&empty, &[]).unwrap();
        assert_eq!(fs::read(&empty).unwrap().len(), 0);
        assert!(read_jsonl(&empty).unwrap().is_empty());

        let path = dir.path().join("mixed.jsonl");
        let mut examples = generate_split(TaskKind::CountingStars, 4, 5, 3, 1, "train").unwrap();
        examples.extend(generate_split(TaskKind::LocatingValues, 6, 6, 3, 1, "train").unwrap());
        write_jsonl(&path, &examples).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), examples);

        let bad = dir.path().join("bad.jsonl");
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str(r#"{"task":"locating_values","rows":2,"cols":2,"table":[["1","2"],["3"]],"question":"","answer":"1","seed":0,"meta":{"kind":"counting_stars","reference":[0,0],"stars":[]}}"#);
        text.push('\n');
        fs::write(&bad, text).unwrap();
        match read_jsonl(&bad) {
            Err(TpeError::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn example_streams_tokenize_under_the_closed_vocabulary() {
        let v = Vocab::build();
        for seed in 0..200 {
            for task in [TaskKind::CountingStars, TaskKind::LocatingValues] {
                let e = generate(task, 6, 6, seed).unwrap();
                e.to_stream(&v).unwrap().validate().unwrap();
            }
        }
    }
}
