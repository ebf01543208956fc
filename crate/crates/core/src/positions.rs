//! Position matrices for multiple table traversal orders, and rotary kernels.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result, TpeError};
use crate::numerics::{Scalar, Tensor};
use crate::table::{Segment, TokenStream};

/// A traversal of table cells; each traversal induces one column of the position matrix.
pub trait CellOrder {
    fn name(&self) -> &'static str;
    /// All `(row, col)` pairs of a `rows x cols` grid in visiting order.
    fn cells(&self, rows: usize, cols: usize) -> Vec<(usize, usize)>;
}

/// Left to right within a row, rows top to bottom.
#[derive(Clone, Copy, Debug, Default)]
pub struct RowWise;

/// Top to bottom within a column, columns left to right.
#[derive(Clone, Copy, Debug, Default)]
pub struct ColumnWise;

impl CellOrder for RowWise {
    fn name(&self) -> &'static str {
        "row"
    }

    fn cells(&self, rows: usize, cols: usize) -> Vec<(usize, usize)> {
        (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect()
    }
}

impl CellOrder for ColumnWise {
    fn name(&self) -> &'static str {
        "col"
    }

    fn cells(&self, rows: usize, cols: usize) -> Vec<(usize, usize)> {
        (0..cols).flat_map(|c| (0..rows).map(move |r| (r, c))).collect()
    }
}

/// The shipped orders: row-wise first, then column-wise.
pub fn standard_orders(j: usize) -> Result<Vec<Box<dyn CellOrder>>> {
    if j == 0 || j > 2 {
        return Err(TpeError::Config(format!("{j} permutation orders requested; 1 or 2 are available")));
    }
    let all: Vec<Box<dyn CellOrder>> = vec![Box::new(RowWise), Box::new(ColumnWise)];
    Ok(all.into_iter().take(j).collect())
}

/// `M x J` matrix: entry `(m, j)` is token `m`'s index under order `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositionMatrix {
    data: Vec<usize>,
    orders: usize,
}

impl PositionMatrix {
    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let orders = rows.first().map_or(0, Vec::len);
        if orders == 0 || rows.iter().any(|r| r.len() != orders) {
            return Err(shape_err("position_matrix", "rows must share a non-zero width"));
        }
        Ok(PositionMatrix { data: rows.concat(), orders })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.orders
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn orders(&self) -> usize {
        self.orders
    }

    pub fn get(&self, token: usize, order: usize) -> usize {
        self.data[token * self.orders + order]
    }

    pub fn row(&self, token: usize) -> &[usize] {
        &self.data[token * self.orders..(token + 1) * self.orders]
    }

    pub fn column(&self, order: usize) -> Vec<usize> {
        self.data.iter().skip(order).step_by(self.orders).copied().collect()
    }

    pub fn max(&self) -> Option<usize> {
        self.data.iter().copied().max()
    }

    /// Positions of the first `n` tokens.
    pub fn prefix(&self, n: usize) -> PositionMatrix {
        let n = n.min(self.len());
        PositionMatrix { data: self.data[..n * self.orders].to_vec(), orders: self.orders }
    }

    /// Keeps only the given order columns.
    pub fn select_orders(&self, orders: &[usize]) -> Result<PositionMatrix> {
        if orders.is_empty() || orders.iter().any(|&j| j >= self.orders) {
            return Err(shape_err("select_orders", format!("{orders:?} of {}", self.orders)));
        }
        let rows: Vec<Vec<usize>> = (0..self.len()).map(|m| orders.iter().map(|&j| self.get(m, j)).collect()).collect();
        Self::from_rows(&rows)
    }
}

/// Position matrix for `stream` under `orders`.
///
/// Text before the first cell takes `0..L`; cell tokens take `L..L+T` in each
/// order (cells visited atomically, tokens keeping their in-cell order); every
/// later text token continues at `L+T, L+T+1, ...` in stream order, identical
/// across orders.
pub fn assign_positions(stream: &TokenStream, orders: &[Box<dyn CellOrder>]) -> Result<PositionMatrix> {
    stream.validate()?;
    if orders.is_empty() {
        return Err(TpeError::Config("no permutation orders".into()));
    }
    let m = stream.len();
    let j = orders.len();
    let first_cell = stream.segments.iter().position(|s| !s.is_text()).unwrap_or(m);
    let mut cell_tokens: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); stream.cols]; stream.rows];
    for (i, seg) in stream.segments.iter().enumerate() {
        if let Segment::Cell { row, col } = *seg {
            cell_tokens[row][col].push(i);
        }
    }
    let table_len = stream.cell_token_count();
    let mut data = vec![usize::MAX; m * j];
    for i in 0..first_cell {
        data[i * j..(i + 1) * j].fill(i);
    }
    for (oj, order) in orders.iter().enumerate() {
        let mut next = first_cell;
        for (r, c) in order.cells(stream.rows, stream.cols) {
            for &i in &cell_tokens[r][c] {
                data[i * j + oj] = next;
                next += 1;
            }
        }
        if next != first_cell + table_len {
            return Err(TpeError::MalformedSegments(format!("order {} does not visit every cell", order.name())));
        }
    }
    let mut next = first_cell + table_len;
    for i in first_cell..m {
        if stream.segments[i].is_text() {
            data[i * j..(i + 1) * j].fill(next);
            next += 1;
        }
    }
    Ok(PositionMatrix { data, orders: j })
}

/// Appends `k` generated-token rows, each one past the current maximum and equal across orders.
pub fn extend_positions(p: &PositionMatrix, k: usize) -> PositionMatrix {
    let mut out = p.clone();
    let mut next = p.max().map_or(0, |x| x + 1);
    for _ in 0..k {
        out.data.extend(std::iter::repeat_n(next, p.orders));
        next += 1;
    }
    out
}

/// Stable ascending sort of the tokens by their order-`j` position, with the inverse permutation.
///
/// `perm[i]` is the stream index of the token ranked `i`; `inverse[stream_index]` is its rank.
pub fn sort_permutation(p: &PositionMatrix, j: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if j >= p.orders {
        return Err(shape_err("sort_permutation", format!("order {j} of {}", p.orders)));
    }
    let mut perm: Vec<usize> = (0..p.len()).collect();
    perm.sort_by_key(|&i| p.get(i, j));
    for w in perm.windows(2) {
        if p.get(w[0], j) == p.get(w[1], j) {
            return Err(TpeError::DuplicatePosition { order: j, position: p.get(w[0], j) });
        }
    }
    let mut inverse = vec![0; perm.len()];
    for (rank, &i) in perm.iter().enumerate() {
        inverse[i] = rank;
    }
    Ok((perm, inverse))
}

/// Rotary embedding settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub base: f64,
    pub head_dim: usize,
}

impl RopeConfig {
    pub fn new(base: f64, head_dim: usize) -> Result<Self> {
        let cfg = RopeConfig { base, head_dim };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(TpeError::Rope(format!("head dimension {} must be even and positive", self.head_dim)));
        }
        if !(self.base > 1.0) {
            return Err(TpeError::Rope(format!("base {} must exceed 1", self.base)));
        }
        Ok(())
    }

    /// Rotation frequencies `base^(-2i/d)` for `i = 0..d/2`.
    pub fn thetas(&self) -> Vec<f64> {
        let d = self.head_dim as f64;
        (0..self.head_dim / 2).map(|i| self.base.powf(-2.0 * i as f64 / d)).collect()
    }
}

/// Rotates consecutive pairs `(v[2i], v[2i+1])` by angle `pos * theta_i`.
pub fn rope_rotate<T: Scalar>(v: &Tensor<T>, pos: usize, cfg: &RopeConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    if v.shape() != [cfg.head_dim] {
        return Err(shape_err("rope_rotate", format!("{:?} for head dim {}", v.shape(), cfg.head_dim)));
    }
    let x = v.data();
    let mut out = vec![T::zero(); x.len()];
    for (i, th) in cfg.thetas().into_iter().enumerate() {
        let (s, c) = (pos as f64 * th).sin_cos();
        let (a, b) = (x[2 * i].as_f64(), x[2 * i + 1].as_f64());
        out[2 * i] = T::from_f64(a * c - b * s);
        out[2 * i + 1] = T::from_f64(a * s + b * c);
    }
    Tensor::new(vec![cfg.head_dim], out)
}

/// `(R_m q) . (R_n k)`.
pub fn rope_score<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, m: usize, n: usize, cfg: &RopeConfig) -> Result<T> {
    let qr = rope_rotate(q, m, cfg)?;
    let kr = rope_rotate(k, n, cfg)?;
    Ok(qr.data().iter().zip(kr.data()).map(|(&a, &b)| a * b).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::{tokenize_example, Table, Vocab};

    fn stream_2x2_no_sep() -> TokenStream {
        // prefix of two text tokens, one-token cells A B / C D, no separators
        let cell = |row, col| Segment::Cell { row, col };
        TokenStream {
            ids: vec![0, 1, 10, 11, 12, 13],
            segments: vec![Segment::Text, Segment::Text, cell(0, 0), cell(0, 1), cell(1, 0), cell(1, 1)],
            answer_start: 6,
            rows: 2,
            cols: 2,
        }
    }

    #[test]
    fn two_by_two_hand_enumeration() {
        let p = assign_positions(&stream_2x2_no_sep(), &standard_orders(2).unwrap()).unwrap();
        assert_eq!(p.column(0), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(p.column(1), vec![0, 1, 2, 4, 3, 5]);
        let (perm, inv) = sort_permutation(&p, 1).unwrap();
        assert_eq!(perm, vec![0, 1, 2, 4, 3, 5]);
        let composed: Vec<usize> = (0..6).map(|i| perm[inv[i]]).collect();
        assert_eq!(composed, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn multi_token_cells_keep_unit_deltas() {
        let v = Vocab::build();
        let t = Table::new(vec![vec!["377".into(), "5".into()], vec!["12".into(), "9★".into()]]).unwrap();
        let s = tokenize_example("What is the value ?", &t, "Answer:", "5", &v).unwrap();
        let p = assign_positions(&s, &standard_orders(2).unwrap()).unwrap();
        for i in 1..s.len() {
            if !s.segments[i].is_text() && s.segments[i] == s.segments[i - 1] {
                assert_eq!(p.get(i, 0) - p.get(i - 1, 0), 1);
                assert_eq!(p.get(i, 1) - p.get(i - 1, 1), 1);
            }
        }
    }

    #[test]
    fn text_only_stream_is_identity() {
        let s = TokenStream { ids: vec![1, 2, 3, 4], segments: vec![Segment::Text; 4], answer_start: 4, rows: 0, cols: 0 };
        let p = assign_positions(&s, &standard_orders(2).unwrap()).unwrap();
        assert_eq!(p.column(0), vec![0, 1, 2, 3]);
        assert_eq!(p.column(1), vec![0, 1, 2, 3]);
    }

    #[test]
    fn extension_rule() {
        let p = PositionMatrix::from_rows(&[vec![0, 0], vec![41, 40], vec![40, 41]]).unwrap();
        assert_eq!(extend_positions(&p, 0), p);
        let e = extend_positions(&p, 1);
        assert_eq!(e.row(3), &[42, 42]);
        let e = extend_positions(&p, 3);
        assert_eq!(e.column(0)[3..], [42, 43, 44]);
        assert_eq!(e.column(1)[3..], [42, 43, 44]);
    }

    #[test]
    fn sort_rejects_duplicates() {
        let p = PositionMatrix::from_rows(&[vec![0], vec![1], vec![1]]).unwrap();
        assert!(matches!(sort_permutation(&p, 0), Err(TpeError::DuplicatePosition { order: 0, position: 1 })));
        let id = PositionMatrix::from_rows(&[vec![0], vec![1], vec![2]]).unwrap();
        assert_eq!(sort_permutation(&id, 0).unwrap().0, vec![0, 1, 2]);
    }

    #[test]
    fn rope_frequencies_and_identity() {
        let cfg = RopeConfig::new(10000.0, 4).unwrap();
        let th = cfg.thetas();
        assert_eq!(th[0], 1.0);
        assert!((th[1] - 0.01).abs() < 1e-15);
        let v = Tensor::<f64>::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        assert_eq!(rope_rotate(&v, 0, &cfg).unwrap(), v);
        assert!(RopeConfig::new(10000.0, 3).is_err());
        assert!(RopeConfig::new(1.0, 4).is_err());
        assert!(rope_rotate(&Tensor::<f64>::zeros(&[3]), 1, &cfg).is_err());
    }

    #[test]
    fn rope_score_closed_forms() {
        let cfg = RopeConfig::new(500.0, 2).unwrap();
        let e1 = Tensor::<f64>::new(vec![2], vec![1.0, 0.0]).unwrap();
        assert!((rope_score(&e1, &e1, 0, 1, &cfg).unwrap() - 1f64.cos()).abs() < 1e-15);
        let cfg = RopeConfig::new(10000.0, 4).unwrap();
        let q = Tensor::<f64>::new(vec![4], vec![0.5, 1.0, -0.3, 0.8]).unwrap();
        let k = Tensor::<f64>::new(vec![4], vec![-0.2, 0.4, 1.1, 0.6]).unwrap();
        let dot: f64 = q.data().iter().zip(k.data()).map(|(a, b)| a * b).sum();
        assert!((rope_score(&q, &k, 7, 7, &cfg).unwrap() - dot).abs() < 1e-12);
        let a = rope_score(&q, &k, 3, 5, &cfg).unwrap();
        let b = rope_score(&q, &k, 10, 12, &cfg).unwrap();
        assert!((a - b).abs() < 1e-9);
    }
}
