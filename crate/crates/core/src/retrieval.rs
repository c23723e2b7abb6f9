//! Score-table retrieval over packed FSQ codes.
//!
//! With `z^g = A_out^g n^g + b_out^g` and a block-diagonal `W_k`, the score of a phrase is
//!
//! ```text
//! q·(z W_k) = Σ_g Σ_i n_i^g (q^g · a_i^g) + Σ_g q^g · b^g,
//!     a_i^g = (column i of A_out^g) · W_k^g,   b^g = b_out^g · W_k^g
//! ```
//!
//! so for every frame we tabulate `(q^g · a_i^g)·u` for each attainable normalized value `u`
//! of level `i`, and a phrase's score becomes `G·|L|` table lookups. The bias sum is the same
//! for every phrase of a frame and is dropped when ranking.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap};

use crate::attention::ProjectionSet;
use crate::catalogue::PackedIndex;
use crate::error::{input, Error, Result};
use crate::fsq::{
    ensure_packable, normalize_wide, unpack_codes, CodeVector, FsqConfig, FsqParams,
    LevelSpec, BITS_PER_LEVEL, MAX_PACKED_LEVEL,
};
use crate::linalg::Matrix;

#[cfg(target_arch = "x86_64")]
mod lanes;

/// Phrases scored per block before moving to the next frame.
pub const DEFAULT_BLOCK_ROWS: usize = 4096;

const FIELD_MASK: u16 = (MAX_PACKED_LEVEL - 1) as u16;

/// Fewer frames than this do not pay for the per-block transpose.
#[cfg(target_arch = "x86_64")]
const MIN_LANE_FRAMES: usize = 4;

#[inline]
pub(crate) fn field(word: u16, level: usize) -> u16 {
    (word >> (BITS_PER_LEVEL as usize * level)) & FIELD_MASK
}

/// Packed codes, one row of `G` 16-bit words per catalogue entry.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CodeMatrix {
    groups: usize,
    words: Vec<u16>,
}

impl CodeMatrix {
    pub fn new(groups: usize) -> Self {
        Self {
            groups,
            words: Vec::new(),
        }
    }

    pub fn from_words(groups: usize, words: Vec<u16>) -> Result<Self> {
        if groups == 0 || words.len() % groups != 0 {
            return input(format!(
                "{} words do not form rows of {groups}",
                words.len()
            ));
        }
        Ok(Self { groups, words })
    }

    pub fn push_row(&mut self, row: &[u16]) -> Result<()> {
        if row.len() != self.groups {
            return input(format!("row has {} words, expected {}", row.len(), self.groups));
        }
        self.words.extend_from_slice(row);
        Ok(())
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn rows(&self) -> usize {
        if self.groups == 0 {
            0
        } else {
            self.words.len() / self.groups
        }
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[u16] {
        &self.words[j * self.groups..(j + 1) * self.groups]
    }

    pub fn words(&self) -> &[u16] {
        &self.words
    }

    /// Size of the code block: `rows · G · 2` bytes.
    pub fn byte_len(&self) -> usize {
        std::mem::size_of_val(self.words.as_slice())
    }

    pub fn unpack_row(&self, j: usize, config: &FsqConfig) -> Result<CodeVector> {
        unpack_codes(self.row(j), config)
    }

    /// Checks every word against the level spec.
    pub fn validate(&self, config: &FsqConfig) -> Result<()> {
        if self.groups != config.groups() {
            return Err(Error::Data(format!(
                "code rows have {} words, config has {} groups",
                self.groups,
                config.groups()
            )));
        }
        for j in 0..self.rows() {
            unpack_codes(self.row(j), config)
                .map_err(|e| Error::Data(format!("row {j}: {e}")))?;
        }
        Ok(())
    }
}

/// Per-group key columns `a_i^g` and bias vectors `b^g`, fixed for a given quantizer and `W_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyColumns {
    levels: LevelSpec,
    groups: usize,
    sub_dim: usize,
    /// `[g][i][k]`
    columns: Vec<f64>,
    /// `[g][k]`
    bias: Vec<f64>,
}

impl KeyColumns {
    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn sub_dim(&self) -> usize {
        self.sub_dim
    }

    pub fn levels(&self) -> &LevelSpec {
        &self.levels
    }

    /// `a_i^g` as a `D/G` row vector.
    pub fn column(&self, g: usize, i: usize) -> &[f64] {
        let s = (g * self.levels.len() + i) * self.sub_dim;
        &self.columns[s..s + self.sub_dim]
    }

    pub fn bias(&self, g: usize) -> &[f64] {
        &self.bias[g * self.sub_dim..(g + 1) * self.sub_dim]
    }
}

/// Computes `a_i^g = A_out^g[:, i]ᵀ·W_k^g` and `b^g = b_out^gᵀ·W_k^g`.
pub fn precompute_columns(params: &FsqParams, proj: &ProjectionSet) -> Result<KeyColumns> {
    let cfg = params.config();
    if proj.dim() != cfg.dim() {
        return Err(Error::Config(format!(
            "projections are {0}x{0}, quantizer dimension is {1}",
            proj.dim(),
            cfg.dim()
        )));
    }
    let groups = cfg.groups();
    if !proj.w_k().is_block_diagonal(groups) {
        return Err(Error::Config(format!(
            "W_k is not block-diagonal with {groups} blocks"
        )));
    }
    let d = cfg.sub_dim();
    let nl = cfg.levels().len();
    let mut columns = vec![0f64; groups * nl * d];
    let mut bias = vec![0f64; groups * d];
    for g in 0..groups {
        let a_out = params.a_out(g);
        let b_out = params.b_out(g);
        for k in 0..d {
            let w_row = &proj.w_k().row(g * d + k)[g * d..(g + 1) * d];
            for i in 0..nl {
                let a = a_out[k * nl + i] as f64;
                let col = &mut columns[(g * nl + i) * d..(g * nl + i + 1) * d];
                for (c, &w) in col.iter_mut().zip(w_row) {
                    *c += a * w as f64;
                }
            }
            let b = b_out[k] as f64;
            for (c, &w) in bias[g * d..(g + 1) * d].iter_mut().zip(w_row) {
                *c += b * w as f64;
            }
        }
    }
    Ok(KeyColumns {
        levels: cfg.levels().clone(),
        groups,
        sub_dim: d,
        columns,
        bias,
    })
}

/// Per-frame partial scores, laid out `[g][i][c]` with a fixed stride per level.
///
/// Slots for codes a level cannot produce hold NaN, so an out-of-range gather surfaces as a
/// NaN score instead of a silently wrong one.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    entries: Vec<f64>,
    groups: usize,
    levels: usize,
    stride: usize,
    bias: f64,
}

impl ScoreTable {
    fn empty() -> Self {
        Self {
            entries: Vec::new(),
            groups: 0,
            levels: 0,
            stride: 0,
            bias: 0.0,
        }
    }

    /// Number of table slots, `G·|L|·stride`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    #[inline]
    pub fn entry(&self, g: usize, i: usize, code: usize) -> f64 {
        self.entries[(g * self.levels + i) * self.stride + code]
    }

    /// `Σ_g q^g·b^g` for the frame this table was built from.
    pub fn bias(&self) -> f64 {
        self.bias
    }

    /// Sum of the gathered entries for one packed row, without the bias term.
    #[inline]
    pub fn score_packed(&self, row: &[u16]) -> f64 {
        match self.levels {
            1 => self.score_row::<1>(row),
            2 => self.score_row::<2>(row),
            3 => self.score_row::<3>(row),
            4 => self.score_row::<4>(row),
            _ => self.score_row::<5>(row),
        }
    }

    /// Scores consecutive rows of `words` into `out`.
    pub fn score_block(&self, words: &[u16], out: &mut [f64]) {
        match self.levels {
            1 => self.score_rows::<1>(words, out),
            2 => self.score_rows::<2>(words, out),
            3 => self.score_rows::<3>(words, out),
            4 => self.score_rows::<4>(words, out),
            _ => self.score_rows::<5>(words, out),
        }
    }

    fn score_rows<const L: usize>(&self, words: &[u16], out: &mut [f64]) {
        for (row, o) in words.chunks_exact(self.groups).zip(out.iter_mut()) {
            *o = self.score_row::<L>(row);
        }
    }

    /// One accumulator per level keeps the gathers independent.
    #[inline(always)]
    fn score_row<const L: usize>(&self, row: &[u16]) -> f64 {
        debug_assert_eq!(self.stride, MAX_PACKED_LEVEL as usize);
        debug_assert_eq!(self.levels, L);
        const S: usize = MAX_PACKED_LEVEL as usize;
        let mut acc = [0f64; L];
        for (t, &word) in self.entries.chunks_exact(L * S).zip(row) {
            let w = word as usize;
            for i in 0..L {
                acc[i] += t[i * S + ((w >> (BITS_PER_LEVEL as usize * i)) & FIELD_MASK as usize)];
            }
        }
        acc.iter().sum()
    }
}

fn table_stride(levels: &LevelSpec) -> usize {
    if levels.is_packable() {
        MAX_PACKED_LEVEL as usize
    } else {
        levels.max_level() as usize
    }
}

/// Builds the score table of one query frame `q` (already projected by `W_q`).
pub fn build_score_table<T: Copy + Into<f64>>(q: &[T], columns: &KeyColumns) -> Result<ScoreTable> {
    let mut table = ScoreTable::empty();
    fill_score_table(q, columns, &mut table)?;
    Ok(table)
}

/// As [`build_score_table`], reusing `table`'s allocation.
pub fn fill_score_table<T: Copy + Into<f64>>(q: &[T], columns: &KeyColumns, table: &mut ScoreTable) -> Result<()> {
    let d = columns.sub_dim;
    if q.len() != columns.groups * d {
        return input(format!(
            "query has dimension {}, expected {}",
            q.len(),
            columns.groups * d
        ));
    }
    let levels = columns.levels.levels();
    let nl = levels.len();
    let stride = table_stride(&columns.levels);
    table.groups = columns.groups;
    table.levels = nl;
    table.stride = stride;
    table.entries.clear();
    table.entries.resize(columns.groups * nl * stride, f64::NAN);
    let mut bias = 0f64;
    for g in 0..columns.groups {
        let qg = &q[g * d..(g + 1) * d];
        for (i, &l) in levels.iter().enumerate() {
            let qa: f64 = qg
                .iter()
                .zip(columns.column(g, i))
                .map(|(&x, &a)| x.into() * a)
                .sum();
            let base = (g * nl + i) * stride;
            for c in 0..l as u16 {
                table.entries[base + c as usize] = qa * normalize_wide(c, l);
            }
        }
        bias += qg
            .iter()
            .zip(columns.bias(g))
            .map(|(&x, &b)| x.into() * b)
            .sum::<f64>();
    }
    table.bias = bias;
    Ok(())
}

/// Score of one packed row from the table, optionally including the bias term.
pub fn approx_score(table: &ScoreTable, row: &[u16], include_bias: bool, levels: &LevelSpec) -> Result<f64> {
    ensure_packable(levels)?;
    if row.len() != table.groups || levels.len() != table.levels {
        return input(format!(
            "row has {} words for a table of {} groups",
            row.len(),
            table.groups
        ));
    }
    let used = BITS_PER_LEVEL as usize * levels.len();
    for (g, &w) in row.iter().enumerate() {
        let stray = used < 16 && (w >> used) != 0;
        let out_of_range = levels
            .levels()
            .iter()
            .enumerate()
            .any(|(i, &l)| field(w, i) as u32 >= l);
        if stray || out_of_range {
            return Err(Error::Data(format!("group {g}: invalid packed word {w:#06x}")));
        }
    }
    let s = table.score_packed(row);
    Ok(if include_bias { s + table.bias } else { s })
}

/// Score of an unpacked code vector; works for level specs that cannot be packed.
pub fn approx_score_codes(table: &ScoreTable, codes: &CodeVector, include_bias: bool) -> f64 {
    let mut acc = 0f64;
    for (k, &c) in codes.as_slice().iter().enumerate() {
        let (g, i) = (k / table.levels, k % table.levels);
        acc += table.entry(g, i, c as usize);
    }
    if include_bias {
        acc + table.bias
    } else {
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub id: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalResult {
    /// Per frame, hits by descending score, ties by ascending id.
    pub frames: Vec<Vec<Hit>>,
    /// Set when `K` exceeded the catalogue size and fewer hits were returned.
    pub truncated: bool,
}

impl RetrievalResult {
    pub fn ids(&self, frame: usize) -> Vec<u32> {
        self.frames[frame].iter().map(|h| h.id).collect()
    }
}

/// Iteration counters of the streaming phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct KernelStats {
    pub frames: u64,
    pub rows_scanned: u64,
    pub gathers: u64,
    pub heap_replacements: u64,
}

/// Heap ordering: greater means better (higher score, then lower id).
#[derive(Debug, Clone, Copy)]
struct Ranked(Hit);

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .score
            .total_cmp(&other.0.score)
            .then_with(|| other.0.id.cmp(&self.0.id))
    }
}

/// Bounded min-heap holding the best `k` hits seen so far.
#[derive(Debug)]
pub struct TopK {
    k: usize,
    heap: BinaryHeap<Reverse<Ranked>>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    /// Offers a hit; returns true when it entered the heap.
    #[inline]
    pub fn push(&mut self, id: u32, score: f64) -> bool {
        let cand = Ranked(Hit { id, score });
        if self.heap.len() < self.k {
            self.heap.push(Reverse(cand));
            return true;
        }
        match self.heap.peek_mut() {
            Some(mut worst) if cand > worst.0 => {
                *worst = Reverse(cand);
                true
            }
            _ => false,
        }
    }

    /// Score a candidate must beat (or tie with a lower id) once the heap is full.
    #[inline]
    pub fn threshold(&self) -> f64 {
        if self.heap.len() < self.k {
            f64::NEG_INFINITY
        } else {
            self.heap.peek().map_or(f64::NEG_INFINITY, |r| r.0 .0.score)
        }
    }

    pub fn into_sorted(self) -> Vec<Hit> {
        let mut hits: Vec<Ranked> = self.heap.into_iter().map(|r| r.0).collect();
        hits.sort_by(|a, b| b.cmp(a));
        hits.into_iter().map(|r| r.0).collect()
    }
}

/// Fused gather, sum and top-K over a packed code matrix.
#[derive(Debug, Clone)]
pub struct Retriever<'a> {
    codes: &'a CodeMatrix,
    columns: KeyColumns,
    w_q: &'a Matrix,
    block_rows: usize,
    scalar_only: bool,
}

impl<'a> Retriever<'a> {
    pub fn new(index: &'a PackedIndex) -> Result<Self> {
        Self::from_parts(index.codes(), index.params(), index.projections())
    }

    pub fn from_parts(codes: &'a CodeMatrix, params: &FsqParams, proj: &'a ProjectionSet) -> Result<Self> {
        ensure_packable(params.config().levels())?;
        if codes.groups() != params.config().groups() {
            return Err(Error::Config(format!(
                "code rows have {} words, quantizer has {} groups",
                codes.groups(),
                params.config().groups()
            )));
        }
        Ok(Self {
            codes,
            columns: precompute_columns(params, proj)?,
            w_q: proj.w_q(),
            block_rows: DEFAULT_BLOCK_ROWS,
            scalar_only: false,
        })
    }

    pub fn with_block_rows(mut self, rows: usize) -> Self {
        self.block_rows = rows.max(1);
        self
    }

    pub fn columns(&self) -> &KeyColumns {
        &self.columns
    }

    pub fn w_q(&self) -> &Matrix {
        self.w_q
    }

    /// Uses only the portable scalar kernel.
    pub fn with_scalar_kernel(mut self) -> Self {
        self.scalar_only = true;
        self
    }

    #[cfg(target_arch = "x86_64")]
    fn lane_tables(&self, tables: &[ScoreTable]) -> Option<Vec<lanes::LaneTable>> {
        if self.scalar_only || tables.len() < MIN_LANE_FRAMES || !lanes::available() {
            return None;
        }
        Some(
            tables
                .iter()
                .map(|t| {
                    let mut lt = lanes::LaneTable::default();
                    lt.fill(t, self.columns.levels.levels());
                    lt
                })
                .collect(),
        )
    }

    #[cfg(not(target_arch = "x86_64"))]
    fn lane_tables(&self, _tables: &[ScoreTable]) -> Option<Vec<()>> {
        None
    }

    /// Approximate bias-free scores of every row for already projected queries, `T×B`
    /// row-major into `out`. Tables are rebuilt into `tables`.
    pub fn score_all(&self, q: &Matrix, tables: &mut Vec<ScoreTable>, out: &mut [f32]) -> Result<()> {
        let rows = self.codes.rows();
        if out.len() != q.rows() * rows {
            return input(format!("score buffer has {} slots, expected {}", out.len(), q.rows() * rows));
        }
        tables.clear();
        for t in 0..q.rows() {
            tables.push(build_score_table(q.row(t), &self.columns)?);
        }
        let groups = self.codes.groups();
        let lanes = self.lane_tables(tables);
        let mut cols: Vec<u16> = Vec::new();
        let mut exact = vec![0f64; self.block_rows.min(rows)];
        let mut start = 0;
        while start < rows {
            let end = (start + self.block_rows).min(rows);
            let n = end - start;
            let block = &self.codes.words()[start * groups..end * groups];
            let mut done = 0;
            #[cfg(target_arch = "x86_64")]
            if let Some(lanes) = lanes.as_ref() {
                lanes::transpose(block, groups, n, &mut cols);
                for (t, (lt, table)) in lanes.iter().zip(tables.iter()).enumerate() {
                    let dst = &mut out[t * rows + start..t * rows + end];
                    // SAFETY: `lane_tables` only returns tables when AVX2 is available.
                    unsafe {
                        match table.levels {
                            1 => lanes::scores::<1>(lt, &cols, n, groups, dst),
                            2 => lanes::scores::<2>(lt, &cols, n, groups, dst),
                            3 => lanes::scores::<3>(lt, &cols, n, groups, dst),
                            4 => lanes::scores::<4>(lt, &cols, n, groups, dst),
                            _ => lanes::scores::<5>(lt, &cols, n, groups, dst),
                        }
                    }
                }
                done = n - n % 8;
            }
            for (t, table) in tables.iter().enumerate() {
                table.score_block(&block[done * groups..], &mut exact[..n - done]);
                for (o, &e) in out[t * rows + start + done..t * rows + end].iter_mut().zip(&exact) {
                    *o = e as f32;
                }
            }
            start = end;
        }
        drop(cols);
        Ok(())
    }

    /// Projects `x` with `W_q` and returns the top `k` rows per frame.
    pub fn retrieve(&self, x: &Matrix, k: usize) -> Result<RetrievalResult> {
        self.retrieve_with_stats(x, k).map(|(r, _)| r)
    }

    pub fn retrieve_with_stats(&self, x: &Matrix, k: usize) -> Result<(RetrievalResult, KernelStats)> {
        let dim = self.w_q.cols();
        let q = x.matmul_wide(self.w_q)?;
        let tables = q
            .chunks_exact(dim.max(1))
            .take(x.rows())
            .map(|row| build_score_table(row, &self.columns))
            .collect::<Result<Vec<_>>>()?;
        self.scan(tables, k)
    }

    /// Top-`k` over already projected queries.
    pub fn retrieve_projected(&self, q: &Matrix, k: usize) -> Result<(RetrievalResult, KernelStats)> {
        let tables = (0..q.rows())
            .map(|t| build_score_table(q.row(t), &self.columns))
            .collect::<Result<Vec<_>>>()?;
        self.scan(tables, k)
    }

    fn scan(&self, tables: Vec<ScoreTable>, k: usize) -> Result<(RetrievalResult, KernelStats)> {
        if k == 0 {
            return input("K must be at least 1");
        }
        let rows = self.codes.rows();
        if rows == 0 {
            return input("index has no rows");
        }
        let truncated = k > rows;
        if truncated {
            log::warn!("K = {k} exceeds catalogue size {rows}; returning {rows} entries per frame");
        }
        let k = k.min(rows);

        let mut heaps: Vec<TopK> = (0..tables.len()).map(|_| TopK::new(k)).collect();
        let mut stats = KernelStats {
            frames: tables.len() as u64,
            ..KernelStats::default()
        };
        let groups = self.codes.groups();
        let per_row = (groups * self.columns.levels.len()) as u64;
        let mut lanes = self.lane_tables(&tables);
        let mut cols: Vec<u16> = Vec::new();

        let mut start = 0;
        while start < rows {
            let end = (start + self.block_rows).min(rows);
            let n = end - start;
            let block = &self.codes.words()[start * groups..end * groups];
            let mut done = 0;
            #[cfg(target_arch = "x86_64")]
            if let Some(lanes) = lanes.as_mut() {
                lanes::transpose(block, groups, n, &mut cols);
                for ((lt, table), heap) in lanes.iter().zip(&tables).zip(heaps.iter_mut()) {
                    // SAFETY: `lane_tables` only returns tables when AVX2 is available.
                    stats.heap_replacements += unsafe {
                        match table.levels {
                            1 => lanes::scan::<1>(lt, table, &cols, block, n, groups, start as u32, heap),
                            2 => lanes::scan::<2>(lt, table, &cols, block, n, groups, start as u32, heap),
                            3 => lanes::scan::<3>(lt, table, &cols, block, n, groups, start as u32, heap),
                            4 => lanes::scan::<4>(lt, table, &cols, block, n, groups, start as u32, heap),
                            _ => lanes::scan::<5>(lt, table, &cols, block, n, groups, start as u32, heap),
                        }
                    };
                }
                done = n - n % 8;
            }
            for (table, heap) in tables.iter().zip(heaps.iter_mut()) {
                let mut threshold = heap.threshold();
                for (off, row) in block.chunks_exact(groups).enumerate().skip(done) {
                    let score = table.score_packed(row);
                    // equal scores may still win on id, so only strictly lower ones are skipped
                    if score >= threshold || score.is_nan() {
                        if heap.push((start + off) as u32, score) {
                            stats.heap_replacements += 1;
                            threshold = heap.threshold();
                        }
                    }
                }
                stats.rows_scanned += n as u64;
                stats.gathers += n as u64 * per_row;
            }
            start = end;
        }
        drop(cols);
        drop(lanes);

        let frames: Vec<Vec<Hit>> = heaps.into_iter().map(TopK::into_sorted).collect();
        if frames.iter().flatten().any(|h| h.score.is_nan()) {
            return Err(Error::Data("score table gather hit a poisoned slot".into()));
        }
        Ok((RetrievalResult { frames, truncated }, stats))
    }
}

/// `out = Q·Kᵀ` for `T×D` queries and `N×D` keys, `out` row-major `T×N`.
pub fn dense_score_into(q: &Matrix, keys: &[f32], dim: usize, out: &mut [f32]) {
    let n = keys.len() / dim.max(1);
    assert_eq!(q.cols(), dim);
    assert_eq!(out.len(), q.rows() * n);
    if q.rows() == 0 || n == 0 {
        return;
    }
    // SAFETY: the slices cover exactly the strided extents passed to sgemm.
    unsafe {
        matrixmultiply::sgemm(
            q.rows(),
            dim,
            n,
            1.0,
            q.as_slice().as_ptr(),
            dim as isize,
            1,
            keys.as_ptr(),
            1,
            dim as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Exact top-`K` retrieval over unquantized keys `K = C·W_k`.
#[derive(Debug, Clone)]
pub struct DenseRetriever {
    keys: Matrix,
    w_q: Matrix,
    block_rows: usize,
}

impl DenseRetriever {
    /// Projects the catalogue embeddings once.
    pub fn new(embeddings: &Matrix, proj: &ProjectionSet) -> Result<Self> {
        Ok(Self {
            keys: embeddings.matmul(proj.w_k())?,
            w_q: proj.w_q().clone(),
            block_rows: DEFAULT_BLOCK_ROWS,
        })
    }

    pub fn keys(&self) -> &Matrix {
        &self.keys
    }

    pub fn retrieve(&self, x: &Matrix, k: usize) -> Result<RetrievalResult> {
        if k == 0 {
            return input("K must be at least 1");
        }
        let rows = self.keys.rows();
        if rows == 0 {
            return input("no keys");
        }
        let q = x.matmul(&self.w_q)?;
        let truncated = k > rows;
        let k = k.min(rows);
        let d = self.keys.cols();
        let mut heaps: Vec<TopK> = (0..q.rows()).map(|_| TopK::new(k)).collect();
        let mut scores = vec![0f32; q.rows() * self.block_rows];
        let mut start = 0;
        while start < rows {
            let end = (start + self.block_rows).min(rows);
            let n = end - start;
            let out = &mut scores[..q.rows() * n];
            dense_score_into(&q, &self.keys.as_slice()[start * d..end * d], d, out);
            for (t, heap) in heaps.iter_mut().enumerate() {
                for (j, &s) in out[t * n..(t + 1) * n].iter().enumerate() {
                    heap.push((start + j) as u32, s as f64);
                }
            }
            start = end;
        }
        let frames: Vec<Vec<Hit>> = heaps.into_iter().map(TopK::into_sorted).collect();
        if frames.iter().flatten().any(|h| h.score.is_nan()) {
            return Err(Error::Data("non-finite dense score".into()));
        }
        Ok(RetrievalResult { frames, truncated })
    }
}

/// Fused top-`K` retrieval of `x` against a packed index; the bias term is omitted.
pub fn topk_retrieve(x: &Matrix, index: &PackedIndex, k: usize) -> Result<RetrievalResult> {
    Retriever::new(index)?.retrieve(x, k)
}

/// Union of the per-frame hit sets with `backoff_id` removed.
pub fn union_retrieved(result: &RetrievalResult, backoff_id: u32) -> BTreeSet<u32> {
    result
        .frames
        .iter()
        .flatten()
        .map(|h| h.id)
        .filter(|&id| id != backoff_id)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fsq::{pack_codes, quantize, reconstruct};
    use crate::linalg::dot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(dim: usize, groups: usize, levels: &[u32]) -> FsqConfig {
        FsqConfig::new(dim, groups, LevelSpec::new(levels.to_vec()).unwrap()).unwrap()
    }

    fn scaled_params(cfg: FsqConfig, seed: u64, scale: f32) -> FsqParams {
        let mut p = FsqParams::init(cfg, seed);
        p.as_flat_mut().iter_mut().for_each(|v| *v *= scale);
        p
    }

    fn random_codes(cfg: &FsqConfig, rows: usize, rng: &mut ChaCha8Rng) -> CodeMatrix {
        let mut m = CodeMatrix::new(cfg.groups());
        let levels = cfg.levels().levels();
        for _ in 0..rows {
            let codes: Vec<u16> = (0..cfg.code_len())
                .map(|k| rng.random_range(0..levels[k % levels.len()] as u16))
                .collect();
            let cv = CodeVector::new(codes, cfg).unwrap();
            m.push_row(&pack_codes(&cv, cfg).unwrap()).unwrap();
        }
        m
    }

    /// `q · (z W_k)` through an explicit reconstruction.
    fn exact_score(q: &[f32], z: &[f32], proj: &ProjectionSet) -> f64 {
        let key: Vec<f64> = (0..z.len())
            .map(|c| (0..z.len()).map(|r| z[r] as f64 * proj.w_k().get(r, c) as f64).sum())
            .collect();
        q.iter().zip(&key).map(|(&a, &b)| a as f64 * b).sum()
    }

    #[test]
    fn identity_wk_columns_are_a_out() {
        let c = cfg(8, 2, &[3, 3]);
        let p = scaled_params(c, 1, 1.0);
        let cols = precompute_columns(&p, &ProjectionSet::identity(8)).unwrap();
        for g in 0..2 {
            for i in 0..2 {
                for k in 0..4 {
                    assert_eq!(cols.column(g, i)[k], p.a_out(g)[k * 2 + i] as f64);
                }
            }
            let b: Vec<f64> = p.b_out(g).iter().map(|&v| v as f64).collect();
            assert_eq!(cols.bias(g), &b[..]);
        }
    }

    #[test]
    fn columns_match_reference_product_and_are_deterministic() {
        let c = cfg(8, 2, &[5, 3]);
        let p = scaled_params(c, 2, 1.0);
        let proj = ProjectionSet::random(8, 2, 3).unwrap();
        let cols = precompute_columns(&p, &proj).unwrap();
        for g in 0..2 {
            for i in 0..2 {
                for kk in 0..4 {
                    let mut s = 0f64;
                    for k in 0..4 {
                        s += p.a_out(g)[k * 2 + i] as f64 * proj.w_k().get(g * 4 + k, g * 4 + kk) as f64;
                    }
                    assert!((cols.column(g, i)[kk] - s).abs() < 1e-12);
                }
            }
        }
        assert_eq!(cols, precompute_columns(&p, &proj).unwrap());
        let full = ProjectionSet::random(8, 1, 3).unwrap();
        assert!(matches!(precompute_columns(&p, &full), Err(Error::Config(_))));
    }

    #[test]
    fn zero_query_gives_zero_table() {
        let c = cfg(8, 2, &[5, 3]);
        let cols = precompute_columns(&scaled_params(c, 3, 1.0), &ProjectionSet::identity(8)).unwrap();
        let t = build_score_table(&[0.0; 8], &cols).unwrap();
        assert_eq!(t.len(), 2 * 2 * 8);
        for g in 0..2 {
            for (i, l) in [5usize, 3].into_iter().enumerate() {
                for code in 0..8 {
                    let v = t.entry(g, i, code);
                    if code < l {
                        assert_eq!(v, 0.0);
                    } else {
                        assert!(v.is_nan());
                    }
                }
            }
        }
        assert_eq!(t.bias(), 0.0);
    }

    #[test]
    fn table_entries_by_hand_d4_l3() {
        let c = cfg(4, 1, &[3]);
        let p = scaled_params(c, 4, 1.0);
        let cols = precompute_columns(&p, &ProjectionSet::identity(4)).unwrap();
        let q = [0.5f32, -1.0, 2.0, 0.25];
        let t = build_score_table(&q, &cols).unwrap();
        let a: Vec<f64> = (0..4).map(|k| p.a_out(0)[k] as f64).collect();
        let qa: f64 = q.iter().zip(&a).map(|(&x, &y)| x as f64 * y).sum();
        assert!((t.entry(0, 0, 0) + qa).abs() < 1e-12);
        assert_eq!(t.entry(0, 0, 1), 0.0);
        assert!((t.entry(0, 0, 2) - qa).abs() < 1e-12);
    }

    #[test]
    fn center_codes_contribute_zero() {
        let c = cfg(8, 2, &[5, 3]);
        let p = scaled_params(c.clone(), 5, 1.0);
        let cols = precompute_columns(&p, &ProjectionSet::identity(8)).unwrap();
        let q: Vec<f32> = (0..8).map(|i| i as f32 - 3.5).collect();
        let t = build_score_table(&q, &cols).unwrap();
        let cv = CodeVector::new(vec![2, 1, 2, 1], &c).unwrap();
        let row = pack_codes(&cv, &c).unwrap();
        assert_eq!(approx_score(&t, &row, false, c.levels()).unwrap(), 0.0);
        assert_eq!(approx_score_codes(&t, &cv, true), t.bias());
        assert!(matches!(
            approx_score(&t, &[0b111, 0], false, c.levels()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn approx_score_equals_reconstruction_path() {
        let c = cfg(8, 2, &[3, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for seed in 0..20 {
            let p = scaled_params(c.clone(), seed, 2.0);
            let proj = ProjectionSet::random(8, 2, seed + 100).unwrap();
            let cols = precompute_columns(&p, &proj).unwrap();
            let codes = random_codes(&c, 10, &mut rng);
            let q: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let t = build_score_table(&q, &cols).unwrap();
            for j in 0..codes.rows() {
                let z = reconstruct(&codes.unpack_row(j, &c).unwrap(), &p).unwrap();
                let want = exact_score(&q, &z, &proj);
                let got = approx_score(&t, codes.row(j), true, c.levels()).unwrap();
                assert!((got - want).abs() <= 1e-4 * want.abs().max(1.0), "{got} vs {want}");
            }
        }
    }

    #[test]
    fn bias_is_constant_offset() {
        let c = cfg(16, 4, &[8, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = scaled_params(c.clone(), 8, 1.0);
        // non-zero output biases
        for g in 0..4 {
            let range = {
                let layout = crate::fsq::GroupLayout::of(&c);
                let n = layout.block_len();
                let r = layout.b_out();
                g * n + r.start..g * n + r.end
            };
            for v in &mut p.as_flat_mut()[range] {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let proj = ProjectionSet::random(16, 4, 9).unwrap();
        let cols = precompute_columns(&p, &proj).unwrap();
        let q: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = build_score_table(&q, &cols).unwrap();
        assert!(t.bias().abs() > 1e-3);
        let codes = random_codes(&c, 100, &mut rng);
        for j in 0..100 {
            let with = approx_score(&t, codes.row(j), true, c.levels()).unwrap();
            let without = approx_score(&t, codes.row(j), false, c.levels()).unwrap();
            assert!(((with - without) - t.bias()).abs() < 1e-12);
        }
    }

    #[test]
    fn topk_heap_orders_and_breaks_ties_by_id() {
        let mut h = TopK::new(3);
        for (id, s) in [(5, 1.0), (1, 2.0), (3, 1.0), (2, 1.0), (4, 0.5), (0, 2.0)] {
            h.push(id, s);
        }
        let ids: Vec<u32> = h.into_sorted().iter().map(|h| h.id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    fn brute_force(q: &Matrix, codes: &CodeMatrix, p: &FsqParams, proj: &ProjectionSet, k: usize) -> Vec<Vec<Hit>> {
        let z: Vec<Vec<f32>> = (0..codes.rows())
            .map(|j| reconstruct(&codes.unpack_row(j, p.config()).unwrap(), p).unwrap())
            .collect();
        (0..q.rows())
            .map(|t| {
                let mut all: Vec<Hit> = z
                    .iter()
                    .enumerate()
                    .map(|(j, z)| Hit {
                        id: j as u32,
                        score: exact_score(q.row(t), z, proj),
                    })
                    .collect();
                all.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
                all.truncate(k);
                all
            })
            .collect()
    }

    #[test]
    fn fused_kernel_matches_brute_force() {
        let c = cfg(16, 4, &[3, 3]);
        let p = scaled_params(c.clone(), 10, 2.0);
        let proj = ProjectionSet::random(16, 4, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let codes = random_codes(&c, 200, &mut rng);
        let x = Matrix::random_normal(5, 16, 1.0, &mut rng);
        let r = Retriever::from_parts(&codes, &p, &proj).unwrap().with_block_rows(37);
        let (got, stats) = r.retrieve_with_stats(&x, 5).unwrap();
        let q = x.matmul(proj.w_q()).unwrap();
        let want = brute_force(&q, &codes, &p, &proj, 5);
        for t in 0..5 {
            let bias = build_score_table(q.row(t), r.columns()).unwrap().bias();
            let got_ids: BTreeSet<u32> = got.frames[t].iter().map(|h| h.id).collect();
            let want_ids: BTreeSet<u32> = want[t].iter().map(|h| h.id).collect();
            assert_eq!(got_ids, want_ids);
            for (g, w) in got.frames[t].iter().zip(&want[t]) {
                assert!((g.score + bias - w.score).abs() <= 1e-4 * w.score.abs().max(1.0));
            }
        }
        assert_eq!(stats.rows_scanned, 5 * 200);
        assert_eq!(stats.gathers, 5 * 200 * 8);
        assert!(!got.truncated);
    }

    #[test]
    fn lane_kernel_matches_scalar_kernel() {
        let c = cfg(32, 4, &[8, 5, 5, 5]);
        let p = scaled_params(c.clone(), 20, 4.0);
        let proj = ProjectionSet::random(32, 4, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut codes = random_codes(&c, 1003, &mut rng);
        // exact duplicates straddling block and lane boundaries
        for j in [7usize, 8, 100, 700] {
            let dup = codes.row(3).to_vec();
            codes.words[j * 4..(j + 1) * 4].copy_from_slice(&dup);
        }
        let x = Matrix::random_normal(6, 32, 1.0, &mut rng);
        for block in [64, 4096] {
            let fast = Retriever::from_parts(&codes, &p, &proj).unwrap().with_block_rows(block);
            let slow = Retriever::from_parts(&codes, &p, &proj).unwrap().with_block_rows(block).with_scalar_kernel();
            for k in [1, 5, 40] {
                assert_eq!(fast.retrieve(&x, k).unwrap(), slow.retrieve(&x, k).unwrap());
            }
            let q = x.matmul(proj.w_q()).unwrap();
            let mut a = vec![0f32; 6 * 1003];
            let mut b = vec![0f32; 6 * 1003];
            fast.score_all(&q, &mut Vec::new(), &mut a).unwrap();
            slow.score_all(&q, &mut Vec::new(), &mut b).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() <= 1e-5 * v.abs().max(1.0));
            }
        }
    }

    #[test]
    fn duplicates_rank_together_by_id() {
        let c = cfg(8, 2, &[5, 5]);
        let p = scaled_params(c.clone(), 13, 2.0);
        let proj = ProjectionSet::identity(8);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut codes = random_codes(&c, 30, &mut rng);
        let x = Matrix::random_normal(1, 8, 1.0, &mut rng);
        let r = Retriever::from_parts(&codes, &p, &proj).unwrap();
        let best = r.retrieve(&x, 1).unwrap().frames[0][0];
        let dup = codes.row(best.id as usize).to_vec();
        codes.push_row(&dup).unwrap();
        let r = Retriever::from_parts(&codes, &p, &proj).unwrap();
        let hits = r.retrieve(&x, 3).unwrap().frames[0].clone();
        assert_eq!(hits[0].id, best.id);
        assert_eq!(hits[1].id, 30);
        assert_eq!(hits[0].score, hits[1].score);
    }

    #[test]
    fn k_larger_than_catalogue_is_truncated() {
        let c = cfg(4, 1, &[3, 3]);
        let p = scaled_params(c.clone(), 15, 1.0);
        let proj = ProjectionSet::identity(4);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let codes = random_codes(&c, 1, &mut rng);
        let r = Retriever::from_parts(&codes, &p, &proj).unwrap();
        let x = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let res = r.retrieve(&x, 5).unwrap();
        assert!(res.truncated);
        assert!(res.frames.iter().all(|f| f.len() == 1 && f[0].id == 0));
        assert!(r.retrieve(&x, 0).is_err());
        assert!(union_retrieved(&res, 0).is_empty());
    }

    #[test]
    fn union_drops_backoff() {
        let hit = |id| Hit { id, score: 0.0 };
        let res = RetrievalResult {
            frames: vec![vec![hit(1), hit(2)], vec![hit(2), hit(3)], vec![hit(0)]],
            truncated: false,
        };
        assert_eq!(union_retrieved(&res, 0).into_iter().collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn poisoned_gather_is_reported() {
        let c = cfg(4, 1, &[3, 3]);
        let p = scaled_params(c, 17, 1.0);
        let proj = ProjectionSet::identity(4);
        // field value 3 is outside level 3 and lands on a NaN slot
        let codes = CodeMatrix::from_words(1, vec![0b000_011]).unwrap();
        let r = Retriever::from_parts(&codes, &p, &proj).unwrap();
        let x = Matrix::from_vec(1, 4, vec![1.0; 4]).unwrap();
        assert!(matches!(r.retrieve(&x, 1), Err(Error::Data(_))));
    }

    #[test]
    fn quantize_then_score_agrees_with_dot() {
        let c = cfg(8, 2, &[8, 5, 5]);
        let p = scaled_params(c.clone(), 18, 3.0);
        let proj = ProjectionSet::identity(8);
        let cols = precompute_columns(&p, &proj).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let e: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let qz = quantize(&e, &p).unwrap();
        let q: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = build_score_table(&q, &cols).unwrap();
        let got = approx_score_codes(&t, &qz.codes, true);
        assert!((got - dot(&q, &qz.z)).abs() < 1e-5);
    }
}
