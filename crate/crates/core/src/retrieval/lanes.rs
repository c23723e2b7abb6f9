//! Eight-wide table lookups with `vpermps`.
//!
//! A level's table row holds at most eight entries, so it fits one 256-bit register and a
//! permute looks it up for eight phrases at once. Lookups run on an `f32` copy of the table;
//! rows whose approximate score comes within `slack` of the heap threshold are rescored
//! with the exact `f64` table, so results match the scalar kernel exactly.

use std::arch::x86_64::*;

use super::{ScoreTable, TopK};
use crate::fsq::MAX_PACKED_LEVEL;

const LANES: usize = 8;
const S: usize = MAX_PACKED_LEVEL as usize;

pub(super) fn available() -> bool {
    is_x86_feature_detected!("avx2")
}

/// `f32` copy of a [`ScoreTable`] plus a bound on `|f32 score − f64 score|`.
#[derive(Debug, Default)]
pub(super) struct LaneTable {
    entries: Vec<f32>,
    slack: f64,
}

impl LaneTable {
    pub(super) fn fill(&mut self, table: &ScoreTable, levels: &[u32]) {
        self.entries.clear();
        self.entries.extend(table.entries.iter().map(|&e| e as f32));
        let mut magnitude = 0f64;
        for g in 0..table.groups {
            for (i, &l) in levels.iter().enumerate() {
                let m = (0..l as usize).map(|c| table.entry(g, i, c).abs()).fold(0.0, f64::max);
                magnitude += m;
            }
        }
        let terms = (table.groups * table.levels) as f64;
        // f32 rounding of each entry and of every partial sum, doubled
        self.slack = 2.0 * (2.0 * terms + 4.0) * f32::EPSILON as f64 * magnitude;
    }
}

/// Row-major block of packed rows rearranged group-major, `[g][row]`.
pub(super) fn transpose(words: &[u16], groups: usize, rows: usize, out: &mut Vec<u16>) {
    out.clear();
    out.reserve(groups * rows);
    for g in 0..groups {
        out.extend(words[..groups * rows].iter().skip(g).step_by(groups));
    }
}

fn lower_bound_f32(x: f64) -> f32 {
    let t = x as f32;
    if t as f64 > x {
        t.next_down()
    } else {
        t
    }
}

#[target_feature(enable = "avx2")]
#[inline]
fn lane_scores<const L: usize>(entries: &[f32], cols: &[u16], rows: usize, groups: usize, j: usize) -> __m256 {
    debug_assert!(j + LANES <= rows);
    debug_assert_eq!(entries.len(), groups * L * S);
    let shifts: [__m256i; L] = std::array::from_fn(|i| _mm256_set1_epi32((3 * i) as i32));
    let mut acc = [_mm256_setzero_ps(); L];
    for g in 0..groups {
        let src = &cols[g * rows + j..g * rows + j + LANES];
        // SAFETY: `src` holds eight u16 values, 16 bytes.
        let w = _mm256_cvtepu16_epi32(unsafe { _mm_loadu_si128(src.as_ptr().cast()) });
        let t = &entries[g * L * S..(g + 1) * L * S];
        for i in 0..L {
            // SAFETY: `t[i*8..i*8+8]` is in bounds.
            let row = unsafe { _mm256_loadu_ps(t.as_ptr().add(i * S)) };
            let idx = _mm256_srlv_epi32(w, shifts[i]);
            acc[i] = _mm256_add_ps(acc[i], _mm256_permutevar8x32_ps(row, idx));
        }
    }
    let mut s = acc[0];
    for a in &acc[1..] {
        s = _mm256_add_ps(s, *a);
    }
    s
}

/// Streams `rows - rows % 8` rows of a transposed block into `heap`. `words` is the same
/// block row-major, used for exact rescoring. Returns the number of heap replacements.
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
pub(super) fn scan<const L: usize>(
    lanes: &LaneTable,
    exact: &ScoreTable,
    cols: &[u16],
    words: &[u16],
    rows: usize,
    groups: usize,
    first_id: u32,
    heap: &mut TopK,
) -> u64 {
    let mut replaced = 0;
    let mut cut = _mm256_set1_ps(lower_bound_f32(heap.threshold() - lanes.slack));
    let mut j = 0;
    while j + LANES <= rows {
        let s = lane_scores::<L>(&lanes.entries, cols, rows, groups, j);
        // not-less-than, unordered: NaN rows are rescored and surface in the result
        let mut mask = _mm256_movemask_ps(_mm256_cmp_ps::<_CMP_NLT_UQ>(s, cut)) as u32;
        while mask != 0 {
            let b = mask.trailing_zeros() as usize;
            mask &= mask - 1;
            let r = j + b;
            let score = exact.score_packed(&words[r * groups..(r + 1) * groups]);
            if heap.push(first_id + r as u32, score) {
                replaced += 1;
                cut = _mm256_set1_ps(lower_bound_f32(heap.threshold() - lanes.slack));
            }
        }
        j += LANES;
    }
    replaced
}

/// Approximate scores of the first `rows - rows % 8` rows of a transposed block.
#[target_feature(enable = "avx2")]
pub(super) fn scores<const L: usize>(lanes: &LaneTable, cols: &[u16], rows: usize, groups: usize, out: &mut [f32]) {
    let mut j = 0;
    while j + LANES <= rows {
        let s = lane_scores::<L>(&lanes.entries, cols, rows, groups, j);
        let dst = &mut out[j..j + LANES];
        // SAFETY: `dst` holds eight f32 values.
        unsafe { _mm256_storeu_ps(dst.as_mut_ptr(), s) };
        j += LANES;
    }
}
