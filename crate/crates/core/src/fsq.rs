//! Grouped finite scalar quantization.
//!
//! An embedding of dimension `D` is split into `G` equal sub-vectors. Each sub-vector goes
//! through an input affine map onto `|L|` scalars, every scalar is bounded with `tanh` and
//! rounded onto its own small integer grid, the integers are normalized to `[-1, 1]`, and an
//! output affine map lifts them back to the sub-vector dimension.
//!
//! Codes are kept level-local: the code for level `i` lives in `0..l_i`.

use num_integer::Integer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{input, Error, Result};

/// Bits used per level inside a packed group word.
pub const BITS_PER_LEVEL: u32 = 3;
/// Largest level count a 3-bit field can hold.
pub const MAX_PACKED_LEVEL: u32 = 1 << BITS_PER_LEVEL;
/// Most levels that fit into one 16-bit group word.
pub const MAX_PACKED_LEVELS: usize = 16 / BITS_PER_LEVEL as usize;

/// Guard against `atanh(1)` for two-level dimensions in the half-offset bound.
const EVEN_LEVEL_EPS: f32 = 1e-3;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LevelSpec {
    levels: Vec<u32>,
}

impl LevelSpec {
    pub fn new(levels: Vec<u32>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("level list is empty".into()));
        }
        if let Some(&l) = levels.iter().find(|&&l| l < 2) {
            return Err(Error::Config(format!("level {l} < 2")));
        }
        if levels.iter().any(|&l| l > u16::MAX as u32) {
            return Err(Error::Config("level count exceeds 65535".into()));
        }
        let product = levels
            .iter()
            .try_fold(1u64, |acc, &l| acc.checked_mul(l as u64));
        if product.is_none() {
            return Err(Error::Config("codebook size overflows 64 bits".into()));
        }
        Ok(Self { levels })
    }

    /// Parses a comma separated list such as `8,5,5,5`.
    pub fn parse(text: &str) -> Result<Self> {
        let levels = text
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<u32>()
                    .map_err(|_| Error::Config(format!("bad level '{}'", s.trim())))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(levels)
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn max_level(&self) -> u32 {
        self.levels.iter().copied().max().unwrap_or(0)
    }

    /// Size of the implicit codebook of one group, `Π l_i`.
    pub fn capacity_per_group(&self) -> u64 {
        self.levels.iter().map(|&l| l as u64).product()
    }

    /// Whether one group fits into a 16-bit word at 3 bits per level.
    pub fn is_packable(&self) -> bool {
        self.levels.len() <= MAX_PACKED_LEVELS && self.max_level() <= MAX_PACKED_LEVEL
    }

    pub fn value_set(&self) -> ValueSet {
        ValueSet::new(self)
    }
}

impl std::fmt::Display for LevelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.levels.iter().map(u32::to_string).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FsqConfig {
    dim: usize,
    groups: usize,
    levels: LevelSpec,
}

impl FsqConfig {
    pub fn new(dim: usize, groups: usize, levels: LevelSpec) -> Result<Self> {
        if dim == 0 || groups == 0 {
            return Err(Error::Config("dimension and group count must be positive".into()));
        }
        if dim % groups != 0 {
            return Err(Error::Config(format!(
                "{groups} groups do not divide dimension {dim}"
            )));
        }
        if dim / groups < levels.len() {
            log::warn!(
                "sub-vector dimension {} is smaller than the {} quantized levels",
                dim / groups,
                levels.len()
            );
        }
        Ok(Self { dim, groups, levels })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn levels(&self) -> &LevelSpec {
        &self.levels
    }

    /// Dimension of one group's sub-vector, `D / G`.
    pub fn sub_dim(&self) -> usize {
        self.dim / self.groups
    }

    /// Number of integer codes per embedding, `G·|L|`.
    pub fn code_len(&self) -> usize {
        self.groups * self.levels.len()
    }

    pub fn capacity(&self) -> Capacity {
        capacity(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capacity {
    pub per_group: u64,
    /// `G · log2(per_group)`; the total codebook size itself overflows for realistic `G`.
    pub total_log2: f64,
}

pub fn capacity(config: &FsqConfig) -> Capacity {
    let per_group = config.levels.capacity_per_group();
    Capacity {
        per_group,
        total_log2: config.groups as f64 * (per_group as f64).log2(),
    }
}

/// The sorted, deduplicated set of normalized values any level can produce.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSet {
    values: Vec<f32>,
    /// `index[i][c]` is the position in `values` of level `i`'s code `c`.
    index: Vec<Vec<u16>>,
}

impl ValueSet {
    fn new(spec: &LevelSpec) -> Self {
        // normalize(c, l) = (2c - (l-1)) / (l-1); dedup on the reduced fraction
        let reduced = |c: u32, l: u32| {
            let num = 2 * c as i64 - (l as i64 - 1);
            let den = l as i64 - 1;
            let g = num.gcd(&den);
            (num / g, den / g)
        };
        let mut fracs: Vec<(i64, i64)> = spec
            .levels
            .iter()
            .flat_map(|&l| (0..l).map(move |c| reduced(c, l)))
            .collect();
        fracs.sort_by(|a, b| (a.0 * b.1).cmp(&(b.0 * a.1)));
        fracs.dedup();
        let values = fracs.iter().map(|&(n, d)| n as f32 / d as f32).collect();
        let index = spec
            .levels
            .iter()
            .map(|&l| {
                (0..l)
                    .map(|c| {
                        let f = reduced(c, l);
                        fracs.iter().position(|&g| g == f).expect("value present") as u16
                    })
                    .collect()
            })
            .collect();
        Self { values, index }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Position in [`values`](Self::values) of level `level`'s code `code`.
    pub fn index_of(&self, level: usize, code: u16) -> usize {
        self.index[level][code as usize] as usize
    }
}

/// Bounds `x` with `tanh` and rounds it onto the `level` integer grid, returning a
/// level-local code in `0..level`.
///
/// Odd levels use `round(⌊l/2⌋·tanh x)`. Even levels use the half-offset bound
/// `round(h·tanh(x + atanh(½/h)) − ½)` with `h = (l−1)(1+ε)/2`, which attains exactly `l`
/// integers.
pub fn bound_round(x: f32, level: u32) -> Result<u16> {
    if !x.is_finite() {
        return input(format!("non-finite pre-activation {x}"));
    }
    if level < 2 {
        return input(format!("level {level} < 2"));
    }
    let center = (level / 2) as i64;
    let rounded = bounded(x, level).round() as i64;
    Ok((rounded + center).clamp(0, level as i64 - 1) as u16)
}

/// The continuous bounded value before rounding, centred so that `round(..) + ⌊l/2⌋` is the
/// level-local code.
#[inline]
pub(crate) fn bounded(x: f32, level: u32) -> f32 {
    let (scale, shift, offset) = bound_coefficients(level);
    scale * (x + shift).tanh() - offset
}

/// `(scale, shift, offset)` of `scale·tanh(x + shift) − offset` for one level.
#[inline]
pub(crate) fn bound_coefficients(level: u32) -> (f32, f32, f32) {
    if level % 2 == 1 {
        ((level / 2) as f32, 0.0, 0.0)
    } else {
        let half = (level - 1) as f32 * (1.0 + EVEN_LEVEL_EPS) / 2.0;
        let offset = 0.5;
        (half, (offset / half).atanh(), offset)
    }
}

/// Maps a level-local code to `2c/(l−1) − 1`.
pub fn normalize(code: u16, level: u32) -> Result<f32> {
    if level < 2 {
        return input(format!("level {level} < 2"));
    }
    if code as u32 >= level {
        return input(format!("code {code} out of range for level {level}"));
    }
    Ok(normalize_unchecked(code, level))
}

#[inline]
pub(crate) fn normalize_unchecked(code: u16, level: u32) -> f32 {
    let den = level as i32 - 1;
    (2 * code as i32 - den) as f32 / den as f32
}

pub(crate) fn normalize_wide(code: u16, level: u32) -> f64 {
    let den = level as i32 - 1;
    (2 * code as i32 - den) as f64 / den as f64
}

/// Per-group affine maps of a quantizer.
///
/// Stored as one flat buffer; each group's block is laid out as
/// `A_in (|L|×d, row-major) | b_in (|L|) | A_out (d×|L|, row-major) | b_out (d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FsqParams {
    config: FsqConfig,
    data: Vec<f32>,
}

/// Offsets of the four tensors inside one group block.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GroupLayout {
    pub levels: usize,
    pub sub_dim: usize,
}

impl GroupLayout {
    pub fn of(config: &FsqConfig) -> Self {
        Self {
            levels: config.levels.len(),
            sub_dim: config.sub_dim(),
        }
    }
    pub fn block_len(&self) -> usize {
        2 * self.levels * self.sub_dim + self.levels + self.sub_dim
    }
    pub fn a_in(&self) -> std::ops::Range<usize> {
        0..self.levels * self.sub_dim
    }
    pub fn b_in(&self) -> std::ops::Range<usize> {
        let s = self.levels * self.sub_dim;
        s..s + self.levels
    }
    pub fn a_out(&self) -> std::ops::Range<usize> {
        let s = self.levels * self.sub_dim + self.levels;
        s..s + self.levels * self.sub_dim
    }
    pub fn b_out(&self) -> std::ops::Range<usize> {
        let s = 2 * self.levels * self.sub_dim + self.levels;
        s..s + self.sub_dim
    }
}

impl FsqParams {
    pub fn from_flat(config: FsqConfig, data: Vec<f32>) -> Result<Self> {
        let expected = GroupLayout::of(&config).block_len() * config.groups;
        if data.len() != expected {
            return input(format!(
                "parameter buffer has {} entries, expected {expected}",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return input("parameters contain non-finite entries");
        }
        Ok(Self { config, data })
    }

    /// Fan-in scaled uniform initialization: affine matrices in `±1/√(D/G)`, zero biases.
    pub fn init(config: FsqConfig, seed: u64) -> Self {
        let layout = GroupLayout::of(&config);
        let bound = 1.0 / (layout.sub_dim as f32).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0f32; layout.block_len() * config.groups];
        for block in data.chunks_exact_mut(layout.block_len()) {
            for v in &mut block[layout.a_in()] {
                *v = rng.random_range(-bound..=bound);
            }
            for v in &mut block[layout.a_out()] {
                *v = rng.random_range(-bound..=bound);
            }
        }
        Self { config, data }
    }

    /// `A_in` and `A_out` are identity blocks (padded with zeros), biases are zero.
    pub fn identity(config: FsqConfig) -> Self {
        let layout = GroupLayout::of(&config);
        let mut data = vec![0f32; layout.block_len() * config.groups];
        for block in data.chunks_exact_mut(layout.block_len()) {
            let n = layout.levels.min(layout.sub_dim);
            for i in 0..n {
                block[layout.a_in().start + i * layout.sub_dim + i] = 1.0;
                block[layout.a_out().start + i * layout.levels + i] = 1.0;
            }
        }
        Self { config, data }
    }

    pub fn config(&self) -> &FsqConfig {
        &self.config
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }

    pub fn as_flat_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    fn block(&self, g: usize) -> &[f32] {
        let n = GroupLayout::of(&self.config).block_len();
        &self.data[g * n..(g + 1) * n]
    }

    /// `A_in^g`, `|L|×(D/G)` row-major.
    pub fn a_in(&self, g: usize) -> &[f32] {
        &self.block(g)[GroupLayout::of(&self.config).a_in()]
    }

    pub fn b_in(&self, g: usize) -> &[f32] {
        &self.block(g)[GroupLayout::of(&self.config).b_in()]
    }

    /// `A_out^g`, `(D/G)×|L|` row-major.
    pub fn a_out(&self, g: usize) -> &[f32] {
        &self.block(g)[GroupLayout::of(&self.config).a_out()]
    }

    pub fn b_out(&self, g: usize) -> &[f32] {
        &self.block(g)[GroupLayout::of(&self.config).b_out()]
    }
}

/// `G·|L|` level-local codes, group-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CodeVector {
    codes: Vec<u16>,
}

impl CodeVector {
    pub fn new(codes: Vec<u16>, config: &FsqConfig) -> Result<Self> {
        let cv = Self { codes };
        cv.validate(config)?;
        Ok(cv)
    }

    pub fn validate(&self, config: &FsqConfig) -> Result<()> {
        if self.codes.len() != config.code_len() {
            return input(format!(
                "code vector has {} entries, expected {}",
                self.codes.len(),
                config.code_len()
            ));
        }
        let levels = config.levels.levels();
        for (k, &c) in self.codes.iter().enumerate() {
            let l = levels[k % levels.len()];
            if c as u32 >= l {
                return input(format!(
                    "code {c} at group {}, level {} exceeds range 0..{l}",
                    k / levels.len(),
                    k % levels.len()
                ));
            }
        }
        Ok(())
    }

    pub fn as_slice(&self) -> &[u16] {
        &self.codes
    }

    pub fn group(&self, g: usize, levels: usize) -> &[u16] {
        &self.codes[g * levels..(g + 1) * levels]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub codes: CodeVector,
    pub z: Vec<f32>,
}

/// Quantizes one embedding: affine-in, bound and round, normalize, affine-out, regroup.
pub fn quantize(c: &[f32], params: &FsqParams) -> Result<Quantized> {
    let config = &params.config;
    if c.len() != config.dim {
        return input(format!(
            "embedding has dimension {}, expected {}",
            c.len(),
            config.dim
        ));
    }
    let levels = config.levels.levels();
    let d = config.sub_dim();
    let mut codes = Vec::with_capacity(config.code_len());
    for g in 0..config.groups {
        let sub = &c[g * d..(g + 1) * d];
        let pre = pre_activation(params, g, sub);
        for (i, &l) in levels.iter().enumerate() {
            codes.push(bound_round(pre[i], l)?);
        }
    }
    let mut z = vec![0f32; config.dim];
    for g in 0..config.groups {
        decode_group(params, g, &codes[g * levels.len()..(g + 1) * levels.len()], &mut z[g * d..(g + 1) * d]);
    }
    Ok(Quantized {
        codes: CodeVector { codes },
        z,
    })
}

/// Reconstructs `z` from codes; bit-identical to the `z` produced by [`quantize`].
pub fn reconstruct(codes: &CodeVector, params: &FsqParams) -> Result<Vec<f32>> {
    let config = &params.config;
    codes.validate(config)?;
    let nl = config.levels.len();
    let d = config.sub_dim();
    let mut z = vec![0f32; config.dim];
    for g in 0..config.groups {
        decode_group(params, g, codes.group(g, nl), &mut z[g * d..(g + 1) * d]);
    }
    Ok(z)
}

/// `A_in^g c^g + b_in^g`, accumulated in `f64`.
pub(crate) fn pre_activation(params: &FsqParams, g: usize, sub: &[f32]) -> Vec<f32> {
    pre_activation_f64(params, g, sub)
        .into_iter()
        .map(|v| v as f32)
        .collect()
}

pub(crate) fn pre_activation_f64(params: &FsqParams, g: usize, sub: &[f32]) -> Vec<f64> {
    let d = sub.len();
    let a_in = params.a_in(g);
    params
        .b_in(g)
        .iter()
        .enumerate()
        .map(|(i, &b)| crate::linalg::dot(&a_in[i * d..(i + 1) * d], sub) + b as f64)
        .collect()
}

/// Writes `A_out^g n^g + b_out^g` for one group's codes into `out`.
fn decode_group(params: &FsqParams, g: usize, codes: &[u16], out: &mut [f32]) {
    let levels = params.config.levels.levels();
    let n: Vec<f64> = codes
        .iter()
        .zip(levels)
        .map(|(&c, &l)| normalize_wide(c, l))
        .collect();
    let a_out = params.a_out(g);
    let b_out = params.b_out(g);
    let nl = levels.len();
    for (k, o) in out.iter_mut().enumerate() {
        let row = &a_out[k * nl..(k + 1) * nl];
        let s: f64 = row.iter().zip(&n).map(|(&a, &v)| a as f64 * v).sum();
        *o = (s + b_out[k] as f64) as f32;
    }
}

/// Packs each group's codes into one 16-bit word, 3 bits per level, level 0 in the low bits.
pub fn pack_codes(codes: &CodeVector, config: &FsqConfig) -> Result<Vec<u16>> {
    let mut out = Vec::with_capacity(config.groups);
    pack_codes_into(codes, config, &mut out)?;
    Ok(out)
}

pub(crate) fn pack_codes_into(codes: &CodeVector, config: &FsqConfig, out: &mut Vec<u16>) -> Result<()> {
    ensure_packable(config.levels())?;
    codes.validate(config)?;
    let nl = config.levels.len();
    for g in 0..config.groups {
        let word = codes
            .group(g, nl)
            .iter()
            .enumerate()
            .fold(0u16, |w, (i, &c)| w | (c << (BITS_PER_LEVEL * i as u32)));
        out.push(word);
    }
    Ok(())
}

pub fn unpack_codes(words: &[u16], config: &FsqConfig) -> Result<CodeVector> {
    ensure_packable(config.levels())?;
    if words.len() != config.groups {
        return input(format!(
            "{} packed words, expected {}",
            words.len(),
            config.groups
        ));
    }
    let levels = config.levels.levels();
    let used_bits = BITS_PER_LEVEL * levels.len() as u32;
    let mut codes = Vec::with_capacity(config.code_len());
    for (g, &w) in words.iter().enumerate() {
        if used_bits < 16 && w >> used_bits != 0 {
            return Err(Error::Data(format!("group {g} word {w:#06x} has stray high bits")));
        }
        for (i, &l) in levels.iter().enumerate() {
            let c = (w >> (BITS_PER_LEVEL * i as u32)) & (MAX_PACKED_LEVEL as u16 - 1);
            if c as u32 >= l {
                return Err(Error::Data(format!(
                    "group {g} word {w:#06x}: code {c} exceeds level {l}"
                )));
            }
            codes.push(c);
        }
    }
    Ok(CodeVector { codes })
}

pub fn ensure_packable(spec: &LevelSpec) -> Result<()> {
    if spec.is_packable() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "levels {spec} cannot be packed into 16-bit words (need |L| <= {MAX_PACKED_LEVELS} and every level <= {MAX_PACKED_LEVEL})"
        )))
    }
}
