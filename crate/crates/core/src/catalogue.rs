//! Biasing catalogues: phrase lists, enumeration, a synthetic trigram embedder, and the packed
//! index built from them.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

use crate::attention::ProjectionSet;
use crate::error::{input, Error, Result};
use crate::fsq::{ensure_packable, pack_codes_into, quantize, FsqParams};
use crate::retrieval::CodeMatrix;

/// Catalogue id of the back-off entry.
pub const BACKOFF_ID: u32 = 0;

/// Where a catalogue entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Backoff,
    Original,
    /// Produced by enumerating the entry with the given id.
    Enumerated { from: u32 },
}

impl Provenance {
    pub(crate) fn to_word(self) -> u32 {
        match self {
            Provenance::Backoff => 0,
            Provenance::Original => 1,
            Provenance::Enumerated { from } => from + 2,
        }
    }

    pub(crate) fn from_word(w: u32) -> Self {
        match w {
            0 => Provenance::Backoff,
            1 => Provenance::Original,
            n => Provenance::Enumerated { from: n - 2 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogueEntry {
    pub text: String,
    pub provenance: Provenance,
    /// Whether enumeration in [`EnumerateMode::Contacts`] applies to this entry.
    pub contact: bool,
}

/// Which entries get expanded by [`BiasingCatalogue::enumerated`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnumerateMode {
    #[default]
    None,
    /// Only entries marked as contacts.
    Contacts,
    All,
}

impl std::str::FromStr for EnumerateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "contacts" => Ok(Self::Contacts),
            "all" => Ok(Self::All),
            other => input(format!("unknown enumeration mode {other:?}")),
        }
    }
}

/// Ordered phrase list; id 0 is always the back-off entry, stored as the empty string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiasingCatalogue {
    entries: Vec<CatalogueEntry>,
}

impl Default for BiasingCatalogue {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Deserialize)]
struct JsonEntry {
    text: String,
    #[serde(default)]
    kind: Option<String>,
    #[serde(default)]
    enumerated_from: Option<u32>,
}

impl BiasingCatalogue {
    /// A catalogue holding only the back-off entry.
    pub fn new() -> Self {
        Self {
            entries: vec![CatalogueEntry {
                text: String::new(),
                provenance: Provenance::Backoff,
                contact: false,
            }],
        }
    }

    pub fn from_phrases<I, S>(phrases: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut cat = Self::new();
        for p in phrases {
            cat.push(p.into(), Provenance::Original, true)?;
        }
        Ok(cat)
    }

    pub(crate) fn from_entries(entries: Vec<CatalogueEntry>) -> Result<Self> {
        match entries.first() {
            Some(e) if e.text.is_empty() && e.provenance == Provenance::Backoff => {}
            _ => return Err(Error::Data("entry 0 is not the back-off".into())),
        }
        let n = entries.len() as u32;
        for (id, e) in entries.iter().enumerate().skip(1) {
            if e.text.is_empty() || e.provenance == Provenance::Backoff {
                return Err(Error::Data(format!("entry {id} is empty or marked back-off")));
            }
            if let Provenance::Enumerated { from } = e.provenance {
                if from == 0 || from >= n {
                    return Err(Error::Data(format!("entry {id} enumerated from unknown id {from}")));
                }
            }
        }
        Ok(Self { entries })
    }

    /// Appends a phrase and returns its id. Empty text is rejected.
    pub fn push(&mut self, text: String, provenance: Provenance, contact: bool) -> Result<u32> {
        if text.trim().is_empty() {
            return input("catalogue phrases must be non-empty");
        }
        if provenance == Provenance::Backoff {
            return input("only entry 0 may be the back-off");
        }
        let id = self.entries.len() as u32;
        self.entries.push(CatalogueEntry {
            text,
            provenance,
            contact,
        });
        Ok(id)
    }

    /// One phrase per line; blank lines are skipped and every phrase counts as a contact.
    pub fn read_text<R: BufRead>(reader: R) -> Result<Self> {
        let mut cat = Self::new();
        for line in reader.lines() {
            let line = line?;
            let t = line.trim();
            if !t.is_empty() {
                cat.push(t.to_string(), Provenance::Original, true)?;
            }
        }
        Ok(cat)
    }

    /// JSON lines of the form `{"text": .., "kind": "contact", "enumerated_from": id}`, with
    /// the last two fields optional. Ids refer to positions in the resulting catalogue.
    pub fn read_json_lines<R: BufRead>(reader: R) -> Result<Self> {
        let mut cat = Self::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: JsonEntry = serde_json::from_str(&line)
                .map_err(|err| Error::Input(format!("line {}: {err}", n + 1)))?;
            let prov = match e.enumerated_from {
                Some(from) if from == 0 || from as usize >= cat.len() => {
                    return input(format!("line {}: enumerated_from {from} is not an earlier entry", n + 1));
                }
                Some(from) => Provenance::Enumerated { from },
                None => Provenance::Original,
            };
            cat.push(e.text, prov, e.kind.as_deref() == Some("contact"))?;
        }
        Ok(cat)
    }

    /// Number of entries including the back-off.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Always false: the back-off entry is always present.
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CatalogueEntry] {
        &self.entries
    }

    pub fn phrase(&self, id: u32) -> Option<&str> {
        self.entries.get(id as usize).map(|e| e.text.as_str())
    }

    /// Number of distinct non-back-off phrase strings.
    pub fn unique_phrases(&self) -> usize {
        self.entries[1..]
            .iter()
            .map(|e| e.text.as_str())
            .collect::<HashSet<_>>()
            .len()
    }

    /// Copy with selected entries expanded by [`enumerate_phrase`]. New strings are appended
    /// after the existing entries; strings already present anywhere are not added again.
    pub fn enumerated(&self, mode: EnumerateMode) -> Self {
        let mut out = self.clone();
        if mode == EnumerateMode::None {
            return out;
        }
        let mut seen: HashSet<String> = self.entries[1..].iter().map(|e| e.text.clone()).collect();
        for (id, e) in self.entries.iter().enumerate().skip(1) {
            if mode == EnumerateMode::Contacts && !e.contact {
                continue;
            }
            for variant in enumerate_phrase(&e.text).into_iter().skip(1) {
                if seen.insert(variant.clone()) {
                    out.entries.push(CatalogueEntry {
                        text: variant,
                        provenance: Provenance::Enumerated { from: id as u32 },
                        contact: e.contact,
                    });
                }
            }
        }
        out
    }
}

/// Longest phrase (in words) whose word orders are all enumerated.
pub const MAX_PERMUTED_WORDS: usize = 3;

/// Expands a phrase into the variants a speaker might use: the original, each single word, and
/// for short phrases every reordering of the words. Duplicates are removed, original first.
pub fn enumerate_phrase(text: &str) -> Vec<String> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return Vec::new();
    }
    let mut out = vec![words.join(" ")];
    let push = |s: String, out: &mut Vec<String>| {
        if !out.contains(&s) {
            out.push(s);
        }
    };
    for w in &words {
        push(w.to_string(), &mut out);
    }
    if words.len() <= MAX_PERMUTED_WORDS {
        let mut idx: Vec<usize> = (0..words.len()).collect();
        for p in permutations(&mut idx) {
            push(p.iter().map(|&i| words[i]).collect::<Vec<_>>().join(" "), &mut out);
        }
    }
    out
}

/// All orderings of `items` in lexicographic order of positions.
fn permutations(items: &mut [usize]) -> Vec<Vec<usize>> {
    let mut all = vec![items.to_vec()];
    loop {
        let Some(i) = (1..items.len()).rev().find(|&i| items[i - 1] < items[i]) else {
            return all;
        };
        let j = (i..items.len()).rev().find(|&j| items[j] > items[i - 1]).unwrap();
        items.swap(i - 1, j);
        items[i..].reverse();
        all.push(items.to_vec());
    }
}

const SYLLABLES: [&str; 40] = [
    "ka", "ri", "mo", "sen", "ta", "lu", "vi", "dor", "ne", "pa", "shi", "ro", "bel", "an", "qu",
    "ex", "zi", "mar", "to", "el", "fa", "gro", "hu", "ji", "kel", "lin", "ma", "nor", "os", "pe",
    "ras", "su", "tin", "ul", "ven", "wa", "xo", "ya", "zen", "bri",
];

/// `n` distinct pseudo-word phrases of one to three words drawn from a shared vocabulary, so
/// that many phrases overlap in words and spelling.
pub fn synthetic_phrases(n: usize, seed: u64) -> Vec<String> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab_size = (n / 4).clamp(16, 4000);
    let mut vocab = HashSet::new();
    let mut words = Vec::with_capacity(vocab_size);
    while words.len() < vocab_size {
        let len = rng.random_range(2..=3);
        let w: String = (0..len).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect();
        if vocab.insert(w.clone()) {
            words.push(w);
        }
    }
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = [1, 2, 2, 2, 3][rng.random_range(0..5)];
        let p = (0..len)
            .map(|_| words[rng.random_range(0..words.len())].as_str())
            .collect::<Vec<_>>()
            .join(" ");
        if seen.insert(p.clone()) {
            out.push(p);
        }
    }
    out
}

/// Identifier of the character-trigram embedder in index headers.
pub const TRIGRAM_EMBEDDER_ID: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedderConfig {
    pub dim: usize,
    pub seed: u64,
}

impl EmbedderConfig {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

const BACKOFF_STREAM: u64 = 0xb4c0_ff00_0000_0001;

/// Deterministic phrase encoder: lower-cased character trigrams of `^text$`, each mapped to a
/// seeded Gaussian direction, summed and scaled to unit length.
#[derive(Debug, Clone)]
pub struct TrigramEmbedder {
    config: EmbedderConfig,
    cache: HashMap<u64, Vec<f32>>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn gaussian(dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v.into_iter().map(|x| x as f32).collect()
}

impl TrigramEmbedder {
    pub fn new(config: EmbedderConfig) -> Self {
        Self {
            config,
            cache: HashMap::new(),
        }
    }

    pub fn config(&self) -> EmbedderConfig {
        self.config
    }

    pub fn embed(&mut self, text: &str) -> Result<Vec<f32>> {
        if text.trim().is_empty() {
            return input("cannot embed an empty phrase");
        }
        let chars: Vec<char> = std::iter::once('^')
            .chain(text.trim().to_lowercase().chars())
            .chain(std::iter::once('$'))
            .collect();
        let mut acc = vec![0f64; self.config.dim];
        let mut buf = String::new();
        for w in chars.windows(3) {
            buf.clear();
            buf.extend(w);
            let key = fnv1a(buf.as_bytes());
            let (dim, seed) = (self.config.dim, self.config.seed);
            let dir = self
                .cache
                .entry(key)
                .or_insert_with(|| gaussian(dim, seed ^ key));
            for (a, &d) in acc.iter_mut().zip(dir.iter()) {
                *a += d as f64;
            }
        }
        Ok(unit(acc))
    }

    /// Fixed embedding of the back-off entry.
    pub fn backoff(&self) -> Vec<f32> {
        let g = gaussian(self.config.dim, self.config.seed ^ BACKOFF_STREAM);
        unit(g.into_iter().map(f64::from).collect())
    }

    /// Embedding of catalogue entry `text`, using the back-off vector for the empty string.
    pub fn embed_entry(&mut self, text: &str) -> Result<Vec<f32>> {
        if text.is_empty() {
            Ok(self.backoff())
        } else {
            self.embed(text)
        }
    }
}

pub fn embed_phrase(text: &str, config: EmbedderConfig) -> Result<Vec<f32>> {
    TrigramEmbedder::new(config).embed(text)
}

/// A catalogue quantized and packed for retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedIndex {
    pub(crate) catalogue: BiasingCatalogue,
    pub(crate) params: FsqParams,
    pub(crate) projections: ProjectionSet,
    pub(crate) codes: CodeMatrix,
    pub(crate) embedder: EmbedderConfig,
}

impl PackedIndex {
    pub fn catalogue(&self) -> &BiasingCatalogue {
        &self.catalogue
    }

    pub fn params(&self) -> &FsqParams {
        &self.params
    }

    pub fn projections(&self) -> &ProjectionSet {
        &self.projections
    }

    pub fn codes(&self) -> &CodeMatrix {
        &self.codes
    }

    pub fn embedder(&self) -> EmbedderConfig {
        self.embedder
    }

    /// Number of rows including the back-off.
    pub fn len(&self) -> usize {
        self.codes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Summary of an index build.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildReport {
    pub unique_phrases: usize,
    /// `log2` of the number of distinct code tuples the quantizer can emit.
    pub capacity_log2: f64,
    /// More unique phrases than code tuples, so collisions are unavoidable.
    pub capacity_exceeded: bool,
}

/// Embeds, quantizes and packs every catalogue entry.
pub fn build_index(
    catalogue: &BiasingCatalogue,
    params: &FsqParams,
    proj: &ProjectionSet,
    embedder: EmbedderConfig,
) -> Result<PackedIndex> {
    build_index_with_report(catalogue, params, proj, embedder).map(|(i, _)| i)
}

pub fn build_index_with_report(
    catalogue: &BiasingCatalogue,
    params: &FsqParams,
    proj: &ProjectionSet,
    embedder: EmbedderConfig,
) -> Result<(PackedIndex, BuildReport)> {
    let cfg = params.config();
    ensure_packable(cfg.levels())?;
    if embedder.dim != cfg.dim() || proj.dim() != cfg.dim() {
        return Err(Error::Config(format!(
            "embedder dimension {}, projection dimension {} and quantizer dimension {} differ",
            embedder.dim,
            proj.dim(),
            cfg.dim()
        )));
    }
    if !proj.w_k().is_block_diagonal(cfg.groups()) {
        return Err(Error::Config(format!(
            "W_k is not block-diagonal with {} blocks",
            cfg.groups()
        )));
    }
    let unique = catalogue.unique_phrases();
    let capacity_log2 = cfg.capacity().total_log2;
    let capacity_exceeded = (unique as f64).log2() > capacity_log2;
    if capacity_exceeded {
        log::warn!(
            "{unique} unique phrases exceed the quantizer capacity of 2^{capacity_log2:.2} code tuples; collisions are unavoidable"
        );
    }
    if catalogue.len() == 1 {
        log::warn!("catalogue has no phrases; the index holds only the back-off entry");
    }

    let mut emb = TrigramEmbedder::new(embedder);
    let mut codes = CodeMatrix::new(cfg.groups());
    let mut row = Vec::with_capacity(cfg.groups());
    for e in catalogue.entries() {
        let x = emb.embed_entry(&e.text)?;
        let q = quantize(&x, params)?;
        row.clear();
        pack_codes_into(&q.codes, cfg, &mut row)?;
        codes.push_row(&row)?;
    }
    let index = PackedIndex {
        catalogue: catalogue.clone(),
        params: params.clone(),
        projections: proj.clone(),
        codes,
        embedder,
    };
    Ok((
        index,
        BuildReport {
            unique_phrases: unique,
            capacity_log2,
            capacity_exceeded,
        },
    ))
}

/// Fraction of unique phrases whose full code tuple is shared with an earlier unique phrase.
pub fn collision_rate(index: &PackedIndex) -> f64 {
    let mut phrases = HashSet::new();
    let mut tuples = HashSet::new();
    for (id, e) in index.catalogue.entries().iter().enumerate().skip(1) {
        if phrases.insert(e.text.as_str()) {
            tuples.insert(index.codes.row(id));
        }
    }
    if phrases.is_empty() {
        0.0
    } else {
        (phrases.len() - tuples.len()) as f64 / phrases.len() as f64
    }
}
