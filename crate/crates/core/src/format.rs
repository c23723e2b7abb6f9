//! Binary index file.
//!
//! All integers are little-endian. Layout:
//!
//! ```text
//! magic "QBIASIDX" | version u32
//! header:  dim u32 | groups u32 | level count u32 | levels u32.. | rows u64
//!          | embedder id u32 | embedder seed u64 | key blocks u32 | quantizer crc u32
//! sections, in order PARM PROJ CODE STRS PROV, each:
//!          tag [u8; 4] | payload length u64 | payload | payload crc u32
//! trailer: crc u32 of every preceding byte
//! ```
//!
//! `PARM` holds the flat quantizer parameters as f32, `PROJ` the three projection matrices,
//! `CODE` the packed words, `STRS` `rows + 1` u32 offsets followed by the UTF-8 bytes, and
//! `PROV` one provenance word per row. The quantizer crc covers the `PARM` and `PROJ`
//! payloads, tying the codes to the parameters that produced them.

use std::path::Path;

use crate::attention::ProjectionSet;
use crate::catalogue::{
    BiasingCatalogue, CatalogueEntry, EmbedderConfig, PackedIndex, Provenance, TRIGRAM_EMBEDDER_ID,
};
use crate::error::{Error, FormatError, Result};
use crate::fsq::{FsqConfig, FsqParams, LevelSpec};
use crate::linalg::Matrix;
use crate::retrieval::CodeMatrix;

pub const MAGIC: [u8; 8] = *b"QBIASIDX";
pub const VERSION: u32 = 1;

const SECTIONS: [&[u8; 4]; 5] = [b"PARM", b"PROJ", b"CODE", b"STRS", b"PROV"];

fn section_name(tag: &[u8; 4]) -> &'static str {
    match tag {
        b"PARM" => "parameter block",
        b"PROJ" => "projection block",
        b"CODE" => "code block",
        b"STRS" => "string block",
        _ => "provenance block",
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn section(&mut self, tag: &[u8; 4], payload: &[u8]) {
        self.buf.extend_from_slice(tag);
        self.u64(payload.len() as u64);
        self.buf.extend_from_slice(payload);
        self.u32(crc32fast::hash(payload));
    }
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn u32_bytes(values: impl IntoIterator<Item = u32>) -> Vec<u8> {
    values.into_iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn projection_bytes(p: &ProjectionSet) -> Vec<u8> {
    let mut out = f32_bytes(p.w_q().as_slice());
    out.extend(f32_bytes(p.w_k().as_slice()));
    out.extend(f32_bytes(p.w_v().as_slice()));
    out
}

fn quantizer_crc(params: &[u8], proj: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(params);
    h.update(proj);
    h.finalize()
}

/// Serializes an index. Equal indices give identical bytes.
pub fn index_to_bytes(index: &PackedIndex) -> Result<Vec<u8>> {
    let cfg = index.params().config();
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Input(format!("{what} {v} does not fit the index format")))
    };
    let params = f32_bytes(index.params().as_flat());
    let proj = projection_bytes(index.projections());
    let codes: Vec<u8> = index.codes().words().iter().flat_map(|w| w.to_le_bytes()).collect();

    let entries = index.catalogue().entries();
    let mut text = Vec::new();
    let mut offsets = Vec::with_capacity(entries.len() + 1);
    offsets.push(0u32);
    for e in entries {
        text.extend_from_slice(e.text.as_bytes());
        offsets.push(to_u32(text.len(), "string block size")?);
    }
    let mut strings = u32_bytes(offsets);
    strings.extend(text);
    let prov = u32_bytes(entries.iter().map(|e| e.provenance.to_word() | (u32::from(e.contact) << 31)));

    let mut w = Writer {
        buf: Vec::with_capacity(64 + params.len() + proj.len() + codes.len() + strings.len() + prov.len()),
    };
    w.buf.extend_from_slice(&MAGIC);
    w.u32(VERSION);
    w.u32(to_u32(cfg.dim(), "dimension")?);
    w.u32(to_u32(cfg.groups(), "group count")?);
    w.u32(cfg.levels().len() as u32);
    for &l in cfg.levels().levels() {
        w.u32(l);
    }
    w.u64(index.len() as u64);
    w.u32(TRIGRAM_EMBEDDER_ID);
    w.u64(index.embedder().seed);
    w.u32(to_u32(index.projections().key_blocks(), "key block count")?);
    w.u32(quantizer_crc(&params, &proj));
    for (tag, payload) in SECTIONS.iter().zip([&params, &proj, &codes, &strings, &prov]) {
        w.section(tag, payload);
    }
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    Ok(w.buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn section(&mut self, tag: &[u8; 4]) -> Result<&'a [u8], FormatError> {
        let found = self.take(4)?;
        if found != tag {
            return Err(FormatError::Malformed(format!(
                "expected section {:?}, found {:?}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(found)
            )));
        }
        let len = usize::try_from(self.u64()?)
            .map_err(|_| FormatError::Malformed("section length overflows".into()))?;
        let payload = self.take(len)?;
        let stored = self.u32()?;
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(FormatError::ChecksumMismatch {
                section: section_name(tag),
                stored,
                computed,
            });
        }
        Ok(payload)
    }
}

fn malformed(msg: impl Into<String>) -> Error {
    FormatError::Malformed(msg.into()).into()
}

fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn read_u32s(bytes: &[u8]) -> Vec<u32> {
    bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Parses and validates an index.
pub fn index_from_bytes(bytes: &[u8]) -> Result<PackedIndex> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 8] = match r.take(8) {
        Ok(m) => m.try_into().unwrap(),
        Err(_) => {
            let mut found = [0u8; 8];
            found[..bytes.len()].copy_from_slice(bytes);
            return Err(FormatError::BadMagic { found }.into());
        }
    };
    if magic != MAGIC {
        return Err(FormatError::BadMagic { found: magic }.into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let dim = r.u32()? as usize;
    let groups = r.u32()? as usize;
    let n_levels = r.u32()? as usize;
    if n_levels > 64 {
        return Err(malformed(format!("{n_levels} levels")));
    }
    let levels = (0..n_levels).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
    let rows = r.u64()? as usize;
    let embedder_id = r.u32()?;
    let seed = r.u64()?;
    let key_blocks = r.u32()? as usize;
    let stored_qcrc = r.u32()?;

    let params_b = r.section(SECTIONS[0])?;
    let proj_b = r.section(SECTIONS[1])?;
    let codes_b = r.section(SECTIONS[2])?;
    let strings_b = r.section(SECTIONS[3])?;
    let prov_b = r.section(SECTIONS[4])?;
    let body_end = r.pos;
    let stored = r.u32()?;
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(FormatError::ChecksumMismatch {
            section: "file",
            stored,
            computed,
        }
        .into());
    }
    if r.pos != bytes.len() {
        return Err(malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let computed = quantizer_crc(params_b, proj_b);
    if stored_qcrc != computed {
        return Err(FormatError::ChecksumMismatch {
            section: "quantizer",
            stored: stored_qcrc,
            computed,
        }
        .into());
    }
    if embedder_id != TRIGRAM_EMBEDDER_ID {
        return Err(malformed(format!("unknown embedder id {embedder_id}")));
    }

    let wrap = |e: Error| malformed(e.to_string());
    let spec = LevelSpec::new(levels).map_err(wrap)?;
    let cfg = FsqConfig::new(dim, groups, spec).map_err(wrap)?;
    let params = FsqParams::from_flat(cfg.clone(), read_f32s(params_b)).map_err(wrap)?;

    let mats = read_f32s(proj_b);
    if mats.len() != 3 * dim * dim {
        return Err(malformed("projection block size does not match dimension"));
    }
    let m = |k: usize| Matrix::from_vec(dim, dim, mats[k * dim * dim..(k + 1) * dim * dim].to_vec());
    let proj = ProjectionSet::new(m(0)?, m(1)?, m(2)?, key_blocks).map_err(wrap)?;

    if codes_b.len() != rows * groups * 2 {
        return Err(malformed(format!(
            "code block has {} bytes, expected {}",
            codes_b.len(),
            rows * groups * 2
        )));
    }
    let words = codes_b
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let codes = CodeMatrix::from_words(groups, words).map_err(wrap)?;
    codes.validate(&cfg)?;

    let head = (rows + 1) * 4;
    if strings_b.len() < head {
        return Err(malformed("string offsets truncated"));
    }
    let offsets = read_u32s(&strings_b[..head]);
    let text = &strings_b[head..];
    let prov = read_u32s(prov_b);
    if prov.len() != rows || prov_b.len() != rows * 4 {
        return Err(malformed("provenance block size does not match row count"));
    }
    let mut entries = Vec::with_capacity(rows);
    for j in 0..rows {
        let (a, b) = (offsets[j] as usize, offsets[j + 1] as usize);
        if a > b || b > text.len() {
            return Err(malformed(format!("string {j} has bad offsets {a}..{b}")));
        }
        let s = std::str::from_utf8(&text[a..b]).map_err(|e| malformed(format!("string {j}: {e}")))?;
        entries.push(CatalogueEntry {
            text: s.to_string(),
            provenance: Provenance::from_word(prov[j] & !(1 << 31)),
            contact: prov[j] >> 31 == 1,
        });
    }
    if offsets[rows] as usize != text.len() {
        return Err(malformed("string block has unreferenced bytes"));
    }
    let catalogue = BiasingCatalogue::from_entries(entries).map_err(wrap)?;

    Ok(PackedIndex {
        catalogue,
        params,
        projections: proj,
        codes,
        embedder: EmbedderConfig { dim, seed },
    })
}

pub fn save_index(index: &PackedIndex, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, index_to_bytes(index)?)?;
    Ok(())
}

pub fn load_index(path: impl AsRef<Path>) -> Result<PackedIndex> {
    index_from_bytes(&std::fs::read(path)?)
}

/// Quantizer parameter file: the index header fields needed to rebuild the config, followed by
/// the `PARM` section and the file crc.
pub fn params_to_bytes(params: &FsqParams) -> Vec<u8> {
    let cfg = params.config();
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(b"QBIASFSQ");
    w.u32(VERSION);
    w.u32(cfg.dim() as u32);
    w.u32(cfg.groups() as u32);
    w.u32(cfg.levels().len() as u32);
    for &l in cfg.levels().levels() {
        w.u32(l);
    }
    w.section(SECTIONS[0], &f32_bytes(params.as_flat()));
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    w.buf
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<FsqParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 8] = r.take(8)?.try_into().unwrap();
    if &magic != b"QBIASFSQ" {
        return Err(FormatError::BadMagic { found: magic }.into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let dim = r.u32()? as usize;
    let groups = r.u32()? as usize;
    let n_levels = r.u32()? as usize;
    if n_levels > 64 {
        return Err(malformed(format!("{n_levels} levels")));
    }
    let levels = (0..n_levels).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
    let data = r.section(SECTIONS[0])?;
    let end = r.pos;
    let stored = r.u32()?;
    let computed = crc32fast::hash(&bytes[..end]);
    if stored != computed {
        return Err(FormatError::ChecksumMismatch {
            section: "file",
            stored,
            computed,
        }
        .into());
    }
    let wrap = |e: Error| malformed(e.to_string());
    let cfg = FsqConfig::new(dim, groups, LevelSpec::new(levels).map_err(wrap)?).map_err(wrap)?;
    FsqParams::from_flat(cfg, read_f32s(data)).map_err(wrap)
}

pub fn save_params(params: &FsqParams, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, params_to_bytes(params))?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<FsqParams> {
    params_from_bytes(&std::fs::read(path)?)
}

/// Magic of binary embedding files: `magic | version u32 | rows u64 | dim u32 | rows·dim f32`.
pub const EMBEDDING_MAGIC: [u8; 8] = *b"QBIASEMB";

pub fn embeddings_to_bytes(m: &Matrix) -> Vec<u8> {
    let mut w = Writer { buf: Vec::with_capacity(24 + m.as_slice().len() * 4) };
    w.buf.extend_from_slice(&EMBEDDING_MAGIC);
    w.u32(VERSION);
    w.u64(m.rows() as u64);
    w.u32(m.cols() as u32);
    w.buf.extend_from_slice(&f32_bytes(m.as_slice()));
    w.buf
}

/// Parses a binary embedding file, or whitespace-separated text with one row per line when
/// the magic is absent. Blank lines and lines starting with `#` are ignored in text.
pub fn embeddings_from_bytes(bytes: &[u8]) -> Result<Matrix> {
    if bytes.starts_with(&EMBEDDING_MAGIC) {
        let mut r = Reader { buf: bytes, pos: EMBEDDING_MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion {
                found: version,
                expected: VERSION,
            }
            .into());
        }
        let rows = usize::try_from(r.u64()?).map_err(|_| malformed("row count overflows"))?;
        let dim = r.u32()? as usize;
        let len = rows.checked_mul(dim).and_then(|n| n.checked_mul(4)).ok_or_else(|| malformed("size overflows"))?;
        let data = r.take(len)?;
        if r.pos != bytes.len() {
            return Err(malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        return Matrix::from_vec(rows, dim, read_f32s(data)).map_err(|e| malformed(e.to_string()));
    }
    let text = std::str::from_utf8(bytes).map_err(|_| malformed("embedding file is neither binary nor UTF-8 text"))?;
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f32>().map_err(|_| malformed(format!("line {}: bad number {t:?}", n + 1))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(malformed(format!("line {} has {} values, expected {}", n + 1, row.len(), first.len())));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(malformed("embedding file has no rows"));
    }
    Matrix::from_rows(&rows).map_err(|e| malformed(e.to_string()))
}

pub fn save_embeddings(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, embeddings_to_bytes(m))?;
    Ok(())
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Matrix> {
    embeddings_from_bytes(&std::fs::read(path)?)
}
