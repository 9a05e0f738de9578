//! File-backed embedding matrices with a stable id to row mapping.
//!
//! The matrix container is `DCAP` + u32 version + u32 rows + u32 dim, all
//! little-endian, followed by `rows * dim` little-endian `f32` values in
//! row-major order. The manifest is a tab-separated text file with one
//! record per row: `entry_id`, `row_index`, `kind`, `owner_image_id`
//! (`-` for images).

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"DCAP";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

/// Rows whose norm is within this distance of 1 are kept bit-for-bit.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;
/// Rows with a smaller norm cannot be normalized.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("duplicate entry id `{0}`")]
    DuplicateId(String),
    #[error("row {row} has zero norm")]
    ZeroVector { row: usize },
    #[error("row {row} contains a non-finite value")]
    NonFinite { row: usize },
    #[error("unknown entry id `{0}`")]
    UnknownId(String),
    #[error("invalid entry id {0:?}")]
    InvalidId(String),
    #[error("manifest line {line}: {reason}")]
    MalformedManifest { line: usize, reason: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl StoreError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Opaque key for an image or caption, e.g. `"391895"` or `"391895#2"`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntryId(String);

impl EntryId {
    pub fn new(id: impl Into<String>) -> Result<Self, StoreError> {
        let id = id.into();
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(StoreError::InvalidId(id));
        }
        Ok(EntryId(id))
    }

    /// Caption id for the `n`-th ground-truth caption of `image`.
    pub fn caption_of(image: &EntryId, n: usize) -> Self {
        EntryId(format!("{}#{n}", image.0))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EntryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for EntryId {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntryId::new(s)
    }
}

impl std::borrow::Borrow<str> for EntryId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    Image,
    Caption,
}

impl EntryKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntryKind::Image => "image",
            EntryKind::Caption => "caption",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: EntryId,
    pub row: usize,
    pub kind: EntryKind,
    /// Set for captions, `None` for images.
    pub owner: Option<EntryId>,
}

impl ManifestEntry {
    pub fn image(id: EntryId, row: usize) -> Self {
        ManifestEntry {
            id,
            row,
            kind: EntryKind::Image,
            owner: None,
        }
    }

    pub fn caption(id: EntryId, row: usize, owner: EntryId) -> Self {
        ManifestEntry {
            id,
            row,
            kind: EntryKind::Caption,
            owner: Some(owner),
        }
    }
}

/// A raw `rows x dim` matrix as stored in a `DCAP` container.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl RawMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::MalformedHeader("dim must be positive".into()));
        }
        let expected = rows
            .checked_mul(dim)
            .ok_or_else(|| StoreError::MalformedHeader("rows * dim overflows".into()))?;
        if data.len() != expected {
            return Err(StoreError::DimensionMismatch {
                expected,
                found: data.len(),
            });
        }
        Ok(RawMatrix { rows, dim, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Decodes a `DCAP` container. Does not normalize.
pub fn parse_matrix(bytes: &[u8]) -> Result<RawMatrix, StoreError> {
    if bytes.len() < HEADER_LEN {
        return Err(StoreError::MalformedHeader(format!(
            "expected at least {HEADER_LEN} header bytes, found {}",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(StoreError::MalformedHeader("bad magic".into()));
    }
    let version = read_u32(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(StoreError::MalformedHeader(format!(
            "unsupported version {version}"
        )));
    }
    let rows = read_u32(bytes, 8) as usize;
    let dim = read_u32(bytes, 12) as usize;
    if dim == 0 {
        return Err(StoreError::MalformedHeader("dim must be positive".into()));
    }
    let payload = &bytes[HEADER_LEN..];
    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| StoreError::MalformedHeader("rows * dim overflows".into()))?;
    if payload.len() != expected {
        return Err(StoreError::DimensionMismatch {
            expected,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(RawMatrix { rows, dim, data })
}

pub fn read_matrix(path: &Path) -> Result<RawMatrix, StoreError> {
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    parse_matrix(&bytes)
}

pub fn write_matrix(path: &Path, matrix: &RawMatrix) -> Result<(), StoreError> {
    fs::write(path, matrix.to_bytes()).map_err(|e| StoreError::io(path, e))
}

/// Parses manifest text. Checks each record in isolation; cross-record
/// checks happen in [`EmbeddingStore::from_parts`].
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, StoreError> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let bad = |reason: &str| StoreError::MalformedManifest {
            line: lineno,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(bad(&format!("expected 4 fields, found {}", fields.len())));
        }
        let id = EntryId::new(fields[0]).map_err(|_| bad("invalid entry id"))?;
        let row: usize = fields[1].parse().map_err(|_| bad("invalid row index"))?;
        let entry = match (fields[2], fields[3]) {
            ("image", "-") => ManifestEntry::image(id, row),
            ("image", _) => return Err(bad("image entries must have owner `-`")),
            ("caption", "-") => return Err(bad("caption entries need an owner image id")),
            ("caption", owner) => {
                let owner = EntryId::new(owner).map_err(|_| bad("invalid owner id"))?;
                ManifestEntry::caption(id, row, owner)
            }
            (kind, _) => return Err(bad(&format!("unknown kind `{kind}`"))),
        };
        entries.push(entry);
    }
    Ok(entries)
}

pub fn manifest_to_text(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let owner = e.owner.as_ref().map_or("-", EntryId::as_str);
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.id,
            e.row,
            e.kind.as_str(),
            owner
        ));
    }
    out
}

/// Unit-normalized embeddings keyed by [`EntryId`]. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    matrix: RawMatrix,
    manifest: Vec<ManifestEntry>,
    by_id: HashMap<EntryId, usize>,
    by_owner: HashMap<EntryId, Vec<usize>>,
    // row -> manifest position
    by_row: Vec<usize>,
}

impl EmbeddingStore {
    pub fn empty(dim: usize) -> Result<Self, StoreError> {
        Self::from_parts(RawMatrix::new(0, dim, Vec::new())?, Vec::new())
    }

    /// Builds a store from `(entry, vector)` pairs, assigning rows in order.
    pub fn from_rows<I, V>(dim: usize, rows: I) -> Result<Self, StoreError>
    where
        I: IntoIterator<Item = (ManifestEntry, V)>,
        V: AsRef<[f32]>,
    {
        let mut data = Vec::new();
        let mut manifest = Vec::new();
        for (i, (mut entry, v)) in rows.into_iter().enumerate() {
            let v = v.as_ref();
            if v.len() != dim {
                return Err(StoreError::DimensionMismatch {
                    expected: dim,
                    found: v.len(),
                });
            }
            entry.row = i;
            data.extend_from_slice(v);
            manifest.push(entry);
        }
        let rows = manifest.len();
        Self::from_parts(RawMatrix::new(rows, dim, data)?, manifest)
    }

    /// Validates the manifest against the matrix and normalizes every row
    /// whose norm is not already 1 within [`UNIT_NORM_TOLERANCE`].
    pub fn from_parts(
        mut matrix: RawMatrix,
        manifest: Vec<ManifestEntry>,
    ) -> Result<Self, StoreError> {
        if manifest.len() != matrix.rows {
            return Err(StoreError::DimensionMismatch {
                expected: matrix.rows,
                found: manifest.len(),
            });
        }
        let mut by_id = HashMap::with_capacity(manifest.len());
        let mut seen_row = vec![false; matrix.rows];
        for (i, e) in manifest.iter().enumerate() {
            if e.row >= matrix.rows || seen_row[e.row] {
                return Err(StoreError::MalformedManifest {
                    line: i + 1,
                    reason: format!("row index {} is out of range or repeated", e.row),
                });
            }
            seen_row[e.row] = true;
            if (e.kind == EntryKind::Caption) != e.owner.is_some() {
                return Err(StoreError::MalformedManifest {
                    line: i + 1,
                    reason: "owner must be set exactly for captions".into(),
                });
            }
            if by_id.insert(e.id.clone(), e.row).is_some() {
                return Err(StoreError::DuplicateId(e.id.to_string()));
            }
        }

        let dim = matrix.dim;
        for (r, row) in matrix.data.chunks_exact_mut(dim).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(StoreError::NonFinite { row: r });
            }
            let norm = norm_f64(row);
            if norm < MIN_NORM {
                return Err(StoreError::ZeroVector { row: r });
            }
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                for v in row.iter_mut() {
                    *v = (*v as f64 / norm) as f32;
                }
            }
        }

        let mut by_owner: HashMap<EntryId, Vec<usize>> = HashMap::new();
        let mut by_row = vec![0; manifest.len()];
        for (i, e) in manifest.iter().enumerate() {
            by_row[e.row] = i;
            if let Some(owner) = &e.owner {
                by_owner.entry(owner.clone()).or_default().push(e.row);
            }
        }

        Ok(EmbeddingStore {
            matrix,
            manifest,
            by_id,
            by_owner,
            by_row,
        })
    }

    pub fn decode(matrix_bytes: &[u8], manifest_text: &str) -> Result<Self, StoreError> {
        Self::from_parts(parse_matrix(matrix_bytes)?, parse_manifest(manifest_text)?)
    }

    pub fn load(matrix_path: &Path, manifest_path: &Path) -> Result<Self, StoreError> {
        let matrix = read_matrix(matrix_path)?;
        let text =
            fs::read_to_string(manifest_path).map_err(|e| StoreError::io(manifest_path, e))?;
        Self::from_parts(matrix, parse_manifest(&text)?)
    }

    pub fn save(&self, matrix_path: &Path, manifest_path: &Path) -> Result<(), StoreError> {
        write_matrix(matrix_path, &self.matrix)?;
        fs::write(manifest_path, manifest_to_text(&self.manifest))
            .map_err(|e| StoreError::io(manifest_path, e))
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows == 0
    }

    pub fn matrix(&self) -> &RawMatrix {
        &self.matrix
    }

    /// Entries in manifest order.
    pub fn entries(&self) -> &[ManifestEntry] {
        &self.manifest
    }

    pub fn ids_of_kind(&self, kind: EntryKind) -> impl Iterator<Item = &EntryId> {
        self.manifest
            .iter()
            .filter(move |e| e.kind == kind)
            .map(|e| &e.id)
    }

    pub fn row_index(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn row_at(&self, row: usize) -> &[f32] {
        self.matrix.row(row)
    }

    pub fn get(&self, id: &str) -> Result<&[f32], StoreError> {
        self.row_index(id)
            .map(|r| self.matrix.row(r))
            .ok_or_else(|| StoreError::UnknownId(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    /// Rows of the captions owned by `image`, in manifest order.
    pub fn rows_owned_by(&self, image: &str) -> &[usize] {
        self.by_owner.get(image).map_or(&[], Vec::as_slice)
    }

    pub fn entry_at_row(&self, row: usize) -> &ManifestEntry {
        &self.manifest[self.by_row[row]]
    }
}

pub(crate) fn norm_f64(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Cosine similarity with 64-bit accumulation, clamped to `[-1, 1]`.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64, StoreError> {
    if a.len() != b.len() {
        return Err(StoreError::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < MIN_NORM {
        return Err(StoreError::ZeroVector { row: 0 });
    }
    if nb < MIN_NORM {
        return Err(StoreError::ZeroVector { row: 1 });
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `f(I, c)`: cosine between an image row and a caption row.
pub fn similarity(
    images: &EmbeddingStore,
    image_id: &str,
    captions: &EmbeddingStore,
    caption_id: &str,
) -> Result<f64, StoreError> {
    cosine(images.get(image_id)?, captions.get(caption_id)?)
}

/// `<prefix>.mat` and `<prefix>.tsv`.
pub fn store_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let mut mat = prefix.as_os_str().to_owned();
    mat.push(".mat");
    let mut tsv = prefix.as_os_str().to_owned();
    tsv.push(".tsv");
    (PathBuf::from(mat), PathBuf::from(tsv))
}
