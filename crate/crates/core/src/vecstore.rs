//! Dense vector storage, normalization and the exact inner-product oracle.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{read_file, write_file, ByteReader, ByteWriter};

pub const VECTOR_MAGIC: &[u8; 8] = b"MIPSVEC1";
pub const GT_EXACT_MAGIC: &[u8; 8] = b"MIPSGTEX";
pub const GT_APPROX_MAGIC: &[u8; 8] = b"MIPSGTAP";

const PAR_SCAN_THRESHOLD: usize = 8192;

/// Plain dot product. Callers are responsible for equal lengths.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Checked inner product.
pub fn inner_product(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(dot(a, b))
}

#[inline]
pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Orders `(index, score)` pairs by descending score, smaller index first on ties.
#[inline]
pub fn rank_desc(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Keeps the `k` best `(index, score)` pairs in [`rank_desc`] order.
pub fn top_k_scored(mut scored: Vec<(usize, f64)>, k: usize) -> Vec<(usize, f64)> {
    if k == 0 {
        return Vec::new();
    }
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, rank_desc);
        scored.truncate(k);
    }
    scored.sort_unstable_by(rank_desc);
    scored
}

/// Row-major matrix of finite vectors sharing one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorRows {
    data: Vec<f64>,
    dim: usize,
}

impl VectorRows {
    pub fn from_flat(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "{} values do not divide into rows of {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector data"));
        }
        Ok(Self { data, dim })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or(Error::EmptyDataset)?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.into_iter().enumerate() {
            if r.len() != dim {
                return Err(Error::InconsistentDimension {
                    expected: dim,
                    found: r.len(),
                    record: i,
                });
            }
            data.extend(r);
        }
        Self::from_flat(data, dim)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            data,
            dim: self.dim,
        }
    }

    fn map_rows(&self, mut f: impl FnMut(usize, &[f64]) -> f64) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for (i, r) in self.iter().enumerate() {
            let s = f(i, r);
            data.extend(r.iter().map(|v| v * s));
        }
        Self {
            data,
            dim: self.dim,
        }
    }
}

/// The item database `X`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    items: VectorRows,
    norm_scale: f64,
}

impl Dataset {
    pub fn new(items: VectorRows) -> Self {
        Self {
            items,
            norm_scale: 1.0,
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        VectorRows::from_rows(rows).map(Self::new)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.items.dim()
    }

    #[inline]
    pub fn item(&self, i: usize) -> &[f64] {
        self.items.row(i)
    }

    pub fn items(&self) -> &VectorRows {
        &self.items
    }

    /// Divisor applied by [`normalize`]; 1.0 for raw data.
    pub fn norm_scale(&self) -> f64 {
        self.norm_scale
    }

    pub fn zero_norm_items(&self) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, r)| r.iter().all(|v| *v == 0.0))
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    All,
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::All => "all",
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

/// A list of queries. `source_ids[i]` is the position of query `i` in the set it
/// was split from (identity for freshly loaded sets).
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    queries: VectorRows,
    split: Split,
    source_ids: Vec<usize>,
}

impl QuerySet {
    pub fn new(queries: VectorRows, split: Split) -> Self {
        let source_ids = (0..queries.len()).collect();
        Self {
            queries,
            split,
            source_ids,
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, split: Split) -> Result<Self> {
        VectorRows::from_rows(rows).map(|q| Self::new(q, split))
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.queries.dim()
    }

    #[inline]
    pub fn query(&self, i: usize) -> &[f64] {
        self.queries.row(i)
    }

    pub fn rows(&self) -> &VectorRows {
        &self.queries
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn source_ids(&self) -> &[usize] {
        &self.source_ids
    }

    fn subset(&self, ids: &[usize], split: Split) -> Self {
        Self {
            queries: self.queries.select(ids),
            split,
            source_ids: ids.iter().map(|&i| self.source_ids[i]).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VectorFormat {
    /// Little-endian `{magic, n: u64, d: u32}` header followed by `n * d` f32 values.
    Raw,
    /// One vector per line, whitespace or comma separated.
    Text,
}

impl VectorFormat {
    /// Picks `Text` for `.txt`/`.csv`/`.tsv` extensions, `Raw` otherwise.
    pub fn guess(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("txt" | "csv" | "tsv") => VectorFormat::Text,
            _ => VectorFormat::Raw,
        }
    }
}

pub fn load_vectors(path: &Path, format: VectorFormat) -> Result<VectorRows> {
    match format {
        VectorFormat::Raw => load_raw(path),
        VectorFormat::Text => load_text(path),
    }
}

pub fn load_dataset(path: &Path, format: VectorFormat) -> Result<Dataset> {
    load_vectors(path, format).map(Dataset::new)
}

pub fn load_queries(path: &Path, format: VectorFormat, split: Split) -> Result<QuerySet> {
    load_vectors(path, format).map(|q| QuerySet::new(q, split))
}

fn load_raw(path: &Path) -> Result<VectorRows> {
    let bytes = read_file(path)?;
    if bytes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut r = ByteReader::new(&bytes, path);
    r.magic(VECTOR_MAGIC)?;
    let n = r.len_u64()?;
    let d = r.u32()? as usize;
    if n == 0 || d == 0 {
        return Err(Error::EmptyDataset);
    }
    let expected = n
        .checked_mul(d)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| r.malformed("size overflow"))?;
    if r.remaining() != expected {
        return Err(r.malformed(format!(
            "expected {expected} payload bytes, found {}",
            r.remaining()
        )));
    }
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        data.push(f64::from(r.f32()?));
    }
    VectorRows::from_flat(data, d)
}

fn load_text(path: &Path) -> Result<VectorRows> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| Error::malformed(path, "not UTF-8"))?;
    let mut dim = None;
    let mut data = Vec::new();
    let mut record = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut count = 0;
        for tok in line.split(|c: char| c.is_whitespace() || c == ',') {
            if tok.is_empty() {
                continue;
            }
            let v: f64 = tok.parse().map_err(|_| {
                Error::malformed(path, format!("line {}: bad number {tok:?}", lineno + 1))
            })?;
            data.push(v);
            count += 1;
        }
        match dim {
            None => dim = Some(count),
            Some(d) if d != count => {
                return Err(Error::InconsistentDimension {
                    expected: d,
                    found: count,
                    record,
                })
            }
            _ => {}
        }
        record += 1;
    }
    let dim = dim.ok_or(Error::EmptyDataset)?;
    VectorRows::from_flat(data, dim)
}

/// Writes vectors in the raw binary format (values narrowed to f32).
pub fn save_vectors(path: &Path, rows: &VectorRows) -> Result<()> {
    let mut w = ByteWriter::default();
    w.bytes(VECTOR_MAGIC);
    w.u64(rows.len() as u64);
    w.u32(rows.dim() as u32);
    for &v in rows.as_flat() {
        w.f32(v as f32);
    }
    write_file(path, &w.buf)
}

/// Divides every item by the mean item L2 norm and scales every query to unit
/// norm. Neither step changes the argmax of `<q, x>` for any query.
pub fn normalize(dataset: &Dataset, queries: &QuerySet) -> Result<(Dataset, QuerySet)> {
    if dataset.dim() != queries.dim() {
        return Err(Error::LengthMismatch {
            left: dataset.dim(),
            right: queries.dim(),
        });
    }
    let norms: Vec<f64> = dataset.items.iter().map(l2_norm).collect();
    let zero = norms.iter().filter(|&&v| v == 0.0).count();
    if zero > 0 {
        log::warn!("{zero} zero-norm items kept as graph nodes");
    }
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    if mean <= 0.0 {
        return Err(Error::ZeroNormItem(0));
    }
    for (i, q) in queries.queries.iter().enumerate() {
        if l2_norm(q) == 0.0 {
            return Err(Error::ZeroNormQuery(i));
        }
    }
    let items = dataset.items.map_rows(|_, _| 1.0 / mean);
    let qs = queries.queries.map_rows(|_, q| 1.0 / l2_norm(q));
    Ok((
        Dataset {
            items,
            norm_scale: dataset.norm_scale * mean,
        },
        QuerySet {
            queries: qs,
            split: queries.split,
            source_ids: queries.source_ids.clone(),
        },
    ))
}

/// Exact top-k by inner product: descending score, smaller index on ties.
pub fn brute_force_topk(dataset: &Dataset, q: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = dataset.len();
    if k > n {
        return Err(Error::KTooLarge { k, n });
    }
    if q.len() != dataset.dim() {
        return Err(Error::LengthMismatch {
            left: q.len(),
            right: dataset.dim(),
        });
    }
    let scored: Vec<(usize, f64)> = if n >= PAR_SCAN_THRESHOLD {
        (0..n)
            .into_par_iter()
            .map(|i| (i, dot(q, dataset.item(i))))
            .collect()
    } else {
        (0..n).map(|i| (i, dot(q, dataset.item(i)))).collect()
    };
    Ok(top_k_scored(scored, k).into_iter().map(|(i, _)| i).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuerySplit {
    pub train: QuerySet,
    pub validation: QuerySet,
    pub test: QuerySet,
}

/// Seeded random partition of `all` into train/validation/test.
///
/// Train and validation sizes are `round(ratio * n)`; test takes the rest.
pub fn split_queries(all: &QuerySet, ratios: [f64; 3], seed: u64) -> Result<QuerySplit> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::BadRatios(ratios));
    }
    let n = all.len();
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * ratios[0]).round() as usize).min(n);
    let n_val = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);
    let (train, rest) = ids.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    Ok(QuerySplit {
        train: all.subset(train, Split::Train),
        validation: all.subset(val, Split::Validation),
        test: all.subset(test, Split::Test),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GtKind {
    Exact,
    Approximate,
}

impl GtKind {
    fn magic(self) -> &'static [u8; 8] {
        match self {
            GtKind::Exact => GT_EXACT_MAGIC,
            GtKind::Approximate => GT_APPROX_MAGIC,
        }
    }
}

/// Per-query target lists, possibly covering only part of a query set.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthTable {
    entries: BTreeMap<usize, Vec<usize>>,
    kind: GtKind,
    num_queries: usize,
    k: usize,
}

impl GroundTruthTable {
    /// Validates the table against `num_items`: indices in range, lists
    /// duplicate-free and all of length `k`, query ids below `num_queries`.
    pub fn new(
        entries: BTreeMap<usize, Vec<usize>>,
        kind: GtKind,
        num_queries: usize,
        k: usize,
        num_items: usize,
    ) -> Result<Self> {
        for (&q, list) in &entries {
            if q >= num_queries {
                return Err(Error::NodeOutOfRange {
                    node: q,
                    n: num_queries,
                });
            }
            if list.len() != k {
                return Err(Error::Shape(format!(
                    "query {q} has {} targets, expected {k}",
                    list.len()
                )));
            }
            for (j, &v) in list.iter().enumerate() {
                if v >= num_items {
                    return Err(Error::NodeOutOfRange {
                        node: v,
                        n: num_items,
                    });
                }
                if list[..j].contains(&v) {
                    return Err(Error::Shape(format!("query {q} lists item {v} twice")));
                }
            }
        }
        Ok(Self {
            entries,
            kind,
            num_queries,
            k,
        })
    }

    pub fn get(&self, query: usize) -> Option<&[usize]> {
        self.entries.get(&query).map(Vec::as_slice)
    }

    pub fn entries(&self) -> &BTreeMap<usize, Vec<usize>> {
        &self.entries
    }

    pub fn kind(&self) -> GtKind {
        self.kind
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    pub fn coverage(&self) -> f64 {
        if self.num_queries == 0 {
            0.0
        } else {
            self.entries.len() as f64 / self.num_queries as f64
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::default();
        w.bytes(self.kind.magic());
        w.u64(self.entries.len() as u64);
        w.u32(self.k as u32);
        for (&q, list) in &self.entries {
            w.u64(q as u64);
            for &v in list {
                w.u64(v as u64);
            }
        }
        write_file(path, &w.buf)
    }

    /// Loads a table; `num_queries` and `num_items` describe the query set and
    /// dataset it belongs to.
    pub fn load(path: &Path, num_queries: usize, num_items: usize) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = ByteReader::new(&bytes, path);
        let kind = match r.take(8)? {
            m if m == GT_EXACT_MAGIC => GtKind::Exact,
            m if m == GT_APPROX_MAGIC => GtKind::Approximate,
            _ => return Err(r.malformed("magic mismatch")),
        };
        let count = r.len_u64()?;
        let k = r.u32()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let q = r.len_u64()?;
            let list = (0..k).map(|_| r.len_u64()).collect::<Result<Vec<_>>>()?;
            if entries.insert(q, list).is_some() {
                return Err(r.malformed(format!("query {q} listed twice")));
            }
        }
        r.finish()?;
        Self::new(entries, kind, num_queries, k, num_items)
    }
}
