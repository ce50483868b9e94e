//! Descriptor database, exact L2 search and recall metrics.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Descriptor;
use crate::report::CsvTable;

pub const DB_MAGIC: &[u8; 4] = b"PRFD";
pub const DB_VERSION: u32 = 1;

/// Descriptors are held in single precision, exactly as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorDb {
    dim: usize,
    ids: Vec<u64>,
    data: Vec<f32>,
    positions: Vec<[f64; 3]>,
}

impl DescriptorDb {
    pub fn new(dim: usize) -> Self {
        DescriptorDb {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            positions: Vec::new(),
        }
    }

    pub fn from_descriptors(ids: &[u64], descriptors: &[Descriptor]) -> Result<Self> {
        let dim = descriptors.first().map_or(0, |d| d.f.len());
        let mut db = DescriptorDb::new(dim);
        if ids.len() != descriptors.len() {
            return Err(Error::Contract("id and descriptor counts differ".into()));
        }
        for (&id, d) in ids.iter().zip(descriptors) {
            db.push(id, &d.f, d.position)?;
        }
        Ok(db)
    }

    pub fn push(&mut self, id: u64, f: &[f64], position: [f64; 3]) -> Result<()> {
        if f.len() != self.dim {
            return Err(Error::Contract(format!("descriptor of length {} in a {}-d db", f.len(), self.dim)));
        }
        if self.ids.contains(&id) {
            return Err(Error::Contract(format!("duplicate id {id}")));
        }
        self.ids.push(id);
        self.data.extend(f.iter().map(|&v| v as f32));
        self.positions.push(position);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Entry indices ranked by L2 distance to `q`, ascending, ties by lower id.
    pub fn rank(&self, q: &[f64]) -> Result<Vec<(usize, f64)>> {
        if self.is_empty() {
            return Err(Error::Contract("query against an empty database".into()));
        }
        if q.len() != self.dim {
            return Err(Error::Contract(format!("query of length {} against a {}-d db", q.len(), self.dim)));
        }
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .map(|i| {
                let d2: f64 = self
                    .descriptor(i)
                    .iter()
                    .zip(q)
                    .map(|(&a, &b)| (f64::from(a) - b).powi(2))
                    .sum();
                (i, d2.sqrt())
            })
            .collect();
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(self.ids[a.0].cmp(&self.ids[b.0])));
        Ok(scored)
    }

    /// Top-`k` ids with their distances.
    pub fn query_topk(&self, q: &[f64], k: usize) -> Result<Vec<(u64, f64)>> {
        if k > self.len() {
            return Err(Error::Contract(format!("k = {k} exceeds database size {}", self.len())));
        }
        Ok(self.rank(q)?.into_iter().take(k).map(|(i, d)| (self.ids[i], d)).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::with_capacity(16 + n * (self.dim * 4 + 32));
        out.extend_from_slice(DB_MAGIC);
        out.extend_from_slice(&DB_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in &self.positions {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != DB_MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: "bad magic, expected PRFD".into(),
            });
        }
        let version = r.u32("version")?;
        if version != DB_VERSION {
            return Err(Error::Format {
                offset: 4,
                reason: format!("unsupported version {version}"),
            });
        }
        let n = r.u32("count")? as usize;
        let dim = r.u32("dim")? as usize;
        let need = n
            .checked_mul(dim * 4 + 24 + 8)
            .ok_or_else(|| r.error("count overflows"))?;
        if bytes.len() - r.pos != need {
            return Err(Error::Format {
                offset: bytes.len().min(r.pos + need) as u64,
                reason: format!("payload is {} bytes, header implies {need}", bytes.len() - r.pos),
            });
        }
        let mut db = DescriptorDb::new(dim);
        db.data = (0..n * dim).map(|_| r.f32()).collect::<Result<_>>()?;
        db.positions = (0..n).map(|_| Ok([r.f64()?, r.f64()?, r.f64()?])).collect::<Result<_>>()?;
        let id_start = r.pos;
        db.ids = (0..n).map(|_| r.u64("id")).collect::<Result<_>>()?;
        let mut seen = HashSet::new();
        if let Some(k) = db.ids.iter().position(|id| !seen.insert(*id)) {
            return Err(Error::Format {
                offset: (id_start + 8 * k) as u64,
                reason: format!("duplicate id {}", db.ids[k]),
            });
        }
        Ok(db)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        DescriptorDb::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, reason: &str) -> Error {
        Error::Format {
            offset: self.pos as u64,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(&format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, "descriptor")?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, "position")?.try_into().expect("8 bytes")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    /// `ar[N − 1]` is AR@N.
    pub ar: Vec<f64>,
    pub one_percent_n: usize,
    pub ar_one_percent: f64,
    pub evaluated: usize,
    /// Queries without any database entry within the radius.
    pub excluded: usize,
}

impl RecallReport {
    pub fn ar_at(&self, n: usize) -> f64 {
        self.ar[n - 1]
    }

    pub fn table(&self) -> CsvTable {
        let mut t = CsvTable::new(&["N", "AR"]);
        for (i, v) in self.ar.iter().enumerate() {
            t.push(vec![(i + 1).to_string(), format!("{v:.6}")]);
        }
        t.comment(format!(
            "AR@1%={:.6} N1%={} evaluated={} excluded={}",
            self.ar_one_percent, self.one_percent_n, self.evaluated, self.excluded
        ));
        t
    }
}

fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Average recall over queries that have at least one positive within `tau`.
pub fn recall_metrics(db: &DescriptorDb, queries: &[Descriptor], k_max: usize, tau: f64) -> Result<RecallReport> {
    if k_max == 0 {
        return Err(Error::Contract("k_max must be positive".into()));
    }
    let one_pct = db.len().div_ceil(100).max(1);
    let mut hits = vec![0usize; k_max];
    let mut hits_pct = 0usize;
    let (mut evaluated, mut excluded) = (0, 0);
    for q in queries {
        if !db.positions().iter().any(|p| dist3(p, &q.position) <= tau) {
            excluded += 1;
            continue;
        }
        evaluated += 1;
        let ranking = db.rank(&q.f)?;
        let first = ranking
            .iter()
            .position(|&(i, _)| dist3(&db.positions()[i], &q.position) <= tau)
            .expect("a positive exists");
        for (n, h) in hits.iter_mut().enumerate() {
            if first <= n {
                *h += 1;
            }
        }
        if first < one_pct {
            hits_pct += 1;
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} queries have no database entry within {tau} m and were excluded");
    }
    let denom = evaluated.max(1) as f64;
    Ok(RecallReport {
        ar: hits.iter().map(|&h| h as f64 / denom).collect(),
        one_percent_n: one_pct,
        ar_one_percent: hits_pct as f64 / denom,
        evaluated,
        excluded,
    })
}
