//! Product quantization of item text encodings into discrete item codes.
//!
//! The encoding space is split into `D` contiguous sub-spaces; each one gets
//! its own codebook of `M_c` centroids learned with k-means (seeded k-means++
//! initialization, Lloyd iterations). An item's code is the index of the
//! nearest centroid in every sub-space.
//!
//! File formats (little-endian):
//!
//! * codebook `PFCB`: magic, u32 version, u32 D, u32 M_c, u32 sub-dim, then
//!   `D * M_c * sub_dim` f32 values.
//! * codes `PFCC`: magic, u32 version, u64 item count, u32 D, then
//!   `item_count * D` u16 indices.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::data::TextEncodingMatrix;
use crate::error::{Error, Result};

const CODEBOOK_MAGIC: &[u8; 4] = b"PFCB";
const CODES_MAGIC: &[u8; 4] = b"PFCC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PqConfig {
    /// Number of sub-spaces (codebooks), `D`.
    pub codebooks: usize,
    /// Centroids per codebook, `M_c`.
    pub centroids: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for PqConfig {
    fn default() -> Self {
        PqConfig {
            codebooks: 48,
            centroids: 256,
            kmeans_iters: 100,
            seed: 0,
        }
    }
}

impl PqConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.codebooks == 0 {
            return Err(Error::config("codebook count must be at least 1"));
        }
        if self.centroids < 2 || self.centroids > u16::MAX as usize + 1 {
            return Err(Error::config("centroids per codebook must be in [2, 65536]"));
        }
        if dim % self.codebooks != 0 {
            return Err(Error::DimNotDivisible {
                dim,
                splits: self.codebooks,
            });
        }
        Ok(())
    }
}

/// One centroid matrix (`M_c x sub_dim`) per codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    pub centroids: Vec<Array2<f64>>,
}

impl CentroidSet {
    pub fn codebooks(&self) -> usize {
        self.centroids.len()
    }

    pub fn centroids_per_codebook(&self) -> usize {
        self.centroids[0].nrows()
    }

    pub fn sub_dim(&self) -> usize {
        self.centroids[0].ncols()
    }

    pub fn dim(&self) -> usize {
        self.codebooks() * self.sub_dim()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CODEBOOK_MAGIC)
            .u32(VERSION)
            .u32(self.codebooks() as u32)
            .u32(self.centroids_per_codebook() as u32)
            .u32(self.sub_dim() as u32);
        for c in &self.centroids {
            w.f32_slice(c.as_standard_layout().as_slice().unwrap());
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "PFCB file");
        r.magic(CODEBOOK_MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::BadVersion {
                what: "PFCB",
                version,
            });
        }
        let (d, m, sub) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let centroids = (0..d)
            .map(|_| {
                let v = r.f32_vec(m * sub)?;
                Ok(Array2::from_shape_vec((m, sub), v).unwrap())
            })
            .collect::<Result<_>>()?;
        r.finish()?;
        Ok(CentroidSet { centroids })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// The discrete "semantic id" of an item: one centroid index per codebook.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ItemCode(pub Vec<usize>);

impl ItemCode {
    pub fn indices(&self) -> &[usize] {
        &self.0
    }
}

/// Per-iteration within-cluster sum of squares of one k-means run, measured
/// after every assignment step.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansTrace {
    pub wcss: Vec<f64>,
    pub converged: bool,
}

/// Trains one codebook per sub-space on the pooled encodings of all domains.
pub fn train_pq(encodings: &TextEncodingMatrix, cfg: &PqConfig) -> Result<CentroidSet> {
    train_pq_traced(encodings, cfg).map(|(c, _)| c)
}

pub fn train_pq_traced(
    encodings: &TextEncodingMatrix,
    cfg: &PqConfig,
) -> Result<(CentroidSet, Vec<KMeansTrace>)> {
    cfg.validate(encodings.dim())?;
    let sub = encodings.dim() / cfg.codebooks;
    // Codebooks are independent, so they train on separate threads with
    // seeds derived from the codebook index.
    let results: Vec<Result<(Array2<f64>, KMeansTrace)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.codebooks)
            .map(|k| {
                let view = encodings.rows.slice(ndarray::s![.., k * sub..(k + 1) * sub]);
                s.spawn(move || {
                    let distinct = count_distinct(view);
                    if distinct < cfg.centroids {
                        return Err(Error::TooFewDistinct {
                            codebook: k,
                            distinct,
                            centroids: cfg.centroids,
                        });
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(
                        cfg.seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                    );
                    Ok(kmeans(view, cfg.centroids, cfg.kmeans_iters, &mut rng))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut centroids = Vec::with_capacity(cfg.codebooks);
    let mut traces = Vec::with_capacity(cfg.codebooks);
    for r in results {
        let (c, t) = r?;
        centroids.push(c);
        traces.push(t);
    }
    Ok((CentroidSet { centroids }, traces))
}

fn count_distinct(points: ArrayView2<f64>) -> usize {
    points
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len()
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by squared distance; the lowest index wins ties.
fn nearest(x: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means with k-means++ seeding. Requires at least `k` distinct points.
pub fn kmeans(
    points: ArrayView2<f64>,
    k: usize,
    max_iters: usize,
    rng: &mut impl Rng,
) -> (Array2<f64>, KMeansTrace) {
    let n = points.nrows();
    let dim = points.ncols();

    // k-means++ seeding.
    let mut centroids = Array2::zeros((k, dim));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut min_d: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|p| sq_dist(p, centroids.row(0)))
        .collect();
    for j in 1..k {
        let pick = match WeightedIndex::new(&min_d) {
            Ok(w) => w.sample(rng),
            // Every remaining point sits on a chosen centroid.
            Err(_) => rng.random_range(0..n),
        };
        centroids.row_mut(j).assign(&points.row(pick));
        for (i, p) in points.rows().into_iter().enumerate() {
            min_d[i] = min_d[i].min(sq_dist(p, centroids.row(j)));
        }
    }

    let mut assign = vec![usize::MAX; n];
    let mut dist = vec![0.0; n];
    let mut trace = KMeansTrace {
        wcss: Vec::new(),
        converged: false,
    };
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        for (i, p) in points.rows().into_iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            changed |= assign[i] != j;
            assign[i] = j;
            dist[i] = d;
        }
        trace.wcss.push(dist.iter().sum());
        if !changed {
            trace.converged = true;
            break;
        }

        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (i, p) in points.rows().into_iter().enumerate() {
            sums.row_mut(assign[i]).scaled_add(1.0, &p);
            counts[assign[i]] += 1;
        }
        let mut needs_reseed = Vec::new();
        for j in 0..k {
            if counts[j] == 0 {
                needs_reseed.push(j);
            } else {
                let mean = sums.row(j).mapv(|v| v / counts[j] as f64);
                centroids.row_mut(j).assign(&mean);
            }
        }
        // Bit-identical centroids: keep the lowest index, reseed the rest.
        let mut seen = HashSet::new();
        for j in 0..k {
            if needs_reseed.contains(&j) {
                continue;
            }
            let key: Vec<u64> = centroids.row(j).iter().map(|v| v.to_bits()).collect();
            if !seen.insert(key) {
                needs_reseed.push(j);
            }
        }
        if !needs_reseed.is_empty() {
            // Farthest points from their current centroid, distinct by value.
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
            let mut used: HashSet<Vec<u64>> = HashSet::new();
            let mut candidates = order.into_iter().filter(|&i| {
                used.insert(points.row(i).iter().map(|v| v.to_bits()).collect())
            });
            for j in needs_reseed {
                if let Some(i) = candidates.next() {
                    centroids.row_mut(j).assign(&points.row(i));
                    dist[i] = 0.0;
                }
            }
        }
    }
    (centroids, trace)
}

/// Assigns the nearest centroid in every sub-space.
pub fn assign_code(x: ArrayView1<f64>, cs: &CentroidSet) -> Result<ItemCode> {
    if x.len() != cs.dim() {
        return Err(Error::shape(format!(
            "encoding has dim {}, codebooks expect {}",
            x.len(),
            cs.dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("encoding vector".into()));
    }
    let sub = cs.sub_dim();
    Ok(ItemCode(
        cs.centroids
            .iter()
            .enumerate()
            .map(|(k, c)| nearest(x.slice(ndarray::s![k * sub..(k + 1) * sub]), c).0)
            .collect(),
    ))
}

pub fn assign_codes_batch(encodings: &TextEncodingMatrix, cs: &CentroidSet) -> Result<Vec<ItemCode>> {
    encodings
        .rows
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(i, row)| {
            assign_code(row, cs).map_err(|e| Error::shape(format!("item row {i}: {e}")))
        })
        .collect()
}

pub fn codes_to_bytes(codes: &[ItemCode]) -> Vec<u8> {
    let d = codes.first().map_or(0, |c| c.0.len());
    let mut w = Writer::new();
    w.bytes(CODES_MAGIC)
        .u32(VERSION)
        .u64(codes.len() as u64)
        .u32(d as u32);
    for c in codes {
        for &i in &c.0 {
            w.u16(i as u16);
        }
    }
    w.buf
}

pub fn codes_from_bytes(bytes: &[u8]) -> Result<Vec<ItemCode>> {
    let mut r = Reader::new(bytes, "PFCC file");
    r.magic(CODES_MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::BadVersion {
            what: "PFCC",
            version,
        });
    }
    let count = r.u64()? as usize;
    let d = r.u32()? as usize;
    let flat = r.u16_vec(count.checked_mul(d).unwrap_or(usize::MAX))?;
    r.finish()?;
    Ok(flat
        .chunks_exact(d.max(1))
        .take(count)
        .map(|c| ItemCode(c.iter().map(|&v| v as usize).collect()))
        .collect())
}

pub fn save_codes(path: &Path, codes: &[ItemCode]) -> Result<()> {
    write_file(path, &codes_to_bytes(codes))
}

pub fn load_codes(path: &Path) -> Result<Vec<ItemCode>> {
    codes_from_bytes(&read_file(path)?)
}
