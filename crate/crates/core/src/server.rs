//! Server side of a federated round: weight, rectify, aggregate, decode,
//! update the global table, and hand out synchronization messages.

use ndarray::{Array1, Array2};

use crate::code_model::CodeEmbeddingTable;
use crate::error::{Error, Result};
use crate::privacy::{keep_probability, noise_probability, EncryptedGradient, NoiseMode, Payload};

/// One client's upload for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpload {
    pub client_id: String,
    pub round: u64,
    pub encrypted: EncryptedGradient,
}

impl ClientUpload {
    pub fn sample_count(&self) -> u64 {
        self.encrypted.sample_count
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RectifierMode {
    /// Constant `p - q` from the uploads' epsilon.
    Literal,
    /// Constant 1.
    Unit,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub table: CodeEmbeddingTable,
    pub alpha: f64,
    pub round: u64,
    pub rectifier: RectifierMode,
}

/// Stacks the uploads' payloads as rows (`n_c x d_f`), in upload order.
///
/// Every upload must carry the same shape and the same encryption settings
/// as the first one.
pub fn flatten_concat(uploads: &[ClientUpload]) -> Result<Array2<f64>> {
    let first = uploads
        .first()
        .ok_or_else(|| Error::Protocol("no uploads to aggregate".into()))?;
    let head = &first.encrypted;
    let d_f: usize = head.shape.iter().product();
    let mut r = Array2::zeros((uploads.len(), d_f));
    for (i, up) in uploads.iter().enumerate() {
        let e = &up.encrypted;
        let offence = if e.shape != head.shape {
            Some(format!("shape {:?} differs from {:?}", e.shape, head.shape))
        } else if e.mode != head.mode
            || e.tau != head.tau
            || e.buckets != head.buckets
            || e.epsilon != head.epsilon
        {
            Some("encryption settings differ".to_string())
        } else {
            e.validate().err().map(|err| err.to_string())
        };
        if let Some(msg) = offence {
            return Err(Error::Protocol(format!("upload from {}: {msg}", up.client_id)));
        }
        let mut row = r.row_mut(i);
        match &e.payload {
            Payload::Buckets(v) => row.iter_mut().zip(v).for_each(|(o, &x)| *o = x as f64),
            Payload::Real(v) => row.iter_mut().zip(v).for_each(|(o, &x)| *o = x),
        }
    }
    Ok(r)
}

/// `w_i = m_i / sum(m)`.
pub fn client_weights(sample_counts: &[u64]) -> Result<Vec<f64>> {
    if let Some(i) = sample_counts.iter().position(|&m| m == 0) {
        return Err(Error::Protocol(format!("client {i} reported zero samples")));
    }
    let total: u64 = sample_counts.iter().sum();
    if total == 0 {
        return Err(Error::Protocol("zero total sample count".into()));
    }
    Ok(sample_counts
        .iter()
        .map(|&m| m as f64 / total as f64)
        .collect())
}

/// Rectifier constant `p - q` for the given epsilon.
pub fn rectifier_value(epsilon: f64) -> f64 {
    noise_probability(epsilon) - keep_probability(epsilon)
}

/// `g = sum_i (r_i * rect) w_i`.
pub fn rectify_aggregate(r: &Array2<f64>, rectifier: f64, w: &[f64]) -> Array1<f64> {
    let mut g = Array1::zeros(r.ncols());
    for (row, &wi) in r.rows().into_iter().zip(w) {
        g.zip_mut_with(&row, |acc, &x| *acc += x * rectifier * wi);
    }
    g
}

/// Maps aggregated bucket values back to gradient units, `g s - tau`,
/// checking that `g` fills `shape`.
pub fn decode(g: &Array1<f64>, shape: &[usize], tau: f64, buckets: u32) -> Result<Vec<f64>> {
    let n: usize = shape.iter().product();
    if n != g.len() {
        return Err(Error::shape(format!(
            "{} aggregated values cannot fill shape {shape:?}",
            g.len()
        )));
    }
    let s = 2.0 * tau / buckets as f64;
    Ok(g.iter().map(|&x| x * s - tau).collect())
}

impl ServerState {
    pub fn new(table: CodeEmbeddingTable, alpha: f64, rectifier: RectifierMode) -> Self {
        ServerState {
            table,
            alpha,
            round: 0,
            rectifier,
        }
    }

    /// `E <- E - alpha g` and advance the round counter.
    pub fn apply_update(&mut self, g: &[f64]) -> Result<()> {
        let e = self.table.e.as_slice_mut().expect("table is contiguous");
        if g.len() != e.len() {
            return Err(Error::shape(format!(
                "update of {} values for a table of {}",
                g.len(),
                e.len()
            )));
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("aggregated gradient element {i}")));
        }
        for (x, &d) in e.iter_mut().zip(g) {
            *x -= self.alpha * d;
        }
        self.round += 1;
        Ok(())
    }

    /// The gradient this round's uploads decode to, in table layout.
    pub fn aggregate(&self, uploads: &[ClientUpload]) -> Result<Vec<f64>> {
        let r = flatten_concat(uploads)?;
        let head = &uploads[0].encrypted;
        let (d, m, dv) = self.table.shape();
        if head.shape != [d, m, dv] {
            return Err(Error::Protocol(format!(
                "upload shape {:?} does not match table {:?}",
                head.shape,
                [d, m, dv]
            )));
        }
        let counts: Vec<u64> = uploads.iter().map(ClientUpload::sample_count).collect();
        let w = client_weights(&counts)?;
        if head.mode.quantizes() {
            let rect = match self.rectifier {
                RectifierMode::Literal if head.mode == NoiseMode::Randomized => {
                    rectifier_value(head.epsilon)
                }
                _ => 1.0,
            };
            let g = rectify_aggregate(&r, rect, &w);
            decode(&g, &head.shape, head.tau, head.buckets)
        } else {
            Ok(rectify_aggregate(&r, 1.0, &w).to_vec())
        }
    }

    /// Aggregates and applies one round of uploads.
    pub fn process_round(&mut self, uploads: &[ClientUpload]) -> Result<()> {
        if let Some(up) = uploads.iter().find(|u| u.round != self.round) {
            return Err(Error::Protocol(format!(
                "upload from {} is for round {}, server is at {}",
                up.client_id, up.round, self.round
            )));
        }
        let g = self.aggregate(uploads)?;
        self.apply_update(&g)
    }
}
