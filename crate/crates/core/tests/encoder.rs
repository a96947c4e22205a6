mod common;

use fedcode::code_model::{batch_item_matrix, CodeEmbeddingTable};
use fedcode::coder::ItemCode;
use fedcode::encoder::{self, EncoderConfig, EncoderParams, SequenceBatch};
use fedcode::nn::Parameters;

use common::fd_check;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(seed: u64) -> (EncoderParams, CodeEmbeddingTable, Vec<ItemCode>, SequenceBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EncoderConfig {
        d_model: 8,
        heads: 2,
        layers: 1,
        max_len: 8,
    };
    let mut params = EncoderParams::init(cfg, &mut rng).unwrap();
    // Non-trivial norm gains and biases so their gradients are exercised.
    for t in params.tensors_mut() {
        if t.name.contains("ln") || t.name.contains(".b") {
            for v in t.data.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    let mut table = CodeEmbeddingTable::init(3, 6, 8, seed).unwrap();
    table.e.mapv_inplace(|v| v * 20.0);
    let codes: Vec<ItemCode> = (0..20)
        .map(|_| ItemCode((0..3).map(|_| rng.random_range(0..6)).collect()))
        .collect();
    let examples: Vec<(Vec<usize>, usize)> = (0..8)
        .map(|_| {
            let n = rng.random_range(1..=6);
            (
                (0..n).map(|_| rng.random_range(0..20)).collect(),
                rng.random_range(0..20),
            )
        })
        .collect();
    (params, table, codes, SequenceBatch::from_examples(&examples, 8))
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let (params, table, codes, batch) = setup(11);
    let (_, g) = encoder::backward(&batch, &params, &table, &codes).unwrap();
    let worst = fd_check(&params, &g.encoder, |p| {
        encoder::loss(&batch, p, &table, &codes).unwrap()
    });
    assert!(worst <= 1e-4);
}

#[test]
fn table_gradients_match_finite_differences() {
    let (params, table, codes, batch) = setup(12);
    let (_, g) = encoder::backward(&batch, &params, &table, &codes).unwrap();
    let worst = fd_check(&table, &g.table, |t| {
        encoder::loss(&batch, &params, t, &codes).unwrap()
    });
    assert!(worst <= 1e-4);
}

#[test]
fn zero_layer_gradients_match_finite_differences() {
    let (mut params, table, codes, batch) = setup(13);
    params.layers.clear();
    params.cfg.layers = 0;
    let (_, g) = encoder::backward(&batch, &params, &table, &codes).unwrap();
    fd_check(&table, &g.table, |t| {
        encoder::loss(&batch, &params, t, &codes).unwrap()
    });
    fd_check(&params, &g.encoder, |p| {
        encoder::loss(&batch, p, &table, &codes).unwrap()
    });
}

// Straight-line re-implementation with explicit loops.
mod oracle {
    use super::*;

    pub type M = Vec<Vec<f64>>;

    fn from(a: &ndarray::Array2<f64>) -> M {
        a.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    fn vec1(a: &ndarray::Array1<f64>) -> Vec<f64> {
        a.to_vec()
    }

    fn matmul_bias(x: &M, w: &M, b: &[f64]) -> M {
        x.iter()
            .map(|row| {
                (0..b.len())
                    .map(|j| b[j] + (0..row.len()).map(|k| row[k] * w[k][j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    fn ln(x: &M, g: &[f64], b: &[f64]) -> M {
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let sd = (var + 1e-5).sqrt();
                (0..row.len()).map(|j| g[j] * (row[j] - mean) / sd + b[j]).collect()
            })
            .collect()
    }

    fn gelu(x: f64) -> f64 {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
    }

    fn add(a: &M, b: &M) -> M {
        a.iter()
            .zip(b)
            .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
            .collect()
    }

    pub fn encode_last(p: &EncoderParams, inputs: &M, last: usize) -> Vec<f64> {
        let n = inputs.len();
        let d = p.cfg.d_model;
        let heads = p.cfg.heads;
        let dh = d / heads;
        let pos = from(&p.pos);
        let mut x: M = (0..n)
            .map(|i| (0..d).map(|j| inputs[i][j] + pos[i][j]).collect())
            .collect();
        for l in &p.layers {
            let a = ln(&x, &vec1(&l.ln1_g), &vec1(&l.ln1_b));
            let q = matmul_bias(&a, &from(&l.wq), &vec1(&l.bq));
            let k = matmul_bias(&a, &from(&l.wk), &vec1(&l.bk));
            let v = matmul_bias(&a, &from(&l.wv), &vec1(&l.bv));
            let mut ctx = vec![vec![0.0; d]; n];
            for h in 0..heads {
                for i in 0..n {
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| {
                            (0..dh)
                                .map(|c| q[i][h * dh + c] * k[j][h * dh + c])
                                .sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                    for (j, s) in scores.iter().enumerate() {
                        let w = (s - mx).exp() / z;
                        for c in 0..dh {
                            ctx[i][h * dh + c] += w * v[j][h * dh + c];
                        }
                    }
                }
            }
            x = add(&x, &matmul_bias(&ctx, &from(&l.wo), &vec1(&l.bo)));
            let bn = ln(&x, &vec1(&l.ln2_g), &vec1(&l.ln2_b));
            let u: M = matmul_bias(&bn, &from(&l.w1), &vec1(&l.b1))
                .into_iter()
                .map(|r| r.into_iter().map(gelu).collect())
                .collect();
            x = add(&x, &matmul_bias(&u, &from(&l.w2), &vec1(&l.b2)));
        }
        if !p.layers.is_empty() {
            x = ln(&x, &vec1(&p.lnf_g), &vec1(&p.lnf_b));
        }
        x[last].clone()
    }
}

#[test]
fn encode_matches_straight_line_oracle() {
    let (params, table, codes, batch) = setup(21);
    let h = encoder::encode(&batch, &params, &table, &codes).unwrap();
    let v = batch_item_matrix(&codes, &table).unwrap();
    for b in 0..batch.len() {
        let inputs: oracle::M = batch.items[b].iter().map(|&i| v.row(i).to_vec()).collect();
        let want = oracle::encode_last(&params, &inputs, batch.lengths[b] - 1);
        for (j, w) in want.iter().enumerate() {
            assert!((h[[b, j]] - w).abs() <= 1e-10, "row {b} col {j}");
        }
    }
}

#[test]
fn causal_outputs_ignore_later_positions() {
    let (params, table, codes, _) = setup(31);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let len = rng.random_range(1..=5);
        let items: Vec<usize> = (0..len).map(|_| rng.random_range(0..20)).collect();
        let mut padded = items.clone();
        for _ in 0..rng.random_range(1..=3) {
            padded.push(rng.random_range(0..20));
        }
        let a = SequenceBatch {
            items: vec![items],
            lengths: vec![len],
            targets: vec![0],
        };
        let b = SequenceBatch {
            items: vec![padded],
            lengths: vec![len],
            targets: vec![0],
        };
        assert_eq!(
            encoder::encode(&a, &params, &table, &codes).unwrap(),
            encoder::encode(&b, &params, &table, &codes).unwrap()
        );
    }
}
