mod common;

use fedcode::code_model::CodeEmbeddingTable;
use fedcode::coder::ItemCode;
use fedcode::encoder::{EncoderConfig, EncoderParams, SequenceBatch};
use fedcode::nn::{uniform2, Parameters};
use fedcode::prompts::{
    domain_prompt_attend, fuse_full, prompt_backward, prompt_loss, DomainPrompt, FusionHead,
    PromptConfig, PromptMode, PromptSet,
};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::fd_check;

struct Fixture {
    encoder: EncoderParams,
    table: CodeEmbeddingTable,
    codes: Vec<ItemCode>,
    batch: SequenceBatch,
}

fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = EncoderParams::init(
        EncoderConfig {
            d_model: 8,
            heads: 2,
            layers: 1,
            max_len: 8,
        },
        &mut rng,
    )
    .unwrap();
    let mut table = CodeEmbeddingTable::init(3, 6, 8, seed).unwrap();
    table.e.mapv_inplace(|v| v * 20.0);
    let codes = (0..20)
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
    Fixture {
        encoder,
        table,
        codes,
        batch: SequenceBatch::from_examples(&examples, 8),
    }
}

/// Prompts with every parameter randomized, so no gradient path starts
/// at an exact zero.
fn random_prompts(mode: PromptMode, seed: u64) -> PromptSet {
    let cfg = PromptConfig {
        mode,
        context_words: 5,
        heads: 2,
        upe_layers: 1,
        upe_heads: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = PromptSet::init(&cfg, 8, 20, 8, &mut rng).unwrap();
    for t in p.tensors_mut() {
        let scale = if t.name.starts_with("fusion") { 0.4 } else { 0.8 };
        for v in t.data.iter_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
    p
}

fn check_mode(mode: PromptMode, seed: u64) {
    let f = fixture(seed);
    let prompts = random_prompts(mode, seed + 100);
    let (_, g_table, g_prompts) =
        prompt_backward(&f.batch, &f.encoder, &f.table, &f.codes, &prompts).unwrap();
    let worst = fd_check(&prompts, &g_prompts, |p| {
        prompt_loss(&f.batch, &f.encoder, &f.table, &f.codes, p).unwrap()
    });
    assert!(worst <= 1e-4);
    let worst = fd_check(&f.table, &g_table, |t| {
        prompt_loss(&f.batch, &f.encoder, t, &f.codes, &prompts).unwrap()
    });
    assert!(worst <= 1e-4);
}

#[test]
fn light_prompt_gradients_match_finite_differences() {
    check_mode(PromptMode::Light, 1);
}

#[test]
fn full_prompt_gradients_match_finite_differences() {
    check_mode(PromptMode::Full, 2);
}

#[test]
fn domain_attention_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (d, dp, heads, b) = (8, 6, 2, 4);
    let prompt = DomainPrompt {
        context: uniform2(dp, d, 1.0, &mut rng),
        wq: uniform2(d, d, 1.0, &mut rng),
        wk: uniform2(d, d, 1.0, &mut rng),
        wv: uniform2(d, d, 1.0, &mut rng),
        wo: uniform2(d, d, 1.0, &mut rng),
    };
    let h = uniform2(b, d, 1.0, &mut rng);
    let got = domain_prompt_attend(&h, &prompt, heads);

    let mm = |x: &Array2<f64>, w: &Array2<f64>| {
        let mut out = Array2::<f64>::zeros((x.nrows(), w.ncols()));
        for i in 0..x.nrows() {
            for j in 0..w.ncols() {
                for k in 0..x.ncols() {
                    out[[i, j]] += x[[i, k]] * w[[k, j]];
                }
            }
        }
        out
    };
    let q = mm(&h, &prompt.wq);
    let k = mm(&prompt.context, &prompt.wk);
    let v = mm(&prompt.context, &prompt.wv);
    let dh = d / heads;
    let mut ctx = Array2::<f64>::zeros((b, d));
    for hd in 0..heads {
        for i in 0..b {
            let scores: Vec<f64> = (0..dp)
                .map(|j| {
                    (0..dh).map(|c| q[[i, hd * dh + c]] * k[[j, hd * dh + c]]).sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            for j in 0..dp {
                let w = (scores[j] - mx).exp() / z;
                for c in 0..dh {
                    ctx[[i, hd * dh + c]] += w * v[[j, hd * dh + c]];
                }
            }
        }
    }
    let want = mm(&ctx, &prompt.wo);
    for (a, w) in got.iter().zip(want.iter()) {
        assert!((a - w).abs() <= 1e-10);
    }
}

#[test]
fn full_fusion_matches_affine_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = 4;
    let p_dom = uniform2(3, d, 1.0, &mut rng);
    let p_user = uniform2(3, d, 1.0, &mut rng);
    let h = uniform2(3, d, 1.0, &mut rng);
    let head = FusionHead {
        wc: uniform2(3 * d, d, 1.0, &mut rng),
        bc: Array1::from_iter((0..d).map(|i| i as f64 * 0.1)),
    };
    let got = fuse_full(&p_dom, &p_user, &h, &head);
    for r in 0..3 {
        let cat: Vec<f64> = p_dom
            .row(r)
            .iter()
            .chain(p_user.row(r).iter())
            .chain(h.row(r).iter())
            .copied()
            .collect();
        for j in 0..d {
            let want = head.bc[j] + (0..3 * d).map(|k| cat[k] * head.wc[[k, j]]).sum::<f64>();
            assert!((got[[r, j]] - want).abs() <= 1e-12);
        }
    }
}
