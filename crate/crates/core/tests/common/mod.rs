#![allow(dead_code)]

use fedcode::coder::{assign_codes_batch, train_pq, PqConfig};
use fedcode::data::{generate_synthetic, SyntheticConfig, TextEncodingMatrix};
use fedcode::encoder::EncoderConfig;
use fedcode::orchestrator::{ClientData, ModelConfig};
use fedcode::nn::Parameters;

pub const H: f64 = 1e-5;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Central differences over every scalar of `p`, compared with `analytic`.
/// Panics on the first entry above `1e-4` relative error and returns the
/// worst error otherwise.
pub fn fd_check<P: Parameters + Clone>(p: &P, analytic: &P, f: impl Fn(&P) -> f64) -> f64 {
    let grads = analytic.flat();
    let sizes: Vec<usize> = p.tensors().iter().map(|t| t.data.len()).collect();
    assert_eq!(grads.len(), sizes.iter().sum::<usize>());
    let mut worst: f64 = 0.0;
    let mut idx = 0;
    for (ti, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let mut plus = p.clone();
            plus.tensors_mut()[ti].data[i] += H;
            let mut minus = p.clone();
            minus.tensors_mut()[ti].data[i] -= H;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * H);
            let e = rel_err(grads[idx], numeric);
            if e > 1e-4 {
                panic!(
                    "{} [{i}]: analytic {} numeric {numeric}",
                    p.tensors()[ti].name, grads[idx]
                );
            }
            worst = worst.max(e);
            idx += 1;
        }
    }
    worst
}

/// Two small synthetic domains coded against one pooled codebook.
pub fn two_domains(seed: u64, users: [usize; 2]) -> (Vec<ClientData>, ModelConfig) {
    let syn = SyntheticConfig {
        users,
        items: [60, 60],
        ..SyntheticConfig::default()
    };
    let [a, b] = generate_synthetic(&syn, seed).unwrap();
    let pooled = TextEncodingMatrix::concat(&[&a.encodings, &b.encodings]).unwrap();
    let pq = PqConfig {
        codebooks: 4,
        centroids: 16,
        kmeans_iters: 30,
        seed,
    };
    let cs = train_pq(&pooled, &pq).unwrap();
    let data = vec![
        ClientData::new(&a.dataset, assign_codes_batch(&a.encodings, &cs).unwrap()).unwrap(),
        ClientData::new(&b.dataset, assign_codes_batch(&b.encodings, &cs).unwrap()).unwrap(),
    ];
    let model = ModelConfig {
        codebooks: 4,
        centroids: 16,
        encoder: EncoderConfig {
            d_model: 16,
            heads: 2,
            layers: 1,
            max_len: 12,
        },
    };
    (data, model)
}
