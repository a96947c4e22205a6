mod common;

use fedcode::encoder::{self, SequenceBatch};
use fedcode::nn::Parameters;
use fedcode::orchestrator::{Federation, FederationConfig};
use fedcode::privacy::{EncryptionConfig, NoiseMode, Payload};
use fedcode::server::{client_weights, RectifierMode};
use fedcode::wire::{Endpoint, FileTransport, Message};

use common::two_domains;

fn desk_cfg(seed: u64) -> FederationConfig {
    FederationConfig {
        rounds: 6,
        lr_local: 0.005,
        batch_size: 64,
        encryption: EncryptionConfig {
            tau: 0.1,
            seed,
            ..EncryptionConfig::default()
        },
        alpha: 2.0,
        seed,
        ..FederationConfig::default()
    }
}

#[test]
fn one_identity_round_is_a_centralized_gradient_step() {
    let (data, model) = two_domains(3, [40, 30]);
    let cfg = FederationConfig {
        rounds: 1,
        lr_local: 0.0,
        batch_size: usize::MAX,
        encryption: EncryptionConfig {
            tau: 1e9,
            mode: NoiseMode::Identity,
            ..EncryptionConfig::default()
        },
        alpha: 0.7,
        rectifier: RectifierMode::Unit,
        ..FederationConfig::default()
    };
    let mut fed = Federation::new(&data, &model, cfg).unwrap();
    let e0 = fed.server.table.clone();

    // Centralized oracle: one descent step on the sample-weighted client losses.
    let mut expected = e0.e.clone();
    let total: usize = data.iter().map(|d| d.split.train_examples().len()).sum();
    for (client, d) in fed.clients.iter().zip(&data) {
        let examples = d.split.train_examples();
        let batch = SequenceBatch::from_examples(&examples, model.encoder.max_len);
        let (_, g) = encoder::backward(&batch, &client.encoder, &e0, &d.codes).unwrap();
        let w = examples.len() as f64 / total as f64;
        expected.scaled_add(-cfg.alpha * w, &g.table.e);
    }

    fed.run_round().unwrap();
    let worst = fed
        .server
        .table
        .e
        .iter()
        .zip(expected.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-10, "max abs deviation {worst}");
}

#[test]
fn table_paper_counts_give_expected_weights() {
    let w = client_weights(&[684_837, 395_150]).unwrap();
    assert!((w[0] - 0.6341).abs() < 5e-5);
    assert!((w[1] - 0.3659).abs() < 5e-5);
    assert!((w[0] + w[1] - 1.0).abs() < 1e-15);
}

#[test]
fn sync_makes_client_tables_bit_identical() {
    let (data, model) = two_domains(4, [40, 30]);
    let mut fed = Federation::new(&data, &model, desk_cfg(4)).unwrap();
    for _ in 0..3 {
        fed.run_round().unwrap();
        for c in &fed.clients {
            assert_eq!(c.table.as_slice(), fed.server.table.as_slice(), "{}", c.id);
            assert_eq!(c.table.checksum(), fed.server.table.checksum());
        }
    }
}

#[test]
fn uploads_carry_only_the_table_gradient() {
    let (data, model) = two_domains(5, [40, 30]);
    let dir = tempfile::tempdir().unwrap();
    let transport = FileTransport::new(dir.path()).unwrap();
    let inbox = transport.mailbox(&Endpoint::Server);
    let mut fed =
        Federation::with_transport(&data, &model, desk_cfg(5), Box::new(transport)).unwrap();
    let (_, bytes) = fed.run_round().unwrap();
    fed.run_round().unwrap();

    let table_len = model.codebooks * model.centroids * model.encoder.d_model;
    let encoder_len = fed.clients[0]
        .encoder
        .tensors()
        .iter()
        .map(|t| t.data.len())
        .sum::<usize>();
    assert_ne!(table_len, encoder_len);

    let msgs = FileTransport::read_mailbox(&inbox).unwrap();
    let mut uploads = 0;
    for m in &msgs {
        match m {
            Message::Upload(u) => {
                uploads += 1;
                assert_eq!(
                    u.encrypted.shape,
                    vec![model.codebooks, model.centroids, model.encoder.d_model]
                );
                match &u.encrypted.payload {
                    Payload::Buckets(v) => assert_eq!(v.len(), table_len),
                    Payload::Real(_) => panic!("randomized mode must upload buckets"),
                }
            }
            Message::Ack { .. } => {}
            Message::Sync(_) => panic!("the server never receives table tensors"),
        }
    }
    assert_eq!(uploads, 4);

    // Nothing besides the fixed header and two bytes per table entry.
    for (b, d) in bytes.iter().zip(&data) {
        let header = 4 + 1 + (4 + d.domain.len()) + 8 + 1 + 8 + 4 + 8 + 8 + (4 + 8 * 3);
        assert_eq!(*b, header + 2 * table_len);
    }
}

#[test]
fn file_transport_matches_loopback() {
    let (data, model) = two_domains(6, [40, 30]);
    let dir = tempfile::tempdir().unwrap();
    let a = Federation::new(&data, &model, desk_cfg(6))
        .unwrap()
        .pretrain()
        .unwrap();
    let b = Federation::with_transport(
        &data,
        &model,
        desk_cfg(6),
        Box::new(FileTransport::new(dir.path()).unwrap()),
    )
    .unwrap()
    .pretrain()
    .unwrap();
    assert_eq!(a.table.as_slice(), b.table.as_slice());
    assert_eq!(a.log.to_json(false), b.log.to_json(false));
}

#[test]
fn pretraining_is_reproducible() {
    let (data, model) = two_domains(7, [40, 30]);
    let run = || {
        Federation::new(&data, &model, desk_cfg(7))
            .unwrap()
            .pretrain()
            .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.table.as_slice(), b.table.as_slice());
    assert_eq!(
        serde_json::to_string(&a.log.to_json(false)).unwrap(),
        serde_json::to_string(&b.log.to_json(false)).unwrap()
    );
    for ((_, ea), (_, eb)) in a.encoders.iter().zip(&b.encoders) {
        assert_eq!(ea.flat(), eb.flat());
    }
    let other = Federation::new(&data, &model, desk_cfg(8))
        .unwrap()
        .pretrain()
        .unwrap();
    assert_ne!(a.table.as_slice(), other.table.as_slice());
}

#[test]
fn early_stopping_halts_within_patience() {
    let (data, model) = two_domains(9, [40, 30]);
    for patience in [1, 2] {
        let cfg = FederationConfig {
            rounds: 25,
            patience,
            ..desk_cfg(9)
        };
        let out = Federation::new(&data, &model, cfg).unwrap().pretrain().unwrap();
        let best = out.log.best_epoch.unwrap();
        let ran = out.log.records.len();
        assert!(ran - best <= patience, "ran {ran}, best {best}");
        if out.log.stopped_early {
            assert_eq!(ran, best + patience);
        }
        let scores: Vec<f64> = out
            .log
            .records
            .iter()
            .map(|r| r.valid_recall10.iter().sum::<f64>() / 2.0)
            .collect();
        let top = scores.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(scores[best - 1], top);
        assert_eq!(out.best_valid_recall10, top);
    }
}

#[test]
fn smoothed_training_loss_does_not_increase() {
    let (data, model) = two_domains(10, [120, 60]);
    let cfg = FederationConfig {
        rounds: 10,
        patience: 10,
        ..desk_cfg(10)
    };
    let out = Federation::new(&data, &model, cfg).unwrap().pretrain().unwrap();
    assert_eq!(out.log.records.len(), 10);
    for client in 0..2 {
        let losses = out.log.losses(client);
        let smooth: Vec<f64> = losses.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
        for w in smooth.windows(2) {
            assert!(w[1] <= w[0], "client {client}: {losses:?}");
        }
    }
}

#[test]
fn zero_rounds_rejected() {
    let (data, model) = two_domains(11, [40, 30]);
    let cfg = FederationConfig {
        rounds: 0,
        ..desk_cfg(11)
    };
    assert!(Federation::new(&data, &model, cfg).is_err());
}
