mod common;

use fedcode::nn::Parameters;
use fedcode::orchestrator::{
    evaluate, finetune, Federation, FederationConfig, FinetuneConfig, PretrainOutcome,
};
use fedcode::privacy::EncryptionConfig;
use fedcode::prompts::{PromptConfig, PromptMode, PromptSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::two_domains;

fn prompt_cfg(mode: PromptMode) -> PromptConfig {
    PromptConfig {
        mode,
        context_words: 8,
        heads: 2,
        upe_layers: 1,
        upe_heads: 2,
    }
}

fn tune_cfg(seed: u64, epochs: usize) -> FinetuneConfig {
    FinetuneConfig {
        epochs,
        lr: 0.005,
        batch_size: 64,
        patience: 10,
        seed,
    }
}

fn pretrained(seed: u64) -> (Vec<fedcode::orchestrator::ClientData>, PretrainOutcome) {
    let (data, model) = two_domains(seed, [120, 40]);
    let cfg = FederationConfig {
        rounds: 5,
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
    };
    let out = Federation::new(&data, &model, cfg).unwrap().pretrain().unwrap();
    (data, out)
}

#[test]
fn fresh_prompts_reproduce_zero_shot_scores() {
    let (data, out) = pretrained(1);
    let target = &data[1];
    let encoder = &out.encoders[1].1;
    let valid = target.split.valid_examples();
    let zero_shot = evaluate(&valid, encoder, &out.table, &target.codes, None).unwrap();
    for mode in [PromptMode::Light, PromptMode::Full] {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let prompts = PromptSet::init(
            &prompt_cfg(mode),
            encoder.cfg.d_model,
            target.item_count,
            encoder.cfg.max_len,
            &mut rng,
        )
        .unwrap();
        let with = evaluate(&valid, encoder, &out.table, &target.codes, Some(&prompts)).unwrap();
        assert_eq!(with, zero_shot, "{mode:?}");
    }
}

#[test]
fn zero_epochs_return_zero_shot_metrics() {
    let (data, out) = pretrained(2);
    for mode in [PromptMode::Light, PromptMode::Full] {
        let f = finetune(&data[1], &out.encoders[1].1, out.table.clone(), &prompt_cfg(mode), &tune_cfg(2, 0))
            .unwrap();
        assert_eq!(f.best, f.zero_shot);
        assert_eq!(f.table.as_slice(), out.table.as_slice());
    }
}

#[test]
fn encoder_is_frozen_while_table_and_prompts_move() {
    let (data, out) = pretrained(3);
    let encoder = out.encoders[1].1.clone();
    let before = encoder.flat();
    let f = finetune(&data[1], &encoder, out.table.clone(), &prompt_cfg(PromptMode::Full), &tune_cfg(3, 3))
        .unwrap();
    assert_eq!(encoder.flat(), before);
    assert_eq!(f.log.records.len(), 4);
    assert!(f.log.records[1..].iter().all(|r| r.losses[0].is_finite()));
}

#[test]
fn tuning_does_not_lose_to_zero_shot() {
    let mut wins = 0;
    for seed in 0..5 {
        let (data, out) = pretrained(10 + seed);
        let f = finetune(
            &data[1],
            &out.encoders[1].1,
            out.table.clone(),
            &prompt_cfg(PromptMode::Light),
            &tune_cfg(seed, 5),
        )
        .unwrap();
        assert!(f.best.is_finite());
        wins += (f.best.recall10 >= f.zero_shot.recall10) as usize;
    }
    assert!(wins >= 4, "{wins}/5");
}

#[test]
fn tuned_prompts_fit_training_data_at_least_as_well() {
    let (data, out) = pretrained(4);
    let target = &data[1];
    let encoder = &out.encoders[1].1;
    let train = target.split.train_target_examples();
    let before = evaluate(&train, encoder, &out.table, &target.codes, None).unwrap();
    for mode in [PromptMode::Light, PromptMode::Full] {
        let cfg = FinetuneConfig {
            patience: 100,
            ..tune_cfg(4, 10)
        };
        let f = finetune(target, encoder, out.table.clone(), &prompt_cfg(mode), &cfg).unwrap();
        let after = evaluate(&train, encoder, &f.table, &target.codes, Some(&f.prompts)).unwrap();
        assert!(after.is_finite());
        assert!(after.recall10 >= before.recall10, "{mode:?}: {after:?} vs {before:?}");
        assert!(after.ndcg10 >= before.ndcg10, "{mode:?}: {after:?} vs {before:?}");
    }
}
