//! The two-stage training driver: federated pre-training of the shared code
//! table across domain clients, then per-domain prompt tuning.

use std::time::Instant;

use log::{debug, info};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::code_model::{batch_item_matrix, CodeEmbeddingTable};
use crate::coder::ItemCode;
use crate::data::{leave_one_out_split, DomainDataset, SplitBundle};
use crate::encoder::{backward, encode_items, EncoderConfig, EncoderParams, SequenceBatch};
use crate::error::{Error, Result};
use crate::metrics::{rank_target, MetricSet};
use crate::nn::Adam;
use crate::privacy::{encrypt, EncryptionConfig};
use crate::prompts::{prompt_backward, prompt_scores, PromptConfig, PromptSet};
use crate::server::{ClientUpload, RectifierMode, ServerState};
use crate::wire::{Endpoint, Loopback, Message, SyncMessage, Transport};

/// SplitMix64 finalizer, used to derive independent seeds from one master.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One domain's training material.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub domain: String,
    pub item_count: usize,
    /// Code of every domain item, indexed by item.
    pub codes: Vec<ItemCode>,
    pub split: SplitBundle,
}

impl ClientData {
    pub fn new(dataset: &DomainDataset, codes: Vec<ItemCode>) -> Result<Self> {
        if codes.len() != dataset.item_count {
            return Err(Error::shape(format!(
                "{}: {} codes for {} items",
                dataset.domain,
                codes.len(),
                dataset.item_count
            )));
        }
        Ok(ClientData {
            domain: dataset.domain.as_str().to_string(),
            item_count: dataset.item_count,
            codes,
            split: leave_one_out_split(dataset)?,
        })
    }

    /// Total interactions in the training sequences.
    pub fn train_interactions(&self) -> usize {
        self.split.users.iter().map(|u| u.train_sequence().len()).sum()
    }
}

/// Shapes of the shared table and the per-client encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub codebooks: usize,
    pub centroids: usize,
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    pub fn init_table(&self, seed: u64) -> Result<CodeEmbeddingTable> {
        CodeEmbeddingTable::init(self.codebooks, self.centroids, self.encoder.d_model, seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr_local: f64,
    pub batch_size: usize,
    pub encryption: EncryptionConfig,
    pub alpha: f64,
    pub rectifier: RectifierMode,
    pub seed: u64,
    pub patience: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            rounds: 10,
            local_epochs: 1,
            lr_local: 0.001,
            batch_size: 1024,
            encryption: EncryptionConfig::default(),
            alpha: 1.0,
            rectifier: RectifierMode::Literal,
            seed: 0,
            patience: 10,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("federation needs at least one round"));
        }
        if self.patience == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::config(
                "patience, local epochs and batch size must be positive",
            ));
        }
        if !(self.lr_local >= 0.0 && self.lr_local.is_finite()) {
            return Err(Error::config(format!("bad local learning rate {}", self.lr_local)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::config("server learning rate must be finite"));
        }
        self.encryption.validate()
    }
}

/// One row of a training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss per client over the epoch (or round).
    pub losses: Vec<f64>,
    pub valid_recall10: Vec<f64>,
    pub upload_bytes: Vec<usize>,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub stage: String,
    pub clients: Vec<String>,
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainingLog {
    fn new(stage: &str, clients: Vec<String>) -> Self {
        TrainingLog {
            stage: stage.into(),
            clients,
            ..Default::default()
        }
    }

    /// Log as JSON; wall-clock times are included only on request so that
    /// repeated runs can be compared byte for byte.
    pub fn to_json(&self, with_timing: bool) -> serde_json::Value {
        let records: Vec<serde_json::Value> = self
            .records
            .iter()
            .map(|r| {
                let mut v = serde_json::json!({
                    "epoch": r.epoch,
                    "loss": r.losses,
                    "valid_recall@10": r.valid_recall10,
                    "upload_bytes": r.upload_bytes,
                });
                if with_timing {
                    v["elapsed_ms"] = r.elapsed_ms.into();
                }
                v
            })
            .collect();
        serde_json::json!({
            "stage": self.stage,
            "clients": self.clients,
            "records": records,
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
        })
    }

    /// Per-client loss trajectory.
    pub fn losses(&self, client: usize) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.losses.get(client).copied()).collect()
    }
}

/// Scores every example against the whole catalog and returns target ranks.
pub fn rank_examples(
    examples: &[(Vec<usize>, usize)],
    encoder: &EncoderParams,
    table: &CodeEmbeddingTable,
    codes: &[ItemCode],
    prompts: Option<&PromptSet>,
) -> Result<Vec<usize>> {
    const CHUNK: usize = 256;
    let item_matrix = batch_item_matrix(codes, table)?;
    let mut ranks = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(CHUNK) {
        let batch = SequenceBatch::from_examples(chunk, encoder.cfg.max_len);
        let scores = match prompts {
            Some(p) => prompt_scores(&batch, encoder, table, codes, p)?,
            None => encode_items(&batch, encoder, &item_matrix)?.h.dot(&item_matrix.t()),
        };
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("non-finite ranking scores".into()));
        }
        for (row, &t) in scores.rows().into_iter().zip(&batch.targets) {
            ranks.push(rank_target(row.as_slice().expect("row-major scores"), t));
        }
    }
    Ok(ranks)
}

pub fn evaluate(
    examples: &[(Vec<usize>, usize)],
    encoder: &EncoderParams,
    table: &CodeEmbeddingTable,
    codes: &[ItemCode],
    prompts: Option<&PromptSet>,
) -> Result<MetricSet> {
    MetricSet::from_ranks(&rank_examples(examples, encoder, table, codes, prompts)?)
}

/// A client's trainable state during pre-training.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: String,
    pub encoder: EncoderParams,
    pub table: CodeEmbeddingTable,
    adam_encoder: Adam,
    adam_table: Adam,
    rng: ChaCha8Rng,
}

/// What one client produced in one round of local training.
#[derive(Debug, Clone)]
pub struct LocalRound {
    pub mean_loss: f64,
    /// Plain sum of the raw batch gradients of the table.
    pub table_grad: CodeEmbeddingTable,
    pub samples: u64,
}

impl ClientState {
    /// Encoder initialized from `seed`-derived randomness for client
    /// `index`; `table` is the shared round-0 table.
    pub fn new(
        id: &str,
        index: usize,
        model: &ModelConfig,
        table: CodeEmbeddingTable,
        lr: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2 * index as u64 + 1));
        Ok(ClientState {
            id: id.to_string(),
            encoder: EncoderParams::init(model.encoder, &mut init_rng)?,
            table,
            adam_encoder: Adam::new(lr),
            adam_table: Adam::new(lr),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 2 * index as u64 + 2)),
        })
    }

    /// Runs `epochs` shuffled passes over the training examples, applying
    /// Adam to the encoder and the local table copy after every batch.
    pub fn train_local(
        &mut self,
        data: &ClientData,
        epochs: usize,
        batch_size: usize,
    ) -> Result<LocalRound> {
        let mut examples = data.split.train_examples();
        if examples.is_empty() {
            return Err(Error::config(format!("{}: no training examples", data.domain)));
        }
        let mut table_grad = self.table.zeros_like();
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut samples = 0u64;
        for _ in 0..epochs {
            examples.shuffle(&mut self.rng);
            for chunk in examples.chunks(batch_size) {
                let batch = SequenceBatch::from_examples(chunk, self.encoder.cfg.max_len);
                let (loss, g) = backward(&batch, &self.encoder, &self.table, &data.codes)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("{}: training loss", self.id)));
                }
                table_grad.e += &g.table.e;
                self.adam_encoder.step(&mut self.encoder, &g.encoder)?;
                self.adam_table.step(&mut self.table, &g.table)?;
                loss_sum += loss;
                batches += 1;
                samples += chunk.len() as u64;
            }
        }
        Ok(LocalRound {
            mean_loss: loss_sum / batches as f64,
            table_grad,
            samples,
        })
    }
}

/// Result of federated pre-training: the selected model.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub table: CodeEmbeddingTable,
    pub encoders: Vec<(String, EncoderParams)>,
    pub log: TrainingLog,
    pub best_valid_recall10: f64,
}

/// Clients, server and transport of one federated run.
pub struct Federation<'a> {
    pub data: &'a [ClientData],
    pub clients: Vec<ClientState>,
    pub server: ServerState,
    pub cfg: FederationConfig,
    transport: Box<dyn Transport + 'a>,
}

impl<'a> Federation<'a> {
    pub fn new(data: &'a [ClientData], model: &ModelConfig, cfg: FederationConfig) -> Result<Self> {
        Self::with_transport(data, model, cfg, Box::new(Loopback::new()))
    }

    pub fn with_transport(
        data: &'a [ClientData],
        model: &ModelConfig,
        cfg: FederationConfig,
        transport: Box<dyn Transport + 'a>,
    ) -> Result<Self> {
        cfg.validate()?;
        model.encoder.validate()?;
        if data.is_empty() {
            return Err(Error::config("federation needs at least one client"));
        }
        let mut ids: Vec<&str> = data.iter().map(|d| d.domain.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("client domains must be unique"));
        }
        for d in data {
            if let Some(bad) = d
                .codes
                .iter()
                .find(|c| c.0.len() != model.codebooks || c.0.iter().any(|&i| i >= model.centroids))
            {
                return Err(Error::shape(format!(
                    "{}: code {:?} does not fit a {}x{} table",
                    d.domain, bad.0, model.codebooks, model.centroids
                )));
            }
        }
        let table = model.init_table(cfg.seed)?;
        let clients = data
            .iter()
            .enumerate()
            .map(|(i, d)| ClientState::new(&d.domain, i, model, table.clone(), cfg.lr_local, cfg.seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(Federation {
            data,
            clients,
            server: ServerState::new(table, cfg.alpha, cfg.rectifier),
            cfg,
            transport,
        })
    }

    /// One synchronous round: concurrent local training, encrypted uploads,
    /// server update, and synchronization of every client table. Returns
    /// per-client mean losses and upload sizes.
    pub fn run_round(&mut self) -> Result<(Vec<f64>, Vec<usize>)> {
        let round = self.server.round;
        let cfg = self.cfg;
        let results: Vec<Result<LocalRound>> = std::thread::scope(|s| {
            let handles: Vec<_> = self
                .clients
                .iter_mut()
                .zip(self.data)
                .map(|(c, d)| s.spawn(move || c.train_local(d, cfg.local_epochs, cfg.batch_size)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("client thread panicked"))
                .collect()
        });
        let locals = results.into_iter().collect::<Result<Vec<_>>>()?;

        let mut upload_bytes = Vec::with_capacity(self.clients.len());
        for (i, (client, local)) in self.clients.iter().zip(&locals).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.encryption.seed,
                (round << 16) ^ i as u64,
            ));
            let (d, m, v) = local.table_grad.shape();
            let encrypted = encrypt(
                local.table_grad.as_slice(),
                &[d, m, v],
                local.samples,
                &cfg.encryption,
                &mut rng,
            )?;
            let msg = Message::Upload(ClientUpload {
                client_id: client.id.clone(),
                round,
                encrypted,
            });
            upload_bytes.push(self.transport.send(&Endpoint::Server, &msg)?);
        }

        let mut uploads = Vec::with_capacity(self.clients.len());
        let mut inbox = self.transport.recv_all(&Endpoint::Server)?;
        for client in &self.clients {
            let pos = inbox
                .iter()
                .position(|m| matches!(m, Message::Upload(u) if u.client_id == client.id))
                .ok_or_else(|| Error::Protocol(format!("no upload from {} in round {round}", client.id)))?;
            match inbox.remove(pos) {
                Message::Upload(u) => uploads.push(u),
                _ => unreachable!(),
            }
        }
        if !inbox.is_empty() {
            return Err(Error::Protocol(format!(
                "{} unexpected messages at the server in round {round}",
                inbox.len()
            )));
        }
        self.server.process_round(&uploads)?;
        self.synchronize()?;
        Ok((locals.iter().map(|l| l.mean_loss).collect(), upload_bytes))
    }

    /// Sends the server table to every client, installs it after checksum
    /// verification, and collects the acknowledgements.
    pub fn synchronize(&mut self) -> Result<()> {
        let round = self.server.round;
        let sync = Message::Sync(SyncMessage::from_table(round, &self.server.table));
        for client in &mut self.clients {
            let at = Endpoint::Client(client.id.clone());
            self.transport.send(&at, &sync)?;
            let mut got = None;
            for msg in self.transport.recv_all(&at)? {
                match msg {
                    Message::Sync(s) if s.round == round => got = Some(s.to_table()?),
                    other => {
                        return Err(Error::Protocol(format!(
                            "{} received unexpected {:?}",
                            client.id,
                            std::mem::discriminant(&other)
                        )))
                    }
                }
            }
            client.table = got.ok_or_else(|| {
                Error::Protocol(format!("{} missed the round {round} sync", client.id))
            })?;
            self.transport.send(
                &Endpoint::Server,
                &Message::Ack {
                    client_id: client.id.clone(),
                    round,
                },
            )?;
        }
        let acks = self.transport.recv_all(&Endpoint::Server)?;
        for client in &self.clients {
            let ok = acks.iter().any(
                |m| matches!(m, Message::Ack { client_id, round: r } if *client_id == client.id && *r == round),
            );
            if !ok {
                return Err(Error::Protocol(format!("no ack from {} for round {round}", client.id)));
            }
        }
        Ok(())
    }

    /// Validation Recall@10 of every client under the current server table.
    pub fn validate_clients(&self) -> Result<Vec<f64>> {
        self.clients
            .iter()
            .zip(self.data)
            .map(|(c, d)| {
                evaluate(&d.split.valid_examples(), &c.encoder, &self.server.table, &d.codes, None)
                    .map(|m| m.recall10)
            })
            .collect()
    }

    /// Runs up to `rounds` rounds with early stopping on the client-average
    /// validation Recall@10 and returns the best model seen.
    pub fn pretrain(mut self) -> Result<PretrainOutcome> {
        let mut log = TrainingLog::new(
            "pretrain",
            self.clients.iter().map(|c| c.id.clone()).collect(),
        );
        let mut best: Option<(f64, CodeEmbeddingTable, Vec<EncoderParams>)> = None;
        let mut best_round = 0;
        for round in 1..=self.cfg.rounds {
            let start = Instant::now();
            let (losses, upload_bytes) = self.run_round()?;
            let valid = self.validate_clients()?;
            let score = valid.iter().sum::<f64>() / valid.len() as f64;
            info!("pretrain round {round}: loss {losses:?} valid recall@10 {valid:?}");
            log.records.push(EpochRecord {
                epoch: round,
                losses,
                valid_recall10: valid,
                upload_bytes,
                elapsed_ms: start.elapsed().as_millis() as u64,
            });
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best = Some((
                    score,
                    self.server.table.clone(),
                    self.clients.iter().map(|c| c.encoder.clone()).collect(),
                ));
                best_round = round;
            } else if round - best_round >= self.cfg.patience {
                debug!("early stop after round {round}, best was {best_round}");
                log.stopped_early = round < self.cfg.rounds;
                break;
            }
        }
        let (score, table, encoders) = best.expect("at least one round ran");
        log.best_epoch = Some(best_round);
        Ok(PretrainOutcome {
            table,
            encoders: self
                .clients
                .iter()
                .map(|c| c.id.clone())
                .zip(encoders)
                .collect(),
            log,
            best_valid_recall10: score,
        })
    }

    pub fn transport(&self) -> &dyn Transport {
        self.transport.as_ref()
    }
}

/// No-federation baseline: one client trains encoder and table alone for
/// `rounds * local_epochs` epochs with the same selection rule.
pub fn train_local(
    data: &ClientData,
    model: &ModelConfig,
    cfg: &FederationConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let table = model.init_table(cfg.seed)?;
    let mut client = ClientState::new(&data.domain, 0, model, table, cfg.lr_local, cfg.seed)?;
    let mut log = TrainingLog::new("local", vec![data.domain.clone()]);
    let valid = data.split.valid_examples();
    let mut best: Option<(f64, ClientState)> = None;
    let mut best_epoch = 0;
    for epoch in 1..=cfg.rounds {
        let start = Instant::now();
        let local = client.train_local(data, cfg.local_epochs, cfg.batch_size)?;
        let score = evaluate(&valid, &client.encoder, &client.table, &data.codes, None)?.recall10;
        log.records.push(EpochRecord {
            epoch,
            losses: vec![local.mean_loss],
            valid_recall10: vec![score],
            upload_bytes: vec![0],
            elapsed_ms: start.elapsed().as_millis() as u64,
        });
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, client.clone()));
            best_epoch = epoch;
        } else if epoch - best_epoch >= cfg.patience {
            log.stopped_early = epoch < cfg.rounds;
            break;
        }
    }
    let (score, c) = best.expect("at least one epoch ran");
    log.best_epoch = Some(best_epoch);
    Ok(PretrainOutcome {
        table: c.table,
        encoders: vec![(c.id, c.encoder)],
        log,
        best_valid_recall10: score,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 10,
            lr: 0.001,
            batch_size: 1024,
            patience: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub prompts: PromptSet,
    pub table: CodeEmbeddingTable,
    pub log: TrainingLog,
    /// Validation metrics before any tuning.
    pub zero_shot: MetricSet,
    /// Validation metrics of the selected state.
    pub best: MetricSet,
}

/// Prompt tuning for one domain. The encoder stays fixed; the table and
/// all prompt parameters are trained with Adam. The untuned state counts
/// as epoch 0 for model selection.
pub fn finetune(
    data: &ClientData,
    encoder: &EncoderParams,
    table: CodeEmbeddingTable,
    prompt_cfg: &PromptConfig,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if cfg.batch_size == 0 || cfg.patience == 0 {
        return Err(Error::config("finetune batch size and patience must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xF1_7E));
    let mut prompts = PromptSet::init(
        prompt_cfg,
        encoder.cfg.d_model,
        data.item_count,
        encoder.cfg.max_len,
        &mut rng,
    )?;
    let mut table = table;
    let valid = data.split.valid_examples();
    let zero_shot = evaluate(&valid, encoder, &table, &data.codes, None)?;
    let initial = evaluate(&valid, encoder, &table, &data.codes, Some(&prompts))?;

    let mut log = TrainingLog::new("finetune", vec![data.domain.clone()]);
    log.records.push(EpochRecord {
        epoch: 0,
        losses: vec![],
        valid_recall10: vec![initial.recall10],
        upload_bytes: vec![0],
        elapsed_ms: 0,
    });
    let mut best = (initial, prompts.clone(), table.clone());
    let mut best_epoch = 0;
    let mut adam_table = Adam::new(cfg.lr);
    let mut adam_prompts = Adam::new(cfg.lr);
    let mut examples = data.split.train_examples();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        examples.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in examples.chunks(cfg.batch_size) {
            let batch = SequenceBatch::from_examples(chunk, encoder.cfg.max_len);
            let (loss, g_table, g_prompts) =
                prompt_backward(&batch, encoder, &table, &data.codes, &prompts)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("{}: prompt loss", data.domain)));
            }
            adam_table.step(&mut table, &g_table)?;
            adam_prompts.step(&mut prompts, &g_prompts)?;
            loss_sum += loss;
            batches += 1;
        }
        let m = evaluate(&valid, encoder, &table, &data.codes, Some(&prompts))?;
        info!("finetune epoch {epoch}: loss {:.5} valid recall@10 {:.4}", loss_sum / batches as f64, m.recall10);
        log.records.push(EpochRecord {
            epoch,
            losses: vec![loss_sum / batches.max(1) as f64],
            valid_recall10: vec![m.recall10],
            upload_bytes: vec![0],
            elapsed_ms: start.elapsed().as_millis() as u64,
        });
        if m.recall10 > best.0.recall10 {
            best = (m, prompts.clone(), table.clone());
            best_epoch = epoch;
        } else if epoch - best_epoch >= cfg.patience {
            log.stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    log.best_epoch = Some(best_epoch);
    let (best_metrics, prompts, table) = best;
    Ok(FinetuneOutcome {
        prompts,
        table,
        log,
        zero_shot,
        best: best_metrics,
    })
}
