use std::fs;
use std::path::{Path, PathBuf};

use fedcode::checkpoint::{Checkpoint, NamedTensor};
use fedcode::code_model::CodeEmbeddingTable;
use fedcode::coder::{
    assign_codes_batch, codes_from_bytes, codes_to_bytes, load_codes, save_codes, train_pq,
    CentroidSet, ItemCode,
};
use fedcode::data::{
    filter_min_interactions, generate_synthetic, load_interactions, load_text_encodings,
    write_interactions, write_text_encodings, DomainDataset, DomainId, TextEncodingMatrix,
};
use fedcode::encoder::EncoderParams;
use fedcode::metrics::MetricSet;
use fedcode::orchestrator::{
    evaluate, finetune, ClientData, Federation, FinetuneOutcome, PretrainOutcome,
};
use fedcode::prompts::PromptSet;
use fedcode::wire::{FileTransport, Loopback, Transport};
use fedcode::{Error, Result};
use log::info;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

use crate::config::{DataSource, RunConfig, Split, TransportKind};

/// Prints to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    write(path, s.as_bytes())
}

/// One domain as read from disk (or generated): the filtered dataset and
/// the full encoding file it indexes into.
struct Domain {
    dataset: DomainDataset,
    encodings: TextEncodingMatrix,
}

fn synthetic_domains(cfg: &RunConfig) -> Result<Vec<(DomainDataset, TextEncodingMatrix)>> {
    let [a, b] = generate_synthetic(&cfg.synthetic, cfg.seed)?;
    // Pass encodings through their file format so in-memory runs see the
    // same f32 values as runs over generated files.
    [a, b]
        .into_iter()
        .map(|d| {
            let enc = TextEncodingMatrix::from_bytes(&d.encodings.to_bytes(), None)?;
            Ok((d.dataset, enc))
        })
        .collect()
}

fn load_domains(cfg: &RunConfig) -> Result<Vec<Domain>> {
    let raw = match cfg.source {
        DataSource::Synthetic => synthetic_domains(cfg)?,
        DataSource::Files => cfg
            .domains
            .iter()
            .map(|d| {
                let inter = cfg.data_dir.join(format!("{d}.inter"));
                let ds = load_interactions(&inter, DomainId::new(d.as_str())?)?;
                let enc = load_text_encodings(
                    &cfg.data_dir.join(format!("{d}.pfce")),
                    Some(cfg.pq.codebooks),
                )?;
                Ok((ds, enc))
            })
            .collect::<Result<_>>()?,
    };
    raw.into_iter()
        .map(|(ds, encodings)| {
            let dataset = filter_min_interactions(&ds, cfg.min_interactions)?;
            info!(
                "{}: {} users, {} items, {} interactions after filtering",
                dataset.domain,
                dataset.user_count(),
                dataset.item_count,
                dataset.interaction_count()
            );
            Ok(Domain { dataset, encodings })
        })
        .collect()
}

/// Trains the codebook on the pooled encodings of every domain, rounded
/// to its on-disk precision.
fn train_codebook(cfg: &RunConfig, domains: &[Domain]) -> Result<CentroidSet> {
    let parts: Vec<&TextEncodingMatrix> = domains.iter().map(|d| &d.encodings).collect();
    let pooled = TextEncodingMatrix::concat(&parts)?;
    let cs = train_pq(&pooled, &cfg.pq)?;
    CentroidSet::from_bytes(&cs.to_bytes())
}

/// Per-encoding-row codes of every domain, plus the codebook they came from.
fn row_codes(
    cfg: &RunConfig,
    domains: &[Domain],
    stored: Option<&CentroidSet>,
) -> Result<(CentroidSet, Vec<Vec<ItemCode>>)> {
    if let Some(dir) = &cfg.codes_dir {
        let cs = CentroidSet::load(&dir.join("codebook.pfcb"))?;
        let codes = domains
            .iter()
            .map(|d| load_codes(&dir.join(format!("{}.pfcc", d.dataset.domain))))
            .collect::<Result<_>>()?;
        return Ok((cs, codes));
    }
    let cs = match stored {
        Some(cs) => cs.clone(),
        None => train_codebook(cfg, domains)?,
    };
    let codes = domains
        .iter()
        .map(|d| assign_codes_batch(&d.encodings, &cs))
        .collect::<Result<_>>()?;
    Ok((cs, codes))
}

fn client_data(domains: &[Domain], row_codes: &[Vec<ItemCode>]) -> Result<Vec<ClientData>> {
    domains
        .iter()
        .zip(row_codes)
        .map(|(d, codes)| {
            let per_item = d
                .dataset
                .item_rows
                .iter()
                .map(|&r| {
                    codes.get(r).cloned().ok_or_else(|| Error::ItemOutOfRange {
                        item: format!("{}: encoding row {r}", d.dataset.domain),
                        count: codes.len(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            ClientData::new(&d.dataset, per_item)
        })
        .collect()
}

fn split_examples(data: &ClientData, split: Split) -> Vec<(Vec<usize>, usize)> {
    match split {
        Split::Valid => data.split.valid_examples(),
        Split::Test => data.split.test_examples(),
    }
}

fn metrics_json(rows: &[(String, MetricSet)]) -> Value {
    let mut m = Map::new();
    for (domain, metrics) in rows {
        m.insert(domain.clone(), metrics.to_json());
    }
    Value::Object(m)
}

fn check_finite(rows: &[(String, MetricSet)]) -> Result<()> {
    match rows.iter().find(|(_, m)| !m.is_finite()) {
        Some((d, _)) => Err(Error::NonFinite(format!("{d}: metrics"))),
        None => Ok(()),
    }
}

const CODEBOOK: &str = "codebook";
const TABLE: &str = "table";

fn put_codebook(ckpt: &mut Checkpoint, cs: &CentroidSet) {
    for (k, c) in cs.centroids.iter().enumerate() {
        ckpt.tensors.push(NamedTensor {
            name: format!("{CODEBOOK}.{k}"),
            shape: vec![c.nrows(), c.ncols()],
            data: c.iter().copied().collect(),
        });
    }
}

fn get_codebook(ckpt: &Checkpoint) -> Result<CentroidSet> {
    let mut centroids = Vec::new();
    while let Some(t) = ckpt.get(&format!("{CODEBOOK}.{}", centroids.len())) {
        let (m, sub) = match t.shape.as_slice() {
            [m, sub] => (*m, *sub),
            _ => return Err(Error::Shape(format!("{}: expected a matrix", t.name))),
        };
        centroids.push(
            Array2::from_shape_vec((m, sub), t.data.clone())
                .map_err(|e| Error::Shape(format!("{}: {e}", t.name)))?,
        );
    }
    if centroids.is_empty() {
        return Err(Error::MissingTensor(format!("{CODEBOOK}.0")));
    }
    Ok(CentroidSet { centroids })
}

fn new_checkpoint(cfg: &RunConfig, stage: &str) -> Checkpoint {
    let mut ckpt = Checkpoint::new();
    ckpt.set_meta("stage", stage);
    for (k, v) in cfg.to_pairs() {
        ckpt.set_meta(&format!("config.{k}"), v);
    }
    ckpt
}

/// Shape settings are taken from the checkpoint so a model can be loaded
/// under a config that only describes the data.
fn adopt_shapes(cfg: &mut RunConfig, ckpt: &Checkpoint) -> Result<()> {
    for (key, _) in cfg.to_pairs() {
        let shape_key = key.starts_with("model.")
            || key.starts_with("prompt.")
            || key == "pq.codebooks"
            || key == "pq.centroids";
        if shape_key {
            if let Ok(v) = ckpt.meta(&format!("config.{key}")) {
                cfg.set(key, v)?;
            }
        }
    }
    cfg.validate()
}

fn round_trip(ckpt: &Checkpoint) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&ckpt.to_bytes())
}

fn transport(cfg: &RunConfig, dir: &Path) -> Result<Box<dyn Transport>> {
    Ok(match cfg.transport {
        TransportKind::Loopback => Box::new(Loopback::new()),
        TransportKind::Files => {
            if dir.exists() {
                fs::remove_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
            Box::new(FileTransport::new(dir)?)
        }
    })
}

fn load_encoder(ckpt: &Checkpoint, cfg: &RunConfig, domain: &str) -> Result<EncoderParams> {
    let mut enc = EncoderParams::init(cfg.encoder, &mut ChaCha8Rng::seed_from_u64(0))?;
    ckpt.get_params(&format!("client.{domain}.encoder"), &mut enc)?;
    Ok(enc)
}

fn load_table(ckpt: &Checkpoint, cfg: &RunConfig, prefix: &str) -> Result<CodeEmbeddingTable> {
    let mut table = CodeEmbeddingTable::zeros(cfg.pq.codebooks, cfg.pq.centroids, cfg.encoder.d_model);
    ckpt.get_params(prefix, &mut table)?;
    Ok(table)
}

fn load_prompts(
    ckpt: &Checkpoint,
    cfg: &RunConfig,
    domain: &str,
    item_count: usize,
) -> Result<PromptSet> {
    let mut p = PromptSet::init(
        &cfg.prompt,
        cfg.encoder.d_model,
        item_count,
        cfg.encoder.max_len,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    ckpt.get_params(&format!("prompts.{domain}"), &mut p)?;
    Ok(p)
}

/// Evaluates every domain under a checkpoint: prompts and the tuned table
/// where the domain has them, otherwise the shared table.
fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    cfg: &RunConfig,
    clients: &[ClientData],
    split: Split,
) -> Result<Vec<(String, MetricSet)>> {
    let shared = load_table(ckpt, cfg, TABLE)?;
    clients
        .iter()
        .map(|c| {
            let encoder = load_encoder(ckpt, cfg, &c.domain)?;
            let examples = split_examples(c, split);
            let m = if ckpt.has_prefix(&format!("prompts.{}.", c.domain)) {
                let prompts = load_prompts(ckpt, cfg, &c.domain, c.item_count)?;
                let table = load_table(ckpt, cfg, &format!("client.{}.table", c.domain))?;
                evaluate(&examples, &encoder, &table, &c.codes, Some(&prompts))?
            } else {
                evaluate(&examples, &encoder, &shared, &c.codes, None)?
            };
            Ok((c.domain.clone(), m))
        })
        .collect()
}

pub fn gen_synthetic(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    for (ds, enc) in synthetic_domains(cfg)? {
        let d = ds.domain.as_str();
        write_interactions(&out.join(format!("{d}.inter")), &ds)?;
        write_text_encodings(&out.join(format!("{d}.pfce")), &enc)?;
        emit(&format!(
            "{d}: {} users, {} items, {} interactions, dim {}\n",
            ds.user_count(),
            ds.item_count,
            ds.interaction_count(),
            enc.dim()
        ));
    }
    Ok(())
}

pub fn code_items(cfg: &RunConfig, out: &Path) -> Result<()> {
    let domains = load_domains(cfg)?;
    let cs = train_codebook(cfg, &domains)?;
    cs.save(&out.join("codebook.pfcb"))?;
    for d in &domains {
        let codes = assign_codes_batch(&d.encodings, &cs)?;
        let distinct: std::collections::HashSet<_> = codes.iter().collect();
        // Codes are rounded through the file format on the way out.
        let codes = codes_from_bytes(&codes_to_bytes(&codes))?;
        save_codes(&out.join(format!("{}.pfcc", d.dataset.domain)), &codes)?;
        emit(&format!(
            "{}: {} rows, {} distinct codes\n",
            d.dataset.domain,
            codes.len(),
            distinct.len()
        ));
    }
    Ok(())
}

/// Everything a pre-training run produces, before anything is written.
pub struct PretrainRun {
    pub checkpoint: Checkpoint,
    pub log: Value,
    pub metrics: Vec<(String, MetricSet)>,
}

pub fn run_pretrain(cfg: &RunConfig, wire_dir: &Path) -> Result<PretrainRun> {
    let domains = load_domains(cfg)?;
    let (cs, codes) = row_codes(cfg, &domains, None)?;
    let clients = client_data(&domains, &codes)?;
    let fed = Federation::with_transport(&clients, &cfg.model(), cfg.fed, transport(cfg, wire_dir)?)?;
    let PretrainOutcome {
        table,
        encoders,
        log,
        best_valid_recall10,
    } = fed.pretrain()?;
    info!("pretrain selected round {:?}, valid recall@10 {best_valid_recall10:.4}", log.best_epoch);

    let mut ckpt = new_checkpoint(cfg, "pretrain");
    put_codebook(&mut ckpt, &cs);
    ckpt.put_params(TABLE, &table);
    for (domain, enc) in &encoders {
        ckpt.put_params(&format!("client.{domain}.encoder"), enc);
    }
    let checkpoint = round_trip(&ckpt)?;
    let metrics = evaluate_checkpoint(&checkpoint, cfg, &clients, cfg.split)?;
    check_finite(&metrics)?;
    Ok(PretrainRun {
        checkpoint,
        log: log.to_json(false),
        metrics,
    })
}

pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<()> {
    let run = run_pretrain(cfg, &out.join("wire"))?;
    run.checkpoint.save(&out.join("pretrain.pfct"))?;
    write_json(&out.join("pretrain.log.json"), &run.log)?;
    let m = metrics_json(&run.metrics);
    write_json(&out.join("pretrain.metrics.json"), &m)?;
    emit(&format!("{}\n", serde_json::to_string_pretty(&m).unwrap()));
    Ok(())
}

pub fn finetune_cmd(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let pre = Checkpoint::load(checkpoint)?;
    let mut cfg = cfg.clone();
    let prompt = cfg.prompt;
    adopt_shapes(&mut cfg, &pre)?;
    // The prompt shape is chosen now, not inherited from pre-training.
    cfg.prompt = prompt;
    cfg.validate()?;

    let domains = load_domains(&cfg)?;
    let (_, codes) = row_codes(&cfg, &domains, Some(&get_codebook(&pre)?))?;
    let clients = client_data(&domains, &codes)?;
    let table = load_table(&pre, &cfg, TABLE)?;
    let encoders = clients
        .iter()
        .map(|c| load_encoder(&pre, &cfg, &c.domain))
        .collect::<Result<Vec<_>>>()?;

    // Domains tune independently, each on its own thread.
    let outcomes: Vec<Result<FinetuneOutcome>> = std::thread::scope(|s| {
        let handles: Vec<_> = clients
            .iter()
            .zip(&encoders)
            .map(|(c, enc)| {
                let table = table.clone();
                let cfg = &cfg;
                s.spawn(move || finetune(c, enc, table, &cfg.prompt, &cfg.finetune))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("finetune thread panicked"))
            .collect()
    });

    let mut ckpt = pre.clone();
    ckpt.meta = new_checkpoint(&cfg, "finetune").meta;
    let mut log = Map::new();
    for (c, outcome) in clients.iter().zip(outcomes) {
        let f = outcome?;
        info!(
            "{}: zero-shot valid recall@10 {:.4}, tuned {:.4}",
            c.domain, f.zero_shot.recall10, f.best.recall10
        );
        ckpt.put_params(&format!("prompts.{}", c.domain), &f.prompts);
        ckpt.put_params(&format!("client.{}.table", c.domain), &f.table);
        let mut entry = f.log.to_json(false);
        entry["zero_shot_valid"] = f.zero_shot.to_json();
        entry["best_valid"] = f.best.to_json();
        log.insert(c.domain.clone(), entry);
    }
    let ckpt = round_trip(&ckpt)?;
    let metrics = evaluate_checkpoint(&ckpt, &cfg, &clients, cfg.split)?;
    check_finite(&metrics)?;

    ckpt.save(&out.join("finetune.pfct"))?;
    write_json(&out.join("finetune.log.json"), &Value::Object(log))?;
    let m = metrics_json(&metrics);
    write_json(&out.join("finetune.metrics.json"), &m)?;
    emit(&format!("{}\n", serde_json::to_string_pretty(&m).unwrap()));
    Ok(())
}

/// Metrics of a checkpoint, or of the freshly initialized model when no
/// checkpoint is given.
pub fn evaluate_cmd(cfg: &RunConfig, checkpoint: Option<&Path>, split: Split, out: &Path) -> Result<()> {
    let mut cfg = cfg.clone();
    let metrics = match checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            adopt_shapes(&mut cfg, &ckpt)?;
            let domains = load_domains(&cfg)?;
            let (_, codes) = row_codes(&cfg, &domains, Some(&get_codebook(&ckpt)?))?;
            let clients = client_data(&domains, &codes)?;
            evaluate_checkpoint(&ckpt, &cfg, &clients, split)?
        }
        None => {
            let domains = load_domains(&cfg)?;
            let (_, codes) = row_codes(&cfg, &domains, None)?;
            let clients = client_data(&domains, &codes)?;
            let fed = Federation::new(&clients, &cfg.model(), cfg.fed)?;
            fed.clients
                .iter()
                .zip(&clients)
                .map(|(c, d)| {
                    let m = evaluate(&split_examples(d, split), &c.encoder, &fed.server.table, &d.codes, None)?;
                    Ok((d.domain.clone(), m))
                })
                .collect::<Result<_>>()?
        }
    };
    check_finite(&metrics)?;
    let m = metrics_json(&metrics);
    write_json(&out.join(format!("evaluate.{}.json", split.as_str())), &m)?;
    emit(&format!("{}\n", serde_json::to_string_pretty(&m).unwrap()));
    Ok(())
}

pub const SWEEP_PARAMS: &[&str] = &["t", "epsilon", "b"];

/// Applies one sweep value to a copy of the config.
pub fn sweep_config(cfg: &RunConfig, param: &str, value: &str) -> Result<RunConfig> {
    let mut c = cfg.clone();
    match param {
        "t" => c.set("fed.rounds", value)?,
        "epsilon" => c.set("enc.epsilon", value)?,
        "b" => {
            let b: u32 = value
                .parse()
                .map_err(|_| Error::Config(format!("b: cannot parse `{value}`")))?;
            if !b.is_power_of_two() || b < 2 {
                return Err(Error::Config(format!("b must be a power of two >= 2, got {b}")));
            }
            c.set("enc.bits", &b.trailing_zeros().to_string())?;
        }
        other => {
            return Err(Error::Config(format!(
                "unknown sweep parameter `{other}`; valid: {}",
                SWEEP_PARAMS.join(", ")
            )))
        }
    }
    c.validate()?;
    Ok(c)
}

pub fn sweep(cfg: &RunConfig, param: &str, values: &[String], out: &Path) -> Result<()> {
    let configs = values
        .iter()
        .map(|v| sweep_config(cfg, param, v))
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::from("param,value,domain,recall@10,ndcg@10,recall@50,ndcg@50\n");
    for (value, c) in values.iter().zip(&configs) {
        let wire = out.join(format!("wire-{param}-{value}"));
        let run = run_pretrain(c, &wire)?;
        for (domain, m) in &run.metrics {
            csv.push_str(&format!(
                "{param},{value},{domain},{},{},{},{}\n",
                m.recall10, m.ndcg10, m.recall50, m.ndcg50
            ));
        }
    }
    write(&out.join(format!("sweep_{param}.csv")), csv.as_bytes())?;
    emit(&csv);
    Ok(())
}

pub fn out_dir(out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from("out"))
}
