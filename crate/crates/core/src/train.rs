//! Optimization loop: Adam with staircase inverse-time learning-rate decay,
//! periodic dev evaluation, best-checkpoint selection, and checkpoint
//! serialization.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use thiserror::Error;

use crate::corpus::{self, Embeddings, Sentence, Triplet};
use crate::decode;
use crate::evaluate::{self, EvalError};
use crate::model::{Model, ModelConfig, ModelError, ModelParameters};
use crate::numerics::{Graph, Parameter, RunRng, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training aborted at step {step}: {source}")]
    Step { step: usize, source: ModelError },
    #[error("missing gradient for trainable parameter {name}")]
    MissingGradient { name: String },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error("checkpoint/config mismatch: {0}")]
    Version(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Optimizer settings; defaults follow the published setup.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub decay_rate: f64,
    pub decay_step: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_interval: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Stop once dev F1 reaches this value; best-checkpoint selection is
    /// unaffected. `None` runs all steps.
    pub early_stop_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            decay_rate: 0.05,
            decay_step: 1000,
            batch_size: 6,
            max_steps: 5000,
            eval_interval: 100,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            early_stop_f1: None,
        }
    }
}

/// Staircase inverse-time decay:
/// `lr0 / (1 + decay_rate * floor(step / decay_step))`.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    cfg.lr / (1.0 + cfg.decay_rate * (step / cfg.decay_step) as f64)
}

/// First and second moment slots, aligned with the canonical parameter order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: usize,
    pub moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(params: &[Rc<Parameter>]) -> AdamState {
        AdamState {
            step: 0,
            moments: params
                .iter()
                .map(|p| {
                    let n = p.value().len();
                    (vec![0.0; n], vec![0.0; n])
                })
                .collect(),
        }
    }
}

/// One Adam update with bias correction over every parameter; gradients are
/// zeroed afterwards. A parameter the backward pass never touched means the
/// model wiring lost it, which is an internal error.
pub fn adam_step(
    params: &[Rc<Parameter>],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    for (p, (m, v)) in params.iter().zip(state.moments.iter_mut()) {
        if !p.grad_touched() {
            return Err(TrainError::MissingGradient {
                name: p.name().to_string(),
            });
        }
        let grad = p.grad();
        let old = p.value();
        let mut data = old.data().to_vec();
        for i in 0..data.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        }
        // moments live at storage precision: the checkpoint's 32-bit payload
        // then restores them exactly in 32-bit mode
        crate::numerics::quantize_all(m);
        crate::numerics::quantize_all(v);
        for i in 0..data.len() {
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        let updated = Tensor::new(old.shape().to_vec(), data)
            .map_err(|e| TrainError::Model(ModelError::Numerics(e)))?;
        p.set_value(updated);
        p.zero_grad();
    }
    Ok(())
}

/// Serializable training state: weights, optimizer moments, step counter,
/// generator states, and the best dev F1 seen so far.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelConfig,
    pub step: usize,
    pub best_dev_f1: f64,
    /// `(name, value)` in canonical order.
    pub params: Vec<(String, Tensor)>,
    pub adam: AdamState,
    pub rng_dropout: ([u8; 32], u128),
    pub rng_shuffle: ([u8; 32], u128),
}

pub const CHECKPOINT_MAGIC: &str = "aste-checkpoint v1";

impl Checkpoint {
    fn snapshot(
        model: &Model,
        adam: &AdamState,
        step: usize,
        best_dev_f1: f64,
        rng_dropout: ([u8; 32], u128),
        rng_shuffle: ([u8; 32], u128),
    ) -> Checkpoint {
        Checkpoint {
            version: 1,
            model: model.config.clone(),
            step,
            best_dev_f1,
            params: model
                .params
                .all()
                .iter()
                .map(|p| (p.name().to_string(), p.value()))
                .collect(),
            adam: adam.clone(),
            rng_dropout,
            rng_shuffle,
        }
    }

    /// Rebuilds the model and optimizer state, validating names and shapes
    /// against the stored config.
    pub fn restore(&self) -> Result<(Model, AdamState), TrainError> {
        let mut scratch = RunRng::named(0, "restore");
        let params = ModelParameters::init(&self.model, &mut scratch)?;
        let all = params.all();
        if all.len() != self.params.len() {
            return Err(TrainError::Version(format!(
                "config expects {} parameters, checkpoint holds {}",
                all.len(),
                self.params.len()
            )));
        }
        for (p, (name, value)) in all.iter().zip(&self.params) {
            if p.name() != name {
                return Err(TrainError::Version(format!(
                    "parameter order mismatch: expected {}, found {name}",
                    p.name()
                )));
            }
            if p.value().shape() != value.shape() {
                return Err(TrainError::Version(format!(
                    "parameter {name}: config shape {:?}, checkpoint shape {:?}",
                    p.value().shape(),
                    value.shape()
                )));
            }
            p.set_value(value.clone());
        }
        if self.adam.moments.len() != all.len() {
            return Err(TrainError::Version("moment count mismatch".into()));
        }
        let model = Model::from_parts(self.model.clone(), params)?;
        Ok((model, self.adam.clone()))
    }

    /// Plain-text header (config, counters, one line per tensor record)
    /// followed by a little-endian 32-bit binary payload in header order.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut header = String::new();
        header.push_str(CHECKPOINT_MAGIC);
        header.push('\n');
        let c = &self.model;
        header.push_str(&format!("d_w={}\n", c.d_w));
        header.push_str(&format!("d_h={}\n", c.d_h));
        header.push_str(&format!("layers={}\n", c.layers));
        header.push_str(&format!("heads={}\n", c.heads));
        header.push_str(&format!("dropout={}\n", c.dropout));
        header.push_str(&format!("max_len={}\n", c.max_len));
        header.push_str(&format!("step={}\n", self.step));
        header.push_str(&format!("best_dev_f1={}\n", self.best_dev_f1));
        header.push_str(&format!(
            "rng_dropout={} {}\n",
            hex(&self.rng_dropout.0),
            self.rng_dropout.1
        ));
        header.push_str(&format!(
            "rng_shuffle={} {}\n",
            hex(&self.rng_shuffle.0),
            self.rng_shuffle.1
        ));
        let mut payload: Vec<u8> = Vec::new();
        let record = |header: &mut String,
                      kind: &str,
                      name: &str,
                      shape: &[usize],
                      data: &[f64],
                      payload: &mut Vec<u8>| {
            header.push_str(&format!(
                "tensor {kind} {name} f32 {}\n",
                shape
                    .iter()
                    .map(|e| e.to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
            ));
            for v in data {
                payload.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        };
        for (name, value) in &self.params {
            record(
                &mut header,
                "param",
                name,
                value.shape(),
                value.data(),
                &mut payload,
            );
        }
        for ((name, value), (m, _)) in self.params.iter().zip(&self.adam.moments) {
            record(&mut header, "adam_m", name, value.shape(), m, &mut payload);
        }
        for ((name, value), (_, v)) in self.params.iter().zip(&self.adam.moments) {
            record(&mut header, "adam_v", name, value.shape(), v, &mut payload);
        }
        header.push_str("data\n");

        let mut file = fs::File::create(path)?;
        file.write_all(header.as_bytes())?;
        file.write_all(&payload)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, TrainError> {
        let bytes = fs::read(path)?;
        let marker = b"\ndata\n";
        let split = find_subsequence(&bytes, marker)
            .ok_or_else(|| TrainError::Format("missing data marker".into()))?;
        let header = std::str::from_utf8(&bytes[..split])
            .map_err(|_| TrainError::Format("header is not utf-8".into()))?;
        let payload = &bytes[split + marker.len()..];

        let mut lines = header.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(TrainError::Format("unknown format version".into()));
        }
        let mut cfg = ModelConfig::default();
        let mut step = 0usize;
        let mut best = 0.0f64;
        let mut rng_dropout = None;
        let mut rng_shuffle = None;
        let mut records: Vec<(String, String, Vec<usize>)> = Vec::new();
        for line in lines {
            if let Some(rest) = line.strip_prefix("tensor ") {
                let fields: Vec<&str> = rest.split(' ').collect();
                if fields.len() < 4 || fields[2] != "f32" {
                    return Err(TrainError::Format(format!("bad tensor record: {line}")));
                }
                let shape: Vec<usize> = fields[3..]
                    .iter()
                    .map(|f| {
                        f.parse()
                            .map_err(|_| TrainError::Format(format!("bad extent in {line}")))
                    })
                    .collect::<Result<_, _>>()?;
                records.push((fields[0].to_string(), fields[1].to_string(), shape));
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Format(format!("bad header line: {line}")))?;
            match key {
                "d_w" => cfg.d_w = parse_num(key, value)?,
                "d_h" => cfg.d_h = parse_num(key, value)?,
                "layers" => cfg.layers = parse_num(key, value)?,
                "heads" => cfg.heads = parse_num(key, value)?,
                "dropout" => cfg.dropout = parse_num(key, value)?,
                "max_len" => cfg.max_len = parse_num(key, value)?,
                "step" => step = parse_num(key, value)?,
                "best_dev_f1" => best = parse_num(key, value)?,
                "rng_dropout" => rng_dropout = Some(parse_rng(value)?),
                "rng_shuffle" => rng_shuffle = Some(parse_rng(value)?),
                _ => return Err(TrainError::Format(format!("unknown header key {key}"))),
            }
        }
        let rng_dropout =
            rng_dropout.ok_or_else(|| TrainError::Format("missing rng_dropout".into()))?;
        let rng_shuffle =
            rng_shuffle.ok_or_else(|| TrainError::Format("missing rng_shuffle".into()))?;

        let total: usize = records
            .iter()
            .map(|(_, _, s)| s.iter().product::<usize>())
            .sum();
        if payload.len() != total * 4 {
            return Err(TrainError::Format(format!(
                "payload holds {} bytes, header describes {}",
                payload.len(),
                total * 4
            )));
        }
        let mut offset = 0usize;
        let mut take = |count: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                let raw: [u8; 4] = payload[offset..offset + 4]
                    .try_into()
                    .expect("bounds checked");
                out.push(f32::from_le_bytes(raw) as f64);
                offset += 4;
            }
            out
        };
        let mut params: Vec<(String, Tensor)> = Vec::new();
        let mut adam_m: Vec<Vec<f64>> = Vec::new();
        let mut adam_v: Vec<Vec<f64>> = Vec::new();
        for (kind, name, shape) in &records {
            let count = shape.iter().product();
            let data = take(count);
            match kind.as_str() {
                "param" => params.push((
                    name.clone(),
                    Tensor::new(shape.clone(), data)
                        .map_err(|e| TrainError::Format(format!("tensor {name}: {e}")))?,
                )),
                "adam_m" => adam_m.push(data),
                "adam_v" => adam_v.push(data),
                other => return Err(TrainError::Format(format!("unknown record kind {other}"))),
            }
        }
        if adam_m.len() != params.len() || adam_v.len() != params.len() {
            return Err(TrainError::Format(
                "moment records do not match parameters".into(),
            ));
        }
        Ok(Checkpoint {
            version: 1,
            model: cfg,
            step,
            best_dev_f1: best,
            params,
            adam: AdamState {
                step,
                moments: adam_m.into_iter().zip(adam_v).collect(),
            },
            rng_dropout,
            rng_shuffle,
        })
    }
}

fn hex(bytes: &[u8; 32]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32], TrainError> {
    if s.len() != 64 {
        return Err(TrainError::Format("bad rng seed".into()));
    }
    let mut out = [0u8; 32];
    for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
        let hi = (chunk[0] as char)
            .to_digit(16)
            .ok_or_else(|| TrainError::Format("bad hex".into()))?;
        let lo = (chunk[1] as char)
            .to_digit(16)
            .ok_or_else(|| TrainError::Format("bad hex".into()))?;
        out[i] = (hi * 16 + lo) as u8;
    }
    Ok(out)
}

fn parse_rng(value: &str) -> Result<([u8; 32], u128), TrainError> {
    let (seed, pos) = value
        .split_once(' ')
        .ok_or_else(|| TrainError::Format("bad rng record".into()))?;
    Ok((
        unhex(seed)?,
        pos.parse()
            .map_err(|_| TrainError::Format("bad rng position".into()))?,
    ))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
    value
        .parse()
        .map_err(|_| TrainError::Format(format!("bad value for {key}: {value}")))
}

fn find_subsequence(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// Best and final checkpoints plus the training log, one line per event.
#[derive(Debug)]
pub struct FitResult {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<String>,
}

/// Decode + score a dataset with the current weights.
pub fn dev_score(
    model: &Model,
    embeddings: &Embeddings,
    sentences: &[Sentence],
) -> Result<crate::evaluate::ScoreReport, TrainError> {
    let predictions = decode::predict_sentences(model, embeddings, sentences)?;
    let pred_triplets: Vec<Vec<Triplet>> = predictions.into_iter().map(|p| p.triplets).collect();
    let gold: Vec<Vec<Triplet>> = sentences.iter().map(|s| s.triplets.clone()).collect();
    Ok(evaluate::score(&pred_triplets, &gold)?)
}

/// Runs `max_steps` batches with periodic dev evaluation, keeping the
/// checkpoint with the best dev F1 (earlier step wins ties).
pub fn fit(
    train: &[Sentence],
    dev: &[Sentence],
    embeddings: &Embeddings,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
) -> Result<FitResult, TrainError> {
    assert!(!train.is_empty(), "empty training set");
    let encoded = corpus::encode(train, embeddings.vocab());
    let epoch_len = train.len().div_ceil(train_cfg.batch_size);

    let (model, mut adam, mut step, mut best_f1, mut dropout_rng, mut shuffle_rng) = match resume {
        Some(ckpt) => {
            if ckpt.model != *model_cfg {
                return Err(TrainError::Version(
                    "resume checkpoint config differs from the requested model config".into(),
                ));
            }
            let (model, adam) = ckpt.restore()?;
            (
                model,
                adam,
                ckpt.step,
                ckpt.best_dev_f1,
                RunRng::restore(ckpt.rng_dropout.0, ckpt.rng_dropout.1),
                RunRng::restore(ckpt.rng_shuffle.0, ckpt.rng_shuffle.1),
            )
        }
        None => {
            let mut init_rng = RunRng::named(train_cfg.seed, "init");
            let model = Model::init(model_cfg.clone(), &mut init_rng)?;
            let adam = AdamState::new(&model.params.all());
            (
                model,
                adam,
                0,
                f64::NEG_INFINITY,
                RunRng::named(train_cfg.seed, "dropout"),
                RunRng::named(train_cfg.seed, "shuffle"),
            )
        }
    };
    let params = model.params.all();
    let mut log = Vec::new();

    // The stored shuffle state is always the pre-shuffle state of the epoch
    // containing the next step, so resuming replays the epoch order and
    // skips the consumed prefix.
    let mut pre_epoch_state = shuffle_rng.state();
    let mut batches = corpus::batchify(&encoded, train_cfg.batch_size, &mut shuffle_rng);
    let mut pos = step % epoch_len;

    let snapshot = |model: &Model,
                    adam: &AdamState,
                    step: usize,
                    best: f64,
                    dropout_rng: &RunRng,
                    pre_epoch: ([u8; 32], u128),
                    shuffle_rng: &RunRng,
                    epoch_len: usize| {
        let shuffle_state = if step % epoch_len == 0 {
            shuffle_rng.state()
        } else {
            pre_epoch
        };
        Checkpoint::snapshot(model, adam, step, best, dropout_rng.state(), shuffle_state)
    };

    // On resume the provided checkpoint is the best candidate so far; it is
    // only displaced by a strictly better dev score.
    let mut best: Option<Checkpoint> = resume.cloned();

    if train_cfg.max_steps == 0 {
        let report = dev_score(&model, embeddings, dev)?;
        best_f1 = report.f1;
        log.push(format!(
            "step=0 dev_p={:.6} dev_r={:.6} dev_f1={:.6} best=true",
            report.precision, report.recall, report.f1
        ));
        let ckpt = snapshot(
            &model,
            &adam,
            0,
            best_f1,
            &dropout_rng,
            pre_epoch_state,
            &shuffle_rng,
            epoch_len,
        );
        return Ok(FitResult {
            best: ckpt.clone(),
            last: ckpt,
            log,
        });
    }

    while step < train_cfg.max_steps {
        if pos == batches.len() {
            pre_epoch_state = shuffle_rng.state();
            batches = corpus::batchify(&encoded, train_cfg.batch_size, &mut shuffle_rng);
            pos = 0;
        }
        let batch = &batches[pos];
        let lr = lr_at(train_cfg, step);
        let mut graph = Graph::new();
        let loss = model
            .batch_loss(&mut graph, batch, embeddings, Some(&mut dropout_rng))
            .map_err(|e| TrainError::Step {
                step: step + 1,
                source: e,
            })?;
        let loss_value = graph.value(loss).scalar_value();
        graph.backward(loss).map_err(|e| TrainError::Step {
            step: step + 1,
            source: ModelError::Numerics(e),
        })?;
        adam_step(&params, &mut adam, lr, train_cfg).map_err(|e| match e {
            TrainError::Model(source) => TrainError::Step {
                step: step + 1,
                source,
            },
            other => other,
        })?;
        step += 1;
        pos += 1;
        log.push(format!("step={step} lr={lr:.6e} loss={loss_value:.6}"));

        if step % train_cfg.eval_interval == 0 || step == train_cfg.max_steps {
            let report = dev_score(&model, embeddings, dev)?;
            let improved = report.f1 > best_f1;
            if improved {
                best_f1 = report.f1;
                best = Some(snapshot(
                    &model,
                    &adam,
                    step,
                    best_f1,
                    &dropout_rng,
                    pre_epoch_state,
                    &shuffle_rng,
                    epoch_len,
                ));
            }
            log.push(format!(
                "step={step} dev_p={:.6} dev_r={:.6} dev_f1={:.6} best={improved}",
                report.precision, report.recall, report.f1
            ));
            if let Some(stop) = train_cfg.early_stop_f1 {
                if report.f1 >= stop {
                    log.push(format!("step={step} early_stop=true"));
                    break;
                }
            }
        }
    }

    let last = snapshot(
        &model,
        &adam,
        step,
        best_f1,
        &dropout_rng,
        pre_epoch_state,
        &shuffle_rng,
        epoch_len,
    );
    let best = best.unwrap_or_else(|| last.clone());
    Ok(FitResult { best, last, log })
}
