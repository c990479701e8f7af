//! Curriculum training: caption loss from epoch zero, the routing
//! classification loss ramped in with a half-cosine after a warm-up
//! phase, adaptive-moment updates, and binary checkpoints that carry the
//! optimizer state for bit-exact resumption.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetRecord;
use crate::decoder::{CaptionBatch, Vocabulary, BOS, EOS};
use crate::error::{HisemError, Result};
use crate::hasd::routing_loss;
use crate::metrics::tokenize;
use crate::model::{record_tensor, HiSemModel};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CurriculumConfig {
    pub total_epochs: usize,
    /// Epochs with the classification term held at zero.
    pub warmup_epochs: usize,
    /// Balancing coefficient on the classification loss.
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for CurriculumConfig {
    fn default() -> CurriculumConfig {
        CurriculumConfig {
            total_epochs: 50,
            warmup_epochs: 10,
            lambda: 0.8,
            lr: 1e-4,
            batch_size: 8,
            seed: 0,
            grad_clip: Some(5.0),
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.total_epochs {
            return Err(HisemError::Config(format!(
                "warmup_epochs {} must be below total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.lambda < 0.0 {
            return Err(HisemError::Config("lambda must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Half-cosine ramp: 0 through the warm-up, then
/// ½(1 − cos(π(e−W)/(T−W))) up to exactly 1 at e = T.
pub fn ramp_factor(e: usize, cfg: &CurriculumConfig) -> Result<f64> {
    cfg.validate()?;
    if e > cfg.total_epochs {
        return Err(HisemError::InvalidArgument(format!(
            "epoch {e} beyond total_epochs {}",
            cfg.total_epochs
        )));
    }
    let (w, t) = (cfg.warmup_epochs, cfg.total_epochs);
    if e < w {
        return Ok(0.0);
    }
    let x = (e - w) as f64 / (t - w) as f64;
    Ok(0.5 * (1.0 - (std::f64::consts::PI * x).cos()))
}

/// 𝓛 = 𝓛_cap + λ·α(e)·𝓛_cls. The caller detaches the classification
/// logits during warm-up; here α(e)=0 additionally zeroes the term.
pub fn total_loss(
    l_cap: &Tensor,
    l_cls: &Tensor,
    e: usize,
    cfg: &CurriculumConfig,
) -> Result<Tensor> {
    let a = ramp_factor(e, cfg)?;
    l_cap.add(&l_cls.scale(cfg.lambda * a))
}

/// Adaptive-moment optimizer state, keyed by parameter name.
pub struct OptimizerState {
    pub m: HashMap<String, Vec<f64>>,
    pub v: HashMap<String, Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl OptimizerState {
    pub fn new(lr: f64) -> OptimizerState {
        OptimizerState {
            m: HashMap::new(),
            v: HashMap::new(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }
}

/// One bias-corrected moment update over all parameters, with optional
/// global-norm clipping first. Parameters without a recorded gradient
/// are treated as zero-gradient.
pub fn optimizer_step(
    params: &[(String, Tensor)],
    state: &mut OptimizerState,
    grad_clip: Option<f64>,
) -> Result<()> {
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(params.len());
    for (name, p) in params {
        let g = p.grad_vec().unwrap_or_else(|| vec![0.0; p.len()]);
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(HisemError::NonFiniteGradient(format!(
                "parameter {name}: gradient value {bad}"
            )));
        }
        grads.push(g);
    }
    if let Some(clip) = grad_clip {
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if norm > clip {
            let s = clip / norm;
            for g in &mut grads {
                for v in g.iter_mut() {
                    *v *= s;
                }
            }
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for ((name, p), g) in params.iter().zip(&grads) {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let mut data = p.to_vec();
        for i in 0..g.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
        p.set_data(&data);
    }
    Ok(())
}

const MAGIC: &[u8; 4] = b"HSEM";
const VERSION: u32 = 1;

/// Writes named tensors as a count-prefixed little-endian table.
pub fn save_checkpoint(path: &Path, entries: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
    let io = |e| HisemError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut f = BufWriter::new(File::create(path).map_err(io)?);
    let mut w = |bytes: &[u8]| f.write_all(bytes).map_err(io);
    w(MAGIC)?;
    w(&VERSION.to_le_bytes())?;
    w(&(entries.len() as u32).to_le_bytes())?;
    for (name, shape, data) in entries {
        w(&(name.len() as u32).to_le_bytes())?;
        w(name.as_bytes())?;
        w(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w(&(d as u64).to_le_bytes())?;
        }
        for &x in data {
            w(&x.to_le_bytes())?;
        }
    }
    f.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
    let io = |e| HisemError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut f = BufReader::new(File::open(path).map_err(io)?);
    let bad = |msg: &str| HisemError::Checkpoint(format!("{}: {msg}", path.display()));
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    f.read_exact(&mut u32buf).map_err(io)?;
    if &u32buf != MAGIC {
        return Err(bad("bad magic bytes"));
    }
    f.read_exact(&mut u32buf).map_err(io)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    f.read_exact(&mut u32buf).map_err(io)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        f.read_exact(&mut u32buf).map_err(io)?;
        let mut name = vec![0u8; u32::from_le_bytes(u32buf) as usize];
        f.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| bad("non-utf8 entry name"))?;
        f.read_exact(&mut u32buf).map_err(io)?;
        let ndim = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            f.read_exact(&mut u64buf).map_err(io)?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            f.read_exact(&mut u64buf).map_err(io)?;
            data.push(f64::from_le_bytes(u64buf));
        }
        out.push((name, shape, data));
    }
    Ok(out)
}

/// Serializes model parameters plus optimizer state and the next epoch.
pub fn save_training_state(
    path: &Path,
    model: &HiSemModel,
    opt: &OptimizerState,
    next_epoch: usize,
) -> Result<()> {
    let mut entries = Vec::new();
    for (name, p) in model.params() {
        entries.push((name.clone(), p.shape().to_vec(), p.to_vec()));
    }
    // optimizer moments follow parameter order for determinism
    for (name, p) in model.params() {
        if let Some(m) = opt.m.get(&name) {
            entries.push((format!("opt.m.{name}"), p.shape().to_vec(), m.clone()));
        }
        if let Some(v) = opt.v.get(&name) {
            entries.push((format!("opt.v.{name}"), p.shape().to_vec(), v.clone()));
        }
    }
    entries.push(("opt.step".into(), vec![1], vec![opt.step as f64]));
    entries.push(("train.next_epoch".into(), vec![1], vec![next_epoch as f64]));
    save_checkpoint(path, &entries)
}

/// Restores parameters (and, when present, optimizer state) in place.
/// Returns the epoch to resume from.
pub fn load_training_state(
    path: &Path,
    model: &HiSemModel,
    opt: &mut OptimizerState,
) -> Result<usize> {
    let entries = load_checkpoint(path)?;
    let table: HashMap<&str, &(String, Vec<usize>, Vec<f64>)> =
        entries.iter().map(|e| (e.0.as_str(), e)).collect();
    let mut next_epoch = 0;
    for (name, p) in model.params() {
        let (_, shape, data) = table.get(name.as_str()).ok_or_else(|| {
            HisemError::Checkpoint(format!("{}: missing parameter {name}", path.display()))
        })?;
        if shape != p.shape() {
            return Err(HisemError::Checkpoint(format!(
                "{}: parameter {name} has shape {:?}, expected {:?}",
                path.display(),
                shape,
                p.shape()
            )));
        }
        p.set_data(data);
        if let Some((_, _, m)) = table.get(format!("opt.m.{name}").as_str()) {
            opt.m.insert(name.clone(), m.clone());
        }
        if let Some((_, _, v)) = table.get(format!("opt.v.{name}").as_str()) {
            opt.v.insert(name.clone(), v.clone());
        }
    }
    if let Some((_, _, s)) = table.get("opt.step") {
        opt.step = s[0] as u64;
    }
    if let Some((_, _, e)) = table.get("train.next_epoch") {
        next_epoch = e[0] as usize;
    }
    Ok(next_epoch)
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub caption_loss: f64,
    pub routing_loss: f64,
    pub alpha: f64,
    pub router_accuracy: f64,
    /// Kept out of the serialized reports so identical runs stay
    /// byte-identical on disk.
    #[serde(skip_serializing)]
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
}

impl TrainReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| HisemError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        serde_json::to_writer_pretty(BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let io = |e| HisemError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut f = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(
            f,
            "epoch,caption_loss,routing_loss,alpha,router_accuracy"
        )
        .map_err(io)?;
        for r in &self.rows {
            writeln!(
                f,
                "{},{},{},{},{}",
                r.epoch, r.caption_loss, r.routing_loss, r.alpha, r.router_accuracy
            )
            .map_err(io)?;
        }
        f.flush().map_err(io)
    }
}

/// Per-record encoded caption sequences (BOS … EOS).
pub fn encode_captions(records: &[DatasetRecord], vocab: &Vocabulary) -> Vec<Vec<Vec<usize>>> {
    records
        .iter()
        .map(|r| {
            r.captions
                .iter()
                .map(|c| {
                    let mut seq = vec![BOS];
                    seq.extend(vocab.encode(&tokenize(c)));
                    seq.push(EOS);
                    seq
                })
                .collect()
        })
        .collect()
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub final_caption_loss: f64,
    pub final_router_accuracy: f64,
}

/// Trains in place. Dispatch uses the ground-truth route so the caption
/// head always sees the right path; the image-level router is supervised
/// separately through the ramped classification term. Shuffling reseeds
/// per epoch from (seed, epoch) so a resumed run continues identically.
/// An optional `stop_when` callback ends training early (checked after
/// each epoch).
pub fn train_loop(
    model: &HiSemModel,
    records: &[DatasetRecord],
    vocab: &Vocabulary,
    cfg: &CurriculumConfig,
    opt: &mut OptimizerState,
    start_epoch: usize,
    checkpoint: Option<&Path>,
    stop_when: Option<&dyn Fn(&EpochRow) -> bool>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(HisemError::InvalidArgument("empty training set".into()));
    }
    let caps = encode_captions(records, vocab);
    let params = model.params();
    let mut report = TrainReport::default();
    let (mut last_cap, mut last_acc) = (f64::NAN, 0.0);
    for epoch in start_epoch..cfg.total_epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..records.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let alpha = ramp_factor(epoch, cfg)?;
        let warmup = epoch < cfg.warmup_epochs;
        let mut cap_sum = 0.0;
        let mut cap_tokens = 0usize;
        let mut cls_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut l_cap_sum: Option<Tensor> = None;
            let mut l_cls_sum: Option<Tensor> = None;
            let mut tokens = 0usize;
            for &i in batch {
                let r = &records[i];
                let f1 = record_tensor(&r.f_t1, r.h, r.w, r.d);
                let f2 = record_tensor(&r.f_t2, r.h, r.w, r.d);
                // Teacher-force the first reference; the paraphrases
                // stay evaluation-only so the target is learnable.
                let cap = &caps[i][0];
                let cb = CaptionBatch::single(cap.clone(), vocab.len())?;
                let out = model.forward(&f1, &f2, &cb, Some(r.label as usize))?;
                tokens += cap.len() - 1;
                let ce = out.caption_logits[0]
                    .cross_entropy_sum(&cap[1..], &vec![1.0; cap.len() - 1])?;
                l_cap_sum = Some(match l_cap_sum {
                    Some(t) => t.add(&ce)?,
                    None => ce,
                });
                let logits = if warmup {
                    out.routing_logits.detach()
                } else {
                    out.routing_logits.clone()
                };
                let cls = routing_loss(&logits, r.label as usize)?;
                l_cls_sum = Some(match l_cls_sum {
                    Some(t) => t.add(&cls)?,
                    None => cls,
                });
                let lv = out.routing_logits.to_vec();
                let predicted = (lv[1] > lv[0]) as u8;
                if predicted == r.label {
                    correct += 1;
                }
            }
            let l_cap = l_cap_sum.unwrap().scale(1.0 / tokens as f64);
            let l_cls = l_cls_sum.unwrap().scale(1.0 / batch.len() as f64);
            let loss = total_loss(&l_cap, &l_cls, epoch, cfg)?;
            for (_, p) in &params {
                p.zero_grad();
            }
            loss.backward()?;
            optimizer_step(&params, opt, cfg.grad_clip)?;
            cap_sum += l_cap.item() * tokens as f64;
            cap_tokens += tokens;
            cls_sum += l_cls.item() * batch.len() as f64;
        }
        last_cap = cap_sum / cap_tokens as f64;
        last_acc = 100.0 * correct as f64 / records.len() as f64;
        let row = EpochRow {
            epoch,
            caption_loss: last_cap,
            routing_loss: cls_sum / records.len() as f64,
            alpha,
            router_accuracy: last_acc,
            wall_time_s: t0.elapsed().as_secs_f64(),
        };
        let stop = stop_when.map(|f| f(&row)).unwrap_or(false);
        report.rows.push(row);
        if stop {
            break;
        }
    }
    if let Some(path) = checkpoint {
        save_training_state(path, model, opt, cfg.total_epochs)?;
    }
    Ok(TrainOutcome {
        report,
        final_caption_loss: last_cap,
        final_router_accuracy: last_acc,
    })
}
