//! One-layer Transformer caption decoder: masked self-attention over the
//! token prefix, cross-attention over the visual tokens, greedy decoding.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{HisemError, Result};
use crate::nn::{LayerNorm, Linear};
use crate::tensor::{no_grad, top_k, Tensor};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token ↔ id bijection with four reserved control ids.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from the non-reserved word list, preserving its order.
    pub fn new<I: IntoIterator<Item = String>>(words: I) -> Result<Vocabulary> {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut token_to_id: HashMap<String, usize> = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        for w in words {
            if token_to_id.contains_key(&w) {
                return Err(HisemError::InvalidArgument(format!(
                    "vocabulary: duplicate token {w:?}"
                )));
            }
            token_to_id.insert(w.clone(), id_to_token.len());
            id_to_token.push(w);
        }
        Ok(Vocabulary {
            id_to_token,
            token_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids always present
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    /// Word ids for a whitespace-tokenized caption, without BOS/EOS.
    pub fn encode(&self, words: &[String]) -> Vec<usize> {
        words.iter().map(|w| self.id(w)).collect()
    }

    /// Joins word ids back into a caption, skipping control ids.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= UNK)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }
}

/// Padded id matrix for a batch of captions.
#[derive(Clone, Debug)]
pub struct CaptionBatch {
    /// [B × n_max], PAD-filled after each sequence.
    pub ids: Vec<Vec<usize>>,
    /// True length of each row including BOS and EOS.
    pub lengths: Vec<usize>,
}

impl CaptionBatch {
    /// Wraps raw sequences, checking the BOS…EOS framing and id range.
    pub fn new(seqs: Vec<Vec<usize>>, vocab_size: usize) -> Result<CaptionBatch> {
        if seqs.is_empty() {
            return Err(HisemError::InvalidArgument("empty caption batch".into()));
        }
        let n_max = seqs.iter().map(Vec::len).max().unwrap();
        let mut ids = Vec::with_capacity(seqs.len());
        let mut lengths = Vec::with_capacity(seqs.len());
        for (i, s) in seqs.into_iter().enumerate() {
            if s.len() < 2 || s[0] != BOS || s[s.len() - 1] != EOS {
                return Err(HisemError::InvalidArgument(format!(
                    "caption {i} must start with BOS and end with EOS"
                )));
            }
            if let Some(&bad) = s.iter().find(|&&t| t >= vocab_size) {
                return Err(HisemError::InvalidArgument(format!(
                    "caption {i}: id {bad} out of range for vocabulary of {vocab_size}"
                )));
            }
            lengths.push(s.len());
            let mut row = s;
            row.resize(n_max, PAD);
            ids.push(row);
        }
        Ok(CaptionBatch { ids, lengths })
    }

    pub fn single(seq: Vec<usize>, vocab_size: usize) -> Result<CaptionBatch> {
        CaptionBatch::new(vec![seq], vocab_size)
    }
}

/// Single-head attention projections.
#[derive(Clone)]
pub struct AttnParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttnParams {
    fn new(rng: &mut ChaCha8Rng, d: usize) -> AttnParams {
        AttnParams {
            q: Linear::new(rng, d, d, false),
            k: Linear::new(rng, d, d, false),
            v: Linear::new(rng, d, d, false),
            o: Linear::new(rng, d, d, true),
        }
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.q.params(&format!("{prefix}.q"), out);
        self.k.params(&format!("{prefix}.k"), out);
        self.v.params(&format!("{prefix}.v"), out);
        self.o.params(&format!("{prefix}.o"), out);
    }
}

#[derive(Clone)]
pub struct DecoderLayer {
    pub self_attn: AttnParams,
    pub cross_attn: AttnParams,
    pub ffn_w1: Linear,
    pub ffn_w2: Linear,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ln3: LayerNorm,
}

impl DecoderLayer {
    fn new(rng: &mut ChaCha8Rng, d: usize, hidden: usize) -> DecoderLayer {
        DecoderLayer {
            self_attn: AttnParams::new(rng, d),
            cross_attn: AttnParams::new(rng, d),
            ffn_w1: Linear::new(rng, d, hidden, true),
            ffn_w2: Linear::new(rng, hidden, d, true),
            ln1: LayerNorm::new(d),
            ln2: LayerNorm::new(d),
            ln3: LayerNorm::new(d),
        }
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.self_attn.params(&format!("{prefix}.self"), out);
        self.cross_attn.params(&format!("{prefix}.cross"), out);
        self.ffn_w1.params(&format!("{prefix}.ffn_w1"), out);
        self.ffn_w2.params(&format!("{prefix}.ffn_w2"), out);
        self.ln1.params(&format!("{prefix}.ln1"), out);
        self.ln2.params(&format!("{prefix}.ln2"), out);
        self.ln3.params(&format!("{prefix}.ln3"), out);
    }
}

#[derive(Clone)]
pub struct DecoderParams {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<DecoderLayer>,
    pub out_proj: Linear,
    pub n_max: usize,
}

impl DecoderParams {
    pub fn new(
        rng: &mut ChaCha8Rng,
        vocab_size: usize,
        d: usize,
        n_max: usize,
        depth: usize,
        hidden: usize,
    ) -> DecoderParams {
        DecoderParams {
            tok_emb: crate::nn::init_uniform(rng, &[vocab_size, d], d),
            pos_emb: crate::nn::init_uniform(rng, &[n_max, d], d),
            layers: (0..depth).map(|_| DecoderLayer::new(rng, d, hidden)).collect(),
            out_proj: Linear::new(rng, d, vocab_size, true),
            n_max,
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.tok_emb"), self.tok_emb.clone()));
        out.push((format!("{prefix}.pos_emb"), self.pos_emb.clone()));
        for (i, l) in self.layers.iter().enumerate() {
            l.params(&format!("{prefix}.layer{i}"), out);
        }
        self.out_proj.params(&format!("{prefix}.out"), out);
    }
}

/// Additive mask with −1e9 above the diagonal; exp underflows those
/// entries to exactly 0.0, so causality is bit-exact after softmax.
fn causal_mask(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            m[i * n + j] = -1e9;
        }
    }
    m
}

fn attention(
    x_q: &Tensor,
    x_kv: &Tensor,
    p: &AttnParams,
    mask: Option<&[f64]>,
) -> Result<Tensor> {
    let d = x_q.shape()[1] as f64;
    let q = p.q.forward(x_q)?;
    let k = p.k.forward(x_kv)?;
    let v = p.v.forward(x_kv)?;
    let mut scores = q.matmul(&k.transpose()?)?.scale(1.0 / d.sqrt());
    if let Some(m) = mask {
        scores = scores.add_const(m)?;
    }
    p.o.forward(&scores.softmax_lastdim().matmul(&v)?)
}

/// Runs one prefix [n] of token ids through the stack; returns [n × |V|]
/// next-token logits.
fn forward_ids(visual: &Tensor, ids: &[usize], p: &DecoderParams) -> Result<Tensor> {
    let n = ids.len();
    if n > p.n_max {
        return Err(HisemError::InvalidArgument(format!(
            "caption prefix of {n} exceeds maximum length {}",
            p.n_max
        )));
    }
    let mut x = p
        .tok_emb
        .embedding(ids)?
        .add(&p.pos_emb.slice_rows(0, n)?)?;
    let mask = causal_mask(n);
    for l in &p.layers {
        let a = attention(&x, &x, &l.self_attn, Some(&mask))?;
        x = l.ln1.forward(&x.add(&a)?)?;
        let c = attention(&x, visual, &l.cross_attn, None)?;
        x = l.ln2.forward(&x.add(&c)?)?;
        let h = l.ffn_w2.forward(&l.ffn_w1.forward(&x)?.relu())?;
        x = l.ln3.forward(&x.add(&h)?)?;
    }
    p.out_proj.forward(&x)
}

/// Teacher-forced logits for each batch row: row b gets the first
/// `lengths[b] − 1` tokens as input and yields that many rows of logits,
/// one per next-token prediction.
pub fn decoder_forward(
    visual: &Tensor,
    captions: &CaptionBatch,
    p: &DecoderParams,
) -> Result<Vec<Tensor>> {
    captions
        .ids
        .iter()
        .zip(&captions.lengths)
        .map(|(row, &len)| forward_ids(visual, &row[..len - 1], p))
        .collect()
}

/// Mean cross-entropy over all real next-token targets in the batch
/// (padding never enters; every counted position is a real word or the
/// closing EOS).
pub fn caption_loss(logits: &[Tensor], captions: &CaptionBatch) -> Result<Tensor> {
    if logits.len() != captions.ids.len() {
        return Err(HisemError::InvalidArgument(format!(
            "caption_loss: {} logit blocks for {} captions",
            logits.len(),
            captions.ids.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    let mut count = 0usize;
    for ((block, row), &len) in logits.iter().zip(&captions.ids).zip(&captions.lengths) {
        let targets = &row[1..len];
        let term = block.cross_entropy_sum(targets, &vec![1.0; targets.len()])?;
        count += targets.len();
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.unwrap().scale(1.0 / count as f64))
}

/// Greedy (beam-1) decoding from BOS; stops at EOS or `max_len` emitted
/// tokens. Argmax ties resolve to the lower id. Returns word ids only.
pub fn generate_greedy(visual: &Tensor, p: &DecoderParams, max_len: usize) -> Result<Vec<usize>> {
    no_grad(|| {
        let mut seq = vec![BOS];
        let mut out = Vec::new();
        while out.len() < max_len && seq.len() < p.n_max {
            let logits = forward_ids(visual, &seq, p)?;
            let v = logits.shape()[1];
            let last = logits.to_vec()[(seq.len() - 1) * v..].to_vec();
            let next = top_k(&last, 1)?[0].0;
            if next == EOS {
                break;
            }
            seq.push(next);
            out.push(next);
        }
        Ok(out)
    })
}
