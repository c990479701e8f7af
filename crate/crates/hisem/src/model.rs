//! Full change-captioning model: a stack of differential-attention layers
//! refines the two feature grids, the routing stage disentangles the
//! changed/unchanged semantics, and the caption decoder reads the result.

use rand_chacha::ChaCha8Rng;

use crate::bdam::{bdam_forward, BdamLayerParams, BiTemporalFeatures};
use crate::decoder::{
    decoder_forward, generate_greedy, CaptionBatch, DecoderParams, Vocabulary,
};
use crate::error::Result;
use crate::hasd::{hasd_forward, HasdParams, MoEConfig, RoutingDecision};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub d: usize,
    pub grid: (usize, usize),
    pub bdam_depth: usize,
    pub bdam_hidden: usize,
    pub decoder_depth: usize,
    pub decoder_hidden: usize,
    /// Maximum decoded sequence length including BOS and EOS.
    pub n_max: usize,
    pub moe: MoEConfig,
    pub vocab_size: usize,
    /// Test mode: share all direction-sensitive BDAM parameters so that
    /// identical inputs stay exactly symmetric through the stack.
    pub tied_bdam: bool,
}

impl ModelConfig {
    pub fn desk(d: usize, grid: (usize, usize), vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d,
            grid,
            bdam_depth: 3,
            bdam_hidden: d,
            decoder_depth: 1,
            decoder_hidden: 4 * d,
            n_max: 26,
            moe: MoEConfig::default(),
            vocab_size,
            tied_bdam: false,
        }
    }
}

pub struct HiSemModel {
    pub cfg: ModelConfig,
    pub bdam: Vec<BdamLayerParams>,
    pub hasd: HasdParams,
    pub decoder: DecoderParams,
}

/// Everything the forward pass produces for one sample.
pub struct SampleOutput {
    /// One [n−1 × |V|] logits block per caption row.
    pub caption_logits: Vec<Tensor>,
    pub routing_logits: Tensor,
    pub decision: RoutingDecision,
    /// Disentangled visual tokens handed to the decoder.
    pub visual: Tensor,
}

impl HiSemModel {
    pub fn new(rng: &mut ChaCha8Rng, cfg: ModelConfig) -> Result<HiSemModel> {
        let bdam = (0..cfg.bdam_depth)
            .map(|_| {
                if cfg.tied_bdam {
                    BdamLayerParams::new_tied(rng, cfg.d, cfg.bdam_hidden)
                } else {
                    BdamLayerParams::new(rng, cfg.d, cfg.bdam_hidden)
                }
            })
            .collect();
        let hasd = HasdParams::new(rng, cfg.d, cfg.moe)?;
        let decoder = DecoderParams::new(
            rng,
            cfg.vocab_size,
            cfg.d,
            cfg.n_max,
            cfg.decoder_depth,
            cfg.decoder_hidden,
        );
        Ok(HiSemModel {
            cfg,
            bdam,
            hasd,
            decoder,
        })
    }

    /// Named trainable tensors in a stable order.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.bdam.iter().enumerate() {
            l.params(&format!("bdam{i}"), &mut out);
        }
        self.hasd.params("hasd", &mut out);
        self.decoder.params("dec", &mut out);
        out
    }

    /// BDAM refinement of the raw grids.
    pub fn encode(&self, f_t1: &Tensor, f_t2: &Tensor) -> Result<BiTemporalFeatures> {
        let x = BiTemporalFeatures::new(f_t1.clone(), f_t2.clone(), self.cfg.grid)?;
        bdam_forward(&x, &self.bdam)
    }

    /// Refine → route → decode (teacher-forced).
    pub fn forward(
        &self,
        f_t1: &Tensor,
        f_t2: &Tensor,
        captions: &CaptionBatch,
        routing_override: Option<usize>,
    ) -> Result<SampleOutput> {
        let refined = self.encode(f_t1, f_t2)?;
        let (visual, decision, routing_logits) =
            hasd_forward(&refined, &self.hasd, routing_override)?;
        let caption_logits = decoder_forward(&visual, captions, &self.decoder)?;
        Ok(SampleOutput {
            caption_logits,
            routing_logits,
            decision,
            visual,
        })
    }

    /// Greedy caption for one pair, plus the routing decision taken.
    pub fn describe(
        &self,
        f_t1: &Tensor,
        f_t2: &Tensor,
        vocab: &Vocabulary,
        routing_override: Option<usize>,
    ) -> Result<(String, RoutingDecision)> {
        let refined = self.encode(f_t1, f_t2)?;
        let (visual, decision, _) = hasd_forward(&refined, &self.hasd, routing_override)?;
        let ids = generate_greedy(&visual, &self.decoder, self.cfg.n_max - 2)?;
        Ok((vocab.decode(&ids), decision))
    }
}

/// Tokens [L,D] from a record's flat [H×W×D] feature buffer.
pub fn record_tensor(flat: &[f64], h: usize, w: usize, d: usize) -> Tensor {
    Tensor::from_vec(flat.to_vec(), &[h * w, d])
}
