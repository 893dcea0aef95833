//! Non-autoregressive translation models: a shared encoder, a decoder
//! stack with full self-attention whose per-layer states are exposed, and
//! either a length-predicting per-token head (vanilla) or an upsampled CTC
//! head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::ctc;
use crate::data::BLANK;
use crate::error::{Error, Result};
use crate::loss::smoothed_nll;
use crate::nn::{
    batch_positions, cross_layout, self_layout, BlockConfig, DecoderLayer, DropoutCtx, Encoded,
    Encoder, Linear,
};
use crate::params::{embedding, ModelParams, ParamVars};
use crate::tensor::{Graph, Tensor, Var};

/// Weight of the length-prediction cross-entropy in the vanilla loss.
pub const LENGTH_LOSS_WEIGHT: f64 = 0.1;

pub use crate::nn::{SRC_EMBED, TGT_EMBED};

/// Sentences per decoding batch.
const DECODE_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Vanilla,
    Ctc,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Variant::Vanilla),
            "ctc" => Ok(Variant::Ctc),
            other => Err(Error::Config(format!(
                "unknown model variant `{other}` (expected vanilla or ctc)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Vanilla => "vanilla",
            Variant::Ctc => "ctc",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NarConfig {
    pub block: BlockConfig,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub variant: Variant,
    pub upsample_factor: usize,
    pub max_length_offset: usize,
    pub vocab_size: usize,
}

impl NarConfig {
    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return Err(Error::Config(
                "encoder and decoder need at least one layer each".into(),
            ));
        }
        if self.variant == Variant::Ctc && self.upsample_factor < 2 {
            return Err(Error::Config(format!(
                "upsample_factor {} too small for ctc (minimum 2)",
                self.upsample_factor
            )));
        }
        if self.vocab_size <= BLANK {
            return Err(Error::Config(
                "vocabulary smaller than the reserved symbols".into(),
            ));
        }
        Ok(())
    }
}

/// Decoder input position `pos` of batch item `batch` takes the
/// target-embedding row of `token` instead of a copied encoder state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Override {
    pub batch: usize,
    pub pos: usize,
    pub token: usize,
}

/// Every decoder layer's output plus the vocabulary distribution of the
/// last one, all `[batch·max_len × ·]`.
pub struct DecoderTrace {
    pub hidden: Vec<Var>,
    pub logits: Var,
    pub log_probs: Var,
    pub lens: Vec<usize>,
    pub max_len: usize,
}

/// Source index copied into decoder position `j` of `t`, for a source of
/// length `m`.
pub fn copy_index(j: usize, m: usize, t: usize) -> usize {
    j * m / t
}

pub struct NarModel {
    pub cfg: NarConfig,
    enc: Encoder,
    dec: Vec<DecoderLayer>,
    out: Linear,
    len_out: Option<Linear>,
}

impl NarModel {
    pub fn new(cfg: NarConfig) -> Result<Self> {
        cfg.validate()?;
        let enc = Encoder::new("enc", &cfg.block, cfg.n_enc_layers);
        let dec = (0..cfg.n_dec_layers)
            .map(|i| DecoderLayer::new(&format!("dec.{i}"), &cfg.block))
            .collect();
        let out = Linear::new("nar.out", cfg.block.d_model, cfg.vocab_size);
        let len_out = (cfg.variant == Variant::Vanilla)
            .then(|| Linear::new("len.out", cfg.block.d_model, 2 * cfg.max_length_offset + 1));
        Ok(NarModel {
            cfg,
            enc,
            dec,
            out,
            len_out,
        })
    }

    pub fn init(&self, rng: &mut impl Rng) -> ModelParams {
        let (v, d) = (self.cfg.vocab_size, self.cfg.block.d_model);
        let mut p = ModelParams::new();
        p.insert(SRC_EMBED, embedding(v, d, rng));
        p.insert(TGT_EMBED, embedding(v, d, rng));
        self.enc.init(&mut p, rng);
        for l in &self.dec {
            l.init(&mut p, rng);
        }
        self.out.init(&mut p, rng);
        if let Some(l) = &self.len_out {
            l.init(&mut p, rng);
        }
        p
    }

    fn d_model(&self) -> usize {
        self.cfg.block.d_model
    }

    fn heads(&self) -> usize {
        self.cfg.block.n_heads
    }

    pub fn encode(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        src: &[Vec<usize>],
        drop: &mut DropoutCtx<'_>,
    ) -> Result<Encoded> {
        self.enc.encode(g, pv, src, drop)
    }

    /// Decoder lengths during training: the target lengths (vanilla) or
    /// `upsample_factor · m` (CTC).
    pub fn train_lengths(&self, src_lens: &[usize], tgt_lens: &[usize]) -> Vec<usize> {
        match self.cfg.variant {
            Variant::Vanilla => tgt_lens.iter().map(|&n| n.max(1)).collect(),
            Variant::Ctc => self.ctc_lengths(src_lens),
        }
    }

    pub fn ctc_lengths(&self, src_lens: &[usize]) -> Vec<usize> {
        src_lens
            .iter()
            .map(|&m| m * self.cfg.upsample_factor)
            .collect()
    }

    /// Uniform copy of encoder states plus positions; overridden positions
    /// take a target-embedding row instead of the copied state. Padded
    /// positions copy the item's first state.
    pub fn decoder_inputs(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        enc: &Encoded,
        dec_lens: &[usize],
        overrides: &[Override],
    ) -> Result<Var> {
        if dec_lens.len() != enc.lens.len() || dec_lens.contains(&0) {
            return Err(Error::contract(
                "decoder lengths must be positive, one per batch item",
            ));
        }
        let batch = dec_lens.len();
        let t_max = dec_lens.iter().copied().max().unwrap_or(0);
        let enc_rows = batch * enc.max_len;
        let mut index = Vec::with_capacity(batch * t_max);
        for (b, (&t, &m)) in dec_lens.iter().zip(&enc.lens).enumerate() {
            for j in 0..t_max {
                let src = if j < t { copy_index(j, m, t) } else { 0 };
                index.push(b * enc.max_len + src);
            }
        }
        let table = if overrides.is_empty() {
            enc.states
        } else {
            for o in overrides {
                if o.batch >= batch || o.pos >= dec_lens[o.batch] || o.token >= self.cfg.vocab_size
                {
                    return Err(Error::contract(format!(
                        "decoder input override {o:?} out of range"
                    )));
                }
                index[o.batch * t_max + o.pos] = enc_rows + o.token;
            }
            let embed = pv.get(TGT_EMBED)?;
            g.concat(&[enc.states, embed], 0)?
        };
        let copied = g.gather_rows(table, &index)?;
        let pos = g.constant(batch_positions(batch, t_max, self.d_model()));
        g.add(copied, pos)
    }

    /// Runs the decoder stack with full self-attention over the first
    /// `dec_lens[b]` positions of each item.
    pub fn nar_decode(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        enc: &Encoded,
        dec_in: Var,
        dec_lens: &[usize],
        drop: &mut DropoutCtx<'_>,
    ) -> Result<DecoderTrace> {
        let t_max = dec_lens.iter().copied().max().unwrap_or(0);
        let sl = self_layout(dec_lens, t_max, self.heads(), false);
        let cl = cross_layout(t_max, &enc.lens, enc.max_len, self.heads());
        let mut x = drop.apply(g, dec_in, self.cfg.block.dropout)?;
        let mut hidden = Vec::with_capacity(self.dec.len());
        for l in &self.dec {
            x = l.forward(g, pv, x, enc.states, &sl, &cl, drop)?;
            hidden.push(x);
        }
        let logits = self.out.forward(g, pv, x)?;
        let log_probs = g.log_softmax(logits);
        Ok(DecoderTrace {
            hidden,
            logits,
            log_probs,
            lens: dec_lens.to_vec(),
            max_len: t_max,
        })
    }

    /// Encoder, decoder inputs and decoder in one go.
    pub fn forward(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        enc: &Encoded,
        dec_lens: &[usize],
        overrides: &[Override],
        drop: &mut DropoutCtx<'_>,
    ) -> Result<DecoderTrace> {
        let dec_in = self.decoder_inputs(g, pv, enc, dec_lens, overrides)?;
        self.nar_decode(g, pv, enc, dec_in, dec_lens, drop)
    }

    /// Log-distribution over length offsets `-K..=K` from mean-pooled
    /// encoder states, `[batch × 2K+1]`.
    pub fn length_log_probs(&self, g: &mut Graph, pv: &ParamVars, enc: &Encoded) -> Result<Var> {
        let head = self.len_out.as_ref().ok_or_else(|| {
            Error::contract("length prediction is only defined for the vanilla variant")
        })?;
        let batch = enc.lens.len();
        let mut pool = vec![0.0; batch * batch * enc.max_len];
        for (b, &m) in enc.lens.iter().enumerate() {
            for j in 0..m {
                pool[b * batch * enc.max_len + b * enc.max_len + j] = 1.0 / m as f64;
            }
        }
        let pool = g.constant(Tensor::new(vec![batch, batch * enc.max_len], pool)?);
        let pooled = g.matmul(pool, enc.states)?;
        let logits = head.forward(g, pv, pooled)?;
        Ok(g.log_softmax(logits))
    }

    pub fn length_class(&self, m: usize, n: usize) -> usize {
        let k = self.cfg.max_length_offset as i64;
        ((n as i64 - m as i64).clamp(-k, k) + k) as usize
    }

    /// `m + argmax offset`, ties to the smallest offset, at least 1.
    pub fn predicted_lengths(&self, g: &Graph, len_lp: Var, src_lens: &[usize]) -> Vec<usize> {
        let k = self.cfg.max_length_offset as i64;
        src_lens
            .iter()
            .enumerate()
            .map(|(b, &m)| {
                let row = g.value(len_lp).row(b);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                (m as i64 + best as i64 - k).max(1) as usize
            })
            .collect()
    }

    /// Label-smoothed token loss plus the weighted length loss. Returns the
    /// total and the two components' values.
    pub fn vanilla_loss(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        enc: &Encoded,
        trace: &DecoderTrace,
        targets: &[Vec<usize>],
        label_smoothing: f64,
    ) -> Result<(Var, f64, f64)> {
        let rows = target_rows(trace, targets)?;
        let tok = smoothed_nll(g, trace.log_probs, &rows, label_smoothing)?;
        let len_lp = self.length_log_probs(g, pv, enc)?;
        let classes: Vec<Option<usize>> = enc
            .lens
            .iter()
            .zip(targets)
            .map(|(&m, y)| Some(self.length_class(m, y.len())))
            .collect();
        let len = smoothed_nll(g, len_lp, &classes, 0.0)?;
        let (tv, lv) = (g.value(tok).item(), g.value(len).item());
        let weighted = g.scale(len, LENGTH_LOSS_WEIGHT);
        Ok((g.add(tok, weighted)?, tv, lv))
    }

    /// CTC negative log-likelihood summed over the batch and divided by the
    /// number of target tokens.
    pub fn ctc_loss(
        &self,
        g: &mut Graph,
        trace: &DecoderTrace,
        targets: &[Vec<usize>],
    ) -> Result<Var> {
        let per = ctc::ctc_loss(
            g,
            trace.log_probs,
            &trace.lens,
            trace.max_len,
            targets,
            BLANK,
        )?;
        let total = g.sum_all(per);
        let n: usize = targets.iter().map(Vec::len).sum();
        Ok(g.scale(total, 1.0 / n.max(1) as f64))
    }

    /// The NAR training loss for this variant and its value.
    pub fn nar_loss(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        enc: &Encoded,
        trace: &DecoderTrace,
        targets: &[Vec<usize>],
        label_smoothing: f64,
    ) -> Result<Var> {
        match self.cfg.variant {
            Variant::Vanilla => Ok(self
                .vanilla_loss(g, pv, enc, trace, targets, label_smoothing)?
                .0),
            Variant::Ctc => self.ctc_loss(g, trace, targets),
        }
    }

    /// Per-position argmax of the first `len` rows of item `b`.
    pub fn argmax_rows(g: &Graph, trace: &DecoderTrace, b: usize) -> Vec<usize> {
        let lp = g.value(trace.log_probs);
        (0..trace.lens[b])
            .map(|j| {
                let row = lp.row(b * trace.max_len + j);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    /// Parameters the NAR forward pass reads.
    pub fn bind_inference(&self, g: &mut Graph, params: &ModelParams) -> ParamVars {
        ParamVars::from_pairs(
            params
                .iter()
                .filter(|(n, _)| !n.starts_with(crate::mtl::HEAD_PREFIX))
                .map(|(n, t)| (n.to_string(), g.constant(t.clone()))),
        )
    }

    /// Decodes sources with the NAR decoder only. Vanilla decoding predicts
    /// the length and takes per-position argmaxes (a beam request falls
    /// back to that); CTC decoding collapses the greedy path or runs prefix
    /// beam search.
    pub fn decode(
        &self,
        params: &ModelParams,
        src: &[Vec<usize>],
        mode: DecodeMode,
    ) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(src.len());
        for chunk in src.chunks(DECODE_CHUNK) {
            let mut g = Graph::no_grad();
            let pv = self.bind_inference(&mut g, params);
            let mut drop = DropoutCtx::eval();
            let enc = self.encode(&mut g, &pv, chunk, &mut drop)?;
            let dec_lens = match self.cfg.variant {
                Variant::Vanilla => {
                    let lp = self.length_log_probs(&mut g, &pv, &enc)?;
                    self.predicted_lengths(&g, lp, &enc.lens)
                }
                Variant::Ctc => self.ctc_lengths(&enc.lens),
            };
            let trace = self.forward(&mut g, &pv, &enc, &dec_lens, &[], &mut drop)?;
            for b in 0..chunk.len() {
                let hyp = match (self.cfg.variant, mode) {
                    (Variant::Vanilla, _) => Self::argmax_rows(&g, &trace, b),
                    (Variant::Ctc, m) => {
                        let v = self.cfg.vocab_size;
                        let start = b * trace.max_len * v;
                        let lp = &g.value(trace.log_probs).data()[start..start + trace.lens[b] * v];
                        match m {
                            DecodeMode::Greedy => ctc::greedy_decode(lp, v, BLANK)?,
                            DecodeMode::Beam(k) => {
                                ctc::beam_search(lp, v, BLANK, k)?.swap_remove(0).0
                            }
                        }
                    }
                };
                out.push(hyp);
            }
        }
        Ok(out)
    }
}

/// Per decoder row target id (`None` past the target or on padding).
/// Requires the decoder to be at least as long as each target.
fn target_rows(trace: &DecoderTrace, targets: &[Vec<usize>]) -> Result<Vec<Option<usize>>> {
    if targets.len() != trace.lens.len() {
        return Err(Error::contract("target count differs from batch size"));
    }
    let mut rows = vec![None; targets.len() * trace.max_len];
    for (b, y) in targets.iter().enumerate() {
        if y.len() > trace.lens[b] {
            return Err(Error::contract(format!(
                "target of length {} exceeds decoder length {}",
                y.len(),
                trace.lens[b]
            )));
        }
        for (j, &t) in y.iter().enumerate() {
            rows[b * trace.max_len + j] = Some(t);
        }
    }
    Ok(rows)
}
