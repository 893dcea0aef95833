//! Transformer building blocks: projections, multi-head attention,
//! position-wise feed-forward, sinusoidal positions, and the encoder and
//! decoder layers built from them.
//!
//! Every block is a set of parameter names plus a `forward` that looks
//! them up in a bound [`ParamVars`]. Sequences are batched as flattened
//! `[batch·len × d_model]` row matrices; the [`AttentionLayout`] carries
//! the grouping and the padding/causal masks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{xavier, ModelParams, ParamVars};
use crate::tensor::{AttentionLayout, Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;

pub const SRC_EMBED: &str = "src_embed";
pub const TGT_EMBED: &str = "tgt_embed";

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub pre_norm: bool,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            dropout: 0.1,
            pre_norm: false,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("d_ff must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} not in [0,1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Source of dropout masks; `None` means evaluation mode.
pub struct DropoutCtx<'a> {
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> DropoutCtx<'a> {
    pub fn eval() -> Self {
        DropoutCtx { rng: None }
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        DropoutCtx { rng: Some(rng) }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var, p: f64) -> Result<Var> {
        g.dropout(x, p, self.rng.as_deref_mut())
    }
}

/// `x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: String,
    pub b: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(prefix: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
            d_in,
            d_out,
        }
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) {
        params.insert(&self.w, xavier(self.d_in, self.d_out, rng));
        params.insert(&self.b, Tensor::zeros(&[self.d_out]));
    }

    pub fn forward(&self, g: &mut Graph, pv: &ParamVars, x: Var) -> Result<Var> {
        let h = g.matmul(x, pv.get(&self.w)?)?;
        g.add(h, pv.get(&self.b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(prefix: &str, dim: usize) -> Self {
        LayerNorm {
            gain: format!("{prefix}.g"),
            bias: format!("{prefix}.b"),
            dim,
        }
    }

    pub fn init(&self, params: &mut ModelParams) {
        params.insert(&self.gain, Tensor::full(&[self.dim], 1.0));
        params.insert(&self.bias, Tensor::zeros(&[self.dim]));
    }

    pub fn forward(&self, g: &mut Graph, pv: &ParamVars, x: Var) -> Result<Var> {
        g.layer_norm(x, pv.get(&self.gain)?, pv.get(&self.bias)?, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(prefix: &str, d_model: usize, heads: usize) -> Self {
        MultiHeadAttention {
            q: Linear::new(&format!("{prefix}.q"), d_model, d_model),
            k: Linear::new(&format!("{prefix}.k"), d_model, d_model),
            v: Linear::new(&format!("{prefix}.v"), d_model, d_model),
            o: Linear::new(&format!("{prefix}.o"), d_model, d_model),
            heads,
        }
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.init(params, rng);
        }
    }

    /// Queries from `xq`, keys and values from `xkv`.
    pub fn forward(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        xq: Var,
        xkv: Var,
        layout: &AttentionLayout,
    ) -> Result<Var> {
        if layout.heads != self.heads {
            return Err(Error::contract(
                "attention layout head count differs from block",
            ));
        }
        let q = self.q.forward(g, pv, xq)?;
        let k = self.k.forward(g, pv, xkv)?;
        let v = self.v.forward(g, pv, xkv)?;
        let ctx = g.attention(q, k, v, layout)?;
        self.o.forward(g, pv, ctx)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(prefix: &str, d_model: usize, d_ff: usize) -> Self {
        FeedForward {
            up: Linear::new(&format!("{prefix}.up"), d_model, d_ff),
            down: Linear::new(&format!("{prefix}.down"), d_ff, d_model),
        }
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) {
        self.up.init(params, rng);
        self.down.init(params, rng);
    }

    pub fn forward(&self, g: &mut Graph, pv: &ParamVars, x: Var) -> Result<Var> {
        let h = self.up.forward(g, pv, x)?;
        let h = g.relu(h);
        self.down.forward(g, pv, h)
    }
}

/// Residual wrapper around one sublayer, post- or pre-norm.
fn residual(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &BlockConfig,
    norm: &LayerNorm,
    drop: &mut DropoutCtx<'_>,
    x: Var,
    sub: impl FnOnce(&mut Graph, Var) -> Result<Var>,
) -> Result<Var> {
    if cfg.pre_norm {
        let h = norm.forward(g, pv, x)?;
        let h = sub(g, h)?;
        let h = drop.apply(g, h, cfg.dropout)?;
        g.add(x, h)
    } else {
        let h = sub(g, x)?;
        let h = drop.apply(g, h, cfg.dropout)?;
        let s = g.add(x, h)?;
        norm.forward(g, pv, s)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub cfg: BlockConfig,
    pub self_attn: MultiHeadAttention,
    pub ln_attn: LayerNorm,
    pub ffn: FeedForward,
    pub ln_ffn: LayerNorm,
}

impl EncoderLayer {
    pub fn new(prefix: &str, cfg: &BlockConfig) -> Self {
        EncoderLayer {
            cfg: cfg.clone(),
            self_attn: MultiHeadAttention::new(
                &format!("{prefix}.self_attn"),
                cfg.d_model,
                cfg.n_heads,
            ),
            ln_attn: LayerNorm::new(&format!("{prefix}.ln_attn"), cfg.d_model),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), cfg.d_model, cfg.d_ff),
            ln_ffn: LayerNorm::new(&format!("{prefix}.ln_ffn"), cfg.d_model),
        }
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) {
        self.self_attn.init(params, rng);
        self.ln_attn.init(params);
        self.ffn.init(params, rng);
        self.ln_ffn.init(params);
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        x: Var,
        self_layout: &AttentionLayout,
        drop: &mut DropoutCtx<'_>,
    ) -> Result<Var> {
        let x = residual(g, pv, &self.cfg, &self.ln_attn, drop, x, |g, h| {
            self.self_attn.forward(g, pv, h, h, self_layout)
        })?;
        residual(g, pv, &self.cfg, &self.ln_ffn, drop, x, |g, h| {
            self.ffn.forward(g, pv, h)
        })
    }
}

/// Encoder output of a padded batch, `[batch·max_len × d_model]`.
pub struct Encoded {
    pub states: Var,
    pub lens: Vec<usize>,
    pub max_len: usize,
}

/// Source embedding plus positions followed by a stack of encoder layers.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: BlockConfig,
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new(prefix: &str, cfg: &BlockConfig, n_layers: usize) -> Self {
        Encoder {
            cfg: cfg.clone(),
            layers: (0..n_layers)
                .map(|i| EncoderLayer::new(&format!("{prefix}.{i}"), cfg))
                .collect(),
        }
    }

    /// Initializes the layers; the embedding table [`SRC_EMBED`] is owned
    /// by the model.
    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) {
        for l in &self.layers {
            l.init(params, rng);
        }
    }

    pub fn encode(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        src: &[Vec<usize>],
        drop: &mut DropoutCtx<'_>,
    ) -> Result<Encoded> {
        if src.is_empty() || src.iter().any(Vec::is_empty) {
            return Err(Error::contract("empty source sentence"));
        }
        let lens: Vec<usize> = src.iter().map(Vec::len).collect();
        let max_len = lens.iter().copied().max().unwrap_or(0);
        let ids = crate::data::pad_rows(src, max_len);
        let emb = g.gather_rows(pv.get(SRC_EMBED)?, &ids)?;
        let pos = g.constant(batch_positions(src.len(), max_len, self.cfg.d_model));
        let mut x = g.add(emb, pos)?;
        x = drop.apply(g, x, self.cfg.dropout)?;
        let layout = self_layout(&lens, max_len, self.cfg.n_heads, false);
        for l in &self.layers {
            x = l.forward(g, pv, x, &layout, drop)?;
        }
        Ok(Encoded {
            states: x,
            lens,
            max_len,
        })
    }
}

/// Self-attention, cross-attention to a memory, feed-forward. Whether the
/// self-attention is causal is decided by the layout passed in.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub cfg: BlockConfig,
    pub self_attn: MultiHeadAttention,
    pub ln_self: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub ffn: FeedForward,
    pub ln_ffn: LayerNorm,
}

impl DecoderLayer {
    pub fn new(prefix: &str, cfg: &BlockConfig) -> Self {
        DecoderLayer {
            cfg: cfg.clone(),
            self_attn: MultiHeadAttention::new(
                &format!("{prefix}.self_attn"),
                cfg.d_model,
                cfg.n_heads,
            ),
            ln_self: LayerNorm::new(&format!("{prefix}.ln_self"), cfg.d_model),
            cross_attn: MultiHeadAttention::new(
                &format!("{prefix}.cross_attn"),
                cfg.d_model,
                cfg.n_heads,
            ),
            ln_cross: LayerNorm::new(&format!("{prefix}.ln_cross"), cfg.d_model),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), cfg.d_model, cfg.d_ff),
            ln_ffn: LayerNorm::new(&format!("{prefix}.ln_ffn"), cfg.d_model),
        }
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) {
        self.self_attn.init(params, rng);
        self.ln_self.init(params);
        self.cross_attn.init(params, rng);
        self.ln_cross.init(params);
        self.ffn.init(params, rng);
        self.ln_ffn.init(params);
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        x: Var,
        memory: Var,
        self_layout: &AttentionLayout,
        cross_layout: &AttentionLayout,
        drop: &mut DropoutCtx<'_>,
    ) -> Result<Var> {
        let x = residual(g, pv, &self.cfg, &self.ln_self, drop, x, |g, h| {
            self.self_attn.forward(g, pv, h, h, self_layout)
        })?;
        let x = residual(g, pv, &self.cfg, &self.ln_cross, drop, x, |g, h| {
            self.cross_attn.forward(g, pv, h, memory, cross_layout)
        })?;
        residual(g, pv, &self.cfg, &self.ln_ffn, drop, x, |g, h| {
            self.ffn.forward(g, pv, h)
        })
    }
}

/// Fixed `length × d_model` table: `sin` on even columns, `cos` on odd.
pub fn sinusoidal_positions(length: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; length * d_model];
    for pos in 0..length {
        for i in (0..d_model).step_by(2) {
            let rate = 10000f64.powf(i as f64 / d_model as f64);
            let angle = pos as f64 / rate;
            data[pos * d_model + i] = angle.sin();
            if i + 1 < d_model {
                data[pos * d_model + i + 1] = angle.cos();
            }
        }
    }
    Tensor::new(vec![length.max(1), d_model], data).expect("positive dims")
}

/// Positional rows for a padded batch: row `b·len + j` holds position `j`.
pub fn batch_positions(batch: usize, len: usize, d_model: usize) -> Tensor {
    let table = sinusoidal_positions(len, d_model);
    let mut data = Vec::with_capacity(batch * len * d_model);
    for _ in 0..batch {
        data.extend_from_slice(table.data());
    }
    Tensor::new(vec![batch * len, d_model], data).expect("positive dims")
}

/// Layout for self-attention over one padded batch.
pub fn self_layout(lens: &[usize], max_len: usize, heads: usize, causal: bool) -> AttentionLayout {
    AttentionLayout {
        batch: lens.len(),
        q_len: max_len,
        k_len: max_len,
        heads,
        key_lens: lens.to_vec(),
        causal,
    }
}

/// Layout for queries of length `q_len` attending a memory with per-item
/// valid lengths `mem_lens`.
pub fn cross_layout(
    q_len: usize,
    mem_lens: &[usize],
    mem_max: usize,
    heads: usize,
) -> AttentionLayout {
    AttentionLayout {
        batch: mem_lens.len(),
        q_len,
        k_len: mem_max,
        heads,
        key_lens: mem_lens.to_vec(),
        causal: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, random_tensor};
    use rand::SeedableRng;

    fn small_cfg() -> BlockConfig {
        BlockConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            dropout: 0.0,
            pre_norm: false,
        }
    }

    #[test]
    fn positions_table() {
        let t = sinusoidal_positions(5, 6);
        assert_eq!(&t.data()[..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(t, sinusoidal_positions(5, 6));
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = BlockConfig {
            d_model: 10,
            n_heads: 4,
            ..BlockConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_position_identity_weights_return_v() {
        let mha = MultiHeadAttention::new("a", 4, 2);
        let mut params = ModelParams::new();
        for l in [&mha.q, &mha.k, &mha.v, &mha.o] {
            let mut eye = Tensor::zeros(&[4, 4]);
            for i in 0..4 {
                eye.data_mut()[i * 4 + i] = 1.0;
            }
            params.insert(&l.w, eye);
            params.insert(&l.b, Tensor::zeros(&[4]));
        }
        let mut g = Graph::new();
        let pv = params.bind(&mut g);
        let x = g.constant(Tensor::new(vec![1, 4], vec![0.5, -1.0, 2.0, 3.0]).unwrap());
        let out = mha
            .forward(&mut g, &pv, x, x, &self_layout(&[1], 1, 2, false))
            .unwrap();
        assert_eq!(g.value(out).data(), &[0.5, -1.0, 2.0, 3.0]);
    }

    fn decoder_with_params(seed: u64) -> (DecoderLayer, ModelParams) {
        let layer = DecoderLayer::new("dec", &small_cfg());
        let mut params = ModelParams::new();
        layer.init(&mut params, &mut ChaCha8Rng::seed_from_u64(seed));
        (layer, params)
    }

    fn run_decoder(
        layer: &DecoderLayer,
        params: &ModelParams,
        x: &Tensor,
        mem: &Tensor,
    ) -> Vec<f64> {
        let mut g = Graph::new();
        let pv = params.bind(&mut g);
        let xv = g.constant(x.clone());
        let mv = g.constant(mem.clone());
        let out = layer
            .forward(
                &mut g,
                &pv,
                xv,
                mv,
                &self_layout(&[3], 3, 2, true),
                &cross_layout(3, &[2], 2, 2),
                &mut DropoutCtx::eval(),
            )
            .unwrap();
        g.value(out).data().to_vec()
    }

    #[test]
    fn decoder_is_causal() {
        let (layer, params) = decoder_with_params(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&[3, 8], &mut rng);
        let mem = random_tensor(&[2, 8], &mut rng);
        let base = run_decoder(&layer, &params, &x, &mem);
        let mut x2 = x.clone();
        for c in 0..8 {
            x2.data_mut()[16 + c] = -x2.data()[16 + c] + 0.3;
        }
        let pert = run_decoder(&layer, &params, &x2, &mem);
        assert_eq!(&base[..16], &pert[..16]);
        assert_ne!(&base[16..], &pert[16..]);
        assert_eq!(base.len(), 24, "residual paths preserve shape");
    }

    #[test]
    fn zero_memory_with_zero_cross_projection_ignores_memory() {
        let (layer, mut params) = decoder_with_params(3);
        for name in [&layer.cross_attn.v.w, &layer.cross_attn.v.b] {
            let t = params.get_mut(name).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&[3, 8], &mut rng);
        let a = run_decoder(&layer, &params, &x, &Tensor::zeros(&[2, 8]));
        let b = run_decoder(&layer, &params, &x, &random_tensor(&[2, 8], &mut rng));
        assert_eq!(a, b);
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let (layer, params) = decoder_with_params(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let names: Vec<String> = params.names().map(String::from).collect();
        let mut inputs: Vec<Tensor> = names
            .iter()
            .map(|n| params.get(n).unwrap().clone())
            .collect();
        inputs.push(random_tensor(&[6, 8], &mut rng));
        inputs.push(random_tensor(&[4, 8], &mut rng));
        let weights = random_tensor(&[6, 8], &mut rng);
        let r = check_gradients(&inputs, 40, &mut rng, |g, vs| {
            let pv = ParamVars::from_pairs(names.iter().cloned().zip(vs.iter().copied()));
            let out = layer.forward(
                g,
                &pv,
                vs[names.len()],
                vs[names.len() + 1],
                &self_layout(&[3, 2], 3, 2, true),
                &cross_layout(3, &[2, 1], 2, 2),
                &mut DropoutCtx::eval(),
            )?;
            let w = g.constant(weights.clone());
            let y = g.mul(out, w)?;
            Ok(g.sum_all(y))
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }
}
