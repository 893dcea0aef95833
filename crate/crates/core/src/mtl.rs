//! Weak autoregressive heads on the NAR decoder layers and the combined
//! training objective.
//!
//! Head `i` is a causal decoder of `ar_head_depth` layers (one by default)
//! whose only memory is the output of NAR decoder layer `i`. Heads are
//! teacher-forced on the reference, contribute to the loss only, and are
//! removed by [`strip_heads`] before inference.

use rand::Rng;

use crate::data::BOS;
use crate::error::{Error, Result};
use crate::loss::smoothed_nll;
use crate::nar::{DecoderTrace, TGT_EMBED};
use crate::nn::{
    batch_positions, cross_layout, self_layout, BlockConfig, DecoderLayer, DropoutCtx, Linear,
};
use crate::params::{ModelParams, ParamVars};
use crate::tensor::{Graph, Var};

/// Every head parameter name starts with this.
pub const HEAD_PREFIX: &str = "ar.";

#[derive(Clone, Debug, PartialEq)]
pub struct MtlConfig {
    pub enabled: bool,
    pub lambda: f64,
    pub share_params: bool,
    pub layer_dropout: bool,
    pub ar_head_depth: usize,
    /// Detach the NAR states before the heads see them, so head losses
    /// train only the heads.
    pub stop_gradient: bool,
}

impl Default for MtlConfig {
    fn default() -> Self {
        MtlConfig {
            enabled: false,
            lambda: 0.5,
            share_params: false,
            layer_dropout: false,
            ar_head_depth: 1,
            stop_gradient: false,
        }
    }
}

impl MtlConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if self.ar_head_depth == 0 {
            return Err(Error::Config("mtl.ar_head_depth must be at least 1".into()));
        }
        Ok(())
    }

    /// Whether head losses reach the objective at all.
    pub fn active(&self) -> bool {
        self.enabled && 1.0 - self.lambda != 0.0
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("mtl.lambda {lambda} not in [0,1]")));
    }
    Ok(())
}

pub struct WeakArHead {
    pub prefix: String,
    layers: Vec<DecoderLayer>,
    out: Linear,
    heads: usize,
    d_model: usize,
}

impl WeakArHead {
    pub fn new(prefix: &str, block: &BlockConfig, depth: usize, vocab: usize) -> Self {
        WeakArHead {
            prefix: prefix.to_string(),
            layers: (0..depth)
                .map(|j| DecoderLayer::new(&format!("{prefix}.layer.{j}"), block))
                .collect(),
            out: Linear::new(&format!("{prefix}.out"), block.d_model, vocab),
            heads: block.n_heads,
            d_model: block.d_model,
        }
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) {
        for l in &self.layers {
            l.init(params, rng);
        }
        self.out.init(params, rng);
    }

    /// Teacher-forced log-probabilities `[batch·n_max × V]`: position `t`
    /// sees `bos, y_1 … y_{t}` and the memory rows `memory[b, ..mem_lens[b]]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        memory: Var,
        mem_lens: &[usize],
        mem_max: usize,
        targets: &[Vec<usize>],
        drop: &mut DropoutCtx<'_>,
    ) -> Result<Var> {
        if targets.is_empty() || targets.iter().any(Vec::is_empty) {
            return Err(Error::contract("AR head needs a non-empty target"));
        }
        let lens: Vec<usize> = targets.iter().map(Vec::len).collect();
        let n_max = lens.iter().copied().max().unwrap_or(0);
        let mut ids = Vec::with_capacity(targets.len() * n_max);
        for y in targets {
            ids.push(BOS);
            ids.extend_from_slice(&y[..y.len() - 1]);
            ids.extend(std::iter::repeat_n(crate::data::PAD, n_max - y.len()));
        }
        let emb = g.gather_rows(pv.get(TGT_EMBED)?, &ids)?;
        let pos = g.constant(batch_positions(targets.len(), n_max, self.d_model));
        let mut x = g.add(emb, pos)?;
        x = drop.apply(g, x, self.layers[0].cfg.dropout)?;
        let sl = self_layout(&lens, n_max, self.heads, true);
        let cl = cross_layout(n_max, mem_lens, mem_max, self.heads);
        for l in &self.layers {
            x = l.forward(g, pv, x, memory, &sl, &cl, drop)?;
        }
        let logits = self.out.forward(g, pv, x)?;
        Ok(g.log_softmax(logits))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        memory: Var,
        mem_lens: &[usize],
        mem_max: usize,
        targets: &[Vec<usize>],
        label_smoothing: f64,
        drop: &mut DropoutCtx<'_>,
    ) -> Result<Var> {
        let lp = self.forward(g, pv, memory, mem_lens, mem_max, targets, drop)?;
        let n_max = targets.iter().map(Vec::len).max().unwrap_or(0);
        let rows: Vec<Option<usize>> = targets
            .iter()
            .flat_map(|y| (0..n_max).map(move |j| y.get(j).copied()))
            .collect();
        smoothed_nll(g, lp, &rows, label_smoothing)
    }
}

/// One head per NAR decoder layer, or a single head shared by all of them.
pub struct ArHeads {
    pub cfg: MtlConfig,
    heads: Vec<WeakArHead>,
    n_layers: usize,
}

impl ArHeads {
    pub fn new(cfg: MtlConfig, block: &BlockConfig, n_layers: usize, vocab: usize) -> Result<Self> {
        cfg.validate()?;
        let heads = if cfg.share_params {
            vec![WeakArHead::new(
                "ar.shared",
                block,
                cfg.ar_head_depth,
                vocab,
            )]
        } else {
            (0..n_layers)
                .map(|i| WeakArHead::new(&format!("ar.{i}"), block, cfg.ar_head_depth, vocab))
                .collect()
        };
        Ok(ArHeads {
            cfg,
            heads,
            n_layers,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn head(&self, layer: usize) -> &WeakArHead {
        if self.cfg.share_params {
            &self.heads[0]
        } else {
            &self.heads[layer]
        }
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) {
        for h in &self.heads {
            h.init(params, rng);
        }
    }

    /// Head losses for the `selected` NAR layers of `trace`.
    #[allow(clippy::too_many_arguments)]
    pub fn losses(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        trace: &DecoderTrace,
        targets: &[Vec<usize>],
        selected: &[usize],
        label_smoothing: f64,
        drop: &mut DropoutCtx<'_>,
    ) -> Result<Vec<(usize, Var)>> {
        selected
            .iter()
            .map(|&i| {
                let mut memory = trace.hidden[i];
                if self.cfg.stop_gradient {
                    memory = g.detach(memory);
                }
                let l = self.head(i).loss(
                    g,
                    pv,
                    memory,
                    &trace.lens,
                    trace.max_len,
                    targets,
                    label_smoothing,
                    drop,
                )?;
                Ok((i, l))
            })
            .collect()
    }
}

/// Layers whose heads receive loss this step: all of them, or with layer
/// dropout `ceil(n/2)` drawn uniformly without replacement (ascending).
pub fn select_heads(n: usize, layer_dropout: bool, rng: &mut impl Rng) -> Vec<usize> {
    if !layer_dropout {
        return (0..n).collect();
    }
    let mut s = rand::seq::index::sample(rng, n, n.div_ceil(2)).into_vec();
    s.sort_unstable();
    s
}

/// `λ·nar + (1-λ)·(n/|S|)·Σ_{i∈S} ar_i`. With `1-λ = 0` the head terms are
/// left off the tape entirely.
pub fn mtl_loss(
    g: &mut Graph,
    nar: Var,
    ar: &[(usize, Var)],
    lambda: f64,
    n: usize,
) -> Result<Var> {
    check_lambda(lambda)?;
    let w = 1.0 - lambda;
    if w == 0.0 {
        return Ok(g.scale(nar, lambda));
    }
    let mut total = g.scale(nar, lambda);
    if ar.is_empty() {
        return Ok(total);
    }
    let k = w * n as f64 / ar.len() as f64;
    for &(_, l) in ar {
        let s = g.scale(l, k);
        total = g.add(total, s)?;
    }
    Ok(total)
}

/// Scalar form of [`mtl_loss`].
pub fn mtl_loss_value(nar: f64, ar: &[(usize, f64)], lambda: f64, n: usize) -> Result<f64> {
    check_lambda(lambda)?;
    let w = 1.0 - lambda;
    if w == 0.0 || ar.is_empty() {
        return Ok(lambda * nar);
    }
    let k = w * n as f64 / ar.len() as f64;
    Ok(ar.iter().fold(lambda * nar, |acc, &(_, l)| acc + k * l))
}

/// The NAR-only parameter set.
pub fn strip_heads(params: &ModelParams) -> ModelParams {
    params.without_prefix(HEAD_PREFIX)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub nar: usize,
    pub heads: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.nar + self.heads
    }
}

pub fn count_params(params: &ModelParams) -> ParamCount {
    let heads = params.numel_with_prefix(HEAD_PREFIX);
    ParamCount {
        nar: params.numel() - heads,
        heads,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nar::{DecodeMode, NarConfig, NarModel, Variant};
    use crate::tensor::gradcheck::{check_gradients, random_tensor};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block() -> BlockConfig {
        BlockConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            dropout: 0.0,
            pre_norm: false,
        }
    }

    fn head_params(seed: u64) -> (WeakArHead, ModelParams) {
        let h = WeakArHead::new("ar.0", &block(), 1, 9);
        let mut p = ModelParams::new();
        p.insert(
            TGT_EMBED,
            random_tensor(&[9, 8], &mut ChaCha8Rng::seed_from_u64(seed + 100)),
        );
        h.init(&mut p, &mut ChaCha8Rng::seed_from_u64(seed));
        (h, p)
    }

    fn head_log_probs(
        h: &WeakArHead,
        p: &ModelParams,
        memory: &Tensor,
        targets: &[Vec<usize>],
    ) -> Vec<f64> {
        let mut g = Graph::no_grad();
        let pv = p.bind(&mut g);
        let m = g.constant(memory.clone());
        let rows = memory.dims2().0;
        let lp = h
            .forward(
                &mut g,
                &pv,
                m,
                &[rows],
                rows,
                targets,
                &mut DropoutCtx::eval(),
            )
            .unwrap();
        g.value(lp).data().to_vec()
    }

    #[test]
    fn head_is_causal() {
        let (h, p) = head_params(1);
        let mem = random_tensor(&[5, 8], &mut ChaCha8Rng::seed_from_u64(2));
        let a = head_log_probs(&h, &p, &mem, &[vec![5, 6, 7, 8]]);
        let b = head_log_probs(&h, &p, &mem, &[vec![5, 6, 8, 5]]);
        // targets differ from index 2 on, which is fed at position 3
        assert_eq!(&a[..3 * 9], &b[..3 * 9]);
        assert_ne!(&a[3 * 9..], &b[3 * 9..]);
    }

    #[test]
    fn zeroed_cross_value_projection_cuts_the_memory() {
        let (h, mut p) = head_params(3);
        for n in ["ar.0.layer.0.cross_attn.v.w", "ar.0.layer.0.cross_attn.v.b"] {
            p.get_mut(n)
                .unwrap()
                .data_mut()
                .iter_mut()
                .for_each(|x| *x = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = head_log_probs(&h, &p, &random_tensor(&[5, 8], &mut rng), &[vec![5, 6, 7]]);
        let b = head_log_probs(&h, &p, &random_tensor(&[5, 8], &mut rng), &[vec![5, 6, 7]]);
        assert_eq!(a, b);
        let (h, p) = head_params(3);
        let c = head_log_probs(&h, &p, &random_tensor(&[5, 8], &mut rng), &[vec![5, 6, 7]]);
        let d = head_log_probs(&h, &p, &random_tensor(&[5, 8], &mut rng), &[vec![5, 6, 7]]);
        assert_ne!(c, d, "with the projection intact the memory matters");
    }

    #[test]
    fn empty_target_is_contract_error() {
        let (h, p) = head_params(1);
        let mut g = Graph::no_grad();
        let pv = p.bind(&mut g);
        let m = g.constant(Tensor::zeros(&[2, 8]));
        let r = h.forward(&mut g, &pv, m, &[2], 2, &[vec![]], &mut DropoutCtx::eval());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn head_loss_gradient_reaches_nar_states() {
        let (h, p) = head_params(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // two items, memory padded to 4 rows each
        let mem = random_tensor(&[8, 8], &mut rng);
        let r = check_gradients(&[mem], 24, &mut rng, |g, vs| {
            let pv = p.bind(g);
            h.loss(
                g,
                &pv,
                vs[0],
                &[4, 3],
                4,
                &[vec![5, 6, 7], vec![8, 5]],
                0.1,
                &mut DropoutCtx::eval(),
            )
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
        assert!(r.max_abs_grad > 1e-6);
    }

    #[test]
    fn head_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_heads(6, true, &mut rng).len(), 3);
        assert_eq!(select_heads(1, true, &mut rng), vec![0]);
        assert_eq!(select_heads(5, false, &mut rng), vec![0, 1, 2, 3, 4]);
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| select_heads(6, true, &mut r))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert!(draw(9).iter().all(|s| s.windows(2).all(|w| w[0] < w[1])));
    }

    #[test]
    fn loss_combination_examples() {
        assert_eq!(
            mtl_loss_value(2.0, &[(0, 1.0), (1, 3.0)], 0.5, 2).unwrap(),
            3.0
        );
        assert_eq!(
            mtl_loss_value(2.0, &[(0, 1.0), (1, 3.0)], 1.0, 2).unwrap(),
            2.0
        );
        let rescaled = mtl_loss_value(1.5, &[(0, 1.0), (2, 2.0)], 0.5, 4).unwrap();
        assert_eq!(rescaled, 0.5 * 1.5 + 0.5 * 2.0 * 3.0);
        assert!(matches!(
            mtl_loss_value(1.0, &[], 1.5, 2),
            Err(Error::Config(_))
        ));
        let mut g = Graph::new();
        let nar = g.param(Tensor::scalar(2.0));
        let a = g.param(Tensor::scalar(1.0));
        let b = g.param(Tensor::scalar(3.0));
        let l = mtl_loss(&mut g, nar, &[(0, a), (1, b)], 0.5, 2).unwrap();
        assert_eq!(g.value(l).item(), 3.0);
    }

    #[test]
    fn unit_weight_leaves_heads_without_gradient() {
        let mut g = Graph::new();
        let nar = g.param(Tensor::scalar(2.0));
        let a = g.param(Tensor::scalar(1.0));
        let l = mtl_loss(&mut g, nar, &[(0, a)], 1.0, 1).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(g.value(l).item(), 2.0);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(nar).unwrap().item(), 1.0);
    }

    #[test]
    fn layer_dropout_is_unbiased_over_all_subsets() {
        for n in 1..=4 {
            let losses: Vec<f64> = (0..n).map(|i| 0.7 + 1.3 * i as f64).collect();
            let full: Vec<(usize, f64)> = losses.iter().copied().enumerate().collect();
            let expect = mtl_loss_value(2.5, &full, 0.5, n).unwrap();
            let k = n.div_ceil(2);
            let subsets: Vec<Vec<usize>> = (0u32..1 << n)
                .filter(|m| m.count_ones() as usize == k)
                .map(|m| (0..n).filter(|i| m >> i & 1 == 1).collect())
                .collect();
            let mean = subsets
                .iter()
                .map(|s| {
                    let sel: Vec<(usize, f64)> = s.iter().map(|&i| (i, losses[i])).collect();
                    mtl_loss_value(2.5, &sel, 0.5, n).unwrap()
                })
                .sum::<f64>()
                / subsets.len() as f64;
            assert!((mean - expect).abs() <= 1e-12, "n={n}");
        }
    }

    fn nar_with_heads(share: bool, n: usize) -> (NarModel, ArHeads, ModelParams) {
        let cfg = NarConfig {
            block: block(),
            n_enc_layers: 1,
            n_dec_layers: n,
            variant: Variant::Ctc,
            upsample_factor: 2,
            max_length_offset: 2,
            vocab_size: 9,
        };
        let m = NarModel::new(cfg).unwrap();
        let mut p = m.init(&mut ChaCha8Rng::seed_from_u64(0));
        let mc = MtlConfig {
            enabled: true,
            share_params: share,
            ..MtlConfig::default()
        };
        let heads = ArHeads::new(mc, &block(), n, 9).unwrap();
        heads.init(&mut p, &mut ChaCha8Rng::seed_from_u64(1));
        (m, heads, p)
    }

    #[test]
    fn sharing_makes_head_count_independent_of_depth() {
        let one = count_params(&nar_with_heads(true, 1).2);
        let six = count_params(&nar_with_heads(true, 6).2);
        assert_eq!(one.heads, six.heads);
        let unshared = count_params(&nar_with_heads(false, 6).2);
        assert_eq!(unshared.heads, 6 * one.heads);
        assert_eq!(unshared.nar, six.nar);
    }

    #[test]
    fn stripping() {
        let (_, _, p) = nar_with_heads(false, 3);
        let s = strip_heads(&p);
        assert_eq!(s.numel(), count_params(&p).nar);
        assert_eq!(strip_heads(&s), s);
        assert!(s.names().all(|n| !n.starts_with(HEAD_PREFIX)));
    }

    #[test]
    fn decoding_ignores_head_parameters() {
        let (m, _, p) = nar_with_heads(false, 2);
        let mut randomized = p.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for (n, t) in randomized.iter_mut() {
            if n.starts_with(HEAD_PREFIX) {
                t.data_mut()
                    .iter_mut()
                    .for_each(|x| *x = rng.gen_range(-5.0..5.0));
            }
        }
        let src: Vec<Vec<usize>> = (0..10)
            .map(|i| (0..1 + i % 4).map(|j| 5 + (i + j) % 4).collect())
            .collect();
        let a = m.decode(&p, &src, DecodeMode::Greedy).unwrap();
        assert_eq!(
            a,
            m.decode(&strip_heads(&p), &src, DecodeMode::Greedy)
                .unwrap()
        );
        assert_eq!(a, m.decode(&randomized, &src, DecodeMode::Greedy).unwrap());
    }

    #[test]
    fn shared_head_gradient_is_the_sum_over_layers() {
        let (m, heads, p) = nar_with_heads(true, 2);
        let src = vec![vec![5, 6, 7]];
        let tgt = vec![vec![6, 7, 8]];
        let grad_for = |selected: &[usize]| {
            let mut g = Graph::new();
            let pv = p.bind(&mut g);
            let mut d = DropoutCtx::eval();
            let enc = m.encode(&mut g, &pv, &src, &mut d).unwrap();
            let lens = m.ctc_lengths(&enc.lens);
            let trace = m.forward(&mut g, &pv, &enc, &lens, &[], &mut d).unwrap();
            let ls = heads
                .losses(&mut g, &pv, &trace, &tgt, selected, 0.1, &mut d)
                .unwrap();
            let mut total = ls[0].1;
            for &(_, l) in &ls[1..] {
                total = g.add(total, l).unwrap();
            }
            let grads = g.backward(total).unwrap();
            grads
                .get(pv.get("ar.shared.out.w").unwrap())
                .unwrap()
                .data()
                .to_vec()
        };
        let both = grad_for(&[0, 1]);
        let (a, b) = (grad_for(&[0]), grad_for(&[1]));
        for i in 0..both.len() {
            assert!((both[i] - a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn stop_gradient_keeps_head_loss_out_of_the_nar_stack() {
        let (m, mut heads, p) = nar_with_heads(false, 2);
        heads.cfg.stop_gradient = true;
        let mut g = Graph::new();
        let pv = p.bind(&mut g);
        let mut d = DropoutCtx::eval();
        let enc = m.encode(&mut g, &pv, &[vec![5, 6]], &mut d).unwrap();
        let lens = m.ctc_lengths(&enc.lens);
        let trace = m.forward(&mut g, &pv, &enc, &lens, &[], &mut d).unwrap();
        let ls = heads
            .losses(&mut g, &pv, &trace, &[vec![7, 8]], &[0, 1], 0.1, &mut d)
            .unwrap();
        let total = g.add(ls[0].1, ls[1].1).unwrap();
        let grads = g.backward(total).unwrap();
        assert!(grads.get(pv.get("dec.0.ffn.up.w").unwrap()).is_none());
        assert!(grads.get(pv.get("ar.1.out.w").unwrap()).is_some());
    }
}
