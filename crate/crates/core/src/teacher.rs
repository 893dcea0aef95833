//! Autoregressive encoder-decoder teacher and sequence-level distillation.

use std::collections::HashMap;

use rand::Rng;

use crate::data::{ParallelCorpus, SentencePair, Vocab, BLANK, BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::loss::smoothed_nll;
use crate::nn::{
    batch_positions, cross_layout, self_layout, BlockConfig, DecoderLayer, DropoutCtx, Encoder,
    Linear, SRC_EMBED, TGT_EMBED,
};
use crate::params::{embedding, ModelParams, ParamVars};
use crate::tensor::{Graph, Tensor, Var};

/// Hypotheses decoded per encoder batch.
const DECODE_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    pub block: BlockConfig,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub vocab_size: usize,
}

pub struct TeacherModel {
    pub cfg: TeacherConfig,
    enc: Encoder,
    dec: Vec<DecoderLayer>,
    out: Linear,
}

/// Longest output considered for a source of length `m`.
pub fn max_output_len(m: usize) -> usize {
    2 * m + 4
}

fn is_emittable(k: usize) -> bool {
    !matches!(k, PAD | BOS | UNK | BLANK)
}

impl TeacherModel {
    pub fn new(cfg: TeacherConfig) -> Result<Self> {
        cfg.block.validate()?;
        if cfg.n_enc_layers == 0 || cfg.n_dec_layers == 0 {
            return Err(Error::Config(
                "teacher needs at least one encoder and decoder layer".into(),
            ));
        }
        Ok(TeacherModel {
            enc: Encoder::new("enc", &cfg.block, cfg.n_enc_layers),
            dec: (0..cfg.n_dec_layers)
                .map(|i| DecoderLayer::new(&format!("dec.{i}"), &cfg.block))
                .collect(),
            out: Linear::new("out", cfg.block.d_model, cfg.vocab_size),
            cfg,
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
        p
    }

    /// Log-probabilities `[rows·len × V]` for equal-length decoder inputs
    /// `inputs` (each starting with `bos`) attending `memory`, where input
    /// row `r` uses memory item `mem_of[r]`.
    #[allow(clippy::too_many_arguments)]
    fn decode_states(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        memory: Var,
        mem_lens: &[usize],
        mem_max: usize,
        inputs: &[Vec<usize>],
        in_lens: &[usize],
        drop: &mut DropoutCtx<'_>,
    ) -> Result<Var> {
        let len = inputs.iter().map(Vec::len).max().unwrap_or(0);
        let ids = crate::data::pad_rows(inputs, len);
        let emb = g.gather_rows(pv.get(TGT_EMBED)?, &ids)?;
        let pos = g.constant(batch_positions(inputs.len(), len, self.cfg.block.d_model));
        let mut x = g.add(emb, pos)?;
        x = drop.apply(g, x, self.cfg.block.dropout)?;
        let sl = self_layout(in_lens, len, self.cfg.block.n_heads, true);
        let cl = cross_layout(len, mem_lens, mem_max, self.cfg.block.n_heads);
        for l in &self.dec {
            x = l.forward(g, pv, x, memory, &sl, &cl, drop)?;
        }
        let logits = self.out.forward(g, pv, x)?;
        Ok(g.log_softmax(logits))
    }

    /// Label-smoothed cross-entropy of `tgt + eos` given `bos + tgt`.
    pub fn loss(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        src: &[Vec<usize>],
        tgt: &[Vec<usize>],
        label_smoothing: f64,
        drop: &mut DropoutCtx<'_>,
    ) -> Result<Var> {
        let enc = self.enc.encode(g, pv, src, drop)?;
        let inputs: Vec<Vec<usize>> = tgt
            .iter()
            .map(|y| std::iter::once(BOS).chain(y.iter().copied()).collect())
            .collect();
        let lens: Vec<usize> = inputs.iter().map(Vec::len).collect();
        let len = lens.iter().copied().max().unwrap_or(0);
        let lp = self.decode_states(
            g,
            pv,
            enc.states,
            &enc.lens,
            enc.max_len,
            &inputs,
            &lens,
            drop,
        )?;
        let rows: Vec<Option<usize>> = tgt
            .iter()
            .flat_map(|y| {
                (0..len).map(move |j| match j.cmp(&y.len()) {
                    std::cmp::Ordering::Less => Some(y[j]),
                    std::cmp::Ordering::Equal => Some(EOS),
                    std::cmp::Ordering::Greater => None,
                })
            })
            .collect();
        smoothed_nll(g, lp, &rows, label_smoothing)
    }

    fn encode_constant(
        &self,
        params: &ModelParams,
        src: &[Vec<usize>],
    ) -> Result<(Tensor, Vec<usize>, usize)> {
        let mut g = Graph::no_grad();
        let pv = params.bind(&mut g);
        let enc = self.enc.encode(&mut g, &pv, src, &mut DropoutCtx::eval())?;
        Ok((g.value(enc.states).clone(), enc.lens, enc.max_len))
    }

    /// Beam search over one chunk of sources; `k = 1` is greedy search.
    /// Returns each source's best hypothesis (without `eos`) and its
    /// length-normalized log-probability.
    fn search_chunk(
        &self,
        params: &ModelParams,
        src: &[Vec<usize>],
        k: usize,
    ) -> Result<Vec<(Vec<usize>, f64)>> {
        let (states, mem_lens, mem_max) = self.encode_constant(params, src)?;
        let d = self.cfg.block.d_model;
        let v = self.cfg.vocab_size;
        let mut alive: Vec<Vec<(Vec<usize>, f64)>> = vec![vec![(Vec::new(), 0.0)]; src.len()];
        let mut finished: Vec<Vec<(Vec<usize>, f64)>> = vec![Vec::new(); src.len()];
        let mut t = 0;
        while alive.iter().any(|a| !a.is_empty()) {
            let mut owners = Vec::new();
            let mut inputs = Vec::new();
            for (s, hyps) in alive.iter().enumerate() {
                for (h, _) in hyps {
                    owners.push(s);
                    inputs.push(
                        std::iter::once(BOS)
                            .chain(h.iter().copied())
                            .collect::<Vec<_>>(),
                    );
                }
            }
            let mut mem = Vec::with_capacity(owners.len() * mem_max * d);
            for &s in &owners {
                mem.extend_from_slice(&states.data()[s * mem_max * d..(s + 1) * mem_max * d]);
            }
            let mut g = Graph::no_grad();
            let pv = params.bind(&mut g);
            let memory = g.constant(Tensor::new(vec![owners.len() * mem_max, d], mem)?);
            let m_lens: Vec<usize> = owners.iter().map(|&s| mem_lens[s]).collect();
            let in_lens = vec![t + 1; owners.len()];
            let lp = self.decode_states(
                &mut g,
                &pv,
                memory,
                &m_lens,
                mem_max,
                &inputs,
                &in_lens,
                &mut DropoutCtx::eval(),
            )?;
            let lp = g.value(lp);

            let mut row = 0;
            for s in 0..src.len() {
                let hyps = std::mem::take(&mut alive[s]);
                if hyps.is_empty() {
                    continue;
                }
                let mut cands: Vec<(Vec<usize>, f64, bool)> = Vec::with_capacity(hyps.len() * v);
                for (h, score) in &hyps {
                    let dist = lp.row(row * (t + 1) + t);
                    row += 1;
                    for tok in (0..v).filter(|&tok| is_emittable(tok)) {
                        let mut y = h.clone();
                        let done = tok == EOS;
                        if !done {
                            y.push(tok);
                        }
                        cands.push((y, score + dist[tok], done));
                    }
                }
                cands.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                let limit = max_output_len(src[s].len());
                for (y, score, done) in cands.into_iter().take(k) {
                    if done {
                        let norm = score / (y.len() + 1) as f64;
                        finished[s].push((y, norm));
                    } else if y.len() >= limit {
                        let norm = score / y.len() as f64;
                        finished[s].push((y, norm));
                    } else {
                        alive[s].push((y, score));
                    }
                }
                if finished[s].len() >= k {
                    alive[s].clear();
                }
            }
            t += 1;
        }
        Ok(finished
            .into_iter()
            .map(|mut f| {
                f.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                f.swap_remove(0)
            })
            .collect())
    }

    /// Best hypothesis per source with its length-normalized score. For
    /// `beam > 1` the greedy hypothesis competes too, so beam search never
    /// scores below greedy search.
    pub fn decode_scored(
        &self,
        params: &ModelParams,
        src: &[Vec<usize>],
        beam: usize,
    ) -> Result<Vec<(Vec<usize>, f64)>> {
        let mut out = Vec::with_capacity(src.len());
        for chunk in src.chunks(DECODE_CHUNK) {
            let greedy = self.search_chunk(params, chunk, 1)?;
            if beam <= 1 {
                out.extend(greedy);
                continue;
            }
            let wide = self.search_chunk(params, chunk, beam)?;
            out.extend(
                wide.into_iter()
                    .zip(greedy)
                    .map(|(w, g)| if g.1 > w.1 { g } else { w }),
            );
        }
        Ok(out)
    }

    pub fn decode(
        &self,
        params: &ModelParams,
        src: &[Vec<usize>],
        beam: usize,
    ) -> Result<Vec<Vec<usize>>> {
        Ok(self
            .decode_scored(params, src, beam)?
            .into_iter()
            .map(|(y, _)| y)
            .collect())
    }
}

/// Replaces every target with the teacher's output for its source. Each
/// distinct source is decoded once.
pub fn distill(
    teacher: &TeacherModel,
    params: &ModelParams,
    vocab: &Vocab,
    corpus: &ParallelCorpus,
    beam: usize,
) -> Result<ParallelCorpus> {
    let mut unique: Vec<Vec<usize>> = corpus.pairs.iter().map(|p| vocab.encode(&p.src)).collect();
    unique.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    unique.dedup();
    let hyps = teacher.decode(params, &unique, beam)?;
    let table: HashMap<Vec<usize>, Vec<usize>> = unique.into_iter().zip(hyps).collect();
    let pairs = corpus
        .pairs
        .iter()
        .map(|p| SentencePair {
            src: p.src.clone(),
            tgt: vocab.decode(&table[&vocab.encode(&p.src)]),
        })
        .collect();
    Ok(ParallelCorpus { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (TeacherModel, ModelParams) {
        let m = TeacherModel::new(TeacherConfig {
            block: BlockConfig {
                d_model: 8,
                n_heads: 2,
                d_ff: 12,
                dropout: 0.0,
                pre_norm: false,
            },
            n_enc_layers: 1,
            n_dec_layers: 1,
            vocab_size: 9,
        })
        .unwrap();
        let p = m.init(&mut ChaCha8Rng::seed_from_u64(5));
        (m, p)
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let (m, p) = tiny();
        let names: Vec<String> = p.names().map(String::from).collect();
        let inputs: Vec<_> = names.iter().map(|n| p.get(n).unwrap().clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = check_gradients(&inputs, 30, &mut rng, |g, vs| {
            let pv = ParamVars::from_pairs(names.iter().cloned().zip(vs.iter().copied()));
            m.loss(
                g,
                &pv,
                &[vec![5, 6], vec![7]],
                &[vec![6, 7, 8], vec![5]],
                0.1,
                &mut DropoutCtx::eval(),
            )
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn greedy_is_deterministic_and_equals_beam_one() {
        let (m, p) = tiny();
        let src = vec![vec![5, 6, 7], vec![8], vec![6, 6, 5, 7]];
        let a = m.decode(&p, &src, 1).unwrap();
        assert_eq!(a, m.decode(&p, &src, 1).unwrap());
        assert!(a
            .iter()
            .zip(&src)
            .all(|(y, x)| y.len() <= max_output_len(x.len())));
        assert!(a.iter().flatten().all(|&t| is_emittable(t) && t != EOS));
    }

    #[test]
    fn beam_never_scores_below_greedy() {
        let (m, p) = tiny();
        let src: Vec<Vec<usize>> = (0..6)
            .map(|i| (0..2 + i % 3).map(|j| 5 + (i * j) % 4).collect())
            .collect();
        let greedy = m.decode_scored(&p, &src, 1).unwrap();
        let beam = m.decode_scored(&p, &src, 4).unwrap();
        for (g, b) in greedy.iter().zip(&beam) {
            assert!(b.1 >= g.1);
        }
    }

    #[test]
    fn distill_keeps_sources_and_line_count() {
        let (m, p) = tiny();
        let vocab = Vocab::from_text_tokens(&["a", "b", "c", "d"]).unwrap();
        let corpus = ParallelCorpus {
            pairs: vec![
                SentencePair {
                    src: vec!["a".into(), "b".into()],
                    tgt: vec!["c".into()],
                },
                SentencePair {
                    src: vec!["a".into(), "b".into()],
                    tgt: vec!["d".into()],
                },
                SentencePair {
                    src: vec!["c".into()],
                    tgt: vec!["a".into()],
                },
            ],
        };
        let d = distill(&m, &p, &vocab, &corpus, 2).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.sources(), corpus.sources());
        assert_eq!(d.pairs[0].tgt, d.pairs[1].tgt);
        assert_eq!(d, distill(&m, &p, &vocab, &corpus, 2).unwrap());
    }
}
