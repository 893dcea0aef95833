//! Training loop, evaluation hooks and checkpoint bookkeeping.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{average_checkpoints, Checkpoint};
use crate::config::{Config, ModelConfig};
use crate::data::{ctc_min_frames, Batch, Batcher, EncodedPair, Vocab};
use crate::error::{Error, Result};
use crate::glancing::{glance_overrides, GlanceSchedule};
use crate::metrics::{bleu, repetition_rate};
use crate::mtl::{mtl_loss, select_heads, strip_heads, ArHeads, MtlConfig};
use crate::nar::{DecodeMode, NarModel, Variant};
use crate::nn::DropoutCtx;
use crate::optim::{Adam, StepOutcome};
use crate::params::{ModelParams, ParamVars};
use crate::teacher::{TeacherConfig, TeacherModel};
use crate::tensor::{Graph, Var};

/// Independent random streams, all derived from the run seed. Keeping them
/// apart means enabling one feature never shifts another's draws.
pub struct Streams {
    pub init_model: ChaCha8Rng,
    pub init_heads: ChaCha8Rng,
    pub dropout_model: ChaCha8Rng,
    pub dropout_heads: ChaCha8Rng,
    pub head_select: ChaCha8Rng,
    pub glancing: ChaCha8Rng,
    batching: Option<ChaCha8Rng>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Streams {
            init_model: stream(seed, 1),
            init_heads: stream(seed, 2),
            dropout_model: stream(seed, 3),
            dropout_heads: stream(seed, 4),
            head_select: stream(seed, 5),
            glancing: stream(seed, 6),
            batching: Some(stream(seed, 7)),
        }
    }

    fn take_batching(&mut self) -> ChaCha8Rng {
        self.batching.take().expect("batching stream taken once")
    }

    fn positions(&self, batcher: &Batcher) -> Vec<(String, u128)> {
        [
            ("init_model", &self.init_model),
            ("init_heads", &self.init_heads),
            ("dropout_model", &self.dropout_model),
            ("dropout_heads", &self.dropout_heads),
            ("head_select", &self.head_select),
            ("glancing", &self.glancing),
            ("batching", batcher.rng()),
        ]
        .into_iter()
        .map(|(n, r)| (n.to_string(), r.get_word_pos()))
        .collect()
    }
}

pub struct StepLoss {
    pub total: Var,
    /// Named loss components for logging.
    pub parts: Vec<(&'static str, f64)>,
}

/// A model the generic loop can optimize and evaluate.
pub trait Trainable {
    fn init_params(&self, streams: &mut Streams) -> ModelParams;

    /// Pairs the objective is defined for; others are dropped up front.
    fn usable(&self, pair: &EncodedPair) -> bool {
        !pair.src.is_empty() && !pair.tgt.is_empty()
    }

    /// Training loss for one batch. `streams` is `None` for a
    /// deterministic evaluation of the loss (no dropout, glancing or head
    /// sampling).
    fn loss(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        batch: &Batch,
        step: usize,
        streams: Option<&mut Streams>,
    ) -> Result<StepLoss>;

    fn decode(&self, params: &ModelParams, src: &[Vec<usize>]) -> Result<Vec<Vec<usize>>>;
}

/// NAR model with optional AR heads and glancing.
pub struct NarSystem {
    pub model: NarModel,
    /// Present only when head losses reach the objective.
    pub heads: Option<ArHeads>,
    pub mtl: MtlConfig,
    pub glancing: Option<GlanceSchedule>,
    pub label_smoothing: f64,
}

impl NarSystem {
    pub fn new(cfg: &Config, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        let model = NarModel::new(cfg.model.nar(vocab_size))?;
        let heads = if cfg.mtl.active() {
            Some(ArHeads::new(
                cfg.mtl.clone(),
                &cfg.model.block,
                cfg.model.n_dec_layers,
                vocab_size,
            )?)
        } else {
            None
        };
        let glancing = cfg
            .glancing
            .enabled
            .then(|| cfg.glancing.schedule(cfg.train.steps));
        Ok(NarSystem {
            model,
            heads,
            mtl: cfg.mtl.clone(),
            glancing,
            label_smoothing: cfg.train.label_smoothing,
        })
    }
}

impl Trainable for NarSystem {
    fn init_params(&self, streams: &mut Streams) -> ModelParams {
        let mut p = self.model.init(&mut streams.init_model);
        if let Some(h) = &self.heads {
            h.init(&mut p, &mut streams.init_heads);
        }
        p
    }

    fn usable(&self, pair: &EncodedPair) -> bool {
        if pair.src.is_empty() || pair.tgt.is_empty() {
            return false;
        }
        match self.model.cfg.variant {
            Variant::Vanilla => true,
            Variant::Ctc => {
                ctc_min_frames(&pair.tgt) <= self.model.cfg.upsample_factor * pair.src.len()
            }
        }
    }

    fn loss(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        batch: &Batch,
        step: usize,
        mut streams: Option<&mut Streams>,
    ) -> Result<StepLoss> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let m = &self.model;
        let targets = &batch.tgt;
        let dec_lens = m.train_lengths(&batch.src_lens(), &batch.tgt_lens());
        let mut parts = Vec::new();

        let (enc, overrides) = {
            let mut drop = match streams.as_deref_mut() {
                Some(s) => DropoutCtx::train(&mut s.dropout_model),
                None => DropoutCtx::eval(),
            };
            let enc = m.encode(g, pv, &batch.src, &mut drop)?;
            let ratio = match (&self.glancing, streams.is_some()) {
                (Some(s), true) => s.ratio(step),
                _ => 0.0,
            };
            let mut overrides = Vec::new();
            if ratio > 0.0 {
                // first pass: no dropout, not part of the objective
                let first = m.forward(g, pv, &enc, &dec_lens, &[], &mut DropoutCtx::eval())?;
                let rng = &mut streams.as_deref_mut().expect("training").glancing;
                overrides = glance_overrides(m, g, &first, targets, ratio, rng);
                parts.push(("glance_ratio", ratio));
                parts.push(("glanced", overrides.len() as f64));
            }
            (enc, overrides)
        };

        let trace = {
            let mut drop = match streams.as_deref_mut() {
                Some(s) => DropoutCtx::train(&mut s.dropout_model),
                None => DropoutCtx::eval(),
            };
            m.forward(g, pv, &enc, &dec_lens, &overrides, &mut drop)?
        };
        let nar = match m.cfg.variant {
            Variant::Vanilla => {
                let (l, tok, len) =
                    m.vanilla_loss(g, pv, &enc, &trace, targets, self.label_smoothing)?;
                parts.push(("token", tok));
                parts.push(("length", len));
                l
            }
            Variant::Ctc => {
                let l = m.ctc_loss(g, &trace, targets)?;
                parts.push(("ctc", g.value(l).item()));
                l
            }
        };
        parts.push(("nar", g.value(nar).item()));

        let total = match &self.heads {
            None => nar,
            Some(heads) => {
                let n = heads.n_layers();
                let (selected, mut drop) = match streams {
                    Some(s) => (
                        select_heads(n, self.mtl.layer_dropout, &mut s.head_select),
                        DropoutCtx::train(&mut s.dropout_heads),
                    ),
                    None => ((0..n).collect(), DropoutCtx::eval()),
                };
                let ar = heads.losses(
                    g,
                    pv,
                    &trace,
                    targets,
                    &selected,
                    self.label_smoothing,
                    &mut drop,
                )?;
                let mean = ar.iter().map(|&(_, l)| g.value(l).item()).sum::<f64>()
                    / ar.len().max(1) as f64;
                parts.push(("ar_mean", mean));
                mtl_loss(g, nar, &ar, self.mtl.lambda, n)?
            }
        };
        parts.push(("total", g.value(total).item()));
        Ok(StepLoss { total, parts })
    }

    fn decode(&self, params: &ModelParams, src: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
        self.model.decode(params, src, DecodeMode::Greedy)
    }
}

/// The AR teacher under the same loop.
pub struct TeacherSystem {
    pub model: TeacherModel,
    pub label_smoothing: f64,
}

pub fn teacher_config(m: &ModelConfig, vocab_size: usize) -> TeacherConfig {
    TeacherConfig {
        block: m.block.clone(),
        n_enc_layers: m.n_enc_layers,
        n_dec_layers: m.n_dec_layers,
        vocab_size,
    }
}

impl TeacherSystem {
    pub fn new(cfg: &Config, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(TeacherSystem {
            model: TeacherModel::new(teacher_config(&cfg.model, vocab_size))?,
            label_smoothing: cfg.train.label_smoothing,
        })
    }
}

impl Trainable for TeacherSystem {
    fn init_params(&self, streams: &mut Streams) -> ModelParams {
        self.model.init(&mut streams.init_model)
    }

    fn loss(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        batch: &Batch,
        _step: usize,
        streams: Option<&mut Streams>,
    ) -> Result<StepLoss> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let mut drop = match streams {
            Some(s) => DropoutCtx::train(&mut s.dropout_model),
            None => DropoutCtx::eval(),
        };
        let total = self.model.loss(
            g,
            pv,
            &batch.src,
            &batch.tgt,
            self.label_smoothing,
            &mut drop,
        )?;
        let v = g.value(total).item();
        Ok(StepLoss {
            total,
            parts: vec![("total", v)],
        })
    }

    fn decode(&self, params: &ModelParams, src: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
        self.model.decode(params, src, 1)
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, Serialize)]
pub struct EvalRecord {
    pub step: usize,
    pub dev_bleu: f64,
    pub repetition_rate: f64,
    pub lr: f64,
    /// Loss components averaged over the steps since the previous record.
    pub loss: BTreeMap<String, f64>,
    pub skipped_updates: usize,
}

pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    /// Best checkpoints by dev BLEU, best first.
    pub best: Vec<(f64, Checkpoint)>,
    /// Mean of the best checkpoints.
    pub averaged: Checkpoint,
    pub records: Vec<EvalRecord>,
    /// Training pairs dropped because the objective is undefined for them.
    pub dropped_pairs: usize,
}

/// The config as it should be recorded: an MTL section that cannot affect
/// training is stored as defaults, so such runs are indistinguishable from
/// runs without it.
pub fn effective_config(cfg: &Config) -> Config {
    let mut c = cfg.clone();
    if !c.mtl.active() {
        c.mtl = MtlConfig::default();
    }
    c
}

/// Greedy dev BLEU and repetition rate.
pub fn evaluate<M: Trainable>(
    model: &M,
    params: &ModelParams,
    dev: &[EncodedPair],
) -> Result<(f64, f64)> {
    let src: Vec<Vec<usize>> = dev.iter().map(|p| p.src.clone()).collect();
    let refs: Vec<Vec<usize>> = dev.iter().map(|p| p.tgt.clone()).collect();
    let hyps = model.decode(params, &src)?;
    let b = bleu(&hyps, &refs)?;
    Ok((b.score, repetition_rate(&hyps)))
}

/// Loss of `batch` with dropout and sampling off.
pub fn eval_loss<M: Trainable>(model: &M, params: &ModelParams, batch: &Batch) -> Result<f64> {
    let mut g = Graph::no_grad();
    let pv = params.bind(&mut g);
    let l = model.loss(&mut g, &pv, batch, 0, None)?;
    Ok(g.value(l.total).item())
}

/// Optimizes `model` on `train`, evaluating on `dev` every
/// `train.eval_every` steps and at the end. With `out`, checkpoints and the
/// metrics log are written there.
pub fn train<M: Trainable>(
    model: &M,
    cfg: &Config,
    vocab: &Vocab,
    train: &[EncodedPair],
    dev: &[EncodedPair],
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tc = &cfg.train;
    if dev.is_empty() {
        return Err(Error::Corpus("empty dev set".into()));
    }
    let dev = if tc.dev_limit > 0 && dev.len() > tc.dev_limit {
        &dev[..tc.dev_limit]
    } else {
        dev
    };
    let usable: Vec<EncodedPair> = train.iter().filter(|p| model.usable(p)).cloned().collect();
    let dropped = train.len() - usable.len();
    if dropped > 0 {
        log::warn!(
            "skipping {dropped} of {} training pairs the objective cannot represent",
            train.len()
        );
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let metrics_path = out.map(|d| d.join("metrics.jsonl"));
    if let Some(p) = &metrics_path {
        fs::write(p, "").map_err(|e| Error::io(p, e))?;
    }

    let snapshot = effective_config(cfg).entries();
    let mut streams = Streams::new(tc.seed);
    let mut params = model.init_params(&mut streams);
    let mut batcher = Batcher::new(usable, tc.max_tokens, streams.take_batching())?;
    let mut adam = Adam::new(cfg.optim.clone(), tc.steps);

    let mut records = Vec::new();
    let mut best: Vec<(f64, Checkpoint)> = Vec::new();
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut counted = 0usize;
    let mut skipped = 0usize;
    let make_ckpt =
        |step: usize, params: &ModelParams, streams: &Streams, batcher: &Batcher| Checkpoint {
            step: step as u64,
            rng_state: streams.positions(batcher),
            config: snapshot.clone(),
            vocab: vocab.text_tokens().to_vec(),
            params: params.clone(),
        };

    for step in 0..tc.steps {
        let batch = batcher.next_batch();
        let lr = adam.lr_at(step);
        let grads = {
            let mut g = Graph::new();
            let pv = params.bind(&mut g);
            let loss = model.loss(&mut g, &pv, &batch, step, Some(&mut streams))?;
            for (k, v) in &loss.parts {
                *sums.entry(k.to_string()).or_default() += v;
            }
            counted += 1;
            let mut grads = g.backward(loss.total)?;
            pv.iter()
                .filter_map(|(name, var)| grads.take(var).map(|t| (name.to_string(), t)))
                .collect::<Vec<_>>()
        };
        if adam.step(&mut params, &grads, lr)? == StepOutcome::Skipped {
            skipped += 1;
        }

        let done = step + 1;
        if done % tc.eval_every.max(1) == 0 || done == tc.steps {
            let (dev_bleu, rep) = evaluate(model, &params, dev)?;
            let rec = EvalRecord {
                step: done,
                dev_bleu,
                repetition_rate: rep,
                lr,
                loss: sums
                    .iter()
                    .map(|(k, v)| (k.clone(), v / counted.max(1) as f64))
                    .collect(),
                skipped_updates: skipped,
            };
            log::info!(
                "step {done}: dev bleu {dev_bleu:.2}, repetition {rep:.3}, loss {:.4}",
                rec.loss.get("total").copied().unwrap_or(f64::NAN)
            );
            if let Some(p) = &metrics_path {
                let line = serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?;
                let mut f = OpenOptions::new()
                    .append(true)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?;
                writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
            }
            records.push(rec);
            sums.clear();
            counted = 0;
            if tc.keep_best > 0 {
                best.push((dev_bleu, make_ckpt(done, &params, &streams, &batcher)));
                // stable: on equal BLEU the earlier checkpoint stays ahead
                best.sort_by(|a, b| b.0.total_cmp(&a.0));
                best.truncate(tc.keep_best);
            }
        }
    }

    let final_checkpoint = make_ckpt(tc.steps, &params, &streams, &batcher);
    let averaged = if best.is_empty() {
        final_checkpoint.clone()
    } else {
        let mut by_step: Vec<Checkpoint> = best.iter().map(|(_, c)| c.clone()).collect();
        by_step.sort_by_key(|c| c.step);
        average_checkpoints(&by_step)?
    };
    if let Some(dir) = out {
        final_checkpoint.save(&dir.join("final.ckpt"))?;
        averaged.save(&dir.join("averaged.ckpt"))?;
        for (i, (_, c)) in best.iter().enumerate() {
            c.save(&dir.join(format!("best{}.ckpt", i + 1)))?;
        }
    }
    Ok(TrainOutcome {
        final_checkpoint,
        best,
        averaged,
        records,
        dropped_pairs: dropped,
    })
}

/// Which model a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Nar,
    Teacher,
}

pub fn model_kind(ck: &Checkpoint) -> Result<ModelKind> {
    if ck.params.contains("nar.out.w") {
        Ok(ModelKind::Nar)
    } else if ck.params.contains("out.w") {
        Ok(ModelKind::Teacher)
    } else {
        Err(Error::Format(
            "checkpoint holds neither a NAR model nor a teacher".into(),
        ))
    }
}

/// A checkpoint loaded for inference.
pub struct Loaded {
    pub config: Config,
    pub vocab: Vocab,
    pub kind: ModelKind,
    pub params: ModelParams,
}

impl Loaded {
    /// Heads are stripped on load; they play no part in inference.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = Config::from_entries(&ck.config)?;
        let vocab = Vocab::from_text_tokens(&ck.vocab)?;
        let kind = model_kind(ck)?;
        Ok(Loaded {
            config,
            vocab,
            kind,
            params: strip_heads(&ck.params),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Decodes with greedy search (`beam <= 1`) or beam search.
    pub fn decode(&self, src: &[Vec<usize>], beam: usize) -> Result<Vec<Vec<usize>>> {
        match self.kind {
            ModelKind::Nar => {
                let m = NarModel::new(self.config.model.nar(self.vocab.len()))?;
                let mode = if beam <= 1 {
                    DecodeMode::Greedy
                } else {
                    DecodeMode::Beam(beam)
                };
                m.decode(&self.params, src, mode)
            }
            ModelKind::Teacher => {
                let m = TeacherModel::new(teacher_config(&self.config.model, self.vocab.len()))?;
                m.decode(&self.params, src, beam)
            }
        }
    }

    pub fn teacher(&self) -> Result<TeacherModel> {
        if self.kind != ModelKind::Teacher {
            return Err(Error::Config("checkpoint is not a teacher".into()));
        }
        TeacherModel::new(teacher_config(&self.config.model, self.vocab.len()))
    }
}

/// Heads removed and the MTL section reset: what the checkpoint would hold
/// had it been trained without heads.
pub fn strip_checkpoint(ck: &Checkpoint) -> Result<Checkpoint> {
    let mut cfg = Config::from_entries(&ck.config)?;
    cfg.mtl = MtlConfig::default();
    Ok(Checkpoint {
        config: cfg.entries(),
        params: strip_heads(&ck.params),
        ..ck.clone()
    })
}
