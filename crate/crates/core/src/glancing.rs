//! Glancing: replace some decoder inputs with reference embeddings, more
//! of them the worse the first-pass prediction was.

use rand::Rng;

use crate::ctc;
use crate::data::BLANK;
use crate::error::{Error, Result};
use crate::nar::{DecoderTrace, NarModel, Override, Variant};
use crate::tensor::Graph;

#[derive(Clone, Debug, PartialEq)]
pub struct GlanceSchedule {
    pub ratio_start: f64,
    pub ratio_end: f64,
    pub anneal_steps: usize,
}

impl GlanceSchedule {
    pub fn validate(&self) -> Result<()> {
        for r in [self.ratio_start, self.ratio_end] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("glancing ratio {r} not in [0,1]")));
            }
        }
        Ok(())
    }

    /// Linear from `ratio_start` at step 0 to `ratio_end` at
    /// `anneal_steps`, constant afterwards.
    pub fn ratio(&self, step: usize) -> f64 {
        if step >= self.anneal_steps {
            return self.ratio_end;
        }
        let f = step as f64 / self.anneal_steps as f64;
        self.ratio_start + (self.ratio_end - self.ratio_start) * f
    }
}

pub fn hamming<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count() + a.len().abs_diff(b.len())
}

/// `floor(ratio · hamming(prediction, reference))`.
pub fn glance_count<T: PartialEq>(prediction: &[T], reference: &[T], ratio: f64) -> usize {
    (ratio * hamming(prediction, reference) as f64).floor() as usize
}

/// Overrides for one vanilla item: the decoder has exactly one position
/// per reference token, so positions are sampled uniformly among them.
pub fn vanilla_glance(
    batch: usize,
    prediction: &[usize],
    reference: &[usize],
    ratio: f64,
    rng: &mut impl Rng,
) -> Vec<Override> {
    let t = reference.len();
    let count = glance_count(prediction, reference, ratio).min(t);
    let mut pos = rand::seq::index::sample(rng, t, count).into_vec();
    pos.sort_unstable();
    pos.into_iter()
        .map(|p| Override {
            batch,
            pos: p,
            token: reference[p],
        })
        .collect()
}

/// Overrides for one CTC item. The first-pass distribution is aligned to
/// the reference; the error count compares the per-frame argmax with the
/// aligned symbols, sampled reference tokens are placed at the first frame
/// aligned to them. Unalignable references get no overrides.
pub fn ctc_glance(
    batch: usize,
    log_probs: &[f64],
    vocab: usize,
    reference: &[usize],
    ratio: f64,
    rng: &mut impl Rng,
) -> Vec<Override> {
    let Ok(al) = ctc::viterbi_align(log_probs, vocab, reference, BLANK) else {
        return Vec::new();
    };
    let aligned = al.symbols(reference, BLANK);
    let argmax: Vec<usize> = log_probs
        .chunks(vocab)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    let count = glance_count(&argmax, &aligned, ratio).min(reference.len());
    let positions = al.target_positions();
    let mut picks = rand::seq::index::sample(rng, reference.len(), count).into_vec();
    picks.sort_unstable();
    picks
        .into_iter()
        .filter_map(|i| {
            positions
                .iter()
                .position(|&p| p == Some(i))
                .map(|frame| Override {
                    batch,
                    pos: frame,
                    token: reference[i],
                })
        })
        .collect()
}

/// Overrides for a whole batch from a first-pass `trace` evaluated on `g`.
pub fn glance_overrides(
    model: &NarModel,
    g: &Graph,
    trace: &DecoderTrace,
    targets: &[Vec<usize>],
    ratio: f64,
    rng: &mut impl Rng,
) -> Vec<Override> {
    if ratio == 0.0 {
        return Vec::new();
    }
    let vocab = model.cfg.vocab_size;
    let mut out = Vec::new();
    for (b, y) in targets.iter().enumerate() {
        match model.cfg.variant {
            Variant::Vanilla => {
                let pred = NarModel::argmax_rows(g, trace, b);
                out.extend(vanilla_glance(b, &pred, y, ratio, rng));
            }
            Variant::Ctc => {
                let start = b * trace.max_len * vocab;
                let lp = &g.value(trace.log_probs).data()[start..start + trace.lens[b] * vocab];
                out.extend(ctc_glance(b, lp, vocab, y, ratio, rng));
            }
        }
    }
    out
}
