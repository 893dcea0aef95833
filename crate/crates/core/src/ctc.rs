//! Connectionist temporal classification: loss, gradient, decoding and
//! Viterbi alignment.
//!
//! Emission matrices are row-major `frames × vocab` slices of
//! log-probabilities. A target `y` is expanded to the lattice
//! `[blank, y1, blank, y2, …, yn, blank]`; a skip from state `s-2` to `s`
//! is allowed only when `s` is a label differing from the label at `s-2`.

use std::collections::HashMap;

use crate::data::ctc_min_frames;
use crate::error::{Error, Result};
use crate::tensor::{log_add, logsumexp, Graph, Var};

const NEG_INF: f64 = f64::NEG_INFINITY;

pub fn extend(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &y in target {
        ext.push(y);
        ext.push(blank);
    }
    ext
}

fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

/// Merges adjacent duplicates, then drops blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

fn frames_of(lp: &[f64], vocab: usize) -> Result<usize> {
    if vocab == 0 || lp.is_empty() || !lp.len().is_multiple_of(vocab) {
        return Err(Error::contract(format!(
            "emission matrix of {} entries is not a nonempty multiple of vocab {vocab}",
            lp.len()
        )));
    }
    Ok(lp.len() / vocab)
}

fn check_feasible(frames: usize, target: &[usize]) -> Result<()> {
    let need = ctc_min_frames(target);
    if frames < need {
        return Err(Error::contract(format!(
            "{frames} frames cannot emit a target that needs {need}"
        )));
    }
    Ok(())
}

/// Log-space forward variables, `frames × (2n+1)`; `alpha[t][s]` includes
/// the emission at `t`.
fn forward(lp: &[f64], vocab: usize, frames: usize, ext: &[usize], blank: usize) -> Vec<f64> {
    let n = ext.len();
    let mut alpha = vec![NEG_INF; frames * n];
    alpha[0] = lp[ext[0]];
    if n > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * n);
        let prev = &prev[(t - 1) * n..];
        for s in 0..n {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(ext, s, blank) {
                a = log_add(a, prev[s - 2]);
            }
            cur[s] = a + lp[t * vocab + ext[s]];
        }
    }
    alpha
}

/// Log-space backward variables; `beta[t][s]` excludes the emission at `t`.
fn backward(lp: &[f64], vocab: usize, frames: usize, ext: &[usize], blank: usize) -> Vec<f64> {
    let n = ext.len();
    let mut beta = vec![NEG_INF; frames * n];
    let last = (frames - 1) * n;
    beta[last + n - 1] = 0.0;
    if n > 1 {
        beta[last + n - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..n {
            let next = |s2: usize| lp[(t + 1) * vocab + ext[s2]] + beta[(t + 1) * n + s2];
            let mut b = next(s);
            if s + 1 < n {
                b = log_add(b, next(s + 1));
            }
            if s + 2 < n && can_skip(ext, s + 2, blank) {
                b = log_add(b, next(s + 2));
            }
            beta[t * n + s] = b;
        }
    }
    beta
}

fn final_log_prob(alpha: &[f64], frames: usize, n: usize) -> f64 {
    let row = &alpha[(frames - 1) * n..frames * n];
    if n > 1 {
        log_add(row[n - 1], row[n - 2])
    } else {
        row[0]
    }
}

/// `log p(target | emissions)`, summed over all alignments.
pub fn log_likelihood(lp: &[f64], vocab: usize, target: &[usize], blank: usize) -> Result<f64> {
    let frames = frames_of(lp, vocab)?;
    check_feasible(frames, target)?;
    let ext = extend(target, blank);
    let alpha = forward(lp, vocab, frames, &ext, blank);
    Ok(final_log_prob(&alpha, frames, ext.len()))
}

/// Negative log-likelihood and its gradient with respect to every entry
/// of `lp` (treated as free log-emission scores).
pub fn nll_and_grad(
    lp: &[f64],
    vocab: usize,
    target: &[usize],
    blank: usize,
) -> Result<(f64, Vec<f64>)> {
    let frames = frames_of(lp, vocab)?;
    check_feasible(frames, target)?;
    let ext = extend(target, blank);
    let n = ext.len();
    let alpha = forward(lp, vocab, frames, &ext, blank);
    let beta = backward(lp, vocab, frames, &ext, blank);
    let log_p = final_log_prob(&alpha, frames, n);
    let mut grad = vec![0.0; lp.len()];
    let mut acc: Vec<f64> = Vec::with_capacity(n);
    for t in 0..frames {
        for k in 0..vocab {
            acc.clear();
            for s in 0..n {
                if ext[s] == k {
                    acc.push(alpha[t * n + s] + beta[t * n + s]);
                }
            }
            if !acc.is_empty() {
                grad[t * vocab + k] = -(logsumexp(&acc) - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// Per-example CTC negative log-likelihoods of a padded batch.
///
/// `log_probs` is `[batch·max_frames × vocab]`; example `b` uses its first
/// `frames[b]` rows. The result is a `[batch]` vector on the tape.
pub fn ctc_loss(
    g: &mut Graph,
    log_probs: Var,
    frames: &[usize],
    max_frames: usize,
    targets: &[Vec<usize>],
    blank: usize,
) -> Result<Var> {
    let (rows, vocab) = g.value(log_probs).dims2();
    if frames.len() != targets.len() || rows != frames.len() * max_frames {
        return Err(Error::Shape {
            op: "ctc_loss",
            lhs: vec![rows, vocab],
            rhs: vec![frames.len(), max_frames],
        });
    }
    let data = g.value(log_probs).data();
    let mut values = Vec::with_capacity(frames.len());
    let mut jacobian = vec![0.0; rows * vocab];
    let mut row_segment = vec![usize::MAX; rows];
    for (b, (&t, y)) in frames.iter().zip(targets).enumerate() {
        if t == 0 || t > max_frames {
            return Err(Error::contract(format!(
                "example {b} has {t} frames of {max_frames}"
            )));
        }
        let start = b * max_frames * vocab;
        let (nll, grad) = nll_and_grad(&data[start..start + t * vocab], vocab, y, blank)?;
        values.push(nll);
        jacobian[start..start + t * vocab].copy_from_slice(&grad);
        for r in 0..t {
            row_segment[b * max_frames + r] = b;
        }
    }
    g.segmented(log_probs, values, jacobian, row_segment)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Per-frame argmax (ties to the lower id), collapsed.
pub fn greedy_decode(lp: &[f64], vocab: usize, blank: usize) -> Result<Vec<usize>> {
    frames_of(lp, vocab)?;
    let path: Vec<usize> = lp.chunks(vocab).map(argmax).collect();
    Ok(collapse(&path, blank))
}

/// Prefix beam search over collapsed label sequences. Surviving
/// candidates are rescored by their exact marginal likelihood and
/// returned best first. When the search had to prune, the survivors of
/// every narrower width are rescored as well, so the best returned mass
/// never decreases as the beam widens.
pub fn beam_search(
    lp: &[f64],
    vocab: usize,
    blank: usize,
    beam: usize,
) -> Result<Vec<(Vec<usize>, f64)>> {
    frames_of(lp, vocab)?;
    let beam = beam.max(1);
    let (mut cands, pruned) = prefix_beam(lp, vocab, blank, beam);
    if pruned {
        for width in 1..beam {
            cands.extend(prefix_beam(lp, vocab, blank, width).0);
        }
        cands.sort();
        cands.dedup();
    }
    let mut out: Vec<(Vec<usize>, f64)> = cands
        .into_iter()
        .map(|y| {
            let score = log_likelihood(lp, vocab, &y, blank)?;
            Ok((y, score))
        })
        .collect::<Result<_>>()?;
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out.truncate(beam);
    Ok(out)
}

/// Surviving prefixes of one pass at `width`, and whether any step pruned.
fn prefix_beam(lp: &[f64], vocab: usize, blank: usize, width: usize) -> (Vec<Vec<usize>>, bool) {
    let frames = lp.len() / vocab;
    let mut pruned = false;
    // prefix → (log mass ending in blank, log mass ending in a label)
    let mut beams: Vec<(Vec<usize>, (f64, f64))> = vec![(Vec::new(), (0.0, NEG_INF))];
    for t in 0..frames {
        let row = &lp[t * vocab..(t + 1) * vocab];
        let mut next: HashMap<Vec<usize>, (f64, f64)> = HashMap::new();
        for (prefix, (pb, pnb)) in &beams {
            let total = log_add(*pb, *pnb);
            let last = prefix.last().copied();
            let e = next.entry(prefix.clone()).or_insert((NEG_INF, NEG_INF));
            e.0 = log_add(e.0, total + row[blank]);
            if let Some(l) = last {
                e.1 = log_add(e.1, pnb + row[l]);
            }
            for k in (0..vocab).filter(|&k| k != blank) {
                let mut ext = prefix.clone();
                ext.push(k);
                let mass = if Some(k) == last {
                    pb + row[k]
                } else {
                    total + row[k]
                };
                if mass == NEG_INF {
                    continue;
                }
                let e = next.entry(ext).or_insert((NEG_INF, NEG_INF));
                e.1 = log_add(e.1, mass);
            }
        }
        let mut ranked: Vec<(Vec<usize>, (f64, f64))> = next.into_iter().collect();
        ranked.sort_by(|a, b| {
            let (sa, sb) = (log_add(a.1 .0, a.1 .1), log_add(b.1 .0, b.1 .1));
            sb.total_cmp(&sa).then_with(|| a.0.cmp(&b.0))
        });
        pruned |= ranked.len() > width;
        ranked.truncate(width);
        beams = ranked;
    }
    (beams.into_iter().map(|(y, _)| y).collect(), pruned)
}

/// Most probable single alignment of `target`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    /// Extended-lattice state per frame.
    pub states: Vec<usize>,
}

impl Alignment {
    /// Target index emitted at each frame, `None` on blank frames.
    pub fn target_positions(&self) -> Vec<Option<usize>> {
        self.states
            .iter()
            .map(|&s| if s % 2 == 1 { Some((s - 1) / 2) } else { None })
            .collect()
    }

    /// The emitted symbol per frame (blank included).
    pub fn symbols(&self, target: &[usize], blank: usize) -> Vec<usize> {
        self.target_positions()
            .into_iter()
            .map(|p| p.map_or(blank, |i| target[i]))
            .collect()
    }
}

/// Viterbi alignment; ties go to the lower extended-state index.
pub fn viterbi_align(
    lp: &[f64],
    vocab: usize,
    target: &[usize],
    blank: usize,
) -> Result<Alignment> {
    let frames = frames_of(lp, vocab)?;
    check_feasible(frames, target)?;
    let ext = extend(target, blank);
    let n = ext.len();
    let mut score = vec![NEG_INF; frames * n];
    let mut back = vec![0usize; frames * n];
    score[0] = lp[ext[0]];
    if n > 1 {
        score[1] = lp[ext[1]];
    }
    for t in 1..frames {
        for s in 0..n {
            let lo = if can_skip(&ext, s, blank) {
                s - 2
            } else {
                s.saturating_sub(1)
            };
            let mut best = lo;
            for p in lo + 1..=s {
                if score[(t - 1) * n + p] > score[(t - 1) * n + best] {
                    best = p;
                }
            }
            score[t * n + s] = score[(t - 1) * n + best] + lp[t * vocab + ext[s]];
            back[t * n + s] = best;
        }
    }
    let last = (frames - 1) * n;
    let mut s = if n > 1 && score[last + n - 2] >= score[last + n - 1] {
        n - 2
    } else {
        n - 1
    };
    let mut states = vec![0; frames];
    for t in (0..frames).rev() {
        states[t] = s;
        if t > 0 {
            s = back[t * n + s];
        }
    }
    Ok(Alignment { states })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{relative_error, FD_STEP};
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const BLANK: usize = 0;

    fn random_log_probs(frames: usize, vocab: usize, rng: &mut impl Rng) -> Vec<f64> {
        let mut lp = Vec::with_capacity(frames * vocab);
        for _ in 0..frames {
            let row: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let lse = logsumexp(&row);
            lp.extend(row.iter().map(|x| x - lse));
        }
        lp
    }

    /// Every frame-level path, as a vector of symbols.
    fn all_paths(frames: usize, vocab: usize) -> Vec<Vec<usize>> {
        let mut paths = vec![Vec::new()];
        for _ in 0..frames {
            paths = paths
                .into_iter()
                .flat_map(|p| {
                    (0..vocab).map(move |k| {
                        let mut q = p.clone();
                        q.push(k);
                        q
                    })
                })
                .collect();
        }
        paths
    }

    fn path_log_prob(lp: &[f64], vocab: usize, path: &[usize]) -> f64 {
        path.iter()
            .enumerate()
            .map(|(t, &k)| lp[t * vocab + k])
            .sum()
    }

    fn brute_force(lp: &[f64], vocab: usize, target: &[usize]) -> f64 {
        let frames = lp.len() / vocab;
        let ps: Vec<f64> = all_paths(frames, vocab)
            .iter()
            .filter(|p| collapse(p, BLANK) == target)
            .map(|p| path_log_prob(lp, vocab, p))
            .collect();
        logsumexp(&ps)
    }

    #[test]
    fn collapse_examples() {
        assert_eq!(collapse(&[0, 1, 1, 0, 1, 2, 2], 0), vec![1, 1, 2]);
        assert_eq!(collapse(&[0, 0], 0), Vec::<usize>::new());
    }

    #[test]
    fn matches_path_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for target in [vec![], vec![1], vec![1, 2], vec![1, 1], vec![2, 1, 2]] {
            for frames in [3, 4, 5] {
                if frames < ctc_min_frames(&target) {
                    continue;
                }
                let lp = random_log_probs(frames, 3, &mut rng);
                let fast = log_likelihood(&lp, 3, &target, BLANK).unwrap();
                let slow = brute_force(&lp, 3, &target);
                assert!(
                    (fast - slow).abs() < 1e-12,
                    "{target:?} T={frames}: {fast} vs {slow}"
                );
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target = [1, 2, 2, 3];
        let lp = random_log_probs(7, 4, &mut rng);
        let (_, grad) = nll_and_grad(&lp, 4, &target, BLANK).unwrap();
        let mut work = lp.clone();
        for i in 0..lp.len() {
            work[i] = lp[i] + FD_STEP;
            let up = -log_likelihood(&work, 4, &target, BLANK).unwrap();
            work[i] = lp[i] - FD_STEP;
            let down = -log_likelihood(&work, 4, &target, BLANK).unwrap();
            work[i] = lp[i];
            let numeric = (up - down) / (2.0 * FD_STEP);
            assert!(
                relative_error(grad[i], numeric) < 1e-4,
                "entry {i}: {} vs {numeric}",
                grad[i]
            );
        }
    }

    #[test]
    fn infeasible_target_is_error() {
        let lp = vec![(0.5f64).ln(); 4];
        assert!(log_likelihood(&lp, 2, &[1, 1], BLANK).is_err());
        assert!(log_likelihood(&lp, 2, &[1], BLANK).is_ok());
    }

    #[test]
    fn batched_loss_masks_padding_and_backpropagates() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_log_probs(4, 3, &mut rng);
        let b = random_log_probs(4, 3, &mut rng);
        let mut data = a.clone();
        data.extend_from_slice(&b);
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![8, 3], data).unwrap());
        let targets = vec![vec![1, 2], vec![2]];
        let loss = ctc_loss(&mut g, x, &[4, 3], 4, &targets, BLANK).unwrap();
        let vals = g.value(loss).data().to_vec();
        assert!((vals[0] + log_likelihood(&a, 3, &[1, 2], BLANK).unwrap()).abs() < 1e-12);
        assert!((vals[1] + log_likelihood(&b[..9], 3, &[2], BLANK).unwrap()).abs() < 1e-12);
        let total = g.sum_all(loss);
        let grads = g.backward(total).unwrap();
        let gx = grads.get(x).unwrap().data();
        assert!(gx[21..24].iter().all(|&v| v == 0.0));
        assert!(gx[..3].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn beam_search_finds_exact_best_sequence_on_small_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let lp = random_log_probs(4, 3, &mut rng);
            let mut best: Option<(Vec<usize>, f64)> = None;
            for p in all_paths(4, 3) {
                let y = collapse(&p, BLANK);
                let s = brute_force(&lp, 3, &y);
                if best.as_ref().is_none_or(|(_, b)| s > *b) {
                    best = Some((y, s));
                }
            }
            let (by, bs) = best.unwrap();
            let found = beam_search(&lp, 3, BLANK, 64).unwrap();
            assert_eq!(found[0].0, by);
            assert!((found[0].1 - bs).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_decode_collapses_argmax_path() {
        let lp: Vec<f64> = [
            [0.1, 0.8, 0.1],
            [0.1, 0.8, 0.1],
            [0.8, 0.1, 0.1],
            [0.1, 0.1, 0.8],
        ]
        .iter()
        .flatten()
        .map(|p: &f64| p.ln())
        .collect();
        assert_eq!(greedy_decode(&lp, 3, BLANK).unwrap(), vec![1, 2]);
    }

    #[test]
    fn viterbi_is_the_best_valid_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let target = [1, 2, 1];
        for _ in 0..5 {
            let lp = random_log_probs(5, 3, &mut rng);
            let al = viterbi_align(&lp, 3, &target, BLANK).unwrap();
            let path = al.symbols(&target, BLANK);
            assert_eq!(collapse(&path, BLANK), target);
            let best = all_paths(5, 3)
                .iter()
                .filter(|p| collapse(p, BLANK) == target)
                .map(|p| path_log_prob(&lp, 3, p))
                .fold(NEG_INF, f64::max);
            assert!((path_log_prob(&lp, 3, &path) - best).abs() < 1e-12);
        }
    }

    #[test]
    fn viterbi_ties_prefer_lower_states() {
        let lp = vec![(0.5f64).ln(); 6];
        let al = viterbi_align(&lp, 2, &[1], BLANK).unwrap();
        assert_eq!(al.states, vec![0, 0, 1]);
    }

    proptest! {
        #[test]
        fn total_mass_over_targets_is_one(seed in 0u64..500, frames in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lp = random_log_probs(frames, 3, &mut rng);
            let mut targets: Vec<Vec<usize>> = all_paths(frames, 3).iter().map(|p| collapse(p, BLANK)).collect();
            targets.sort();
            targets.dedup();
            let mass: Vec<f64> = targets.iter().map(|y| log_likelihood(&lp, 3, y, BLANK).unwrap()).collect();
            prop_assert!(logsumexp(&mass).abs() < 1e-12);
            prop_assert!(mass.iter().all(|&m| m <= 1e-12));
        }

        #[test]
        fn collapse_is_idempotent_on_clean_sequences(raw in prop::collection::vec(0usize..4, 0..12)) {
            let mut y: Vec<usize> = raw.into_iter().map(|k| k + 5).collect();
            y.dedup();
            prop_assert_eq!(collapse(&y, BLANK), y.clone());
            prop_assert_eq!(collapse(&extend(&y, BLANK), BLANK), y);
        }

        #[test]
        fn wider_beams_never_lose_mass(seed in any::<u64>(), frames in 1usize..8, vocab in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lp = random_log_probs(frames, vocab, &mut rng);
            let mut prev = f64::NEG_INFINITY;
            for beam in 1..=8 {
                let best = beam_search(&lp, vocab, BLANK, beam).unwrap()[0].1;
                prop_assert!(best >= prev - 1e-12, "beam {} mass {} < {}", beam, best, prev);
                prev = best;
            }
        }
    }
}
