//! Autoregressive completion sampling: nucleus filtering plus the
//! coordinate-monotonicity mask.

use rand::RngExt;
use rand_pcg::Pcg64;

use super::model::{forward_logits, ShapeFormer};
use super::tokens::{self, prefix_stream, TokenStream};
use crate::autodiff::{Element, Graph, ParamBinder};
use crate::vqdif::SparseSeq;
use crate::{Error, Result};

/// Keeps the minimal descending-probability prefix whose mass reaches `p`
/// (ties to the lower index) and renormalizes. `p = 0` degenerates to
/// argmax.
pub fn top_p_filter(probs: &[f64], p: f64) -> Vec<f64> {
    if probs.is_empty() {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; probs.len()];
    let mut kept_mass = 0.0;
    for &i in &order {
        out[i] = probs[i];
        kept_mass += probs[i];
        if kept_mass >= p {
            break;
        }
    }
    if kept_mass > 0.0 {
        for v in out.iter_mut() {
            *v /= kept_mass;
        }
    }
    out
}

fn sample_categorical(probs: &[f64], rng: &mut Pcg64) -> usize {
    let total: f64 = probs.iter().sum();
    let mut dart = rng.random_range(0.0..1.0) * total;
    for (i, &p) in probs.iter().enumerate() {
        dart -= p;
        if dart <= 0.0 && p > 0.0 {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Result of a completion run.
#[derive(Debug, Clone)]
pub struct Completion {
    pub seq: SparseSeq,
    /// True when generation stopped at `max_len` without an END token.
    pub truncated: bool,
}

impl<E: Element> ShapeFormer<E> {
    /// Samples a completion of `partial`: alternately draws the next
    /// coordinate (with ids at or below the running maximum masked out,
    /// END always allowed) and, conditioned on it, the next value, both
    /// under top-p filtering. Stops at END, after `max_len` tuples, or when
    /// the stream hits the model's length budget.
    pub fn sample_completion(
        &self,
        partial: &SparseSeq,
        p: f64,
        max_len: usize,
        rng: &mut Pcg64,
    ) -> Result<Completion> {
        self.check_sequence(partial)?;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("top-p {p} out of [0,1]")));
        }
        let r = self.config.resolution;
        let end_c = tokens::end_coord(r);
        let mut stream = prefix_stream(partial, self.config.max_seq_len)?;
        let mut generated: Vec<(u32, u32)> = Vec::new();
        let mut truncated = true;
        while generated.len() < max_len && stream.len() < self.config.max_seq_len {
            let (p_coord, h_stream) = self.next_coord_distribution(&stream)?;
            // Monotonicity: every cell at or below the running maximum is
            // invalid; END stays available.
            let mut masked = p_coord;
            if let Some(&(max_c, _)) = generated.last() {
                for (i, v) in masked.iter_mut().enumerate().take(end_c) {
                    if i <= max_c as usize {
                        *v = 0.0;
                    }
                }
            }
            let total: f64 = masked.iter().sum();
            if total <= 0.0 {
                // Every cell is consumed; only END remains.
                masked[end_c] = 1.0;
            }
            let norm: f64 = masked.iter().sum();
            for v in masked.iter_mut() {
                *v /= norm;
            }
            let filtered = top_p_filter(&masked, p);
            let c = sample_categorical(&filtered, rng);
            if c == end_c {
                truncated = false;
                break;
            }
            let p_value = self.next_value_distribution(&h_stream, c)?;
            let filtered_v = top_p_filter(&p_value, p);
            let v = sample_categorical(&filtered_v, rng);
            generated.push((c as u32, v as u32));
            stream.coords.push(c);
            stream.values.push(v);
            stream.segments.push(tokens::SEG_COMPLETE);
            stream.loss_mask.push(false);
        }
        let seq = SparseSeq::new(generated, r as u16, self.config.vocab as u32)?;
        Ok(Completion { seq, truncated })
    }

    /// Raw (unmasked, unfiltered) distribution over the next coordinate
    /// after the current stream, plus the stream it was computed for.
    fn next_coord_distribution(&self, stream: &TokenStream) -> Result<(Vec<f64>, TokenStream)> {
        let mut g = Graph::new();
        let mut binder = ParamBinder::new(&self.params, false);
        let logits = forward_logits(&mut g, &mut binder, &self.config, stream, None)?;
        let probs = g.softmax(logits.coord)?;
        let n_c = tokens::coord_out_vocab(self.config.resolution);
        let last = stream.len() - 1;
        let row = g.value(probs).data()[last * n_c..(last + 1) * n_c]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        Ok((row, stream.clone()))
    }

    /// Distribution over the next value given the sampled next coordinate.
    fn next_value_distribution(&self, stream: &TokenStream, next_c: usize) -> Result<Vec<f64>> {
        let mut with_next = stream.clone();
        // The value stream mixes in the next coordinate at the last
        // position; appending a provisional token realizes that without a
        // special inference path.
        with_next.coords.push(next_c);
        with_next.values.push(tokens::pad_value(self.config.vocab));
        with_next.segments.push(tokens::SEG_COMPLETE);
        with_next.loss_mask.push(false);
        let mut g = Graph::new();
        let mut binder = ParamBinder::new(&self.params, false);
        let logits = forward_logits(&mut g, &mut binder, &self.config, &with_next, None)?;
        let probs = g.softmax(logits.value)?;
        let n_v = self.config.vocab;
        // The position *before* the appended token predicts its value.
        let at = with_next.len() - 2;
        Ok(g.value(probs).data()[at * n_v..(at + 1) * n_v]
            .iter()
            .map(|v| v.as_f64())
            .collect())
    }

    /// Replays `complete` under forced decoding, accumulating the raw
    /// per-element `-log p` exactly as sampling would see them; matches
    /// [`ShapeFormer::nll`] of the corresponding unmasked training stream.
    pub fn forced_nll(&self, partial: &SparseSeq, complete: &SparseSeq) -> Result<f64> {
        self.check_sequence(partial)?;
        self.check_sequence(complete)?;
        let r = self.config.resolution;
        let end_c = tokens::end_coord(r);
        let mut stream = prefix_stream(partial, self.config.max_seq_len)?;
        let mut total = 0.0;
        let mut count = 0usize;
        let mut forced: Vec<(usize, usize)> = complete
            .entries()
            .iter()
            .map(|&(c, v)| (c as usize, v as usize))
            .collect();
        forced.push((end_c, tokens::pad_value(self.config.vocab)));
        for (c, v) in forced {
            if stream.len() >= self.config.max_seq_len {
                return Err(Error::SequenceTooLong {
                    len: stream.len() + 1,
                    max: self.config.max_seq_len,
                });
            }
            let (p_coord, _) = self.next_coord_distribution(&stream)?;
            total -= p_coord[c].max(f64::MIN_POSITIVE).ln();
            count += 1;
            if c != end_c {
                let p_value = self.next_value_distribution(&stream, c)?;
                total -= p_value[v].max(f64::MIN_POSITIVE).ln();
            }
            stream.coords.push(c);
            stream.values.push(v);
            stream.segments.push(tokens::SEG_COMPLETE);
            stream.loss_mask.push(false);
        }
        Ok(total / count as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{indexed_rng, Stream};

    #[test]
    fn top_p_hand_cases() {
        let p = top_p_filter(&[0.5, 0.3, 0.2], 0.4);
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
        let p = top_p_filter(&[0.5, 0.3, 0.2], 0.75);
        assert!((p[0] - 0.625).abs() < 1e-12);
        assert!((p[1] - 0.375).abs() < 1e-12);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn top_p_zero_is_argmax_with_low_index_ties() {
        let p = top_p_filter(&[0.2, 0.4, 0.4], 0.0);
        assert_eq!(p, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn top_p_one_keeps_everything() {
        let probs = [0.1, 0.2, 0.3, 0.4];
        let p = top_p_filter(&probs, 1.0);
        for (a, b) in p.iter().zip(&probs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn top_p_matches_brute_force_prefix() {
        let mut rng = indexed_rng(7, Stream::Sample, 1);
        for _ in 0..200 {
            let n = rng.random_range(2..10usize);
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let p: f64 = rng.random_range(0.0..1.0);
            let filtered = top_p_filter(&probs, p);
            // Brute force: sort, take the minimal prefix reaching p.
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
            let mut kept = Vec::new();
            let mut cum = 0.0;
            for &i in &order {
                kept.push(i);
                cum += probs[i];
                if cum >= p {
                    break;
                }
            }
            let support: Vec<usize> = (0..n).filter(|&i| filtered[i] > 0.0).collect();
            let mut kept_sorted = kept.clone();
            kept_sorted.sort_unstable();
            assert_eq!(support, kept_sorted);
            let s: f64 = filtered.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
