//! Token-stream construction: the prefix-conditioned layout
//! `[partial tuples..., END, complete tuples..., END]` with segment flags
//! and the loss mask over positions that predict the complete segment.

use rand::RngExt;
use rand_pcg::Pcg64;

use crate::vqdif::SparseSeq;
use crate::{Error, Result};

/// Reserved coordinate ids live just past the cell range.
pub fn end_coord(resolution: usize) -> usize {
    resolution * resolution * resolution
}

pub fn pad_coord(resolution: usize) -> usize {
    end_coord(resolution) + 1
}

/// Number of coordinate ids the model embeds (cells + END + PAD).
pub fn coord_vocab(resolution: usize) -> usize {
    end_coord(resolution) + 2
}

/// Ids the coordinate head can predict (cells + END; PAD is input-only).
pub fn coord_out_vocab(resolution: usize) -> usize {
    end_coord(resolution) + 1
}

/// Value ids: `[0, V)` are codebook entries, `V` is a reserved END marker,
/// `V + 1` is the PAD carried by END positions (excluded from the loss).
pub fn end_value(vocab: usize) -> usize {
    vocab
}

pub fn pad_value(vocab: usize) -> usize {
    vocab + 1
}

pub fn value_vocab(vocab: usize) -> usize {
    vocab + 2
}

pub const SEG_PARTIAL: usize = 0;
pub const SEG_COMPLETE: usize = 1;

/// One training (or sampling-prefix) stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream {
    pub coords: Vec<usize>,
    pub values: Vec<usize>,
    pub segments: Vec<usize>,
    /// True on positions whose *next* element belongs to the complete
    /// segment (its tuples and its END).
    pub loss_mask: Vec<bool>,
    pub resolution: usize,
    pub vocab: usize,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Shifted coordinate targets: position `i` predicts `coords[i+1]`.
    pub fn coord_targets(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.coords[1..].to_vec();
        t.push(pad_coord(self.resolution));
        t
    }

    pub fn value_targets(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.values[1..].to_vec();
        t.push(pad_value(self.vocab));
        t
    }

    /// Value loss applies only where the next element is a tuple (END
    /// positions contribute the coordinate term alone).
    pub fn value_loss_mask(&self) -> Vec<bool> {
        let vt = self.value_targets();
        self.loss_mask
            .iter()
            .zip(&vt)
            .map(|(&m, &v)| m && v < self.vocab)
            .collect()
    }

    /// Coordinate ids mixed into the value stream: position `i` carries the
    /// embedding of the next element's coordinate (known when teacher
    /// forcing, sampled at inference).
    pub fn next_coords(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.coords[1..].to_vec();
        t.push(pad_coord(self.resolution));
        t
    }

    /// Number of loss positions (the nll normalizer).
    pub fn loss_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// Concatenates the partial and complete sequences with END sentinels.
/// Each partial tuple is independently dropped with probability
/// `mask_prob` (training augmentation); the loss mask covers exactly the
/// positions predicting the complete segment.
pub fn build_training_sequence(
    partial: &SparseSeq,
    complete: &SparseSeq,
    mask_prob: f64,
    max_seq_len: usize,
    rng: &mut Pcg64,
) -> Result<TokenStream> {
    if partial.resolution() != complete.resolution() || partial.vocab() != complete.vocab() {
        return Err(Error::InvalidArgument(format!(
            "partial (R={}, V={}) and complete (R={}, V={}) sequences disagree",
            partial.resolution(),
            partial.vocab(),
            complete.resolution(),
            complete.vocab()
        )));
    }
    let r = partial.resolution() as usize;
    let v = partial.vocab() as usize;
    let mut coords = Vec::new();
    let mut values = Vec::new();
    for &(c, val) in partial.entries() {
        if mask_prob > 0.0 && rng.random_bool(mask_prob.min(1.0)) {
            continue;
        }
        coords.push(c as usize);
        values.push(val as usize);
    }
    coords.push(end_coord(r));
    values.push(pad_value(v));
    let prefix_len = coords.len();
    for &(c, val) in complete.entries() {
        coords.push(c as usize);
        values.push(val as usize);
    }
    coords.push(end_coord(r));
    values.push(pad_value(v));
    let len = coords.len();
    if len > max_seq_len {
        return Err(Error::SequenceTooLong { len, max: max_seq_len });
    }
    let segments = (0..len)
        .map(|i| if i < prefix_len { SEG_PARTIAL } else { SEG_COMPLETE })
        .collect();
    // Positions prefix_len-1 ..= len-2 predict the complete segment.
    let loss_mask = (0..len).map(|i| i + 1 >= prefix_len && i + 1 < len).collect();
    Ok(TokenStream {
        coords,
        values,
        segments,
        loss_mask,
        resolution: r,
        vocab: v,
    })
}

/// The sampling prefix: partial tuples plus END, nothing masked.
pub fn prefix_stream(partial: &SparseSeq, max_seq_len: usize) -> Result<TokenStream> {
    let empty = SparseSeq::empty(partial.resolution(), partial.vocab());
    let mut rng = crate::rng::stream_rng(0, crate::rng::Stream::Sample);
    let mut stream = build_training_sequence(partial, &empty, 0.0, max_seq_len, &mut rng)?;
    // Drop the complete segment's END; generation will produce it.
    stream.coords.pop();
    stream.values.pop();
    stream.segments.pop();
    stream.loss_mask.pop();
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn seq(entries: &[(u32, u32)]) -> SparseSeq {
        SparseSeq::new(entries.to_vec(), 4, 8).unwrap()
    }

    #[test]
    fn layout_and_loss_mask_counts() {
        let p = seq(&[(1, 2), (5, 3)]);
        let c = seq(&[(0, 1), (7, 4), (9, 5)]);
        let mut rng = stream_rng(1, Stream::Train);
        let s = build_training_sequence(&p, &c, 0.0, 64, &mut rng).unwrap();
        assert_eq!(s.len(), 2 + 1 + 3 + 1);
        assert_eq!(s.loss_count(), 4);
        // END coordinate sentinel closes both segments.
        assert_eq!(s.coords[2], end_coord(4));
        assert_eq!(s.coords[6], end_coord(4));
        assert_eq!(s.values[2], pad_value(8));
        // Loss positions are exactly 2..=5.
        assert_eq!(s.loss_mask, vec![false, false, true, true, true, true, false]);
        // Value loss skips the END-predicting position (5).
        assert_eq!(s.value_loss_mask(), vec![false, false, true, true, true, false, false]);
        assert_eq!(s.segments, vec![0, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn full_masking_leaves_only_the_end_sentinel() {
        let p = seq(&[(1, 2), (5, 3), (8, 0)]);
        let c = seq(&[(0, 1)]);
        let mut rng = stream_rng(2, Stream::Train);
        let s = build_training_sequence(&p, &c, 1.0, 64, &mut rng).unwrap();
        assert_eq!(s.len(), 1 + 1 + 1);
        assert_eq!(s.coords[0], end_coord(4));
    }

    #[test]
    fn masking_rate_matches_binomial_mean() {
        let entries: Vec<(u32, u32)> = (0..10).map(|i| (i as u32 * 3, 1)).collect();
        let p = SparseSeq::new(entries, 4, 8).unwrap();
        let c = seq(&[(0, 1)]);
        let mut rng = stream_rng(3, Stream::Train);
        let trials = 10_000;
        let mut kept_total = 0usize;
        for _ in 0..trials {
            let s = build_training_sequence(&p, &c, 0.3, 64, &mut rng).unwrap();
            kept_total += s.len() - 3;
        }
        let mean_kept = kept_total as f64 / trials as f64;
        assert!(
            (mean_kept - 7.0).abs() < 0.15,
            "mean kept {mean_kept}, binomial expects 7"
        );
    }

    #[test]
    fn over_length_streams_are_rejected() {
        let p = seq(&[(1, 2), (5, 3)]);
        let c = seq(&[(0, 1), (7, 4), (9, 5)]);
        let mut rng = stream_rng(4, Stream::Train);
        let err = build_training_sequence(&p, &c, 0.0, 6, &mut rng).unwrap_err();
        assert!(matches!(err, Error::SequenceTooLong { len: 7, max: 6 }));
    }

    #[test]
    fn mismatched_geometry_is_rejected() {
        let p = seq(&[(1, 2)]);
        let c = SparseSeq::new(vec![(0, 1)], 8, 8).unwrap();
        let mut rng = stream_rng(5, Stream::Train);
        assert!(build_training_sequence(&p, &c, 0.0, 64, &mut rng).is_err());
    }
}
