//! The learned dictionary of feature embeddings with exponential
//! moving-average updates.

use rand::RngExt;
use rand_distr::StandardNormal;
use rand_pcg::Pcg64;

use crate::autodiff::Element;
use crate::{Error, Result};

/// V x D embedding table plus EMA accumulators. Entries are never updated
/// by gradients; `ema_update` pulls them toward the features assigned to
/// them, and entries that stay unused for too long are reseeded onto a
/// random batch feature.
#[derive(Debug, Clone)]
pub struct Codebook<E: Element> {
    embeddings: Vec<E>,
    ema_count: Vec<E>,
    ema_sum: Vec<E>,
    unused_steps: Vec<u32>,
    vocab: usize,
    dim: usize,
    pub decay: f64,
    pub epsilon: f64,
    pub dead_steps: u32,
}

impl<E: Element> Codebook<E> {
    pub fn init(vocab: usize, dim: usize, decay: f64, epsilon: f64, dead_steps: u32, rng: &mut Pcg64) -> Self {
        let embeddings: Vec<E> = (0..vocab * dim)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                E::from_f64(z * 0.1)
            })
            .collect();
        // Accumulators start consistent with e_j = m_j / N_j at N_j = 1.
        let ema_sum = embeddings.clone();
        Codebook {
            embeddings,
            ema_count: vec![E::one(); vocab],
            ema_sum,
            unused_steps: vec![0; vocab],
            vocab,
            dim,
            decay,
            epsilon,
            dead_steps,
        }
    }

    pub fn from_parts(
        embeddings: Vec<E>,
        ema_count: Vec<E>,
        ema_sum: Vec<E>,
        decay: f64,
        epsilon: f64,
        dead_steps: u32,
    ) -> Result<Self> {
        let vocab = ema_count.len();
        if vocab == 0 || embeddings.len() % vocab != 0 || embeddings.len() != ema_sum.len() {
            return Err(Error::CheckpointMismatch(format!(
                "inconsistent codebook sizes: e={}, N={}, m={}",
                embeddings.len(),
                vocab,
                ema_sum.len()
            )));
        }
        let dim = embeddings.len() / vocab;
        Ok(Codebook {
            embeddings,
            ema_count,
            ema_sum,
            unused_steps: vec![0; vocab],
            vocab,
            dim,
            decay,
            epsilon,
            dead_steps,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embeddings(&self) -> &[E] {
        &self.embeddings
    }

    pub fn ema_count(&self) -> &[E] {
        &self.ema_count
    }

    pub fn ema_sum(&self) -> &[E] {
        &self.ema_sum
    }

    pub fn entry(&self, j: usize) -> &[E] {
        &self.embeddings[j * self.dim..(j + 1) * self.dim]
    }

    /// Index of the nearest entry by L2 distance; ties go to the lowest
    /// index.
    pub fn quantize(&self, z: &[E]) -> Result<usize> {
        if z.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "quantize",
                detail: format!("feature dim {} vs codebook dim {}", z.len(), self.dim),
            });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "quantize input".into(),
            });
        }
        let mut best = 0usize;
        let mut best_d = E::infinity();
        for j in 0..self.vocab {
            let e = self.entry(j);
            let mut d = E::zero();
            for (&zi, &ei) in z.iter().zip(e) {
                let diff = zi - ei;
                d = d + diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        Ok(best)
    }

    /// Quantizes each row of a K x D feature matrix.
    pub fn quantize_rows(&self, z: &[E]) -> Result<Vec<usize>> {
        z.chunks(self.dim).map(|row| self.quantize(row)).collect()
    }

    /// One EMA step over a batch of assigned features:
    /// `N_j <- g*N_j + (1-g)*count_j`, `m_j <- g*m_j + (1-g)*sum_j`,
    /// `e_j <- m_j / max(N_j, eps)`. Afterwards, entries unused for
    /// `dead_steps` consecutive updates are reseeded to a random batch
    /// feature.
    pub fn ema_update(&mut self, z: &[E], assignments: &[usize], rng: &mut Pcg64) -> Result<()> {
        if z.len() != assignments.len() * self.dim {
            return Err(Error::ShapeMismatch {
                op: "ema_update",
                detail: format!("{} features vs {} assignments", z.len() / self.dim, assignments.len()),
            });
        }
        let g = E::from_f64(self.decay);
        let one_m_g = E::from_f64(1.0 - self.decay);
        let mut counts = vec![0u64; self.vocab];
        let mut sums = vec![E::zero(); self.vocab * self.dim];
        for (row, &j) in z.chunks(self.dim).zip(assignments) {
            counts[j] += 1;
            let acc = &mut sums[j * self.dim..(j + 1) * self.dim];
            for (a, &v) in acc.iter_mut().zip(row) {
                *a = *a + v;
            }
        }
        let eps = E::from_f64(self.epsilon);
        for j in 0..self.vocab {
            self.ema_count[j] = g * self.ema_count[j] + one_m_g * E::from_f64(counts[j] as f64);
            let denom = self.ema_count[j].max(eps);
            let m = &mut self.ema_sum[j * self.dim..(j + 1) * self.dim];
            let e = &mut self.embeddings[j * self.dim..(j + 1) * self.dim];
            let s = &sums[j * self.dim..(j + 1) * self.dim];
            for ((mi, ei), &si) in m.iter_mut().zip(e.iter_mut()).zip(s) {
                *mi = g * *mi + one_m_g * si;
                *ei = *mi / denom;
            }
            if counts[j] == 0 {
                self.unused_steps[j] += 1;
            } else {
                self.unused_steps[j] = 0;
            }
        }
        if !assignments.is_empty() {
            let n_rows = assignments.len();
            for j in 0..self.vocab {
                if self.unused_steps[j] >= self.dead_steps {
                    let pick = rng.random_range(0..n_rows);
                    let row = &z[pick * self.dim..(pick + 1) * self.dim];
                    let e = &mut self.embeddings[j * self.dim..(j + 1) * self.dim];
                    e.copy_from_slice(row);
                    let m = &mut self.ema_sum[j * self.dim..(j + 1) * self.dim];
                    m.copy_from_slice(row);
                    self.ema_count[j] = E::one();
                    self.unused_steps[j] = 0;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{indexed_rng, stream_rng, Stream};

    fn book(vocab: usize, dim: usize, decay: f64) -> Codebook<f64> {
        let mut rng = stream_rng(11, Stream::Init);
        Codebook::init(vocab, dim, decay, 1e-5, 200, &mut rng)
    }

    #[test]
    fn quantize_matches_hand_cases() {
        let cb = Codebook::from_parts(
            vec![0.0, 0.0, 1.0, 1.0],
            vec![1.0, 1.0],
            vec![0.0, 0.0, 1.0, 1.0],
            0.99,
            1e-5,
            200,
        )
        .unwrap();
        assert_eq!(cb.quantize(&[0.2, 0.1]).unwrap(), 0);
        assert_eq!(cb.quantize(&[1.0, 1.0]).unwrap(), 1);
        // Equidistant: lowest index wins.
        assert_eq!(cb.quantize(&[0.5, 0.5]).unwrap(), 0);
        assert!(cb.quantize(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn quantize_matches_exhaustive_scan() {
        let cb = book(64, 8, 0.99);
        let mut rng = indexed_rng(3, Stream::Data, 9);
        for _ in 0..1000 {
            let z: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = cb.quantize(&z).unwrap();
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for j in 0..64 {
                let d: f64 = cb.entry(j).iter().zip(&z).map(|(e, zi)| (zi - e) * (zi - e)).sum();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            assert_eq!(fast, best);
        }
    }

    #[test]
    fn zero_decay_is_a_kmeans_step() {
        let mut cb = book(2, 2, 0.0);
        let mut rng = stream_rng(0, Stream::Codebook);
        let z = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        cb.ema_update(&z, &[0, 0, 1], &mut rng).unwrap();
        // Entry 0 <- mean of first two rows, entry 1 <- third row.
        assert!((cb.entry(0)[0] - 2.0).abs() < 1e-12);
        assert!((cb.entry(0)[1] - 3.0).abs() < 1e-12);
        assert!((cb.entry(1)[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn unassigned_entries_drift_only_by_count_decay() {
        let mut cb = book(2, 2, 0.9);
        let mut rng = stream_rng(0, Stream::Codebook);
        let before = cb.entry(1).to_vec();
        cb.ema_update(&[0.5, 0.5], &[0], &mut rng).unwrap();
        // m and N both scale by gamma, so e = m / N is unchanged while the
        // count stays above epsilon.
        for (a, b) in cb.entry(1).iter().zip(&before) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn ema_converges_to_cluster_means() {
        let mut cb = book(4, 3, 0.9);
        let mut rng = stream_rng(5, Stream::Codebook);
        let means = [
            [1.0, 0.0, -1.0],
            [-2.0, 0.5, 0.0],
            [0.0, 3.0, 1.0],
            [2.0, -1.0, 2.0],
        ];
        let mut noise = indexed_rng(6, Stream::Data, 0);
        for _ in 0..500 {
            let mut z = Vec::new();
            let mut assign = Vec::new();
            for (j, m) in means.iter().enumerate() {
                for _ in 0..3 {
                    for &c in m {
                        z.push(c + noise.random_range(-0.002..0.002));
                    }
                    assign.push(j);
                }
            }
            cb.ema_update(&z, &assign, &mut rng).unwrap();
        }
        for (j, m) in means.iter().enumerate() {
            let err: f64 = cb
                .entry(j)
                .iter()
                .zip(m)
                .map(|(e, c)| (e - c) * (e - c))
                .sum::<f64>()
                .sqrt();
            assert!(err < 1e-3, "entry {j} err {err}");
        }
    }

    #[test]
    fn dead_entries_reseed_onto_batch_features() {
        let mut cb = book(3, 2, 0.9);
        cb.dead_steps = 5;
        let mut rng = stream_rng(9, Stream::Codebook);
        // Only entry 0 ever gets assignments.
        for _ in 0..10 {
            cb.ema_update(&[7.0, 7.0], &[0], &mut rng).unwrap();
        }
        // Entries 1 and 2 must have been reseeded to the only batch row.
        assert!((cb.entry(1)[0] - 7.0).abs() < 1e-12);
        assert!((cb.entry(2)[0] - 7.0).abs() < 1e-12);
    }
}
