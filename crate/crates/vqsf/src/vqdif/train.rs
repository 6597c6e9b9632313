//! The combined training objective: occupancy reconstruction plus the
//! weighted commitment term, with a straight-through gradient across the
//! quantizer and an EMA codebook update after each optimizer step.

use rand_pcg::Pcg64;

use super::model::{decode_feature_grid, encode_features, query_logits, Vqdif};
use crate::autodiff::ParamBinder as Binder;
use crate::autodiff::{Adam, Element, Graph, Tensor};
use crate::geometry::PointCloud;
use crate::{Error, Result};

/// One training example: a cloud plus occupancy supervision.
pub struct TrainItem<'a> {
    pub cloud: &'a PointCloud,
    pub queries: &'a [[f64; 3]],
    pub occupancies: &'a [f64],
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VqdifLosses {
    pub bce: f64,
    pub commit: f64,
    pub total: f64,
}

impl<E: Element> Vqdif<E> {
    /// One gradient step over a batch. Decoder input crosses the quantizer
    /// via the straight-through estimator `z + sg(e - z)`, the commitment
    /// term pulls `z` toward its (stop-gradient) codebook entry, and the
    /// EMA update runs after the Adam step.
    pub fn train_step(
        &mut self,
        batch: &[TrainItem],
        adam: &mut Adam<E>,
        lr: f64,
        rng: &mut Pcg64,
    ) -> Result<VqdifLosses> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let mut g = Graph::new();
        let mut binder = Binder::new(&self.params, true);
        let mut batch_z: Vec<E> = Vec::new();
        let mut batch_assignments: Vec<usize> = Vec::new();
        let mut sample_totals = Vec::with_capacity(batch.len());
        let mut losses = VqdifLosses::default();
        for item in batch {
            if item.queries.len() != item.occupancies.len() {
                return Err(Error::ShapeMismatch {
                    op: "vqdif_train_step",
                    detail: format!(
                        "{} queries vs {} occupancies",
                        item.queries.len(),
                        item.occupancies.len()
                    ),
                });
            }
            let (kept, z) = encode_features(&mut g, &mut binder, &self.config, item.cloud)?;
            let z_data = g.value(z).data().to_vec();
            let assignments = self.codebook.quantize_rows(&z_data)?;
            let k = kept.len();
            let d = self.config.feature_dim;
            let mut e_rows = Vec::with_capacity(k * d);
            for &v in &assignments {
                e_rows.extend_from_slice(self.codebook.entry(v));
            }
            // Straight-through: value e, gradient to z.
            let residual: Vec<E> = e_rows
                .iter()
                .zip(&z_data)
                .map(|(&e, &zv)| e - zv)
                .collect();
            let residual = g.constant(Tensor::new(vec![k, d], residual))?;
            let st = g.add(z, residual)?;
            let grid = decode_feature_grid(&mut g, &mut binder, &self.config, &kept, st)?;
            let logits = query_logits(&mut g, &mut binder, &self.config, grid, item.queries)?;
            let bce = g.bce_with_logits(logits, item.occupancies)?;
            let e_const = g.constant(Tensor::new(vec![k, d], e_rows))?;
            let diff = g.sub(z, e_const)?;
            let sq = g.mul(diff, diff)?;
            let sum_sq = g.sum_all(sq)?;
            let commit = g.scale(sum_sq, 1.0 / k as f64)?;
            let weighted = g.scale(commit, self.config.beta)?;
            let total = g.add(bce, weighted)?;
            losses.bce += g.value(bce).scalar_value().as_f64();
            losses.commit += g.value(commit).scalar_value().as_f64();
            losses.total += g.value(total).scalar_value().as_f64();
            sample_totals.push(total);
            batch_z.extend_from_slice(&z_data);
            batch_assignments.extend_from_slice(&assignments);
        }
        let b = batch.len() as f64;
        losses.bce /= b;
        losses.commit /= b;
        losses.total /= b;
        if !losses.total.is_finite() {
            return Err(Error::Divergence {
                step: adam.step_count() as usize,
                detail: format!("loss {}", losses.total),
            });
        }
        let mut loss = sample_totals[0];
        for &t in &sample_totals[1..] {
            loss = g.add(loss, t)?;
        }
        let loss = g.scale(loss, 1.0 / b)?;
        g.backward(loss)?;
        let grads: Vec<(&str, &[E])> = g.named_grads().collect();
        adam.step(&mut self.params, &grads, lr)?;
        self.codebook.ema_update(&batch_z, &batch_assignments, rng)?;
        Ok(losses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::AdamConfig;
    use crate::geometry::{sample_occupancy_targets, ImplicitShape, SurfaceSampler};
    use crate::rng::{indexed_rng, stream_rng, Stream};
    use crate::vqdif::VqdifConfig;

    fn tiny_config() -> VqdifConfig {
        VqdifConfig {
            base_resolution: 8,
            feature_resolution: 4,
            point_feature_dim: 8,
            feature_dim: 8,
            codebook_size: 16,
            encoder_channels: vec![8],
            unet_channels: vec![8, 16],
            upsampler_channels: vec![8],
            upsampler_kernels: vec![3],
            implicit_hidden: vec![16, 16],
            ..VqdifConfig::default()
        }
    }

    fn tiny_batch() -> (PointCloud, Vec<[f64; 3]>, Vec<f64>) {
        let shape = ImplicitShape::sphere([0.5, 0.5, 0.5], 0.25).unwrap();
        let sampler = SurfaceSampler::new(&shape).unwrap();
        let mut rng = indexed_rng(3, Stream::Data, 77);
        let cloud = sampler.sample(256, &mut rng).unwrap();
        let targets = sample_occupancy_targets(&sampler, 128, 0.01, 0.05, 0.3, &mut rng).unwrap();
        let occ: Vec<f64> = targets.occupied.iter().map(|&o| f64::from(o)).collect();
        (cloud, targets.points, occ)
    }

    #[test]
    fn beta_zero_makes_total_equal_bce() {
        let mut config = tiny_config();
        config.beta = 0.0;
        let mut model = Vqdif::<f64>::new(config, 1).unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(1e-3));
        let mut rng = stream_rng(1, Stream::Codebook);
        let (cloud, queries, occ) = tiny_batch();
        let item = TrainItem {
            cloud: &cloud,
            queries: &queries,
            occupancies: &occ,
        };
        let losses = model.train_step(&[item], &mut adam, 1e-3, &mut rng).unwrap();
        assert_eq!(losses.total, losses.bce);
        assert!(losses.commit >= 0.0);
    }

    #[test]
    fn straight_through_reaches_encoder_params() {
        // With beta = 0 the only path to the encoder crosses the quantizer;
        // a successful step must still move encoder weights.
        let mut config = tiny_config();
        config.beta = 0.0;
        let mut model = Vqdif::<f64>::new(config, 2).unwrap();
        let before = model.params.get("vqdif/encoder/point0/w").unwrap().clone();
        let mut adam = Adam::new(AdamConfig::with_lr(1e-2));
        let mut rng = stream_rng(2, Stream::Codebook);
        let (cloud, queries, occ) = tiny_batch();
        let item = TrainItem {
            cloud: &cloud,
            queries: &queries,
            occupancies: &occ,
        };
        model.train_step(&[item], &mut adam, 1e-2, &mut rng).unwrap();
        let after = model.params.get("vqdif/encoder/point0/w").unwrap();
        let moved = before
            .data()
            .iter()
            .zip(after.data())
            .any(|(a, b)| (a - b).abs() > 1e-9);
        assert!(moved, "encoder parameters did not move");
    }

    #[test]
    fn loss_decreases_when_overfitting_one_cloud() {
        let mut model = Vqdif::<f64>::new(tiny_config(), 3).unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(3e-3));
        let mut rng = stream_rng(3, Stream::Codebook);
        let (cloud, queries, occ) = tiny_batch();
        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..60 {
            let item = TrainItem {
                cloud: &cloud,
                queries: &queries,
                occupancies: &occ,
            };
            let losses = model.train_step(&[item], &mut adam, 3e-3, &mut rng).unwrap();
            if step == 0 {
                first = losses.total;
            }
            last = losses.total;
        }
        assert!(
            last < first * 0.8,
            "loss should drop while overfitting: first {first}, last {last}"
        );
    }
}
