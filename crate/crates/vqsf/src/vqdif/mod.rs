//! The sparse quantized shape autoencoder.
//!
//! A point cloud becomes a short sequence of `(cell index, codebook index)`
//! tuples: the encoder pools per-point features into a base grid, strided
//! kernel=stride convolutions shrink it to the feature resolution without
//! growing the receptive field past one cell, occupied-cell features are
//! quantized against a learned codebook, and a U-Net decoder turns the
//! sequence back into an implicit occupancy function queryable anywhere.

mod codebook;
mod model;
mod seq;
mod train;

pub use codebook::Codebook;
pub use model::{Vqdif, VqdifConfig};
pub use seq::{SparseSeq, SEQ_MAGIC};
pub use train::{TrainItem, VqdifLosses};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sample_surface, voxelize, ImplicitShape, PointCloud};
    use crate::rng::{indexed_rng, Stream};
    use rand::RngExt;

    fn small_config() -> VqdifConfig {
        VqdifConfig {
            base_resolution: 16,
            feature_resolution: 8,
            point_feature_dim: 8,
            feature_dim: 8,
            codebook_size: 32,
            encoder_channels: vec![8],
            unet_channels: vec![8, 16],
            upsampler_channels: vec![8],
            upsampler_kernels: vec![3],
            implicit_hidden: vec![16],
            ..VqdifConfig::default()
        }
    }

    fn random_cloud(n: usize, tag: u64) -> PointCloud {
        let mut rng = indexed_rng(17, Stream::Data, tag);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(0.05..0.95),
                        rng.random_range(0.05..0.95),
                        rng.random_range(0.05..0.95),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn sequence_length_equals_voxel_count() {
        let model = Vqdif::<f32>::new(small_config(), 5).unwrap();
        for tag in 0..6 {
            let cloud = random_cloud(200, tag);
            let (seq, z) = model.encode(&cloud).unwrap();
            let expected = voxelize(&cloud, 8).unwrap().len();
            assert_eq!(seq.len(), expected);
            assert_eq!(z.len(), expected * 8);
        }
    }

    #[test]
    fn raveling_follows_row_major_convention() {
        // One point in cell (1,2,3) of an 8-grid: index 1*64 + 2*8 + 3.
        let model = Vqdif::<f32>::new(small_config(), 5).unwrap();
        let cloud = PointCloud::new(vec![[1.5 / 8.0, 2.5 / 8.0, 3.5 / 8.0]]).unwrap();
        let (seq, _) = model.encode(&cloud).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq.entries()[0].0, 83);
    }

    #[test]
    fn features_are_local_to_their_cell() {
        // Two clouds identical inside one feature cell and different far
        // away must produce bit-identical features for that cell.
        let model = Vqdif::<f64>::new(small_config(), 6).unwrap();
        let shared: Vec<[f64; 3]> = vec![
            [0.1, 0.1, 0.1],
            [0.11, 0.12, 0.1],
            [0.09, 0.1, 0.12],
        ];
        let mut a_pts = shared.clone();
        a_pts.push([0.8, 0.8, 0.8]);
        let mut b_pts = shared.clone();
        b_pts.push([0.85, 0.6, 0.7]);
        b_pts.push([0.62, 0.88, 0.9]);
        let a = PointCloud::new(a_pts).unwrap();
        let b = PointCloud::new(b_pts).unwrap();
        let (seq_a, za) = model.encode(&a).unwrap();
        let (seq_b, zb) = model.encode(&b).unwrap();
        // Cell 0 holds the shared points in both clouds.
        let ca = seq_a.coords().next().unwrap();
        let cb = seq_b.coords().next().unwrap();
        assert_eq!(ca, cb);
        let d = model.config.feature_dim;
        assert_eq!(&za[..d], &zb[..d], "shared-cell features must match exactly");
        // And the far-away features differ.
        assert_ne!(&za[d..], &zb[d..]);
    }

    #[test]
    fn decode_handles_empty_sequence() {
        let model = Vqdif::<f32>::new(small_config(), 7).unwrap();
        let seq = SparseSeq::empty(8, 32);
        let probs = model
            .decode(&seq, &[[0.5, 0.5, 0.5], [0.1, 0.9, 0.3]])
            .unwrap();
        assert_eq!(probs.len(), 2);
        for p in probs {
            assert!(p.is_finite() && (0.0..1.0).contains(&p));
        }
        // Reconstruction of an empty sequence must not crash.
        let mesh = model.reconstruct(&seq, 16).unwrap();
        let _ = mesh.is_empty();
    }

    #[test]
    fn decode_outputs_stay_in_open_unit_interval() {
        let model = Vqdif::<f32>::new(small_config(), 8).unwrap();
        let cloud = random_cloud(100, 30);
        let (seq, _) = model.encode(&cloud).unwrap();
        let mut rng = indexed_rng(2, Stream::Data, 31);
        let queries: Vec<[f64; 3]> = (0..200)
            .map(|_| {
                [
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                ]
            })
            .collect();
        for p in model.decode(&seq, &queries).unwrap() {
            assert!((0.0..1.0).contains(&p) && p > 0.0);
        }
    }

    #[test]
    fn query_outside_cube_is_an_error() {
        let model = Vqdif::<f32>::new(small_config(), 9).unwrap();
        let seq = SparseSeq::empty(8, 32);
        assert!(model.decode(&seq, &[[1.2, 0.5, 0.5]]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_behavior() {
        let model = Vqdif::<f32>::new(small_config(), 10).unwrap();
        let mut ck = crate::checkpoint::Checkpoint::new();
        model.save_into(&mut ck);
        let bytes = ck.to_bytes();
        let back = crate::checkpoint::Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        let loaded = Vqdif::<f32>::load_from(&back, small_config()).unwrap();
        let cloud = random_cloud(150, 44);
        let (seq_a, za) = model.encode(&cloud).unwrap();
        let (seq_b, zb) = loaded.encode(&cloud).unwrap();
        assert_eq!(seq_a, seq_b);
        assert_eq!(za, zb);
        // Save -> load -> save is byte-identical.
        let mut ck2 = crate::checkpoint::Checkpoint::new();
        loaded.save_into(&mut ck2);
        assert_eq!(bytes, ck2.to_bytes());
    }

    #[test]
    fn mismatched_sequence_is_rejected() {
        let model = Vqdif::<f32>::new(small_config(), 11).unwrap();
        let seq = SparseSeq::empty(16, 32);
        assert!(model.decode(&seq, &[[0.5, 0.5, 0.5]]).is_err());
    }

    #[test]
    fn shell_voxel_count_grows_quadratically() {
        // K ~ R^2 for a surface shell: fit log K against log R.
        let s = ImplicitShape::sphere([0.5, 0.5, 0.5], 0.3).unwrap();
        let cloud = sample_surface(&s, 100_000, 12).unwrap();
        let mut logs = Vec::new();
        for r in [4usize, 8, 16, 32] {
            let k = voxelize(&cloud, r).unwrap().len();
            logs.push(((r as f64).ln(), (k as f64).ln()));
        }
        let n = logs.len() as f64;
        let sx: f64 = logs.iter().map(|(x, _)| x).sum();
        let sy: f64 = logs.iter().map(|(_, y)| y).sum();
        let sxx: f64 = logs.iter().map(|(x, _)| x * x).sum();
        let sxy: f64 = logs.iter().map(|(x, y)| x * y).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        assert!(
            (slope - 2.0).abs() < 0.3,
            "shell growth slope {slope} should be ~2"
        );
    }
}
