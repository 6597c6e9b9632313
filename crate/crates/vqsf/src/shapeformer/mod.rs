//! Autoregressive shape completion over sparse quantized sequences.

mod model;
mod sample;
pub mod tokens;
mod train;

pub use model::{NextElementDistribution, ShapeFormer, ShapeFormerConfig};
pub use sample::{top_p_filter, Completion};
pub use tokens::{build_training_sequence, prefix_stream, TokenStream};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Adam, AdamConfig};
    use crate::rng::{indexed_rng, stream_rng, Stream};
    use crate::vqdif::SparseSeq;
    use rand::RngExt;

    fn tiny_config() -> ShapeFormerConfig {
        ShapeFormerConfig {
            resolution: 4,
            vocab: 8,
            blocks_coord: 2,
            blocks_value: 1,
            heads: 2,
            embed_dim: 32,
            max_seq_len: 48,
            dropout: 0.0,
            mask_prob: 0.0,
        }
    }

    fn seq(entries: &[(u32, u32)]) -> SparseSeq {
        SparseSeq::new(entries.to_vec(), 4, 8).unwrap()
    }

    fn stream(p: &SparseSeq, c: &SparseSeq) -> TokenStream {
        let mut rng = stream_rng(0, Stream::Train);
        build_training_sequence(p, c, 0.0, 48, &mut rng).unwrap()
    }

    #[test]
    fn distributions_are_normalized() {
        let model = ShapeFormer::<f64>::new(tiny_config(), 1).unwrap();
        let s = stream(&seq(&[(1, 2), (5, 3)]), &seq(&[(0, 1), (7, 4)]));
        let dists = model.forward(&s).unwrap();
        assert_eq!(dists.len(), s.len());
        for d in &dists {
            assert_eq!(d.p_coord.len(), 4 * 4 * 4 + 1);
            assert_eq!(d.p_value.len(), 8);
            let sc: f64 = d.p_coord.iter().sum();
            let sv: f64 = d.p_value.iter().sum();
            assert!((sc - 1.0).abs() < 1e-6);
            assert!((sv - 1.0).abs() < 1e-6);
            assert!(d.p_coord.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn causality_exact_prefix_invariance() {
        // Changing the stream after position j must not change any
        // distribution at positions < j, bit for bit.
        let model = ShapeFormer::<f64>::new(tiny_config(), 2).unwrap();
        let base = stream(&seq(&[(1, 2), (5, 3)]), &seq(&[(0, 1), (7, 4), (9, 5)]));
        let dists = model.forward(&base).unwrap();
        let mut rng = indexed_rng(3, Stream::Train, 0);
        for j in 1..base.len() {
            let mut perturbed = base.clone();
            perturbed.coords[j] = rng.random_range(0..4 * 4 * 4);
            perturbed.values[j] = rng.random_range(0..8);
            let pd = model.forward(&perturbed).unwrap();
            for i in 0..j {
                assert_eq!(dists[i].p_coord, pd[i].p_coord, "p_c at {i} changed by edit at {j}");
            }
            // The value distribution at j-1 depends on the next coordinate
            // (that is the factorization), so compare only up to j-2.
            for i in 0..j.saturating_sub(1) {
                assert_eq!(dists[i].p_value, pd[i].p_value, "p_v at {i} changed by edit at {j}");
            }
        }
    }

    #[test]
    fn value_distribution_conditions_on_current_coordinate() {
        // p_v at a position changes when the next coordinate changes;
        // p_c at that position does not (it is predicted first).
        let model = ShapeFormer::<f64>::new(tiny_config(), 3).unwrap();
        let a = stream(&seq(&[(1, 2)]), &seq(&[(0, 1), (7, 4)]));
        let mut b = a.clone();
        // Positions: [p0, ENDp, c0, c1, ENDc]; edit c1's coordinate (pos 3).
        b.coords[3] = 12;
        let da = model.forward(&a).unwrap();
        let db = model.forward(&b).unwrap();
        // Position 2 predicts element at 3: its value head sees the next
        // coordinate, its coord head does not.
        assert_eq!(da[2].p_coord, db[2].p_coord);
        assert_ne!(da[2].p_value, db[2].p_value);
    }

    #[test]
    fn single_token_attention_is_identity_softmax() {
        // A length-1 stream still produces a valid distribution pair.
        let model = ShapeFormer::<f64>::new(tiny_config(), 4).unwrap();
        let mut s = stream(&seq(&[]), &seq(&[]));
        s.coords.truncate(1);
        s.values.truncate(1);
        s.segments.truncate(1);
        s.loss_mask.truncate(1);
        let d = model.forward(&s).unwrap();
        assert_eq!(d.len(), 1);
        let sc: f64 = d[0].p_coord.iter().sum();
        assert!((sc - 1.0).abs() < 1e-6);
    }

    #[test]
    fn nll_matches_analytic_uniform_bound() {
        // With an untrained model forced to uniform outputs (zeroed heads),
        // nll per tuple position is ln n_c + ln n_v and the END position
        // contributes ln n_c.
        let mut model = ShapeFormer::<f64>::new(tiny_config(), 5).unwrap();
        for name in ["shapeformer/head_c1/w", "shapeformer/head_c1/b", "shapeformer/head_v1/w", "shapeformer/head_v1/b"] {
            let shape = model.params.get(name).unwrap().shape().to_vec();
            model.params.insert(name, crate::autodiff::Tensor::zeros(shape));
        }
        let p = seq(&[(1, 2)]);
        let c = seq(&[(0, 1), (7, 4)]);
        let s = stream(&p, &c);
        let n_c = (4 * 4 * 4 + 1) as f64;
        let n_v = 8.0f64;
        // Loss positions: 2 tuples + END; value term on the 2 tuples.
        let expected = (3.0 * n_c.ln() + 2.0 * n_v.ln()) / 3.0;
        let got = model.nll(&s).unwrap();
        assert!((got - expected).abs() < 1e-9, "got {got}, expected {expected}");
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let model = ShapeFormer::<f64>::new(tiny_config(), 6).unwrap();
        let s = stream(&seq(&[(1, 2)]), &seq(&[(0, 1), (7, 4)]));
        // Check a couple of parameters end to end.
        for pname in ["shapeformer/head_c1/b", "shapeformer/emb/coord"] {
            let mut g = crate::autodiff::Graph::new();
            let mut binder = crate::autodiff::ParamBinder::new(&model.params, true);
            let node = model.nll_node(&mut g, &mut binder, &s, None).unwrap();
            g.backward(node).unwrap();
            let grad: Vec<f64> = g
                .named_grads()
                .find(|(n, _)| *n == pname)
                .map(|(_, g)| g.to_vec())
                .unwrap();
            let h = 1e-5;
            let mut worst = 0.0f64;
            for elem in (0..grad.len()).step_by((grad.len() / 5).max(1)) {
                let mut plus = ShapeFormer::<f64> {
                    config: model.config.clone(),
                    params: model.params.clone(),
                };
                plus.params.get_mut(pname).unwrap().data_mut()[elem] += h;
                let mut minus = ShapeFormer::<f64> {
                    config: model.config.clone(),
                    params: model.params.clone(),
                };
                minus.params.get_mut(pname).unwrap().data_mut()[elem] -= h;
                let numeric = (plus.nll(&s).unwrap() - minus.nll(&s).unwrap()) / (2.0 * h);
                let a = grad[elem];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                worst = worst.max(rel);
            }
            assert!(worst < 1e-5, "{pname}: max rel err {worst}");
        }
    }

    #[test]
    fn sampled_sequences_are_strictly_increasing_and_terminate() {
        let model = ShapeFormer::<f64>::new(tiny_config(), 7).unwrap();
        let partial = seq(&[(3, 1), (10, 2)]);
        let mut rng = stream_rng(8, Stream::Sample);
        for trial in 0..32 {
            let p = [0.0, 0.4, 0.9, 1.0][trial % 4];
            let done = model.sample_completion(&partial, p, 20, &mut rng).unwrap();
            let coords: Vec<u32> = done.seq.coords().collect();
            assert!(coords.windows(2).all(|w| w[0] < w[1]), "coords {coords:?}");
            assert!(coords.iter().all(|&c| c < 64));
            assert!(done.seq.len() <= 20);
        }
    }

    #[test]
    fn forced_replay_matches_teacher_forced_nll() {
        let model = ShapeFormer::<f64>::new(tiny_config(), 9).unwrap();
        let p = seq(&[(1, 2), (5, 3)]);
        let c = seq(&[(0, 1), (7, 4), (20, 6)]);
        let via_stream = model.nll(&stream(&p, &c)).unwrap();
        let via_replay = model.forced_nll(&p, &c).unwrap();
        assert!(
            (via_stream - via_replay).abs() < 1e-5,
            "stream {via_stream} vs replay {via_replay}"
        );
    }

    #[test]
    fn training_reduces_nll_on_a_fixed_pair() {
        let mut model = ShapeFormer::<f64>::new(tiny_config(), 10).unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(1e-3));
        let mut rng = stream_rng(11, Stream::Train);
        let p = seq(&[(1, 2)]);
        let c = seq(&[(0, 1), (7, 4)]);
        let first = model.train_step(&[(&p, &c)], &mut adam, 1e-3, &mut rng).unwrap();
        let mut last = first;
        for _ in 0..40 {
            last = model.train_step(&[(&p, &c)], &mut adam, 1e-3, &mut rng).unwrap();
        }
        assert!(last < first * 0.7, "nll should drop: first {first}, last {last}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = ShapeFormer::<f32>::new(tiny_config(), 12).unwrap();
        let mut ck = crate::checkpoint::Checkpoint::new();
        model.save_into(&mut ck);
        let loaded = ShapeFormer::<f32>::load_from(&ck, tiny_config()).unwrap();
        let s = stream(&seq(&[(1, 2)]), &seq(&[(0, 1)]));
        assert_eq!(model.nll(&s).unwrap(), loaded.nll(&s).unwrap());
        // Geometry mismatch is a hard error naming both sides.
        let mut other = tiny_config();
        other.resolution = 8;
        let err = ShapeFormer::<f32>::load_from(&ck, other).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("R=4") && msg.contains("R=8"), "{msg}");
    }
}
