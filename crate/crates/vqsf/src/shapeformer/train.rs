//! Negative log-likelihood training over (partial, complete) pairs.

use rand_pcg::Pcg64;

use super::model::ShapeFormer;
use super::tokens::build_training_sequence;
use crate::autodiff::{Adam, Element, Graph, ParamBinder};
use crate::vqdif::SparseSeq;
use crate::{Error, Result};

impl<E: Element> ShapeFormer<E> {
    /// One Adam step on the mean nll over a batch of sequence pairs. The
    /// partial segment of each pair is randomly thinned with the
    /// configured mask probability (augmentation); dropout, when enabled,
    /// draws from the same generator.
    pub fn train_step(
        &mut self,
        batch: &[(&SparseSeq, &SparseSeq)],
        adam: &mut Adam<E>,
        lr: f64,
        rng: &mut Pcg64,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let mut g = Graph::new();
        let mut binder = ParamBinder::new(&self.params, true);
        let mut nlls = Vec::with_capacity(batch.len());
        for (partial, complete) in batch {
            let stream = build_training_sequence(
                partial,
                complete,
                self.config.mask_prob,
                self.config.max_seq_len,
                rng,
            )?;
            let use_dropout = self.config.dropout > 0.0;
            let node = self.nll_node(&mut g, &mut binder, &stream, use_dropout.then_some(&mut *rng))?;
            nlls.push(node);
        }
        let mut total = nlls[0];
        for &n in &nlls[1..] {
            total = g.add(total, n)?;
        }
        let loss = g.scale(total, 1.0 / batch.len() as f64)?;
        let value = g.value(loss).scalar_value().as_f64();
        if !value.is_finite() {
            return Err(Error::Divergence {
                step: adam.step_count() as usize,
                detail: format!("nll {value}"),
            });
        }
        g.backward(loss)?;
        let grads: Vec<(&str, &[E])> = g.named_grads().collect();
        adam.step(&mut self.params, &grads, lr)?;
        Ok(value)
    }
}
