//! Data-parallel training steps.
//!
//! Each sample's encoder pass is recorded on its own [`Graph`] (in parallel),
//! the per-sample embeddings are stacked into one matrix for the batch-level
//! head and loss, and the head's input gradient is then split back into
//! per-sample seeds for the encoder backward passes (in parallel again).
//! Parameter gradients are summed in sample order, so results do not depend
//! on the number of worker threads.

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{Graph, ParamGrads, ParamStore, Tensor, Var};

/// Per-sample recorded encoder passes.
pub struct BranchPass<'p> {
    passes: Vec<(Graph<'p>, Var)>,
}

impl<'p> BranchPass<'p> {
    /// Run `f` on every item, each on a fresh graph over `params`.
    pub fn forward<T, F>(params: &'p ParamStore, items: &[T], f: F) -> Result<Self>
    where
        T: Sync,
        F: Fn(&mut Graph<'p>, &T) -> Result<Var> + Sync + Send,
    {
        let passes = exec::map(items, |item| {
            let mut g = Graph::new(params);
            let out = f(&mut g, item)?;
            Ok((g, out))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(BranchPass { passes })
    }

    pub fn len(&self) -> usize {
        self.passes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passes.is_empty()
    }

    /// The per-sample outputs stacked row-wise (`B x d`).
    pub fn stacked(&self) -> Result<Tensor> {
        let first = self
            .passes
            .first()
            .ok_or(Error::TooFewRecords { needed: 1, got: 0 })?;
        let cols = first.0.value(first.1).cols();
        let mut data = Vec::with_capacity(self.passes.len() * cols);
        for (g, v) in &self.passes {
            let t = g.value(*v);
            if t.numel() != cols {
                return Err(Error::ShapeMismatch {
                    op: "stack embeddings",
                    left: vec![cols],
                    right: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
        }
        Tensor::new(vec![self.passes.len(), cols], data)
    }

    /// Backpropagate row `k` of `upstream` into sample `k` and sum the
    /// resulting parameter gradients in sample order.
    pub fn backward(&self, upstream: &Tensor, n_params: usize) -> Result<ParamGrads> {
        let cols = upstream.cols();
        let jobs: Vec<(usize, Tensor)> = (0..self.passes.len())
            .map(|k| {
                let shape = self.passes[k].0.value(self.passes[k].1).shape().to_vec();
                (k, Tensor::from_raw(shape, upstream.data()[k * cols..(k + 1) * cols].to_vec()))
            })
            .collect();
        let per_sample = exec::map(&jobs, |(k, seed)| {
            let (g, out) = &self.passes[*k];
            Ok(g.backward_seeded(*out, seed.clone())?.param_grads())
        });
        let mut total = ParamGrads::empty(n_params);
        for grads in per_sample {
            total.accumulate(&grads?);
        }
        Ok(total)
    }
}

/// Forward-only embeddings for a list of items, stacked row-wise.
pub fn embed_all<T, F>(params: &ParamStore, items: &[T], f: F) -> Result<Tensor>
where
    T: Sync,
    F: for<'g> Fn(&mut Graph<'g>, &T) -> Result<Var> + Sync + Send,
{
    BranchPass::forward(params, items, |g, item| f(g, item))?.stacked()
}
