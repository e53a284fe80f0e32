//! Plain feed-forward stacks: `Linear -> ReLU -> ... -> Linear`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{init, Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    prefix: String,
    dims: Vec<usize>,
}

impl Mlp {
    /// `dims = [d_in, h_1, ..., d_out]`; ReLU after every layer but the last.
    pub fn new(prefix: &str, dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad MLP widths {dims:?}")));
        }
        Ok(Mlp { prefix: prefix.to_string(), dims })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}l{layer}.w", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}l{layer}.b", self.prefix)
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for (l, pair) in self.dims.windows(2).enumerate() {
            store.insert(self.weight_name(l), init::fan_in_uniform(pair[0], pair[1], rng))?;
            store.insert(self.bias_name(l), Tensor::zeros(&[pair[1]]))?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for l in 0..self.n_layers() {
            let w = g.param(&self.weight_name(l))?;
            let b = g.param(&self.bias_name(l))?;
            h = g.linear(h, w, b)?;
            if l + 1 < self.n_layers() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn shapes_and_names() {
        let mlp = Mlp::new("head.", vec![3, 5, 1]).unwrap();
        let mut store = ParamStore::new();
        mlp.init_params(&mut store, &mut rng::stream(1, "t")).unwrap();
        assert_eq!(store.names(), ["head.l0.w", "head.l0.b", "head.l1.w", "head.l1.b"]);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap());
        let y = mlp.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).shape(), [2, 1]);
    }

    #[test]
    fn rejects_degenerate_widths() {
        assert!(Mlp::new("x.", vec![4]).is_err());
        assert!(Mlp::new("x.", vec![4, 0, 1]).is_err());
    }
}
