use rand::Rng;
use serde::{Deserialize, Serialize};

use super::elements::MAX_ATOMIC_NUMBER;
use super::neighbors::{neighbor_list, Edge, GaussianBasis};
use super::structure::CrystalStructure;
use crate::error::{Error, Result};
use crate::tensor::{init, Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CgcnnConfig {
    /// Width of the learned per-element embedding and of every conv layer.
    pub atom_fea_len: usize,
    pub n_conv: usize,
    pub out_dim: usize,
    /// Neighbor cutoff in Å.
    pub r_cut: f64,
    pub max_neighbors: usize,
    pub gaussian_step: f64,
    pub gaussian_width: f64,
}

impl Default for CgcnnConfig {
    fn default() -> Self {
        CgcnnConfig {
            atom_fea_len: 64,
            n_conv: 3,
            out_dim: 512,
            r_cut: 8.0,
            max_neighbors: 12,
            gaussian_step: 0.2,
            gaussian_width: 0.2,
        }
    }
}

impl CgcnnConfig {
    pub fn basis(&self) -> GaussianBasis {
        GaussianBasis::new(self.r_cut, self.gaussian_step, self.gaussian_width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.atom_fea_len == 0 || self.n_conv == 0 || self.out_dim == 0 || self.max_neighbors == 0 {
            return Err(Error::InvalidConfig(format!("CGCNN sizes must be positive: {self:?}")));
        }
        if !(self.r_cut > 0.0 && self.gaussian_step > 0.0 && self.gaussian_width > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "CGCNN distances must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Graph input for the CGCNN encoder. Node features are looked up from the
/// learned element table by atomic number.
#[derive(Debug, Clone, PartialEq)]
pub struct CrystalGraph {
    pub atomic_numbers: Vec<u8>,
    pub edges: Vec<Edge>,
    /// `E x n_gaussians`; `None` for a graph without edges.
    pub edge_features: Option<Tensor>,
}

impl CrystalGraph {
    pub fn n_nodes(&self) -> usize {
        self.atomic_numbers.len()
    }

    pub fn from_edges(atomic_numbers: Vec<u8>, edges: Vec<Edge>, basis: &GaussianBasis) -> Self {
        let edge_features = (!edges.is_empty()).then(|| {
            let data = edges.iter().flat_map(|e| basis.expand(e.distance)).collect();
            Tensor::from_raw(vec![edges.len(), basis.len()], data)
        });
        CrystalGraph { atomic_numbers, edges, edge_features }
    }
}

pub fn build_graph(s: &CrystalStructure, config: &CgcnnConfig) -> CrystalGraph {
    let edges = neighbor_list(s, config.r_cut, config.max_neighbors);
    CrystalGraph::from_edges(s.atomic_numbers.clone(), edges, &config.basis())
}

/// Gated graph convolutions over a learned element embedding, mean pooling
/// and a final linear projection.
#[derive(Debug, Clone)]
pub struct Cgcnn {
    config: CgcnnConfig,
    prefix: String,
    n_gauss: usize,
}

impl Cgcnn {
    pub fn new(config: CgcnnConfig, prefix: &str) -> Result<Self> {
        config.validate()?;
        let n_gauss = config.basis().len();
        Ok(Cgcnn { config, prefix: prefix.to_string(), n_gauss })
    }

    pub fn config(&self) -> &CgcnnConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn output_dim(&self) -> usize {
        self.config.out_dim
    }

    fn name(&self, rest: &str) -> String {
        format!("{}{rest}", self.prefix)
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let f = self.config.atom_fea_len;
        let z_dim = 2 * f + self.n_gauss;
        store.insert(
            self.name("atom_emb"),
            init::normal(&[usize::from(MAX_ATOMIC_NUMBER), f], 1.0 / (f as f64).sqrt(), rng),
        )?;
        for l in 0..self.config.n_conv {
            for part in ["gate", "core"] {
                store.insert(self.name(&format!("conv{l}.{part}.w")), init::fan_in_uniform(z_dim, f, rng))?;
                store.insert(self.name(&format!("conv{l}.{part}.b")), Tensor::zeros(&[f]))?;
            }
        }
        store.insert(self.name("proj.w"), init::fan_in_uniform(f, self.config.out_dim, rng))?;
        store.insert(self.name("proj.b"), Tensor::zeros(&[self.config.out_dim]))?;
        Ok(())
    }

    /// `v_i' = v_i + sum_j sigmoid(z_ij W_f + b_f) * softplus(z_ij W_s + b_s)`
    /// with `z_ij = [v_i, v_j, u_ij]`. Nodes without edges pass through.
    pub fn conv_layer(&self, g: &mut Graph<'_>, graph: &CrystalGraph, v: Var, layer: usize) -> Result<Var> {
        let Some(feats) = &graph.edge_features else {
            return Ok(v);
        };
        let f = self.config.atom_fea_len;
        if g.value(v).cols() != f || g.value(v).rows() != graph.n_nodes() {
            return Err(Error::ShapeMismatch {
                op: "conv_layer",
                left: g.value(v).shape().to_vec(),
                right: vec![graph.n_nodes(), f],
            });
        }
        let src: Vec<usize> = graph.edges.iter().map(|e| e.src).collect();
        let dst: Vec<usize> = graph.edges.iter().map(|e| e.dst).collect();
        let vi = g.gather_rows(v, &src)?;
        let vj = g.gather_rows(v, &dst)?;
        let u = g.constant(feats.clone());
        let z = g.concat_cols(&[vi, vj, u])?;

        let p = |part: &str, t: &str| self.name(&format!("conv{layer}.{part}.{t}"));
        let (gw, gb) = (g.param(&p("gate", "w"))?, g.param(&p("gate", "b"))?);
        let (cw, cb) = (g.param(&p("core", "w"))?, g.param(&p("core", "b"))?);
        let gate = g.linear(z, gw, gb)?;
        let gate = g.sigmoid(gate);
        let core = g.linear(z, cw, cb)?;
        let core = g.softplus(core);
        let msg = g.mul(gate, core)?;
        let agg = g.scatter_add_rows(msg, &src, graph.n_nodes())?;
        g.add(v, agg)
    }

    /// Structure embedding as a `1 x out_dim` row.
    pub fn embed(&self, g: &mut Graph<'_>, graph: &CrystalGraph) -> Result<Var> {
        if graph.n_nodes() == 0 {
            return Err(Error::MalformedCif("graph without atoms".into()));
        }
        let table = g.param(&self.name("atom_emb"))?;
        let rows: Vec<usize> = graph.atomic_numbers.iter().map(|&z| usize::from(z) - 1).collect();
        let mut v = g.gather_rows(table, &rows)?;
        for l in 0..self.config.n_conv {
            v = self.conv_layer(g, graph, v, l)?;
        }
        let pooled = g.mean_rows(v);
        let (w, b) = (g.param(&self.name("proj.w"))?, g.param(&self.name("proj.b"))?);
        g.linear(pooled, w, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tiny_config() -> CgcnnConfig {
        CgcnnConfig { atom_fea_len: 4, n_conv: 2, out_dim: 6, r_cut: 4.0, max_neighbors: 12, gaussian_step: 0.5, gaussian_width: 0.5 }
    }

    fn sample() -> CrystalStructure {
        CrystalStructure::new(
            [[5.1, 0.0, 0.0], [0.9, 4.7, 0.0], [0.3, -0.6, 5.4]],
            vec![[0.11, 0.23, 0.35], [0.62, 0.71, 0.18], [0.37, 0.92, 0.77], [0.85, 0.05, 0.52]],
            vec![30, 8, 6, 8],
        )
        .unwrap()
    }

    #[test]
    fn isolated_graph_is_identity() {
        let cfg = tiny_config();
        let model = Cgcnn::new(cfg.clone(), "").unwrap();
        let mut store = ParamStore::new();
        model.init_params(&mut store, &mut rng::stream(0, "init")).unwrap();
        let graph = CrystalGraph { atomic_numbers: vec![6, 8], edges: vec![], edge_features: None };
        let mut g = Graph::new(&store);
        let v = g.input(Tensor::matrix(2, 4, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap());
        let out = model.conv_layer(&mut g, &graph, v, 0).unwrap();
        assert_eq!(g.value(out), g.value(v));
    }

    #[test]
    fn embedding_shape_and_invariances() {
        let cfg = tiny_config();
        let model = Cgcnn::new(cfg.clone(), "c.").unwrap();
        let mut store = ParamStore::new();
        model.init_params(&mut store, &mut rng::stream(4, "init")).unwrap();
        let embed = |s: &CrystalStructure| {
            let graph = build_graph(s, &cfg);
            let mut g = Graph::new(&store);
            let e = model.embed(&mut g, &graph).unwrap();
            g.value(e).clone()
        };
        let s = sample();
        let base = embed(&s);
        assert_eq!(base.shape(), &[1, 6]);
        assert_eq!(embed(&s.permuted(&[2, 0, 3, 1])), base);
        let shifted = embed(&s.translated(&[0.37, -0.12, 0.9]));
        for (a, b) in shifted.data().iter().zip(base.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn default_basis_has_41_centers() {
        assert_eq!(CgcnnConfig::default().basis().len(), 41);
    }
}
