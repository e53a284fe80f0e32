//! On-disk cache of built crystal graphs, keyed by a hash of the CIF text and
//! the graph-construction settings.
//!
//! File layout (little-endian): magic `MOFGRAPH`, u32 version, u32 atom
//! count, one u8 atomic number per atom, u32 edge count, then per edge
//! `u32 src, u32 dst, 3 x i32 image, f64 distance`, then u32 feature width
//! and `edges x width` f64 features.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::cgcnn::{build_graph, CgcnnConfig, CrystalGraph};
use super::cif::parse_cif;
use super::neighbors::Edge;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MOFGRAPH";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct GraphCache {
    dir: PathBuf,
}

impl GraphCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)
            .map_err(|e| Error::io(format!("creating graph cache {}", dir.display()), e))?;
        Ok(GraphCache { dir })
    }

    pub fn key(cif_text: &str, config: &CgcnnConfig) -> String {
        let mut h = Sha256::new();
        h.update(cif_text.as_bytes());
        for v in [config.r_cut, config.gaussian_step, config.gaussian_width] {
            h.update(v.to_le_bytes());
        }
        h.update((config.max_neighbors as u64).to_le_bytes());
        hex::encode(h.finalize())
    }

    pub fn path_for(&self, cif_text: &str, config: &CgcnnConfig) -> PathBuf {
        self.dir.join(format!("{}.graph", Self::key(cif_text, config)))
    }

    /// Read a cached graph or parse the CIF, build the graph and store it.
    pub fn load_or_build(&self, cif_text: &str, config: &CgcnnConfig) -> Result<CrystalGraph> {
        let path = self.path_for(cif_text, config);
        if let Ok(bytes) = fs::read(&path) {
            if let Ok(graph) = decode(&bytes) {
                return Ok(graph);
            }
        }
        let graph = build_graph(&parse_cif(cif_text)?, config);
        write_atomic(&path, &encode(&graph))?;
        Ok(graph)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming {}", tmp.display()), e))
}

pub(crate) fn encode(graph: &CrystalGraph) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(graph.atomic_numbers.len() as u32).to_le_bytes());
    out.extend_from_slice(&graph.atomic_numbers);
    out.extend_from_slice(&(graph.edges.len() as u32).to_le_bytes());
    for e in &graph.edges {
        out.extend_from_slice(&(e.src as u32).to_le_bytes());
        out.extend_from_slice(&(e.dst as u32).to_le_bytes());
        for k in e.image {
            out.extend_from_slice(&k.to_le_bytes());
        }
        out.extend_from_slice(&e.distance.to_le_bytes());
    }
    let width = graph.edge_features.as_ref().map_or(0, Tensor::cols);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    if let Some(f) = &graph.edge_features {
        for v in f.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated graph cache entry".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<CrystalGraph> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC || r.u32()? != VERSION {
        return Err(Error::Checkpoint("not a graph cache entry".into()));
    }
    let n = r.u32()? as usize;
    let atomic_numbers = r.take(n)?.to_vec();
    let n_edges = r.u32()? as usize;
    let mut edges = Vec::with_capacity(n_edges);
    for _ in 0..n_edges {
        let src = r.u32()? as usize;
        let dst = r.u32()? as usize;
        let image = [r.i32()?, r.i32()?, r.i32()?];
        let distance = r.f64()?;
        if src >= n || dst >= n {
            return Err(Error::Checkpoint("graph cache edge out of range".into()));
        }
        edges.push(Edge { src, dst, image, distance });
    }
    let width = r.u32()? as usize;
    let edge_features = if n_edges > 0 {
        let data = (0..n_edges * width).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        Some(Tensor::new(vec![n_edges, width], data)?)
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes in graph cache entry".into()));
    }
    Ok(CrystalGraph { atomic_numbers, edges, edge_features })
}
