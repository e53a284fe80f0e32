//! Crystal structures, periodic crystal graphs and the CGCNN encoder.

mod cache;
mod cgcnn;
mod cif;
mod elements;
mod neighbors;
mod structure;

pub use cache::GraphCache;
pub use cgcnn::{build_graph, Cgcnn, CgcnnConfig, CrystalGraph};
pub use cif::{parse_cif, write_cif};
pub use elements::{atomic_number, element_from_label, symbol, MAX_ATOMIC_NUMBER};
pub use neighbors::{neighbor_list, Edge, GaussianBasis};
pub use structure::{lattice_from_parameters, wrap_unit, CrystalStructure, Mat3, Vec3};
