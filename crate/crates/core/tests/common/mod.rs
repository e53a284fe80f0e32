#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use moformer::crystal::{lattice_from_parameters, write_cif, CrystalStructure};
use moformer::rng::{self, Rng};
use moformer::tensor::{Graph, ParamStore, Tensor, Var};
use moformer::Result;
use rand::Rng as _;

const ATOMS: &[&str] = &[
    "C", "c", "N", "n", "O", "o", "S", "s", "P", "p", "F", "I", "Cl", "Br", "B", "b", "*", "[Zn]", "[O-]",
    "[NH4+]", "[C@@H]", "[Cu+2]", "[nH]", "[Zr]", "[13CH3]",
];
const BONDS: &[&str] = &["-", "=", "#", ":", "/", "\\", "~"];

fn ring_label(rng: &mut Rng) -> String {
    if rng.random_bool(0.8) {
        rng.random_range(1..10).to_string()
    } else {
        format!("%{}", rng.random_range(10..100))
    }
}

fn chain(rng: &mut Rng, depth: usize, out: &mut Vec<String>) {
    let n = rng.random_range(1..6);
    for i in 0..n {
        if i > 0 && rng.random_bool(0.3) {
            out.push(BONDS[rng.random_range(0..BONDS.len())].to_string());
        }
        out.push(ATOMS[rng.random_range(0..ATOMS.len())].to_string());
        if rng.random_bool(0.25) {
            out.push(ring_label(rng));
        }
        if depth < 3 && rng.random_bool(0.2) {
            out.push("(".into());
            if rng.random_bool(0.3) {
                out.push(BONDS[rng.random_range(0..BONDS.len())].to_string());
            }
            chain(rng, depth + 1, out);
            out.push(")".into());
        }
    }
}

/// A syntactically well-formed SMILES string as its intended token list.
pub fn random_smiles_tokens(rng: &mut Rng) -> Vec<String> {
    let mut out = Vec::new();
    chain(rng, 0, &mut out);
    out
}

const LINKERS: &[&str] = &[
    "[O-]C(=O)c1ccc(cc1)C(=O)[O-]",
    "[O-]C(=O)C=CC(=O)[O-]",
    "n1ccncc1",
    "[O-]C(=O)c1cc(cc(c1)C(=O)[O-])C(=O)[O-]",
    "Nc1cc(C(=O)[O-])ccc1C(=O)[O-]",
    "[O-]C(=O)CC(=O)[O-]",
    "c1cn(cn1)C",
    "Brc1ccc(cc1)C#N",
];
const METALS: &[&str] = &["[Zn][Zn]", "[Cu][Cu]", "[Co]", "[Zr]", "[Mg]", "[Ni]"];
const TOPOLOGIES: &[&str] = &["pcu", "dia", "sql", "tbo", "fcu", "pts"];

/// Distinct synthetic MOFids, deterministic in `k`.
pub fn toy_mofid(k: usize) -> String {
    let linker = LINKERS[k % LINKERS.len()];
    let metal = METALS[(k / LINKERS.len() + k) % METALS.len()];
    let topo = TOPOLOGIES[(k / 3) % TOPOLOGIES.len()];
    let extra = if k % 4 == 3 { ".O" } else { "" };
    format!("{metal}.{linker}{extra} MOFid-v1.{topo}.cat{};toy-{k}", k % 2)
}

/// Small distinct cells with a metal, an oxygen and a carbon.
pub fn toy_structure(k: usize) -> CrystalStructure {
    let a = 3.6 + 0.15 * (k % 5) as f64;
    let b = 3.8 + 0.1 * (k % 3) as f64;
    let c = 4.0 + 0.05 * (k % 7) as f64;
    let lattice = lattice_from_parameters(a, b, c, 90.0, 90.0 + 2.0 * (k % 4) as f64, 90.0).unwrap();
    let metal = [30u8, 29, 27, 12, 40, 28][k % 6];
    CrystalStructure::new(
        lattice,
        vec![
            [0.0, 0.0, 0.0],
            [0.5, 0.5, 0.5 + 0.03 * (k % 6) as f64],
            [0.25, 0.1 * (k % 5) as f64, 0.5],
        ],
        vec![metal, 8, 6],
    )
    .unwrap()
}

/// Target that depends on both the MOFid and the structure index.
pub fn toy_target(k: usize) -> f64 {
    1.0 + 0.37 * (k % 8) as f64 + 0.21 * ((k * 7) % 5) as f64
}

/// Writes `n` CIFs and a manifest `id,mofid,cif_path,target` into `dir`.
pub fn write_dataset(dir: &Path, n: usize) -> PathBuf {
    let cif_dir = dir.join("cifs");
    fs::create_dir_all(&cif_dir).unwrap();
    let mut manifest = String::from("id,mofid,cif_path,target\n");
    for k in 0..n {
        let name = format!("toy{k:03}");
        fs::write(cif_dir.join(format!("{name}.cif")), write_cif(&toy_structure(k), &name)).unwrap();
        manifest.push_str(&format!("{name},{},cifs/{name}.cif,{}\n", toy_mofid(k), toy_target(k)));
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, manifest).unwrap();
    path
}

fn scalarize(g: &mut Graph<'_>, out: Var) -> Result<Var> {
    let t = g.value(out);
    if t.numel() == 1 {
        return Ok(out);
    }
    // fixed pseudo-random weights so every output entry contributes
    let mut r = rng::stream(0, "gradcheck.weights");
    let w: Vec<f64> = (0..t.numel()).map(|_| r.random_range(-1.0..1.0)).collect();
    let w = g.constant(Tensor::new(t.shape().to_vec(), w)?);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// `|a - n| / max(|a|, |n|)` with both vectors taken whole.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub type Builder<'f> = dyn Fn(&mut Graph<'_>, &[Var]) -> Result<Var> + 'f;

/// Largest relative error between backprop and central differences over
/// every input leaf.
pub fn check_inputs(inputs: &[Tensor], h: f64, f: &Builder<'_>) -> Result<f64> {
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::standalone();
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        let s = scalarize(&mut g, out)?;
        Ok(g.value(s).data()[0])
    };
    let mut g = Graph::standalone();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let s = scalarize(&mut g, out)?;
    let grads = g.backward(s)?;

    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).map_or(vec![0.0; x.numel()], |t| t.data().to_vec());
        let mut numeric = Vec::with_capacity(x.numel());
        for e in 0..x.numel() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[e] = x.data()[e] + h;
            let fp = eval(&xs)?;
            xs[k].data_mut()[e] = x.data()[e] - h;
            let fm = eval(&xs)?;
            numeric.push((fp - fm) / (2.0 * h));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

pub type ParamBuilder<'f> = dyn Fn(&mut Graph<'_>) -> Result<Var> + 'f;

/// Same as [`check_inputs`] but over every parameter in `params`.
pub fn check_params(params: &ParamStore, h: f64, f: &ParamBuilder<'_>) -> Result<Vec<(String, f64)>> {
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(p);
        let out = f(&mut g)?;
        let s = scalarize(&mut g, out)?;
        Ok(g.value(s).data()[0])
    };
    let mut g = Graph::new(params);
    let out = f(&mut g)?;
    let s = scalarize(&mut g, out)?;
    let grads = g.backward(s)?.param_grads();

    let mut report = Vec::new();
    let mut work = params.clone();
    for (i, name) in params.names().iter().enumerate() {
        let x = params.tensor(i);
        let analytic = grads.get(i).map_or(vec![0.0; x.numel()], |t| t.data().to_vec());
        let mut numeric = Vec::with_capacity(x.numel());
        for e in 0..x.numel() {
            work.get_mut(name).unwrap().data_mut()[e] = x.data()[e] + h;
            let fp = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[e] = x.data()[e] - h;
            let fm = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[e] = x.data()[e];
            numeric.push((fp - fm) / (2.0 * h));
        }
        report.push((name.clone(), relative_error(&analytic, &numeric)));
    }
    Ok(report)
}

pub fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}
