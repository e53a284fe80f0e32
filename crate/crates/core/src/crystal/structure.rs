use crate::error::{Error, Result};

use super::elements::MAX_ATOMIC_NUMBER;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Periodic crystal: lattice rows are the Cartesian cell vectors a, b, c (Å).
#[derive(Debug, Clone, PartialEq)]
pub struct CrystalStructure {
    pub lattice: Mat3,
    pub frac_coords: Vec<Vec3>,
    pub atomic_numbers: Vec<u8>,
}

pub fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(v: &Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Wrap into [0, 1).
pub fn wrap_unit(x: f64) -> f64 {
    let w = x.rem_euclid(1.0);
    if w >= 1.0 { 0.0 } else { w }
}

/// Cell vectors from a, b, c (Å) and alpha, beta, gamma (degrees), with a
/// along x and b in the xy-plane.
pub fn lattice_from_parameters(a: f64, b: f64, c: f64, alpha: f64, beta: f64, gamma: f64) -> Result<Mat3> {
    let (ca, cb) = (alpha.to_radians().cos(), beta.to_radians().cos());
    let (cg, sg) = (gamma.to_radians().cos(), gamma.to_radians().sin());
    if [a, b, c].iter().any(|&x| !(x > 0.0) || !x.is_finite()) || sg.abs() < 1e-12 {
        return Err(Error::MalformedCif(format!(
            "invalid cell parameters {a} {b} {c} {alpha} {beta} {gamma}"
        )));
    }
    // exact zeros for right angles keep orthogonal cells exactly diagonal
    let snap = |x: f64| if x.abs() < 1e-15 { 0.0 } else { x };
    let (ca, cb, cg) = (snap(ca), snap(cb), snap(cg));
    let cy = (ca - cb * cg) / sg;
    let cz2 = 1.0 - cb * cb - cy * cy;
    if cz2 <= 0.0 {
        return Err(Error::MalformedCif("cell angles do not describe a valid cell".into()));
    }
    Ok([
        [a, 0.0, 0.0],
        [b * cg, b * sg, 0.0],
        [c * cb, c * cy, c * cz2.sqrt()],
    ])
}

impl CrystalStructure {
    /// Validates the cell and atoms and wraps coordinates into [0, 1).
    pub fn new(lattice: Mat3, frac_coords: Vec<Vec3>, atomic_numbers: Vec<u8>) -> Result<Self> {
        if det3(&lattice).abs() <= 1e-6 {
            return Err(Error::MalformedCif("singular lattice".into()));
        }
        if lattice.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::MalformedCif("non-finite lattice".into()));
        }
        if frac_coords.is_empty() || frac_coords.len() != atomic_numbers.len() {
            return Err(Error::MalformedCif(format!(
                "{} coordinates for {} atoms",
                frac_coords.len(),
                atomic_numbers.len()
            )));
        }
        if let Some(z) = atomic_numbers.iter().find(|&&z| z == 0 || z > MAX_ATOMIC_NUMBER) {
            return Err(Error::MalformedCif(format!("atomic number {z} out of range")));
        }
        if frac_coords.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::MalformedCif("non-finite coordinate".into()));
        }
        let frac_coords = frac_coords
            .into_iter()
            .map(|f| [wrap_unit(f[0]), wrap_unit(f[1]), wrap_unit(f[2])])
            .collect();
        Ok(CrystalStructure { lattice, frac_coords, atomic_numbers })
    }

    pub fn len(&self) -> usize {
        self.atomic_numbers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atomic_numbers.is_empty()
    }

    pub fn volume(&self) -> f64 {
        det3(&self.lattice).abs()
    }

    /// Row vector `f` times the lattice.
    pub fn to_cartesian(&self, f: &Vec3) -> Vec3 {
        let l = &self.lattice;
        [
            f[0] * l[0][0] + f[1] * l[1][0] + f[2] * l[2][0],
            f[0] * l[0][1] + f[1] * l[1][1] + f[2] * l[2][1],
            f[0] * l[0][2] + f[1] * l[1][2] + f[2] * l[2][2],
        ]
    }

    /// Distances between opposite faces of the cell, per axis.
    pub fn plane_spacings(&self) -> Vec3 {
        let l = &self.lattice;
        let v = self.volume();
        [
            v / norm(&cross(&l[1], &l[2])),
            v / norm(&cross(&l[2], &l[0])),
            v / norm(&cross(&l[0], &l[1])),
        ]
    }

    /// Same structure with atoms reordered: atom `k` of the result is atom
    /// `order[k]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        CrystalStructure {
            lattice: self.lattice,
            frac_coords: order.iter().map(|&i| self.frac_coords[i]).collect(),
            atomic_numbers: order.iter().map(|&i| self.atomic_numbers[i]).collect(),
        }
    }

    /// Rigid translation in fractional coordinates, re-wrapped.
    pub fn translated(&self, shift: &Vec3) -> Self {
        CrystalStructure {
            lattice: self.lattice,
            frac_coords: self
                .frac_coords
                .iter()
                .map(|f| {
                    [
                        wrap_unit(f[0] + shift[0]),
                        wrap_unit(f[1] + shift[1]),
                        wrap_unit(f[2] + shift[2]),
                    ]
                })
                .collect(),
            atomic_numbers: self.atomic_numbers.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_and_hexagonal_cells() {
        let l = lattice_from_parameters(4.0, 4.0, 4.0, 90.0, 90.0, 90.0).unwrap();
        assert_eq!(l, [[4.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 4.0]]);

        let l = lattice_from_parameters(3.0, 3.0, 5.0, 90.0, 90.0, 120.0).unwrap();
        assert!((l[1][0] + 1.5).abs() < 1e-12);
        assert!((norm(&l[1]) - 3.0).abs() < 1e-12);
        assert!((l[2][2] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn triclinic_angles_are_reproduced() {
        let (a, b, c, al, be, ga) = (5.0, 6.0, 7.0, 80.0, 95.0, 110.0);
        let l = lattice_from_parameters(a, b, c, al, be, ga).unwrap();
        let angle = |u: &Vec3, v: &Vec3| {
            let d = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
            (d / (norm(u) * norm(v))).acos().to_degrees()
        };
        assert!((norm(&l[2]) - c).abs() < 1e-12);
        assert!((angle(&l[1], &l[2]) - al).abs() < 1e-9);
        assert!((angle(&l[0], &l[2]) - be).abs() < 1e-9);
        assert!((angle(&l[0], &l[1]) - ga).abs() < 1e-9);
    }

    #[test]
    fn wraps_coordinates() {
        let s = CrystalStructure::new(
            [[4.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 4.0]],
            vec![[1.25, -0.25, 1.0]],
            vec![84],
        )
        .unwrap();
        assert_eq!(s.frac_coords[0], [0.25, 0.75, 0.0]);
        assert_eq!(wrap_unit(-1e-18), 0.0);
    }

    #[test]
    fn rejects_singular_cells() {
        let flat = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]];
        assert!(CrystalStructure::new(flat, vec![[0.0; 3]], vec![1]).is_err());
        let cubic = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(CrystalStructure::new(cubic, vec![], vec![]).is_err());
        assert!(CrystalStructure::new(cubic, vec![[0.0; 3]], vec![119]).is_err());
    }
}
