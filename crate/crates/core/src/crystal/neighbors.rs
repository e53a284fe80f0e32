use std::cmp::Ordering;

use super::structure::CrystalStructure;

/// Directed edge from a center atom to one periodic image of a neighbor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    /// Lattice translation of the neighbor image.
    pub image: [i32; 3],
    pub distance: f64,
}

fn edge_order(a: &Edge, b: &Edge) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then(a.dst.cmp(&b.dst))
        .then(a.image.cmp(&b.image))
}

/// Minimum-image-aware neighbor list.
///
/// For every atom, all periodic images of all atoms with distance in
/// `(0, r_cut]` are collected, sorted by distance (ties by neighbor index,
/// then image) and capped at `max_neighbors`. The zero-translation self pair
/// is excluded; other images of the atom itself are kept. Edges are grouped
/// by center atom in ascending order.
pub fn neighbor_list(s: &CrystalStructure, r_cut: f64, max_neighbors: usize) -> Vec<Edge> {
    if !(r_cut > 0.0) {
        return Vec::new();
    }
    let spacing = s.plane_spacings();
    // |frac difference| < 1, so one extra cell on each side covers the sphere
    let reach: Vec<i32> = spacing.iter().map(|h| (r_cut / h).ceil() as i32 + 1).collect();
    let r2 = r_cut * r_cut;
    let n = s.len();
    let mut edges = Vec::new();
    let mut found = Vec::new();
    for i in 0..n {
        found.clear();
        for j in 0..n {
            let base = [
                s.frac_coords[j][0] - s.frac_coords[i][0],
                s.frac_coords[j][1] - s.frac_coords[i][1],
                s.frac_coords[j][2] - s.frac_coords[i][2],
            ];
            for a in -reach[0]..=reach[0] {
                for b in -reach[1]..=reach[1] {
                    for c in -reach[2]..=reach[2] {
                        if i == j && a == 0 && b == 0 && c == 0 {
                            continue;
                        }
                        let f = [base[0] + a as f64, base[1] + b as f64, base[2] + c as f64];
                        let v = s.to_cartesian(&f);
                        let d2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
                        if d2 <= r2 && d2 > 0.0 {
                            found.push(Edge { src: i, dst: j, image: [a, b, c], distance: d2.sqrt() });
                        }
                    }
                }
            }
        }
        found.sort_by(edge_order);
        found.truncate(max_neighbors);
        edges.extend_from_slice(&found);
    }
    edges
}

/// Gaussian bank `g_k(d) = exp(-(d - mu_k)^2 / width^2)` with centers
/// `0, step, 2 step, ..., r_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBasis {
    pub centers: Vec<f64>,
    pub width: f64,
}

impl GaussianBasis {
    pub fn new(r_max: f64, step: f64, width: f64) -> Self {
        let n = (r_max / step).round() as usize + 1;
        GaussianBasis { centers: (0..n).map(|k| k as f64 * step).collect(), width }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn expand(&self, d: f64) -> Vec<f64> {
        let w2 = self.width * self.width;
        self.centers.iter().map(|mu| (-(d - mu) * (d - mu) / w2).exp()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cubic(a: f64) -> CrystalStructure {
        CrystalStructure::new([[a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]], vec![[0.0; 3]], vec![84])
            .unwrap()
    }

    #[test]
    fn simple_cubic_shell() {
        let edges = neighbor_list(&cubic(4.0), 4.1, 12);
        assert_eq!(edges.len(), 6);
        assert!(edges.iter().all(|e| e.distance == 4.0 && e.src == 0 && e.dst == 0));
        assert!(neighbor_list(&cubic(4.0), 3.9, 12).is_empty());
    }

    #[test]
    fn cap_and_tie_order() {
        // 6 at 4.0, 12 at 4*sqrt(2): cap at 8 keeps the first shell plus the
        // two lexicographically smallest images of the second
        let edges = neighbor_list(&cubic(4.0), 6.0, 8);
        assert_eq!(edges.len(), 8);
        assert_eq!(edges[0].image, [-1, 0, 0]);
        assert_eq!(edges[6].image, [-1, -1, 0]);
        assert_eq!(edges[7].image, [-1, 0, -1]);
    }

    #[test]
    fn distances_are_symmetric() {
        let s = CrystalStructure::new(
            [[5.0, 0.0, 0.0], [1.2, 4.5, 0.0], [0.7, -0.4, 6.1]],
            vec![[0.1, 0.2, 0.3], [0.55, 0.81, 0.12], [0.9, 0.4, 0.66]],
            vec![30, 8, 6],
        )
        .unwrap();
        let edges = neighbor_list(&s, 5.0, usize::MAX);
        for e in &edges {
            let back = edges
                .iter()
                .find(|f| f.src == e.dst && f.dst == e.src && f.image == [-e.image[0], -e.image[1], -e.image[2]])
                .expect("reverse edge");
            assert_eq!(back.distance, e.distance);
        }
    }

    #[test]
    fn gaussian_bank() {
        let g = GaussianBasis::new(8.0, 0.2, 0.2);
        assert_eq!(g.len(), 41);
        let v = g.expand(g.centers[10]);
        assert_eq!(v[10], 1.0);
        assert!(GaussianBasis::new(8.0, 0.2, 0.2).expand(30.0).iter().all(|&x| x < 1e-6));
    }
}
