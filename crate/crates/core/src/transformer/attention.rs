use crate::error::Result;
use crate::tensor::{Graph, Var};

/// Scaled dot-product attention `softmax(Q K^T / sqrt(d_k)) V`.
///
/// Keys flagged in `key_mask` get exactly zero weight. Returns the output
/// (`L x d_v`) and the weights (`L x L`).
pub fn attention(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    key_mask: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let d_k = g.value(q).cols();
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    let weights = g.softmax_rows(scaled, key_mask)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    /// Direct scalar-loop evaluation of the attention formula.
    fn oracle(q: &Tensor, k: &Tensor, v: &Tensor) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let l = q.rows();
        let dk = q.cols() as f64;
        let mut w = vec![vec![0.0; l]; l];
        for i in 0..l {
            let s: Vec<f64> = (0..l)
                .map(|j| (0..q.cols()).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / dk.sqrt())
                .collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            for j in 0..l {
                w[i][j] = s[j].exp() / z;
            }
        }
        let out = (0..l)
            .map(|i| (0..v.cols()).map(|c| (0..l).map(|j| w[i][j] * v.get(j, c)).sum()).collect())
            .collect();
        (w, out)
    }

    #[test]
    fn integer_toy_matches_oracle() {
        let q = m(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![1.0, 1.0]]);
        let k = m(&[vec![1.0, 1.0], vec![2.0, 0.0], vec![0.0, -1.0]]);
        let v = m(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 1.0], vec![2.0, 2.0, 0.0]]);
        let (w_ref, out_ref) = oracle(&q, &k, &v);
        let mut g = Graph::standalone();
        let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
        let (out, w) = attention(&mut g, qv, kv, vv, None).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((g.value(w).get(i, j) - w_ref[i][j]).abs() < 1e-14);
                assert!((g.value(out).get(i, j) - out_ref[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn identical_keys_average_unmasked_values() {
        let q = m(&[vec![0.3, -1.0], vec![2.0, 0.5], vec![1.0, 1.0]]);
        let k = m(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]);
        let v = m(&[vec![1.0, 10.0], vec![3.0, 20.0], vec![100.0, 100.0]]);
        let mut g = Graph::standalone();
        let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
        let (out, w) = attention(&mut g, qv, kv, vv, Some(&[false, false, true])).unwrap();
        for i in 0..3 {
            assert_eq!(g.value(w).row(i), &[0.5, 0.5, 0.0]);
            assert_eq!(g.value(out).row(i), &[2.0, 15.0]);
        }
    }

    #[test]
    fn single_token() {
        let mut g = Graph::standalone();
        let q = g.constant(m(&[vec![0.7, -0.2]]));
        let k = g.constant(m(&[vec![1.5, 0.1]]));
        let v = g.constant(m(&[vec![4.0, -3.0, 2.0]]));
        let (out, w) = attention(&mut g, q, k, v, None).unwrap();
        assert_eq!(g.value(w).data(), &[1.0]);
        assert_eq!(g.value(out).data(), &[4.0, -3.0, 2.0]);
    }
}
