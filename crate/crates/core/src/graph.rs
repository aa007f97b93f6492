//! Demand-similarity region graph and its normalized propagation matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::DemandSeries;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 0.1;

/// Sample Pearson correlation. Zero when either series has zero variance.
pub fn pearson_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Input(format!(
            "pearson: series lengths differ ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Input(format!(
            "pearson: need at least 2 observations, got {}",
            a.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Binary similarity graph over regions plus the cached propagation matrix
/// `D^-1/2 (A + I) D^-1/2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionGraph {
    n_regions: usize,
    epsilon: f64,
    adjacency: Tensor,
    propagation: Tensor,
}

impl RegionGraph {
    /// Wraps an explicit 0/1 adjacency. The diagonal is ignored and forced to
    /// zero; the matrix must be symmetric.
    pub fn from_adjacency(adjacency: Tensor, epsilon: f64) -> Result<Self> {
        let shape = adjacency.shape();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::Dimension(format!(
                "adjacency must be square, got {shape:?}"
            )));
        }
        let n = shape[0];
        let mut adj = adjacency;
        for i in 0..n {
            adj.set(&[i, i], 0.0);
            for j in 0..n {
                let v = adj.get(&[i, j]);
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Input(format!(
                        "adjacency entry ({i},{j}) = {v} is not binary"
                    )));
                }
                if v != adj.get(&[j, i]) && i != j {
                    return Err(Error::Input(format!(
                        "adjacency is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let propagation = propagation_matrix(&adj);
        Ok(Self {
            n_regions: n,
            epsilon,
            adjacency: adj,
            propagation,
        })
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn propagation(&self) -> &Tensor {
        &self.propagation
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        (self.adjacency.sum() / 2.0).round() as usize
    }

    /// Degrees of `A + I`.
    pub fn degrees(&self) -> Vec<f64> {
        let n = self.n_regions;
        (0..n)
            .map(|i| 1.0 + (0..n).map(|j| self.adjacency.get(&[i, j])).sum::<f64>())
            .collect()
    }
}

/// `D^-1/2 (A + I) D^-1/2` with `D_ii = sum_j (A + I)_ij`.
pub fn propagation_matrix(adjacency: &Tensor) -> Tensor {
    let n = adjacency.shape()[0];
    let mut with_loops = adjacency.clone();
    for i in 0..n {
        with_loops.set(&[i, i], 1.0);
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = (0..n).map(|j| with_loops.get(&[i, j])).sum();
            1.0 / d.sqrt()
        })
        .collect();
    let mut p = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let a = with_loops.get(&[i, j]);
            if a != 0.0 {
                p.set(&[i, j], inv_sqrt[i] * a * inv_sqrt[j]);
            }
        }
    }
    p
}

/// Per-region training sequence with all channels laid out time-major:
/// `[x(0,c0), x(0,c1), x(1,c0), ...]`.
fn region_sequence(train: &DemandSeries, region: usize) -> Vec<f64> {
    let (t_len, d) = (train.steps(), train.channels());
    let mut out = Vec::with_capacity(t_len * d);
    for t in 0..t_len {
        for c in 0..d {
            out.push(train.value(t, region, c));
        }
    }
    out
}

/// Thresholded Pearson graph over the training split.
///
/// `train` must already be restricted to training steps.
pub fn build_adjacency(train: &DemandSeries, epsilon: f64) -> Result<RegionGraph> {
    if !(-1.0..1.0).contains(&epsilon) {
        return Err(Error::Config(format!(
            "graph threshold epsilon must lie in [-1, 1), got {epsilon}"
        )));
    }
    let n = train.regions();
    if n < 2 {
        return Err(Error::Input(format!(
            "graph construction needs at least 2 regions, got {n}"
        )));
    }
    let seqs: Vec<Vec<f64>> = (0..n).map(|r| region_sequence(train, r)).collect();
    let mut adj = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            if pearson_similarity(&seqs[i], &seqs[j])? > epsilon {
                adj.set(&[i, j], 1.0);
                adj.set(&[j, i], 1.0);
            }
        }
    }
    RegionGraph::from_adjacency(adj, epsilon)
}

/// Writes a square matrix as headerless CSV, one row per line.
pub fn matrix_to_csv(m: &Tensor) -> String {
    let cols = m.shape()[1];
    let mut s = String::new();
    for row in m.data().chunks(cols.max(1)) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSidecar {
    pub n_regions: usize,
    pub epsilon: f64,
    pub edge_count: usize,
}

impl From<&RegionGraph> for GraphSidecar {
    fn from(g: &RegionGraph) -> Self {
        Self {
            n_regions: g.n_regions(),
            epsilon: g.epsilon(),
            edge_count: g.edge_count(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn series(regions: &[Vec<f64>]) -> DemandSeries {
        let t = regions[0].len();
        let n = regions.len();
        let mut data = Vec::with_capacity(t * n);
        for step in 0..t {
            for r in regions {
                data.push(r[step]);
            }
        }
        DemandSeries::new(Tensor::new(vec![t, n, 1], data).unwrap()).unwrap()
    }

    /// Textbook two-pass Pearson, kept separate from the implementation.
    fn pearson_oracle(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / (n - 1.0);
        let sa = (a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let sb = (b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        cov / (sa * sb)
    }

    #[test]
    fn pearson_examples() {
        let s = [1.0, 4.0, 2.0, 8.0];
        assert!((pearson_similarity(&s, &s).unwrap() - 1.0).abs() < 1e-15);
        assert!(
            (pearson_similarity(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15
        );
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 3.0, 2.0, 4.0];
        let want = pearson_oracle(&a, &b);
        assert!((want - 0.8).abs() < 1e-12);
        assert!((pearson_similarity(&a, &b).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn pearson_errors_and_zero_variance() {
        assert!(matches!(
            pearson_similarity(&[1.0], &[1.0]),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            pearson_similarity(&[1.0, 2.0], &[1.0]),
            Err(Error::Input(_))
        ));
        assert_eq!(
            pearson_similarity(&[3.0, 3.0, 3.0], &[1.0, 2.0, 5.0]).unwrap(),
            0.0
        );
    }

    #[test]
    fn adjacency_examples() {
        let s = vec![1.0, 3.0, 2.0, 5.0, 4.0];
        let g = build_adjacency(&series(&[s.clone(), s.clone()]), 0.5).unwrap();
        assert_eq!(g.adjacency().data(), &[0.0, 1.0, 1.0, 0.0]);

        let other = vec![2.0, 1.0, 2.0, 1.0, 2.0];
        let g = build_adjacency(&series(&[s.clone(), other]), 0.999999).unwrap();
        assert_eq!(g.adjacency().data(), &[0.0; 4]);

        let t: Vec<f64> = (0..48)
            .map(|i| (i as f64 * std::f64::consts::TAU / 24.0).sin())
            .collect();
        let anti: Vec<f64> = t.iter().map(|v| -v).collect();
        // oracle: r12 = 1, r13 = r23 = -1
        assert!((pearson_oracle(&t, &t) - 1.0).abs() < 1e-12);
        assert!((pearson_oracle(&t, &anti) + 1.0).abs() < 1e-12);
        let g = build_adjacency(&series(&[t.clone(), t.clone(), anti]), 0.0).unwrap();
        assert_eq!(
            g.adjacency(),
            &Tensor::matrix(&[
                vec![0.0, 1.0, 0.0],
                vec![1.0, 0.0, 0.0],
                vec![0.0, 0.0, 0.0]
            ])
            .unwrap()
        );
    }

    #[test]
    fn adjacency_errors() {
        let s = vec![1.0, 2.0, 3.0];
        assert!(matches!(
            build_adjacency(&series(std::slice::from_ref(&s)), 0.1),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            build_adjacency(&series(&[s.clone(), s.clone()]), 1.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_adjacency(&series(&[s.clone(), s]), -1.5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn propagation_examples() {
        let g = RegionGraph::from_adjacency(
            Tensor::matrix(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(),
            0.1,
        )
        .unwrap();
        for &v in g.propagation().data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
        let one = RegionGraph::from_adjacency(Tensor::zeros(&[1, 1]), 0.1).unwrap();
        assert_eq!(one.propagation().data(), &[1.0]);

        let adj = Tensor::matrix(&[
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0],
        ])
        .unwrap();
        let g = RegionGraph::from_adjacency(adj, 0.1).unwrap();
        let p = g.propagation();
        assert_eq!(
            (0..3).map(|j| p.get(&[2, j])).collect::<Vec<_>>(),
            vec![0.0, 0.0, 1.0]
        );
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> RegionGraph {
        let density: f64 = rng.gen_range(0.0..1.0);
        let mut adj = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in i + 1..n {
                if rng.gen_bool(density) {
                    adj.set(&[i, j], 1.0);
                    adj.set(&[j, i], 1.0);
                }
            }
        }
        RegionGraph::from_adjacency(adj, 0.0).unwrap()
    }

    #[test]
    fn propagation_is_symmetric_with_unit_spectral_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let n = rng.gen_range(1..=50);
            let g = random_graph(&mut rng, n);
            let p = g.propagation();
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(p.get(&[i, j]), p.get(&[j, i]));
                }
            }
            let m = DMatrix::from_row_slice(n, n, p.data());
            let eig = m.symmetric_eigen();
            let radius = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(radius <= 1.0 + 1e-8, "radius {radius}");
            assert!(p.is_finite());
        }
    }

    #[test]
    fn sqrt_degree_vector_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.gen_range(2..30);
            let g = random_graph(&mut rng, n);
            let v: Vec<f64> = g.degrees().iter().map(|d| d.sqrt()).collect();
            let p = g.propagation();
            for i in 0..n {
                let pv: f64 = (0..n).map(|j| p.get(&[i, j]) * v[j]).sum();
                assert!((pv - v[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn affine_rescaling_leaves_adjacency_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base: Vec<f64> = (0..60).map(|t| (t as f64 / 4.0).sin()).collect();
        let regions: Vec<Vec<f64>> = (0..6)
            .map(|_| {
                let noise: f64 = rng.gen_range(0.0..2.0);
                base.iter()
                    .map(|b| b + noise * rng.gen_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        let g = build_adjacency(&series(&regions), 0.3).unwrap();
        let scaled: Vec<Vec<f64>> = regions
            .iter()
            .map(|r| r.iter().map(|v| 4.0 * v + 10.0).collect())
            .collect();
        let gs = build_adjacency(&series(&scaled), 0.3).unwrap();
        assert_eq!(g.adjacency(), gs.adjacency());
    }

    #[test]
    fn region_permutation_permutes_propagation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let regions: Vec<Vec<f64>> = (0..7)
            .map(|_| (0..40).map(|_| rng.gen_range(0.0..10.0)).collect())
            .collect();
        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&p| regions[p].clone()).collect();
        let g = build_adjacency(&series(&regions), 0.0).unwrap();
        let gp = build_adjacency(&series(&permuted), 0.0).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let a = gp.propagation().get(&[i, j]);
                let b = g.propagation().get(&[perm[i], perm[j]]);
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn multi_channel_sequences_are_time_major() {
        let data = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = DemandSeries::new(data).unwrap();
        assert_eq!(region_sequence(&s, 0), vec![1.0, 2.0, 3.0, 4.0]);
    }
}
