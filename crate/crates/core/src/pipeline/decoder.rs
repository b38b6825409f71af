use rand::Rng;
use serde::{Deserialize, Serialize};

use super::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::params::{glorot, Attention, Linear, Mlp, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

pub const PREFIX: &str = "decoder";

/// Undirected keypoint graph: symmetric 0/1 adjacency with an empty diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    n: usize,
    edges: Vec<(usize, usize)>,
}

impl Skeleton {
    /// Edges are undirected; duplicates and reversed pairs collapse.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut norm = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Input(format!("edge ({a}, {b}) outside {n} joints")));
            }
            if a == b {
                return Err(Error::Input(format!("self-loop on joint {a}")));
            }
            norm.push((a.min(b), a.max(b)));
        }
        norm.sort_unstable();
        norm.dedup();
        Ok(Skeleton { n, edges: norm })
    }

    /// Closed chain `0-1-…-(n-1)-0`.
    pub fn ring(n: usize) -> Result<Self> {
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).filter(|(a, b)| a != b).collect();
        Skeleton::from_edges(n, &edges)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn adjacency(&self) -> Tensor {
        let mut a = Tensor::zeros(vec![self.n, self.n]).into_data();
        for &(i, j) in &self.edges {
            a[i * self.n + j] = 1.0;
            a[j * self.n + i] = 1.0;
        }
        Tensor::new(vec![self.n, self.n], a).expect("square")
    }

    /// `D^(-1/2) (A + I) D^(-1/2)` with `D` the degree matrix of `A + I`.
    pub fn normalized_adjacency(&self) -> Tensor {
        let n = self.n;
        let mut a = self.adjacency().into_data();
        for i in 0..n {
            a[i * n + i] = 1.0;
        }
        let inv_sqrt: Vec<f64> = (0..n)
            .map(|i| 1.0 / a[i * n..(i + 1) * n].iter().sum::<f64>().sqrt())
            .collect();
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] *= inv_sqrt[i] * inv_sqrt[j];
            }
        }
        Tensor::new(vec![n, n], a).expect("square")
    }

    /// Whitespace-separated pairs of 0-based joint indices.
    pub fn parse_edge_list(n: usize, text: &str) -> Result<Self> {
        let nums = text
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::Input(format!("bad joint index `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if nums.len() % 2 != 0 {
            return Err(Error::Input("odd number of indices in edge list".into()));
        }
        let edges: Vec<_> = nums.chunks(2).map(|p| (p[0], p[1])).collect();
        Skeleton::from_edges(n, &edges)
    }

    pub fn to_edge_list(&self) -> String {
        self.edges.iter().map(|(a, b)| format!("{a} {b}\n")).collect()
    }
}

pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, layers: usize, rng: &mut R) {
    for l in 0..layers {
        let p = format!("{PREFIX}.layer{l}");
        store.insert(format!("{p}.graph.w"), glorot(dim, dim, rng));
        Attention::init(store, &format!("{p}.cross"), dim, rng);
        Mlp::init(store, &format!("{p}.mlp"), (dim, 2 * dim, dim), false, rng);
        // Zero head: every layer starts by predicting the image centre.
        Linear::init_zero(store, &format!("{p}.loc"), dim, 2);
    }
}

pub struct DecoderOutput {
    /// One `N×2` location estimate in `[0,1]²` per layer, `(x, y)` order.
    pub locations: Vec<Var>,
    pub nodes: Var,
}

/// Each layer propagates node features over the skeleton, attends to the
/// image tokens, applies an MLP, and emits a location estimate.
pub fn graph_decoder(
    g: &mut Graph,
    store: &ParamStore,
    joints: Var,
    feat: FeatureMap,
    skeleton: &Skeleton,
    layers: usize,
) -> Result<DecoderOutput> {
    let n = g.value(joints).rows();
    if skeleton.len() != n {
        return Err(Error::Input(format!(
            "skeleton has {} joints, embedding has {n}",
            skeleton.len()
        )));
    }
    let adj = g.constant(skeleton.normalized_adjacency())?;
    let mut x = joints;
    let mut locations = Vec::with_capacity(layers);
    for l in 0..layers {
        let p = format!("{PREFIX}.layer{l}");
        let w = store.bind(g, &format!("{p}.graph.w"))?;
        let cross = Attention::bind(store, g, &format!("{p}.cross"))?;
        let mlp = Mlp::bind(store, g, &format!("{p}.mlp"))?;
        let loc = Linear::bind(store, g, &format!("{p}.loc"))?;

        let prop = g.matmul(adj, x)?;
        let prop = g.matmul(prop, w)?;
        x = g.add(x, prop)?;
        let ctx = cross.forward(g, x, feat.tokens)?;
        x = g.add(x, ctx)?;
        let m = mlp.forward(g, x)?;
        x = g.add(x, m)?;
        let raw = loc.forward(g, x)?;
        locations.push(g.sigmoid(raw)?);
    }
    Ok(DecoderOutput { locations, nodes: x })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_validation() {
        assert!(Skeleton::from_edges(3, &[(0, 3)]).is_err());
        assert!(Skeleton::from_edges(3, &[(1, 1)]).is_err());
        let s = Skeleton::from_edges(3, &[(1, 0), (0, 1), (2, 1)]).unwrap();
        assert_eq!(s.edges(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn adjacency_is_symmetric_without_self_loops() {
        let s = Skeleton::ring(5).unwrap();
        let a = s.adjacency();
        for i in 0..5 {
            assert_eq!(a.get(i, i), 0.0);
            for j in 0..5 {
                assert_eq!(a.get(i, j), a.get(j, i));
            }
        }
    }

    #[test]
    fn empty_graph_normalizes_to_identity() {
        let s = Skeleton::from_edges(4, &[]).unwrap();
        assert_eq!(s.normalized_adjacency(), Tensor::identity(4));
    }

    #[test]
    fn normalized_path_graph_by_hand() {
        // Path 0-1-2: degrees with self loops are 2, 3, 2.
        let s = Skeleton::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let a = s.normalized_adjacency();
        assert!((a.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((a.get(0, 1) - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert!((a.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(a.get(0, 2), 0.0);
    }

    #[test]
    fn edge_list_round_trip() {
        let s = Skeleton::ring(4).unwrap();
        assert_eq!(Skeleton::parse_edge_list(4, &s.to_edge_list()).unwrap(), s);
        assert!(Skeleton::parse_edge_list(4, "0 1 2").is_err());
        assert!(Skeleton::parse_edge_list(4, "0 x").is_err());
    }
}
