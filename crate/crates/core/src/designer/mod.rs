//! Variational graph auto-encoder that turns a task graph into a sparse
//! communication DAG.
//!
//! Pipeline: a two-layer GCN encodes every node (agents plus the task node)
//! into a Gaussian latent; a feed-forward scorer produces edge logits from
//! `[h_i ∥ h_j ∥ h_task]`; a Gumbel-sigmoid relaxation turns logits into a
//! sketch matrix `S`; a rank-`r`, anchor-regularized, nuclear-norm-shrunk
//! refinement gives `S̃ = Z·W·Zᵀ`; thresholding plus cycle breaking yields
//! the topology.

pub mod grad;
mod params;
mod topology;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{AdjacencyMatrix, TaskGraph};
use crate::numerics::{logit, relu, sigmoid, svd, Matrix, Rng, SvdResult};

pub use params::{DesignerParams, Dims};
pub use topology::{break_cycles, CommTopology, Edge};

pub const LOG_SIGMA_CLAMP: f64 = 10.0;
pub const UNIFORM_CLAMP: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignConfig {
    pub tau: f64,
    pub zeta: f64,
    pub threshold: f64,
    /// `None` means ⌈N/2⌉.
    pub rank: Option<usize>,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self {
            tau: 0.01,
            zeta: 0.1,
            threshold: 0.5,
            rank: None,
        }
    }
}

impl DesignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.zeta >= 0.0) {
            return Err(Error::Config(format!("zeta must be non-negative, got {}", self.zeta)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }

    pub fn rank_for(&self, n: usize) -> Result<usize> {
        let r = self.rank.unwrap_or(n.div_ceil(2));
        if r == 0 || r > n {
            return Err(Error::Config(format!("rank {r} outside 1..={n}")));
        }
        Ok(r)
    }
}

/// Whether the design draws noise (training) or uses its mean (inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Stochastic,
    Deterministic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub mu: Matrix,
    pub log_sigma: Matrix,
    pub h: Matrix,
    pub noise: Matrix,
    pub task_row: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SketchMatrix {
    pub s: Matrix,
    pub logits: Matrix,
    pub noise: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedMatrix {
    /// `Z·W·Zᵀ` before clamping.
    pub s_tilde: Matrix,
    pub z: Matrix,
    pub w: Matrix,
    pub rank_r: usize,
}

impl RefinedMatrix {
    /// Entries clamped to `[0, 1]`; the form used for thresholding and likelihoods.
    pub fn clamped(&self) -> Matrix {
        self.s_tilde.map(|x| x.clamp(0.0, 1.0))
    }
}

/// Symmetrized, self-looped, degree-normalized adjacency `D̂^{-1/2}(Ā+I)D̂^{-1/2}`.
pub fn normalized_adjacency(adj: &AdjacencyMatrix) -> Matrix {
    let n = adj.n();
    let a = adj.matrix();
    let sym = Matrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            a[(i, j)].max(a[(j, i)])
        }
    });
    let inv_sqrt_deg: Vec<f64> = (0..n).map(|i| 1.0 / sym.row(i).iter().sum::<f64>().sqrt()).collect();
    Matrix::from_fn(n, n, |i, j| sym[(i, j)] * inv_sqrt_deg[i] * inv_sqrt_deg[j])
}

/// Intermediate values of one encoder pass.
#[derive(Debug, Clone)]
pub(crate) struct EncoderPass {
    pub a_hat: Matrix,
    pub ax: Matrix,
    pub pre: Matrix,
    pub q: Matrix,
    pub ls_raw: Matrix,
    pub mu: Matrix,
    pub log_sigma: Matrix,
}

fn check_dims(graph: &TaskGraph, params: &DesignerParams) -> Result<()> {
    params.validate()?;
    if graph.feature_dim() != params.dims().feature {
        return Err(Error::Config(format!(
            "task graph features have dimension {}, parameters expect {}",
            graph.feature_dim(),
            params.dims().feature
        )));
    }
    if graph.augmented_anchor.n() != graph.n_agents() + 1 {
        return Err(Error::Config("augmented anchor must have N + 1 nodes".into()));
    }
    Ok(())
}

pub(crate) fn encoder_pass(graph: &TaskGraph, params: &DesignerParams) -> EncoderPass {
    let a_hat = normalized_adjacency(&graph.augmented_anchor);
    let ax = a_hat.matmul(&graph.node_features());
    let pre = ax.matmul(&params.w_shared);
    let hidden = pre.map(relu);
    let q = a_hat.matmul(&hidden);
    let mu = q.matmul(&params.w_mu);
    let ls_raw = q.matmul(&params.w_logsigma);
    let log_sigma = ls_raw.map(|x| x.clamp(-LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP));
    EncoderPass {
        a_hat,
        ax,
        pre,
        q,
        ls_raw,
        mu,
        log_sigma,
    }
}

/// Two-layer GCN: `μ = Â·relu(Â·X̃·W)·W_μ`, `log σ = Â·relu(Â·X̃·W)·W_σ` (clamped).
pub fn gcn_encode(graph: &TaskGraph, params: &DesignerParams) -> Result<(Matrix, Matrix)> {
    check_dims(graph, params)?;
    let pass = encoder_pass(graph, params);
    Ok((pass.mu, pass.log_sigma))
}

pub fn sample_latent_with_noise(mu: &Matrix, log_sigma: &Matrix, noise: Matrix) -> LatentState {
    assert_eq!(mu.shape(), log_sigma.shape());
    assert_eq!(mu.shape(), noise.shape());
    let h = Matrix::from_fn(mu.rows(), mu.cols(), |i, j| {
        mu[(i, j)] + log_sigma[(i, j)].exp() * noise[(i, j)]
    });
    LatentState {
        mu: mu.clone(),
        log_sigma: log_sigma.clone(),
        h,
        noise,
        task_row: mu.rows() - 1,
    }
}

/// Reparameterized draw `h = μ + exp(log σ) ⊙ ε`, ε standard normal.
pub fn sample_latent(mu: &Matrix, log_sigma: &Matrix, rng: &mut Rng) -> LatentState {
    let noise = Matrix::from_fn(mu.rows(), mu.cols(), |_, _| rng.gaussian());
    sample_latent_with_noise(mu, log_sigma, noise)
}

/// `w2ᵀ·relu(w1ᵀ·x + b1) + b2`.
pub(crate) fn ffn_score(params: &DesignerParams, input: &[f64]) -> f64 {
    let f = params.ffn_b1.len();
    let mut acc = params.ffn_b2;
    for k in 0..f {
        let mut a = params.ffn_b1[k];
        for (t, x) in input.iter().enumerate() {
            a += params.ffn_w1[(t, k)] * x;
        }
        acc += params.ffn_w2[(k, 0)] * relu(a);
    }
    acc
}

pub(crate) fn pair_input(h: &Matrix, i: usize, j: usize, task_row: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(3 * h.cols());
    v.extend_from_slice(h.row(i));
    v.extend_from_slice(h.row(j));
    v.extend_from_slice(h.row(task_row));
    v
}

/// Edge logits ϖ for every ordered agent pair; the diagonal is zero.
pub fn edge_logits(latent: &LatentState, params: &DesignerParams) -> Matrix {
    let n = latent.task_row;
    Matrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            ffn_score(params, &pair_input(&latent.h, i, j, latent.task_row))
        }
    })
}

/// Gumbel-sigmoid sketch with given uniform draws.
pub fn sketch_with_noise(logits: Matrix, noise: Matrix, tau: f64) -> SketchMatrix {
    let n = logits.rows();
    let s = Matrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            let eps = noise[(i, j)].clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
            sigmoid((logit(eps) + logits[(i, j)]) / tau)
        }
    });
    SketchMatrix { s, logits, noise }
}

pub fn sketch_edges(
    latent: &LatentState,
    params: &DesignerParams,
    tau: f64,
    rng: &mut Rng,
    mode: Mode,
) -> SketchMatrix {
    let logits = edge_logits(latent, params);
    let n = logits.rows();
    let noise = match mode {
        Mode::Deterministic => Matrix::from_fn(n, n, |_, _| 0.5),
        Mode::Stochastic => Matrix::from_fn(n, n, |i, j| if i == j { 0.5 } else { rng.uniform() }),
    };
    sketch_with_noise(logits, noise, tau)
}

/// First `r` left singular vectors of `s`.
pub fn leading_basis(s: &Matrix, r: usize) -> Result<Matrix> {
    Ok(svd(s)?.u.take_cols(r))
}

/// Closed-form refinement for a fixed orthonormal basis `z`:
/// `W = svt(Zᵀ·M·Z, ζ/2)` with `M = (S + A)/2`. Also returns the SVD of `Zᵀ·M·Z`.
pub fn refine_with_basis(
    s: &Matrix,
    anchor: &AdjacencyMatrix,
    z: &Matrix,
    zeta: f64,
) -> Result<(RefinedMatrix, SvdResult)> {
    let m = s.add(anchor.matrix()).scale(0.5);
    let y = z.t_matmul(&m).matmul(z);
    let dec = svd(&y)?;
    let shrunk: Vec<f64> = dec
        .singular_values
        .iter()
        .map(|sv| (sv - zeta / 2.0).max(0.0))
        .collect();
    let w = SvdResult {
        u: dec.u.clone(),
        singular_values: shrunk,
        v: dec.v.clone(),
    }
    .reconstruct();
    let s_tilde = z.matmul(&w).matmul_t(z);
    Ok((
        RefinedMatrix {
            s_tilde,
            z: z.clone(),
            w,
            rank_r: z.cols(),
        },
        dec,
    ))
}

/// Minimizes `½‖S − ZWZᵀ‖² + ζ‖W‖_* + ½‖A − ZWZᵀ‖²` over `W` with `Z` the
/// top-`r` left singular vectors of `S`.
pub fn refine_low_rank(
    s: &Matrix,
    anchor: &AdjacencyMatrix,
    r: usize,
    zeta: f64,
) -> Result<RefinedMatrix> {
    let n = s.rows();
    if anchor.n() != n || s.cols() != n {
        return Err(Error::Config("sketch and anchor shapes differ".into()));
    }
    if r == 0 || r > n {
        return Err(Error::Config(format!("rank {r} outside 1..={n}")));
    }
    if !(zeta >= 0.0) {
        return Err(Error::Config(format!("zeta must be non-negative, got {zeta}")));
    }
    let z = leading_basis(s, r)?;
    Ok(refine_with_basis(s, anchor, &z, zeta)?.0)
}

/// Objective minimized by [`refine_low_rank`] for a given `W`.
pub fn refinement_objective(
    s: &Matrix,
    anchor: &AdjacencyMatrix,
    z: &Matrix,
    w: &Matrix,
    zeta: f64,
) -> Result<f64> {
    let x = z.matmul(w).matmul_t(z);
    Ok(0.5 * s.sub(&x).frobenius_sq()
        + zeta * crate::numerics::nuclear_norm(w)?
        + 0.5 * anchor.matrix().sub(&x).frobenius_sq())
}

/// Off-diagonal entries of the clamped refinement above `threshold`, cycle-broken.
pub fn extract_topology(refined: &RefinedMatrix, threshold: f64) -> CommTopology {
    let p = refined.clamped();
    let n = p.rows();
    let mut candidates = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && p[(i, j)] > threshold {
                candidates.push(Edge {
                    from: i,
                    to: j,
                    weight: p[(i, j)],
                });
            }
        }
    }
    CommTopology::from_candidates(n, candidates).expect("candidate edges are well-formed")
}

/// Every intermediate of one design, kept for gradient computation.
#[derive(Debug, Clone)]
pub struct Design {
    pub topology: CommTopology,
    pub sketch: SketchMatrix,
    pub refined: RefinedMatrix,
    pub latent: LatentState,
}

pub fn design(
    graph: &TaskGraph,
    params: &DesignerParams,
    config: &DesignConfig,
    rng: &mut Rng,
    mode: Mode,
) -> Result<Design> {
    config.validate()?;
    let (mu, log_sigma) = gcn_encode(graph, params)?;
    let latent = match mode {
        Mode::Stochastic => sample_latent(&mu, &log_sigma, rng),
        Mode::Deterministic => {
            let zeros = Matrix::zeros(mu.rows(), mu.cols());
            sample_latent_with_noise(&mu, &log_sigma, zeros)
        }
    };
    let sketch = sketch_edges(&latent, params, config.tau, rng, mode);
    let r = config.rank_for(graph.n_agents())?;
    let refined = refine_low_rank(&sketch.s, &graph.anchor, r, config.zeta)?;
    if !refined.s_tilde.is_finite() {
        return Err(Error::Numeric("refined adjacency is not finite".into()));
    }
    let topology = extract_topology(&refined, config.threshold);
    Ok(Design {
        topology,
        sketch,
        refined,
        latent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{AgentSpec, HashEmbedder};
    use crate::network::{build_task_graph, AnchorKind};
    use crate::numerics::nuclear_norm;

    fn small_graph(n: usize, d: usize) -> TaskGraph {
        let agents: Vec<_> = (0..n).map(|i| AgentSpec::new(i, "mock", format!("R{i}"))).collect();
        let e = HashEmbedder::new(d).unwrap();
        build_task_graph(&agents, "compute 3+4", AnchorKind::Chain, &e, &mut Rng::new(0)).unwrap()
    }

    #[test]
    fn zero_params_give_zero_latents() {
        let g = small_graph(3, 16);
        let dims = Dims {
            feature: 16,
            hidden: 4,
            latent: 2,
            ffn: 3,
        };
        let (mu, ls) = gcn_encode(&g, &DesignerParams::zeros(dims)).unwrap();
        assert_eq!(mu, Matrix::zeros(4, 2));
        assert_eq!(ls, Matrix::zeros(4, 2));
    }

    #[test]
    fn shapes_and_dimension_checks() {
        let g = small_graph(5, 384);
        let p = DesignerParams::init(Dims::default(), &mut Rng::new(1));
        let (mu, ls) = gcn_encode(&g, &p).unwrap();
        assert_eq!(mu.shape(), (6, 32));
        assert_eq!(ls.shape(), (6, 32));
        let wrong = DesignerParams::init(Dims::with_feature(16), &mut Rng::new(1));
        assert!(matches!(gcn_encode(&g, &wrong), Err(Error::Config(_))));
    }

    #[test]
    fn reparameterization() {
        let mu = Matrix::from_rows(&[vec![1.0]]);
        let ls = Matrix::from_rows(&[vec![0.0]]);
        let l = sample_latent_with_noise(&mu, &ls, Matrix::from_rows(&[vec![0.5]]));
        assert_eq!(l.h[(0, 0)], 1.5);

        let tight = Matrix::from_rows(&[vec![-10.0]]);
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            let l = sample_latent(&mu, &tight, &mut rng);
            assert!((l.h[(0, 0)] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn deterministic_sketch_with_zero_logits_is_one_half() {
        let s = sketch_with_noise(Matrix::zeros(3, 3), Matrix::from_fn(3, 3, |_, _| 0.5), 0.01);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(s.s[(i, j)], if i == j { 0.0 } else { 0.5 });
            }
        }
    }

    #[test]
    fn refinement_examples() {
        let s = Matrix::from_rows(&[
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.0, 0.0],
        ]);
        let anchor = AdjacencyMatrix::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let r = refine_low_rank(&s, &anchor, 3, 0.0).unwrap();
        assert!(r.s_tilde.approx_eq(&s, 1e-8));

        let sigma_max = svd(&r.z.t_matmul(&s).matmul(&r.z)).unwrap().singular_values[0];
        let r = refine_low_rank(&s, &anchor, 3, 2.0 * sigma_max + 1e-9).unwrap();
        assert!(r.w.max_abs() < 1e-12);
        assert!(extract_topology(&r, 0.5).edges.is_empty());
    }

    #[test]
    fn nuclear_norm_identity_and_factorization() {
        let mut rng = Rng::new(8);
        let s = Matrix::from_fn(5, 5, |i, j| if i == j { 0.0 } else { rng.uniform() });
        let anchor = AdjacencyMatrix::from_edges(5, &[(0, 1), (1, 2), (2, 3), (3, 4)]).unwrap();
        let r = refine_low_rank(&s, &anchor, 3, 0.1).unwrap();
        let zwz = r.z.matmul(&r.w).matmul_t(&r.z);
        assert!(zwz.approx_eq(&r.s_tilde, 1e-10));
        let lhs = nuclear_norm(&r.s_tilde).unwrap();
        let rhs = nuclear_norm(&r.w).unwrap();
        assert!((lhs - rhs).abs() < 1e-8);
    }

    #[test]
    fn extraction_examples() {
        let refined = |m: Matrix| RefinedMatrix {
            s_tilde: m,
            z: Matrix::identity(2),
            w: Matrix::identity(2),
            rank_r: 2,
        };
        assert!(extract_topology(&refined(Matrix::zeros(2, 2)), 0.5).edges.is_empty());
        let t = extract_topology(&refined(Matrix::from_rows(&[vec![0.0, 0.9], vec![0.2, 0.0]])), 0.5);
        assert_eq!(t.edges, vec![Edge { from: 0, to: 1, weight: 0.9 }]);
        let t = extract_topology(&refined(Matrix::from_rows(&[vec![0.0, 0.9], vec![0.6, 0.0]])), 0.5);
        assert_eq!(t.edges, vec![Edge { from: 0, to: 1, weight: 0.9 }]);
        // values above 1 are clamped before becoming weights
        let t = extract_topology(&refined(Matrix::from_rows(&[vec![0.0, 1.7], vec![0.0, 0.0]])), 0.5);
        assert_eq!(t.edges[0].weight, 1.0);
    }

    #[test]
    fn design_is_deterministic_and_structurally_valid() {
        let g = small_graph(5, 384);
        let p = DesignerParams::init(Dims::default(), &mut Rng::new(2));
        let cfg = DesignConfig::default();
        for mode in [Mode::Stochastic, Mode::Deterministic] {
            let a = design(&g, &p, &cfg, &mut Rng::new(9), mode).unwrap();
            let b = design(&g, &p, &cfg, &mut Rng::new(9), mode).unwrap();
            assert_eq!(a.topology, b.topology);
            assert!(a.topology.edge_count() <= 20);
            assert!(a.topology.is_acyclic());
        }
    }

    #[test]
    fn config_validation() {
        let mut c = DesignConfig::default();
        assert_eq!(c.rank_for(5).unwrap(), 3);
        assert_eq!(c.rank_for(1).unwrap(), 1);
        c.rank = Some(6);
        assert!(c.rank_for(5).is_err());
        c = DesignConfig { tau: 0.0, ..DesignConfig::default() };
        assert!(c.validate().is_err());
        c = DesignConfig { threshold: 1.0, ..DesignConfig::default() };
        assert!(c.validate().is_err());
    }
}
