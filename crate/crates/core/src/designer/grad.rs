//! Reverse-mode differentiation of the designer with the noise draws and the
//! low-rank basis `Z` held fixed.
//!
//! The soft-thresholding step `W = svt(Y, t)` is differentiated exactly via
//! the adjoint of a spectral matrix function. With `Y = U·Σ·Vᵀ`,
//! `f(σ) = max(σ − t, 0)` and upstream gradient `G`, let `Ĝ = Uᵀ·G·V`; then
//! `∂L/∂Y = U·C·Vᵀ` with `C_ii = f′(σ_i)·Ĝ_ii` and, off the diagonal,
//! `C_ij = a_ij·(Ĝ_ij + Ĝ_ji)/2 + b_ij·(Ĝ_ij − Ĝ_ji)/2`, where
//! `a_ij = (f_i − f_j)/(σ_i − σ_j)` and `b_ij = (f_i + f_j)/(σ_i + σ_j)`.

use crate::error::{Error, Result};
use crate::network::{AdjacencyMatrix, TaskGraph};
use crate::numerics::{relu, Matrix, Rng, SvdResult};

use super::{
    encoder_pass, extract_topology, leading_basis, pair_input, refine_with_basis,
    sample_latent_with_noise, sketch_with_noise, DesignConfig, DesignerParams, EncoderPass,
    LatentState, RefinedMatrix, SketchMatrix,
};

/// Probabilities used in edge likelihoods are clamped into `[PROB_CLAMP, 1 − PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-6;

/// Singular values closer than this are treated as equal in the SVT adjoint.
const SPECTRAL_GAP: f64 = 1e-12;

/// The random inputs of one design: Gaussian latent noise and the uniform
/// draws of the edge relaxation.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub latent: Matrix,
    pub uniform: Matrix,
}

impl NoiseDraw {
    /// Draws in the same order as [`super::design`] in stochastic mode:
    /// latent noise row-major, then one uniform per off-diagonal pair.
    pub fn sample(n_agents: usize, latent_dim: usize, rng: &mut Rng) -> Self {
        let latent = Matrix::from_fn(n_agents + 1, latent_dim, |_, _| rng.gaussian());
        let uniform = Matrix::from_fn(n_agents, n_agents, |i, j| {
            if i == j {
                0.5
            } else {
                rng.uniform()
            }
        });
        Self { latent, uniform }
    }

    /// Mean latent and `ε = 0.5` everywhere.
    pub fn deterministic(n_agents: usize, latent_dim: usize) -> Self {
        Self {
            latent: Matrix::zeros(n_agents + 1, latent_dim),
            uniform: Matrix::from_fn(n_agents, n_agents, |_, _| 0.5),
        }
    }
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct Trace {
    enc: EncoderPass,
    pub latent: LatentState,
    pub sketch: SketchMatrix,
    pub refined: RefinedMatrix,
    /// SVD of `Zᵀ·M·Z` before shrinkage.
    inner: SvdResult,
    tau: f64,
    zeta: f64,
}

impl Trace {
    pub fn n_agents(&self) -> usize {
        self.sketch.s.rows()
    }

    pub fn basis(&self) -> &Matrix {
        &self.refined.z
    }

    /// Refined probabilities clamped into `[PROB_CLAMP, 1 − PROB_CLAMP]`.
    pub fn edge_probs(&self) -> Matrix {
        clamp_probs(&self.refined.s_tilde)
    }

    pub fn topology(&self, threshold: f64) -> super::CommTopology {
        extract_topology(&self.refined, threshold)
    }
}

pub fn clamp_probs(s_tilde: &Matrix) -> Matrix {
    s_tilde.map(|x| x.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
}

/// Full design pass with given noise. `basis = None` computes `Z` from the sketch.
pub fn forward(
    graph: &TaskGraph,
    params: &DesignerParams,
    config: &DesignConfig,
    noise: &NoiseDraw,
    basis: Option<&Matrix>,
) -> Result<Trace> {
    config.validate()?;
    super::check_dims(graph, params)?;
    let n = graph.n_agents();
    let enc = encoder_pass(graph, params);
    let latent = sample_latent_with_noise(&enc.mu, &enc.log_sigma, noise.latent.clone());
    let logits = super::edge_logits(&latent, params);
    let sketch = sketch_with_noise(logits, noise.uniform.clone(), config.tau);
    let z = match basis {
        Some(z) => {
            if z.rows() != n {
                return Err(Error::Config("basis row count differs from agent count".into()));
            }
            z.clone()
        }
        None => leading_basis(&sketch.s, config.rank_for(n)?)?,
    };
    let (refined, inner) = refine_with_basis(&sketch.s, &graph.anchor, &z, config.zeta)?;
    if !refined.s_tilde.is_finite() {
        return Err(Error::Numeric("refined adjacency is not finite".into()));
    }
    Ok(Trace {
        enc,
        latent,
        sketch,
        refined,
        inner,
        tau: config.tau,
        zeta: config.zeta,
    })
}

/// Bernoulli log-likelihood of an edge mask over the off-diagonal pairs.
pub fn mask_log_prob(probs: &Matrix, mask: &[Vec<bool>]) -> f64 {
    let n = probs.rows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let p = probs[(i, j)];
                total += if mask[i][j] { p.ln() } else { (1.0 - p).ln() };
            }
        }
    }
    total
}

/// Gradient of [`mask_log_prob`] of the clamped probabilities with respect to
/// the unclamped refined matrix.
pub fn mask_log_prob_grad(s_tilde: &Matrix, mask: &[Vec<bool>]) -> Matrix {
    let n = s_tilde.rows();
    Matrix::from_fn(n, n, |i, j| {
        let x = s_tilde[(i, j)];
        if i == j || x <= PROB_CLAMP || x >= 1.0 - PROB_CLAMP {
            0.0
        } else if mask[i][j] {
            1.0 / x
        } else {
            -1.0 / (1.0 - x)
        }
    })
}

/// `(½‖S − S̃‖² + ½‖A − S̃‖², ζ‖W‖_*)` on the unclamped refinement.
pub fn regularizers(trace: &Trace, anchor: &AdjacencyMatrix) -> (f64, f64) {
    let st = &trace.refined.s_tilde;
    let l_anchor =
        0.5 * trace.sketch.s.sub(st).frobenius_sq() + 0.5 * anchor.matrix().sub(st).frobenius_sq();
    let shrunk: f64 = trace
        .inner
        .singular_values
        .iter()
        .map(|s| (s - trace.zeta / 2.0).max(0.0))
        .sum();
    (l_anchor, trace.zeta * shrunk)
}

/// Upstream gradients entering the designer.
#[derive(Debug, Clone)]
pub struct Upstream {
    /// `∂L/∂S̃`.
    pub d_s_tilde: Matrix,
    /// Direct `∂L/∂S` (terms that read the sketch without going through `S̃`).
    pub d_s: Matrix,
    /// Weight on `‖W‖_*`.
    pub nuclear_weight: f64,
}

impl Upstream {
    pub fn zeros(n: usize) -> Self {
        Self {
            d_s_tilde: Matrix::zeros(n, n),
            d_s: Matrix::zeros(n, n),
            nuclear_weight: 0.0,
        }
    }

    /// `scale · ∇ log P(mask)`.
    pub fn log_prob(trace: &Trace, mask: &[Vec<bool>], scale: f64) -> Self {
        let mut up = Self::zeros(trace.n_agents());
        up.d_s_tilde = mask_log_prob_grad(&trace.refined.s_tilde, mask).scale(scale);
        up
    }

    /// Gradient of [`regularizers`] summed.
    pub fn regularizers(trace: &Trace, anchor: &AdjacencyMatrix) -> Self {
        let s = &trace.sketch.s;
        let st = &trace.refined.s_tilde;
        Self {
            d_s_tilde: st.sub(s).add(&st.sub(anchor.matrix())),
            d_s: s.sub(st),
            nuclear_weight: trace.zeta,
        }
    }
}

/// Adjoint of `Y ↦ U·diag(max(σ − t, 0))·Vᵀ`.
fn svt_adjoint(dec: &SvdResult, t: f64, g: &Matrix) -> Matrix {
    let sig = &dec.singular_values;
    let k = sig.len();
    let f: Vec<f64> = sig.iter().map(|s| (s - t).max(0.0)).collect();
    let fp = |s: f64| if s > t { 1.0 } else { 0.0 };
    let gh = dec.u.t_matmul(g).matmul(&dec.v);
    let c = Matrix::from_fn(k, k, |i, j| {
        if i == j {
            return fp(sig[i]) * gh[(i, i)];
        }
        let a = if (sig[i] - sig[j]).abs() > SPECTRAL_GAP {
            (f[i] - f[j]) / (sig[i] - sig[j])
        } else {
            0.5 * (fp(sig[i]) + fp(sig[j]))
        };
        let b = if sig[i] + sig[j] > SPECTRAL_GAP {
            (f[i] + f[j]) / (sig[i] + sig[j])
        } else if t == 0.0 {
            1.0
        } else {
            0.0
        };
        let sym = 0.5 * (gh[(i, j)] + gh[(j, i)]);
        let skew = 0.5 * (gh[(i, j)] - gh[(j, i)]);
        a * sym + b * skew
    });
    dec.u.matmul(&c).matmul_t(&dec.v)
}

/// Parameter gradient of `⟨d_s_tilde, S̃⟩ + ⟨d_s, S⟩ + nuclear_weight·‖W‖_*`.
pub fn backward(trace: &Trace, params: &DesignerParams, up: &Upstream) -> Result<DesignerParams> {
    let n = trace.n_agents();
    let z = &trace.refined.z;
    let t = trace.zeta / 2.0;

    // S̃ = Z·W·Zᵀ and the nuclear-norm term on W.
    let mut d_w = z.t_matmul(&up.d_s_tilde).matmul(z);
    if up.nuclear_weight != 0.0 {
        let dec = &trace.inner;
        let k = dec.singular_values.len();
        let active: Vec<f64> = dec
            .singular_values
            .iter()
            .map(|s| if *s > t { up.nuclear_weight } else { 0.0 })
            .collect();
        let sub = Matrix::from_fn(k, k, |i, j| if i == j { active[i] } else { 0.0 });
        d_w.add_assign(&dec.u.matmul(&sub).matmul_t(&dec.v));
    }
    let d_y = svt_adjoint(&trace.inner, t, &d_w);
    // Y = Zᵀ·M·Z, M = (S + A)/2.
    let d_m = z.matmul(&d_y).matmul_t(z);
    let mut d_s = up.d_s.clone();
    d_s.add_assign(&d_m.scale(0.5));

    let s = &trace.sketch.s;
    let d_logit = Matrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            d_s[(i, j)] * s[(i, j)] * (1.0 - s[(i, j)]) / trace.tau
        }
    });

    let mut grads = params.zeros_like();
    let h = &trace.latent.h;
    let task = trace.latent.task_row;
    let l = h.cols();
    let f = params.ffn_b1.len();
    let mut d_h = Matrix::zeros(h.rows(), l);
    let mut pre = vec![0.0; f];
    let mut d_pre = vec![0.0; f];
    for i in 0..n {
        for j in 0..n {
            let g = d_logit[(i, j)];
            if i == j || g == 0.0 {
                continue;
            }
            let x = pair_input(h, i, j, task);
            for (k, p) in pre.iter_mut().enumerate() {
                let mut a = params.ffn_b1[k];
                for (r, xr) in x.iter().enumerate() {
                    a += params.ffn_w1[(r, k)] * xr;
                }
                *p = a;
            }
            grads.ffn_b2 += g;
            for k in 0..f {
                grads.ffn_w2[(k, 0)] += g * relu(pre[k]);
                d_pre[k] = if pre[k] > 0.0 { g * params.ffn_w2[(k, 0)] } else { 0.0 };
                grads.ffn_b1[k] += d_pre[k];
            }
            for (r, xr) in x.iter().enumerate() {
                let w_row = params.ffn_w1.row(r);
                let mut dx = 0.0;
                for k in 0..f {
                    if d_pre[k] != 0.0 {
                        grads.ffn_w1[(r, k)] += xr * d_pre[k];
                        dx += w_row[k] * d_pre[k];
                    }
                }
                let (node, col) = match r / l {
                    0 => (i, r),
                    1 => (j, r - l),
                    _ => (task, r - 2 * l),
                };
                d_h[(node, col)] += dx;
            }
        }
    }

    // h = μ + exp(log σ)·ε, log σ clamped.
    let enc = &trace.enc;
    let noise = &trace.latent.noise;
    let d_mu = d_h.clone();
    let d_ls = Matrix::from_fn(d_h.rows(), l, |r, c| {
        let raw = enc.ls_raw[(r, c)];
        if raw.abs() >= super::LOG_SIGMA_CLAMP {
            0.0
        } else {
            d_h[(r, c)] * enc.log_sigma[(r, c)].exp() * noise[(r, c)]
        }
    });
    grads.w_mu = enc.q.t_matmul(&d_mu);
    grads.w_logsigma = enc.q.t_matmul(&d_ls);
    let mut d_q = d_mu.matmul_t(&params.w_mu);
    d_q.add_assign(&d_ls.matmul_t(&params.w_logsigma));
    let d_hidden = enc.a_hat.t_matmul(&d_q);
    let d_pre_gcn = d_hidden.zip_map(&enc.pre, |d, p| if p > 0.0 { d } else { 0.0 });
    grads.w_shared = enc.ax.t_matmul(&d_pre_gcn);

    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient("designer backward pass".into()));
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{AgentSpec, HashEmbedder};
    use crate::designer::{design, Dims, Mode};
    use crate::network::{build_task_graph, AnchorKind};
    use crate::numerics::{svd, svt};

    fn setup(n: usize) -> (TaskGraph, DesignerParams) {
        let agents: Vec<_> = (0..n).map(|i| AgentSpec::new(i, "mock", format!("role {i}"))).collect();
        let e = HashEmbedder::new(12).unwrap();
        let g = build_task_graph(&agents, "compute 1+2", AnchorKind::Chain, &e, &mut Rng::new(4)).unwrap();
        let dims = Dims {
            feature: 12,
            hidden: 6,
            latent: 4,
            ffn: 5,
        };
        (g, DesignerParams::init(dims, &mut Rng::new(5)))
    }

    #[test]
    fn sampled_noise_matches_design() {
        let (g, p) = setup(4);
        let cfg = DesignConfig::default();
        let d = design(&g, &p, &cfg, &mut Rng::new(17), Mode::Stochastic).unwrap();
        let noise = NoiseDraw::sample(4, 4, &mut Rng::new(17));
        let t = forward(&g, &p, &cfg, &noise, None).unwrap();
        assert_eq!(t.refined.s_tilde, d.refined.s_tilde);
        assert_eq!(t.topology(cfg.threshold), d.topology);

        let det = design(&g, &p, &cfg, &mut Rng::new(0), Mode::Deterministic).unwrap();
        let t = forward(&g, &p, &cfg, &NoiseDraw::deterministic(4, 4), None).unwrap();
        assert_eq!(t.refined.s_tilde, det.refined.s_tilde);
    }

    #[test]
    fn svt_adjoint_matches_finite_differences() {
        let mut rng = Rng::new(11);
        for t in [0.0, 0.3] {
            let y = Matrix::from_fn(3, 3, |_, _| rng.uniform_range(-1.0, 1.0));
            let g = Matrix::from_fn(3, 3, |_, _| rng.uniform_range(-1.0, 1.0));
            let dec = svd(&y).unwrap();
            let analytic = svt_adjoint(&dec, t, &g);
            let f = |m: &Matrix| {
                let w = svt(m, t).unwrap();
                w.zip_map(&g, |a, b| a * b).sum()
            };
            let numeric = crate::numerics::finite_diff_grad(f, &y, 1e-6);
            assert!(analytic.approx_eq(&numeric, 1e-6), "{analytic:?} vs {numeric:?}");
        }
    }

    #[test]
    fn log_prob_of_empty_graph_is_near_zero() {
        let probs = clamp_probs(&Matrix::zeros(3, 3));
        let mask = vec![vec![false; 3]; 3];
        let lp = mask_log_prob(&probs, &mask);
        assert!(lp < 0.0 && lp > -1e-5);
    }
}
