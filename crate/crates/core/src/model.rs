//! The residual-to-update graph network and its correction operator.
//!
//! One correction step injects the current mismatch residuals into per-node
//! features, aggregates neighbor messages (either a permutation-invariant
//! DeepSets sum or edge-aware multi-head attention whose scores are biased
//! by per-line admittance features), and decodes per-node updates
//! `(Δθ, ΔV, Δm)`. At inference the update can be globalized by a
//! backtracking line search on the power-mismatch merit function, with
//! per-step caps and voltage bounds keeping states physical.
//!
//! All forward passes run on an [`autodiff::Tape`]; training uses a
//! gradient tape, inference a values-only tape, so both paths share one
//! implementation.

use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acpf::{
    clip_voltage, compute_residuals, merit, merit_of, wrap_angle, Residual, State,
};
use crate::autodiff::{Shape, Tape, Tensor};
use crate::grid::{AdmittanceMatrix, BusType, Grid, GridError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("non-finite state at unroll step {step}")]
    NonFinite { step: usize },
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Neighbor aggregation variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregatorKind {
    Mlp,
    Attention,
}

impl AggregatorKind {
    pub fn label(self) -> &'static str {
        match self {
            AggregatorKind::Mlp => "mlp",
            AggregatorKind::Attention => "attn",
        }
    }
}

impl std::str::FromStr for AggregatorKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(AggregatorKind::Mlp),
            "attn" | "attention" => Ok(AggregatorKind::Attention),
            other => Err(format!("unknown aggregator '{other}' (expected mlp|attn)")),
        }
    }
}

/// How the unrolled operator applies its proposed updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Caps and bounds, direct update; the differentiable training path.
    Train,
    /// Plain forward unroll: wrap angles only.
    Base,
    /// Per-step caps and voltage bounds.
    Caps,
    /// Backtracking line search without caps.
    Ls,
    /// Caps plus backtracking line search.
    CapsLs,
}

impl Mode {
    pub fn label(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Base => "base",
            Mode::Caps => "caps",
            Mode::Ls => "ls",
            Mode::CapsLs => "caps_ls",
        }
    }

    pub fn uses_caps(self) -> bool {
        matches!(self, Mode::Train | Mode::Caps | Mode::CapsLs)
    }

    pub fn uses_line_search(self) -> bool {
        matches!(self, Mode::Ls | Mode::CapsLs)
    }

    /// Voltage bounds apply in every mode that stabilizes the update.
    pub fn uses_clip(self) -> bool {
        !matches!(self, Mode::Base)
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Mode::Train),
            "base" => Ok(Mode::Base),
            "caps" => Ok(Mode::Caps),
            "ls" => Ok(Mode::Ls),
            "caps_ls" | "caps-ls" => Ok(Mode::CapsLs),
            other => Err(format!(
                "unknown mode '{other}' (expected base|caps|ls|caps_ls)"
            )),
        }
    }
}

/// Line-search and stabilization constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsConfig {
    pub alpha0: f64,
    pub c1: f64,
    pub rho: f64,
    pub alpha_min: f64,
    pub d_theta_max: f64,
    pub d_v_frac: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for LsConfig {
    fn default() -> LsConfig {
        LsConfig {
            alpha0: 1.0,
            c1: 1e-4,
            rho: 0.5,
            alpha_min: 0.05,
            d_theta_max: 0.3,
            d_v_frac: 0.10,
            v_min: 0.8,
            v_max: 1.2,
        }
    }
}

/// Architecture dimensions shared by both aggregators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Latent width `d`.
    pub d_model: usize,
    pub heads: usize,
    /// Attention layers per correction step.
    pub layers: usize,
    /// DeepSets message channels.
    pub channels: usize,
}

impl Default for ModelDims {
    fn default() -> ModelDims {
        ModelDims {
            d_model: 16,
            heads: 4,
            layers: 1,
            channels: 4,
        }
    }
}

impl ModelDims {
    /// Node feature width: `[V, θ, ΔP, ΔQ]` plus the latent block.
    pub fn feature_dim(&self) -> usize {
        4 + self.d_model
    }

    /// Edge feature width: `[Re(y), Im(y), b_half, direction]`.
    pub const EDGE_DIM: usize = 4;

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// One named parameter matrix (vectors are `k×1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// All trainable tensors of one model variant, in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub kind: AggregatorKind,
    pub dims: ModelDims,
    /// Feed `V−1` instead of raw `V` into the node features.
    pub normalize_features: bool,
    pub tensors: Vec<ParamTensor>,
}

impl ModelParams {
    /// Glorot-uniform initialization (zero biases), deterministic per seed.
    pub fn init(kind: AggregatorKind, dims: ModelDims, seed: u64) -> ModelParams {
        assert!(
            dims.d_model % dims.heads == 0,
            "d_model {} not divisible by heads {}",
            dims.d_model,
            dims.heads
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_5a5a_dead_beef);
        let mut tensors = Vec::new();
        let mut weight = |name: &str, rows: usize, cols: usize, tensors: &mut Vec<ParamTensor>| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            tensors.push(ParamTensor {
                name: name.to_string(),
                rows,
                cols,
                data,
            });
        };
        let bias = |name: &str, rows: usize, tensors: &mut Vec<ParamTensor>| {
            tensors.push(ParamTensor {
                name: name.to_string(),
                rows,
                cols: 1,
                data: vec![0.0; rows],
            });
        };

        let d = dims.d_model;
        let f = dims.feature_dim();
        match kind {
            AggregatorKind::Attention => {
                for l in 0..dims.layers {
                    let in_dim = if l == 0 { f } else { d };
                    weight(&format!("attn{l}.w_q"), in_dim, d, &mut tensors);
                    weight(&format!("attn{l}.w_k"), in_dim, d, &mut tensors);
                    weight(&format!("attn{l}.w_v"), in_dim, d, &mut tensors);
                    weight(&format!("attn{l}.w_o"), d, d, &mut tensors);
                    weight(&format!("attn{l}.edge.w1"), ModelDims::EDGE_DIM, d, &mut tensors);
                    bias(&format!("attn{l}.edge.b1"), d, &mut tensors);
                    weight(&format!("attn{l}.edge.w2"), d, dims.heads, &mut tensors);
                    bias(&format!("attn{l}.edge.b2"), dims.heads, &mut tensors);
                }
            }
            AggregatorKind::Mlp => {
                weight("msg.w1", f + ModelDims::EDGE_DIM, d, &mut tensors);
                bias("msg.b1", d, &mut tensors);
                weight("msg.w2", d, dims.channels, &mut tensors);
                bias("msg.b2", dims.channels, &mut tensors);
                // bias-free so an empty neighborhood aggregates to zero
                weight("msg.proj", dims.channels, d, &mut tensors);
            }
        }
        weight("upd.w1", f + d, d, &mut tensors);
        bias("upd.b1", d, &mut tensors);
        weight("upd.w2", d, d, &mut tensors);
        bias("upd.b2", d, &mut tensors);
        weight("upd.w3", d, 2 + d, &mut tensors);
        bias("upd.b3", 2 + d, &mut tensors);

        ModelParams {
            kind,
            dims,
            normalize_features: false,
            tensors,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }
}

/// Preprocessed (optionally block-diagonal) graph: flow list for residual
/// evaluation, directed scored edges sorted by destination, masks, and
/// per-scenario node spans.
#[derive(Debug, Clone)]
pub struct GraphPrep {
    pub n_total: usize,
    /// (node offset, bus count) per scenario.
    pub spans: Vec<(usize, usize)>,
    pub flow_rows: Arc<Vec<usize>>,
    pub flow_cols: Arc<Vec<usize>>,
    pub flow_g: Vec<f64>,
    pub flow_b: Vec<f64>,
    pub edge_src: Arc<Vec<usize>>,
    pub edge_dst: Arc<Vec<usize>>,
    /// Row-major `E×4` `[Re(y), Im(y), b_half, direction]`.
    pub edge_feat: Vec<f64>,
    pub p_set: Vec<f64>,
    pub q_set: Vec<f64>,
    pub p_mask: Vec<f64>,
    pub q_mask: Vec<f64>,
    pub theta_mask: Vec<f64>,
    pub v_mask: Vec<f64>,
}

impl GraphPrep {
    pub fn single(grid: &Grid, y: &AdmittanceMatrix) -> Result<GraphPrep, ModelError> {
        GraphPrep::batch(&[(grid, y)])
    }

    /// Concatenate scenarios block-diagonally; no edge crosses a scenario
    /// boundary and scored edges stay sorted by (destination, source).
    pub fn batch(items: &[(&Grid, &AdmittanceMatrix)]) -> Result<GraphPrep, ModelError> {
        let mut prep = GraphPrep {
            n_total: 0,
            spans: Vec::with_capacity(items.len()),
            flow_rows: Arc::new(Vec::new()),
            flow_cols: Arc::new(Vec::new()),
            flow_g: Vec::new(),
            flow_b: Vec::new(),
            edge_src: Arc::new(Vec::new()),
            edge_dst: Arc::new(Vec::new()),
            edge_feat: Vec::new(),
            p_set: Vec::new(),
            q_set: Vec::new(),
            p_mask: Vec::new(),
            q_mask: Vec::new(),
            theta_mask: Vec::new(),
            v_mask: Vec::new(),
        };
        let mut flow_rows = Vec::new();
        let mut flow_cols = Vec::new();
        let mut edges: Vec<(usize, usize, [f64; 4])> = Vec::new();

        for &(grid, y) in items {
            let offset = prep.n_total;
            let n = grid.n();
            prep.spans.push((offset, n));
            prep.n_total += n;

            for &(i, k, g, b) in y.nonzeros() {
                flow_rows.push(offset + i);
                flow_cols.push(offset + k);
                prep.flow_g.push(g);
                prep.flow_b.push(b);
            }
            for line in grid.merged_line_admittances()? {
                let feats = [line.y.re, line.y.im, line.b_half];
                edges.push((
                    offset + line.from,
                    offset + line.to,
                    [feats[0], feats[1], feats[2], 0.0],
                ));
                edges.push((
                    offset + line.to,
                    offset + line.from,
                    [feats[0], feats[1], feats[2], 1.0],
                ));
            }
            for bus in &grid.buses {
                let (pm, qm) = match bus.kind {
                    BusType::Slack => (0.0, 0.0),
                    BusType::Pv => (1.0, 0.0),
                    BusType::Pq => (1.0, 1.0),
                };
                prep.p_set.push(if pm > 0.0 { bus.p_set } else { 0.0 });
                prep.q_set.push(if qm > 0.0 { bus.q_set } else { 0.0 });
                prep.p_mask.push(pm);
                prep.q_mask.push(qm);
                prep.theta_mask.push(pm);
                prep.v_mask.push(qm);
            }
        }
        edges.sort_by_key(|&(src, dst, _)| (dst, src));
        let mut edge_src = Vec::with_capacity(edges.len());
        let mut edge_dst = Vec::with_capacity(edges.len());
        for (src, dst, feat) in edges {
            edge_src.push(src);
            edge_dst.push(dst);
            prep.edge_feat.extend_from_slice(&feat);
        }
        prep.flow_rows = Arc::new(flow_rows);
        prep.flow_cols = Arc::new(flow_cols);
        prep.edge_src = Arc::new(edge_src);
        prep.edge_dst = Arc::new(edge_dst);
        Ok(prep)
    }

    pub fn edge_count(&self) -> usize {
        self.edge_src.len()
    }
}

/// Per-forward constant tensors derived from a [`GraphPrep`].
pub struct PrepConsts {
    pub g: Tensor,
    pub b: Tensor,
    pub p_set: Tensor,
    pub q_set: Tensor,
    pub p_mask: Tensor,
    pub q_mask: Tensor,
    pub theta_mask: Tensor,
    pub v_mask: Tensor,
    pub edge_feat: Tensor,
}

impl PrepConsts {
    pub fn new(tape: &mut Tape, prep: &GraphPrep) -> PrepConsts {
        let n = prep.n_total;
        let nnz = prep.flow_g.len();
        PrepConsts {
            g: tape.constant(prep.flow_g.clone(), Shape::vector(nnz)),
            b: tape.constant(prep.flow_b.clone(), Shape::vector(nnz)),
            p_set: tape.constant(prep.p_set.clone(), Shape::vector(n)),
            q_set: tape.constant(prep.q_set.clone(), Shape::vector(n)),
            p_mask: tape.constant(prep.p_mask.clone(), Shape::vector(n)),
            q_mask: tape.constant(prep.q_mask.clone(), Shape::vector(n)),
            theta_mask: tape.constant(prep.theta_mask.clone(), Shape::vector(n)),
            v_mask: tape.constant(prep.v_mask.clone(), Shape::vector(n)),
            edge_feat: tape.constant(
                prep.edge_feat.clone(),
                Shape::matrix(prep.edge_count(), ModelDims::EDGE_DIM),
            ),
        }
    }
}

/// Tape handles for the parameter tensors, in the same fixed order as
/// [`ModelParams::tensors`].
pub struct ParamTensors {
    pub handles: Vec<Tensor>,
    by_name: std::collections::BTreeMap<String, usize>,
}

impl ParamTensors {
    pub fn load(tape: &mut Tape, params: &ModelParams, trainable: bool) -> ParamTensors {
        let mut handles = Vec::with_capacity(params.tensors.len());
        let mut by_name = std::collections::BTreeMap::new();
        for (i, t) in params.tensors.iter().enumerate() {
            let h = tape.leaf(t.data.clone(), Shape::matrix(t.rows, t.cols), trainable);
            handles.push(h);
            by_name.insert(t.name.clone(), i);
        }
        ParamTensors { handles, by_name }
    }

    pub fn get(&self, name: &str) -> Tensor {
        self.handles[*self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter tensor '{name}'"))]
    }
}

/// Mismatch residuals on the tape via the admittance flow list; masked
/// entries are exactly zero.
pub fn residual_t(
    tape: &mut Tape,
    prep: &GraphPrep,
    consts: &PrepConsts,
    v: Tensor,
    theta: Tensor,
) -> (Tensor, Tensor) {
    let vi = tape.gather_rows(v, prep.flow_rows.clone());
    let vk = tape.gather_rows(v, prep.flow_cols.clone());
    let ti = tape.gather_rows(theta, prep.flow_rows.clone());
    let tk = tape.gather_rows(theta, prep.flow_cols.clone());
    let dth = tape.sub(ti, tk);
    let s = tape.sin(dth);
    let c = tape.cos(dth);
    let vv = tape.mul(vi, vk);

    let gc = tape.mul(consts.g, c);
    let bs = tape.mul(consts.b, s);
    let p_term = tape.add(gc, bs);
    let pe = tape.mul(vv, p_term);
    let p = tape.scatter_add_rows(pe, prep.flow_rows.clone(), prep.n_total);

    let gs = tape.mul(consts.g, s);
    let bc = tape.mul(consts.b, c);
    let q_term = tape.sub(gs, bc);
    let qe = tape.mul(vv, q_term);
    let q = tape.scatter_add_rows(qe, prep.flow_rows.clone(), prep.n_total);

    let dp_raw = tape.sub(consts.p_set, p);
    let dq_raw = tape.sub(consts.q_set, q);
    let dp = tape.mul(dp_raw, consts.p_mask);
    let dq = tape.mul(dq_raw, consts.q_mask);
    (dp, dq)
}

/// Node features `[V, θ, ΔP, ΔQ, m]` (width `4 + d`).
pub fn phys_features(
    tape: &mut Tape,
    params: &ModelParams,
    v: Tensor,
    theta: Tensor,
    dp: Tensor,
    dq: Tensor,
    latent: Tensor,
) -> Tensor {
    let v_feat = if params.normalize_features {
        tape.add_scalar(v, -1.0)
    } else {
        v
    };
    let x = tape.concat_cols(v_feat, theta);
    let x = tape.concat_cols(x, dp);
    let x = tape.concat_cols(x, dq);
    tape.concat_cols(x, latent)
}

/// DeepSets aggregation: shared message network over `[x_j, ℓ_ij]`, summed
/// per destination, bias-free projection to the latent width.
pub fn mlp_aggregate(
    tape: &mut Tape,
    prep: &GraphPrep,
    consts: &PrepConsts,
    pt: &ParamTensors,
    features: Tensor,
) -> Tensor {
    let xj = tape.gather_rows(features, prep.edge_src.clone());
    let inp = tape.concat_cols(xj, consts.edge_feat);
    let w1 = pt.get("msg.w1");
    let b1 = pt.get("msg.b1");
    let h = tape.affine(inp, w1, b1);
    let h = tape.leaky_relu(h, 0.01);
    let w2 = pt.get("msg.w2");
    let b2 = pt.get("msg.b2");
    let msgs = tape.affine(h, w2, b2);
    let summed = tape.scatter_add_rows(msgs, prep.edge_dst.clone(), prep.n_total);
    let proj = pt.get("msg.proj");
    tape.matmul(summed, proj)
}

/// Edge-aware multi-head attention aggregation for one layer. Returns the
/// mixed context and the per-head attention weights (`E×1` each, aligned
/// with the prep's scored-edge order).
pub fn attn_aggregate_layer(
    tape: &mut Tape,
    prep: &GraphPrep,
    consts: &PrepConsts,
    pt: &ParamTensors,
    dims: &ModelDims,
    layer: usize,
    features: Tensor,
) -> (Tensor, Vec<Tensor>) {
    let d_h = dims.head_dim();
    let w_q = pt.get(&format!("attn{layer}.w_q"));
    let w_k = pt.get(&format!("attn{layer}.w_k"));
    let w_v = pt.get(&format!("attn{layer}.w_v"));
    let q_all = tape.matmul(features, w_q);
    let k_all = tape.matmul(features, w_k);
    let v_all = tape.matmul(features, w_v);

    let e_w1 = pt.get(&format!("attn{layer}.edge.w1"));
    let e_b1 = pt.get(&format!("attn{layer}.edge.b1"));
    let e_w2 = pt.get(&format!("attn{layer}.edge.w2"));
    let e_b2 = pt.get(&format!("attn{layer}.edge.b2"));
    let eh = tape.affine(consts.edge_feat, e_w1, e_b1);
    let eh = tape.leaky_relu(eh, 0.01);
    let beta = tape.affine(eh, e_w2, e_b2);

    let q_e = tape.gather_rows(q_all, prep.edge_dst.clone());
    let k_e = tape.gather_rows(k_all, prep.edge_src.clone());
    let v_e = tape.gather_rows(v_all, prep.edge_src.clone());

    let mut head_ctx = None;
    let mut alphas = Vec::with_capacity(dims.heads);
    for h in 0..dims.heads {
        let qh = tape.narrow_cols(q_e, h * d_h, d_h);
        let kh = tape.narrow_cols(k_e, h * d_h, d_h);
        let qk = tape.mul(qh, kh);
        let score = tape.row_sum(qk);
        let score = tape.scale(score, 1.0 / (d_h as f64).sqrt());
        let bias_h = tape.narrow_cols(beta, h, 1);
        let score = tape.add(score, bias_h);
        let alpha = tape.segment_softmax(score, prep.edge_dst.clone());
        alphas.push(alpha);
        let vh = tape.narrow_cols(v_e, h * d_h, d_h);
        let weighted = tape.col_mul(vh, alpha);
        let summed = tape.scatter_add_rows(weighted, prep.edge_dst.clone(), prep.n_total);
        head_ctx = Some(match head_ctx {
            None => summed,
            Some(prev) => tape.concat_cols(prev, summed),
        });
    }
    let stacked = head_ctx.expect("at least one attention head");
    let w_o = pt.get(&format!("attn{layer}.w_o"));
    (tape.matmul(stacked, w_o), alphas)
}

/// Full aggregation for the configured variant; attention stacks
/// `dims.layers` layers within the step.
pub fn aggregate(
    tape: &mut Tape,
    prep: &GraphPrep,
    consts: &PrepConsts,
    pt: &ParamTensors,
    params: &ModelParams,
    features: Tensor,
) -> Tensor {
    match params.kind {
        AggregatorKind::Mlp => mlp_aggregate(tape, prep, consts, pt, features),
        AggregatorKind::Attention => {
            let mut h = features;
            for l in 0..params.dims.layers {
                let (ctx, _) = attn_aggregate_layer(tape, prep, consts, pt, &params.dims, l, h);
                h = ctx;
            }
            h
        }
    }
}

/// Decode `(Δθ, ΔV, Δm)` from `[x_i, ctx_i]` and apply bus-type masks:
/// slack rows get no update, PV rows no magnitude update.
pub fn propose_update(
    tape: &mut Tape,
    consts: &PrepConsts,
    pt: &ParamTensors,
    dims: &ModelDims,
    features: Tensor,
    ctx: Tensor,
) -> (Tensor, Tensor, Tensor) {
    let inp = tape.concat_cols(features, ctx);
    let w1 = pt.get("upd.w1");
    let b1 = pt.get("upd.b1");
    let h1 = tape.affine(inp, w1, b1);
    let h1 = tape.leaky_relu(h1, 0.01);
    let w2 = pt.get("upd.w2");
    let b2 = pt.get("upd.b2");
    let h2 = tape.affine(h1, w2, b2);
    let h2 = tape.leaky_relu(h2, 0.01);
    let w3 = pt.get("upd.w3");
    let b3 = pt.get("upd.b3");
    let out = tape.affine(h2, w3, b3);

    let dth_raw = tape.narrow_cols(out, 0, 1);
    let dv_raw = tape.narrow_cols(out, 1, 1);
    let dm = tape.narrow_cols(out, 2, dims.d_model);
    let dth = tape.mul(dth_raw, consts.theta_mask);
    let dv = tape.mul(dv_raw, consts.v_mask);
    (dth, dv, dm)
}

/// Per-step caps on plain vectors: `|Δθ| ≤ d_theta_max`,
/// `|ΔV| ≤ d_v_frac·V` elementwise.
pub fn apply_caps(
    dtheta: &[f64],
    dv: &[f64],
    v_current: &[f64],
    cfg: &LsConfig,
) -> (Vec<f64>, Vec<f64>) {
    let dth = dtheta
        .iter()
        .map(|x| x.clamp(-cfg.d_theta_max, cfg.d_theta_max))
        .collect();
    let dvc = dv
        .iter()
        .zip(v_current)
        .map(|(x, &vc)| {
            let cap = cfg.d_v_frac * vc;
            x.clamp(-cap, cap)
        })
        .collect();
    (dth, dvc)
}

/// Outcome of one backtracking line-search step.
#[derive(Debug, Clone)]
pub struct LsOutcome {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub latent: Vec<f64>,
    pub alpha: f64,
    pub accepted: bool,
    pub merit_before: f64,
    pub merit_after: f64,
}

/// Backtracking line search with the sufficient-decrease test
/// `F(trial) ≤ (1 − c1·α)·F_k` over `α ∈ {α0, ρ·α0, …} ∩ [α_min, α0]`,
/// falling back to `α_min` iff it strictly reduces the merit. A rejected
/// step returns the inputs bit-identically.
///
/// The caller is responsible for capping proposals and for passing a state
/// already inside bounds.
pub fn line_search_step(
    state: &State,
    latent: &[f64],
    dtheta: &[f64],
    dv: &[f64],
    dm: &[f64],
    merit_fn: &dyn Fn(&[f64], &[f64]) -> f64,
    cfg: &LsConfig,
) -> LsOutcome {
    let f_k = merit_fn(&state.v, &state.theta);
    let trial = |alpha: f64| -> (Vec<f64>, Vec<f64>) {
        let v: Vec<f64> = state
            .v
            .iter()
            .zip(dv)
            .map(|(&v, &d)| (v + alpha * d).clamp(cfg.v_min, cfg.v_max))
            .collect();
        let theta: Vec<f64> = state
            .theta
            .iter()
            .zip(dtheta)
            .map(|(&t, &d)| crate::acpf::wrap_angle_scalar(t + alpha * d))
            .collect();
        (v, theta)
    };
    let accept = |alpha: f64, v: Vec<f64>, theta: Vec<f64>, f_new: f64| -> LsOutcome {
        let latent = latent
            .iter()
            .zip(dm)
            .map(|(&m, &d)| m + alpha * d)
            .collect();
        LsOutcome {
            v,
            theta,
            latent,
            alpha,
            accepted: true,
            merit_before: f_k,
            merit_after: f_new,
        }
    };

    let mut alpha = cfg.alpha0;
    while alpha >= cfg.alpha_min {
        let (v, theta) = trial(alpha);
        let f_new = merit_fn(&v, &theta);
        if f_new <= (1.0 - cfg.c1 * alpha) * f_k {
            return accept(alpha, v, theta, f_new);
        }
        alpha *= cfg.rho;
    }
    let (v, theta) = trial(cfg.alpha_min);
    let f_new = merit_fn(&v, &theta);
    if f_new < f_k {
        return accept(cfg.alpha_min, v, theta, f_new);
    }
    LsOutcome {
        v: state.v.clone(),
        theta: state.theta.clone(),
        latent: latent.to_vec(),
        alpha: 0.0,
        accepted: false,
        merit_before: f_k,
        merit_after: f_k,
    }
}

/// One recorded unroll step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub state: State,
    pub residual: Residual,
    pub merit: f64,
    /// Line-search step size, when a line search ran.
    pub alpha: Option<f64>,
    pub accepted: Option<bool>,
}

/// States and residuals for steps `0..=K` of one scenario.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn k(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }

    pub fn initial_merit(&self) -> f64 {
        self.steps.first().map(|s| s.merit).unwrap_or(0.0)
    }

    pub fn final_merit(&self) -> f64 {
        self.steps.last().map(|s| s.merit).unwrap_or(0.0)
    }

    pub fn final_state(&self) -> &State {
        &self.steps.last().expect("non-empty trajectory").state
    }
}

/// Network outputs for one forward step, extracted to plain vectors.
struct StepProposal {
    dtheta: Vec<f64>,
    dv: Vec<f64>,
    dm: Vec<f64>,
}

fn forward_proposal(
    prep: &GraphPrep,
    params: &ModelParams,
    v: &[f64],
    theta: &[f64],
    latent: &[f64],
) -> StepProposal {
    let mut tape = Tape::no_grad();
    let consts = PrepConsts::new(&mut tape, prep);
    let pt = ParamTensors::load(&mut tape, params, false);
    let n = prep.n_total;
    let d = params.dims.d_model;
    let v_t = tape.leaf(v.to_vec(), Shape::vector(n), false);
    let th_t = tape.leaf(theta.to_vec(), Shape::vector(n), false);
    let m_t = tape.leaf(latent.to_vec(), Shape::matrix(n, d), false);
    let (dp, dq) = residual_t(&mut tape, prep, &consts, v_t, th_t);
    let x = phys_features(&mut tape, params, v_t, th_t, dp, dq, m_t);
    let ctx = aggregate(&mut tape, prep, &consts, &pt, params, x);
    let (dth, dv, dm) = propose_update(&mut tape, &consts, &pt, &params.dims, x, ctx);
    StepProposal {
        dtheta: tape.values(dth).to_vec(),
        dv: tape.values(dv).to_vec(),
        dm: tape.values(dm).to_vec(),
    }
}

/// Unroll `K` correction steps on a batch of scenarios; every scenario in
/// the block-diagonal batch evolves exactly as it would alone.
pub fn unroll_batch(
    items: &[(&Grid, &AdmittanceMatrix, &State)],
    params: &ModelParams,
    k: usize,
    mode: Mode,
    cfg: &LsConfig,
) -> Result<Vec<Trajectory>, ModelError> {
    let graphs: Vec<(&Grid, &AdmittanceMatrix)> = items.iter().map(|&(g, y, _)| (g, y)).collect();
    let prep = GraphPrep::batch(&graphs)?;
    let d = params.dims.d_model;

    let mut v: Vec<f64> = Vec::with_capacity(prep.n_total);
    let mut theta: Vec<f64> = Vec::with_capacity(prep.n_total);
    for &(_, _, state) in items {
        v.extend_from_slice(&state.v);
        theta.extend_from_slice(&state.theta);
    }
    theta = wrap_angle(&theta);
    if mode.uses_clip() {
        v = clip_voltage(&v, cfg.v_min, cfg.v_max);
    }
    let mut latent = vec![0.0; prep.n_total * d];

    let mut trajectories: Vec<Trajectory> = items
        .iter()
        .map(|_| Trajectory { steps: Vec::with_capacity(k + 1) })
        .collect();
    let record =
        |trajectories: &mut Vec<Trajectory>, v: &[f64], theta: &[f64], alphas: Option<Vec<(f64, bool)>>| {
            for (s, &(grid, y, _)) in items.iter().enumerate() {
                let (off, n) = (prep.spans[s].0, prep.spans[s].1);
                let state = State {
                    v: v[off..off + n].to_vec(),
                    theta: theta[off..off + n].to_vec(),
                };
                let residual = compute_residuals(grid, y, &state);
                let f = merit(&residual);
                let (alpha, accepted) = match &alphas {
                    Some(list) => (Some(list[s].0), Some(list[s].1)),
                    None => (None, None),
                };
                trajectories[s].steps.push(StepRecord {
                    state,
                    residual,
                    merit: f,
                    alpha,
                    accepted,
                });
            }
        };
    record(&mut trajectories, &v, &theta, None);

    for step in 0..k {
        if !v.iter().chain(theta.iter()).all(|x| x.is_finite()) {
            return Err(ModelError::NonFinite { step });
        }
        let proposal = forward_proposal(&prep, params, &v, &theta, &latent);
        let (dtheta, dv) = if mode.uses_caps() {
            apply_caps(&proposal.dtheta, &proposal.dv, &v, cfg)
        } else {
            (proposal.dtheta.clone(), proposal.dv.clone())
        };

        if mode.uses_line_search() {
            let mut alphas = Vec::with_capacity(items.len());
            for (s, &(grid, y, _)) in items.iter().enumerate() {
                let (off, n) = (prep.spans[s].0, prep.spans[s].1);
                let state = State {
                    v: v[off..off + n].to_vec(),
                    theta: theta[off..off + n].to_vec(),
                };
                let merit_fn =
                    |vv: &[f64], tt: &[f64]| -> f64 { merit_of(grid, y, vv, tt) };
                let outcome = line_search_step(
                    &state,
                    &latent[off * d..(off + n) * d],
                    &dtheta[off..off + n],
                    &dv[off..off + n],
                    &proposal.dm[off * d..(off + n) * d],
                    &merit_fn,
                    cfg,
                );
                v[off..off + n].copy_from_slice(&outcome.v);
                theta[off..off + n].copy_from_slice(&outcome.theta);
                latent[off * d..(off + n) * d].copy_from_slice(&outcome.latent);
                alphas.push((outcome.alpha, outcome.accepted));
            }
            record(&mut trajectories, &v, &theta, Some(alphas));
        } else {
            for i in 0..prep.n_total {
                theta[i] = crate::acpf::wrap_angle_scalar(theta[i] + dtheta[i]);
                v[i] += dv[i];
                if mode.uses_clip() {
                    v[i] = v[i].clamp(cfg.v_min, cfg.v_max);
                }
            }
            for (m, dm) in latent.iter_mut().zip(&proposal.dm) {
                *m += dm;
            }
            record(&mut trajectories, &v, &theta, None);
        }
    }
    Ok(trajectories)
}

/// Unroll one scenario; see [`unroll_batch`].
pub fn unroll(
    grid: &Grid,
    y: &AdmittanceMatrix,
    state0: &State,
    params: &ModelParams,
    k: usize,
    mode: Mode,
    cfg: &LsConfig,
) -> Result<Trajectory, ModelError> {
    Ok(unroll_batch(&[(grid, y, state0)], params, k, mode, cfg)?
        .pop()
        .expect("one trajectory"))
}

/// Differentiable unroll: residual tensors of the post-update states
/// `1..=K`, chained on one tape with caps and bounds (no line search).
pub struct TrainUnroll {
    /// `(ΔP, ΔQ)` tensors per post-update state.
    pub residuals: Vec<(Tensor, Tensor)>,
    pub final_v: Tensor,
    pub final_theta: Tensor,
}

pub fn unroll_train(
    tape: &mut Tape,
    prep: &GraphPrep,
    consts: &PrepConsts,
    pt: &ParamTensors,
    params: &ModelParams,
    v0: &[f64],
    theta0: &[f64],
    k: usize,
    cfg: &LsConfig,
) -> TrainUnroll {
    let n = prep.n_total;
    let d = params.dims.d_model;
    let v_leaf = tape.leaf(clip_voltage(v0, cfg.v_min, cfg.v_max), Shape::vector(n), false);
    let th_leaf = tape.leaf(wrap_angle(theta0), Shape::vector(n), false);
    let mut v = v_leaf;
    let mut theta = th_leaf;
    let mut latent = tape.constant(vec![0.0; n * d], Shape::matrix(n, d));

    let mut residuals = Vec::with_capacity(k);
    for _ in 0..k {
        let (dp, dq) = residual_t(tape, prep, consts, v, theta);
        let x = phys_features(tape, params, v, theta, dp, dq, latent);
        let ctx = aggregate(tape, prep, consts, pt, params, x);
        let (dth, dv, dm) = propose_update(tape, consts, pt, &params.dims, x, ctx);
        let dth = tape.clamp(dth, -cfg.d_theta_max, cfg.d_theta_max);
        let v_cap = tape.scale(v, cfg.d_v_frac);
        let dv = tape.clamp_sym(dv, v_cap);

        let th_next = tape.add(theta, dth);
        theta = tape.wrap_angle(th_next);
        let v_next = tape.add(v, dv);
        v = tape.clamp(v_next, cfg.v_min, cfg.v_max);
        latent = tape.add(latent, dm);

        let (dp_post, dq_post) = residual_t(tape, prep, consts, v, theta);
        residuals.push((dp_post, dq_post));
    }
    TrainUnroll {
        residuals,
        final_v: v,
        final_theta: theta,
    }
}
