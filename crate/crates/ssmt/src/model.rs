//! The full forecaster: similarity → adjacency → GCN → memory addressing →
//! graph-conditioned GRU over the input window → multi-step readout.
//!
//! Gate weights are generated per node from the recalled embedding P:
//! each gate has a pool Θ_g (d×((1+H)·H)) and bias pool β_g (d×H), and node
//! n's gate parameters are reshape(P⁽ⁿ⁾·Θ_g) and P⁽ⁿ⁾·β_g.

use crate::error::{Result, SsmtError};
use crate::graph::{
    self, gumbel_adjacency, memory_address, node_similarity, propagate, SampleMode,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

/// Static sizes of one model instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    pub n_nodes: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub hidden: usize,
    pub mem_items: usize,
    pub embed_dim: usize,
}

/// Whether a tensor crosses the city boundary at fine-tuning time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferClass {
    Shared,
    CityPrivate,
}

/// Fixed tensor name order; determinism everywhere depends on it.
pub const PARAM_NAMES: [(&str, TransferClass); 13] = [
    ("node_embedding", TransferClass::CityPrivate),
    ("memory", TransferClass::Shared),
    ("pe_scale", TransferClass::Shared),
    ("pe_basis", TransferClass::CityPrivate),
    ("gcn_weight", TransferClass::Shared),
    ("theta_z", TransferClass::Shared),
    ("theta_r", TransferClass::Shared),
    ("theta_c", TransferClass::Shared),
    ("beta_z", TransferClass::Shared),
    ("beta_r", TransferClass::Shared),
    ("beta_c", TransferClass::Shared),
    ("theta_out", TransferClass::Shared),
    ("beta_out", TransferClass::Shared),
];

pub fn transfer_class(name: &str) -> Option<TransferClass> {
    PARAM_NAMES.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

/// All learnable tensors of one model instance.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub dims: Dims,
    pub node_embedding: Tensor,
    pub memory: Tensor,
    pub pe_scale: Tensor,
    pub pe_basis: Tensor,
    pub gcn_weight: Tensor,
    pub theta_z: Tensor,
    pub theta_r: Tensor,
    pub theta_c: Tensor,
    pub beta_z: Tensor,
    pub beta_r: Tensor,
    pub beta_c: Tensor,
    pub theta_out: Tensor,
    pub beta_out: Tensor,
}

impl ModelParams {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        match name {
            "node_embedding" => Some(&self.node_embedding),
            "memory" => Some(&self.memory),
            "pe_scale" => Some(&self.pe_scale),
            "pe_basis" => Some(&self.pe_basis),
            "gcn_weight" => Some(&self.gcn_weight),
            "theta_z" => Some(&self.theta_z),
            "theta_r" => Some(&self.theta_r),
            "theta_c" => Some(&self.theta_c),
            "beta_z" => Some(&self.beta_z),
            "beta_r" => Some(&self.beta_r),
            "beta_c" => Some(&self.beta_c),
            "theta_out" => Some(&self.theta_out),
            "beta_out" => Some(&self.beta_out),
            _ => None,
        }
    }

    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "node_embedding" => Some(&mut self.node_embedding),
            "memory" => Some(&mut self.memory),
            "pe_scale" => Some(&mut self.pe_scale),
            "pe_basis" => Some(&mut self.pe_basis),
            "gcn_weight" => Some(&mut self.gcn_weight),
            "theta_z" => Some(&mut self.theta_z),
            "theta_r" => Some(&mut self.theta_r),
            "theta_c" => Some(&mut self.theta_c),
            "beta_z" => Some(&mut self.beta_z),
            "beta_r" => Some(&mut self.beta_r),
            "beta_c" => Some(&mut self.beta_c),
            "theta_out" => Some(&mut self.theta_out),
            "beta_out" => Some(&mut self.beta_out),
            _ => None,
        }
    }

    /// (name, tensor) pairs in the fixed order.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        PARAM_NAMES
            .iter()
            .map(|(n, _)| (n.to_string(), self.tensor(n).unwrap().clone()))
            .collect()
    }

    /// Overwrite tensors from (name, tensor) pairs; shapes must match.
    pub fn assign(&mut self, pairs: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in pairs {
            let dst = self.tensor_mut(name).ok_or_else(|| {
                SsmtError::Config(format!("unknown parameter `{name}`"))
            })?;
            dst.check_same_shape(t, "assign")?;
            *dst = t.clone();
        }
        Ok(())
    }

    pub fn shared_names() -> Vec<&'static str> {
        PARAM_NAMES
            .iter()
            .filter(|(_, c)| *c == TransferClass::Shared)
            .map(|(n, _)| *n)
            .collect()
    }

    pub fn private_names() -> Vec<&'static str> {
        PARAM_NAMES
            .iter()
            .filter(|(_, c)| *c == TransferClass::CityPrivate)
            .map(|(n, _)| *n)
            .collect()
    }
}

/// Random initialization: pools and embeddings N(0, fan_in^{-1/2}), memory
/// rows N(0, d^{-1/2}), pe_scale all ones, pe_basis N(0, 0.01).
pub fn init_params<R: Rng>(dims: Dims, rng: &mut R) -> ModelParams {
    let Dims { n_nodes, t_in, t_out, hidden, mem_items, embed_dim } = dims;
    let d = embed_dim;
    let gate_cols = (1 + hidden) * hidden;
    let inv = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    ModelParams {
        dims,
        node_embedding: Tensor::randn(n_nodes, d, inv(d), rng),
        memory: Tensor::randn(mem_items, d, inv(d), rng),
        pe_scale: Tensor::full(1, t_in, 1.0),
        pe_basis: Tensor::randn(n_nodes, t_in, 0.01, rng),
        gcn_weight: Tensor::randn(t_in, d, inv(t_in), rng),
        theta_z: Tensor::randn(d, gate_cols, inv(d), rng),
        theta_r: Tensor::randn(d, gate_cols, inv(d), rng),
        theta_c: Tensor::randn(d, gate_cols, inv(d), rng),
        beta_z: Tensor::randn(d, hidden, inv(d), rng),
        beta_r: Tensor::randn(d, hidden, inv(d), rng),
        beta_c: Tensor::randn(d, hidden, inv(d), rng),
        theta_out: Tensor::randn(d, hidden * t_out, inv(d), rng),
        beta_out: Tensor::randn(d, t_out, inv(d), rng),
    }
}

/// Fresh params for another city: shared tensors copied from `source`,
/// city-private tensors (node embedding, pe_basis) initialized anew for
/// `n_nodes`.
pub fn params_for_city<R: Rng>(source: &ModelParams, n_nodes: usize, rng: &mut R) -> ModelParams {
    let dims = Dims { n_nodes, ..source.dims };
    let mut fresh = init_params(dims, rng);
    for name in ModelParams::shared_names() {
        let t = source.tensor(name).unwrap().clone();
        *fresh.tensor_mut(name).unwrap() = t;
    }
    fresh
}

/// Tape handles for one staged parameter set.
pub struct ParamVars {
    pairs: Vec<(&'static str, Var)>,
}

impl ParamVars {
    pub fn var(&self, name: &str) -> Var {
        self.pairs
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| *v)
            .expect("unknown parameter name")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, Var)> + '_ {
        self.pairs.iter().copied()
    }
}

/// Put every parameter tensor on the tape as a leaf.
pub fn stage_params(tape: &mut Tape, params: &ModelParams, requires_grad: bool) -> ParamVars {
    let pairs = PARAM_NAMES
        .iter()
        .map(|(n, _)| (*n, tape.leaf(params.tensor(n).unwrap().clone(), requires_grad)))
        .collect();
    ParamVars { pairs }
}

/// Forward-pass switches.
#[derive(Debug, Clone, Copy)]
pub struct ForwardFlags {
    /// Memory bank on; off replaces ξ by squash(E·Eᵀ) and P by E.
    pub use_memory: bool,
    pub mode: SampleMode,
    pub tau: f64,
}

impl Default for ForwardFlags {
    fn default() -> Self {
        ForwardFlags { use_memory: true, mode: SampleMode::Soft, tau: 0.5 }
    }
}

/// Tape handles for the intermediate stages of one forward pass.
pub struct TraceVars {
    pub xi: Var,
    pub adjacency: Var,
    pub gcn_out: Var,
    pub weights: Option<Var>,
    pub recalled: Var,
    pub top2: Option<Vec<(usize, usize)>>,
    pub hidden: Vec<Var>,
    pub pred: Var,
}

/// Per-node generated gate parameters for one forward pass.
struct GateVars {
    w_z: Var,
    b_z: Var,
    w_r: Var,
    b_r: Var,
    w_c: Var,
    b_c: Var,
}

fn generate_gates(tape: &mut Tape, pv: &ParamVars, recalled: Var) -> Result<GateVars> {
    let theta_z = pv.var("theta_z");
    let theta_r = pv.var("theta_r");
    let theta_c = pv.var("theta_c");
    let beta_z = pv.var("beta_z");
    let beta_r = pv.var("beta_r");
    let beta_c = pv.var("beta_c");
    Ok(GateVars {
        w_z: tape.matmul(recalled, theta_z)?,
        b_z: tape.matmul(recalled, beta_z)?,
        w_r: tape.matmul(recalled, theta_r)?,
        b_r: tape.matmul(recalled, beta_r)?,
        w_c: tape.matmul(recalled, theta_c)?,
        b_c: tape.matmul(recalled, beta_c)?,
    })
}

/// One recurrent step. `w_*`/`b_*` are the per-node generated gate
/// parameters (N×((1+H)·H) and N×H); `adjacency` is this forward pass's
/// sampled graph.
#[allow(clippy::too_many_arguments)]
pub fn strgc_cell(
    tape: &mut Tape,
    x_t: Var,
    h_prev: Var,
    adjacency: Var,
    w_z: Var,
    b_z: Var,
    w_r: Var,
    b_r: Var,
    w_c: Var,
    b_c: Var,
    hidden: usize,
) -> Result<Var> {
    let xu = tape.concat_cols(x_t, h_prev)?;
    let u = propagate(tape, adjacency, xu)?;

    let z_lin = tape.rowwise_bilinear(u, w_z, hidden)?;
    let z_aff = tape.add(z_lin, b_z)?;
    let z = tape.sigmoid(z_aff);

    let r_lin = tape.rowwise_bilinear(u, w_r, hidden)?;
    let r_aff = tape.add(r_lin, b_r)?;
    let r = tape.sigmoid(r_aff);

    let gated = tape.mul(r, h_prev)?;
    let xg = tape.concat_cols(x_t, gated)?;
    let u_c = propagate(tape, adjacency, xg)?;
    let c_lin = tape.rowwise_bilinear(u_c, w_c, hidden)?;
    let c_aff = tape.add(c_lin, b_c)?;
    let c = tape.tanh(c_aff);

    let keep = tape.mul(z, h_prev)?;
    let z_neg = tape.scale(z, -1.0);
    let one_minus_z = tape.add_scalar(z_neg, 1.0);
    let new = tape.mul(one_minus_z, c)?;
    tape.add(keep, new)
}

/// Full forward pass over an encoded N×T input. `noise` is the pre-drawn
/// Gumbel difference for this pass (one graph sample, fixed across the T
/// recurrent steps).
pub fn forward(
    tape: &mut Tape,
    pv: &ParamVars,
    x: Var,
    dims: &Dims,
    flags: &ForwardFlags,
    noise: &Tensor,
) -> Result<TraceVars> {
    let (n, t_in) = tape.value(x).shape();
    if n != dims.n_nodes || t_in != dims.t_in {
        return Err(SsmtError::ShapeMismatch {
            op: "forward",
            lhs: (n, t_in),
            rhs: (dims.n_nodes, dims.t_in),
        });
    }
    let embedding = pv.var("node_embedding");
    let memory = pv.var("memory");

    let xi = if flags.use_memory {
        node_similarity(tape, embedding, memory)?
    } else {
        graph::cosine_gram_squash(tape, embedding)?
    };
    let noise_var = tape.constant(noise.clone());
    let adjacency = gumbel_adjacency(tape, xi, flags.tau, noise_var, flags.mode)?;

    let gcn_weight = pv.var("gcn_weight");
    let gcn_out = graph::gcn_forward(tape, adjacency, x, gcn_weight)?;

    let (weights, recalled, top2) = if flags.use_memory {
        let (w, p, t2) = memory_address(tape, gcn_out, memory)?;
        (Some(w), p, Some(t2))
    } else {
        (None, embedding, None)
    };

    let gates = generate_gates(tape, pv, recalled)?;

    let mut hidden = Vec::with_capacity(dims.t_in + 1);
    let mut h = tape.constant(Tensor::zeros(n, dims.hidden));
    hidden.push(h);
    for t in 0..dims.t_in {
        let x_t = tape.slice_col(x, t);
        h = strgc_cell(
            tape, x_t, h, adjacency, gates.w_z, gates.b_z, gates.w_r, gates.b_r, gates.w_c,
            gates.b_c, dims.hidden,
        )?;
        hidden.push(h);
    }

    let theta_out = pv.var("theta_out");
    let beta_out = pv.var("beta_out");
    let readout_w = tape.matmul(recalled, theta_out)?;
    let lin = tape.rowwise_bilinear(h, readout_w, dims.t_out)?;
    let bias = tape.matmul(recalled, beta_out)?;
    let pred = tape.add(lin, bias)?;

    Ok(TraceVars {
        xi,
        adjacency,
        gcn_out,
        weights,
        recalled,
        top2,
        hidden,
        pred,
    })
}
