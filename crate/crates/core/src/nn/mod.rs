//! A small feedforward approximator: shared trunk, K bootstrap Q-heads and an
//! optional distributional head, all stored in one flat parameter vector.
//!
//! The architecture graph is fixed, so forward and backward are written out
//! explicitly. Backward implements the two routing rules the agent depends
//! on: trunk gradients from the Q-heads are averaged (scaled by 1/K), and
//! distributional-head gradients can be confined to the head so the trunk
//! representation is learned from the bootstrap branch alone. The target
//! copy of the parameters is only ever touched by `sync_target`.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamConfig, AdamState};

use std::ops::Range;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// What the distributional head outputs per action, if present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum DistKind {
    None,
    Categorical { atoms: usize },
    Quantile { quantiles: usize },
}

impl DistKind {
    pub fn outputs_per_action(&self) -> usize {
        match *self {
            DistKind::None => 0,
            DistKind::Categorical { atoms } => atoms,
            DistKind::Quantile { quantiles } => quantiles,
        }
    }
}

/// Static shape of the ensemble network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub input_dim: usize,
    pub trunk_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub num_heads: usize,
    pub num_actions: usize,
    pub dist: DistKind,
}

impl NetworkShape {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_actions == 0 || self.num_heads == 0 {
            return Err(CoreError::InvalidSpec(
                "input_dim, num_actions and num_heads must be positive".into(),
            ));
        }
        if self.trunk_hidden.is_empty() || self.trunk_hidden.iter().any(|&d| d == 0) {
            return Err(CoreError::InvalidSpec("trunk needs at least one nonzero layer".into()));
        }
        if self.head_hidden.iter().any(|&d| d == 0) {
            return Err(CoreError::InvalidSpec("head hidden sizes must be nonzero".into()));
        }
        if matches!(
            self.dist,
            DistKind::Categorical { atoms: 0 } | DistKind::Quantile { quantiles: 0 }
        ) {
            return Err(CoreError::InvalidSpec("distributional head needs outputs".into()));
        }
        Ok(())
    }

    fn trunk_out(&self) -> usize {
        *self.trunk_hidden.last().unwrap()
    }
}

/// One affine layer's location inside the flat parameter vector.
#[derive(Debug, Clone)]
struct Affine {
    w: Range<usize>,
    b: Range<usize>,
    in_dim: usize,
    out_dim: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    trunk: Vec<Affine>,
    heads: Vec<Vec<Affine>>,
    dist: Option<Vec<Affine>>,
    len: usize,
}

fn push_stack(dims: &[usize], cursor: &mut usize) -> Vec<Affine> {
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for pair in dims.windows(2) {
        let (in_dim, out_dim) = (pair[0], pair[1]);
        let w = *cursor..*cursor + in_dim * out_dim;
        *cursor = w.end;
        let b = *cursor..*cursor + out_dim;
        *cursor = b.end;
        layers.push(Affine { w, b, in_dim, out_dim });
    }
    layers
}

impl Layout {
    fn new(shape: &NetworkShape) -> Self {
        let mut cursor = 0;
        let mut trunk_dims = vec![shape.input_dim];
        trunk_dims.extend_from_slice(&shape.trunk_hidden);
        let trunk = push_stack(&trunk_dims, &mut cursor);

        let mut head_dims = vec![shape.trunk_out()];
        head_dims.extend_from_slice(&shape.head_hidden);
        head_dims.push(shape.num_actions);
        let heads = (0..shape.num_heads)
            .map(|_| push_stack(&head_dims, &mut cursor))
            .collect();

        let dist = match shape.dist.outputs_per_action() {
            0 => None,
            per_action => {
                let mut dims = vec![shape.trunk_out()];
                dims.extend_from_slice(&shape.head_hidden);
                dims.push(shape.num_actions * per_action);
                Some(push_stack(&dims, &mut cursor))
            }
        };
        Layout { trunk, heads, dist, len: cursor }
    }

    fn span(stack: &[Affine]) -> Range<usize> {
        stack[0].w.start..stack[stack.len() - 1].b.end
    }
}

/// Which parameter set a forward pass reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSet {
    Online,
    Target,
}

/// Activations remembered by a cached forward pass; consumed by `backward`.
pub struct ForwardCache {
    /// [layer][sample][unit]; index 0 is the input batch.
    trunk_acts: Vec<Vec<Vec<f64>>>,
    head_acts: Vec<Vec<Vec<Vec<f64>>>>,
    dist_acts: Option<Vec<Vec<Vec<f64>>>>,
    generation: u64,
    batch: usize,
}

/// Outputs of a forward pass.
pub struct ForwardOutput {
    /// q_values[k][sample][action]
    pub q_values: Vec<Vec<Vec<f64>>>,
    /// dist[sample][action][output], present when the shape has a dist head.
    pub dist: Option<Vec<Vec<Vec<f64>>>>,
}

/// Gradient routing switches for `backward`.
#[derive(Debug, Clone, Copy)]
pub struct BackwardFlags {
    /// Keep distributional-loss gradients out of the trunk.
    pub stop_dist_into_trunk: bool,
    /// Average the per-head trunk contributions by 1/K.
    pub scale_heads_by_inv_k: bool,
}

impl Default for BackwardFlags {
    fn default() -> Self {
        Self { stop_dist_into_trunk: true, scale_heads_by_inv_k: true }
    }
}

/// Shared trunk + K Q-heads + optional distributional head with a frozen
/// target copy of every parameter.
pub struct EnsembleNetwork {
    shape: NetworkShape,
    layout: Layout,
    params: Vec<f64>,
    target_params: Vec<f64>,
    sync_count: u64,
    generation: u64,
}

fn forward_stack(
    params: &[f64],
    layers: &[Affine],
    input: &[Vec<f64>],
    relu_last: bool,
) -> Vec<Vec<Vec<f64>>> {
    let mut acts: Vec<Vec<Vec<f64>>> = Vec::with_capacity(layers.len() + 1);
    acts.push(input.to_vec());
    for (i, layer) in layers.iter().enumerate() {
        let w = &params[layer.w.clone()];
        let b = &params[layer.b.clone()];
        let apply_relu = relu_last || i + 1 < layers.len();
        let prev = &acts[i];
        let mut out = Vec::with_capacity(prev.len());
        for row in prev {
            let mut y = vec![0.0; layer.out_dim];
            for (o, yo) in y.iter_mut().enumerate() {
                let wrow = &w[o * layer.in_dim..(o + 1) * layer.in_dim];
                let mut acc = b[o];
                for (wi, xi) in wrow.iter().zip(row.iter()) {
                    acc += wi * xi;
                }
                *yo = if apply_relu { acc.max(0.0) } else { acc };
            }
            out.push(y);
        }
        acts.push(out);
    }
    acts
}

/// Backpropagates `d_out` through a stack, accumulating parameter gradients
/// into `grad` and returning the gradient w.r.t. the stack input (without
/// any rectifier mask belonging to the producer of that input).
fn backward_stack(
    params: &[f64],
    layers: &[Affine],
    acts: &[Vec<Vec<f64>>],
    mut d_out: Vec<Vec<f64>>,
    relu_last: bool,
    grad: &mut [f64],
) -> Vec<Vec<f64>> {
    for (i, layer) in layers.iter().enumerate().rev() {
        let output = &acts[i + 1];
        let rectified = relu_last || i + 1 < layers.len();
        if rectified {
            for (d_row, o_row) in d_out.iter_mut().zip(output.iter()) {
                for (d, &o) in d_row.iter_mut().zip(o_row.iter()) {
                    if o <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
        }
        let w = &params[layer.w.clone()];
        let gw = layer.w.clone();
        let gb = layer.b.clone();
        let mut d_in = vec![vec![0.0; layer.in_dim]; d_out.len()];
        for (s, d_row) in d_out.iter().enumerate() {
            let x = &acts[i][s];
            for (o, &d) in d_row.iter().enumerate() {
                grad[gb.start + o] += d;
                let wrow = &w[o * layer.in_dim..(o + 1) * layer.in_dim];
                let grow = &mut grad[gw.start + o * layer.in_dim..gw.start + (o + 1) * layer.in_dim];
                for ((g, &xi), (&wi, di)) in grow
                    .iter_mut()
                    .zip(x.iter())
                    .zip(wrow.iter().zip(d_in[s].iter_mut()))
                {
                    *g += d * xi;
                    *di += wi * d;
                }
            }
        }
        d_out = d_in;
    }
    d_out
}

impl EnsembleNetwork {
    /// Randomly initialized network. Every component (trunk, each head, the
    /// distributional head) draws from its own stream derived from `rng`,
    /// with weights uniform in +-(init_scale / sqrt(fan_in)) and zero biases.
    pub fn init<R: Rng + ?Sized>(shape: NetworkShape, init_scale: f64, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let layout = Layout::new(&shape);
        let mut params = vec![0.0; layout.len];
        let fill = |layers: &[Affine], stream: &mut StdRng, params: &mut [f64]| {
            for layer in layers {
                let bound = init_scale / (layer.in_dim as f64).sqrt();
                for p in params[layer.w.clone()].iter_mut() {
                    *p = if bound > 0.0 { stream.gen_range(-bound..bound) } else { 0.0 };
                }
            }
        };
        let mut trunk_stream = StdRng::seed_from_u64(rng.gen());
        fill(&layout.trunk, &mut trunk_stream, &mut params);
        for head in &layout.heads {
            let mut head_stream = StdRng::seed_from_u64(rng.gen());
            fill(head, &mut head_stream, &mut params);
        }
        if let Some(dist) = &layout.dist {
            let mut dist_stream = StdRng::seed_from_u64(rng.gen());
            fill(dist, &mut dist_stream, &mut params);
        }
        let target_params = params.clone();
        Ok(Self { shape, layout, params, target_params, sync_count: 0, generation: 0 })
    }

    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn param_count(&self) -> usize {
        self.layout.len
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access to the online parameters; bumps the generation so any
    /// outstanding forward cache is invalidated.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.params
    }

    pub fn target_params(&self) -> &[f64] {
        &self.target_params
    }

    pub fn trunk_span(&self) -> Range<usize> {
        Layout::span(&self.layout.trunk)
    }

    pub fn head_span(&self, k: usize) -> Range<usize> {
        Layout::span(&self.layout.heads[k])
    }

    pub fn dist_span(&self) -> Option<Range<usize>> {
        self.layout.dist.as_ref().map(|d| Layout::span(d))
    }

    pub fn sync_count(&self) -> u64 {
        self.sync_count
    }

    /// theta_minus := theta, bit-exact.
    pub fn sync_target(&mut self) {
        self.target_params.copy_from_slice(&self.params);
        self.sync_count += 1;
    }

    fn param_slice(&self, set: ParamSet) -> &[f64] {
        match set {
            ParamSet::Online => &self.params,
            ParamSet::Target => &self.target_params,
        }
    }

    fn run_forward(&self, set: ParamSet, states: &[Vec<f64>]) -> (ForwardOutput, ForwardCache) {
        assert!(!states.is_empty(), "forward needs a nonempty batch");
        debug_assert!(states.iter().all(|s| s.len() == self.shape.input_dim));
        let params = self.param_slice(set);
        let trunk_acts = forward_stack(params, &self.layout.trunk, states, true);
        let phi = trunk_acts.last().unwrap().clone();
        let mut q_values = Vec::with_capacity(self.shape.num_heads);
        let mut head_acts = Vec::with_capacity(self.shape.num_heads);
        for head in &self.layout.heads {
            let acts = forward_stack(params, head, &phi, false);
            q_values.push(acts.last().unwrap().clone());
            head_acts.push(acts);
        }
        let (dist, dist_acts) = match &self.layout.dist {
            None => (None, None),
            Some(stack) => {
                let acts = forward_stack(params, stack, &phi, false);
                let per_action = self.shape.dist.outputs_per_action();
                let reshaped: Vec<Vec<Vec<f64>>> = acts
                    .last()
                    .unwrap()
                    .iter()
                    .map(|row| {
                        row.chunks(per_action).map(|c| c.to_vec()).collect::<Vec<_>>()
                    })
                    .collect();
                (Some(reshaped), Some(acts))
            }
        };
        let cache = ForwardCache {
            trunk_acts,
            head_acts,
            dist_acts,
            generation: self.generation,
            batch: states.len(),
        };
        (ForwardOutput { q_values, dist }, cache)
    }

    /// Forward under the online parameters, discarding activations.
    pub fn forward(&self, states: &[Vec<f64>]) -> ForwardOutput {
        self.run_forward(ParamSet::Online, states).0
    }

    /// Forward under the frozen target parameters.
    pub fn forward_target(&self, states: &[Vec<f64>]) -> ForwardOutput {
        self.run_forward(ParamSet::Target, states).0
    }

    /// Forward that remembers activations for a matching `backward` call.
    pub fn forward_cached(&self, states: &[Vec<f64>]) -> (ForwardOutput, ForwardCache) {
        self.run_forward(ParamSet::Online, states)
    }

    /// Backpropagates output gradients through the network.
    ///
    /// `d_q[k][sample][action]` is dLoss/dQ_k and `d_dist[sample][output]`
    /// (flattened action-major) is dLoss/d(dist outputs). The cache must come
    /// from a `forward_cached` under the current parameters. Gradients are
    /// returned for the online parameters only; the target copy has none.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_q: &[Vec<Vec<f64>>],
        d_dist: Option<&[Vec<f64>]>,
        flags: BackwardFlags,
    ) -> Result<Vec<f64>> {
        if cache.generation != self.generation {
            return Err(CoreError::Contract(
                "backward called with a cache from a stale forward pass".into(),
            ));
        }
        if d_q.len() != self.shape.num_heads
            || d_q.iter().any(|per_head| per_head.len() != cache.batch)
        {
            return Err(CoreError::Contract("d_q shape does not match the forward batch".into()));
        }
        if d_dist.is_some() != self.layout.dist.is_some() {
            return Err(CoreError::Contract(
                "distributional gradient presence does not match the network shape".into(),
            ));
        }
        let params = &self.params;
        let mut grad = vec![0.0; self.layout.len];
        let trunk_out = self.shape.trunk_out();
        let mut d_phi = vec![vec![0.0; trunk_out]; cache.batch];
        let head_scale = if flags.scale_heads_by_inv_k {
            1.0 / self.shape.num_heads as f64
        } else {
            1.0
        };
        for (k, head) in self.layout.heads.iter().enumerate() {
            let d_head_phi = backward_stack(
                params,
                head,
                &cache.head_acts[k],
                d_q[k].clone(),
                false,
                &mut grad,
            );
            for (acc, row) in d_phi.iter_mut().zip(d_head_phi.iter()) {
                for (a, &d) in acc.iter_mut().zip(row.iter()) {
                    *a += head_scale * d;
                }
            }
        }
        if let (Some(stack), Some(d_dist)) = (&self.layout.dist, d_dist) {
            if d_dist.len() != cache.batch {
                return Err(CoreError::Contract("d_dist batch size mismatch".into()));
            }
            let d_dist_phi = backward_stack(
                params,
                stack,
                cache.dist_acts.as_ref().unwrap(),
                d_dist.to_vec(),
                false,
                &mut grad,
            );
            if !flags.stop_dist_into_trunk {
                for (acc, row) in d_phi.iter_mut().zip(d_dist_phi.iter()) {
                    for (a, &d) in acc.iter_mut().zip(row.iter()) {
                        *a += d;
                    }
                }
            }
        }
        backward_stack(params, &self.layout.trunk, &cache.trunk_acts, d_phi, true, &mut grad);
        Ok(grad)
    }

    /// One Adam update of the online parameters.
    pub fn apply_gradients(&mut self, adam: &mut AdamState, grads: &[f64]) {
        debug_assert_eq!(grads.len(), self.layout.len);
        self.generation += 1;
        adam_step(adam, &mut self.params, grads);
    }
}
