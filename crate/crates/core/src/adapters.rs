//! Low-rank adapter experts attachable to the denoiser's conv layers.
//!
//! Each expert holds, per attached layer, a down-projection (rank x in)
//! and an up-projection (out x rank) acting on the flattened
//! (cin*k*k -> cout) weight view of the conv; applying an expert adds a
//! low-rank conv to the host layer. Up-projections start at zero, so a
//! fresh bank is output-neutral.

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::diffusion::{AdapterDeltas, DenoiserParams, CONV_K};
use crate::error::{FeraError, Result};
use crate::field::Field;
use crate::kernel::conv2d;
use crate::linalg::{matmul, matvec};
use crate::real::Real;
use crate::rng::keyed_rng;
use crate::routing::RoutingWeights;

pub const DOWN_INIT_STD: f64 = 0.02;

/// Flattened shape of one attachable host layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub id: usize,
    pub in_features: usize,
    pub out_features: usize,
}

/// All conv layers of the denoiser, in order, as adapter attachment points.
pub fn attach_all_conv_layers<T: Real>(params: &DenoiserParams<T>) -> Vec<LayerShape> {
    params
        .layers
        .iter()
        .enumerate()
        .map(|(id, l)| LayerShape {
            id,
            in_features: l.in_features(),
            out_features: l.out_features(),
        })
        .collect()
}

/// One expert's factors for a single attached layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer<T: Real = f32> {
    pub down: Vec<T>,
    pub up: Vec<T>,
}

/// One low-rank expert across all attached layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraExpert<T: Real = f32> {
    pub rank: usize,
    pub scale: f64,
    pub layers: Vec<LoraLayer<T>>,
}

/// M experts sharing one attachment topology, rank and scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank<T: Real = f32> {
    pub attachment: Vec<LayerShape>,
    pub experts: Vec<LoraExpert<T>>,
}

/// Build M experts with Gaussian down factors (std 0.02) and zero up
/// factors, deterministically from `seed`.
pub fn init_expert_bank<T: Real>(
    m: usize,
    rank: usize,
    scale: f64,
    attachment: &[LayerShape],
    seed: u64,
) -> Result<ExpertBank<T>> {
    if m < 1 {
        return Err(FeraError::Domain("expert count must be >= 1".into()));
    }
    if attachment.is_empty() {
        return Err(FeraError::Domain("attachment list is empty".into()));
    }
    // a rank above min(in, out) is overparameterized but well-defined (the
    // correction's effective rank saturates); equal-parameter baselines
    // need it, so only rank 0 is rejected
    if rank < 1 {
        return Err(FeraError::Domain(format!("rank {rank} must be >= 1")));
    }
    let std = T::of_f64(DOWN_INIT_STD);
    let experts = (0..m)
        .map(|mi| {
            let layers = attachment
                .iter()
                .map(|l| {
                    let mut rng = keyed_rng(seed, "lora-init", &[mi as u64, l.id as u64]);
                    let down = (0..rank * l.in_features)
                        .map(|_| T::std_normal(&mut rng) * std)
                        .collect();
                    let up = vec![T::zero(); l.out_features * rank];
                    LoraLayer { down, up }
                })
                .collect();
            LoraExpert {
                rank,
                scale,
                layers,
            }
        })
        .collect();
    Ok(ExpertBank {
        attachment: attachment.to_vec(),
        experts,
    })
}

impl<T: Real> ExpertBank<T> {
    pub fn m(&self) -> usize {
        self.experts.len()
    }
    pub fn rank(&self) -> usize {
        self.experts[0].rank
    }
    pub fn scale(&self) -> f64 {
        self.experts[0].scale
    }

    /// Total adapter parameter count: M * sum_layers rank * (in + out).
    pub fn param_count(&self) -> usize {
        self.m()
            * self
                .attachment
                .iter()
                .map(|l| self.rank() * (l.in_features + l.out_features))
                .sum::<usize>()
    }

    fn layer_index(&self, layer_id: usize) -> Result<usize> {
        self.attachment
            .iter()
            .position(|l| l.id == layer_id)
            .ok_or_else(|| FeraError::Lookup(format!("layer {layer_id} not in attachment")))
    }

    /// Per-layer blended weight deltas sum_m alpha_m (scale/rank) U_m D_m,
    /// in attachment order, ready for the denoiser hook.
    pub fn blended_delta_weights(&self, weights: &RoutingWeights) -> Result<AdapterDeltas<T>> {
        if weights.len() != self.m() {
            return Err(FeraError::Shape(format!(
                "routing weights length {} != {} experts",
                weights.len(),
                self.m()
            )));
        }
        let per_layer = (0..self.attachment.len())
            .map(|li| {
                let l = self.attachment[li];
                let mut acc = vec![T::zero(); l.out_features * l.in_features];
                for (mi, ex) in self.experts.iter().enumerate() {
                    let a = T::of_f64(weights.alpha()[mi]);
                    if a == T::zero() {
                        continue;
                    }
                    let dw = expert_delta_weight(ex, li, l);
                    for (o, v) in acc.iter_mut().zip(&dw) {
                        *o = *o + a * *v;
                    }
                }
                acc
            })
            .collect();
        Ok(AdapterDeltas { per_layer })
    }

    pub fn cast<U: Real>(&self) -> ExpertBank<U> {
        ExpertBank {
            attachment: self.attachment.clone(),
            experts: self
                .experts
                .iter()
                .map(|e| LoraExpert {
                    rank: e.rank,
                    scale: e.scale,
                    layers: e
                        .layers
                        .iter()
                        .map(|l| LoraLayer {
                            down: l.down.iter().map(|v| U::of_f64(v.as_f64())).collect(),
                            up: l.up.iter().map(|v| U::of_f64(v.as_f64())).collect(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

/// (scale/rank) * U * D for one expert and one attached layer, flattened
/// [out_features, in_features].
fn expert_delta_weight<T: Real>(ex: &LoraExpert<T>, li: usize, shape: LayerShape) -> Vec<T> {
    let l = &ex.layers[li];
    let mut dw = matmul(
        &l.up,
        &l.down,
        shape.out_features,
        ex.rank,
        shape.in_features,
    );
    let c = T::of_f64(ex.scale / ex.rank as f64);
    dw.iter_mut().for_each(|v| *v = *v * c);
    dw
}

/// Correction of a single expert applied to a feature vector:
/// (scale/rank) * U (D v).
pub fn expert_correction_vec<T: Real>(
    bank: &ExpertBank<T>,
    expert: usize,
    layer_id: usize,
    input: &[T],
) -> Result<Vec<T>> {
    let li = bank.layer_index(layer_id)?;
    let shape = bank.attachment[li];
    if input.len() != shape.in_features {
        return Err(FeraError::Shape(format!(
            "input length {} != in_features {}",
            input.len(),
            shape.in_features
        )));
    }
    let ex = &bank.experts[expert];
    let hidden = matvec(&ex.layers[li].down, input, ex.rank, shape.in_features);
    let mut out = matvec(&ex.layers[li].up, &hidden, shape.out_features, ex.rank);
    let c = T::of_f64(ex.scale / ex.rank as f64);
    out.iter_mut().for_each(|v| *v = *v * c);
    Ok(out)
}

/// Correction of a single expert applied to a spatial field through the
/// low-rank conv view of the attached layer.
pub fn expert_correction_field<T: Real>(
    bank: &ExpertBank<T>,
    expert: usize,
    layer_id: usize,
    input: &Field<T>,
) -> Result<Field<T>> {
    let li = bank.layer_index(layer_id)?;
    let shape = bank.attachment[li];
    let (cin, h, w) = input.shape();
    if cin * CONV_K * CONV_K != shape.in_features {
        return Err(FeraError::Shape(format!(
            "field with {cin} channels does not match in_features {}",
            shape.in_features
        )));
    }
    let dw = expert_delta_weight(&bank.experts[expert], li, shape);
    let y = conv2d(input.data(), cin, h, w, &dw, shape.out_features, CONV_K);
    Field::from_vec(shape.out_features, h, w, y)
}

/// Weighted mixture of expert corrections on a feature vector.
pub fn blended_correction_vec<T: Real>(
    bank: &ExpertBank<T>,
    weights: &RoutingWeights,
    layer_id: usize,
    input: &[T],
) -> Result<Vec<T>> {
    if weights.len() != bank.m() {
        return Err(FeraError::Shape(format!(
            "routing weights length {} != {} experts",
            weights.len(),
            bank.m()
        )));
    }
    let li = bank.layer_index(layer_id)?;
    let shape = bank.attachment[li];
    let mut out = vec![T::zero(); shape.out_features];
    for mi in 0..bank.m() {
        let c = expert_correction_vec(bank, mi, layer_id, input)?;
        let a = T::of_f64(weights.alpha()[mi]);
        for (o, v) in out.iter_mut().zip(&c) {
            *o = *o + a * *v;
        }
    }
    Ok(out)
}

/// Weighted mixture of expert corrections on a spatial field.
pub fn blended_correction_field<T: Real>(
    bank: &ExpertBank<T>,
    weights: &RoutingWeights,
    layer_id: usize,
    input: &Field<T>,
) -> Result<Field<T>> {
    if weights.len() != bank.m() {
        return Err(FeraError::Shape(format!(
            "routing weights length {} != {} experts",
            weights.len(),
            bank.m()
        )));
    }
    let li = bank.layer_index(layer_id)?;
    let shape = bank.attachment[li];
    let (_, h, w) = input.shape();
    let mut out = Field::zeros(shape.out_features, h, w);
    for mi in 0..bank.m() {
        let c = expert_correction_field(bank, mi, layer_id, input)?;
        out = out.add(&c.scale(T::of_f64(weights.alpha()[mi])))?;
    }
    Ok(out)
}

/// Fold the blended deltas into the host weights, producing a merged
/// denoiser that needs no adapter machinery at inference.
pub fn merge_into_denoiser<T: Real>(
    denoiser: &DenoiserParams<T>,
    bank: &ExpertBank<T>,
    weights: &RoutingWeights,
) -> Result<DenoiserParams<T>> {
    let deltas = bank.blended_delta_weights(weights)?;
    let mut merged = denoiser.clone();
    for (li, shape) in bank.attachment.iter().enumerate() {
        let layer = &mut merged.layers[shape.id];
        if layer.weight.len() != deltas.per_layer[li].len() {
            return Err(FeraError::Shape(format!(
                "delta length {} != layer weight length {}",
                deltas.per_layer[li].len(),
                layer.weight.len()
            )));
        }
        for (wv, dv) in layer.weight.iter_mut().zip(&deltas.per_layer[li]) {
            *wv = *wv + *dv;
        }
    }
    Ok(merged)
}

/// Tape handles for every factor in the bank, [expert][layer].
pub struct ExpertBankNodes {
    pub downs: Vec<Vec<NodeId>>,
    pub ups: Vec<Vec<NodeId>>,
}

impl<T: Real> ExpertBank<T> {
    pub fn to_tape(&self, tape: &mut Tape<T>, trainable: bool) -> ExpertBankNodes {
        let mut downs = Vec::with_capacity(self.m());
        let mut ups = Vec::with_capacity(self.m());
        for ex in &self.experts {
            let mut d_row = Vec::new();
            let mut u_row = Vec::new();
            for (li, l) in ex.layers.iter().enumerate() {
                let shape = self.attachment[li];
                let dt = Tensor::new(vec![ex.rank, shape.in_features], l.down.clone());
                let ut = Tensor::new(vec![shape.out_features, ex.rank], l.up.clone());
                if trainable {
                    d_row.push(tape.param(dt));
                    u_row.push(tape.param(ut));
                } else {
                    d_row.push(tape.constant(dt));
                    u_row.push(tape.constant(ut));
                }
            }
            downs.push(d_row);
            ups.push(u_row);
        }
        ExpertBankNodes { downs, ups }
    }

    /// Differentiable per-layer blended deltas
    /// sum_m alpha_m (scale/rank) U_m D_m, in attachment order.
    pub fn blended_delta_nodes(
        &self,
        tape: &mut Tape<T>,
        nodes: &ExpertBankNodes,
        alpha: NodeId,
    ) -> Vec<NodeId> {
        let c = T::of_f64(self.scale() / self.rank() as f64);
        (0..self.attachment.len())
            .map(|li| {
                let shape = self.attachment[li];
                let per_expert: Vec<NodeId> = (0..self.m())
                    .map(|mi| {
                        let prod = tape.matmul(
                            nodes.ups[mi][li],
                            nodes.downs[mi][li],
                            shape.out_features,
                            self.rank(),
                            shape.in_features,
                        );
                        tape.scale(prod, c)
                    })
                    .collect();
                tape.blend(alpha, &per_expert)
            })
            .collect()
    }
}
