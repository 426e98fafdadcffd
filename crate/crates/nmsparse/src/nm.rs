//! N:M and unstructured magnitude-based masks, mask application on the
//! autodiff graph, and the SR-STE regularized weight update.
//!
//! Masks are materialized dense multiplier tensors; the packed on-disk
//! format lives in `storage`. Grouping runs along one axis of a rank-2
//! weight: groups of M consecutive entries along that axis (the matmul
//! reduction dimension for the convention used by the model).

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

/// Keep N of every M consecutive elements. M must be a power of two so the
/// structure-decay sequence M/2^d stays integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NmPattern {
    keep_n: u32,
    group_m: u32,
}

impl NmPattern {
    pub fn new(keep_n: u32, group_m: u32) -> Result<Self> {
        if keep_n == 0 || keep_n > group_m {
            return Err(Error::InvalidArgument(format!(
                "invalid N:M pattern {keep_n}:{group_m}: need 1 <= N <= M"
            )));
        }
        if !group_m.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "invalid N:M pattern {keep_n}:{group_m}: M must be a power of two"
            )));
        }
        Ok(Self { keep_n, group_m })
    }

    pub fn parse(s: &str) -> Result<Self> {
        let (n, m) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("pattern '{s}' is not of form N:M")))?;
        let n: u32 = n
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad N in pattern '{s}'")))?;
        let m: u32 = m
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad M in pattern '{s}'")))?;
        Self::new(n, m)
    }

    pub fn n(&self) -> u32 {
        self.keep_n
    }

    pub fn m(&self) -> u32 {
        self.group_m
    }

    pub fn density(&self) -> f64 {
        self.keep_n as f64 / self.group_m as f64
    }

    /// Index width for one kept element's in-group offset.
    pub fn index_bits(&self) -> u32 {
        (self.group_m as f64).log2().ceil() as u32
    }
}

impl std::fmt::Display for NmPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.keep_n, self.group_m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Binary,
    Decayed,
}

/// Per-weight multiplier tensor. Binary mode: entries in {0, 1}. Decayed
/// mode: entries in {decay_value, 1}.
#[derive(Debug, Clone)]
pub struct SparsityMask {
    pub values: Tensor,
    pub mode: MaskMode,
    pub decay_value: f64,
    /// Pattern and grouping axis, when structured. None for unstructured.
    pub pattern: Option<NmPattern>,
    pub axis: usize,
}

impl SparsityMask {
    pub fn all_ones(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            values: Tensor::new(shape.to_vec(), vec![1.0; n]).unwrap(),
            mode: MaskMode::Binary,
            decay_value: 0.0,
            pattern: None,
            axis: 0,
        }
    }

    pub fn density(&self) -> f64 {
        let kept = self.values.data.iter().filter(|&&v| v == 1.0).count();
        kept as f64 / self.values.len() as f64
    }

    /// Collapse a decayed mask to binary in place, keeping pruned locations.
    pub fn bake_binary(&mut self) {
        for v in &mut self.values.data {
            if *v != 1.0 {
                *v = 0.0;
            }
        }
        self.mode = MaskMode::Binary;
        self.decay_value = 0.0;
    }
}

/// SR-STE sparse-refined regularization strength.
#[derive(Debug, Clone, Copy)]
pub struct SrSteConfig {
    pub lambda_w: f64,
}

impl SrSteConfig {
    pub fn new(lambda_w: f64) -> Result<Self> {
        if lambda_w < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "lambda_w must be non-negative, got {lambda_w}"
            )));
        }
        Ok(Self { lambda_w })
    }
}

/// Enumerate the flat indices of every M-group of `shape` along `axis`
/// (rank-2 only). Group order: axis 1 → row-major blocks within each row;
/// axis 0 → column-major blocks within each column.
fn for_each_group(
    shape: &[usize],
    axis: usize,
    m: usize,
    mut f: impl FnMut(&[usize]),
) -> Result<()> {
    let (rows, cols) = match shape {
        [r, c] => (*r, *c),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "grouping requires a rank-2 tensor, got shape {shape:?}"
            )))
        }
    };
    let axis_len = if axis == 0 { rows } else { cols };
    if axis > 1 {
        return Err(Error::InvalidArgument(format!(
            "grouping axis {axis} out of range for rank-2 tensor"
        )));
    }
    if axis_len % m != 0 {
        return Err(Error::InvalidArgument(format!(
            "axis {axis} length {axis_len} of shape {shape:?} is not divisible by group size {m}"
        )));
    }
    let mut idx = Vec::with_capacity(m);
    if axis == 1 {
        for r in 0..rows {
            for b in 0..cols / m {
                idx.clear();
                idx.extend((0..m).map(|i| r * cols + b * m + i));
                f(&idx);
            }
        }
    } else {
        for c in 0..cols {
            for b in 0..rows / m {
                idx.clear();
                idx.extend((0..m).map(|i| (b * m + i) * cols + c));
                f(&idx);
            }
        }
    }
    Ok(())
}

/// Flat indices of every group, in grouping order. Shared with the packed
/// storage format so both sides agree on group enumeration.
pub(crate) fn group_flat_indices(shape: &[usize], axis: usize, m: usize) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    for_each_group(shape, axis, m, |flat| out.push(flat.to_vec()))?;
    Ok(out)
}

/// In-group offsets (ascending) of the N largest-|w| entries per group.
/// Ties break toward the lowest index.
pub fn group_topn_indices(
    weights: &Tensor,
    pattern: NmPattern,
    axis: usize,
) -> Result<Vec<Vec<usize>>> {
    let m = pattern.m() as usize;
    let n = pattern.n() as usize;
    let mut groups = Vec::new();
    for_each_group(&weights.shape, axis, m, |flat| {
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            weights.data[flat[b]]
                .abs()
                .partial_cmp(&weights.data[flat[a]].abs())
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut kept: Vec<usize> = order[..n].to_vec();
        kept.sort_unstable();
        groups.push(kept);
    })?;
    Ok(groups)
}

/// Structured mask: kept positions 1, pruned positions 0 (binary) or
/// `decay_value` (decayed).
pub fn build_mask(
    weights: &Tensor,
    pattern: NmPattern,
    axis: usize,
    mode: MaskMode,
    decay_value: f64,
) -> Result<SparsityMask> {
    if mode == MaskMode::Decayed && !(0.0..1.0).contains(&decay_value) {
        return Err(Error::InvalidArgument(format!(
            "decay_value must be in [0, 1), got {decay_value}"
        )));
    }
    let pruned = match mode {
        MaskMode::Binary => 0.0,
        MaskMode::Decayed => decay_value,
    };
    let m = pattern.m() as usize;
    let n = pattern.n() as usize;
    let mut values = vec![pruned; weights.len()];
    for_each_group(&weights.shape, axis, m, |flat| {
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            weights.data[flat[b]]
                .abs()
                .partial_cmp(&weights.data[flat[a]].abs())
                .unwrap()
                .then(a.cmp(&b))
        });
        for &off in &order[..n] {
            values[flat[off]] = 1.0;
        }
    })?;
    Ok(SparsityMask {
        values: Tensor::new(weights.shape.clone(), values)?,
        mode,
        decay_value: if mode == MaskMode::Binary { 0.0 } else { decay_value },
        pattern: Some(pattern),
        axis,
    })
}

/// Binary mask keeping the ⌈density·count⌉ largest-|w| entries of the whole
/// tensor; ties break toward the lowest flat index.
pub fn build_unstructured_mask(weights: &Tensor, density: f64) -> Result<SparsityMask> {
    if weights.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot mask an empty tensor".into(),
        ));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "density must be in (0, 1], got {density}"
        )));
    }
    let keep = ((density * weights.len() as f64).ceil() as usize).min(weights.len());
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        weights.data[b]
            .abs()
            .partial_cmp(&weights.data[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut values = vec![0.0; weights.len()];
    for &i in &order[..keep] {
        values[i] = 1.0;
    }
    Ok(SparsityMask {
        values: Tensor::new(weights.shape.clone(), values)?,
        mode: MaskMode::Binary,
        decay_value: 0.0,
        pattern: None,
        axis: 0,
    })
}

/// weight ⊙ mask on the graph. Backward through the product gives
/// ∂loss/∂w = upstream ⊙ mask at the weight leaf, while the returned node's
/// own gradient is the straight-through (dense) gradient.
pub fn masked_forward(tape: &mut Tape, weight: NodeId, mask: &SparsityMask) -> Result<NodeId> {
    if tape.value(weight).shape != mask.values.shape {
        return Err(Error::ShapeMismatch {
            op: "masked_forward",
            lhs: tape.value(weight).shape.clone(),
            rhs: mask.values.shape.clone(),
        });
    }
    let m = tape.constant(mask.values.clone());
    tape.mul(weight, m)
}

/// One SGD-style SR-STE update:
/// w ← w − lr·g − lr·λ·(1 − mask) ⊙ w. Kept slots see a plain gradient step.
pub fn sr_ste_step(
    weight: &Tensor,
    dense_grad: &Tensor,
    binary_mask: &SparsityMask,
    lr: f64,
    config: SrSteConfig,
) -> Result<Tensor> {
    if lr < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be non-negative, got {lr}"
        )));
    }
    if weight.shape != dense_grad.shape || weight.shape != binary_mask.values.shape {
        return Err(Error::ShapeMismatch {
            op: "sr_ste_step",
            lhs: weight.shape.clone(),
            rhs: dense_grad.shape.clone(),
        });
    }
    let mut out = weight.clone();
    for i in 0..out.len() {
        let m = binary_mask.values.data[i];
        out.data[i] -= lr * dense_grad.data[i] + lr * config.lambda_w * (1.0 - m) * weight.data[i];
    }
    Ok(out)
}
