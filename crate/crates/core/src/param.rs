//! Grouped Tucker parametrization of a macro-module's convolutions.
//!
//! All `L = D4·D5` 3×3 kernels of one macro-module are stacked into a single
//! 6th-order tensor of shape `(D0, D1, D2, D3, D4, D5)`:
//! output channels, input channels, kernel height, kernel width, block within
//! a residual unit and residual unit. That tensor is never stored directly;
//! it is generated as a task-agnostic [`SharedCore`] multiplied on each mode
//! by one matrix of a per-task [`TaskFactorSet`].

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{hooi, orthonormalize_columns, tucker_reconstruct, DenseTensor};

pub const GROUP_ORDER: usize = 6;

/// Mode sizes and multilinear ranks of one grouped weight tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GroupLayout {
    pub dims: [usize; GROUP_ORDER],
    pub ranks: [usize; GROUP_ORDER],
}

impl GroupLayout {
    pub fn full_rank(dims: [usize; GROUP_ORDER]) -> Result<Self> {
        Self::new(dims, dims)
    }

    pub fn new(dims: [usize; GROUP_ORDER], ranks: [usize; GROUP_ORDER]) -> Result<Self> {
        for mode in 0..GROUP_ORDER {
            if dims[mode] == 0 {
                return Err(Error::InvalidShape(format!("zero-sized mode {mode} in {dims:?}")));
            }
            if ranks[mode] == 0 || ranks[mode] > dims[mode] {
                return Err(Error::RankExceedsDimension { mode, rank: ranks[mode], dim: dims[mode] });
            }
        }
        Ok(Self { dims, ranks })
    }

    /// Layout for a macro-module with `channels` in and out, square kernels.
    pub fn for_module(channels: usize, kernel: (usize, usize), blocks_per_unit: usize, units: usize) -> Result<Self> {
        Self::full_rank([channels, channels, kernel.0, kernel.1, blocks_per_unit, units])
    }

    pub fn with_ranks(&self, ranks: [usize; GROUP_ORDER]) -> Result<Self> {
        Self::new(self.dims, ranks)
    }

    pub fn is_full_rank(&self) -> bool {
        self.dims == self.ranks
    }

    /// Number of convolution layers in the group, `D4·D5`.
    pub fn layers(&self) -> usize {
        self.dims[4] * self.dims[5]
    }

    pub fn blocks_per_unit(&self) -> usize {
        self.dims[4]
    }

    pub fn units(&self) -> usize {
        self.dims[5]
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.dims[0], self.dims[1], self.dims[2], self.dims[3]]
    }

    pub fn factor_shape(&self, mode: usize) -> [usize; 2] {
        [self.dims[mode], self.ranks[mode]]
    }

    pub fn core_len(&self) -> usize {
        self.ranks.iter().product()
    }

    /// `Σ_k Dk·Rk`, the size of one task's factor set.
    pub fn factor_param_count(&self) -> usize {
        self.dims.iter().zip(&self.ranks).map(|(d, r)| d * r).sum()
    }

    /// Position of (unit, block) in the flat layer order.
    pub fn layer_index(&self, unit: usize, block: usize) -> usize {
        unit * self.blocks_per_unit() + block
    }
}

/// The task-agnostic core tensor of one group. Once frozen it cannot be
/// mutated through this API.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedCore {
    layout: GroupLayout,
    core: DenseTensor,
    frozen: bool,
    index: usize,
}

impl SharedCore {
    pub fn new(index: usize, layout: GroupLayout, core: DenseTensor) -> Result<Self> {
        if core.shape() != layout.ranks {
            return Err(Error::DimensionMismatch(format!(
                "core shape {:?} does not match ranks {:?}",
                core.shape(),
                layout.ranks
            )));
        }
        Ok(Self { layout, core, frozen: false, index })
    }

    pub fn layout(&self) -> &GroupLayout {
        &self.layout
    }

    /// Macro-module this core belongs to.
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn core(&self) -> &DenseTensor {
        &self.core
    }

    pub fn core_mut(&mut self) -> Result<&mut DenseTensor> {
        if self.frozen {
            return Err(Error::FrozenCore(self.index));
        }
        Ok(&mut self.core)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub(crate) fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }
}

/// One task's six factor matrices for one group; factor `k` is `Dk × Rk`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskFactorSet {
    pub task_id: String,
    factors: Vec<DenseTensor>,
}

impl TaskFactorSet {
    pub fn new(task_id: impl Into<String>, layout: &GroupLayout, factors: Vec<DenseTensor>) -> Result<Self> {
        if factors.len() != GROUP_ORDER {
            return Err(Error::DimensionMismatch(format!("expected 6 factors, got {}", factors.len())));
        }
        for (k, f) in factors.iter().enumerate() {
            if f.shape() != layout.factor_shape(k) {
                return Err(Error::DimensionMismatch(format!(
                    "factor {k} has shape {:?}, layout needs {:?}",
                    f.shape(),
                    layout.factor_shape(k)
                )));
            }
        }
        Ok(Self { task_id: task_id.into(), factors })
    }

    /// Identity factors; only valid for full-rank layouts.
    pub fn identity(task_id: impl Into<String>, layout: &GroupLayout) -> Result<Self> {
        let factors = (0..GROUP_ORDER)
            .map(|k| {
                let [d, r] = layout.factor_shape(k);
                if d != r {
                    return Err(Error::DimensionMismatch(format!("identity factor {k} must be square")));
                }
                Ok(DenseTensor::identity(d))
            })
            .collect::<Result<_>>()?;
        Self::new(task_id, layout, factors)
    }

    /// Factors with orthonormal columns drawn from seeded Gaussians.
    pub fn random_orthonormal(task_id: impl Into<String>, layout: &GroupLayout, rng: &mut Rng) -> Result<Self> {
        let factors = (0..GROUP_ORDER)
            .map(|k| orthonormalize_columns(&DenseTensor::random_normal(&layout.factor_shape(k), 0.0, 1.0, rng)))
            .collect::<Result<_>>()?;
        Self::new(task_id, layout, factors)
    }

    pub fn factors(&self) -> &[DenseTensor] {
        &self.factors
    }

    pub fn factors_mut(&mut self) -> &mut [DenseTensor] {
        &mut self.factors
    }

    pub fn param_count(&self) -> usize {
        self.factors.iter().map(DenseTensor::len).sum()
    }
}

/// The explicit kernels of a group, ordered by (residual unit, block).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub layout: GroupLayout,
    pub weights: Vec<DenseTensor>,
}

/// Stacks the group's kernels into the 6th-order tensor
/// `θ[o, i, h, w, block, unit]`.
pub fn collect(group: &ParamGroup) -> Result<DenseTensor> {
    let layout = &group.layout;
    let l = layout.layers();
    if group.weights.len() != l {
        return Err(Error::DimensionMismatch(format!("group has {} kernels, layout needs {l}", group.weights.len())));
    }
    let kshape = layout.kernel_shape();
    let klen: usize = kshape.iter().product();
    let (blocks, units) = (layout.blocks_per_unit(), layout.units());
    let mut data = vec![0.0; klen * l];
    for unit in 0..units {
        for block in 0..blocks {
            let w = &group.weights[layout.layer_index(unit, block)];
            if w.shape() != kshape {
                return Err(Error::DimensionMismatch(format!(
                    "kernel (unit {unit}, block {block}) has shape {:?}, expected {kshape:?}",
                    w.shape()
                )));
            }
            let slot = block * units + unit;
            for (e, &v) in w.data().iter().enumerate() {
                data[e * l + slot] = v;
            }
        }
    }
    DenseTensor::new(layout.dims.to_vec(), data)
}

/// Inverse of [`collect`].
pub fn scatter(theta: &DenseTensor, layout: &GroupLayout) -> Result<ParamGroup> {
    if theta.shape() != layout.dims {
        return Err(Error::DimensionMismatch(format!(
            "tensor shape {:?} does not match layout dims {:?}",
            theta.shape(),
            layout.dims
        )));
    }
    let l = layout.layers();
    let kshape = layout.kernel_shape();
    let klen: usize = kshape.iter().product();
    let (blocks, units) = (layout.blocks_per_unit(), layout.units());
    let mut weights = Vec::with_capacity(l);
    for unit in 0..units {
        for block in 0..blocks {
            let slot = block * units + unit;
            let data = (0..klen).map(|e| theta.data()[e * l + slot]).collect();
            weights.push(DenseTensor::new(kshape.to_vec(), data)?);
        }
    }
    Ok(ParamGroup { layout: *layout, weights })
}

/// `scatter(K ×_0 F0 ⋯ ×_5 F5)` for one task.
pub fn materialize(core: &SharedCore, factors: &TaskFactorSet) -> Result<ParamGroup> {
    let theta = tucker_reconstruct(core.core(), factors.factors())?;
    scatter(&theta, core.layout())
}

/// Core and source factors from the (possibly truncated) HOSVD of explicit
/// weights. `hooi_iterations > 0` refines the HOSVD factors.
pub fn init_source(
    pretrained: &ParamGroup,
    layout: &GroupLayout,
    index: usize,
    task_id: &str,
    hooi_iterations: usize,
) -> Result<(SharedCore, TaskFactorSet, f64)> {
    if pretrained.layout.dims != layout.dims {
        return Err(Error::DimensionMismatch(format!(
            "pretrained dims {:?} differ from layout dims {:?}",
            pretrained.layout.dims, layout.dims
        )));
    }
    let theta = collect(pretrained)?;
    let dec = hooi(&theta, &layout.ranks, hooi_iterations)?;
    let core = SharedCore::new(index, *layout, dec.core)?;
    let factors = TaskFactorSet::new(task_id, layout, dec.factors)?;
    Ok((core, factors, dec.residual_norm))
}

/// How a new task's factors are initialized from the source task's.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum FactorInit {
    /// Copy of the source factors.
    #[default]
    WarmStart,
    /// Fresh orthonormal factors from a seeded Gaussian.
    RandomOrthonormal,
}

/// Warm start: an independent copy of `source` under a new task id.
pub fn init_task_factors(source: &TaskFactorSet, task_id: &str) -> TaskFactorSet {
    TaskFactorSet { task_id: task_id.to_string(), factors: source.factors.clone() }
}
