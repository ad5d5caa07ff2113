//! Residual backbone whose 3×3 convolutions are generated from the grouped
//! Tucker parametrization.
//!
//! The backbone is a stem (3×3 conv, batch norm, ReLU) followed by
//! `macro_modules` groups of `units_per_module` residual units. Every unit
//! holds `blocks_per_unit` 3×3 convolutions, each followed by batch norm; the
//! first conv of each macro-module has stride 2. Where the channel count grows
//! between macro-modules a 1×1 projection runs before the next module, so that
//! every conv inside a module maps `C_b` channels to `C_b` channels and the
//! module's kernels stack into one 6th-order tensor. A strided identity is the
//! shortcut of the downsampling unit. Global average pooling and a per-task
//! linear head finish the network.

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::param::{
    init_source, init_task_factors, FactorInit, GroupLayout, ParamGroup, SharedCore, TaskFactorSet, GROUP_ORDER,
};
use crate::rng::Rng;
use crate::tensor::DenseTensor;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

pub const INPUT_CHANNELS: usize = 3;
pub const BN_MOMENTUM: f64 = 0.1;
/// Standard deviation of the random weights that are decomposed at build time.
pub const INIT_STD: f64 = 0.002;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub macro_modules: usize,
    pub units_per_module: usize,
    pub blocks_per_unit: usize,
    pub channels: Vec<usize>,
    pub kernel: (usize, usize),
    /// Classes of the source task; target tasks choose their own.
    pub num_classes: usize,
    pub input_resolution: usize,
    /// Multilinear ranks per macro-module; full rank when absent.
    #[serde(default)]
    pub ranks: Option<Vec<[usize; GROUP_ORDER]>>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            macro_modules: 3,
            units_per_module: 4,
            blocks_per_unit: 2,
            channels: vec![64, 128, 256],
            kernel: (3, 3),
            num_classes: 10,
            input_resolution: 72,
            ranks: None,
        }
    }
}

impl ArchConfig {
    /// The `[8, 16, 32]` configuration used for experiments on a laptop.
    pub fn desk() -> Self {
        Self { channels: vec![8, 16, 32], input_resolution: 32, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.macro_modules == 0 || self.units_per_module == 0 || self.blocks_per_unit == 0 {
            return bad("module, unit and block counts must be positive".into());
        }
        if self.channels.len() != self.macro_modules {
            return bad(format!("{} channel entries for {} macro-modules", self.channels.len(), self.macro_modules));
        }
        if self.channels[0] == 0 || self.channels.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("channels must be positive and strictly increasing, got {:?}", self.channels));
        }
        if self.kernel.0.is_multiple_of(2) || self.kernel.1.is_multiple_of(2) {
            return bad(format!("kernel {:?} must have odd sides", self.kernel));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.input_resolution < 1 << self.macro_modules {
            return bad(format!(
                "resolution {} is too small for {} stride-2 modules",
                self.input_resolution, self.macro_modules
            ));
        }
        if let Some(ranks) = &self.ranks {
            if ranks.len() != self.macro_modules {
                return bad(format!("{} rank tuples for {} macro-modules", ranks.len(), self.macro_modules));
            }
        }
        for b in 0..self.macro_modules {
            self.layout(b)?;
        }
        Ok(())
    }

    pub fn layout(&self, module: usize) -> Result<GroupLayout> {
        let full =
            GroupLayout::for_module(self.channels[module], self.kernel, self.blocks_per_unit, self.units_per_module)?;
        match &self.ranks {
            Some(r) => full.with_ranks(r[module]),
            None => Ok(full),
        }
    }

    pub fn layouts(&self) -> Result<Vec<GroupLayout>> {
        (0..self.macro_modules).map(|b| self.layout(b)).collect()
    }

    fn pad(&self) -> (usize, usize) {
        (self.kernel.0 / 2, self.kernel.1 / 2)
    }

    /// Every parameter of a task's network (shared cores included) with its shape.
    pub fn parameter_shapes(&self, num_classes: usize) -> Result<Vec<(ParamId, Vec<usize>)>> {
        self.validate()?;
        let mut out = Vec::new();
        let c0 = self.channels[0];
        out.push((ParamId::Stem, vec![c0, INPUT_CHANNELS, self.kernel.0, self.kernel.1]));
        out.push((ParamId::BnGamma(BnSite::Stem), vec![c0]));
        out.push((ParamId::BnBeta(BnSite::Stem), vec![c0]));
        for b in 0..self.macro_modules {
            let layout = self.layout(b)?;
            let c = self.channels[b];
            if b > 0 {
                out.push((ParamId::Projection(b), vec![c, self.channels[b - 1], 1, 1]));
            }
            out.push((ParamId::Core(b), layout.ranks.to_vec()));
            for mode in 0..GROUP_ORDER {
                out.push((ParamId::Factor { module: b, mode }, layout.factor_shape(mode).to_vec()));
            }
            for layer in 0..layout.layers() {
                let site = BnSite::Layer { module: b, layer };
                out.push((ParamId::BnGamma(site), vec![c]));
                out.push((ParamId::BnBeta(site), vec![c]));
            }
        }
        let last = *self.channels.last().expect("validated");
        out.push((ParamId::HeadWeight, vec![num_classes, last]));
        out.push((ParamId::HeadBias, vec![num_classes]));
        Ok(out)
    }

    /// `(selected, total)` scalar parameter counts of one task's network,
    /// from shapes alone.
    pub fn count_params(&self, num_classes: usize, mode: TrainMode) -> Result<(usize, usize)> {
        let shapes = self.parameter_shapes(num_classes)?;
        let len = |s: &Vec<usize>| s.iter().product::<usize>();
        let selected = shapes.iter().filter(|(id, _)| mode.selects(*id)).map(|(_, s)| len(s)).sum();
        Ok((selected, shapes.iter().map(|(_, s)| len(s)).sum()))
    }
}

/// Where a batch norm sits: after the stem, or after conv `layer`
/// (`unit · blocks_per_unit + block`) of a macro-module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BnSite {
    Stem,
    Layer { module: usize, layer: usize },
}

/// Names one learnable tensor of a task's network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    Core(usize),
    Factor {
        module: usize,
        mode: usize,
    },
    Stem,
    BnGamma(BnSite),
    BnBeta(BnSite),
    /// 1×1 projection in front of macro-module `b ≥ 1`.
    Projection(usize),
    HeadWeight,
    HeadBias,
}

impl ParamId {
    pub fn is_core(self) -> bool {
        matches!(self, ParamId::Core(_))
    }
}

impl fmt::Display for BnSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BnSite::Stem => write!(f, "stem"),
            BnSite::Layer { module, layer } => write!(f, "{module}.{layer}"),
        }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::Core(b) => write!(f, "core.{b}"),
            ParamId::Factor { module, mode } => write!(f, "factor.{module}.{mode}"),
            ParamId::Stem => write!(f, "stem"),
            ParamId::BnGamma(s) => write!(f, "bn.{s}.gamma"),
            ParamId::BnBeta(s) => write!(f, "bn.{s}.beta"),
            ParamId::Projection(b) => write!(f, "proj.{b}"),
            ParamId::HeadWeight => write!(f, "head.weight"),
            ParamId::HeadBias => write!(f, "head.bias"),
        }
    }
}

/// Which parameters an optimizer may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    /// Everything, shared cores included.
    Source,
    /// Factors, batch norm, projections and head; cores and stem stay fixed.
    Adapt,
    /// Only the linear head (frozen-feature baseline).
    HeadOnly,
}

impl TrainMode {
    pub fn selects(self, id: ParamId) -> bool {
        match self {
            TrainMode::Source => true,
            TrainMode::Adapt => !matches!(id, ParamId::Core(_) | ParamId::Stem),
            TrainMode::HeadOnly => matches!(id, ParamId::HeadWeight | ParamId::HeadBias),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum HeadInit {
    /// Uniform over `±1/sqrt(fan_in)`.
    #[default]
    Fresh,
    /// Copy of the parent task's head; class counts must agree.
    Copy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: DenseTensor,
    pub beta: DenseTensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: DenseTensor::filled(&[channels], 1.0),
            beta: DenseTensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn update(&mut self, stats: &BatchStats) {
        for (r, m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

/// Everything a single task owns.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskState {
    pub num_classes: usize,
    /// One factor set per macro-module.
    pub factors: Vec<TaskFactorSet>,
    pub stem: DenseTensor,
    pub bn: BTreeMap<BnSite, BatchNormState>,
    /// Keyed by the macro-module the projection feeds.
    pub projections: BTreeMap<usize, DenseTensor>,
    pub head_weight: DenseTensor,
    pub head_bias: DenseTensor,
}

fn he_normal(shape: &[usize], rng: &mut Rng) -> DenseTensor {
    let fan_in: usize = shape[1..].iter().product();
    DenseTensor::random_normal(shape, 0.0, (2.0 / fan_in as f64).sqrt(), rng)
}

fn fresh_head(num_classes: usize, features: usize, rng: &mut Rng) -> (DenseTensor, DenseTensor) {
    let bound = 1.0 / (features as f64).sqrt();
    (
        DenseTensor::random_uniform(&[num_classes, features], -bound, bound, rng),
        DenseTensor::random_uniform(&[num_classes], -bound, bound, rng),
    )
}

/// The result of one forward pass: the tape, the logits node and the leaf
/// bound to each parameter.
pub struct Forward {
    pub tape: Tape,
    pub logits: Var,
    pub params: Vec<(ParamId, Var)>,
    pub batch_stats: Vec<(BnSite, BatchStats)>,
}

impl Forward {
    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.params.iter().find(|(p, _)| *p == id).map(|&(_, v)| v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ArchConfig,
    pub cores: Vec<SharedCore>,
    tasks: BTreeMap<String, TaskState>,
}

impl Model {
    /// Draws every grouped kernel from `N(0, INIT_STD²)`, decomposes each
    /// macro-module's stack with HOSVD into a shared core and the source
    /// task's factors, and initializes the remaining layers.
    pub fn build(config: ArchConfig, source_task: &str, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut cores = Vec::with_capacity(config.macro_modules);
        let mut factors = Vec::with_capacity(config.macro_modules);
        for b in 0..config.macro_modules {
            let layout = config.layout(b)?;
            let full = GroupLayout::full_rank(layout.dims)?;
            let weights = (0..full.layers())
                .map(|_| DenseTensor::random_normal(&full.kernel_shape(), 0.0, INIT_STD, rng))
                .collect();
            let (core, f, _) = init_source(&ParamGroup { layout: full, weights }, &layout, b, source_task, 0)?;
            cores.push(core);
            factors.push(f);
        }
        let state = Self::fresh_plain_state(&config, config.num_classes, factors, rng);
        let mut tasks = BTreeMap::new();
        tasks.insert(source_task.to_string(), state);
        Ok(Self { config, cores, tasks })
    }

    fn fresh_plain_state(
        config: &ArchConfig,
        num_classes: usize,
        factors: Vec<TaskFactorSet>,
        rng: &mut Rng,
    ) -> TaskState {
        let c0 = config.channels[0];
        let stem = he_normal(&[c0, INPUT_CHANNELS, config.kernel.0, config.kernel.1], rng);
        let mut bn = BTreeMap::new();
        bn.insert(BnSite::Stem, BatchNormState::new(c0));
        let mut projections = BTreeMap::new();
        for b in 0..config.macro_modules {
            if b > 0 {
                projections.insert(b, he_normal(&[config.channels[b], config.channels[b - 1], 1, 1], rng));
            }
            for layer in 0..config.units_per_module * config.blocks_per_unit {
                bn.insert(BnSite::Layer { module: b, layer }, BatchNormState::new(config.channels[b]));
            }
        }
        let (head_weight, head_bias) = fresh_head(num_classes, *config.channels.last().expect("validated"), rng);
        TaskState { num_classes, factors, stem, bn, projections, head_weight, head_bias }
    }

    /// Reassembles a model from stored parts, checking every shape.
    pub fn from_parts(config: ArchConfig, cores: Vec<SharedCore>, tasks: BTreeMap<String, TaskState>) -> Result<Self> {
        config.validate()?;
        if cores.len() != config.macro_modules {
            return Err(Error::InvalidConfig(format!(
                "{} cores for {} macro-modules",
                cores.len(),
                config.macro_modules
            )));
        }
        for (b, core) in cores.iter().enumerate() {
            if *core.layout() != config.layout(b)? {
                return Err(Error::DimensionMismatch(format!("core {b} layout differs from the config")));
            }
        }
        let model = Self { config, cores, tasks };
        for (name, state) in &model.tasks {
            for (id, shape) in model.config.parameter_shapes(state.num_classes)? {
                let actual = model.param(name, id)?.shape();
                if actual != shape.as_slice() {
                    return Err(Error::DimensionMismatch(format!(
                        "task `{name}` {id}: shape {actual:?}, expected {shape:?}"
                    )));
                }
            }
            if state.factors.iter().any(|f| f.task_id != *name) {
                return Err(Error::Format(format!("task `{name}` holds factors labelled for another task")));
            }
            for (site, s) in &state.bn {
                let c = s.gamma.len();
                if s.running_mean.len() != c || s.running_var.len() != c {
                    return Err(Error::DimensionMismatch(format!("task `{name}` bn.{site}: running statistics")));
                }
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn task_ids(&self) -> impl Iterator<Item = &str> {
        self.tasks.keys().map(String::as_str)
    }

    pub fn tasks(&self) -> &BTreeMap<String, TaskState> {
        &self.tasks
    }

    pub fn task(&self, task: &str) -> Result<&TaskState> {
        self.tasks.get(task).ok_or_else(|| Error::UnknownTask(task.to_string()))
    }

    pub fn task_mut(&mut self, task: &str) -> Result<&mut TaskState> {
        self.tasks.get_mut(task).ok_or_else(|| Error::UnknownTask(task.to_string()))
    }

    pub fn freeze_cores(&mut self) {
        self.cores.iter_mut().for_each(SharedCore::freeze);
    }

    /// Registers a new task derived from `parent`: factors warm-started or
    /// random orthonormal, batch norm, projections and stem copied, head fresh
    /// or copied.
    pub fn add_task(
        &mut self,
        task: &str,
        parent: &str,
        num_classes: usize,
        factor_init: FactorInit,
        head_init: HeadInit,
        rng: &mut Rng,
    ) -> Result<()> {
        if self.tasks.contains_key(task) {
            return Err(Error::DuplicateTask(task.to_string()));
        }
        if num_classes == 0 {
            return Err(Error::InvalidConfig("num_classes must be positive".into()));
        }
        let parent_state = self.task(parent)?;
        let factors = match factor_init {
            FactorInit::WarmStart => parent_state.factors.iter().map(|f| init_task_factors(f, task)).collect(),
            FactorInit::RandomOrthonormal => self
                .cores
                .iter()
                .map(|c| TaskFactorSet::random_orthonormal(task, c.layout(), rng))
                .collect::<Result<_>>()?,
        };
        let (head_weight, head_bias) = match head_init {
            HeadInit::Fresh => fresh_head(num_classes, parent_state.head_weight.shape()[1], rng),
            HeadInit::Copy => {
                if parent_state.num_classes != num_classes {
                    return Err(Error::InvalidConfig(format!(
                        "cannot copy a {}-class head into a {num_classes}-class task",
                        parent_state.num_classes
                    )));
                }
                (parent_state.head_weight.clone(), parent_state.head_bias.clone())
            }
        };
        let state = TaskState {
            num_classes,
            factors,
            stem: parent_state.stem.clone(),
            bn: parent_state.bn.clone(),
            projections: parent_state.projections.clone(),
            head_weight,
            head_bias,
        };
        self.tasks.insert(task.to_string(), state);
        Ok(())
    }

    pub fn remove_task(&mut self, task: &str) -> Result<TaskState> {
        self.tasks.remove(task).ok_or_else(|| Error::UnknownTask(task.to_string()))
    }

    pub fn param(&self, task: &str, id: ParamId) -> Result<&DenseTensor> {
        if let ParamId::Core(b) = id {
            return self.cores.get(b).map(SharedCore::core).ok_or_else(|| missing(id));
        }
        let s = self.task(task)?;
        Ok(match id {
            ParamId::Core(_) => unreachable!(),
            ParamId::Factor { module, mode } => {
                s.factors.get(module).and_then(|f| f.factors().get(mode)).ok_or_else(|| missing(id))?
            }
            ParamId::Stem => &s.stem,
            ParamId::BnGamma(site) => &s.bn.get(&site).ok_or_else(|| missing(id))?.gamma,
            ParamId::BnBeta(site) => &s.bn.get(&site).ok_or_else(|| missing(id))?.beta,
            ParamId::Projection(b) => s.projections.get(&b).ok_or_else(|| missing(id))?,
            ParamId::HeadWeight => &s.head_weight,
            ParamId::HeadBias => &s.head_bias,
        })
    }

    /// Mutable access; fails with [`Error::FrozenCore`] for a frozen core.
    pub fn param_mut(&mut self, task: &str, id: ParamId) -> Result<&mut DenseTensor> {
        if let ParamId::Core(b) = id {
            return self.cores.get_mut(b).ok_or_else(|| missing(id))?.core_mut();
        }
        let s = self.tasks.get_mut(task).ok_or_else(|| Error::UnknownTask(task.to_string()))?;
        Ok(match id {
            ParamId::Core(_) => unreachable!(),
            ParamId::Factor { module, mode } => {
                s.factors.get_mut(module).and_then(|f| f.factors_mut().get_mut(mode)).ok_or_else(|| missing(id))?
            }
            ParamId::Stem => &mut s.stem,
            ParamId::BnGamma(site) => &mut s.bn.get_mut(&site).ok_or_else(|| missing(id))?.gamma,
            ParamId::BnBeta(site) => &mut s.bn.get_mut(&site).ok_or_else(|| missing(id))?.beta,
            ParamId::Projection(b) => s.projections.get_mut(&b).ok_or_else(|| missing(id))?,
            ParamId::HeadWeight => &mut s.head_weight,
            ParamId::HeadBias => &mut s.head_bias,
        })
    }

    /// All parameters of `task`'s network, shared cores included.
    pub fn all_params(&self, task: &str) -> Result<Vec<ParamId>> {
        let s = self.task(task)?;
        Ok(self.config.parameter_shapes(s.num_classes)?.into_iter().map(|(id, _)| id).collect())
    }

    pub fn trainable_params(&self, task: &str, mode: TrainMode) -> Result<Vec<ParamId>> {
        let all = self.all_params(task)?;
        Ok(all.into_iter().filter(|&id| mode.selects(id)).collect())
    }

    /// `(selected, total)` scalar counts for `task` under `mode`.
    pub fn trainable_fraction(&self, task: &str, mode: TrainMode) -> Result<(usize, usize)> {
        let count = |ids: &[ParamId]| -> Result<usize> { ids.iter().map(|&id| Ok(self.param(task, id)?.len())).sum() };
        Ok((count(&self.trainable_params(task, mode)?)?, count(&self.all_params(task)?)?))
    }

    /// Runs the network on `input` (`(N, 3, H, W)`), recording everything on a
    /// fresh tape. Parameters in `trainable` become gradient-tracking leaves.
    pub fn forward(&self, task: &str, input: &DenseTensor, phase: Phase, trainable: &[ParamId]) -> Result<Forward> {
        let state = self.task(task)?;
        let shape = input.shape();
        if shape.len() != 4 || shape[1] != INPUT_CHANNELS {
            return Err(Error::DimensionMismatch(format!("input must be (N, {INPUT_CHANNELS}, H, W), got {shape:?}")));
        }
        let trainable: BTreeSet<ParamId> = trainable.iter().copied().collect();
        let mut run = Run {
            model: self,
            task,
            state,
            phase,
            tape: Tape::new(),
            trainable,
            params: Vec::new(),
            stats: Vec::new(),
        };
        let logits = run.network(input)?;
        Ok(Forward { tape: run.tape, logits, params: run.params, batch_stats: run.stats })
    }

    /// Eval-mode logits as a plain tensor.
    pub fn logits(&self, task: &str, input: &DenseTensor) -> Result<DenseTensor> {
        let fwd = self.forward(task, input, Phase::Eval, &[])?;
        Ok(fwd.tape.value(fwd.logits).clone())
    }

    /// Folds train-mode batch statistics into the task's running averages.
    pub fn update_running_stats(&mut self, task: &str, stats: &[(BnSite, BatchStats)]) -> Result<()> {
        let s = self.task_mut(task)?;
        for (site, st) in stats {
            s.bn.get_mut(site).ok_or_else(|| Error::Format(format!("no batch norm at {site}")))?.update(st);
        }
        Ok(())
    }
}

fn missing(id: ParamId) -> Error {
    Error::InvalidConfig(format!("parameter {id} does not exist in this architecture"))
}

struct Run<'a> {
    model: &'a Model,
    task: &'a str,
    state: &'a TaskState,
    phase: Phase,
    tape: Tape,
    trainable: BTreeSet<ParamId>,
    params: Vec<(ParamId, Var)>,
    stats: Vec<(BnSite, BatchStats)>,
}

impl Run<'_> {
    fn bind(&mut self, id: ParamId) -> Result<Var> {
        let value = self.model.param(self.task, id)?.clone();
        let var = self.tape.leaf(value, self.trainable.contains(&id));
        self.params.push((id, var));
        Ok(var)
    }

    fn batch_norm(&mut self, x: Var, site: BnSite) -> Result<Var> {
        let gamma = self.bind(ParamId::BnGamma(site))?;
        let beta = self.bind(ParamId::BnBeta(site))?;
        match self.phase {
            Phase::Train => {
                let (y, stats) = self.tape.batch_norm_train(x, gamma, beta)?;
                self.stats.push((site, stats));
                Ok(y)
            }
            Phase::Eval => {
                let bn = &self.state.bn[&site];
                self.tape.batch_norm_eval(x, gamma, beta, &bn.running_mean, &bn.running_var)
            }
        }
    }

    fn network(&mut self, input: &DenseTensor) -> Result<Var> {
        let config = &self.model.config;
        let (pad, _) = config.pad();
        let x = self.tape.constant(input.clone());
        let stem = self.bind(ParamId::Stem)?;
        let x = self.tape.conv2d(x, stem, 1, pad)?;
        let x = self.batch_norm(x, BnSite::Stem)?;
        let mut x = self.tape.relu(x);

        for b in 0..config.macro_modules {
            if b > 0 {
                let proj = self.bind(ParamId::Projection(b))?;
                x = self.tape.conv2d(x, proj, 1, 0)?;
            }
            let core = self.bind(ParamId::Core(b))?;
            let factors = (0..GROUP_ORDER)
                .map(|mode| self.bind(ParamId::Factor { module: b, mode }))
                .collect::<Result<Vec<_>>>()?;
            let theta = self.tape.tucker(core, &factors)?;
            for unit in 0..config.units_per_module {
                let stride = if unit == 0 { 2 } else { 1 };
                let shortcut = if stride > 1 { self.tape.subsample(x, stride)? } else { x };
                let mut h = x;
                for block in 0..config.blocks_per_unit {
                    let kernel = self.tape.kernel_slice(theta, block, unit)?;
                    h = self.tape.conv2d(h, kernel, if block == 0 { stride } else { 1 }, pad)?;
                    let layer = unit * config.blocks_per_unit + block;
                    h = self.batch_norm(h, BnSite::Layer { module: b, layer })?;
                    if block + 1 < config.blocks_per_unit {
                        h = self.tape.relu(h);
                    }
                }
                let sum = self.tape.add(h, shortcut)?;
                x = self.tape.relu(sum);
            }
        }

        let pooled = self.tape.adaptive_avg_pool(x)?;
        let w = self.bind(ParamId::HeadWeight)?;
        let bias = self.bind(ParamId::HeadBias)?;
        self.tape.linear(pooled, w, bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn tiny() -> ArchConfig {
        ArchConfig {
            channels: vec![2, 3, 4],
            num_classes: 3,
            input_resolution: 8,
            units_per_module: 2,
            ..ArchConfig::default()
        }
    }

    fn input(n: usize, res: usize, seed: u64) -> DenseTensor {
        DenseTensor::random_normal(&[n, 3, res, res], 0.0, 1.0, &mut seeded(seed))
    }

    #[test]
    fn default_group_sizes() {
        let c = ArchConfig::default();
        let dims: Vec<_> = c.layouts().unwrap().iter().map(|l| l.dims).collect();
        assert_eq!(dims[2], [256, 256, 3, 3, 2, 4]);
        assert_eq!(
            dims.iter().map(|d| d.iter().product::<usize>()).collect::<Vec<_>>(),
            [294_912, 1_179_648, 4_718_592]
        );
        assert!(c.layouts().unwrap().iter().all(|l| l.layers() == 8));
    }

    #[test]
    fn config_errors() {
        for bad in [
            ArchConfig { channels: vec![8, 8, 16], ..ArchConfig::desk() },
            ArchConfig { channels: vec![16, 8, 32], ..ArchConfig::desk() },
            ArchConfig { channels: vec![8, 16], ..ArchConfig::desk() },
            ArchConfig { kernel: (2, 2), ..ArchConfig::desk() },
            ArchConfig { num_classes: 0, ..ArchConfig::desk() },
            ArchConfig { ranks: Some(vec![[9, 8, 3, 3, 2, 4]; 3]), ..ArchConfig::desk() },
        ] {
            assert!(
                matches!(bad.validate(), Err(Error::InvalidConfig(_) | Error::RankExceedsDimension { .. })),
                "{bad:?}"
            );
        }
    }

    #[test]
    fn desk_parameter_total_matches_closed_form() {
        let c = ArchConfig::desk();
        let model = Model::build(c.clone(), "src", &mut seeded(0)).unwrap();
        let (_, total) = model.trainable_fraction("src", TrainMode::Source).unwrap();
        assert_eq!(
            c.count_params(10, TrainMode::Adapt).unwrap(),
            model.trainable_fraction("src", TrainMode::Adapt).unwrap()
        );
        let ch = [8usize, 16, 32];
        let k = 9;
        let mut expected = ch[0] * 3 * k + 2 * ch[0];
        for (b, &c) in ch.iter().enumerate() {
            expected += c * c * k * 8; // core
            expected += 2 * c * c + 9 + 9 + 4 + 16; // factors
            expected += 8 * 2 * c; // bn
            if b > 0 {
                expected += c * ch[b - 1];
            }
        }
        expected += 10 * 32 + 10;
        assert_eq!(total, expected);
    }

    #[test]
    fn logits_shape_and_determinism() {
        let model = Model::build(tiny(), "src", &mut seeded(1)).unwrap();
        let x = input(2, 8, 2);
        let a = model.logits("src", &x).unwrap();
        assert_eq!(a.shape(), &[2, 3]);
        assert!(a.data().iter().all(|v| v.is_finite()));
        assert_eq!(a, model.logits("src", &x).unwrap());
        assert!(matches!(model.logits("nope", &x), Err(Error::UnknownTask(_))));
    }

    #[test]
    fn zero_input_gives_finite_logits() {
        let mut model = Model::build(tiny(), "src", &mut seeded(3)).unwrap();
        model.task_mut("src").unwrap().head_bias = DenseTensor::zeros(&[3]);
        for bn in model.task_mut("src").unwrap().bn.values_mut() {
            bn.running_mean.iter_mut().for_each(|m| *m = 0.0);
            bn.running_var.iter_mut().for_each(|v| *v = 0.0);
        }
        let out = model.logits("src", &DenseTensor::zeros(&[2, 3, 8, 8])).unwrap();
        assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn warm_start_with_copied_head_reproduces_parent() {
        let mut rng = seeded(4);
        let mut model = Model::build(tiny(), "src", &mut rng).unwrap();
        model.add_task("tgt", "src", 3, FactorInit::WarmStart, HeadInit::Copy, &mut rng).unwrap();
        let x = input(3, 8, 5);
        assert_eq!(model.logits("src", &x).unwrap(), model.logits("tgt", &x).unwrap());
        assert!(matches!(
            model.add_task("tgt", "src", 3, FactorInit::WarmStart, HeadInit::Copy, &mut rng),
            Err(Error::DuplicateTask(_))
        ));
        assert!(model.add_task("t5", "src", 5, FactorInit::WarmStart, HeadInit::Copy, &mut rng).is_err());
    }

    #[test]
    fn task_isolation() {
        let mut rng = seeded(6);
        let mut model = Model::build(tiny(), "src", &mut rng).unwrap();
        model.add_task("tgt", "src", 4, FactorInit::RandomOrthonormal, HeadInit::Fresh, &mut rng).unwrap();
        let x = input(2, 8, 7);
        let before = model.logits("src", &x).unwrap();
        for id in model.trainable_params("tgt", TrainMode::Adapt).unwrap() {
            model.param_mut("tgt", id).unwrap().data_mut().iter_mut().for_each(|v| *v += 0.5);
        }
        assert_eq!(model.logits("tgt", &x).unwrap().shape(), &[2, 4]);
        assert_eq!(before, model.logits("src", &x).unwrap());
    }

    #[test]
    fn frozen_core_rejects_mutation() {
        let mut model = Model::build(tiny(), "src", &mut seeded(8)).unwrap();
        assert!(model.param_mut("src", ParamId::Core(1)).is_ok());
        model.freeze_cores();
        assert!(matches!(model.param_mut("src", ParamId::Core(1)), Err(Error::FrozenCore(1))));
    }

    #[test]
    fn selections() {
        let model = Model::build(tiny(), "src", &mut seeded(9)).unwrap();
        let all = model.all_params("src").unwrap();
        assert_eq!(model.trainable_params("src", TrainMode::Source).unwrap(), all);
        let adapt = model.trainable_params("src", TrainMode::Adapt).unwrap();
        assert!(adapt.iter().all(|id| !id.is_core() && *id != ParamId::Stem));
        assert_eq!(adapt.len(), all.len() - 4);
        assert_eq!(
            model.trainable_params("src", TrainMode::HeadOnly).unwrap(),
            [ParamId::HeadWeight, ParamId::HeadBias]
        );
    }

    #[test]
    fn train_forward_reports_every_batch_norm() {
        let model = Model::build(tiny(), "src", &mut seeded(10)).unwrap();
        let fwd = model.forward("src", &input(2, 8, 11), Phase::Train, &[]).unwrap();
        assert_eq!(fwd.batch_stats.len(), 1 + 3 * 4);
        assert!(fwd.var(ParamId::HeadBias).is_some());
    }

    #[test]
    fn param_names_are_unique() {
        let ids = ArchConfig::default().parameter_shapes(10).unwrap();
        let names: BTreeSet<String> = ids.iter().map(|(id, _)| id.to_string()).collect();
        assert_eq!(names.len(), ids.len());
    }
}
