//! Source training, per-task adaptation and the experiment sweeps built on them.

use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gradcheck::{kink_tolerant_error, partial, scaled_step};
use crate::network::{Forward, HeadInit, Model, ParamId, Phase, TrainMode};
use crate::optim::Sgd;
use crate::param::{FactorInit, TaskFactorSet};
use crate::rng::{derived, Rng};
use crate::tensor::DenseTensor;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// The learning rate is divided by 10 every `lr_step` epochs.
    pub lr_step: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_orth: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Random flips and crops from a 2-pixel zero-padded copy.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.1,
            lr_step: 30,
            momentum: 0.9,
            weight_decay: 1e-5,
            lambda_orth: 1e-3,
            batch_size: 32,
            seed: 0,
            augment: true,
        }
    }
}

pub const CROP_PAD: usize = 2;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.lambda_orth >= 0.0
            && self.batch_size > 0
            && self.lr_step > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid training configuration {self:?}")))
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * 0.1f64.powi((epoch / self.lr_step) as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub lambda_loss: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} split={} loss={:.6} accuracy={:.4} lambda_loss={:.6e}",
            self.epoch, self.split, self.loss, self.accuracy, self.lambda_loss
        )
    }
}

/// `λ · Σ_k ‖F_kᵀ F_k − I‖_F²`.
pub fn orthogonality_loss(factors: &TaskFactorSet, lambda: f64) -> f64 {
    lambda * factors.factors().iter().map(gram_defect_sq).sum::<f64>()
}

fn gram_defect_sq(f: &DenseTensor) -> f64 {
    let g = f.transpose().and_then(|t| t.matmul(f)).expect("factor is a matrix");
    let r = g.shape()[0];
    g.data().iter().enumerate().map(|(i, v)| (v - if i / r == i % r { 1.0 } else { 0.0 }).powi(2)).sum()
}

/// The same penalty recorded on a tape, summed over `factors`.
pub fn orthogonality_term(tape: &mut Tape, factors: &[Var], lambda: f64) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for &f in factors {
        let r = tape.value(f).shape()[1];
        let ft = tape.transpose(f)?;
        let gram = tape.mode_product(f, ft, 0)?;
        let minus_id = tape.constant(DenseTensor::identity(r).scale(-1.0));
        let defect = tape.add(gram, minus_id)?;
        let sq = tape.frobenius_sq(defect)?;
        total = Some(match total {
            Some(t) => tape.add(t, sq)?,
            None => sq,
        });
    }
    Ok(total.map(|t| tape.scale(t, lambda)))
}

/// Forward pass plus the training objective: mean cross-entropy plus the
/// orthogonality penalty on every trainable factor.
pub struct Objective {
    pub forward: Forward,
    pub loss: Var,
    pub cross_entropy: Var,
    pub lambda_loss: f64,
}

pub fn objective(
    model: &Model,
    task: &str,
    input: &DenseTensor,
    labels: &[usize],
    phase: Phase,
    trainable: &[ParamId],
    lambda: f64,
) -> Result<Objective> {
    let mut forward = model.forward(task, input, phase, trainable)?;
    let cross_entropy = forward.tape.softmax_cross_entropy(forward.logits, labels)?;
    let factor_vars: Vec<Var> = forward
        .params
        .iter()
        .filter(|(id, _)| matches!(id, ParamId::Factor { .. }) && trainable.contains(id))
        .map(|&(_, v)| v)
        .collect();
    let (loss, lambda_loss) = match orthogonality_term(&mut forward.tape, &factor_vars, lambda)? {
        Some(pen) if lambda > 0.0 => {
            let value = forward.tape.value(pen).data()[0];
            (forward.tape.add(cross_entropy, pen)?, value)
        }
        _ => (cross_entropy, 0.0),
    };
    Ok(Objective { forward, loss, cross_entropy, lambda_loss })
}

fn correct(logits: &DenseTensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == y
        })
        .count()
}

/// Eval-mode mean cross-entropy and accuracy.
pub fn evaluate(model: &Model, task: &str, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("cannot evaluate on an empty dataset".into()));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut hits) = (0.0, 0);
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk, None);
        let mut fwd = model.forward(task, &x, Phase::Eval, &[])?;
        let ce = fwd.tape.softmax_cross_entropy(fwd.logits, &y)?;
        loss += fwd.tape.value(ce).data()[0] * chunk.len() as f64;
        hits += correct(fwd.tape.value(fwd.logits), &y);
    }
    Ok((loss / data.len() as f64, hits as f64 / data.len() as f64))
}

/// Minibatch SGD on `trainable_params(task, mode)`. Head-only training runs
/// the frozen features in eval mode and leaves their statistics alone.
pub fn train(
    model: &mut Model,
    task: &str,
    data: &Dataset,
    config: &TrainConfig,
    mode: TrainMode,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    if data.num_classes() > model.task(task)?.num_classes {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} classes, task `{task}` only {}",
            data.num_classes(),
            model.task(task)?.num_classes
        )));
    }
    let trainable = model.trainable_params(task, mode)?;
    let phase = if mode == TrainMode::HeadOnly { Phase::Eval } else { Phase::Train };
    let mut opt = Sgd::new(config.lr, config.momentum, config.weight_decay);
    let mut order_rng = derived(config.seed, 10);
    let mut aug_rng = derived(config.seed, 11);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        opt.lr = config.lr_at(epoch);
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut lambda_sum, mut hits) = (0.0, 0.0, 0);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let (x, y) = data.batch(chunk, config.augment.then_some((&mut aug_rng, CROP_PAD)));
            let obj = objective(model, task, &x, &y, phase, &trainable, config.lambda_orth)?;
            let tape = &obj.forward.tape;
            let loss = tape.value(obj.loss).data()[0];
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            let mut grads = tape.backward(obj.loss)?;
            for &(id, var) in &obj.forward.params {
                if let Some(g) = grads.take(var) {
                    opt.step(&id.to_string(), model.param_mut(task, id)?, &g)?;
                }
            }
            if phase == Phase::Train {
                model.update_running_stats(task, &obj.forward.batch_stats)?;
            }
            loss_sum += loss * chunk.len() as f64;
            lambda_sum += obj.lambda_loss * chunk.len() as f64;
            hits += correct(tape.value(obj.forward.logits), &y);
        }
        let n = data.len() as f64;
        let entry = EpochLog {
            epoch,
            split: Split::Train,
            loss: loss_sum / n,
            accuracy: hits as f64 / n,
            lambda_loss: lambda_sum / n,
        };
        log(&entry);
        history.push(entry);
    }
    Ok(history)
}

pub fn train_source(
    model: &mut Model,
    task: &str,
    data: &Dataset,
    config: &TrainConfig,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    train(model, task, data, config, TrainMode::Source, log)
}

/// Freezes the shared cores, then trains `task` in `mode` (adapt or head-only).
pub fn adapt_task(
    model: &mut Model,
    task: &str,
    data: &Dataset,
    config: &TrainConfig,
    mode: TrainMode,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if mode == TrainMode::Source {
        return Err(Error::InvalidConfig("adaptation cannot train the shared cores".into()));
    }
    model.freeze_cores();
    train(model, task, data, config, mode, log)
}

/// How a new task is attached to its parent before adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptOptions {
    pub factor_init: FactorInit,
    pub head_init: HeadInit,
    pub mode: TrainMode,
}

impl Default for AdaptOptions {
    fn default() -> Self {
        Self { factor_init: FactorInit::WarmStart, head_init: HeadInit::Fresh, mode: TrainMode::Adapt }
    }
}

/// `add_task` followed by [`adapt_task`], all randomness drawn from `config.seed`.
pub fn adapt_new_task(
    model: &mut Model,
    parent: &str,
    task: &str,
    data: &Dataset,
    config: &TrainConfig,
    options: AdaptOptions,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    let mut rng = derived(config.seed, 20);
    model.add_task(task, parent, data.num_classes(), options.factor_init, options.head_init, &mut rng)?;
    adapt_task(model, task, data, config, options.mode, log)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FractionRow {
    pub fraction: f64,
    pub train_size: usize,
    pub accuracy: f64,
}

/// One independent adaptation per fraction of a stratified subsample of
/// `train`, each on a copy of `model`, scored on `test`.
pub fn data_fraction_sweep(
    model: &Model,
    parent: &str,
    train_set: &Dataset,
    test_set: &Dataset,
    fractions: &[f64],
    config: &TrainConfig,
    options: AdaptOptions,
) -> Result<Vec<FractionRow>> {
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let subset = train_set.stratified_fraction(fraction, &mut derived(config.seed, 30))?;
        let mut m = model.clone();
        adapt_new_task(&mut m, parent, "sweep", &subset, config, options, &mut |_| {})?;
        let (_, accuracy) = evaluate(&m, "sweep", test_set, config.batch_size)?;
        rows.push(FractionRow { fraction, train_size: subset.len(), accuracy });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaRow {
    pub lambda: f64,
    pub accuracy: f64,
    pub lambda_loss: f64,
}

/// One adaptation per orthogonality weight.
pub fn lambda_sweep(
    model: &Model,
    parent: &str,
    train_set: &Dataset,
    test_set: &Dataset,
    lambdas: &[f64],
    config: &TrainConfig,
    options: AdaptOptions,
) -> Result<Vec<LambdaRow>> {
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut m = model.clone();
        let cfg = TrainConfig { lambda_orth: lambda, ..config.clone() };
        adapt_new_task(&mut m, parent, "sweep", train_set, &cfg, options, &mut |_| {})?;
        let (_, accuracy) = evaluate(&m, "sweep", test_set, config.batch_size)?;
        let lambda_loss = m.task("sweep")?.factors.iter().map(|f| orthogonality_loss(f, lambda)).sum();
        rows.push(LambdaRow { lambda, accuracy, lambda_loss });
    }
    Ok(rows)
}

/// Outcome of comparing back-propagated gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    /// Per parameter: coordinates probed and the worst error among them and
    /// one random directional derivative.
    pub params: Vec<(ParamId, usize, f64)>,
    pub max_error: f64,
}

/// Checks the gradient of the train-mode objective with respect to every
/// parameter of `mode`. Tensors with at most `exhaustive_limit` entries are
/// probed at every coordinate, larger ones at `samples` random coordinates;
/// every tensor additionally gets one random directional derivative, which
/// involves all of its entries. Steps follow [`scaled_step`].
#[allow(clippy::too_many_arguments)]
pub fn gradcheck(
    model: &Model,
    task: &str,
    input: &DenseTensor,
    labels: &[usize],
    mode: TrainMode,
    lambda: f64,
    exhaustive_limit: usize,
    samples: usize,
    rng: &mut Rng,
) -> Result<GradcheckReport> {
    let ids = model.trainable_params(task, mode)?;
    let obj = objective(model, task, input, labels, Phase::Train, &ids, lambda)?;
    let grads = obj.forward.tape.backward(obj.loss)?;
    let mut probe = model.clone();
    probe.cores.iter_mut().for_each(|c| c.set_frozen(false));
    let loss_at = |m: &Model| -> f64 {
        let o = objective(m, task, input, labels, Phase::Train, &ids, lambda).expect("shapes already validated");
        o.forward.tape.value(o.loss).data()[0]
    };

    let mut params = Vec::with_capacity(ids.len());
    let mut max_error: f64 = 0.0;
    for &(id, var) in &obj.forward.params {
        let analytic =
            grads.get(var).cloned().unwrap_or_else(|| DenseTensor::zeros(obj.forward.tape.value(var).shape()));
        let len = analytic.len();
        let coords: Vec<usize> = if len <= exhaustive_limit {
            (0..len).collect()
        } else {
            (0..len).collect::<Vec<_>>().choose_multiple(rng, samples).copied().collect()
        };
        let h = scaled_step(probe.param(task, id)?);
        let mut worst: f64 = 0.0;
        let original = probe.param(task, id)?.clone();
        for &i in &coords {
            let mut t = original.clone();
            let err = kink_tolerant_error(analytic.data()[i], h, |step| {
                partial(&mut t, i, step, |v| {
                    *probe.param_mut(task, id).expect("unfrozen") = v.clone();
                    loss_at(&probe)
                })
            });
            worst = worst.max(err);
        }

        let dir = DenseTensor::random_normal(analytic.shape(), 0.0, 1.0, rng);
        let dir = dir.scale(1.0 / dir.frobenius_norm());
        let err = kink_tolerant_error(analytic.dot(&dir)?, h, |step| {
            let mut at = |sign: f64| {
                *probe.param_mut(task, id).expect("unfrozen") =
                    original.add(&dir.scale(sign * step)).expect("same shape");
                loss_at(&probe)
            };
            (at(1.0) - at(-1.0)) / (2.0 * step)
        });
        *probe.param_mut(task, id)? = original;
        worst = worst.max(err);

        max_error = max_error.max(worst);
        params.push((id, coords.len(), worst));
    }
    Ok(GradcheckReport { params, max_error })
}

/// A random batch for [`gradcheck`]-style probes.
pub fn random_batch(batch: usize, resolution: usize, classes: usize, rng: &mut Rng) -> (DenseTensor, Vec<usize>) {
    let x = DenseTensor::random_normal(&[batch, 3, resolution, resolution], 0.0, 1.0, rng);
    let y = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    (x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, Generator, SyntheticDomainSpec};
    use crate::network::ArchConfig;
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

    fn tiny_data(seed: u64) -> Dataset {
        generate_dataset(&SyntheticDomainSpec {
            resolution: 8,
            ..SyntheticDomainSpec::new(Generator::Shapes, 3, 4, seed)
        })
        .unwrap()
    }

    fn quiet() -> impl FnMut(&EpochLog) {
        |_| {}
    }

    #[test]
    fn orthogonality_examples() {
        let layout = crate::param::GroupLayout::full_rank([2, 2, 1, 1, 1, 1]).unwrap();
        let id = TaskFactorSet::identity("t", &layout).unwrap();
        assert_eq!(orthogonality_loss(&id, 0.1), 0.0);
        let mut f = id.clone();
        f.factors_mut()[0] = DenseTensor::from_rows(&[&[2.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert_eq!(orthogonality_loss(&f, 1.0), 9.0);
        assert_eq!(orthogonality_loss(&f, 2.0), 18.0);
    }

    #[test]
    fn tape_penalty_matches_direct() {
        let mut rng = seeded(1);
        let layout = crate::param::GroupLayout::new([4, 3, 3, 3, 2, 2], [2, 3, 2, 3, 1, 2]).unwrap();
        let factors: Vec<_> =
            (0..6).map(|k| DenseTensor::random_normal(&layout.factor_shape(k), 0.0, 1.0, &mut rng)).collect();
        let set = TaskFactorSet::new("t", &layout, factors.clone()).unwrap();
        let mut tape = Tape::new();
        let vars: Vec<_> = factors.into_iter().map(|f| tape.leaf(f, true)).collect();
        let pen = orthogonality_term(&mut tape, &vars, 0.3).unwrap().unwrap();
        let direct = orthogonality_loss(&set, 0.3);
        assert!((tape.value(pen).data()[0] - direct).abs() < 1e-12 * direct.max(1.0));
        // d/dF ‖FᵀF − I‖² = 4 F (FᵀF − I)
        let grads = tape.backward(pen).unwrap();
        let f0 = tape.value(vars[0]).clone();
        let defect = f0.transpose().unwrap().matmul(&f0).unwrap().sub(&DenseTensor::identity(2)).unwrap();
        let expect = f0.matmul(&defect).unwrap().scale(4.0 * 0.3);
        assert!(grads.get(vars[0]).unwrap().sub(&expect).unwrap().frobenius_norm() < 1e-10);
    }

    #[test]
    fn schedule_steps_by_ten() {
        let c = TrainConfig { lr: 0.1, lr_step: 30, ..TrainConfig::default() };
        assert_eq!(c.lr_at(0), 0.1);
        assert_eq!(c.lr_at(29), 0.1);
        assert!((c.lr_at(30) - 0.01).abs() < 1e-15);
        assert!((c.lr_at(65) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut model = Model::build(tiny(), "src", &mut seeded(2)).unwrap();
        let before = model.clone();
        let data = tiny_data(3);
        let cfg = TrainConfig { epochs: 3, lr: 0.0, batch_size: data.len(), augment: false, ..TrainConfig::default() };
        let hist = train_source(&mut model, "src", &data, &cfg, &mut quiet()).unwrap();
        for id in model.all_params("src").unwrap() {
            assert_eq!(model.param("src", id).unwrap(), before.param("src", id).unwrap(), "{id}");
        }
        for h in &hist[1..] {
            assert!((h.loss - hist[0].loss).abs() < 1e-12);
        }
    }

    #[test]
    fn seeded_runs_are_identical() {
        let data = tiny_data(4);
        let cfg = TrainConfig { epochs: 2, batch_size: 5, ..TrainConfig::default() };
        let run = || {
            let mut model = Model::build(tiny(), "src", &mut seeded(5)).unwrap();
            let h = train_source(&mut model, "src", &data, &cfg, &mut quiet()).unwrap();
            (h, model)
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
    }

    #[test]
    fn adaptation_touches_only_the_new_task() {
        let data = tiny_data(6);
        let mut model = Model::build(tiny(), "src", &mut seeded(7)).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 6, ..TrainConfig::default() };
        train_source(&mut model, "src", &data, &cfg, &mut quiet()).unwrap();
        let snapshot = model.clone();
        adapt_new_task(&mut model, "src", "tgt", &data, &cfg, AdaptOptions::default(), &mut quiet()).unwrap();
        assert!(model.cores.iter().all(|c| c.is_frozen()));
        for (a, b) in model.cores.iter().zip(&snapshot.cores) {
            assert_eq!(a.core(), b.core());
        }
        assert_eq!(model.task("src").unwrap(), snapshot.task("src").unwrap());
        assert_ne!(model.task("tgt").unwrap().factors, snapshot.task("src").unwrap().factors);
        assert_eq!(model.task("tgt").unwrap().stem, snapshot.task("src").unwrap().stem);
        assert!(matches!(
            adapt_task(&mut model, "tgt", &data, &cfg, TrainMode::Source, &mut quiet()),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(train_source(&mut model, "tgt", &data, &cfg, &mut quiet()), Err(Error::FrozenCore(_))));
    }

    #[test]
    fn head_only_changes_only_the_head() {
        let data = tiny_data(8);
        let mut model = Model::build(tiny(), "src", &mut seeded(9)).unwrap();
        let cfg = TrainConfig { epochs: 1, batch_size: 4, ..TrainConfig::default() };
        let opts = AdaptOptions { mode: TrainMode::HeadOnly, ..AdaptOptions::default() };
        adapt_new_task(&mut model, "src", "base", &data, &cfg, opts, &mut quiet()).unwrap();
        let (src, base) = (model.task("src").unwrap(), model.task("base").unwrap());
        assert_eq!(src.bn, base.bn);
        assert_eq!(
            src.factors.iter().map(|f| f.factors()).collect::<Vec<_>>(),
            base.factors.iter().map(|f| f.factors()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn divergence_is_reported() {
        let data = tiny_data(10);
        let mut model = Model::build(tiny(), "src", &mut seeded(11)).unwrap();
        model.task_mut("src").unwrap().head_bias.data_mut()[0] = f64::NAN;
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
        assert!(matches!(
            train_source(&mut model, "src", &data, &cfg, &mut quiet()),
            Err(Error::Diverged { epoch: 0, step: 0, .. })
        ));
    }

    #[test]
    fn sweep_at_full_fraction_matches_direct_adaptation() {
        let (train_set, test_set) = (tiny_data(12), tiny_data(13));
        let model = Model::build(tiny(), "src", &mut seeded(14)).unwrap();
        let cfg = TrainConfig { epochs: 1, batch_size: 4, ..TrainConfig::default() };
        let rows =
            data_fraction_sweep(&model, "src", &train_set, &test_set, &[1.0, 0.5], &cfg, AdaptOptions::default())
                .unwrap();
        let mut direct = model.clone();
        adapt_new_task(&mut direct, "src", "x", &train_set, &cfg, AdaptOptions::default(), &mut quiet()).unwrap();
        assert_eq!(rows[0].accuracy, evaluate(&direct, "x", &test_set, 4).unwrap().1);
        assert_eq!(rows[1].train_size, 6);
        assert!(data_fraction_sweep(&model, "src", &train_set, &test_set, &[], &cfg, AdaptOptions::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn tiny_network_gradients_match_differences() {
        let model = Model::build(tiny(), "src", &mut seeded(15)).unwrap();
        let mut rng = seeded(16);
        let (x, y) = random_batch(3, 8, 3, &mut rng);
        let report = gradcheck(&model, "src", &x, &y, TrainMode::Source, 1e-2, 64, 16, &mut rng).unwrap();
        assert_eq!(report.params.len(), model.all_params("src").unwrap().len());
        assert!(report.max_error <= 1e-4, "{:?}", report.params.iter().filter(|p| p.2 > 1e-4).collect::<Vec<_>>());
    }

    #[test]
    fn log_line_format() {
        let e = EpochLog { epoch: 2, split: Split::Train, loss: 0.5, accuracy: 0.75, lambda_loss: 1e-3 };
        assert_eq!(e.to_string(), "epoch=2 split=train loss=0.500000 accuracy=0.7500 lambda_loss=1.000000e-3");
    }
}
