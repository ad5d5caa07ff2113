//! Parameter accounting for the three re-parametrization schemes, the
//! Decathlon score and its parameter-normalized variant.
//!
//! For a group with `L = D4·D5` layers:
//!
//! * layer-wise Tucker: every layer keeps its own four factors,
//!   `L · Σ_{k<4} Dk·Rk`;
//! * linear: one `D_c × D_c` matrix per layer, `L · D_c²`;
//! * grouped Tucker: six factors for the whole group, `Σ_{k<6} Dk·Rk`.

use crate::error::{Error, Result};
use crate::param::{GroupLayout, GROUP_ORDER};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

/// Points awarded per task at zero error.
pub const MAX_POINTS: f64 = 1000.0;

pub fn count_layerwise(layout: &GroupLayout) -> u64 {
    let per_layer: u64 = (0..4).map(|k| (layout.dims[k] * layout.ranks[k]) as u64).sum();
    layout.layers() as u64 * per_layer
}

/// Requires square channel modes (`D0 == D1`).
pub fn count_linear(layout: &GroupLayout) -> Result<u64> {
    let [d0, d1, ..] = layout.dims;
    if d0 != d1 {
        return Err(Error::InvalidConfig(format!("linear scheme needs D0 == D1, got {d0} and {d1}")));
    }
    Ok(layout.layers() as u64 * (d0 * d0) as u64)
}

pub fn count_grouped(layout: &GroupLayout) -> u64 {
    (0..GROUP_ORDER).map(|k| (layout.dims[k] * layout.ranks[k]) as u64).sum()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub layout: GroupLayout,
    pub layerwise: u64,
    /// Absent when the channel modes differ.
    pub linear: Option<u64>,
    pub grouped: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub groups: Vec<GroupCounts>,
    pub layerwise: u64,
    pub linear: Option<u64>,
    pub grouped: u64,
}

impl ParamReport {
    pub fn new(layouts: &[GroupLayout]) -> Self {
        let groups: Vec<GroupCounts> = layouts
            .iter()
            .map(|l| GroupCounts {
                layout: *l,
                layerwise: count_layerwise(l),
                linear: count_linear(l).ok(),
                grouped: count_grouped(l),
            })
            .collect();
        Self {
            layerwise: groups.iter().map(|g| g.layerwise).sum(),
            linear: groups.iter().map(|g| g.linear).sum(),
            grouped: groups.iter().map(|g| g.grouped).sum(),
            groups,
        }
    }

    /// `layerwise / grouped`.
    pub fn ratio(&self) -> f64 {
        self.layerwise as f64 / self.grouped as f64
    }

    /// Machine-readable `key=value` lines.
    pub fn records(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .groups
            .iter()
            .enumerate()
            .map(|(b, g)| {
                let linear = g.linear.map_or("na".to_string(), |v| v.to_string());
                format!(
                    "group={b} dims={:?} ranks={:?} layerwise={} linear={linear} grouped={}",
                    g.layout.dims, g.layout.ranks, g.layerwise, g.grouped
                )
            })
            .collect();
        let linear = self.linear.map_or("na".to_string(), |v| v.to_string());
        out.push(format!(
            "total layerwise={} linear={linear} grouped={} ratio={:.4} ratio_rounded={}",
            self.layerwise,
            self.grouped,
            self.ratio(),
            self.ratio().round()
        ));
        out
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<7} {:>12} {:>12} {:>12}", "group", "layerwise", "linear", "grouped")?;
        let opt = |v: Option<u64>| v.map_or("-".to_string(), |v| v.to_string());
        for (b, g) in self.groups.iter().enumerate() {
            writeln!(f, "{:<7} {:>12} {:>12} {:>12}", b, g.layerwise, opt(g.linear), g.grouped)?;
        }
        writeln!(f, "{:<7} {:>12} {:>12} {:>12}", "total", self.layerwise, opt(self.linear), self.grouped)?;
        write!(f, "layerwise/grouped = {:.4} (≈ {})", self.ratio(), self.ratio().round())
    }
}

/// Scoring parameters of one task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub baseline_error: f64,
    /// The exponent `λ_t`.
    pub exponent: f64,
}

impl TaskScore {
    pub fn new(baseline_error: f64) -> Self {
        Self { baseline_error, exponent: 2.0 }
    }

    /// `E_ref = 2 · E_baseline`.
    pub fn reference_error(&self) -> f64 {
        2.0 * self.baseline_error
    }

    /// `β_t`, chosen so that a task at zero error earns [`MAX_POINTS`].
    pub fn beta(&self) -> f64 {
        MAX_POINTS / self.reference_error().powf(self.exponent)
    }

    /// `β_t · max(0, E_ref − E_t)^λ_t`.
    pub fn points(&self, error: f64) -> f64 {
        self.beta() * (self.reference_error() - error).max(0.0).powf(self.exponent)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub tasks: BTreeMap<String, TaskScore>,
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in &self.tasks {
            if !(t.baseline_error > 0.0 && t.baseline_error <= 0.5) || !(t.exponent > 0.0 && t.exponent.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "task `{name}`: baseline error must lie in (0, 0.5] and the exponent be positive, got {t:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub points: BTreeMap<String, f64>,
    pub total: f64,
}

impl ScoreReport {
    pub fn records(&self) -> Vec<String> {
        let mut out: Vec<String> = self.points.iter().map(|(t, p)| format!("task={t} points={p:.4}")).collect();
        out.push(format!("total score={:.4} score_rounded={}", self.total, self.total.round()));
        out
    }
}

/// `S = Σ_t β_t · max(0, E_ref,t − E_t)^λ_t` over every task in `config`.
pub fn decathlon_score(errors: &BTreeMap<String, f64>, config: &ScoreConfig) -> Result<ScoreReport> {
    config.validate()?;
    let mut points = BTreeMap::new();
    for (name, task) in &config.tasks {
        let e = *errors.get(name).ok_or_else(|| Error::UnknownTask(name.clone()))?;
        if !(0.0..=1.0).contains(&e) {
            return Err(Error::InvalidConfig(format!("error {e} of task `{name}` outside [0, 1]")));
        }
        points.insert(name.clone(), task.points(e));
    }
    if let Some(extra) = errors.keys().find(|k| !config.tasks.contains_key(*k)) {
        return Err(Error::UnknownTask(extra.clone()));
    }
    let total = points.values().sum();
    Ok(ScoreReport { points, total })
}

/// Score divided by the parameter count relative to the base network.
pub fn escore(score: f64, relative_params: f64) -> Result<f64> {
    if !(relative_params > 0.0 && relative_params.is_finite()) {
        return Err(Error::InvalidConfig(format!("relative parameter count {relative_params} must be positive")));
    }
    Ok(score / relative_params)
}

/// [`escore`] rounded to the nearest integer, ties toward negative infinity.
pub fn escore_rounded(score: f64, relative_params: f64) -> Result<i64> {
    Ok((escore(score, relative_params)? - 0.5).ceil() as i64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionRow {
    pub ranks: Vec<[usize; GROUP_ORDER]>,
    pub layerwise: u64,
    pub grouped: u64,
    /// Full-rank count over truncated count, per scheme.
    pub layerwise_ratio: f64,
    pub grouped_ratio: f64,
}

/// Compression of each truncation in `truncations` (one rank tuple per group)
/// relative to `base` at full rank.
pub fn compression_report(
    base: &[GroupLayout],
    truncations: &[Vec<[usize; GROUP_ORDER]>],
) -> Result<Vec<CompressionRow>> {
    let full: Vec<GroupLayout> = base.iter().map(|l| GroupLayout::full_rank(l.dims)).collect::<Result<_>>()?;
    let full_report = ParamReport::new(&full);
    truncations
        .iter()
        .map(|ranks| {
            if ranks.len() != base.len() {
                return Err(Error::InvalidConfig(format!("{} rank tuples for {} groups", ranks.len(), base.len())));
            }
            let layouts: Vec<GroupLayout> =
                full.iter().zip(ranks).map(|(l, r)| l.with_ranks(*r)).collect::<Result<_>>()?;
            let report = ParamReport::new(&layouts);
            Ok(CompressionRow {
                ranks: ranks.clone(),
                layerwise: report.layerwise,
                grouped: report.grouped,
                layerwise_ratio: full_report.layerwise as f64 / report.layerwise as f64,
                grouped_ratio: full_report.grouped as f64 / report.grouped as f64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ArchConfig;
    use crate::param::TaskFactorSet;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn defaults() -> Vec<GroupLayout> {
        ArchConfig::default().layouts().unwrap()
    }

    #[test]
    fn default_counts() {
        let r = ParamReport::new(&defaults());
        assert_eq!(r.layerwise, 1_376_688);
        assert_eq!(r.groups.iter().map(|g| g.layerwise).collect::<Vec<_>>(), [65_680, 262_288, 1_048_720]);
        assert_eq!(r.grouped, 172_146);
        assert_eq!(r.ratio().round(), 8.0);
        assert_eq!(r.groups[2].linear, Some(524_288));
    }

    #[test]
    fn degenerate_layout() {
        let l = GroupLayout::full_rank([1; 6]).unwrap();
        assert_eq!(count_layerwise(&l), 4);
        assert_eq!(count_linear(&l).unwrap(), 1);
        assert_eq!(count_grouped(&l), 6);
    }

    #[test]
    fn linear_needs_square_channels() {
        let l = GroupLayout::full_rank([4, 3, 3, 3, 2, 4]).unwrap();
        assert!(count_linear(&l).is_err());
        assert_eq!(ParamReport::new(&[l]).linear, None);
    }

    #[test]
    fn score_examples() {
        let mut config = ScoreConfig::default();
        config.tasks.insert("a".into(), TaskScore::new(0.4));
        let one = |e: f64| decathlon_score(&BTreeMap::from([("a".to_string(), e)]), &config).unwrap().total;
        assert!((one(0.4) - 250.0).abs() < 1e-9);
        assert_eq!(one(0.8), 0.0);
        assert_eq!(one(0.95), 0.0);
        assert!((one(0.0) - 1000.0).abs() < 1e-9);

        let ten =
            ScoreConfig { tasks: (0..10).map(|t| (format!("t{t}"), TaskScore::new(0.05 + 0.03 * t as f64))).collect() };
        let zeros = ten.tasks.keys().map(|k| (k.clone(), 0.0)).collect();
        assert!((decathlon_score(&zeros, &ten).unwrap().total - 10_000.0).abs() < 1e-6);
        let at_ref = ten.tasks.iter().map(|(k, t)| (k.clone(), t.reference_error())).collect();
        assert_eq!(decathlon_score(&at_ref, &ten).unwrap().total, 0.0);
    }

    #[test]
    fn score_errors() {
        let config = ScoreConfig { tasks: BTreeMap::from([("a".to_string(), TaskScore::new(0.2))]) };
        assert!(matches!(decathlon_score(&BTreeMap::new(), &config), Err(Error::UnknownTask(_))));
        let extra = BTreeMap::from([("a".to_string(), 0.1), ("b".to_string(), 0.1)]);
        assert!(matches!(decathlon_score(&extra, &config), Err(Error::UnknownTask(_))));
        assert!(decathlon_score(&BTreeMap::from([("a".to_string(), 1.5)]), &config).is_err());
        let bad = ScoreConfig { tasks: BTreeMap::from([("a".to_string(), TaskScore::new(0.0))]) };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn escore_rows() {
        assert_eq!(escore(1234.5, 1.0).unwrap(), 1234.5);
        assert_eq!(escore_rounded(3585.0, 1.35).unwrap(), 2656);
        assert_eq!(escore_rounded(2851.0, 2.0).unwrap(), 1425);
        assert!(escore(10.0, 0.0).is_err());
        assert!(escore(10.0, -1.0).is_err());
    }

    #[test]
    fn compression_ratios() {
        let base = defaults();
        let full: Vec<_> = base.iter().map(|l| l.ranks).collect();
        let blocks: Vec<_> = base
            .iter()
            .map(|l| {
                let mut r = l.ranks;
                r[4] = 1;
                r
            })
            .collect();
        let halved: Vec<_> = base
            .iter()
            .map(|l| {
                let mut r = l.ranks;
                r[0] /= 2;
                r[1] /= 2;
                r
            })
            .collect();
        let rows = compression_report(&base, &[full, blocks, halved]).unwrap();
        assert_eq!(rows[0].grouped_ratio, 1.0);
        assert_eq!(rows[0].layerwise_ratio, 1.0);
        assert_eq!(rows[1].grouped, 172_146 - 6);
        assert!(rows[1].grouped_ratio > 1.0);
        // Σ_b (D0² + D1²)/2 comes off the grouped count when halving the channel ranks.
        assert_eq!(rows[2].grouped, 172_146 - (64 * 64 + 128 * 128 + 256 * 256));
        assert!(rows[2].grouped_ratio > rows[1].grouped_ratio);
        let too_big: Vec<_> = base
            .iter()
            .map(|l| {
                let mut r = l.ranks;
                r[0] += 1;
                r
            })
            .collect();
        assert!(matches!(compression_report(&base, &[too_big]), Err(Error::RankExceedsDimension { .. })));
    }

    fn layouts() -> impl Strategy<Value = GroupLayout> {
        prop::array::uniform6(1usize..7).prop_flat_map(|dims| {
            let ranks: Vec<_> = dims.iter().map(|&d| 1..=d).collect();
            (Just(dims), ranks)
                .prop_map(|(dims, r)| GroupLayout::new(dims, [r[0], r[1], r[2], r[3], r[4], r[5]]).unwrap())
        })
    }

    proptest! {
        #[test]
        fn layerwise_matches_loop_oracle(l in layouts()) {
            let mut n = 0u64;
            for _layer in 0..l.dims[4] * l.dims[5] {
                for k in 0..4 {
                    for _ in 0..l.dims[k] * l.ranks[k] {
                        n += 1;
                    }
                }
            }
            prop_assert_eq!(count_layerwise(&l), n);
        }

        #[test]
        fn grouped_matches_factor_set(l in layouts(), seed in 0u64..1000) {
            let f = TaskFactorSet::random_orthonormal("t", &l, &mut seeded(seed)).unwrap();
            prop_assert_eq!(count_grouped(&l), f.param_count() as u64);
        }

        #[test]
        fn grouping_never_costs_more(l in layouts()) {
            prop_assume!(l.dims[4] * l.dims[5] >= 2);
            prop_assert!(count_grouped(&l) <= count_layerwise(&l));
        }

        #[test]
        fn linear_below_layerwise(d in 1usize..20, units in 1usize..5, blocks in 1usize..4) {
            let l = GroupLayout::full_rank([d, d, 3, 3, blocks, units]).unwrap();
            prop_assert!(count_linear(&l).unwrap() <= count_layerwise(&l));
        }
    }
}
