//! Lookup-table construction over a candidate grid, and the two query modes
//! of the controller: select configurations for a risk budget, or report the
//! controlled risk of one configuration.
//!
//! Entries store sufficient statistics `(n_ref, r_hat)` rather than bounds,
//! so every query recomputes the bound exactly at the requested `delta`.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;

use crate::conformal::{conformal_unlearning_risk, BoundResult, ReferenceStats, RiskBudget};
use crate::error::{FrocError, Result};
use crate::risk_model::{
    aggregate_risk, build_grid_context, grid_shifts, per_sample_risks, unified_risk,
    ConfigMetrics, GridContext, RiskBreakdown, RiskWeights, Squash, TauPolicy, UnlearningConfig,
};

pub const TABLE_FORMAT_VERSION: u32 = 1;

/// Where an entry's reference statistics came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryMode {
    PerSample,
    /// Single normalized aggregate risk; an approximation of the per-sample mean.
    Aggregate,
}

impl EntryMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EntryMode::PerSample => "per-sample",
            EntryMode::Aggregate => "aggregate",
        }
    }

    pub fn parse(label: &str) -> Result<Self> {
        match label {
            "per-sample" => Ok(EntryMode::PerSample),
            "aggregate" => Ok(EntryMode::Aggregate),
            other => Err(FrocError::Validation(format!("unknown entry mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableEntry {
    pub config: UnlearningConfig,
    pub stats: ReferenceStats,
    pub breakdown: RiskBreakdown,
    pub mode: EntryMode,
}

/// Immutable per-configuration sufficient statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable {
    format_version: u32,
    weights: RiskWeights,
    tau_f_policy: String,
    entries: Vec<TableEntry>,
    build_seed: Option<u64>,
}

impl LookupTable {
    /// Assembles a table, sorting entries by config id and checking the
    /// table invariants.
    pub fn from_parts(
        format_version: u32,
        weights: RiskWeights,
        tau_f_policy: impl Into<String>,
        mut entries: Vec<TableEntry>,
        build_seed: Option<u64>,
    ) -> Result<Self> {
        if format_version != TABLE_FORMAT_VERSION {
            return Err(FrocError::Version {
                found: format_version.to_string(),
                expected: TABLE_FORMAT_VERSION.to_string(),
            });
        }
        weights.validate()?;
        let tau_f_policy = tau_f_policy.into();
        crate::risk_model::validate_identifier("tau_f policy", &tau_f_policy)?;
        if entries.is_empty() {
            return Err(FrocError::Config("lookup table has no entries".into()));
        }
        entries.sort_by(|a, b| a.config.id.cmp(&b.config.id));
        for pair in entries.windows(2) {
            if pair[0].config.id == pair[1].config.id {
                return Err(FrocError::Validation(format!(
                    "duplicate config id `{}` in table",
                    pair[0].config.id
                )));
            }
        }
        for entry in &entries {
            entry.config.validate()?;
            ReferenceStats::new(entry.stats.n_ref, entry.stats.r_hat)?;
            if entry.breakdown.config_id != entry.config.id {
                return Err(FrocError::Validation(format!(
                    "breakdown id `{}` does not match config `{}`",
                    entry.breakdown.config_id, entry.config.id
                )));
            }
        }
        Ok(Self {
            format_version,
            weights,
            tau_f_policy,
            entries,
            build_seed,
        })
    }

    pub fn format_version(&self) -> u32 {
        self.format_version
    }

    pub fn weights(&self) -> &RiskWeights {
        &self.weights
    }

    pub fn tau_f_policy(&self) -> &str {
        &self.tau_f_policy
    }

    /// Entries sorted by config id.
    pub fn entries(&self) -> &[TableEntry] {
        &self.entries
    }

    pub fn build_seed(&self) -> Option<u64> {
        self.build_seed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, config_id: &str) -> Option<&TableEntry> {
        self.entries
            .binary_search_by(|e| e.config.id.as_str().cmp(config_id))
            .ok()
            .map(|i| &self.entries[i])
    }
}

/// Knobs for [`build_table`].
#[derive(Debug, Clone, PartialEq)]
pub struct BuildSettings {
    pub w_f: f64,
    pub w_u: f64,
    pub squash: Squash,
    pub tau_policy: TauPolicy,
    /// Reference size recorded for entries without per-sample records.
    pub aggregate_n_ref: u64,
    pub build_seed: Option<u64>,
    /// Worker threads; 1 evaluates sequentially.
    pub jobs: usize,
}

impl Default for BuildSettings {
    fn default() -> Self {
        Self {
            w_f: 1.0,
            w_u: 1.0,
            squash: Squash::ExpComplement,
            tau_policy: TauPolicy::Median,
            aggregate_n_ref: 1,
            build_seed: None,
            jobs: 1,
        }
    }
}

/// Builds the lookup table for a grid and the metrics measured on it.
pub fn build_table(
    grid: &[UnlearningConfig],
    metrics: &[ConfigMetrics],
    settings: &BuildSettings,
) -> Result<LookupTable> {
    if grid.is_empty() {
        return Err(FrocError::Config("candidate grid is empty".into()));
    }
    if settings.aggregate_n_ref == 0 {
        return Err(FrocError::Config("aggregate n_ref must be at least 1".into()));
    }
    let mut seen = HashSet::new();
    for config in grid {
        config.validate()?;
        if !seen.insert(config.id.as_str()) {
            return Err(FrocError::Validation(format!(
                "duplicate config id `{}` in grid",
                config.id
            )));
        }
    }
    let mut by_id: BTreeMap<&str, &ConfigMetrics> = BTreeMap::new();
    for m in metrics {
        if !seen.contains(m.config_id.as_str()) {
            return Err(FrocError::Validation(format!(
                "metrics for `{}` have no matching grid configuration",
                m.config_id
            )));
        }
        if by_id.insert(m.config_id.as_str(), m).is_some() {
            return Err(FrocError::Validation(format!(
                "more than one metrics record for `{}`",
                m.config_id
            )));
        }
    }
    if let Some(missing) = grid.iter().find(|c| !by_id.contains_key(c.id.as_str())) {
        return Err(FrocError::Validation(format!(
            "no metrics for grid configuration `{}`",
            missing.id
        )));
    }

    let ctx = build_grid_context(metrics)?;
    let tau_f = settings.tau_policy.resolve(&grid_shifts(metrics, &ctx)?)?;
    let weights = RiskWeights::new(settings.w_f, settings.w_u, tau_f, settings.squash)?;

    let evaluate = |config: &UnlearningConfig| {
        evaluate_entry(config, by_id[config.id.as_str()], &ctx, &weights, settings.aggregate_n_ref)
    };
    let entries: Vec<TableEntry> = if settings.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(settings.jobs)
            .build()
            .map_err(|e| FrocError::Config(format!("cannot start worker pool: {e}")))?;
        pool.install(|| grid.par_iter().map(evaluate).collect::<Result<_>>())?
    } else {
        grid.iter().map(evaluate).collect::<Result<_>>()?
    };

    LookupTable::from_parts(
        TABLE_FORMAT_VERSION,
        weights,
        settings.tau_policy.describe(),
        entries,
        settings.build_seed,
    )
}

fn evaluate_entry(
    config: &UnlearningConfig,
    metrics: &ConfigMetrics,
    ctx: &GridContext,
    weights: &RiskWeights,
    aggregate_n_ref: u64,
) -> Result<TableEntry> {
    let breakdown = unified_risk(metrics, ctx, weights)?;
    let (stats, mode) = if metrics.has_per_sample() {
        let risks = per_sample_risks(metrics, ctx, weights)?;
        let r_hat = aggregate_risk(&risks)?;
        (ReferenceStats::new(risks.len() as u64, r_hat)?, EntryMode::PerSample)
    } else {
        (
            ReferenceStats::new(aggregate_n_ref, breakdown.r_norm)?,
            EntryMode::Aggregate,
        )
    };
    Ok(TableEntry {
        config: config.clone(),
        stats,
        breakdown,
        mode,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidMember {
    pub config_id: String,
    pub bound: BoundResult,
}

/// Configurations whose Bonferroni-corrected bound is at most `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidSet {
    pub alpha: f64,
    pub delta: f64,
    pub per_config_delta: f64,
    /// Ascending by `alpha_unlearn`, ties by config id.
    pub members: Vec<ValidMember>,
}

impl ValidSet {
    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, config_id: &str) -> bool {
        self.members.iter().any(|m| m.config_id == config_id)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(FrocError::Domain(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// Valid-set construction over raw `(id, stats)` pairs. The family budget
/// `delta` is split evenly across all candidates.
pub fn valid_set_from_stats<'a, I>(candidates: I, alpha: f64, delta: f64) -> Result<ValidSet>
where
    I: IntoIterator<Item = (&'a str, ReferenceStats)>,
{
    check_alpha(alpha)?;
    let family = RiskBudget::new(delta)?;
    let candidates: Vec<_> = candidates.into_iter().collect();
    let per_config = family.split(candidates.len())?;
    let mut members: Vec<ValidMember> = candidates
        .into_iter()
        .map(|(id, stats)| ValidMember {
            config_id: id.to_string(),
            bound: conformal_unlearning_risk(per_config, stats),
        })
        .filter(|m| m.bound.alpha_unlearn <= alpha)
        .collect();
    members.sort_by(|a, b| {
        a.bound
            .alpha_unlearn
            .total_cmp(&b.bound.alpha_unlearn)
            .then_with(|| a.config_id.cmp(&b.config_id))
    });
    Ok(ValidSet {
        alpha,
        delta,
        per_config_delta: per_config.delta(),
        members,
    })
}

pub fn valid_set(table: &LookupTable, alpha: f64, delta: f64) -> Result<ValidSet> {
    valid_set_from_stats(
        table.entries().iter().map(|e| (e.config.id.as_str(), e.stats)),
        alpha,
        delta,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetAnswer {
    pub valid_set: ValidSet,
    /// Member with the smallest bound; `None` when the set is empty.
    pub recommendation: Option<String>,
}

/// Configuration selection: every admissible configuration at `(alpha,
/// delta)` plus the one with the smallest controlled risk.
pub fn query_by_budget(table: &LookupTable, delta: f64, alpha: f64) -> Result<BudgetAnswer> {
    let valid_set = valid_set(table, alpha, delta)?;
    let recommendation = valid_set.members.first().map(|m| m.config_id.clone());
    Ok(BudgetAnswer {
        valid_set,
        recommendation,
    })
}

/// Risk estimation for a single configuration at the undivided `delta`.
pub fn query_by_config(table: &LookupTable, config_id: &str, delta: f64) -> Result<BoundResult> {
    let budget = RiskBudget::new(delta)?;
    match table.entry(config_id) {
        Some(entry) => Ok(conformal_unlearning_risk(budget, entry.stats)),
        None => Err(FrocError::NotFound {
            id: config_id.to_string(),
            nearest: nearest_ids(table, config_id, 3),
        }),
    }
}

fn nearest_ids(table: &LookupTable, query: &str, limit: usize) -> Vec<String> {
    let mut scored: Vec<(usize, &str)> = table
        .entries()
        .iter()
        .map(|e| (strsim::levenshtein(query, &e.config.id), e.config.id.as_str()))
        .collect();
    scored.sort();
    scored.into_iter().take(limit).map(|(_, id)| id.to_string()).collect()
}
