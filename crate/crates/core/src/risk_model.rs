//! Unified forgetting/utility risk for a single unlearning configuration.
//!
//! A configuration is scored from four evaluation metrics (forget-set loss
//! and accuracy, retain-set loss and accuracy) relative to the extrema of
//! the candidate grid:
//!
//! ```text
//! s       = ln(forget_loss) + (max_forget_acc - forget_acc)
//! r       = ln(retain_loss) - ln(min_retain_loss) + (max_retain_acc - retain_acc)
//! delta_f = softplus(tau_f - s)
//! delta_u = softplus(r)
//! r_tilde = w_f * delta_f + w_u * delta_u
//! ```
//!
//! `r_tilde` is unbounded, so it is squashed into `[0, 1]` before it is fed
//! to the binomial-tail bounds in [`crate::conformal`].

use std::fmt;

use crate::error::{FrocError, Result};

/// Losses below this value are clamped up to it before taking logarithms.
pub const LOSS_EPSILON: f64 = 1e-12;

/// Tolerance used when checking aggregate fields against per-sample means.
pub const AGGREGATE_TOLERANCE: f64 = 1e-9;

// Slack for "metrics lie inside the grid extrema" checks.
const CONTEXT_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Ga,
    GaDescent,
    GaKl,
    Other(String),
}

impl Method {
    pub fn as_str(&self) -> &str {
        match self {
            Method::Ga => "GA",
            Method::GaDescent => "GA_DESCENT",
            Method::GaKl => "GA_KL",
            Method::Other(name) => name,
        }
    }

    /// Parses a method label. Anything that is not one of the three built-in
    /// names becomes [`Method::Other`].
    pub fn parse(label: &str) -> Result<Self> {
        let label = label.trim();
        if label.is_empty() {
            return Err(FrocError::Validation("method name is empty".into()));
        }
        if label.chars().any(|c| c.is_whitespace() || c == ',' || c == '=') {
            return Err(FrocError::Validation(format!(
                "method name `{label}` contains whitespace, ',' or '='"
            )));
        }
        Ok(match label {
            "GA" => Method::Ga,
            "GA_DESCENT" => Method::GaDescent,
            "GA_KL" => Method::GaKl,
            other => Method::Other(other.to_string()),
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Checks that an identifier can be embedded in the line formats.
pub(crate) fn validate_identifier(what: &str, id: &str) -> Result<()> {
    if id.is_empty() {
        return Err(FrocError::Validation(format!("{what} is empty")));
    }
    if id.chars().any(|c| c.is_whitespace() || c == ',' || c == '=') {
        return Err(FrocError::Validation(format!(
            "{what} `{id}` contains whitespace, ',' or '='"
        )));
    }
    Ok(())
}

/// One candidate unlearning configuration in the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlearningConfig {
    pub id: String,
    pub method: Method,
    pub learning_rate: f64,
    pub ascent_steps: u32,
    /// Method-specific knobs, in insertion order.
    pub extras: Vec<(String, f64)>,
}

impl UnlearningConfig {
    pub fn new(
        id: impl Into<String>,
        method: Method,
        learning_rate: f64,
        ascent_steps: u32,
    ) -> Result<Self> {
        let config = Self {
            id: id.into(),
            method,
            learning_rate,
            ascent_steps,
            extras: Vec::new(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn with_extra(mut self, name: impl Into<String>, value: f64) -> Result<Self> {
        self.extras.push((name.into(), value));
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        validate_identifier("config id", &self.id)?;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(FrocError::Validation(format!(
                "config `{}`: learning_rate must be a positive finite number, got {}",
                self.id, self.learning_rate
            )));
        }
        if self.ascent_steps == 0 {
            return Err(FrocError::Validation(format!(
                "config `{}`: ascent_steps must be at least 1",
                self.id
            )));
        }
        for (name, value) in &self.extras {
            validate_identifier("extra name", name)?;
            if name.contains([':', ';']) {
                return Err(FrocError::Validation(format!(
                    "config `{}`: extra name `{name}` contains ':' or ';'",
                    self.id
                )));
            }
            if !value.is_finite() {
                return Err(FrocError::Validation(format!(
                    "config `{}`: extra `{name}` is not finite",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// Total ascent budget `learning_rate * ascent_steps`.
    pub fn aggressiveness(&self) -> f64 {
        self.learning_rate * f64::from(self.ascent_steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Forget,
    Retain,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Forget => "FORGET",
            Split::Retain => "RETAIN",
        }
    }

    pub fn parse(label: &str) -> Result<Self> {
        match label.trim() {
            "FORGET" => Ok(Split::Forget),
            "RETAIN" => Ok(Split::Retain),
            other => Err(FrocError::Validation(format!(
                "split must be FORGET or RETAIN, got `{other}`"
            ))),
        }
    }
}

/// Loss and correctness of one evaluated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub split: Split,
    pub loss: f64,
    pub correct: bool,
}

/// Clamps a loss into `[LOSS_EPSILON, inf)`. Returns the clamped value and
/// whether clamping happened. Negative or non-finite losses are rejected.
pub fn clamp_loss(loss: f64) -> Result<(f64, bool)> {
    if !loss.is_finite() || loss < 0.0 {
        return Err(FrocError::Domain(format!(
            "loss must be a finite non-negative number, got {loss}"
        )));
    }
    if loss < LOSS_EPSILON {
        Ok((LOSS_EPSILON, true))
    } else {
        Ok((loss, false))
    }
}

/// Evaluation metrics measured for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigMetrics {
    pub config_id: String,
    pub forget_loss: f64,
    pub forget_acc: f64,
    pub retain_loss: f64,
    pub retain_acc: f64,
    pub per_sample: Option<Vec<SampleRecord>>,
}

impl ConfigMetrics {
    pub fn new(
        config_id: impl Into<String>,
        forget_loss: f64,
        forget_acc: f64,
        retain_loss: f64,
        retain_acc: f64,
    ) -> Result<Self> {
        let metrics = Self {
            config_id: config_id.into(),
            forget_loss,
            forget_acc,
            retain_loss,
            retain_acc,
            per_sample: None,
        };
        metrics.validate()?;
        Ok(metrics)
    }

    /// Builds metrics whose aggregate fields are the per-sample means.
    pub fn from_samples(config_id: impl Into<String>, samples: Vec<SampleRecord>) -> Result<Self> {
        let config_id = config_id.into();
        let means = SampleMeans::compute(&samples).map_err(|e| match e {
            FrocError::Config(msg) => FrocError::Config(format!("config `{config_id}`: {msg}")),
            other => other,
        })?;
        let metrics = Self {
            config_id,
            forget_loss: means.forget_loss,
            forget_acc: means.forget_acc,
            retain_loss: means.retain_loss,
            retain_acc: means.retain_acc,
            per_sample: Some(samples),
        };
        metrics.validate()?;
        Ok(metrics)
    }

    pub fn validate(&self) -> Result<()> {
        validate_identifier("config id", &self.config_id)?;
        let id = &self.config_id;
        for (name, value) in [
            ("forget_acc", self.forget_acc),
            ("retain_acc", self.retain_acc),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(FrocError::Validation(format!(
                    "config `{id}`: {name} must lie in [0, 1], got {value}"
                )));
            }
        }
        for (name, value) in [
            ("forget_loss", self.forget_loss),
            ("retain_loss", self.retain_loss),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(FrocError::Validation(format!(
                    "config `{id}`: {name} must be a positive finite number, got {value}"
                )));
            }
        }
        if let Some(samples) = &self.per_sample {
            for sample in samples {
                validate_identifier("sample id", &sample.sample_id)?;
                if !(sample.loss.is_finite() && sample.loss > 0.0) {
                    return Err(FrocError::Validation(format!(
                        "config `{id}`, sample `{}`: loss must be a positive finite number, got {}",
                        sample.sample_id, sample.loss
                    )));
                }
            }
            let means = SampleMeans::compute(samples)?;
            for (name, aggregate, mean) in [
                ("forget_loss", self.forget_loss, means.forget_loss),
                ("forget_acc", self.forget_acc, means.forget_acc),
                ("retain_loss", self.retain_loss, means.retain_loss),
                ("retain_acc", self.retain_acc, means.retain_acc),
            ] {
                if (aggregate - mean).abs() > AGGREGATE_TOLERANCE {
                    return Err(FrocError::Validation(format!(
                        "config `{id}`: aggregate {name} = {aggregate} differs from per-sample mean {mean}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn has_per_sample(&self) -> bool {
        self.per_sample.is_some()
    }
}

/// Per-split means of a sample list.
#[derive(Debug, Clone, Copy)]
struct SampleMeans {
    forget_loss: f64,
    forget_acc: f64,
    retain_loss: f64,
    retain_acc: f64,
}

impl SampleMeans {
    fn compute(samples: &[SampleRecord]) -> Result<Self> {
        let mut sums = [[0.0f64; 2]; 2];
        let mut counts = [0usize; 2];
        for sample in samples {
            let slot = match sample.split {
                Split::Forget => 0,
                Split::Retain => 1,
            };
            counts[slot] += 1;
            sums[slot][0] += sample.loss;
            sums[slot][1] += if sample.correct { 1.0 } else { 0.0 };
        }
        if counts.contains(&0) {
            return Err(FrocError::Config(
                "per-sample records need at least one FORGET and one RETAIN sample".into(),
            ));
        }
        let forget_n = counts[0] as f64;
        let retain_n = counts[1] as f64;
        Ok(Self {
            forget_loss: sums[0][0] / forget_n,
            forget_acc: sums[0][1] / forget_n,
            retain_loss: sums[1][0] / retain_n,
            retain_acc: sums[1][1] / retain_n,
        })
    }
}

/// Extrema of the candidate grid that the risk terms are measured against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridContext {
    pub max_forget_acc: f64,
    pub min_retain_loss: f64,
    pub max_retain_acc: f64,
    pub grid_size: usize,
}

/// Scans the grid once for the extrema. Each configuration contributes to
/// the extrema it is later compared against, so singleton grids have zero
/// gaps.
pub fn build_grid_context(all_metrics: &[ConfigMetrics]) -> Result<GridContext> {
    if all_metrics.is_empty() {
        return Err(FrocError::Config("metrics list is empty".into()));
    }
    let mut seen = std::collections::HashSet::with_capacity(all_metrics.len());
    let mut ctx = GridContext {
        max_forget_acc: f64::NEG_INFINITY,
        min_retain_loss: f64::INFINITY,
        max_retain_acc: f64::NEG_INFINITY,
        grid_size: all_metrics.len(),
    };
    for metrics in all_metrics {
        metrics.validate()?;
        if !seen.insert(metrics.config_id.as_str()) {
            return Err(FrocError::Validation(format!(
                "duplicate config id `{}`",
                metrics.config_id
            )));
        }
        let (retain_loss, _) = clamp_loss(metrics.retain_loss)?;
        ctx.max_forget_acc = ctx.max_forget_acc.max(metrics.forget_acc);
        ctx.min_retain_loss = ctx.min_retain_loss.min(retain_loss);
        ctx.max_retain_acc = ctx.max_retain_acc.max(metrics.retain_acc);
    }
    Ok(ctx)
}

/// Map from unbounded `r_tilde` into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Squash {
    /// `1 - exp(-r_tilde)`
    ExpComplement,
    /// `min(r_tilde, 1)`
    Clip,
}

impl Squash {
    pub fn as_str(self) -> &'static str {
        match self {
            Squash::ExpComplement => "exp",
            Squash::Clip => "clip",
        }
    }

    pub fn parse(label: &str) -> Result<Self> {
        match label.trim() {
            "exp" => Ok(Squash::ExpComplement),
            "clip" => Ok(Squash::Clip),
            other => Err(FrocError::Usage(format!(
                "squash must be `exp` or `clip`, got `{other}`"
            ))),
        }
    }

    pub fn apply(self, r_tilde: f64) -> f64 {
        match self {
            Squash::ExpComplement => (-(-r_tilde).exp_m1()).clamp(0.0, 1.0),
            Squash::Clip => r_tilde.clamp(0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskWeights {
    pub w_f: f64,
    pub w_u: f64,
    /// Forgetting target the shift score is compared against.
    pub tau_f: f64,
    pub squash: Squash,
}

impl RiskWeights {
    pub fn new(w_f: f64, w_u: f64, tau_f: f64, squash: Squash) -> Result<Self> {
        let weights = Self {
            w_f,
            w_u,
            tau_f,
            squash,
        };
        weights.validate()?;
        Ok(weights)
    }

    /// `w_f = w_u = 1` with exponential squashing.
    pub fn unit(tau_f: f64) -> Self {
        Self {
            w_f: 1.0,
            w_u: 1.0,
            tau_f,
            squash: Squash::ExpComplement,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_f", self.w_f), ("w_u", self.w_u)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(FrocError::Validation(format!(
                    "{name} must be finite and non-negative, got {w}"
                )));
            }
        }
        if self.w_f == 0.0 && self.w_u == 0.0 {
            return Err(FrocError::Validation(
                "w_f and w_u cannot both be zero".into(),
            ));
        }
        if !self.tau_f.is_finite() {
            return Err(FrocError::Validation(format!(
                "tau_f must be finite, got {}",
                self.tau_f
            )));
        }
        Ok(())
    }
}

/// How the forgetting target `tau_f` is chosen for a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauPolicy {
    Fixed(f64),
    /// Median of the aggregate shift scores over the grid.
    Median,
}

impl TauPolicy {
    pub fn parse(label: &str) -> Result<Self> {
        let label = label.trim();
        if label == "median" {
            return Ok(TauPolicy::Median);
        }
        match label.parse::<f64>() {
            Ok(value) if value.is_finite() => Ok(TauPolicy::Fixed(value)),
            _ => Err(FrocError::Usage(format!(
                "tau-f must be a finite number or `median`, got `{label}`"
            ))),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            TauPolicy::Fixed(_) => "fixed".to_string(),
            TauPolicy::Median => "median".to_string(),
        }
    }

    /// Resolves the target for a grid of shift scores.
    pub fn resolve(&self, shifts: &[f64]) -> Result<f64> {
        match *self {
            TauPolicy::Fixed(value) => Ok(value),
            TauPolicy::Median => median(shifts),
        }
    }
}

fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(FrocError::Config("median of an empty list".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Ok(if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    })
}

/// All intermediate risk quantities for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskBreakdown {
    pub config_id: String,
    pub s: f64,
    pub r: f64,
    pub delta_f: f64,
    pub delta_u: f64,
    pub r_tilde: f64,
    pub r_norm: f64,
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> Result<f64> {
    if !z.is_finite() {
        return Err(FrocError::Domain(format!("softplus of non-finite value {z}")));
    }
    Ok(softplus_unchecked(z))
}

fn softplus_unchecked(z: f64) -> f64 {
    // max(z, 0) + ln(1 + e^{-|z|}) is exact in both tails.
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn shift_terms(forget_loss: f64, forget_acc: f64, max_forget_acc: f64) -> Result<f64> {
    let (loss, _) = clamp_loss(forget_loss)?;
    Ok(loss.ln() + (max_forget_acc - forget_acc))
}

fn distortion_terms(
    retain_loss: f64,
    retain_acc: f64,
    min_retain_loss: f64,
    max_retain_acc: f64,
) -> Result<f64> {
    let (loss, _) = clamp_loss(retain_loss)?;
    let (min_loss, _) = clamp_loss(min_retain_loss)?;
    Ok((loss.ln() - min_loss.ln()) + (max_retain_acc - retain_acc))
}

fn check_in_context(m: &ConfigMetrics, ctx: &GridContext) -> Result<()> {
    let (retain_loss, _) = clamp_loss(m.retain_loss)?;
    if m.forget_acc > ctx.max_forget_acc + CONTEXT_SLACK
        || m.retain_acc > ctx.max_retain_acc + CONTEXT_SLACK
        || retain_loss < ctx.min_retain_loss * (1.0 - CONTEXT_SLACK)
    {
        return Err(FrocError::Validation(format!(
            "config `{}` lies outside the grid context extrema; was the context built from another grid?",
            m.config_id
        )));
    }
    Ok(())
}

/// Forgetting-shift score; larger means stronger forgetting.
pub fn forget_shift(m: &ConfigMetrics, ctx: &GridContext) -> Result<f64> {
    if !(m.forget_loss.is_finite() && m.forget_loss > 0.0) {
        return Err(FrocError::Domain(format!(
            "config `{}`: forget_loss must be positive, got {}",
            m.config_id, m.forget_loss
        )));
    }
    check_in_context(m, ctx)?;
    shift_terms(m.forget_loss, m.forget_acc, ctx.max_forget_acc)
}

/// Retain-set distortion relative to the best loss and accuracy in the grid.
/// Always non-negative; zero only for a configuration attaining both extrema.
pub fn retain_distortion(m: &ConfigMetrics, ctx: &GridContext) -> Result<f64> {
    if !(m.retain_loss.is_finite() && m.retain_loss > 0.0) || !(ctx.min_retain_loss > 0.0) {
        return Err(FrocError::Domain(format!(
            "config `{}`: retain losses must be positive",
            m.config_id
        )));
    }
    check_in_context(m, ctx)?;
    let r = distortion_terms(
        m.retain_loss,
        m.retain_acc,
        ctx.min_retain_loss,
        ctx.max_retain_acc,
    )?;
    // Rounding in ln() differences can leave a -1e-17 residue at the optimum.
    Ok(r.max(0.0))
}

fn combine(config_id: &str, s: f64, r: f64, w: &RiskWeights) -> Result<RiskBreakdown> {
    let delta_f = softplus(w.tau_f - s)?;
    let delta_u = softplus(r)?;
    let r_tilde = w.w_f * delta_f + w.w_u * delta_u;
    Ok(RiskBreakdown {
        config_id: config_id.to_string(),
        s,
        r,
        delta_f,
        delta_u,
        r_tilde,
        r_norm: w.squash.apply(r_tilde),
    })
}

pub fn unified_risk(m: &ConfigMetrics, ctx: &GridContext, w: &RiskWeights) -> Result<RiskBreakdown> {
    w.validate()?;
    let s = forget_shift(m, ctx)?;
    let r = retain_distortion(m, ctx)?;
    combine(&m.config_id, s, r, w)
}

/// Arithmetic mean of risks that each lie in `[0, 1]`.
pub fn aggregate_risk(risks: &[f64]) -> Result<f64> {
    if risks.is_empty() {
        return Err(FrocError::Config("cannot aggregate an empty risk list".into()));
    }
    if let Some(bad) = risks.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(FrocError::Domain(format!("risk {bad} lies outside [0, 1]")));
    }
    // Shifting by the first value keeps the mean of identical risks exact.
    let pivot = risks[0];
    let offset = risks.iter().map(|x| x - pivot).sum::<f64>() / risks.len() as f64;
    Ok((pivot + offset).clamp(0.0, 1.0))
}

/// Normalized risk of every per-sample record of `m`.
///
/// A forget sample replaces the aggregate forget loss and accuracy with its
/// own loss and 0/1 correctness inside the shift score; its utility term
/// comes from the aggregate retain metrics. Retain samples are handled
/// symmetrically. Per-sample distortion can be negative (a sample may beat
/// the grid's best aggregate), which softplus absorbs.
pub fn per_sample_risks(m: &ConfigMetrics, ctx: &GridContext, w: &RiskWeights) -> Result<Vec<f64>> {
    w.validate()?;
    let samples = m.per_sample.as_deref().ok_or_else(|| {
        FrocError::Config(format!("config `{}` has no per-sample records", m.config_id))
    })?;
    m.validate()?;
    let s_agg = forget_shift(m, ctx)?;
    let r_agg = retain_distortion(m, ctx)?;
    let delta_f_agg = softplus(w.tau_f - s_agg)?;
    let delta_u_agg = softplus(r_agg)?;

    samples
        .iter()
        .map(|sample| {
            let correct = if sample.correct { 1.0 } else { 0.0 };
            let r_tilde = match sample.split {
                Split::Forget => {
                    let s = shift_terms(sample.loss, correct, ctx.max_forget_acc)?;
                    w.w_f * softplus(w.tau_f - s)? + w.w_u * delta_u_agg
                }
                Split::Retain => {
                    let r = distortion_terms(
                        sample.loss,
                        correct,
                        ctx.min_retain_loss,
                        ctx.max_retain_acc,
                    )?;
                    w.w_f * delta_f_agg + w.w_u * softplus(r)?
                }
            };
            Ok(w.squash.apply(r_tilde))
        })
        .collect()
}

/// Aggregate shift scores for a whole grid, used to resolve [`TauPolicy::Median`].
pub fn grid_shifts(all_metrics: &[ConfigMetrics], ctx: &GridContext) -> Result<Vec<f64>> {
    all_metrics.iter().map(|m| forget_shift(m, ctx)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn metrics(id: &str, fl: f64, fa: f64, rl: f64, ra: f64) -> ConfigMetrics {
        ConfigMetrics::new(id, fl, fa, rl, ra).unwrap()
    }

    fn ctx(max_fa: f64, min_rl: f64, max_ra: f64) -> GridContext {
        GridContext {
            max_forget_acc: max_fa,
            min_retain_loss: min_rl,
            max_retain_acc: max_ra,
            grid_size: 1,
        }
    }

    #[test]
    fn softplus_values() {
        assert_abs_diff_eq!(softplus(0.0).unwrap(), std::f64::consts::LN_2, epsilon = 1e-16);
        let tail = softplus(-50.0).unwrap();
        assert!(tail > 0.0);
        assert_abs_diff_eq!(tail, 1.928749847963918e-22, epsilon = 1e-35);
        // mpmath: log(1 + e) = 1.3132616875182228...
        assert_abs_diff_eq!(softplus(1.0).unwrap(), 1.3132616875182228, epsilon = 1e-15);
        assert_eq!(softplus(800.0).unwrap(), 800.0);
        assert!(matches!(softplus(f64::NAN), Err(FrocError::Domain(_))));
        assert!(matches!(softplus(f64::INFINITY), Err(FrocError::Domain(_))));
    }

    #[test]
    fn softplus_is_strictly_increasing_across_branches() {
        let mut prev = softplus(-40.0).unwrap();
        let mut z = -40.0;
        while z < 40.0 {
            z += 0.25;
            let next = softplus(z).unwrap();
            assert!(next > prev, "softplus not increasing at {z}");
            prev = next;
        }
    }

    #[test]
    fn grid_context_extrema() {
        let single = build_grid_context(&[metrics("a", 1.0, 0.4, 2.0, 0.9)]).unwrap();
        assert_eq!(single, ctx(0.4, 2.0, 0.9));

        let pair = build_grid_context(&[
            metrics("a", 1.0, 0.4, 2.0, 0.9),
            metrics("b", 1.0, 0.6, 2.5, 0.8),
        ])
        .unwrap();
        assert_eq!(pair.max_forget_acc, 0.6);
        assert_eq!(pair.grid_size, 2);

        assert!(matches!(build_grid_context(&[]), Err(FrocError::Config(_))));
        let dup = build_grid_context(&[
            metrics("a", 1.0, 0.4, 2.0, 0.9),
            metrics("a", 1.0, 0.6, 2.5, 0.8),
        ]);
        assert!(matches!(dup, Err(FrocError::Validation(_))));
    }

    #[test]
    fn forget_shift_values() {
        let c = ctx(0.7, 1.0, 1.0);
        let at_max = metrics("a", std::f64::consts::E, 0.7, 1.0, 1.0);
        assert_abs_diff_eq!(forget_shift(&at_max, &c).unwrap(), 1.0, epsilon = 1e-15);
        let unit = metrics("a", 1.0, 0.7, 1.0, 1.0);
        assert_eq!(forget_shift(&unit, &c).unwrap(), 0.0);
        let m = metrics("a", 2.5, 0.3, 1.0, 1.0);
        // mpmath: ln 2.5 + 0.4
        assert_abs_diff_eq!(forget_shift(&m, &c).unwrap(), 1.3162907318741551, epsilon = 1e-14);
    }

    #[test]
    fn forget_shift_rejects_foreign_context() {
        let m = metrics("a", 2.5, 0.9, 1.0, 1.0);
        assert!(matches!(
            forget_shift(&m, &ctx(0.7, 1.0, 1.0)),
            Err(FrocError::Validation(_))
        ));
    }

    #[test]
    fn retain_distortion_values() {
        let c = ctx(1.0, 2.0, 0.92);
        let best = metrics("a", 1.0, 1.0, 2.0, 0.92);
        assert_eq!(retain_distortion(&best, &c).unwrap(), 0.0);
        let doubled = metrics("a", 1.0, 1.0, 4.0, 0.92);
        assert_abs_diff_eq!(
            retain_distortion(&doubled, &c).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        let m = metrics("a", 1.0, 1.0, 3.0, 0.85);
        // mpmath: ln 1.5 + 0.07
        assert_abs_diff_eq!(retain_distortion(&m, &c).unwrap(), 0.4754651081081644, epsilon = 1e-14);
    }

    #[test]
    fn unified_risk_neutral_point() {
        let c = ctx(0.5, 2.0, 0.9);
        let m = metrics("a", 1.0, 0.5, 2.0, 0.9);
        // s = 0, r = 0
        let b = unified_risk(&m, &c, &RiskWeights::unit(0.0)).unwrap();
        assert_abs_diff_eq!(b.r_tilde, 2.0 * std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(b.r_norm, 0.75, epsilon = 1e-15);

        let w = RiskWeights::new(0.0, 1.0, 0.0, Squash::ExpComplement).unwrap();
        let b = unified_risk(&m, &c, &w).unwrap();
        assert_abs_diff_eq!(b.r_tilde, std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn unified_risk_composes_component_oracles() {
        let c = ctx(0.7, 2.0, 0.92);
        let m = metrics("a", 2.5, 0.3, 3.0, 0.85);
        let b = unified_risk(&m, &c, &RiskWeights::unit(1.0)).unwrap();
        // mpmath: softplus(-0.31629073187415507) + softplus(0.47546510810816438)
        assert_abs_diff_eq!(b.r_tilde, 1.5063308967189132, epsilon = 1e-14);
        assert_abs_diff_eq!(b.r_norm, 0.7782779917150844, epsilon = 1e-14);

        let clip = RiskWeights::new(1.0, 1.0, 1.0, Squash::Clip).unwrap();
        assert_eq!(unified_risk(&m, &c, &clip).unwrap().r_norm, 1.0);
    }

    #[test]
    fn weights_validation() {
        assert!(RiskWeights::new(0.0, 0.0, 0.0, Squash::Clip).is_err());
        assert!(RiskWeights::new(-1.0, 1.0, 0.0, Squash::Clip).is_err());
        assert!(RiskWeights::new(1.0, 1.0, f64::NAN, Squash::Clip).is_err());
    }

    fn kahan_mean(values: &[f64]) -> f64 {
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for &v in values {
            let y = v - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        sum / values.len() as f64
    }

    #[test]
    fn aggregate_risk_cases() {
        assert_eq!(aggregate_risk(&[0.2]).unwrap(), 0.2);
        assert_eq!(aggregate_risk(&[0.0, 1.0]).unwrap(), 0.5);
        assert!(matches!(aggregate_risk(&[]), Err(FrocError::Config(_))));
        assert!(matches!(aggregate_risk(&[0.5, 1.5]), Err(FrocError::Domain(_))));

        let mut rng = crate::simulator::SplitMix64::new(7);
        let values: Vec<f64> = (0..100).map(|_| rng.next_f64()).collect();
        assert_abs_diff_eq!(aggregate_risk(&values).unwrap(), kahan_mean(&values), epsilon = 1e-12);
    }

    fn sample(id: &str, split: Split, loss: f64, correct: bool) -> SampleRecord {
        SampleRecord {
            sample_id: id.into(),
            split,
            loss,
            correct,
        }
    }

    #[test]
    fn per_sample_substitution_identity() {
        // Aggregate accuracies of exactly 1 so a single sample can match them.
        let samples = vec![
            sample("f0", Split::Forget, 2.0, true),
            sample("r0", Split::Retain, 1.5, true),
        ];
        let m = ConfigMetrics::from_samples("a", samples).unwrap();
        let c = build_grid_context(std::slice::from_ref(&m)).unwrap();
        let w = RiskWeights::unit(0.3);
        let agg = unified_risk(&m, &c, &w).unwrap();
        for risk in per_sample_risks(&m, &c, &w).unwrap() {
            assert_abs_diff_eq!(risk, agg.r_norm, epsilon = 1e-15);
        }
    }

    #[test]
    fn per_sample_identical_samples_share_risk() {
        let samples: Vec<_> = (0..6)
            .map(|i| {
                let split = if i % 2 == 0 { Split::Forget } else { Split::Retain };
                sample(&format!("s{i}"), split, 1.7, false)
            })
            .collect();
        let m = ConfigMetrics::from_samples("a", samples).unwrap();
        let c = build_grid_context(std::slice::from_ref(&m)).unwrap();
        let risks = per_sample_risks(&m, &c, &RiskWeights::unit(0.0)).unwrap();
        let forget: Vec<_> = risks.iter().step_by(2).collect();
        let retain: Vec<_> = risks.iter().skip(1).step_by(2).collect();
        assert!(forget.windows(2).all(|w| w[0] == w[1]));
        assert!(retain.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn per_sample_matches_scripted_recomputation() {
        let raw = [
            (Split::Forget, 3.2, false),
            (Split::Forget, 2.1, true),
            (Split::Forget, 4.0, false),
            (Split::Forget, 1.2, true),
            (Split::Forget, 2.9, false),
            (Split::Retain, 1.1, true),
            (Split::Retain, 0.9, true),
            (Split::Retain, 1.4, false),
            (Split::Retain, 1.0, true),
            (Split::Retain, 1.3, true),
        ];
        let samples: Vec<_> = raw
            .iter()
            .enumerate()
            .map(|(i, &(split, loss, c))| sample(&format!("x{i}"), split, loss, c))
            .collect();
        let m = ConfigMetrics::from_samples("cfg", samples).unwrap();
        // A second configuration with better retain metrics so gaps are non-zero.
        let other = ConfigMetrics::new("best", 1.0, 0.9, 0.8, 0.95).unwrap();
        let grid = vec![m.clone(), other];
        let c = build_grid_context(&grid).unwrap();
        let w = RiskWeights::new(1.0, 2.0, 1.1, Squash::ExpComplement).unwrap();
        let got = per_sample_risks(&m, &c, &w).unwrap();

        // Scripted recomputation straight from the formulas.
        let sp = |z: f64| (1.0 + z.exp()).ln();
        let fl = (3.2 + 2.1 + 4.0 + 1.2 + 2.9) / 5.0;
        let fa = 2.0 / 5.0;
        let rl = (1.1 + 0.9 + 1.4 + 1.0 + 1.3) / 5.0;
        let ra = 4.0 / 5.0;
        let max_fa = 0.9_f64.max(fa);
        let min_rl = 0.8_f64.min(rl);
        let max_ra = 0.95_f64.max(ra);
        let s_agg = f64::ln(fl) + (max_fa - fa);
        let r_agg = (f64::ln(rl) - f64::ln(min_rl)) + (max_ra - ra);
        for (i, &(split, loss, correct)) in raw.iter().enumerate() {
            let cv = if correct { 1.0 } else { 0.0 };
            let r_tilde = match split {
                Split::Forget => {
                    let s = f64::ln(loss) + (max_fa - cv);
                    sp(1.1 - s) + 2.0 * sp(r_agg)
                }
                Split::Retain => {
                    let r = (f64::ln(loss) - f64::ln(min_rl)) + (max_ra - cv);
                    sp(1.1 - s_agg) + 2.0 * sp(r)
                }
            };
            let expected = 1.0 - (-r_tilde).exp();
            assert_abs_diff_eq!(got[i], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn per_sample_requires_records_and_matching_context() {
        let m = metrics("a", 1.0, 0.5, 2.0, 0.9);
        let c = build_grid_context(std::slice::from_ref(&m)).unwrap();
        assert!(matches!(
            per_sample_risks(&m, &c, &RiskWeights::unit(0.0)),
            Err(FrocError::Config(_))
        ));
        let samples = vec![
            sample("f0", Split::Forget, 2.0, true),
            sample("r0", Split::Retain, 1.0, true),
        ];
        let with_samples = ConfigMetrics::from_samples("b", samples).unwrap();
        // Context from another grid: retain_acc 1.0 exceeds its max 0.9.
        assert!(matches!(
            per_sample_risks(&with_samples, &c, &RiskWeights::unit(0.0)),
            Err(FrocError::Validation(_))
        ));
    }

    #[test]
    fn metrics_validation() {
        assert!(ConfigMetrics::new("a", 1.0, 1.2, 1.0, 0.5).is_err());
        assert!(ConfigMetrics::new("a", 0.0, 0.2, 1.0, 0.5).is_err());
        assert!(ConfigMetrics::new("", 1.0, 0.2, 1.0, 0.5).is_err());
        let mut m = ConfigMetrics::from_samples(
            "a",
            vec![
                sample("f0", Split::Forget, 2.0, true),
                sample("r0", Split::Retain, 1.0, true),
            ],
        )
        .unwrap();
        m.forget_loss = 2.1;
        assert!(matches!(m.validate(), Err(FrocError::Validation(_))));
    }

    #[test]
    fn loss_clamping() {
        assert_eq!(clamp_loss(0.0).unwrap(), (LOSS_EPSILON, true));
        assert_eq!(clamp_loss(0.5).unwrap(), (0.5, false));
        assert!(clamp_loss(-1.0).is_err());
    }

    #[test]
    fn tau_policy_median() {
        assert_eq!(TauPolicy::Median.resolve(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(TauPolicy::Median.resolve(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
        assert_eq!(TauPolicy::Fixed(0.7).resolve(&[]).unwrap(), 0.7);
        assert_eq!(TauPolicy::parse("median").unwrap(), TauPolicy::Median);
        assert_eq!(TauPolicy::parse("1.5").unwrap(), TauPolicy::Fixed(1.5));
        assert!(TauPolicy::parse("soon").is_err());
    }

    proptest! {
        #[test]
        fn r_tilde_is_linear_in_weights(
            s in -5.0f64..5.0, r in 0.0f64..5.0, tau in -3.0f64..3.0,
            wf in 0.0f64..4.0, wu in 0.01f64..4.0,
        ) {
            let w = RiskWeights::new(wf, wu, tau, Squash::ExpComplement).unwrap();
            let b = combine("x", s, r, &w).unwrap();
            prop_assert!(b.delta_f > 0.0 && b.delta_u > 0.0);
            prop_assert!((b.r_tilde - (wf * b.delta_f + wu * b.delta_u)).abs() <= 1e-12 * b.r_tilde.max(1.0));
            prop_assert!((0.0..=1.0).contains(&b.r_norm));
        }

        #[test]
        fn r_tilde_direction(s in -5.0f64..5.0, r in 0.0f64..5.0, step in 0.01f64..1.0) {
            let w = RiskWeights::unit(0.5);
            let base = combine("x", s, r, &w).unwrap().r_tilde;
            prop_assert!(combine("x", s + step, r, &w).unwrap().r_tilde < base);
            prop_assert!(combine("x", s, r + step, &w).unwrap().r_tilde > base);
        }

        #[test]
        fn aggregate_of_copies(x in 0.0f64..=1.0, n in 1usize..200) {
            let copies = vec![x; n];
            prop_assert_eq!(aggregate_risk(&copies).unwrap(), x);
        }
    }
}
