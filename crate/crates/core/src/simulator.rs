//! Synthetic unlearning runs and Monte Carlo validation of the bounds.
//!
//! Every configuration is driven by an effective strength
//! `g = method_factor * ascent_steps * learning_rate / REFERENCE_LEARNING_RATE`.
//! Forget and retain losses grow log-linearly in `g`, accuracies decay
//! exponentially, and retain degradation outpaces the gain in forgetting so
//! the unified risk rises with aggressiveness.
//!
//! All randomness comes from [`SplitMix64`]. Each configuration and each
//! Monte Carlo trial gets its own stream derived from `(seed, key)`, so
//! results do not depend on evaluation order or thread count.

use rayon::prelude::*;

use crate::conformal::{conformal_unlearning_risk, BoundResult, ReferenceStats, RiskBudget};
use crate::controller::valid_set_from_stats;
use crate::error::{FrocError, Result};
use crate::risk_model::{
    ConfigMetrics, Method, SampleRecord, Split, UnlearningConfig, LOSS_EPSILON,
};

/// Learning rate at which `g` equals the number of ascent steps.
pub const REFERENCE_LEARNING_RATE: f64 = 0.00002;
pub const DEFAULT_SAMPLES_PER_SPLIT: usize = 6000;
pub const DEFAULT_ASCENT_STEPS: [u32; 4] = [1, 2, 4, 8];

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_1: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_2: u64 = 0x94D0_49BB_1331_11EB;

/// SplitMix64 generator (Steele, Lea and Flood). The state advances by the
/// golden-ratio increment and each output is the standard two-multiply mix.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

/// SplitMix64 output function.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MIX_1);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_2);
    z ^ (z >> 31)
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Independent stream for `key` under `seed`.
    pub fn for_stream(seed: u64, key: u64) -> Self {
        Self::new(mix64(seed ^ mix64(key.wrapping_add(GOLDEN_GAMMA))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller, one variate per call.
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Gamma(shape, 1) by Marsaglia and Tsang.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        if shape < 1.0 {
            let boost = self.next_f64().max(f64::MIN_POSITIVE).powf(1.0 / shape);
            return self.gamma(shape + 1.0) * boost;
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.standard_normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.next_f64();
            if u < 1.0 - 0.0331 * x.powi(4) || u.max(f64::MIN_POSITIVE).ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return d * v;
            }
        }
    }

    pub fn beta(&mut self, a: f64, b: f64) -> f64 {
        let x = self.gamma(a);
        let y = self.gamma(b);
        if x + y == 0.0 {
            0.5
        } else {
            x / (x + y)
        }
    }
}

/// FNV-1a, used to key per-configuration streams by id.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// `base * exp(sign * rate * g)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Curve {
    pub base: f64,
    pub rate: f64,
}

impl Curve {
    pub const fn new(base: f64, rate: f64) -> Self {
        Self { base, rate }
    }

    fn growth(&self, g: f64) -> f64 {
        (self.base * (self.rate * g).exp()).max(LOSS_EPSILON)
    }

    fn decay(&self, g: f64) -> f64 {
        (self.base * (-self.rate * g).exp()).clamp(0.0, 1.0)
    }
}

/// Response curves for one unlearning method.
#[derive(Debug, Clone, PartialEq)]
pub struct SimProfile {
    pub method: Method,
    /// Scales `g` for this method.
    pub strength: f64,
    pub forget_loss: Curve,
    pub forget_acc: Curve,
    pub retain_loss: Curve,
    pub retain_acc: Curve,
    /// Log-normal spread of per-sample losses.
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Simulated model families; each ranks the methods differently.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelPreset {
    /// GA_DESCENT gentlest, GA harshest.
    Alpha,
    /// GA_KL gentlest by a wide margin.
    Beta,
    /// Like `Alpha` with overall milder updates.
    Gamma,
}

impl ModelPreset {
    pub const ALL: [ModelPreset; 3] = [ModelPreset::Alpha, ModelPreset::Beta, ModelPreset::Gamma];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelPreset::Alpha => "alpha",
            ModelPreset::Beta => "beta",
            ModelPreset::Gamma => "gamma",
        }
    }

    pub fn parse(label: &str) -> Result<Self> {
        match label {
            "alpha" => Ok(ModelPreset::Alpha),
            "beta" => Ok(ModelPreset::Beta),
            "gamma" => Ok(ModelPreset::Gamma),
            other => Err(FrocError::Usage(format!(
                "unknown model preset `{other}` (expected alpha, beta or gamma)"
            ))),
        }
    }

    fn strength(self, method: &Method) -> f64 {
        match (self, method) {
            (ModelPreset::Alpha, Method::Ga) => 1.0,
            (ModelPreset::Alpha, Method::GaKl) => 0.7,
            (ModelPreset::Alpha, Method::GaDescent) => 0.45,
            (ModelPreset::Beta, Method::Ga) => 1.0,
            (ModelPreset::Beta, Method::GaDescent) => 0.8,
            (ModelPreset::Beta, Method::GaKl) => 0.4,
            (ModelPreset::Gamma, Method::Ga) => 0.9,
            (ModelPreset::Gamma, Method::GaKl) => 0.65,
            (ModelPreset::Gamma, Method::GaDescent) => 0.35,
            (_, Method::Other(_)) => 1.0,
        }
    }
}

impl SimProfile {
    pub fn preset(method: Method, model: ModelPreset) -> Self {
        Self {
            strength: model.strength(&method),
            method,
            forget_loss: Curve::new(2.0, 0.02),
            forget_acc: Curve::new(0.6, 0.2),
            retain_loss: Curve::new(1.5, 0.3),
            retain_acc: Curve::new(0.7, 0.06),
            noise_sigma: 0.25,
            seed: 0,
        }
    }

    /// Profiles for GA, GA_DESCENT and GA_KL under one model preset.
    pub fn defaults(model: ModelPreset) -> Vec<Self> {
        [Method::Ga, Method::GaDescent, Method::GaKl]
            .into_iter()
            .map(|m| Self::preset(m, model))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let finite_non_negative = |v: f64| v.is_finite() && v >= 0.0;
        let ok = self.strength.is_finite()
            && self.strength > 0.0
            && self.forget_loss.base > 0.0
            && self.retain_loss.base > 0.0
            && (0.0..=1.0).contains(&self.forget_acc.base)
            && (0.0..=1.0).contains(&self.retain_acc.base)
            && [
                self.forget_loss.rate,
                self.forget_acc.rate,
                self.retain_loss.rate,
                self.retain_acc.rate,
                self.noise_sigma,
            ]
            .into_iter()
            .all(finite_non_negative);
        if ok {
            Ok(())
        } else {
            Err(FrocError::Config(format!(
                "invalid simulation profile for method {}",
                self.method
            )))
        }
    }

    pub fn effective_strength(&self, config: &UnlearningConfig) -> f64 {
        self.strength * f64::from(config.ascent_steps) * config.learning_rate / REFERENCE_LEARNING_RATE
    }

    /// Noise-free curve values `(forget_loss, forget_acc, retain_loss, retain_acc)`.
    pub fn curve_values(&self, config: &UnlearningConfig) -> (f64, f64, f64, f64) {
        let g = self.effective_strength(config);
        (
            self.forget_loss.growth(g),
            self.forget_acc.decay(g),
            self.retain_loss.growth(g),
            self.retain_acc.decay(g),
        )
    }
}

/// Three methods times `DEFAULT_ASCENT_STEPS` at the reference learning rate.
pub fn default_grid() -> Vec<UnlearningConfig> {
    let mut grid = Vec::new();
    for method in [Method::Ga, Method::GaDescent, Method::GaKl] {
        for steps in DEFAULT_ASCENT_STEPS {
            let id = format!("{}-s{steps}", method.as_str().to_ascii_lowercase());
            grid.push(
                UnlearningConfig::new(id, method.clone(), REFERENCE_LEARNING_RATE, steps)
                    .expect("default grid entries are valid"),
            );
        }
    }
    grid
}

/// Simulates per-sample evaluations for every grid configuration.
pub fn generate_metrics(
    profiles: &[SimProfile],
    grid: &[UnlearningConfig],
    n_forget: usize,
    n_retain: usize,
    seed: u64,
) -> Result<Vec<ConfigMetrics>> {
    if n_forget == 0 || n_retain == 0 {
        return Err(FrocError::Config("need at least one forget and one retain sample".into()));
    }
    for profile in profiles {
        profile.validate()?;
    }
    grid.iter()
        .map(|config| {
            let profile = profiles
                .iter()
                .find(|p| p.method == config.method)
                .ok_or_else(|| {
                    FrocError::Config(format!(
                        "no simulation profile for method {} (config `{}`)",
                        config.method, config.id
                    ))
                })?;
            simulate_config(profile, config, n_forget, n_retain, seed)
        })
        .collect()
}

fn simulate_config(
    profile: &SimProfile,
    config: &UnlearningConfig,
    n_forget: usize,
    n_retain: usize,
    seed: u64,
) -> Result<ConfigMetrics> {
    let (forget_loss, forget_acc, retain_loss, retain_acc) = profile.curve_values(config);
    let mut rng = SplitMix64::for_stream(seed ^ mix64(profile.seed), fnv1a(config.id.as_bytes()));
    let sigma = profile.noise_sigma;
    let mut samples = Vec::with_capacity(n_forget + n_retain);
    for (split, count, loss, acc, prefix) in [
        (Split::Forget, n_forget, forget_loss, forget_acc, 'f'),
        (Split::Retain, n_retain, retain_loss, retain_acc, 'r'),
    ] {
        for i in 0..count {
            let sample_loss = if sigma == 0.0 {
                loss
            } else {
                (loss * (sigma * rng.standard_normal()).exp()).max(LOSS_EPSILON)
            };
            let correct = rng.bernoulli(acc);
            samples.push(SampleRecord {
                sample_id: format!("{prefix}{i:05}"),
                split,
                loss: sample_loss,
                correct,
            });
        }
    }
    ConfigMetrics::from_samples(config.id.clone(), samples)
}

/// Distribution of the simulated per-sample risks in coverage runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RiskDistribution {
    Bernoulli,
    /// Beta with mean `p_star` and the given `a + b`.
    Beta { concentration: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageSpec {
    pub p_star: f64,
    pub n_ref: u64,
    pub delta: f64,
    pub trials: usize,
    pub seed: u64,
    pub distribution: RiskDistribution,
}

/// Fewest trials accepted for a reported experiment.
pub const MIN_TRIALS: usize = 100;

impl CoverageSpec {
    pub fn bernoulli(p_star: f64, n_ref: u64, delta: f64, trials: usize, seed: u64) -> Self {
        Self {
            p_star,
            n_ref,
            delta,
            trials,
            seed,
            distribution: RiskDistribution::Bernoulli,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_star) {
            return Err(FrocError::Validation(format!(
                "p_star must lie in [0, 1], got {}",
                self.p_star
            )));
        }
        if self.n_ref == 0 {
            return Err(FrocError::Validation("n_ref must be at least 1".into()));
        }
        RiskBudget::new(self.delta)?;
        if self.trials < MIN_TRIALS {
            return Err(FrocError::Validation(format!(
                "at least {MIN_TRIALS} trials are required, got {}",
                self.trials
            )));
        }
        if let RiskDistribution::Beta { concentration } = self.distribution {
            if !(concentration.is_finite() && concentration > 0.0) {
                return Err(FrocError::Validation(format!(
                    "beta concentration must be positive, got {concentration}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialOutcome {
    pub r_hat: f64,
    pub alpha_unlearn: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub spec: CoverageSpec,
    pub violations: usize,
    pub miscoverage_rate: f64,
    pub trials: Vec<TrialOutcome>,
}

fn draw_mean(rng: &mut SplitMix64, n: u64, p_star: f64, distribution: RiskDistribution) -> f64 {
    match distribution {
        RiskDistribution::Bernoulli => {
            let hits = (0..n).filter(|_| rng.bernoulli(p_star)).count();
            hits as f64 / n as f64
        }
        RiskDistribution::Beta { concentration } => {
            if p_star <= 0.0 || p_star >= 1.0 {
                return p_star;
            }
            let (a, b) = (p_star * concentration, (1.0 - p_star) * concentration);
            let sum: f64 = (0..n).map(|_| rng.beta(a, b)).sum();
            (sum / n as f64).clamp(0.0, 1.0)
        }
    }
}

/// Fraction of trials in which the true mean risk exceeds the bound.
pub fn coverage_experiment(spec: &CoverageSpec) -> Result<CoverageReport> {
    spec.validate()?;
    let budget = RiskBudget::new(spec.delta)?;
    let trials: Vec<TrialOutcome> = (0..spec.trials as u64)
        .into_par_iter()
        .map(|trial| {
            let mut rng = SplitMix64::for_stream(spec.seed, trial);
            let r_hat = draw_mean(&mut rng, spec.n_ref, spec.p_star, spec.distribution);
            let stats = ReferenceStats::new(spec.n_ref, r_hat)?;
            let BoundResult { alpha_unlearn, .. } = conformal_unlearning_risk(budget, stats);
            Ok(TrialOutcome {
                r_hat,
                alpha_unlearn,
                violated: spec.p_star > alpha_unlearn,
            })
        })
        .collect::<Result<_>>()?;
    let violations = trials.iter().filter(|t| t.violated).count();
    Ok(CoverageReport {
        spec: *spec,
        violations,
        miscoverage_rate: violations as f64 / spec.trials as f64,
        trials,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FwerSpec {
    /// One true risk per configuration; each must exceed `alpha`.
    pub true_risks: Vec<f64>,
    pub alpha: f64,
    pub delta: f64,
    pub n_ref: u64,
    pub trials: usize,
    pub seed: u64,
}

impl FwerSpec {
    pub fn uniform(grid_size: usize, true_risk: f64, alpha: f64, delta: f64, n_ref: u64, trials: usize, seed: u64) -> Self {
        Self {
            true_risks: vec![true_risk; grid_size],
            alpha,
            delta,
            n_ref,
            trials,
            seed,
        }
    }

    pub fn grid_size(&self) -> usize {
        self.true_risks.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.true_risks.is_empty() {
            return Err(FrocError::Validation("grid_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(FrocError::Validation(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if let Some(bad) = self
            .true_risks
            .iter()
            .find(|&&r| !(r > self.alpha && r <= 1.0))
        {
            return Err(FrocError::Validation(format!(
                "every true risk must lie in (alpha, 1]; got {bad} with alpha {}",
                self.alpha
            )));
        }
        RiskBudget::new(self.delta)?;
        if self.n_ref == 0 {
            return Err(FrocError::Validation("n_ref must be at least 1".into()));
        }
        if self.trials < MIN_TRIALS {
            return Err(FrocError::Validation(format!(
                "at least {MIN_TRIALS} trials are required, got {}",
                self.trials
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FwerReport {
    pub spec: FwerSpec,
    pub family_errors: usize,
    pub family_error_rate: f64,
}

/// Frequency with which the Bonferroni valid set admits any configuration
/// when every configuration's true risk exceeds `alpha`.
pub fn fwer_experiment(spec: &FwerSpec) -> Result<FwerReport> {
    spec.validate()?;
    let ids: Vec<String> = (0..spec.grid_size()).map(|i| format!("c{i:03}")).collect();
    let outcomes: Vec<bool> = (0..spec.trials as u64)
        .into_par_iter()
        .map(|trial| {
            let mut rng = SplitMix64::for_stream(spec.seed, trial);
            let stats: Vec<ReferenceStats> = spec
                .true_risks
                .iter()
                .map(|&p| {
                    let r_hat = draw_mean(&mut rng, spec.n_ref, p, RiskDistribution::Bernoulli);
                    ReferenceStats::new(spec.n_ref, r_hat)
                })
                .collect::<Result<_>>()?;
            let set = valid_set_from_stats(
                ids.iter().map(String::as_str).zip(stats),
                spec.alpha,
                spec.delta,
            )?;
            Ok(!set.is_empty())
        })
        .collect::<Result<_>>()?;
    let family_errors = outcomes.iter().filter(|&&e| e).count();
    Ok(FwerReport {
        spec: spec.clone(),
        family_errors,
        family_error_rate: family_errors as f64 / spec.trials as f64,
    })
}
