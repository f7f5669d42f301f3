//! End-to-end registration of one floating map: priors, regularization
//! selection, sampling and posterior summaries.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::{BoundingBox, VoxelGrid};
use crate::kriging::FittedMap;
use crate::landmarks::{detect_landmarks, estimate_prior, PriorConfig, RegistrationPrior};
use crate::modelselect::{credible_region, select_lambda, sweep_t, CredibleRegion, LambdaGridResult, LambdaTuple, DEFAULT_LAMBDAS};
use crate::posterior::{Hyperparams, Mode, PosteriorState, RegistrationProblem, PARAM_NAMES};
use crate::sampler::{ChainConfig, PosteriorDraws};
use crate::transform::{Affine, SimilarityParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterConfig {
    pub prior: PriorConfig,
    /// Number of reference landmarks (the strongest inside the query box)
    /// used as query points.
    pub n_query: usize,
    pub lambda_grid: Vec<LambdaTuple>,
    pub chains: ChainConfig,
    pub mode: Mode,
    pub lambda_ic: f64,
    pub coverage: f64,
}

impl Default for RegisterConfig {
    fn default() -> Self {
        Self {
            prior: PriorConfig::default(),
            n_query: 4,
            lambda_grid: sweep_t(1.0, &DEFAULT_LAMBDAS),
            chains: ChainConfig::default(),
            mode: Mode::PriorEmbedded,
            lambda_ic: 0.0,
            coverage: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

impl ParamSummary {
    pub fn covers(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    /// In the order of [`PARAM_NAMES`].
    pub params: Vec<ParamSummary>,
    pub mean: PosteriorState,
    pub n_draws: usize,
    pub rhat_max: f64,
    pub acceptance_rate: Vec<f64>,
    pub warnings: Vec<String>,
}

impl PosteriorSummary {
    /// Means, standard deviations and equal-tailed `level` intervals.
    pub fn from_draws(draws: &PosteriorDraws, level: f64) -> Self {
        let arrays: Vec<[f64; 13]> = draws.all_states().map(|s| s.to_array()).collect();
        let n = arrays.len() as f64;
        let tail = 0.5 * (1.0 - level);
        let params: Vec<ParamSummary> = PARAM_NAMES
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let mut v: Vec<f64> = arrays.iter().map(|a| a[j]).collect();
                let mean = v.iter().sum::<f64>() / n;
                let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
                v.sort_by(f64::total_cmp);
                ParamSummary {
                    name: name.to_string(),
                    mean,
                    sd,
                    lower: quantile(&v, tail),
                    upper: quantile(&v, 1.0 - tail),
                }
            })
            .collect();
        let means: Vec<f64> = params.iter().map(|p| p.mean).collect();
        Self {
            mean: PosteriorState::from_array(&means),
            params,
            n_draws: arrays.len(),
            rhat_max: draws.max_rhat(),
            acceptance_rate: draws.acceptance_rate.clone(),
            warnings: draws.warnings.clone(),
        }
    }

    pub fn param(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Summaries of the forward transform parameters.
    pub fn forward(&self) -> &[ParamSummary] {
        &self.params[..5]
    }
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub prior: RegistrationPrior,
    pub selection: LambdaGridResult,
    pub hyperparams: Hyperparams,
    pub draws: PosteriorDraws,
    pub summary: PosteriorSummary,
    /// `Err` holds the reason no credible region was formed.
    pub credible: std::result::Result<CredibleRegion, String>,
    pub warped: VoxelGrid,
}

/// Floating map resampled on the reference lattice: `Y^(T(s))`.
pub fn resample_onto(floating: &FittedMap, t: &impl Affine, width: usize, height: usize) -> Result<VoxelGrid> {
    let m = t.matrix();
    VoxelGrid::from_fn(width, height, |x, y| floating.model.interpolate_at(m.apply([x, y])))
}

/// Estimates the landmark prior for `query_box` of the reference.
pub fn prior_for(reference: &FittedMap, floating: &FittedMap, query_box: &BoundingBox, cfg: &RegisterConfig) -> Result<RegistrationPrior> {
    let query = detect_landmarks(&reference.grid).within(query_box).strongest(cfg.n_query);
    estimate_prior(reference, floating, &query, query_box, &cfg.prior)
}

/// Runs the full pipeline on one reference/floating pair.
pub fn register(reference: &FittedMap, floating: &FittedMap, query_box: &BoundingBox, cfg: &RegisterConfig) -> Result<Registration> {
    let prior = prior_for(reference, floating, query_box, cfg)?;
    register_with_prior(reference, floating, query_box, prior, cfg)
}

pub fn register_with_prior(
    reference: &FittedMap,
    floating: &FittedMap,
    query_box: &BoundingBox,
    prior: RegistrationPrior,
    cfg: &RegisterConfig,
) -> Result<Registration> {
    let problem = RegistrationProblem::from_box(reference.clone(), floating.clone(), query_box, &prior.m0)?;
    let sel = select_lambda(&problem, &prior, &cfg.lambda_grid, &cfg.chains, cfg.mode, cfg.lambda_ic)?;
    let summary = PosteriorSummary::from_draws(&sel.draws, cfg.coverage);
    let credible = credible_region(&sel.draws, query_box, cfg.coverage).map_err(|e| e.to_string());
    let mean_t: SimilarityParams = summary.mean.fwd;
    let warped = resample_onto(floating, &mean_t, reference.grid.width(), reference.grid.height())?;
    Ok(Registration {
        prior,
        selection: sel.result,
        hyperparams: sel.hyperparams,
        draws: sel.draws,
        summary,
        credible,
        warped,
    })
}
