//! Blocked adaptive random-walk Metropolis and convergence diagnostics.
//!
//! Each block proposes `u_B' = u_B + exp(s_B) L_B z` with `z ~ N(0, I)`.
//! During burn-in `s_B` follows a Robbins-Monro recursion towards a 0.3
//! acceptance rate and `L_B` is replaced by the Cholesky factor of the
//! block's empirical covariance from the second half of burn-in so far.
//! Both freeze at the end of burn-in, after which the chain is a plain
//! Metropolis chain.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::fmt_f64;
use crate::optim::NelderMead;
use crate::posterior::{
    check_finite, forward_terms, ic_squared, pointwise_log_density, profile_phi, reverse_terms,
    terms, Hyperparams, Mode, PosteriorState, RegistrationProblem, Terms, N_PARAMS, PARAM_NAMES,
};

pub const TARGET_ACCEPTANCE: f64 = 0.3;

const COV_SHRINK: f64 = 0.1;
/// Pseudo-count of a supplied proposal covariance when blending it with the
/// burn-in estimate.
const ANCHOR_WEIGHT: f64 = 1000.0;

/// A log density in unconstrained coordinates whose coordinates are updated
/// in blocks.
pub trait BlockTarget: Sync {
    type Cache: Clone + Send;

    fn dim(&self) -> usize;

    /// Coordinate indices of each block; together they cover every
    /// coordinate exactly once.
    fn blocks(&self) -> Vec<Vec<usize>>;

    fn log_density(&self, u: &[f64]) -> Result<(f64, Self::Cache)>;

    /// Re-evaluates after only the coordinates of `block` changed.
    fn log_density_block(&self, u: &[f64], _block: usize, _prev: &Self::Cache) -> Result<(f64, Self::Cache)> {
        self.log_density(u)
    }

    /// Per-observation log densities recorded with each retained draw.
    fn pointwise(&self, _u: &[f64], _cache: &Self::Cache) -> Vec<f64> {
        Vec::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_chains: usize,
    pub n_iter: usize,
    pub n_burnin: usize,
    pub seed: u64,
    /// Initial proposal sd per unconstrained coordinate.
    pub step_scales: Option<Vec<f64>>,
    /// Chains start at `init + init_jitter * step * z`.
    pub init_jitter: f64,
    /// Adapt the proposal during burn-in.
    pub adapt: bool,
    /// Initial proposal covariance per block (row-major), overriding the
    /// diagonal built from `step_scales`. Adaptation blends it with the
    /// burn-in covariance estimate.
    #[serde(default)]
    pub proposal_cov: Option<Vec<Vec<f64>>>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_chains: 3,
            n_iter: 10_000,
            n_burnin: 2_000,
            seed: 0,
            step_scales: None,
            init_jitter: 2.0,
            adapt: true,
            proposal_cov: None,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 || self.n_burnin >= self.n_iter {
            return Err(Error::Sampler(format!(
                "need n_chains >= 1 and n_burnin < n_iter, got {} chains, {} burn-in of {}",
                self.n_chains, self.n_burnin, self.n_iter
            )));
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        self.n_iter - self.n_burnin
    }
}

/// Retained draws of one chain, in unconstrained coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    pub draws: Vec<Vec<f64>>,
    pub log_density: Vec<f64>,
    pub pointwise: Vec<Vec<f64>>,
    /// Post-burn-in acceptance rate over all block proposals.
    pub acceptance_rate: f64,
    pub block_acceptance: Vec<f64>,
    /// Frozen proposal factors `exp(s_B) L_B` per block (row-major).
    pub proposals: Vec<Vec<f64>>,
}

struct BlockState {
    idx: Vec<usize>,
    log_scale: f64,
    chol: DMatrix<f64>,
    anchor: Option<DMatrix<f64>>,
}

/// Welford accumulator over full vectors.
struct Moments {
    n: f64,
    mean: Vec<f64>,
    m2: DMatrix<f64>,
}

impl Moments {
    fn new(d: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; d],
            m2: DMatrix::zeros(d, d),
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d / self.n;
        }
        for i in 0..x.len() {
            let di = delta[i];
            for j in 0..x.len() {
                self.m2[(i, j)] += di * (x[j] - self.mean[j]);
            }
        }
    }

    fn cov(&self, idx: &[usize]) -> DMatrix<f64> {
        let k = idx.len();
        DMatrix::from_fn(k, k, |a, b| self.m2[(idx[a], idx[b])] / (self.n - 1.0).max(1.0))
    }
}

fn run_chain<T: BlockTarget>(target: &T, init: &[f64], steps: &[f64], cfg: &ChainConfig, chain: usize) -> Result<ChainDraws> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain as u64);
    let d = target.dim();
    let mut u: Vec<f64> = init
        .iter()
        .zip(steps)
        .map(|(x, s)| x + cfg.init_jitter * s * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let (mut lp, mut cache) = target.log_density(&u)?;
    if !lp.is_finite() {
        return Err(Error::Sampler(format!("log density is {lp} at the initial state of chain {chain}")));
    }
    let mut blocks: Vec<BlockState> = target
        .blocks()
        .into_iter()
        .enumerate()
        .map(|(bi, idx)| {
            let k = idx.len();
            let diag = || DMatrix::from_fn(k, k, |a, b| if a == b { steps[idx[a]] } else { 0.0 });
            let anchor = cfg
                .proposal_cov
                .as_ref()
                .and_then(|c| c.get(bi))
                .filter(|c| c.len() == k * k)
                .map(|c| DMatrix::from_row_slice(k, k, c))
                .filter(|m| m.clone().cholesky().is_some());
            let chol = anchor.clone().and_then(|m| m.cholesky()).map_or_else(diag, |ch| ch.l());
            BlockState {
                chol,
                anchor,
                log_scale: (2.38 / (k as f64).sqrt()).ln().min(0.0),
                idx,
            }
        })
        .collect();
    let nb = blocks.len();
    let mut moments = Moments::new(d);
    let collect_from = cfg.n_burnin / 2;
    let mut accepted = vec![0usize; nb];
    let retained = cfg.retained();
    let mut out = ChainDraws {
        draws: Vec::with_capacity(retained),
        log_density: Vec::with_capacity(retained),
        pointwise: Vec::with_capacity(retained),
        acceptance_rate: 0.0,
        block_acceptance: vec![0.0; nb],
        proposals: Vec::new(),
    };
    let mut proposal = u.clone();
    for it in 0..cfg.n_iter {
        let burning = it < cfg.n_burnin;
        for (k, blk) in blocks.iter_mut().enumerate() {
            let z: Vec<f64> = (0..blk.idx.len()).map(|_| rng.sample(StandardNormal)).collect();
            let step = &blk.chol * DVector::from_vec(z) * blk.log_scale.exp();
            proposal.copy_from_slice(&u);
            for (a, &i) in blk.idx.iter().enumerate() {
                proposal[i] += step[a];
            }
            let (lp_new, cache_new) = match target.log_density_block(&proposal, k, &cache) {
                Ok((v, c)) if v.is_finite() => (v, Some(c)),
                _ => (f64::NEG_INFINITY, None),
            };
            let log_ratio = lp_new - lp;
            let alpha = if log_ratio >= 0.0 { 1.0 } else { log_ratio.exp() };
            let uniform: f64 = rng.random();
            if let Some(c) = cache_new.filter(|_| uniform < alpha) {
                u.copy_from_slice(&proposal);
                lp = lp_new;
                cache = c;
                if !burning {
                    accepted[k] += 1;
                }
            }
            if burning && cfg.adapt {
                let gamma = ((it + 1) as f64).powf(-0.6);
                blk.log_scale += gamma * (alpha - TARGET_ACCEPTANCE);
            }
        }
        if burning && cfg.adapt {
            if it >= collect_from {
                moments.push(&u);
            }
            let n = moments.n as usize;
            if n >= 50 && it % 50 == 49 {
                for blk in blocks.iter_mut() {
                    let k = blk.idx.len();
                    if n < 20 * k {
                        continue;
                    }
                    let cov = match &blk.anchor {
                        Some(anchor) => {
                            let w = n as f64 / (n as f64 + ANCHOR_WEIGHT);
                            moments.cov(&blk.idx) * w + anchor * (1.0 - w)
                        }
                        None => {
                            // shrink towards the diagonal against spurious near-singular estimates
                            let mut cov = moments.cov(&blk.idx) * (1.0 - COV_SHRINK);
                            for a in 0..k {
                                let v = cov[(a, a)] / (1.0 - COV_SHRINK);
                                cov[(a, a)] += COV_SHRINK * v + 1e-12 * steps[blk.idx[a]].powi(2);
                            }
                            cov
                        }
                    };
                    if let Some(ch) = cov.cholesky() {
                        // keep the current proposal size while changing its shape
                        let old = blk.chol.determinant().abs().ln() / k as f64;
                        let l = ch.l();
                        let new = l.determinant().abs().ln() / k as f64;
                        if old.is_finite() && new.is_finite() {
                            blk.log_scale += old - new;
                            blk.chol = l;
                        }
                    }
                }
            }
        } else if !burning {
            out.draws.push(u.clone());
            out.log_density.push(lp);
            let pw = target.pointwise(&u, &cache);
            if !pw.is_empty() {
                out.pointwise.push(pw);
            }
        }
    }
    let total: usize = accepted.iter().sum();
    out.acceptance_rate = total as f64 / (retained * nb).max(1) as f64;
    out.block_acceptance = accepted.iter().map(|a| *a as f64 / retained.max(1) as f64).collect();
    out.proposals = blocks
        .iter()
        .map(|b| (&b.chol * b.log_scale.exp()).transpose().iter().copied().collect())
        .collect();
    Ok(out)
}

/// Runs `cfg.n_chains` independent chains from `init` (unconstrained).
pub fn sample<T: BlockTarget>(target: &T, init: &[f64], cfg: &ChainConfig) -> Result<Vec<ChainDraws>> {
    cfg.validate()?;
    let d = target.dim();
    if init.len() != d {
        return Err(Error::Sampler(format!("init has {} coordinates, target has {d}", init.len())));
    }
    let mut covered = vec![0usize; d];
    for b in target.blocks() {
        for i in b {
            covered[i] += 1;
        }
    }
    if covered.iter().any(|c| *c != 1) {
        return Err(Error::Sampler("blocks must partition the coordinates".into()));
    }
    let (lp, _) = target.log_density(init)?;
    if !lp.is_finite() {
        return Err(Error::Sampler(format!("log density is {lp} at the initial state")));
    }
    let steps = match &cfg.step_scales {
        Some(s) if s.len() == d && s.iter().all(|v| *v > 0.0) => s.clone(),
        Some(_) => return Err(Error::Sampler("step scales must be positive, one per coordinate".into())),
        None => vec![0.1; d],
    };
    (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| run_chain(target, init, &steps, cfg, c))
        .collect()
}

/// Laplace approximation of each block's conditional covariance at `u`:
/// the inverse of the block of the negative Hessian of the log density,
/// by central differences. Blocks whose Hessian is not positive definite
/// fall back to `diag(steps^2)`.
pub fn laplace_covariances<T: BlockTarget>(target: &T, u: &[f64], steps: &[f64]) -> Vec<Vec<f64>> {
    let f = |v: &[f64]| target.log_density(v).map_or(f64::NAN, |r| r.0);
    let f0 = f(u);
    let at = |i: usize, hi: f64, j: usize, hj: f64| {
        let mut v = u.to_vec();
        v[i] += hi;
        v[j] += hj;
        f(&v)
    };
    let second = |i: usize, h: f64| (at(i, h, i, 0.0) - 2.0 * f0 + at(i, -h, i, 0.0)) / (h * h);
    target
        .blocks()
        .iter()
        .map(|idx| {
            let k = idx.len();
            let fallback = || {
                DMatrix::from_fn(k, k, |a, b| if a == b { steps[idx[a]].powi(2) } else { 0.0 })
                    .transpose()
                    .iter()
                    .copied()
                    .collect::<Vec<f64>>()
            };
            // a first pass sizes the difference steps to the local curvature
            let h: Vec<f64> = idx
                .iter()
                .map(|&i| {
                    let c = -second(i, 0.01 * steps[i]);
                    if c.is_finite() && c > 0.0 {
                        0.2 / c.sqrt()
                    } else {
                        0.01 * steps[i]
                    }
                })
                .collect();
            let mut hess = DMatrix::zeros(k, k);
            for a in 0..k {
                hess[(a, a)] = -second(idx[a], h[a]);
                for b in 0..a {
                    let (i, j) = (idx[a], idx[b]);
                    let v = -(at(i, h[a], j, h[b]) - at(i, h[a], j, -h[b]) - at(i, -h[a], j, h[b]) + at(i, -h[a], j, -h[b]))
                        / (4.0 * h[a] * h[b]);
                    hess[(a, b)] = v;
                    hess[(b, a)] = v;
                }
            }
            if !hess.iter().all(|v| v.is_finite()) {
                return fallback();
            }
            match hess.cholesky() {
                Some(ch) => ch.inverse().transpose().iter().copied().collect(),
                None => fallback(),
            }
        })
        .collect()
}

/// Split-chain potential scale reduction for one scalar quantity.
pub fn rhat(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::Sampler("R-hat needs at least two chains".into()));
    }
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if n < 10 {
        return Err(Error::Sampler(format!("R-hat needs at least 10 draws per chain, got {n}")));
    }
    let half = n / 2;
    let splits: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..half], &c[n - half..n]])
        .collect();
    let m = splits.len() as f64;
    let len = half as f64;
    let means: Vec<f64> = splits.iter().map(|s| s.iter().sum::<f64>() / len).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = len / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = splits
        .iter()
        .zip(&means)
        .map(|(s, mu)| s.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (len - 1.0))
        .sum::<f64>()
        / m;
    let scale = grand.abs().max(1.0);
    if w <= 1e-28 * scale * scale {
        return Ok(if b <= 1e-28 * scale * scale { 1.0 } else { f64::INFINITY });
    }
    let var_plus = (len - 1.0) / len * w + b / len;
    Ok((var_plus / w).sqrt())
}

/// Per-coordinate split R-hat over `chains[c][draw][coordinate]`.
pub fn rhat_all(chains: &[Vec<Vec<f64>>]) -> Result<Vec<f64>> {
    let d = chains
        .first()
        .and_then(|c| c.first())
        .map(Vec::len)
        .ok_or_else(|| Error::Sampler("no draws".into()))?;
    (0..d)
        .map(|j| {
            let per: Vec<Vec<f64>> = chains.iter().map(|c| c.iter().map(|x| x[j]).collect()).collect();
            rhat(&per)
        })
        .collect()
}

/// The registration posterior as a blocked target: `(T, b)`, `(T', b')`, `phi`.
pub struct GibbsTarget<'a> {
    pub problem: &'a RegistrationProblem,
    pub hp: &'a Hyperparams,
    pub mode: Mode,
}

impl GibbsTarget<'_> {
    fn value(&self, t: &Terms, phi: f64) -> Result<f64> {
        check_finite(t)?;
        let v = t.total(self.problem, self.hp, self.mode, phi);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("objective"))
        }
    }
}

pub const GIBBS_BLOCKS: [&[usize]; 3] = [&[0, 1, 2, 3, 4, 10], &[5, 6, 7, 8, 9, 11], &[12]];

impl BlockTarget for GibbsTarget<'_> {
    type Cache = Terms;

    fn dim(&self) -> usize {
        N_PARAMS
    }

    fn blocks(&self) -> Vec<Vec<usize>> {
        GIBBS_BLOCKS.iter().map(|b| b.to_vec()).collect()
    }

    fn log_density(&self, u: &[f64]) -> Result<(f64, Terms)> {
        let s = PosteriorState::from_unconstrained(u);
        let t = terms(self.problem, self.hp, &s);
        let nlp = self.value(&t, s.phi)?;
        Ok((-nlp + PosteriorState::log_jacobian(u), t))
    }

    fn log_density_block(&self, u: &[f64], block: usize, prev: &Terms) -> Result<(f64, Terms)> {
        let s = PosteriorState::from_unconstrained(u);
        let mut t = prev.clone();
        match block {
            0 => {
                let (ssd, rb, rt, yhat) = forward_terms(self.problem, self.hp, &s.fwd, s.b);
                (t.ssd_fwd, t.reg_b, t.reg_t, t.yhat) = (ssd, rb, rt, yhat);
            }
            1 => {
                let (ssd, rb, rt) = reverse_terms(self.problem, self.hp, &s.rev, s.b_rv);
                (t.ssd_rev, t.reg_b_rv, t.reg_t_rv) = (ssd, rb, rt);
            }
            _ => {}
        }
        if block < 2 {
            t.ic = ic_squared(self.problem, &s.fwd, &s.rev).sqrt();
        }
        let nlp = self.value(&t, s.phi)?;
        Ok((-nlp + PosteriorState::log_jacobian(u), t))
    }

    fn pointwise(&self, u: &[f64], cache: &Terms) -> Vec<f64> {
        pointwise_log_density(self.problem.values_r(), &cache.yhat, u[10].exp(), u[12].exp())
    }
}

/// Default proposal sd in unconstrained coordinates.
pub fn default_steps() -> Vec<f64> {
    let t = [0.05, 0.05, 0.01, 0.01, 0.01];
    let mut s = Vec::with_capacity(N_PARAMS);
    s.extend_from_slice(&t);
    s.extend_from_slice(&t);
    s.extend_from_slice(&[0.01, 0.01, 0.05]);
    s
}

/// The prior estimates as a starting state, with `phi` at its conditional mode.
pub fn prior_init(problem: &RegistrationProblem, hp: &Hyperparams, mode: Mode) -> PosteriorState {
    let mut s = PosteriorState {
        fwd: hp.prior.transform,
        rev: hp.prior.m0_rv.nearest_similarity(),
        b: hp.prior.b0,
        b_rv: hp.prior.b0_rv,
        phi: 1.0,
    };
    let t = terms(problem, hp, &s);
    s.phi = profile_phi(t.bracket(hp, mode), problem.phi_exponent());
    s
}

/// Moves `init` to the conditional mode of the two transform blocks (in
/// turn) and then of `phi`.
pub fn optimize_init(problem: &RegistrationProblem, hp: &Hyperparams, mode: Mode, init: &PosteriorState) -> PosteriorState {
    let nm = NelderMead {
        max_evals: 1500,
        f_tol: 1e-10,
        x_tol: 1e-7,
    };
    let mut u = init.to_unconstrained().to_vec();
    let steps = default_steps();
    let sweeps = if mode == Mode::ExplicitPenalty { 2 } else { 1 };
    for _ in 0..sweeps {
        for blk in &GIBBS_BLOCKS[..2] {
            let f = |x: &[f64]| {
                let mut v = u.clone();
                for (a, &i) in blk.iter().enumerate() {
                    v[i] = x[a];
                }
                let s = PosteriorState::from_unconstrained(&v);
                let t = terms(problem, hp, &s);
                if check_finite(&t).is_err() {
                    return f64::INFINITY;
                }
                t.bracket(hp, mode)
            };
            let x0: Vec<f64> = blk.iter().map(|&i| u[i]).collect();
            let st: Vec<f64> = blk.iter().map(|&i| 4.0 * steps[i]).collect();
            let m = nm.minimize(f, &x0, &st);
            if m.f.is_finite() {
                for (a, &i) in blk.iter().enumerate() {
                    u[i] = m.x[a];
                }
            }
        }
    }
    let mut s = PosteriorState::from_unconstrained(&u);
    let t = terms(problem, hp, &s);
    s.phi = profile_phi(t.bracket(hp, mode), problem.phi_exponent());
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    /// `samples[chain][draw]`.
    pub samples: Vec<Vec<PosteriorState>>,
    /// `log_density[chain][draw]`, unconstrained-coordinate log density.
    pub log_density: Vec<Vec<f64>>,
    /// One row per retained draw (chain-major), one column per voxel of the
    /// reference region.
    #[serde(skip)]
    pub pointwise_logdens: Vec<Vec<f64>>,
    pub acceptance_rate: Vec<f64>,
    /// Per parameter, in the order of [`PARAM_NAMES`]; empty with one chain.
    pub rhat: Vec<f64>,
    pub warnings: Vec<String>,
}

impl PosteriorDraws {
    pub fn from_chains(chains: Vec<ChainDraws>) -> Result<Self> {
        let samples: Vec<Vec<PosteriorState>> = chains
            .iter()
            .map(|c| c.draws.iter().map(|u| PosteriorState::from_unconstrained(u)).collect())
            .collect();
        let arrays: Vec<Vec<Vec<f64>>> = samples
            .iter()
            .map(|c| c.iter().map(|s| s.to_array().to_vec()).collect())
            .collect();
        let rhat = if chains.len() >= 2 && chains[0].draws.len() >= 10 {
            rhat_all(&arrays)?
        } else {
            Vec::new()
        };
        let mut warnings = Vec::new();
        for (i, c) in chains.iter().enumerate() {
            if c.acceptance_rate < 0.01 {
                warnings.push(format!("chain {i}: acceptance rate {:.4} after adaptation", c.acceptance_rate));
            }
        }
        Ok(Self {
            samples,
            log_density: chains.iter().map(|c| c.log_density.clone()).collect(),
            acceptance_rate: chains.iter().map(|c| c.acceptance_rate).collect(),
            pointwise_logdens: chains.into_iter().flat_map(|c| c.pointwise).collect(),
            rhat,
            warnings,
        })
    }

    pub fn n_draws(&self) -> usize {
        self.samples.iter().map(Vec::len).sum()
    }

    pub fn all_states(&self) -> impl Iterator<Item = &PosteriorState> {
        self.samples.iter().flatten()
    }

    pub fn max_rhat(&self) -> f64 {
        self.rhat.iter().copied().fold(f64::NAN, f64::max)
    }

    /// All R-hat values below `threshold` (false with fewer than two chains).
    pub fn converged(&self, threshold: f64) -> bool {
        !self.rhat.is_empty() && self.rhat.iter().all(|r| *r < threshold)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "chain,iter,{},log_density", PARAM_NAMES.join(",")).map_err(io)?;
        for (c, chain) in self.samples.iter().enumerate() {
            for (i, s) in chain.iter().enumerate() {
                let vals: Vec<String> = s.to_array().iter().map(|v| fmt_f64(*v)).collect();
                writeln!(w, "{c},{i},{},{}", vals.join(","), fmt_f64(self.log_density[c][i])).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }
}

/// Samples the registration posterior from `init` (constrained).
pub fn sample_posterior(
    problem: &RegistrationProblem,
    hp: &Hyperparams,
    mode: Mode,
    init: &PosteriorState,
    cfg: &ChainConfig,
) -> Result<PosteriorDraws> {
    hp.validate()?;
    if !init.is_valid() {
        return Err(Error::Sampler(format!("invalid initial state {init:?}")));
    }
    let target = GibbsTarget { problem, hp, mode };
    let mut cfg = cfg.clone();
    let u0 = init.to_unconstrained();
    if cfg.adapt && cfg.proposal_cov.is_none() {
        let base = cfg.step_scales.clone().unwrap_or_else(default_steps);
        let covs = laplace_covariances(&target, &u0, &base);
        if cfg.step_scales.is_none() {
            let mut sd = base;
            for (idx, c) in GIBBS_BLOCKS.iter().zip(&covs) {
                let k = idx.len();
                for (a, &i) in idx.iter().enumerate() {
                    sd[i] = c[a * k + a].sqrt();
                }
            }
            cfg.step_scales = Some(sd);
        }
        cfg.proposal_cov = Some(covs);
    } else if cfg.step_scales.is_none() {
        cfg.step_scales = Some(default_steps());
    }
    let chains = sample(&target, &u0, &cfg)?;
    PosteriorDraws::from_chains(chains)
}
