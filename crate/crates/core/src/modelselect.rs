//! Regularization selection by PSIS-LOO and DBSCAN credible regions.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{fmt_f64, BoundingBox};
use crate::landmarks::RegistrationPrior;
use crate::posterior::{Hyperparams, Mode, PosteriorState, RegistrationProblem};
use crate::sampler::{optimize_init, prior_init, sample_posterior, ChainConfig, PosteriorDraws};
use crate::transform::{Point, SimilarityParams};

/// Pareto-k above which an importance-sampling estimate is unreliable.
pub const KHAT_THRESHOLD: f64 = 0.7;

/// R-hat below which a fit counts as converged.
pub const RHAT_THRESHOLD: f64 = 1.01;

/// Fraction of the largest importance ratios replaced by Pareto quantiles.
pub const TAIL_FRACTION: f64 = 0.2;

fn log_sum_exp(x: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = x.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + x.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Generalized Pareto fit to positive exceedances (sorted ascending) by the
/// Zhang-Stephens profile-posterior method, with the usual weak prior
/// pulling the shape towards 0.5. Returns `(shape, scale)`.
pub fn gpd_fit(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let nf = n as f64;
    let m = 30 + (nf.sqrt() as usize);
    let quart = x[((nf / 4.0 + 0.5) as usize).clamp(1, n) - 1];
    let thetas: Vec<f64> = (1..=m)
        .map(|j| {
            let b = 1.0 - (m as f64 / (j as f64 - 0.5)).sqrt();
            b / (3.0 * quart) + 1.0 / x[n - 1]
        })
        .collect();
    let ks: Vec<f64> = thetas
        .iter()
        .map(|t| x.iter().map(|v| (-t * v).ln_1p()).sum::<f64>() / nf)
        .collect();
    let ll: Vec<f64> = thetas
        .iter()
        .zip(&ks)
        .map(|(t, k)| nf * ((-t / k).ln() - k - 1.0))
        .collect();
    let weights: Vec<f64> = ll
        .iter()
        .map(|a| {
            let s: f64 = ll.iter().map(|b| (b - a).exp()).sum();
            1.0 / s
        })
        .collect();
    let (mut num, mut den) = (0.0, 0.0);
    for (t, w) in thetas.iter().zip(&weights) {
        if w.is_finite() && *w >= 10.0 * f64::EPSILON {
            num += t * w;
            den += w;
        }
    }
    let theta = num / den;
    let k = x.iter().map(|v| (-theta * v).ln_1p()).sum::<f64>() / nf;
    let sigma = -k / theta;
    let k = (nf * k + 10.0 * 0.5) / (nf + 10.0);
    (k, sigma)
}

fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    if k.abs() < 1e-12 {
        -sigma * (-p).ln_1p()
    } else {
        sigma * (-k * (-p).ln_1p()).exp_m1() / k
    }
}

/// Pareto-smoothed log weights for one observation. Returns the smoothed
/// log weights and the tail shape (`-inf` when the tail is degenerate).
pub fn psis_smooth(log_ratios: &[f64]) -> (Vec<f64>, f64) {
    let s = log_ratios.len();
    let max = log_ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut lw: Vec<f64> = log_ratios.iter().map(|v| v - max).collect();
    let m = ((TAIL_FRACTION * s as f64).ceil() as usize).min(s.saturating_sub(1));
    if m < 5 {
        return (lw, f64::NEG_INFINITY);
    }
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| lw[a].total_cmp(&lw[b]));
    let tail = &order[s - m..];
    let cutoff = lw[order[s - m - 1]];
    let exceed: Vec<f64> = tail.iter().map(|&i| lw[i].exp() - cutoff.exp()).collect();
    if exceed.iter().all(|e| *e <= 0.0) || !exceed.iter().all(|e| e.is_finite()) {
        return (lw, f64::NEG_INFINITY);
    }
    if exceed[0] <= 0.0 {
        // ties at the cutoff: fit only the strictly positive part
        let first = exceed.iter().position(|e| *e > 0.0).unwrap_or(m);
        if m - first < 5 {
            return (lw, f64::NEG_INFINITY);
        }
    }
    let positive: Vec<f64> = exceed.iter().copied().filter(|e| *e > 0.0).collect();
    let (k, sigma) = gpd_fit(&positive);
    if !k.is_finite() || !sigma.is_finite() || sigma <= 0.0 {
        return (lw, f64::NEG_INFINITY);
    }
    for (j, &i) in tail.iter().enumerate() {
        let p = (j as f64 + 0.5) / m as f64;
        let v = (cutoff.exp() + gpd_quantile(p, k, sigma)).ln();
        lw[i] = v.min(0.0);
    }
    (lw, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooResult {
    pub elpd: f64,
    pub pointwise_elpd: Vec<f64>,
    pub khat: Vec<f64>,
}

impl LooResult {
    pub fn max_khat(&self) -> f64 {
        self.khat.iter().copied().filter(|k| k.is_finite()).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn n_unreliable(&self) -> usize {
        self.khat.iter().filter(|k| **k > KHAT_THRESHOLD).count()
    }
}

/// PSIS-LOO over `logdens[draw][observation]`.
pub fn psis_loo(logdens: &[Vec<f64>]) -> Result<LooResult> {
    let s = logdens.len();
    if s < 100 {
        return Err(Error::Precondition(format!("PSIS-LOO needs at least 100 draws, got {s}")));
    }
    let n = logdens[0].len();
    if logdens.iter().any(|r| r.len() != n || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::Precondition("pointwise log densities must be finite and rectangular".into()));
    }
    let mut pointwise = Vec::with_capacity(n);
    let mut khat = Vec::with_capacity(n);
    let mut col = vec![0.0; s];
    for i in 0..n {
        for (c, row) in col.iter_mut().zip(logdens) {
            *c = row[i];
        }
        let ratios: Vec<f64> = col.iter().map(|v| -v).collect();
        let (lw, k) = psis_smooth(&ratios);
        let num = log_sum_exp(lw.iter().zip(&col).map(|(w, l)| w + l));
        let den = log_sum_exp(lw.iter().copied());
        pointwise.push(num - den);
        khat.push(k);
    }
    Ok(LooResult {
        elpd: pointwise.iter().sum(),
        pointwise_elpd: pointwise,
        khat,
    })
}

/// Plain importance-sampling LOO without smoothing.
pub fn is_loo(logdens: &[Vec<f64>]) -> f64 {
    let n = logdens.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| {
            let col: Vec<f64> = logdens.iter().map(|r| r[i]).collect();
            let lw: Vec<f64> = col.iter().map(|v| -v).collect();
            log_sum_exp(lw.iter().zip(&col).map(|(w, l)| w + l)) - log_sum_exp(lw.iter().copied())
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaTuple {
    pub lambda_b: f64,
    pub lambda_t: f64,
    pub lambda_b_rv: f64,
    pub lambda_t_rv: f64,
}

impl LambdaTuple {
    pub fn symmetric(lambda_b: f64, lambda_t: f64) -> Self {
        Self {
            lambda_b,
            lambda_t,
            lambda_b_rv: lambda_b,
            lambda_t_rv: lambda_t,
        }
    }

    pub fn hyperparams(&self, prior: &RegistrationPrior, lambda_ic: f64) -> Hyperparams {
        Hyperparams {
            lambda_b: self.lambda_b,
            lambda_t: self.lambda_t,
            lambda_b_rv: self.lambda_b_rv,
            lambda_t_rv: self.lambda_t_rv,
            lambda_ic,
            prior: prior.clone(),
        }
    }
}

pub const DEFAULT_LAMBDAS: [f64; 5] = [1e3, 1e2, 10.0, 1.0, 0.1];

/// `lambda_T` sweep at fixed `lambda_b`, sorted descending in `lambda_T`.
pub fn sweep_t(lambda_b: f64, values: &[f64]) -> Vec<LambdaTuple> {
    let mut g: Vec<LambdaTuple> = values.iter().map(|&t| LambdaTuple::symmetric(lambda_b, t)).collect();
    sort_grid(&mut g);
    g
}

/// Every `(lambda_b, lambda_T)` pair from `values`, sorted descending in `lambda_T`.
pub fn grid_2d(values: &[f64]) -> Vec<LambdaTuple> {
    let mut g: Vec<LambdaTuple> = values
        .iter()
        .flat_map(|&b| values.iter().map(move |&t| LambdaTuple::symmetric(b, t)))
        .collect();
    sort_grid(&mut g);
    g
}

fn sort_grid(g: &mut [LambdaTuple]) {
    g.sort_by(|a, b| b.lambda_t.total_cmp(&a.lambda_t).then(b.lambda_b.total_cmp(&a.lambda_b)));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaGridResult {
    pub grid: Vec<LambdaTuple>,
    /// `NaN` where the fit failed.
    pub elpd: Vec<f64>,
    pub khat: Vec<f64>,
    pub n_khat_bad: Vec<usize>,
    pub rhat_max: Vec<f64>,
    pub rhat_ok: Vec<bool>,
    pub errors: Vec<Option<String>>,
    pub selected: usize,
}

impl LambdaGridResult {
    pub fn minus_two_elpd(&self) -> Vec<f64> {
        self.elpd.iter().map(|e| -2.0 * e).collect()
    }

    pub fn table(&self) -> String {
        let mut s = String::from("lambda_b,lambda_T,lambda_b_rv,lambda_T_rv,elpd,minus2_elpd,max_khat,n_khat_gt_0.7,rhat_max,rhat_ok,selected\n");
        for (i, t) in self.grid.iter().enumerate() {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                fmt_f64(t.lambda_b),
                fmt_f64(t.lambda_t),
                fmt_f64(t.lambda_b_rv),
                fmt_f64(t.lambda_t_rv),
                fmt_f64(self.elpd[i]),
                fmt_f64(-2.0 * self.elpd[i]),
                fmt_f64(self.khat[i]),
                self.n_khat_bad[i],
                fmt_f64(self.rhat_max[i]),
                self.rhat_ok[i],
                i == self.selected
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.table()).map_err(|e| Error::io(path, e))
    }
}

/// Outcome of [`select_lambda`]: the grid table and the selected fit.
#[derive(Debug, Clone)]
pub struct Selection {
    pub result: LambdaGridResult,
    pub hyperparams: Hyperparams,
    pub draws: PosteriorDraws,
}

/// Coordinate-wise posterior median.
pub fn posterior_median(draws: &PosteriorDraws) -> PosteriorState {
    let arrays: Vec<[f64; 13]> = draws.all_states().map(|s| s.to_array()).collect();
    let med: Vec<f64> = (0..13)
        .map(|j| {
            let mut v: Vec<f64> = arrays.iter().map(|a| a[j]).collect();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            }
        })
        .collect();
    PosteriorState::from_array(&med)
}

/// Fits every tuple in turn (each warm-started at the previous posterior
/// median) and selects the converged tuple with the largest ELPD.
pub fn select_lambda(
    problem: &RegistrationProblem,
    prior: &RegistrationPrior,
    grid: &[LambdaTuple],
    cfg: &ChainConfig,
    mode: Mode,
    lambda_ic: f64,
) -> Result<Selection> {
    select_lambda_with(problem, prior, grid, |_| cfg.clone(), mode, lambda_ic)
}

/// [`select_lambda`] with a per-tuple chain configuration.
pub fn select_lambda_with(
    problem: &RegistrationProblem,
    prior: &RegistrationPrior,
    grid: &[LambdaTuple],
    cfg_for: impl Fn(usize) -> ChainConfig,
    mode: Mode,
    lambda_ic: f64,
) -> Result<Selection> {
    if grid.is_empty() {
        return Err(Error::Precondition("empty lambda grid".into()));
    }
    let n = grid.len();
    let mut res = LambdaGridResult {
        grid: grid.to_vec(),
        elpd: vec![f64::NAN; n],
        khat: vec![f64::NAN; n],
        n_khat_bad: vec![0; n],
        rhat_max: vec![f64::NAN; n],
        rhat_ok: vec![false; n],
        errors: vec![None; n],
        selected: 0,
    };
    let mut best: Option<(usize, Hyperparams, PosteriorDraws)> = None;
    let mut warm: Option<PosteriorState> = None;
    for (i, tuple) in grid.iter().enumerate() {
        let hp = tuple.hyperparams(prior, lambda_ic);
        let start = warm.unwrap_or_else(|| prior_init(problem, &hp, mode));
        let init = optimize_init(problem, &hp, mode, &start);
        let fit = sample_posterior(problem, &hp, mode, &init, &cfg_for(i)).and_then(|d| {
            let loo = psis_loo(&d.pointwise_logdens)?;
            Ok((d, loo))
        });
        match fit {
            Ok((mut draws, loo)) => {
                res.elpd[i] = loo.elpd;
                res.khat[i] = loo.max_khat();
                res.n_khat_bad[i] = loo.n_unreliable();
                res.rhat_max[i] = draws.max_rhat();
                res.rhat_ok[i] = draws.converged(RHAT_THRESHOLD);
                warm = Some(posterior_median(&draws));
                if res.rhat_ok[i] && best.as_ref().is_none_or(|(j, _, _)| loo.elpd > res.elpd[*j]) {
                    best = Some((i, hp, draws));
                } else {
                    draws.pointwise_logdens = Vec::new();
                }
            }
            Err(e) => res.errors[i] = Some(e.to_string()),
        }
    }
    match best {
        Some((i, hyperparams, draws)) => {
            res.selected = i;
            Ok(Selection {
                result: res,
                hyperparams,
                draws,
            })
        }
        None => Err(Error::NoConvergence(res.table())),
    }
}

/// Largest-cluster DBSCAN labels: `labels[i]` is the cluster id of point
/// `i`, or `None` for noise.
pub fn dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let eps2 = eps * eps;
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| {
                    points[i]
                        .iter()
                        .zip(&points[j])
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        <= eps2
                })
                .collect()
        })
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();
    let mut labels = vec![None; n];
    let mut next = 0;
    for i in 0..n {
        if labels[i].is_some() || !core[i] {
            continue;
        }
        labels[i] = Some(next);
        let mut stack = vec![i];
        while let Some(p) = stack.pop() {
            for &q in &neighbors[p] {
                if labels[q].is_none() {
                    labels[q] = Some(next);
                    if core[q] {
                        stack.push(q);
                    }
                }
            }
        }
        next += 1;
    }
    labels
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CredibleRegion {
    /// Indices into the chain-major draw sequence.
    pub kept_samples: Vec<usize>,
    /// The box corners under each kept sample's forward transform.
    pub polygon_cloud: Vec<[Point; 4]>,
    pub coverage: f64,
    pub kept_fraction: f64,
    pub epsilon: f64,
    pub n_clustered: usize,
}

impl CredibleRegion {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub const MIN_PTS: usize = 5;

/// Maximum number of draws clustered; longer runs are thinned evenly.
pub const MAX_CLUSTER_POINTS: usize = 2000;

fn cluster_features(t: &SimilarityParams) -> Vec<f64> {
    vec![t.theta[0], t.theta[1], t.sigma[0].ln(), t.sigma[1].ln(), t.omega]
}

/// Largest-cluster fraction and cluster count at `eps`.
fn cluster_at(points: &[Vec<f64>], eps: f64) -> (f64, usize, Vec<Option<usize>>) {
    let labels = dbscan(points, eps, MIN_PTS);
    let k = labels.iter().flatten().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for l in labels.iter().flatten() {
        sizes[*l] += 1;
    }
    let largest = sizes.iter().copied().max().unwrap_or(0);
    (largest as f64 / points.len() as f64, k, labels)
}

/// Draws in the largest DBSCAN cluster of the standardized forward
/// parameters, with epsilon bisected so the cluster holds `coverage +- 0.02`.
pub fn credible_region(draws: &PosteriorDraws, bbox: &BoundingBox, coverage: f64) -> Result<CredibleRegion> {
    let states: Vec<&PosteriorState> = draws.all_states().collect();
    credible_region_of(&states.iter().map(|s| s.fwd).collect::<Vec<_>>(), bbox, coverage)
}

pub fn credible_region_of(samples: &[SimilarityParams], bbox: &BoundingBox, coverage: f64) -> Result<CredibleRegion> {
    if samples.len() < 100 {
        return Err(Error::Precondition(format!("need at least 100 draws, got {}", samples.len())));
    }
    if !(coverage > 0.5 && coverage < 1.0) {
        return Err(Error::Precondition(format!("coverage {coverage} outside (0.5, 1)")));
    }
    let stride = samples.len().div_ceil(MAX_CLUSTER_POINTS);
    let idx: Vec<usize> = (0..samples.len()).step_by(stride).collect();
    let raw: Vec<Vec<f64>> = idx.iter().map(|&i| cluster_features(&samples[i])).collect();
    let d = raw[0].len();
    let n = raw.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| raw.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| {
            let v = (raw.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            if v <= 1e-12 * (1.0 + mean[j].abs()) {
                0.0
            } else {
                v
            }
        })
        .collect();
    let z: Vec<Vec<f64>> = raw
        .iter()
        .map(|r| {
            (0..d)
                .map(|j| if sd[j] > 0.0 { (r[j] - mean[j]) / sd[j] } else { 0.0 })
                .collect()
        })
        .collect();
    let build = |labels: Option<&[Option<usize>]>, eps: f64| {
        let kept_local: Vec<usize> = match labels {
            None => (0..idx.len()).collect(),
            Some(l) => {
                let k = l.iter().flatten().copied().max().map_or(0, |m| m + 1);
                let mut sizes = vec![0usize; k];
                for c in l.iter().flatten() {
                    sizes[*c] += 1;
                }
                let big = (0..k).max_by_key(|c| sizes[*c]).unwrap_or(0);
                (0..idx.len()).filter(|i| l[*i] == Some(big)).collect()
            }
        };
        let kept_samples: Vec<usize> = kept_local.iter().map(|&i| idx[i]).collect();
        let polygon_cloud = kept_samples
            .iter()
            .map(|&i| bbox.warp(&samples[i]).corners)
            .collect();
        CredibleRegion {
            kept_fraction: kept_local.len() as f64 / idx.len() as f64,
            n_clustered: idx.len(),
            kept_samples,
            polygon_cloud,
            coverage,
            epsilon: eps,
        }
    };
    if sd.iter().all(|s| *s == 0.0) {
        return Ok(build(None, 0.0));
    }

    let band = |f: f64| (f - coverage).abs() <= 0.02;
    let mut lo = 0.0;
    let mut hi = 2.0 * (d as f64).sqrt();
    while cluster_at(&z, hi).0 < coverage {
        hi *= 2.0;
    }
    let mut table = Vec::new();
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let (f, k, labels) = cluster_at(&z, mid);
        table.push((mid, k, f));
        if band(f) {
            return Ok(build(Some(&labels), mid));
        }
        if f < coverage {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-9 * hi {
            break;
        }
    }
    table.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut msg = String::from("epsilon,clusters,largest_fraction\n");
    for (e, k, f) in table {
        msg.push_str(&format!("{},{},{}\n", fmt_f64(e), k, fmt_f64(f)));
    }
    Err(Error::NoSingleClusterEpsilon(msg))
}

/// Writes `loo` per-observation results as CSV.
pub fn write_loo_csv(loo: &LooResult, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "observation,elpd,khat").map_err(io)?;
    for (i, (e, k)) in loo.pointwise_elpd.iter().zip(&loo.khat).enumerate() {
        writeln!(w, "{i},{},{}", fmt_f64(*e), fmt_f64(*k)).map_err(io)?;
    }
    w.flush().map_err(io)
}
