//! Constant-trend Gaussian-process (kriging) interpolation with an
//! exponential covariance kernel.
//!
//! The covariance matrix of the observed sites is factorized once at
//! construction; afterwards each prediction is a weighted sum of kernel
//! evaluations against the sites:
//!
//! ```text
//! Y^(q) = m + sum_i C(s_i, q) * w_i,   w = C^-1 (Y - m 1),   m = 1'C^-1 Y / 1'C^-1 1
//! ```

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::VoxelGrid;
use crate::transform::{Affine, Point};

/// Nugget floor, as a fraction of the sill, always added to the diagonal
/// outside [`NuggetMode::Exact`].
pub const NUGGET_FLOOR: f64 = 1e-8;

/// A stationary isotropic covariance function of distance.
pub trait Kernel: Send + Sync {
    fn cov(&self, dist: f64) -> f64;
}

/// `sill * exp(-decay * dist)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exponential {
    pub sill: f64,
    pub decay: f64,
}

impl Kernel for Exponential {
    #[inline]
    fn cov(&self, dist: f64) -> f64 {
        self.sill * (-self.decay * dist).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Kernel variance.
    pub sill: f64,
    /// Inverse range per voxel of distance.
    pub decay: f64,
    /// Diagonal-only variance.
    pub nugget: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NuggetMode {
    /// Add the stability floor `NUGGET_FLOOR * sill` to the diagonal.
    Floor,
    /// Use the nugget exactly as given (interpolates observed sites exactly at 0).
    Exact,
}

/// Exported kernel summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KrigingReport {
    pub sill: f64,
    pub decay: f64,
    pub nugget: f64,
    pub log_likelihood: f64,
    /// The selected decay sits on the edge of the search grid.
    pub decay_at_boundary: bool,
}

/// Search grid for [`KrigingModel::fit_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub decays: Vec<f64>,
    /// Candidate nugget-to-sill ratios.
    pub nugget_ratios: Vec<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            decays: log_space(0.02, 4.0, 10),
            nugget_ratios: vec![0.0, 1e-4, 1e-2, 0.1, 1.0, 10.0],
        }
    }
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// `exp(x)` for `x <= 0`, branch-free so the prediction loop vectorizes.
///
/// Range reduction `x = k ln2 + r` with `|r| <= ln2 / 2`, then a degree-13
/// Taylor polynomial; relative error stays below 1e-15. Inputs below -700
/// are clamped, which only matters for contributions far under 1e-300.
#[inline(always)]
pub fn exp_neg(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_16e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const MAGIC: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    let x = if x < -700.0 { -700.0 } else { x };
    let kf = x * std::f64::consts::LOG2_E + MAGIC;
    let kbits = kf.to_bits();
    let kr = kf - MAGIC;
    let r = (x - kr * LN2_HI) - kr * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let scale = f64::from_bits(kbits.wrapping_sub(MAGIC.to_bits()).wrapping_add(1023) << 52);
    p * scale
}

/// A fitted interpolator for one map.
#[derive(Debug, Clone)]
pub struct KrigingModel {
    xs: Vec<f64>,
    ys: Vec<f64>,
    values: Vec<f64>,
    params: KernelParams,
    chol: Cholesky<f64, Dyn>,
    /// `sill * C^-1 (Y - m 1)`, pre-scaled for the prediction loop.
    weights: Vec<f64>,
    kriging_mean: f64,
    log_likelihood: f64,
    decay_at_boundary: bool,
}

fn distance(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn covariance_matrix(sites: &[Point], kernel: &impl Kernel, diag: f64) -> DMatrix<f64> {
    let n = sites.len();
    let mut c = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            let v = kernel.cov(distance(sites[i], sites[j]));
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
        c[(j, j)] += diag;
    }
    c
}

/// Cholesky with nugget escalation, returning the factor and the nugget used.
fn factorize(sites: &[Point], kernel: &Exponential, nugget: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut extra = 0.0;
    for _ in 0..8 {
        let c = covariance_matrix(sites, kernel, nugget + extra);
        if let Some(ch) = Cholesky::new(c) {
            return Ok((ch, nugget + extra));
        }
        extra = if extra == 0.0 {
            1e-10 * kernel.sill
        } else {
            extra * 100.0
        };
    }
    Err(Error::Factorization)
}

struct Profile {
    log_likelihood: f64,
    sill: f64,
}

/// Profile log-likelihood of the constant-mean GP with correlation
/// `exp(-decay d) + ratio * I`, the variance scale maximized out.
fn profile_likelihood(sites: &[Point], values: &DVector<f64>, decay: f64, ratio: f64) -> Option<Profile> {
    let n = sites.len() as f64;
    let unit = Exponential { sill: 1.0, decay };
    let diag = ratio.max(NUGGET_FLOOR);
    let (ch, _) = factorize(sites, &unit, diag).ok()?;
    let ones = DVector::from_element(sites.len(), 1.0);
    let ci1 = ch.solve(&ones);
    let mean = ci1.dot(values) / ci1.dot(&ones);
    let resid = values - DVector::from_element(sites.len(), mean);
    let quad = resid.dot(&ch.solve(&resid));
    let scale = quad / n;
    if !(scale > 0.0) {
        return None;
    }
    let ll = -0.5 * n * (scale.ln() + 1.0 + (2.0 * std::f64::consts::PI).ln())
        - 0.5 * ch.ln_determinant();
    ll.is_finite().then_some(Profile {
        log_likelihood: ll,
        sill: scale,
    })
}

impl KrigingModel {
    /// Fits kernel parameters to the masked-in voxels of `grid` by profiled
    /// maximum likelihood over the default search grid.
    pub fn fit(grid: &VoxelGrid) -> Result<Self> {
        Self::fit_with(grid, &FitConfig::default())
    }

    pub fn fit_with(grid: &VoxelGrid, cfg: &FitConfig) -> Result<Self> {
        let region = grid.full_region();
        let sites = region.points();
        let values = region.values(grid);
        Self::fit_points(sites, values, cfg)
    }

    /// Fits kernel parameters to scattered observations.
    pub fn fit_points(sites: Vec<Point>, values: Vec<f64>, cfg: &FitConfig) -> Result<Self> {
        if sites.len() < 10 {
            return Err(Error::DegenerateField(format!(
                "need at least 10 masked-in voxels, got {}",
                sites.len()
            )));
        }
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if !(hi - lo > 1e-12 * hi.abs().max(lo.abs()).max(f64::MIN_POSITIVE)) {
            return Err(Error::DegenerateField("map is constant".into()));
        }
        let y = DVector::from_vec(values.clone());
        let candidates: Vec<(usize, f64)> = cfg
            .decays
            .iter()
            .enumerate()
            .flat_map(|(i, &d)| cfg.nugget_ratios.iter().map(move |_| (i, d)))
            .collect();
        let ratios: Vec<f64> = cfg
            .decays
            .iter()
            .flat_map(|_| cfg.nugget_ratios.iter().copied())
            .collect();
        let best = candidates
            .par_iter()
            .zip(ratios.par_iter())
            .filter_map(|(&(i, decay), &ratio)| {
                profile_likelihood(&sites, &y, decay, ratio).map(|p| (p, i, decay, ratio))
            })
            .collect::<Vec<_>>()
            .into_iter()
            .max_by(|a, b| a.0.log_likelihood.total_cmp(&b.0.log_likelihood))
            .ok_or(Error::Factorization)?;
        let (profile, idx, decay, ratio) = best;
        let params = KernelParams {
            sill: profile.sill,
            decay,
            nugget: ratio * profile.sill,
        };
        let mut model = Self::with_params(sites, values, params, NuggetMode::Floor)?;
        model.log_likelihood = profile.log_likelihood;
        model.decay_at_boundary = cfg.decays.len() > 1 && (idx == 0 || idx + 1 == cfg.decays.len());
        Ok(model)
    }

    /// Builds the interpolator for fixed kernel parameters.
    pub fn with_params(
        sites: Vec<Point>,
        values: Vec<f64>,
        params: KernelParams,
        mode: NuggetMode,
    ) -> Result<Self> {
        if sites.len() != values.len() || sites.is_empty() {
            return Err(Error::DegenerateField(format!(
                "{} sites but {} values",
                sites.len(),
                values.len()
            )));
        }
        if !(params.sill > 0.0 && params.decay > 0.0 && params.nugget >= 0.0) {
            return Err(Error::DegenerateField(format!("invalid kernel {params:?}")));
        }
        let kernel = Exponential {
            sill: params.sill,
            decay: params.decay,
        };
        let nugget = match mode {
            NuggetMode::Floor => params.nugget.max(NUGGET_FLOOR * params.sill),
            NuggetMode::Exact => params.nugget,
        };
        let (chol, nugget) = factorize(&sites, &kernel, nugget)?;
        let n = sites.len();
        let ones = DVector::from_element(n, 1.0);
        let y = DVector::from_vec(values.clone());
        let ci1 = chol.solve(&ones);
        let kriging_mean = ci1.dot(&y) / ci1.dot(&ones);
        let resid = &y - DVector::from_element(n, kriging_mean);
        let w = chol.solve(&resid);
        let weights = w.iter().map(|&v| v * params.sill).collect();
        let log_likelihood = -0.5
            * (resid.dot(&w) + chol.ln_determinant() + n as f64 * (2.0 * std::f64::consts::PI).ln());
        Ok(Self {
            xs: sites.iter().map(|p| p[0]).collect(),
            ys: sites.iter().map(|p| p[1]).collect(),
            values,
            params: KernelParams { nugget, ..params },
            chol,
            weights,
            kriging_mean,
            log_likelihood,
            decay_at_boundary: false,
        })
    }

    pub fn params(&self) -> KernelParams {
        self.params
    }

    pub fn kriging_mean(&self) -> f64 {
        self.kriging_mean
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sites(&self) -> Vec<Point> {
        self.xs.iter().zip(&self.ys).map(|(&x, &y)| [x, y]).collect()
    }

    /// Solves `C z = b` with the cached factorization.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.chol
            .solve(&DVector::from_column_slice(b))
            .iter()
            .copied()
            .collect()
    }

    pub fn report(&self) -> KrigingReport {
        KrigingReport {
            sill: self.params.sill,
            decay: self.params.decay,
            nugget: self.params.nugget,
            log_likelihood: self.log_likelihood,
            decay_at_boundary: self.decay_at_boundary,
        }
    }

    /// Predicts at one point.
    #[inline]
    pub fn interpolate_at(&self, q: Point) -> f64 {
        const CHUNK: usize = 32;
        let decay = self.params.decay;
        let (qx, qy) = (q[0], q[1]);
        // fixed-size passes over short buffers keep each loop vectorizable
        let mut buf = [0.0; CHUNK];
        let mut total = 0.0;
        for ((x, y), w) in self
            .xs
            .chunks(CHUNK)
            .zip(self.ys.chunks(CHUNK))
            .zip(self.weights.chunks(CHUNK))
        {
            let n = x.len();
            for i in 0..n {
                let dx = x[i] - qx;
                let dy = y[i] - qy;
                buf[i] = -decay * (dx * dx + dy * dy).sqrt();
            }
            for v in buf[..n].iter_mut() {
                *v = exp_neg(*v);
            }
            let mut acc = [0.0; 4];
            for (i, (b, wi)) in buf[..n].iter().zip(w).enumerate() {
                acc[i % 4] += b * wi;
            }
            total += (acc[0] + acc[1]) + (acc[2] + acc[3]);
        }
        self.kriging_mean + total
    }

    pub fn interpolate(&self, query: &[Point]) -> Vec<f64> {
        query.iter().map(|&q| self.interpolate_at(q)).collect()
    }

    /// Values at `t(s)` for each `s` in `sites`.
    pub fn interpolate_under_transform(&self, t: &impl Affine, sites: &[Point]) -> Vec<f64> {
        let m = t.matrix();
        sites.iter().map(|&s| self.interpolate_at(m.apply(s))).collect()
    }
}

/// A map together with its fitted interpolator.
#[derive(Debug, Clone)]
pub struct FittedMap {
    pub grid: VoxelGrid,
    pub model: KrigingModel,
}

impl FittedMap {
    pub fn fit(grid: VoxelGrid) -> Result<Self> {
        let model = KrigingModel::fit(&grid)?;
        Ok(Self { grid, model })
    }

    pub fn fit_with(grid: VoxelGrid, cfg: &FitConfig) -> Result<Self> {
        let model = KrigingModel::fit_with(&grid, cfg)?;
        Ok(Self { grid, model })
    }
}
