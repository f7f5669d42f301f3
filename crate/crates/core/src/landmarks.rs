//! Landmark detection and landmark-driven prior estimation.
//!
//! Landmarks are strict 8-neighborhood maxima that survive an adaptive
//! (local-mean) threshold. The prior transform is found by trying every
//! subset of floating landmarks against the query landmarks, fitting an
//! anisotropic Procrustes map to each, screening candidates with the
//! diffusion constraint `||I - A||_F^2`, and ranking survivors by the
//! photometric error criterion.
//!
//! Transforms map reference coordinates to floating coordinates, the same
//! direction the registration loss uses.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix5, Vector5};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoundingBox, Region, VoxelGrid};
use crate::kriging::{log_space, FittedMap};
use crate::transform::{invert, Affine, AffineMatrix, Point, SimilarityParams};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<Point>,
    pub intensities: Vec<f64>,
}

impl LandmarkSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The landmarks lying inside `bbox`.
    pub fn within(&self, bbox: &BoundingBox) -> LandmarkSet {
        let (points, intensities) = self
            .points
            .iter()
            .zip(&self.intensities)
            .filter(|(p, _)| bbox.contains(**p))
            .map(|(p, v)| (*p, *v))
            .unzip();
        LandmarkSet {
            points,
            intensities,
        }
    }

    /// Keeps the `n` most intense landmarks, in their original order.
    pub fn strongest(&self, n: usize) -> LandmarkSet {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.intensities[b].total_cmp(&self.intensities[a]));
        idx.truncate(n);
        idx.sort_unstable();
        LandmarkSet {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            intensities: idx.iter().map(|&i| self.intensities[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    /// Side of the local-mean window; `None` uses `ceil(width / 8)`.
    pub window: Option<usize>,
    /// Bradley sensitivity `t`: keep voxels above `(1 - t) * local mean`.
    pub sensitivity: f64,
    /// Also require `value > min + floor * (max - min)`.
    pub floor: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            window: None,
            sensitivity: 0.15,
            floor: 0.1,
        }
    }
}

pub fn detect_landmarks(grid: &VoxelGrid) -> LandmarkSet {
    detect_landmarks_with(grid, &DetectConfig::default())
}

pub fn detect_landmarks_with(grid: &VoxelGrid, cfg: &DetectConfig) -> LandmarkSet {
    let (w, h) = (grid.width(), grid.height());
    let Some((lo, hi)) = grid.range() else {
        return LandmarkSet::default();
    };
    if !(hi > lo) {
        return LandmarkSet::default();
    }
    let floor = lo + cfg.floor * (hi - lo);

    // summed-area tables of masked-in values and counts, padded by one
    let mut sum = vec![0.0; (w + 1) * (h + 1)];
    let mut cnt = vec![0.0; (w + 1) * (h + 1)];
    for y in 0..h {
        for x in 0..w {
            let (v, c) = if grid.is_in(x, y) {
                (grid.value(x, y), 1.0)
            } else {
                (0.0, 0.0)
            };
            let i = (y + 1) * (w + 1) + x + 1;
            sum[i] = v + sum[i - 1] + sum[i - w - 1] - sum[i - w - 2];
            cnt[i] = c + cnt[i - 1] + cnt[i - w - 1] - cnt[i - w - 2];
        }
    }
    let rect = |t: &[f64], x0: usize, y0: usize, x1: usize, y1: usize| {
        t[(y1 + 1) * (w + 1) + x1 + 1] - t[y0 * (w + 1) + x1 + 1] - t[(y1 + 1) * (w + 1) + x0]
            + t[y0 * (w + 1) + x0]
    };
    let half = cfg.window.unwrap_or_else(|| w.div_ceil(8)).max(1) / 2;

    let mut out = LandmarkSet::default();
    for y in 0..h {
        for x in 0..w {
            if !grid.is_in(x, y) {
                continue;
            }
            let v = grid.value(x, y);
            if v <= floor {
                continue;
            }
            let (x0, y0) = (x.saturating_sub(half), y.saturating_sub(half));
            let (x1, y1) = ((x + half).min(w - 1), (y + half).min(h - 1));
            let mean = rect(&sum, x0, y0, x1, y1) / rect(&cnt, x0, y0, x1, y1);
            if v <= (1.0 - cfg.sensitivity) * mean {
                continue;
            }
            let is_peak = (-1i64..=1).all(|dy| {
                (-1i64..=1).all(|dx| {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if (dx == 0 && dy == 0) || nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64
                    {
                        return true;
                    }
                    let (nx, ny) = (nx as usize, ny as usize);
                    !grid.is_in(nx, ny) || v > grid.value(nx, ny)
                })
            });
            if is_peak {
                out.points.push([x as f64, y as f64]);
                out.intensities.push(v);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcrustesFit {
    pub transform: SimilarityParams,
    /// `sum_i ||dst_i - T(src_i)||^2`.
    pub rss: f64,
}

/// Centered cross moments of a matched point set.
struct Moments {
    src_mean: Point,
    dst_mean: Point,
    sxx: f64,
    syy: f64,
    // b_k a_l summed, b = centered dst, a = centered src
    bxax: f64,
    byax: f64,
    bxay: f64,
    byay: f64,
    bb: f64,
}

impl Moments {
    fn new(src: &[Point], dst: &[Point]) -> Self {
        let n = src.len() as f64;
        let mean = |p: &[Point]| {
            let s = p.iter().fold([0.0, 0.0], |a, q| [a[0] + q[0], a[1] + q[1]]);
            [s[0] / n, s[1] / n]
        };
        let (sm, dm) = (mean(src), mean(dst));
        let mut m = Moments {
            src_mean: sm,
            dst_mean: dm,
            sxx: 0.0,
            syy: 0.0,
            bxax: 0.0,
            byax: 0.0,
            bxay: 0.0,
            byay: 0.0,
            bb: 0.0,
        };
        for (s, d) in src.iter().zip(dst) {
            let (ax, ay) = (s[0] - sm[0], s[1] - sm[1]);
            let (bx, by) = (d[0] - dm[0], d[1] - dm[1]);
            m.sxx += ax * ax;
            m.syy += ay * ay;
            m.bxax += bx * ax;
            m.byax += by * ax;
            m.bxay += bx * ay;
            m.byay += by * ay;
            m.bb += bx * bx + by * by;
        }
        m
    }

    fn scales(&self, omega: f64) -> [f64; 2] {
        let (s, c) = omega.sin_cos();
        [
            ((c * self.bxax + s * self.byax) / self.sxx).max(1e-9),
            ((-s * self.bxay + c * self.byay) / self.syy).max(1e-9),
        ]
    }

    fn rss(&self, omega: f64, sigma: [f64; 2]) -> f64 {
        let (s, c) = omega.sin_cos();
        let px = c * self.bxax + s * self.byax;
        let py = -s * self.bxay + c * self.byay;
        (self.bb - 2.0 * (sigma[0] * px + sigma[1] * py)
            + sigma[0] * sigma[0] * self.sxx
            + sigma[1] * sigma[1] * self.syy)
            .max(0.0)
    }

    fn profile(&self, omega: f64) -> f64 {
        self.rss(omega, self.scales(omega))
    }

    /// Best rotation for fixed scales: maximizes `sum b . R D a`.
    fn rotation(&self, sigma: [f64; 2]) -> f64 {
        let dot = sigma[0] * self.bxax + sigma[1] * self.byay;
        let cross = sigma[0] * self.byax - sigma[1] * self.bxay;
        cross.atan2(dot)
    }

    fn params(&self, omega: f64, sigma: [f64; 2]) -> SimilarityParams {
        let mut t = SimilarityParams::new([0.0, 0.0], sigma, omega);
        let moved = t.apply(self.src_mean);
        t.theta = [self.dst_mean[0] - moved[0], self.dst_mean[1] - moved[1]];
        t
    }
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() < 1e-15 {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Least-squares similarity with per-axis scales mapping `src` onto `dst`.
pub fn procrustes_anisotropic(src: &[Point], dst: &[Point]) -> Result<ProcrustesFit> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(Error::Precondition(format!(
            "need equal counts of at least 3 points, got {} and {}",
            src.len(),
            dst.len()
        )));
    }
    let m = Moments::new(src, dst);
    let scatter_cross: f64 = src
        .iter()
        .map(|s| (s[0] - m.src_mean[0]) * (s[1] - m.src_mean[1]))
        .sum();
    let det = m.sxx * m.syy - scatter_cross * scatter_cross;
    let tr = m.sxx + m.syy;
    if !(tr > 0.0) || det <= 1e-10 * tr * tr {
        return Err(Error::DegenerateConfiguration(
            "source landmarks are collinear".into(),
        ));
    }

    // global search over the admissible rotation range, then golden refinement
    const GRID: usize = 720;
    let step = PI / GRID as f64;
    let grid_omega = |j: usize| -FRAC_PI_2 + step * (j as f64 + 0.5);
    let best_j = (0..GRID)
        .min_by(|&a, &b| m.profile(grid_omega(a)).total_cmp(&m.profile(grid_omega(b))))
        .unwrap_or(0);
    let lo = (grid_omega(best_j) - step).max(-FRAC_PI_2 + 1e-12);
    let hi = (grid_omega(best_j) + step).min(FRAC_PI_2 - 1e-12);
    let mut omega = golden_min(|w| m.profile(w), lo, hi);
    let mut sigma = m.scales(omega);
    let mut rss = m.rss(omega, sigma);

    // alternating closed-form updates polish the last digits
    for _ in 0..100 {
        let w = m.rotation(sigma);
        if w.abs() >= FRAC_PI_2 {
            break;
        }
        let s = m.scales(w);
        let r = m.rss(w, s);
        if r > rss {
            break;
        }
        let delta = rss - r;
        (omega, sigma, rss) = (w, s, r);
        if delta < 1e-12 {
            break;
        }
    }
    let mut transform = m.params(omega, sigma);
    let mut rss = residual_ss(&transform, src, dst);
    for _ in 0..20 {
        let Some(next) = gauss_newton_step(&transform, src, dst) else {
            break;
        };
        let r = residual_ss(&next, src, dst);
        if !(r < rss) {
            break;
        }
        (transform, rss) = (next, r);
    }
    Ok(ProcrustesFit { transform, rss })
}

fn residual_ss(t: &SimilarityParams, src: &[Point], dst: &[Point]) -> f64 {
    src.iter()
        .zip(dst)
        .map(|(s, d)| {
            let p = t.apply(*s);
            (p[0] - d[0]).powi(2) + (p[1] - d[1]).powi(2)
        })
        .sum()
}

/// One Gauss-Newton step on the point residuals; `None` if it leaves the
/// admissible parameter range or the normal equations are singular.
fn gauss_newton_step(t: &SimilarityParams, src: &[Point], dst: &[Point]) -> Option<SimilarityParams> {
    let (sn, cs) = t.omega.sin_cos();
    let [sx, sy] = t.sigma;
    let mut jtj = Matrix5::zeros();
    let mut jtr = Vector5::zeros();
    for (s, d) in src.iter().zip(dst) {
        let p = t.apply(*s);
        let r = [p[0] - d[0], p[1] - d[1]];
        // d/d(tx, ty, sx, sy, omega) of T(s)
        let gx = Vector5::new(1.0, 0.0, cs * s[0], -sn * s[1], -sx * sn * s[0] - sy * cs * s[1]);
        let gy = Vector5::new(0.0, 1.0, sn * s[0], cs * s[1], sx * cs * s[0] - sy * sn * s[1]);
        jtj += gx * gx.transpose() + gy * gy.transpose();
        jtr += gx * r[0] + gy * r[1];
    }
    let step = jtj.cholesky()?.solve(&jtr);
    let w = t.to_array();
    let next = SimilarityParams::from_array(std::array::from_fn(|i| w[i] - step[i]));
    next.is_valid().then_some(next)
}

/// `||I - A||_F^2` for the linear part of `t`.
pub fn diffusion_constraint(t: &impl Affine) -> f64 {
    let m = t.matrix();
    (1.0 - m.a11).powi(2) + m.a12.powi(2) + m.a21.powi(2) + (1.0 - m.a22).powi(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pec {
    pub criterion: f64,
    pub b: f64,
    pub b_rv: f64,
}

/// Slope and mean squared residual of the no-intercept regression of `y` on `x`.
fn slope_mse(y: &[f64], x: &[f64]) -> Result<(f64, f64)> {
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let scale: f64 = y.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    if !(sxx > 1e-300) || !(sxx > 1e-24 * scale) {
        return Err(Error::UninformativeRegion(
            "interpolated regressor is identically zero".into(),
        ));
    }
    let b = x.iter().zip(y).map(|(a, c)| a * c).sum::<f64>() / sxx;
    let mse = x.iter().zip(y).map(|(a, c)| (c - b * a).powi(2)).sum::<f64>() / x.len() as f64;
    Ok((b, mse))
}

/// Photometric error criterion of `t` between the two maps over their
/// regions, with the intensity factors fitted by no-intercept regression.
pub fn pec(
    reference: &FittedMap,
    floating: &FittedMap,
    t: &SimilarityParams,
    region_r: &Region,
    region_y: &Region,
) -> Result<Pec> {
    if region_r.is_empty() || region_y.is_empty() {
        return Err(Error::UninformativeRegion("empty region".into()));
    }
    let r = region_r.values(&reference.grid);
    let y_at_t = floating
        .model
        .interpolate_under_transform(t, &region_r.points());
    let (b, fwd) = slope_mse(&r, &y_at_t)?;
    let y = region_y.values(&floating.grid);
    let r_at_inv = reference
        .model
        .interpolate_under_transform(&invert(t), &region_y.points());
    let (b_rv, rev) = slope_mse(&y, &r_at_inv)?;
    Ok(Pec {
        criterion: fwd + rev,
        b,
        b_rv,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Landmark distance bound; `None` uses the number of query landmarks.
    pub d: Option<f64>,
    pub alpha_max: f64,
    pub n_alpha: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            d: None,
            alpha_max: 2.0,
            n_alpha: 20,
        }
    }
}

fn nan_if_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// Prior hyper-parameters for the registration posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationPrior {
    pub m0: AffineMatrix,
    /// Exact inverse of `m0`.
    pub m0_rv: AffineMatrix,
    pub b0: f64,
    pub b0_rv: f64,
    /// `[query index, floating index]` pairs.
    pub matched_pairs: Vec<[usize; 2]>,
    /// `NaN` (JSON `null`) when the prior was not estimated from landmarks.
    #[serde(deserialize_with = "nan_if_null")]
    pub alpha: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub pec: f64,
    /// `m0` as similarity parameters.
    pub transform: SimilarityParams,
    pub query_points: Vec<Point>,
    pub floating_points: Vec<Point>,
}

impl RegistrationPrior {
    /// A prior centered on `t` with unit intensity factors.
    pub fn from_transform(t: SimilarityParams) -> Self {
        let m0 = t.to_matrix();
        Self {
            m0,
            m0_rv: invert(&t),
            b0: 1.0,
            b0_rv: 1.0,
            matched_pairs: Vec::new(),
            alpha: f64::NAN,
            pec: f64::NAN,
            transform: t,
            query_points: Vec::new(),
            floating_points: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// One correspondence hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Floating landmark index matched to each query landmark.
    pub order: Vec<usize>,
    pub transform: SimilarityParams,
    /// `||p^Y - T(p^R)||^2 + ||p^R - T^-1(p^Y)||^2`.
    pub distance: f64,
    /// `||I - A||^2 + ||I - A^-1||^2`.
    pub constraint: f64,
}

fn permutations_of(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations_of(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// For every subset of floating landmarks, the ordering with the smallest
/// forward diffusion constraint among those Procrustes can fit.
pub fn enumerate_candidates(query: &[Point], floating: &[Point]) -> Vec<Candidate> {
    let k = query.len();
    combinations(floating.len(), k)
        .par_iter()
        .filter_map(|subset| {
            permutations_of(subset)
                .into_iter()
                .filter_map(|order| {
                    let dst: Vec<Point> = order.iter().map(|&j| floating[j]).collect();
                    let fit = procrustes_anisotropic(query, &dst).ok()?;
                    Some((order, dst, fit))
                })
                .min_by(|a, b| {
                    diffusion_constraint(&a.2.transform)
                        .total_cmp(&diffusion_constraint(&b.2.transform))
                })
        })
        .map(|(order, dst, fit)| {
            let t = fit.transform;
            let inv = invert(&t);
            let back: f64 = dst
                .iter()
                .zip(query)
                .map(|(d, q)| {
                    let p = inv.apply(*d);
                    (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)
                })
                .sum();
            Candidate {
                order,
                transform: t,
                distance: fit.rss + back,
                constraint: diffusion_constraint(&t) + diffusion_constraint(&inv),
            }
        })
        .collect()
}

/// Detects floating landmarks and runs [`estimate_prior_from_landmarks`].
pub fn estimate_prior(
    reference: &FittedMap,
    floating: &FittedMap,
    query: &LandmarkSet,
    query_box: &BoundingBox,
    cfg: &PriorConfig,
) -> Result<RegistrationPrior> {
    let flt = detect_landmarks(&floating.grid);
    estimate_prior_from_landmarks(reference, floating, query, &flt, query_box, cfg)
}

pub fn estimate_prior_from_landmarks(
    reference: &FittedMap,
    floating: &FittedMap,
    query: &LandmarkSet,
    flt: &LandmarkSet,
    query_box: &BoundingBox,
    cfg: &PriorConfig,
) -> Result<RegistrationPrior> {
    let k = query.len();
    if k < 3 {
        return Err(Error::Precondition(format!(
            "need at least 3 query landmarks, got {k}"
        )));
    }
    if flt.len() < k {
        return Err(Error::NoAdmissibleCorrespondence(format!(
            "floating map has {} landmarks but {k} query landmarks were given",
            flt.len()
        )));
    }
    if !(cfg.alpha_max > 0.0) || cfg.n_alpha == 0 {
        return Err(Error::Precondition("alpha grid is empty".into()));
    }
    let d = cfg.d.unwrap_or(k as f64);
    let alphas = log_space(cfg.alpha_max * 1e-3, cfg.alpha_max, cfg.n_alpha);

    let candidates = enumerate_candidates(&query.points, &flt.points);
    let admissible: Vec<&Candidate> = candidates
        .iter()
        .filter(|c| c.distance <= 2.0 * d && c.constraint < cfg.alpha_max)
        .collect();
    if admissible.is_empty() {
        let diag = candidates
            .iter()
            .min_by(|a, b| {
                (a.distance / (2.0 * d)).max(a.constraint / cfg.alpha_max).total_cmp(
                    &(b.distance / (2.0 * d)).max(b.constraint / cfg.alpha_max),
                )
            })
            .map(|c| {
                format!(
                    "best infeasible candidate {:?}: distance {:.6} (bound {:.6}), constraint {:.6} (alpha_max {:.6})",
                    c.order,
                    c.distance,
                    2.0 * d,
                    c.constraint,
                    cfg.alpha_max
                )
            })
            .unwrap_or_else(|| "no candidate could be fitted".into());
        return Err(Error::NoAdmissibleCorrespondence(diag));
    }

    let region_r = query_box.region(&reference.grid);
    let scored: Vec<(&Candidate, Result<Pec>)> = admissible
        .par_iter()
        .map(|c| {
            let region_y = query_box.warp(&c.transform).region(&floating.grid);
            (*c, pec(reference, floating, &c.transform, &region_r, &region_y))
        })
        .collect();
    let scored: Vec<(&Candidate, Pec)> = scored
        .into_iter()
        .filter_map(|(c, p)| p.ok().map(|p| (c, p)))
        .collect();

    // C(alpha) is the best PEC among candidates admitted at alpha
    let mut best: Option<(f64, &Candidate, Pec)> = None;
    for &alpha in &alphas {
        let at_alpha = scored
            .iter()
            .filter(|(c, _)| c.constraint < alpha)
            .min_by(|a, b| a.1.criterion.total_cmp(&b.1.criterion));
        if let Some((c, p)) = at_alpha {
            if best.as_ref().is_none_or(|b| p.criterion < b.2.criterion) {
                best = Some((alpha, c, *p));
            }
        }
    }
    let (alpha, c, p) = best.ok_or_else(|| {
        Error::NoAdmissibleCorrespondence("every admissible candidate had an uninformative region".into())
    })?;
    if !(p.b > 0.0 && p.b_rv > 0.0) {
        return Err(Error::NoAdmissibleCorrespondence(format!(
            "selected correspondence has non-positive intensity factors b = {}, b' = {}",
            p.b, p.b_rv
        )));
    }
    let t = c.transform;
    Ok(RegistrationPrior {
        m0: t.to_matrix(),
        m0_rv: invert(&t),
        b0: p.b,
        b0_rv: p.b_rv,
        matched_pairs: c.order.iter().enumerate().map(|(i, &j)| [i, j]).collect(),
        alpha,
        pec: p.criterion,
        transform: t,
        query_points: query.points.clone(),
        floating_points: c.order.iter().map(|&j| flt.points[j]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kriging::FitConfig;
    use crate::transform::compose;
    use std::f64::consts::PI;

    fn bump(c: Point, s: f64) -> impl Fn(f64, f64) -> f64 {
        move |x, y| (-((x - c[0]).powi(2) + (y - c[1]).powi(2)) / (2.0 * s * s)).exp()
    }

    fn truth() -> SimilarityParams {
        SimilarityParams::new([2.0, -5.0], [0.8, 1.2], PI / 12.0)
    }

    const CENTERS: [Point; 4] = [[10.0, 12.0], [20.0, 10.0], [16.0, 21.0], [22.0, 20.0]];
    const AMPS: [f64; 4] = [1.0, 0.8, 0.9, 0.7];

    fn scene(p: Point) -> f64 {
        CENTERS
            .iter()
            .zip(AMPS)
            .map(|(c, a)| a * bump(*c, 2.5)(p[0], p[1]))
            .sum()
    }

    fn quick_fit() -> FitConfig {
        FitConfig {
            decays: log_space(0.05, 1.0, 4),
            nugget_ratios: vec![0.0, 1e-4],
        }
    }

    fn fitted(f: impl Fn(Point) -> f64) -> FittedMap {
        let g = VoxelGrid::from_fn(32, 32, |x, y| f([x, y])).unwrap();
        FittedMap::fit_with(g, &quick_fit()).unwrap()
    }

    fn brute_force_peaks(g: &VoxelGrid) -> Vec<Point> {
        let mut out = Vec::new();
        for y in 0..g.height() {
            for x in 0..g.width() {
                let v = g.value(x, y);
                let mut ok = true;
                for ny in y.saturating_sub(1)..=(y + 1).min(g.height() - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(g.width() - 1) {
                        if (nx, ny) != (x, y) && g.value(nx, ny) >= v {
                            ok = false;
                        }
                    }
                }
                if ok {
                    out.push([x as f64, y as f64]);
                }
            }
        }
        out
    }

    #[test]
    fn single_bump_one_landmark() {
        let g = VoxelGrid::from_fn(21, 21, bump([10.0, 10.0], 3.0)).unwrap();
        let l = detect_landmarks(&g);
        assert_eq!(l.points, vec![[10.0, 10.0]]);
        assert!((l.intensities[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_bumps_match_exhaustive_check() {
        let (a, b) = (bump([5.0, 5.0], 2.0), bump([15.0, 15.0], 2.0));
        let g = VoxelGrid::from_fn(21, 21, |x, y| a(x, y) + b(x, y)).unwrap();
        let l = detect_landmarks(&g);
        assert_eq!(l.points, brute_force_peaks(&g));
        assert_eq!(l.points, vec![[5.0, 5.0], [15.0, 15.0]]);
    }

    #[test]
    fn constant_map_has_no_landmarks() {
        let g = VoxelGrid::full(8, 8, vec![3.0; 64]).unwrap();
        assert!(detect_landmarks(&g).is_empty());
    }

    #[test]
    fn masked_out_neighbors_are_ignored() {
        let g = VoxelGrid::from_fn(21, 21, bump([10.0, 10.0], 3.0))
            .unwrap()
            .with_circular_mask([10.0, 10.0], 6.0)
            .unwrap();
        assert_eq!(detect_landmarks(&g).points, vec![[10.0, 10.0]]);
    }

    fn square() -> Vec<Point> {
        vec![[0.0, 0.0], [4.0, 1.0], [1.0, 5.0], [6.0, 7.0]]
    }

    #[test]
    fn procrustes_identity() {
        let fit = procrustes_anisotropic(&square(), &square()).unwrap();
        assert!(fit.rss < 1e-24, "{fit:?}");
        let t = fit.transform;
        assert!(t.theta[0].abs() < 1e-9 && t.theta[1].abs() < 1e-9);
        assert!((t.sigma[0] - 1.0).abs() < 1e-9 && (t.sigma[1] - 1.0).abs() < 1e-9);
        assert!(t.omega.abs() < 1e-9);
    }

    #[test]
    fn procrustes_recovers_exact_similarity() {
        let t = truth();
        let dst: Vec<Point> = square().iter().map(|p| t.apply(*p)).collect();
        let fit = procrustes_anisotropic(&square(), &dst).unwrap();
        assert!(fit.rss < 1e-8, "rss {}", fit.rss);
        let (a, b) = (fit.transform.to_array(), t.to_array());
        for i in 0..5 {
            assert!((a[i] - b[i]).abs() < 1e-8, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn procrustes_rejects_collinear() {
        let src = vec![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]];
        assert!(matches!(
            procrustes_anisotropic(&src, &src),
            Err(Error::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn diffusion_constraint_cases() {
        assert_eq!(diffusion_constraint(&SimilarityParams::IDENTITY), 0.0);
        let s = SimilarityParams::new([3.0, 1.0], [2.0, 1.0], 0.0);
        assert!((diffusion_constraint(&s) - 1.0).abs() < 1e-15);
        // direct evaluation of I - A for the stated truth
        let (sn, cs) = (PI / 12.0).sin_cos();
        let a = [[0.8 * cs, -1.2 * sn], [0.8 * sn, 1.2 * cs]];
        let direct = (1.0 - a[0][0]).powi(2) + a[0][1].powi(2) + a[1][0].powi(2) + (1.0 - a[1][1]).powi(2);
        assert!((diffusion_constraint(&truth()) - direct).abs() < 1e-14);
        let eps = 1e-7;
        let near = SimilarityParams::new([0.0, 0.0], [1.0 + eps, 1.0], eps);
        assert!(diffusion_constraint(&near) < 1e-12);
    }

    #[test]
    fn pec_trivial_and_warped_cases() {
        let r = fitted(scene);
        let region = BoundingBox::axis_aligned(6.0, 6.0, 26.0, 26.0).region(&r.grid);
        let id = SimilarityParams::IDENTITY;

        let p = pec(&r, &r, &id, &region, &region).unwrap();
        assert!((p.b - 1.0).abs() < 1e-6 && (p.b_rv - 1.0).abs() < 1e-6);
        assert!(p.criterion < 1e-10);

        let double = fitted(|s| 2.0 * scene(s));
        let p = pec(&r, &double, &id, &region, &region).unwrap();
        assert!((p.b - 0.5).abs() < 1e-6 && (p.b_rv - 2.0).abs() < 1e-6);
        assert!(p.criterion < 1e-9);

        let t = truth();
        let inv = invert(&t);
        let warped = fitted(|s| scene(inv.apply(s)));
        let bbox = BoundingBox::axis_aligned(6.0, 6.0, 26.0, 26.0);
        let at_truth = pec(&r, &warped, &t, &region, &bbox.warp(&t).region(&warped.grid)).unwrap();
        let at_id = pec(&r, &warped, &id, &region, &region).unwrap();
        assert!(at_truth.criterion < at_id.criterion);

        let mut shuffled = region.clone();
        shuffled.voxels.reverse();
        let again = pec(&r, &r, &id, &shuffled, &shuffled).unwrap();
        assert!((again.criterion - pec(&r, &r, &id, &region, &region).unwrap().criterion).abs() < 1e-15);
    }

    #[test]
    fn pec_zero_regressor_is_uninformative() {
        use crate::kriging::{KrigingModel, NuggetMode};
        let r = fitted(scene);
        let region = BoundingBox::axis_aligned(6.0, 6.0, 26.0, 26.0).region(&r.grid);
        let grid = VoxelGrid::full(32, 32, vec![0.0; 1024]).unwrap();
        let model = KrigingModel::with_params(
            grid.full_region().points(),
            vec![0.0; 1024],
            r.model.params(),
            NuggetMode::Floor,
        )
        .unwrap();
        let zero = FittedMap { grid, model };
        let id = SimilarityParams::IDENTITY;
        assert!(matches!(
            pec(&r, &zero, &id, &region, &region),
            Err(Error::UninformativeRegion(_))
        ));
    }

    fn query() -> LandmarkSet {
        LandmarkSet {
            points: CENTERS.to_vec(),
            intensities: AMPS.to_vec(),
        }
    }

    #[test]
    fn estimate_prior_recovers_exact_warp() {
        let t = truth();
        let inv = invert(&t);
        let r = fitted(scene);
        let y = fitted(|s| scene(inv.apply(s)));
        // true images in a shuffled order plus two distractors
        let mut pts: Vec<Point> = CENTERS.iter().map(|c| t.apply(*c)).collect();
        pts.swap(0, 2);
        pts.insert(1, [27.0, 3.0]);
        pts.push([3.0, 29.0]);
        let flt = LandmarkSet {
            intensities: vec![1.0; pts.len()],
            points: pts,
        };
        let bbox = BoundingBox::axis_aligned(6.0, 6.0, 26.0, 26.0);
        let prior = estimate_prior_from_landmarks(&r, &y, &query(), &flt, &bbox, &PriorConfig::default())
            .unwrap();
        assert!(prior.m0.frobenius_distance(&t.to_matrix()) < 1e-6);
        assert_eq!(prior.matched_pairs, vec![[0, 3], [1, 2], [2, 0], [3, 4]]);
        let round = compose(&prior.m0_rv, &prior.m0);
        assert!(round.frobenius_distance(&AffineMatrix::IDENTITY) < 1e-8);
        assert!(prior.b0 > 0.0 && prior.b0_rv > 0.0);
        let back = RegistrationPrior::from_json(&prior.to_json().unwrap()).unwrap();
        assert_eq!(back, prior);
    }

    #[test]
    fn estimate_prior_identity_pair() {
        let r = fitted(scene);
        let bbox = BoundingBox::axis_aligned(6.0, 6.0, 26.0, 26.0);
        let q = detect_landmarks(&r.grid).within(&bbox);
        assert_eq!(q.len(), 4);
        let prior = estimate_prior(&r, &r, &q, &bbox, &PriorConfig::default()).unwrap();
        assert!(prior.m0.frobenius_distance(&AffineMatrix::IDENTITY) < 1e-9);
        assert!((prior.b0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn estimate_prior_needs_enough_floating_landmarks() {
        let r = fitted(scene);
        let bbox = BoundingBox::axis_aligned(6.0, 6.0, 26.0, 26.0);
        let mut q = query();
        q.points.push([14.0, 14.0]);
        q.intensities.push(0.5);
        let flt = query();
        assert!(matches!(
            estimate_prior_from_landmarks(&r, &r, &q, &flt, &bbox, &PriorConfig::default()),
            Err(Error::NoAdmissibleCorrespondence(_))
        ));
    }

    #[test]
    fn no_admissible_correspondence_reports_best() {
        let r = fitted(scene);
        let bbox = BoundingBox::axis_aligned(6.0, 6.0, 26.0, 26.0);
        let far: Vec<Point> = CENTERS.iter().map(|c| [3.0 * c[0], 0.3 * c[1]]).collect();
        let flt = LandmarkSet {
            intensities: vec![1.0; 4],
            points: far,
        };
        let err = estimate_prior_from_landmarks(&r, &r, &query(), &flt, &bbox, &PriorConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::NoAdmissibleCorrespondence(ref m) if m.contains("best infeasible")));
    }

    #[test]
    fn combinatorics() {
        assert_eq!(combinations(5, 3).len(), 10);
        assert_eq!(permutations_of(&[1, 2, 3]).len(), 6);
        assert_eq!(permutations_of(&[7]).len(), 1);
    }

    #[test]
    fn prior_without_landmarks_round_trips_through_json() {
        let p = RegistrationPrior::from_transform(SimilarityParams::new([1.0, -2.0], [0.9, 1.1], 0.3));
        let back = RegistrationPrior::from_json(&p.to_json().unwrap()).unwrap();
        assert!(back.alpha.is_nan() && back.pec.is_nan());
        assert_eq!(back.m0, p.m0);
        assert_eq!(back.transform, p.transform);
    }
}
