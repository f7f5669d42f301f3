//! Synthetic ground truth: warped and elastically distorted maps and batch
//! recovery experiments.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{fmt_f64, BoundingBox, VoxelGrid};
use crate::kriging::FittedMap;
use crate::pipeline::{register, RegisterConfig};
use crate::transform::{Point, SimilarityParams};

/// Gaussian bump `(center, amplitude, width)`.
pub type Bump = (Point, f64, f64);

/// Sum of isotropic Gaussian bumps on a `width x height` lattice.
pub fn gaussian_bumps(width: usize, height: usize, bumps: &[Bump]) -> Result<VoxelGrid> {
    VoxelGrid::from_fn(width, height, |x, y| {
        bumps
            .iter()
            .map(|(c, a, w)| a * (-((x - c[0]).powi(2) + (y - c[1]).powi(2)) / (2.0 * w * w)).exp())
            .sum()
    })
}

/// `src` moved by `t`: the value at `s` is `src^(t^-1(s))` plus white noise.
pub fn warp_map(src: &FittedMap, t: &SimilarityParams, noise_sd: f64, seed: u64) -> Result<VoxelGrid> {
    let inv = t.invert();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = &src.grid;
    let values: Vec<f64> = (0..g.height())
        .flat_map(|y| (0..g.width()).map(move |x| [x as f64, y as f64]))
        .map(|s| {
            let e: f64 = rng.sample(StandardNormal);
            src.model.interpolate_at(inv.apply(s)) + noise_sd * e
        })
        .collect();
    VoxelGrid::new(g.width(), g.height(), values, g.mask().to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticField {
    pub width: usize,
    pub height: usize,
    /// Row-major displacement components in voxels.
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub sigma_d: f64,
    pub alpha_d: f64,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable convolution with zero padding.
fn smooth(field: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let o = k as isize - r;
                    let (xx, yy) = if horizontal { (x + o, y) } else { (x, y + o) };
                    if xx >= 0 && yy >= 0 && xx < w as isize && yy < h as isize {
                        acc += kv * src[yy as usize * w + xx as usize];
                    }
                }
                out[y as usize * w + x as usize] = acc;
            }
        }
        out
    };
    pass(&pass(field, true), false)
}

impl ElasticField {
    /// Uniform(-1, 1) components smoothed by a Gaussian truncated at three
    /// standard deviations, scaled so the largest displacement is `alpha_d`.
    pub fn generate(width: usize, height: usize, sigma_d: f64, alpha_d: f64, seed: u64) -> Result<Self> {
        if !(sigma_d > 0.0) || !(alpha_d >= 0.0) || !alpha_d.is_finite() {
            return Err(Error::Precondition(format!("need sigma_d > 0 and finite alpha_d >= 0, got {sigma_d}, {alpha_d}")));
        }
        let (dx, dy) = Self::unit_field(width, height, sigma_d, seed);
        Ok(Self {
            width,
            height,
            dx: dx.into_iter().map(|v| v * alpha_d).collect(),
            dy: dy.into_iter().map(|v| v * alpha_d).collect(),
            sigma_d,
            alpha_d,
        })
    }

    fn unit_field(width: usize, height: usize, sigma_d: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = width * height;
        let ux: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let uy: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kernel = gaussian_kernel(sigma_d);
        let sx = smooth(&ux, width, height, &kernel);
        let sy = smooth(&uy, width, height, &kernel);
        let max = sx.iter().zip(&sy).map(|(a, b)| a.hypot(*b)).fold(0.0, f64::max);
        if max == 0.0 {
            return (sx, sy);
        }
        (sx.into_iter().map(|v| v / max).collect(), sy.into_iter().map(|v| v / max).collect())
    }

    pub fn displacement(&self, x: usize, y: usize) -> Point {
        let i = y * self.width + x;
        [self.dx[i], self.dy[i]]
    }

    pub fn max_magnitude(&self) -> f64 {
        self.dx.iter().zip(&self.dy).map(|(a, b)| a.hypot(*b)).fold(0.0, f64::max)
    }
}

/// `src` resampled at `s + field(s)`.
pub fn apply_field(src: &FittedMap, field: &ElasticField) -> Result<VoxelGrid> {
    let g = &src.grid;
    if field.width != g.width() || field.height != g.height() {
        return Err(Error::Precondition(format!(
            "field is {}x{}, map is {}x{}",
            field.width,
            field.height,
            g.width(),
            g.height()
        )));
    }
    let values: Vec<f64> = (0..g.height())
        .flat_map(|y| (0..g.width()).map(move |x| (x, y)))
        .map(|(x, y)| {
            let d = field.displacement(x, y);
            src.model.interpolate_at([x as f64 + d[0], y as f64 + d[1]])
        })
        .collect();
    VoxelGrid::new(g.width(), g.height(), values, g.mask().to_vec())
}

pub fn elastic_distort(src: &FittedMap, sigma_d: f64, alpha_d: f64, seed: u64) -> Result<VoxelGrid> {
    let field = ElasticField::generate(src.grid.width(), src.grid.height(), sigma_d, alpha_d, seed)?;
    apply_field(src, &field)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    pub theta_x: (f64, f64),
    pub theta_y: (f64, f64),
    pub sigma_x: (f64, f64),
    pub sigma_y: (f64, f64),
    pub omega: (f64, f64),
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            theta_x: (-5.0, 5.0),
            theta_y: (-5.0, 5.0),
            sigma_x: (0.7, 1.3),
            sigma_y: (0.7, 1.3),
            omega: (-PI / 6.0, PI / 6.0),
        }
    }
}

impl ParamRanges {
    /// A uniform draw. The translation ranges apply to the displacement of
    /// `center`, so scaling and rotation act about `center` rather than the
    /// lattice origin.
    pub fn draw(&self, rng: &mut impl Rng, center: Point) -> SimilarityParams {
        let mut u = |r: (f64, f64)| if r.0 == r.1 { r.0 } else { rng.random_range(r.0..r.1) };
        let d = [u(self.theta_x), u(self.theta_y)];
        let sigma = [u(self.sigma_x), u(self.sigma_y)];
        let omega = u(self.omega);
        let a = SimilarityParams::new([0.0, 0.0], sigma, omega).apply(center);
        SimilarityParams::new([center[0] + d[0] - a[0], center[1] + d[1] - a[1]], sigma, omega)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticSpec {
    pub sigma_d: f64,
    pub alpha_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub replicate: usize,
    pub parameter: String,
    pub truth: f64,
    pub post_mean: f64,
    pub post_sd: f64,
    pub in_95ci: bool,
    pub elpd: f64,
    pub rhat_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub mean_abs_residual: f64,
    pub n: usize,
}

/// Least-squares fit of `y` on `x`.
pub fn regress(x: &[f64], y: &[f64]) -> Regression {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    Regression {
        slope,
        intercept,
        r2: 1.0 - ss_res / syy,
        mean_abs_residual: x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).abs()).sum::<f64>() / n,
        n: x.len(),
    }
}

pub const FORWARD_PARAMS: [&str; 5] = ["theta_x", "theta_y", "sigma_x", "sigma_y", "omega"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryTable {
    pub rows: Vec<RecoveryRow>,
    pub truths: Vec<SimilarityParams>,
    /// `(replicate, error)` for replicates whose pipeline failed.
    pub failures: Vec<(usize, String)>,
}

impl RecoveryTable {
    pub fn rows_for<'a>(&'a self, parameter: &'a str) -> impl Iterator<Item = &'a RecoveryRow> + 'a {
        self.rows.iter().filter(move |r| r.parameter == parameter)
    }

    /// Regression of posterior mean on truth for one parameter.
    pub fn regression(&self, parameter: &str) -> Regression {
        let (x, y): (Vec<f64>, Vec<f64>) = self.rows_for(parameter).map(|r| (r.truth, r.post_mean)).unzip();
        regress(&x, &y)
    }

    pub fn coverage(&self, parameter: &str) -> f64 {
        let v: Vec<bool> = self.rows_for(parameter).map(|r| r.in_95ci).collect();
        v.iter().filter(|b| **b).count() as f64 / v.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("replicate,parameter,truth,post_mean,post_sd,in_95ci,elpd,rhat_max\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.replicate,
                r.parameter,
                fmt_f64(r.truth),
                fmt_f64(r.post_mean),
                fmt_f64(r.post_sd),
                r.in_95ci,
                fmt_f64(r.elpd),
                fmt_f64(r.rhat_max)
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Reads the rows written by [`RecoveryTable::write_csv`]; truths and
    /// failures are not stored in the CSV and come back empty.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let perr = |row: usize, column: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            row,
            column,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == "replicate,parameter,truth,post_mean,post_sd,in_95ci,elpd,rhat_max" => {}
            _ => return Err(perr(0, 0, "unexpected header".into())),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 8 {
                return Err(perr(i, 0, format!("expected 8 fields, got {}", f.len())));
            }
            let num = |c: usize| f[c].parse::<f64>().map_err(|e| perr(i, c, e.to_string()));
            rows.push(RecoveryRow {
                replicate: f[0].parse().map_err(|e: std::num::ParseIntError| perr(i, 0, e.to_string()))?,
                parameter: f[1].to_string(),
                truth: num(2)?,
                post_mean: num(3)?,
                post_sd: num(4)?,
                in_95ci: f[5].parse().map_err(|e: std::str::ParseBoolError| perr(i, 5, e.to_string()))?,
                elpd: num(6)?,
                rhat_max: num(7)?,
            });
        }
        Ok(Self {
            rows,
            truths: Vec::new(),
            failures: Vec::new(),
        })
    }

    /// Per-parameter regression and interval coverage.
    pub fn report(&self) -> Vec<ParamReport> {
        FORWARD_PARAMS
            .iter()
            .filter(|p| self.rows_for(p).next().is_some())
            .map(|p| ParamReport {
                parameter: p.to_string(),
                regression: self.regression(p),
                coverage: self.coverage(p),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub parameter: String,
    pub regression: Regression,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub n: usize,
    pub ranges: ParamRanges,
    pub noise_sd: f64,
    pub elastic: Option<ElasticSpec>,
    pub seed: u64,
    pub register: RegisterConfig,
}

/// The floating map of one replicate: `reference` moved by `truth`, with
/// optional elastic distortion.
pub fn synthesize(reference: &FittedMap, truth: &SimilarityParams, cfg: &RecoveryConfig, seed: u64) -> Result<VoxelGrid> {
    let warped = warp_map(reference, truth, cfg.noise_sd, seed)?;
    match cfg.elastic {
        None => Ok(warped),
        Some(e) => {
            let fitted = FittedMap::fit(warped)?;
            elastic_distort(&fitted, e.sigma_d, e.alpha_d, seed ^ 0x9e37_79b9_7f4a_7c15)
        }
    }
}

fn replicate_seed(seed: u64, i: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    rng.random()
}

/// Runs `cfg.n` independent synthetic registrations of `reference` over
/// `query_box`. Individual failures are recorded; the batch fails only when
/// every replicate does.
pub fn recovery_batch(reference: &FittedMap, query_box: &BoundingBox, cfg: &RecoveryConfig) -> Result<RecoveryTable> {
    if cfg.n == 0 {
        return Err(Error::Precondition("recovery batch needs at least one replicate".into()));
    }
    let (x0, x1, y0, y1) = query_box.extent();
    let center = [0.5 * (x0 + x1), 0.5 * (y0 + y1)];
    let truths: Vec<SimilarityParams> = (0..cfg.n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(replicate_seed(cfg.seed, i));
            cfg.ranges.draw(&mut rng, center)
        })
        .collect();
    let outcomes: Vec<Result<Vec<RecoveryRow>>> = truths
        .par_iter()
        .enumerate()
        .map(|(i, truth)| {
            let seed = replicate_seed(cfg.seed, i);
            let flt = FittedMap::fit(synthesize(reference, truth, cfg, seed)?)?;
            let mut rc = cfg.register.clone();
            rc.chains.seed = seed;
            let reg = register(reference, &flt, query_box, &rc)?;
            let sel = &reg.selection;
            let truth_arr = truth.to_array();
            Ok(reg
                .summary
                .forward()
                .iter()
                .zip(FORWARD_PARAMS)
                .zip(truth_arr)
                .map(|((p, name), t)| RecoveryRow {
                    replicate: i,
                    parameter: name.to_string(),
                    truth: t,
                    post_mean: p.mean,
                    post_sd: p.sd,
                    in_95ci: p.covers(t),
                    elpd: sel.elpd[sel.selected],
                    rhat_max: sel.rhat_max[sel.selected],
                })
                .collect())
        })
        .collect();
    let mut table = RecoveryTable {
        rows: Vec::new(),
        truths,
        failures: Vec::new(),
    };
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(rows) => table.rows.extend(rows),
            Err(e) => table.failures.push((i, e.to_string())),
        }
    }
    if table.rows.is_empty() {
        let msg: Vec<String> = table.failures.iter().map(|(i, e)| format!("replicate {i}: {e}")).collect();
        return Err(Error::Precondition(format!("every replicate failed\n{}", msg.join("\n"))));
    }
    Ok(table)
}
