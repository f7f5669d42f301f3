//! The negative log Gibbs posterior over forward and reverse similarity
//! transforms, intensity factors and the loss scale.
//!
//! ```text
//! -log p = (V + V' + 14) log phi + 1/(2 phi^2) [ SSD(R, b Y(T)) + SSD(Y, b' R(T')) + Reg ]
//! Reg    = lb (log b - log b0)^2 + lT tr{(M - M0) Sigma_s (M - M0)'}
//!        + lb' (log b' - log b0')^2 + lT' tr{(M' - M0') Sigma_s' (M' - M0')'}
//! ```
//!
//! `V` and `V'` are the sizes of the reference and floating regions and
//! `Sigma_s`, `Sigma_s'` their site Gram matrices.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{Matrix2x3, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoundingBox, Region};
use crate::kriging::{FittedMap, KrigingModel};
use crate::landmarks::RegistrationPrior;
use crate::transform::{compose, Affine, AffineMatrix, Point, SimilarityParams};

/// Number of scalar parameters in a [`PosteriorState`].
pub const N_PARAMS: usize = 13;

pub const PARAM_NAMES: [&str; N_PARAMS] = [
    "theta_x",
    "theta_y",
    "sigma_x",
    "sigma_y",
    "omega",
    "rv_theta_x",
    "rv_theta_y",
    "rv_sigma_x",
    "rv_sigma_y",
    "rv_omega",
    "b",
    "b_rv",
    "phi",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorState {
    pub fwd: SimilarityParams,
    pub rev: SimilarityParams,
    pub b: f64,
    pub b_rv: f64,
    pub phi: f64,
}

fn similarity_to_free(t: &SimilarityParams) -> [f64; 5] {
    [
        t.theta[0],
        t.theta[1],
        t.sigma[0].ln(),
        t.sigma[1].ln(),
        (t.omega / FRAC_PI_2).atanh(),
    ]
}

fn similarity_from_free(u: &[f64]) -> SimilarityParams {
    SimilarityParams::new([u[0], u[1]], [u[2].exp(), u[3].exp()], FRAC_PI_2 * u[4].tanh())
}

/// `log |d omega / d v|` for `omega = (pi/2) tanh(v)`, stable for large `|v|`.
fn log_dtanh(v: f64) -> f64 {
    // 1 - tanh^2 v = 4 e^{-2|v|} / (1 + e^{-2|v|})^2
    let a = v.abs();
    FRAC_PI_2.ln() + 4f64.ln() - 2.0 * a - 2.0 * (-2.0 * a).exp().ln_1p()
}

impl PosteriorState {
    /// `[fwd (5), rev (5), b, b_rv, phi]` in the order of [`PARAM_NAMES`].
    pub fn to_array(&self) -> [f64; N_PARAMS] {
        let f = self.fwd.to_array();
        let r = self.rev.to_array();
        let mut out = [0.0; N_PARAMS];
        out[..5].copy_from_slice(&f);
        out[5..10].copy_from_slice(&r);
        out[10] = self.b;
        out[11] = self.b_rv;
        out[12] = self.phi;
        out
    }

    pub fn from_array(a: &[f64]) -> Self {
        Self {
            fwd: SimilarityParams::from_array([a[0], a[1], a[2], a[3], a[4]]),
            rev: SimilarityParams::from_array([a[5], a[6], a[7], a[8], a[9]]),
            b: a[10],
            b_rv: a[11],
            phi: a[12],
        }
    }

    pub fn is_valid(&self) -> bool {
        self.fwd.is_valid()
            && self.rev.is_valid()
            && self.b > 0.0
            && self.b_rv > 0.0
            && self.phi > 0.0
            && self.b.is_finite()
            && self.b_rv.is_finite()
            && self.phi.is_finite()
    }

    /// Coordinates `(theta, log sigma, atanh(2 omega / pi))` per transform,
    /// then `log b, log b', log phi`.
    pub fn to_unconstrained(&self) -> [f64; N_PARAMS] {
        let mut u = [0.0; N_PARAMS];
        u[..5].copy_from_slice(&similarity_to_free(&self.fwd));
        u[5..10].copy_from_slice(&similarity_to_free(&self.rev));
        u[10] = self.b.ln();
        u[11] = self.b_rv.ln();
        u[12] = self.phi.ln();
        u
    }

    pub fn from_unconstrained(u: &[f64]) -> Self {
        Self {
            fwd: similarity_from_free(&u[..5]),
            rev: similarity_from_free(&u[5..10]),
            b: u[10].exp(),
            b_rv: u[11].exp(),
            phi: u[12].exp(),
        }
    }

    /// `log |d state / d u|` of [`Self::from_unconstrained`].
    pub fn log_jacobian(u: &[f64]) -> f64 {
        u[2] + u[3] + log_dtanh(u[4]) + u[7] + u[8] + log_dtanh(u[9]) + u[10] + u[11] + u[12]
    }
}

/// `sum_s [s; 1][s; 1]'` over a region, in coordinates centered on the
/// region mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gram {
    pub center: Point,
    pub matrix: Matrix3<f64>,
}

impl Gram {
    pub fn new(points: &[Point]) -> Self {
        let n = points.len().max(1) as f64;
        let c = points
            .iter()
            .fold([0.0, 0.0], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n]);
        let mut m = Matrix3::zeros();
        for p in points {
            let v = nalgebra::Vector3::new(p[0] - c[0], p[1] - c[1], 1.0);
            m += v * v.transpose();
        }
        Self {
            center: c,
            matrix: m,
        }
    }

    /// `tr{D Sigma_s D'}` for the 2x3 matrix `D`, i.e. `sum_s ||D [s; 1]||^2`.
    pub fn trace_form(&self, d: &AffineMatrix) -> f64 {
        let [cx, cy] = self.center;
        let centered = Matrix2x3::new(
            d.a11,
            d.a12,
            d.a11 * cx + d.a12 * cy + d.tx,
            d.a21,
            d.a22,
            d.a21 * cx + d.a22 * cy + d.ty,
        );
        (centered * self.matrix * centered.transpose()).trace().max(0.0)
    }
}

fn matrix_diff(a: &AffineMatrix, b: &AffineMatrix) -> AffineMatrix {
    AffineMatrix {
        a11: a.a11 - b.a11,
        a12: a.a12 - b.a12,
        a21: a.a21 - b.a21,
        a22: a.a22 - b.a22,
        tx: a.tx - b.tx,
        ty: a.ty - b.ty,
    }
}

/// Sum over `region` of `(R(s) - b * Y^(T(s)))^2`.
pub fn ssd_loss(
    ref_values: &[f64],
    flt_model: &KrigingModel,
    t: &impl Affine,
    b: f64,
    region: &[Point],
) -> f64 {
    let m = t.matrix();
    region
        .iter()
        .zip(ref_values)
        .map(|(s, r)| (r - b * flt_model.interpolate_at(m.apply(*s))).powi(2))
        .sum()
}

/// `sqrt(sum_s ||rev(fwd(s)) - s||^2)` over `region`.
pub fn inverse_consistency_penalty(
    fwd: &impl Affine,
    rev: &impl Affine,
    region: &[Point],
) -> f64 {
    let c = compose(rev, fwd);
    region
        .iter()
        .map(|s| {
            let p = c.apply(*s);
            (p[0] - s[0]).powi(2) + (p[1] - s[1]).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Inverse consistency enters only through `M0' = M0^-1`.
    #[default]
    PriorEmbedded,
    /// Adds `lambda_ic * penalty` inside the scaled bracket.
    ExplicitPenalty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lambda_b: f64,
    pub lambda_t: f64,
    pub lambda_b_rv: f64,
    pub lambda_t_rv: f64,
    pub lambda_ic: f64,
    pub prior: RegistrationPrior,
}

impl Hyperparams {
    /// `lambda_b = lambda_b'` and `lambda_T = lambda_T'`, no explicit penalty.
    pub fn symmetric(lambda_b: f64, lambda_t: f64, prior: RegistrationPrior) -> Self {
        Self {
            lambda_b,
            lambda_t,
            lambda_b_rv: lambda_b,
            lambda_t_rv: lambda_t,
            lambda_ic: 0.0,
            prior,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda_b, self.lambda_t, self.lambda_b_rv, self.lambda_t_rv]
            .iter()
            .all(|l| *l > 0.0 && l.is_finite())
            && self.lambda_ic >= 0.0
            && self.prior.b0 > 0.0
            && self.prior.b0_rv > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Precondition(format!("invalid hyper-parameters {self:?}")))
        }
    }
}

/// Reference and floating maps with the regions the loss sums over.
#[derive(Debug, Clone)]
pub struct RegistrationProblem {
    pub reference: FittedMap,
    pub floating: FittedMap,
    pub region_r: Region,
    pub region_y: Region,
    pts_r: Vec<Point>,
    vals_r: Vec<f64>,
    pts_y: Vec<Point>,
    vals_y: Vec<f64>,
    gram_r: Gram,
    gram_y: Gram,
}

impl RegistrationProblem {
    pub fn new(
        reference: FittedMap,
        floating: FittedMap,
        region_r: Region,
        region_y: Region,
    ) -> Result<Self> {
        if region_r.is_empty() || region_y.is_empty() {
            return Err(Error::UninformativeRegion("empty registration region".into()));
        }
        let pts_r = region_r.points();
        let vals_r = region_r.values(&reference.grid);
        let pts_y = region_y.points();
        let vals_y = region_y.values(&floating.grid);
        Ok(Self {
            gram_r: Gram::new(&pts_r),
            gram_y: Gram::new(&pts_y),
            reference,
            floating,
            region_r,
            region_y,
            pts_r,
            vals_r,
            pts_y,
            vals_y,
        })
    }

    /// The query box region in the reference and its image under `m0` in
    /// the floating map.
    pub fn from_box(
        reference: FittedMap,
        floating: FittedMap,
        query_box: &BoundingBox,
        m0: &AffineMatrix,
    ) -> Result<Self> {
        let region_r = query_box.region(&reference.grid);
        let region_y = query_box.warp(m0).region(&floating.grid);
        Self::new(reference, floating, region_r, region_y)
    }

    pub fn points_r(&self) -> &[Point] {
        &self.pts_r
    }

    pub fn values_r(&self) -> &[f64] {
        &self.vals_r
    }

    pub fn points_y(&self) -> &[Point] {
        &self.pts_y
    }

    pub fn values_y(&self) -> &[f64] {
        &self.vals_y
    }

    pub fn gram_r(&self) -> &Gram {
        &self.gram_r
    }

    pub fn gram_y(&self) -> &Gram {
        &self.gram_y
    }

    /// Exponent of `phi`: `V + V' + 14`.
    pub fn phi_exponent(&self) -> f64 {
        (self.pts_r.len() + self.pts_y.len()) as f64 + 14.0
    }

    /// `Y^(T(s))` over the reference region.
    pub fn warped_floating(&self, t: &impl Affine) -> Vec<f64> {
        self.floating.model.interpolate_under_transform(t, &self.pts_r)
    }

    /// `R^(T'(s))` over the floating region.
    pub fn warped_reference(&self, t: &impl Affine) -> Vec<f64> {
        self.reference.model.interpolate_under_transform(t, &self.pts_y)
    }
}

fn ssd_from(values: &[f64], predicted: &[f64], b: f64) -> f64 {
    values
        .iter()
        .zip(predicted)
        .map(|(v, p)| (v - b * p).powi(2))
        .sum()
}

/// The components of the objective, kept separately so a change in one
/// block only recomputes that block's terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Terms {
    pub ssd_fwd: f64,
    pub ssd_rev: f64,
    pub reg_b: f64,
    pub reg_t: f64,
    pub reg_b_rv: f64,
    pub reg_t_rv: f64,
    pub ic: f64,
    /// `Y^(T(s))` over the reference region.
    #[serde(skip)]
    pub yhat: Vec<f64>,
}

impl Terms {
    /// The bracket multiplied by `1 / (2 phi^2)`.
    pub fn bracket(&self, hp: &Hyperparams, mode: Mode) -> f64 {
        let mut s = self.ssd_fwd
            + self.ssd_rev
            + hp.lambda_b * self.reg_b
            + hp.lambda_t * self.reg_t
            + hp.lambda_b_rv * self.reg_b_rv
            + hp.lambda_t_rv * self.reg_t_rv;
        if mode == Mode::ExplicitPenalty {
            s += hp.lambda_ic * self.ic;
        }
        s
    }

    pub fn total(&self, problem: &RegistrationProblem, hp: &Hyperparams, mode: Mode, phi: f64) -> f64 {
        problem.phi_exponent() * phi.ln() + self.bracket(hp, mode) / (2.0 * phi * phi)
    }
}

/// Forward-block terms: `ssd_fwd`, `reg_b`, `reg_t`.
pub fn forward_terms(
    problem: &RegistrationProblem,
    hp: &Hyperparams,
    fwd: &SimilarityParams,
    b: f64,
) -> (f64, f64, f64, Vec<f64>) {
    let yhat = problem.warped_floating(fwd);
    let ssd = ssd_from(&problem.vals_r, &yhat, b);
    let reg_b = (b.ln() - hp.prior.b0.ln()).powi(2);
    let reg_t = problem
        .gram_r
        .trace_form(&matrix_diff(&fwd.to_matrix(), &hp.prior.m0));
    (ssd, reg_b, reg_t, yhat)
}

/// Reverse-block terms: `ssd_rev`, `reg_b_rv`, `reg_t_rv`.
pub fn reverse_terms(
    problem: &RegistrationProblem,
    hp: &Hyperparams,
    rev: &SimilarityParams,
    b_rv: f64,
) -> (f64, f64, f64) {
    let rhat = problem.warped_reference(rev);
    let ssd = ssd_from(&problem.vals_y, &rhat, b_rv);
    let reg_b = (b_rv.ln() - hp.prior.b0_rv.ln()).powi(2);
    let reg_t = problem
        .gram_y
        .trace_form(&matrix_diff(&rev.to_matrix(), &hp.prior.m0_rv));
    (ssd, reg_b, reg_t)
}

/// Squared inverse-consistency penalty over the reference region, from the
/// Gram matrix.
pub fn ic_squared(problem: &RegistrationProblem, fwd: &SimilarityParams, rev: &SimilarityParams) -> f64 {
    let c = compose(rev, fwd);
    problem
        .gram_r
        .trace_form(&matrix_diff(&c, &AffineMatrix::IDENTITY))
}

pub fn terms(problem: &RegistrationProblem, hp: &Hyperparams, state: &PosteriorState) -> Terms {
    let (ssd_fwd, reg_b, reg_t, yhat) = forward_terms(problem, hp, &state.fwd, state.b);
    let (ssd_rev, reg_b_rv, reg_t_rv) = reverse_terms(problem, hp, &state.rev, state.b_rv);
    Terms {
        ssd_fwd,
        ssd_rev,
        reg_b,
        reg_t,
        reg_b_rv,
        reg_t_rv,
        ic: ic_squared(problem, &state.fwd, &state.rev).sqrt(),
        yhat,
    }
}

pub fn check_finite(t: &Terms) -> Result<()> {
    let named = [
        ("forward SSD", t.ssd_fwd),
        ("reverse SSD", t.ssd_rev),
        ("intensity prior", t.reg_b),
        ("transform prior", t.reg_t),
        ("reverse intensity prior", t.reg_b_rv),
        ("reverse transform prior", t.reg_t_rv),
        ("inverse-consistency penalty", t.ic),
    ];
    match named.iter().find(|(_, v)| !v.is_finite()) {
        Some((name, _)) => Err(Error::NonFinite(name)),
        None => Ok(()),
    }
}

/// The negative log Gibbs posterior at `state`.
pub fn neg_log_posterior(
    state: &PosteriorState,
    hp: &Hyperparams,
    problem: &RegistrationProblem,
    mode: Mode,
) -> Result<f64> {
    if !(state.phi > 0.0 && state.phi.is_finite()) {
        return Err(Error::NonFinite("loss scale phi"));
    }
    let t = terms(problem, hp, state);
    check_finite(&t)?;
    let v = t.total(problem, hp, mode, state.phi);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("objective"))
    }
}

/// Per-voxel log pseudo-density over the reference region:
/// `-(R(s) - b Y^(T(s)))^2 / (2 phi^2) - log phi`.
pub fn pointwise_log_density(values: &[f64], yhat: &[f64], b: f64, phi: f64) -> Vec<f64> {
    let (c, l) = (1.0 / (2.0 * phi * phi), phi.ln());
    values
        .iter()
        .zip(yhat)
        .map(|(v, p)| -(v - b * p).powi(2) * c - l)
        .collect()
}

/// The `phi` minimizing the objective with every other term fixed.
pub fn profile_phi(bracket: f64, exponent: f64) -> f64 {
    (bracket / exponent).sqrt().max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::VoxelGrid;
    use crate::kriging::{log_space, FitConfig};
    use crate::optim::NelderMead;
    use crate::transform::invert;
    use std::f64::consts::PI;
    use std::sync::OnceLock;

    fn scene(p: Point) -> f64 {
        let b = |c: Point, a: f64| a * (-((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)) / 8.0).exp();
        b([8.0, 9.0], 1.0) + b([14.0, 8.0], 0.7) + b([11.0, 15.0], 0.85)
    }

    fn truth() -> SimilarityParams {
        SimilarityParams::new([0.8, -0.6], [0.95, 1.05], 0.05)
    }

    fn fit(f: impl Fn(Point) -> f64) -> FittedMap {
        let g = VoxelGrid::from_fn(22, 22, |x, y| f([x, y])).unwrap();
        let cfg = FitConfig {
            decays: log_space(0.05, 1.0, 4),
            nugget_ratios: vec![0.0],
        };
        FittedMap::fit_with(g, &cfg).unwrap()
    }

    fn bbox() -> BoundingBox {
        BoundingBox::axis_aligned(5.0, 5.0, 17.0, 18.0)
    }

    /// Reference and an exact warp of it by `truth()`.
    fn warped_problem() -> &'static RegistrationProblem {
        static P: OnceLock<RegistrationProblem> = OnceLock::new();
        P.get_or_init(|| {
            let inv = invert(&truth());
            let r = fit(scene);
            let y = fit(|s| scene(inv.apply(s)));
            RegistrationProblem::from_box(r, y, &bbox(), &truth().to_matrix()).unwrap()
        })
    }

    fn self_problem() -> &'static RegistrationProblem {
        static P: OnceLock<RegistrationProblem> = OnceLock::new();
        P.get_or_init(|| {
            let r = fit(scene);
            RegistrationProblem::from_box(r.clone(), r, &bbox(), &AffineMatrix::IDENTITY).unwrap()
        })
    }

    fn hp(t: SimilarityParams) -> Hyperparams {
        Hyperparams::symmetric(1.0, 1.0, RegistrationPrior::from_transform(t))
    }

    #[test]
    fn ssd_self_match_is_zero() {
        let p = self_problem();
        let norm: f64 = p.values_r().iter().map(|v| v * v).sum();
        let l = ssd_loss(p.values_r(), &p.floating.model, &SimilarityParams::IDENTITY, 1.0, p.points_r());
        assert!(l <= 1e-10 * norm, "{l} vs {norm}");
    }

    #[test]
    fn ssd_at_zero_intensity_is_flat() {
        let p = warped_problem();
        let norm: f64 = p.values_r().iter().map(|v| v * v).sum();
        for t in [SimilarityParams::IDENTITY, truth(), SimilarityParams::translation(3.0, 1.0)] {
            let l = ssd_loss(p.values_r(), &p.floating.model, &t, 0.0, p.points_r());
            assert!((l - norm).abs() < 1e-12 * norm);
        }
    }

    #[test]
    fn ssd_lower_at_truth() {
        let p = warped_problem();
        let at = |t: &SimilarityParams| ssd_loss(p.values_r(), &p.floating.model, t, 1.0, p.points_r());
        assert!(at(&truth()) < at(&SimilarityParams::IDENTITY));
    }

    #[test]
    fn inverse_consistency_cases() {
        let region: Vec<Point> = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let t = SimilarityParams::new([2.0, -5.0], [0.8, 1.2], PI / 12.0);
        assert!(inverse_consistency_penalty(&t, &invert(&t), &region) < 1e-9);
        let id = SimilarityParams::IDENTITY;
        let shift = SimilarityParams::translation(1.0, 0.0);
        assert!((inverse_consistency_penalty(&id, &shift, &region) - 2.0).abs() < 1e-15);
        assert_eq!(inverse_consistency_penalty(&id, &id, &region), 0.0);
    }

    #[test]
    fn gram_trace_matches_direct_sum() {
        let pts: Vec<Point> = (0..30).map(|i| [(i % 6) as f64 + 3.0, (i / 6) as f64 * 1.5 - 2.0]).collect();
        let g = Gram::new(&pts);
        let d = AffineMatrix {
            a11: 0.1,
            a12: -0.3,
            a21: 0.2,
            a22: 0.05,
            tx: 1.5,
            ty: -0.7,
        };
        let direct: f64 = pts.iter().map(|s| {
            let p = d.apply(*s);
            p[0] * p[0] + p[1] * p[1]
        }).sum();
        assert!((g.trace_form(&d) - direct).abs() < 1e-10 * direct);
        assert!(g.matrix.symmetric_eigenvalues().iter().all(|e| *e >= -1e-9));
    }

    #[test]
    fn self_registration_reduces_to_phi_term() {
        let p = self_problem();
        let h = hp(SimilarityParams::IDENTITY);
        for phi in [0.5, 1.0, 2.0] {
            let s = PosteriorState {
                fwd: SimilarityParams::IDENTITY,
                rev: SimilarityParams::IDENTITY,
                b: 1.0,
                b_rv: 1.0,
                phi,
            };
            let v = neg_log_posterior(&s, &h, p, Mode::PriorEmbedded).unwrap();
            let expect = p.phi_exponent() * phi.ln();
            assert!((v - expect).abs() < 1e-9, "{v} vs {expect}");
        }
    }

    fn state() -> PosteriorState {
        let t = truth();
        PosteriorState {
            fwd: SimilarityParams::new([0.7, -0.5], [0.97, 1.02], 0.04),
            rev: invert(&t).nearest_similarity(),
            b: 1.1,
            b_rv: 0.9,
            phi: 0.05,
        }
    }

    #[test]
    fn doubling_phi_matches_rescaled_bracket() {
        let p = warped_problem();
        let h = hp(truth());
        let s = state();
        let t = terms(p, &h, &s);
        let br = t.bracket(&h, Mode::PriorEmbedded);
        let a = neg_log_posterior(&s, &h, p, Mode::PriorEmbedded).unwrap();
        let b = neg_log_posterior(&PosteriorState { phi: 2.0 * s.phi, ..s }, &h, p, Mode::PriorEmbedded).unwrap();
        let expect = p.phi_exponent() * 2f64.ln() + br * (1.0 / (8.0 * s.phi * s.phi) - 1.0 / (2.0 * s.phi * s.phi));
        assert!(((b - a) - expect).abs() < 1e-9 * expect.abs().max(1.0));
    }

    /// Every term recomputed voxel by voxel from raw coordinates.
    fn brute_objective(p: &RegistrationProblem, h: &Hyperparams, s: &PosteriorState) -> f64 {
        let mut ssd = 0.0;
        for (q, r) in p.points_r().iter().zip(p.values_r()) {
            ssd += (r - s.b * p.floating.model.interpolate_at(s.fwd.apply(*q))).powi(2);
        }
        for (q, y) in p.points_y().iter().zip(p.values_y()) {
            ssd += (y - s.b_rv * p.reference.model.interpolate_at(s.rev.apply(*q))).powi(2);
        }
        let disp = |pts: &[Point], a: &AffineMatrix, b: &AffineMatrix| -> f64 {
            pts.iter()
                .map(|q| {
                    let (u, v) = (a.apply(*q), b.apply(*q));
                    (u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2)
                })
                .sum()
        };
        let reg = h.lambda_b * (s.b.ln() - h.prior.b0.ln()).powi(2)
            + h.lambda_t * disp(p.points_r(), &s.fwd.to_matrix(), &h.prior.m0)
            + h.lambda_b_rv * (s.b_rv.ln() - h.prior.b0_rv.ln()).powi(2)
            + h.lambda_t_rv * disp(p.points_y(), &s.rev.to_matrix(), &h.prior.m0_rv);
        let n = (p.points_r().len() + p.points_y().len()) as f64 + 14.0;
        n * s.phi.ln() + (ssd + reg) / (2.0 * s.phi * s.phi)
    }

    #[test]
    fn objective_matches_termwise_oracle() {
        let p = warped_problem();
        let mut h = hp(SimilarityParams::new([0.5, -0.2], [1.0, 1.1], 0.02));
        h.prior.b0 = 0.9;
        h.lambda_t = 3.0;
        h.lambda_b_rv = 0.4;
        let s1 = state();
        let mut s2 = s1;
        s2.fwd.theta[0] += 1e-3;
        s2.rev.omega -= 2e-3;
        s2.b *= 1.01;
        let f = |s: &PosteriorState| neg_log_posterior(s, &h, p, Mode::PriorEmbedded).unwrap();
        let (o1, o2) = (brute_objective(p, &h, &s1), brute_objective(p, &h, &s2));
        assert!((f(&s1) - o1).abs() < 1e-8 * o1.abs());
        assert!(((f(&s2) - f(&s1)) - (o2 - o1)).abs() < 1e-8 * o1.abs());
    }

    #[test]
    fn modes_agree_at_exact_inverse() {
        let p = warped_problem();
        let mut h = hp(truth());
        h.lambda_ic = 5.0;
        let iso = SimilarityParams::new([0.6, -0.4], [1.05, 1.05], 0.03);
        let rev = SimilarityParams::from_matrix(&invert(&iso)).unwrap();
        let s = PosteriorState { fwd: iso, rev, ..state() };
        let a = neg_log_posterior(&s, &h, p, Mode::PriorEmbedded).unwrap();
        let b = neg_log_posterior(&s, &h, p, Mode::ExplicitPenalty).unwrap();
        assert!((a - b).abs() < 1e-9 * a.abs());
        let s = state();
        let a = neg_log_posterior(&s, &h, p, Mode::PriorEmbedded).unwrap();
        let b = neg_log_posterior(&s, &h, p, Mode::ExplicitPenalty).unwrap();
        let ic = inverse_consistency_penalty(&s.fwd, &s.rev, p.points_r());
        assert!(((b - a) - h.lambda_ic * ic / (2.0 * s.phi * s.phi)).abs() < 1e-8 * a.abs());
    }

    #[test]
    fn objective_is_permutation_invariant() {
        let p = warped_problem();
        let h = hp(truth());
        let mut rr = p.region_r.clone();
        let mut ry = p.region_y.clone();
        rr.voxels.reverse();
        ry.voxels.rotate_left(7);
        let q = RegistrationProblem::new(p.reference.clone(), p.floating.clone(), rr, ry).unwrap();
        let a = neg_log_posterior(&state(), &h, p, Mode::PriorEmbedded).unwrap();
        let b = neg_log_posterior(&state(), &h, &q, Mode::PriorEmbedded).unwrap();
        assert!((a - b).abs() < 1e-9 * a.abs());
    }

    #[test]
    fn strong_transform_prior_pins_to_m0() {
        let p = warped_problem();
        let m0 = SimilarityParams::new([0.3, -0.9], [0.9, 1.1], 0.1);
        let mut h = hp(m0);
        h.lambda_t = 1e8;
        let base = state();
        let f = |x: &[f64]| {
            let fwd = similarity_from_free(x);
            neg_log_posterior(&PosteriorState { fwd, phi: 1.0, ..base }, &h, p, Mode::PriorEmbedded)
                .unwrap_or(f64::INFINITY)
        };
        let m = NelderMead::default().minimize(f, &similarity_to_free(&truth()), &[0.1, 0.1, 0.02, 0.02, 0.02]);
        let fwd = similarity_from_free(&m.x);
        assert!(fwd.to_matrix().frobenius_distance(&m0.to_matrix()) < 1e-3, "{fwd:?}");
    }

    #[test]
    fn zero_intensity_is_non_finite() {
        let p = warped_problem();
        let s = PosteriorState { b: 0.0, ..state() };
        assert!(matches!(
            neg_log_posterior(&s, &hp(truth()), p, Mode::PriorEmbedded),
            Err(Error::NonFinite("intensity prior"))
        ));
    }

    #[test]
    fn unconstrained_round_trip() {
        let s = state();
        let back = PosteriorState::from_unconstrained(&s.to_unconstrained());
        let (a, b) = (s.to_array(), back.to_array());
        for i in 0..N_PARAMS {
            assert!((a[i] - b[i]).abs() <= 1e-12 * a[i].abs().max(1.0), "{i}");
        }
        assert_eq!(PosteriorState::from_array(&s.to_array()), s);
        for v in [-30.0, -2.0, 0.0, 0.7, 25.0] {
            let direct = (FRAC_PI_2 * (1.0 - f64::tanh(v).powi(2))).ln();
            if direct.is_finite() {
                assert!((log_dtanh(v) - direct).abs() < 1e-9);
            }
        }
    }
}
