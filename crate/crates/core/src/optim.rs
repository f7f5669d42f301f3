//! Derivative-free minimization.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMead {
    pub max_evals: usize,
    /// Stop when the simplex's objective spread falls below this.
    pub f_tol: f64,
    /// Stop when every vertex lies within this of the best one.
    pub x_tol: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self {
            max_evals: 5000,
            f_tol: 1e-12,
            x_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
}

impl NelderMead {
    /// Minimizes `f` from `x0` with initial simplex steps `step`. Non-finite
    /// objective values are treated as `+inf`.
    pub fn minimize(&self, mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], step: &[f64]) -> Minimum {
        let n = x0.len();
        let evals = std::cell::Cell::new(0);
        let mut eval = |x: &[f64]| {
            evals.set(evals.get() + 1);
            let v = f(x);
            if v.is_nan() {
                f64::INFINITY
            } else {
                v
            }
        };
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        simplex.push((x0.to_vec(), eval(x0)));
        for i in 0..n {
            let mut x = x0.to_vec();
            x[i] += step[i];
            let v = eval(&x);
            simplex.push((x, v));
        }
        let combine = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> {
            a.iter().zip(b).map(|(p, q)| p + t * (q - p)).collect()
        };
        loop {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let spread = simplex[n].1 - simplex[0].1;
            let size = simplex[1..]
                .iter()
                .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max);
            if evals.get() >= self.max_evals || (spread.abs() <= self.f_tol && size <= self.x_tol) || size == 0.0 {
                break;
            }
            let centroid: Vec<f64> = (0..n)
                .map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64)
                .collect();
            let worst = simplex[n].clone();
            let reflected = combine(&centroid, &worst.0, -1.0);
            let fr = eval(&reflected);
            if fr < simplex[0].1 {
                let expanded = combine(&centroid, &worst.0, -2.0);
                let fe = eval(&expanded);
                simplex[n] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
            } else if fr < simplex[n - 1].1 {
                simplex[n] = (reflected, fr);
            } else {
                let (target, ft) = if fr < worst.1 {
                    (reflected, fr)
                } else {
                    (worst.0.clone(), worst.1)
                };
                let contracted = combine(&centroid, &target, 0.5);
                let fc = eval(&contracted);
                if fc < ft {
                    simplex[n] = (contracted, fc);
                } else {
                    let best = simplex[0].0.clone();
                    for v in simplex.iter_mut().skip(1) {
                        v.0 = combine(&best, &v.0, 0.5);
                        v.1 = eval(&v.0);
                    }
                }
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (x, f) = simplex.swap_remove(0);
        Minimum {
            x,
            f,
            evals: evals.get(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let nm = NelderMead {
            max_evals: 20000,
            ..Default::default()
        };
        let m = nm.minimize(
            |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            &[-1.2, 1.0],
            &[0.1, 0.1],
        );
        assert!((m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5, "{m:?}");
    }

    #[test]
    fn quadratic_in_five_dims() {
        let target = [1.0, -2.0, 3.0, 0.5, -0.25];
        let m = NelderMead::default().minimize(
            |x| x.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum(),
            &[0.0; 5],
            &[1.0; 5],
        );
        for (a, b) in m.x.iter().zip(&target) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn nan_is_avoided() {
        let m = NelderMead::default().minimize(
            |x| if x[0] < 0.0 { f64::NAN } else { (x[0] - 1.0).powi(2) },
            &[0.5],
            &[0.2],
        );
        assert!((m.x[0] - 1.0).abs() < 1e-5);
    }
}
