//! BFGS quasi-Newton minimization with a strong-Wolfe line search.

/// Objective evaluation: `None` marks an infeasible point (e.g. a singular
/// candidate matrix), which the line search backs away from.
pub type Evaluation = Option<(f64, Vec<f64>)>;

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Converged once `|grad|_inf < grad_tol * max(1, f)`.
    pub grad_tol: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { max_iter: 500, grad_tol: 1e-8, c1: 1e-4, c2: 0.9 }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

struct Point {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
    slope: f64,
}

struct LineSearch<'a, F> {
    obj: &'a mut F,
    x: &'a [f64],
    p: &'a [f64],
    evals: usize,
}

impl<F: FnMut(&[f64]) -> Evaluation> LineSearch<'_, F> {
    fn eval(&mut self, alpha: f64) -> Option<Point> {
        self.evals += 1;
        let trial: Vec<f64> = self.x.iter().zip(self.p).map(|(x, p)| x + alpha * p).collect();
        let (f, g) = (self.obj)(&trial)?;
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let slope = dot(&g, self.p);
        Some(Point { alpha, f, g, slope })
    }
}

/// Minimizer of the cubic through two points with slopes, safeguarded to
/// the interior of the interval.
fn cubic_step(lo: &Point, hi: &Point) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let d1 = lo.slope + hi.slope - 3.0 * (lo.f - hi.f) / (a - b);
    let disc = d1 * d1 - lo.slope * hi.slope;
    let mid = 0.5 * (a + b);
    if disc < 0.0 {
        return mid;
    }
    let d2 = disc.sqrt() * (b - a).signum();
    let t = b - (b - a) * (hi.slope + d2 - d1) / (hi.slope - lo.slope + 2.0 * d2);
    let (min, max) = if a < b { (a, b) } else { (b, a) };
    let margin = 0.1 * (max - min);
    if !t.is_finite() || t < min + margin || t > max - margin {
        mid
    } else {
        t
    }
}

fn strong_wolfe<F: FnMut(&[f64]) -> Evaluation>(
    ls: &mut LineSearch<'_, F>,
    f0: f64,
    slope0: f64,
    alpha_init: f64,
    opts: &BfgsOptions,
) -> Option<Point> {
    let origin = Point { alpha: 0.0, f: f0, g: Vec::new(), slope: slope0 };
    let mut prev = origin;
    let mut alpha = alpha_init;
    let mut shrinks = 0;
    for i in 0..60 {
        let cur = match ls.eval(alpha) {
            Some(p) => p,
            None => {
                shrinks += 1;
                if shrinks > 40 {
                    return None;
                }
                alpha = 0.5 * (prev.alpha + alpha);
                continue;
            }
        };
        if cur.f > f0 + opts.c1 * alpha * slope0 || (i > 0 && cur.f >= prev.f) {
            return zoom(ls, prev, cur, f0, slope0, opts);
        }
        if cur.slope.abs() <= -opts.c2 * slope0 {
            return Some(cur);
        }
        if cur.slope >= 0.0 {
            return zoom(ls, cur, prev, f0, slope0, opts);
        }
        prev = cur;
        alpha *= 2.0;
    }
    None
}

fn zoom<F: FnMut(&[f64]) -> Evaluation>(
    ls: &mut LineSearch<'_, F>,
    mut lo: Point,
    mut hi: Point,
    f0: f64,
    slope0: f64,
    opts: &BfgsOptions,
) -> Option<Point> {
    for _ in 0..60 {
        let alpha = cubic_step(&lo, &hi);
        if (hi.alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1e-16) {
            break;
        }
        let cur = match ls.eval(alpha) {
            Some(p) => p,
            None => {
                // treat as a failed sufficient-decrease test
                hi = Point { alpha, f: f64::INFINITY, g: Vec::new(), slope: 0.0 };
                hi.slope = lo.slope;
                continue;
            }
        };
        if cur.f > f0 + opts.c1 * alpha * slope0 || cur.f >= lo.f {
            hi = cur;
        } else {
            if cur.slope.abs() <= -opts.c2 * slope0 {
                return Some(cur);
            }
            if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
    // accept the best sufficient-decrease point found
    (lo.alpha > 0.0).then_some(lo)
}

/// Minimizes `obj` from `x0`. Returns `None` only if `x0` is infeasible.
pub fn bfgs<F: FnMut(&[f64]) -> Evaluation>(mut obj: F, x0: &[f64], opts: &BfgsOptions) -> Option<BfgsOutcome> {
    let dim = x0.len();
    let (mut f, mut g) = obj(x0)?;
    if !f.is_finite() {
        return None;
    }
    let mut x = x0.to_vec();
    let mut evaluations = 1;
    // inverse Hessian approximation, row-major
    let mut h = vec![0.0; dim * dim];
    for i in 0..dim {
        h[i * dim + i] = 1.0;
    }
    let mut first = true;
    let mut iterations = 0;
    let converged_at = |f: f64, g: &[f64]| inf_norm(g) < opts.grad_tol * f.abs().max(1.0);

    while iterations < opts.max_iter && !converged_at(f, &g) {
        let mut p: Vec<f64> = (0..dim).map(|i| -dot(&h[i * dim..(i + 1) * dim], &g)).collect();
        let mut slope = dot(&g, &p);
        if slope >= 0.0 {
            // lost positive definiteness: restart from steepest descent
            h.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..dim {
                h[i * dim + i] = 1.0;
            }
            first = true;
            p = g.iter().map(|v| -v).collect();
            slope = dot(&g, &p);
        }
        let alpha0 = if first {
            (1.0 / inf_norm(&p).max(1e-300)).min(1.0) * x.iter().fold(1.0f64, |m, v| m.max(v.abs())) * 0.1
        } else {
            1.0
        };
        let mut ls = LineSearch { obj: &mut obj, x: &x, p: &p, evals: 0 };
        let step = strong_wolfe(&mut ls, f, slope, alpha0, opts);
        evaluations += ls.evals;
        iterations += 1;
        let Some(step) = step else {
            if first {
                break;
            }
            // retry once along steepest descent with a fresh Hessian
            h.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..dim {
                h[i * dim + i] = 1.0;
            }
            first = true;
            continue;
        };
        let s: Vec<f64> = p.iter().map(|v| step.alpha * v).collect();
        let y: Vec<f64> = step.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let f_prev = f;
        x.iter_mut().zip(&s).for_each(|(xi, si)| *xi += si);
        f = step.f;
        g = step.g;
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if first {
                let scale = sy / dot(&y, &y);
                h.iter_mut().for_each(|v| *v *= scale);
                first = false;
            }
            // H <- (I - rho s y') H (I - rho y s') + rho s s'
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..dim).map(|i| dot(&h[i * dim..(i + 1) * dim], &y)).collect();
            let yhy = dot(&y, &hy);
            for i in 0..dim {
                for j in 0..dim {
                    h[i * dim + j] += -rho * (s[i] * hy[j] + hy[i] * s[j])
                        + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
        if (f_prev - f).abs() <= 1e-16 * f.abs().max(1e-300) && inf_norm(&s) <= 1e-15 * inf_norm(&x) {
            break;
        }
    }
    let grad_norm = inf_norm(&g);
    Some(BfgsOutcome {
        converged: converged_at(f, &g),
        x,
        f,
        grad: g,
        grad_norm,
        iterations,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Evaluation {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Some((f, g))
    }

    #[test]
    fn minimizes_rosenbrock() {
        let out = bfgs(rosenbrock, &[-1.2, 1.0], &BfgsOptions::default()).unwrap();
        assert!(out.converged, "{out:?}");
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn quadratic_in_many_dimensions() {
        let n = 16;
        let obj = |x: &[f64]| {
            let f = x.iter().enumerate().map(|(i, v)| (i + 1) as f64 * (v - 1.0).powi(2)).sum();
            let g = x.iter().enumerate().map(|(i, v)| 2.0 * (i + 1) as f64 * (v - 1.0)).collect();
            Some((f, g))
        };
        let out = bfgs(obj, &vec![10.0; n], &BfgsOptions::default()).unwrap();
        assert!(out.converged);
        assert!(out.x.iter().all(|v| (v - 1.0).abs() < 1e-8));
    }

    #[test]
    fn avoids_infeasible_region() {
        // f = x^2 - ln(x), minimum at 1/sqrt(2); infeasible for x <= 0
        let obj = |x: &[f64]| {
            if x[0] <= 0.0 {
                None
            } else {
                Some((x[0] * x[0] - x[0].ln(), vec![2.0 * x[0] - 1.0 / x[0]]))
            }
        };
        let out = bfgs(obj, &[3.0], &BfgsOptions::default()).unwrap();
        assert!(out.converged);
        assert!((out.x[0] - 0.5f64.sqrt()).abs() < 1e-8);
        assert!(bfgs(obj, &[-1.0], &BfgsOptions::default()).is_none());
    }

    #[test]
    fn never_increases_the_objective() {
        let out = bfgs(rosenbrock, &[2.5, -1.0], &BfgsOptions { max_iter: 3, ..Default::default() }).unwrap();
        assert!(out.f <= rosenbrock(&[2.5, -1.0]).unwrap().0);
        assert!(!out.converged);
        assert_eq!(out.iterations, 3);
    }
}
