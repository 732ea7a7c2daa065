//! Box-constrained Nelder–Mead simplex search.

/// Settings for [`nelder_mead`].
#[derive(Debug, Clone, Copy)]
pub struct NelderMead {
    pub max_evals: usize,
    /// Stop once the spread of simplex values falls below this.
    pub f_tol: f64,
    /// Initial simplex edge as a fraction of each coordinate's range.
    pub initial_step: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self {
            max_evals: 400,
            f_tol: 1e-10,
            initial_step: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
}

/// Minimises `f` within `[lower, upper]`. Trial points are projected onto the
/// box; NaN values count as +inf. The result is never worse than `x0`.
pub fn nelder_mead(
    settings: &NelderMead,
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
) -> Minimum {
    let d = x0.len();
    let project = |x: &mut Vec<f64>| {
        for ((v, &lo), &hi) in x.iter_mut().zip(lower).zip(upper) {
            *v = v.clamp(lo, hi);
        }
    };
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut start = x0.to_vec();
    project(&mut start);
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    let v0 = eval(&start, &mut evals);
    simplex.push((start.clone(), v0));
    for j in 0..d {
        let mut x = start.clone();
        let step = settings.initial_step * (upper[j] - lower[j]);
        x[j] = if x[j] + step <= upper[j] {
            x[j] + step
        } else {
            x[j] - step
        };
        let v = eval(&x, &mut evals);
        simplex.push((x, v));
    }

    while evals < settings.max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[d].1);
        if (worst - best).abs() <= settings.f_tol * (1.0 + best.abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..d)
            .map(|j| simplex[..d].iter().map(|(x, _)| x[j]).sum::<f64>() / d as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            let mut x: Vec<f64> = centroid
                .iter()
                .zip(&simplex[d].0)
                .map(|(c, w)| c + t * (c - w))
                .collect();
            project(&mut x);
            x
        };

        let xr = along(1.0);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = along(2.0);
            let fe = eval(&xe, &mut evals);
            simplex[d] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[d - 1].1 {
            simplex[d] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst {
                let x = along(0.5);
                let v = eval(&x, &mut evals);
                (x, v)
            } else {
                let x = along(-0.5);
                let v = eval(&x, &mut evals);
                (x, v)
            };
            if fc < fr.min(worst) {
                simplex[d] = (xc, fc);
            } else {
                // shrink towards the best vertex
                let best_x = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    let mut x: Vec<f64> = best_x
                        .iter()
                        .zip(&vertex.0)
                        .map(|(b, v)| b + 0.5 * (v - b))
                        .collect();
                    project(&mut x);
                    let v = eval(&x, &mut evals);
                    *vertex = (x, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    Minimum { x, value, evals }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_quadratic_minimum() {
        let f = |x: &[f64]| (x[0] - 0.3).powi(2) + 10.0 * (x[1] + 0.2).powi(2);
        let m = nelder_mead(
            &NelderMead::default(),
            f,
            &[1.0, 1.0],
            &[-2.0, -2.0],
            &[2.0, 2.0],
        );
        assert!((m.x[0] - 0.3).abs() < 1e-4);
        assert!((m.x[1] + 0.2).abs() < 1e-4);
    }

    #[test]
    fn respects_bounds() {
        let f = |x: &[f64]| x[0];
        let m = nelder_mead(&NelderMead::default(), f, &[0.5], &[0.0], &[1.0]);
        assert!(m.x[0] >= 0.0 && m.x[0] < 1e-6);
    }

    #[test]
    fn never_worse_than_start() {
        let f = |x: &[f64]| if x[0] == 0.25 { -1.0 } else { x[0].abs() };
        let m = nelder_mead(&NelderMead::default(), f, &[0.25], &[-1.0], &[1.0]);
        assert!(m.value <= -1.0);
    }
}
