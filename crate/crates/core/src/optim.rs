//! Derivative-free Nelder–Mead simplex minimization.

#[derive(Debug, Clone)]
pub struct SimplexOptions {
    pub max_iterations: usize,
    /// Converged once max − min of the objective over the simplex drops below this.
    pub f_tol: f64,
    /// Edge length of the initial simplex along each coordinate.
    pub initial_step: f64,
    /// Fresh-simplex restarts from the incumbent after convergence.
    pub restarts: usize,
    /// Also converged once every vertex lies within `x_tol·(1 + |x_best|)` of
    /// the best one in each coordinate; the simplex can no longer move.
    pub x_tol: f64,
    /// Keep the per-iteration incumbent value.
    pub record_trace: bool,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            f_tol: 1e-9,
            initial_step: 0.5,
            restarts: 1,
            x_tol: 1e-13,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Best objective after each iteration (non-increasing).
    pub trace: Vec<f64>,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

fn collapsed(pts: &[Vec<f64>], best: usize, x_tol: f64) -> bool {
    pts.iter()
        .all(|p| p.iter().zip(&pts[best]).all(|(a, b)| (a - b).abs() <= x_tol * (1.0 + b.abs())))
}

/// Minimize `f` starting from `x0`.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: &SimplexOptions) -> SimplexResult
where
    F: FnMut(&[f64]) -> f64,
{
    let mut total = SimplexResult {
        x: x0.to_vec(),
        value: f64::INFINITY,
        iterations: 0,
        evaluations: 0,
        converged: false,
        trace: Vec::new(),
    };
    let mut start = x0.to_vec();
    let mut round = 0;
    loop {
        let remaining = opts.max_iterations.saturating_sub(total.iterations);
        if remaining == 0 && round > 0 {
            break;
        }
        let r = run(&mut f, &start, opts, remaining);
        total.iterations += r.iterations;
        total.evaluations += r.evaluations;
        total.trace.extend(r.trace.iter().map(|&v| v.min(total.value)));
        let improved = total.value - r.value;
        if r.value <= total.value {
            total.value = r.value;
            total.x = r.x.clone();
        }
        total.converged = r.converged;
        start = total.x.clone();
        if !r.converged || round >= opts.restarts || (round > 0 && improved.abs() < opts.f_tol) {
            break;
        }
        round += 1;
    }
    total
}

fn run<F>(f: &mut F, x0: &[f64], opts: &SimplexOptions, budget: usize) -> SimplexResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        sanitize(f(x))
    };

    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    pts.push(x0.to_vec());
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += opts.initial_step;
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| eval(p, &mut evals)).collect();

    let mut order: Vec<usize> = (0..=n).collect();
    let mut centroid = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut trial2 = vec![0.0; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    loop {
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        let (best, worst, second) = (order[0], order[n], order[n.saturating_sub(1)]);
        if opts.record_trace {
            trace.push(vals[best]);
        }
        let spread = vals[worst] - vals[best];
        if n == 0 || spread < opts.f_tol || (vals[best].is_infinite() && vals[worst].is_infinite()) {
            converged = spread < opts.f_tol || n == 0;
            break;
        }
        if collapsed(&pts, best, opts.x_tol) {
            converged = vals[best].is_finite();
            break;
        }
        if iterations >= budget {
            break;
        }
        iterations += 1;

        centroid.iter_mut().for_each(|c| *c = 0.0);
        for &idx in &order[..n] {
            for (c, v) in centroid.iter_mut().zip(&pts[idx]) {
                *c += v;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= n as f64);

        let along = |coef: f64, out: &mut Vec<f64>, from: &[f64], c: &[f64]| {
            for ((o, &ci), &wi) in out.iter_mut().zip(c).zip(from) {
                *o = ci + coef * (ci - wi);
            }
        };

        along(REFLECT, &mut trial, &pts[worst], &centroid);
        let f_r = eval(&trial, &mut evals);

        if f_r < vals[best] {
            along(EXPAND, &mut trial2, &pts[worst], &centroid);
            let f_e = eval(&trial2, &mut evals);
            if f_e < f_r {
                pts[worst].copy_from_slice(&trial2);
                vals[worst] = f_e;
            } else {
                pts[worst].copy_from_slice(&trial);
                vals[worst] = f_r;
            }
        } else if f_r < vals[second] {
            pts[worst].copy_from_slice(&trial);
            vals[worst] = f_r;
        } else {
            // Outside contraction when the reflection beats the worst point, inside otherwise.
            let (coef, reference) = if f_r < vals[worst] {
                (CONTRACT, f_r)
            } else {
                (-CONTRACT, vals[worst])
            };
            along(coef, &mut trial2, &pts[worst], &centroid);
            let f_c = eval(&trial2, &mut evals);
            if f_c < reference {
                pts[worst].copy_from_slice(&trial2);
                vals[worst] = f_c;
            } else {
                let anchor = pts[best].clone();
                for &idx in &order[1..] {
                    for (p, &a) in pts[idx].iter_mut().zip(&anchor) {
                        *p = a + SHRINK * (*p - a);
                    }
                    vals[idx] = eval(&pts[idx], &mut evals);
                }
            }
        }
    }

    let best = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    SimplexResult {
        x: pts[best].clone(),
        value: vals[best],
        iterations,
        evaluations: evals,
        converged,
        trace,
    }
}
