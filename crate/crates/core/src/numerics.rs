//! Shared numerical kernels: conjugate gradient, the two-condition
//! backtracking line search of the inner solver, projected gradient ascent
//! on an infinity-norm box, and finite-difference checkers used by the
//! verification suites.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Conjugate-gradient configuration.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CgConfig {
    pub max_iters: usize,
    /// Relative residual target: stop once `||Ax - b|| <= residual_tol * ||b||`.
    pub residual_tol: f64,
    /// Added to the operator as `A + damping * I`. The Fisher products apply
    /// their own damping, so this defaults to zero.
    pub damping: f64,
}

impl CgConfig {
    /// The usual sizing: ten iterations per dimension.
    pub fn for_dim(dim: usize) -> Self {
        CgConfig {
            max_iters: 10 * dim.max(1),
            residual_tol: 1e-8,
            damping: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CgResult {
    pub x: DVector<f64>,
    pub converged: bool,
    pub iters: usize,
    pub residual_norm: f64,
    /// `||r||` after each iteration, starting with the initial residual.
    pub residual_history: Vec<f64>,
}

/// Solve `(A + damping I) x = b` for a symmetric positive definite operator
/// given matrix-free. Aborts on non-finite arithmetic.
pub fn conjugate_gradient<F>(apply_a: F, b: &DVector<f64>, config: &CgConfig) -> Result<CgResult>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    if !(config.residual_tol > 0.0) {
        return Err(Error::InvalidArgument("residual_tol must be positive".into()));
    }
    let n = b.len();
    let apply = |v: &DVector<f64>| -> DVector<f64> { apply_a(v) + config.damping * v };
    let b_norm = b.norm();
    let mut x = DVector::<f64>::zeros(n);
    if b_norm == 0.0 {
        return Ok(CgResult {
            x,
            converged: true,
            iters: 0,
            residual_norm: 0.0,
            residual_history: vec![0.0],
        });
    }
    let target = config.residual_tol * b_norm;
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    let mut history = vec![rs.sqrt()];
    let mut iters = 0;
    while iters < config.max_iters {
        if rs.sqrt() <= target {
            break;
        }
        let ap = apply(&p);
        let p_ap = p.dot(&ap);
        if !p_ap.is_finite() {
            return Err(Error::NonFinite("conjugate gradient"));
        }
        if p_ap <= 0.0 {
            // Operator not positive definite along p; stop with the current
            // iterate rather than stepping backwards.
            break;
        }
        let alpha = rs / p_ap;
        x += alpha * &p;
        r -= alpha * &ap;
        let rs_new = r.dot(&r);
        if !rs_new.is_finite() {
            return Err(Error::NonFinite("conjugate gradient"));
        }
        p = &r + (rs_new / rs) * &p;
        rs = rs_new;
        history.push(rs.sqrt());
        iters += 1;
    }
    let residual_norm = rs.sqrt();
    Ok(CgResult {
        x,
        converged: residual_norm <= target,
        iters,
        residual_norm,
        residual_history: history,
    })
}

/// Backtracking line-search configuration.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LineSearchConfig {
    /// Sufficient-increase fraction (the `tau` of the inner conditions).
    pub tau_armijo: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        LineSearchConfig {
            tau_armijo: 0.1,
            backtrack_factor: 0.5,
            max_backtracks: 20,
        }
    }
}

impl LineSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_armijo > 0.0 && self.tau_armijo < 1.0) {
            return Err(Error::InvalidArgument("tau_armijo must be in (0,1)".into()));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::InvalidArgument(
                "backtrack_factor must be in (0,1)".into(),
            ));
        }
        Ok(())
    }
}

/// Backtracking search for the largest step `alpha` in `{1, f, f^2, ...}`
/// satisfying both inner-solver conditions:
///
/// * sufficient increase: `L(theta + alpha d) >= L(theta) + tau * alpha * d.g`
///   (the increase term is scaled by `alpha`, standard Armijo form);
/// * feasibility: `D(theta + alpha d) <= delta`.
///
/// Returns `0.0` when no tested step qualifies; the caller treats that as
/// inner termination. Non-finite evaluations reject the step and keep
/// backtracking. A non-ascent direction (`d.g <= 0`) returns `0.0`
/// immediately since the sufficient-increase test would be vacuous.
pub fn feasible_line_search<L, D>(
    eval_l: L,
    eval_d: D,
    theta: &DVector<f64>,
    direction: &DVector<f64>,
    grad: &DVector<f64>,
    delta: f64,
    config: &LineSearchConfig,
) -> Result<f64>
where
    L: Fn(&DVector<f64>) -> f64,
    D: Fn(&DVector<f64>) -> f64,
{
    config.validate()?;
    let dg = direction.dot(grad);
    if !(dg > 0.0) {
        return Ok(0.0);
    }
    let l0 = eval_l(theta);
    if !l0.is_finite() {
        return Err(Error::NonFinite("line search anchor"));
    }
    let mut alpha = 1.0;
    for _ in 0..config.max_backtracks {
        let candidate = theta + alpha * direction;
        let l = eval_l(&candidate);
        let d = eval_d(&candidate);
        if l.is_finite() && d.is_finite() && l >= l0 + config.tau_armijo * alpha * dg && d <= delta
        {
            return Ok(alpha);
        }
        alpha *= config.backtrack_factor;
    }
    Ok(0.0)
}

/// Monotone projected gradient ascent on the box
/// `{x : ||x - center||_inf <= radius_inf}`.
///
/// `objective` returns the value and gradient at a point. Iterates are
/// clipped into the box exactly; a backtracked step is only taken when it
/// improves the objective, so the value sequence is nondecreasing.
pub fn projected_gradient_box<F>(
    objective: F,
    center: &DVector<f64>,
    radius_inf: f64,
    init: &DVector<f64>,
    steps: usize,
) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    if radius_inf < 0.0 || !radius_inf.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "box radius must be nonnegative, got {radius_inf}"
        )));
    }
    if init.len() != center.len() {
        return Err(Error::ShapeMismatch("box center and init".into()));
    }
    let clip = |x: &DVector<f64>| -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| {
            x[i].clamp(center[i] - radius_inf, center[i] + radius_inf)
        })
    };
    let mut x = clip(init);
    if radius_inf == 0.0 {
        return Ok(x);
    }
    let (mut fx, mut gx) = objective(&x);
    if !fx.is_finite() {
        return Err(Error::NonFinite("projected gradient start"));
    }
    let mut step = 1.0f64;
    for _ in 0..steps {
        if gx.norm() == 0.0 {
            break;
        }
        let mut t = step;
        let mut moved = false;
        for _ in 0..30 {
            let candidate = clip(&(&x + t * &gx));
            if candidate == x {
                break;
            }
            let (fc, gc) = objective(&candidate);
            if fc.is_finite() && fc > fx {
                x = candidate;
                fx = fc;
                gx = gc;
                step = t * 2.0;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Ok(x)
}

/// Central-difference gradient with per-coordinate step `scale * (1 + |x_i|)`.
pub fn fd_gradient<F>(f: F, x: &DVector<f64>, scale: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    DVector::from_fn(x.len(), |i, _| {
        let h = scale * (1.0 + x[i].abs());
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus[i] += h;
        minus[i] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    })
}

/// Central-difference Hessian-vector product from a gradient callback:
/// `(g(x + h v) - g(x - h v)) / (2 h)`.
pub fn fd_hessian_vec<G>(grad: G, x: &DVector<f64>, v: &DVector<f64>, h: f64) -> DVector<f64>
where
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    let plus = grad(&(x + h * v));
    let minus = grad(&(x - h * v));
    (plus - minus) / (2.0 * h)
}

/// Relative difference used by the finite-difference suites:
/// `||a - b|| / max(1, ||a||, ||b||)`.
pub fn relative_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1.0)
}
