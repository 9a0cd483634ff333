//! Optimal power allocation over a fixed subcarrier assignment.
//!
//! With every utility satisfying `f'' <= f'`, the objective
//! `sum_k f_k(ln(1 + beta_k p_k))` is concave in the powers and the KKT
//! conditions read, for every subcarrier,
//!
//! ```text
//! beta_k f_k'(ln(1 + beta_k p_k)) / (1 + beta_k p_k) <= nu
//! (nu - marginal_k(p_k)) p_k = 0
//! ```
//!
//! Each marginal is non-increasing in `p_k`, so for a fixed `nu` every `p_k`
//! is found by a bracketed 1-D solve, and the total power is monotone in `nu`.
//! [`kkt_allocate`] brackets `nu` and drives the total to the budget.

use thiserror::Error;

use crate::utility::{criterion_check, UtilityModel, DEFAULT_GRID, DEFAULT_X_MAX};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 200;
const MAX_INNER_ITER: usize = 100;

#[derive(Debug, Error)]
pub enum AllocError {
    #[error("invalid allocation problem: {0}")]
    InvalidProblem(String),
    #[error("utility on subcarrier {carrier} violates the convexity criterion: {detail}")]
    NonCompliantUtility { carrier: usize, detail: String },
    #[error("no convergence after {} iterations (residual {})", best.iterations, best.residual)]
    MaxIterations { best: Box<AllocationResult> },
    #[error("every channel coefficient is zero")]
    AllZeroChannels,
    #[error("brute-force search supports at most 4 subcarriers, got {k}")]
    TooLarge { k: usize },
}

/// One subcarrier: its SNR coefficient and the utility of the user that owns it.
#[derive(Debug, Clone, Copy)]
pub struct Carrier<'a> {
    pub beta: f64,
    pub utility: &'a UtilityModel,
}

#[derive(Debug, Clone)]
pub struct AllocationProblem<'a> {
    carriers: Vec<Carrier<'a>>,
    budget: f64,
}

impl<'a> AllocationProblem<'a> {
    /// Validates the budget and channel coefficients and checks every custom
    /// utility against the criterion. Closed-form utilities are compliant by
    /// construction.
    pub fn new(carriers: Vec<Carrier<'a>>, budget: f64) -> Result<Self, AllocError> {
        if !(budget > 0.0) || !budget.is_finite() {
            return Err(AllocError::InvalidProblem(format!(
                "budget {budget} must be > 0"
            )));
        }
        let mut checked: Vec<*const UtilityModel> = Vec::new();
        for (k, c) in carriers.iter().enumerate() {
            if !(c.beta >= 0.0) || !c.beta.is_finite() {
                return Err(AllocError::InvalidProblem(format!(
                    "beta[{k}] = {} must be finite and >= 0",
                    c.beta
                )));
            }
            let ptr = c.utility as *const UtilityModel;
            if c.utility.is_closed_form() || checked.contains(&ptr) {
                continue;
            }
            let report = criterion_check(c.utility, DEFAULT_X_MAX, DEFAULT_GRID).map_err(|e| {
                AllocError::NonCompliantUtility {
                    carrier: k,
                    detail: e.to_string(),
                }
            })?;
            if !report.passed {
                return Err(AllocError::NonCompliantUtility {
                    carrier: k,
                    detail: format!(
                        "f' - f'' = {} at x = {}",
                        report.worst_margin, report.worst_x
                    ),
                });
            }
            checked.push(ptr);
        }
        Ok(Self { carriers, budget })
    }

    /// Same utility on every subcarrier.
    pub fn uniform(
        betas: &[f64],
        utility: &'a UtilityModel,
        budget: f64,
    ) -> Result<Self, AllocError> {
        Self::new(
            betas
                .iter()
                .map(|&beta| Carrier { beta, utility })
                .collect(),
            budget,
        )
    }

    pub fn carriers(&self) -> &[Carrier<'a>] {
        &self.carriers
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.carriers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.carriers.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationResult {
    pub powers: Vec<f64>,
    /// Dual variable of the total-power constraint; NaN when not computed.
    pub nu: f64,
    pub objective: f64,
    pub iterations: usize,
    /// `budget - sum(powers)`.
    pub residual: f64,
}

/// `beta f'(ln(1 + beta p)) / (1 + beta p)`.
#[inline]
pub fn marginal(u: &UtilityModel, beta: f64, p: f64) -> f64 {
    if beta == 0.0 {
        return 0.0;
    }
    let q = 1.0 + beta * p;
    beta * u.d1(q.ln()) / q
}

/// `sum_k f_k(ln(1 + beta_k p_k))`.
pub fn objective(problem: &AllocationProblem<'_>, powers: &[f64]) -> f64 {
    problem
        .carriers
        .iter()
        .zip(powers)
        .map(|(c, &p)| c.utility.value((c.beta * p).ln_1p()))
        .sum()
}

fn finish(
    problem: &AllocationProblem<'_>,
    powers: Vec<f64>,
    nu: f64,
    iterations: usize,
) -> AllocationResult {
    let objective = objective(problem, &powers);
    let residual = problem.budget - powers.iter().sum::<f64>();
    AllocationResult {
        powers,
        nu,
        objective,
        iterations,
        residual,
    }
}

/// Solves `marginal(p) = nu` on `[0, budget]` by Newton steps kept inside a
/// shrinking bracket, to within `tol_p` in power. Also returns `dp/dnu`, zero
/// when `p` sits on a bound.
fn solve_carrier(
    c: &Carrier<'_>,
    k: usize,
    nu: f64,
    ends: (f64, f64),
    budget: f64,
    tol_p: f64,
    warm: f64,
) -> Result<(f64, f64), AllocError> {
    let beta = c.beta;
    if beta == 0.0 || ends.0 <= nu {
        return Ok((0.0, 0.0));
    }
    if ends.1 >= nu {
        return Ok((budget, 0.0));
    }
    let u = c.utility;
    let (mut lo, mut hi) = (0.0, budget);
    let mut p = if warm > lo && warm < hi {
        warm
    } else {
        0.5 * (lo + hi)
    };
    let mut dp = 0.0;
    for _ in 0..MAX_INNER_ITER {
        let q = 1.0 + beta * p;
        let (d1, d2) = u.derivs(q.ln());
        if d2 - d1 > 1e-9 * (1.0 + d1.abs()) {
            return Err(AllocError::NonCompliantUtility {
                carrier: k,
                detail: format!("marginal increases at p = {p}"),
            });
        }
        let g = beta * d1 / q - nu;
        let slope = beta * beta * (d2 - d1) / (q * q);
        dp = if slope < 0.0 { 1.0 / slope } else { 0.0 };
        if g == 0.0 {
            return Ok((p, dp));
        }
        if g > 0.0 {
            lo = p;
        } else {
            hi = p;
        }
        let newton = p - g * dp;
        if slope < 0.0 && (newton - p).abs() <= tol_p {
            return Ok((newton.clamp(lo, hi), dp));
        }
        if hi - lo <= tol_p {
            return Ok((0.5 * (lo + hi), dp));
        }
        p = if slope < 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Ok((p, dp))
}

/// Total power at `nu` and its derivative in `nu`.
fn powers_at(
    problem: &AllocationProblem<'_>,
    ends: &[(f64, f64)],
    nu: f64,
    tol: f64,
    warm: &[f64],
    out: &mut [f64],
) -> Result<(f64, f64), AllocError> {
    let tol_p = 0.1 * tol / problem.carriers.len() as f64;
    let mut total = 0.0;
    let mut slope = 0.0;
    for (k, ((c, e), (w, o))) in problem
        .carriers
        .iter()
        .zip(ends)
        .zip(warm.iter().zip(out.iter_mut()))
        .enumerate()
    {
        let (p, dp) = solve_carrier(c, k, nu, *e, problem.budget, tol_p, *w)?;
        *o = p;
        total += p;
        slope += dp;
    }
    Ok((total, slope))
}

/// KKT power allocation by bracketing the dual variable.
///
/// The outer search keeps `nu` bracketed between a point where the total power
/// exceeds the budget and one where it falls short. Steps are Newton on the
/// total power when they land inside the bracket, Illinois-style false position
/// otherwise, and bisection when the residual stops halving. It stops when the
/// total is within `tol` of the budget; if the bracket collapses first (flat
/// marginals make the total jump), the two sides are blended so the budget is
/// met exactly.
pub fn kkt_allocate(
    problem: &AllocationProblem<'_>,
    tol: f64,
    max_iter: usize,
) -> Result<AllocationResult, AllocError> {
    kkt_allocate_from(problem, tol, max_iter, None)
}

/// [`kkt_allocate`] with a starting guess for `nu`, typically the multiplier of
/// a nearby problem. The result does not depend on the guess beyond `tol`.
pub fn kkt_allocate_from(
    problem: &AllocationProblem<'_>,
    tol: f64,
    max_iter: usize,
    nu_hint: Option<f64>,
) -> Result<AllocationResult, AllocError> {
    if !(tol > 0.0) {
        return Err(AllocError::InvalidProblem(format!("tol {tol} must be > 0")));
    }
    let n = problem.carriers.len();
    let budget = problem.budget;
    if n == 0 {
        return Ok(finish(problem, Vec::new(), 0.0, 0));
    }
    // Marginals at zero power and at the full budget, per carrier.
    let ends: Vec<(f64, f64)> = problem
        .carriers
        .iter()
        .map(|c| {
            (
                marginal(c.utility, c.beta, 0.0),
                marginal(c.utility, c.beta, budget),
            )
        })
        .collect();
    let nu_max = ends.iter().map(|e| e.0).fold(0.0, f64::max);
    if !(nu_max > 0.0) {
        return Ok(finish(problem, vec![0.0; n], 0.0, 0));
    }

    let mut p_lo = vec![0.0; n];
    let (s_zero, d_zero) = powers_at(problem, &ends, 0.0, tol, &vec![0.0; n], &mut p_lo)?;
    if s_zero <= budget + tol {
        // Every carrier saturates before the budget binds, unless one carrier
        // takes all of it, in which case its marginal there prices the budget.
        let nu = capped_price(&ends, &p_lo, budget, 0.0);
        return Ok(finish(problem, p_lo, nu, 0));
    }

    let mut p_hi = vec![0.0; n];
    let (mut lo, mut hi) = (0.0, nu_max);
    let (mut g_lo, mut g_hi) = (s_zero - budget, -budget);
    let mut last = (0.0, s_zero - budget, d_zero);
    let mut trial = p_lo.clone();
    let mut warm = p_lo.clone();
    let mut last_kept: Option<bool> = None;
    // Latest residual on each side of the root, before Illinois halving.
    let mut side_g = (s_zero - budget, -budget);
    let mut stalled = false;
    let mut force_bisect = false;

    for it in 1..=max_iter {
        // Newton in 1/nu, where the total power is close to linear.
        let newton = if last.2 < 0.0 && last.0 > 0.0 {
            let nu0 = last.0;
            1.0 / (1.0 / nu0 + last.1 / (nu0 * nu0 * last.2))
        } else if last.2 < 0.0 {
            last.0 - last.1 / last.2
        } else {
            f64::NAN
        };
        let secant = hi - g_hi * (hi - lo) / (g_hi - g_lo);
        let mut nu = match nu_hint {
            Some(h) if it == 1 && h > lo && h < hi => h,
            _ if !force_bisect && newton > lo && newton < hi => newton,
            _ if !force_bisect && secant > lo && secant < hi => secant,
            _ => f64::NAN,
        };
        if nu.is_nan() {
            nu = if lo > 0.0 && hi > 4.0 * lo {
                (lo * hi).sqrt()
            } else {
                0.5 * (lo + hi)
            };
        }
        let (s, ds) = powers_at(problem, &ends, nu, tol, &warm, &mut trial)?;
        let g = s - budget;
        if g.abs() <= tol {
            if let Some(k) = trial.iter().position(|&p| p >= budget) {
                // The others hold at most `tol` between them; give this carrier all of it.
                trial.fill(0.0);
                trial[k] = budget;
                return Ok(finish(problem, trial, ends[k].1, it));
            }
            if s > budget {
                let shrink = budget / s;
                trial.iter_mut().for_each(|p| *p *= shrink);
            }
            return Ok(finish(problem, trial, nu, it));
        }
        let same_side = if g > 0.0 {
            &mut side_g.0
        } else {
            &mut side_g.1
        };
        let stall = g.abs() > 0.5 * same_side.abs();
        *same_side = g;
        force_bisect = stall && stalled;
        stalled = stall;
        last = (nu, g, ds);
        warm.copy_from_slice(&trial);
        if g > 0.0 {
            lo = nu;
            g_lo = g;
            p_lo.copy_from_slice(&trial);
            if last_kept == Some(false) {
                g_hi *= 0.5;
            }
            last_kept = Some(false);
        } else {
            hi = nu;
            g_hi = g;
            p_hi.copy_from_slice(&trial);
            if last_kept == Some(true) {
                g_lo *= 0.5;
            }
            last_kept = Some(true);
        }
        if hi - lo <= 1e-15 * hi.max(f64::MIN_POSITIVE) {
            return Ok(blend(problem, &p_lo, &p_hi, lo, hi, it));
        }
    }
    let best = blend(problem, &p_lo, &p_hi, lo, hi, max_iter);
    Err(AllocError::MaxIterations {
        best: Box::new(best),
    })
}

/// A carrier holding the whole budget makes the total flat in `nu`; the
/// multiplier is then that carrier's marginal at the budget.
fn capped_price(ends: &[(f64, f64)], powers: &[f64], full: f64, nu: f64) -> f64 {
    ends.iter()
        .zip(powers)
        .find(|(_, &p)| p >= full)
        .map_or(nu, |(e, _)| e.1)
}

/// Convex combination of the over- and under-budget iterates that spends the
/// budget exactly.
fn blend(
    problem: &AllocationProblem<'_>,
    p_lo: &[f64],
    p_hi: &[f64],
    lo: f64,
    hi: f64,
    iterations: usize,
) -> AllocationResult {
    let budget = problem.budget;
    let s_lo: f64 = p_lo.iter().sum();
    let s_hi: f64 = p_hi.iter().sum();
    let theta = if s_lo > s_hi {
        ((budget - s_hi) / (s_lo - s_hi)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let mut powers: Vec<f64> = p_hi
        .iter()
        .zip(p_lo)
        .map(|(&h, &l)| h + theta * (l - h))
        .collect();
    let total: f64 = powers.iter().sum();
    if total > budget {
        let shrink = budget / total;
        powers.iter_mut().for_each(|p| *p *= shrink);
    }
    let nu = lo + (1.0 - theta) * (hi - lo);
    finish(problem, powers, nu, iterations)
}

/// Exact waterfilling for `f(x) = x`: `p_k = max(0, 1/nu - 1/beta_k)`.
pub fn waterfill(betas: &[f64], budget: f64) -> Result<AllocationResult, AllocError> {
    if !(budget > 0.0) || !budget.is_finite() {
        return Err(AllocError::InvalidProblem(format!(
            "budget {budget} must be > 0"
        )));
    }
    if betas.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
        return Err(AllocError::InvalidProblem(
            "betas must be finite and >= 0".into(),
        ));
    }
    let mut order: Vec<usize> = (0..betas.len()).filter(|&k| betas[k] > 0.0).collect();
    if order.is_empty() {
        return Err(AllocError::AllZeroChannels);
    }
    order.sort_by(|&a, &b| betas[b].total_cmp(&betas[a]).then(a.cmp(&b)));

    let inv: Vec<f64> = order.iter().map(|&k| 1.0 / betas[k]).collect();
    let mut prefix = Vec::with_capacity(inv.len() + 1);
    prefix.push(0.0);
    for v in &inv {
        prefix.push(prefix.last().unwrap() + v);
    }
    let mut active = 1;
    let mut level = budget + inv[0];
    for m in (1..=order.len()).rev() {
        let candidate = (budget + prefix[m]) / m as f64;
        if candidate > inv[m - 1] {
            active = m;
            level = candidate;
            break;
        }
    }
    let mut powers = vec![0.0; betas.len()];
    for (&k, &iv) in order.iter().zip(&inv).take(active) {
        powers[k] = level - iv;
    }
    let objective = betas
        .iter()
        .zip(&powers)
        .map(|(&b, &p)| (b * p).ln_1p())
        .sum();
    let residual = budget - powers.iter().sum::<f64>();
    Ok(AllocationResult {
        powers,
        nu: 1.0 / level,
        objective,
        iterations: order.len() - active + 1,
        residual,
    })
}

/// Best point of the grid `{0, step, 2 step, ..} ^ K` with `sum p <= budget`.
///
/// The objective is separable, so the grid maximum is found exactly by a
/// knapsack recursion over carriers instead of listing every grid point.
/// Supports `K <= 4`. `nu` is NaN in the result.
pub fn brute_force_oracle(
    problem: &AllocationProblem<'_>,
    grid_step: f64,
) -> Result<AllocationResult, AllocError> {
    let k_total = problem.carriers.len();
    if k_total > 4 {
        return Err(AllocError::TooLarge { k: k_total });
    }
    if !(grid_step > 0.0) {
        return Err(AllocError::InvalidProblem(format!(
            "grid step {grid_step} must be > 0"
        )));
    }
    if k_total == 0 {
        return Ok(finish(problem, Vec::new(), f64::NAN, 0));
    }
    let units = (problem.budget / grid_step + 1e-9).floor() as usize;
    let values: Vec<Vec<f64>> = problem
        .carriers
        .iter()
        .map(|c| {
            (0..=units)
                .map(|j| c.utility.value((c.beta * j as f64 * grid_step).ln_1p()))
                .collect()
        })
        .collect();

    // best[k][c]: best total of carriers 0..=k using at most c units; choice[k][c]: units on k.
    let mut best = vec![vec![f64::NEG_INFINITY; units + 1]; k_total];
    let mut choice = vec![vec![0usize; units + 1]; k_total];
    for c in 0..=units {
        let (j, v) = (0..=c).fold((0, f64::NEG_INFINITY), |acc, j| {
            if values[0][j] > acc.1 {
                (j, values[0][j])
            } else {
                acc
            }
        });
        best[0][c] = v;
        choice[0][c] = j;
    }
    for k in 1..k_total {
        for c in 0..=units {
            let mut arg = (0, f64::NEG_INFINITY);
            for j in 0..=c {
                let v = values[k][j] + best[k - 1][c - j];
                if v > arg.1 {
                    arg = (j, v);
                }
            }
            best[k][c] = arg.1;
            choice[k][c] = arg.0;
        }
    }
    let mut powers = vec![0.0; k_total];
    let mut left = units;
    for k in (0..k_total).rev() {
        let j = choice[k][left];
        powers[k] = j as f64 * grid_step;
        left -= j;
    }
    let evaluated = (units + 1).pow(k_total as u32);
    Ok(finish(problem, powers, f64::NAN, evaluated))
}
