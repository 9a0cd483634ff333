//! Utility functions that keep FDMA power allocation convex.
//!
//! The power-domain objective `sum_k f(ln(1 + beta_k p_k))` is concave exactly
//! when every utility satisfies `f''(x) <= f'(x)` for `x >= 0`. Writing the gap
//! as a slack `t(x) = f'(x) - f''(x) >= 0`, every admissible utility has the form
//!
//! ```text
//! f(x) = integral e^x [ integral -t(x) e^-x dx + C1 ] dx + C2
//! ```
//!
//! so a utility is fully described by its slack `t` plus the constants `C1`
//! (coefficient of `e^x`) and `C2` (additive constant). This module builds the
//! closed-form families (power, polynomial, exponential, proportional fairness,
//! sigmoid), checks the criterion numerically, and normalizes utilities.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Absolute tolerance on `f' - f''` when checking the criterion.
pub const CRITERION_EPS: f64 = 1e-9;
/// Default number of grid points used to validate `t(x) >= 0`.
pub const DEFAULT_GRID: usize = 4096;
/// Default upper end of the validation grid, in nats.
pub const DEFAULT_X_MAX: f64 = 20.0;

#[derive(Debug, Error)]
pub enum UtilityError {
    #[error("invalid utility parameters: {0}")]
    InvalidParams(String),
    #[error("degenerate case: {0}")]
    DegenerateCase(String),
    #[error("recovered slack t(x) = {t} < 0 at x = {x}; the fit is not criterion-compliant")]
    NonnegativityViolation {
        fit: Box<PolynomialFit>,
        x: f64,
        t: f64,
    },
    #[error("non-finite utility evaluation at x = {x}")]
    EvaluationFailure { x: f64 },
    #[error("cannot normalize: f({m}) == f(0)")]
    DegenerateRange { m: f64 },
    #[error("cannot normalize: f({m}) < f(0) would need a negative scale")]
    OrientationFlip { m: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Which closed-form family a model belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UtilityKind {
    /// `t(x) = a x^K`.
    Power,
    /// `t(x) = sum_n a_n x^n`.
    Polynomial,
    /// `t(x) = e^{a x}`.
    Exponential,
    /// `f(x) = C0 log(C1 x + C2) + C3 + C4 e^x`.
    ProportionalFairness,
    /// `f(x) = (1 + e^{-x + x0})^-1`.
    Sigmoid,
    /// `t(x) = a`, i.e. `f(x) = a x`.
    Linear,
    /// User-supplied `(f, f', f'')`.
    Custom,
}

impl UtilityKind {
    pub fn name(self) -> &'static str {
        match self {
            UtilityKind::Power => "power",
            UtilityKind::Polynomial => "polynomial",
            UtilityKind::Exponential => "exponential",
            UtilityKind::ProportionalFairness => "proportional_fairness",
            UtilityKind::Sigmoid => "sigmoid",
            UtilityKind::Linear => "linear",
            UtilityKind::Custom => "custom",
        }
    }
}

impl fmt::Display for UtilityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Case-specific parameters accepted by [`make_utility`].
#[derive(Debug, Clone, PartialEq)]
pub enum CaseParams {
    /// `t(x) = a x^k`, `a >= 0`.
    Power { a: f64, k: u32 },
    /// `t(x) = sum_n coeffs[n] x^n`, nonnegative on the validation grid.
    Polynomial { coeffs: Vec<f64> },
    /// `t(x) = e^{a x}` for `a != 1` (and `a != 0`).
    Exponential { a: f64 },
    /// The `a = 1` branch of the exponential family: `f(x) = -x e^x + (C1 + 1) e^x + C2`.
    ExponentialUnit,
    /// `f(x) = weight log(slope x + intercept) + offset + exp_coeff e^x`.
    ///
    /// `offset` and `exp_coeff` fold into the model's `C2` and `C1`.
    ProportionalFairness {
        weight: f64,
        slope: f64,
        intercept: f64,
        offset: f64,
        exp_coeff: f64,
    },
    /// Logistic curve with inflection point `x0`.
    Sigmoid { x0: f64 },
    /// `f(x) = a x`, `a >= 0`.
    Linear { a: f64 },
}

/// A case-tagged parameter record plus the general-solution constants.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilitySpec {
    pub case: CaseParams,
    /// Coefficient of `e^x`.
    pub c1: f64,
    /// Additive constant.
    pub c2: f64,
}

impl UtilitySpec {
    pub fn new(case: CaseParams) -> Self {
        Self {
            case,
            c1: 0.0,
            c2: 0.0,
        }
    }

    pub fn with_constants(mut self, c1: f64, c2: f64) -> Self {
        self.c1 = c1;
        self.c2 = c2;
        self
    }

    pub fn linear(a: f64) -> Self {
        Self::new(CaseParams::Linear { a })
    }

    pub fn sigmoid(x0: f64) -> Self {
        Self::new(CaseParams::Sigmoid { x0 })
    }

    /// `weight * log(slope * x + intercept)`.
    pub fn log(weight: f64, slope: f64, intercept: f64) -> Self {
        Self::new(CaseParams::ProportionalFairness {
            weight,
            slope,
            intercept,
            offset: 0.0,
            exp_coeff: 0.0,
        })
    }
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Polynomial in power-basis form with cached derivative coefficients.
#[derive(Clone, Debug, PartialEq)]
struct Poly {
    /// Slack coefficients `a_0..a_K`.
    t: Vec<f64>,
    /// Utility coefficients `b_1..b_{K+1}` at indices `1..`; index 0 is unused (zero).
    f: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
}

impl Poly {
    fn from_slack(t: Vec<f64>) -> Self {
        // b_j = (sum_{m >= j-1} a_m m!) / j!
        let k = t.len();
        let mut f = vec![0.0; k + 1];
        let mut suffix = 0.0;
        for j in (1..=k).rev() {
            suffix += t[j - 1] * factorial(j - 1);
            f[j] = suffix / factorial(j);
        }
        Self::from_utility_coeffs(t, f)
    }

    fn from_utility_coeffs(t: Vec<f64>, f: Vec<f64>) -> Self {
        let d1: Vec<f64> = f
            .iter()
            .enumerate()
            .skip(1)
            .map(|(j, b)| j as f64 * b)
            .collect();
        let d2: Vec<f64> = d1
            .iter()
            .enumerate()
            .skip(1)
            .map(|(j, b)| j as f64 * b)
            .collect();
        Self { t, f, d1, d2 }
    }
}

fn horner(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

#[derive(Clone)]
enum Shape {
    Poly {
        kind: UtilityKind,
        poly: Poly,
    },
    Exp {
        a: f64,
    },
    ExpUnit,
    Log {
        weight: f64,
        slope: f64,
        intercept: f64,
    },
    Sigmoid {
        x0: f64,
    },
    Custom {
        f: ScalarFn,
        d1: ScalarFn,
        d2: ScalarFn,
    },
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Poly { kind, poly } => f
                .debug_struct("Poly")
                .field("kind", kind)
                .field("t", &poly.t)
                .finish(),
            Shape::Exp { a } => f.debug_struct("Exp").field("a", a).finish(),
            Shape::ExpUnit => f.write_str("ExpUnit"),
            Shape::Log {
                weight,
                slope,
                intercept,
            } => f
                .debug_struct("Log")
                .field("weight", weight)
                .field("slope", slope)
                .field("intercept", intercept)
                .finish(),
            Shape::Sigmoid { x0 } => f.debug_struct("Sigmoid").field("x0", x0).finish(),
            Shape::Custom { .. } => f.write_str("Custom"),
        }
    }
}

/// Numerically stable logistic function.
/// `(logistic(z), logistic(-z))` from a single exponential.
#[inline]
fn logistic_pair(z: f64) -> (f64, f64) {
    let e = (-z.abs()).exp();
    let (big, small) = (1.0 / (1.0 + e), e / (1.0 + e));
    if z >= 0.0 {
        (big, small)
    } else {
        (small, big)
    }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// An evaluable utility `g(x) = scale * f(x) + offset` with analytic derivatives.
///
/// Models are immutable once built; cloning is cheap except for polynomial
/// coefficient vectors.
#[derive(Clone, Debug)]
pub struct UtilityModel {
    shape: Shape,
    c1: f64,
    c2: f64,
    scale: f64,
    offset: f64,
}

impl UtilityModel {
    /// Wraps a user-supplied triple. The allocator never differentiates numerically,
    /// so all three maps are required.
    pub fn custom<F, D1, D2>(f: F, d1: D1, d2: D2) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
        D1: Fn(f64) -> f64 + Send + Sync + 'static,
        D2: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            shape: Shape::Custom {
                f: Arc::new(f),
                d1: Arc::new(d1),
                d2: Arc::new(d2),
            },
            c1: 0.0,
            c2: 0.0,
            scale: 1.0,
            offset: 0.0,
        }
    }

    pub fn kind(&self) -> UtilityKind {
        match &self.shape {
            Shape::Poly { kind, .. } => *kind,
            Shape::Exp { .. } | Shape::ExpUnit => UtilityKind::Exponential,
            Shape::Log { .. } => UtilityKind::ProportionalFairness,
            Shape::Sigmoid { .. } => UtilityKind::Sigmoid,
            Shape::Custom { .. } => UtilityKind::Custom,
        }
    }

    pub fn c1(&self) -> f64 {
        self.c1
    }

    pub fn c2(&self) -> f64 {
        self.c2
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// True for closed-form families whose slack was validated at construction.
    pub fn is_closed_form(&self) -> bool {
        !matches!(self.shape, Shape::Custom { .. })
    }

    /// Exponential family with `a > 1`: admissible, but unbounded and decreasing.
    pub fn is_unbounded_decreasing(&self) -> bool {
        matches!(self.shape, Shape::Exp { a } if a > 1.0) || matches!(self.shape, Shape::ExpUnit)
    }

    /// Slack coefficients for the power, polynomial and linear families.
    pub fn slack_coefficients(&self) -> Option<&[f64]> {
        match &self.shape {
            Shape::Poly { poly, .. } => Some(&poly.t),
            _ => None,
        }
    }

    /// Coefficients `[C2, b_1, .., b_{K+1}]` of the polynomial part of the
    /// un-normalized utility (the `C1 e^x` term excluded).
    pub fn polynomial_coefficients(&self) -> Option<Vec<f64>> {
        match &self.shape {
            Shape::Poly { poly, .. } => {
                let mut out = poly.f.clone();
                out[0] = self.c2;
                Some(out)
            }
            _ => None,
        }
    }

    /// The family's own closed-form slack `t(x)`, scaled by the normalization.
    /// `None` for custom models.
    pub fn slack(&self, x: f64) -> Option<f64> {
        let t = match &self.shape {
            Shape::Poly { poly, .. } => horner(&poly.t, x),
            Shape::Exp { a } => (a * x).exp(),
            Shape::ExpUnit => x.exp(),
            Shape::Log {
                weight,
                slope,
                intercept,
            } => {
                let u = slope * x + intercept;
                weight * slope / u + weight * slope * slope / (u * u)
            }
            Shape::Sigmoid { x0 } => {
                let s = logistic(x - x0);
                2.0 * s * s * logistic(x0 - x)
            }
            Shape::Custom { .. } => return None,
        };
        Some(self.scale * t)
    }

    /// Un-normalized `(f, f', f'')`.
    fn raw(&self, x: f64) -> (f64, f64, f64) {
        let (f, d1, d2) = match &self.shape {
            Shape::Poly { poly, .. } => {
                (horner(&poly.f, x), horner(&poly.d1, x), horner(&poly.d2, x))
            }
            Shape::Exp { a } => {
                let e = (a * x).exp();
                (e / (a * (1.0 - a)), e / (1.0 - a), a * e / (1.0 - a))
            }
            Shape::ExpUnit => {
                let e = x.exp();
                (-x * e + e, -x * e, -(x + 1.0) * e)
            }
            Shape::Log {
                weight,
                slope,
                intercept,
            } => {
                let u = slope * x + intercept;
                (
                    weight * u.ln(),
                    weight * slope / u,
                    -weight * slope * slope / (u * u),
                )
            }
            Shape::Sigmoid { x0 } => {
                let (s, sc) = logistic_pair(x - x0);
                let d1 = s * sc;
                (s, d1, d1 * (sc - s))
            }
            Shape::Custom { f, d1, d2 } => (f(x), d1(x), d2(x)),
        };
        if self.c1 != 0.0 {
            let e = self.c1 * x.exp();
            (f + e + self.c2, d1 + e, d2 + e)
        } else {
            (f + self.c2, d1, d2)
        }
    }

    /// `(g(x), g'(x), g''(x))` with normalization applied. Non-finite values are
    /// returned as-is; use [`evaluate`] for a checked variant.
    #[inline]
    pub fn eval(&self, x: f64) -> (f64, f64, f64) {
        let (f, d1, d2) = self.raw(x);
        (
            self.scale * f + self.offset,
            self.scale * d1,
            self.scale * d2,
        )
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        self.eval(x).0
    }

    /// `(g'(x), g''(x))` without the value.
    #[inline]
    pub fn derivs(&self, x: f64) -> (f64, f64) {
        let (d1, d2) = match &self.shape {
            Shape::Sigmoid { x0 } => {
                let (s, sc) = logistic_pair(x - x0);
                let d1 = s * sc;
                (d1, d1 * (sc - s))
            }
            Shape::Log {
                weight,
                slope,
                intercept,
            } => {
                let u = slope * x + intercept;
                (weight * slope / u, -weight * slope * slope / (u * u))
            }
            _ => {
                let (_, d1, d2) = self.eval(x);
                return (d1, d2);
            }
        };
        if self.c1 != 0.0 {
            let e = self.c1 * x.exp();
            (self.scale * (d1 + e), self.scale * (d2 + e))
        } else {
            (self.scale * d1, self.scale * d2)
        }
    }

    /// First derivative only; cheaper than [`eval`](Self::eval) for the hot allocator loop.
    #[inline]
    pub fn d1(&self, x: f64) -> f64 {
        let d1 = match &self.shape {
            Shape::Sigmoid { x0 } => {
                let (s, sc) = logistic_pair(x - x0);
                s * sc
            }
            Shape::Log {
                weight,
                slope,
                intercept,
            } => weight * slope / (slope * x + intercept),
            _ => return self.eval(x).1,
        };
        if self.c1 != 0.0 {
            self.scale * (d1 + self.c1 * x.exp())
        } else {
            self.scale * d1
        }
    }

    /// Multiplies the utility by `c > 0` (value, offset and derivatives alike).
    pub fn scaled(&self, c: f64) -> Self {
        assert!(c > 0.0, "scale factor must be positive");
        let mut out = self.clone();
        out.scale *= c;
        out.offset *= c;
        out
    }
}

/// Builds a closed-form model, validating `t(x) >= 0` on the default grid.
pub fn make_utility(spec: &UtilitySpec) -> Result<UtilityModel, UtilityError> {
    let (shape, c1, c2) = match &spec.case {
        CaseParams::Power { a, k } => {
            if !a.is_finite() || *a < 0.0 {
                return Err(UtilityError::InvalidParams(format!(
                    "power slack a x^K needs a >= 0, got a = {a}"
                )));
            }
            let mut t = vec![0.0; *k as usize + 1];
            t[*k as usize] = *a;
            (
                Shape::Poly {
                    kind: UtilityKind::Power,
                    poly: Poly::from_slack(t),
                },
                spec.c1,
                spec.c2,
            )
        }
        CaseParams::Linear { a } => {
            if !a.is_finite() || *a < 0.0 {
                return Err(UtilityError::InvalidParams(format!(
                    "linear slack needs a >= 0, got a = {a}"
                )));
            }
            (
                Shape::Poly {
                    kind: UtilityKind::Linear,
                    poly: Poly::from_slack(vec![*a]),
                },
                spec.c1,
                spec.c2,
            )
        }
        CaseParams::Polynomial { coeffs } => {
            if coeffs.is_empty() || coeffs.iter().any(|c| !c.is_finite()) {
                return Err(UtilityError::InvalidParams(
                    "polynomial slack needs at least one finite coefficient".into(),
                ));
            }
            (
                Shape::Poly {
                    kind: UtilityKind::Polynomial,
                    poly: Poly::from_slack(coeffs.clone()),
                },
                spec.c1,
                spec.c2,
            )
        }
        CaseParams::Exponential { a } => {
            if !a.is_finite() {
                return Err(UtilityError::InvalidParams(format!("exponent a = {a}")));
            }
            if *a == 1.0 {
                return Err(UtilityError::DegenerateCase(
                    "a = 1 needs the dedicated unit branch (ExponentialUnit)".into(),
                ));
            }
            if *a == 0.0 {
                return Err(UtilityError::DegenerateCase(
                    "a = 0 gives t(x) = 1; use the linear family".into(),
                ));
            }
            (Shape::Exp { a: *a }, spec.c1, spec.c2)
        }
        CaseParams::ExponentialUnit => (Shape::ExpUnit, spec.c1, spec.c2),
        CaseParams::ProportionalFairness {
            weight,
            slope,
            intercept,
            offset,
            exp_coeff,
        } => {
            if !(*weight >= 0.0 && *slope >= 0.0 && *intercept > 0.0)
                || ![weight, slope, intercept, offset, exp_coeff]
                    .iter()
                    .all(|v| v.is_finite())
            {
                return Err(UtilityError::InvalidParams(format!(
                    "log utility needs C0 >= 0, C1 >= 0, C2 > 0 (got {weight}, {slope}, {intercept})"
                )));
            }
            (
                Shape::Log {
                    weight: *weight,
                    slope: *slope,
                    intercept: *intercept,
                },
                spec.c1 + exp_coeff,
                spec.c2 + offset,
            )
        }
        CaseParams::Sigmoid { x0 } => {
            if !x0.is_finite() {
                return Err(UtilityError::InvalidParams(format!("x0 = {x0}")));
            }
            (Shape::Sigmoid { x0: *x0 }, spec.c1, spec.c2)
        }
    };
    if !c1.is_finite() || !c2.is_finite() {
        return Err(UtilityError::InvalidParams(
            "C1 and C2 must be finite".into(),
        ));
    }
    let model = UtilityModel {
        shape,
        c1,
        c2,
        scale: 1.0,
        offset: 0.0,
    };
    if let Some((x, t)) = first_negative_slack(&model) {
        return Err(UtilityError::InvalidParams(format!("t({x}) = {t} < 0")));
    }
    Ok(model)
}

/// First grid point where the family's own slack is negative.
fn first_negative_slack(model: &UtilityModel) -> Option<(f64, f64)> {
    let step = DEFAULT_X_MAX / (DEFAULT_GRID - 1) as f64;
    (0..DEFAULT_GRID)
        .map(|i| i as f64 * step)
        .filter_map(|x| model.slack(x).map(|t| (x, t)))
        .find(|&(_, t)| t < 0.0 || t.is_nan())
}

/// Result of fitting the polynomial family to empirical utility coefficients.
#[derive(Debug, Clone)]
pub struct PolynomialFit {
    /// Recovered slack coefficients `a_0..a_{N-1}`.
    pub t_coeffs: Vec<f64>,
    pub model: UtilityModel,
}

/// Recovers the polynomial slack whose utility equals `sum_j fit[j] x^j`.
///
/// Matching the closed form coefficient by coefficient gives the upper-triangular
/// system `sum_{m >= j-1} a_m m! = fit[j] j!` for `j = 1..N`, solved here from the
/// top down. `C1 = 0` and `C2 = fit[0]`.
pub fn fit_polynomial_utility(fit: &[f64]) -> Result<PolynomialFit, UtilityError> {
    if fit.len() < 2 {
        return Err(UtilityError::InvalidArgument(
            "need coefficients a~_0..a~_N with N >= 1".into(),
        ));
    }
    if fit.iter().any(|c| !c.is_finite()) {
        return Err(UtilityError::InvalidArgument(
            "non-finite coefficient".into(),
        ));
    }
    let n = fit.len() - 1;
    let mut t = vec![0.0; n];
    // Running sum of a_m m! over the already-solved rows.
    let mut tail = 0.0;
    for j in (1..=n).rev() {
        let rhs = fit[j] * factorial(j);
        let am_fact = rhs - tail;
        t[j - 1] = am_fact / factorial(j - 1);
        tail += am_fact;
    }
    let mut f = fit.to_vec();
    f[0] = 0.0;
    let model = UtilityModel {
        shape: Shape::Poly {
            kind: UtilityKind::Polynomial,
            poly: Poly::from_utility_coeffs(t.clone(), f),
        },
        c1: 0.0,
        c2: fit[0],
        scale: 1.0,
        offset: 0.0,
    };
    let result = PolynomialFit { t_coeffs: t, model };
    if let Some((x, tx)) = first_negative_slack(&result.model) {
        return Err(UtilityError::NonnegativityViolation {
            fit: Box::new(result),
            x,
            t: tx,
        });
    }
    Ok(result)
}

/// Shape class of an admissible utility, from sign tests of `f'` and `f''`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lemma2Class {
    NondecreasingConvex,
    NonincreasingConcave,
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionReport {
    pub passed: bool,
    /// Grid point attaining `worst_margin`.
    pub worst_x: f64,
    /// Minimum of `f' - f''` over the grid.
    pub worst_margin: f64,
    /// Only classified for passing utilities; `Other` otherwise.
    pub lemma2_class: Lemma2Class,
    /// Exponential family with `a >= 1`: admissible but decreasing without bound.
    pub unbounded_decreasing: bool,
}

/// Evaluates `f' - f''` on a uniform grid over `[0, x_max]`.
pub fn criterion_check(
    u: &UtilityModel,
    x_max: f64,
    n_grid: usize,
) -> Result<CriterionReport, UtilityError> {
    if !(x_max > 0.0) || n_grid < 2 {
        return Err(UtilityError::InvalidArgument(format!(
            "need x_max > 0 and n_grid >= 2 (got {x_max}, {n_grid})"
        )));
    }
    let step = x_max / (n_grid - 1) as f64;
    let mut worst = (0.0, f64::INFINITY);
    let (mut nondecreasing, mut convex) = (true, true);
    let (mut nonincreasing, mut concave) = (true, true);
    for i in 0..n_grid {
        let x = i as f64 * step;
        let (_, d1, d2) = u.eval(x);
        if !d1.is_finite() || !d2.is_finite() {
            return Err(UtilityError::EvaluationFailure { x });
        }
        let margin = d1 - d2;
        if margin < worst.1 {
            worst = (x, margin);
        }
        nondecreasing &= d1 >= -CRITERION_EPS;
        convex &= d2 >= -CRITERION_EPS;
        nonincreasing &= d1 <= CRITERION_EPS;
        concave &= d2 <= CRITERION_EPS;
    }
    let passed = worst.1 >= -CRITERION_EPS;
    let lemma2_class = if !passed {
        Lemma2Class::Other
    } else if nondecreasing && convex {
        Lemma2Class::NondecreasingConvex
    } else if nonincreasing && concave {
        Lemma2Class::NonincreasingConcave
    } else {
        Lemma2Class::Other
    };
    Ok(CriterionReport {
        passed,
        worst_x: worst.0,
        worst_margin: worst.1,
        lemma2_class,
        unbounded_decreasing: u.is_unbounded_decreasing(),
    })
}

/// `f'(x) - f''(x)` of the (normalized) model.
pub fn residual_t(u: &UtilityModel, x: f64) -> Result<f64, UtilityError> {
    if !(x >= 0.0) {
        return Err(UtilityError::InvalidArgument(format!("rate x = {x} < 0")));
    }
    let (_, d1, d2) = u.eval(x);
    let r = d1 - d2;
    if r.is_finite() {
        Ok(r)
    } else {
        Err(UtilityError::EvaluationFailure { x })
    }
}

/// Rescales so that `g(0) = 0` and `g(m) = 1`.
pub fn normalize(u: &UtilityModel, m: f64) -> Result<UtilityModel, UtilityError> {
    if !(m > 0.0) || !m.is_finite() {
        return Err(UtilityError::InvalidArgument(format!(
            "m = {m} must be > 0"
        )));
    }
    let g0 = u.value(0.0);
    let gm = u.value(m);
    if !g0.is_finite() || !gm.is_finite() {
        return Err(UtilityError::EvaluationFailure {
            x: if g0.is_finite() { m } else { 0.0 },
        });
    }
    let span = gm - g0;
    if span == 0.0 {
        return Err(UtilityError::DegenerateRange { m });
    }
    if span < 0.0 {
        return Err(UtilityError::OrientationFlip { m });
    }
    let mut out = u.clone();
    out.scale = u.scale / span;
    out.offset = (u.offset - g0) / span;
    Ok(out)
}

/// Checked `(g(x), g'(x), g''(x))`.
pub fn evaluate(u: &UtilityModel, x: f64) -> Result<(f64, f64, f64), UtilityError> {
    if !(x >= 0.0) {
        return Err(UtilityError::InvalidArgument(format!("rate x = {x} < 0")));
    }
    let out = u.eval(x);
    if out.0.is_finite() && out.1.is_finite() && out.2.is_finite() {
        Ok(out)
    } else {
        Err(UtilityError::EvaluationFailure { x })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivs_agree_with_eval() {
        let models = [
            make_utility(&UtilitySpec::sigmoid(2.0)).unwrap(),
            make_utility(&UtilitySpec::log(2.0, 1.5, 1.0)).unwrap(),
            make_utility(&UtilitySpec::linear(3.0)).unwrap(),
            normalize(&make_utility(&UtilitySpec::sigmoid(4.0)).unwrap(), 8.0).unwrap(),
        ];
        for u in &models {
            for i in 0..50 {
                let x = 0.2 * i as f64;
                let (_, d1, d2) = u.eval(x);
                let (e1, e2) = u.derivs(x);
                assert!((d1 - e1).abs() <= 1e-15 * (1.0 + d1.abs()));
                assert!((d2 - e2).abs() <= 1e-15 * (1.0 + d2.abs()));
                assert!((u.d1(x) - d1).abs() <= 1e-15 * (1.0 + d1.abs()));
            }
        }
    }
    use approx::assert_relative_eq;

    fn model(case: CaseParams) -> UtilityModel {
        make_utility(&UtilitySpec::new(case)).unwrap()
    }

    #[test]
    fn linear_identity() {
        let u = model(CaseParams::Power { a: 1.0, k: 0 });
        assert_eq!(u.eval(2.0), (2.0, 1.0, 0.0));
        assert_eq!(u.kind(), UtilityKind::Power);
        let u = model(CaseParams::Linear { a: 1.0 });
        assert_eq!(evaluate(&u, 2.0).unwrap(), (2.0, 1.0, 0.0));
    }

    #[test]
    fn sigmoid_has_inflection_at_x0() {
        let x0 = 32.0_f64.ln();
        let u = model(CaseParams::Sigmoid { x0 });
        let (f, _, d2) = u.eval(x0);
        assert_relative_eq!(f, 0.5, epsilon = 1e-15);
        assert!(d2.abs() < 1e-15);
        assert!(u.eval(x0 - 0.5).2 > 0.0);
        assert!(u.eval(x0 + 0.5).2 < 0.0);
    }

    #[test]
    fn exponential_case_closed_form() {
        let u = model(CaseParams::Exponential { a: 2.0 });
        for &x in &[0.0, 0.3, 1.7] {
            let (f, d1, d2) = u.eval(x);
            assert_relative_eq!(f, -(2.0 * x).exp() / 2.0, max_relative = 1e-14);
            assert_relative_eq!(d1 - d2, (2.0 * x).exp(), max_relative = 1e-14);
        }
    }

    #[test]
    fn exponential_unit_branch_required() {
        let err = make_utility(&UtilitySpec::new(CaseParams::Exponential { a: 1.0 }));
        assert!(matches!(err, Err(UtilityError::DegenerateCase(_))));
        let u =
            make_utility(&UtilitySpec::new(CaseParams::ExponentialUnit).with_constants(0.5, 1.0))
                .unwrap();
        for &x in &[0.0, 1.0, 2.5] {
            let (f, d1, d2) = u.eval(x);
            assert_relative_eq!(f, -x * x.exp() + 1.5 * x.exp() + 1.0, max_relative = 1e-14);
            assert_relative_eq!(d1 - d2, x.exp(), max_relative = 1e-12);
        }
    }

    #[test]
    fn proportional_fairness_is_log() {
        let u = model(CaseParams::ProportionalFairness {
            weight: 1.0,
            slope: 1.0,
            intercept: 1.0,
            offset: 0.0,
            exp_coeff: 0.0,
        });
        assert_eq!(evaluate(&u, 0.0).unwrap(), (0.0, 1.0, -1.0));
        assert_relative_eq!(u.value(3.0), 4.0_f64.ln());
        assert_relative_eq!(residual_t(&u, 0.0).unwrap(), 2.0);
    }

    #[test]
    fn residual_examples() {
        let u = model(CaseParams::Power { a: 3.0, k: 0 });
        for &x in &[0.0, 1.0, 7.5] {
            assert_relative_eq!(residual_t(&u, x).unwrap(), 3.0);
        }
        let s = model(CaseParams::Sigmoid { x0: 0.0 });
        assert_relative_eq!(residual_t(&s, 0.0).unwrap(), 0.25, epsilon = 1e-15);
        assert_eq!(evaluate(&s, 0.0).unwrap(), (0.5, 0.25, 0.0));
    }

    #[test]
    fn negative_slack_rejected() {
        assert!(matches!(
            make_utility(&UtilitySpec::new(CaseParams::Power { a: -1.0, k: 2 })),
            Err(UtilityError::InvalidParams(_))
        ));
        // t(x) = 1 - x goes negative past x = 1.
        assert!(matches!(
            make_utility(&UtilitySpec::new(CaseParams::Polynomial {
                coeffs: vec![1.0, -1.0]
            })),
            Err(UtilityError::InvalidParams(_))
        ));
        assert!(matches!(
            make_utility(&UtilitySpec::log(1.0, 1.0, 0.0)),
            Err(UtilityError::InvalidParams(_))
        ));
    }

    #[test]
    fn fit_examples() {
        let fit = fit_polynomial_utility(&[0.0, 1.0, 0.5]).unwrap();
        assert_eq!(fit.t_coeffs, vec![0.0, 1.0]);
        assert_relative_eq!(fit.model.value(2.0), 4.0);

        let fit = fit_polynomial_utility(&[3.5, 0.0]).unwrap();
        assert_eq!(fit.t_coeffs, vec![0.0]);
        assert_eq!(fit.model.value(9.0), 3.5);

        match fit_polynomial_utility(&[0.0, 0.0, 1.0]) {
            Err(UtilityError::NonnegativityViolation { fit, x, t }) => {
                assert_eq!(fit.t_coeffs, vec![-2.0, 2.0]);
                assert_eq!(x, 0.0);
                assert_eq!(t, -2.0);
            }
            other => panic!("expected violation, got {other:?}"),
        }
        assert!(fit_polynomial_utility(&[1.0]).is_err());
    }

    #[test]
    fn criterion_examples() {
        let exp2 = UtilityModel::custom(
            |x| (2.0 * x).exp(),
            |x| 2.0 * (2.0 * x).exp(),
            |x| 4.0 * (2.0 * x).exp(),
        );
        let r = criterion_check(&exp2, 10.0, 256).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst_x, 10.0);

        let lin = model(CaseParams::Linear { a: 1.0 });
        let r = criterion_check(&lin, 20.0, 64).unwrap();
        assert!(r.passed);
        assert_eq!(r.lemma2_class, Lemma2Class::NondecreasingConvex);

        let sig = model(CaseParams::Sigmoid { x0: 2.0 });
        let r = criterion_check(&sig, 20.0, DEFAULT_GRID).unwrap();
        assert!(r.passed);
        assert_eq!(r.lemma2_class, Lemma2Class::Other);

        assert!(criterion_check(&lin, 0.0, 10).is_err());
        assert!(criterion_check(&lin, 1.0, 1).is_err());
    }

    #[test]
    fn criterion_reports_non_finite() {
        let bad = UtilityModel::custom(|x| x, |_| 1.0, |x| if x > 1.0 { f64::NAN } else { 0.0 });
        assert!(matches!(
            criterion_check(&bad, 2.0, 5),
            Err(UtilityError::EvaluationFailure { .. })
        ));
    }

    #[test]
    fn convex_nondecreasing_can_still_fail() {
        // x^2: f'' = 2 > f' = 2x below x = 1.
        let sq = UtilityModel::custom(|x| x * x, |x| 2.0 * x, |_| 2.0);
        let r = criterion_check(&sq, 10.0, 101).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst_x, 0.0);
        assert_eq!(r.lemma2_class, Lemma2Class::Other);
    }

    #[test]
    fn exponential_above_one_is_flagged() {
        let u = model(CaseParams::Exponential { a: 1.5 });
        let r = criterion_check(&u, 5.0, 100).unwrap();
        assert!(r.passed);
        assert!(r.unbounded_decreasing);
        assert_eq!(r.lemma2_class, Lemma2Class::NonincreasingConcave);
    }

    #[test]
    fn normalize_examples() {
        let lin = model(CaseParams::Linear { a: 1.0 });
        let g = normalize(&lin, 4.0).unwrap();
        assert_relative_eq!(g.value(4.0), 1.0);
        assert_relative_eq!(g.value(2.0), 0.5);
        assert_relative_eq!(g.scale(), 0.25);

        let sig = model(CaseParams::Sigmoid { x0: 32.0_f64.ln() });
        let g = normalize(&sig, 6.0).unwrap();
        assert!(g.value(0.0).abs() < 1e-15);
        assert_relative_eq!(g.value(6.0), 1.0, epsilon = 1e-14);

        let constant = model(CaseParams::Linear { a: 0.0 });
        assert!(matches!(
            normalize(&constant, 1.0),
            Err(UtilityError::DegenerateRange { .. })
        ));
        let decreasing = model(CaseParams::Exponential { a: 2.0 });
        assert!(matches!(
            normalize(&decreasing, 1.0),
            Err(UtilityError::OrientationFlip { .. })
        ));
    }

    #[test]
    fn normalization_scales_derivatives() {
        let u = model(CaseParams::Sigmoid { x0: 1.0 });
        let g = normalize(&u, 3.0).unwrap();
        let (_, d1, d2) = u.eval(0.7);
        let (_, e1, e2) = g.eval(0.7);
        assert_relative_eq!(e1, g.scale() * d1);
        assert_relative_eq!(e2, g.scale() * d2);
        assert_relative_eq!(g.d1(0.7), e1);
    }

    #[test]
    fn constants_do_not_change_slack() {
        let u = make_utility(&UtilitySpec::sigmoid(1.0).with_constants(0.3, -2.0)).unwrap();
        for &x in &[0.0, 0.5, 4.0] {
            assert_relative_eq!(
                residual_t(&u, x).unwrap(),
                u.slack(x).unwrap(),
                max_relative = 1e-12
            );
        }
    }
}
