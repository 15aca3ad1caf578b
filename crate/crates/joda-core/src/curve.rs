//! Shape-constrained piecewise cubic Hermite interpolation (PCHIP).
//!
//! Knot derivatives follow the Fritsch–Carlson scheme: interior derivatives
//! are the weighted harmonic mean of adjacent secant slopes when those share
//! a sign and zero otherwise, endpoints use the one-sided three-point formula
//! clamped to preserve shape. The interpolant never overshoots the bracketing
//! knot values and preserves monotonicity of the data.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CurveError {
    #[error("need at least 2 knots, got {0}")]
    InsufficientKnots(usize),
    #[error("knot positions must be strictly increasing within [0, 1]: {0}")]
    InvalidKnots(String),
    #[error("knot values must be finite")]
    NonFiniteValues,
    #[error("x={x} outside knot span [{lo}, {hi}]")]
    OutOfSpan { x: f64, lo: f64, hi: f64 },
}

/// A PCHIP curve over a subinterval of [0, 1].
///
/// Immutable after construction; derivatives are computed once and cached,
/// so evaluation is safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct PchipCurve {
    xs: Vec<f64>,
    ys: Vec<f64>,
    ds: Vec<f64>,
}

/// Fritsch–Carlson knot derivatives for strictly increasing `xs`.
pub fn pchip_slopes(xs: &[f64], ys: &[f64]) -> Result<Vec<f64>, CurveError> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return Err(CurveError::InsufficientKnots(n.min(ys.len())));
    }
    if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
        return Err(CurveError::NonFiniteValues);
    }

    let mut h = Vec::with_capacity(n - 1);
    let mut delta = Vec::with_capacity(n - 1);
    for i in 0..n - 1 {
        let hi = xs[i + 1] - xs[i];
        if hi <= 0.0 {
            return Err(CurveError::InvalidKnots(format!(
                "xs[{}]={} >= xs[{}]={}",
                i,
                xs[i],
                i + 1,
                xs[i + 1]
            )));
        }
        h.push(hi);
        delta.push((ys[i + 1] - ys[i]) / hi);
    }

    let mut d = vec![0.0; n];
    if n == 2 {
        d[0] = delta[0];
        d[1] = delta[0];
        return Ok(d);
    }

    for k in 1..n - 1 {
        let s1 = delta[k - 1];
        let s2 = delta[k];
        if s1 == 0.0 || s2 == 0.0 || s1.signum() != s2.signum() {
            d[k] = 0.0;
        } else {
            // Weighted harmonic mean; weights favor the shorter interval.
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / s1 + w2 / s2);
        }
    }

    d[0] = endpoint_slope(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = endpoint_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    Ok(d)
}

/// One-sided three-point endpoint estimate with the Fritsch–Carlson clamps:
/// zero on sign disagreement with the adjacent secant, limited to 3x the
/// adjacent secant when the two nearest secants disagree in sign.
fn endpoint_slope(h0: f64, h1: f64, s0: f64, s1: f64) -> f64 {
    let mut d = ((2.0 * h0 + h1) * s0 - h0 * s1) / (h0 + h1);
    if d.signum() != s0.signum() {
        d = 0.0;
    } else if s0.signum() != s1.signum() && d.abs() > 3.0 * s0.abs() {
        d = 3.0 * s0;
    }
    d
}

impl PchipCurve {
    /// Build a curve from knot positions and values; derivatives are cached.
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self, CurveError> {
        let ds = pchip_slopes(&xs, &ys)?;
        if xs[0] < 0.0 || *xs.last().unwrap() > 1.0 {
            return Err(CurveError::InvalidKnots(format!(
                "knot span [{}, {}] not within [0, 1]",
                xs[0],
                xs.last().unwrap()
            )));
        }
        Ok(Self { xs, ys, ds })
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn ds(&self) -> &[f64] {
        &self.ds
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn span(&self) -> (f64, f64) {
        (self.xs[0], *self.xs.last().unwrap())
    }

    /// Replace the knot values, recomputing cached derivatives.
    pub fn with_values(&self, ys: Vec<f64>) -> Result<Self, CurveError> {
        if ys.len() != self.xs.len() {
            return Err(CurveError::InsufficientKnots(ys.len()));
        }
        Self::new(self.xs.clone(), ys)
    }

    /// Index of the interval containing `x` (last interval for `x` at the
    /// right endpoint). Caller guarantees `x` is inside the span.
    fn interval(&self, x: f64) -> usize {
        let n = self.xs.len();
        if x >= self.xs[n - 2] {
            n - 2
        } else {
            self.xs.partition_point(|&xi| xi <= x).saturating_sub(1)
        }
    }

    fn check_span(&self, x: f64) -> Result<(), CurveError> {
        let (lo, hi) = self.span();
        if x < lo || x > hi || !x.is_finite() {
            return Err(CurveError::OutOfSpan { x, lo, hi });
        }
        Ok(())
    }

    /// Hermite evaluation on the bracketing interval; exact at knots.
    pub fn eval(&self, x: f64) -> Result<f64, CurveError> {
        self.check_span(x)?;
        Ok(self.eval_unchecked(x))
    }

    /// Evaluation with `x` clamped to the knot span. Out-of-span policy
    /// belongs to callers; this is the clamping variant they share.
    pub fn eval_clamped(&self, x: f64) -> f64 {
        let (lo, hi) = self.span();
        self.eval_unchecked(x.clamp(lo, hi))
    }

    fn eval_unchecked(&self, x: f64) -> f64 {
        let k = self.interval(x);
        let h = self.xs[k + 1] - self.xs[k];
        let t = (x - self.xs[k]) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        // Anchored at ys[k] so constant data reproduces bit-for-bit: the
        // basis-pair form ys[k]*h00 + ys[k+1]*h01 rounds h00 + h01 away
        // from 1 at some t.
        self.ys[k]
            + (self.ys[k + 1] - self.ys[k]) * h01
            + h * (self.ds[k] * h10 + self.ds[k + 1] * h11)
    }

    /// Spatial derivative of the Hermite cubic; continuous across knots.
    pub fn eval_dx(&self, x: f64) -> Result<f64, CurveError> {
        self.check_span(x)?;
        Ok(self.eval_dx_unchecked(x))
    }

    /// Derivative with `x` clamped to the span (zero slope is *not* assumed
    /// outside; the clamped endpoint slope is returned).
    pub fn eval_dx_clamped(&self, x: f64) -> f64 {
        let (lo, hi) = self.span();
        self.eval_dx_unchecked(x.clamp(lo, hi))
    }

    fn eval_dx_unchecked(&self, x: f64) -> f64 {
        let k = self.interval(x);
        let h = self.xs[k + 1] - self.xs[k];
        let t = (x - self.xs[k]) / h;
        let t2 = t * t;
        // d/dt of the Hermite basis, divided by h for d/dx; the value basis
        // pair collapses to a single difference term (see eval_unchecked).
        let g10 = 3.0 * t2 - 4.0 * t + 1.0;
        let g01 = -6.0 * t2 + 6.0 * t;
        let g11 = 3.0 * t2 - 2.0 * t;
        (self.ys[k + 1] - self.ys[k]) * g01 / h + g10 * self.ds[k] + g11 * self.ds[k + 1]
    }

    /// Gradient of `eval(x)` with respect to every knot value.
    ///
    /// The secant sign pattern (and the endpoint clamp branches) are frozen
    /// at the current values, which makes the harmonic-mean slope formula
    /// locally smooth; the result is exact for the frozen branch and matches
    /// finite differences away from sign-change parameter boundaries.
    pub fn grad_y(&self, x: f64) -> Result<Vec<f64>, CurveError> {
        self.check_span(x)?;
        Ok(self.grad_y_unchecked(x))
    }

    /// `grad_y` with `x` clamped to the knot span.
    pub fn grad_y_clamped(&self, x: f64) -> Vec<f64> {
        let (lo, hi) = self.span();
        self.grad_y_unchecked(x.clamp(lo, hi))
    }

    fn grad_y_unchecked(&self, x: f64) -> Vec<f64> {
        let n = self.xs.len();
        let k = self.interval(x);
        let h = self.xs[k + 1] - self.xs[k];
        let t = (x - self.xs[k]) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;

        let mut grad = vec![0.0; n];
        // Matches eval_unchecked's anchored form ys[k] + (ys[k+1]-ys[k])*h01.
        grad[k] += 1.0 - h01;
        grad[k + 1] += h01;
        // Chain through the two interval slopes: d(value)/d(d_j) times
        // d(d_j)/d(delta_m) times d(delta_m)/d(y).
        self.accumulate_slope_grad(k, h * h10, &mut grad);
        self.accumulate_slope_grad(k + 1, h * h11, &mut grad);
        grad
    }

    /// Adds `weight * d(d_j)/d(ys)` into `grad`, with branch choices frozen.
    fn accumulate_slope_grad(&self, j: usize, weight: f64, grad: &mut [f64]) {
        if weight == 0.0 {
            return;
        }
        let n = self.xs.len();
        let h_of = |i: usize| self.xs[i + 1] - self.xs[i];
        let delta_of = |i: usize| (self.ys[i + 1] - self.ys[i]) / h_of(i);
        // d(delta_i)/d(y_i) = -1/h_i, d(delta_i)/d(y_{i+1}) = +1/h_i.
        let add_delta = |i: usize, coeff: f64, grad: &mut [f64]| {
            let hi = h_of(i);
            grad[i] -= coeff / hi;
            grad[i + 1] += coeff / hi;
        };

        if n == 2 {
            // Two-point curve: d = delta_0 at both knots.
            add_delta(0, weight, grad);
            return;
        }

        if j == 0 || j == n - 1 {
            let (ha, hb, ia, ib) = if j == 0 {
                (h_of(0), h_of(1), 0, 1)
            } else {
                (h_of(n - 2), h_of(n - 3), n - 2, n - 3)
            };
            let sa = delta_of(ia);
            let sb = delta_of(ib);
            let raw = ((2.0 * ha + hb) * sa - ha * sb) / (ha + hb);
            if raw.signum() != sa.signum() {
                return; // clamped to zero
            }
            if sa.signum() != sb.signum() && raw.abs() > 3.0 * sa.abs() {
                add_delta(ia, weight * 3.0, grad); // clamped to 3*secant
                return;
            }
            add_delta(ia, weight * (2.0 * ha + hb) / (ha + hb), grad);
            add_delta(ib, weight * (-ha) / (ha + hb), grad);
            return;
        }

        let s1 = delta_of(j - 1);
        let s2 = delta_of(j);
        if s1 == 0.0 || s2 == 0.0 || s1.signum() != s2.signum() {
            return; // derivative frozen at zero
        }
        let w1 = 2.0 * h_of(j) + h_of(j - 1);
        let w2 = h_of(j) + 2.0 * h_of(j - 1);
        let denom = w1 / s1 + w2 / s2;
        let dd_ds1 = (w1 + w2) * w1 / (denom * denom * s1 * s1);
        let dd_ds2 = (w1 + w2) * w2 / (denom * denom * s2 * s2);
        add_delta(j - 1, weight * dd_ds1, grad);
        add_delta(j, weight * dd_ds2, grad);
    }
}
