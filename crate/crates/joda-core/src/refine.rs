//! Gradient-based refinement of field parameters against recorded
//! trajectories.
//!
//! A flat parameter vector selects pieces of a [`ComposedField`]
//! (conservative/damping knot values, per-channel log-scales, interval
//! anchors, the joint-limit damping ratio). The loss is the mean squared
//! normalized position error of smoothed-friction rollouts replaying each
//! target's recorded forces, and its gradient is computed by reverse-mode
//! differentiation through the unrolled integrator. With no anchor
//! parameters active, the differentiable forward pass is bit-identical to
//! [`crate::sim::Simulator`] in smooth mode.

use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::compiler::{reference_magnitudes, ReferenceMagnitudes};
use crate::field::{Channel, ComposedField, EffectComponent, FieldError, LimitSide};
use crate::sim::{SimConfig, Trajectory};

/// Loss assigned to a diverged rollout so the optimizer can keep going.
pub const DIVERGED_LOSS: f64 = 1e6;

/// Half-width (in s) of the smooth interval window used when anchors are
/// optimized.
const ANCHOR_BAND: f64 = 0.01;

/// Minimum anchor separation maintained by projection.
const ANCHOR_MARGIN: f64 = 0.01;

/// Floor applied before taking logs of damping knot values.
const DAMP_LOG_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Error)]
pub enum RefineError {
    #[error("no active parameters for this mask and field")]
    NoParams,
    #[error("unknown parameter group {0:?} (expected cons_knots, damp_knots, cons_scale, fric_scale, damp_scale, anchors, limit_damping, or all)")]
    UnknownGroup(String),
    #[error("at least one target trajectory is required")]
    NoTargets,
    #[error("n_iters must be >= 1")]
    BadIterations,
    #[error("target timestep {found} does not match configured dt {expected}")]
    TargetDt { expected: f64, found: f64 },
    #[error("target trajectory needs at least 2 samples")]
    TargetTooShort,
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Which parameter groups are optimizable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamMask {
    pub cons_knots: bool,
    pub damp_knots: bool,
    pub cons_scale: bool,
    pub fric_scale: bool,
    pub damp_scale: bool,
    pub anchors: bool,
    pub limit_damping: bool,
}

impl ParamMask {
    pub fn all() -> Self {
        Self {
            cons_knots: true,
            damp_knots: true,
            cons_scale: true,
            fric_scale: true,
            damp_scale: true,
            anchors: true,
            limit_damping: true,
        }
    }

    /// Parse a comma-separated group list, e.g. `"cons_knots,anchors"`.
    pub fn parse_list(list: &str) -> Result<Self, RefineError> {
        let mut mask = Self::default();
        for raw in list.split(',') {
            let token = raw.trim();
            match token {
                "cons_knots" => mask.cons_knots = true,
                "damp_knots" => mask.damp_knots = true,
                "cons_scale" => mask.cons_scale = true,
                "fric_scale" => mask.fric_scale = true,
                "damp_scale" => mask.damp_scale = true,
                "anchors" => mask.anchors = true,
                "limit_damping" => mask.limit_damping = true,
                "all" => mask = Self::all(),
                "" => {}
                other => return Err(RefineError::UnknownGroup(other.to_string())),
            }
        }
        Ok(mask)
    }
}

/// One optimizable scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Conservative knot value, normalized by `F_ref`.
    ConsKnot { component: usize, knot: usize },
    /// Log of a damping knot value relative to `C_ref` (structurally > 0).
    DampKnot { component: usize, knot: usize },
    /// Log-scale multiplying the whole conservative curve.
    ConsScale { component: usize },
    /// Log-scale multiplying the friction curve (structurally > 0).
    FricScale { component: usize },
    /// Log-scale multiplying the damping curve (structurally > 0).
    DampScale { component: usize },
    /// Interval start, in s units.
    AnchorA { component: usize },
    /// Interval end, in s units.
    AnchorB { component: usize },
    /// Log of the joint-limit damping ratio.
    LimitDamping,
}

/// A base field plus the flat view over its selected parameters.
#[derive(Debug, Clone)]
pub struct ParamSet {
    base: ComposedField,
    refs: ReferenceMagnitudes,
    entries: Vec<ParamKind>,
    theta0: Vec<f64>,
}

impl ParamSet {
    pub fn new(base: &ComposedField, mask: &ParamMask) -> Result<Self, RefineError> {
        let refs = reference_magnitudes(&base.joint);
        let mut entries = Vec::new();
        let mut theta0 = Vec::new();
        for (ci, comp) in base.components.iter().enumerate() {
            if mask.cons_knots {
                if let Some(curve) = comp.curve(Channel::Conservative) {
                    for (ki, y) in curve.ys().iter().enumerate() {
                        entries.push(ParamKind::ConsKnot {
                            component: ci,
                            knot: ki,
                        });
                        theta0.push(y / refs.f_ref);
                    }
                }
            }
            if mask.damp_knots {
                if let Some(curve) = comp.curve(Channel::Damping) {
                    for (ki, y) in curve.ys().iter().enumerate() {
                        entries.push(ParamKind::DampKnot {
                            component: ci,
                            knot: ki,
                        });
                        theta0.push((y.max(DAMP_LOG_FLOOR * refs.c_ref) / refs.c_ref).ln());
                    }
                }
            }
            if mask.cons_scale && comp.curve(Channel::Conservative).is_some() {
                entries.push(ParamKind::ConsScale { component: ci });
                theta0.push(0.0);
            }
            if mask.fric_scale && comp.curve(Channel::FrictionMax).is_some() {
                entries.push(ParamKind::FricScale { component: ci });
                theta0.push(0.0);
            }
            if mask.damp_scale && comp.curve(Channel::Damping).is_some() {
                entries.push(ParamKind::DampScale { component: ci });
                theta0.push(0.0);
            }
            if mask.anchors {
                entries.push(ParamKind::AnchorA { component: ci });
                theta0.push(comp.a());
                entries.push(ParamKind::AnchorB { component: ci });
                theta0.push(comp.b());
            }
        }
        if mask.limit_damping {
            entries.push(ParamKind::LimitDamping);
            theta0.push(base.joint_limit.damping_ratio.ln());
        }
        if entries.is_empty() {
            return Err(RefineError::NoParams);
        }
        Ok(Self {
            base: base.clone(),
            refs,
            entries,
            theta0,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn theta0(&self) -> &[f64] {
        &self.theta0
    }

    pub fn entries(&self) -> &[ParamKind] {
        &self.entries
    }

    pub fn base(&self) -> &ComposedField {
        &self.base
    }

    pub fn refs(&self) -> &ReferenceMagnitudes {
        &self.refs
    }

    /// Human-readable name of parameter `i` for reports.
    pub fn describe(&self, i: usize) -> String {
        match self.entries[i] {
            ParamKind::ConsKnot { component, knot } => {
                format!("components[{component}].conservative.knots[{knot}]")
            }
            ParamKind::DampKnot { component, knot } => {
                format!("components[{component}].damping.log_knots[{knot}]")
            }
            ParamKind::ConsScale { component } => {
                format!("components[{component}].conservative.log_scale")
            }
            ParamKind::FricScale { component } => {
                format!("components[{component}].friction.log_scale")
            }
            ParamKind::DampScale { component } => {
                format!("components[{component}].damping.log_scale")
            }
            ParamKind::AnchorA { component } => format!("components[{component}].interval.a"),
            ParamKind::AnchorB { component } => format!("components[{component}].interval.b"),
            ParamKind::LimitDamping => "joint_limit.log_damping_ratio".to_string(),
        }
    }

    fn component_params(&self) -> Vec<ComponentParams> {
        let mut per: Vec<ComponentParams> = self
            .base
            .components
            .iter()
            .map(|_| ComponentParams::default())
            .collect();
        for (i, kind) in self.entries.iter().enumerate() {
            match *kind {
                ParamKind::ConsKnot { component, .. } => per[component].cons_knots.push(i),
                ParamKind::DampKnot { component, .. } => per[component].damp_knots.push(i),
                ParamKind::ConsScale { component } => per[component].cons_scale = Some(i),
                ParamKind::FricScale { component } => per[component].fric_scale = Some(i),
                ParamKind::DampScale { component } => per[component].damp_scale = Some(i),
                ParamKind::AnchorA { component } => per[component].anchor_a = Some(i),
                ParamKind::AnchorB { component } => per[component].anchor_b = Some(i),
                ParamKind::LimitDamping => {}
            }
        }
        per
    }

    fn limit_index(&self) -> Option<usize> {
        self.entries
            .iter()
            .position(|k| matches!(k, ParamKind::LimitDamping))
    }

    /// Build the field encoded by `theta`. Components with no active
    /// parameters are bit-identical clones of the base.
    pub fn realize(&self, theta: &[f64]) -> Result<ComposedField, FieldError> {
        assert_eq!(theta.len(), self.entries.len(), "theta length mismatch");
        let mut field = self.base.clone();
        let per = self.component_params();
        for (ci, params) in per.iter().enumerate() {
            if params.is_empty() {
                continue;
            }
            let mut comp = field.components[ci].clone();
            comp = self.realize_channel(
                &comp,
                Channel::Conservative,
                &params.cons_knots,
                params.cons_scale,
                theta,
                |t| t * self.refs.f_ref,
            )?;
            comp = self.realize_channel(
                &comp,
                Channel::Damping,
                &params.damp_knots,
                params.damp_scale,
                theta,
                |t| self.refs.c_ref * t.exp(),
            )?;
            if let Some(si) = params.fric_scale {
                if let Some(curve) = comp.curve(Channel::FrictionMax) {
                    let factor = theta[si].exp();
                    let ys: Vec<f64> = curve.ys().iter().map(|y| y * factor).collect();
                    comp = comp.with_curve_values(Channel::FrictionMax, ys)?;
                }
            }
            let a = params.anchor_a.map_or(comp.a(), |i| theta[i]);
            let b = params.anchor_b.map_or(comp.b(), |i| theta[i]);
            if (a, b) != (comp.a(), comp.b()) {
                comp = comp.with_interval(a, b)?;
            }
            field.components[ci] = comp;
        }
        if let Some(li) = self.limit_index() {
            field.joint_limit.damping_ratio = theta[li].exp();
        }
        Ok(field)
    }

    fn realize_channel(
        &self,
        comp: &EffectComponent,
        channel: Channel,
        knot_indices: &[usize],
        scale_index: Option<usize>,
        theta: &[f64],
        knot_value: impl Fn(f64) -> f64,
    ) -> Result<EffectComponent, FieldError> {
        if knot_indices.is_empty() && scale_index.is_none() {
            return Ok(comp.clone());
        }
        let Some(curve) = comp.curve(channel) else {
            return Ok(comp.clone());
        };
        let mut ys: Vec<f64> = curve.ys().to_vec();
        if !knot_indices.is_empty() {
            debug_assert_eq!(knot_indices.len(), ys.len());
            for (y, &idx) in ys.iter_mut().zip(knot_indices) {
                *y = knot_value(theta[idx]);
            }
        }
        if let Some(si) = scale_index {
            let factor = theta[si].exp();
            for y in &mut ys {
                *y *= factor;
            }
        }
        comp.with_curve_values(channel, ys)
    }

    /// Project anchor parameters onto the feasible region
    /// `0 ≤ a ≤ b − 0.01 ≤ 1 − 0.01`.
    pub fn project(&self, theta: &mut [f64]) {
        let per = self.component_params();
        for (ci, params) in per.iter().enumerate() {
            if params.anchor_a.is_none() && params.anchor_b.is_none() {
                continue;
            }
            let comp = &self.base.components[ci];
            let mut a = params.anchor_a.map_or(comp.a(), |i| theta[i]);
            let mut b = params.anchor_b.map_or(comp.b(), |i| theta[i]);
            a = a.clamp(0.0, 1.0 - ANCHOR_MARGIN);
            b = b.clamp(ANCHOR_MARGIN, 1.0);
            if b - a < ANCHOR_MARGIN {
                match (params.anchor_a, params.anchor_b) {
                    (Some(_), Some(_)) => {
                        b = a + ANCHOR_MARGIN;
                        if b > 1.0 {
                            b = 1.0;
                            a = 1.0 - ANCHOR_MARGIN;
                        }
                    }
                    (Some(_), None) => a = (b - ANCHOR_MARGIN).max(0.0).min(a),
                    (None, Some(_)) => b = (a + ANCHOR_MARGIN).min(1.0).max(b),
                    (None, None) => unreachable!(),
                }
            }
            if let Some(i) = params.anchor_a {
                theta[i] = a;
            }
            if let Some(i) = params.anchor_b {
                theta[i] = b;
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
struct ComponentParams {
    cons_knots: Vec<usize>,
    damp_knots: Vec<usize>,
    cons_scale: Option<usize>,
    fric_scale: Option<usize>,
    damp_scale: Option<usize>,
    anchor_a: Option<usize>,
    anchor_b: Option<usize>,
}

impl ComponentParams {
    fn is_empty(&self) -> bool {
        self.cons_knots.is_empty()
            && self.damp_knots.is_empty()
            && self.cons_scale.is_none()
            && self.fric_scale.is_none()
            && self.damp_scale.is_none()
            && self.anchor_a.is_none()
            && self.anchor_b.is_none()
    }

    fn windowed(&self) -> bool {
        self.anchor_a.is_some() || self.anchor_b.is_some()
    }
}

fn smoothstep(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        x * x * (3.0 - 2.0 * x)
    }
}

fn smoothstep_dx(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        0.0
    } else {
        6.0 * x * (1.0 - x)
    }
}

/// Per-component interval weight and its partials.
struct Window {
    w: f64,
    dw_ds: f64,
    dw_da: f64,
    dw_db: f64,
}

fn window(s: f64, a: f64, b: f64, windowed: bool) -> Window {
    if !windowed {
        return Window {
            w: 1.0,
            dw_ds: 0.0,
            dw_da: 0.0,
            dw_db: 0.0,
        };
    }
    let xa = (s - a) / ANCHOR_BAND;
    let xb = (b - s) / ANCHOR_BAND;
    let (sa, sb) = (smoothstep(xa), smoothstep(xb));
    let (da, db) = (smoothstep_dx(xa), smoothstep_dx(xb));
    Window {
        w: sa * sb,
        dw_ds: da / ANCHOR_BAND * sb - sa * db / ANCHOR_BAND,
        dw_da: -da / ANCHOR_BAND * sb,
        dw_db: sa * db / ANCHOR_BAND,
    }
}

/// The realized field wired up for differentiable rollouts.
struct DiffSim {
    field: ComposedField,
    per: Vec<ComponentParams>,
    limit_index: Option<usize>,
    /// `∂(realized conservative knot)/∂θ_knot` per component.
    cons_knot_factor: Vec<f64>,
    inertia: f64,
    delta_q: f64,
    dt: f64,
    eps: f64,
    limit_k: f64,
    limit_c_low: f64,
    limit_c_high: f64,
    n_params: usize,
}

struct FieldEval {
    conservative: f64,
    friction: f64,
    damping: f64,
    fric_argmax: Option<usize>,
}

impl DiffSim {
    fn new(set: &ParamSet, theta: &[f64], cfg: &SimConfig) -> Result<Self, RefineError> {
        let field = set.realize(theta)?;
        let refs = &set.refs;
        let ctx = &field.joint;
        let eps = cfg.eps_v.unwrap_or(refs.v_ref * 1e-3);
        let limit_k = cfg
            .limit_stiffness
            .unwrap_or(refs.f_ref / (0.005 * ctx.delta_q()));
        let hint = &field.joint_limit;
        let zeta_low = match hint.selected_side {
            LimitSide::LowEnd => hint.damping_ratio,
            _ => 1.0,
        };
        let zeta_high = match hint.selected_side {
            LimitSide::HighEnd => hint.damping_ratio,
            _ => 1.0,
        };
        let critical = (limit_k * ctx.inertia_eq).sqrt();
        let per = set.component_params();
        let cons_knot_factor = per
            .iter()
            .map(|p| match p.cons_scale {
                Some(si) => set.refs.f_ref * theta[si].exp(),
                None => set.refs.f_ref,
            })
            .collect();
        Ok(Self {
            per,
            limit_index: set.limit_index(),
            cons_knot_factor,
            inertia: ctx.inertia_eq,
            delta_q: ctx.delta_q(),
            dt: cfg.dt,
            eps,
            limit_k,
            limit_c_low: 2.0 * zeta_low * critical,
            limit_c_high: 2.0 * zeta_high * critical,
            n_params: set.len(),
            field,
        })
    }

    fn component_value(&self, ci: usize, channel: Channel, s: f64) -> f64 {
        let comp = &self.field.components[ci];
        if !self.per[ci].windowed() {
            return comp.eval(channel, s);
        }
        if s < comp.a() || s > comp.b() {
            return 0.0;
        }
        match comp.curve(channel) {
            Some(curve) => {
                window(s, comp.a(), comp.b(), true).w * curve.eval_clamped(comp.local(s))
            }
            None => 0.0,
        }
    }

    /// Mirrors `ComposedField::eval` (bit-exact when nothing is windowed),
    /// additionally tracking which component supplies the friction maximum.
    fn eval(&self, s: f64) -> FieldEval {
        let mut conservative = 0.0;
        let mut friction = 0.0f64;
        let mut damping = 0.0;
        let mut fric_argmax = None;
        for ci in 0..self.field.components.len() {
            conservative += self.component_value(ci, Channel::Conservative, s);
            let g = self.component_value(ci, Channel::FrictionMax, s);
            if g > friction {
                fric_argmax = Some(ci);
            }
            friction = friction.max(g);
            damping += self.component_value(ci, Channel::Damping, s);
        }
        FieldEval {
            conservative,
            friction: friction.max(0.0),
            damping: damping.max(0.0),
            fric_argmax,
        }
    }

    fn limit_force(&self, q: f64, v: f64) -> f64 {
        let ctx = &self.field.joint;
        if q < ctx.q_min {
            self.limit_k * (ctx.q_min - q) - self.limit_c_low * v
        } else if q > ctx.q_max {
            self.limit_k * (ctx.q_max - q) - self.limit_c_high * v
        } else {
            0.0
        }
    }

    /// `(∂F_lim/∂q, ∂F_lim/∂v, ∂F_lim/∂log ζ)` at the current state.
    fn limit_partials(&self, q: f64, v: f64) -> (f64, f64, f64) {
        let ctx = &self.field.joint;
        let hint_side = self.field.joint_limit.selected_side;
        if q < ctx.q_min {
            let d_theta = if self.limit_index.is_some() && hint_side == LimitSide::LowEnd {
                -self.limit_c_low * v
            } else {
                0.0
            };
            (-self.limit_k, -self.limit_c_low, d_theta)
        } else if q > ctx.q_max {
            let d_theta = if self.limit_index.is_some() && hint_side == LimitSide::HighEnd {
                -self.limit_c_high * v
            } else {
                0.0
            };
            (-self.limit_k, -self.limit_c_high, d_theta)
        } else {
            (0.0, 0.0, 0.0)
        }
    }

    /// One smoothed step; expression-for-expression the same arithmetic as
    /// the simulator's smooth mode.
    fn step(&self, q: f64, v: f64, f_ext: f64) -> (f64, f64) {
        let ctx = &self.field.joint;
        let s = ctx.normalize(q);
        let sample = self.eval(s);
        let f_nf = sample.conservative + ctx.gravity(s) + f_ext + self.limit_force(q, v);
        let denom = 1.0 + self.dt * sample.damping / self.inertia;
        let v_star = (v + self.dt * f_nf / self.inertia) / denom;
        let v_next = v_star - self.dt * sample.friction * (v_star / self.eps).tanh() / self.inertia;
        let q_next = q + self.dt * v_next;
        (q_next, v_next)
    }

    /// Spatial slopes `(dF_cons/ds, dC/ds, dF_fric/ds)` with the friction
    /// slope taken from the max-attaining component.
    fn spatial_slopes(&self, s: f64, fric_argmax: Option<usize>) -> (f64, f64, f64) {
        let mut d_cons = 0.0;
        let mut d_damp = 0.0;
        for (ci, comp) in self.field.components.iter().enumerate() {
            if !self.per[ci].windowed() {
                d_cons += comp.eval_dx(Channel::Conservative, s);
                d_damp += comp.eval_dx(Channel::Damping, s);
                continue;
            }
            if s < comp.a() || s > comp.b() {
                continue;
            }
            let win = window(s, comp.a(), comp.b(), true);
            let width = comp.b() - comp.a();
            let u = comp.local(s);
            for (channel, acc) in [
                (Channel::Conservative, &mut d_cons),
                (Channel::Damping, &mut d_damp),
            ] {
                if let Some(curve) = comp.curve(channel) {
                    let val = curve.eval_clamped(u);
                    let slope = curve.eval_dx_clamped(u);
                    *acc += win.dw_ds * val + win.w * slope / width;
                }
            }
        }
        let d_fric = match fric_argmax {
            Some(ci) => {
                let comp = &self.field.components[ci];
                if !self.per[ci].windowed() {
                    comp.eval_dx(Channel::FrictionMax, s)
                } else if s < comp.a() || s > comp.b() {
                    0.0
                } else {
                    match comp.curve(Channel::FrictionMax) {
                        Some(curve) => {
                            let win = window(s, comp.a(), comp.b(), true);
                            let u = comp.local(s);
                            win.dw_ds * curve.eval_clamped(u)
                                + win.w * curve.eval_dx_clamped(u) / (comp.b() - comp.a())
                        }
                        None => 0.0,
                    }
                }
            }
            None => 0.0,
        };
        (d_cons, d_damp, d_fric)
    }

    /// Accumulate `c_f·∂F_cons/∂θ + c_c·∂C/∂θ + c_g·∂F_fric/∂θ` into `grad`.
    fn accumulate_param_grads(
        &self,
        s: f64,
        c_f: f64,
        c_c: f64,
        c_g: f64,
        fric_argmax: Option<usize>,
        grad: &mut [f64],
    ) {
        for (ci, comp) in self.field.components.iter().enumerate() {
            let params = &self.per[ci];
            if params.is_empty() || s < comp.a() || s > comp.b() {
                continue;
            }
            let win = window(s, comp.a(), comp.b(), params.windowed());
            let width = comp.b() - comp.a();
            let u = comp.local(s);
            // ∂u/∂a and ∂u/∂b at fixed s.
            let du_da = (u - 1.0) / width;
            let du_db = -u / width;

            let channel_grads = |channel: Channel,
                                 coeff: f64,
                                 knots: &[usize],
                                 scale: Option<usize>,
                                 knot_factor: Option<f64>,
                                 grad: &mut [f64]| {
                if coeff == 0.0 {
                    return;
                }
                let Some(curve) = comp.curve(channel) else {
                    return;
                };
                let has_params = !knots.is_empty() || scale.is_some() || params.windowed();
                if !has_params {
                    return;
                }
                let val = curve.eval_clamped(u);
                if !knots.is_empty() {
                    let gy = curve.grad_y_clamped(u);
                    match knot_factor {
                        Some(factor) => {
                            for (j, &idx) in knots.iter().enumerate() {
                                grad[idx] += coeff * win.w * gy[j] * factor;
                            }
                        }
                        // Log-parameterized knots: ∂y_j/∂θ_j = y_j.
                        None => {
                            for (j, &idx) in knots.iter().enumerate() {
                                grad[idx] += coeff * win.w * gy[j] * curve.ys()[j];
                            }
                        }
                    }
                }
                if let Some(si) = scale {
                    grad[si] += coeff * win.w * val;
                }
                if params.windowed() {
                    let slope = curve.eval_dx_clamped(u);
                    if let Some(ai) = params.anchor_a {
                        grad[ai] += coeff * (win.dw_da * val + win.w * slope * du_da);
                    }
                    if let Some(bi) = params.anchor_b {
                        grad[bi] += coeff * (win.dw_db * val + win.w * slope * du_db);
                    }
                }
            };

            channel_grads(
                Channel::Conservative,
                c_f,
                &params.cons_knots,
                params.cons_scale,
                Some(self.cons_knot_factor[ci]),
                grad,
            );
            channel_grads(
                Channel::Damping,
                c_c,
                &params.damp_knots,
                params.damp_scale,
                None,
                grad,
            );
            if fric_argmax == Some(ci) {
                channel_grads(
                    Channel::FrictionMax,
                    c_g,
                    &[],
                    params.fric_scale,
                    None,
                    grad,
                );
            }
        }
    }
}

/// Forward/backward evaluation for one target trajectory.
struct TargetEval {
    loss: f64,
    grad: Vec<f64>,
    diverged: bool,
}

fn eval_target(sim: &DiffSim, target: &Trajectory, with_grad: bool) -> TargetEval {
    let n_steps = target.samples.len() - 1;
    let n_samples = target.samples.len() as f64;
    let ctx = &sim.field.joint;
    let mut states = Vec::with_capacity(n_steps + 1);
    let first = &target.samples[0];
    states.push((first.q, first.v));
    let mut diverged = false;
    for k in 0..n_steps {
        let (q, v) = states[k];
        let f = target.samples[k].f_ext + target.samples[k].f_hand;
        let (qn, vn) = sim.step(q, v, f);
        if !qn.is_finite() || !vn.is_finite() {
            diverged = true;
            break;
        }
        states.push((qn, vn));
    }
    if diverged {
        return TargetEval {
            loss: DIVERGED_LOSS,
            grad: vec![0.0; sim.n_params],
            diverged: true,
        };
    }

    // Mean squared normalized position error over all samples.
    let errs: Vec<f64> = states
        .iter()
        .zip(&target.samples)
        .map(|((q, _), t)| (q - t.q) / sim.delta_q)
        .collect();
    let loss = pairwise_sum(&errs.iter().map(|e| e * e).collect::<Vec<_>>()) / n_samples;
    if !with_grad {
        return TargetEval {
            loss,
            grad: Vec::new(),
            diverged: false,
        };
    }

    let lprime = |k: usize| 2.0 * errs[k] / (n_samples * sim.delta_q);
    let mut grad = vec![0.0; sim.n_params];
    let mut lambda_q = lprime(n_steps);
    let mut lambda_v = 0.0;
    for k in (0..n_steps).rev() {
        let (q, v) = states[k];
        let f = target.samples[k].f_ext + target.samples[k].f_hand;
        let s = ctx.normalize(q);
        let s_q = if q > ctx.q_min && q < ctx.q_max {
            1.0 / sim.delta_q
        } else {
            0.0
        };
        let sample = sim.eval(s);
        let gravity = ctx.gravity(s);
        let gravity_slope = ctx.gravity_curve.eval_dx_clamped(s);
        let (lim_dq, lim_dv, lim_dtheta) = sim.limit_partials(q, v);
        let f_nf = sample.conservative + gravity + f + sim.limit_force(q, v);
        let denom = 1.0 + sim.dt * sample.damping / sim.inertia;
        let v_star = (v + sim.dt * f_nf / sim.inertia) / denom;
        let t_h = (v_star / sim.eps).tanh();
        // ∂v_next/∂v_star.
        let dv = 1.0 - sim.dt * sample.friction * (1.0 - t_h * t_h) / (sim.eps * sim.inertia);

        let mu = lambda_v + sim.dt * lambda_q;
        let c_f = mu * dv * sim.dt / (sim.inertia * denom);
        let c_c = -mu * dv * v_star * sim.dt / (sim.inertia * denom);
        let c_g = -mu * sim.dt * t_h / sim.inertia;

        sim.accumulate_param_grads(s, c_f, c_c, c_g, sample.fric_argmax, &mut grad);
        if let Some(li) = sim.limit_index {
            grad[li] += c_f * lim_dtheta;
        }

        let (df_ds, dc_ds, dg_ds) = sim.spatial_slopes(s, sample.fric_argmax);
        let dfnf_dq = (df_ds + gravity_slope) * s_q + lim_dq;
        let dvstar_dq =
            (sim.dt * dfnf_dq / sim.inertia - v_star * sim.dt * dc_ds * s_q / sim.inertia) / denom;
        let dvnext_dq = dv * dvstar_dq - sim.dt * t_h * dg_ds * s_q / sim.inertia;
        let dvstar_dv = (1.0 + sim.dt * lim_dv / sim.inertia) / denom;
        let dvnext_dv = dv * dvstar_dv;

        lambda_q = lprime(k) + lambda_q + mu * dvnext_dq;
        lambda_v = mu * dvnext_dv;
    }
    TargetEval {
        loss,
        grad,
        diverged: false,
    }
}

/// Order-insensitive summation (pairwise tree reduction).
fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => pairwise_sum(&values[..n / 2]) + pairwise_sum(&values[n / 2..]),
    }
}

fn pairwise_combine(mut parts: Vec<TargetEval>) -> (f64, Vec<f64>, bool) {
    let diverged = parts.iter().any(|p| p.diverged);
    let count = parts.len() as f64;
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut iter = parts.into_iter();
        while let Some(mut a) = iter.next() {
            if let Some(b) = iter.next() {
                a.loss += b.loss;
                for (x, y) in a.grad.iter_mut().zip(&b.grad) {
                    *x += y;
                }
            }
            next.push(a);
        }
        parts = next;
    }
    let mut head = parts.pop().expect("at least one target");
    head.loss /= count;
    for g in &mut head.grad {
        *g /= count;
    }
    (head.loss, head.grad, diverged)
}

fn validate_targets(targets: &[Trajectory], dt: f64) -> Result<(), RefineError> {
    if targets.is_empty() {
        return Err(RefineError::NoTargets);
    }
    for target in targets {
        if target.samples.len() < 2 {
            return Err(RefineError::TargetTooShort);
        }
        if (target.dt - dt).abs() > 1e-9 * dt.abs().max(1.0) {
            return Err(RefineError::TargetDt {
                expected: dt,
                found: target.dt,
            });
        }
    }
    Ok(())
}

/// Loss (and divergence flag) at `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    pub diverged: bool,
}

/// Loss, gradient, and divergence flag at `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEval {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub diverged: bool,
}

fn eval_all(
    set: &ParamSet,
    theta: &[f64],
    targets: &[Trajectory],
    cfg: &SimConfig,
    with_grad: bool,
) -> Result<(f64, Vec<f64>, bool), RefineError> {
    validate_targets(targets, cfg.dt)?;
    let sim = DiffSim::new(set, theta, cfg)?;
    let parts: Vec<TargetEval> = targets
        .par_iter()
        .map(|t| eval_target(&sim, t, with_grad))
        .collect();
    Ok(pairwise_combine(parts))
}

/// Mean over targets and samples of the squared normalized position error
/// of smoothed rollouts replaying each target's recorded forces.
pub fn trajectory_loss(
    set: &ParamSet,
    theta: &[f64],
    targets: &[Trajectory],
    cfg: &SimConfig,
) -> Result<LossEval, RefineError> {
    let (loss, _, diverged) = eval_all(set, theta, targets, cfg, false)?;
    Ok(LossEval { loss, diverged })
}

/// Loss plus its exact reverse-mode gradient through the smoothed dynamics.
pub fn loss_grad(
    set: &ParamSet,
    theta: &[f64],
    targets: &[Trajectory],
    cfg: &SimConfig,
) -> Result<GradEval, RefineError> {
    let (loss, grad, diverged) = eval_all(set, theta, targets, cfg, true)?;
    Ok(GradEval {
        loss,
        grad,
        diverged,
    })
}

/// Adam hyperparameters; the learning rate is in parameter-normalized units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam first/second moment state.
#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    t: u32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn update(&mut self, theta: &mut [f64], grad: &[f64]) {
        assert_eq!(theta.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grad[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
}

/// Outcome of an optimization run.
#[derive(Debug, Clone)]
pub struct OptimizeResult {
    /// Best-so-far parameters over all iterates.
    pub theta_best: Vec<f64>,
    /// Parameters after the last update.
    pub theta_final: Vec<f64>,
    pub best_iteration: usize,
    /// Loss at the initial point and after each update (`n_iters + 1`).
    pub loss_history: Vec<f64>,
    pub diverged_evaluations: usize,
    pub wall_time_s: f64,
}

/// Run `n_iters` Adam updates from the set's initial parameters, projecting
/// anchors after each step; returns the best-so-far iterate and the full
/// loss history.
pub fn optimize(
    set: &ParamSet,
    targets: &[Trajectory],
    cfg: &SimConfig,
    adam_cfg: &AdamConfig,
    n_iters: usize,
) -> Result<OptimizeResult, RefineError> {
    if n_iters == 0 {
        return Err(RefineError::BadIterations);
    }
    let start = Instant::now();
    let mut theta = set.theta0().to_vec();
    set.project(&mut theta);
    let mut adam = AdamState::new(set.len(), *adam_cfg);
    let mut history = Vec::with_capacity(n_iters + 1);
    let mut diverged_evaluations = 0usize;

    let mut eval = loss_grad(set, &theta, targets, cfg)?;
    history.push(eval.loss);
    diverged_evaluations += eval.diverged as usize;
    let mut best = (eval.loss, theta.clone(), 0usize);

    for iter in 1..=n_iters {
        adam.update(&mut theta, &eval.grad);
        set.project(&mut theta);
        eval = loss_grad(set, &theta, targets, cfg)?;
        history.push(eval.loss);
        diverged_evaluations += eval.diverged as usize;
        if eval.loss < best.0 {
            best = (eval.loss, theta.clone(), iter);
        }
    }

    Ok(OptimizeResult {
        theta_best: best.1,
        theta_final: theta,
        best_iteration: best.2,
        loss_history: history,
        diverged_evaluations,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Optimization report as a JSON value with sorted keys.
pub fn report_json(set: &ParamSet, result: &OptimizeResult) -> serde_json::Value {
    let parameters: Vec<serde_json::Value> = (0..set.len())
        .map(|i| {
            serde_json::json!({
                "delta": result.theta_best[i] - set.theta0()[i],
                "final": result.theta_best[i],
                "initial": set.theta0()[i],
                "name": set.describe(i),
            })
        })
        .collect();
    serde_json::json!({
        "best_iteration": result.best_iteration,
        "best_loss": result.loss_history[result.best_iteration],
        "diverged_evaluations": result.diverged_evaluations,
        "final_loss": *result.loss_history.last().expect("non-empty history"),
        "initial_loss": result.loss_history[0],
        "loss_history": result.loss_history,
        "n_iterations": result.loss_history.len() - 1,
        "n_parameters": set.len(),
        "parameters": parameters,
        "wall_time_s": result.wall_time_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::{JointContext, JointType};
    use crate::field::{template, ChannelScales, Elasticity, JointLimitHint};
    use crate::sim::{ForceSource, SimState, Simulator};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_ctx() -> JointContext {
        JointContext::without_gravity("a", "j", JointType::Prismatic, 0.0, 1.0, 1.0, 1.0).unwrap()
    }

    fn detent_field() -> ComposedField {
        let mut field = ComposedField::bare(unit_ctx());
        let (comp, _) = template("detent_internal")
            .unwrap()
            .instantiate(
                0.2,
                0.8,
                ChannelScales {
                    conservative: 1.5,
                    friction: 0.1,
                    damping: 0.3,
                },
            )
            .unwrap();
        field.components = vec![comp];
        field
    }

    fn smooth_cfg() -> SimConfig {
        SimConfig {
            smooth_friction: true,
            ..Default::default()
        }
    }

    fn record_targets(
        field: &ComposedField,
        starts: &[(f64, f64)],
        n_steps: usize,
    ) -> Vec<Trajectory> {
        let sim = Simulator::new(field, &smooth_cfg());
        starts
            .iter()
            .map(|&(q, f)| {
                sim.rollout(SimState::at_rest(q), &mut ForceSource::Constant(f), n_steps)
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn mask_parsing() {
        let mask = ParamMask::parse_list("cons_knots, anchors").unwrap();
        assert!(mask.cons_knots && mask.anchors);
        assert!(!mask.damp_knots && !mask.fric_scale);
        assert_eq!(ParamMask::parse_list("all").unwrap(), ParamMask::all());
        assert!(ParamMask::parse_list("bogus").is_err());
    }

    #[test]
    fn self_consistent_targets_have_negligible_loss() {
        let field = detent_field();
        let targets = record_targets(&field, &[(0.55, 0.0), (0.35, 0.2)], 300);
        let mask = ParamMask {
            cons_knots: true,
            cons_scale: true,
            fric_scale: true,
            damp_scale: true,
            ..Default::default()
        };
        let set = ParamSet::new(&field, &mask).unwrap();
        let eval = trajectory_loss(&set, set.theta0(), &targets, &smooth_cfg()).unwrap();
        assert!(!eval.diverged);
        assert!(eval.loss < 1e-12, "loss = {}", eval.loss);
    }

    #[test]
    fn scale_params_realize_without_anchor_windows_bitwise() {
        // With only scale parameters at theta0, the realized field evaluates
        // identically to the base (exp(0) == 1 exactly).
        let field = detent_field();
        let mask = ParamMask {
            cons_scale: true,
            fric_scale: true,
            damp_scale: true,
            ..Default::default()
        };
        let set = ParamSet::new(&field, &mask).unwrap();
        let realized = set.realize(set.theta0()).unwrap();
        for i in 0..=100 {
            let s = i as f64 / 100.0;
            let a = field.eval(s);
            let b = realized.eval(s);
            assert_eq!(a.conservative.to_bits(), b.conservative.to_bits());
            assert_eq!(a.friction_max.to_bits(), b.friction_max.to_bits());
            assert_eq!(a.damping.to_bits(), b.damping.to_bits());
        }
    }

    #[test]
    fn constant_offset_gives_exact_mse() {
        let field = ComposedField::bare(unit_ctx());
        let sim = Simulator::new(&field, &smooth_cfg());
        let mut target = sim
            .rollout(SimState::at_rest(0.5), &mut ForceSource::Constant(0.0), 100)
            .unwrap();
        // Offset every sample after the initial one; the rollout stays at
        // the initial q, so each offset row contributes exactly delta².
        let delta = 0.01;
        for sample in target.samples.iter_mut().skip(1) {
            sample.q += delta;
        }
        let mask = ParamMask {
            cons_scale: false,
            ..Default::default()
        };
        // A zero field has no components, so fabricate a parameter on the
        // limit hint to satisfy the non-empty mask requirement.
        let set = ParamSet::new(
            &field,
            &ParamMask {
                limit_damping: true,
                ..mask
            },
        )
        .unwrap();
        let eval = trajectory_loss(&set, set.theta0(), &[target], &smooth_cfg()).unwrap();
        let expect = delta * delta * 100.0 / 101.0;
        assert!((eval.loss - expect).abs() < 1e-15, "loss = {}", eval.loss);
    }

    #[test]
    fn normalization_uses_joint_range() {
        let ctx = JointContext::without_gravity("a", "j", JointType::Prismatic, 0.0, 2.0, 1.0, 1.0)
            .unwrap();
        let field = ComposedField::bare(ctx);
        let sim = Simulator::new(&field, &smooth_cfg());
        let mut target = sim
            .rollout(SimState::at_rest(1.0), &mut ForceSource::Constant(0.0), 50)
            .unwrap();
        let delta = 0.02;
        for sample in target.samples.iter_mut().skip(1) {
            sample.q += delta;
        }
        let set = ParamSet::new(
            &field,
            &ParamMask {
                limit_damping: true,
                ..Default::default()
            },
        )
        .unwrap();
        let eval = trajectory_loss(&set, set.theta0(), &[target], &smooth_cfg()).unwrap();
        let expect = (delta / 2.0) * (delta / 2.0) * 50.0 / 51.0;
        assert!((eval.loss - expect).abs() < 1e-15, "loss = {}", eval.loss);
    }

    #[test]
    fn perturbations_increase_loss() {
        let field = detent_field();
        let targets = record_targets(&field, &[(0.55, 0.0), (0.3, 0.15)], 250);
        let mask = ParamMask {
            cons_knots: true,
            fric_scale: true,
            damp_scale: true,
            ..Default::default()
        };
        let set = ParamSet::new(&field, &mask).unwrap();
        let base_loss = trajectory_loss(&set, set.theta0(), &targets, &smooth_cfg())
            .unwrap()
            .loss;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let theta: Vec<f64> = set
                .theta0()
                .iter()
                .map(|t| t + rng.gen_range(-0.05..0.05))
                .collect();
            let loss = trajectory_loss(&set, &theta, &targets, &smooth_cfg())
                .unwrap()
                .loss;
            assert!(loss > base_loss, "{loss} !> {base_loss}");
        }
    }

    #[test]
    fn gradient_vanishes_at_ground_truth() {
        let field = detent_field();
        let targets = record_targets(&field, &[(0.55, 0.0)], 200);
        let mask = ParamMask {
            cons_knots: true,
            damp_scale: true,
            ..Default::default()
        };
        let set = ParamSet::new(&field, &mask).unwrap();
        let eval = loss_grad(&set, set.theta0(), &targets, &smooth_cfg()).unwrap();
        let norm = eval.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm < 1e-8, "norm = {norm}");
    }

    fn finite_difference_check(
        set: &ParamSet,
        theta: &[f64],
        targets: &[Trajectory],
        cfg: &SimConfig,
    ) {
        let eval = loss_grad(set, theta, targets, cfg).unwrap();
        assert!(!eval.diverged);
        let h = 1e-5;
        for i in 0..theta.len() {
            let mut plus = theta.to_vec();
            plus[i] += h;
            let mut minus = theta.to_vec();
            minus[i] -= h;
            let lp = trajectory_loss(set, &plus, targets, cfg).unwrap().loss;
            let lm = trajectory_loss(set, &minus, targets, cfg).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            let tol = 1e-4 * fd.abs().max(1e-6);
            assert!(
                (eval.grad[i] - fd).abs() <= tol,
                "param {} ({}): grad {} vs fd {}",
                i,
                set.describe(i),
                eval.grad[i],
                fd
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences_for_knots_and_scales() {
        let field = detent_field();
        let targets = record_targets(&field, &[(0.55, 0.0)], 200);
        let mask = ParamMask {
            cons_knots: true,
            damp_scale: true,
            ..Default::default()
        };
        let set = ParamSet::new(&field, &mask).unwrap();
        assert_eq!(set.len(), 6);
        // Check away from the ground-truth minimum where gradients are
        // nontrivial.
        let theta: Vec<f64> = set
            .theta0()
            .iter()
            .enumerate()
            .map(|(i, t)| t + 0.03 * (1.0 + i as f64 * 0.3))
            .collect();
        finite_difference_check(&set, &theta, &targets, &smooth_cfg());
    }

    #[test]
    fn gradient_matches_finite_differences_for_anchors_and_limit() {
        let mut field = ComposedField::bare(unit_ctx());
        let (detent, _) = template("detent_internal")
            .unwrap()
            .instantiate(
                0.3,
                0.7,
                ChannelScales {
                    conservative: 1.2,
                    friction: 0.1,
                    ..Default::default()
                },
            )
            .unwrap();
        // Keep every anchor interior so finite-difference probes stay in
        // [0, 1].
        let (drive, _) = template("constant_positive_conservative_hinge")
            .unwrap()
            .instantiate(
                0.02,
                0.97,
                ChannelScales {
                    conservative: 1.4,
                    ..Default::default()
                },
            )
            .unwrap();
        field.components = vec![detent, drive];
        field.joint_limit = JointLimitHint::new(LimitSide::HighEnd, Elasticity::Weak);

        // Record with the sharp-interval simulator, then evaluate gradients
        // at the smooth-window parameterization.
        let targets = record_targets(&field, &[(0.45, 0.0)], 220);
        let mask = ParamMask {
            anchors: true,
            limit_damping: true,
            ..Default::default()
        };
        let set = ParamSet::new(&field, &mask).unwrap();
        assert_eq!(set.len(), 5);
        finite_difference_check(&set, set.theta0(), &targets, &smooth_cfg());
    }

    #[test]
    fn unvisited_component_gets_zero_gradient() {
        let mut field = ComposedField::bare(unit_ctx());
        let (near, _) = template("detent_internal")
            .unwrap()
            .instantiate(
                0.0,
                0.3,
                ChannelScales {
                    conservative: 1.0,
                    friction: 0.2,
                    ..Default::default()
                },
            )
            .unwrap();
        let (far, _) = template("detent_internal")
            .unwrap()
            .instantiate(
                0.7,
                1.0,
                ChannelScales {
                    conservative: 1.0,
                    friction: 0.2,
                    ..Default::default()
                },
            )
            .unwrap();
        field.components = vec![near, far];
        let targets = record_targets(&field, &[(0.15, 0.0)], 200);
        let mask = ParamMask {
            cons_knots: true,
            cons_scale: true,
            fric_scale: true,
            ..Default::default()
        };
        let set = ParamSet::new(&field, &mask).unwrap();
        let theta: Vec<f64> = set.theta0().iter().map(|t| t + 0.02).collect();
        let eval = loss_grad(&set, &theta, &targets, &smooth_cfg()).unwrap();
        for (i, kind) in set.entries().iter().enumerate() {
            let component = match *kind {
                ParamKind::ConsKnot { component, .. }
                | ParamKind::ConsScale { component }
                | ParamKind::FricScale { component } => component,
                _ => continue,
            };
            if component == 1 {
                assert_eq!(eval.grad[i], 0.0, "param {}", set.describe(i));
            }
        }
    }

    #[test]
    fn loss_is_order_insensitive() {
        let field = detent_field();
        let targets = record_targets(
            &field,
            &[(0.55, 0.0), (0.3, 0.15), (0.7, -0.1), (0.45, 0.05)],
            150,
        );
        let mask = ParamMask {
            cons_knots: true,
            ..Default::default()
        };
        let set = ParamSet::new(&field, &mask).unwrap();
        let theta: Vec<f64> = set.theta0().iter().map(|t| t + 0.02).collect();
        let forward = trajectory_loss(&set, &theta, &targets, &smooth_cfg()).unwrap();
        let mut reversed = targets.clone();
        reversed.reverse();
        let backward = trajectory_loss(&set, &theta, &reversed, &smooth_cfg()).unwrap();
        assert!((forward.loss - backward.loss).abs() <= 1e-12 * forward.loss.max(1.0));
        let repeat = trajectory_loss(&set, &theta, &targets, &smooth_cfg()).unwrap();
        assert_eq!(forward.loss.to_bits(), repeat.loss.to_bits());
    }

    #[test]
    fn diverged_rollout_yields_sentinel_and_zero_grad() {
        let field = detent_field();
        let targets = record_targets(&field, &[(0.55, 0.0)], 50);
        let mask = ParamMask {
            cons_knots: true,
            ..Default::default()
        };
        let set = ParamSet::new(&field, &mask).unwrap();
        let cfg = SimConfig {
            dt: 0.005,
            smooth_friction: true,
            // Make the limit spring absurdly stiff so any boundary contact
            // explodes in a couple of steps.
            limit_stiffness: Some(1e18),
            ..Default::default()
        };
        // Push hard into the high limit via huge conservative knots.
        let theta: Vec<f64> = set.theta0().iter().map(|_| 1e9).collect();
        let targets_matching: Vec<Trajectory> = targets
            .iter()
            .map(|t| Trajectory {
                dt: cfg.dt,
                samples: t.samples.clone(),
            })
            .collect();
        let eval = loss_grad(&set, &theta, &targets_matching, &cfg).unwrap();
        assert!(eval.diverged);
        assert_eq!(eval.loss, DIVERGED_LOSS);
        assert!(eval.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn optimize_validates_inputs() {
        let field = detent_field();
        let targets = record_targets(&field, &[(0.55, 0.0)], 50);
        let mask = ParamMask {
            cons_scale: true,
            ..Default::default()
        };
        let set = ParamSet::new(&field, &mask).unwrap();
        assert!(matches!(
            optimize(&set, &targets, &smooth_cfg(), &AdamConfig::default(), 0),
            Err(RefineError::BadIterations)
        ));
        assert!(matches!(
            optimize(&set, &[], &smooth_cfg(), &AdamConfig::default(), 1),
            Err(RefineError::NoTargets)
        ));
        let bad_dt = vec![Trajectory {
            dt: 0.5,
            samples: targets[0].samples.clone(),
        }];
        assert!(matches!(
            optimize(&set, &bad_dt, &smooth_cfg(), &AdamConfig::default(), 1),
            Err(RefineError::TargetDt { .. })
        ));
        let one = optimize(&set, &targets, &smooth_cfg(), &AdamConfig::default(), 1).unwrap();
        assert_eq!(one.loss_history.len(), 2);
    }

    #[test]
    fn optimize_recovers_perturbed_scale() {
        // Ground truth has conservative scale 1.5; the initial field carries
        // 1.0, so the optimizer must push the log-scale toward ln(1.5).
        let truth = detent_field();
        let targets = record_targets(&truth, &[(0.55, 0.0), (0.3, 0.1)], 400);

        let mut start = ComposedField::bare(unit_ctx());
        let (comp, _) = template("detent_internal")
            .unwrap()
            .instantiate(
                0.2,
                0.8,
                ChannelScales {
                    conservative: 1.0,
                    friction: 0.1,
                    damping: 0.3,
                },
            )
            .unwrap();
        start.components = vec![comp];

        let mask = ParamMask {
            cons_scale: true,
            ..Default::default()
        };
        let set = ParamSet::new(&start, &mask).unwrap();
        let result = optimize(&set, &targets, &smooth_cfg(), &AdamConfig::default(), 50).unwrap();
        let initial = result.loss_history[0];
        let best = result.loss_history[result.best_iteration];
        assert!(
            best / initial <= 0.05,
            "ratio {} (initial {initial}, best {best})",
            best / initial
        );
        assert!(
            (result.theta_best[0] - 1.5f64.ln()).abs() < 0.08,
            "theta {}",
            result.theta_best[0]
        );
        // Running minimum of the history matches the reported best.
        let running_min = result
            .loss_history
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        assert_eq!(running_min, best);
    }

    #[test]
    fn mask_respect_is_bitwise() {
        let field = detent_field();
        let targets = record_targets(&field, &[(0.55, 0.0)], 100);
        let mask = ParamMask {
            cons_scale: true,
            ..Default::default()
        };
        let set = ParamSet::new(&field, &mask).unwrap();
        let result = optimize(&set, &targets, &smooth_cfg(), &AdamConfig::default(), 3).unwrap();
        let realized = set.realize(&result.theta_final).unwrap();
        let base_comp = &field.components[0];
        let new_comp = &realized.components[0];
        for channel in [Channel::FrictionMax, Channel::Damping] {
            let a = base_comp.curve(channel).unwrap().ys();
            let b = new_comp.curve(channel).unwrap().ys();
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(base_comp.a().to_bits(), new_comp.a().to_bits());
        assert_eq!(base_comp.b().to_bits(), new_comp.b().to_bits());
        assert_eq!(
            field.joint_limit.damping_ratio.to_bits(),
            realized.joint_limit.damping_ratio.to_bits()
        );
    }

    #[test]
    fn positivity_is_structural() {
        let field = detent_field();
        let targets = record_targets(&field, &[(0.55, 0.0)], 100);
        let mask = ParamMask {
            fric_scale: true,
            damp_scale: true,
            damp_knots: true,
            ..Default::default()
        };
        let set = ParamSet::new(&field, &mask).unwrap();
        let aggressive = AdamConfig {
            lr: 0.5,
            ..Default::default()
        };
        let result = optimize(&set, &targets, &smooth_cfg(), &aggressive, 10).unwrap();
        for theta in [&result.theta_best, &result.theta_final] {
            let realized = set.realize(theta).unwrap();
            let comp = &realized.components[0];
            for channel in [Channel::FrictionMax, Channel::Damping] {
                assert!(comp.curve(channel).unwrap().ys().iter().all(|y| *y > 0.0));
            }
        }
    }

    #[test]
    fn anchor_projection_keeps_margin() {
        let field = detent_field();
        let mask = ParamMask {
            anchors: true,
            ..Default::default()
        };
        let set = ParamSet::new(&field, &mask).unwrap();
        let mut theta = vec![0.9, 0.1];
        set.project(&mut theta);
        assert!(theta[0] < theta[1]);
        assert!((theta[1] - theta[0] - ANCHOR_MARGIN).abs() < 1e-12);
        let mut theta = vec![-0.5, 1.5];
        set.project(&mut theta);
        assert_eq!(theta, vec![0.0, 1.0]);
        let realized = set.realize(&theta).unwrap();
        assert_eq!(realized.components[0].a(), 0.0);
        assert_eq!(realized.components[0].b(), 1.0);
    }

    #[test]
    fn report_shape() {
        let field = detent_field();
        let targets = record_targets(&field, &[(0.55, 0.0)], 60);
        let mask = ParamMask {
            cons_scale: true,
            ..Default::default()
        };
        let set = ParamSet::new(&field, &mask).unwrap();
        let result = optimize(&set, &targets, &smooth_cfg(), &AdamConfig::default(), 2).unwrap();
        let report = report_json(&set, &result);
        assert_eq!(report["n_parameters"], serde_json::json!(1));
        assert_eq!(report["n_iterations"], serde_json::json!(2));
        assert_eq!(
            report["parameters"][0]["name"],
            serde_json::json!("components[0].conservative.log_scale")
        );
        assert!(report["wall_time_s"].as_f64().unwrap() >= 0.0);
        assert_eq!(report["loss_history"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn no_params_mask_is_rejected() {
        let field = ComposedField::bare(unit_ctx());
        let mask = ParamMask {
            cons_knots: true,
            ..Default::default()
        };
        assert!(matches!(
            ParamSet::new(&field, &mask),
            Err(RefineError::NoParams)
        ));
    }

    #[test]
    fn random_seeds_gradient_check() {
        // Smaller rollouts across several seeded perturbations of the
        // six-parameter setup.
        let field = detent_field();
        let targets = record_targets(&field, &[(0.5, 0.05)], 120);
        let mask = ParamMask {
            cons_knots: true,
            damp_scale: true,
            ..Default::default()
        };
        let set = ParamSet::new(&field, &mask).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..10 {
            let theta: Vec<f64> = set
                .theta0()
                .iter()
                .map(|t| t + rng.gen_range(-0.04..0.04))
                .collect();
            finite_difference_check(&set, &theta, &targets, &smooth_cfg());
        }
    }
}
