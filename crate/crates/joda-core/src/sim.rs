//! Single-DOF reference simulator for composed fields.
//!
//! Integration is semi-implicit Euler with implicit damping and a
//! velocity-clamp Coulomb model: damping enters the velocity update through
//! its denominator (unconditionally stable), and dry friction removes up to
//! `dt·F_fric/I` of velocity per step, so it can arrest motion exactly —
//! small force imbalances at rest produce no creep. A smooth mode replaces
//! the clamp with a `tanh` profile for differentiability.

use thiserror::Error;

use crate::compiler::{reference_magnitudes, JointContext, ReferenceMagnitudes};
use crate::field::{template, ChannelScales, ComposedField, FieldError, LimitSide};

#[derive(Debug, Clone, Error)]
pub enum SimError {
    #[error("integration diverged at t={t}: q={q}, v={v}")]
    Diverged { t: f64, q: f64, v: f64 },
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("trajectory csv line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Instantaneous joint state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimState {
    pub t: f64,
    pub q: f64,
    pub v: f64,
}

impl SimState {
    pub fn at_rest(q: f64) -> Self {
        Self { t: 0.0, q, v: 0.0 }
    }
}

/// Integrator settings. `None` fields derive their value from the joint's
/// reference magnitudes when a simulator is built.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub smooth_friction: bool,
    /// Stiction velocity scale for smooth mode; default `1e-3 · v_ref`.
    pub eps_v: Option<f64>,
    /// Limit spring stiffness; default lets a force of `F_ref` penetrate
    /// 0.5% of the joint range.
    pub limit_stiffness: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.005,
            smooth_friction: false,
            eps_v: None,
            limit_stiffness: None,
        }
    }
}

/// One record per timestep plus a final state-only record.
///
/// Row `k` carries the state at `t_k` together with the external and hand
/// forces applied over the step to `t_{k+1}`; the last row's forces are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    pub t: f64,
    pub q: f64,
    pub v: f64,
    pub f_ext: f64,
    pub f_hand: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub samples: Vec<TrajectorySample>,
}

impl Trajectory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,q,v,f_ext,f_hand\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.t, s.q, s.v, s.f_ext, s.f_hand
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, SimError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(SimError::Csv {
            line: 1,
            message: "empty file".into(),
        })?;
        if header.trim() != "t,q,v,f_ext,f_hand" {
            return Err(SimError::Csv {
                line: 1,
                message: format!("unexpected header {header:?}"),
            });
        }
        let mut samples = Vec::new();
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(SimError::Csv {
                    line: idx + 1,
                    message: format!("expected 5 columns, got {}", fields.len()),
                });
            }
            let mut values = [0.0; 5];
            for (slot, field) in values.iter_mut().zip(&fields) {
                *slot = field.trim().parse().map_err(|e| SimError::Csv {
                    line: idx + 1,
                    message: format!("bad number {field:?}: {e}"),
                })?;
            }
            samples.push(TrajectorySample {
                t: values[0],
                q: values[1],
                v: values[2],
                f_ext: values[3],
                f_hand: values[4],
            });
        }
        if samples.len() < 2 {
            return Err(SimError::Csv {
                line: samples.len() + 1,
                message: "need at least 2 rows".into(),
            });
        }
        let dt = samples[1].t - samples[0].t;
        for (i, pair) in samples.windows(2).enumerate() {
            let step = pair[1].t - pair[0].t;
            if !step.is_finite() || step <= 0.0 || (step - dt).abs() > 1e-9 * dt.abs().max(1.0) {
                return Err(SimError::Csv {
                    line: i + 3,
                    message: format!("non-uniform timestep {step} (expected {dt})"),
                });
            }
        }
        Ok(Self { dt, samples })
    }
}

/// Bounded, rate-limited PD controller emulating a hand on the joint.
///
/// The control target chases the command at up to `r_max` per second inside
/// the joint range; the PD force is capped at `f_max`. The target
/// initializes to the joint position on first use.
#[derive(Debug, Clone, PartialEq)]
pub struct HandController {
    pub kp: f64,
    pub kd: f64,
    pub f_max: f64,
    pub r_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    target: Option<f64>,
}

impl HandController {
    pub fn new(
        kp: f64,
        kd: f64,
        f_max: f64,
        r_max: f64,
        q_min: f64,
        q_max: f64,
    ) -> Result<Self, SimError> {
        if !(kp > 0.0 && kd > 0.0 && f_max > 0.0 && r_max > 0.0) {
            return Err(SimError::Scenario(format!(
                "hand gains must be positive (kp={kp}, kd={kd}, f_max={f_max}, r_max={r_max})"
            )));
        }
        Ok(Self {
            kp,
            kd,
            f_max,
            r_max,
            q_min,
            q_max,
            target: None,
        })
    }

    /// Defaults proportioned to the joint's reference magnitudes.
    pub fn with_defaults(ctx: &JointContext, refs: &ReferenceMagnitudes) -> Self {
        let kp = 20.0 * refs.f_ref / ctx.delta_q();
        Self {
            kp,
            kd: 2.0 * (kp * ctx.inertia_eq).sqrt(),
            f_max: 3.0 * refs.f_ref,
            r_max: 2.0 * refs.v_ref,
            q_min: ctx.q_min,
            q_max: ctx.q_max,
            target: None,
        }
    }

    pub fn target(&self) -> Option<f64> {
        self.target
    }

    /// Advance the target toward `command` and return the PD force.
    pub fn force(&mut self, state: &SimState, dt: f64, command: f64) -> f64 {
        let current = *self.target.get_or_insert(state.q);
        let max_move = self.r_max * dt;
        let next = (current + (command - current).clamp(-max_move, max_move))
            .clamp(self.q_min, self.q_max);
        self.target = Some(next);
        (self.kp * (next - state.q) - self.kd * state.v).clamp(-self.f_max, self.f_max)
    }
}

/// Zero-order hold over `(t, value)` points sorted by time; zero before the
/// first point.
fn hold(points: &[(f64, f64)], t: f64) -> f64 {
    let idx = points.partition_point(|&(pt, _)| pt <= t);
    if idx == 0 {
        0.0
    } else {
        points[idx - 1].1
    }
}

/// External force applied during a rollout.
#[derive(Debug, Clone, PartialEq)]
pub enum ForceSource {
    Constant(f64),
    /// Zero-order hold over `(t, force)` points.
    Schedule(Vec<(f64, f64)>),
    /// One force per step index; zero past the end.
    Samples(Vec<f64>),
    /// Virtual hand chasing a `(t, command)` schedule.
    Hand {
        commands: Vec<(f64, f64)>,
        controller: HandController,
    },
}

impl ForceSource {
    /// `(f_ext, f_hand)` for step `k` starting at `state`.
    fn apply(&mut self, k: usize, state: &SimState, dt: f64) -> (f64, f64) {
        match self {
            ForceSource::Constant(f) => (*f, 0.0),
            ForceSource::Schedule(points) => (hold(points, state.t), 0.0),
            ForceSource::Samples(samples) => (samples.get(k).copied().unwrap_or(0.0), 0.0),
            ForceSource::Hand {
                commands,
                controller,
            } => {
                let command = hold(commands, state.t);
                (0.0, controller.force(state, dt, command))
            }
        }
    }
}

/// A composed field bound to resolved integrator constants.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    field: &'a ComposedField,
    refs: ReferenceMagnitudes,
    dt: f64,
    smooth: bool,
    eps_v: f64,
    limit_k: f64,
    limit_c_low: f64,
    limit_c_high: f64,
}

impl<'a> Simulator<'a> {
    pub fn new(field: &'a ComposedField, cfg: &SimConfig) -> Self {
        let ctx = &field.joint;
        let refs = reference_magnitudes(ctx);
        let eps_v = cfg.eps_v.unwrap_or(refs.v_ref * 1e-3);
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
        Self {
            field,
            refs,
            dt: cfg.dt,
            smooth: cfg.smooth_friction,
            eps_v,
            limit_k,
            limit_c_low: 2.0 * zeta_low * critical,
            limit_c_high: 2.0 * zeta_high * critical,
        }
    }

    pub fn field(&self) -> &ComposedField {
        self.field
    }

    pub fn refs(&self) -> &ReferenceMagnitudes {
        &self.refs
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn eps_v(&self) -> f64 {
        self.eps_v
    }

    pub fn limit_stiffness(&self) -> f64 {
        self.limit_k
    }

    /// One-sided spring-damper force outside the joint range; zero inside.
    pub fn limit_force(&self, q: f64, v: f64) -> f64 {
        let ctx = &self.field.joint;
        if q < ctx.q_min {
            self.limit_k * (ctx.q_min - q) - self.limit_c_low * v
        } else if q > ctx.q_max {
            self.limit_k * (ctx.q_max - q) - self.limit_c_high * v
        } else {
            0.0
        }
    }

    /// Advance one timestep under external force `f_ext`.
    pub fn step(&self, state: &SimState, f_ext: f64) -> Result<SimState, SimError> {
        let ctx = &self.field.joint;
        let inertia = ctx.inertia_eq;
        let s = ctx.normalize(state.q);
        let sample = self.field.eval(s);
        let f_nf =
            sample.conservative + ctx.gravity(s) + f_ext + self.limit_force(state.q, state.v);

        let denom = 1.0 + self.dt * sample.damping / inertia;
        let v_star = (state.v + self.dt * f_nf / inertia) / denom;
        let v_next = if self.smooth {
            v_star - self.dt * sample.friction_max * (v_star / self.eps_v).tanh() / inertia
        } else {
            let dv_max = self.dt * sample.friction_max / inertia;
            if v_star.abs() <= dv_max {
                0.0
            } else {
                v_star - v_star.signum() * dv_max
            }
        };
        let q_next = state.q + self.dt * v_next;
        let t_next = state.t + self.dt;
        if !q_next.is_finite() || !v_next.is_finite() {
            return Err(SimError::Diverged {
                t: t_next,
                q: q_next,
                v: v_next,
            });
        }
        Ok(SimState {
            t: t_next,
            q: q_next,
            v: v_next,
        })
    }

    /// Run `n_steps` from `start`, drawing forces from `source`.
    pub fn rollout(
        &self,
        start: SimState,
        source: &mut ForceSource,
        n_steps: usize,
    ) -> Result<Trajectory, SimError> {
        if n_steps == 0 {
            return Err(SimError::Scenario("n_steps must be >= 1".into()));
        }
        let mut samples = Vec::with_capacity(n_steps + 1);
        let mut state = start;
        for k in 0..n_steps {
            let (f_ext, f_hand) = source.apply(k, &state, self.dt);
            samples.push(TrajectorySample {
                t: state.t,
                q: state.q,
                v: state.v,
                f_ext,
                f_hand,
            });
            state = self.step(&state, f_ext + f_hand)?;
        }
        samples.push(TrajectorySample {
            t: state.t,
            q: state.q,
            v: state.v,
            f_ext: 0.0,
            f_hand: 0.0,
        });
        Ok(Trajectory {
            dt: self.dt,
            samples,
        })
    }
}

/// Simple comparison fields.
#[derive(Debug, Clone, PartialEq)]
pub enum BaselineSpec {
    /// Constant friction and/or damping over the full range.
    ConstantDrag { friction: f64, damping: f64 },
    /// Linear restoring force on `[a, b]`, zero at its equilibrium end.
    LinearSpring {
        a: f64,
        b: f64,
        peak: f64,
        toward_high_end: bool,
    },
}

/// Build a baseline field in physical units.
pub fn make_baseline(ctx: &JointContext, spec: &BaselineSpec) -> Result<ComposedField, SimError> {
    let refs = reference_magnitudes(ctx);
    let mut components = Vec::new();
    let source = match *spec {
        BaselineSpec::ConstantDrag { friction, damping } => {
            if friction == 0.0 && damping == 0.0 {
                return Err(SimError::Scenario(
                    "constant drag needs a nonzero friction or damping".into(),
                ));
            }
            if friction != 0.0 {
                let (c, _) = template("constant_friction_hinge")?.instantiate(
                    0.0,
                    1.0,
                    ChannelScales {
                        friction,
                        ..Default::default()
                    },
                )?;
                components
                    .push(c.with_provenance(serde_json::json!({ "baseline": "constant_drag" })));
            }
            if damping != 0.0 {
                let (c, _) = template("constant_damping_hinge")?.instantiate(
                    0.0,
                    1.0,
                    ChannelScales {
                        damping,
                        ..Default::default()
                    },
                )?;
                components
                    .push(c.with_provenance(serde_json::json!({ "baseline": "constant_drag" })));
            }
            "baseline_constant_drag"
        }
        BaselineSpec::LinearSpring {
            a,
            b,
            peak,
            toward_high_end,
        } => {
            let name = if toward_high_end {
                "spring_return_to_high_end"
            } else {
                "spring_return_to_low_end"
            };
            let (c, _) = template(name)?.instantiate(
                a,
                b,
                ChannelScales {
                    conservative: peak,
                    ..Default::default()
                },
            )?;
            components.push(c.with_provenance(serde_json::json!({ "baseline": "linear_spring" })));
            "baseline_linear_spring"
        }
    };
    Ok(ComposedField {
        components,
        joint: ctx.clone(),
        joint_limit: Default::default(),
        meta: crate::compiler::manual_meta(source, &refs),
    })
}

/// A parsed simulation scenario: initial state, force source, step count,
/// and config overrides.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub initial: SimState,
    pub n_steps: usize,
    pub source: ForceSource,
    pub config: SimConfig,
}

fn scenario_err(message: impl Into<String>) -> SimError {
    SimError::Scenario(message.into())
}

fn parse_pairs(value: &serde_json::Value, what: &str) -> Result<Vec<(f64, f64)>, SimError> {
    let array = value
        .as_array()
        .ok_or_else(|| scenario_err(format!("{what} must be an array of [t, value] pairs")))?;
    let mut out = Vec::with_capacity(array.len());
    for entry in array {
        let pair = entry
            .as_array()
            .filter(|p| p.len() == 2)
            .ok_or_else(|| scenario_err(format!("{what} entries must be [t, value] pairs")))?;
        let t = pair[0]
            .as_f64()
            .ok_or_else(|| scenario_err(format!("{what}: non-numeric time")))?;
        let v = pair[1]
            .as_f64()
            .ok_or_else(|| scenario_err(format!("{what}: non-numeric value")))?;
        if let Some(&(prev, _)) = out.last() {
            if t <= prev {
                return Err(scenario_err(format!(
                    "{what} times must be strictly increasing"
                )));
            }
        }
        out.push((t, v));
    }
    if out.is_empty() {
        return Err(scenario_err(format!("{what} must not be empty")));
    }
    Ok(out)
}

/// Parse a scenario JSON document against the field it will drive.
pub fn parse_scenario(text: &str, field: &ComposedField) -> Result<Scenario, SimError> {
    let root: serde_json::Value =
        serde_json::from_str(text).map_err(|e| scenario_err(format!("bad JSON: {e}")))?;
    let map = root
        .as_object()
        .ok_or_else(|| scenario_err("scenario must be a JSON object"))?;

    let initial_map = map
        .get("initial")
        .and_then(|v| v.as_object())
        .ok_or_else(|| scenario_err("missing initial state object"))?;
    let q = initial_map
        .get("q")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| scenario_err("initial.q must be a number"))?;
    let v = initial_map.get("v").and_then(|x| x.as_f64()).unwrap_or(0.0);
    let t = initial_map.get("t").and_then(|x| x.as_f64()).unwrap_or(0.0);

    let n_steps =
        map.get("n_steps")
            .and_then(|x| x.as_u64())
            .ok_or_else(|| scenario_err("n_steps must be a positive integer"))? as usize;
    if n_steps == 0 {
        return Err(scenario_err("n_steps must be >= 1"));
    }

    let mut config = SimConfig::default();
    if let Some(cfg) = map.get("config") {
        let cfg_map = cfg
            .as_object()
            .ok_or_else(|| scenario_err("config must be an object"))?;
        if let Some(dt) = cfg_map.get("dt") {
            config.dt = dt
                .as_f64()
                .filter(|d| *d > 0.0)
                .ok_or_else(|| scenario_err("config.dt must be a positive number"))?;
        }
        if let Some(sm) = cfg_map.get("smooth_friction") {
            config.smooth_friction = sm
                .as_bool()
                .ok_or_else(|| scenario_err("config.smooth_friction must be a boolean"))?;
        }
        if let Some(eps) = cfg_map.get("eps_v") {
            config.eps_v = Some(
                eps.as_f64()
                    .filter(|e| *e > 0.0)
                    .ok_or_else(|| scenario_err("config.eps_v must be a positive number"))?,
            );
        }
        if let Some(k) = cfg_map.get("limit_stiffness") {
            config.limit_stiffness =
                Some(k.as_f64().filter(|k| *k > 0.0).ok_or_else(|| {
                    scenario_err("config.limit_stiffness must be a positive number")
                })?);
        }
    }

    let force_value = map
        .get("force")
        .ok_or_else(|| scenario_err("missing force source"))?;
    let force_map = force_value
        .as_object()
        .ok_or_else(|| scenario_err("force must be an object"))?;
    let source = if let Some(c) = force_map.get("constant") {
        ForceSource::Constant(
            c.as_f64()
                .ok_or_else(|| scenario_err("force.constant must be a number"))?,
        )
    } else if let Some(sched) = force_map.get("schedule") {
        ForceSource::Schedule(parse_pairs(sched, "force.schedule")?)
    } else if let Some(samples) = force_map.get("samples") {
        let array = samples
            .as_array()
            .ok_or_else(|| scenario_err("force.samples must be an array"))?;
        let values = array
            .iter()
            .map(|x| {
                x.as_f64()
                    .ok_or_else(|| scenario_err("force.samples entries must be numbers"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        ForceSource::Samples(values)
    } else if let Some(hand) = force_map.get("hand") {
        let hand_map = hand
            .as_object()
            .ok_or_else(|| scenario_err("force.hand must be an object"))?;
        let commands = parse_pairs(
            hand_map
                .get("commands")
                .ok_or_else(|| scenario_err("force.hand.commands is required"))?,
            "force.hand.commands",
        )?;
        let ctx = &field.joint;
        let refs = reference_magnitudes(ctx);
        let mut controller = HandController::with_defaults(ctx, &refs);
        let read = |key: &str, slot: &mut f64| -> Result<(), SimError> {
            if let Some(v) = hand_map.get(key) {
                *slot = v
                    .as_f64()
                    .filter(|x| *x > 0.0)
                    .ok_or_else(|| scenario_err(format!("force.hand.{key} must be positive")))?;
            }
            Ok(())
        };
        read("kp", &mut controller.kp)?;
        read("kd", &mut controller.kd)?;
        read("f_max", &mut controller.f_max)?;
        read("r_max", &mut controller.r_max)?;
        ForceSource::Hand {
            commands,
            controller,
        }
    } else {
        return Err(scenario_err(
            "force must contain one of: constant, schedule, samples, hand",
        ));
    };

    Ok(Scenario {
        initial: SimState { t, q, v },
        n_steps,
        source,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::JointType;
    use crate::curve::PchipCurve;
    use crate::field::{Channel, ChannelCurves, EffectComponent};

    fn unit_ctx() -> JointContext {
        JointContext::without_gravity("a", "j", JointType::Prismatic, 0.0, 1.0, 1.0, 1.0).unwrap()
    }

    fn constant_field(ctx: &JointContext, channel: Channel, value: f64) -> ComposedField {
        let mut field = ComposedField::bare(ctx.clone());
        if value != 0.0 {
            let curve = PchipCurve::new(vec![0.0, 1.0], vec![value, value]).unwrap();
            let mut curves = ChannelCurves::default();
            curves.set(channel, Some(curve));
            field.components = vec![EffectComponent::new("c", 0.0, 1.0, curves).unwrap()];
        }
        field
    }

    #[test]
    fn free_particle_moves_uniformly() {
        // Wide range so the limit springs never engage along the path.
        let ctx =
            JointContext::without_gravity("a", "j", JointType::Prismatic, -5.0, 5.0, 1.0, 1.0)
                .unwrap();
        let field = ComposedField::bare(ctx);
        let sim = Simulator::new(&field, &SimConfig::default());
        let traj = sim
            .rollout(
                SimState {
                    t: 0.0,
                    q: -0.4,
                    v: 1.0,
                },
                &mut ForceSource::Constant(0.0),
                200,
            )
            .unwrap();
        let last = traj.samples.last().unwrap();
        assert!((last.q - 0.6).abs() < 1e-12);
        assert_eq!(last.v, 1.0);
        assert_eq!(traj.samples.len(), 201);
    }

    #[test]
    fn stiction_holds_at_rest_exactly() {
        let ctx = unit_ctx();
        let mut field = constant_field(&ctx, Channel::FrictionMax, 1.0);
        // A sub-friction conservative bias tries to push the joint.
        let bias = PchipCurve::new(vec![0.0, 1.0], vec![0.9, 0.9]).unwrap();
        let mut curves = ChannelCurves::default();
        curves.set(Channel::Conservative, Some(bias));
        field
            .components
            .push(EffectComponent::new("bias", 0.0, 1.0, curves).unwrap());

        let sim = Simulator::new(&field, &SimConfig::default());
        let mut state = SimState::at_rest(0.5);
        for _ in 0..1000 {
            state = sim.step(&state, 0.0).unwrap();
            assert_eq!(state.q.to_bits(), 0.5f64.to_bits());
            assert_eq!(state.v, 0.0);
        }
    }

    #[test]
    fn implicit_damping_is_contractive() {
        let ctx = unit_ctx();
        let field = constant_field(&ctx, Channel::Damping, 50.0);
        let sim = Simulator::new(&field, &SimConfig::default());
        let mut state = SimState {
            t: 0.0,
            q: 0.5,
            v: 2.0,
        };
        for _ in 0..100 {
            let next = sim.step(&state, 0.0).unwrap();
            assert!(next.v.abs() < state.v.abs());
            assert!(next.v >= 0.0);
            state = next;
        }
    }

    #[test]
    fn limit_force_zero_inside_spring_outside() {
        let ctx = unit_ctx();
        let field = ComposedField::bare(ctx);
        let sim = Simulator::new(&field, &SimConfig::default());
        assert_eq!(sim.limit_force(0.5, 3.0), 0.0);
        let k = sim.limit_stiffness();
        assert_eq!(sim.limit_force(-0.01, 0.0), k * 0.01);
        assert!((sim.limit_force(1.01, 0.0) + k * 0.01).abs() < 1e-9 * k);
        assert!(sim.limit_force(-0.01, -1.0) > sim.limit_force(-0.01, 0.0));
    }

    #[test]
    fn inelastic_limit_rebound_is_tiny() {
        let ctx = unit_ctx();
        // Constant pull toward the low end drives the joint into the stop.
        let gravity = PchipCurve::new(vec![0.0, 1.0], vec![-2.0, -2.0]).unwrap();
        let ctx = JointContext::new(
            "a",
            "j",
            JointType::Prismatic,
            ctx.q_min,
            ctx.q_max,
            ctx.inertia_eq,
            gravity,
            1.0,
        )
        .unwrap();
        let field = ComposedField::bare(ctx);
        let sim = Simulator::new(
            &field,
            &SimConfig {
                dt: 1e-5,
                ..Default::default()
            },
        );
        let mut state = SimState::at_rest(0.5);
        let mut impact_speed = 0.0f64;
        let mut rebound_speed = 0.0f64;
        let mut seen_contact = false;
        for _ in 0..200_000 {
            state = sim.step(&state, 0.0).unwrap();
            if state.q < 0.0 {
                seen_contact = true;
                impact_speed = impact_speed.max(state.v.abs());
            } else if seen_contact {
                rebound_speed = rebound_speed.max(state.v.max(0.0));
            }
        }
        assert!(seen_contact);
        assert!(impact_speed > 0.1);
        assert!(
            rebound_speed <= 0.05 * impact_speed,
            "rebound {rebound_speed} vs impact {impact_speed}"
        );
    }

    #[test]
    fn hand_controller_contract() {
        let ctx = unit_ctx();
        let refs = reference_magnitudes(&ctx);
        let mut hand = HandController::with_defaults(&ctx, &refs);
        let state = SimState::at_rest(0.5);
        // Command equal to the current position: no force.
        assert_eq!(hand.force(&state, 0.005, 0.5), 0.0);
        // Far command: target rate-limited, then clamped at the range end.
        let mut hand = HandController::with_defaults(&ctx, &refs);
        hand.force(&state, 0.005, 100.0);
        let after_one = hand.target().unwrap();
        assert!((after_one - (0.5 + hand.r_max * 0.005)).abs() < 1e-15);
        for _ in 0..10_000 {
            hand.force(&state, 0.005, 100.0);
        }
        assert_eq!(hand.target().unwrap(), 1.0);
        // Saturation under a huge gain.
        let mut hand = HandController::new(1e12, 1.0, 2.0, 10.0, 0.0, 1.0).unwrap();
        let force = hand.force(&state, 0.005, 1.0);
        assert_eq!(force, 2.0);
    }

    #[test]
    fn constant_drag_baseline() {
        let ctx = unit_ctx();
        let field = make_baseline(
            &ctx,
            &BaselineSpec::ConstantDrag {
                friction: 1.0,
                damping: 0.0,
            },
        )
        .unwrap();
        for i in 0..=10 {
            let sample = field.eval(i as f64 / 10.0);
            assert_eq!(sample.friction_max, 1.0);
            assert_eq!(sample.conservative, 0.0);
        }
        assert!(matches!(
            make_baseline(
                &ctx,
                &BaselineSpec::ConstantDrag {
                    friction: 0.0,
                    damping: 0.0
                }
            ),
            Err(SimError::Scenario(_))
        ));
    }

    #[test]
    fn linear_spring_baseline_is_exactly_linear() {
        let ctx = unit_ctx();
        let peak = 2.0;
        let field = make_baseline(
            &ctx,
            &BaselineSpec::LinearSpring {
                a: 0.0,
                b: 1.0,
                peak,
                toward_high_end: false,
            },
        )
        .unwrap();
        for i in 0..=100 {
            let s = i as f64 / 100.0;
            let expect = -peak * s;
            assert!((field.eval(s).conservative - expect).abs() < 1e-12);
        }
        assert_eq!(field.eval(0.0).conservative, 0.0);
    }

    #[test]
    fn released_inside_detent_center_stays_fixed() {
        let ctx = unit_ctx();
        let tpl = template("detent_internal").unwrap();
        let (comp, _) = tpl
            .instantiate(
                0.3,
                0.7,
                ChannelScales {
                    conservative: 2.0,
                    friction: 0.5,
                    ..Default::default()
                },
            )
            .unwrap();
        let mut field = ComposedField::bare(ctx);
        field.components = vec![comp];
        let sim = Simulator::new(&field, &SimConfig::default());
        let mut state = SimState::at_rest(0.5);
        for _ in 0..2000 {
            state = sim.step(&state, 0.0).unwrap();
        }
        assert_eq!(state.q, 0.5);
        assert_eq!(state.v, 0.0);
    }

    #[test]
    fn smooth_mode_tracks_hard_mode() {
        let ctx = unit_ctx();
        let refs = reference_magnitudes(&ctx);
        let tpl = template("spring_return_to_low_end").unwrap();
        let (comp, _) = tpl
            .instantiate(
                0.0,
                1.0,
                ChannelScales {
                    conservative: refs.f_ref,
                    friction: 0.5 * refs.f_ref,
                    ..Default::default()
                },
            )
            .unwrap();
        let mut field = ComposedField::bare(ctx);
        field.components = vec![comp];

        let hard = Simulator::new(&field, &SimConfig::default());
        let smooth = Simulator::new(
            &field,
            &SimConfig {
                smooth_friction: true,
                eps_v: Some(1e-4 * refs.v_ref),
                ..Default::default()
            },
        );
        let start = SimState::at_rest(0.9);
        let th = hard
            .rollout(start, &mut ForceSource::Constant(0.0), 1000)
            .unwrap();
        let ts = smooth
            .rollout(start, &mut ForceSource::Constant(0.0), 1000)
            .unwrap();
        let max_gap = th
            .samples
            .iter()
            .zip(&ts.samples)
            .map(|(a, b)| (a.q - b.q).abs())
            .fold(0.0f64, f64::max);
        assert!(max_gap < 1e-2, "max gap {max_gap}");
    }

    #[test]
    fn rollouts_are_bit_reproducible() {
        let ctx = unit_ctx();
        let tpl = template("bistable_mechanism").unwrap();
        let (comp, _) = tpl
            .instantiate(
                0.0,
                1.0,
                ChannelScales {
                    conservative: 1.5,
                    friction: 0.2,
                    damping: 0.3,
                },
            )
            .unwrap();
        let mut field = ComposedField::bare(ctx);
        field.components = vec![comp];
        let sim = Simulator::new(&field, &SimConfig::default());
        let start = SimState {
            t: 0.0,
            q: 0.4,
            v: 0.3,
        };
        let a = sim
            .rollout(start, &mut ForceSource::Constant(0.1), 500)
            .unwrap();
        let b = sim
            .rollout(start, &mut ForceSource::Constant(0.1), 500)
            .unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.q.to_bits(), y.q.to_bits());
            assert_eq!(x.v.to_bits(), y.v.to_bits());
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ctx = unit_ctx();
        let field = ComposedField::bare(ctx);
        let sim = Simulator::new(&field, &SimConfig::default());
        let traj = sim
            .rollout(
                SimState {
                    t: 0.0,
                    q: 0.123456789,
                    v: -0.7,
                },
                &mut ForceSource::Schedule(vec![(0.0, 0.25), (0.3, -0.5)]),
                100,
            )
            .unwrap();
        let csv = traj.to_csv();
        assert!(csv.starts_with("t,q,v,f_ext,f_hand\n"));
        let parsed = Trajectory::from_csv(&csv).unwrap();
        assert_eq!(parsed.samples.len(), traj.samples.len());
        for (a, b) in traj.samples.iter().zip(&parsed.samples) {
            assert_eq!(a.q.to_bits(), b.q.to_bits());
            assert_eq!(a.v.to_bits(), b.v.to_bits());
            assert_eq!(a.f_ext.to_bits(), b.f_ext.to_bits());
        }
        assert!(Trajectory::from_csv("nope\n1,2,3,4,5\n").is_err());
    }

    #[test]
    fn schedule_holds_last_value() {
        let points = vec![(0.0, 1.0), (1.0, 2.0)];
        assert_eq!(hold(&points, -0.5), 0.0);
        assert_eq!(hold(&points, 0.0), 1.0);
        assert_eq!(hold(&points, 0.999), 1.0);
        assert_eq!(hold(&points, 1.0), 2.0);
        assert_eq!(hold(&points, 5.0), 2.0);
    }

    #[test]
    fn scenario_parsing() {
        let ctx = unit_ctx();
        let field = ComposedField::bare(ctx);
        let scenario = parse_scenario(
            r#"{
                "initial": { "q": 0.2, "v": 0.1 },
                "n_steps": 50,
                "force": { "hand": { "commands": [[0.0, 0.2], [0.5, 0.9]], "kp": 11.0 } },
                "config": { "dt": 0.01, "smooth_friction": true }
            }"#,
            &field,
        )
        .unwrap();
        assert_eq!(scenario.n_steps, 50);
        assert_eq!(scenario.config.dt, 0.01);
        assert!(scenario.config.smooth_friction);
        match &scenario.source {
            ForceSource::Hand {
                controller,
                commands,
            } => {
                assert_eq!(controller.kp, 11.0);
                assert_eq!(commands.len(), 2);
            }
            other => panic!("unexpected source {other:?}"),
        }

        assert!(parse_scenario(
            r#"{ "initial": { "q": 0 }, "n_steps": 0, "force": { "constant": 1 } }"#,
            &field
        )
        .is_err());
        assert!(parse_scenario(
            r#"{ "initial": { "q": 0 }, "n_steps": 5, "force": {} }"#,
            &field
        )
        .is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let ctx = unit_ctx();
        let field = ComposedField::bare(ctx);
        // An absurd timestep with the stiff limit spring explodes once the
        // state leaves the range.
        let sim = Simulator::new(
            &field,
            &SimConfig {
                dt: 10.0,
                ..Default::default()
            },
        );
        let mut state = SimState {
            t: 0.0,
            q: 2.0,
            v: 0.0,
        };
        let mut diverged = false;
        for _ in 0..100 {
            match sim.step(&state, 0.0) {
                Ok(next) => state = next,
                Err(SimError::Diverged { .. }) => {
                    diverged = true;
                    break;
                }
                Err(other) => panic!("unexpected error {other}"),
            }
        }
        assert!(diverged);
    }
}
