//! Three-channel joint fields composed from interval-local effect components.
//!
//! A field maps the normalized joint coordinate `s ∈ [0, 1]` to a
//! conservative generalized force, a dry-friction magnitude cap, and a
//! viscous damping coefficient. Components contribute on their active
//! interval only; conservative and damping contributions superpose while the
//! strongest dry-contact interface governs friction.

use std::sync::OnceLock;

use serde_json::Value;
use thiserror::Error;

use crate::compiler::JointContext;
use crate::curve::{CurveError, PchipCurve};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum FieldError {
    #[error("degenerate joint range: q_min={q_min}, q_max={q_max}")]
    DegenerateRange { q_min: f64, q_max: f64 },
    #[error("invalid active interval [{a}, {b}]: need 0 <= a < b <= 1")]
    InvalidInterval { a: f64, b: f64 },
    #[error("{channel} knot value {value} must be >= 0")]
    NegativeKnot { channel: &'static str, value: f64 },
    #[error("component curve must span local [0, 1], got [{start}, {end}]")]
    LocalSpan { start: f64, end: f64 },
    #[error("unknown template {name:?}; valid names: {valid}")]
    UnknownTemplate { name: String, valid: String },
    #[error("invalid {channel} scale {value}")]
    InvalidScale { channel: &'static str, value: f64 },
    #[error("invalid joint context: {0}")]
    InvalidContext(String),
    #[error(transparent)]
    Curve(#[from] CurveError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    Conservative,
    FrictionMax,
    Damping,
}

impl Channel {
    pub const ALL: [Channel; 3] = [
        Channel::Conservative,
        Channel::FrictionMax,
        Channel::Damping,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Conservative => "conservative",
            Channel::FrictionMax => "friction",
            Channel::Damping => "damping",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "conservative" => Some(Channel::Conservative),
            "friction" => Some(Channel::FrictionMax),
            "damping" => Some(Channel::Damping),
            _ => None,
        }
    }

    /// Dry friction and damping magnitudes are physically nonnegative.
    pub fn requires_nonnegative(self) -> bool {
        !matches!(self, Channel::Conservative)
    }
}

/// Map the joint coordinate to the normalized field coordinate, clamped.
pub fn normalize_s(q: f64, q_min: f64, q_max: f64) -> Result<f64, FieldError> {
    // NaN bounds compare as not-greater and are rejected alongside q_max ≤ q_min.
    if q_max.partial_cmp(&q_min) != Some(std::cmp::Ordering::Greater) {
        return Err(FieldError::DegenerateRange { q_min, q_max });
    }
    Ok(((q - q_min) / (q_max - q_min)).clamp(0.0, 1.0))
}

/// Optional per-channel curves of one component, in local coordinates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChannelCurves {
    pub conservative: Option<PchipCurve>,
    pub friction: Option<PchipCurve>,
    pub damping: Option<PchipCurve>,
}

impl ChannelCurves {
    pub fn get(&self, channel: Channel) -> Option<&PchipCurve> {
        match channel {
            Channel::Conservative => self.conservative.as_ref(),
            Channel::FrictionMax => self.friction.as_ref(),
            Channel::Damping => self.damping.as_ref(),
        }
    }

    pub fn set(&mut self, channel: Channel, curve: Option<PchipCurve>) {
        match channel {
            Channel::Conservative => self.conservative = curve,
            Channel::FrictionMax => self.friction = curve,
            Channel::Damping => self.damping = curve,
        }
    }
}

/// One effect placed on an active interval of the joint range.
///
/// Curves live in the local coordinate `u = (s − a)/(b − a)` and must span
/// exactly [0, 1]; outside `[a, b]` the component contributes nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectComponent {
    effect_name: String,
    a: f64,
    b: f64,
    curves: ChannelCurves,
    provenance: Value,
}

impl EffectComponent {
    pub fn new(
        effect_name: impl Into<String>,
        a: f64,
        b: f64,
        curves: ChannelCurves,
    ) -> Result<Self, FieldError> {
        if !a.is_finite() || !b.is_finite() || !(0.0..=1.0).contains(&a) || a >= b || b > 1.0 {
            return Err(FieldError::InvalidInterval { a, b });
        }
        for channel in Channel::ALL {
            let Some(curve) = curves.get(channel) else {
                continue;
            };
            let (lo, hi) = curve.span();
            if lo != 0.0 || hi != 1.0 {
                return Err(FieldError::LocalSpan { start: lo, end: hi });
            }
            if channel.requires_nonnegative() {
                if let Some(&bad) = curve.ys().iter().find(|y| **y < 0.0) {
                    return Err(FieldError::NegativeKnot {
                        channel: channel.as_str(),
                        value: bad,
                    });
                }
            }
        }
        Ok(Self {
            effect_name: effect_name.into(),
            a,
            b,
            curves,
            provenance: Value::Object(serde_json::Map::new()),
        })
    }

    pub fn with_provenance(mut self, provenance: Value) -> Self {
        self.provenance = provenance;
        self
    }

    /// Rebuild with different knot values on one channel (same knot count).
    pub fn with_curve_values(&self, channel: Channel, ys: Vec<f64>) -> Result<Self, FieldError> {
        let current = self.curves.get(channel).ok_or(FieldError::InvalidScale {
            channel: channel.as_str(),
            value: f64::NAN,
        })?;
        let mut curves = self.curves.clone();
        curves.set(channel, Some(current.with_values(ys)?));
        let mut next = Self::new(self.effect_name.clone(), self.a, self.b, curves)?;
        next.provenance = self.provenance.clone();
        Ok(next)
    }

    /// Rebuild on a different active interval.
    pub fn with_interval(&self, a: f64, b: f64) -> Result<Self, FieldError> {
        let mut next = Self::new(self.effect_name.clone(), a, b, self.curves.clone())?;
        next.provenance = self.provenance.clone();
        Ok(next)
    }

    pub fn effect_name(&self) -> &str {
        &self.effect_name
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn curve(&self, channel: Channel) -> Option<&PchipCurve> {
        self.curves.get(channel)
    }

    pub fn provenance(&self) -> &Value {
        &self.provenance
    }

    /// True when no channel carries a curve.
    pub fn is_inert(&self) -> bool {
        Channel::ALL.iter().all(|&c| self.curves.get(c).is_none())
    }

    /// Local coordinate of `s` within the active interval.
    pub fn local(&self, s: f64) -> f64 {
        (s - self.a) / (self.b - self.a)
    }

    /// Channel contribution at `s`; zero outside the active interval.
    pub fn eval(&self, channel: Channel, s: f64) -> f64 {
        if s < self.a || s > self.b {
            return 0.0;
        }
        match self.curves.get(channel) {
            Some(curve) => curve.eval_clamped(self.local(s)),
            None => 0.0,
        }
    }

    /// Spatial slope of the channel contribution with respect to `s`.
    pub fn eval_dx(&self, channel: Channel, s: f64) -> f64 {
        if s < self.a || s > self.b {
            return 0.0;
        }
        match self.curves.get(channel) {
            Some(curve) => curve.eval_dx_clamped(self.local(s)) / (self.b - self.a),
            None => 0.0,
        }
    }
}

/// Which side of the joint range the limit hint addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LimitSide {
    LowEnd,
    HighEnd,
    None,
}

impl LimitSide {
    pub fn as_str(self) -> &'static str {
        match self {
            LimitSide::LowEnd => "low_end",
            LimitSide::HighEnd => "high_end",
            LimitSide::None => "none",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "low_end" => Some(LimitSide::LowEnd),
            "high_end" => Some(LimitSide::HighEnd),
            "none" => Some(LimitSide::None),
            _ => None,
        }
    }
}

/// Qualitative bounce behavior at the hinted limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Elasticity {
    None,
    Weak,
    Medium,
    Strong,
}

impl Elasticity {
    pub fn as_str(self) -> &'static str {
        match self {
            Elasticity::None => "none",
            Elasticity::Weak => "weak",
            Elasticity::Medium => "medium",
            Elasticity::Strong => "strong",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "none" => Some(Elasticity::None),
            "weak" => Some(Elasticity::Weak),
            "medium" => Some(Elasticity::Medium),
            "strong" => Some(Elasticity::Strong),
            _ => None,
        }
    }

    /// Contact damping ratio: no elasticity means critically damped.
    pub fn damping_ratio(self) -> f64 {
        match self {
            Elasticity::None => 1.0,
            Elasticity::Weak => 0.7,
            Elasticity::Medium => 0.4,
            Elasticity::Strong => 0.15,
        }
    }
}

/// Limit-contact behavior derived from the proposal hint.
///
/// `damping_ratio` starts at the elasticity mapping but is independently
/// adjustable (refinement may move it off the canonical values).
#[derive(Debug, Clone, PartialEq)]
pub struct JointLimitHint {
    pub selected_side: LimitSide,
    pub elasticity: Elasticity,
    pub damping_ratio: f64,
}

impl JointLimitHint {
    pub fn new(selected_side: LimitSide, elasticity: Elasticity) -> Self {
        Self {
            selected_side,
            elasticity,
            damping_ratio: elasticity.damping_ratio(),
        }
    }
}

impl Default for JointLimitHint {
    fn default() -> Self {
        Self::new(LimitSide::None, Elasticity::None)
    }
}

/// Field values at one position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub conservative: f64,
    pub friction_max: f64,
    pub damping: f64,
}

/// The complete three-channel model for one joint.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedField {
    pub components: Vec<EffectComponent>,
    pub joint: JointContext,
    pub joint_limit: JointLimitHint,
    pub meta: Value,
}

impl ComposedField {
    /// Field with no components and placeholder metadata, for assembling
    /// fields by hand.
    pub fn bare(joint: JointContext) -> Self {
        Self {
            components: Vec::new(),
            joint,
            joint_limit: JointLimitHint::default(),
            meta: serde_json::json!({ "source": "manual" }),
        }
    }

    /// Evaluate all three channels at `s` (clamped to [0, 1]).
    ///
    /// Conservative and damping contributions sum in component order;
    /// friction takes the maximum contribution, floored at zero.
    pub fn eval(&self, s: f64) -> FieldSample {
        let s = s.clamp(0.0, 1.0);
        let mut conservative = 0.0;
        let mut friction_max = 0.0f64;
        let mut damping = 0.0;
        for component in &self.components {
            conservative += component.eval(Channel::Conservative, s);
            friction_max = friction_max.max(component.eval(Channel::FrictionMax, s));
            damping += component.eval(Channel::Damping, s);
        }
        FieldSample {
            conservative,
            friction_max: friction_max.max(0.0),
            damping: damping.max(0.0),
        }
    }

    /// Slope of the summed conservative channel at `s`.
    pub fn conservative_slope(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, 1.0);
        self.components
            .iter()
            .map(|c| c.eval_dx(Channel::Conservative, s))
            .sum()
    }
}

/// A named prototype behavior with unit-peak channel curves.
#[derive(Debug, Clone)]
pub struct Template {
    name: &'static str,
    description: &'static str,
    placement_prior: &'static str,
    curves: ChannelCurves,
}

/// Physical per-channel scales for instantiating a template; zero omits the
/// channel.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ChannelScales {
    pub conservative: f64,
    pub friction: f64,
    pub damping: f64,
}

impl ChannelScales {
    pub fn get(self, channel: Channel) -> f64 {
        match channel {
            Channel::Conservative => self.conservative,
            Channel::FrictionMax => self.friction,
            Channel::Damping => self.damping,
        }
    }

    pub fn set(&mut self, channel: Channel, scale: f64) {
        match channel {
            Channel::Conservative => self.conservative = scale,
            Channel::FrictionMax => self.friction = scale,
            Channel::Damping => self.damping = scale,
        }
    }
}

impl Template {
    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn description(&self) -> &'static str {
        self.description
    }

    pub fn placement_prior(&self) -> &'static str {
        self.placement_prior
    }

    pub fn prototype(&self, channel: Channel) -> Option<&PchipCurve> {
        self.curves.get(channel)
    }

    pub fn supported_channels(&self) -> Vec<Channel> {
        Channel::ALL
            .into_iter()
            .filter(|&c| self.curves.get(c).is_some())
            .collect()
    }

    /// Place the template on `[a, b]` with physical channel scales.
    ///
    /// Zero scales omit the channel; nonzero scales on unsupported channels
    /// are dropped with a warning. The returned component may be inert when
    /// every requested channel was zero or unsupported.
    pub fn instantiate(
        &self,
        a: f64,
        b: f64,
        scales: ChannelScales,
    ) -> Result<(EffectComponent, Vec<String>), FieldError> {
        let mut curves = ChannelCurves::default();
        let mut warnings = Vec::new();
        for channel in Channel::ALL {
            let scale = scales.get(channel);
            if !scale.is_finite() || (channel.requires_nonnegative() && scale < 0.0) {
                return Err(FieldError::InvalidScale {
                    channel: channel.as_str(),
                    value: scale,
                });
            }
            if scale == 0.0 {
                continue;
            }
            let Some(prototype) = self.curves.get(channel) else {
                warnings.push(format!(
                    "{}: {} channel unsupported; dropped scale {}",
                    self.name,
                    channel.as_str(),
                    scale
                ));
                continue;
            };
            let ys = prototype.ys().iter().map(|y| y * scale).collect();
            curves.set(channel, Some(prototype.with_values(ys)?));
        }
        let component = EffectComponent::new(self.name, a, b, curves)?;
        Ok((component, warnings))
    }
}

fn unit_curve(points: &[(f64, f64)]) -> PchipCurve {
    let xs = points.iter().map(|p| p.0).collect();
    let ys = points.iter().map(|p| p.1).collect();
    PchipCurve::new(xs, ys).expect("prototype knots are valid")
}

/// Mirror a prototype about u = 0.5 with the sign flipped.
fn mirrored(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    points.iter().rev().map(|&(x, y)| (1.0 - x, -y)).collect()
}

fn make_template(
    name: &'static str,
    description: &'static str,
    placement_prior: &'static str,
    conservative: Option<&[(f64, f64)]>,
    friction: bool,
    damping: bool,
) -> Template {
    const CONSTANT_ONE: [(f64, f64); 2] = [(0.0, 1.0), (1.0, 1.0)];
    Template {
        name,
        description,
        placement_prior,
        curves: ChannelCurves {
            conservative: conservative.map(unit_curve),
            friction: friction.then(|| unit_curve(&CONSTANT_ONE)),
            damping: damping.then(|| unit_curve(&CONSTANT_ONE)),
        },
    }
}

static TEMPLATES: OnceLock<Vec<Template>> = OnceLock::new();

/// The fixed 13-entry effect vocabulary.
pub fn list_templates() -> &'static [Template] {
    TEMPLATES.get_or_init(build_templates)
}

fn build_templates() -> Vec<Template> {
    const CONSTANT_POS: [(f64, f64); 2] = [(0.0, 1.0), (1.0, 1.0)];
    const CONSTANT_NEG: [(f64, f64); 2] = [(0.0, -1.0), (1.0, -1.0)];
    const DETENT: [(f64, f64); 5] = [
        (0.0, 0.0),
        (0.25, 1.0),
        (0.5, 0.0),
        (0.75, -1.0),
        (1.0, 0.0),
    ];
    const BISTABLE: [(f64, f64); 5] = [
        (0.0, 0.0),
        (0.25, -1.0),
        (0.5, 0.0),
        (0.75, 1.0),
        (1.0, 0.0),
    ];
    const BISTABLE_INTERNAL: [(f64, f64); 9] = [
        (0.0, 0.7),
        (0.12, 1.0),
        (0.25, 0.0),
        (0.375, -1.0),
        (0.5, 0.0),
        (0.625, 1.0),
        (0.75, 0.0),
        (0.88, -1.0),
        (1.0, -0.7),
    ];
    const MAGNET_LOW: [(f64, f64); 4] = [(0.0, -1.0), (0.35, -0.3), (0.7, -0.05), (1.0, 0.0)];
    const SPRING_LOW: [(f64, f64); 2] = [(0.0, 0.0), (1.0, -1.0)];
    const SNAP_LOW: [(f64, f64); 5] = [
        (0.0, -1.0),
        (0.35, -0.8),
        (0.5, 0.0),
        (0.7, 0.6),
        (1.0, 0.0),
    ];
    let magnet_high = mirrored(&MAGNET_LOW);
    let spring_high = mirrored(&SPRING_LOW);
    let snap_high = mirrored(&SNAP_LOW);

    vec![
        make_template(
            "constant_friction_hinge",
            "Constant dry friction resisting motion in both directions.",
            "usually the full range",
            None,
            true,
            false,
        ),
        make_template(
            "constant_damping_hinge",
            "Constant viscous damping proportional to joint speed.",
            "usually the full range",
            None,
            false,
            true,
        ),
        make_template(
            "constant_positive_conservative_hinge",
            "Constant force driving the joint toward the high end.",
            "wherever the bias acts",
            Some(&CONSTANT_POS),
            false,
            false,
        ),
        make_template(
            "constant_negative_conservative_hinge",
            "Constant force driving the joint toward the low end.",
            "wherever the bias acts",
            Some(&CONSTANT_NEG),
            false,
            false,
        ),
        make_template(
            "detent_internal",
            "Detent holding the joint at the interval center.",
            "a narrow interval around the rest point",
            Some(&DETENT),
            true,
            true,
        ),
        make_template(
            "bistable_mechanism",
            "Barrier at the interval center pushing toward either end.",
            "the interval spanning the toggle",
            Some(&BISTABLE),
            true,
            true,
        ),
        make_template(
            "bistable_mechanism_internal",
            "Two interior rest points separated by a central barrier.",
            "the interval covering both rest points",
            Some(&BISTABLE_INTERNAL),
            true,
            true,
        ),
        make_template(
            "magnetic_return_to_low_end",
            "Strong pull toward the low end that decays with distance.",
            "a short interval at the low end",
            Some(&MAGNET_LOW),
            true,
            true,
        ),
        make_template(
            "magnetic_return_to_high_end",
            "Strong pull toward the high end that decays with distance.",
            "a short interval at the high end",
            Some(&magnet_high),
            true,
            true,
        ),
        make_template(
            "spring_return_to_low_end",
            "Linear restoring force toward the low end.",
            "the full range the spring acts over",
            Some(&SPRING_LOW),
            true,
            true,
        ),
        make_template(
            "spring_return_to_high_end",
            "Linear restoring force toward the high end.",
            "the full range the spring acts over",
            Some(&spring_high),
            true,
            true,
        ),
        make_template(
            "spring_loaded_snap_detent_to_low_end",
            "Snap-in latch near the low end: pull-in region, then a resisting barrier.",
            "an interval starting at the low end",
            Some(&SNAP_LOW),
            true,
            true,
        ),
        make_template(
            "spring_loaded_snap_detent_to_high_end",
            "Snap-in latch near the high end: resisting barrier, then a pull-in region.",
            "an interval ending at the high end",
            Some(&snap_high),
            true,
            true,
        ),
    ]
}

/// Look up a template by name.
pub fn template(name: &str) -> Result<&'static Template, FieldError> {
    list_templates()
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| FieldError::UnknownTemplate {
            name: name.to_string(),
            valid: list_templates()
                .iter()
                .map(|t| t.name)
                .collect::<Vec<_>>()
                .join(", "),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::JointType;

    fn test_ctx() -> JointContext {
        JointContext::without_gravity("a", "j", JointType::Revolute, 0.0, 1.0, 0.5, 1.0).unwrap()
    }

    fn constant_component(channel: Channel, a: f64, b: f64, value: f64) -> EffectComponent {
        let curve = PchipCurve::new(vec![0.0, 1.0], vec![value, value]).unwrap();
        let mut curves = ChannelCurves::default();
        curves.set(channel, Some(curve));
        EffectComponent::new("test", a, b, curves).unwrap()
    }

    #[test]
    fn normalize_s_basics() {
        assert_eq!(normalize_s(0.0, 0.0, 2.0).unwrap(), 0.0);
        assert_eq!(normalize_s(2.0, 0.0, 2.0).unwrap(), 1.0);
        assert_eq!(normalize_s(0.5, 0.0, 2.0).unwrap(), 0.25);
        assert_eq!(normalize_s(-1.0, 0.0, 2.0).unwrap(), 0.0);
        assert_eq!(normalize_s(5.0, 0.0, 2.0).unwrap(), 1.0);
        assert!(matches!(
            normalize_s(0.0, 1.0, 1.0),
            Err(FieldError::DegenerateRange { .. })
        ));
    }

    #[test]
    fn component_contributes_zero_outside_interval() {
        let c = constant_component(Channel::FrictionMax, 0.2, 0.8, 1.0);
        for channel in Channel::ALL {
            assert_eq!(c.eval(channel, 0.1), 0.0);
            assert_eq!(c.eval(channel, 0.9), 0.0);
        }
        assert_eq!(c.eval(Channel::FrictionMax, 0.5), 1.0);
        assert_eq!(c.eval(Channel::FrictionMax, 0.2), 1.0); // u = 0 at s = a
    }

    #[test]
    fn component_validation() {
        let curve = PchipCurve::new(vec![0.0, 1.0], vec![1.0, 1.0]).unwrap();
        let mut curves = ChannelCurves::default();
        curves.set(Channel::FrictionMax, Some(curve.clone()));
        assert!(matches!(
            EffectComponent::new("x", 0.8, 0.2, curves.clone()),
            Err(FieldError::InvalidInterval { .. })
        ));

        let negative = PchipCurve::new(vec![0.0, 1.0], vec![-0.5, 1.0]).unwrap();
        let mut curves = ChannelCurves::default();
        curves.set(Channel::FrictionMax, Some(negative));
        assert!(matches!(
            EffectComponent::new("x", 0.0, 1.0, curves),
            Err(FieldError::NegativeKnot { .. })
        ));

        let short = PchipCurve::new(vec![0.2, 0.8], vec![0.0, 1.0]).unwrap();
        let mut curves = ChannelCurves::default();
        curves.set(Channel::Conservative, Some(short));
        assert!(matches!(
            EffectComponent::new("x", 0.0, 1.0, curves),
            Err(FieldError::LocalSpan { .. })
        ));
    }

    #[test]
    fn field_eval_composition_rules() {
        let mut field = ComposedField::bare(test_ctx());
        let sample = field.eval(0.5);
        assert_eq!(
            (sample.conservative, sample.friction_max, sample.damping),
            (0.0, 0.0, 0.0)
        );

        field.components = vec![
            constant_component(Channel::FrictionMax, 0.0, 1.0, 1.0),
            constant_component(Channel::FrictionMax, 0.0, 1.0, 2.0),
            constant_component(Channel::Conservative, 0.0, 1.0, 1.0),
            constant_component(Channel::Conservative, 0.0, 1.0, -0.4),
            constant_component(Channel::Damping, 0.0, 1.0, 0.3),
            constant_component(Channel::Damping, 0.0, 1.0, 0.7),
        ];
        let sample = field.eval(0.5);
        assert_eq!(sample.friction_max, 2.0);
        assert!((sample.conservative - 0.6).abs() < 1e-15);
        assert!((sample.damping - 1.0).abs() < 1e-15);
    }

    #[test]
    fn registry_has_exactly_the_thirteen_names() {
        let names: Vec<&str> = list_templates().iter().map(|t| t.name()).collect();
        assert_eq!(
            names,
            vec![
                "constant_friction_hinge",
                "constant_damping_hinge",
                "constant_positive_conservative_hinge",
                "constant_negative_conservative_hinge",
                "detent_internal",
                "bistable_mechanism",
                "bistable_mechanism_internal",
                "magnetic_return_to_low_end",
                "magnetic_return_to_high_end",
                "spring_return_to_low_end",
                "spring_return_to_high_end",
                "spring_loaded_snap_detent_to_low_end",
                "spring_loaded_snap_detent_to_high_end",
            ]
        );
        assert!(template("spring_loaded_snap_detent_to_low_end").is_ok());
        assert!(matches!(
            template("nope"),
            Err(FieldError::UnknownTemplate { .. })
        ));
    }

    #[test]
    fn every_prototype_peaks_at_one() {
        for tpl in list_templates() {
            assert!(!tpl.supported_channels().is_empty());
            for channel in tpl.supported_channels() {
                let proto = tpl.prototype(channel).unwrap();
                let knot_peak = proto.ys().iter().fold(0.0f64, |m, y| m.max(y.abs()));
                assert_eq!(knot_peak, 1.0, "{} {:?}", tpl.name(), channel);
                let mut dense_peak = 0.0f64;
                for i in 0..=1000 {
                    dense_peak = dense_peak.max(proto.eval_clamped(i as f64 / 1000.0).abs());
                }
                assert!(dense_peak <= 1.0 + 1e-12, "{} {:?}", tpl.name(), channel);
            }
        }
    }

    #[test]
    fn high_end_templates_mirror_low_end_ones() {
        let pairs = [
            ("magnetic_return_to_low_end", "magnetic_return_to_high_end"),
            ("spring_return_to_low_end", "spring_return_to_high_end"),
            (
                "spring_loaded_snap_detent_to_low_end",
                "spring_loaded_snap_detent_to_high_end",
            ),
        ];
        for (low_name, high_name) in pairs {
            let low = template(low_name)
                .unwrap()
                .prototype(Channel::Conservative)
                .unwrap();
            let high = template(high_name)
                .unwrap()
                .prototype(Channel::Conservative)
                .unwrap();
            for i in 0..=1000 {
                let u = i as f64 / 1000.0;
                let mirrored = -low.eval_clamped(1.0 - u);
                assert!(
                    (high.eval_clamped(u) - mirrored).abs() < 1e-12,
                    "{high_name} at u={u}"
                );
            }
        }
    }

    #[test]
    fn instantiate_scales_prototypes() {
        let tpl = template("spring_return_to_low_end").unwrap();
        let (comp, warnings) = tpl
            .instantiate(
                0.0,
                1.0,
                ChannelScales {
                    conservative: 5.0,
                    ..Default::default()
                },
            )
            .unwrap();
        assert!(warnings.is_empty());
        assert_eq!(
            comp.curve(Channel::Conservative).unwrap().ys(),
            &[0.0, -5.0]
        );
        assert!(comp.curve(Channel::FrictionMax).is_none());
    }

    #[test]
    fn instantiate_constant_friction() {
        let tpl = template("constant_friction_hinge").unwrap();
        let (comp, warnings) = tpl
            .instantiate(
                0.1,
                0.9,
                ChannelScales {
                    friction: 2.0,
                    ..Default::default()
                },
            )
            .unwrap();
        assert!(warnings.is_empty());
        for i in 0..=10 {
            let s = 0.1 + 0.8 * i as f64 / 10.0;
            assert_eq!(comp.eval(Channel::FrictionMax, s), 2.0);
        }
    }

    #[test]
    fn instantiate_warns_on_unsupported_channel() {
        let tpl = template("constant_friction_hinge").unwrap();
        let (comp, warnings) = tpl
            .instantiate(
                0.0,
                1.0,
                ChannelScales {
                    conservative: 3.0,
                    ..Default::default()
                },
            )
            .unwrap();
        assert!(comp.curve(Channel::Conservative).is_none());
        assert!(comp.is_inert());
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("conservative"));
    }

    #[test]
    fn instantiate_rejects_negative_friction_scale() {
        let tpl = template("detent_internal").unwrap();
        let result = tpl.instantiate(
            0.0,
            1.0,
            ChannelScales {
                friction: -1.0,
                ..Default::default()
            },
        );
        assert!(matches!(result, Err(FieldError::InvalidScale { .. })));
    }

    #[test]
    fn editing_a_component_is_local() {
        let mut field = ComposedField::bare(test_ctx());
        field.components = vec![
            constant_component(Channel::Conservative, 0.0, 0.5, 1.0),
            constant_component(Channel::Conservative, 0.5, 1.0, 2.0),
        ];
        let baseline: Vec<f64> = (0..=1000)
            .map(|i| field.eval(i as f64 / 1000.0).conservative)
            .collect();
        field.components[1] = field.components[1]
            .with_curve_values(Channel::Conservative, vec![3.0, 3.0])
            .unwrap();
        for (i, &before) in baseline.iter().enumerate() {
            let s = i as f64 / 1000.0;
            let now = field.eval(s).conservative;
            if s < 0.5 {
                assert_eq!(now.to_bits(), before.to_bits());
            }
        }
        assert_eq!(field.eval(0.75).conservative, 3.0);
    }

    #[test]
    fn conservative_slope_matches_finite_difference() {
        let tpl = template("detent_internal").unwrap();
        let (comp, _) = tpl
            .instantiate(
                0.2,
                0.8,
                ChannelScales {
                    conservative: 2.0,
                    ..Default::default()
                },
            )
            .unwrap();
        let mut field = ComposedField::bare(test_ctx());
        field.components = vec![comp];
        let h = 1e-6;
        // Sample between knots: central differences lose accuracy where the
        // second derivative jumps.
        for i in 20..80 {
            let s = (i as f64 + 0.5) / 100.0;
            let fd = (field.eval(s + h).conservative - field.eval(s - h).conservative) / (2.0 * h);
            let an = field.conservative_slope(s);
            assert!((an - fd).abs() < 1e-5 * fd.abs().max(1.0), "at s={s}");
        }
    }
}
