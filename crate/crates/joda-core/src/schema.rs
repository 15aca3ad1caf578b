//! JSON surfaces: proposal documents, raw control-point proposals, joint
//! context files, and the canonical composed-field format.
//!
//! Composed fields serialize to a canonical form — lexicographically sorted
//! keys, shortest round-trip decimals, two-space indentation, trailing
//! newline — so identical fields are byte-identical on disk. Validation is
//! total: every input either parses or yields an error naming the failing
//! JSON path.

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::compiler::{JointContext, JointType};
use crate::curve::PchipCurve;
use crate::field::{
    Channel, ChannelCurves, ComposedField, EffectComponent, Elasticity, JointLimitHint, LimitSide,
};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SchemaError {
    #[error("JSON parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("{path}: {message}")]
    Validation { path: String, message: String },
    #[error("unsupported format_version {found:?}; supported: \"1\"")]
    Version { found: String },
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> SchemaError {
    SchemaError::Validation {
        path: path.into(),
        message: message.into(),
    }
}

/// Byte offset of a 1-based (line, column) position in `text`.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut remaining = line.saturating_sub(1);
    let mut offset = 0;
    for (i, b) in text.bytes().enumerate() {
        if remaining == 0 {
            break;
        }
        if b == b'\n' {
            remaining -= 1;
            offset = i + 1;
        }
    }
    offset + column.saturating_sub(1)
}

fn parse_json(text: &str) -> Result<Value, SchemaError> {
    serde_json::from_str(text).map_err(|e| SchemaError::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })
}

fn as_object<'a>(value: &'a Value, path: &str) -> Result<&'a Map<String, Value>, SchemaError> {
    value
        .as_object()
        .ok_or_else(|| invalid(path, "expected a JSON object"))
}

fn required<'a>(
    map: &'a Map<String, Value>,
    parent: &str,
    key: &str,
) -> Result<&'a Value, SchemaError> {
    map.get(key)
        .ok_or_else(|| invalid(join(parent, key), "missing required field"))
}

fn join(parent: &str, key: &str) -> String {
    if parent.is_empty() {
        key.to_string()
    } else {
        format!("{parent}.{key}")
    }
}

fn as_string(value: &Value, path: &str) -> Result<String, SchemaError> {
    value
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| invalid(path, "expected a string"))
}

fn as_number(value: &Value, path: &str) -> Result<f64, SchemaError> {
    value
        .as_f64()
        .ok_or_else(|| invalid(path, "expected a number"))
}

fn as_bool(value: &Value, path: &str) -> Result<bool, SchemaError> {
    value
        .as_bool()
        .ok_or_else(|| invalid(path, "expected a boolean"))
}

fn opt_string(map: &Map<String, Value>, parent: &str, key: &str) -> Result<String, SchemaError> {
    match map.get(key) {
        Some(v) => as_string(v, &join(parent, key)),
        None => Ok(String::new()),
    }
}

fn opt_number(
    map: &Map<String, Value>,
    parent: &str,
    key: &str,
    default: f64,
) -> Result<f64, SchemaError> {
    match map.get(key) {
        Some(v) => as_number(v, &join(parent, key)),
        None => Ok(default),
    }
}

/// Qualitative strength vocabulary for proposal channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StrengthLabel {
    None,
    Weak,
    Medium,
    Strong,
    Dominant,
}

impl StrengthLabel {
    pub const ALL: [StrengthLabel; 5] = [
        StrengthLabel::None,
        StrengthLabel::Weak,
        StrengthLabel::Medium,
        StrengthLabel::Strong,
        StrengthLabel::Dominant,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrengthLabel::None => "none",
            StrengthLabel::Weak => "weak",
            StrengthLabel::Medium => "medium",
            StrengthLabel::Strong => "strong",
            StrengthLabel::Dominant => "dominant",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.as_str() == name)
    }
}

/// Per-channel strength labels of one proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrengthMap {
    pub conservative: StrengthLabel,
    pub friction: StrengthLabel,
    pub damping: StrengthLabel,
}

impl StrengthMap {
    pub fn get(&self, channel: Channel) -> StrengthLabel {
        match channel {
            Channel::Conservative => self.conservative,
            Channel::FrictionMax => self.friction,
            Channel::Damping => self.damping,
        }
    }
}

impl Default for StrengthMap {
    fn default() -> Self {
        Self {
            conservative: StrengthLabel::None,
            friction: StrengthLabel::None,
            damping: StrengthLabel::None,
        }
    }
}

/// Per-channel refinement multipliers; absent entries mean 1.0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineFactors {
    pub conservative: f64,
    pub friction: f64,
    pub damping: f64,
}

impl RefineFactors {
    pub fn get(&self, channel: Channel) -> f64 {
        match channel {
            Channel::Conservative => self.conservative,
            Channel::FrictionMax => self.friction,
            Channel::Damping => self.damping,
        }
    }
}

impl Default for RefineFactors {
    fn default() -> Self {
        Self {
            conservative: 1.0,
            friction: 1.0,
            damping: 1.0,
        }
    }
}

/// One proposed effect on the joint.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectProposal {
    pub effect_name: String,
    pub start_ratio: f64,
    pub end_ratio: f64,
    pub strength: StrengthMap,
    pub refine_factor: RefineFactors,
    pub confidence: f64,
    pub reason: String,
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSummary {
    pub joint_name: String,
    pub joint_type: JointType,
    pub motion_description: String,
    pub overall_confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimitHintSpec {
    pub selected_side: LimitSide,
    pub elasticity: Elasticity,
}

impl Default for LimitHintSpec {
    fn default() -> Self {
        Self {
            selected_side: LimitSide::None,
            elasticity: Elasticity::None,
        }
    }
}

/// A validated structured proposal for one joint.
///
/// The wire key for the whole-motion narrative is the (intentionally
/// misspelled) `whole_motion_descrptn`; `whole_motion_description` is
/// accepted as an input alias. Unknown top-level fields are preserved in
/// `extra`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalDocument {
    pub joint_summary: JointSummary,
    pub whole_motion_description: String,
    pub gravity_can_be_ignored: bool,
    pub joint_limit_hint: LimitHintSpec,
    pub effect_proposals: Vec<EffectProposal>,
    pub extra: Map<String, Value>,
}

/// Explicit control points per channel (the no-template mode).
#[derive(Debug, Clone, PartialEq)]
pub struct RawCurveProposal {
    pub conservative: Option<Vec<(f64, f64)>>,
    pub friction: Option<Vec<(f64, f64)>>,
    pub damping: Option<Vec<(f64, f64)>>,
    pub extra: Map<String, Value>,
}

impl RawCurveProposal {
    pub fn channel(&self, channel: Channel) -> Option<&[(f64, f64)]> {
        match channel {
            Channel::Conservative => self.conservative.as_deref(),
            Channel::FrictionMax => self.friction.as_deref(),
            Channel::Damping => self.damping.as_deref(),
        }
    }
}

const PROPOSAL_KEYS: [&str; 5] = [
    "joint_summary",
    "whole_motion_descrptn",
    "gravity_can_be_ignored",
    "joint_limit_hint",
    "effect_proposals",
];

fn parse_strength_label(value: &Value, path: &str) -> Result<StrengthLabel, SchemaError> {
    let text = as_string(value, path)?;
    StrengthLabel::parse(&text).ok_or_else(|| {
        invalid(
            path,
            format!(
                "unknown strength label {:?}; expected one of: {}",
                text,
                StrengthLabel::ALL
                    .iter()
                    .map(|l| l.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        )
    })
}

fn parse_strength_map(value: &Value, path: &str) -> Result<StrengthMap, SchemaError> {
    let map = as_object(value, path)?;
    let mut out = StrengthMap::default();
    for channel in Channel::ALL {
        if let Some(v) = map.get(channel.as_str()) {
            let label = parse_strength_label(v, &join(path, channel.as_str()))?;
            match channel {
                Channel::Conservative => out.conservative = label,
                Channel::FrictionMax => out.friction = label,
                Channel::Damping => out.damping = label,
            }
        }
    }
    Ok(out)
}

fn parse_refine_factors(value: &Value, path: &str) -> Result<RefineFactors, SchemaError> {
    let map = as_object(value, path)?;
    let mut out = RefineFactors::default();
    for channel in Channel::ALL {
        if let Some(v) = map.get(channel.as_str()) {
            let key_path = join(path, channel.as_str());
            let factor = as_number(v, &key_path)?;
            if !factor.is_finite() || factor <= 0.0 {
                return Err(invalid(
                    key_path,
                    format!("refine factor must be positive and finite, got {factor}"),
                ));
            }
            match channel {
                Channel::Conservative => out.conservative = factor,
                Channel::FrictionMax => out.friction = factor,
                Channel::Damping => out.damping = factor,
            }
        }
    }
    Ok(out)
}

fn parse_effect_proposal(value: &Value, path: &str) -> Result<EffectProposal, SchemaError> {
    let map = as_object(value, path)?;
    let effect_name = as_string(
        required(map, path, "effect_name")?,
        &join(path, "effect_name"),
    )?;
    crate::field::template(&effect_name)
        .map_err(|e| invalid(join(path, "effect_name"), e.to_string()))?;

    let start_path = join(path, "start_ratio");
    let start_ratio = as_number(required(map, path, "start_ratio")?, &start_path)?;
    let end_ratio = as_number(required(map, path, "end_ratio")?, &join(path, "end_ratio"))?;
    for (ratio, key) in [(start_ratio, "start_ratio"), (end_ratio, "end_ratio")] {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(invalid(
                join(path, key),
                format!("ratio {ratio} outside [0, 1]"),
            ));
        }
    }
    if start_ratio >= end_ratio {
        return Err(invalid(
            start_path,
            format!("start_ratio {start_ratio} must be < end_ratio {end_ratio}"),
        ));
    }

    let strength = parse_strength_map(required(map, path, "strength")?, &join(path, "strength"))?;
    let refine_factor = match map.get("refineFactor") {
        Some(v) => parse_refine_factors(v, &join(path, "refineFactor"))?,
        None => RefineFactors::default(),
    };
    let confidence = opt_number(map, path, "confidence", 1.0)?;
    if !(0.0..=1.0).contains(&confidence) {
        return Err(invalid(
            join(path, "confidence"),
            format!("confidence {confidence} outside [0, 1]"),
        ));
    }

    const KNOWN: [&str; 7] = [
        "effect_name",
        "start_ratio",
        "end_ratio",
        "strength",
        "refineFactor",
        "confidence",
        "reason",
    ];
    let extra: Map<String, Value> = map
        .iter()
        .filter(|(k, _)| !KNOWN.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();

    Ok(EffectProposal {
        effect_name,
        start_ratio,
        end_ratio,
        strength,
        refine_factor,
        confidence,
        reason: opt_string(map, path, "reason")?,
        extra,
    })
}

fn parse_limit_hint(value: &Value, path: &str) -> Result<LimitHintSpec, SchemaError> {
    let map = as_object(value, path)?;
    let side_path = join(path, "selected_side");
    let side_text = as_string(required(map, path, "selected_side")?, &side_path)?;
    let selected_side = LimitSide::parse(&side_text).ok_or_else(|| {
        invalid(
            side_path,
            format!("unknown side {side_text:?}; expected one of: low_end, high_end, none"),
        )
    })?;
    let elasticity_path = join(path, "elasticity");
    let elasticity_text = as_string(required(map, path, "elasticity")?, &elasticity_path)?;
    let elasticity = Elasticity::parse(&elasticity_text).ok_or_else(|| {
        invalid(
            elasticity_path,
            format!("unknown elasticity {elasticity_text:?}; expected one of: none, weak, medium, strong"),
        )
    })?;
    Ok(LimitHintSpec {
        selected_side,
        elasticity,
    })
}

/// Parse and validate a structured proposal document.
pub fn parse_proposal(text: &str) -> Result<ProposalDocument, SchemaError> {
    let root = parse_json(text)?;
    let map = as_object(&root, "")?;

    let summary_value = required(map, "", "joint_summary")?;
    let summary_map = as_object(summary_value, "joint_summary")?;
    let joint_type_path = "joint_summary.joint_type";
    let joint_type_text = as_string(
        required(summary_map, "joint_summary", "joint_type")?,
        joint_type_path,
    )?;
    let joint_type = JointType::parse(&joint_type_text).ok_or_else(|| {
        invalid(
            joint_type_path,
            format!("unknown joint type {joint_type_text:?}; expected one of: revolute, prismatic"),
        )
    })?;
    let overall_confidence = opt_number(summary_map, "joint_summary", "overall_confidence", 1.0)?;
    if !(0.0..=1.0).contains(&overall_confidence) {
        return Err(invalid(
            "joint_summary.overall_confidence",
            format!("confidence {overall_confidence} outside [0, 1]"),
        ));
    }
    let joint_summary = JointSummary {
        joint_name: as_string(
            required(summary_map, "joint_summary", "joint_name")?,
            "joint_summary.joint_name",
        )?,
        joint_type,
        motion_description: opt_string(summary_map, "joint_summary", "motion_description")?,
        overall_confidence,
    };

    let whole_motion_description = match (
        map.get("whole_motion_descrptn"),
        map.get("whole_motion_description"),
    ) {
        (Some(v), _) => as_string(v, "whole_motion_descrptn")?,
        (None, Some(v)) => as_string(v, "whole_motion_description")?,
        (None, None) => String::new(),
    };

    let gravity_can_be_ignored = match map.get("gravity_can_be_ignored") {
        Some(v) => as_bool(v, "gravity_can_be_ignored")?,
        None => false,
    };

    let joint_limit_hint = match map.get("joint_limit_hint") {
        Some(v) => parse_limit_hint(v, "joint_limit_hint")?,
        None => LimitHintSpec::default(),
    };

    let proposals_value = required(map, "", "effect_proposals")?;
    let proposals_array = proposals_value
        .as_array()
        .ok_or_else(|| invalid("effect_proposals", "expected an array"))?;
    if proposals_array.is_empty() {
        return Err(invalid(
            "effect_proposals",
            "at least one effect proposal is required",
        ));
    }
    let effect_proposals = proposals_array
        .iter()
        .enumerate()
        .map(|(i, v)| parse_effect_proposal(v, &format!("effect_proposals[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;

    let extra: Map<String, Value> = map
        .iter()
        .filter(|(k, _)| {
            !PROPOSAL_KEYS.contains(&k.as_str()) && k.as_str() != "whole_motion_description"
        })
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();

    Ok(ProposalDocument {
        joint_summary,
        whole_motion_description,
        gravity_can_be_ignored,
        joint_limit_hint,
        effect_proposals,
        extra,
    })
}

fn parse_points(
    value: &Value,
    path: &str,
    nonnegative: bool,
) -> Result<Vec<(f64, f64)>, SchemaError> {
    let array = value
        .as_array()
        .ok_or_else(|| invalid(path, "expected an array of [position, value] pairs"))?;
    if array.len() < 2 {
        return Err(invalid(path, "need at least 2 control points"));
    }
    let mut points = Vec::with_capacity(array.len());
    for (i, entry) in array.iter().enumerate() {
        let entry_path = format!("{path}[{i}]");
        let pair = entry
            .as_array()
            .filter(|p| p.len() == 2)
            .ok_or_else(|| invalid(&entry_path, "expected a [position, value] pair"))?;
        let x = as_number(&pair[0], &format!("{entry_path}[0]"))?;
        let y = as_number(&pair[1], &format!("{entry_path}[1]"))?;
        if let Some(&(prev, _)) = points.last() {
            if x <= prev {
                return Err(invalid(
                    format!("{entry_path}[0]"),
                    format!("positions must be strictly increasing ({x} after {prev})"),
                ));
            }
        }
        if nonnegative && y < 0.0 {
            return Err(invalid(
                format!("{entry_path}[1]"),
                format!("value {y} must be >= 0"),
            ));
        }
        points.push((x, y));
    }
    Ok(points)
}

/// Parse explicit control points (no-template mode).
pub fn parse_raw_proposal(text: &str) -> Result<RawCurveProposal, SchemaError> {
    let root = parse_json(text)?;
    let map = as_object(&root, "")?;
    let mut raw = RawCurveProposal {
        conservative: None,
        friction: None,
        damping: None,
        extra: Map::new(),
    };
    for channel in Channel::ALL {
        if let Some(v) = map.get(channel.as_str()) {
            let points = parse_points(v, channel.as_str(), channel.requires_nonnegative())?;
            match channel {
                Channel::Conservative => raw.conservative = Some(points),
                Channel::FrictionMax => raw.friction = Some(points),
                Channel::Damping => raw.damping = Some(points),
            }
        }
    }
    if raw.conservative.is_none() && raw.friction.is_none() && raw.damping.is_none() {
        return Err(invalid(
            "",
            "at least one of conservative, friction, damping is required",
        ));
    }
    raw.extra = map
        .iter()
        .filter(|(k, _)| Channel::parse(k).is_none())
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Ok(raw)
}

fn parse_curve(value: &Value, path: &str) -> Result<PchipCurve, SchemaError> {
    let map = as_object(value, path)?;
    let read_array = |key: &str| -> Result<Vec<f64>, SchemaError> {
        let key_path = join(path, key);
        let array = required(map, path, key)?
            .as_array()
            .ok_or_else(|| invalid(&key_path, "expected an array of numbers"))?;
        array
            .iter()
            .enumerate()
            .map(|(i, v)| as_number(v, &format!("{key_path}[{i}]")))
            .collect()
    };
    let xs = read_array("xs")?;
    let ys = read_array("ys")?;
    if xs.len() != ys.len() {
        return Err(invalid(
            path,
            format!("xs has {} entries but ys has {}", xs.len(), ys.len()),
        ));
    }
    PchipCurve::new(xs, ys).map_err(|e| invalid(path, e.to_string()))
}

/// Parse a joint context file.
///
/// `t_ref` defaults to 1.0 and `gravity_curve` to identically zero.
pub fn parse_context(text: &str) -> Result<JointContext, SchemaError> {
    let root = parse_json(text)?;
    let map = as_object(&root, "")?;
    let joint_type_text = as_string(required(map, "", "joint_type")?, "joint_type")?;
    let joint_type = JointType::parse(&joint_type_text).ok_or_else(|| {
        invalid(
            "joint_type",
            format!("unknown joint type {joint_type_text:?}; expected one of: revolute, prismatic"),
        )
    })?;
    let gravity_curve = match map.get("gravity_curve") {
        Some(v) => parse_curve(v, "gravity_curve")?,
        None => {
            PchipCurve::new(vec![0.0, 1.0], vec![0.0, 0.0]).expect("flat curve is always valid")
        }
    };
    JointContext::new(
        as_string(required(map, "", "asset_name")?, "asset_name")?,
        as_string(required(map, "", "joint_name")?, "joint_name")?,
        joint_type,
        as_number(required(map, "", "q_min")?, "q_min")?,
        as_number(required(map, "", "q_max")?, "q_max")?,
        as_number(required(map, "", "inertia_eq")?, "inertia_eq")?,
        gravity_curve,
        opt_number(map, "", "t_ref", 1.0)?,
    )
    .map_err(|e| invalid("", e.to_string()))
}

fn curve_value(curve: &PchipCurve) -> Value {
    json!({ "xs": curve.xs(), "ys": curve.ys() })
}

fn component_value(component: &EffectComponent) -> Value {
    let mut curves = Map::new();
    for channel in Channel::ALL {
        if let Some(curve) = component.curve(channel) {
            curves.insert(channel.as_str().to_string(), curve_value(curve));
        }
    }
    json!({
        "curves": curves,
        "effect_name": component.effect_name(),
        "interval": [component.a(), component.b()],
        "provenance": component.provenance(),
    })
}

/// Serialize a composed field to the canonical on-disk form.
pub fn serialize_composed(field: &ComposedField) -> String {
    let joint = &field.joint;
    let root = json!({
        "components": field.components.iter().map(component_value).collect::<Vec<_>>(),
        "format_version": "1",
        "joint": {
            "asset_name": joint.asset_name,
            "gravity_curve": curve_value(&joint.gravity_curve),
            "inertia_eq": joint.inertia_eq,
            "joint_name": joint.joint_name,
            "joint_type": joint.joint_type.as_str(),
            "q_max": joint.q_max,
            "q_min": joint.q_min,
            "t_ref": joint.t_ref,
        },
        "joint_limit": {
            "damping_ratio": field.joint_limit.damping_ratio,
            "elasticity": field.joint_limit.elasticity.as_str(),
            "selected_side": field.joint_limit.selected_side.as_str(),
        },
        "meta": field.meta,
    });
    let mut text = serde_json::to_string_pretty(&root).expect("field values are finite");
    text.push('\n');
    text
}

fn parse_component(value: &Value, path: &str) -> Result<EffectComponent, SchemaError> {
    let map = as_object(value, path)?;
    let effect_name = as_string(
        required(map, path, "effect_name")?,
        &join(path, "effect_name"),
    )?;
    let interval_path = join(path, "interval");
    let interval = required(map, path, "interval")?
        .as_array()
        .filter(|a| a.len() == 2)
        .ok_or_else(|| invalid(&interval_path, "expected [a, b]"))?;
    let a = as_number(&interval[0], &format!("{interval_path}[0]"))?;
    let b = as_number(&interval[1], &format!("{interval_path}[1]"))?;

    let curves_path = join(path, "curves");
    let curves_map = as_object(required(map, path, "curves")?, &curves_path)?;
    let mut curves = ChannelCurves::default();
    for (key, curve_json) in curves_map {
        let channel = Channel::parse(key).ok_or_else(|| {
            invalid(
                join(&curves_path, key),
                "unknown channel; expected one of: conservative, friction, damping",
            )
        })?;
        curves.set(
            channel,
            Some(parse_curve(curve_json, &join(&curves_path, key))?),
        );
    }

    let component = EffectComponent::new(effect_name, a, b, curves)
        .map_err(|e| invalid(path, e.to_string()))?;
    Ok(match map.get("provenance") {
        Some(p) => component.with_provenance(p.clone()),
        None => component,
    })
}

/// Parse the canonical composed-field format.
pub fn parse_composed(text: &str) -> Result<ComposedField, SchemaError> {
    let root = parse_json(text)?;
    let map = as_object(&root, "")?;

    let version = as_string(required(map, "", "format_version")?, "format_version")?;
    if version != "1" {
        return Err(SchemaError::Version { found: version });
    }

    let joint_value = required(map, "", "joint")?;
    let joint_map = as_object(joint_value, "joint")?;
    let joint_type_text = as_string(
        required(joint_map, "joint", "joint_type")?,
        "joint.joint_type",
    )?;
    let joint_type = JointType::parse(&joint_type_text).ok_or_else(|| {
        invalid(
            "joint.joint_type",
            format!("unknown joint type {joint_type_text:?}"),
        )
    })?;
    let joint = JointContext::new(
        as_string(
            required(joint_map, "joint", "asset_name")?,
            "joint.asset_name",
        )?,
        as_string(
            required(joint_map, "joint", "joint_name")?,
            "joint.joint_name",
        )?,
        joint_type,
        as_number(required(joint_map, "joint", "q_min")?, "joint.q_min")?,
        as_number(required(joint_map, "joint", "q_max")?, "joint.q_max")?,
        as_number(
            required(joint_map, "joint", "inertia_eq")?,
            "joint.inertia_eq",
        )?,
        parse_curve(
            required(joint_map, "joint", "gravity_curve")?,
            "joint.gravity_curve",
        )?,
        opt_number(joint_map, "joint", "t_ref", 1.0)?,
    )
    .map_err(|e| invalid("joint", e.to_string()))?;

    let joint_limit = match map.get("joint_limit") {
        Some(v) => {
            let limit_map = as_object(v, "joint_limit")?;
            let side_text = as_string(
                required(limit_map, "joint_limit", "selected_side")?,
                "joint_limit.selected_side",
            )?;
            let selected_side = LimitSide::parse(&side_text).ok_or_else(|| {
                invalid(
                    "joint_limit.selected_side",
                    format!("unknown side {side_text:?}"),
                )
            })?;
            let elasticity_text = as_string(
                required(limit_map, "joint_limit", "elasticity")?,
                "joint_limit.elasticity",
            )?;
            let elasticity = Elasticity::parse(&elasticity_text).ok_or_else(|| {
                invalid(
                    "joint_limit.elasticity",
                    format!("unknown elasticity {elasticity_text:?}"),
                )
            })?;
            let damping_ratio = as_number(
                required(limit_map, "joint_limit", "damping_ratio")?,
                "joint_limit.damping_ratio",
            )?;
            if !damping_ratio.is_finite() || damping_ratio <= 0.0 {
                return Err(invalid(
                    "joint_limit.damping_ratio",
                    format!("damping ratio must be positive and finite, got {damping_ratio}"),
                ));
            }
            JointLimitHint {
                selected_side,
                elasticity,
                damping_ratio,
            }
        }
        None => JointLimitHint::default(),
    };

    let components = match map.get("components") {
        Some(v) => {
            let array = v
                .as_array()
                .ok_or_else(|| invalid("components", "expected an array"))?;
            array
                .iter()
                .enumerate()
                .map(|(i, c)| parse_component(c, &format!("components[{i}]")))
                .collect::<Result<Vec<_>, _>>()?
        }
        None => Vec::new(),
    };

    Ok(ComposedField {
        components,
        joint,
        joint_limit,
        meta: map.get("meta").cloned().unwrap_or_else(|| json!({})),
    })
}
