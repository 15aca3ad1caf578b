//! Proposal-to-field compilation.
//!
//! A joint context carries the physical facts about one degree of freedom
//! (range, equivalent inertia, gravity profile). Reference magnitudes derived
//! from it turn qualitative strength labels into physical scales; label
//! sampling is driven by a stable hash of a deterministic key so repeated
//! compilations are byte-identical.

use serde_json::{json, Value};

use crate::curve::PchipCurve;
use crate::field::{
    template, Channel, ChannelScales, ComposedField, EffectComponent, FieldError, JointLimitHint,
};
use crate::schema::{ProposalDocument, RawCurveProposal, StrengthLabel};

/// Grid resolution used for gravity-peak scans (step 1e-3 over [0,1]).
pub const SCAN_POINTS: usize = 1001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum JointType {
    Revolute,
    Prismatic,
}

impl JointType {
    pub fn as_str(self) -> &'static str {
        match self {
            JointType::Revolute => "revolute",
            JointType::Prismatic => "prismatic",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "revolute" => Some(JointType::Revolute),
            "prismatic" => Some(JointType::Prismatic),
            _ => None,
        }
    }

    /// Unit of generalized force for this joint type.
    pub fn force_unit(self) -> &'static str {
        match self {
            JointType::Revolute => "N·m",
            JointType::Prismatic => "N",
        }
    }
}

/// Physical description of a single joint DOF.
///
/// `gravity_curve` gives the generalized gravity force/torque as a function
/// of the normalized coordinate `s`; positive values drive `q` upward.
#[derive(Debug, Clone, PartialEq)]
pub struct JointContext {
    pub asset_name: String,
    pub joint_name: String,
    pub joint_type: JointType,
    pub q_min: f64,
    pub q_max: f64,
    pub inertia_eq: f64,
    pub gravity_curve: PchipCurve,
    pub t_ref: f64,
}

impl JointContext {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        asset_name: impl Into<String>,
        joint_name: impl Into<String>,
        joint_type: JointType,
        q_min: f64,
        q_max: f64,
        inertia_eq: f64,
        gravity_curve: PchipCurve,
        t_ref: f64,
    ) -> Result<Self, FieldError> {
        if !q_min.is_finite() || !q_max.is_finite() || q_max <= q_min {
            return Err(FieldError::DegenerateRange { q_min, q_max });
        }
        if !inertia_eq.is_finite() || inertia_eq <= 0.0 {
            return Err(FieldError::InvalidContext(format!(
                "inertia_eq must be positive and finite, got {inertia_eq}"
            )));
        }
        if !t_ref.is_finite() || t_ref <= 0.0 {
            return Err(FieldError::InvalidContext(format!(
                "t_ref must be positive and finite, got {t_ref}"
            )));
        }
        Ok(Self {
            asset_name: asset_name.into(),
            joint_name: joint_name.into(),
            joint_type,
            q_min,
            q_max,
            inertia_eq,
            gravity_curve,
            t_ref,
        })
    }

    /// Context with an identically zero gravity profile.
    pub fn without_gravity(
        asset_name: impl Into<String>,
        joint_name: impl Into<String>,
        joint_type: JointType,
        q_min: f64,
        q_max: f64,
        inertia_eq: f64,
        t_ref: f64,
    ) -> Result<Self, FieldError> {
        let flat = PchipCurve::new(vec![0.0, 1.0], vec![0.0, 0.0])?;
        Self::new(
            asset_name, joint_name, joint_type, q_min, q_max, inertia_eq, flat, t_ref,
        )
    }

    pub fn delta_q(&self) -> f64 {
        self.q_max - self.q_min
    }

    /// Normalized coordinate for `q`, clamped to [0, 1].
    pub fn normalize(&self, q: f64) -> f64 {
        ((q - self.q_min) / self.delta_q()).clamp(0.0, 1.0)
    }

    /// Gravity generalized force at normalized position `s`.
    pub fn gravity(&self, s: f64) -> f64 {
        self.gravity_curve.eval_clamped(s)
    }
}

/// Physical scales used to realize qualitative strength labels.
///
/// `c_ref` is defined as the IEEE-rounded quotient `f_ref / v_ref`; the
/// product `c_ref * v_ref` therefore reproduces `f_ref` to within one unit
/// in the last place (bit-exact equality is not representable in general).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceMagnitudes {
    pub f_ref: f64,
    pub v_ref: f64,
    pub c_ref: f64,
    pub g_max: f64,
}

impl ReferenceMagnitudes {
    /// The scale that maps a unit prototype peak to physical units.
    pub fn reference_for(&self, channel: Channel) -> f64 {
        match channel {
            Channel::Conservative | Channel::FrictionMax => self.f_ref,
            Channel::Damping => self.c_ref,
        }
    }
}

/// Derive force/velocity/damping scales from the joint context.
///
/// The inertial scale is the force that traverses the full range from rest
/// in `t_ref` under constant acceleration; the gravity scale is the peak
/// |gravity| over a fine grid; the larger of the two is the force reference.
pub fn reference_magnitudes(ctx: &JointContext) -> ReferenceMagnitudes {
    let dq = ctx.delta_q();
    let a_ref = 2.0 * dq / (ctx.t_ref * ctx.t_ref);
    let f_inertial = ctx.inertia_eq * a_ref;
    let mut g_max: f64 = 0.0;
    for i in 0..SCAN_POINTS {
        let s = i as f64 / (SCAN_POINTS - 1) as f64;
        g_max = g_max.max(ctx.gravity(s).abs());
    }
    let f_ref = g_max.max(f_inertial);
    let v_ref = dq / ctx.t_ref;
    let c_ref = f_ref / v_ref;
    ReferenceMagnitudes {
        f_ref,
        v_ref,
        c_ref,
        g_max,
    }
}

/// FNV-1a 64-bit hash; the bit-exact anchor for strength sampling.
pub fn stable_hash(key: &[u8]) -> u64 {
    const OFFSET: u64 = 14695981039346656037;
    const PRIME: u64 = 1099511628211;
    let mut state = OFFSET;
    for &byte in key {
        state ^= u64::from(byte);
        state = state.wrapping_mul(PRIME);
    }
    state
}

/// Multiplier band for one strength label.
pub fn strength_band(label: StrengthLabel) -> (f64, f64) {
    match label {
        StrengthLabel::None => (0.0, 0.0),
        StrengthLabel::Weak => (0.15, 0.35),
        StrengthLabel::Medium => (0.45, 0.75),
        StrengthLabel::Strong => (0.9, 1.3),
        StrengthLabel::Dominant => (1.6, 2.4),
    }
}

/// Deterministically sample a multiplier within the label's band.
pub fn strength_multiplier(label: StrengthLabel, key: &str) -> f64 {
    let (lo, hi) = strength_band(label);
    let u = stable_hash(key.as_bytes()) as f64 / 18446744073709551616.0;
    lo + u * (hi - lo)
}

fn stable_key(
    ctx: &JointContext,
    effect: &str,
    index: usize,
    channel: Channel,
    a: f64,
    b: f64,
) -> String {
    format!(
        "{}|{}|{}|{}|{}|{:.3}|{:.3}",
        ctx.asset_name,
        ctx.joint_name,
        effect,
        index,
        channel.as_str(),
        a,
        b
    )
}

fn bands_value() -> Value {
    let mut bands = serde_json::Map::new();
    for label in StrengthLabel::ALL {
        let (lo, hi) = strength_band(label);
        bands.insert(label.as_str().to_string(), json!([lo, hi]));
    }
    Value::Object(bands)
}

fn base_meta(source: &str, refs: &ReferenceMagnitudes, warnings: &[String]) -> Value {
    json!({
        "bands": bands_value(),
        "composition": { "conservative": "sum", "damping": "sum", "friction": "max" },
        "reference": {
            "c_ref": refs.c_ref,
            "f_ref": refs.f_ref,
            "g_max": refs.g_max,
            "v_ref": refs.v_ref,
        },
        "source": source,
        "warnings": warnings,
    })
}

/// Compile a validated proposal document into a composed field.
///
/// Per proposal and channel, the physical scale is
/// `reference(channel) × sampled multiplier × refine factor`; the sampling
/// key excludes all magnitudes so re-running with rescaled physics moves
/// compiled values proportionally.
pub fn compile(ctx: &JointContext, doc: &ProposalDocument) -> Result<ComposedField, FieldError> {
    let refs = reference_magnitudes(ctx);
    let mut components = Vec::new();
    let mut warnings = Vec::new();

    for (i, proposal) in doc.effect_proposals.iter().enumerate() {
        let tpl = template(&proposal.effect_name)?;
        let mut scales = ChannelScales::default();
        let mut multipliers = [0.0; 3];
        for (slot, channel) in Channel::ALL.into_iter().enumerate() {
            let key = stable_key(
                ctx,
                &proposal.effect_name,
                i,
                channel,
                proposal.start_ratio,
                proposal.end_ratio,
            );
            let m = strength_multiplier(proposal.strength.get(channel), &key);
            multipliers[slot] = m;
            let scale = refs.reference_for(channel) * m * proposal.refine_factor.get(channel);
            scales.set(channel, scale);
        }

        let (component, tpl_warnings) =
            tpl.instantiate(proposal.start_ratio, proposal.end_ratio, scales)?;
        warnings.extend(
            tpl_warnings
                .into_iter()
                .map(|w| format!("effect_proposals[{i}]: {w}")),
        );
        if component.is_inert() {
            warnings.push(format!(
                "effect_proposals[{i}]: {} has no nonzero channel; component dropped",
                proposal.effect_name
            ));
            continue;
        }

        let mut provenance = json!({
            "confidence": proposal.confidence,
            "multipliers": {
                "conservative": multipliers[0],
                "damping": multipliers[2],
                "friction": multipliers[1],
            },
            "proposal_index": i,
            "reason": proposal.reason,
            "refine_factors": {
                "conservative": proposal.refine_factor.conservative,
                "damping": proposal.refine_factor.damping,
                "friction": proposal.refine_factor.friction,
            },
            "strength": {
                "conservative": proposal.strength.conservative.as_str(),
                "damping": proposal.strength.damping.as_str(),
                "friction": proposal.strength.friction.as_str(),
            },
        });
        if !proposal.extra.is_empty() {
            provenance["extra"] = Value::Object(proposal.extra.clone());
        }
        components.push(component.with_provenance(provenance));
    }

    let joint_limit = JointLimitHint::new(
        doc.joint_limit_hint.selected_side,
        doc.joint_limit_hint.elasticity,
    );
    let mut meta = base_meta("template_compiler", &refs, &warnings);
    meta["gravity_can_be_ignored"] = Value::Bool(doc.gravity_can_be_ignored);

    Ok(ComposedField {
        components,
        joint: ctx.clone(),
        joint_limit,
        meta,
    })
}

/// Compile explicit control points (the no-template mode) into a field.
///
/// Each provided channel becomes one full-range component named
/// "raw_curve"; values are interpreted in multiples of the channel
/// reference. Control points must span the full normalized range.
pub fn compile_raw(
    ctx: &JointContext,
    raw: &RawCurveProposal,
) -> Result<ComposedField, FieldError> {
    let refs = reference_magnitudes(ctx);
    let mut components = Vec::new();

    for channel in Channel::ALL {
        let Some(points) = raw.channel(channel) else {
            continue;
        };
        let first = points.first().map(|p| p.0).unwrap_or(f64::NAN);
        let last = points.last().map(|p| p.0).unwrap_or(f64::NAN);
        if first != 0.0 || last != 1.0 {
            return Err(FieldError::LocalSpan {
                start: first,
                end: last,
            });
        }
        let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = points
            .iter()
            .map(|p| p.1 * refs.reference_for(channel))
            .collect();
        let curve = PchipCurve::new(xs, ys)?;
        let mut curves = crate::field::ChannelCurves::default();
        curves.set(channel, Some(curve));
        let component = EffectComponent::new("raw_curve", 0.0, 1.0, curves)?
            .with_provenance(json!({ "channel": channel.as_str(), "mode": "raw" }));
        components.push(component);
    }

    Ok(ComposedField {
        components,
        joint: ctx.clone(),
        joint_limit: JointLimitHint::default(),
        meta: base_meta("raw_compiler", &refs, &[]),
    })
}

/// Meta block for fields assembled outside the proposal pipeline.
pub fn manual_meta(source: &str, refs: &ReferenceMagnitudes) -> Value {
    base_meta(source, refs, &[])
}
