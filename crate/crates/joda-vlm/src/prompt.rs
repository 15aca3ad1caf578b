//! Deterministic prompt assembly for effect proposal.
//!
//! The prompt casts the model as a structured mechanics analyst, embeds the
//! joint context as canonical JSON, lists the effect-template vocabulary (or
//! the control-point rules in raw mode), pins the output JSON shape, and on
//! revision rounds appends the previous proposal plus the compiled
//! diagnostic profile. Identical inputs always produce identical bytes.

use crate::transport::{ChatMessage, ChatRequest, ImageAttachment};
use crate::VlmError;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use joda_core::compiler::JointContext;
use joda_core::field::list_templates;
use serde_json::json;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Default ceiling on text plus encoded attachment bytes per request.
pub const DEFAULT_SIZE_CAP: usize = 16 * 1024 * 1024;

pub const SYSTEM_PROMPT: &str = "You are a careful multimodal mechanics analyst working in a \
high-precision pipeline. Your output is structured input to a downstream compiler. Prioritize \
correctness, consistency, and physical plausibility over free-form creativity.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMode {
    /// Effects are named from the fixed template vocabulary.
    Template,
    /// Effects are explicit per-channel control points (the ablation mode).
    Raw,
}

impl PromptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Template => "template",
            PromptMode::Raw => "raw",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "template" => Some(PromptMode::Template),
            "raw" => Some(PromptMode::Raw),
            _ => None,
        }
    }
}

/// Rendered joint states to attach, or an explicit statement that there are
/// none. An empty file list is rejected so "no images" is never an accident.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageInput {
    /// Paths in increasing joint-coordinate order.
    Files(Vec<PathBuf>),
    NoImages,
}

/// Material from the previous round embedded into a revision prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackContext {
    /// The prior proposal JSON, verbatim.
    pub prior_proposal: String,
    /// Profile CSV used when no rasterized image is available.
    pub profile_csv: Option<String>,
    /// Rasterized diagnostic plot; attached last when present.
    pub profile_png: Option<Vec<u8>>,
}

/// An assembled prompt plus attachments, ready to become a [`ChatRequest`].
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub system: String,
    pub user_text: String,
    pub images: Vec<ImageAttachment>,
    /// Requests larger than this are rejected at [`PromptBundle::to_request`].
    pub size_cap: usize,
}

impl PromptBundle {
    pub fn to_request(&self) -> Result<ChatRequest, VlmError> {
        let request = ChatRequest::new(vec![
            ChatMessage::system(self.system.clone()),
            ChatMessage::user(self.user_text.clone()).with_images(self.images.clone()),
        ]);
        let size = request.approx_size();
        if size > self.size_cap {
            return Err(VlmError::TooLarge {
                size,
                cap: self.size_cap,
            });
        }
        Ok(request)
    }
}

/// Canonical joint-context JSON (same shape as the composed-field `joint`
/// block).
fn context_json(ctx: &JointContext) -> String {
    let value = json!({
        "asset_name": ctx.asset_name,
        "gravity_curve": {
            "xs": ctx.gravity_curve.xs(),
            "ys": ctx.gravity_curve.ys(),
        },
        "inertia_eq": ctx.inertia_eq,
        "joint_name": ctx.joint_name,
        "joint_type": ctx.joint_type.as_str(),
        "q_max": ctx.q_max,
        "q_min": ctx.q_min,
        "t_ref": ctx.t_ref,
    });
    serde_json::to_string_pretty(&value).expect("context values are finite")
}

fn template_table() -> String {
    let mut table =
        String::from("| template | behavior | typical placement |\n| --- | --- | --- |\n");
    for tpl in list_templates() {
        let channels: Vec<&str> = tpl
            .supported_channels()
            .iter()
            .map(|c| c.as_str())
            .collect();
        let _ = writeln!(
            table,
            "| {} | {} (channels: {}) | {} |",
            tpl.name(),
            tpl.description(),
            channels.join(", "),
            tpl.placement_prior()
        );
    }
    table
}

const TEMPLATE_SKELETON: &str = r#"{
  "joint_summary": {
    "joint_name": str,
    "joint_type": "revolute | prismatic",
    "motion_description": str,
    "overall_confidence": float in [0, 1]
  },
  "whole_motion_descrptn": str,
  "gravity_can_be_ignored": bool,
  "joint_limit_hint": {
    "selected_side": "low_end | high_end | none",
    "elasticity": "none | weak | medium | strong"
  },
  "effect_proposals": [
    {
      "effect_name": str,
      "start_ratio": float in [0, 1],
      "end_ratio": float in (start_ratio, 1],
      "strength": {
        "conservative": "none | weak | medium | strong | dominant",
        "friction": "none | weak | medium | strong | dominant",
        "damping": "none | weak | medium | strong | dominant"
      },
      "refineFactor": { "conservative": float, "friction": float, "damping": float },
      "confidence": float in [0, 1],
      "reason": str
    }
  ]
}"#;

const RAW_SKELETON: &str = r#"{
  "conservative": [[0.0, value], ..., [1.0, value]],
  "friction": [[0.0, value], ..., [1.0, value]],
  "damping": [[0.0, value], ..., [1.0, value]]
}"#;

fn media_type_for(path: &Path) -> Result<&'static str, VlmError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "png" => Ok("image/png"),
        "jpg" | "jpeg" => Ok("image/jpeg"),
        "webp" => Ok("image/webp"),
        "gif" => Ok("image/gif"),
        "svg" => Ok("image/svg+xml"),
        _ => Err(VlmError::io(
            path,
            std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                format!("unsupported image extension {ext:?}"),
            ),
        )),
    }
}

fn load_attachment(path: &Path) -> Result<ImageAttachment, VlmError> {
    let media_type = media_type_for(path)?;
    let bytes = std::fs::read(path).map_err(|e| VlmError::io(path, e))?;
    Ok(ImageAttachment {
        media_type: media_type.to_string(),
        base64_data: BASE64.encode(bytes),
    })
}

/// Assemble the proposal prompt.
///
/// `feedback` turns the prompt into a revision round: the prior proposal is
/// embedded verbatim together with the compiled profile (rasterized image
/// when available, CSV text otherwise) and the completion instruction.
pub fn build_prompt(
    ctx: &JointContext,
    images: &ImageInput,
    mode: PromptMode,
    feedback: Option<&FeedbackContext>,
) -> Result<PromptBundle, VlmError> {
    let mut attachments = match images {
        ImageInput::Files(paths) => {
            if paths.is_empty() {
                return Err(VlmError::NoImages);
            }
            paths
                .iter()
                .map(|p| load_attachment(p))
                .collect::<Result<Vec<_>, _>>()?
        }
        ImageInput::NoImages => Vec::new(),
    };

    let mut text = String::new();
    text.push_str(
        "## Task\nGiven one articulated joint, infer the equivalent joint-level effects that \
describe the felt behavior along the entire motion range. These effects represent observable \
interaction behavior, not explicit claims about hidden mechanisms.\n\n",
    );

    let _ = writeln!(text, "## Joint context\n{}\n", context_json(ctx));

    match mode {
        PromptMode::Template => {
            let _ = writeln!(
                text,
                "## Effect templates\nUse only these effect names.\n{}",
                template_table()
            );
            let _ = writeln!(
                text,
                "## Output\nReturn exactly one JSON object, no prose before or after:\n{TEMPLATE_SKELETON}\n\n\
Rules:\n\
- `effect_name` must be one of the template names above.\n\
- `0 <= start_ratio < end_ratio <= 1` (normalized joint coordinate).\n\
- Strength labels map to compiled magnitudes; use \"none\" for channels an effect does not touch.\n\
- `refineFactor` entries default to 1.0 and multiply the compiled channel magnitude.\n\
- Reason over the full motion range; prefer the simplest set of effects that explains the evidence.\n"
            );
        }
        PromptMode::Raw => {
            let _ = writeln!(
                text,
                "## Output\nReturn exactly one JSON object, no prose before or after:\n{RAW_SKELETON}\n\n\
Rules:\n\
- Each channel is a list of [position, value] control points interpolated by a shape-preserving cubic.\n\
- Positions are normalized joint coordinates, strictly increasing, from exactly 0.0 to exactly 1.0.\n\
- Values are multiples of the per-channel reference magnitude derived from the joint context.\n\
- `friction` and `damping` values must be >= 0.\n\
- Include at least one channel; omit channels that are identically zero.\n"
            );
        }
    }

    match images {
        ImageInput::Files(paths) => {
            let _ = writeln!(
                text,
                "## Images\n{} rendered joint states are attached in order of increasing joint \
coordinate.\n",
                paths.len()
            );
        }
        ImageInput::NoImages => {
            text.push_str(
                "## Images\nNo images are attached; reason from the joint context alone.\n\n",
            );
        }
    }

    if let Some(fb) = feedback {
        let _ = writeln!(
            text,
            "## Previous proposal\n{}\n",
            fb.prior_proposal.trim_end()
        );
        if let Some(png) = &fb.profile_png {
            attachments.push(ImageAttachment {
                media_type: "image/png".to_string(),
                base64_data: BASE64.encode(png),
            });
            text.push_str(
                "## Compiled behavior\nThe final attached image plots the quasi-static profile \
compiled from the previous proposal.\n\n",
            );
        } else if let Some(csv) = &fb.profile_csv {
            let _ = writeln!(
                text,
                "## Compiled behavior\nThe quasi-static profile compiled from the previous \
proposal, as CSV:\n{}",
                csv.trim_end()
            );
            text.push('\n');
        }
        text.push_str(
            "If this compiled behavior already matches the joint's intended feel, reply with the \
single word\ncomplete\nand nothing else. Otherwise return a revised JSON object in the same \
format as before.\n",
        );
    }

    Ok(PromptBundle {
        system: SYSTEM_PROMPT.to_string(),
        user_text: text,
        images: attachments,
        size_cap: DEFAULT_SIZE_CAP,
    })
}
