//! The propose → compile → diagnose → revise loop.
//!
//! Each round sends the assembled prompt, parses the reply into a proposal
//! (with a bounded repair budget for malformed JSON), compiles it, renders
//! the quasi-static profile, and feeds proposal plus profile back into the
//! next round. The loop stops when the model replies with the literal token
//! `complete` (keeping the previous round's field) or after `max_rounds`.
//! Every artifact is persisted under `<out_root>/<joint>/round<k>/`.

use crate::prompt::{build_prompt, FeedbackContext, ImageInput, PromptBundle, PromptMode};
use crate::transport::{ChatMessage, ChatRequest, Transport};
use crate::VlmError;
use joda_core::compiler::{compile, compile_raw, JointContext};
use joda_core::diag::{equilibria, profile_grid, render_svg, stick_regions, RenderAnnotations};
use joda_core::field::ComposedField;
use joda_core::schema::{
    parse_proposal, parse_raw_proposal, serialize_composed, ProposalDocument, SchemaError,
};
use serde_json::Value;
use std::path::{Path, PathBuf};

pub const DEFAULT_MAX_ROUNDS: usize = 4;
pub const DEFAULT_RETRY_BUDGET: usize = 2;

/// Loop bounds: total rounds and extra sends allowed per round when the
/// reply fails to parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IterationPolicy {
    pub max_rounds: usize,
    pub retry_budget: usize,
}

impl Default for IterationPolicy {
    fn default() -> Self {
        Self {
            max_rounds: DEFAULT_MAX_ROUNDS,
            retry_budget: DEFAULT_RETRY_BUDGET,
        }
    }
}

/// Strip a single surrounding markdown code fence, tolerating an info
/// string (```json). Returns the trimmed input when no balanced fence is
/// found.
pub fn strip_fences(text: &str) -> &str {
    let trimmed = text.trim();
    let Some(after_open) = trimmed.strip_prefix("```") else {
        return trimmed;
    };
    let Some(newline) = after_open.find('\n') else {
        return trimmed;
    };
    let body = &after_open[newline + 1..];
    match body.rfind("```") {
        Some(end) => body[..end].trim(),
        None => trimmed,
    }
}

/// One request/response pair, in transcript form.
#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    pub request: Value,
    pub response: String,
}

/// A parsed proposal plus the negotiation that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalOutcome {
    pub document: ProposalDocument,
    /// The fence-stripped reply text that parsed.
    pub raw_json: String,
    /// Extra sends beyond the first.
    pub retries: usize,
    pub exchanges: Vec<Exchange>,
}

struct Negotiation<T> {
    outcome: Result<Option<(T, String)>, VlmError>,
    exchanges: Vec<Exchange>,
}

/// Send, check for the completion token when allowed, parse; on parse
/// failure append the validation error and retry within the budget.
fn negotiate<T>(
    base: ChatRequest,
    transport: &dyn Transport,
    retry_budget: usize,
    allow_complete: bool,
    parse: impl Fn(&str) -> Result<T, SchemaError>,
) -> Negotiation<T> {
    let mut request = base;
    let mut exchanges = Vec::new();
    for attempt in 0..=retry_budget {
        let response = match transport.send(&request) {
            Ok(r) => r,
            Err(e) => {
                return Negotiation {
                    outcome: Err(e),
                    exchanges,
                }
            }
        };
        exchanges.push(Exchange {
            request: request.to_value(),
            response: response.clone(),
        });
        let stripped = strip_fences(&response);
        if allow_complete && stripped == "complete" {
            return Negotiation {
                outcome: Ok(None),
                exchanges,
            };
        }
        match parse(stripped) {
            Ok(value) => {
                let raw = stripped.to_string();
                return Negotiation {
                    outcome: Ok(Some((value, raw))),
                    exchanges,
                };
            }
            Err(e) if attempt < retry_budget => {
                request.messages.push(ChatMessage::assistant(response));
                request.messages.push(ChatMessage::user(format!(
                    "The previous reply was not a valid proposal: {e}\nReturn only the \
corrected JSON object."
                )));
            }
            Err(_) => {
                return Negotiation {
                    outcome: Err(VlmError::Unparseable {
                        attempts: attempt + 1,
                        raw: response,
                    }),
                    exchanges,
                };
            }
        }
    }
    unreachable!("loop returns on every attempt");
}

/// One-shot proposal: send the bundle and parse the reply, repairing
/// malformed JSON within the default retry budget.
pub fn propose(
    bundle: &PromptBundle,
    transport: &dyn Transport,
) -> Result<ProposalOutcome, VlmError> {
    propose_with_budget(bundle, transport, DEFAULT_RETRY_BUDGET)
}

pub fn propose_with_budget(
    bundle: &PromptBundle,
    transport: &dyn Transport,
    retry_budget: usize,
) -> Result<ProposalOutcome, VlmError> {
    let request = bundle.to_request()?;
    let negotiation = negotiate(request, transport, retry_budget, false, parse_proposal);
    let exchanges = negotiation.exchanges;
    let (document, raw_json) = negotiation
        .outcome?
        .expect("completion token disabled outside the loop");
    Ok(ProposalOutcome {
        document,
        raw_json,
        retries: exchanges.len().saturating_sub(1),
        exchanges,
    })
}

/// Loop configuration beyond the round/retry bounds.
#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub mode: PromptMode,
    pub policy: IterationPolicy,
    /// Resolution of the diagnostic profile fed back to the model.
    pub grid_points: usize,
    /// External `svg-to-png <in.svg> <out.png>` converter; when unset the
    /// profile CSV is embedded as text instead of an image.
    pub svg_to_png: Option<PathBuf>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            mode: PromptMode::Template,
            policy: IterationPolicy::default(),
            grid_points: 201,
            svg_to_png: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundRecord {
    /// 1-based round number; also the transcript directory suffix.
    pub index: usize,
    pub dir: PathBuf,
    /// True when this round's reply was the completion token.
    pub completed: bool,
    pub retries: usize,
}

#[derive(Debug)]
pub struct IterationOutcome {
    pub field: ComposedField,
    pub rounds: Vec<RoundRecord>,
    /// False when the loop stopped by exhausting `max_rounds`.
    pub completed: bool,
    pub run_dir: PathBuf,
}

fn sanitize_name(name: &str) -> String {
    let cleaned: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect();
    if cleaned.is_empty() {
        "joint".to_string()
    } else {
        cleaned
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), VlmError> {
    std::fs::write(path, text).map_err(|e| VlmError::io(path, e))
}

fn write_value_array(path: &Path, values: Vec<Value>) -> Result<(), VlmError> {
    let mut text = serde_json::to_string_pretty(&Value::Array(values))
        .expect("transcript values are valid JSON");
    text.push('\n');
    write_text(path, &text)
}

fn persist_exchanges(dir: &Path, exchanges: &[Exchange]) -> Result<(), VlmError> {
    write_value_array(
        &dir.join("request.json"),
        exchanges.iter().map(|e| e.request.clone()).collect(),
    )?;
    write_value_array(
        &dir.join("response.json"),
        exchanges
            .iter()
            .map(|e| Value::String(e.response.clone()))
            .collect(),
    )
}

fn rasterize(svg_path: &Path, converter: &Path) -> Result<Vec<u8>, VlmError> {
    let png_path = svg_path.with_extension("png");
    let status = std::process::Command::new(converter)
        .arg(svg_path)
        .arg(&png_path)
        .status()
        .map_err(|e| VlmError::io(converter, e))?;
    if !status.success() {
        return Err(VlmError::io(
            converter,
            std::io::Error::other(format!("converter exited with {status}")),
        ));
    }
    std::fs::read(&png_path).map_err(|e| VlmError::io(&png_path, e))
}

struct Prior {
    field: ComposedField,
    raw_json: String,
    csv: String,
    png: Option<Vec<u8>>,
}

/// Run the full diagnose-and-revise loop, persisting per-round artifacts
/// under `<out_root>/<joint>/round<k>/{request.json,response.json,
/// proposal.json,composed.json,profile.svg}`.
///
/// Rounds after the first embed the previous proposal and profile; a
/// `complete` reply in those rounds stops the loop and keeps the previous
/// round's field. Artifacts already written stay on disk when a later round
/// fails.
pub fn iterate(
    ctx: &JointContext,
    images: &ImageInput,
    transport: &dyn Transport,
    config: &SessionConfig,
    out_root: &Path,
) -> Result<IterationOutcome, VlmError> {
    if config.policy.max_rounds == 0 {
        return Err(VlmError::Policy("max_rounds must be at least 1"));
    }
    let run_dir = out_root.join(sanitize_name(&ctx.joint_name));
    let mut rounds: Vec<RoundRecord> = Vec::new();
    let mut prior: Option<Prior> = None;

    for index in 1..=config.policy.max_rounds {
        let feedback = prior.as_ref().map(|p| FeedbackContext {
            prior_proposal: p.raw_json.clone(),
            profile_csv: p.png.is_none().then(|| p.csv.clone()),
            profile_png: p.png.clone(),
        });
        let bundle = build_prompt(ctx, images, config.mode, feedback.as_ref())?;
        let request = bundle.to_request()?;

        let round_dir = run_dir.join(format!("round{index}"));
        std::fs::create_dir_all(&round_dir).map_err(|e| VlmError::io(&round_dir, e))?;

        let allow_complete = prior.is_some();
        let budget = config.policy.retry_budget;
        // The two modes parse into different documents; both end in a field.
        let (parsed, exchanges) = match config.mode {
            PromptMode::Template => {
                let n = negotiate(request, transport, budget, allow_complete, parse_proposal);
                persist_exchanges(&round_dir, &n.exchanges)?;
                let compiled = n.outcome?.map(|(doc, raw)| (compile(ctx, &doc), raw));
                (compiled, n.exchanges)
            }
            PromptMode::Raw => {
                let n = negotiate(
                    request,
                    transport,
                    budget,
                    allow_complete,
                    parse_raw_proposal,
                );
                persist_exchanges(&round_dir, &n.exchanges)?;
                let compiled = n
                    .outcome?
                    .map(|(raw_doc, raw)| (compile_raw(ctx, &raw_doc), raw));
                (compiled, n.exchanges)
            }
        };
        let retries = exchanges.len().saturating_sub(1);

        let Some((field, raw_json)) = parsed else {
            rounds.push(RoundRecord {
                index,
                dir: round_dir,
                completed: true,
                retries,
            });
            let field = prior
                .expect("completion is only allowed with a prior round")
                .field;
            return Ok(IterationOutcome {
                field,
                rounds,
                completed: true,
                run_dir,
            });
        };

        let mut proposal_text = raw_json.clone();
        if !proposal_text.ends_with('\n') {
            proposal_text.push('\n');
        }
        write_text(&round_dir.join("proposal.json"), &proposal_text)?;
        let field = field?;
        write_text(
            &round_dir.join("composed.json"),
            &serialize_composed(&field),
        )?;

        let grid = profile_grid(&field, config.grid_points);
        let annotations = RenderAnnotations {
            title: Some(format!(
                "{} / {} (round {index})",
                ctx.asset_name, ctx.joint_name
            )),
            equilibria: equilibria(&grid, &field),
            stick_regions: stick_regions(&grid),
            shade_stick_regions: true,
        };
        let svg = render_svg(&grid, &annotations);
        let svg_path = round_dir.join("profile.svg");
        write_text(&svg_path, &svg)?;

        let png = match &config.svg_to_png {
            Some(converter) => Some(rasterize(&svg_path, converter)?),
            None => None,
        };
        rounds.push(RoundRecord {
            index,
            dir: round_dir,
            completed: false,
            retries,
        });
        prior = Some(Prior {
            field,
            raw_json,
            csv: grid.to_csv(),
            png,
        });
    }

    let field = prior.expect("max_rounds >= 1 ran at least one round").field;
    Ok(IterationOutcome {
        field,
        rounds,
        completed: false,
        run_dir,
    })
}
