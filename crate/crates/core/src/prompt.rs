//! Structured prompt templates for condition-targeted image generation.
//!
//! A prompt has four slots rendered in a fixed order:
//! visual cues, sensation, physical location, skin tone. Condition spec files
//! supply keyword pools for each slot; [`enumerate_instantiations`] draws a
//! tone-balanced, seeded set of concrete prompts from them.
//!
//! Spec files are TOML:
//!
//! ```toml
//! [tone_descriptors]          # optional, overrides the defaults per grade
//! VI = "deep brown skin"
//!
//! [[condition]]
//! label = "warts"
//! display_name = "Warts"
//! visual_cues = ["rough cauliflower-like growth"]
//! sensations = []             # optional
//! locations = ["on the finger", "on the sole of the foot"]
//! tones = ["I", "III", "V"]   # optional, default all six grades
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{derive_seed, Rng};

/// Separator between rendered slots.
pub const SLOT_SEPARATOR: &str = ", ";

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("cannot read spec file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed spec file at line {line}, column {column}: {message}")]
    MalformedFile {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("condition {condition}: missing field `{field}`")]
    MissingField { condition: String, field: String },
    #[error("duplicate condition label `{0}`")]
    DuplicateLabel(String),
    #[error("condition {condition}: pool `{pool}` is empty")]
    EmptyPool { condition: String, pool: String },
    #[error("condition {condition}: invalid label (expected [a-z0-9_]+)")]
    InvalidLabel { condition: String },
    #[error("condition {condition}: invalid entry in `{field}`: {reason}")]
    InvalidEntry {
        condition: String,
        field: String,
        reason: String,
    },
}

/// Fitzpatrick skin type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FitzpatrickGrade {
    I,
    II,
    III,
    IV,
    V,
    VI,
}

impl FitzpatrickGrade {
    pub const ALL: [FitzpatrickGrade; 6] = [
        FitzpatrickGrade::I,
        FitzpatrickGrade::II,
        FitzpatrickGrade::III,
        FitzpatrickGrade::IV,
        FitzpatrickGrade::V,
        FitzpatrickGrade::VI,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FitzpatrickGrade::I => "I",
            FitzpatrickGrade::II => "II",
            FitzpatrickGrade::III => "III",
            FitzpatrickGrade::IV => "IV",
            FitzpatrickGrade::V => "V",
            FitzpatrickGrade::VI => "VI",
        }
    }

    /// Zero-based position on the scale (I = 0, VI = 5).
    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == s.trim())
    }

    pub fn default_descriptor(self) -> &'static str {
        match self {
            FitzpatrickGrade::I => "very fair skin",
            FitzpatrickGrade::II => "fair skin",
            FitzpatrickGrade::III => "light brown skin",
            FitzpatrickGrade::IV => "olive skin",
            FitzpatrickGrade::V => "brown skin",
            FitzpatrickGrade::VI => "dark brown skin",
        }
    }
}

impl fmt::Display for FitzpatrickGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SkinTone {
    pub grade: FitzpatrickGrade,
    pub descriptor: String,
}

impl SkinTone {
    pub fn default_for(grade: FitzpatrickGrade) -> Self {
        SkinTone {
            grade,
            descriptor: grade.default_descriptor().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSlots {
    pub visual_cues: String,
    pub sensation: String,
    pub physical_location: String,
    pub skin_tone: SkinTone,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub label: String,
    pub display_name: String,
    pub visual_cues_pool: Vec<String>,
    pub sensation_pool: Vec<String>,
    pub location_pool: Vec<String>,
    /// Tones to cover, in scale order, each with its descriptor.
    pub tones: Vec<SkinTone>,
}

/// Indices of the pool entries a prompt was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotIndices {
    pub visual_cue: usize,
    /// `None` when the sensation pool is empty.
    pub sensation: Option<usize>,
    pub location: usize,
    pub tone: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstantiation {
    pub condition_label: String,
    pub slots: PromptSlots,
    pub rendered: String,
    pub slot_indices: SlotIndices,
}

impl PromptInstantiation {
    /// True when `rendered` still matches the slots.
    pub fn is_consistent(&self) -> bool {
        render_prompt(&self.slots) == self.rendered
    }
}

pub fn is_valid_label(label: &str) -> bool {
    !label.is_empty()
        && label
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

/// Joins the non-empty slots in template order.
pub fn render_prompt(slots: &PromptSlots) -> String {
    [
        slots.visual_cues.trim(),
        slots.sensation.trim(),
        slots.physical_location.trim(),
        slots.skin_tone.descriptor.trim(),
    ]
    .into_iter()
    .filter(|s| !s.is_empty())
    .collect::<Vec<_>>()
    .join(SLOT_SEPARATOR)
}

/// Draws `per_condition` prompts for one condition.
///
/// Item `i` gets tone `spec.tones[i % T]`, so per-tone counts differ by at
/// most one. Pool choices come from a stream seeded by `(seed, label)`.
pub fn enumerate_instantiations(
    spec: &ConditionSpec,
    per_condition: usize,
    seed: u64,
) -> Vec<PromptInstantiation> {
    assert!(per_condition >= 1, "per_condition must be at least 1");
    assert!(!spec.tones.is_empty(), "condition has no tones");
    let mut rng = Rng::new(derive_seed(seed, &["prompts", &spec.label]));
    (0..per_condition)
        .map(|i| {
            let tone = i % spec.tones.len();
            let visual_cue = rng.index(spec.visual_cues_pool.len());
            let sensation = if spec.sensation_pool.is_empty() {
                None
            } else {
                Some(rng.index(spec.sensation_pool.len()))
            };
            let location = rng.index(spec.location_pool.len());
            let slots = PromptSlots {
                visual_cues: spec.visual_cues_pool[visual_cue].clone(),
                sensation: sensation
                    .map(|s| spec.sensation_pool[s].clone())
                    .unwrap_or_default(),
                physical_location: spec.location_pool[location].clone(),
                skin_tone: spec.tones[tone].clone(),
            };
            PromptInstantiation {
                condition_label: spec.label.clone(),
                rendered: render_prompt(&slots),
                slots,
                slot_indices: SlotIndices {
                    visual_cue,
                    sensation,
                    location,
                    tone,
                },
            }
        })
        .collect()
}

pub fn parse_spec_file(path: &Path) -> Result<Vec<ConditionSpec>, SpecError> {
    let text = std::fs::read_to_string(path).map_err(|source| SpecError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_spec_str(&text)
}

pub fn parse_spec_str(text: &str) -> Result<Vec<ConditionSpec>, SpecError> {
    let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        let (line, column) = e
            .span()
            .map(|span| line_col(text, span.start))
            .unwrap_or((0, 0));
        SpecError::MalformedFile {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;

    let descriptors = parse_tone_descriptors(doc.get("tone_descriptors"))?;

    let conditions = match doc.get("condition") {
        None => return Ok(Vec::new()),
        Some(toml::Value::Array(items)) => items,
        Some(_) => return Err(malformed("`condition` must be an array of tables")),
    };

    let mut seen = HashSet::new();
    let mut specs = Vec::with_capacity(conditions.len());
    for (n, item) in conditions.iter().enumerate() {
        let table = item
            .as_table()
            .ok_or_else(|| malformed(&format!("condition #{} is not a table", n + 1)))?;
        let spec = parse_condition(table, n, &descriptors)?;
        if !seen.insert(spec.label.clone()) {
            return Err(SpecError::DuplicateLabel(spec.label));
        }
        specs.push(spec);
    }
    Ok(specs)
}

fn malformed(message: &str) -> SpecError {
    SpecError::MalformedFile {
        line: 0,
        column: 0,
        message: message.to_string(),
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map(|i| i + 1).unwrap_or(0) + 1;
    (line, column)
}

fn parse_tone_descriptors(
    value: Option<&toml::Value>,
) -> Result<BTreeMap<FitzpatrickGrade, String>, SpecError> {
    let mut out: BTreeMap<_, _> = FitzpatrickGrade::ALL
        .into_iter()
        .map(|g| (g, g.default_descriptor().to_string()))
        .collect();
    let Some(value) = value else {
        return Ok(out);
    };
    let table = value
        .as_table()
        .ok_or_else(|| malformed("`tone_descriptors` must be a table"))?;
    for (key, v) in table {
        let grade = FitzpatrickGrade::parse(key).ok_or_else(|| {
            malformed(&format!("unknown Fitzpatrick grade `{key}` in tone_descriptors"))
        })?;
        let text = v
            .as_str()
            .ok_or_else(|| malformed(&format!("tone descriptor for {key} must be a string")))?;
        check_entry(text, "tone_descriptors", "<spec>")?;
        out.insert(grade, text.trim().to_string());
    }
    Ok(out)
}

fn check_entry(text: &str, field: &str, condition: &str) -> Result<(), SpecError> {
    let reason = if text.trim().is_empty() {
        "entry is empty"
    } else if text.contains('\n') || text.contains('\r') {
        "entry contains a newline"
    } else {
        return Ok(());
    };
    Err(SpecError::InvalidEntry {
        condition: condition.to_string(),
        field: field.to_string(),
        reason: reason.to_string(),
    })
}

fn parse_condition(
    table: &toml::Table,
    index: usize,
    descriptors: &BTreeMap<FitzpatrickGrade, String>,
) -> Result<ConditionSpec, SpecError> {
    let fallback_name = format!("#{}", index + 1);
    let label = match table.get("label") {
        Some(toml::Value::String(s)) => s.trim().to_string(),
        Some(_) => return Err(malformed(&format!("condition {fallback_name}: `label` must be a string"))),
        None => {
            return Err(SpecError::MissingField {
                condition: fallback_name,
                field: "label".into(),
            })
        }
    };
    if !is_valid_label(&label) {
        return Err(SpecError::InvalidLabel { condition: label });
    }
    let display_name = match table.get("display_name") {
        Some(toml::Value::String(s)) if !s.trim().is_empty() => s.trim().to_string(),
        Some(toml::Value::String(_)) | None => {
            return Err(SpecError::MissingField {
                condition: label,
                field: "display_name".into(),
            })
        }
        Some(_) => return Err(malformed(&format!("condition {label}: `display_name` must be a string"))),
    };

    let list = |field: &str| -> Result<Vec<String>, SpecError> {
        let Some(value) = table.get(field) else {
            return Ok(Vec::new());
        };
        let items = value
            .as_array()
            .ok_or_else(|| malformed(&format!("condition {label}: `{field}` must be a list")))?;
        items
            .iter()
            .map(|v| {
                let s = v.as_str().ok_or_else(|| {
                    malformed(&format!("condition {label}: `{field}` entries must be strings"))
                })?;
                check_entry(s, field, &label)?;
                Ok(s.trim().to_string())
            })
            .collect()
    };

    let visual_cues_pool = list("visual_cues")?;
    let sensation_pool = list("sensations")?;
    let location_pool = list("locations")?;
    for (pool, name) in [(&visual_cues_pool, "visual_cues"), (&location_pool, "locations")] {
        if pool.is_empty() {
            return Err(SpecError::EmptyPool {
                condition: label.clone(),
                pool: name.into(),
            });
        }
    }

    let tones = match table.get("tones") {
        None => FitzpatrickGrade::ALL.to_vec(),
        Some(_) => {
            let names = list("tones")?;
            let mut grades = Vec::new();
            for name in &names {
                let grade = FitzpatrickGrade::parse(name).ok_or_else(|| SpecError::InvalidEntry {
                    condition: label.clone(),
                    field: "tones".into(),
                    reason: format!("unknown Fitzpatrick grade `{name}`"),
                })?;
                if !grades.contains(&grade) {
                    grades.push(grade);
                }
            }
            if grades.is_empty() {
                return Err(SpecError::EmptyPool {
                    condition: label.clone(),
                    pool: "tones".into(),
                });
            }
            grades.sort();
            grades
        }
    }
    .into_iter()
    .map(|grade| SkinTone {
        grade,
        descriptor: descriptors[&grade].clone(),
    })
    .collect();

    Ok(ConditionSpec {
        label,
        display_name,
        visual_cues_pool,
        sensation_pool,
        location_pool,
        tones,
    })
}
