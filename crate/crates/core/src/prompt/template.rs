use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use super::transform::TransformSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Input,
    Output,
}

impl Direction {
    pub fn keyword(self) -> &'static str {
        match self {
            Direction::Input => "input",
            Direction::Output => "output",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placeholder {
    pub name: String,
    pub direction: Direction,
    pub transform: Option<TransformSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Text(String),
    Placeholder(Placeholder),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("malformed placeholder at byte {offset}: {reason}")]
    MalformedPlaceholder { offset: usize, reason: &'static str },
    #[error("placeholder name `{0}` appears more than once")]
    DuplicatePlaceholderName(String),
    #[error("template declares more than one output placeholder")]
    MultipleOutputs,
}

/// A prompt split into constant text and `{{input:NAME}}` / `{{output:NAME}}`
/// placeholders, in textual order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PromptTemplate {
    segments: Vec<Segment>,
}

impl PromptTemplate {
    /// Builds a template from segments, enforcing the same invariants as the parser.
    pub fn from_segments(segments: Vec<Segment>) -> Result<Self, TemplateError> {
        let mut names = BTreeSet::new();
        let mut outputs = 0;
        for seg in &segments {
            if let Segment::Placeholder(p) = seg {
                if !valid_name(&p.name) {
                    return Err(TemplateError::MalformedPlaceholder {
                        offset: 0,
                        reason: "invalid placeholder name",
                    });
                }
                if !names.insert(p.name.clone()) {
                    return Err(TemplateError::DuplicatePlaceholderName(p.name.clone()));
                }
                if p.direction == Direction::Output {
                    outputs += 1;
                    if outputs > 1 {
                        return Err(TemplateError::MultipleOutputs);
                    }
                }
            }
        }
        Ok(PromptTemplate { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &Placeholder> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Placeholder(p) => Some(p),
            Segment::Text(_) => None,
        })
    }

    pub fn placeholder_mut(&mut self, name: &str) -> Option<&mut Placeholder> {
        self.segments.iter_mut().find_map(|s| match s {
            Segment::Placeholder(p) if p.name == name => Some(p),
            _ => None,
        })
    }

    pub fn inputs(&self) -> impl Iterator<Item = &Placeholder> {
        self.placeholders().filter(|p| p.direction == Direction::Input)
    }

    pub fn output(&self) -> Option<&Placeholder> {
        self.placeholders().find(|p| p.direction == Direction::Output)
    }

    /// Re-serializes the template; for parsed templates this is the original text.
    pub fn to_source(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => f.write_str(t)?,
                Segment::Placeholder(p) => write!(f, "{{{{{}:{}}}}}", p.direction.keyword(), p.name)?,
            }
        }
        Ok(())
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

/// Parses `{{input:NAME}}` / `{{output:NAME}}` placeholders out of `text`.
///
/// Literal `{{` or `}}` outside a placeholder is rejected; there is no escaping.
pub fn parse_prompt_template(text: &str) -> Result<PromptTemplate, TemplateError> {
    let bytes = text.as_bytes();
    let mut segments = Vec::new();
    let mut literal_start = 0;
    let mut i = 0;
    while i + 1 < bytes.len() {
        if bytes[i] == b'}' && bytes[i + 1] == b'}' {
            return Err(TemplateError::MalformedPlaceholder {
                offset: i,
                reason: "`}}` without opening `{{`",
            });
        }
        if bytes[i] != b'{' || bytes[i + 1] != b'{' {
            i += 1;
            continue;
        }
        let open = i;
        let body_start = i + 2;
        let close = text[body_start..]
            .find("}}")
            .map(|rel| body_start + rel)
            .ok_or(TemplateError::MalformedPlaceholder {
                offset: open,
                reason: "unterminated `{{`",
            })?;
        let body = &text[body_start..close];
        let (keyword, name) = body.split_once(':').ok_or(TemplateError::MalformedPlaceholder {
            offset: open,
            reason: "expected `input:NAME` or `output:NAME`",
        })?;
        let direction = match keyword {
            "input" => Direction::Input,
            "output" => Direction::Output,
            _ => {
                return Err(TemplateError::MalformedPlaceholder {
                    offset: open,
                    reason: "unknown placeholder direction",
                })
            }
        };
        if name.is_empty() {
            return Err(TemplateError::MalformedPlaceholder {
                offset: open,
                reason: "empty placeholder name",
            });
        }
        if !valid_name(name) {
            return Err(TemplateError::MalformedPlaceholder {
                offset: open,
                reason: "placeholder name must match [A-Za-z0-9_]+",
            });
        }
        if open > literal_start {
            segments.push(Segment::Text(text[literal_start..open].to_string()));
        }
        segments.push(Segment::Placeholder(Placeholder {
            name: name.to_string(),
            direction,
            transform: None,
        }));
        i = close + 2;
        literal_start = i;
    }
    if literal_start < bytes.len() {
        segments.push(Segment::Text(text[literal_start..].to_string()));
    }
    PromptTemplate::from_segments(segments)
}
