//! String transforms applied to a semantic variable's value when it is exchanged
//! between requests.

use alloc::format;
use alloc::string::{String, ToString};
use core::fmt;
use core::str::FromStr;

use regex_automata::meta::Regex;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransformError {
    #[error("invalid transform spec `{spec}`: {reason}")]
    InvalidSpec { spec: String, reason: String },
    #[error("transform `{transform}` failed: {detail}")]
    Failed { transform: String, detail: String },
}

/// Something that maps one text value to another, or fails with a diagnostic.
///
/// The built-in [`TransformSpec`] kinds implement this; embedders may register
/// their own implementations with the service layer.
pub trait TextTransform {
    fn apply(&self, input: &str) -> Result<String, TransformError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransformSpec {
    Identity,
    /// Dot-separated path into a JSON document; numeric components index arrays.
    JsonField(String),
    RegexExtract { pattern: String, group: usize },
    SplitSelect { separator: String, index: usize },
    TemplateWrap { prefix: String, suffix: String },
}

impl TransformSpec {
    /// Checks the spec's preconditions (pattern compiles, separator non-empty).
    pub fn validate(&self) -> Result<(), TransformError> {
        match self {
            TransformSpec::JsonField(path) if path.is_empty() => Err(self.invalid("empty JSON path")),
            TransformSpec::RegexExtract { pattern, group } => {
                let re = Regex::new(pattern).map_err(|e| self.invalid(&e.to_string()))?;
                if *group >= re.group_info().group_len(regex_automata::PatternID::ZERO) {
                    return Err(self.invalid("capture group out of range"));
                }
                Ok(())
            }
            TransformSpec::SplitSelect { separator, .. } if separator.is_empty() => {
                Err(self.invalid("empty separator"))
            }
            _ => Ok(()),
        }
    }

    fn invalid(&self, reason: &str) -> TransformError {
        TransformError::InvalidSpec {
            spec: self.to_string(),
            reason: reason.to_string(),
        }
    }

    fn failed(&self, detail: String) -> TransformError {
        TransformError::Failed {
            transform: self.to_string(),
            detail,
        }
    }
}

impl TextTransform for TransformSpec {
    fn apply(&self, input: &str) -> Result<String, TransformError> {
        apply_transform(self, input)
    }
}

/// Applies `spec` to `input`. Pure; either returns the whole value or fails.
pub fn apply_transform(spec: &TransformSpec, input: &str) -> Result<String, TransformError> {
    match spec {
        TransformSpec::Identity => Ok(input.to_string()),
        TransformSpec::JsonField(path) => {
            if path.is_empty() {
                return Err(spec.invalid("empty JSON path"));
            }
            let doc: serde_json::Value = serde_json::from_str(input)
                .map_err(|e| spec.failed(format!("input is not JSON: {e}")))?;
            let mut cur = &doc;
            for key in path.split('.') {
                let next = match cur {
                    serde_json::Value::Object(map) => map.get(key),
                    serde_json::Value::Array(items) => key.parse::<usize>().ok().and_then(|i| items.get(i)),
                    _ => None,
                };
                cur = next.ok_or_else(|| spec.failed(format!("missing JSON path `{path}` at `{key}`")))?;
            }
            Ok(match cur {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            })
        }
        TransformSpec::RegexExtract { pattern, group } => {
            let re = Regex::new(pattern).map_err(|e| spec.invalid(&e.to_string()))?;
            if *group >= re.group_info().group_len(regex_automata::PatternID::ZERO) {
                return Err(spec.invalid("capture group out of range"));
            }
            let mut caps = re.create_captures();
            re.captures(input, &mut caps);
            if !caps.is_match() {
                return Err(spec.failed(format!("pattern `{pattern}` did not match")));
            }
            caps.get_group(*group)
                .map(|span| input[span.range()].to_string())
                .ok_or_else(|| spec.failed(format!("group {group} did not participate in the match")))
        }
        TransformSpec::SplitSelect { separator, index } => {
            if separator.is_empty() {
                return Err(spec.invalid("empty separator"));
            }
            input
                .split(separator.as_str())
                .nth(*index)
                .map(|s| s.to_string())
                .ok_or_else(|| spec.failed(format!("index {index} out of range")))
        }
        TransformSpec::TemplateWrap { prefix, suffix } => {
            let mut out = String::with_capacity(prefix.len() + input.len() + suffix.len());
            out.push_str(prefix);
            out.push_str(input);
            out.push_str(suffix);
            Ok(out)
        }
    }
}

/// Textual forms: `identity` (or empty), `json:PATH`, `regex:PATTERN:GROUP`,
/// `split:SEP:IDX`, `wrap:PRE:SUF`.
///
/// For `regex` and `split` the trailing `:N` is the number, so patterns and
/// separators may contain colons. For `wrap` the prefix ends at the first colon.
impl FromStr for TransformSpec {
    type Err = TransformError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let invalid = |reason: &str| TransformError::InvalidSpec {
            spec: s.to_string(),
            reason: reason.to_string(),
        };
        if s.is_empty() || s == "identity" {
            return Ok(TransformSpec::Identity);
        }
        let (kind, rest) = s.split_once(':').ok_or_else(|| invalid("unknown transform"))?;
        let spec = match kind {
            "json" => TransformSpec::JsonField(rest.to_string()),
            "regex" => {
                let (pattern, group) = rest.rsplit_once(':').ok_or_else(|| invalid("expected regex:PATTERN:GROUP"))?;
                let group = group.parse().map_err(|_| invalid("group must be a non-negative integer"))?;
                TransformSpec::RegexExtract {
                    pattern: pattern.to_string(),
                    group,
                }
            }
            "split" => {
                let (separator, index) = rest.rsplit_once(':').ok_or_else(|| invalid("expected split:SEP:IDX"))?;
                let index = index.parse().map_err(|_| invalid("index must be a non-negative integer"))?;
                TransformSpec::SplitSelect {
                    separator: unescape(separator),
                    index,
                }
            }
            "wrap" => {
                let (prefix, suffix) = rest.split_once(':').ok_or_else(|| invalid("expected wrap:PRE:SUF"))?;
                TransformSpec::TemplateWrap {
                    prefix: unescape(prefix),
                    suffix: unescape(suffix),
                }
            }
            _ => return Err(invalid("unknown transform")),
        };
        spec.validate().map_err(|e| match e {
            TransformError::InvalidSpec { reason, .. } => invalid(&reason),
            other => other,
        })?;
        Ok(spec)
    }
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformSpec::Identity => f.write_str("identity"),
            TransformSpec::JsonField(path) => write!(f, "json:{path}"),
            TransformSpec::RegexExtract { pattern, group } => write!(f, "regex:{pattern}:{group}"),
            TransformSpec::SplitSelect { separator, index } => write!(f, "split:{}:{index}", escape(separator)),
            TransformSpec::TemplateWrap { prefix, suffix } => write!(f, "wrap:{}:{}", escape(prefix), escape(suffix)),
        }
    }
}

// `\n` and `\t` escapes so separators and wrappers survive a one-line wire field.
fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\\' => out.push_str("\\\\"),
            c => out.push(c),
        }
    }
    out
}
