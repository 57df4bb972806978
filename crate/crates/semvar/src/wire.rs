//! JSON bodies of the HTTP API and the mapping from manager errors to
//! status codes.

use std::collections::BTreeMap;

use semvar_core::dag::{DagError, Sampling};
use semvar_core::prompt::{Direction, Failure, PerfCriterion, TransformSpec};
use semvar_core::service::{Binding, ServiceError, SubmitSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaceholderBody {
    pub name: String,
    /// `true` for an input placeholder.
    pub in_out: bool,
    pub semantic_var_id: String,
    pub transforms: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingBody {
    pub max_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<String>,
    #[serde(default)]
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitBody {
    pub prompt: String,
    pub placeholders: Vec<PlaceholderBody>,
    pub session_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<SamplingBody>,
    /// Text the simulated engine generates for this call.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GetBody {
    pub semantic_var_id: String,
    pub criteria: String,
    pub session_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetBody {
    pub session_id: String,
    pub semantic_var_id: String,
    pub value: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionBody {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub request_id: u64,
    /// Placeholder name to bound variable id.
    pub semantic_var_ids: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GetResponse {
    pub semantic_var_id: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub producer: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<String>,
}

/// An error ready to be sent: HTTP status plus body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: u16,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: u16, error: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody { error: error.into(), message: message.into(), producer: None, transform: None },
        }
    }

    pub fn malformed(message: impl Into<String>) -> Self {
        Self::new(400, "malformed_body", message)
    }

    pub fn timeout(var: &str) -> Self {
        Self::new(504, "timeout", format!("variable `{var}` not ready before the deadline"))
    }

    /// A variable that ended Failed.
    pub fn upstream(f: &Failure) -> Self {
        ApiError {
            status: 424,
            body: ErrorBody {
                error: f.kind.as_str().into(),
                message: f.message.clone(),
                producer: f.producer.map(|p| p.0),
                transform: f.transform.clone(),
            },
        }
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let msg = e.to_string();
        match e {
            ServiceError::UnknownSession(_) => Self::new(404, "unknown_session", msg),
            ServiceError::UnknownVariable(_) => Self::new(404, "unknown_variable", msg),
            ServiceError::DuplicateSession(_) => Self::new(409, "duplicate_session", msg),
            ServiceError::SessionClosed(_) => Self::new(409, "session_closed", msg),
            ServiceError::AlreadySet(_) => Self::new(409, "already_set", msg),
            ServiceError::Template(_) => Self::new(400, "malformed_placeholder", msg),
            ServiceError::Binding { .. } => Self::new(400, "malformed_body", msg),
            ServiceError::Dag(DagError::DuplicateProducer { .. }) => Self::new(409, "duplicate_producer", msg),
            ServiceError::Dag(DagError::CycleDetected(_)) => Self::new(400, "cycle_detected", msg),
            ServiceError::Dag(_) => Self::new(400, "malformed_body", msg),
        }
    }
}

pub fn parse_criteria(s: &str) -> Result<Option<PerfCriterion>, ApiError> {
    match s {
        "" => Ok(None),
        "latency" => Ok(Some(PerfCriterion::Latency)),
        "throughput" => Ok(Some(PerfCriterion::Throughput)),
        other => Err(ApiError::malformed(format!("unknown criteria `{other}`"))),
    }
}

pub fn criteria_str(c: Option<PerfCriterion>) -> &'static str {
    c.map_or("", PerfCriterion::as_str)
}

impl SubmitBody {
    pub fn to_spec(&self) -> Result<SubmitSpec, ApiError> {
        let bindings = self
            .placeholders
            .iter()
            .map(|p| {
                let transform = match p.transforms.as_str() {
                    "" => None,
                    t => Some(
                        t.parse::<TransformSpec>()
                            .map_err(|e| ApiError::malformed(format!("placeholder `{}`: {e}", p.name)))?,
                    ),
                };
                Ok(Binding {
                    name: p.name.clone(),
                    direction: if p.in_out { Direction::Input } else { Direction::Output },
                    var: (!p.semantic_var_id.is_empty()).then(|| p.semantic_var_id.as_str().into()),
                    transform,
                })
            })
            .collect::<Result<Vec<_>, ApiError>>()?;
        let sampling = match &self.sampling {
            Some(s) => Sampling { max_tokens: s.max_tokens, stop: s.stop.clone(), temperature: s.temperature },
            None => Sampling::default(),
        };
        Ok(SubmitSpec {
            session: self.session_id.as_str().into(),
            prompt: self.prompt.clone(),
            bindings,
            sampling,
            script: self.script.clone(),
        })
    }
}

/// Parses a body, mapping JSON errors to 400.
pub fn parse_body<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::malformed(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonical_submit_body() {
        let body = r#"{"prompt":"Code: {{output:code}}","placeholders":[{"name":"code","in_out":false,"semantic_var_id":"v1","transforms":"identity"}],"session_id":"s0"}"#;
        let parsed: SubmitBody = parse_body(body.as_bytes()).unwrap();
        assert_eq!(serde_json::to_string(&parsed).unwrap(), body);
        let spec = parsed.to_spec().unwrap();
        assert_eq!(spec.bindings[0].direction, Direction::Output);
        assert_eq!(spec.bindings[0].transform, Some(TransformSpec::Identity));
    }

    #[test]
    fn canonical_get_body() {
        let body = r#"{"semantic_var_id":"test","criteria":"latency","session_id":"s0"}"#;
        let parsed: GetBody = parse_body(body.as_bytes()).unwrap();
        assert_eq!(serde_json::to_string(&parsed).unwrap(), body);
        assert_eq!(parse_criteria(&parsed.criteria).unwrap(), Some(PerfCriterion::Latency));
    }

    #[test]
    fn bad_inputs() {
        assert_eq!(parse_criteria("fast").unwrap_err().status, 400);
        assert_eq!(parse_body::<GetBody>(b"{\"semantic_var_id\":1}").unwrap_err().status, 400);
        assert_eq!(parse_body::<GetBody>(b"not json").unwrap_err().status, 400);
        let b = SubmitBody {
            prompt: "{{output:x}}".into(),
            placeholders: vec![PlaceholderBody {
                name: "x".into(),
                in_out: false,
                semantic_var_id: String::new(),
                transforms: "regex:(:0".into(),
            }],
            session_id: "s".into(),
            sampling: None,
            script: None,
        };
        assert_eq!(b.to_spec().unwrap_err().status, 400);
    }

    fn text() -> impl Strategy<Value = String> {
        "[ -~\\n\u{e9}\u{4e2d}]{0,16}"
    }

    fn submit_body() -> impl Strategy<Value = SubmitBody> {
        let ph = (text(), any::<bool>(), text(), text()).prop_map(|(name, in_out, semantic_var_id, transforms)| {
            PlaceholderBody { name, in_out, semantic_var_id, transforms }
        });
        let sampling = proptest::option::of(
            (0usize..2048, proptest::option::of(text()), 0u8..20)
                .prop_map(|(max_tokens, stop, t)| SamplingBody { max_tokens, stop, temperature: t as f64 / 10.0 }),
        );
        (text(), proptest::collection::vec(ph, 0..4), text(), sampling, proptest::option::of(text())).prop_map(
            |(prompt, placeholders, session_id, sampling, script)| SubmitBody {
                prompt,
                placeholders,
                session_id,
                sampling,
                script,
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn submit_round_trip(b in submit_body()) {
            let s = serde_json::to_string(&b).unwrap();
            let back: SubmitBody = parse_body(s.as_bytes()).unwrap();
            prop_assert_eq!(&back, &b);
            prop_assert_eq!(serde_json::to_string(&back).unwrap(), s);
        }

        #[test]
        fn get_round_trip(v in text(), c in prop_oneof![Just(""), Just("latency"), Just("throughput")], s in text()) {
            let b = GetBody { semantic_var_id: v, criteria: c.into(), session_id: s };
            let json = serde_json::to_string(&b).unwrap();
            let back: GetBody = parse_body(json.as_bytes()).unwrap();
            prop_assert_eq!(serde_json::to_string(&back).unwrap(), json);
            prop_assert_eq!(back, b);
        }
    }
}
