//! Prompt structure: templates with placeholders, semantic variables,
//! value transforms and the reference tokenizer.

mod template;
mod tokenizer;
mod transform;
mod variable;

pub use template::{parse_prompt_template, Direction, Placeholder, PromptTemplate, Segment, TemplateError};
pub use tokenizer::{TokenSeq, Tokenizer, UnknownToken};
pub use transform::{apply_transform, TextTransform, TransformError, TransformSpec};
pub use variable::{
    CriterionSource, Failure, FailureKind, PerfCriterion, SemanticVariable, VarError, VarState,
};
