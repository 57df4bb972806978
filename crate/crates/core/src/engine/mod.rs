mod cost;
mod kv;
mod sim;

pub use cost::CostModel;
pub use kv::{OutOfMemory, PagedKvStore};
pub use sim::{script_tokens, Context, EngineError, Finish, LlmEngine, SimEngine, StepReport};
