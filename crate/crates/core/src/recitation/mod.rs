//! Recitation generation: few-shot prompts, k-way sampling and strict parsing
//! of the sampled (document, answer) pairs.

mod generate;
mod parse;
mod template;

pub use generate::{generate_many, generate_recitations, RecitationConfig};
pub use parse::{parse_recitation, parse_recitation_with, ParsedRecitation};
pub use template::{
    build_recitation_prompt, RecitationExemplar, RecitationMarkers, RecitationPromptTemplate,
    TemplateError,
};
pub(crate) use template::check_markers;
