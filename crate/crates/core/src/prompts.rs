//! Versioned prompt templates. Placeholders are written `{{name}}`.

pub const NORMALIZE_TSG: &str = include_str!("../resources/prompts/normalize_tsg.v1.txt");
pub const HISTORY_ENHANCER: &str = include_str!("../resources/prompts/history_enhancer.v1.txt");
pub const INTENT_INTERPRETER: &str = include_str!("../resources/prompts/intent_interpreter.v1.txt");
pub const NODE_SELECTOR: &str = include_str!("../resources/prompts/node_selector.v1.txt");
pub const ACTION_PLANNER: &str = include_str!("../resources/prompts/action_planner.v1.txt");
pub const POST_PROCESSOR: &str = include_str!("../resources/prompts/post_processor.v1.txt");

/// Substitutes every `{{name}}` with its value. Unknown placeholders are
/// left as they are.
pub fn render(template: &str, values: &[(&str, &str)]) -> String {
    values
        .iter()
        .fold(template.to_string(), |text, (name, value)| {
            text.replace(&format!("{{{{{name}}}}}"), value)
        })
}
