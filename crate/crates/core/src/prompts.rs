//! Versioned prompt templates.
//!
//! Placeholders are `{name}`; rendering is a single left-to-right pass, so
//! braces inside substituted text (or the templates' JSON examples) are never
//! expanded.

pub const PROMPT_VERSION: &str = "v1";

pub const QA_GENERATION: &str = include_str!("../prompts/qa_generation.v1.txt");
pub const REPHRASE: &str = include_str!("../prompts/rephrase.v1.txt");
pub const ERROR_PATTERN: &str = include_str!("../prompts/error_pattern.v1.txt");
pub const TESTEE: &str = include_str!("../prompts/testee.v1.txt");

/// Substitute `{key}` for each known key; other braces are copied verbatim.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let template = template.trim_end();
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open + 1..];
        let hit = tail.find('}').and_then(|close| {
            let name = &tail[..close];
            vars.iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &tail[close + 1..];
            }
            None => {
                out.push('{');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn qa_generation(num_of_qa: usize, title: &str, context: &str) -> String {
    render(
        QA_GENERATION,
        &[
            ("num_of_qa", &num_of_qa.to_string()),
            ("title", title),
            ("context", context),
        ],
    )
}

pub fn rephrase(num_of_qa: usize, title: &str, context: &str, question: &str) -> String {
    render(
        REPHRASE,
        &[
            ("num_of_qa", &num_of_qa.to_string()),
            ("title", title),
            ("context", context),
            ("question", question),
        ],
    )
}

pub fn error_pattern(context: &str, question: &str, answer: &str, llm_answer: &str) -> String {
    render(
        ERROR_PATTERN,
        &[
            ("context", context),
            ("question", question),
            ("answer", answer),
            ("llm_answer", llm_answer),
        ],
    )
}

/// `options` are already labelled ("A: ..."), one per line.
pub fn testee(topic: &str, question: &str, options: &[String]) -> String {
    render(
        TESTEE,
        &[
            ("topic", topic),
            ("que", question),
            ("opts", &options.join("\n")),
        ],
    )
}
