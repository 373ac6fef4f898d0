//! Prompt framing shared by the chat-driven stages.
//!
//! Every prompt opens with a `TASK: <name>` line and carries its structured
//! inputs on a single `INPUT: <json>` line, so free text never breaks the
//! enclosing structure and rule-based backends can recover the inputs.

use serde_json::Value;

pub const TASK_DECOMPOSE: &str = "decompose";
pub const TASK_SUMMARIZE: &str = "summarize";
pub const TASK_JUDGE: &str = "judge";

const TASK_PREFIX: &str = "TASK: ";
const INPUT_PREFIX: &str = "INPUT: ";

pub fn task_line(task: &str) -> String {
    format!("{TASK_PREFIX}{task}")
}

pub fn input_line(input: &Value) -> String {
    format!("{INPUT_PREFIX}{input}")
}

/// Recovers `(task, input)` from a prompt built with [`task_line`] and [`input_line`].
pub fn parse_framed(prompt: &str) -> Option<(String, Value)> {
    let mut lines = prompt.lines();
    let task = lines.next()?.strip_prefix(TASK_PREFIX)?.trim().to_string();
    let input =
        prompt.lines().find_map(|l| l.strip_prefix(INPUT_PREFIX)).and_then(|raw| serde_json::from_str(raw).ok())?;
    Some((task, input))
}

/// Strips a surrounding Markdown code fence, if any.
pub fn strip_code_fence(raw: &str) -> &str {
    let t = raw.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.strip_prefix("json").unwrap_or(rest);
    rest.strip_suffix("```").unwrap_or(rest).trim()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn framing_round_trips_awkward_text() {
        let input = json!({"claim": "line one\nINPUT: \"quoted\"", "n": 3});
        let prompt = format!("{}\nsome prose\n{}\ntrailer", task_line(TASK_JUDGE), input_line(&input));
        let (task, back) = parse_framed(&prompt).unwrap();
        assert_eq!(task, TASK_JUDGE);
        assert_eq!(back, input);
    }

    #[test]
    fn fences() {
        assert_eq!(strip_code_fence("```json\n{\"a\":1}\n```"), "{\"a\":1}");
        assert_eq!(strip_code_fence("  {}  "), "{}");
    }
}
