//! Lenient JSON parsing for LLM output.
//!
//! Parsing is tried once as-is; on failure exactly one repair pass runs and
//! the repaired text is parsed again. The repair pass:
//!
//! * strips a surrounding markdown code fence,
//! * undoubles `{{` / `}}` left over from format-string escaping,
//! * inserts a missing comma between adjacent objects (`} {`),
//! * removes trailing commas before `]` or `}`,
//! * closes unterminated strings and unbalanced brackets.

use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepairError {
    pub input: String,
    pub message: String,
}

impl std::fmt::Display for RepairError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "unparseable JSON after repair ({}): {}", self.message, self.input)
    }
}

impl std::error::Error for RepairError {}

/// Whether a value came out of the first parse or needed the repair pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parsed {
    Clean,
    Repaired,
}

pub fn parse_lenient(text: &str) -> Result<(Value, Parsed), RepairError> {
    let trimmed = text.trim();
    if let Ok(v) = serde_json::from_str(trimmed) {
        return Ok((v, Parsed::Clean));
    }
    let repaired = repair(trimmed);
    serde_json::from_str(&repaired)
        .map(|v| (v, Parsed::Repaired))
        .map_err(|e| RepairError {
            input: text.to_string(),
            message: e.to_string(),
        })
}

/// Removes a surrounding ```lang ... ``` fence, if any.
pub fn strip_code_fence(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let body = match rest.find('\n') {
        Some(nl) => &rest[nl + 1..],
        None => rest,
    };
    body.trim_end().strip_suffix("```").unwrap_or(body).trim()
}

pub fn repair(text: &str) -> String {
    let text = strip_code_fence(text);
    let text = if text.contains("{{") || text.contains("}}") {
        text.replace("{{", "{").replace("}}", "}")
    } else {
        text.to_string()
    };

    let mut out = String::with_capacity(text.len() + 8);
    let mut stack: Vec<char> = Vec::new();
    let mut in_string = false;
    let mut escaped = false;
    for c in text.chars() {
        if in_string {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' => {
                in_string = true;
                out.push(c);
            }
            '{' | '[' => {
                if c == '{' && out.trim_end().ends_with('}') {
                    out.push_str(", ");
                }
                stack.push(if c == '{' { '}' } else { ']' });
                out.push(c);
            }
            '}' | ']' => {
                drop_trailing_comma(&mut out);
                // Closers that don't match are dropped; missing ones are
                // supplied at the end.
                if stack.last() == Some(&c) {
                    stack.pop();
                    out.push(c);
                } else if stack.contains(&c) {
                    while let Some(top) = stack.pop() {
                        out.push(top);
                        if top == c {
                            break;
                        }
                    }
                }
            }
            _ => out.push(c),
        }
    }
    if in_string {
        out.push('"');
    }
    drop_trailing_comma(&mut out);
    while let Some(top) = stack.pop() {
        out.push(top);
    }
    out
}

fn drop_trailing_comma(out: &mut String) {
    let trimmed_len = out.trim_end().len();
    if out[..trimmed_len].ends_with(',') {
        out.truncate(trimmed_len - 1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn clean_json_is_untouched() {
        let (v, how) = parse_lenient(r#"{"a": 1}"#).unwrap();
        assert_eq!(v, json!({"a": 1}));
        assert_eq!(how, Parsed::Clean);
    }

    #[test]
    fn trailing_comma_and_missing_bracket() {
        let (v, how) = parse_lenient(r#"[{"en": "Book", "de": "Schrift"},"#).unwrap();
        assert_eq!(v, json!([{"en": "Book", "de": "Schrift"}]));
        assert_eq!(how, Parsed::Repaired);
        let (v, _) = parse_lenient(r#"{"a": [1, 2,], }"#).unwrap();
        assert_eq!(v, json!({"a": [1, 2]}));
    }

    #[test]
    fn adjacent_objects_get_a_comma() {
        let (v, _) = parse_lenient(r#"[{"a": 1} {"a": 2}]"#).unwrap();
        assert_eq!(v, json!([{"a": 1}, {"a": 2}]));
    }

    #[test]
    fn doubled_braces_are_undone() {
        let (v, _) = parse_lenient(r#"[{{"en": "Moses", "de": "Musa"}}]"#).unwrap();
        assert_eq!(v, json!([{"en": "Moses", "de": "Musa"}]));
    }

    #[test]
    fn fenced_block() {
        let (v, _) = parse_lenient("```json\n{\"translation\": \"Hi\"}\n```").unwrap();
        assert_eq!(v, json!({"translation": "Hi"}));
    }

    #[test]
    fn unterminated_string_is_closed() {
        let (v, _) = parse_lenient(r#"{"translation": "The commission"#).unwrap();
        assert_eq!(v, json!({"translation": "The commission"}));
    }

    #[test]
    fn hopeless_input_fails() {
        assert!(parse_lenient("translation: none").is_err());
    }

    #[test]
    fn braces_inside_strings_survive() {
        let (v, _) = parse_lenient(r#"{"a": "x } y {{z",}"#).unwrap();
        assert_eq!(v, json!({"a": "x } y {z"}));
    }
}
