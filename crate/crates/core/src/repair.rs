//! Recovery of JSON objects from free-form model completions.
//!
//! Pipeline: parse as-is, else strip Markdown code fences, else take the
//! first balanced `{...}` object in the text.

use serde_json::Value;

/// Removes a surrounding ```` ``` ```` / ```` ```json ```` fence if present.
pub fn strip_fences(text: &str) -> &str {
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

/// First balanced JSON object in `text`, honouring string literals and escapes.
pub fn extract_first_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Parses a JSON object out of a completion, applying the repair steps in order.
pub fn repair_json(text: &str) -> Result<Value, String> {
    let candidates = [Some(text.trim()), Some(strip_fences(text)), extract_first_object(text)];
    let mut last_err = String::from("no JSON object found");
    for c in candidates.into_iter().flatten() {
        match serde_json::from_str::<Value>(c) {
            Ok(v) if v.is_object() => return Ok(v),
            Ok(_) => last_err = "top-level JSON value is not an object".into(),
            Err(e) => last_err = e.to_string(),
        }
    }
    Err(last_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn plain_object() {
        assert_eq!(repair_json(r#"{"a": 1}"#).unwrap(), json!({"a": 1}));
    }

    #[test]
    fn fenced_object() {
        let text = "```json\n{\"persona\": \"x\", \"inner_monologue\": \"y\"}\n```";
        assert_eq!(repair_json(text).unwrap()["persona"], "x");
    }

    #[test]
    fn object_embedded_in_prose() {
        let text = r#"Sure! Here it is: {"output": {"nested": "}"}} hope that helps {"b":2}"#;
        assert_eq!(extract_first_object(text), Some(r#"{"output": {"nested": "}"}}"#));
        assert_eq!(repair_json(text).unwrap()["output"]["nested"], "}");
    }

    #[test]
    fn hopeless_input() {
        assert!(repair_json("no json here").is_err());
        assert!(repair_json("[1, 2]").is_err());
        assert!(repair_json("{\"a\": ").is_err());
    }
}
