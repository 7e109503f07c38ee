//! Extraction of JSON objects from loosely formatted model responses:
//! surrounding prose (including stray quotes), markdown code fences, and
//! trailing commentary are tolerated by scanning for balanced `{...}`
//! candidates and parsing the first one that is valid JSON.

use serde_json::Value;

/// Parse the first valid JSON object found in `input`. Returns an error
/// string when no candidate parses.
pub fn parse_object_relaxed(input: &str) -> Result<Value, String> {
    let trimmed = strip_code_fences(input.trim());
    if let Ok(v) = serde_json::from_str::<Value>(trimmed) {
        if v.is_object() {
            return Ok(v);
        }
    }
    let mut search_from = 0;
    let mut last_error: Option<String> = None;
    while let Some(rel) = trimmed[search_from..].find('{') {
        let start = search_from + rel;
        if let Some(len) = balanced_object_len(&trimmed[start..]) {
            let candidate = &trimmed[start..start + len];
            match serde_json::from_str::<Value>(candidate) {
                Ok(v) if v.is_object() => return Ok(v),
                Ok(_) => last_error = Some("extracted JSON is not an object".to_string()),
                Err(e) => last_error = Some(format!("invalid JSON in candidate object: {e}")),
            }
        }
        // Advance past this '{' and keep looking; prose around the real
        // object may contain braces or unpaired quotes.
        search_from = start + 1;
    }
    Err(last_error.unwrap_or_else(|| "no balanced JSON object found".to_string()))
}

fn strip_code_fences(s: &str) -> &str {
    let s = s.trim();
    let s = s.strip_prefix("```json").or_else(|| s.strip_prefix("```")).unwrap_or(s);
    let s = s.strip_suffix("```").unwrap_or(s);
    s.trim()
}

/// Length of the balanced `{...}` block starting at byte 0 of `s` (which
/// must begin with `{`). String literals and escapes are honored so braces
/// inside values do not end the scan early.
fn balanced_object_len(s: &str) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut esc = false;
    for (i, ch) in s.char_indices() {
        if in_str {
            if esc {
                esc = false;
            } else if ch == '\\' {
                esc = true;
            } else if ch == '"' {
                in_str = false;
            }
            continue;
        }
        match ch {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(i + ch.len_utf8());
                }
            }
            _ => {}
        }
    }
    None
}

/// First balanced `{...}` slice in `s`, if any.
pub fn extract_balanced_object(s: &str) -> Option<&str> {
    let mut search_from = 0;
    while let Some(rel) = s[search_from..].find('{') {
        let start = search_from + rel;
        if let Some(len) = balanced_object_len(&s[start..]) {
            return Some(&s[start..start + len]);
        }
        search_from = start + 1;
    }
    None
}
