//! Parsers for raw model output.

use std::collections::HashSet;

use serde_json::Value;

/// Most groups a ranking may name.
pub const MAX_RANKED_GROUPS: usize = 5;

/// Parses a JSON array of `{"question": "..."}` objects.
///
/// A surrounding markdown code fence is tolerated. Elements without a
/// non-empty `question` string are skipped; bare strings are accepted.
pub fn parse_questions(raw: &str) -> Result<Vec<String>, String> {
    let body = strip_code_fence(raw.trim());
    let value: Value = serde_json::from_str(body).map_err(|e| e.to_string())?;
    let Value::Array(items) = value else {
        return Err("expected a JSON array".into());
    };
    let questions = items
        .into_iter()
        .filter_map(|item| match item {
            Value::Object(mut obj) => match obj.remove("question") {
                Some(Value::String(q)) => Some(q),
                _ => None,
            },
            Value::String(q) => Some(q),
            _ => None,
        })
        .map(|q| q.trim().to_string())
        .filter(|q| !q.is_empty())
        .collect();
    Ok(questions)
}

fn strip_code_fence(s: &str) -> &str {
    let Some(inner) = s.strip_prefix("```") else {
        return s;
    };
    // drop the info string ("json") on the opening fence line
    let inner = inner.split_once('\n').map_or("", |(_, body)| body);
    inner.trim_end().strip_suffix("```").unwrap_or(inner).trim()
}

/// Parses a comma-separated list of 1-based group numbers.
///
/// Tokens are trimmed; anything that is not an integer in `1..=group_count`,
/// or repeats an earlier number, is dropped. At most [`MAX_RANKED_GROUPS`]
/// numbers are kept. Returns `None` when nothing valid remains.
pub fn parse_rank(raw: &str, group_count: usize) -> Option<Vec<usize>> {
    let mut seen = HashSet::new();
    let ranked: Vec<usize> = raw
        .split(',')
        .map(str::trim)
        .filter(|tok| !tok.is_empty() && tok.bytes().all(|b| b.is_ascii_digit()))
        .filter_map(|tok| tok.parse::<usize>().ok())
        .filter(|&n| (1..=group_count).contains(&n))
        .filter(|&n| seen.insert(n))
        .take(MAX_RANKED_GROUPS)
        .collect();
    (!ranked.is_empty()).then_some(ranked)
}
