//! Parsing of model replies into task labels.
//!
//! Replies are free text. The first balanced JSON object is extracted after
//! dropping code fences; anything before or after it is ignored.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use visfocus_core::counting::{bucket, CountBucket};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Presence {
    True,
    False,
    Unsure,
}

impl Presence {
    pub fn as_str(self) -> &'static str {
        match self {
            Presence::True => "True",
            Presence::False => "False",
            Presence::Unsure => "Unsure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PresenceAnswer {
    pub value: Presence,
    pub comment: Option<String>,
    /// The reply declined the task and carried no usable JSON.
    pub refusal: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountAnswer {
    pub bucket: CountBucket,
    pub crowd: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("no JSON object in reply")]
    NoJson,
    #[error("reply declined the task")]
    Refusal,
    #[error("missing key {0:?}")]
    MissingKey(&'static str),
    #[error("unrecognized value {value} for {key:?}")]
    BadValue { key: &'static str, value: String },
}

const REFUSAL_MARKERS: &[&str] = &[
    "cannot identify",
    "can't identify",
    "unable to identify",
    "not able to identify",
    "cannot help with",
    "can't help with",
    "cannot assist",
    "can't assist",
    "i'm sorry",
    "i am sorry",
    "i'm unable",
    "i am unable",
];

pub fn looks_like_refusal(text: &str) -> bool {
    let t = text.to_lowercase().replace('\u{2019}', "'");
    REFUSAL_MARKERS.iter().any(|m| t.contains(m))
}

/// The first complete `{...}` in `raw` that parses as a JSON object.
pub fn extract_json_object(raw: &str) -> Option<Map<String, Value>> {
    let text = strip_fences(raw);
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(off) = text[start..].find('{') {
        let open = start + off;
        if let Some(close) = matching_brace(bytes, open) {
            if let Ok(Value::Object(m)) = serde_json::from_str(&text[open..=close]) {
                return Some(m);
            }
        }
        start = open + 1;
    }
    None
}

/// Drops code-fence markers; a language tag left behind is harmless prose.
fn strip_fences(raw: &str) -> String {
    raw.replace("```", "")
}

fn matching_brace(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn normalized_key(k: &str) -> String {
    k.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase()
}

/// Looks a key up exactly first, then ignoring case, spaces and underscores.
fn lookup<'a>(obj: &'a Map<String, Value>, key: &str) -> Option<&'a Value> {
    obj.get(key).or_else(|| {
        let want = normalized_key(key);
        obj.iter().find(|(k, _)| normalized_key(k) == want).map(|(_, v)| v)
    })
}

fn as_bool(v: &Value) -> Option<bool> {
    match v {
        Value::Bool(b) => Some(*b),
        Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        },
        _ => None,
    }
}

pub fn parse_presence(raw: &str) -> Result<PresenceAnswer, ParseError> {
    let Some(obj) = extract_json_object(raw) else {
        if looks_like_refusal(raw) {
            return Ok(PresenceAnswer { value: Presence::Unsure, comment: Some(raw.trim().to_string()), refusal: true });
        }
        return Err(ParseError::NoJson);
    };
    let v = lookup(&obj, "pictures_candidate").ok_or(ParseError::MissingKey("pictures_candidate"))?;
    let value = match as_bool(v) {
        Some(true) => Presence::True,
        Some(false) => Presence::False,
        None => match v {
            Value::String(s) if s.trim().eq_ignore_ascii_case("unsure") => Presence::Unsure,
            other => return Err(ParseError::BadValue { key: "pictures_candidate", value: other.to_string() }),
        },
    };
    let comment = lookup(&obj, "comment").map(|c| match c {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    });
    Ok(PresenceAnswer { value, comment, refusal: false })
}

pub fn parse_count(raw: &str) -> Result<CountAnswer, ParseError> {
    let Some(obj) = extract_json_object(raw) else {
        return Err(if looks_like_refusal(raw) { ParseError::Refusal } else { ParseError::NoJson });
    };
    let v = lookup(&obj, "GPT Count").ok_or(ParseError::MissingKey("GPT Count"))?;
    let bad = || ParseError::BadValue { key: "GPT Count", value: v.to_string() };
    let b = match v {
        Value::String(s) => {
            let s = s.trim();
            s.parse::<CountBucket>()
                .or_else(|_| s.parse::<usize>().map(bucket))
                .map_err(|_| bad())?
        }
        Value::Number(n) => bucket(n.as_u64().ok_or_else(bad)? as usize),
        _ => return Err(bad()),
    };
    let crowd = match lookup(&obj, "GPT Crowd") {
        None | Some(Value::Null) => None,
        Some(c) => Some(as_bool(c).ok_or_else(|| ParseError::BadValue { key: "GPT Crowd", value: c.to_string() })?),
    };
    Ok(CountAnswer { bucket: b, crowd })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clean_json() {
        let a = parse_presence(r#"{"comment":"Clearly shows him.","pictures_candidate":"True"}"#).unwrap();
        assert_eq!(a, PresenceAnswer { value: Presence::True, comment: Some("Clearly shows him.".into()), refusal: false });
    }

    #[test]
    fn fenced_json() {
        let raw = "Here you go:\n```json\n{\"comment\": \"Too blurry.\", \"pictures_candidate\": \"Unsure\"}\n```\nHope that helps.";
        assert_eq!(parse_presence(raw).unwrap().value, Presence::Unsure);
        let inline = "```json {\"comment\":\"x\",\"pictures_candidate\":\"False\"} ```";
        assert_eq!(parse_presence(inline).unwrap().value, Presence::False);
    }

    #[test]
    fn refusal_prose() {
        let a = parse_presence("I cannot identify individuals in images.").unwrap();
        assert_eq!(a.value, Presence::Unsure);
        assert!(a.refusal);
        assert!(parse_presence("I\u{2019}m sorry, I can\u{2019}t help with that.").unwrap().refusal);
    }

    #[test]
    fn failures() {
        assert_eq!(parse_presence("The weather is nice."), Err(ParseError::NoJson));
        assert_eq!(parse_presence(r#"{"comment":"x"}"#), Err(ParseError::MissingKey("pictures_candidate")));
        assert!(matches!(
            parse_presence(r#"{"pictures_candidate":["True","False","Unsure"]}"#),
            Err(ParseError::BadValue { .. })
        ));
        assert_eq!(parse_presence("{not json"), Err(ParseError::NoJson));
    }

    #[test]
    fn tolerant_values_and_keys() {
        assert_eq!(parse_presence(r#"{"pictures_candidate": true}"#).unwrap().value, Presence::True);
        assert_eq!(parse_presence(r#"{"Pictures Candidate": "false"}"#).unwrap().value, Presence::False);
        let braces = r#"{"comment":"a } and { inside","pictures_candidate":"True"}"#;
        assert_eq!(parse_presence(braces).unwrap().comment.as_deref(), Some("a } and { inside"));
        let preamble = r#"Note {braces} first. {"pictures_candidate":"False"}"#;
        assert_eq!(parse_presence(preamble).unwrap().value, Presence::False);
    }

    #[test]
    fn counts() {
        let c = parse_count(r#"{"GPT Count": "3+", "GPT Crowd": "True"}"#).unwrap();
        assert_eq!(c, CountAnswer { bucket: CountBucket::ThreeOrMore, crowd: Some(true) });
        assert_eq!(parse_count(r#"{"GPT Count": 2}"#).unwrap(), CountAnswer { bucket: CountBucket::Two, crowd: None });
        assert_eq!(parse_count(r#"{"GPT Count": "7"}"#).unwrap().bucket, CountBucket::ThreeOrMore);
        assert_eq!(parse_count("```json\n{\"gpt_count\": \"0\", \"gpt_crowd\": false}\n```").unwrap().crowd, Some(false));
        assert_eq!(parse_count("I'm sorry, I can't help with that."), Err(ParseError::Refusal));
        assert!(matches!(parse_count(r#"{"GPT Count": "many"}"#), Err(ParseError::BadValue { .. })));
        assert!(matches!(parse_count(r#"{"GPT Count": "1", "GPT Crowd": "maybe"}"#), Err(ParseError::BadValue { .. })));
    }

    proptest! {
        #[test]
        fn parse_presence_is_total(raw in ".{0,200}") {
            // Every input yields a ternary value or a parse error, never a panic.
            let _ = parse_presence(&raw);
            let _ = parse_count(&raw);
        }

        #[test]
        fn embedded_object_is_found(pre in "[a-z .,!]{0,40}", post in "[a-z .,!]{0,40}", v in 0usize..3, comment in "[a-zA-Z {}\\[\\]]{0,30}") {
            let value = ["True", "False", "Unsure"][v];
            let obj = serde_json::json!({"comment": comment, "pictures_candidate": value});
            let raw = format!("{pre}\n```json\n{obj}\n```\n{post}");
            let a = parse_presence(&raw).unwrap();
            prop_assert_eq!(a.value.as_str(), value);
            prop_assert_eq!(a.comment.as_deref(), Some(comment.as_str()));
        }
    }
}
