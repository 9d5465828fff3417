//! Prompt templates for the two model tasks.

use serde::{Deserialize, Serialize};
use visfocus_core::Task;

pub const NAME_PLACEHOLDER: &str = "{NAME}";
pub const PARTY_PLACEHOLDER: &str = "{PARTY}";

const PRESENCE_BODY: &str = r#"Imagine you are a computational social science PhD candidate. Your objective is to measure the concentrated visibility of political leaders in the 2021 Federal German election campaign on social media. Look at the image and determine if it depicts {NAME}, the front-runner of the {PARTY} party. Note: We are not interested in identifying individuals beyond this scope; our focus is solely on the presence or absence of the {PARTY}'s front-runner.

First, provide a comment explaining whether the image clearly depicts the {PARTY} front-runner, does not depict the front-runner, or if you are unsure. Based on this, set the 'pictures_candidate' value as follows:
1. True: if the image clearly depicts the {PARTY} front-runner
2. False: if the image does not depict the {PARTY} front-runner
3. Unsure: if you cannot clearly determine if it is the {PARTY} front-runner

Please return a JSON dictionary formatted as follows:
{
  "comment": "",
  "pictures_candidate": ["True", "False", "Unsure"]
}"#;

const COUNT_HEAD: &str = r#"Imagine you are a social science researcher, conducting an analysis of the 2021 German Federal election campaign. The image shows the front-runner: {NAME}. We're interested in measuring the individualization of candidates in the election campaign.

Assess the image and provide the following information:
1. How many people are in the focus of the image? Select the right choice: 'GPT Count': ["0", "1", "2", "3+"]"#;

const COUNT_CROWD: &str = r#"
2. Is there a crowd of spectators visible? Select the right choice: 'GPT Crowd': ["True", "False"]"#;

const COUNT_TAIL: &str = "\n\nRespond in valid JSON only.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub task: Task,
    pub body: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("{0} must not be empty")]
    EmptyArgument(&'static str),
    #[error("template {version} needs {placeholder} but no value was given")]
    MissingValue { version: String, placeholder: &'static str },
    #[error("rendered prompt still contains placeholder {0}")]
    ResidualPlaceholder(String),
    #[error("no prompt template for task {0}")]
    UnsupportedTask(Task),
}

impl PromptTemplate {
    pub fn presence() -> Self {
        PromptTemplate {
            task: Task::CandidatePresence,
            body: PRESENCE_BODY.to_string(),
            version: "presence-v1".into(),
        }
    }

    /// The count prompt with the auxiliary crowd question.
    pub fn count_with_crowd() -> Self {
        PromptTemplate {
            task: Task::PersonCount,
            body: format!("{COUNT_HEAD}{COUNT_CROWD}{COUNT_TAIL}"),
            version: "count-crowd-v1".into(),
        }
    }

    pub fn count() -> Self {
        PromptTemplate {
            task: Task::PersonCount,
            body: format!("{COUNT_HEAD}{COUNT_TAIL}"),
            version: "count-v1".into(),
        }
    }

    pub fn for_task(task: Task) -> Result<Self, PromptError> {
        match task {
            Task::CandidatePresence => Ok(Self::presence()),
            Task::PersonCount => Ok(Self::count_with_crowd()),
            Task::FaceIdentity => Err(PromptError::UnsupportedTask(task)),
        }
    }
}

/// Substitutes `{NAME}` and `{PARTY}` in one pass, so values containing
/// placeholder text are never expanded again.
pub fn render_prompt(t: &PromptTemplate, name: &str, party: Option<&str>) -> Result<String, PromptError> {
    if name.trim().is_empty() {
        return Err(PromptError::EmptyArgument("name"));
    }
    if party.is_some_and(|p| p.trim().is_empty()) {
        return Err(PromptError::EmptyArgument("party"));
    }
    let mut out = String::with_capacity(t.body.len() + 64);
    let mut rest = t.body.as_str();
    while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix(NAME_PLACEHOLDER) {
            out.push_str(name);
            rest = after;
        } else if let Some(after) = tail.strip_prefix(PARTY_PLACEHOLDER) {
            let party = party.ok_or_else(|| PromptError::MissingValue {
                version: t.version.clone(),
                placeholder: PARTY_PLACEHOLDER,
            })?;
            out.push_str(party);
            rest = after;
        } else if let Some(unknown) = placeholder_at(tail) {
            return Err(PromptError::ResidualPlaceholder(unknown.to_string()));
        } else {
            out.push('{');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// `{UPPER_CASE}` at the start of `s`, if any.
fn placeholder_at(s: &str) -> Option<&str> {
    let end = s.find('}')?;
    let inner = &s[1..end];
    (!inner.is_empty() && inner.chars().all(|c| c.is_ascii_uppercase() || c == '_')).then(|| &s[..=end])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn presence_prompt() {
        let p = render_prompt(&PromptTemplate::presence(), "Olaf Scholz", Some("SPD")).unwrap();
        assert!(p.contains("Olaf Scholz"));
        assert!(p.contains("the SPD front-runner"));
        assert!(p.contains("\"pictures_candidate\""));
        assert!(p.contains("\"comment\""));
        assert!(!p.contains("{NAME}") && !p.contains("{PARTY}"));
    }

    #[test]
    fn count_prompt() {
        let p = render_prompt(&PromptTemplate::count_with_crowd(), "Annalena Baerbock", None).unwrap();
        assert!(p.contains("front-runner: Annalena Baerbock."));
        assert!(p.contains(r#"'GPT Count': ["0", "1", "2", "3+"]"#));
        assert!(p.contains("'GPT Crowd'"));
        let plain = render_prompt(&PromptTemplate::count(), "Annalena Baerbock", None).unwrap();
        assert!(!plain.contains("GPT Crowd"));
        assert!(plain.ends_with("Respond in valid JSON only."));
    }

    #[test]
    fn verbatim_without_placeholders() {
        let t = PromptTemplate { task: Task::PersonCount, body: "Count {the} people: {\"a\": 1}".into(), version: "x".into() };
        assert_eq!(render_prompt(&t, "N", None).unwrap(), t.body);
    }

    #[test]
    fn errors() {
        let t = PromptTemplate::presence();
        assert_eq!(render_prompt(&t, " ", Some("SPD")), Err(PromptError::EmptyArgument("name")));
        assert!(matches!(render_prompt(&t, "Olaf Scholz", None), Err(PromptError::MissingValue { .. })));
        let bad = PromptTemplate { task: Task::PersonCount, body: "Hi {NAME} on {DATE}".into(), version: "x".into() };
        assert_eq!(render_prompt(&bad, "N", None), Err(PromptError::ResidualPlaceholder("{DATE}".into())));
        assert!(PromptTemplate::for_task(Task::FaceIdentity).is_err());
    }

    proptest! {
        #[test]
        fn no_residual_placeholders(name in "[A-Za-zÜ .-]{1,20}", party in "[A-Z]{1,8}") {
            prop_assume!(!name.trim().is_empty());
            for t in [PromptTemplate::presence(), PromptTemplate::count_with_crowd(), PromptTemplate::count()] {
                let out = render_prompt(&t, &name, Some(&party)).unwrap();
                prop_assert!(!out.contains(NAME_PLACEHOLDER));
                prop_assert!(!out.contains(PARTY_PLACEHOLDER));
                prop_assert!(out.contains(name.as_str()));
            }
        }
    }

    #[test]
    fn values_are_not_expanded_twice() {
        let out = render_prompt(&PromptTemplate::presence(), "{PARTY}", Some("SPD")).unwrap();
        assert!(out.contains("determine if it depicts {PARTY}, the front-runner of the SPD party"));
    }
}
