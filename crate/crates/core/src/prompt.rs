//! Prompt serialization.
//!
//! A sequence renders as
//! `[instruction + instruction_separator] demo_1 SEP demo_2 SEP ... SEP query`,
//! where each demo and the query start with the image token. Image refs are
//! listed in the same order the image tokens appear.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manipulate::InContextSequence;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub image_token: String,
    pub demo_pattern: String,
    pub query_pattern: String,
    pub chunk_separator: String,
    pub instruction_separator: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        default_template()
    }
}

pub fn default_template() -> PromptTemplate {
    PromptTemplate {
        image_token: "<image>".into(),
        demo_pattern: "Question:{Q} Short answer:{A}".into(),
        query_pattern: "Question:{Q} Short answer:".into(),
        chunk_separator: "<|endofchunk|>".into(),
        instruction_separator: "\n".into(),
    }
}

/// Partial template from a config file; unset fields keep the default.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_token: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demo_pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk_separator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction_separator: Option<String>,
}

impl TemplateOverrides {
    pub fn apply(&self, base: PromptTemplate) -> PromptTemplate {
        PromptTemplate {
            image_token: self.image_token.clone().unwrap_or(base.image_token),
            demo_pattern: self.demo_pattern.clone().unwrap_or(base.demo_pattern),
            query_pattern: self.query_pattern.clone().unwrap_or(base.query_pattern),
            chunk_separator: self.chunk_separator.clone().unwrap_or(base.chunk_separator),
            instruction_separator: self
                .instruction_separator
                .clone()
                .unwrap_or(base.instruction_separator),
        }
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<()> {
        let count = |s: &str, slot: &str| s.matches(slot).count();
        if count(&self.demo_pattern, "{Q}") != 1 || count(&self.demo_pattern, "{A}") != 1 {
            return Err(Error::Template(
                "demo_pattern must contain {Q} and {A} exactly once".into(),
            ));
        }
        if self.demo_pattern.find("{Q}") > self.demo_pattern.find("{A}") {
            return Err(Error::Template("demo_pattern must place {Q} before {A}".into()));
        }
        if count(&self.query_pattern, "{Q}") != 1 || count(&self.query_pattern, "{A}") != 0 {
            return Err(Error::Template(
                "query_pattern must contain {Q} exactly once and no {A}".into(),
            ));
        }
        if self.image_token.is_empty() || self.chunk_separator.is_empty() {
            return Err(Error::Template(
                "image_token and chunk_separator must be non-empty".into(),
            ));
        }
        Ok(())
    }

    /// Stop sequences handed to the generator.
    pub fn stop_tokens(&self) -> Vec<String> {
        vec![self.chunk_separator.clone(), "Question:".into()]
    }

    fn check_text(&self, what: &str, text: &str) -> Result<()> {
        for token in [&self.image_token, &self.chunk_separator] {
            if text.contains(token.as_str()) {
                return Err(Error::Template(format!(
                    "{what} contains template control token {token:?}: {text:?}"
                )));
            }
        }
        Ok(())
    }

    fn render_demo(&self, q: &str, a: &str) -> String {
        // {A} substituted first so a question containing "{A}" stays literal.
        let (pre, post) = self.demo_pattern.split_once("{A}").expect("validated");
        format!("{}{}{}{post}", self.image_token, pre.replace("{Q}", q), a)
    }

    fn render_query(&self, q: &str) -> String {
        format!("{}{}", self.image_token, self.query_pattern.replace("{Q}", q))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub text: String,
    pub image_refs: Vec<String>,
}

impl PromptText {
    /// Rough token estimate (whitespace-separated pieces) for reporting.
    pub fn estimated_tokens(&self) -> usize {
        self.text.split_whitespace().count()
    }
}

pub fn serialize(seq: &InContextSequence, template: &PromptTemplate) -> Result<PromptText> {
    template.validate()?;
    let mut parts = Vec::with_capacity(seq.demos.len() + 1);
    let mut image_refs = Vec::with_capacity(seq.demos.len() + 1);
    for d in &seq.demos {
        template.check_text("question", &d.question)?;
        template.check_text("answer", &d.answer)?;
        parts.push(template.render_demo(&d.question, &d.answer));
        image_refs.push(d.image_ref.clone());
    }
    template.check_text("question", &seq.query.question)?;
    parts.push(template.render_query(&seq.query.question));
    image_refs.push(seq.query.image_ref.clone());

    let mut text = String::new();
    if let Some(inst) = &seq.instruction {
        template.check_text("instruction", inst)?;
        text.push_str(inst);
        text.push_str(&template.instruction_separator);
    }
    text.push_str(&parts.join(&template.chunk_separator));
    Ok(PromptText { text, image_refs })
}

/// Structure recovered from a serialized prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrompt {
    pub instruction: Option<String>,
    pub demos: Vec<(String, String)>,
    pub query: String,
}

fn strip<'a>(s: &'a str, prefix: &str, what: &str) -> Result<&'a str> {
    s.strip_prefix(prefix)
        .ok_or_else(|| Error::Template(format!("{what}: expected prefix {prefix:?}")))
}

/// Inverse of [`serialize`] for texts whose fields avoid template literals.
pub fn parse(text: &str, template: &PromptTemplate) -> Result<ParsedPrompt> {
    template.validate()?;
    let (instruction, body) = match text.find(&template.image_token) {
        Some(0) => (None, text),
        Some(i) => {
            let head = &text[..i];
            let inst = head
                .strip_suffix(template.instruction_separator.as_str())
                .ok_or_else(|| Error::Template("instruction separator missing".into()))?;
            (Some(inst.to_string()), &text[i..])
        }
        None => return Err(Error::Template("no image token in prompt".into())),
    };

    let chunks: Vec<&str> = body.split(template.chunk_separator.as_str()).collect();
    let (query_chunk, demo_chunks) = chunks.split_last().expect("split yields one chunk");

    let (d_pre, d_rest) = template.demo_pattern.split_once("{Q}").expect("validated");
    let (d_mid, d_post) = d_rest.split_once("{A}").expect("validated");
    let mut demos = Vec::with_capacity(demo_chunks.len());
    for chunk in demo_chunks {
        let c = strip(chunk, &template.image_token, "demo")?;
        let c = strip(c, d_pre, "demo")?;
        let c = c
            .strip_suffix(d_post)
            .ok_or_else(|| Error::Template("demo: missing pattern suffix".into()))?;
        let (q, a) = if d_mid.is_empty() {
            return Err(Error::Template("demo_pattern has no separator between {Q} and {A}".into()));
        } else {
            c.rsplit_once(d_mid)
                .ok_or_else(|| Error::Template("demo: missing Q/A separator".into()))?
        };
        demos.push((q.to_string(), a.to_string()));
    }

    let (q_pre, q_post) = template.query_pattern.split_once("{Q}").expect("validated");
    let c = strip(query_chunk, &template.image_token, "query")?;
    let c = strip(c, q_pre, "query")?;
    let q = c
        .strip_suffix(q_post)
        .ok_or_else(|| Error::Template("query: missing pattern suffix".into()))?;
    Ok(ParsedPrompt {
        instruction,
        demos,
        query: q.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::AnswerType;
    use crate::manipulate::{Demonstration, Provenance, QueryItem, INSTRUCT1};
    use crate::strategies::{StrategyKind, StrategySpec};
    use proptest::prelude::*;

    fn seq(demos: &[(&str, &str)], query: &str) -> InContextSequence {
        InContextSequence {
            demos: demos
                .iter()
                .enumerate()
                .map(|(i, (q, a))| Demonstration {
                    sample_id: i as u64,
                    image_ref: format!("img{i}.jpg"),
                    image_source: i as u64,
                    question: q.to_string(),
                    question_source: i as u64,
                    answer: a.to_string(),
                    answer_type: AnswerType::Other,
                })
                .collect(),
            query: QueryItem {
                sample_id: 99,
                image_ref: "query.jpg".into(),
                question: query.into(),
            },
            instruction: None,
            provenance: Provenance {
                strategy: StrategySpec::new(StrategyKind::Rs, demos.len()),
                log: vec![],
            },
        }
    }

    #[test]
    fn default_template_is_valid() {
        default_template().validate().unwrap();
    }

    #[test]
    fn zero_shot_is_query_render() {
        let p = serialize(&seq(&[], "What is this?"), &default_template()).unwrap();
        assert_eq!(p.text, "<image>Question:What is this? Short answer:");
        assert_eq!(p.image_refs, vec!["query.jpg"]);
    }

    #[test]
    fn one_shot_default_render() {
        let p = serialize(
            &seq(&[("What color is the dog?", "white")], "What is this?"),
            &default_template(),
        )
        .unwrap();
        assert_eq!(
            p.text,
            "<image>Question:What color is the dog? Short answer:white<|endofchunk|><image>Question:What is this? Short answer:"
        );
        assert_eq!(p.image_refs, vec!["img0.jpg", "query.jpg"]);
    }

    #[test]
    fn instruction_comes_first() {
        let mut s = seq(&[("q", "a")], "q2");
        s.instruction = Some(INSTRUCT1.into());
        let p = serialize(&s, &default_template()).unwrap();
        assert!(p.text.starts_with(INSTRUCT1));
        assert!(p.text.starts_with(&format!("{INSTRUCT1}\n<image>")));
    }

    #[test]
    fn separator_override_changes_only_separator() {
        let s = seq(&[("q1", "a1"), ("q2", "a2")], "q3");
        let base = serialize(&s, &default_template()).unwrap();
        let t = TemplateOverrides {
            chunk_separator: Some("|||".into()),
            ..Default::default()
        }
        .apply(default_template());
        let p = serialize(&s, &t).unwrap();
        assert_eq!(p.text, base.text.replace("<|endofchunk|>", "|||"));
    }

    #[test]
    fn control_tokens_are_rejected() {
        let s = seq(&[("what <image> is", "a")], "q");
        assert!(matches!(serialize(&s, &default_template()), Err(Error::Template(_))));
        let s = seq(&[], "x<|endofchunk|>y");
        assert!(serialize(&s, &default_template()).is_err());
    }

    #[test]
    fn invalid_templates() {
        let mut t = default_template();
        t.demo_pattern = "Question:{Q}".into();
        assert!(t.validate().is_err());
        let mut t = default_template();
        t.query_pattern = "Question:{Q} Short answer:{A}".into();
        assert!(t.validate().is_err());
    }

    proptest! {
        #[test]
        fn parse_inverts_serialize(
            demos in proptest::collection::vec(("[a-zA-Z0-9 ?]{1,20}", "[a-z0-9 ]{0,8}"), 0..6),
            query in "[a-zA-Z0-9 ?]{1,20}",
            inst in proptest::option::of("[A-Za-z ,.]{1,30}"),
        ) {
            let pairs: Vec<(&str, &str)> = demos.iter().map(|(q, a)| (q.as_str(), a.as_str())).collect();
            let mut s = seq(&pairs, &query);
            s.instruction = inst.clone();
            let t = default_template();
            let p = serialize(&s, &t).unwrap();
            prop_assert_eq!(p.text.matches("<image>").count(), p.image_refs.len());
            prop_assert_eq!(p.image_refs.len(), demos.len() + 1);
            let parsed = parse(&p.text, &t).unwrap();
            prop_assert_eq!(parsed.instruction, inst);
            prop_assert_eq!(parsed.demos, demos);
            prop_assert_eq!(parsed.query, query);
        }
    }
}
