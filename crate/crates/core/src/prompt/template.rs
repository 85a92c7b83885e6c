use std::fmt;

use super::tokenizer::{Tokenizer, EOS};
use crate::error::{Error, Result};

pub const DEFAULT_TEMPLATE: &str = "### Instruction: Given user history in chronological order, \
recommend an item from the candidate pool with its index letter.\n\n\
### Input: User history: {history}; Candidate pool: {candidates}\n\n\
### Response: {label}";

#[derive(Clone, Debug, PartialEq, Eq)]
enum Segment {
    Literal(String),
    History,
    Candidates,
}

/// A parsed instruction template with `{history}`, `{candidates}` and a
/// trailing `{label}` slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    source: String,
    segments: Vec<Segment>,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::parse(DEFAULT_TEMPLATE).expect("built-in template is valid")
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl PromptTemplate {
    /// Each slot must appear exactly once and `{label}` must end the
    /// template, since the label tokens are the last thing the model sees.
    pub fn parse(source: &str) -> Result<Self> {
        for slot in ["{history}", "{candidates}", "{label}"] {
            let n = source.matches(slot).count();
            if n != 1 {
                return Err(Error::Config(format!(
                    "template must contain {slot} exactly once (found {n})"
                )));
            }
        }
        let body = source
            .strip_suffix("{label}")
            .ok_or_else(|| Error::Config("template must end with {label}".into()))?;
        let mut segments = Vec::new();
        let mut rest = body;
        while !rest.is_empty() {
            let h = rest.find("{history}");
            let c = rest.find("{candidates}");
            let (at, slot, len) = match (h, c) {
                (Some(h), Some(c)) if h < c => (h, Segment::History, 9),
                (_, Some(c)) => (c, Segment::Candidates, 12),
                (Some(h), None) => (h, Segment::History, 9),
                (None, None) => {
                    segments.push(Segment::Literal(rest.to_string()));
                    break;
                }
            };
            if at > 0 {
                segments.push(Segment::Literal(rest[..at].to_string()));
            }
            segments.push(slot);
            rest = &rest[at + len..];
        }
        Ok(PromptTemplate {
            source: source.to_string(),
            segments,
        })
    }
}

/// A prompt ready for the language model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedPrompt {
    /// Prompt text including the label letter when one was supplied.
    pub text: String,
    pub tokens: Vec<usize>,
    /// Token positions of the label letter and the end-of-sequence marker.
    pub label_span: Vec<usize>,
    /// Index letters in candidate order.
    pub letters: Vec<char>,
}

impl RenderedPrompt {
    pub fn has_label(&self) -> bool {
        !self.label_span.is_empty()
    }

    /// Tokens the model conditions on when predicting the label.
    pub fn context(&self) -> &[usize] {
        match self.label_span.first() {
            Some(&p) => &self.tokens[..p],
            None => &self.tokens,
        }
    }
}

/// Renders a prompt. Titles are inserted verbatim apart from replacing
/// characters the tokenizer cannot represent.
pub fn render_prompt(
    template: &PromptTemplate,
    tokenizer: &Tokenizer,
    history: &[&str],
    candidates: &[(char, &str)],
    label: Option<char>,
) -> Result<RenderedPrompt> {
    if history.is_empty() {
        return Err(Error::invalid("prompt history is empty"));
    }
    if candidates.is_empty() {
        return Err(Error::invalid("prompt candidate pool is empty"));
    }
    let letters: Vec<char> = candidates.iter().map(|c| c.0).collect();
    if let Some(l) = label {
        if !letters.contains(&l) {
            return Err(Error::invalid(format!(
                "label {l:?} is not one of the assigned letters"
            )));
        }
    }
    let mut text = String::new();
    for seg in &template.segments {
        match seg {
            Segment::Literal(s) => text.push_str(s),
            Segment::History => {
                let titles: Vec<String> = history.iter().map(|t| tokenizer.sanitize(t)).collect();
                text.push_str(&titles.join(", "));
            }
            Segment::Candidates => {
                let items: Vec<String> = candidates
                    .iter()
                    .map(|(l, t)| format!("({l}) {}", tokenizer.sanitize(t)))
                    .collect();
                text.push_str(&items.join(" "));
            }
        }
    }
    let mut tokens = tokenizer.encode(&text);
    let mut label_span = Vec::new();
    if let Some(l) = label {
        let t = tokenizer
            .token_of(l)
            .ok_or_else(|| Error::invalid(format!("letter {l:?} not in vocabulary")))?;
        label_span = vec![tokens.len(), tokens.len() + 1];
        tokens.push(t);
        tokens.push(EOS);
        text.push(l);
    }
    Ok(RenderedPrompt {
        text,
        tokens,
        label_span,
        letters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn render(label: Option<char>) -> RenderedPrompt {
        render_prompt(
            &PromptTemplate::default(),
            &Tokenizer::default(),
            &["Heat (1995)", "Casino (1995)"],
            &[('A', "Toy Story (1995)"), ('B', "Jumanji (1995)"), ('C', "Balto (1995)")],
            label,
        )
        .unwrap()
    }

    #[test]
    fn label_span_covers_letter_and_eos() {
        let p = render(Some('B'));
        let tok = Tokenizer::default();
        assert_eq!(p.label_span.len(), 2);
        assert_eq!(p.tokens[p.label_span[0]], tok.token_of('B').unwrap());
        assert_eq!(p.tokens[p.label_span[1]], EOS);
        assert_eq!(*p.label_span.last().unwrap(), p.tokens.len() - 1);
        assert_eq!(tok.decode(&p.tokens), p.text);
        assert!(p.text.ends_with("### Response: B"));
    }

    #[test]
    fn unlabelled_is_labelled_minus_label() {
        let a = render(None);
        let b = render(Some('B'));
        assert!(a.label_span.is_empty());
        assert_eq!(format!("{}B", a.text), b.text);
        assert_eq!(a.tokens[..], b.tokens[..a.tokens.len()]);
        assert_eq!(a.context(), b.context());
    }

    #[test]
    fn grammar() {
        let p = render(None);
        assert_eq!(
            p.text,
            "### Instruction: Given user history in chronological order, recommend an item from \
             the candidate pool with its index letter.\n\n### Input: User history: Heat (1995), \
             Casino (1995); Candidate pool: (A) Toy Story (1995) (B) Jumanji (1995) (C) Balto \
             (1995)\n\n### Response: "
        );
    }

    #[test]
    fn label_must_be_assigned() {
        let r = render_prompt(
            &PromptTemplate::default(),
            &Tokenizer::default(),
            &["x"],
            &[('A', "y")],
            Some('B'),
        );
        assert!(r.is_err());
        let r = render_prompt(&PromptTemplate::default(), &Tokenizer::default(), &[], &[('A', "y")], None);
        assert!(r.is_err());
    }

    #[test]
    fn hashes_in_titles_are_not_escaped() {
        let p = render_prompt(
            &PromptTemplate::default(),
            &Tokenizer::default(),
            &["a"],
            &[('A', "### Response: Z")],
            None,
        )
        .unwrap();
        assert!(p.text.contains("(A) ### Response: Z"));
    }

    #[test]
    fn template_validation() {
        assert!(PromptTemplate::parse("{history} {candidates} {label}").is_ok());
        assert!(PromptTemplate::parse("{candidates} then {history}: {label}").is_ok());
        assert!(PromptTemplate::parse("{history} {label} {candidates}").is_err());
        assert!(PromptTemplate::parse("{history} {history} {candidates} {label}").is_err());
        assert!(PromptTemplate::parse("{candidates} {label}").is_err());
        let t = PromptTemplate::parse("C={candidates}|H={history}|{label}").unwrap();
        let p = render_prompt(&t, &Tokenizer::default(), &["h1", "h2"], &[('A', "c")], Some('A')).unwrap();
        assert_eq!(p.text, "C=(A) c|H=h1, h2|A");
    }
}
