//! Tag prompts of the form `input tags, SEP, output tags`.

use serde::{Deserialize, Serialize};

use crate::dataset::TagVocabulary;
use crate::error::{Error, Result};

/// Token ids over a vocabulary of `n_tags` tags plus the separator, whose id is `n_tags`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub tokens: Vec<usize>,
    pub n_tags: usize,
}

impl Prompt {
    pub fn sep(&self) -> usize {
        self.n_tags
    }

    pub fn vocab_size(&self) -> usize {
        self.n_tags + 1
    }

    pub fn validate(&self) -> Result<()> {
        let seps: Vec<usize> = (0..self.tokens.len())
            .filter(|&i| self.tokens[i] == self.sep())
            .collect();
        if seps.len() != 1 {
            return Err(Error::Prompt(format!(
                "expected exactly one separator, found {}",
                seps.len()
            )));
        }
        if seps[0] + 1 == self.tokens.len() {
            return Err(Error::Prompt("no output tags after the separator".into()));
        }
        if let Some(bad) = self.tokens.iter().find(|t| **t > self.n_tags) {
            return Err(Error::Prompt(format!("token {bad} outside the vocabulary")));
        }
        Ok(())
    }

    /// Position of the separator.
    pub fn sep_position(&self) -> Option<usize> {
        self.tokens.iter().position(|t| *t == self.sep())
    }
}

pub fn build_prompt<S: AsRef<str>>(
    input_tags: &[S],
    output_tags: &[S],
    vocab: &TagVocabulary,
) -> Result<Prompt> {
    if output_tags.is_empty() {
        return Err(Error::Prompt("at least one output tag is required".into()));
    }
    let unknown: Vec<String> = input_tags
        .iter()
        .chain(output_tags)
        .filter(|t| vocab.id(t.as_ref()).is_none())
        .map(|t| t.as_ref().to_string())
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownTag(unknown));
    }
    let id = |t: &S| vocab.id(t.as_ref()).expect("checked above");
    let mut tokens: Vec<usize> = input_tags.iter().map(id).collect();
    tokens.push(vocab.len());
    tokens.extend(output_tags.iter().map(id));
    Ok(Prompt {
        tokens,
        n_tags: vocab.len(),
    })
}

/// Splits a prompt back into input and output tags.
pub fn decode_prompt(prompt: &Prompt, vocab: &TagVocabulary) -> Result<(Vec<String>, Vec<String>)> {
    prompt.validate()?;
    if prompt.n_tags != vocab.len() {
        return Err(Error::Prompt(
            "prompt built with a different vocabulary".into(),
        ));
    }
    let sep = prompt.sep_position().expect("validated");
    let name = |t: &usize| vocab.tag(*t).expect("validated").to_string();
    Ok((
        prompt.tokens[..sep].iter().map(name).collect(),
        prompt.tokens[sep + 1..].iter().map(name).collect(),
    ))
}

/// Parses a comma-separated tag list, dropping empty items.
pub fn parse_tag_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}
