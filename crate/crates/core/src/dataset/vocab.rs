use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower-cases a tag and collapses runs of whitespace to a single space.
pub fn normalize_tag(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Sorted, de-duplicated set of stem tags with dense integer ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct TagVocabulary {
    tags: Vec<String>,
    index: HashMap<String, usize>,
}

impl TagVocabulary {
    pub fn new<I, S>(tags: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = tags
            .into_iter()
            .map(|t| normalize_tag(t.as_ref()))
            .collect();
        if set.iter().any(String::is_empty) {
            return Err(Error::config("empty tag in vocabulary"));
        }
        let tags: Vec<String> = set.into_iter().collect();
        let index = tags
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Self { tags, index })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn id(&self, tag: &str) -> Option<usize> {
        self.index.get(&normalize_tag(tag)).copied()
    }

    pub fn tag(&self, id: usize) -> Option<&str> {
        self.tags.get(id).map(String::as_str)
    }
}

impl TryFrom<Vec<String>> for TagVocabulary {
    type Error = Error;

    fn try_from(tags: Vec<String>) -> Result<Self> {
        let vocab = TagVocabulary::new(&tags)?;
        if vocab.tags != tags {
            return Err(Error::config(
                "vocabulary must be sorted, normalized and unique",
            ));
        }
        Ok(vocab)
    }
}

impl From<TagVocabulary> for Vec<String> {
    fn from(v: TagVocabulary) -> Self {
        v.tags
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization() {
        assert_eq!(normalize_tag("  Electric   Guitar "), "electric guitar");
        assert_eq!(normalize_tag("BASS"), "bass");
    }

    #[test]
    fn ids_are_bijective_and_stable() {
        let v = TagVocabulary::new(["Drums", "bass", "vocals", "other", "bass"]).unwrap();
        assert_eq!(v.len(), 4);
        for (i, t) in v.tags().iter().enumerate() {
            assert_eq!(v.id(t), Some(i));
            assert_eq!(v.tag(i), Some(t.as_str()));
        }
        let json = serde_json::to_string(&v).unwrap();
        let back: TagVocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn unsorted_serialized_vocab_is_rejected() {
        assert!(serde_json::from_str::<TagVocabulary>(r#"["drums","bass"]"#).is_err());
    }
}
