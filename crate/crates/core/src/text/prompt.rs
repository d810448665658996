use crate::error::{Error, Result};

/// Symbol rewrites, applied in this order before case splitting.
const SYMBOLS: [(&str, &str); 5] = [
    ("≤", " less than "),
    ("≥", " greater than "),
    ("<", " less than "),
    (">", " greater than "),
    ("=", " is "),
];

/// Turns a raw attribute label into a lowercase natural phrase:
/// comparison symbols become words, underscores and camelCase boundaries
/// become spaces, whitespace is collapsed.
pub fn split_expand(raw: &str) -> Result<String> {
    if raw.trim().is_empty() {
        return Err(Error::Contract("attribute string is empty".into()));
    }
    let mut s = raw.to_string();
    for (from, to) in SYMBOLS {
        s = s.replace(from, to);
    }
    let mut spaced = String::with_capacity(s.len() + 8);
    let mut prev: Option<char> = None;
    for c in s.chars() {
        if c == '_' {
            spaced.push(' ');
        } else {
            if c.is_uppercase() && prev.is_some_and(|p| p.is_lowercase() || p.is_ascii_digit()) {
                spaced.push(' ');
            }
            spaced.push(c);
        }
        prev = Some(c);
    }
    let phrase = spaced.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
    if phrase.is_empty() {
        return Err(Error::Contract(format!("attribute string {raw:?} has no words")));
    }
    Ok(phrase)
}

/// Sentence template with exactly one `{}` slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    prefix: String,
    suffix: String,
}

impl PromptTemplate {
    pub const PLACEHOLDER: &'static str = "{}";
    pub const DEFAULT: &'static str = "the pedestrian has an attribute {}";

    pub fn new(template: &str) -> Result<Self> {
        let count = template.matches(Self::PLACEHOLDER).count();
        if count != 1 {
            return Err(Error::Contract(format!(
                "prompt template must contain exactly one {{}} placeholder, found {count}"
            )));
        }
        let (prefix, suffix) = template.split_once(Self::PLACEHOLDER).expect("one placeholder");
        Ok(PromptTemplate {
            prefix: prefix.to_string(),
            suffix: suffix.to_string(),
        })
    }

    pub fn apply(&self, phrase: &str) -> String {
        format!("{}{}{}", self.prefix, phrase, self.suffix)
    }

    pub fn as_template(&self) -> String {
        format!("{}{}{}", self.prefix, Self::PLACEHOLDER, self.suffix)
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::new(Self::DEFAULT).expect("default template is valid")
    }
}

/// Raw attribute string -> prompt sentence.
pub fn sentence_for(raw: &str, template: &PromptTemplate) -> Result<String> {
    Ok(template.apply(&split_expand(raw)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example() {
        assert_eq!(split_expand("Age ≤ 40").unwrap(), "age less than 40");
        assert_eq!(
            sentence_for("Age ≤ 40", &PromptTemplate::default()).unwrap(),
            "the pedestrian has an attribute age less than 40"
        );
    }

    #[test]
    fn rule_table() {
        assert_eq!(split_expand("hat").unwrap(), "hat");
        assert_eq!(split_expand("topLength_short").unwrap(), "top length short");
        assert_eq!(split_expand("Age≥60").unwrap(), "age greater than 60");
        assert_eq!(split_expand("size=XL").unwrap(), "size is xl");
        assert_eq!(split_expand("  spaced   out__words ").unwrap(), "spaced out words");
        assert_eq!(split_expand("pose_lateralFrontal").unwrap(), "pose lateral frontal");
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(split_expand("").is_err());
        assert!(split_expand("   ").is_err());
        assert!(split_expand("__").is_err());
    }

    #[test]
    fn templates_need_one_placeholder() {
        assert!(PromptTemplate::new("no slot").is_err());
        assert!(PromptTemplate::new("{} and {}").is_err());
        let t = PromptTemplate::new("a photo of {}, walking").unwrap();
        assert_eq!(t.apply("hat"), "a photo of hat, walking");
        assert_eq!(t.as_template(), "a photo of {}, walking");
        assert_eq!(PromptTemplate::default().apply("hat"), "the pedestrian has an attribute hat");
    }

    proptest! {
        #[test]
        fn split_expand_is_idempotent(raw in "[A-Za-z0-9_ <>=≤≥]{1,24}") {
            if let Ok(once) = split_expand(&raw) {
                prop_assert_eq!(split_expand(&once).unwrap(), once);
            }
        }
    }
}
