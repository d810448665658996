use std::collections::HashSet;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Spanned;

use super::prompt::{split_expand, PromptTemplate};
use crate::error::{line_of, Error, Result};

const DEFAULT_SCHEMA: &str = include_str!("../../assets/mars_43.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKind {
    /// Exactly one class is positive; decided by argmax.
    Exclusive,
    /// Every class is an independent yes/no decision.
    Binary,
}

impl GroupKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupKind::Exclusive => "exclusive",
            GroupKind::Binary => "binary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeClass {
    pub name: String,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeGroup {
    pub name: String,
    pub kind: GroupKind,
    pub classes: Vec<AttributeClass>,
}

/// Ordered attribute groups partitioning the `C` classes the model predicts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeSchema {
    groups: Vec<AttributeGroup>,
    offsets: Vec<usize>,
    template: PromptTemplate,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchema {
    class_count: Spanned<usize>,
    template: Option<Spanned<String>>,
    group: Vec<Spanned<RawGroup>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGroup {
    name: Spanned<String>,
    kind: Spanned<String>,
    classes: Vec<Spanned<RawClass>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClass {
    name: Spanned<String>,
    raw: Spanned<String>,
}

#[derive(Serialize)]
struct OutSchema<'a> {
    class_count: usize,
    template: String,
    group: Vec<OutGroup<'a>>,
}

#[derive(Serialize)]
struct OutGroup<'a> {
    name: &'a str,
    kind: &'static str,
    classes: Vec<OutClass<'a>>,
}

#[derive(Serialize)]
struct OutClass<'a> {
    name: &'a str,
    raw: &'a str,
}

impl AttributeSchema {
    /// Validates the invariants: unique group names, unique class names
    /// within a group, at least one class per group and a non-empty raw
    /// string per class that splits into at least one word.
    pub fn new(groups: Vec<AttributeGroup>, template: PromptTemplate) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Contract("schema has no groups".into()));
        }
        let mut seen = HashSet::new();
        let mut offsets = Vec::with_capacity(groups.len() + 1);
        let mut total = 0;
        for g in &groups {
            if g.name.trim().is_empty() {
                return Err(Error::Contract("group name is empty".into()));
            }
            if !seen.insert(g.name.as_str()) {
                return Err(Error::Contract(format!("duplicate group name {:?}", g.name)));
            }
            if g.classes.is_empty() {
                return Err(Error::Contract(format!("group {:?} has no classes", g.name)));
            }
            let mut names = HashSet::new();
            for c in &g.classes {
                if !names.insert(c.name.as_str()) {
                    return Err(Error::Contract(format!("duplicate class {:?} in group {:?}", c.name, g.name)));
                }
                split_expand(&c.raw)?;
            }
            offsets.push(total);
            total += g.classes.len();
        }
        offsets.push(total);
        Ok(AttributeSchema {
            groups,
            offsets,
            template,
        })
    }

    pub fn parse(src: &str, path: &Path) -> Result<Self> {
        let at = |offset: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_of(src, offset),
            message,
        };
        let raw: RawSchema = toml::from_str(src).map_err(|e| {
            let offset = e.span().map_or(0, |s| s.start);
            at(offset, e.message().to_string())
        })?;
        let template = match &raw.template {
            Some(t) => PromptTemplate::new(t.get_ref()).map_err(|e| at(t.span().start, e.to_string()))?,
            None => PromptTemplate::default(),
        };
        let mut groups = Vec::with_capacity(raw.group.len());
        let mut group_names = HashSet::new();
        for g in &raw.group {
            let rg = g.get_ref();
            if !group_names.insert(rg.name.get_ref().as_str()) {
                return Err(at(rg.name.span().start, format!("duplicate group name {:?}", rg.name.get_ref())));
            }
            let kind = match rg.kind.get_ref().as_str() {
                "exclusive" => GroupKind::Exclusive,
                "binary" => GroupKind::Binary,
                other => {
                    return Err(at(
                        rg.kind.span().start,
                        format!("group kind must be \"exclusive\" or \"binary\", got {other:?}"),
                    ))
                }
            };
            if rg.classes.is_empty() {
                return Err(at(g.span().start, format!("group {:?} has no classes", rg.name.get_ref())));
            }
            let mut class_names = HashSet::new();
            let mut classes = Vec::with_capacity(rg.classes.len());
            for c in &rg.classes {
                let rc = c.get_ref();
                if !class_names.insert(rc.name.get_ref().as_str()) {
                    return Err(at(
                        rc.name.span().start,
                        format!("duplicate class {:?} in group {:?}", rc.name.get_ref(), rg.name.get_ref()),
                    ));
                }
                split_expand(rc.raw.get_ref()).map_err(|e| at(rc.raw.span().start, e.to_string()))?;
                classes.push(AttributeClass {
                    name: rc.name.get_ref().clone(),
                    raw: rc.raw.get_ref().clone(),
                });
            }
            groups.push(AttributeGroup {
                name: rg.name.get_ref().clone(),
                kind,
                classes,
            });
        }
        let declared = *raw.class_count.get_ref();
        let schema = AttributeSchema::new(groups, template).map_err(|e| at(0, e.to_string()))?;
        if schema.class_count() != declared {
            return Err(at(
                raw.class_count.span().start,
                format!("class_count is {declared} but the groups list {} classes", schema.class_count()),
            ));
        }
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&src, path)
    }

    /// The shipped 14-group, 43-class pedestrian schema.
    pub fn default_mars() -> Self {
        Self::parse(DEFAULT_SCHEMA, &PathBuf::from("<built-in schema>")).expect("built-in schema is valid")
    }

    pub fn default_source() -> &'static str {
        DEFAULT_SCHEMA
    }

    pub fn to_toml(&self) -> String {
        let out = OutSchema {
            class_count: self.class_count(),
            template: self.template.as_template(),
            group: self
                .groups
                .iter()
                .map(|g| OutGroup {
                    name: &g.name,
                    kind: g.kind.as_str(),
                    classes: g.classes.iter().map(|c| OutClass { name: &c.name, raw: &c.raw }).collect(),
                })
                .collect(),
        };
        toml::to_string(&out).expect("schema serializes")
    }

    pub fn class_count(&self) -> usize {
        *self.offsets.last().expect("offsets has a terminator")
    }

    pub fn groups(&self) -> &[AttributeGroup] {
        &self.groups
    }

    pub fn template(&self) -> &PromptTemplate {
        &self.template
    }

    /// Class indices covered by group `g`.
    pub fn group_range(&self, g: usize) -> Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }

    pub fn classes(&self) -> impl Iterator<Item = (&AttributeGroup, &AttributeClass)> {
        self.groups.iter().flat_map(|g| g.classes.iter().map(move |c| (g, c)))
    }

    /// `"group/class"` label of flat class index `i`.
    pub fn class_label(&self, i: usize) -> String {
        let g = self.offsets.partition_point(|&o| o <= i) - 1;
        let c = &self.groups[g].classes[i - self.offsets[g]];
        format!("{}/{}", self.groups[g].name, c.name)
    }

    /// One prompt sentence per class, in class order.
    pub fn sentences(&self) -> Vec<String> {
        self.classes()
            .map(|(_, c)| self.template.apply(&split_expand(&c.raw).expect("validated at construction")))
            .collect()
    }

    /// Checks length and per-group consistency of a label vector.
    pub fn check_labels(&self, labels: &[bool]) -> std::result::Result<(), String> {
        if labels.len() != self.class_count() {
            return Err(format!("expected {} labels, found {}", self.class_count(), labels.len()));
        }
        for (g, group) in self.groups.iter().enumerate() {
            if group.kind == GroupKind::Exclusive {
                let positives = labels[self.group_range(g)].iter().filter(|&&b| b).count();
                if positives != 1 {
                    return Err(format!(
                        "exclusive group {:?} needs exactly one positive class, found {positives}",
                        group.name
                    ));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(src: &str) -> Result<AttributeSchema> {
        AttributeSchema::parse(src, Path::new("s.toml"))
    }

    fn line(err: Error) -> usize {
        match err {
            Error::Parse { line, .. } => line,
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn default_schema_shape() {
        let s = AttributeSchema::default_mars();
        assert_eq!(s.groups().len(), 14);
        assert_eq!(s.class_count(), 43);
        let total: usize = (0..14).map(|g| s.group_range(g).len()).sum();
        assert_eq!(total, 43);
        assert_eq!(s.class_label(0), "top length/long");
        assert_eq!(s.class_label(42), "age/older");
        assert!(s.sentences().contains(&"the pedestrian has an attribute age less than 40".to_string()));
    }

    #[test]
    fn toml_round_trip() {
        let s = AttributeSchema::default_mars();
        assert_eq!(parse(&s.to_toml()).unwrap(), s);
    }

    const SMALL: &str = r#"class_count = 3
template = "a person with {}"

[[group]]
name = "bag"
kind = "binary"
classes = [{ name = "yes", raw = "bag" }]

[[group]]
name = "hair"
kind = "exclusive"
classes = [
    { name = "long", raw = "hair_long" },
    { name = "short", raw = "hair_short" },
]
"#;

    #[test]
    fn errors_carry_line_numbers() {
        assert!(parse(SMALL).is_ok());
        assert_eq!(line(parse(&SMALL.replace("class_count = 3", "class_count = 4")).unwrap_err()), 1);
        assert_eq!(line(parse(&SMALL.replace("a person with {}", "no slot")).unwrap_err()), 2);
        assert_eq!(line(parse(&SMALL.replace("\"binary\"", "\"multi\"")).unwrap_err()), 6);
        assert_eq!(line(parse(&SMALL.replace("name = \"short\"", "name = \"long\"")).unwrap_err()), 14);
        assert_eq!(line(parse(&SMALL.replace("raw = \"bag\"", "raw = \"  \"")).unwrap_err()), 7);
        assert_eq!(line(parse(&SMALL.replace("name = \"hair\"", "name = \"bag\"")).unwrap_err()), 10);
        assert!(matches!(parse("class_count = ").unwrap_err(), Error::Parse { .. }));
    }

    #[test]
    fn label_consistency() {
        let s = parse(SMALL).unwrap();
        assert!(s.check_labels(&[true, false, true]).is_ok());
        assert!(s.check_labels(&[false, false, true]).is_ok());
        assert!(s.check_labels(&[false, true, true]).is_err());
        assert!(s.check_labels(&[false, false, false]).is_err());
        assert!(s.check_labels(&[false, true]).is_err());
    }
}
