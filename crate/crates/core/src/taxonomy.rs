//! Three-level emotion hierarchy (valence → primary → fine), synonym tables,
//! prompt templating and rollup.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// The shipped Parrott hierarchy: 2 valences, 6 primaries, 25 fine classes.
pub const DEFAULT_TAXONOMY_JSON: &str = include_str!("../data/parrott_taxonomy.json");

pub const DEFAULT_PROMPT_TEMPLATE: &str = "a photo that seems to express {}";

pub const MAX_SYNONYMS: usize = 5;

const PLACEHOLDER: &str = "{}";

/// Granularity at which classes are compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Valence,
    Primary,
    Fine,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Valence, Level::Primary, Level::Fine];

    pub fn name(self) -> &'static str {
        match self {
            Level::Valence => "valence",
            Level::Primary => "primary",
            Level::Fine => "fine",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Level {
    type Err = Error;

    /// Accepts the level names or the class counts of the default hierarchy (2, 6, 25).
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "2" | "valence" => Ok(Level::Valence),
            "6" | "primary" => Ok(Level::Primary),
            "25" | "fine" => Ok(Level::Fine),
            other => Err(Error::InvalidConfig(format!(
                "unknown level {other:?} (expected 2, 6, 25, valence, primary or fine)"
            ))),
        }
    }
}

/// A prompt pattern with exactly one `{}` placeholder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptTemplate(String);

impl PromptTemplate {
    pub fn new(pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        if pattern.matches(PLACEHOLDER).count() != 1 {
            return Err(Error::InvalidConfig(format!(
                "prompt template {pattern:?} must contain exactly one {PLACEHOLDER}"
            )));
        }
        Ok(Self(pattern))
    }

    pub fn render(&self, term: &str) -> String {
        self.0.replacen(PLACEHOLDER, term, 1)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self(DEFAULT_PROMPT_TEMPLATE.to_string())
    }
}

impl TryFrom<String> for PromptTemplate {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        Self::new(value)
    }
}

impl From<PromptTemplate> for String {
    fn from(t: PromptTemplate) -> String {
        t.0
    }
}

/// One expanded prompt. `term` is the class name or synonym that was
/// substituted into the template; `fine` is the class it resolves to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpandedPrompt {
    pub prompt: String,
    pub term: String,
    pub fine: String,
}

impl ExpandedPrompt {
    pub fn is_synonym(&self) -> bool {
        self.term != self.fine
    }
}

#[derive(Serialize, Deserialize)]
struct TaxonomyFile {
    valence_clusters: IndexMap<String, Vec<String>>,
    primaries: IndexMap<String, Vec<String>>,
    #[serde(default)]
    synonyms: IndexMap<String, Vec<String>>,
    #[serde(default)]
    prompt_template: PromptTemplate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Taxonomy {
    valence_clusters: IndexMap<String, Vec<String>>,
    primaries: IndexMap<String, Vec<String>>,
    synonyms: IndexMap<String, Vec<String>>,
    prompt_template: PromptTemplate,
    fine_classes: Vec<String>,
    fine_to_primary: HashMap<String, String>,
    primary_to_valence: HashMap<String, String>,
    synonym_to_fine: HashMap<String, String>,
}

fn normalize_name(name: &str) -> String {
    name.trim().to_lowercase()
}

fn normalize_map(map: IndexMap<String, Vec<String>>) -> IndexMap<String, Vec<String>> {
    map.into_iter()
        .map(|(k, v)| {
            (
                normalize_name(&k),
                v.iter().map(|s| normalize_name(s)).collect(),
            )
        })
        .collect()
}

impl Taxonomy {
    pub fn new(
        valence_clusters: IndexMap<String, Vec<String>>,
        primaries: IndexMap<String, Vec<String>>,
        synonyms: IndexMap<String, Vec<String>>,
        prompt_template: PromptTemplate,
    ) -> Result<Self> {
        let valence_clusters = normalize_map(valence_clusters);
        let primaries = normalize_map(primaries);
        let synonyms = normalize_map(synonyms);
        let invalid = |msg: String| Err(Error::InvalidTaxonomy(msg));

        if valence_clusters.is_empty() || primaries.is_empty() {
            return invalid("taxonomy needs at least one valence and one primary".into());
        }

        let mut primary_to_valence = HashMap::new();
        for (valence, prims) in &valence_clusters {
            for p in prims {
                if !primaries.contains_key(p) {
                    return invalid(format!("valence {valence:?} lists undefined primary {p:?}"));
                }
                if let Some(prev) = primary_to_valence.insert(p.clone(), valence.clone()) {
                    return invalid(format!(
                        "primary {p:?} listed under both {prev:?} and {valence:?}"
                    ));
                }
            }
        }

        let mut fine_classes = Vec::new();
        let mut fine_to_primary = HashMap::new();
        for (primary, fines) in &primaries {
            if !primary_to_valence.contains_key(primary) {
                return invalid(format!("orphan primary {primary:?} has no valence"));
            }
            if fines.is_empty() {
                return invalid(format!("primary {primary:?} has no fine classes"));
            }
            for f in fines {
                if f.is_empty() {
                    return invalid(format!("empty fine class under {primary:?}"));
                }
                if let Some(prev) = fine_to_primary.insert(f.clone(), primary.clone()) {
                    return invalid(format!(
                        "duplicate fine class {f:?} under {prev:?} and {primary:?}"
                    ));
                }
                fine_classes.push(f.clone());
            }
        }

        let mut synonym_to_fine = HashMap::new();
        for (fine, syns) in &synonyms {
            if !fine_to_primary.contains_key(fine) {
                return invalid(format!("synonyms given for unknown fine class {fine:?}"));
            }
            if syns.len() > MAX_SYNONYMS {
                return invalid(format!(
                    "{fine:?} has {} synonyms, at most {MAX_SYNONYMS} allowed",
                    syns.len()
                ));
            }
            for s in syns {
                if fine_to_primary.contains_key(s) {
                    return invalid(format!("synonym {s:?} collides with a fine class name"));
                }
                if let Some(prev) = synonym_to_fine.insert(s.clone(), fine.clone()) {
                    return invalid(format!(
                        "synonym {s:?} registered for both {prev:?} and {fine:?}"
                    ));
                }
            }
        }

        Ok(Self {
            valence_clusters,
            primaries,
            synonyms,
            prompt_template,
            fine_classes,
            fine_to_primary,
            primary_to_valence,
            synonym_to_fine,
        })
    }

    /// Taxonomy where every class is its own primary and fine class, grouped
    /// under the given valences, e.g. an 8-class benchmark split 4/4.
    pub fn flat(clusters: &[(&str, &[&str])]) -> Result<Self> {
        let valence_clusters = clusters
            .iter()
            .map(|(v, cs)| (v.to_string(), cs.iter().map(|c| c.to_string()).collect()))
            .collect();
        let primaries = clusters
            .iter()
            .flat_map(|(_, cs)| cs.iter())
            .map(|c| (c.to_string(), vec![c.to_string()]))
            .collect();
        Self::new(
            valence_clusters,
            primaries,
            IndexMap::new(),
            PromptTemplate::default(),
        )
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, TaxonomyParseError> {
        let file: TaxonomyFile = serde_json::from_str(text).map_err(TaxonomyParseError::Json)?;
        Self::new(
            file.valence_clusters,
            file.primaries,
            file.synonyms,
            file.prompt_template,
        )
        .map_err(TaxonomyParseError::Invalid)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            TaxonomyParseError::Json(source) => Error::json(path, source),
            TaxonomyParseError::Invalid(err) => err,
        })
    }

    /// The shipped default hierarchy, including its placeholder synonym lists.
    pub fn parrott() -> Self {
        Self::from_json(DEFAULT_TAXONOMY_JSON).expect("shipped taxonomy is valid")
    }

    pub fn to_json(&self) -> String {
        let file = TaxonomyFile {
            valence_clusters: self.valence_clusters.clone(),
            primaries: self.primaries.clone(),
            synonyms: self.synonyms.clone(),
            prompt_template: self.prompt_template.clone(),
        };
        serde_json::to_string_pretty(&file).expect("taxonomy serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    /// Fine classes in file order (primaries in order, each primary's classes in order).
    pub fn fine_classes(&self) -> &[String] {
        &self.fine_classes
    }

    pub fn primary_classes(&self) -> Vec<&str> {
        self.primaries.keys().map(String::as_str).collect()
    }

    pub fn valence_classes(&self) -> Vec<&str> {
        self.valence_clusters.keys().map(String::as_str).collect()
    }

    pub fn level_classes(&self, level: Level) -> Vec<&str> {
        match level {
            Level::Fine => self.fine_classes.iter().map(String::as_str).collect(),
            Level::Primary => self.primary_classes(),
            Level::Valence => self.valence_classes(),
        }
    }

    pub fn synonyms_of(&self, fine: &str) -> &[String] {
        self.synonyms.get(fine).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn prompt_template(&self) -> &PromptTemplate {
        &self.prompt_template
    }

    pub fn fine_index(&self, fine: &str) -> Option<usize> {
        let fine = normalize_name(fine);
        self.fine_classes.iter().position(|f| *f == fine)
    }

    /// Maps a fine class or one of its synonyms to the fine class.
    pub fn resolve_prompt_class(&self, class_or_synonym: &str) -> Result<&str> {
        let name = normalize_name(class_or_synonym);
        if let Some((fine, _)) = self.fine_to_primary.get_key_value(&name) {
            return Ok(fine);
        }
        self.synonym_to_fine
            .get(&name)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownClass(class_or_synonym.to_string()))
    }

    pub fn rollup(&self, fine: &str, level: Level) -> Result<&str> {
        let name = normalize_name(fine);
        let (fine, primary) = self
            .fine_to_primary
            .get_key_value(&name)
            .ok_or_else(|| Error::UnknownClass(fine.to_string()))?;
        Ok(match level {
            Level::Fine => fine,
            Level::Primary => primary,
            Level::Valence => &self.primary_to_valence[primary],
        })
    }

    pub fn valence_of_primary(&self, primary: &str) -> Result<&str> {
        self.primary_to_valence
            .get(&normalize_name(primary))
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownClass(primary.to_string()))
    }

    /// One prompt per fine class, each followed by its synonym prompts when requested.
    pub fn expand_prompts(
        &self,
        template: &PromptTemplate,
        include_synonyms: bool,
    ) -> Vec<ExpandedPrompt> {
        let mut out = Vec::new();
        for fine in &self.fine_classes {
            out.push(ExpandedPrompt {
                prompt: template.render(fine),
                term: fine.clone(),
                fine: fine.clone(),
            });
            if include_synonyms {
                for syn in self.synonyms_of(fine) {
                    out.push(ExpandedPrompt {
                        prompt: template.render(syn),
                        term: syn.clone(),
                        fine: fine.clone(),
                    });
                }
            }
        }
        out
    }

    /// Hex SHA-256 over the ordered fine-class list.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for f in &self.fine_classes {
            hasher.update(f.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug)]
pub enum TaxonomyParseError {
    Json(serde_json::Error),
    Invalid(Error),
}

impl fmt::Display for TaxonomyParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaxonomyParseError::Json(e) => write!(f, "malformed taxonomy JSON: {e}"),
            TaxonomyParseError::Invalid(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for TaxonomyParseError {}
