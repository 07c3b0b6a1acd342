//! Categories, vocabularies, thing/stuff tagging and prompt templating.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::warn;

use crate::error::{Error, Result};

/// Placeholder replaced by the query text in prompt templates.
pub const PLACEHOLDER: &str = "<c>";
pub const DEFAULT_TEMPLATE: &str = "A good photo of a <c>";
pub const DEFAULT_BACKGROUND_ID: &str = "background";

const BUILTIN_TABLE: &str = include_str!("../data/thing_stuff.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Thing,
    Stuff,
}

/// Where a category's tag came from. Explicit tags (set in the vocabulary file)
/// are never overwritten by a table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagSource {
    Default,
    Table,
    Explicit,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: String,
    pub query_text: String,
    pub tag: Tag,
    pub tag_source: TagSource,
    pub seed: u64,
}

impl Category {
    pub fn new(id: impl Into<String>, query_text: impl Into<String>, seed: u64) -> Self {
        Self {
            id: id.into(),
            query_text: query_text.into(),
            tag: Tag::Thing,
            tag_source: TagSource::Default,
            seed,
        }
    }

    pub fn with_tag(mut self, tag: Tag) -> Self {
        self.tag = tag;
        self.tag_source = TagSource::Explicit;
        self
    }

    pub fn is_stuff(&self) -> bool {
        self.tag == Tag::Stuff
    }
}

/// Per-category sampling seed derived from a global seed and the category id.
/// Kept below 2^63 so it round-trips through TOML integers.
pub fn category_seed(global_seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update(id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("sha256 digest is 32 bytes")) >> 1
}

/// Ids name cache and bank directories, so they are restricted to a portable
/// character set.
fn validate_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidVocabulary(format!("invalid category id {id:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    categories: Vec<Category>,
    background_id: String,
    /// True once the background class has been prepended.
    expanded: bool,
}

impl Vocabulary {
    pub fn new(categories: Vec<Category>, background_id: impl Into<String>) -> Result<Self> {
        let background_id = background_id.into();
        if categories.is_empty() {
            return Err(Error::InvalidVocabulary("at least one category is required".into()));
        }
        let mut seen = HashSet::new();
        for c in &categories {
            validate_id(&c.id)?;
            if c.query_text.trim().is_empty() {
                return Err(Error::InvalidVocabulary(format!("category {:?} has empty query text", c.id)));
            }
            if !seen.insert(c.id.as_str()) {
                return Err(Error::InvalidVocabulary(format!("duplicate category id {:?}", c.id)));
            }
        }
        if seen.contains(background_id.as_str()) {
            return Err(Error::BackgroundCollision(background_id));
        }
        Ok(Self { categories, background_id, expanded: false })
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn background_id(&self) -> &str {
        &self.background_id
    }

    pub fn is_expanded(&self) -> bool {
        self.expanded
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.id == id)
    }

    /// Label names in segmentation order: background first, then categories.
    pub fn label_names(&self) -> Vec<String> {
        if self.expanded {
            return self.categories.iter().map(|c| c.id.clone()).collect();
        }
        std::iter::once(self.background_id.clone()).chain(self.categories.iter().map(|c| c.id.clone())).collect()
    }

    pub fn from_toml_str(src: &str, global_seed: u64) -> Result<Self> {
        let file: VocabularyFile = toml::from_str(src)?;
        let background_id = file.background_id.unwrap_or_else(|| DEFAULT_BACKGROUND_ID.to_string());
        let categories = file
            .category
            .into_iter()
            .map(|e| {
                let query = e.query.unwrap_or_else(|| e.id.clone());
                let seed = e.seed.unwrap_or_else(|| category_seed(global_seed, &e.id));
                let c = Category::new(e.id, query, seed);
                match e.tag {
                    Some(t) => c.with_tag(t),
                    None => c,
                }
            })
            .collect();
        Self::new(categories, background_id)
    }

    pub fn load(path: &Path, global_seed: u64) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?, global_seed)
    }

    pub fn to_toml_string(&self) -> String {
        let file = VocabularyFile {
            background_id: Some(self.background_id.clone()),
            category: self
                .categories
                .iter()
                .map(|c| CategoryEntry {
                    id: c.id.clone(),
                    query: Some(c.query_text.clone()),
                    tag: (c.tag_source == TagSource::Explicit).then_some(c.tag),
                    seed: Some(c.seed),
                })
                .collect(),
        };
        toml::to_string(&file).expect("vocabulary serializes")
    }
}

/// On-disk schema shared by vocabulary files and thing/stuff tables.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabularyFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    background_id: Option<String>,
    #[serde(default)]
    category: Vec<CategoryEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CategoryEntry {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tag: Option<Tag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

pub fn make_prompt(category: &Category, template: &str) -> Result<String> {
    let found = template.matches(PLACEHOLDER).count();
    if found != 1 {
        return Err(Error::InvalidTemplate { template: template.to_string(), found });
    }
    Ok(template.replace(PLACEHOLDER, &category.query_text))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableSource {
    Builtin,
    User,
}

/// Case-folded, whitespace-normalized name; underscores count as spaces.
pub fn normalize_key(name: &str) -> String {
    name.replace('_', " ").split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug)]
pub struct ThingStuffTable {
    entries: HashMap<String, Tag>,
    source: TableSource,
}

impl ThingStuffTable {
    pub fn empty(source: TableSource) -> Self {
        Self { entries: HashMap::new(), source }
    }

    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN_TABLE, TableSource::Builtin).expect("builtin thing/stuff table parses")
    }

    pub fn from_toml_str(src: &str, source: TableSource) -> Result<Self> {
        let file: VocabularyFile = toml::from_str(src)?;
        let mut entries = HashMap::new();
        for e in file.category {
            let tag = e
                .tag
                .ok_or_else(|| Error::InvalidVocabulary(format!("table entry {:?} has no tag", e.id)))?;
            entries.insert(normalize_key(e.query.as_deref().unwrap_or(&e.id)), tag);
        }
        Ok(Self { entries, source })
    }

    pub fn load(path: &Path, source: TableSource) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?, source)
    }

    pub fn insert(&mut self, name: &str, tag: Tag) {
        self.entries.insert(normalize_key(name), tag);
    }

    /// Layers `user` on top of `self`; user entries win.
    pub fn overridden_by(mut self, user: &ThingStuffTable) -> Self {
        for (k, v) in &user.entries {
            self.entries.insert(k.clone(), *v);
        }
        if !user.entries.is_empty() {
            self.source = TableSource::User;
        }
        self
    }

    pub fn source(&self) -> TableSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<Tag> {
        self.entries.get(&normalize_key(name)).copied()
    }

    /// Total lookup: unknown names are things.
    pub fn lookup(&self, name: &str) -> Tag {
        self.get(name).unwrap_or_else(|| {
            warn!(name, "no thing/stuff entry; defaulting to thing");
            Tag::Thing
        })
    }
}

/// Tags every category from `table` (query text first, then id). Categories
/// carrying an explicit tag keep it.
pub fn tag_vocabulary(vocab: &Vocabulary, table: &ThingStuffTable) -> Vocabulary {
    let mut out = vocab.clone();
    for c in &mut out.categories {
        if c.tag_source == TagSource::Explicit {
            continue;
        }
        match table.get(&c.query_text).or_else(|| table.get(&c.id)) {
            Some(tag) => {
                c.tag = tag;
                c.tag_source = TagSource::Table;
            }
            None => {
                if c.tag_source != TagSource::Table {
                    warn!(category = %c.id, "no thing/stuff entry; defaulting to thing");
                }
                c.tag = Tag::Thing;
                c.tag_source = TagSource::Default;
            }
        }
    }
    out
}

/// Prepends the background class. The result can be expanded only once.
pub fn expand_with_background(vocab: &Vocabulary) -> Result<Vocabulary> {
    if vocab.expanded {
        return Err(Error::AlreadyExpanded);
    }
    if vocab.categories.iter().any(|c| c.id == vocab.background_id) {
        return Err(Error::BackgroundCollision(vocab.background_id.clone()));
    }
    let mut categories = Vec::with_capacity(vocab.categories.len() + 1);
    categories.push(Category::new(vocab.background_id.clone(), vocab.background_id.clone(), 0));
    categories.extend(vocab.categories.iter().cloned());
    Ok(Vocabulary { categories, background_id: vocab.background_id.clone(), expanded: true })
}
