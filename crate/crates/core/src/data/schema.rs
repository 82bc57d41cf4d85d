use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::embedding::{EmbeddingStore, EMBEDDING_DIM};
use super::DataError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttrKind {
    /// One-hot over `levels`. Ordinal attributes have a meaningful level
    /// order (age, month, ...), which rare-level merging respects.
    Categorical {
        levels: Vec<String>,
        #[serde(default)]
        ordinal: bool,
    },
    /// Dense vector looked up by the attribute's text.
    Embedding { dim: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: AttrKind,
}

/// Ordered attribute declarations; encoding follows this order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxSchema {
    pub attributes: Vec<AttributeSpec>,
}

/// The nine categorical attributes of the default ad schema with their
/// level counts.
pub const REALAD_ATTRIBUTES: [(&str, usize); 9] = [
    ("gender", 2),
    ("age", 7),
    ("month", 12),
    ("weekday", 7),
    ("time", 6),
    ("position", 10),
    ("category2", 5),
    ("category3", 20),
    ("dominant_color", 10),
];

/// Text slots of the default schema, each a 768-dim embedding.
pub const TEXT_SLOTS: [&str; 3] = ["title", "description", "ocr"];

const ORDINAL: [&str; 4] = ["age", "month", "weekday", "time"];

impl AuxSchema {
    /// Categorical-only schema from `(name, levels, ordinal)` triples.
    pub fn categorical(spec: &[(&str, &[&str], bool)]) -> Self {
        Self {
            attributes: spec
                .iter()
                .map(|(name, levels, ordinal)| AttributeSpec {
                    name: name.to_string(),
                    kind: AttrKind::Categorical {
                        levels: levels.iter().map(|l| l.to_string()).collect(),
                        ordinal: *ordinal,
                    },
                })
                .collect(),
        }
    }

    /// Nine categorical attributes plus three 768-dim text slots
    /// (2,383 dimensions, 2,304 of them text). Level names are placeholders
    /// except for the color palette.
    pub fn realad_default() -> Self {
        let mut attributes: Vec<AttributeSpec> = REALAD_ATTRIBUTES
            .iter()
            .map(|&(name, n)| {
                let levels = match name {
                    "gender" => vec!["female".to_string(), "male".to_string()],
                    "dominant_color" => super::color::PALETTE.iter().map(|(n, _)| n.to_string()).collect(),
                    _ => (0..n).map(|i| format!("{name}_{i}")).collect(),
                };
                AttributeSpec {
                    name: name.to_string(),
                    kind: AttrKind::Categorical {
                        levels,
                        ordinal: ORDINAL.contains(&name),
                    },
                }
            })
            .collect();
        attributes.extend(TEXT_SLOTS.iter().map(|s| AttributeSpec {
            name: s.to_string(),
            kind: AttrKind::Embedding { dim: EMBEDDING_DIM },
        }));
        Self { attributes }
    }

    pub fn dim_aux(&self) -> usize {
        self.attributes
            .iter()
            .map(|a| match &a.kind {
                AttrKind::Categorical { levels, .. } => levels.len(),
                AttrKind::Embedding { dim } => *dim,
            })
            .sum()
    }

    pub fn get(&self, name: &str) -> Option<&AttributeSpec> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn levels(&self, name: &str) -> Option<(&[String], bool)> {
        match &self.get(name)?.kind {
            AttrKind::Categorical { levels, ordinal } => Some((levels, *ordinal)),
            AttrKind::Embedding { .. } => None,
        }
    }

    /// Drops a level that was merged away, keeping the others in order.
    pub fn remove_level(&mut self, attribute: &str, level: &str) {
        if let Some(AttributeSpec {
            kind: AttrKind::Categorical { levels, .. },
            ..
        }) = self.attributes.iter_mut().find(|a| a.name == attribute)
        {
            levels.retain(|l| l != level);
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = std::collections::BTreeSet::new();
        for a in &self.attributes {
            if !seen.insert(&a.name) {
                return Err(DataError::Schema(format!("attribute `{}` declared twice", a.name)));
            }
            match &a.kind {
                AttrKind::Categorical { levels, .. } => {
                    if levels.is_empty() {
                        return Err(DataError::Schema(format!("`{}` has no levels", a.name)));
                    }
                    let uniq: std::collections::BTreeSet<_> = levels.iter().collect();
                    if uniq.len() != levels.len() {
                        return Err(DataError::Schema(format!("`{}` repeats a level", a.name)));
                    }
                }
                AttrKind::Embedding { dim } if *dim == 0 => {
                    return Err(DataError::Schema(format!("`{}` has a zero embedding dim", a.name)))
                }
                AttrKind::Embedding { .. } => {}
            }
        }
        Ok(())
    }
}

/// One-hot blocks and embedding blocks concatenated in schema order.
pub fn encode_aux(
    attributes: &BTreeMap<String, String>,
    schema: &AuxSchema,
    store: Option<&EmbeddingStore>,
) -> Result<Vec<f64>, DataError> {
    let mut out = Vec::with_capacity(schema.dim_aux());
    for a in &schema.attributes {
        let value = attributes
            .get(&a.name)
            .ok_or_else(|| DataError::Schema(format!("instance has no `{}`", a.name)))?;
        match &a.kind {
            AttrKind::Categorical { levels, .. } => {
                let idx = levels
                    .iter()
                    .position(|l| l == value)
                    .ok_or_else(|| DataError::Schema(format!("unknown level `{value}` for `{}`", a.name)))?;
                let start = out.len();
                out.resize(start + levels.len(), 0.0);
                out[start + idx] = 1.0;
            }
            AttrKind::Embedding { dim } => {
                let store = store.ok_or_else(|| DataError::MissingEmbedding(value.clone()))?;
                if store.dim() != *dim {
                    return Err(DataError::Schema(format!(
                        "`{}` expects {dim}-dim embeddings, store holds {}",
                        a.name,
                        store.dim()
                    )));
                }
                out.extend_from_slice(&store.lookup(value)?);
            }
        }
    }
    Ok(out)
}
