use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, json_err, Error, Result};

pub const NA_ID: &str = "NA";
pub const NA_DESCRIPTION: &str = "no relation holds between the two entities";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationDef {
    pub id: String,
    pub name: String,
    pub description: String,
}

/// Ordered relation list with NA last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationSchema {
    relations: Vec<RelationDef>,
    index: HashMap<String, usize>,
}

fn is_na_id(id: &str) -> bool {
    id.eq_ignore_ascii_case("na")
}

impl RelationSchema {
    /// Validates ids and descriptions and moves (or appends) NA to the end.
    pub fn new(defs: Vec<RelationDef>) -> Result<Self> {
        let mut relations = Vec::with_capacity(defs.len() + 1);
        let mut na = None;
        let mut seen = HashMap::new();
        for d in defs {
            if d.id.trim().is_empty() {
                return Err(Error::Schema("relation with empty id".into()));
            }
            if d.description.trim().is_empty() {
                return Err(Error::Schema(format!("relation {:?} has no description", d.id)));
            }
            if seen.insert(d.id.clone(), ()).is_some() {
                return Err(Error::Schema(format!("duplicate relation id {:?}", d.id)));
            }
            if is_na_id(&d.id) {
                na = Some(d);
            } else {
                relations.push(d);
            }
        }
        relations.push(na.unwrap_or_else(|| RelationDef {
            id: NA_ID.into(),
            name: NA_ID.into(),
            description: NA_DESCRIPTION.into(),
        }));
        let index = relations
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect();
        Ok(Self { relations, index })
    }

    pub fn relations(&self) -> &[RelationDef] {
        &self.relations
    }

    /// Number of classes including NA.
    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    pub fn na_index(&self) -> usize {
        self.relations.len() - 1
    }

    /// Indices of the non-NA relations.
    pub fn positive_indices(&self) -> std::ops::Range<usize> {
        0..self.na_index()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn is_na(&self, id: &str) -> bool {
        is_na_id(id)
    }

    pub fn get(&self, i: usize) -> &RelationDef {
        &self.relations[i]
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum KeyedEntry {
    Name(String),
    Full { name: String, description: String },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SchemaFile {
    List(Vec<RelationDef>),
    /// `id -> name` (the layout of DocRED's `rel_info.json`) or
    /// `id -> {name, description}`; ids are taken in sorted order.
    Keyed(std::collections::BTreeMap<String, KeyedEntry>),
}

/// Reads a JSON array of `{id, name, description}` records or a keyed object.
/// A bare name doubles as the description.
pub fn load_schema(path: impl AsRef<Path>) -> Result<RelationSchema> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let file: SchemaFile = serde_json::from_slice(&bytes).map_err(json_err(path))?;
    let defs = match file {
        SchemaFile::List(defs) => defs,
        SchemaFile::Keyed(map) => map
            .into_iter()
            .map(|(id, e)| match e {
                KeyedEntry::Name(name) => RelationDef {
                    id,
                    description: name.clone(),
                    name,
                },
                KeyedEntry::Full { name, description } => RelationDef { id, name, description },
            })
            .collect(),
    };
    RelationSchema::new(defs)
}

pub fn save_schema(path: impl AsRef<Path>, schema: &RelationSchema) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_vec_pretty(schema.relations()).map_err(json_err(path))?;
    std::fs::write(path, json).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn def(id: &str, desc: &str) -> RelationDef {
        RelationDef {
            id: id.into(),
            name: id.into(),
            description: desc.into(),
        }
    }

    #[test]
    fn appends_na_once() {
        let defs: Vec<_> = (0..96).map(|i| def(&format!("P{i}"), "something")).collect();
        let s = RelationSchema::new(defs.clone()).unwrap();
        assert_eq!(s.len(), 97);
        assert_eq!(s.get(s.na_index()).id, NA_ID);

        let mut with_na = defs;
        with_na.insert(3, def("Na", "nothing"));
        let s = RelationSchema::new(with_na).unwrap();
        assert_eq!(s.len(), 97);
        assert_eq!(s.get(96).id, "Na");
    }

    #[test]
    fn rejects_duplicates_and_missing_descriptions() {
        assert!(RelationSchema::new(vec![def("P1", "a"), def("P1", "b")]).is_err());
        assert!(matches!(
            RelationSchema::new(vec![def("P1", "  ")]),
            Err(Error::Schema(m)) if m.contains("P1")
        ));
    }

    #[test]
    fn description_round_trips_exactly() {
        let d = RelationDef {
            id: "P17".into(),
            name: "country".into(),
            description: "sovereign state of this item; don\u{2019}t use on humans".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("schema.json");
        save_schema(&p, &RelationSchema::new(vec![d.clone()]).unwrap()).unwrap();
        let back = load_schema(&p).unwrap();
        assert_eq!(back.get(0), &d);
    }
}
