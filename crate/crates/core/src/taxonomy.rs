//! Four-level medical concept hierarchies (diagnoses, medications, procedures).
//!
//! A taxonomy is loaded from a flat CSV, one node per row, and validated
//! eagerly: ids are unique, every non-root node hangs under a parent exactly
//! one level above it, and nothing is deeper than [`TAXONOMY_DEPTH`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of levels in every taxonomy. Level 1 is the root, level 4 the leaf codes.
pub const TAXONOMY_DEPTH: usize = 4;

const _: () = assert!(TAXONOMY_DEPTH >= 1 && TAXONOMY_DEPTH <= u8::MAX as usize);

pub const CSV_HEADER: [&str; 5] = ["node_id", "level", "parent_id", "code_type", "description"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodeType {
    Diagnosis,
    Medication,
    Procedure,
}

impl CodeType {
    pub const ALL: [CodeType; 3] = [CodeType::Diagnosis, CodeType::Medication, CodeType::Procedure];

    pub fn index(self) -> usize {
        match self {
            CodeType::Diagnosis => 0,
            CodeType::Medication => 1,
            CodeType::Procedure => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CodeType::Diagnosis => "diagnosis",
            CodeType::Medication => "medication",
            CodeType::Procedure => "procedure",
        }
    }
}

impl fmt::Display for CodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CodeType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "diagnosis" => Ok(CodeType::Diagnosis),
            "medication" => Ok(CodeType::Medication),
            "procedure" => Ok(CodeType::Procedure),
            other => Err(format!("unknown code type {other:?}")),
        }
    }
}

/// What to do with patient codes the taxonomy does not know.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingCodePolicy {
    #[default]
    Error,
    SkipWithWarning,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaxonomyNode {
    pub node_id: String,
    pub level: u8,
    pub parent_id: Option<String>,
    pub description: String,
    pub code_type: CodeType,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    code_type: CodeType,
    nodes: BTreeMap<String, TaxonomyNode>,
}

impl Taxonomy {
    /// Validates a node set and builds the taxonomy.
    pub fn from_nodes(code_type: CodeType, nodes: Vec<TaxonomyNode>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for node in nodes {
            if node.code_type != code_type {
                return Err(Error::InvalidInput(format!(
                    "node {} has code type {}, expected {}",
                    node.node_id, node.code_type, code_type
                )));
            }
            if node.description.trim().is_empty() {
                return Err(Error::InvalidInput(format!(
                    "node {} has an empty description",
                    node.node_id
                )));
            }
            if node.level as usize > TAXONOMY_DEPTH {
                return Err(Error::TooDeep {
                    node: node.node_id,
                    level: node.level,
                    max: TAXONOMY_DEPTH,
                });
            }
            if map.contains_key(&node.node_id) {
                return Err(Error::DuplicateId(node.node_id));
            }
            map.insert(node.node_id.clone(), node);
        }
        let tax = Taxonomy {
            code_type,
            nodes: map,
        };
        tax.check_structure()?;
        Ok(tax)
    }

    fn check_structure(&self) -> Result<()> {
        for node in self.nodes.values() {
            if let Some(parent) = &node.parent_id {
                if !self.nodes.contains_key(parent) {
                    return Err(Error::UnknownCode(parent.clone()));
                }
            }
        }
        // Walk parent pointers before looking at levels so a loop is
        // reported as such rather than as an inconsistent level.
        let mut settled: HashSet<&str> = HashSet::new();
        for start in self.nodes.keys() {
            let mut on_path: HashSet<&str> = HashSet::new();
            let mut cur = start.as_str();
            loop {
                if settled.contains(cur) {
                    break;
                }
                if !on_path.insert(cur) {
                    return Err(Error::CycleDetected {
                        node: cur.to_string(),
                    });
                }
                match &self.nodes[cur].parent_id {
                    Some(p) => cur = p,
                    None => break,
                }
            }
            settled.extend(on_path);
        }
        for node in self.nodes.values() {
            match &node.parent_id {
                None if node.level != 1 => {
                    return Err(Error::LevelGap {
                        node: node.node_id.clone(),
                        level: node.level,
                        parent: String::new(),
                        parent_level: 0,
                    })
                }
                None => {}
                Some(p) => {
                    let parent = &self.nodes[p];
                    if parent.level + 1 != node.level {
                        return Err(Error::LevelGap {
                            node: node.node_id.clone(),
                            level: node.level,
                            parent: p.clone(),
                            parent_level: parent.level,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn code_type(&self) -> CodeType {
        self.code_type
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, node_id: &str) -> Option<&TaxonomyNode> {
        self.nodes.get(node_id)
    }

    pub fn contains(&self, node_id: &str) -> bool {
        self.nodes.contains_key(node_id)
    }

    /// Nodes in id order.
    pub fn nodes(&self) -> impl Iterator<Item = &TaxonomyNode> {
        self.nodes.values()
    }

    pub fn nodes_at_level(&self, level: u8) -> impl Iterator<Item = &TaxonomyNode> {
        self.nodes.values().filter(move |n| n.level == level)
    }

    pub fn description_of(&self, node_id: &str) -> Result<&str> {
        self.nodes
            .get(node_id)
            .map(|n| n.description.as_str())
            .ok_or_else(|| Error::UnknownCode(node_id.to_string()))
    }

    /// Ids from the root (level 1) down to `leaf_id` (level 4).
    pub fn ancestor_chain(&self, leaf_id: &str) -> Result<[&str; TAXONOMY_DEPTH]> {
        let leaf = self
            .nodes
            .get(leaf_id)
            .ok_or_else(|| Error::UnknownCode(leaf_id.to_string()))?;
        if leaf.level as usize != TAXONOMY_DEPTH {
            return Err(Error::NotALeaf(leaf_id.to_string()));
        }
        let mut chain = [""; TAXONOMY_DEPTH];
        let mut cur = leaf;
        for slot in (0..TAXONOMY_DEPTH).rev() {
            chain[slot] = cur.node_id.as_str();
            if slot > 0 {
                // validated at construction: parent exists one level up
                let parent = cur.parent_id.as_deref().expect("non-root node has a parent");
                cur = &self.nodes[parent];
            }
        }
        Ok(chain)
    }

    /// Whether `ancestor` is `node` itself or lies on its path to the root.
    pub fn is_ancestor_or_self(&self, ancestor: &str, node: &str) -> bool {
        let mut cur = self.nodes.get(node);
        while let Some(n) = cur {
            if n.node_id == ancestor {
                return true;
            }
            cur = n.parent_id.as_deref().and_then(|p| self.nodes.get(p));
        }
        false
    }

    /// Child lists keyed by parent id, children in id order.
    pub fn children(&self) -> HashMap<&str, Vec<&str>> {
        let mut out: HashMap<&str, Vec<&str>> = HashMap::new();
        for node in self.nodes.values() {
            if let Some(p) = &node.parent_id {
                out.entry(p.as_str()).or_default().push(node.node_id.as_str());
            }
        }
        out
    }

    /// Leaf ids in the subtree rooted at `node_id` (inclusive), in id order.
    pub fn leaves_under(&self, node_id: &str) -> Vec<&str> {
        self.nodes
            .values()
            .filter(|n| n.level as usize == TAXONOMY_DEPTH && self.is_ancestor_or_self(node_id, &n.node_id))
            .map(|n| n.node_id.as_str())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        self.write_csv(&mut writer).map_err(|e| csv_error(path, e))?;
        writer.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_csv_string(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        self.write_csv(&mut writer).expect("in-memory csv write");
        String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    fn write_csv<W: std::io::Write>(&self, writer: &mut csv::Writer<W>) -> csv::Result<()> {
        writer.write_record(CSV_HEADER)?;
        let mut ordered: Vec<&TaxonomyNode> = self.nodes.values().collect();
        ordered.sort_by(|a, b| a.level.cmp(&b.level).then_with(|| a.node_id.cmp(&b.node_id)));
        for n in ordered {
            writer.write_record([
                n.node_id.as_str(),
                &n.level.to_string(),
                n.parent_id.as_deref().unwrap_or(""),
                n.code_type.as_str(),
                n.description.as_str(),
            ])?;
        }
        Ok(())
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

/// Reads and validates a taxonomy CSV.
pub fn load_taxonomy(path: &Path, code_type: CodeType) -> Result<Taxonomy> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_taxonomy(file, code_type)
}

pub fn read_taxonomy<R: std::io::Read>(reader: R, code_type: CodeType) -> Result<Taxonomy> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::MalformedRow {
        line: 1,
        reason: e.to_string(),
    })?;
    let found: Vec<&str> = header.iter().map(str::trim).collect();
    if found != CSV_HEADER {
        return Err(Error::MalformedRow {
            line: 1,
            reason: format!("expected header {}", CSV_HEADER.join(",")),
        });
    }
    let mut nodes = Vec::new();
    let mut seen = HashSet::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::MalformedRow {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            reason: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let bad = |reason: String| Error::MalformedRow { line, reason };
        if record.len() != CSV_HEADER.len() {
            return Err(bad(format!("expected {} fields, found {}", CSV_HEADER.len(), record.len())));
        }
        let node_id = record[0].trim().to_string();
        if node_id.is_empty() {
            return Err(bad("empty node_id".into()));
        }
        let level: u8 = record[1]
            .trim()
            .parse()
            .map_err(|_| bad(format!("level {:?} is not an integer", &record[1])))?;
        if level == 0 {
            return Err(bad("level must be at least 1".into()));
        }
        let parent = record[2].trim();
        let parent_id = if parent.is_empty() {
            None
        } else {
            Some(parent.to_string())
        };
        if (level == 1) != parent_id.is_none() {
            return Err(bad("parent_id must be empty exactly for level-1 nodes".into()));
        }
        let row_type: CodeType = record[3].parse().map_err(bad)?;
        if row_type != code_type {
            return Err(bad(format!("code_type {row_type} does not match {code_type}")));
        }
        let description = record[4].trim().to_string();
        if description.is_empty() {
            return Err(bad("empty description".into()));
        }
        if !seen.insert(node_id.clone()) {
            return Err(Error::DuplicateId(node_id));
        }
        nodes.push(TaxonomyNode {
            node_id,
            level,
            parent_id,
            description,
            code_type,
        });
    }
    Taxonomy::from_nodes(code_type, nodes)
}

/// The three taxonomies a patient record is resolved against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaxonomySet {
    pub diagnosis: Taxonomy,
    pub medication: Taxonomy,
    pub procedure: Taxonomy,
}

impl TaxonomySet {
    pub fn get(&self, code_type: CodeType) -> &Taxonomy {
        match code_type {
            CodeType::Diagnosis => &self.diagnosis,
            CodeType::Medication => &self.medication,
            CodeType::Procedure => &self.procedure,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_csv() -> &'static str {
        "node_id,level,parent_id,code_type,description\n\
         A,1,,diagnosis,Root concept\n\
         B,2,A,diagnosis,Second level\n\
         C,3,B,diagnosis,Third level\n\
         D,4,C,diagnosis,Leaf concept\n"
    }

    #[test]
    fn minimal_chain_loads() {
        let tax = read_taxonomy(chain_csv().as_bytes(), CodeType::Diagnosis).unwrap();
        assert_eq!(tax.len(), 4);
        assert_eq!(tax.get("D").unwrap().level, 4);
        assert_eq!(tax.ancestor_chain("D").unwrap(), ["A", "B", "C", "D"]);
    }

    #[test]
    fn level_gap_is_rejected() {
        let csv = "node_id,level,parent_id,code_type,description\n\
                   A,1,,diagnosis,Root\n\
                   B,2,A,diagnosis,Mid\n\
                   X,4,B,diagnosis,Skips a level\n";
        let err = read_taxonomy(csv.as_bytes(), CodeType::Diagnosis).unwrap_err();
        assert!(matches!(err, Error::LevelGap { level: 4, parent_level: 2, .. }), "{err}");
    }

    #[test]
    fn too_deep_is_rejected() {
        let csv = format!("{}E,5,D,diagnosis,Too deep\n", chain_csv());
        let err = read_taxonomy(csv.as_bytes(), CodeType::Diagnosis).unwrap_err();
        assert!(matches!(err, Error::TooDeep { level: 5, .. }));
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let csv = format!("{}D,4,C,diagnosis,Again\n", chain_csv());
        let err = read_taxonomy(csv.as_bytes(), CodeType::Diagnosis).unwrap_err();
        assert!(matches!(err, Error::DuplicateId(id) if id == "D"));
    }

    #[test]
    fn cycle_is_detected() {
        let nodes = vec![
            TaxonomyNode {
                node_id: "P".into(),
                level: 2,
                parent_id: Some("Q".into()),
                description: "p".into(),
                code_type: CodeType::Diagnosis,
            },
            TaxonomyNode {
                node_id: "Q".into(),
                level: 3,
                parent_id: Some("P".into()),
                description: "q".into(),
                code_type: CodeType::Diagnosis,
            },
        ];
        let err = Taxonomy::from_nodes(CodeType::Diagnosis, nodes).unwrap_err();
        assert!(matches!(err, Error::CycleDetected { .. }));
    }

    #[test]
    fn malformed_row_reports_line() {
        let csv = "node_id,level,parent_id,code_type,description\n\
                   A,1,,diagnosis,Root\n\
                   B,two,A,diagnosis,Bad level\n";
        match read_taxonomy(csv.as_bytes(), CodeType::Diagnosis).unwrap_err() {
            Error::MalformedRow { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn wrong_code_type_is_malformed() {
        let err = read_taxonomy(chain_csv().as_bytes(), CodeType::Procedure).unwrap_err();
        assert!(matches!(err, Error::MalformedRow { line: 2, .. }));
    }

    #[test]
    fn ancestor_chain_errors() {
        let tax = read_taxonomy(chain_csv().as_bytes(), CodeType::Diagnosis).unwrap();
        assert!(matches!(tax.ancestor_chain("B"), Err(Error::NotALeaf(_))));
        assert!(matches!(tax.ancestor_chain("Z"), Err(Error::UnknownCode(_))));
    }

    #[test]
    fn description_lookup() {
        let tax = read_taxonomy(chain_csv().as_bytes(), CodeType::Diagnosis).unwrap();
        assert_eq!(tax.description_of("A").unwrap(), "Root concept");
        assert!(matches!(tax.description_of("nope"), Err(Error::UnknownCode(_))));
    }

    #[test]
    fn csv_round_trip() {
        let tax = read_taxonomy(chain_csv().as_bytes(), CodeType::Diagnosis).unwrap();
        let again = read_taxonomy(tax.to_csv_string().as_bytes(), CodeType::Diagnosis).unwrap();
        assert_eq!(tax, again);
    }
}
