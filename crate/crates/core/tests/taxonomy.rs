use std::collections::{BTreeSet, HashMap};

use compose_core::taxonomy::{load_taxonomy, read_taxonomy, CodeType, Taxonomy, TAXONOMY_DEPTH};
use proptest::prelude::*;

fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn usc() -> Taxonomy {
    load_taxonomy(&fixture("usc_diagnosis.csv"), CodeType::Diagnosis).unwrap()
}

// walks parent ids straight from the csv rows, without the library
fn parent_walk(rows: &HashMap<String, (u8, Option<String>)>, leaf: &str) -> Vec<String> {
    let mut out = vec![leaf.to_string()];
    let mut cur = leaf.to_string();
    while let Some(p) = rows[&cur].1.clone() {
        out.push(p.clone());
        cur = p;
    }
    out.reverse();
    out
}

fn raw_rows(csv_text: &str) -> HashMap<String, (u8, Option<String>)> {
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            let parent = (!r[2].is_empty()).then(|| r[2].to_string());
            (r[0].to_string(), (r[1].parse().unwrap(), parent))
        })
        .collect()
}

#[test]
fn usc_code_has_its_textual_description() {
    let tax = usc();
    let node = tax.get("692.9").unwrap();
    assert_eq!(node.description, "Contact dermatitis and other eczema");
    assert_eq!(node.level, 4);
}

#[test]
fn usc_chain_matches_parent_walk() {
    let text = std::fs::read_to_string(fixture("usc_diagnosis.csv")).unwrap();
    let rows = raw_rows(&text);
    let tax = usc();
    for (id, (level, _)) in &rows {
        if *level as usize != TAXONOMY_DEPTH {
            assert!(tax.ancestor_chain(id).is_err(), "{id} is not a leaf");
            continue;
        }
        let chain: Vec<String> = tax.ancestor_chain(id).unwrap().iter().map(|s| s.to_string()).collect();
        assert_eq!(chain, parent_walk(&rows, id));
    }
    assert_eq!(tax.ancestor_chain("692.9").unwrap(), ["12", "12.1", "12.1.1", "692.9"]);
}

#[test]
fn leaves_under_an_internal_node() {
    let tax = usc();
    assert_eq!(tax.leaves_under("12.2"), vec!["682.6", "682.9"]);
    assert_eq!(tax.leaves_under("08").len(), 2);
    assert!(tax.is_ancestor_or_self("12", "691.8"));
    assert!(!tax.is_ancestor_or_self("08", "691.8"));
}

#[test]
fn unknown_and_inner_codes_are_rejected() {
    let tax = usc();
    assert!(tax.ancestor_chain("999.9").is_err());
    assert!(tax.ancestor_chain("12.1.1").is_err());
}

/// Csv rows of a random tree; every leaf sits at level 4.
fn tree_rows(paths: &[(u8, u8, u8, u8)]) -> Vec<String> {
    let mut ids = BTreeSet::new();
    for &(a, b, c, d) in paths {
        ids.insert((1, format!("r{a}"), None));
        ids.insert((2, format!("r{a}.{b}"), Some(format!("r{a}"))));
        ids.insert((3, format!("r{a}.{b}.{c}"), Some(format!("r{a}.{b}"))));
        ids.insert((4, format!("r{a}.{b}.{c}.{d}"), Some(format!("r{a}.{b}.{c}"))));
    }
    ids.into_iter()
        .map(|(level, id, parent)| {
            format!("{id},{level},{},diagnosis,\"concept {id}, level {level}\"", parent.unwrap_or_default())
        })
        .collect()
}

fn to_csv(rows: &[String]) -> String {
    let mut s = String::from("node_id,level,parent_id,code_type,description\n");
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    s
}

fn paths() -> impl Strategy<Value = Vec<(u8, u8, u8, u8)>> {
    prop::collection::vec((0u8..3, 0u8..3, 0u8..2, 0u8..3), 1..12)
}

proptest! {
    #[test]
    fn every_leaf_chain_spans_four_levels(paths in paths()) {
        let text = to_csv(&tree_rows(&paths));
        let tax = read_taxonomy(text.as_bytes(), CodeType::Diagnosis).unwrap();
        let rows = raw_rows(&text);
        for &(a, b, c, d) in &paths {
            let leaf = format!("r{a}.{b}.{c}.{d}");
            let chain = tax.ancestor_chain(&leaf).unwrap();
            for (i, id) in chain.iter().enumerate() {
                prop_assert_eq!(tax.get(id).unwrap().level as usize, i + 1);
            }
            let walked = parent_walk(&rows, &leaf);
            prop_assert_eq!(chain.to_vec(), walked.iter().map(String::as_str).collect::<Vec<_>>());
        }
    }

    #[test]
    fn csv_round_trip(paths in paths()) {
        let tax = read_taxonomy(to_csv(&tree_rows(&paths)).as_bytes(), CodeType::Diagnosis).unwrap();
        let back = read_taxonomy(tax.to_csv_string().as_bytes(), CodeType::Diagnosis).unwrap();
        prop_assert_eq!(&back, &tax);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        tax.save(&path).unwrap();
        prop_assert_eq!(load_taxonomy(&path, CodeType::Diagnosis).unwrap(), tax);
    }

    #[test]
    fn row_order_does_not_matter(
        (rows, shuffled) in paths().prop_flat_map(|p| {
            let rows = tree_rows(&p);
            (Just(rows.clone()), Just(rows).prop_shuffle())
        })
    ) {
        let a = read_taxonomy(to_csv(&rows).as_bytes(), CodeType::Diagnosis).unwrap();
        let b = read_taxonomy(to_csv(&shuffled).as_bytes(), CodeType::Diagnosis).unwrap();
        prop_assert_eq!(a, b);
    }
}
