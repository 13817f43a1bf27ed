//! Consistency checks for the transcribed CholecT50 vocabulary: component
//! sums derived from the 100 triplet counts must match the published
//! per-component totals and both co-occurrence tables.

use std::collections::BTreeMap;
use std::path::PathBuf;
use triplet_core::vocab::{CountTable, TripletVocabulary};

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn load_vocab() -> TripletVocabulary {
    TripletVocabulary::from_path(&data_dir().join("cholect50_triplets.csv")).unwrap()
}

fn load_counts() -> CountTable {
    CountTable::from_path(&data_dir().join("cholect50_counts.csv")).unwrap()
}

/// Parses a co-occurrence matrix CSV: header `instrument,<col names...>`,
/// one row per instrument. Returns (instrument, col_name) -> count.
fn load_matrix(file: &str) -> BTreeMap<(String, String), u64> {
    let mut rd = csv::Reader::from_path(data_dir().join(file)).unwrap();
    let cols: Vec<String> = rd
        .headers()
        .unwrap()
        .iter()
        .skip(1)
        .map(|s| s.to_string())
        .collect();
    let mut out = BTreeMap::new();
    for rec in rd.records() {
        let rec = rec.unwrap();
        let inst = rec[0].to_string();
        for (j, col) in cols.iter().enumerate() {
            let c: u64 = rec[j + 1].parse().unwrap();
            out.insert((inst.clone(), col.clone()), c);
        }
    }
    out
}

#[test]
fn vocabulary_has_expected_cardinalities() {
    let v = load_vocab();
    assert_eq!(v.num_triplets(), 100);
    assert_eq!(v.num_instruments(), 6);
    assert_eq!(v.num_verbs(), 10);
    assert_eq!(v.num_targets(), 15);
}

#[test]
fn component_sums_match_published_counts() {
    let v = load_vocab();
    let counts = load_counts();
    let report = v.consistency_check(&counts);
    assert!(report.all_ok, "{:#?}", report);
    assert_eq!(report.grand_total, 161_005);

    let expect = [
        ("grasper", 90_969u64),
        ("bipolar", 6_697),
        ("hook", 52_820),
        ("scissors", 2_135),
        ("clipper", 3_379),
        ("irrigator", 5_005),
    ];
    for (name, c) in expect {
        assert_eq!(report.instrument_sums[name], c, "{}", name);
    }
    // Every published component count participated in a comparison.
    assert_eq!(report.comparisons.len(), 6 + 10 + 15);
}

#[test]
fn iv_cooccurrence_matches_triplet_sums() {
    let v = load_vocab();
    let matrix = load_matrix("cholect50_iv_cooccurrence.csv");

    let mut sums: BTreeMap<(String, String), u64> = BTreeMap::new();
    for e in v.triplets() {
        let key = (
            v.instrument_names()[e.instrument].clone(),
            v.verb_names()[e.verb].clone(),
        );
        *sums.entry(key).or_default() += e.count.unwrap();
    }
    for (key, &published) in &matrix {
        let actual = sums.get(key).copied().unwrap_or(0);
        assert_eq!(actual, published, "{:?}", key);
    }
    // Every vocabulary pair appears in the published matrix.
    for key in sums.keys() {
        assert!(matrix.contains_key(key), "{:?} missing from matrix", key);
    }

    // Row sums reproduce the per-instrument totals.
    let counts = load_counts();
    for (inst, &total) in &counts.instrument {
        let row: u64 = matrix
            .iter()
            .filter(|((i, _), _)| i == inst)
            .map(|(_, &c)| c)
            .sum();
        assert_eq!(row, total, "{}", inst);
    }
}

#[test]
fn it_cooccurrence_matches_triplet_sums() {
    let v = load_vocab();
    let matrix = load_matrix("cholect50_it_cooccurrence.csv");

    let mut sums: BTreeMap<(String, String), u64> = BTreeMap::new();
    for e in v.triplets() {
        let key = (
            v.instrument_names()[e.instrument].clone(),
            v.target_names()[e.target].clone(),
        );
        *sums.entry(key).or_default() += e.count.unwrap();
    }
    for (key, &published) in &matrix {
        let actual = sums.get(key).copied().unwrap_or(0);
        assert_eq!(actual, published, "{:?}", key);
    }
    for key in sums.keys() {
        assert!(matrix.contains_key(key), "{:?} missing from matrix", key);
    }

    let counts = load_counts();
    for (inst, &total) in &counts.instrument {
        let row: u64 = matrix
            .iter()
            .filter(|((i, _), _)| i == inst)
            .map(|(_, &c)| c)
            .sum();
        assert_eq!(row, total, "{}", inst);
    }
}
