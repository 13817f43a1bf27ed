//! Triplet vocabulary: class ids for ⟨instrument, verb, target⟩ tuples,
//! component decomposition, and consistency checks against published counts.

use crate::error::{CoreError, Result};
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct TripletEntry {
    pub id: usize,
    pub name: String,
    pub instrument: usize,
    pub verb: usize,
    pub target: usize,
    pub count: Option<u64>,
}

/// Bidirectional map between dense triplet ids and component ids.
/// Immutable after load; component ids are assigned by first appearance,
/// triplet ids by row order.
#[derive(Debug, Clone)]
pub struct TripletVocabulary {
    triplets: Vec<TripletEntry>,
    instruments: Vec<String>,
    verbs: Vec<String>,
    targets: Vec<String>,
    iv_pairs: Vec<(usize, usize)>,
    it_pairs: Vec<(usize, usize)>,
    triplet_to_iv: Vec<usize>,
    triplet_to_it: Vec<usize>,
}

fn intern(names: &mut Vec<String>, name: &str) -> usize {
    if let Some(i) = names.iter().position(|n| n == name) {
        i
    } else {
        names.push(name.to_string());
        names.len() - 1
    }
}

impl TripletVocabulary {
    /// Builds a vocabulary from (name, instrument, verb, target, count) rows.
    pub fn from_rows(rows: Vec<(String, String, String, String, Option<u64>)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(CoreError::format("vocabulary has no rows"));
        }
        let mut instruments = Vec::new();
        let mut verbs = Vec::new();
        let mut targets = Vec::new();
        let mut triplets = Vec::new();
        let mut seen: BTreeMap<(usize, usize, usize), usize> = BTreeMap::new();
        for (id, (name, i, v, t, count)) in rows.into_iter().enumerate() {
            let ii = intern(&mut instruments, &i);
            let vi = intern(&mut verbs, &v);
            let ti = intern(&mut targets, &t);
            if let Some(prev) = seen.insert((ii, vi, ti), id) {
                return Err(CoreError::format(format!(
                    "duplicate tuple ({}, {}, {}) at rows {} and {}",
                    i, v, t, prev, id
                )));
            }
            triplets.push(TripletEntry {
                id,
                name,
                instrument: ii,
                verb: vi,
                target: ti,
                count,
            });
        }
        let mut iv_pairs = Vec::new();
        let mut it_pairs = Vec::new();
        let mut triplet_to_iv = Vec::with_capacity(triplets.len());
        let mut triplet_to_it = Vec::with_capacity(triplets.len());
        for e in &triplets {
            let ivk = (e.instrument, e.verb);
            let pid = iv_pairs.iter().position(|&p| p == ivk).unwrap_or_else(|| {
                iv_pairs.push(ivk);
                iv_pairs.len() - 1
            });
            triplet_to_iv.push(pid);
            let itk = (e.instrument, e.target);
            let pid = it_pairs.iter().position(|&p| p == itk).unwrap_or_else(|| {
                it_pairs.push(itk);
                it_pairs.len() - 1
            });
            triplet_to_it.push(pid);
        }
        Ok(TripletVocabulary {
            triplets,
            instruments,
            verbs,
            targets,
            iv_pairs,
            it_pairs,
            triplet_to_iv,
            triplet_to_it,
        })
    }

    /// Parses a UTF-8 CSV with header `name,instrument,verb,target[,count]`.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rd
            .headers()
            .map_err(|e| CoreError::format(format!("vocabulary csv: {}", e)))?
            .clone();
        let has_count = headers.iter().any(|h| h == "count");
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| CoreError::format(format!("vocabulary csv: {}", e)))?;
            if rec.len() < 4 {
                return Err(CoreError::format(format!(
                    "vocabulary row needs at least 4 fields, got {}",
                    rec.len()
                )));
            }
            let count = if has_count && rec.len() >= 5 && !rec[4].is_empty() {
                Some(
                    rec[4]
                        .parse::<u64>()
                        .map_err(|e| CoreError::format(format!("bad count '{}': {}", &rec[4], e)))?,
                )
            } else {
                None
            };
            rows.push((
                rec[0].to_string(),
                rec[1].to_string(),
                rec[2].to_string(),
                rec[3].to_string(),
                count,
            ));
        }
        Self::from_rows(rows)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_reader(f)
    }

    pub fn num_triplets(&self) -> usize {
        self.triplets.len()
    }
    pub fn num_instruments(&self) -> usize {
        self.instruments.len()
    }
    pub fn num_verbs(&self) -> usize {
        self.verbs.len()
    }
    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn triplets(&self) -> &[TripletEntry] {
        &self.triplets
    }
    pub fn instrument_names(&self) -> &[String] {
        &self.instruments
    }
    pub fn verb_names(&self) -> &[String] {
        &self.verbs
    }
    pub fn target_names(&self) -> &[String] {
        &self.targets
    }

    /// Unique (instrument, verb) pairs present in the vocabulary, dense ids.
    pub fn iv_pairs(&self) -> &[(usize, usize)] {
        &self.iv_pairs
    }
    pub fn it_pairs(&self) -> &[(usize, usize)] {
        &self.it_pairs
    }
    pub fn triplet_to_iv(&self, triplet_id: usize) -> usize {
        self.triplet_to_iv[triplet_id]
    }
    pub fn triplet_to_it(&self, triplet_id: usize) -> usize {
        self.triplet_to_it[triplet_id]
    }

    fn check_len(&self, v: &[f64], what: &str) -> Result<()> {
        if v.len() != self.triplets.len() {
            return Err(CoreError::dim(format!(
                "{}: expected length {}, got {}",
                what,
                self.triplets.len(),
                v.len()
            )));
        }
        Ok(())
    }

    /// Component presence bits from binary triplet labels: a component bit is
    /// set iff any triplet containing that component is set.
    pub fn decompose_binary(&self, y_ivt: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        self.check_len(y_ivt, "decompose_binary")?;
        if y_ivt.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(CoreError::contract(
                "decompose_binary: labels must be 0 or 1",
            ));
        }
        let mut yi = vec![0.0; self.instruments.len()];
        let mut yv = vec![0.0; self.verbs.len()];
        let mut yt = vec![0.0; self.targets.len()];
        for (e, &y) in self.triplets.iter().zip(y_ivt) {
            if y == 1.0 {
                yi[e.instrument] = 1.0;
                yv[e.verb] = 1.0;
                yt[e.target] = 1.0;
            }
        }
        Ok((yi, yv, yt))
    }

    /// Component scores from triplet scores: each component takes the maximum
    /// score over triplets sharing that component; unreferenced components
    /// score 0.
    pub fn decompose_scores(&self, p_ivt: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        self.check_len(p_ivt, "decompose_scores")?;
        let mut pi = vec![0.0f64; self.instruments.len()];
        let mut pv = vec![0.0f64; self.verbs.len()];
        let mut pt = vec![0.0f64; self.targets.len()];
        for (e, &p) in self.triplets.iter().zip(p_ivt) {
            pi[e.instrument] = pi[e.instrument].max(p);
            pv[e.verb] = pv[e.verb].max(p);
            pt[e.target] = pt[e.target].max(p);
        }
        Ok((pi, pv, pt))
    }

    pub fn consistency_check(&self, counts: &CountTable) -> ConsistencyReport {
        let mut report = ConsistencyReport::default();
        let mut by_instrument: BTreeMap<String, u64> = BTreeMap::new();
        let mut by_verb: BTreeMap<String, u64> = BTreeMap::new();
        let mut by_target: BTreeMap<String, u64> = BTreeMap::new();
        let mut total = 0u64;
        for e in &self.triplets {
            let c = counts
                .triplet
                .get(&e.name)
                .copied()
                .or(e.count)
                .unwrap_or(0);
            *by_instrument
                .entry(self.instruments[e.instrument].clone())
                .or_default() += c;
            *by_verb.entry(self.verbs[e.verb].clone()).or_default() += c;
            *by_target.entry(self.targets[e.target].clone()).or_default() += c;
            total += c;
        }
        for (kind, sums, published) in [
            ("instrument", &by_instrument, &counts.instrument),
            ("verb", &by_verb, &counts.verb),
            ("target", &by_target, &counts.target),
        ] {
            for (name, &actual) in sums {
                if let Some(&expected) = published.get(name) {
                    report.comparisons.push(CountComparison {
                        kind: kind.to_string(),
                        name: name.clone(),
                        expected,
                        actual,
                        ok: expected == actual,
                    });
                }
            }
        }
        report.grand_total = total;
        report.expected_total = counts.total;
        report.total_ok = counts.total.map(|t| t == total).unwrap_or(true);
        report.instrument_sums = by_instrument;
        report.verb_sums = by_verb;
        report.target_sums = by_target;
        report.all_ok = report.total_ok && report.comparisons.iter().all(|c| c.ok);
        report
    }
}

/// Instance counts: per-triplet plus published per-component reference counts.
#[derive(Debug, Clone, Default)]
pub struct CountTable {
    pub triplet: BTreeMap<String, u64>,
    pub instrument: BTreeMap<String, u64>,
    pub verb: BTreeMap<String, u64>,
    pub target: BTreeMap<String, u64>,
    pub total: Option<u64>,
}

impl CountTable {
    /// Parses a CSV with header `kind,name,count`, where kind is one of
    /// `triplet`, `instrument`, `verb`, `target`, or `total`.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut table = CountTable::default();
        for rec in rd.records() {
            let rec = rec.map_err(|e| CoreError::format(format!("count csv: {}", e)))?;
            if rec.len() < 3 {
                return Err(CoreError::format("count row needs 3 fields"));
            }
            let count: u64 = rec[2]
                .parse()
                .map_err(|e| CoreError::format(format!("bad count '{}': {}", &rec[2], e)))?;
            match &rec[0] {
                "triplet" => {
                    table.triplet.insert(rec[1].to_string(), count);
                }
                "instrument" => {
                    table.instrument.insert(rec[1].to_string(), count);
                }
                "verb" => {
                    table.verb.insert(rec[1].to_string(), count);
                }
                "target" => {
                    table.target.insert(rec[1].to_string(), count);
                }
                "total" => table.total = Some(count),
                other => {
                    return Err(CoreError::format(format!("unknown count kind '{}'", other)))
                }
            }
        }
        Ok(table)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_reader(f)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CountComparison {
    pub kind: String,
    pub name: String,
    pub expected: u64,
    pub actual: u64,
    pub ok: bool,
}

/// Report-only output of [`TripletVocabulary::consistency_check`].
#[derive(Debug, Clone, Default, Serialize)]
pub struct ConsistencyReport {
    pub instrument_sums: BTreeMap<String, u64>,
    pub verb_sums: BTreeMap<String, u64>,
    pub target_sums: BTreeMap<String, u64>,
    pub grand_total: u64,
    pub expected_total: Option<u64>,
    pub total_ok: bool,
    pub comparisons: Vec<CountComparison>,
    pub all_ok: bool,
}
