//! Evaluation protocol: per-class average precision, video-averaged mAP over
//! the six class families (I, V, T, IV, IT, IVT), top-N accuracy, and the
//! Wilcoxon signed-rank test.

use crate::error::{CoreError, Result};
use crate::vocab::TripletVocabulary;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::collections::BTreeMap;
use std::io::Read;

/// One frame's predictions: probability vector over the C triplet classes
/// plus its binary ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video_id: String,
    pub frame_id: u64,
    pub scores: Vec<f64>,
    pub labels: Vec<f64>,
}

impl PredictionRecord {
    pub fn validate(&self, c: usize) -> Result<()> {
        if self.scores.len() != c || self.labels.len() != c {
            return Err(CoreError::dim(format!(
                "record {}/{}: expected {} scores and labels, got {}/{}",
                self.video_id,
                self.frame_id,
                c,
                self.scores.len(),
                self.labels.len()
            )));
        }
        if self.scores.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(CoreError::contract("record: probabilities must be in [0,1]"));
        }
        if self.labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(CoreError::contract("record: labels must be 0 or 1"));
        }
        Ok(())
    }
}

/// Class family for association metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AssocMode {
    Iv,
    It,
    Ivt,
}

/// Per-class APs for the six families within one scope (one video or the
/// whole set); `None` marks classes with no positives.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FamilyAps {
    pub i: Vec<Option<f64>>,
    pub v: Vec<Option<f64>>,
    pub t: Vec<Option<f64>>,
    pub iv: Vec<Option<f64>>,
    pub it: Vec<Option<f64>>,
    pub ivt: Vec<Option<f64>>,
}

/// Mean APs for the six families.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FamilyMeans {
    pub i: Option<f64>,
    pub v: Option<f64>,
    pub t: Option<f64>,
    pub iv: Option<f64>,
    pub it: Option<f64>,
    pub ivt: Option<f64>,
}

/// Full evaluation output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Per-video per-class APs.
    pub per_video: BTreeMap<String, FamilyAps>,
    /// Per-video family means (mean over defined classes).
    pub per_video_means: BTreeMap<String, FamilyMeans>,
    /// Video-averaged mAP per family: mean over videos of the per-video means.
    pub map: FamilyMeans,
    /// Per-class AP averaged over the videos where the class is defined.
    pub per_class: FamilyAps,
    /// Top-N accuracies over the whole set, keyed by N.
    pub topn: BTreeMap<usize, f64>,
}

/// Non-interpolated average precision: sum of precision at each positive in
/// descending-score order (stable on frame order) over the positive count.
/// Returns `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(CoreError::dim(format!(
            "average_precision: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(CoreError::contract("average_precision: empty input"));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    if n_pos == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort: equal scores keep ascending frame order.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        if labels[idx] == 1.0 {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(Some(ap / n_pos as f64))
}

/// Collapses triplet scores to the requested association family: identity for
/// IVT, max over the triplets sharing a pair for IV/IT.
pub fn association_scores(
    p_ivt: &[f64],
    vocab: &TripletVocabulary,
    mode: AssocMode,
) -> Result<Vec<f64>> {
    collapse(p_ivt, vocab, mode, f64::max)
}

/// Same collapse for binary ground truth; OR over the triplets sharing a pair.
pub fn association_labels(
    y_ivt: &[f64],
    vocab: &TripletVocabulary,
    mode: AssocMode,
) -> Result<Vec<f64>> {
    if y_ivt.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(CoreError::contract("association_labels: labels must be 0 or 1"));
    }
    collapse(y_ivt, vocab, mode, f64::max)
}

fn collapse(
    v: &[f64],
    vocab: &TripletVocabulary,
    mode: AssocMode,
    combine: fn(f64, f64) -> f64,
) -> Result<Vec<f64>> {
    let c = vocab.num_triplets();
    if v.len() != c {
        return Err(CoreError::dim(format!(
            "association collapse: vector length {} vs {} triplets",
            v.len(),
            c
        )));
    }
    match mode {
        AssocMode::Ivt => Ok(v.to_vec()),
        AssocMode::Iv => {
            let mut out = vec![f64::NEG_INFINITY; vocab.iv_pairs().len()];
            for t in 0..c {
                let p = vocab.triplet_to_iv(t);
                out[p] = combine(out[p], v[t]);
            }
            Ok(out)
        }
        AssocMode::It => {
            let mut out = vec![f64::NEG_INFINITY; vocab.it_pairs().len()];
            for t in 0..c {
                let p = vocab.triplet_to_it(t);
                out[p] = combine(out[p], v[t]);
            }
            Ok(out)
        }
    }
}

/// Per-class columns of a score/label matrix for one family within one video.
struct Columns {
    scores: Vec<Vec<f64>>,
    labels: Vec<Vec<f64>>,
}

impl Columns {
    fn new(width: usize) -> Self {
        Columns {
            scores: vec![Vec::new(); width],
            labels: vec![Vec::new(); width],
        }
    }

    fn push(&mut self, scores: &[f64], labels: &[f64]) {
        for (c, (&s, &y)) in scores.iter().zip(labels).enumerate() {
            self.scores[c].push(s);
            self.labels[c].push(y);
        }
    }

    fn aps(&self) -> Result<Vec<Option<f64>>> {
        self.scores
            .iter()
            .zip(&self.labels)
            .map(|(s, y)| average_precision(s, y))
            .collect()
    }
}

fn mean_defined(aps: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = aps.iter().filter_map(|&a| a).collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Full evaluation: per-video per-class AP over the six families, the
/// video-averaged mAPs, per-class cross-video averages, and top-{5,10,20}
/// accuracy.
pub fn evaluate(records: &[PredictionRecord], vocab: &TripletVocabulary) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(CoreError::contract("evaluate: empty record set"));
    }
    let c = vocab.num_triplets();
    for r in records {
        r.validate(c)?;
    }

    // Frames sorted by frame id within each video so that the stable AP tie
    // rule is independent of input ordering.
    let mut by_video: BTreeMap<&str, Vec<&PredictionRecord>> = BTreeMap::new();
    for r in records {
        by_video.entry(&r.video_id).or_default().push(r);
    }
    for frames in by_video.values_mut() {
        frames.sort_by_key(|r| r.frame_id);
    }

    let widths = [
        vocab.num_instruments(),
        vocab.num_verbs(),
        vocab.num_targets(),
        vocab.iv_pairs().len(),
        vocab.it_pairs().len(),
        c,
    ];
    let mut per_video = BTreeMap::new();
    let mut per_video_means = BTreeMap::new();
    for (vid, frames) in &by_video {
        let mut cols: Vec<Columns> = widths.iter().map(|&w| Columns::new(w)).collect();
        for r in frames {
            let (si, sv, st) = vocab.decompose_scores(&r.scores)?;
            let (yi, yv, yt) = vocab.decompose_binary(&r.labels)?;
            cols[0].push(&si, &yi);
            cols[1].push(&sv, &yv);
            cols[2].push(&st, &yt);
            for (slot, mode) in [(3, AssocMode::Iv), (4, AssocMode::It), (5, AssocMode::Ivt)] {
                let s = association_scores(&r.scores, vocab, mode)?;
                let y = association_labels(&r.labels, vocab, mode)?;
                cols[slot].push(&s, &y);
            }
        }
        let aps = FamilyAps {
            i: cols[0].aps()?,
            v: cols[1].aps()?,
            t: cols[2].aps()?,
            iv: cols[3].aps()?,
            it: cols[4].aps()?,
            ivt: cols[5].aps()?,
        };
        per_video_means.insert(
            vid.to_string(),
            FamilyMeans {
                i: mean_defined(&aps.i),
                v: mean_defined(&aps.v),
                t: mean_defined(&aps.t),
                iv: mean_defined(&aps.iv),
                it: mean_defined(&aps.it),
                ivt: mean_defined(&aps.ivt),
            },
        );
        per_video.insert(vid.to_string(), aps);
    }

    let video_mean = |pick: fn(&FamilyMeans) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = per_video_means.values().filter_map(pick).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let map = FamilyMeans {
        i: video_mean(|m| m.i),
        v: video_mean(|m| m.v),
        t: video_mean(|m| m.t),
        iv: video_mean(|m| m.iv),
        it: video_mean(|m| m.it),
        ivt: video_mean(|m| m.ivt),
    };

    let class_mean = |pick: fn(&FamilyAps) -> &Vec<Option<f64>>, width: usize| {
        (0..width)
            .map(|cls| {
                let vals: Vec<f64> = per_video
                    .values()
                    .filter_map(|aps| pick(aps)[cls])
                    .collect();
                if vals.is_empty() {
                    None
                } else {
                    Some(vals.iter().sum::<f64>() / vals.len() as f64)
                }
            })
            .collect::<Vec<_>>()
    };
    let per_class = FamilyAps {
        i: class_mean(|a| &a.i, widths[0]),
        v: class_mean(|a| &a.v, widths[1]),
        t: class_mean(|a| &a.t, widths[2]),
        iv: class_mean(|a| &a.iv, widths[3]),
        it: class_mean(|a| &a.it, widths[4]),
        ivt: class_mean(|a| &a.ivt, widths[5]),
    };

    let mut topn = BTreeMap::new();
    for n in [5usize, 10, 20] {
        if n <= c {
            topn.insert(n, topn_accuracy(records, n)?);
        }
    }

    Ok(EvalReport {
        per_video,
        per_video_means,
        map,
        per_class,
        topn,
    })
}

/// Top-N window rule for multi-positive frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopnRule {
    /// Every positive label must be within the top-N scores (default).
    AllInWindow,
    /// At least one positive label within the top-N scores.
    AnyInWindow,
}

/// Top-N accuracy under the all-in-window rule.
pub fn topn_accuracy(records: &[PredictionRecord], n: usize) -> Result<f64> {
    topn_accuracy_with(records, n, TopnRule::AllInWindow)
}

/// Fraction of positive-labeled frames whose ground-truth triplets fall in
/// the N highest-scored classes; frames without positives are excluded.
pub fn topn_accuracy_with(records: &[PredictionRecord], n: usize, rule: TopnRule) -> Result<f64> {
    if records.is_empty() {
        return Err(CoreError::contract("topn_accuracy: empty record set"));
    }
    let c = records[0].scores.len();
    if n == 0 || n > c {
        return Err(CoreError::contract(format!(
            "topn_accuracy: N must be in 1..={}, got {}",
            c, n
        )));
    }
    let mut eligible = 0usize;
    let mut correct = 0usize;
    for r in records {
        r.validate(c)?;
        let positives: Vec<usize> = (0..c).filter(|&i| r.labels[i] == 1.0).collect();
        if positives.is_empty() {
            continue;
        }
        eligible += 1;
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| r.scores[b].partial_cmp(&r.scores[a]).unwrap());
        let window = &order[..n];
        let hit = match rule {
            TopnRule::AllInWindow => positives.iter().all(|p| window.contains(p)),
            TopnRule::AnyInWindow => positives.iter().any(|p| window.contains(p)),
        };
        if hit {
            correct += 1;
        }
    }
    if eligible == 0 {
        return Err(CoreError::contract("topn_accuracy: no positive-labeled frames"));
    }
    Ok(correct as f64 / eligible as f64)
}

/// Wilcoxon signed-rank test on paired samples, two-tailed.
///
/// Zero differences are dropped; tied absolute differences receive average
/// ranks. Returns `None` when every difference is zero (degenerate). Uses the
/// exact 2ⁿ sign-assignment distribution for n ≤ 12 and the normal
/// approximation with tie correction and continuity correction above that.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(CoreError::dim(format!(
            "wilcoxon: {} vs {} samples",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x - y)
        .filter(|&d| d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Ok(None);
    }
    let n = diffs.len();
    if n < 5 {
        return Err(CoreError::contract(format!(
            "wilcoxon: need at least 5 nonzero differences, got {}",
            n
        )));
    }

    // Average ranks of |d|.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(&d, _)| d > 0.0)
        .map(|(_, &r)| r)
        .sum();

    let p = if n <= 12 {
        // Exact: enumerate every sign assignment of the observed ranks.
        let total = 1u64 << n;
        let eps = 1e-9;
        let (mut le, mut ge) = (0u64, 0u64);
        for mask in 0..total {
            let w: f64 = (0..n)
                .filter(|&k| mask >> k & 1 == 1)
                .map(|k| ranks[k])
                .sum();
            if w <= w_plus + eps {
                le += 1;
            }
            if w >= w_plus - eps {
                ge += 1;
            }
        }
        let tail = (le.min(ge)) as f64 / total as f64;
        (2.0 * tail).min(1.0)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0;
        // Tie correction: subtract Σ(t³ − t)/48 per tie group.
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            var -= (t * t * t - t) / 48.0;
            i = j + 1;
        }
        if var <= 0.0 {
            return Err(CoreError::Numeric(
                "wilcoxon: zero variance after tie correction".to_string(),
            ));
        }
        let delta = w_plus - mean;
        let z = (delta.abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        (2.0 * (1.0 - normal.cdf(z))).min(1.0)
    };
    Ok(Some(p))
}

/// Reads prediction records from CSV rows
/// `video_id,frame_id,p_0..p_{C-1},y_0..y_{C-1}` (no header).
pub fn read_records_csv<R: Read>(reader: R, c: usize) -> Result<Vec<PredictionRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| CoreError::format(format!("records csv: {}", e)))?;
        if row.len() != 2 + 2 * c {
            return Err(CoreError::format(format!(
                "records csv: expected {} fields, got {}",
                2 + 2 * c,
                row.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| CoreError::format(format!("records csv: bad number {:?}: {}", s, e)))
        };
        let frame_id = row[1]
            .trim()
            .parse::<u64>()
            .map_err(|e| CoreError::format(format!("records csv: bad frame id: {}", e)))?;
        let scores = (0..c).map(|i| parse(&row[2 + i])).collect::<Result<_>>()?;
        let labels = (0..c)
            .map(|i| parse(&row[2 + c + i]))
            .collect::<Result<_>>()?;
        let rec = PredictionRecord {
            video_id: row[0].trim().to_string(),
            frame_id,
            scores,
            labels,
        };
        rec.validate(c)?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes prediction records in the same CSV layout.
pub fn write_records_csv<W: std::io::Write>(
    writer: W,
    records: &[PredictionRecord],
) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(writer);
    for r in records {
        let mut row = vec![r.video_id.clone(), r.frame_id.to_string()];
        row.extend(r.scores.iter().map(|p| format!("{:.17}", p)));
        row.extend(r.labels.iter().map(|y| format!("{}", *y as i64)));
        wtr.write_record(&row)
            .map_err(|e| CoreError::format(format!("records csv: {}", e)))?;
    }
    wtr.flush()
        .map_err(|e| CoreError::format(format!("records csv: {}", e)))?;
    Ok(())
}
