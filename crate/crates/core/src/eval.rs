//! Graded-relevance evaluation and paired significance testing.

use crate::retrieval::RankedList;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("query {0} appears more than once in the run")]
    DuplicateQuery(String),
    #[error("judgment for ({query}, {item}) appears more than once")]
    DuplicateJudgment { query: String, item: String },
    #[error("run query {0} has no judgments")]
    UnknownQuery(String),
    #[error("paired samples differ in length ({a} vs {b})")]
    LengthMismatch { a: usize, b: usize },
    #[error("paired test needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("systems {a} and {b} were evaluated on different query sets")]
    QuerySetMismatch { a: String, b: String },
    #[error("unknown system {0}")]
    UnknownSystem(String),
    #[error("bad qrels line {line}: {reason}")]
    BadQrels { line: usize, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Graded judgments: query id to item id to grade.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qrels {
    pub judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn insert(&mut self, query_id: &str, item_id: &str, grade: u32) -> Result<(), EvalError> {
        let q = self.judgments.entry(query_id.to_string()).or_default();
        if q.insert(item_id.to_string(), grade).is_some() {
            return Err(EvalError::DuplicateJudgment {
                query: query_id.to_string(),
                item: item_id.to_string(),
            });
        }
        Ok(())
    }

    pub fn grade(&self, query_id: &str, item_id: &str) -> u32 {
        self.judgments
            .get(query_id)
            .and_then(|q| q.get(item_id))
            .copied()
            .unwrap_or(0)
    }

    /// Parses TREC qrels lines `qid 0 item_id grade`.
    pub fn read<R: BufRead>(r: R) -> Result<Self, EvalError> {
        let mut out = Qrels::default();
        for (n, line) in r.lines().enumerate() {
            let bad = |reason: String| EvalError::BadQrels { line: n + 1, reason };
            let line = line.map_err(|e| bad(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad("expected 4 fields".into()));
            }
            let grade: u32 = f[3]
                .parse()
                .map_err(|_| bad(format!("grade {:?} is not a non-negative integer", f[3])))?;
            out.insert(f[0], f[2], grade)?;
        }
        Ok(out)
    }

    pub fn read_file(path: &Path) -> Result<Self, EvalError> {
        let f = std::fs::File::open(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read(std::io::BufReader::new(f))
    }

    pub fn to_trec(&self) -> String {
        let mut s = String::new();
        for (q, items) in &self.judgments {
            for (i, g) in items {
                let _ = writeln!(s, "{q} 0 {i} {g}");
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalCutoffs {
    pub ndcg: Vec<usize>,
    pub recall: Vec<usize>,
}

impl Default for EvalCutoffs {
    fn default() -> Self {
        Self {
            ndcg: vec![5, 10],
            recall: vec![100, 200],
        }
    }
}

impl EvalCutoffs {
    pub fn max_cutoff(&self) -> usize {
        self.ndcg.iter().chain(&self.recall).copied().max().unwrap_or(0)
    }

    /// Metric names in report column order.
    pub fn metric_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.ndcg.iter().map(|k| format!("ndcg@{k}")).collect();
        names.push("map".into());
        names.push("mrr".into());
        names.extend(self.recall.iter().map(|k| format!("recall@{k}")));
        names
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_query: BTreeMap<String, BTreeMap<String, f64>>,
    pub means: BTreeMap<String, f64>,
    pub n_queries: usize,
    /// Mean fraction of the top 10 entries with no judgment.
    pub unjudged_at_10: f64,
    /// Judged queries without any relevant item; left out of every mean.
    pub excluded_no_relevant: Vec<String>,
    /// Judged queries absent from the run; they score 0 everywhere.
    pub missing_from_run: Vec<String>,
}

fn dcg(grades: impl Iterator<Item = u32>) -> f64 {
    grades
        .enumerate()
        .map(|(i, g)| (2f64.powi(g as i32) - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

fn query_metrics(entries: &[String], judged: &BTreeMap<String, u32>, cutoffs: &EvalCutoffs) -> BTreeMap<String, f64> {
    let grade = |id: &String| judged.get(id).copied().unwrap_or(0);
    let n_rel = judged.values().filter(|&&g| g >= 1).count();
    let mut ideal: Vec<u32> = judged.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let mut m = BTreeMap::new();
    for &k in &cutoffs.ndcg {
        let idcg = dcg(ideal.iter().take(k).copied());
        let v = if idcg > 0.0 {
            dcg(entries.iter().take(k).map(grade)) / idcg
        } else {
            0.0
        };
        m.insert(format!("ndcg@{k}"), v);
    }
    let mut hits = 0usize;
    let mut ap = 0.0;
    let mut rr = 0.0;
    for (i, id) in entries.iter().enumerate() {
        if grade(id) >= 1 {
            hits += 1;
            ap += hits as f64 / (i + 1) as f64;
            if rr == 0.0 {
                rr = 1.0 / (i + 1) as f64;
            }
        }
    }
    m.insert("map".into(), if n_rel > 0 { ap / n_rel as f64 } else { 0.0 });
    m.insert("mrr".into(), rr);
    for &k in &cutoffs.recall {
        let v = if n_rel > 0 {
            entries.iter().take(k).filter(|id| grade(id) >= 1).count() as f64 / n_rel as f64
        } else {
            1.0
        };
        m.insert(format!("recall@{k}"), v);
    }
    m
}

/// Evaluates `run` against `qrels`. Entries are consumed in rank order as
/// given; nothing is re-sorted.
pub fn compute_metrics(run: &[RankedList], qrels: &Qrels, cutoffs: &EvalCutoffs) -> Result<MetricReport, EvalError> {
    let mut by_query: BTreeMap<&str, &RankedList> = BTreeMap::new();
    for l in run {
        if !qrels.judgments.contains_key(&l.query_id) {
            return Err(EvalError::UnknownQuery(l.query_id.clone()));
        }
        if by_query.insert(&l.query_id, l).is_some() {
            return Err(EvalError::DuplicateQuery(l.query_id.clone()));
        }
    }
    let names = cutoffs.metric_names();
    let mut per_query = BTreeMap::new();
    let mut excluded = Vec::new();
    let mut missing = Vec::new();
    let mut unjudged = Vec::new();
    for (qid, judged) in &qrels.judgments {
        if !judged.values().any(|&g| g >= 1) {
            log::warn!("query {qid} has no relevant items and is excluded from means");
            excluded.push(qid.clone());
            continue;
        }
        let entries: Vec<String> = match by_query.get(qid.as_str()) {
            Some(l) => l.entries.iter().map(|e| e.item_id.clone()).collect(),
            None => {
                missing.push(qid.clone());
                Vec::new()
            }
        };
        let top = entries.len().min(10);
        unjudged.push(if top == 0 {
            0.0
        } else {
            entries[..top].iter().filter(|id| !judged.contains_key(*id)).count() as f64 / top as f64
        });
        per_query.insert(qid.clone(), query_metrics(&entries, judged, cutoffs));
    }
    let n = per_query.len();
    let mean = |xs: &mut dyn Iterator<Item = f64>| if n == 0 { 0.0 } else { xs.sum::<f64>() / n as f64 };
    let means = names
        .iter()
        .map(|name| {
            let v = mean(&mut per_query.values().map(|m: &BTreeMap<String, f64>| m[name]));
            (name.clone(), v)
        })
        .collect();
    Ok(MetricReport {
        per_query,
        means,
        n_queries: n,
        unjudged_at_10: mean(&mut unjudged.into_iter()),
        excluded_no_relevant: excluded,
        missing_from_run: missing,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: f64,
}

/// Paired two-sided Student's t-test on `a - b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch { a: a.len(), b: b.len() });
    }
    let n = a.len();
    if n < 2 {
        return Err(EvalError::TooFewSamples(n));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let df = nf - 1.0;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, p: 1.0, df }
        } else {
            TTest {
                t: mean.signum() * f64::INFINITY,
                p: 0.0,
                df,
            }
        });
    }
    let t = mean / (var / nf).sqrt();
    let p = statrs::function::beta::beta_reg(df / 2.0, 0.5, df / (df + t * t));
    Ok(TTest { t, p: p.clamp(0.0, 1.0), df })
}

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceCell {
    pub mean: f64,
    /// Baselines this system beats significantly on this metric.
    pub better_than: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceTable {
    pub note: String,
    pub metrics: Vec<String>,
    pub baselines: Vec<String>,
    pub rows: BTreeMap<String, BTreeMap<String, SignificanceCell>>,
    #[serde(skip)]
    order: Vec<String>,
}

impl SignificanceTable {
    fn marker(&self, baseline: &str) -> char {
        let i = self.baselines.iter().position(|b| b == baseline).unwrap_or(0);
        (b'a' + (i % 26) as u8) as char
    }

    /// Aligned plain-text table. A superscript letter marks a significant
    /// improvement over the baseline with that letter.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}", self.note);
        for b in &self.baselines {
            let _ = writeln!(s, "# ({}) {}", self.marker(b), b);
        }
        let name_w = self.order.iter().map(|r| r.len()).max().unwrap_or(6).max(6);
        let col_w = self.metrics.iter().map(|m| m.len()).max().unwrap_or(0).max(10);
        let _ = write!(s, "{:<name_w$}", "system");
        for m in &self.metrics {
            let _ = write!(s, "  {m:>col_w$}");
        }
        s.push('\n');
        for sys in &self.order {
            let _ = write!(s, "{sys:<name_w$}");
            for m in &self.metrics {
                let cell = &self.rows[sys][m];
                let marks: String = cell.better_than.iter().map(|b| self.marker(b)).collect();
                let _ = write!(s, "  {:>col_w$}", format!("{:.4}{}", cell.mean, marks));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

/// Marks, per metric, the baselines each system beats with p below
/// [`SIGNIFICANCE_LEVEL`] and a higher mean. Rows keep `reports` order.
pub fn significance_report(
    reports: &[(String, MetricReport)],
    baseline_ids: &[String],
) -> Result<SignificanceTable, EvalError> {
    let find = |id: &str| {
        reports
            .iter()
            .find(|(n, _)| n == id)
            .map(|(_, r)| r)
            .ok_or_else(|| EvalError::UnknownSystem(id.to_string()))
    };
    for b in baseline_ids {
        find(b)?;
    }
    if let Some((first, r0)) = reports.first() {
        let keys: HashSet<&String> = r0.per_query.keys().collect();
        for (name, r) in reports {
            if r.per_query.keys().collect::<HashSet<_>>() != keys {
                return Err(EvalError::QuerySetMismatch {
                    a: first.clone(),
                    b: name.clone(),
                });
            }
        }
    }
    let metrics: Vec<String> = reports
        .first()
        .map(|(_, r)| r.means.keys().cloned().collect())
        .unwrap_or_default();
    let column = |r: &MetricReport, m: &str| -> Vec<f64> { r.per_query.values().map(|q| q[m]).collect() };
    let mut rows = BTreeMap::new();
    for (name, r) in reports {
        let mut cells = BTreeMap::new();
        for m in &metrics {
            let mut better = Vec::new();
            for b in baseline_ids.iter().filter(|b| *b != name) {
                let base = find(b)?;
                if r.means[m] <= base.means[m] || r.n_queries < 2 {
                    continue;
                }
                let tt = paired_ttest(&column(r, m), &column(base, m))?;
                if tt.p < SIGNIFICANCE_LEVEL {
                    better.push(b.clone());
                }
            }
            cells.insert(
                m.clone(),
                SignificanceCell {
                    mean: r.means[m],
                    better_than: better,
                },
            );
        }
        rows.insert(name.clone(), cells);
    }
    Ok(SignificanceTable {
        note: "significance: paired two-sided t-test per metric column, p < 0.05".into(),
        metrics,
        baselines: baseline_ids.to_vec(),
        rows,
        order: reports.iter().map(|(n, _)| n.clone()).collect(),
    })
}
