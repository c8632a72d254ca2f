//! Triplet loss, re-ranking order, P@k / nDCG@k, cross-validation folds and
//! the one-tailed pooled-variance t-test.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::tensor::{rng, Graph, Scalar, Var};
use crate::{Error, Result};

/// A training sample: query text, relevant and irrelevant document ids.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Triplet {
    pub query: String,
    pub positive: String,
    pub negative: String,
}

impl Triplet {
    pub fn new(query: impl Into<String>, positive: impl Into<String>, negative: impl Into<String>) -> Result<Self> {
        let t = Self {
            query: query.into(),
            positive: positive.into(),
            negative: negative.into(),
        };
        if t.positive == t.negative {
            return Err(Error::Data(format!("triplet uses `{}` as both positive and negative", t.positive)));
        }
        Ok(t)
    }
}

/// Graded judgments; unjudged pairs read as 0.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn insert(&mut self, qid: &str, docid: &str, rel: u32) {
        self.judgments.entry(qid.into()).or_default().insert(docid.into(), rel);
    }

    pub fn get(&self, qid: &str, docid: &str) -> u32 {
        self.judgments
            .get(qid)
            .and_then(|m| m.get(docid))
            .copied()
            .unwrap_or(0)
    }

    pub fn query(&self, qid: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(qid)
    }

    pub fn qids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    /// `(qid, docid, rel)` in key order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u32)> {
        self.judgments
            .iter()
            .flat_map(|(q, m)| m.iter().map(move |(d, &r)| (q.as_str(), d.as_str(), r)))
    }

    pub fn len(&self) -> usize {
        self.judgments.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub qid: String,
    pub docid: String,
    pub rank: usize,
    pub score: f64,
    pub tag: String,
}

/// Records grouped by query, each list in rank order.
pub type Run = BTreeMap<String, Vec<RunRecord>>;

/// Groups records by qid and sorts each group by rank.
pub fn group_run(records: impl IntoIterator<Item = RunRecord>) -> Run {
    let mut run = Run::new();
    for r in records {
        run.entry(r.qid.clone()).or_default().push(r);
    }
    for list in run.values_mut() {
        list.sort_by_key(|r| r.rank);
    }
    run
}

/// `1 / (1 + e^{s_pos − s_neg})`.
pub fn triplet_loss(s_pos: f64, s_neg: f64) -> f64 {
    crate::tensor::stable_sigmoid(s_neg - s_pos)
}

/// Mean triplet loss of paired score vars, on the tape.
pub fn triplet_loss_var<T: Scalar>(g: &mut Graph<T>, pairs: &[(Var, Var)]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Data("empty triplet batch".into()));
    }
    let mut losses = Vec::with_capacity(pairs.len());
    for &(pos, neg) in pairs {
        let diff = g.sub(neg, pos)?;
        losses.push(g.sigmoid(diff)?);
    }
    let all = g.concat_rows(&losses)?;
    g.mean(all)
}

/// Orders scored candidates by descending score, ties by ascending docid, and assigns ranks from 1.
pub fn rerank_scores(qid: &str, mut scored: Vec<(String, f64)>, tag: &str) -> Vec<RunRecord> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored
        .into_iter()
        .enumerate()
        .map(|(i, (docid, score))| RunRecord {
            qid: qid.into(),
            docid,
            rank: i + 1,
            score,
            tag: tag.into(),
        })
        .collect()
}

/// Per-query metric values plus the queries that had no run records.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PerQuery {
    pub values: BTreeMap<String, f64>,
    pub skipped: Vec<String>,
}

impl PerQuery {
    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.values().sum::<f64>() / self.values.len() as f64
    }
}

fn per_query(run: &Run, qrels: &Qrels, k: usize, f: impl Fn(&[RunRecord], &str) -> f64) -> Result<PerQuery> {
    if k == 0 {
        return Err(Error::Config("metric cutoff k must be at least 1".into()));
    }
    let mut out = PerQuery::default();
    for qid in qrels.qids() {
        match run.get(qid) {
            Some(list) if !list.is_empty() => {
                out.values.insert(qid.into(), f(list, qid));
            }
            _ => out.skipped.push(qid.into()),
        }
    }
    Ok(out)
}

/// `|relevant in top k| / k` (the denominator stays `k` for short runs).
pub fn precision_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<PerQuery> {
    per_query(run, qrels, k, |list, qid| {
        let hits = list.iter().take(k).filter(|r| qrels.get(qid, &r.docid) >= 1).count();
        hits as f64 / k as f64
    })
}

fn gain(rel: u32) -> f64 {
    libm::exp2(rel as f64) - 1.0
}

fn discount(i: usize) -> f64 {
    libm::log2(i as f64 + 1.0)
}

/// DCG with gain `2^rel − 1` and discount `log2(i + 1)`, normalized by the ideal ordering of the judgments.
pub fn ndcg_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<PerQuery> {
    per_query(run, qrels, k, |list, qid| {
        let dcg: f64 = list
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, r)| gain(qrels.get(qid, &r.docid)) / discount(i + 1))
            .sum();
        let mut ideal: Vec<u32> = qrels.query(qid).map(|m| m.values().copied().collect()).unwrap_or_default();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, &r)| gain(r) / discount(i + 1)).sum();
        if idcg == 0.0 {
            0.0
        } else {
            dcg / idcg
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Precision(usize),
    Ndcg(usize),
}

impl Metric {
    pub fn label(&self) -> String {
        match self {
            Self::Precision(k) => format!("P@{k}"),
            Self::Ndcg(k) => format!("nDCG@{k}"),
        }
    }

    pub fn compute(&self, run: &Run, qrels: &Qrels) -> Result<PerQuery> {
        match *self {
            Self::Precision(k) => precision_at_k(run, qrels, k),
            Self::Ndcg(k) => ndcg_at_k(run, qrels, k),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// `(metric, per-query values)` in the requested order.
    pub metrics: Vec<(Metric, PerQuery)>,
    /// Queries with at least one run record.
    pub query_count: usize,
}

impl MetricReport {
    pub fn mean(&self, metric: Metric) -> Option<f64> {
        self.metrics.iter().find(|(m, _)| *m == metric).map(|(_, v)| v.mean())
    }

    pub fn skipped(&self) -> &[String] {
        self.metrics.first().map(|(_, p)| p.skipped.as_slice()).unwrap_or(&[])
    }
}

pub fn evaluate(run: &Run, qrels: &Qrels, metrics: &[Metric]) -> Result<MetricReport> {
    let mut out = Vec::with_capacity(metrics.len());
    for m in metrics {
        out.push((*m, m.compute(run, qrels)?));
    }
    let query_count = out.first().map(|(_, p)| p.values.len()).unwrap_or(0);
    Ok(MetricReport {
        metrics: out,
        query_count,
    })
}

// ------------------------------------------------------------ folds

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Folds {
    pub folds: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded partition of `qids` into `n_folds` near-equal folds.
pub fn fold_split(qids: &[String], n_folds: usize, seed: u64) -> Result<Folds> {
    if n_folds < 3 {
        return Err(Error::Config("need at least 3 folds".into()));
    }
    if qids.len() < n_folds {
        return Err(Error::Data(format!("{} queries cannot fill {n_folds} folds", qids.len())));
    }
    let mut sorted: Vec<String> = qids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != qids.len() {
        return Err(Error::Data("duplicate query ids".into()));
    }
    sorted.shuffle(&mut rng::stream(seed, "folds"));
    let mut folds = alloc::vec![Vec::new(); n_folds];
    for (i, q) in sorted.into_iter().enumerate() {
        folds[i % n_folds].push(q);
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(Folds { folds })
}

impl Folds {
    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    /// Rotation `r`: test is fold `r`, validation fold `r + 1`, the rest train.
    pub fn rotation(&self, r: usize) -> Result<Split> {
        let n = self.folds.len();
        if r >= n {
            return Err(Error::Config(format!("rotation {r} out of range for {n} folds")));
        }
        let v = (r + 1) % n;
        let mut train: Vec<String> = (0..n)
            .filter(|&i| i != r && i != v)
            .flat_map(|i| self.folds[i].iter().cloned())
            .collect();
        train.sort();
        Ok(Split {
            train,
            val: self.folds[v].clone(),
            test: self.folds[r].clone(),
        })
    }
}

// ------------------------------------------------------------ statistics

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// `P(T_df > t)`, the one-tailed p-value for `mean(a) > mean(b)`.
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let ss = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    (m, ss)
}

/// Pooled-variance two-sample t-test of `mean(a) > mean(b)`.
pub fn t_test_one_tailed(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Data("each sample needs at least 2 values".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "t_test_one_tailed" });
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, ssa) = mean_var(a);
    let (mb, ssb) = mean_var(b);
    let df = na + nb - 2.0;
    let pooled = (ssa + ssb) / df;
    let diff = ma - mb;
    if pooled == 0.0 {
        let (t, p) = if diff == 0.0 {
            (0.0, 0.5)
        } else if diff > 0.0 {
            (f64::INFINITY, 0.0)
        } else {
            (f64::NEG_INFINITY, 1.0)
        };
        return Ok(TTest { t, df, p });
    }
    let t = diff / libm::sqrt(pooled * (1.0 / na + 1.0 / nb));
    Ok(TTest {
        t,
        df,
        p: student_t_upper(t, df),
    })
}

/// `P(T > t)` for Student's t with `df` degrees of freedom.
pub fn student_t_upper(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    let tail = 0.5 * inc_beta(0.5 * df, 0.5, x);
    if t >= 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// Regularized incomplete beta `I_x(a, b)` via its continued fraction.
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b) + a * libm::log(x) + b * libm::log1p(-x);
    let front = libm::exp(ln_front);
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-15 {
            break;
        }
    }
    h
}

/// `100 · (lft / full − 1)`.
pub fn improvement_pct(lft: f64, full: f64) -> Result<f64> {
    if full == 0.0 {
        return Err(Error::Undefined("improvement over a zero baseline".into()));
    }
    if !(lft.is_finite() && full.is_finite()) {
        return Err(Error::NonFinite { op: "improvement_pct" });
    }
    Ok(100.0 * (lft / full - 1.0))
}

/// Improvement of the best LFT score over the full fine-tuning score.
pub fn best_improvement_pct(lft_scores: &[f64], full: f64) -> Result<f64> {
    let best = lft_scores
        .iter()
        .copied()
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
        .ok_or_else(|| Error::Data("no LFT scores".into()))?;
    improvement_pct(best, full)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn run_of(qid: &str, docs: &[&str]) -> Run {
        let scored = docs
            .iter()
            .enumerate()
            .map(|(i, d)| (d.to_string(), (docs.len() - i) as f64))
            .collect();
        group_run(rerank_scores(qid, scored, "t"))
    }

    #[test]
    fn loss_examples() {
        assert_eq!(triplet_loss(0.3, 0.3), 0.5);
        assert!(triplet_loss(40.0, 0.0) < 1e-15);
        assert!((triplet_loss(1.0, 0.0) - 1.0 / (1.0 + core::f64::consts::E)).abs() < 1e-15);
        assert!(triplet_loss(-1000.0, 1000.0).is_finite());
    }

    #[test]
    fn loss_var_matches_scalar() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(crate::tensor::Tensor::scalar(1.0));
        let n = g.constant(crate::tensor::Tensor::scalar(0.0));
        let l = triplet_loss_var(&mut g, &[(p, n), (n, n)]).unwrap();
        let want = 0.5 * (triplet_loss(1.0, 0.0) + 0.5);
        assert!((g.scalar(l) - want).abs() < 1e-15);
    }

    #[test]
    fn rerank_examples() {
        let one = rerank_scores("q", vec![("d9".into(), -3.0)], "t");
        assert_eq!(one[0].rank, 1);
        let tied = rerank_scores("q", vec![("d3".into(), 1.0), ("d1".into(), 1.0), ("d2".into(), 1.0)], "t");
        let order: Vec<&str> = tied.iter().map(|r| r.docid.as_str()).collect();
        assert_eq!(order, ["d1", "d2", "d3"]);
        let r = rerank_scores("q", vec![("d1".into(), 0.3), ("d2".into(), 0.9)], "t");
        assert_eq!(r[0].docid, "d2");
        assert_eq!(r[1].rank, 2);
    }

    #[test]
    fn precision_examples() {
        let mut qrels = Qrels::default();
        let docs: Vec<String> = (0..20).map(|i| format!("d{i:02}")).collect();
        for d in &docs[..5] {
            qrels.insert("q", d, 1);
        }
        let refs: Vec<&str> = docs.iter().map(String::as_str).collect();
        let run = run_of("q", &refs);
        assert_eq!(precision_at_k(&run, &qrels, 20).unwrap().values["q"], 0.25);
        assert_eq!(precision_at_k(&run, &qrels, 5).unwrap().values["q"], 1.0);

        let mut q2 = Qrels::default();
        for d in &docs[..10] {
            q2.insert("q", d, 1);
        }
        let short = run_of("q", &refs[..10]);
        assert_eq!(precision_at_k(&short, &q2, 20).unwrap().values["q"], 0.5);
    }

    #[test]
    fn ndcg_examples() {
        let mut qrels = Qrels::default();
        qrels.insert("q", "b", 1);
        qrels.insert("q", "a", 0);
        let run = run_of("q", &["a", "b"]);
        let v = ndcg_at_k(&run, &qrels, 2).unwrap().values["q"];
        assert!((v - 1.0 / libm::log2(3.0)).abs() < 1e-12);
        let ideal = run_of("q", &["b", "a"]);
        assert_eq!(ndcg_at_k(&ideal, &qrels, 2).unwrap().values["q"], 1.0);
        let miss = run_of("q", &["a"]);
        assert_eq!(ndcg_at_k(&miss, &qrels, 1).unwrap().values["q"], 0.0);
    }

    #[test]
    fn queries_without_records_are_skipped() {
        let mut qrels = Qrels::default();
        qrels.insert("q1", "a", 1);
        qrels.insert("q2", "a", 1);
        let run = run_of("q1", &["a"]);
        let p = precision_at_k(&run, &qrels, 1).unwrap();
        assert_eq!(p.skipped, vec!["q2".to_string()]);
        assert_eq!(p.mean(), 1.0);
        let report = evaluate(&run, &qrels, &[Metric::Precision(1), Metric::Ndcg(1)]).unwrap();
        assert_eq!(report.query_count, 1);
        assert_eq!(report.mean(Metric::Ndcg(1)), Some(1.0));
    }

    #[test]
    fn folds_examples() {
        let qids: Vec<String> = (0..10).map(|i| format!("q{i}")).collect();
        let f = fold_split(&qids, 5, 3).unwrap();
        assert!(f.folds.iter().all(|x| x.len() == 2));
        let mut all: Vec<String> = f.folds.concat();
        all.sort();
        let mut want = qids.clone();
        want.sort();
        assert_eq!(all, want);
        assert_eq!(f, fold_split(&qids, 5, 3).unwrap());
        let s = f.rotation(4).unwrap();
        assert_eq!(s.test, f.folds[4]);
        assert_eq!(s.val, f.folds[0]);
        assert_eq!(s.train.len(), 6);
        assert!(fold_split(&qids[..4], 5, 3).is_err());
    }

    #[test]
    fn t_test_examples() {
        let r = t_test_one_tailed(&[2.0, 3.0, 4.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r.t - 1.2247).abs() < 1e-4);
        assert_eq!(r.df, 4.0);
        assert!((r.p - 0.1438).abs() < 1e-3, "{}", r.p);
        let s = t_test_one_tailed(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap();
        assert!((r.p + s.p - 1.0).abs() < 1e-12);
        let same = t_test_one_tailed(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((same.t, same.p), (0.0, 0.5));
        let flat = t_test_one_tailed(&[2.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!(flat.p, 0.0);
        assert!(t_test_one_tailed(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn incomplete_beta_edges() {
        assert_eq!(inc_beta(2.0, 3.0, 0.0), 0.0);
        assert_eq!(inc_beta(2.0, 3.0, 1.0), 1.0);
        // I_x(1, 1) = x
        assert!((inc_beta(1.0, 1.0, 0.3) - 0.3).abs() < 1e-14);
        // I_x(a, b) = 1 − I_{1−x}(b, a)
        assert!((inc_beta(2.5, 0.5, 0.7) - (1.0 - inc_beta(0.5, 2.5, 0.3))).abs() < 1e-13);
    }

    #[test]
    fn improvement_examples() {
        assert_eq!(format!("{:.2}", improvement_pct(0.4012, 0.3966).unwrap()), "1.16");
        assert_eq!(format!("{:.2}", improvement_pct(0.2447, 0.1846).unwrap()), "32.56");
        assert_eq!(improvement_pct(0.3, 0.3).unwrap(), 0.0);
        assert!(matches!(improvement_pct(0.3, 0.0), Err(Error::Undefined(_))));
        assert_eq!(best_improvement_pct(&[0.1, 0.4012], 0.3966).unwrap(), improvement_pct(0.4012, 0.3966).unwrap());
    }
}
