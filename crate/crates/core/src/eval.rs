//! Retrieval accuracy, paired-bootstrap significance and the human-judgment
//! utility harness.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Domain, Question};
use crate::error::{Error, Result};
use crate::feedback::RatingLabel;

/// Rounds a percentage to two decimals.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub question_id: String,
    pub domain: Domain,
    pub top1: String,
    pub hit: bool,
}

/// Per-question top-1 outcomes of one system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub system: String,
    pub questions: Vec<QuestionResult>,
}

impl EvalRun {
    pub fn hits(&self) -> Vec<bool> {
        self.questions.iter().map(|q| q.hit).collect()
    }

    /// Overall P@1 as an unrounded percentage.
    pub fn overall(&self) -> f64 {
        percent(self.questions.iter().map(|q| q.hit))
    }

    /// Unrounded P@1 percentage per domain, in domain order.
    pub fn per_domain(&self) -> BTreeMap<Domain, f64> {
        let mut groups: BTreeMap<Domain, Vec<bool>> = BTreeMap::new();
        for q in &self.questions {
            groups.entry(q.domain.clone()).or_default().push(q.hit);
        }
        groups.into_iter().map(|(d, hits)| (d, percent(hits))).collect()
    }

    /// Hit vectors of two runs aligned on question id.
    pub fn aligned_hits(baseline: &EvalRun, system: &EvalRun) -> Result<(Vec<bool>, Vec<bool>)> {
        let ids = |r: &EvalRun| r.questions.iter().map(|q| q.question_id.clone()).collect::<BTreeSet<_>>();
        if ids(baseline) != ids(system) || baseline.questions.len() != system.questions.len() {
            return Err(Error::MisalignedSystems(format!(
                "{} and {} were evaluated on different questions",
                baseline.system, system.system
            )));
        }
        let b: BTreeMap<&str, bool> = baseline.questions.iter().map(|q| (q.question_id.as_str(), q.hit)).collect();
        let a = system
            .questions
            .iter()
            .map(|q| b[q.question_id.as_str()])
            .collect();
        Ok((a, system.hits()))
    }
}

fn percent(hits: impl IntoIterator<Item = bool>) -> f64 {
    let (mut n, mut k) = (0usize, 0usize);
    for h in hits {
        n += 1;
        k += h as usize;
    }
    if n == 0 {
        0.0
    } else {
        100.0 * k as f64 / n as f64
    }
}

/// Scores each question's top-ranked passage against its gold set.
pub fn precision_at_1<'a>(system: &str, ranked: impl IntoIterator<Item = (&'a Question, &'a [String])>) -> Result<EvalRun> {
    let questions = ranked
        .into_iter()
        .map(|(q, ids)| {
            let top1 = ids.first().ok_or(Error::NoCandidates)?;
            if q.gold_passage_ids.is_empty() {
                return Err(Error::MissingGold(q.id.clone()));
            }
            Ok(QuestionResult {
                question_id: q.id.clone(),
                domain: q.domain.clone(),
                top1: top1.clone(),
                hit: q.is_gold(top1),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalRun {
        system: system.to_string(),
        questions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub baseline: String,
    pub p_value: f64,
}

/// JSON evaluation report. Percentages are rounded to two decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub per_domain: BTreeMap<Domain, f64>,
    pub overall: f64,
    #[serde(default)]
    pub significance: Vec<Significance>,
    pub questions: Vec<QuestionResult>,
}

impl EvalReport {
    pub fn new(run: &EvalRun, significance: Vec<Significance>) -> Self {
        EvalReport {
            system: run.system.clone(),
            per_domain: run.per_domain().into_iter().map(|(d, p)| (d, round2(p))).collect(),
            overall: round2(run.overall()),
            significance,
            questions: run.questions.clone(),
        }
    }

    pub fn run(&self) -> EvalRun {
        EvalRun {
            system: self.system.clone(),
            questions: self.questions.clone(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Plain-text table with one column per domain plus "All".
    pub fn table(&self) -> String {
        let mut header = format!("{:<24}", "System");
        let mut row = format!("{:<24}", self.system);
        for (d, p) in &self.per_domain {
            let _ = write!(header, " {:>9}", d.to_string());
            let _ = write!(row, " {:>9.2}", p);
        }
        let _ = write!(header, " {:>9}", "All");
        let _ = write!(row, " {:>9.2}", self.overall);
        let mut out = format!("{header}\n{row}\n");
        for s in &self.significance {
            let _ = writeln!(out, "p-value vs {}: {:.4}", s.baseline, s.p_value);
        }
        out
    }
}

/// Paired bootstrap p-value for "system b beats system a" on P@1.
///
/// Each resample draws question indices with replacement and compares the
/// two systems on that sample. The p-value counts resamples where b does
/// worse than a, plus half of those where they tie, so identical systems
/// score exactly 0.5 and swapping the systems gives `1 - p`.
pub fn paired_bootstrap(a: &[bool], b: &[bool], n_resamples: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::MisalignedSystems(format!("{} vs {} questions", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::TooFewItems(0));
    }
    if n_resamples == 0 {
        return Err(Error::Config("at least one resample is needed".into()));
    }
    let delta: Vec<i64> = a.iter().zip(b).map(|(x, y)| *y as i64 - *x as i64).collect();
    let n = delta.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reversed = 0.0;
    for _ in 0..n_resamples {
        let d: i64 = (0..n).map(|_| delta[rng.random_range(0..n)]).sum();
        if d < 0 {
            reversed += 1.0;
        } else if d == 0 {
            reversed += 0.5;
        }
    }
    Ok(reversed / n_resamples as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThreeWay {
    Incorrect,
    PartiallyCorrect,
    Correct,
}

impl ThreeWay {
    pub fn ordinal(self) -> usize {
        self as usize
    }
}

pub fn merge_rating_to_3way(rating: RatingLabel) -> ThreeWay {
    match rating {
        RatingLabel::Excellent => ThreeWay::Correct,
        RatingLabel::Good | RatingLabel::CouldBeImproved => ThreeWay::PartiallyCorrect,
        RatingLabel::Bad => ThreeWay::Incorrect,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanJudgment {
    pub item_id: String,
    pub rater_id: String,
    pub label: ThreeWay,
}

pub fn read_judgments(path: impl AsRef<Path>) -> Result<Vec<HumanJudgment>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Rater accuracy against gold labels, averaged over the raters of each
/// item and then over items, as a percentage.
pub fn judgment_accuracy(judgments: &[HumanJudgment], gold: &BTreeMap<String, ThreeWay>, raters_per_item: usize) -> Result<f64> {
    let mut by_item: BTreeMap<&str, Vec<ThreeWay>> = BTreeMap::new();
    for j in judgments {
        by_item.entry(&j.item_id).or_default().push(j.label);
    }
    if by_item.is_empty() {
        return Err(Error::TooFewItems(0));
    }
    let mut total = 0.0;
    for (item, labels) in &by_item {
        if labels.len() != raters_per_item {
            return Err(Error::RaterCount {
                item: item.to_string(),
                expected: raters_per_item,
                actual: labels.len(),
            });
        }
        let g = gold.get(*item).ok_or_else(|| Error::MissingGold(item.to_string()))?;
        total += labels.iter().filter(|l| *l == g).count() as f64 / labels.len() as f64;
    }
    Ok(100.0 * total / by_item.len() as f64)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|a, b| x[*a].total_cmp(&x[*b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` when either input has zero variance.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::MisalignedSystems(format!("{} vs {} items", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::TooFewItems(x.len()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        log::warn!("spearman correlation is undefined for constant input");
        return Ok(None);
    }
    Ok(Some(sxy / (sxx * syy).sqrt()))
}

/// Inter-rater agreement on the ordinal 3-way scale.
pub fn spearman_agreement(rater1: &[ThreeWay], rater2: &[ThreeWay]) -> Result<Option<f64>> {
    let ord = |v: &[ThreeWay]| v.iter().map(|l| l.ordinal() as f64).collect::<Vec<_>>();
    spearman(&ord(rater1), &ord(rater2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(id: &str, gold: &str) -> Question {
        Question {
            id: id.into(),
            domain: Domain::Uk,
            text: "t".into(),
            gold_passage_ids: vec![gold.into()],
        }
    }

    #[test]
    fn p_at_1_examples() {
        let qs = [q("a", "1"), q("b", "2"), q("c", "3")];
        let all: Vec<Vec<String>> = vec![vec!["1".into()], vec!["2".into()], vec!["3".into()]];
        let run = precision_at_1("s", qs.iter().zip(all.iter().map(|v| v.as_slice()))).unwrap();
        assert_eq!(run.overall(), 100.0);
        let two: Vec<Vec<String>> = vec![vec!["1".into()], vec!["x".into()], vec!["3".into()]];
        let run = precision_at_1("s", qs.iter().zip(two.iter().map(|v| v.as_slice()))).unwrap();
        assert_eq!(round2(run.overall()), 66.67);
        assert_eq!(EvalReport::new(&run, vec![]).per_domain[&Domain::Uk], 66.67);
        let empty: Vec<Vec<String>> = vec![vec![], vec![], vec![]];
        assert!(precision_at_1("s", qs.iter().zip(empty.iter().map(|v| v.as_slice()))).is_err());
    }

    #[test]
    fn bootstrap_extremes() {
        let same = vec![true, false, true, true, false];
        assert_eq!(paired_bootstrap(&same, &same, 1000, 0).unwrap(), 0.5);
        let a = vec![false; 100];
        let b = vec![true; 100];
        assert!(paired_bootstrap(&a, &b, 10_000, 0).unwrap() < 0.001);
        assert!(paired_bootstrap(&a, &b[..99], 10, 0).is_err());
    }

    #[test]
    fn merge_is_total_and_onto() {
        let merged: BTreeSet<ThreeWay> = RatingLabel::ALL.iter().map(|l| merge_rating_to_3way(*l)).collect();
        assert_eq!(merged.len(), 3);
        assert_eq!(merge_rating_to_3way(RatingLabel::Excellent), ThreeWay::Correct);
        assert_eq!(merge_rating_to_3way(RatingLabel::Good), ThreeWay::PartiallyCorrect);
        assert_eq!(merge_rating_to_3way(RatingLabel::CouldBeImproved), ThreeWay::PartiallyCorrect);
        assert_eq!(merge_rating_to_3way(RatingLabel::Bad), ThreeWay::Incorrect);
    }

    fn j(item: &str, rater: &str, label: ThreeWay) -> HumanJudgment {
        HumanJudgment {
            item_id: item.into(),
            rater_id: rater.into(),
            label,
        }
    }

    #[test]
    fn accuracy_examples() {
        let gold: BTreeMap<String, ThreeWay> =
            [("i1".to_string(), ThreeWay::Correct), ("i2".to_string(), ThreeWay::Incorrect)].into();
        let perfect = vec![
            j("i1", "r1", ThreeWay::Correct),
            j("i1", "r2", ThreeWay::Correct),
            j("i2", "r1", ThreeWay::Incorrect),
            j("i2", "r2", ThreeWay::Incorrect),
        ];
        assert_eq!(judgment_accuracy(&perfect, &gold, 2).unwrap(), 100.0);
        let half = vec![
            j("i1", "r1", ThreeWay::Correct),
            j("i1", "r2", ThreeWay::Incorrect),
            j("i2", "r1", ThreeWay::Incorrect),
            j("i2", "r2", ThreeWay::PartiallyCorrect),
        ];
        assert_eq!(judgment_accuracy(&half, &gold, 2).unwrap(), 50.0);
        assert!(matches!(
            judgment_accuracy(&half[..3], &gold, 2),
            Err(Error::RaterCount { .. })
        ));
    }

    #[test]
    fn spearman_examples() {
        use ThreeWay::*;
        let x = [Incorrect, Correct, PartiallyCorrect, Correct];
        assert!((spearman_agreement(&x, &x).unwrap().unwrap() - 1.0).abs() < 1e-12);
        let rev: Vec<ThreeWay> = [0usize, 1, 2]
            .iter()
            .map(|i| [Incorrect, PartiallyCorrect, Correct][*i])
            .collect();
        let fwd: Vec<ThreeWay> = rev.iter().rev().copied().collect();
        assert!((spearman_agreement(&rev, &fwd).unwrap().unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(spearman_agreement(&[Correct, Correct], &[Incorrect, Correct]).unwrap(), None);
        assert!(spearman_agreement(&[Correct], &[Correct]).is_err());
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
    }
}
