//! Post-deployment feedback: ratings, rating distributions and the
//! reranker training sets built from them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Domain};
use crate::error::{Error, Result};

/// Answer quality, ordered from worst to best.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", try_from = "String")]
pub enum RatingLabel {
    Bad,
    CouldBeImproved,
    Good,
    Excellent,
}

impl RatingLabel {
    pub const ALL: [RatingLabel; 4] = [
        RatingLabel::Bad,
        RatingLabel::CouldBeImproved,
        RatingLabel::Good,
        RatingLabel::Excellent,
    ];

    /// Ordinal score, 0 for bad up to 3 for excellent.
    pub fn score(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RatingLabel::Bad => "bad",
            RatingLabel::CouldBeImproved => "could_be_improved",
            RatingLabel::Good => "good",
            RatingLabel::Excellent => "excellent",
        }
    }
}

impl fmt::Display for RatingLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RatingLabel {
    type Err = Error;

    /// Accepts the snake_case names and their spaced, capitalized forms.
    /// "Acceptable" is an alias of `good`.
    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .map(|c| if c == ' ' || c == '-' { '_' } else { c })
            .collect();
        match norm.as_str() {
            "bad" => Ok(RatingLabel::Bad),
            "could_be_improved" => Ok(RatingLabel::CouldBeImproved),
            "good" => Ok(RatingLabel::Good),
            "acceptable" => {
                log::info!("normalizing rating label {s:?} to good");
                Ok(RatingLabel::Good)
            }
            "excellent" => Ok(RatingLabel::Excellent),
            _ => Err(Error::UnknownRating(s.to_string())),
        }
    }
}

impl TryFrom<String> for RatingLabel {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// One unit of post-deployment feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub question_text: String,
    pub passage_id: String,
    pub domain: Domain,
    pub rating: RatingLabel,
    pub explanation: String,
    pub worker_id: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    /// The served answer request this feedback refers to, if collected live.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<String>,
}

pub fn read_feedback(path: impl AsRef<Path>) -> Result<Vec<FeedbackRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(records)
}

pub fn append_feedback(path: impl AsRef<Path>, records: &[FeedbackRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Probability vector over the four labels, in [`RatingLabel::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct RatingDistribution([f64; 4]);

impl RatingDistribution {
    pub fn new(p: [f64; 4]) -> Result<Self> {
        if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidDistribution(format!("{p:?} has negative or non-finite entries")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!("{p:?} sums to {sum}")));
        }
        Ok(RatingDistribution(p))
    }

    pub fn one_hot(label: RatingLabel) -> Self {
        let mut p = [0.0; 4];
        p[label.score()] = 1.0;
        RatingDistribution(p)
    }

    pub fn uniform() -> Self {
        RatingDistribution([0.25; 4])
    }

    pub fn from_counts(counts: [usize; 4]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptyGroup);
        }
        Ok(RatingDistribution(counts.map(|c| c as f64 / total as f64)))
    }

    pub fn from_labels(labels: &[RatingLabel]) -> Result<Self> {
        let mut counts = [0usize; 4];
        for l in labels {
            counts[l.score()] += 1;
        }
        Self::from_counts(counts)
    }

    pub fn probs(&self) -> &[f64; 4] {
        &self.0
    }

    pub fn prob(&self, label: RatingLabel) -> f64 {
        self.0[label.score()]
    }

    pub fn p_excellent(&self) -> f64 {
        self.prob(RatingLabel::Excellent)
    }

    /// Expected ordinal score, in `[0, 3]`.
    pub fn expected_score(&self) -> f64 {
        self.0.iter().enumerate().map(|(i, p)| i as f64 * p).sum()
    }

    pub fn argmax(&self) -> RatingLabel {
        let mut best = 0;
        for i in 1..4 {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        RatingLabel::ALL[best]
    }
}

impl TryFrom<[f64; 4]> for RatingDistribution {
    type Error = Error;

    fn try_from(p: [f64; 4]) -> Result<Self> {
        Self::new(p)
    }
}

impl From<RatingDistribution> for [f64; 4] {
    fn from(d: RatingDistribution) -> Self {
        d.0
    }
}

/// Lower bound applied to predicted probabilities inside [`kl_loss`].
pub const PROB_FLOOR: f64 = 1e-12;

/// `D_KL(target || predicted)` with `0 log 0 = 0`.
pub fn kl_loss(target: &RatingDistribution, predicted: &RatingDistribution) -> f64 {
    target
        .probs()
        .iter()
        .zip(predicted.probs())
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, p)| t * (t / p.max(PROB_FLOOR)).ln())
        .sum()
}

/// Grouping key for feedback on the same answer to the same question.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairKey {
    pub domain: Domain,
    pub question_text: String,
    pub passage_id: String,
}

impl PairKey {
    pub fn of(record: &FeedbackRecord) -> Self {
        PairKey {
            domain: record.domain.clone(),
            question_text: record.question_text.clone(),
            passage_id: record.passage_id.clone(),
        }
    }
}

/// Label counts per (question, passage) pair, normalized to distributions.
pub fn aggregate_ratings(records: &[FeedbackRecord]) -> Result<BTreeMap<PairKey, RatingDistribution>> {
    let mut counts: BTreeMap<PairKey, [usize; 4]> = BTreeMap::new();
    for r in records {
        counts.entry(PairKey::of(r)).or_default()[r.rating.score()] += 1;
    }
    counts
        .into_iter()
        .map(|(k, c)| Ok((k, RatingDistribution::from_counts(c)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Feedback,
    Vanilla,
    Combined,
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feedback" => Ok(Provenance::Feedback),
            "vanilla" => Ok(Provenance::Vanilla),
            "combined" => Ok(Provenance::Combined),
            other => Err(Error::Config(format!("unknown provenance {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankerExample {
    pub domain: Domain,
    pub question: String,
    pub passage_id: String,
    pub passage: String,
    pub target: RatingDistribution,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankerTrainingSet {
    pub provenance: Provenance,
    pub examples: Vec<RerankerExample>,
}

impl RerankerTrainingSet {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Multiset union of a feedback and a vanilla set.
    pub fn combine(feedback: &RerankerTrainingSet, vanilla: &RerankerTrainingSet) -> Self {
        RerankerTrainingSet {
            provenance: Provenance::Combined,
            examples: feedback.examples.iter().chain(&vanilla.examples).cloned().collect(),
        }
    }

    /// Splits by question so that all examples of a question land on the
    /// same side. `floor(fraction * questions)` shuffled questions go to the
    /// second set.
    pub fn split_by_question(&self, fraction: f64, seed: u64) -> (RerankerTrainingSet, RerankerTrainingSet) {
        let mut questions: Vec<&str> = self.examples.iter().map(|ex| ex.question.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
        questions.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_valid = (fraction.clamp(0.0, 1.0) * questions.len() as f64).floor() as usize;
        let held: BTreeSet<&str> = questions.into_iter().take(n_valid).collect();
        let (valid, train): (Vec<_>, Vec<_>) = self.examples.iter().cloned().partition(|ex| held.contains(ex.question.as_str()));
        let wrap = |examples| RerankerTrainingSet {
            provenance: self.provenance,
            examples,
        };
        (wrap(train), wrap(valid))
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        for ex in &self.examples {
            serde_json::to_writer(&mut buf, ex)?;
            buf.push(b'\n');
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>, provenance: Provenance) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut examples = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            examples.push(serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(RerankerTrainingSet { provenance, examples })
    }
}

/// One example per feedback record; the target is the rating distribution of
/// the record's (question, passage) group and the explanation is the
/// record's own. Records from `holdout` are left out.
pub fn feedback_training_set(records: &[FeedbackRecord], corpus: &Corpus, holdout: Option<&Domain>) -> Result<RerankerTrainingSet> {
    let kept: Vec<&FeedbackRecord> = records
        .iter()
        .filter(|r| holdout.is_none_or(|h| &r.domain != h))
        .collect();
    let owned: Vec<FeedbackRecord> = kept.iter().map(|r| (*r).clone()).collect();
    let targets = aggregate_ratings(&owned)?;
    let examples = owned
        .into_iter()
        .map(|r| {
            let passage = corpus
                .passage(&r.domain, &r.passage_id)
                .ok_or_else(|| Error::UnknownPassage(r.passage_id.clone()))?;
            let target = targets[&PairKey::of(&r)];
            let explanation = Some(r.explanation.trim().to_string()).filter(|e| !e.is_empty());
            Ok(RerankerExample {
                domain: r.domain,
                question: r.question_text,
                passage_id: r.passage_id,
                passage: passage.text.clone(),
                target,
                explanation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RerankerTrainingSet {
        provenance: Provenance::Feedback,
        examples,
    })
}

/// Converts pre-deployment questions into reranker examples: the gold
/// passage rated excellent and `negatives_per_positive` random non-gold
/// passages of the same domain rated bad. Negatives are drawn without
/// replacement when the domain has enough of them.
pub fn synthesize_vanilla(corpus: &Corpus, question_ids: &BTreeSet<String>, negatives_per_positive: usize, seed: u64) -> Result<RerankerTrainingSet> {
    if negatives_per_positive == 0 {
        return Err(Error::Config("negatives_per_positive must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::new();
    for q in corpus.questions_in(question_ids) {
        let passages = corpus.passages_in(&q.domain);
        if passages.len() <= 1 {
            return Err(Error::DomainTooSmall(q.domain.to_string()));
        }
        let gold = corpus
            .passage(&q.domain, &q.gold_passage_ids[0])
            .ok_or_else(|| Error::DanglingGoldId(q.id.clone()))?;
        examples.push(RerankerExample {
            domain: q.domain.clone(),
            question: q.text.clone(),
            passage_id: gold.id.clone(),
            passage: gold.text.clone(),
            target: RatingDistribution::one_hot(RatingLabel::Excellent),
            explanation: None,
        });

        let pool: Vec<_> = passages.into_iter().filter(|p| !q.is_gold(&p.id)).collect();
        if pool.is_empty() {
            return Err(Error::DomainTooSmall(q.domain.to_string()));
        }
        let negatives: Vec<_> = if negatives_per_positive <= pool.len() {
            let mut shuffled = pool.clone();
            shuffled.partial_shuffle(&mut rng, negatives_per_positive);
            shuffled.truncate(negatives_per_positive);
            shuffled
        } else {
            (0..negatives_per_positive)
                .map(|_| *pool.choose(&mut rng).expect("pool is non-empty"))
                .collect()
        };
        for neg in negatives {
            examples.push(RerankerExample {
                domain: q.domain.clone(),
                question: q.text.clone(),
                passage_id: neg.id.clone(),
                passage: neg.text.clone(),
                target: RatingDistribution::one_hot(RatingLabel::Bad),
                explanation: None,
            });
        }
    }
    Ok(RerankerTrainingSet {
        provenance: Provenance::Vanilla,
        examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Passage, Question};

    fn record(q: &str, p: &str, rating: RatingLabel) -> FeedbackRecord {
        FeedbackRecord {
            question_text: q.into(),
            passage_id: p.into(),
            domain: Domain::Uk,
            rating,
            explanation: "because".into(),
            worker_id: "w".into(),
            timestamp: 0,
            request_id: None,
        }
    }

    #[test]
    fn label_parsing_and_order() {
        assert_eq!("Could be improved".parse::<RatingLabel>().unwrap(), RatingLabel::CouldBeImproved);
        assert_eq!("Acceptable".parse::<RatingLabel>().unwrap(), RatingLabel::Good);
        assert_eq!("EXCELLENT".parse::<RatingLabel>().unwrap(), RatingLabel::Excellent);
        assert!("great".parse::<RatingLabel>().is_err());
        let scores: Vec<_> = RatingLabel::ALL.iter().map(|l| l.score()).collect();
        assert_eq!(scores, [0, 1, 2, 3]);
        let json: RatingLabel = serde_json::from_str("\"Acceptable\"").unwrap();
        assert_eq!(json, RatingLabel::Good);
        assert_eq!(serde_json::to_string(&RatingLabel::CouldBeImproved).unwrap(), "\"could_be_improved\"");
    }

    #[test]
    fn distribution_validation() {
        assert!(RatingDistribution::new([0.5, 0.5, 0.0, 0.0]).is_ok());
        assert!(RatingDistribution::new([0.5, 0.6, 0.0, 0.0]).is_err());
        assert!(RatingDistribution::new([-0.1, 0.6, 0.5, 0.0]).is_err());
        assert!(matches!(RatingDistribution::from_counts([0; 4]), Err(Error::EmptyGroup)));
        assert!(matches!(RatingDistribution::from_labels(&[]), Err(Error::EmptyGroup)));
        assert!(serde_json::from_str::<RatingDistribution>("[1.0,1.0,0.0,0.0]").is_err());
    }

    #[test]
    fn aggregate_examples() {
        let unanimous = vec![record("q", "p", RatingLabel::Excellent); 3];
        let groups = aggregate_ratings(&unanimous).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups.values().next().unwrap().probs(), &[0.0, 0.0, 0.0, 1.0]);

        let mixed = vec![
            record("q", "p", RatingLabel::Excellent),
            record("q", "p", RatingLabel::Bad),
            record("q", "p", RatingLabel::Excellent),
        ];
        let d = *aggregate_ratings(&mixed).unwrap().values().next().unwrap();
        assert!((d.prob(RatingLabel::Bad) - 1.0 / 3.0).abs() < 1e-15);
        assert!((d.p_excellent() - 2.0 / 3.0).abs() < 1e-15);

        let single = aggregate_ratings(&[record("a", "b", RatingLabel::Good)]).unwrap();
        assert_eq!(single.values().next().unwrap().probs(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn kl_examples() {
        let u = RatingDistribution::uniform();
        assert_eq!(kl_loss(&u, &u), 0.0);

        let t = RatingDistribution::one_hot(RatingLabel::Excellent);
        let p = RatingDistribution::new([0.1, 0.1, 0.1, 0.7]).unwrap();
        // 1 * ln(1 / 0.7)
        assert!((kl_loss(&t, &p) - 0.356_674_943_938_732_4).abs() < 1e-12);

        let t = RatingDistribution::one_hot(RatingLabel::Bad);
        let p = RatingDistribution::new([0.7, 0.1, 0.1, 0.1]).unwrap();
        assert!((kl_loss(&t, &p) - kl_loss(&p, &t)).abs() > 1e-3);

        // zero predicted mass is floored instead of producing infinity
        let p = RatingDistribution::new([0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(kl_loss(&t, &p).is_finite());
    }

    fn corpus(n_passages: usize, questions: usize) -> Corpus {
        let passages = (0..n_passages)
            .map(|i| Passage {
                id: format!("p{i}"),
                domain: Domain::Uk,
                text: format!("passage {i}"),
                source_url: None,
            })
            .collect();
        let qs = (0..questions)
            .map(|i| Question {
                id: format!("q{i}"),
                domain: Domain::Uk,
                text: format!("question {i}"),
                gold_passage_ids: vec![format!("p{}", i % n_passages)],
            })
            .collect();
        Corpus::new(passages, qs).unwrap()
    }

    fn all_ids(c: &Corpus) -> BTreeSet<String> {
        c.questions().iter().map(|q| q.id.clone()).collect()
    }

    #[test]
    fn vanilla_forced_choice() {
        let c = corpus(2, 1);
        let set = synthesize_vanilla(&c, &all_ids(&c), 1, 0).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.examples[0].target.argmax(), RatingLabel::Excellent);
        assert_eq!(set.examples[1].target.argmax(), RatingLabel::Bad);
        assert_eq!(set.examples[1].passage_id, "p1");
    }

    #[test]
    fn vanilla_counts_and_errors() {
        let c = corpus(10, 100);
        let set = synthesize_vanilla(&c, &all_ids(&c), 3, 1).unwrap();
        assert_eq!(set.len(), 400);
        assert_eq!(set, synthesize_vanilla(&c, &all_ids(&c), 3, 1).unwrap());

        let tiny = corpus(1, 1);
        assert!(matches!(
            synthesize_vanilla(&tiny, &all_ids(&tiny), 1, 0),
            Err(Error::DomainTooSmall(_))
        ));
        assert!(synthesize_vanilla(&c, &all_ids(&c), 0, 0).is_err());

        // more negatives than non-gold passages falls back to replacement
        let small = corpus(3, 1);
        assert_eq!(synthesize_vanilla(&small, &all_ids(&small), 5, 0).unwrap().len(), 6);
    }

    #[test]
    fn combined_is_the_union() {
        let c = corpus(4, 5);
        let vanilla = synthesize_vanilla(&c, &all_ids(&c), 1, 0).unwrap();
        let records: Vec<_> = (0..3).map(|i| record("question 0", &format!("p{i}"), RatingLabel::Good)).collect();
        let fb = feedback_training_set(&records, &c, None).unwrap();
        let combined = RerankerTrainingSet::combine(&fb, &vanilla);
        assert_eq!(combined.len(), fb.len() + vanilla.len());
        assert_eq!(combined.provenance, Provenance::Combined);
    }

    #[test]
    fn feedback_set_targets_and_holdout() {
        let c = corpus(3, 1);
        let mut records = vec![
            record("question 0", "p0", RatingLabel::Excellent),
            record("question 0", "p0", RatingLabel::Good),
        ];
        let mut other = record("question 0", "p1", RatingLabel::Bad);
        other.domain = Domain::Us;
        records.push(other);
        // p1 in US does not exist
        assert!(matches!(feedback_training_set(&records, &c, None), Err(Error::UnknownPassage(_))));

        let set = feedback_training_set(&records, &c, Some(&Domain::Us)).unwrap();
        assert_eq!(set.len(), 2);
        for ex in &set.examples {
            assert_eq!(ex.target.probs(), &[0.0, 0.0, 0.5, 0.5]);
            assert_eq!(ex.explanation.as_deref(), Some("because"));
        }
    }

    #[test]
    fn feedback_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fb.jsonl");
        let mut r = record("q", "p", RatingLabel::CouldBeImproved);
        r.request_id = Some("abc".into());
        append_feedback(&path, &[r.clone()]).unwrap();
        append_feedback(&path, &[record("q2", "p", RatingLabel::Bad)]).unwrap();
        let back = read_feedback(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], r);
    }

    #[test]
    fn question_split_keeps_questions_together() {
        let c = corpus(5, 20);
        let set = synthesize_vanilla(&c, &all_ids(&c), 2, 0).unwrap();
        let (train, valid) = set.split_by_question(0.25, 7);
        assert_eq!(train.len() + valid.len(), set.len());
        let qs = |s: &RerankerTrainingSet| s.examples.iter().map(|e| e.question.clone()).collect::<BTreeSet<_>>();
        assert_eq!(qs(&valid).len(), 5);
        assert!(qs(&train).is_disjoint(&qs(&valid)));
        assert_eq!(set.split_by_question(0.25, 7), (train, valid));
        assert!(set.split_by_question(0.0, 7).1.is_empty());
    }
}
