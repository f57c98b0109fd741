//! Domain-partitioned passage/question corpus.
//!
//! A corpus file is JSONL with one record per line. Passage records carry
//! `{"id","domain","text"}` (plus an optional `"source_url"`); question
//! records additionally carry a non-empty `"gold_passage_ids"` list. Passage
//! ids are unique within their domain, question ids are unique across the
//! whole corpus, and every gold id must name a passage of the question's own
//! domain.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Corpus partition. The five built-in domains sort in the column order of
/// the evaluation reports; user-defined domains follow, sorted by name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub enum Domain {
    Australia,
    Us,
    Canada,
    Uk,
    Who,
    Custom(String),
}

impl Domain {
    pub const BUILTIN: [Domain; 5] = [
        Domain::Australia,
        Domain::Us,
        Domain::Canada,
        Domain::Uk,
        Domain::Who,
    ];

    pub fn as_str(&self) -> &str {
        match self {
            Domain::Australia => "Australia",
            Domain::Us => "US",
            Domain::Canada => "Canada",
            Domain::Uk => "UK",
            Domain::Who => "WHO",
            Domain::Custom(name) => name,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<String> for Domain {
    fn from(s: String) -> Self {
        match s.to_ascii_lowercase().as_str() {
            "australia" => Domain::Australia,
            "us" => Domain::Us,
            "canada" => Domain::Canada,
            "uk" => Domain::Uk,
            "who" => Domain::Who,
            _ => Domain::Custom(s),
        }
    }
}

impl From<&str> for Domain {
    fn from(s: &str) -> Self {
        Domain::from(s.to_string())
    }
}

impl From<Domain> for String {
    fn from(d: Domain) -> Self {
        d.as_str().to_string()
    }
}

impl FromStr for Domain {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(Domain::from(s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub domain: Domain,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub domain: Domain,
    pub text: String,
    pub gold_passage_ids: Vec<String>,
}

impl Question {
    pub fn is_gold(&self, passage_id: &str) -> bool {
        self.gold_passage_ids.iter().any(|g| g == passage_id)
    }
}

/// Wire shape shared by both record kinds.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    domain: Domain,
    text: String,
    #[serde(default)]
    source_url: Option<String>,
    #[serde(default)]
    gold_passage_ids: Option<Vec<String>>,
}

/// A validated corpus. Immutable after construction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    passages: Vec<Passage>,
    questions: Vec<Question>,
    by_domain: BTreeMap<Domain, Vec<usize>>,
    passage_index: HashMap<(Domain, String), usize>,
    question_index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(passages: Vec<Passage>, questions: Vec<Question>) -> Result<Self> {
        let mut by_domain: BTreeMap<Domain, Vec<usize>> = BTreeMap::new();
        let mut passage_index = HashMap::new();
        for (i, p) in passages.iter().enumerate() {
            if p.id.is_empty() {
                return Err(Error::MalformedRecord {
                    line: 0,
                    message: "passage id is empty".into(),
                });
            }
            if p.text.trim().is_empty() {
                return Err(Error::MalformedRecord {
                    line: 0,
                    message: format!("passage {} has empty text", p.id),
                });
            }
            if passage_index
                .insert((p.domain.clone(), p.id.clone()), i)
                .is_some()
            {
                return Err(Error::DuplicateId(p.id.clone()));
            }
            by_domain.entry(p.domain.clone()).or_default().push(i);
        }

        let mut question_index = HashMap::new();
        for (i, q) in questions.iter().enumerate() {
            if q.id.is_empty() || q.text.trim().is_empty() {
                return Err(Error::MalformedRecord {
                    line: 0,
                    message: format!("question {:?} has an empty id or text", q.id),
                });
            }
            if q.gold_passage_ids.is_empty() {
                return Err(Error::DanglingGoldId(q.id.clone()));
            }
            for gold in &q.gold_passage_ids {
                if !passage_index.contains_key(&(q.domain.clone(), gold.clone())) {
                    return Err(Error::DanglingGoldId(q.id.clone()));
                }
            }
            if question_index.insert(q.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(q.id.clone()));
            }
        }

        Ok(Corpus {
            passages,
            questions,
            by_domain,
            passage_index,
            question_index,
        })
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    pub fn into_parts(self) -> (Vec<Passage>, Vec<Question>) {
        (self.passages, self.questions)
    }

    /// Domains that own at least one passage, in report order.
    pub fn domains(&self) -> Vec<Domain> {
        self.by_domain.keys().cloned().collect()
    }

    pub fn has_domain(&self, domain: &Domain) -> bool {
        self.by_domain.contains_key(domain)
    }

    pub fn passages_in(&self, domain: &Domain) -> Vec<&Passage> {
        self.by_domain
            .get(domain)
            .map(|ix| ix.iter().map(|&i| &self.passages[i]).collect())
            .unwrap_or_default()
    }

    pub fn passage(&self, domain: &Domain, id: &str) -> Option<&Passage> {
        self.passage_index
            .get(&(domain.clone(), id.to_string()))
            .map(|&i| &self.passages[i])
    }

    pub fn question(&self, id: &str) -> Option<&Question> {
        self.question_index.get(id).map(|&i| &self.questions[i])
    }

    /// Questions whose ids are in `ids`, in corpus order.
    pub fn questions_in<'a>(&'a self, ids: &'a BTreeSet<String>) -> impl Iterator<Item = &'a Question> + 'a {
        self.questions.iter().filter(move |q| ids.contains(&q.id))
    }
}

/// Reads a JSONL corpus. Blank lines are skipped; an empty file yields an
/// empty corpus.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_corpus(reader: impl BufRead) -> Result<Corpus> {
    let mut passages = Vec::new();
    let mut questions = Vec::new();
    let mut seen_passages = HashSet::new();
    let mut seen_questions = HashSet::new();

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io("<corpus>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: line_no,
            message: e.to_string(),
        })?;
        if raw.id.is_empty() || raw.text.trim().is_empty() {
            return Err(Error::MalformedRecord {
                line: line_no,
                message: "id and text must be non-empty".into(),
            });
        }
        match raw.gold_passage_ids {
            Some(gold) => {
                if gold.is_empty() {
                    return Err(Error::MalformedRecord {
                        line: line_no,
                        message: "gold_passage_ids must be non-empty".into(),
                    });
                }
                if !seen_questions.insert(raw.id.clone()) {
                    return Err(Error::DuplicateId(raw.id));
                }
                questions.push(Question {
                    id: raw.id,
                    domain: raw.domain,
                    text: raw.text,
                    gold_passage_ids: gold,
                });
            }
            None => {
                if !seen_passages.insert((raw.domain.clone(), raw.id.clone())) {
                    return Err(Error::DuplicateId(raw.id));
                }
                passages.push(Passage {
                    id: raw.id,
                    domain: raw.domain,
                    text: raw.text,
                    source_url: raw.source_url,
                });
            }
        }
    }

    if passages.is_empty() && questions.is_empty() {
        log::warn!("corpus is empty");
    }
    Corpus::new(passages, questions)
}

/// Writes passages first, then questions, one JSON object per line.
pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_corpus_to(corpus, &mut out).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_corpus_to(corpus: &Corpus, out: &mut impl Write) -> Result<()> {
    for p in &corpus.passages {
        serde_json::to_writer(&mut *out, p)?;
        out.write_all(b"\n").map_err(|e| Error::io("<corpus>", e))?;
    }
    for q in &corpus.questions {
        serde_json::to_writer(&mut *out, q)?;
        out.write_all(b"\n").map_err(|e| Error::io("<corpus>", e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: BTreeSet<String>,
    pub valid: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl CorpusSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// The standard train/validation/test proportions.
pub const DEFAULT_RATIOS: [f64; 3] = [0.7, 0.1, 0.2];

/// Per-domain stratified split.
///
/// Within each domain the question ids are sorted, shuffled with an RNG
/// derived from `seed` and the domain name, and cut into
/// `floor(r_i * n)` sized pieces. Leftover questions go one at a time to
/// train, valid, test (skipping sets whose ratio is zero), cycling until none
/// remain.
pub fn split_corpus(questions: &[Question], ratios: [f64; 3], seed: u64) -> Result<CorpusSplit> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::BadRatios(ratios));
    }

    let mut per_domain: BTreeMap<&Domain, Vec<&str>> = BTreeMap::new();
    for q in questions {
        per_domain.entry(&q.domain).or_default().push(&q.id);
    }

    let mut sets: [BTreeSet<String>; 3] = Default::default();
    for (domain, mut ids) in per_domain {
        ids.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(domain.as_str()));
        ids.shuffle(&mut rng);

        let counts = split_sizes(ids.len(), ratios);
        let mut it = ids.into_iter();
        for (set, n) in sets.iter_mut().zip(counts) {
            set.extend(it.by_ref().take(n).map(str::to_string));
        }
    }

    let [train, valid, test] = sets;
    Ok(CorpusSplit {
        train,
        valid,
        test,
        ratios,
        seed,
    })
}

/// Floor-and-remainder sizes for `n` items.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let mut counts = ratios.map(|r| (r * n as f64 + 1e-9).floor() as usize);
    let mut assigned: usize = counts.iter().sum();
    // Guard against ratios that overshoot by rounding.
    while assigned > n {
        let i = (0..3).rev().find(|&i| counts[i] > 0).unwrap();
        counts[i] -= 1;
        assigned -= 1;
    }
    let eligible: Vec<usize> = (0..3).filter(|&i| ratios[i] > 0.0).collect();
    let mut k = 0;
    while assigned < n {
        counts[eligible[k % eligible.len()]] += 1;
        assigned += 1;
        k += 1;
    }
    counts
}

pub(crate) fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn passage(id: &str, domain: &str) -> Passage {
        Passage {
            id: id.into(),
            domain: domain.into(),
            text: format!("text of {id}"),
            source_url: None,
        }
    }

    fn question(id: &str, domain: &str, gold: &str) -> Question {
        Question {
            id: id.into(),
            domain: domain.into(),
            text: format!("question {id}"),
            gold_passage_ids: vec![gold.into()],
        }
    }

    #[test]
    fn domain_names_round_trip() {
        for d in Domain::BUILTIN {
            assert_eq!(Domain::from(d.to_string()), d);
        }
        assert_eq!(Domain::from("who"), Domain::Who);
        assert_eq!(Domain::from("Mars"), Domain::Custom("Mars".into()));
        let json = serde_json::to_string(&Domain::Uk).unwrap();
        assert_eq!(json, "\"UK\"");
    }

    #[test]
    fn empty_input_is_an_empty_corpus() {
        let c = read_corpus("".as_bytes()).unwrap();
        assert!(c.passages().is_empty());
        assert!(c.questions().is_empty());
    }

    #[test]
    fn minimal_corpus() {
        let text = r#"{"id":"p1","domain":"UK","text":"wash your hands"}
{"id":"q1","domain":"UK","text":"how to wash hands","gold_passage_ids":["p1"]}
"#;
        let c = read_corpus(text.as_bytes()).unwrap();
        assert_eq!(c.passages().len(), 1);
        assert_eq!(c.questions().len(), 1);
        assert_eq!(c.passages_in(&Domain::Uk).len(), 1);
    }

    #[test]
    fn gold_may_precede_its_passage() {
        let text = r#"{"id":"q1","domain":"UK","text":"q","gold_passage_ids":["p1"]}
{"id":"p1","domain":"UK","text":"p"}"#;
        assert!(read_corpus(text.as_bytes()).is_ok());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"id\":\"p1\",\"domain\":\"UK\",\"text\":\"ok\"}\n\nnot json\n";
        match read_corpus(text.as_bytes()) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dangling_and_cross_domain_gold_rejected() {
        let text = r#"{"id":"p1","domain":"UK","text":"p"}
{"id":"q1","domain":"US","text":"q","gold_passage_ids":["p1"]}"#;
        assert!(matches!(
            read_corpus(text.as_bytes()),
            Err(Error::DanglingGoldId(id)) if id == "q1"
        ));
    }

    #[test]
    fn duplicate_ids() {
        let text = r#"{"id":"p1","domain":"UK","text":"a"}
{"id":"p1","domain":"UK","text":"b"}"#;
        assert!(matches!(read_corpus(text.as_bytes()), Err(Error::DuplicateId(_))));

        // same passage id in two domains is fine
        let text = r#"{"id":"p1","domain":"UK","text":"a"}
{"id":"p1","domain":"US","text":"b"}"#;
        assert!(read_corpus(text.as_bytes()).is_ok());
    }

    #[test]
    fn write_then_read_is_identity() {
        let c = Corpus::new(
            vec![passage("p1", "UK"), passage("p2", "WHO")],
            vec![question("q1", "UK", "p1")],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_corpus_to(&c, &mut buf).unwrap();
        let back = read_corpus(buf.as_slice()).unwrap();
        assert_eq!(back.passages(), c.passages());
        assert_eq!(back.questions(), c.questions());
        let mut again = Vec::new();
        write_corpus_to(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn ten_per_domain_splits_7_1_2() {
        let mut qs = Vec::new();
        for d in ["UK", "US"] {
            for i in 0..10 {
                qs.push(question(&format!("{d}-{i}"), d, "p"));
            }
        }
        let split = split_corpus(&qs, DEFAULT_RATIOS, 3).unwrap();
        for d in ["UK", "US"] {
            let count = |s: &BTreeSet<String>| s.iter().filter(|id| id.starts_with(d)).count();
            assert_eq!(count(&split.train), 7);
            assert_eq!(count(&split.valid), 1);
            assert_eq!(count(&split.test), 2);
        }
    }

    #[test]
    fn degenerate_ratios_put_everything_in_train() {
        let qs: Vec<_> = (0..7).map(|i| question(&format!("q{i}"), "UK", "p")).collect();
        let split = split_corpus(&qs, [1.0, 0.0, 0.0], 0).unwrap();
        assert_eq!(split.train.len(), 7);
        assert!(split.valid.is_empty() && split.test.is_empty());
    }

    #[test]
    fn bad_ratios_rejected() {
        assert!(matches!(
            split_corpus(&[], [0.5, 0.1, 0.1], 0),
            Err(Error::BadRatios(_))
        ));
        assert!(matches!(
            split_corpus(&[], [1.2, -0.1, -0.1], 0),
            Err(Error::BadRatios(_))
        ));
    }

    #[test]
    fn remainder_goes_train_valid_test() {
        assert_eq!(split_sizes(10, DEFAULT_RATIOS), [7, 1, 2]);
        // 0.7*3 = 2.1, 0.1*3 = 0.3, 0.2*3 = 0.6 -> floors 2,0,0; one left -> train
        assert_eq!(split_sizes(3, DEFAULT_RATIOS), [3, 0, 0]);
        // floors 4,0,1 = 5 of 7; two left -> train, valid
        assert_eq!(split_sizes(7, DEFAULT_RATIOS), [5, 1, 1]);
        assert_eq!(split_sizes(3, [0.5, 0.0, 0.5]), [2, 0, 1]);
    }

    #[test]
    fn full_scale_split_is_a_partition() {
        // Per-domain question counts of the reference export.
        let counts = [("Australia", 1783), ("Canada", 8844), ("UK", 2874), ("US", 13533), ("WHO", 688)];
        let mut qs = Vec::new();
        for (d, n) in counts {
            for i in 0..n {
                qs.push(question(&format!("{d}-{i}"), d, "p"));
            }
        }
        assert_eq!(qs.len(), 27722);
        let split = split_corpus(&qs, DEFAULT_RATIOS, 0).unwrap();

        let all: BTreeSet<String> = qs.iter().map(|q| q.id.clone()).collect();
        let union: BTreeSet<String> = split
            .train
            .union(&split.valid)
            .cloned()
            .collect::<BTreeSet<_>>()
            .union(&split.test)
            .cloned()
            .collect();
        assert_eq!(union, all);
        assert!(split.train.is_disjoint(&split.valid));
        assert!(split.train.is_disjoint(&split.test));
        assert!(split.valid.is_disjoint(&split.test));

        let expected: [usize; 3] = counts.iter().fold([0; 3], |acc, (_, n)| {
            let s = split_sizes(*n, DEFAULT_RATIOS);
            [acc[0] + s[0], acc[1] + s[1], acc[2] + s[2]]
        });
        assert_eq!(
            [split.train.len(), split.valid.len(), split.test.len()],
            expected
        );
    }
}
