//! Lexically separable synthetic corpora and simulated annotators.
//!
//! Every passage owns a handful of topic words that appear nowhere else; the
//! rest of its text is filler drawn from a small shared pool. A question
//! samples some of its gold passage's topic words plus filler.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Domain, Passage, Question};
use crate::error::{Error, Result};
use crate::feedback::{FeedbackRecord, RatingLabel};
use crate::tokenizer::words;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub domains: Vec<Domain>,
    pub passages_per_domain: usize,
    pub questions_per_passage: usize,
    pub topic_words: usize,
    pub passage_filler: usize,
    pub question_topic_words: usize,
    pub question_filler: usize,
    pub filler_vocab: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            domains: Domain::BUILTIN.to_vec(),
            passages_per_domain: 10,
            questions_per_passage: 2,
            topic_words: 4,
            passage_filler: 8,
            question_topic_words: 2,
            question_filler: 3,
            filler_vocab: 40,
            seed: 0,
        }
    }
}

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "ch"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Distinct pronounceable pseudo-word for every index.
pub fn pseudo_word(mut n: usize) -> String {
    let base = ONSETS.len() * VOWELS.len();
    let mut word = String::new();
    for _ in 0..3 {
        let s = n % base;
        word.push_str(ONSETS[s / VOWELS.len()]);
        word.push_str(VOWELS[s % VOWELS.len()]);
        n /= base;
    }
    while n > 0 {
        let s = n % base;
        word.push_str(ONSETS[s / VOWELS.len()]);
        word.push_str(VOWELS[s % VOWELS.len()]);
        n /= base;
    }
    word
}

/// Filler words live in their own index range, clear of topic words.
fn filler_word(i: usize) -> String {
    pseudo_word(400_000 + i)
}

pub fn generate_corpus(spec: &SyntheticSpec) -> Result<Corpus> {
    if spec.question_topic_words > spec.topic_words || spec.question_topic_words == 0 {
        return Err(Error::Config("questions need between 1 and topic_words topic words".into()));
    }
    if spec.filler_vocab == 0 && (spec.passage_filler > 0 || spec.question_filler > 0) {
        return Err(Error::Config("filler words requested from an empty pool".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let filler: Vec<String> = (0..spec.filler_vocab).map(filler_word).collect();
    let mut next_topic = 0usize;
    let mut passages = Vec::new();
    let mut questions = Vec::new();
    for domain in &spec.domains {
        let tag = domain.as_str().to_ascii_lowercase();
        for p in 0..spec.passages_per_domain {
            let topics: Vec<String> = (0..spec.topic_words).map(|j| pseudo_word(next_topic + j)).collect();
            next_topic += spec.topic_words;
            let mut text: Vec<String> = topics.clone();
            text.extend((0..spec.passage_filler).map(|_| filler.choose(&mut rng).expect("non-empty").clone()));
            text.shuffle(&mut rng);
            let pid = format!("{tag}-p{p}");
            passages.push(Passage {
                id: pid.clone(),
                domain: domain.clone(),
                text: text.join(" ") + ".",
                source_url: None,
            });
            for k in 0..spec.questions_per_passage {
                let mut q: Vec<String> = topics
                    .choose_multiple(&mut rng, spec.question_topic_words)
                    .cloned()
                    .collect();
                q.extend((0..spec.question_filler).map(|_| filler.choose(&mut rng).expect("non-empty").clone()));
                q.shuffle(&mut rng);
                questions.push(Question {
                    id: format!("{tag}-q{p}-{k}"),
                    domain: domain.clone(),
                    text: q.join(" ") + "?",
                    gold_passage_ids: vec![pid.clone()],
                });
            }
        }
    }
    Corpus::new(passages, questions)
}

/// Simulated annotator that gives the true label with probability
/// `accuracy` and one of the other three labels uniformly otherwise. The
/// true label is `excellent` for a gold passage and `bad` for any other.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisyOracle {
    pub accuracy: f64,
    pub raters: usize,
}

impl Default for NoisyOracle {
    fn default() -> Self {
        NoisyOracle { accuracy: 0.8, raters: 3 }
    }
}

impl NoisyOracle {
    pub fn true_label(question: &Question, passage_id: &str) -> RatingLabel {
        if question.is_gold(passage_id) {
            RatingLabel::Excellent
        } else {
            RatingLabel::Bad
        }
    }

    pub fn label(&self, truth: RatingLabel, rng: &mut impl Rng) -> RatingLabel {
        if rng.random::<f64>() < self.accuracy {
            return truth;
        }
        let others: Vec<RatingLabel> = RatingLabel::ALL.into_iter().filter(|l| *l != truth).collect();
        *others.choose(rng).expect("three other labels")
    }

    /// One record per rater for a served (question, passage) pair.
    pub fn rate(&self, question: &Question, passage: &Passage, request_id: Option<&str>, rng: &mut impl Rng) -> Vec<FeedbackRecord> {
        let truth = Self::true_label(question, &passage.id);
        (0..self.raters)
            .map(|r| {
                let rating = self.label(truth, rng);
                FeedbackRecord {
                    question_text: question.text.clone(),
                    passage_id: passage.id.clone(),
                    domain: question.domain.clone(),
                    rating,
                    explanation: explain(&question.text, &passage.text, rating),
                    worker_id: format!("sim-{r}"),
                    timestamp: 0,
                    request_id: request_id.map(str::to_string),
                }
            })
            .collect()
    }
}

/// Template explanation naming the question words the passage does or does
/// not contain.
pub fn explain(question: &str, passage: &str, rating: RatingLabel) -> String {
    let in_passage: BTreeSet<String> = words(passage).collect();
    let (found, missing): (Vec<String>, Vec<String>) = words(question).partition(|w| in_passage.contains(w));
    let pick = |v: &[String]| v.iter().take(2).cloned().collect::<Vec<_>>().join(" ");
    match rating {
        RatingLabel::Excellent => format!("the answer covers {}", pick(&found)).trim_end().to_string(),
        RatingLabel::Good => format!("the answer mostly covers {}", pick(&found)).trim_end().to_string(),
        RatingLabel::CouldBeImproved => format!("the answer lacks {}", pick(&missing)).trim_end().to_string(),
        RatingLabel::Bad => format!("the answer never mentions {}", pick(&missing)).trim_end().to_string(),
    }
}

/// Simulated feedback on the served candidates of each question.
pub fn simulate_feedback<'a>(
    oracle: &NoisyOracle,
    corpus: &Corpus,
    served: impl IntoIterator<Item = (&'a Question, Vec<String>)>,
    seed: u64,
) -> Result<Vec<FeedbackRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for (question, passage_ids) in served {
        for pid in passage_ids {
            let passage = corpus
                .passage(&question.domain, &pid)
                .ok_or_else(|| Error::UnknownPassage(pid.clone()))?;
            records.extend(oracle.rate(question, passage, None, &mut rng));
        }
    }
    Ok(records)
}
