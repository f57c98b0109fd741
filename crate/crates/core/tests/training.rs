use std::collections::BTreeSet;

use rqa_core::corpus::{split_corpus, Corpus, Domain, DEFAULT_RATIOS};
use rqa_core::feedback::{kl_loss, Provenance, RatingDistribution, RatingLabel, RerankerExample, RerankerTrainingSet};
use rqa_core::reranker::{mean_kl, train_reranker, Decode, RerankerConfig, RerankerMode, RerankerModel, RerankerTrainConfig};
use rqa_core::retriever::{train, RetrieverConfig, RetrieverModel, RetrieverTrainConfig, Scorer};
use rqa_core::synthetic::{generate_corpus, SyntheticSpec};
use rqa_core::tokenizer::Vocab;

fn separable_corpus() -> Corpus {
    generate_corpus(&SyntheticSpec {
        domains: vec![Domain::Uk],
        passages_per_domain: 10,
        questions_per_passage: 2,
        passage_filler: 0,
        question_filler: 0,
        seed: 5,
        ..Default::default()
    })
    .unwrap()
}

fn corpus_vocab(c: &Corpus) -> Vocab {
    let texts = c.passages().iter().map(|p| p.text.as_str()).chain(c.questions().iter().map(|q| q.text.as_str()));
    Vocab::build(texts, 1)
}

fn desk_train() -> RetrieverTrainConfig {
    RetrieverTrainConfig {
        lr: 1e-3,
        dropout: 0.0,
        ..Default::default()
    }
}

fn all_p_at_1(model: &RetrieverModel, corpus: &Corpus) -> f64 {
    let index = model.index(corpus).unwrap();
    let hits = corpus
        .questions()
        .iter()
        .filter(|q| q.is_gold(&model.retrieve(&index, &q.domain, &q.text, 1).unwrap()[0].passage_id))
        .count();
    hits as f64 / corpus.questions().len() as f64
}

#[test]
fn retriever_reaches_perfect_validation_precision() {
    let corpus = separable_corpus();
    assert_eq!(corpus.questions().len(), 20);
    let split = split_corpus(corpus.questions(), DEFAULT_RATIOS, 0).unwrap();
    for scorer in [Scorer::BiEncoder, Scorer::PolyEncoder] {
        let mut model = RetrieverModel::new(RetrieverConfig::desk_scale(corpus_vocab(&corpus).len(), scorer), corpus_vocab(&corpus)).unwrap();
        let report = train(&mut model, &corpus, &split, &desk_train()).unwrap();
        assert!(report.valid_p_at_1.len() <= 41);
        assert_eq!(report.valid_p_at_1[report.best_epoch], 1.0, "{scorer:?}: {report:?}");
        assert!(report.loss_curve.last().unwrap() < &report.loss_curve[0]);
        assert_eq!(all_p_at_1(&model, &corpus), 1.0);
    }
}

#[test]
fn retriever_training_is_deterministic_and_round_trips() {
    let corpus = separable_corpus();
    let split = split_corpus(corpus.questions(), DEFAULT_RATIOS, 1).unwrap();
    let cfg = RetrieverTrainConfig {
        epochs: 3,
        dropout: 0.1,
        ..desk_train()
    };
    let run = || {
        let mut m = RetrieverModel::new(RetrieverConfig::desk_scale(corpus_vocab(&corpus).len(), Scorer::PolyEncoder), corpus_vocab(&corpus)).unwrap();
        let report = train(&mut m, &corpus, &split, &cfg).unwrap();
        (m, report)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(ra, rb);
    let index_a = a.index(&corpus).unwrap();
    let index_b = b.index(&corpus).unwrap();
    let q = &corpus.questions()[0];
    assert_eq!(
        a.retrieve(&index_a, &q.domain, &q.text, 5).unwrap(),
        b.retrieve(&index_b, &q.domain, &q.text, 5).unwrap()
    );

    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path().join("retriever"), split.train.iter().cloned().collect()).unwrap();
    let (loaded, manifest) = RetrieverModel::load(dir.path().join("retriever")).unwrap();
    assert_eq!(manifest.trained_questions.len(), split.train.len());
    let index_l = loaded.index(&corpus).unwrap();
    assert_eq!(
        a.retrieve(&index_a, &q.domain, &q.text, 5).unwrap(),
        loaded.retrieve(&index_l, &q.domain, &q.text, 5).unwrap()
    );
    assert_eq!(all_p_at_1(&a, &corpus), all_p_at_1(&loaded, &corpus));
}

#[test]
fn zero_epochs_keep_the_initial_retriever() {
    let corpus = separable_corpus();
    let split = split_corpus(corpus.questions(), DEFAULT_RATIOS, 0).unwrap();
    let fresh = RetrieverModel::new(RetrieverConfig::desk_scale(corpus_vocab(&corpus).len(), Scorer::BiEncoder), corpus_vocab(&corpus)).unwrap();
    let mut trained = fresh.clone();
    let report = train(&mut trained, &corpus, &split, &RetrieverTrainConfig { epochs: 0, ..desk_train() }).unwrap();
    assert!(report.loss_curve.is_empty());
    assert_eq!(all_p_at_1(&fresh, &corpus), all_p_at_1(&trained, &corpus));
}

const WORDS: [&str; 20] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet", "kilo", "lima", "mike",
    "november", "oscar", "papa", "quebec", "romeo", "sierra", "tango",
];

fn toy_examples() -> Vec<RerankerExample> {
    (0..10)
        .map(|i| {
            let q = WORDS[i];
            let matched = i % 2 == 0;
            let passage = if matched {
                format!("{q} {}", WORDS[10 + i])
            } else {
                format!("{} {}", WORDS[(i + 3) % 10], WORDS[10 + i])
            };
            let label = [RatingLabel::Bad, RatingLabel::CouldBeImproved, RatingLabel::Good, RatingLabel::Excellent][i % 4];
            RerankerExample {
                domain: Domain::Uk,
                question: format!("what about {q}"),
                passage_id: format!("p{i}"),
                passage,
                target: RatingDistribution::one_hot(label),
                explanation: Some(format!("{} {} because {}", label.as_str().replace('_', " "), q, WORDS[10 + i])),
            }
        })
        .collect()
}

fn toy_vocab() -> Vocab {
    let mut text = WORDS.join(" ");
    text.push_str(" what about bad could be improved good excellent because");
    Vocab::build([text.as_str()], 1)
}

#[test]
fn rating_only_reranker_fits_a_toy_set() {
    let set = RerankerTrainingSet {
        provenance: Provenance::Feedback,
        examples: toy_examples(),
    };
    let v = toy_vocab();
    let mut model = RerankerModel::new(RerankerConfig::desk_scale(v.len(), RerankerMode::RatingOnly), v).unwrap();
    let cfg = RerankerTrainConfig {
        epochs: 200,
        lr: 3e-3,
        dropout: 0.0,
        ..Default::default()
    };
    train_reranker(&mut model, &set, Some(&set), &cfg).unwrap();
    let kl = mean_kl(&model, &set).unwrap();
    assert!(kl < 0.01, "validation KL {kl}");
}

#[test]
fn explain_then_rate_memorizes_explanations() {
    let examples = toy_examples();
    let set = RerankerTrainingSet {
        provenance: Provenance::Feedback,
        examples: examples.clone(),
    };
    let v = toy_vocab();
    let mut model = RerankerModel::new(RerankerConfig::desk_scale(v.len(), RerankerMode::ExplainThenRate), v).unwrap();
    let cfg = RerankerTrainConfig {
        epochs: 200,
        lr: 3e-3,
        dropout: 0.0,
        ..Default::default()
    };
    train_reranker(&mut model, &set, None, &cfg).unwrap();
    for ex in &examples {
        let (text, rating) = model.explain_and_rate(&ex.question, &ex.passage, Decode::greedy(16)).unwrap();
        assert_eq!(&text, ex.explanation.as_ref().unwrap());
        assert!(rating.prob(ex.target.argmax()) > 0.9, "{rating:?}");
        assert!(kl_loss(&ex.target, &rating) < 0.11);
    }
}

#[test]
fn reranker_training_is_deterministic() {
    let set = RerankerTrainingSet {
        provenance: Provenance::Feedback,
        examples: toy_examples(),
    };
    let v = toy_vocab();
    let cfg = RerankerTrainConfig {
        epochs: 3,
        lr: 1e-3,
        ..Default::default()
    };
    let run = || {
        let mut m = RerankerModel::new(RerankerConfig::desk_scale(v.len(), RerankerMode::ExplainThenRate), v.clone()).unwrap();
        let report = train_reranker(&mut m, &set, None, &cfg).unwrap();
        (m, report)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(ra, rb);
    let ids: BTreeSet<_> = set.examples.iter().map(|e| e.question.clone()).collect();
    for q in ids {
        assert_eq!(a.rate(&q, "alpha").unwrap(), b.rate(&q, "alpha").unwrap());
    }
}
