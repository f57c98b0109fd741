//! Module examples checked against independent computations.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rqa_core::corpus::{Corpus, Domain, Passage, Question};
use rqa_core::eval::{paired_bootstrap, precision_at_1, spearman, spearman_agreement, ThreeWay};
use rqa_core::feedback::{aggregate_ratings, synthesize_vanilla, FeedbackRecord, RatingLabel};
use rqa_core::fusion::{rerank, FusionScheme, ProbabilityNorm, Rater};
use rqa_core::feedback::RatingDistribution;
use rqa_core::retriever::{RetrieverConfig, RetrieverModel, Scorer};
use rqa_core::synthetic::{generate_corpus, SyntheticSpec};
use rqa_core::tokenizer::Vocab;

fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|k| (k as f64).ln()).sum()
}

/// Exact `P(delta < 0) + P(delta = 0) / 2` under resampling with
/// replacement, by enumerating how many draws land on +1, -1 and 0
/// differences.
fn exact_bootstrap_p(a: &[bool], b: &[bool]) -> f64 {
    let n = a.len();
    let plus = a.iter().zip(b).filter(|(x, y)| !**x && **y).count() as f64 / n as f64;
    let minus = a.iter().zip(b).filter(|(x, y)| **x && !**y).count() as f64 / n as f64;
    let zero = 1.0 - plus - minus;
    let mut p = 0.0;
    for kp in 0..=n {
        for km in 0..=(n - kp) {
            let k0 = n - kp - km;
            let ln_coef = ln_factorial(n) - ln_factorial(kp) - ln_factorial(km) - ln_factorial(k0);
            let term = |prob: f64, k: usize| if k == 0 { 0.0 } else { k as f64 * prob.ln() };
            if (plus == 0.0 && kp > 0) || (minus == 0.0 && km > 0) || (zero <= 0.0 && k0 > 0) {
                continue;
            }
            let prob = (ln_coef + term(plus, kp) + term(minus, km) + term(zero, k0)).exp();
            if kp < km {
                p += prob;
            } else if kp == km {
                p += 0.5 * prob;
            }
        }
    }
    p
}

#[test]
fn bootstrap_matches_exact_enumeration() {
    let cases = [
        (
            [true, true, false, true, false, true, true, false, true, false],
            [true, true, true, true, false, false, true, true, true, true],
        ),
        (
            [true, false, false, false, true, false, true, false, false, false],
            [false, true, true, false, true, false, true, true, false, false],
        ),
        (
            [true, true, true, false, true, true, true, true, false, true],
            [true, false, true, true, false, true, false, true, false, true],
        ),
    ];
    for (a, b) in cases {
        let exact = exact_bootstrap_p(&a, &b);
        let estimate = paired_bootstrap(&a, &b, 10_000, 3).unwrap();
        assert!((estimate - exact).abs() < 0.02, "estimate {estimate} vs exact {exact}");
    }
}

#[test]
fn table_scale_feedback_groups() {
    let per_domain = [(Domain::Australia, 2264), (Domain::Uk, 3668), (Domain::Us, 2628), (Domain::Who, 874)];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut records = Vec::new();
    for (domain, pairs) in per_domain {
        for i in 0..pairs {
            for w in 0..3 {
                records.push(FeedbackRecord {
                    question_text: format!("{domain} question {}", i / 2),
                    passage_id: format!("p{}", i % 2),
                    domain: domain.clone(),
                    rating: RatingLabel::ALL[rng.random_range(0..4)],
                    explanation: "e".into(),
                    worker_id: format!("w{w}"),
                    timestamp: 0,
                    request_id: None,
                });
            }
        }
    }
    let groups = aggregate_ratings(&records).unwrap();
    let mut scan: HashMap<(String, String, String), usize> = HashMap::new();
    for r in &records {
        *scan.entry((r.domain.to_string(), r.question_text.clone(), r.passage_id.clone())).or_default() += 1;
    }
    assert_eq!(groups.len(), 9434);
    assert_eq!(scan.len(), 9434);
    assert!(scan.values().all(|c| *c == 3));
    for d in groups.values() {
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(d.probs().iter().all(|p| [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0].iter().any(|v| (p - v).abs() < 1e-12)));
    }
}

#[test]
fn precision_matches_a_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let domains = Domain::BUILTIN;
    let mut questions = Vec::new();
    let mut ranked = Vec::new();
    let mut planted: BTreeMap<Domain, (usize, usize)> = BTreeMap::new();
    for i in 0..1000 {
        let domain = domains[i % 5].clone();
        let hit = rng.random_bool(0.63);
        questions.push(Question {
            id: format!("q{i}"),
            domain: domain.clone(),
            text: "x".into(),
            gold_passage_ids: vec![format!("g{i}")],
        });
        ranked.push(vec![if hit { format!("g{i}") } else { format!("n{i}") }, format!("g{i}")]);
        let e = planted.entry(domain).or_default();
        e.0 += hit as usize;
        e.1 += 1;
    }
    let run = precision_at_1("s", questions.iter().zip(ranked.iter().map(|v| v.as_slice()))).unwrap();
    let total: usize = planted.values().map(|v| v.0).sum();
    assert!((run.overall() - total as f64 / 10.0).abs() < 1e-9);
    for (d, p) in run.per_domain() {
        let (h, n) = planted[&d];
        assert!((p - 100.0 * h as f64 / n as f64).abs() < 1e-9);
    }
}

/// Rank by counting smaller and equal values, then Pearson.
fn naive_spearman(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let less = v.iter().filter(|b| *b < a).count() as f64;
                let equal = v.iter().filter(|b| *b == a).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn spearman_matches_rank_then_pearson() {
    use ThreeWay::*;
    let l = [Incorrect, PartiallyCorrect, Correct];
    let x: Vec<ThreeWay> = [0, 1, 2, 2, 1].iter().map(|i| l[*i]).collect();
    let y: Vec<ThreeWay> = [0, 2, 1, 2, 0].iter().map(|i| l[*i]).collect();
    let got = spearman_agreement(&x, &y).unwrap().unwrap();
    let want = naive_spearman(&[0.0, 1.0, 2.0, 2.0, 1.0], &[0.0, 2.0, 1.0, 2.0, 0.0]);
    assert!((got - want).abs() < 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let n = rng.random_range(3..30);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
        if let Some(got) = spearman(&a, &b).unwrap() {
            assert!((got - naive_spearman(&a, &b)).abs() < 1e-9);
        }
    }
}

#[test]
fn vanilla_negatives_never_hit_gold() {
    let corpus = generate_corpus(&SyntheticSpec::default()).unwrap();
    let ids: BTreeSet<String> = corpus.questions().iter().map(|q| q.id.clone()).collect();
    for n in [1, 3, 9, 12] {
        let set = synthesize_vanilla(&corpus, &ids, n, n as u64).unwrap();
        assert_eq!(set.len(), ids.len() * (n + 1));
        let by_text: HashMap<&str, &Question> = corpus.questions().iter().map(|q| (q.text.as_str(), q)).collect();
        for ex in &set.examples {
            let q = by_text[ex.question.as_str()];
            let gold = q.is_gold(&ex.passage_id);
            assert_eq!(gold, ex.target.argmax() == RatingLabel::Excellent);
            assert_eq!(ex.domain, q.domain);
        }
    }
}

struct OracleRater(HashMap<String, BTreeSet<String>>);

impl Rater for OracleRater {
    fn rate(&self, question: &str, passage_id: &str, _passage: &str) -> rqa_core::Result<RatingDistribution> {
        let gold = self.0.get(question).is_some_and(|g| g.contains(passage_id));
        Ok(RatingDistribution::one_hot(if gold { RatingLabel::Excellent } else { RatingLabel::Bad }))
    }
}

struct ConstantRater(RatingDistribution);

impl Rater for ConstantRater {
    fn rate(&self, _: &str, _: &str, _: &str) -> rqa_core::Result<RatingDistribution> {
        Ok(self.0)
    }
}

fn retriever_for(corpus: &Corpus) -> RetrieverModel {
    let texts = corpus.passages().iter().map(|p| p.text.as_str()).chain(corpus.questions().iter().map(|q| q.text.as_str()));
    let v = Vocab::build(texts, 1);
    RetrieverModel::new(RetrieverConfig::desk_scale(v.len(), Scorer::BiEncoder), v).unwrap()
}

#[test]
fn fusion_with_oracle_and_uniform_raters() {
    let corpus = generate_corpus(&SyntheticSpec::default()).unwrap();
    let model = retriever_for(&corpus);
    let index = model.index(&corpus).unwrap();
    let oracle = OracleRater(
        corpus
            .questions()
            .iter()
            .map(|q| (q.text.clone(), q.gold_passage_ids.iter().cloned().collect()))
            .collect(),
    );
    let uniform = ConstantRater(RatingDistribution::uniform());
    let mut in_top5 = 0;
    for q in corpus.questions() {
        let base = model.retrieve(&index, &q.domain, &q.text, 5).unwrap();
        let fused = rerank(&q.text, &q.domain, &model, &index, &corpus, &oracle, 5, FusionScheme::PExcellent, ProbabilityNorm::FullDomain).unwrap();
        let members = |ids: Vec<&String>| ids.into_iter().cloned().collect::<BTreeSet<_>>();
        assert_eq!(members(base.iter().map(|r| &r.passage_id).collect()), members(fused.iter().map(|r| &r.passage_id).collect()));
        if base.iter().any(|r| q.is_gold(&r.passage_id)) {
            in_top5 += 1;
            assert!(q.is_gold(&fused[0].passage_id));
        }
        let same = rerank(&q.text, &q.domain, &model, &index, &corpus, &uniform, 5, FusionScheme::ExpectedRating, ProbabilityNorm::FullDomain).unwrap();
        let order: Vec<_> = same.iter().map(|c| c.passage_id.clone()).collect();
        let base_order: Vec<_> = base.iter().map(|c| c.passage_id.clone()).collect();
        assert_eq!(order, base_order);
        let one = rerank(&q.text, &q.domain, &model, &index, &corpus, &oracle, 1, FusionScheme::PExcellent, ProbabilityNorm::FullDomain).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].passage_id, base[0].passage_id);
        assert!((one[0].fused_score - (base[0].probability + one[0].rating_dist.p_excellent())).abs() < 1e-12);
    }
    assert!(in_top5 > 0);
}

#[test]
fn unknown_domain_is_rejected() {
    let passages = vec![Passage {
        id: "p".into(),
        domain: Domain::Uk,
        text: "alpha".into(),
        source_url: None,
    }];
    let corpus = Corpus::new(passages, vec![]).unwrap();
    let model = retriever_for(&corpus);
    let index = model.index(&corpus).unwrap();
    let rater = ConstantRater(RatingDistribution::uniform());
    assert!(matches!(
        rerank("alpha", &Domain::Us, &model, &index, &corpus, &rater, 5, FusionScheme::PExcellent, ProbabilityNorm::FullDomain),
        Err(rqa_core::Error::UnknownDomain(_))
    ));
}
