use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rqa_core::corpus::{load_corpus, split_corpus, write_corpus, Corpus, CorpusSplit, Domain, Question};
use rqa_core::eval::{paired_bootstrap, precision_at_1, EvalReport, EvalRun, Significance};
use rqa_core::feedback::{append_feedback, feedback_training_set, read_feedback, synthesize_vanilla, Provenance, RerankerTrainingSet};
use rqa_core::fusion::rerank;
use rqa_core::reranker::{build_reranker_vocab, train_reranker, RerankerConfig, RerankerModel, RerankerTrainConfig};
use rqa_core::retriever::{self, RetrieverConfig, RetrieverModel, RetrieverTrainConfig};
use rqa_core::synthetic::{generate_corpus, SyntheticSpec};
use rqa_core::tokenizer::Vocab;
use rqa_service::ServiceConfig;
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// Resolved command line written next to every output.
#[derive(Debug, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: String,
    /// Working directory that relative paths refer to.
    pub cwd: PathBuf,
    pub run: Command,
}

pub fn snapshot_path_for_file(out: &Path) -> PathBuf {
    out.with_extension("config.json")
}

pub fn snapshot_path_for_dir(dir: &Path) -> PathBuf {
    dir.join("run_config.json")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_snapshot(path: &Path, command: &Command) -> Result<()> {
    let cwd = std::env::current_dir().map_err(|e| CliError::io(".", e))?;
    let snapshot = Snapshot {
        version: env!("CARGO_PKG_VERSION").to_string(),
        cwd,
        run: command.clone(),
    };
    write_json(path, &snapshot)
}

pub fn run(command: &Command) -> Result<()> {
    match command {
        Command::Ingest(a) => {
            ingest(a)?;
            write_snapshot(&snapshot_path_for_file(&a.out), command)
        }
        Command::ToyCorpus(a) => {
            toy_corpus(a)?;
            write_snapshot(&snapshot_path_for_file(&a.out), command)
        }
        Command::Split(a) => {
            split(a)?;
            write_snapshot(&snapshot_path_for_file(&a.out), command)
        }
        Command::TrainRetriever(a) => {
            train_retriever(a)?;
            write_snapshot(&snapshot_path_for_dir(&a.out), command)
        }
        Command::SynthesizeVanilla(a) => {
            synthesize(a)?;
            write_snapshot(&snapshot_path_for_file(&a.out), command)
        }
        Command::TrainReranker(a) => {
            train_reranker_cmd(a)?;
            write_snapshot(&snapshot_path_for_dir(&a.out), command)
        }
        Command::Evaluate(a) => {
            // Written first so a failed evaluation still leaves its inputs.
            write_snapshot(&snapshot_path_for_file(&a.out), command)?;
            evaluate(a)
        }
        Command::Serve(a) => serve(a),
        Command::ExportFeedback(a) => {
            export_feedback(a)?;
            write_snapshot(&snapshot_path_for_file(&a.out), command)
        }
        Command::Rerun(a) => rerun(a),
    }
}

fn rerun(args: &RerunArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.snapshot).map_err(|e| CliError::io(&args.snapshot, e))?;
    let snapshot: Snapshot = serde_json::from_str(&text)?;
    if matches!(snapshot.run, Command::Rerun(_)) {
        return Err(CliError::Usage("a snapshot cannot hold another rerun".into()));
    }
    std::env::set_current_dir(&snapshot.cwd).map_err(|e| CliError::io(&snapshot.cwd, e))?;
    run(&snapshot.run)
}

fn print_domain_counts(corpus: &Corpus) {
    for d in corpus.domains() {
        let passages = corpus.passages_in(&d).len();
        let questions = corpus.questions().iter().filter(|q| q.domain == d).count();
        println!("{:<12} {passages:>6} passages {questions:>6} questions", d.to_string());
    }
}

fn ingest(a: &IngestArgs) -> Result<()> {
    let corpus = load_corpus(&a.input)?;
    write_corpus(&corpus, &a.out)?;
    print_domain_counts(&corpus);
    Ok(())
}

fn toy_corpus(a: &ToyCorpusArgs) -> Result<()> {
    let spec = SyntheticSpec {
        domains: if a.domains.is_empty() {
            Domain::BUILTIN.to_vec()
        } else {
            a.domains.iter().map(|d| Domain::from(d.as_str())).collect()
        },
        passages_per_domain: a.passages_per_domain,
        questions_per_passage: a.questions_per_passage,
        topic_words: a.topic_words,
        passage_filler: a.passage_filler,
        question_topic_words: a.question_topic_words,
        question_filler: a.question_filler,
        filler_vocab: a.filler_vocab,
        seed: a.seed,
    };
    let corpus = generate_corpus(&spec)?;
    write_corpus(&corpus, &a.out)?;
    print_domain_counts(&corpus);
    Ok(())
}

fn split(a: &SplitArgs) -> Result<()> {
    let ratios: [f64; 3] = a
        .ratios
        .as_slice()
        .try_into()
        .map_err(|_| CliError::Usage("--ratios takes exactly three values".into()))?;
    let corpus = load_corpus(&a.corpus)?;
    let split = split_corpus(corpus.questions(), ratios, a.seed)?;
    split.save(&a.out)?;
    println!("train {} valid {} test {}", split.train.len(), split.valid.len(), split.test.len());
    Ok(())
}

fn train_retriever(a: &TrainRetrieverArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let split = CorpusSplit::load(&a.split)?;
    let passages = corpus.passages().iter().map(|p| p.text.as_str());
    let questions = corpus.questions_in(&split.train).map(|q| q.text.as_str());
    let vocab = Vocab::build(passages.chain(questions), 1);
    let mut config = RetrieverConfig::desk_scale(vocab.len(), a.scorer);
    config.poly_codes = a.poly_codes;
    config.init_seed = a.training.init_seed;
    let mut model = RetrieverModel::new(config, vocab)?;
    let t = &a.training;
    let train_config = RetrieverTrainConfig {
        batch_size: t.batch_size,
        epochs: t.epochs,
        lr: t.lr,
        dropout: t.dropout,
        seed: t.seed,
    };
    let report = retriever::train(&mut model, &corpus, &split, &train_config)?;
    model.save(&a.out, split.train.iter().cloned().collect())?;
    write_json(&a.out.join("train_report.json"), &report)?;
    match report.valid_p_at_1.get(report.best_epoch) {
        Some(p) => println!("kept epoch {} (valid P@1 {:.2})", report.best_epoch, 100.0 * p),
        None => println!("kept epoch {}", report.best_epoch),
    }
    Ok(())
}

fn synthesize(a: &SynthesizeVanillaArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let split = CorpusSplit::load(&a.split)?;
    let set = synthesize_vanilla(&corpus, &split.train, a.negatives_per_positive, a.seed)?;
    set.write_jsonl(&a.out)?;
    println!("{} examples", set.len());
    Ok(())
}

fn question_ids(corpus: &Corpus, set: &RerankerTrainingSet) -> Vec<String> {
    let ids: HashMap<(&str, &str), &str> = corpus
        .questions()
        .iter()
        .map(|q| ((q.domain.as_str(), q.text.as_str()), q.id.as_str()))
        .collect();
    let found: BTreeSet<&str> = set
        .examples
        .iter()
        .filter_map(|ex| ids.get(&(ex.domain.as_str(), ex.question.as_str())).copied())
        .collect();
    found.into_iter().map(str::to_string).collect()
}

fn train_reranker_cmd(a: &TrainRerankerArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let holdout = a.holdout_domain.as_deref().map(Domain::from);
    let feedback = || -> Result<RerankerTrainingSet> {
        let path = a
            .feedback
            .as_ref()
            .ok_or_else(|| CliError::Usage(format!("--provenance {:?} needs --feedback", a.provenance)))?;
        Ok(feedback_training_set(&read_feedback(path)?, &corpus, holdout.as_ref())?)
    };
    let vanilla = || -> Result<RerankerTrainingSet> {
        let path = a.split.as_ref().ok_or_else(|| CliError::Usage("vanilla examples need --split".into()))?;
        let split = CorpusSplit::load(path)?;
        Ok(synthesize_vanilla(&corpus, &split.train, a.negatives_per_positive, a.training.seed)?)
    };
    let set = match a.provenance {
        Provenance::Feedback => feedback()?,
        Provenance::Vanilla => vanilla()?,
        Provenance::Combined => RerankerTrainingSet::combine(&feedback()?, &vanilla()?),
    };
    let (train, valid) = match &a.valid_feedback {
        Some(path) => (set, Some(feedback_training_set(&read_feedback(path)?, &corpus, holdout.as_ref())?)),
        None if a.validation_fraction > 0.0 => {
            let (train, valid) = set.split_by_question(a.validation_fraction, a.training.seed);
            (train, Some(valid))
        }
        None => (set, None),
    };
    let valid = valid.filter(|v| !v.is_empty());

    let mut sets = vec![&train];
    sets.extend(valid.as_ref());
    let vocab = build_reranker_vocab(&corpus, &sets);
    let mut config = RerankerConfig::desk_scale(vocab.len(), a.mode);
    config.init_seed = a.training.init_seed;
    let mut model = RerankerModel::new(config, vocab)?;
    let t = &a.training;
    let train_config = RerankerTrainConfig {
        batch_size: t.batch_size,
        epochs: t.epochs,
        lr: t.lr,
        dropout: t.dropout,
        seed: t.seed,
        explanation_weight: a.explanation_weight,
        train_embeddings: !a.freeze_embeddings,
    };
    let report = train_reranker(&mut model, &train, valid.as_ref(), &train_config)?;
    model.save(&a.out, question_ids(&corpus, &train))?;
    write_json(&a.out.join("train_report.json"), &report)?;
    println!(
        "{} training examples, kept epoch {} (selection loss {:.4})",
        train.len(),
        report.best_epoch,
        report.selection_loss.get(report.best_epoch).copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn check_overlap(trained: &[String], evaluated: &BTreeSet<String>) -> Result<()> {
    let overlap = trained.iter().filter(|id| evaluated.contains(*id)).count();
    if overlap > 0 {
        return Err(rqa_core::Error::SplitMismatch(overlap).into());
    }
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let split = CorpusSplit::load(&a.split)?;
    let ids = match a.set {
        EvalSet::Train => &split.train,
        EvalSet::Valid => &split.valid,
        EvalSet::Test => &split.test,
    };
    let (retriever, manifest) = RetrieverModel::load(&a.retriever)?;
    let reranker = a.rerank.as_ref().map(RerankerModel::load).transpose()?;
    if a.set != EvalSet::Train {
        check_overlap(&manifest.trained_questions, ids)?;
        if let Some((_, m)) = &reranker {
            check_overlap(&m.trained_questions, ids)?;
        }
    }
    let questions: Vec<&Question> = corpus.questions_in(ids).collect();
    if questions.is_empty() {
        return Err(rqa_core::Error::EmptyDataset.into());
    }
    let index = retriever.index(&corpus)?;
    let ranked = questions
        .iter()
        .map(|q| -> rqa_core::Result<Vec<String>> {
            match &reranker {
                Some((model, _)) => Ok(rerank(&q.text, &q.domain, &retriever, &index, &corpus, model, a.k, a.scheme, a.norm)?
                    .into_iter()
                    .map(|c| c.passage_id)
                    .collect()),
                None => Ok(retriever
                    .retrieve(&index, &q.domain, &q.text, a.k)?
                    .into_iter()
                    .map(|c| c.passage_id)
                    .collect()),
            }
        })
        .collect::<rqa_core::Result<Vec<_>>>()?;
    let system = a
        .system
        .clone()
        .unwrap_or_else(|| if reranker.is_some() { "retriever+reranker" } else { "retriever" }.to_string());
    let run = precision_at_1(&system, questions.iter().copied().zip(ranked.iter().map(Vec::as_slice)))?;
    let significance = a
        .significance
        .iter()
        .map(|path| -> Result<Significance> {
            let baseline = EvalReport::load(path)?.run();
            let (base_hits, hits) = EvalRun::aligned_hits(&baseline, &run)?;
            Ok(Significance {
                baseline: baseline.system,
                p_value: paired_bootstrap(&base_hits, &hits, a.resamples, a.bootstrap_seed)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport::new(&run, significance);
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    report.save(&a.out)?;
    print!("{}", report.table());
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(path) => ServiceConfig::load(path)?,
        None => ServiceConfig::default(),
    };
    config.apply_env()?;
    if let Some(p) = a.port {
        config.port = p;
    }
    if let Some(d) = &a.data_dir {
        config.data_dir = d.clone();
    }
    if let Some(c) = &a.corpus {
        config.corpus = c.clone();
    }
    if let Some(r) = &a.retriever {
        config.retriever = Some(r.clone());
    }
    if let Some(r) = &a.reranker {
        config.reranker = Some(r.clone());
    }
    config.validate()?;
    let resolved = config.data_dir.join("resolved_config.json");
    write_json(&resolved, &config)?;
    let replay = Command::Serve(ServeArgs {
        config: Some(resolved),
        corpus: None,
        retriever: None,
        reranker: None,
        port: None,
        data_dir: None,
    });
    write_snapshot(&snapshot_path_for_dir(&config.data_dir), &replay)?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::io("tokio runtime", e))?;
    runtime.block_on(rqa_service::serve(config))?;
    Ok(())
}

fn export_feedback(a: &ExportFeedbackArgs) -> Result<()> {
    let path = if a.store.is_dir() { a.store.join("feedback.jsonl") } else { a.store.clone() };
    let mut records = read_feedback(&path)?;
    if let Some(d) = &a.domain {
        let d = Domain::from(d.as_str());
        records.retain(|r| r.domain == d);
    }
    if a.out.exists() {
        std::fs::remove_file(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    }
    if a.training_set {
        let corpus_path = a.corpus.as_ref().ok_or_else(|| CliError::Usage("--training-set needs --corpus".into()))?;
        let corpus = load_corpus(corpus_path)?;
        let set = feedback_training_set(&records, &corpus, None)?;
        set.write_jsonl(&a.out)?;
        println!("{} examples from {} records", set.len(), records.len());
    } else {
        append_feedback(&a.out, &records)?;
        println!("{} records", records.len());
    }
    Ok(())
}
