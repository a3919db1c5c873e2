use std::sync::Arc;

use attrmem::annotation::{Modes, Prioritization};
use attrmem::augment::Augmenter;
use attrmem::backend::{ChatRequest, FnBackend, MockBackend, MockRules, StaticBackend};
use attrmem::eval::{
    event_lines, run_event_summarization, run_qa_task, run_rec_task, Dataset, EvalError,
    EventConfig, Metric, QaBackends, QaCategory, QaConfig, QaExample, RecBackends, RecConfig,
    SummaryInput, SummaryLevel,
};
use attrmem::retrieval::{build_index, EmbeddingStrategy, MockEmbedder, RetrievalMode};
use attrmem::store::{MatchPolicy, MemoryStore};
use attrmem::synth;

fn mock(rules: &MockRules) -> Augmenter {
    Augmenter::new(Arc::new(MockBackend::new(rules.clone())))
}

fn turn_store(ds: &Dataset, aug: &Augmenter) -> MemoryStore {
    let items = ds.turn_items();
    aug.augment_corpus(&items, Modes::turn(Prioritization::Basic))
        .unwrap()
        .into_store(&items)
        .unwrap()
}

#[test]
fn qa_bijective_fixture_recalls_every_turn() {
    let f = synth::qa_bijective(50);
    let aug = mock(&f.rules);
    let store = turn_store(&f.dataset, &aug);
    assert_eq!(store.augmentation_report().unwrap().failed, 0);
    let emb = MockEmbedder::new(64);
    let (index, skipped) = build_index(&store, EmbeddingStrategy::AveragedPairs, &emb).unwrap();
    assert!(skipped.is_empty());
    let backends = QaBackends {
        question: &aug,
        answer: &aug,
    };
    for mode in [RetrievalMode::AttributeBased, RetrievalMode::EmbeddingBased] {
        let mut cfg = QaConfig::default();
        cfg.retrieval.mode = mode;
        let out = run_qa_task(&f.dataset, &store, Some(&index), &emb, &backends, &cfg).unwrap();
        assert_eq!(out.failures, 0, "{mode:?}");
        assert_eq!(out.recall.overall, 1.0, "{mode:?}");
        assert_eq!(out.recall.count, 50);
    }
    let mut cfg = QaConfig::default();
    cfg.retrieval.mode = RetrievalMode::Comprehensive;
    cfg.retrieval.k = store.len();
    let out = run_qa_task(&f.dataset, &store, None, &emb, &backends, &cfg).unwrap();
    assert!(out.examples.iter().all(|e| e.retrieved.len() == 50));
    assert_eq!(out.recall.overall, 1.0);
}

#[test]
fn adversarial_echo_scores_full_f1() {
    let mut f = synth::qa_bijective(10);
    f.dataset.qa = vec![QaExample {
        question: "tell me about kw03".into(),
        category: QaCategory::Adversarial,
        gold_turn_ids: vec![],
        answer: "no answer".into(),
    }];
    let aug = mock(&f.rules);
    let store = turn_store(&f.dataset, &aug);
    let answer = Augmenter::new(Arc::new(StaticBackend("no answer".into())));
    let mut cfg = QaConfig::default();
    cfg.retrieval.mode = RetrievalMode::AttributeBased;
    let out = run_qa_task(
        &f.dataset,
        &store,
        None,
        &MockEmbedder::default(),
        &QaBackends {
            question: &aug,
            answer: &answer,
        },
        &cfg,
    )
    .unwrap();
    assert_eq!(out.f1.overall, 1.0);
    assert_eq!(out.recall.count, 0);
    assert_eq!(out.examples[0].recall, None);
}

#[test]
fn failed_question_scores_zero_without_aborting() {
    let f = synth::qa_bijective(10);
    let aug = mock(&f.rules);
    let store = turn_store(&f.dataset, &aug);
    let broken = Augmenter::new(Arc::new(FnBackend(|_: &ChatRequest<'_>| {
        Ok("???".to_string())
    })));
    let mut cfg = QaConfig::default();
    cfg.retrieval.mode = RetrievalMode::AttributeBased;
    let out = run_qa_task(
        &f.dataset,
        &store,
        None,
        &MockEmbedder::default(),
        &QaBackends {
            question: &broken,
            answer: &aug,
        },
        &cfg,
    )
    .unwrap();
    assert_eq!(out.failures, 10);
    assert_eq!(out.recall.overall, 0.0);
    assert_eq!(out.f1.overall, 0.0);
}

fn rec_setup() -> (synth::Fixture, MemoryStore) {
    let f = synth::rec_planted(synth::REC_MAX_ITEMS);
    let items = f.dataset.entity_items();
    let store = mock(&f.rules)
        .augment_corpus(&items, Modes::entity(Prioritization::Basic))
        .unwrap()
        .into_store(&items)
        .unwrap();
    (f, store)
}

#[test]
fn planted_gold_is_recommended_first() {
    let (f, store) = rec_setup();
    let aug = mock(&f.rules);
    let emb = MockEmbedder::default();
    let (index, _) = build_index(&store, EmbeddingStrategy::AveragedPairs, &emb).unwrap();
    let backends = RecBackends {
        dialogue: &aug,
        recommender: &aug,
    };
    let cfg = RecConfig {
        n: f.dataset.dialogues.len(),
        ..RecConfig::default()
    };
    let out = run_rec_task(&f.dataset, &store, Some(&index), &emb, &backends, &cfg).unwrap();
    assert!(out.skipped.is_empty());
    assert_eq!(out.report(Metric::RecallAtK, 1).unwrap().overall, 1.0);
    assert_eq!(out.report(Metric::NDCGAtK, 10).unwrap().overall, 1.0);
    assert_eq!(out.avg_items_retrieved, 10.0);

    let cfg = RecConfig {
        n: f.dataset.dialogues.len(),
        retrieval: attrmem::retrieval::RetrievalConfig {
            mode: RetrievalMode::Comprehensive,
            ..RecConfig::default().retrieval
        },
        ..RecConfig::default()
    };
    let out = run_rec_task(&f.dataset, &store, None, &emb, &backends, &cfg).unwrap();
    assert_eq!(out.avg_items_retrieved, store.len() as f64);
}

#[test]
fn rec_attribute_mode_filters_by_name() {
    let (f, store) = rec_setup();
    let aug = mock(&f.rules);
    let cfg = RecConfig {
        n: 5,
        seed: 3,
        retrieval: attrmem::retrieval::RetrievalConfig {
            mode: RetrievalMode::AttributeBased,
            policy: MatchPolicy::NameAndValue,
            ..RecConfig::default().retrieval
        },
        ..RecConfig::default()
    };
    let backends = RecBackends {
        dialogue: &aug,
        recommender: &aug,
    };
    let out = run_rec_task(
        &f.dataset,
        &store,
        None,
        &MockEmbedder::default(),
        &backends,
        &cfg,
    )
    .unwrap();
    assert_eq!(out.sampled, 5);
    assert_eq!(out.report(Metric::RecallAtK, 1).unwrap().overall, 1.0);
}

#[test]
fn rec_sample_larger_than_dataset_fails_before_work() {
    let (f, store) = rec_setup();
    let calls = Arc::new(std::sync::atomic::AtomicUsize::new(0));
    let c = calls.clone();
    let counting = Augmenter::new(Arc::new(FnBackend(move |_: &ChatRequest<'_>| {
        c.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        Ok(String::new())
    })));
    let cfg = RecConfig {
        n: f.dataset.dialogues.len() + 1,
        ..RecConfig::default()
    };
    let err = run_rec_task(
        &f.dataset,
        &store,
        None,
        &MockEmbedder::default(),
        &RecBackends {
            dialogue: &counting,
            recommender: &counting,
        },
        &cfg,
    )
    .unwrap_err();
    assert!(matches!(err, EvalError::SampleTooLarge { .. }));
    assert_eq!(calls.load(std::sync::atomic::Ordering::SeqCst), 0);
}

#[test]
fn seeded_rec_runs_are_identical() {
    let (f, store) = rec_setup();
    let aug = mock(&f.rules);
    let emb = MockEmbedder::default();
    let (index, _) = build_index(&store, EmbeddingStrategy::AveragedPairs, &emb).unwrap();
    let backends = RecBackends {
        dialogue: &aug,
        recommender: &aug,
    };
    let cfg = RecConfig {
        n: 12,
        seed: 42,
        parallelism: 4,
        ..RecConfig::default()
    };
    let a = run_rec_task(&f.dataset, &store, Some(&index), &emb, &backends, &cfg).unwrap();
    let b = run_rec_task(&f.dataset, &store, Some(&index), &emb, &backends, &cfg).unwrap();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
    let ids: Vec<_> = a.examples.iter().map(|e| e.dialogue_id.clone()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
}

fn event_stores(f: &synth::Fixture) -> (MemoryStore, MemoryStore) {
    let aug = mock(&f.rules);
    let turns = f.dataset.turn_items();
    let tl = aug
        .augment_corpus(&turns, Modes::turn(Prioritization::Basic))
        .unwrap()
        .into_store(&turns)
        .unwrap();
    let sessions = f.dataset.session_items();
    let sl = aug
        .augment_corpus(&sessions, Modes::session(Prioritization::Basic))
        .unwrap()
        .into_store(&sessions)
        .unwrap();
    (tl, sl)
}

#[test]
fn turn_level_keeps_at_least_as_many_event_pairs() {
    let f = synth::event_sessions();
    let (tl, sl) = event_stores(&f);
    let names = EventConfig::default().event_names;
    let mut any_strict = false;
    for s in &f.dataset.sessions {
        let (_, t) = event_lines(s, &tl, SummaryLevel::TurnLevel, &names);
        let (_, ss) = event_lines(s, &sl, SummaryLevel::SessionLevel, &names);
        assert!(t >= ss, "session {}: {t} < {ss}", s.id);
        any_strict |= t > ss;
    }
    // E1 mentions hiking in two turns; the session annotation dedupes it.
    assert!(any_strict);
}

#[test]
fn event_summaries_and_judge() {
    let f = synth::event_sessions();
    let (tl, sl) = event_stores(&f);
    let aug = mock(&f.rules);
    let cfg = EventConfig::default();
    let out = run_event_summarization(&f.dataset, &tl, &cfg, &aug, Some(&aug)).unwrap();
    assert_eq!(out.summaries.len(), 2);
    assert_eq!(out.skipped.len(), 1);
    assert_eq!(out.skipped[0].0, "E3");
    let scores = out.mean_scores.unwrap();
    assert_eq!(
        (scores.relevance, scores.coherence, scores.consistency),
        (3.0, 3.0, 3.0)
    );
    // annotations only: the raw dialogue is absent from the prompt payload
    let e2 = &out.summaries[1];
    assert!(!e2.prompt_payload.contains("flat"));
    assert!(e2.prompt_payload.contains("[life event]<relocation>"));

    let cfg = EventConfig {
        level: SummaryLevel::SessionLevel,
        input: SummaryInput::AnnotationsPlusDialogues,
        ..EventConfig::default()
    };
    let out = run_event_summarization(&f.dataset, &sl, &cfg, &aug, None).unwrap();
    assert!(out.summaries[1]
        .prompt_payload
        .contains("we moved to a new flat"));
    assert!(out.mean_scores.is_none());
}

#[test]
fn unannotated_store_skips_every_session() {
    let f = synth::event_sessions();
    let mut store = MemoryStore::new();
    for item in f.dataset.turn_items() {
        store.write(item, None).unwrap();
    }
    let out = run_event_summarization(
        &f.dataset,
        &store,
        &EventConfig::default(),
        &mock(&f.rules),
        None,
    )
    .unwrap();
    assert!(out.summaries.is_empty());
    assert_eq!(out.skipped.len(), 3);
}
