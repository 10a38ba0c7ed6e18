use std::fs;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use kppo::gateway::{ChatAdapter, ChatRequest, Gateway, ModelRole, ScriptedAdapter};
use kppo::knowledge::{parse_prompt, render_prompt, PromptDocument, ViolationReport};
use kppo::optimizer::{
    Engine, OptimizerSampling, Prepared, PromptTemplates, RunConfig, RunOutcome, RunState, SearchConfig, Session,
};
use kppo::sim::{fact_gated_target, fact_oracle_optimizer, write_fixture_config, FactFixture, PLAIN_PROMPT};
use kppo::task::{EvalCache, Evaluator, Instance, TargetSampling, TaskInstruction};
use kppo::Error;

struct Rig {
    fixture: FactFixture,
    search: SearchConfig,
    gateway: Gateway,
    instruction: TaskInstruction,
    cache: EvalCache,
    templates: PromptTemplates,
    train: Vec<Instance>,
}

impl Rig {
    fn with_optimizer(search: SearchConfig, optimizer: Arc<dyn ChatAdapter>) -> Self {
        let fixture = FactFixture::standard();
        let instruction = TaskInstruction::default();
        let target = fact_gated_target(fixture.sheet.clone(), &fixture.instances, &instruction.answer_marker);
        let gateway = Gateway::builder(optimizer, Arc::new(target)).build();
        let train = fixture.train().cloned().collect();
        Self {
            fixture,
            search,
            gateway,
            instruction,
            cache: EvalCache::in_memory(),
            templates: PromptTemplates::default(),
            train,
        }
    }

    fn oracle(search: SearchConfig) -> Self {
        let sheet = FactFixture::standard().sheet;
        Self::with_optimizer(search, Arc::new(fact_oracle_optimizer(sheet)))
    }

    fn engine(&self) -> Engine<'_> {
        let evaluator = Evaluator {
            gateway: &self.gateway,
            instruction: &self.instruction,
            sampling: TargetSampling::default(),
            cache: &self.cache,
            parallelism: 1,
        };
        let sampling = OptimizerSampling {
            temperature: 0.7,
            seed: Some(0),
            max_output: 4096,
        };
        Engine::new(&self.search, &self.gateway, evaluator, &self.templates, sampling, &self.train).unwrap()
    }

    fn calls(&self, role: ModelRole) -> usize {
        self.gateway.response_records().iter().filter(|r| r.role == role).count()
    }

    /// Plain prompt plus the facts at the given indices.
    fn prompt_with(&self, facts: &[usize]) -> PromptDocument {
        let mut text = format!("{PLAIN_PROMPT}\n# Key Facts\n");
        for i in facts {
            text.push_str(&format!("- {}\n", self.fixture.sheet.facts[*i].fact));
        }
        parse_prompt(&text)
    }

    fn knows(&self, doc: &PromptDocument, inst: &Instance) -> bool {
        let text = render_prompt(doc).unwrap();
        let fact = self.fixture.sheet.required_by(&inst.question).unwrap();
        text.contains(&fact.fact)
    }
}

fn small_search() -> SearchConfig {
    SearchConfig {
        batch_size: 5,
        window: 10,
        candidates_per_parent: 2,
        beam_width: 2,
        parallelism: 1,
        ..SearchConfig::default()
    }
}

#[test]
fn recorded_delta_s_counts_window_repairs() {
    let rig = Rig::oracle(small_search());
    let engine = rig.engine();
    let mut state = RunState::initial(parse_prompt(PLAIN_PROMPT), 0);
    for _ in 0..4 {
        let next = engine.run_step(&state).unwrap();
        let window: Vec<&Instance> = next.bank[next.bank.len().saturating_sub(10)..]
            .iter()
            .map(|id| rig.train.iter().find(|i| &i.id == id).unwrap())
            .collect();
        let record = next.trajectory.steps.last().unwrap();
        let best = &next.beam[0];
        // score against every parent; the top pair came from one of them
        let options: Vec<(i64, usize)> = state
            .beam
            .iter()
            .map(|parent| {
                let adv: Vec<i64> = window
                    .iter()
                    .map(|i| rig.knows(best, i) as i64 - rig.knows(parent, i) as i64)
                    .collect();
                (adv.iter().sum(), adv.iter().filter(|a| **a != 0).count())
            })
            .collect();
        assert!(
            options.contains(&(record.delta_s, record.divergence)),
            "step {}: ({}, {}) not in {options:?}",
            record.step,
            record.delta_s,
            record.divergence
        );
        state = next;
    }
}

#[test]
fn final_select_prefers_higher_accuracy() {
    let rig = Rig::oracle(small_search());
    let engine = rig.engine();
    let val: Vec<Instance> = rig.fixture.validation().cloned().collect();
    let p06 = rig.prompt_with(&[0, 1, 2]);
    let p08 = rig.prompt_with(&[0, 1, 2, 3]);
    let sel = engine.final_select(&[p06, p08], &val).unwrap();
    assert_eq!(sel.index, 1);
    assert_eq!(sel.accuracies, vec![0.6, 0.8]);
}

#[test]
fn final_select_ties_go_to_the_earlier_member() {
    let rig = Rig::oracle(small_search());
    let engine = rig.engine();
    let val: Vec<Instance> = rig.fixture.validation().cloned().collect();
    let a = rig.prompt_with(&[0, 1, 2, 3]);
    let b = rig.prompt_with(&[1, 2, 3, 4]);
    let sel = engine.final_select(&[a, b], &val).unwrap();
    assert_eq!(sel.index, 0);
    assert_eq!(sel.accuracies, vec![0.8, 0.8]);
}

#[test]
fn zero_iterations_select_from_the_initial_beam() {
    let dir = tempfile::tempdir().unwrap();
    let search = SearchConfig {
        iterations: 0,
        ..small_search()
    };
    let config = write_fixture_config(dir.path(), &FactFixture::standard(), PLAIN_PROMPT, search).unwrap();
    let session = Session::open(Prepared::load(RunConfig::load(&config).unwrap()).unwrap()).unwrap();
    let RunOutcome::Finished(out) = session.run(session.initial_state(), None).unwrap() else {
        panic!("run did not finish");
    };
    assert_eq!(out.steps, 0);
    assert_eq!(out.selected_index, 0);
    assert_eq!(out.validation_accuracies, vec![0.0]);
    assert_eq!(session.gateway().response_records().iter().filter(|r| r.role == ModelRole::Optimizer).count(), 0);
    assert_eq!(fs::read_to_string(session.paths.final_prompt()).unwrap(), PLAIN_PROMPT);
}

#[test]
fn unusable_gradient_is_retried_once_then_the_slot_is_skipped() {
    let asked = Arc::new(AtomicUsize::new(0));
    let counter = asked.clone();
    let optimizer = ScriptedAdapter::from_rule(move |_req: &ChatRequest| {
        counter.fetch_add(1, Ordering::SeqCst);
        Some("Error Explanation: the prompt lacks facts.\nKnowledge Gap Analysis: one fact is missing.\n".into())
    });
    let search = SearchConfig {
        candidates_per_parent: 1,
        ..small_search()
    };
    let rig = Rig::with_optimizer(search, Arc::new(optimizer));
    let engine = rig.engine();
    let state = RunState::initial(parse_prompt(PLAIN_PROMPT), 0);
    let next = engine.run_step(&state).unwrap();
    assert_eq!(asked.load(Ordering::SeqCst), 2);
    assert_eq!(next.beam, state.beam);
    let record = &next.trajectory.steps[0];
    assert_eq!((record.candidates, record.delta_s), (1, 0));
}

#[test]
fn candidate_adds_one_fact_note() {
    let rig = Rig::oracle(small_search());
    let engine = rig.engine();
    let parent = rig.prompt_with(&[0]);
    let batch: Vec<Instance> = rig.train.iter().filter(|i| !rig.knows(&parent, i)).take(5).cloned().collect();
    let failures = engine.collect_failures(&parent, &batch).unwrap();
    let prompt = render_prompt(&parent).unwrap();
    let gradient = engine.generate_gradient(&prompt, &failures, 0).unwrap();
    let cand = engine
        .generate_candidate(&prompt, &failures, &gradient, &ViolationReport::default(), 0)
        .unwrap();
    assert_eq!(cand.tree.note_count(), parent.tree.note_count() + 1);
    assert_eq!(rig.calls(ModelRole::Optimizer), 2);
}

#[test]
fn over_budget_candidate_is_shortened_once_then_rejected() {
    let long = format!("<prompt>\n# Notes\n{}</prompt>", "- padding padding padding\n".repeat(20));
    let optimizer = ScriptedAdapter::from_rule(move |req: &ChatRequest| {
        let first = &req.messages[0].content;
        Some(if first.contains("<gradient>") {
            long.clone()
        } else {
            "Error Explanation: a.\nKnowledge Gap Analysis: b.\nModification: c.\n".into()
        })
    });
    let search = SearchConfig {
        prompt_char_budget: 100,
        ..small_search()
    };
    let rig = Rig::with_optimizer(search, Arc::new(optimizer));
    let engine = rig.engine();
    let parent = parse_prompt(PLAIN_PROMPT);
    let failures = engine.collect_failures(&parent, &rig.train[..3]).unwrap();
    let gradient = engine.generate_gradient(PLAIN_PROMPT, &failures, 0).unwrap();
    let err = engine
        .generate_candidate(PLAIN_PROMPT, &failures, &gradient, &ViolationReport::default(), 0)
        .unwrap_err();
    assert!(matches!(err, Error::Candidate(_)), "{err}");
    // one gradient, one candidate, one shorten retry
    assert_eq!(rig.calls(ModelRole::Optimizer), 3);
}

#[test]
fn failures_are_exactly_the_missing_fact_instances() {
    let rig = Rig::oracle(small_search());
    let engine = rig.engine();
    let parent = rig.prompt_with(&[0, 2, 4]);
    let batch: Vec<Instance> = (0..5).map(|j| rig.train.iter().find(|i| i.id == format!("t{j}0")).unwrap().clone()).collect();
    let failures = engine.collect_failures(&parent, &batch).unwrap();
    let ids: Vec<&str> = failures.iter().map(|f| f.instance.id.as_str()).collect();
    assert_eq!(ids, ["t10", "t30"]);
    assert!(failures.iter().all(|f| !f.output.is_empty()));
}

fn fixture_session(dir: &std::path::Path, search: SearchConfig) -> Session {
    let config = write_fixture_config(dir, &FactFixture::standard(), PLAIN_PROMPT, search).unwrap();
    Session::open(Prepared::load(RunConfig::load(&config).unwrap()).unwrap()).unwrap()
}

#[test]
fn checkpoint_from_another_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let first = fixture_session(dir.path(), SearchConfig { iterations: 2, ..small_search() });
    first.run(first.initial_state(), Some(1)).unwrap();
    let checkpoint = first.paths.checkpoint();
    drop(first);
    let other = fixture_session(dir.path(), SearchConfig { iterations: 2, beam_width: 3, ..small_search() });
    let err = other.load_checkpoint(&checkpoint).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn corrupt_checkpoint_error_names_the_position() {
    let dir = tempfile::tempdir().unwrap();
    let session = fixture_session(dir.path(), small_search());
    let path = dir.path().join("broken.json");
    fs::write(&path, "{\n  \"version\": 1,\n  \"step\": oops\n}\n").unwrap();
    let msg = session.load_checkpoint(&path).unwrap_err().to_string();
    assert!(msg.contains("line 3") && msg.contains("column"), "{msg}");
}

#[test]
fn eval_cache_survives_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("eval_cache.jsonl");
    let fixture = FactFixture::standard();
    let instruction = TaskInstruction::default();
    let target = Arc::new(fact_gated_target(fixture.sheet.clone(), &fixture.instances, &instruction.answer_marker));
    let optimizer = Arc::new(ScriptedAdapter::new());
    let gateway = Gateway::builder(optimizer, target).build();
    let train: Vec<Instance> = fixture.train().cloned().collect();
    let known = parse_prompt(&format!("{PLAIN_PROMPT}\n# Key Facts\n- {}\n", fixture.sheet.facts[0].fact));
    let plain = parse_prompt(PLAIN_PROMPT);

    let first = {
        let cache = EvalCache::open(&path).unwrap();
        let ev = Evaluator {
            gateway: &gateway,
            instruction: &instruction,
            sampling: TargetSampling::default(),
            cache: &cache,
            parallelism: 2,
        };
        (ev.evaluate_prompt(&known, &train).unwrap(), ev.evaluate_prompt(&plain, &train).unwrap())
    };
    let calls = gateway.response_records().len();

    let cache = EvalCache::open(&path).unwrap();
    assert_eq!(cache.len(), 2 * train.len());
    let ev = Evaluator {
        gateway: &gateway,
        instruction: &instruction,
        sampling: TargetSampling::default(),
        cache: &cache,
        parallelism: 2,
    };
    let again = (ev.evaluate_prompt(&known, &train).unwrap(), ev.evaluate_prompt(&plain, &train).unwrap());
    assert_eq!(again, first);
    assert_ne!(first.0.bits, first.1.bits);
    assert_eq!(gateway.response_records().len(), calls, "reopened cache went back to the model");
}
