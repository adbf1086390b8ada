use std::sync::Mutex;

use async_trait::async_trait;
use futures::executor::block_on;
use twinloop_core::aml::parse_caex;
use twinloop_core::bpmn::{
    execute, parse_bpmn, BpmnProcess, ExecPolicy, InstantDispatcher, NodeKind, ParseMode, RunLog, RunOutcome, Vars,
};
use twinloop_core::events::Mode;
use twinloop_core::plant::{extract_plant_config, PlantConfig, RoleMapping};
use twinloop_core::scenario::template::{compile_steps, parse_steps, Step, TemplateError};
use twinloop_core::scenario::*;

const DEMO: &str = include_str!("../fixtures/demo_plant.aml");
const PROCESS1: &str = include_str!("../fixtures/process1.bpmn");
const REPLY1: &str = include_str!("../fixtures/replay/_/1.txt");
const GOLDEN_TEMPLATE: &str = include_str!("../fixtures/golden/template_three_steps.bpmn");
const GOLDEN_PROMPT: &str = include_str!("../fixtures/golden/prompt_iteration2.txt");

const PROCESS1_GOAL: &str = "Take the item from the warehouse, place it on the punching machine, stamp, place on index line, mill & drill, and finally store it back in the warehouse.";
const PROCESS1_STEPS: &str =
    "steps: [LoadFromWarehouse, RobotCommand(to=punch), Stamp, RobotCommand(to=index), MillAndDrill, StoreToWarehouse]";

fn demo() -> PlantConfig {
    let doc = parse_caex(DEMO).unwrap();
    extract_plant_config(&doc, &RoleMapping::default()).unwrap().config
}

/// Runs the process with every command completing at once.
struct InstantSim;

#[async_trait]
impl Simulator for InstantSim {
    async fn simulate(&self, id: &str, p: &BpmnProcess) -> RunLog {
        execute(
            p,
            &InstantDispatcher::default(),
            &Vars::new(),
            &ExecPolicy::default(),
            id,
            Mode::Virtual,
        )
        .await
    }
}

// ---- prompt ----

#[test]
fn context_lists_all_five_functions() {
    let b = assemble_prompt(&demo(), PROCESS1_GOAL, None, 1);
    for f in [
        "LoadFromWarehouse",
        "StoreToWarehouse",
        "Stamp",
        "MillAndDrill",
        "RobotCommand",
    ] {
        assert!(b.capabilities_context.contains(f), "{f}");
    }
    assert!(b.capabilities_context.contains("to: text one of warehouse|punch|index"));
    assert_eq!(b.corrective_prompt, None);
    assert_eq!(b.iteration, 1);
    assert!(b.bpmn_creation_prompt.contains("XML document only"));
    assert_eq!(b, assemble_prompt(&demo(), PROCESS1_GOAL, None, 1));
}

#[test]
fn empty_corrective_is_omitted() {
    let b = assemble_prompt(&demo(), PROCESS1_GOAL, Some(&Corrective::default()), 1);
    assert_eq!(b.corrective_prompt, None);
    assert!(!b.render().contains("Corrections"));
}

#[test]
fn second_iteration_prompt_matches_golden() {
    let prev = PROCESS1.replace(r#"name="Stamp""#, r#"name="Paint""#);
    let corr = Corrective {
        note: Some("use the index line twice".into()),
        previous_bpmn: Some(prev.clone()),
        validation_errors: vec!["unbound task: Paint".into()],
    };
    let b = assemble_prompt(&demo(), PROCESS1_GOAL, Some(&corr), 2);
    let text = b.render();
    assert!(text.contains(prev.trim_end()));
    assert_eq!(text, GOLDEN_PROMPT);
}

// ---- template backend ----

#[test]
fn step_list_parsing() {
    let s = parse_steps("Please run steps: [A, B(to = \"x, y\", n=2), C()] thanks").unwrap();
    assert_eq!(
        s,
        [
            Step {
                name: "A".into(),
                args: vec![]
            },
            Step {
                name: "B".into(),
                args: vec![("to".into(), "x, y".into()), ("n".into(), "2".into())]
            },
            Step {
                name: "C".into(),
                args: vec![]
            },
        ]
    );
    assert_eq!(parse_steps("load then stamp"), Err(TemplateError::NoStepList));
    assert_eq!(parse_steps("steps: []"), Err(TemplateError::Empty));
    assert!(matches!(
        parse_steps("steps: [A(x)]"),
        Err(TemplateError::Malformed { index: 1, .. })
    ));
}

#[test]
fn three_steps_compile_to_golden_sequence() {
    let c = demo();
    let goal = "steps: [LoadFromWarehouse, Stamp, StoreToWarehouse]";
    let xml = block_on(TemplateOffline::new(c.clone()).complete(
        &assemble_prompt(&c, goal, None, 1),
        RequestKey {
            scenario_id: "s",
            iteration: 1,
        },
    ))
    .unwrap();
    assert_eq!(xml, GOLDEN_TEMPLATE);
    let p = parse_bpmn(&xml, ParseMode::Strict).unwrap().process;
    let tasks: Vec<&str> = p.service_tasks().map(|n| n.name.as_str()).collect();
    assert_eq!(tasks, ["LoadFromWarehouse", "Stamp", "StoreToWarehouse"]);
    // strictly sequential: every node has at most one successor and predecessor
    for n in &p.nodes {
        assert!(p.outgoing(&n.node_id).count() <= 1 && p.incoming(&n.node_id).count() <= 1);
    }
    assert_eq!(p.flows.len(), 4);
}

#[test]
fn template_errors_name_the_step() {
    let c = demo();
    let err = compile_steps(&c, "steps: [LoadFromWarehouse, Paint]").unwrap_err();
    assert_eq!(err.to_string(), "unknown step: Paint");
    let err = compile_steps(&c, "steps: [RobotCommand(to=moon)]").unwrap_err();
    assert!(err.to_string().contains("moon"), "{err}");
    let err = compile_steps(&c, "steps: [LoadFromWarehouse(Slot=x)]").unwrap_err();
    assert!(err.to_string().contains("not an integer"), "{err}");
    let err = compile_steps(&c, "steps: [Stamp(speed=3)]").unwrap_err();
    assert_eq!(
        err,
        TemplateError::UnknownParam {
            step: "Stamp".into(),
            param: "speed".into()
        }
    );
}

#[test]
fn process1_steps_compile_to_bound_process() {
    let c = demo();
    let p = compile_steps(&c, PROCESS1_STEPS).unwrap();
    assert_eq!(p.count(NodeKind::ServiceTask), 6);
    assert_eq!(p.lanes.len(), 4);
    assert!(twinloop_core::bpmn::validate_process(&p, &c).is_ok());
}

// ---- replay backend ----

#[test]
fn replay_returns_recording_verbatim() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/replay");
    let r = ReplayFixture::load_dir(&dir).unwrap();
    let b = assemble_prompt(&demo(), PROCESS1_GOAL, None, 1);
    let text = block_on(r.complete(
        &b,
        RequestKey {
            scenario_id: "anything",
            iteration: 1,
        },
    ))
    .unwrap();
    assert_eq!(text.as_bytes(), REPLY1.as_bytes());
    let missing = block_on(r.complete(
        &b,
        RequestKey {
            scenario_id: "anything",
            iteration: 2,
        },
    ));
    assert!(matches!(missing, Err(BackendError::Generation(_))));
    assert!(matches!(
        ReplayFixture::load_dir(&dir.join("nope")),
        Err(BackendError::NotConfigured(_))
    ));
}

// ---- extraction ----

#[test]
fn extraction_cases() {
    assert_eq!(extract_bpmn_xml(REPLY1).unwrap(), PROCESS1.trim());
    assert_eq!(extract_bpmn_xml(PROCESS1).unwrap(), PROCESS1);

    let apology = "I'm sorry, I can't produce that process without more information about the plant.";
    assert_eq!(extract_bpmn_xml(apology), Err(ExtractError::NoCandidate));

    // no fences, prose around a bare document
    let bare = format!("Sure! {}\nHope this helps.", PROCESS1.trim());
    assert_eq!(extract_bpmn_xml(&bare).unwrap(), PROCESS1.trim());

    // a non-BPMN block first, then the BPMN block
    let two = format!("```json\n{{\"a\": 1}}\n```\nand\n```\n{}\n```", PROCESS1.trim());
    assert_eq!(extract_bpmn_xml(&two).unwrap(), PROCESS1.trim());

    // an unprefixed definitions root without a declaration
    let plain = "text <definitions xmlns=\"http://www.omg.org/spec/BPMN/20100524/MODEL\"><process id=\"p\"/></definitions> more";
    assert!(extract_bpmn_xml(plain).unwrap().starts_with("<definitions"));

    let truncated = format!("```xml\n{}\n```", &PROCESS1[..PROCESS1.len() / 2]);
    assert!(matches!(
        extract_bpmn_xml(&truncated),
        Err(ExtractError::Unparseable(_))
    ));
}

// ---- loop ----

fn env<'a>(c: &'a PlantConfig, b: &'a dyn LlmBackend, s: &'a dyn Simulator) -> LoopEnv<'a> {
    LoopEnv {
        config: c,
        backend: b,
        simulator: s,
    }
}

#[test]
fn template_loop_reaches_accepted() {
    let c = demo();
    let backend = TemplateOffline::new(c.clone());
    let e = env(&c, &backend, &InstantSim);
    let mut st = ScenarioLoopState::new("s1", PROCESS1_STEPS);
    assert_eq!(st.allowed_actions(), [ActionKind::Generate, ActionKind::Reject]);

    let t = block_on(advance_loop(&mut st, LoopAction::Generate, &e)).unwrap();
    assert_eq!(
        (t.from, t.to, t.appended),
        (LoopPhase::Drafting, LoopPhase::Validated, 1)
    );
    assert_eq!(st.history.len(), 1);

    block_on(advance_loop(&mut st, LoopAction::Simulate, &e)).unwrap();
    assert_eq!(st.phase, LoopPhase::AwaitingReview);
    assert_eq!(
        st.latest().unwrap().run_log.as_ref().unwrap().outcome,
        Some(RunOutcome::Completed)
    );

    block_on(advance_loop(&mut st, LoopAction::Accept, &e)).unwrap();
    assert_eq!(st.phase, LoopPhase::Accepted);
    assert!(st.accepted_process().is_some());

    let err = block_on(advance_loop(&mut st, LoopAction::Corrective("more".into()), &e)).unwrap_err();
    assert!(matches!(
        err,
        LoopError::Illegal {
            phase: LoopPhase::Accepted,
            ..
        }
    ));
}

#[test]
fn accept_while_drafting_is_illegal() {
    let c = demo();
    let backend = TemplateOffline::new(c.clone());
    let mut st = ScenarioLoopState::new("s", PROCESS1_STEPS);
    let err = block_on(advance_loop(
        &mut st,
        LoopAction::Accept,
        &env(&c, &backend, &InstantSim),
    ))
    .unwrap_err();
    assert!(matches!(
        err,
        LoopError::Illegal {
            action: ActionKind::Accept,
            phase: LoopPhase::Drafting,
            ..
        }
    ));
    assert!(st.history.is_empty());
}

#[test]
fn replayed_reply_validates() {
    let c = demo();
    let mut r = ReplayFixture::new();
    r.insert(ANY_SCENARIO, 1, REPLY1);
    let mut st = ScenarioLoopState::new("s", PROCESS1_GOAL);
    block_on(advance_loop(&mut st, LoopAction::Generate, &env(&c, &r, &InstantSim))).unwrap();
    assert_eq!(st.phase, LoopPhase::Validated, "{:?}", st.latest());
    assert_eq!(st.latest().unwrap().raw_response.as_deref(), Some(REPLY1));
}

/// Answers with a process that has an unbound task until `bad` runs out.
struct Flaky {
    bad: Mutex<u32>,
}

#[async_trait]
impl LlmBackend for Flaky {
    fn kind(&self) -> BackendKind {
        BackendKind::RemoteHttp
    }

    async fn complete(&self, _b: &PromptBundle, _k: RequestKey<'_>) -> Result<String, BackendError> {
        let mut bad = self.bad.lock().unwrap();
        if *bad > 0 {
            *bad -= 1;
            return Ok(PROCESS1.replace(r#"name="Stamp""#, r#"name="Paint""#));
        }
        Ok(PROCESS1.to_string())
    }
}

#[test]
fn validation_errors_feed_the_next_prompt_verbatim() {
    let c = demo();
    let backend = Flaky { bad: Mutex::new(1) };
    let mut st = ScenarioLoopState::new("s", PROCESS1_GOAL);
    let t = block_on(advance_loop(
        &mut st,
        LoopAction::Generate,
        &env(&c, &backend, &InstantSim),
    ))
    .unwrap();
    assert_eq!((t.to, t.appended), (LoopPhase::Validated, 2));
    let first = &st.history[0];
    assert_eq!(first.validation.errors, ["unbound task: Paint"]);
    let second = &st.history[1];
    assert!(second.automatic);
    assert_eq!(second.iteration, 2);
    let corr = second.prompt_bundle.corrective_prompt.as_deref().unwrap();
    for e in &first.validation.errors {
        assert!(corr.contains(e.as_str()));
    }
    assert!(corr.contains(first.bpmn_xml.as_deref().unwrap().trim_end()));
}

#[test]
fn automatic_iterations_are_capped() {
    let c = demo();
    let backend = Flaky { bad: Mutex::new(100) };
    let e = env(&c, &backend, &InstantSim);
    let mut st = ScenarioLoopState::new("s", PROCESS1_GOAL);
    let t = block_on(advance_loop(&mut st, LoopAction::Generate, &e)).unwrap();
    assert_eq!(
        (t.to, t.appended),
        (LoopPhase::Drafting, 1 + MAX_AUTO_ITERATIONS as usize)
    );
    // cap reached: the next generate makes exactly one attempt
    let t = block_on(advance_loop(&mut st, LoopAction::Generate, &e)).unwrap();
    assert_eq!(t.appended, 1);
    // a supervisor note resets the budget and is carried into the next prompt
    block_on(advance_loop(
        &mut st,
        LoopAction::Corrective("bind Paint to Stamp".into()),
        &e,
    ))
    .unwrap();
    *backend.bad.lock().unwrap() = 0;
    block_on(advance_loop(&mut st, LoopAction::Generate, &e)).unwrap();
    assert_eq!(st.phase, LoopPhase::Validated);
    let p = st.latest().unwrap().prompt_bundle.corrective_prompt.as_deref().unwrap();
    assert!(p.contains("bind Paint to Stamp"));
}

#[test]
fn unconfigured_backend_is_reported_and_recorded() {
    let c = demo();
    let b = Unconfigured {
        kind: BackendKind::RemoteHttp,
        reason: "no endpoint".into(),
    };
    let mut st = ScenarioLoopState::new("s", PROCESS1_GOAL);
    let err = block_on(advance_loop(&mut st, LoopAction::Generate, &env(&c, &b, &InstantSim))).unwrap_err();
    assert!(matches!(err, LoopError::Backend(BackendError::NotConfigured(_))));
    assert_eq!(st.phase, LoopPhase::Drafting);
    assert_eq!(st.history.len(), 1);
    assert!(st.history[0].raw_response.is_none());
}

#[test]
fn history_round_trips_as_json() {
    let c = demo();
    let backend = TemplateOffline::new(c.clone());
    let e = env(&c, &backend, &InstantSim);
    let mut st = ScenarioLoopState::new("s", PROCESS1_STEPS);
    block_on(advance_loop(&mut st, LoopAction::Generate, &e)).unwrap();
    block_on(advance_loop(&mut st, LoopAction::Simulate, &e)).unwrap();
    let json = serde_json::to_string(&st).unwrap();
    let back: ScenarioLoopState = serde_json::from_str(&json).unwrap();
    assert_eq!(back, st);
}

// ---- phase-machine model check ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GenMode {
    Valid,
    Invalid,
    Down,
}

/// Backend and simulator whose next results are chosen by the enumerator.
struct Scripted {
    gen: Mutex<GenMode>,
    sim_ok: Mutex<bool>,
}

#[async_trait]
impl LlmBackend for Scripted {
    fn kind(&self) -> BackendKind {
        BackendKind::RemoteHttp
    }

    async fn complete(&self, _b: &PromptBundle, _k: RequestKey<'_>) -> Result<String, BackendError> {
        match *self.gen.lock().unwrap() {
            GenMode::Valid => Ok(PROCESS1.to_string()),
            GenMode::Invalid => Ok("no xml here".into()),
            GenMode::Down => Err(BackendError::Transport("connection refused".into())),
        }
    }
}

#[async_trait]
impl Simulator for Scripted {
    async fn simulate(&self, id: &str, p: &BpmnProcess) -> RunLog {
        let d = InstantDispatcher::failing(if *self.sim_ok.lock().unwrap() {
            vec![]
        } else {
            vec!["punching_machine.stamp"]
        });
        execute(p, &d, &Vars::new(), &ExecPolicy::default(), id, Mode::Virtual).await
    }
}

/// `new` equals `old` except for slots that were empty in `old`.
fn fills_in(old: &HistoryEntry, new: &HistoryEntry) -> bool {
    let mut patched = new.clone();
    if old.run_log.is_none() {
        patched.run_log = None;
    }
    if old.supervisor_note.is_none() {
        patched.supervisor_note = None;
    }
    patched == *old
}

#[derive(Debug, Clone)]
enum Move {
    Generate(GenMode),
    Simulate(bool),
    Corrective,
    Accept,
    Reject,
}

const MOVES: [Move; 8] = [
    Move::Generate(GenMode::Valid),
    Move::Generate(GenMode::Invalid),
    Move::Generate(GenMode::Down),
    Move::Simulate(true),
    Move::Simulate(false),
    Move::Corrective,
    Move::Accept,
    Move::Reject,
];

#[test]
fn no_action_sequence_reaches_accepted_without_a_completed_run() {
    let c = demo();
    let s = Scripted {
        gen: Mutex::new(GenMode::Valid),
        sim_ok: Mutex::new(true),
    };
    let e = env(&c, &s, &s);
    let depth = 6;
    let (mut sequences, mut accepted) = (0u64, 0u64);
    // iterate over all MOVES^depth sequences as base-8 numbers; a sequence
    // is replayed from scratch so each one is independent
    for code in 0..MOVES.len().pow(depth) {
        let mut st = ScenarioLoopState::new("m", PROCESS1_GOAL);
        let mut k = code;
        for _ in 0..depth {
            let mv = MOVES[k % MOVES.len()].clone();
            k /= MOVES.len();
            let action = match mv {
                Move::Generate(m) => {
                    *s.gen.lock().unwrap() = m;
                    LoopAction::Generate
                }
                Move::Simulate(ok) => {
                    *s.sim_ok.lock().unwrap() = ok;
                    LoopAction::Simulate
                }
                Move::Corrective => LoopAction::Corrective("note".into()),
                Move::Accept => LoopAction::Accept,
                Move::Reject => LoopAction::Reject,
            };
            let before = st.clone();
            let r = block_on(advance_loop(&mut st, action, &e));
            if let Err(LoopError::Illegal { .. } | LoopError::NoCompletedRun(_)) = r {
                assert_eq!(st, before, "refused action changed the state");
            }
            assert!(st.history.len() >= before.history.len());
            for (old, new) in before.history.iter().zip(&st.history) {
                assert!(fills_in(old, new), "history rewritten");
            }
            if st.phase == LoopPhase::Accepted {
                let log = st.latest().and_then(|h| h.run_log.as_ref());
                assert_eq!(log.and_then(|l| l.outcome), Some(RunOutcome::Completed));
            }
        }
        sequences += 1;
        accepted += u64::from(st.phase == LoopPhase::Accepted);
    }
    assert_eq!(sequences, 8u64.pow(6));
    assert!(accepted > 0, "accepted must be reachable");
}
