mod support;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;
use support::oracles::{brute_force_outcomes, naive_eval, Terminal};
use twinloop_core::aml::parse_caex;
use twinloop_core::bpmn::generate::{exhaustive_small_graphs, random_process, Case};
use twinloop_core::bpmn::sweep::{run_instant, sweep_sequential};
use twinloop_core::bpmn::*;
use twinloop_core::events::Mode;
use twinloop_core::plant::{extract_plant_config, PlantConfig, RoleMapping};
use twinloop_core::value::{Value, ValueKind};

const DEMO: &str = include_str!("../fixtures/demo_plant.aml");
const PROCESS1: &str = include_str!("../fixtures/process1.bpmn");
const PROCESS2: &str = include_str!("../fixtures/process2.bpmn");
const PARALLEL: &str = include_str!("../fixtures/parallel.bpmn");

fn demo() -> PlantConfig {
    let doc = parse_caex(DEMO).unwrap();
    extract_plant_config(&doc, &RoleMapping::default()).unwrap().config
}

fn parse(xml: &str) -> BpmnProcess {
    parse_bpmn(xml, ParseMode::Strict)
        .unwrap_or_else(|e| panic!("{e}"))
        .process
}

fn vars(pairs: &[(&str, Value)]) -> Vars {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn run(p: &BpmnProcess, d: &InstantDispatcher) -> RunLog {
    futures::executor::block_on(execute(p, d, &Vars::new(), &ExecPolicy::default(), "r", Mode::Virtual))
}

fn bound(xml: &str) -> BpmnProcess {
    let (p, report) = bind_process(&parse(xml), &demo());
    assert!(report.is_ok(), "{report:?}");
    p
}

/// Minimal process wrapper around a `<process>` body.
fn doc(body: &str) -> String {
    format!(
        r#"<definitions xmlns="http://www.omg.org/spec/BPMN/20100524/MODEL" xmlns:tl="urn:twinloop:bpmn:1"><process id="p">{body}</process></definitions>"#
    )
}

// ---- expressions ----

#[test]
fn expr_examples() {
    let e = Expr::parse("count >= 2").unwrap();
    assert!(evaluate_condition(&e, &vars(&[("count", Value::Int(3))])).unwrap());
    let e = Expr::parse("done and not error").unwrap();
    let v = vars(&[("done", Value::Bool(true)), ("error", Value::Bool(false))]);
    assert!(evaluate_condition(&e, &v).unwrap());
    let e = Expr::parse("${station ≠ \"punch\" or slot <= -1}").unwrap();
    let v = vars(&[("station", "punch".into()), ("slot", Value::Int(-1))]);
    assert!(evaluate_condition(&e, &v).unwrap());
}

#[test]
fn missing_variable_is_an_error_not_false() {
    let e = Expr::parse("ready or go").unwrap();
    let err = evaluate_condition(&e, &vars(&[("ready", Value::Bool(true))])).unwrap_err();
    assert_eq!(err, EvalError::MissingVariable("go".into()));
}

#[test]
fn expr_type_checking() {
    let decls = BTreeMap::from([
        ("n".to_string(), ValueKind::Integer),
        ("b".to_string(), ValueKind::Boolean),
    ]);
    assert_eq!(
        Expr::parse("n < 3 and b").unwrap().type_of(&decls),
        Ok(ValueKind::Boolean)
    );
    assert!(Expr::parse("n and b").unwrap().type_of(&decls).is_err());
    assert!(Expr::parse("n = true").unwrap().type_of(&decls).is_err());
    assert!(Expr::parse("x").unwrap().type_of(&decls).is_err());
    assert!(Expr::parse("b < b").unwrap().type_of(&decls).is_err());
}

#[test]
fn expr_syntax_errors() {
    for bad in ["", "a and", "(a", "a b", "\"open", "1 < < 2", "a)"] {
        assert!(Expr::parse(bad).is_err(), "{bad:?} should not parse");
    }
}

fn arb_expr() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        any::<bool>().prop_map(Expr::lit),
        (-3i64..4).prop_map(Expr::lit),
        prop::sample::select(vec!["a", "b\"q", ""]).prop_map(Expr::lit),
        prop::sample::select(vec!["p", "q", "n", "m", "s", "missing"]).prop_map(Expr::var),
    ];
    leaf.prop_recursive(4, 24, 2, |inner| {
        let ops = prop::sample::select(vec![CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge]);
        prop_oneof![
            inner.clone().prop_map(|e| Expr::Not(Box::new(e))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::And(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Or(Box::new(a), Box::new(b))),
            (ops, inner.clone(), inner).prop_map(|(o, a, b)| Expr::Cmp(o, Box::new(a), Box::new(b))),
        ]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn eval_matches_naive_oracle(e in arb_expr(), p: bool, q: bool, n in -3i64..4, m in -3i64..4) {
        let v = vars(&[("p", Value::Bool(p)), ("q", Value::Bool(q)), ("n", Value::Int(n)), ("m", Value::Int(m)), ("s", "a".into())]);
        prop_assert_eq!(e.eval(&v).ok(), naive_eval(&e, &v));
    }

    #[test]
    fn display_round_trips(e in arb_expr()) {
        let text = e.to_string();
        prop_assert_eq!(Expr::parse(&text).unwrap(), e, "{}", text);
    }
}

// ---- parsing ----

#[test]
fn process1_fixture_is_six_sequential_tasks() {
    let parsed = parse_bpmn(PROCESS1, ParseMode::Strict).unwrap();
    assert!(parsed.warnings.is_empty(), "{:?}", parsed.warnings);
    let p = parsed.process;
    assert_eq!(p.count(NodeKind::ServiceTask), 6);
    assert_eq!(
        p.count(NodeKind::ExclusiveGateway) + p.count(NodeKind::ParallelGateway),
        0
    );
    assert_eq!(p.lanes.len(), 4);
    assert_eq!(p.lane_of("Task_Stamp").unwrap().name, "PunchingMachine");
    let to = &p.node("Task_ToPunch").unwrap().binding.as_ref().unwrap().param_exprs["to"];
    assert_eq!(*to, Expr::lit("punch"));
}

#[test]
fn process2_and_parallel_fixtures() {
    let p2 = parse(PROCESS2);
    assert_eq!(p2.count(NodeKind::ServiceTask), 8);
    assert_eq!(
        p2.node("mill_2")
            .unwrap()
            .binding
            .as_ref()
            .unwrap()
            .implementation
            .as_deref(),
        Some("indexed_line.mill_and_drill")
    );
    let par = parse(PARALLEL);
    assert_eq!(par.count(NodeKind::ParallelGateway), 2);
    assert_eq!(par.count(NodeKind::ServiceTask), 3);
}

#[test]
fn two_start_events_rejected() {
    let xml = doc(r#"<startEvent id="s1"/><startEvent id="s2"/><endEvent id="e"/>
           <sequenceFlow id="f1" sourceRef="s1" targetRef="e"/><sequenceFlow id="f2" sourceRef="s2" targetRef="e"/>"#);
    let err = parse_bpmn(&xml, ParseMode::Strict).unwrap_err();
    assert!(err.to_string().contains("start"), "{err}");
    assert!(err.issues[0].line.is_some());
}

#[test]
fn parse_errors() {
    let cases = [
        (doc(r#"<endEvent id="e"/>"#), "start"),
        (
            doc(r#"<startEvent id="s"/><sequenceFlow id="f" sourceRef="s" targetRef="s"/>"#),
            "end",
        ),
        (
            doc(r#"<startEvent id="s"/><endEvent id="e"/><sequenceFlow id="f" sourceRef="s" targetRef="nope"/>"#),
            "nope",
        ),
        (
            doc(
                r#"<startEvent id="s"/><endEvent id="e"/><sequenceFlow id="f" sourceRef="s" targetRef="e"><conditionExpression>a and</conditionExpression></sequenceFlow>"#,
            ),
            "condition",
        ),
        (doc(r#"<startEvent id="s"/><endEvent id="s"/>"#), "duplicate"),
        ("<not-bpmn/>".to_string(), "definitions"),
        ("<definitions".to_string(), "XML"),
    ];
    for (xml, needle) in cases {
        let err = parse_bpmn(&xml, ParseMode::Strict).unwrap_err().to_string();
        assert!(
            err.to_lowercase().contains(&needle.to_lowercase()),
            "{needle:?} not in {err:?}"
        );
    }
}

#[test]
fn unsupported_elements_strict_vs_lenient() {
    let xml = doc(
        r#"<startEvent id="s"/><userTask id="u" name="Stamp"/><intermediateCatchEvent id="t"/><endEvent id="e"/>
           <sequenceFlow id="f1" sourceRef="s" targetRef="u"/><sequenceFlow id="f2" sourceRef="u" targetRef="e"/>"#,
    );
    let err = parse_bpmn(&xml, ParseMode::Strict).unwrap_err().to_string();
    assert!(
        err.contains("userTask") && err.contains("intermediateCatchEvent"),
        "{err}"
    );
    let ok = parse_bpmn(&xml, ParseMode::Lenient).unwrap();
    assert_eq!(ok.process.node("u").unwrap().kind, NodeKind::ServiceTask);
    assert!(ok.process.node("t").is_none());
    assert_eq!(ok.warnings.len(), 2, "{:?}", ok.warnings);
}

#[test]
fn deeply_nested_input_is_refused_before_parsing() {
    let xml = format!(
        "<definitions>{}{}</definitions>",
        "<a>".repeat(5000),
        "</a>".repeat(5000)
    );
    let err = parse_bpmn(&xml, ParseMode::Lenient).unwrap_err().to_string();
    assert!(err.contains("nesting deeper than"), "{err}");
}

/// A resolved capability id is written as the `implementation` attribute.
fn as_unbound(mut p: BpmnProcess) -> BpmnProcess {
    for b in p.nodes.iter_mut().filter_map(|n| n.binding.as_mut()) {
        if let Some(c) = b.capability_id.take() {
            b.implementation = Some(c);
        }
    }
    p
}

#[test]
fn write_then_parse_is_identity() {
    for xml in [PROCESS1, PROCESS2, PARALLEL] {
        let p = parse(xml);
        assert_eq!(parse(&write_bpmn(&p)), p);
    }
    let p = bound(PROCESS1);
    assert_eq!(parse(&write_bpmn(&p)), as_unbound(p));
    let mut rng = StdRng::seed_from_u64(7);
    for i in 0..50 {
        let case = random_process(&mut rng, 1 + i % 9, i % 3 == 0);
        assert_eq!(parse(&write_bpmn(&case.process)), as_unbound(case.process));
    }
}

// ---- validation ----

#[test]
fn fixtures_bind_cleanly_against_demo_config() {
    let c = demo();
    for xml in [PROCESS1, PROCESS2, PARALLEL] {
        let r = validate_process(&parse(xml), &c);
        assert_eq!(r, ValidationReport::default());
    }
    let p = bound(PROCESS1);
    let caps: Vec<&str> = p.service_tasks().map(|n| n.capability_id().unwrap()).collect();
    assert_eq!(
        caps,
        [
            "high_bay_warehouse.load_from_warehouse",
            "robot_arm.robot_command",
            "punching_machine.stamp",
            "robot_arm.robot_command",
            "indexed_line.mill_and_drill",
            "high_bay_warehouse.store_to_warehouse",
        ]
    );
}

#[test]
fn unbound_task_is_reported_by_name() {
    let xml = PROCESS1.replace(r#"name="Stamp""#, r#"name="Paint""#);
    let r = validate_process(&parse(&xml), &demo());
    assert_eq!(r.errors, ["unbound task: Paint"]);
}

#[test]
fn unreachable_task_is_reported() {
    // Cut the flow into Task_Stamp: it and everything after it drop off.
    let xml = PROCESS1.replace(
        r#"sourceRef="Task_ToPunch" targetRef="Task_Stamp""#,
        r#"sourceRef="Task_ToPunch" targetRef="EndEvent_1""#,
    );
    let r = validate_process(&parse(&xml), &demo());
    assert!(r.errors.contains(&"unreachable node: Stamp".to_string()), "{r:?}");
    assert!(
        r.errors.contains(&"unreachable node: MillAndDrill".to_string()),
        "{r:?}"
    );
}

#[test]
fn dead_end_and_unmatched_join() {
    let xml = doc(
        r#"<startEvent id="s"/><exclusiveGateway id="x" default="f3"/><task id="a" name="Stamp"/><task id="b" name="MillAndDrill"/>
           <parallelGateway id="j"/><endEvent id="e"/><task id="loop" name="Stamp"/>
           <sequenceFlow id="f1" sourceRef="s" targetRef="x"/>
           <sequenceFlow id="f2" sourceRef="x" targetRef="a"><conditionExpression>go</conditionExpression></sequenceFlow>
           <sequenceFlow id="f3" sourceRef="x" targetRef="b"/>
           <sequenceFlow id="f4" sourceRef="a" targetRef="j"/><sequenceFlow id="f5" sourceRef="b" targetRef="j"/>
           <sequenceFlow id="f6" sourceRef="j" targetRef="e"/>"#,
    );
    let mut p = parse(&xml);
    p.variables.insert("go".into(), ValueKind::Boolean);
    let r = validate_process(&p, &demo());
    assert!(r.warnings.contains(&"unmatched parallel join: j".to_string()), "{r:?}");
    assert!(r.errors.contains(&"unreachable node: Stamp".to_string()), "{r:?}");
}

#[test]
fn parameter_checks() {
    let c = demo();
    let bad_choice = PROCESS1.replace("'punch'", "'moon'");
    let r = validate_process(&parse(&bad_choice), &c);
    assert_eq!(r.errors.len(), 1, "{r:?}");
    assert!(r.errors[0].contains("parameter to"), "{r:?}");

    let missing = PROCESS1.replace(r#"<tl:param name="to" value="'index'" />"#, "");
    let r = validate_process(&parse(&missing), &c);
    assert_eq!(r.errors, ["task RobotCommand: missing parameter to"]);

    let wrong_kind = PROCESS1.replace("'punch'", "3");
    assert!(!validate_process(&parse(&wrong_kind), &c).is_ok());
}

#[test]
fn conditions_only_after_exclusive_gateways() {
    let xml = doc(r#"<startEvent id="s"/><endEvent id="e"/>
           <sequenceFlow id="f" sourceRef="s" targetRef="e"><conditionExpression>true</conditionExpression></sequenceFlow>"#);
    let r = validate_process(&parse(&xml), &demo());
    assert_eq!(r.errors.len(), 1, "{r:?}");
}

#[test]
fn ambiguous_name_needs_a_lane() {
    let mut c = demo();
    let mut twin = c.capabilities.iter().find(|k| k.name == "Stamp").unwrap().clone();
    twin.capability_id = "indexed_line.stamp".into();
    twin.machine_id = "indexed_line".into();
    c.capabilities.push(twin);
    // process1 puts Stamp in the PunchingMachine lane.
    let (p, r) = bind_process(&parse(PROCESS1), &c);
    assert!(r.is_ok(), "{r:?}");
    assert_eq!(
        p.node("Task_Stamp").unwrap().capability_id(),
        Some("punching_machine.stamp")
    );
    // parallel.bpmn has no lanes.
    let r = validate_process(&parse(PARALLEL), &c);
    assert!(r.errors.iter().any(|e| e.starts_with("ambiguous task: Stamp")), "{r:?}");
}

// ---- execution ----

#[test]
fn process1_dispatch_order() {
    let p = bound(PROCESS1);
    let log = run(&p, &InstantDispatcher::default());
    assert_eq!(log.outcome, Some(RunOutcome::Completed), "{}", log.detail);
    let order: Vec<&str> = log.dispatched().map(|e| e.node_id.as_str()).collect();
    assert_eq!(
        order,
        [
            "Task_Load",
            "Task_ToPunch",
            "Task_Stamp",
            "Task_ToIndex",
            "Task_MillDrill",
            "Task_Store"
        ]
    );
    assert_eq!(log.tokens.created, log.tokens.consumed);
}

#[test]
fn start_to_end_only() {
    let p = parse(&doc(
        r#"<startEvent id="s"/><endEvent id="e"/><sequenceFlow id="f" sourceRef="s" targetRef="e"/>"#,
    ));
    let log = run(&p, &InstantDispatcher::default());
    assert_eq!(log.entries.len(), 2);
    assert_eq!(log.outcome, Some(RunOutcome::Completed));
}

#[test]
fn parallel_branches_dispatch_before_completing_and_join_once() {
    let p = bound(PARALLEL);
    let log = run(&p, &InstantDispatcher::default());
    assert_eq!(log.outcome, Some(RunOutcome::Completed));
    let pos = |node: &str, phase| {
        log.entries
            .iter()
            .position(|e| e.node_id == node && e.phase == phase)
            .unwrap()
    };
    let last_dispatch = pos("stamp", EntryPhase::Dispatched).max(pos("mill", EntryPhase::Dispatched));
    let first_complete = pos("stamp", EntryPhase::Completed).min(pos("mill", EntryPhase::Completed));
    assert!(last_dispatch < first_complete);
    let entered = |node: &str| {
        log.entries
            .iter()
            .filter(|e| e.node_id == node && e.phase == EntryPhase::Entered)
            .count()
    };
    assert_eq!((entered("join"), entered("store"), entered("end")), (1, 1, 1));
    assert_eq!(log.tokens.max_live, 2);
}

#[test]
fn busy_rejection_is_retried_once() {
    let p = bound(PARALLEL);
    let d = InstantDispatcher::default();
    d.busy_once.lock().unwrap().insert("punching_machine.stamp".into());
    let log = run(&p, &d);
    assert_eq!(log.outcome, Some(RunOutcome::Completed));
    let done = log
        .entries
        .iter()
        .find(|e| e.node_id == "stamp" && e.phase == EntryPhase::Completed)
        .unwrap();
    assert!(done.detail.contains("busy retry"));
}

#[test]
fn failure_is_fail_fast_by_default() {
    let p = bound(PROCESS1);
    let d = InstantDispatcher::failing(["punching_machine.stamp"]);
    let log = run(&p, &d);
    assert_eq!(log.outcome, Some(RunOutcome::Failed));
    assert!(log.detail.contains("Stamp"), "{}", log.detail);
    assert_eq!(log.dispatched().count(), 3);
    assert_eq!(log.entries.last().unwrap().phase, EntryPhase::Failed);
}

#[test]
fn continue_on_failure_runs_other_branches() {
    let p = bound(PARALLEL);
    let d = InstantDispatcher::failing(["punching_machine.stamp"]);
    let policy = ExecPolicy {
        fail_fast: false,
        ..Default::default()
    };
    let log = futures::executor::block_on(execute(&p, &d, &Vars::new(), &policy, "r", Mode::Virtual));
    assert_eq!(log.outcome, Some(RunOutcome::Failed));
    assert!(log
        .entries
        .iter()
        .any(|e| e.node_id == "mill" && e.phase == EntryPhase::Completed));
    assert!(!log.entries.iter().any(|e| e.node_id == "store"));
}

#[test]
fn exclusive_gateway_without_viable_flow_fails_with_no_path() {
    let xml = doc(
        r#"<extensionElements><tl:variable name="n" kind="integer"/></extensionElements>
           <startEvent id="s"/><exclusiveGateway id="x"/><endEvent id="e1"/><endEvent id="e2"/>
           <sequenceFlow id="f0" sourceRef="s" targetRef="x"/>
           <sequenceFlow id="f1" sourceRef="x" targetRef="e1"><conditionExpression>n &gt; 5</conditionExpression></sequenceFlow>
           <sequenceFlow id="f2" sourceRef="x" targetRef="e2"><conditionExpression>n &lt; 0</conditionExpression></sequenceFlow>"#,
    );
    let p = parse(&xml);
    assert!(validate_process(&p, &demo()).is_ok());
    let go = |n: i64| {
        let v = vars(&[("n", Value::Int(n))]);
        futures::executor::block_on(execute(
            &p,
            &InstantDispatcher::default(),
            &v,
            &ExecPolicy::default(),
            "r",
            Mode::Virtual,
        ))
    };
    assert_eq!(go(9).outcome, Some(RunOutcome::Completed));
    assert!(go(9).entries.iter().any(|e| e.node_id == "e1"));
    assert!(go(-1).entries.iter().any(|e| e.node_id == "e2"));
    let stuck = go(2);
    assert_eq!(stuck.outcome, Some(RunOutcome::Failed));
    assert!(stuck.detail.starts_with("no_path"), "{}", stuck.detail);
}

#[test]
fn runlog_ndjson_round_trip_and_invariants() {
    let log = run(&bound(PARALLEL), &InstantDispatcher::default());
    let text = log.to_ndjson();
    assert_eq!(text.lines().count(), log.entries.len() + 2);
    assert_eq!(RunLog::from_ndjson(&text).unwrap(), log);

    let mut l = RunLog::new("x", "p", Mode::Physical);
    let e = |at| LogEntry {
        at,
        node_id: "n".into(),
        phase: EntryPhase::Entered,
        detail: String::new(),
    };
    l.push(e(5)).unwrap();
    assert!(l.push(e(4)).is_err());
    l.finish(RunOutcome::Aborted, "stop").unwrap();
    assert!(l.finish(RunOutcome::Completed, "").is_err());
}

// ---- conformance sweeps ----

/// Total firing budget shared by the engine and the brute-force oracle.
const BUDGET: u64 = 16;

fn entered_counts(case: &Case, log: &RunLog) -> Vec<u64> {
    case.process
        .nodes
        .iter()
        .map(|n| {
            log.entries
                .iter()
                .filter(|e| e.node_id == n.node_id && e.phase == EntryPhase::Entered)
                .count() as u64
        })
        .collect()
}

fn engine_terminal(case: &Case, log: &RunLog) -> Terminal {
    match (log.outcome, log.detail.as_str()) {
        (Some(RunOutcome::Completed), _) => Terminal::Completed(entered_counts(case, log)),
        (_, d) if d.starts_with("deadlock") => Terminal::Deadlock(entered_counts(case, log)),
        (_, d) if d.starts_with("no_path") => Terminal::NoPath,
        (_, d) if d.starts_with("step_limit") => Terminal::StepLimit,
        other => panic!("unexpected outcome {other:?}"),
    }
}

/// Returns a description of the first disagreement, if any.
fn check_against_oracle(case: &Case, budget: u64) -> Option<String> {
    let policy = ExecPolicy {
        max_firings: budget,
        ..Default::default()
    };
    let log = run_instant(case, &policy);
    let got = engine_terminal(case, &log);
    let want = brute_force_outcomes(&case.process, &case.vars, budget);
    // Conflict-free nets are confluent: at most one outcome that is not a
    // budget or choice failure.
    let settled: Vec<&Terminal> = want
        .iter()
        .filter(|t| matches!(t, Terminal::Completed(_) | Terminal::Deadlock(_)))
        .collect();
    if settled.len() > 1 {
        return Some(format!("oracle not confluent: {want:?}"));
    }
    if !want.contains(&got) {
        return Some(format!(
            "engine {got:?} not among oracle outcomes {want:?}\n{}",
            write_bpmn(&case.process)
        ));
    }
    if log.tokens.created - log.tokens.consumed != 0 && got.class() == "completed" {
        return Some(format!("tokens not conserved: {:?}", log.tokens));
    }
    None
}

#[test]
fn exhaustive_small_graphs_match_brute_force() {
    let cases = exhaustive_small_graphs(6);
    let classes: BTreeMap<&str, usize> = sweep_sequential(&cases, |c| {
        let log = run_instant(
            c,
            &ExecPolicy {
                max_firings: BUDGET,
                ..Default::default()
            },
        );
        engine_terminal(c, &log).class()
    })
    .into_iter()
    .fold(BTreeMap::new(), |mut m, k| {
        *m.entry(k).or_default() += 1;
        m
    });
    println!("{} cases, engine outcomes {classes:?}", cases.len());
    let failures: Vec<String> = twinloop_core::bpmn::sweep::sweep(&cases, |c| check_against_oracle(c, BUDGET))
        .into_iter()
        .flatten()
        .collect();
    assert!(
        failures.is_empty(),
        "{} mismatches, first: {}",
        failures.len(),
        failures[0]
    );
    // every class must actually occur, or the sweep is not exercising them
    for k in ["completed", "deadlock", "no_path", "step_limit"] {
        assert!(classes.get(k).copied().unwrap_or(0) > 0, "no {k} case in {classes:?}");
    }
}

#[test]
fn random_graphs_conserve_tokens() {
    let mut rng = StdRng::seed_from_u64(0x70ce);
    let cases: Vec<Case> = (0..500)
        .map(|i| random_process(&mut rng, 2 + i % 12, i % 4 == 3))
        .collect();
    let policy = ExecPolicy {
        max_firings: 200,
        ..Default::default()
    };
    let logs = twinloop_core::bpmn::sweep::execute_batch(&cases, &policy);
    let mut completed = 0;
    for (case, log) in cases.iter().zip(&logs) {
        assert!(!log.detail.contains("conservation"), "{}", write_bpmn(&case.process));
        let live = log.tokens.created - log.tokens.consumed;
        if log.outcome == Some(RunOutcome::Completed) {
            completed += 1;
            assert_eq!(live, 0);
        }
    }
    // unmutated block-structured graphs always complete
    let clean = cases.iter().enumerate().filter(|(i, _)| i % 4 != 3).count();
    assert!(completed >= clean, "{completed} < {clean}");
}

#[test]
fn random_graphs_match_brute_force() {
    let mut rng = StdRng::seed_from_u64(0xb0b);
    let cases: Vec<Case> = (0..150)
        .map(|i| random_process(&mut rng, 2 + i % 6, i % 3 == 2))
        .collect();
    for c in &cases {
        if let Some(msg) = check_against_oracle(c, 40) {
            panic!("{msg}");
        }
    }
}

#[test]
fn sequential_and_parallel_sweeps_agree() {
    let cases = exhaustive_small_graphs(4);
    let policy = ExecPolicy {
        max_firings: BUDGET,
        ..Default::default()
    };
    let a = sweep_sequential(&cases, |c| run_instant(c, &policy));
    let b = twinloop_core::bpmn::sweep::execute_batch(&cases, &policy);
    assert_eq!(a, b);
}
