mod common;

use std::net::TcpListener;
use std::sync::atomic::Ordering;
use std::time::Duration;

use camplan::evalclient::*;
use camplan::metrics::classify_shot;
use camplan::synth::{dataset_sample, DistanceClass, Elevation, Facing, Movement};
use common::{completion, mock};

fn cfg(url: &str) -> EndpointConfig {
    let mut c = EndpointConfig::new(url, "test-key", "judge-1");
    c.backoff = vec![Duration::from_millis(10), Duration::from_millis(40)];
    c.timeout = Duration::from_secs(10);
    c
}

fn prompt(kind: TemplateKind) -> EvalPrompt {
    let s = dataset_sample(0, 5, 16).unwrap();
    build_prompt(kind, &s.camera, &s.motion, &s.prompt)
}

#[test]
fn tcc_round_trip_and_wire_format() {
    let m = mock(
        vec![completion(
            "1\nThe camera orbits the subject as instructed.",
        )],
        Duration::ZERO,
    );
    let p = prompt(TemplateKind::Tcc);
    let r = evaluate_remote(&p, &cfg(&m.url)).unwrap();
    assert_eq!(
        r,
        EvalResult::Tcc(TccResult {
            score: 1,
            reason: "The camera orbits the subject as instructed.".into()
        })
    );
    let seen = m.seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].path, "/chat/completions");
    assert_eq!(seen[0].auth, "Bearer test-key");
    assert_eq!(seen[0].body["model"], "judge-1");
    assert_eq!(seen[0].body["messages"][0]["role"], "system");
    assert_eq!(seen[0].body["messages"][0]["content"], TCC_TEMPLATE);
    assert_eq!(
        seen[0].body["messages"][1]["content"].as_str().unwrap(),
        p.user
    );
}

#[test]
fn style_round_trip() {
    let m = mock(
        vec![completion(
            "Viewpoint:Front+High-angle\nDistance:Close-up\nMovement type:Pull-out",
        )],
        Duration::ZERO,
    );
    match evaluate_remote(&prompt(TemplateKind::Style), &cfg(&m.url)).unwrap() {
        EvalResult::Style(s) => {
            assert_eq!(s.viewpoint.facing, Facing::Front);
            assert_eq!(s.viewpoint.elevation, Elevation::HighAngle);
            assert_eq!(s.distance, DistanceClass::CloseUp);
            assert_eq!(s.movement, Movement::PullOut);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn malformed_keeps_raw_text() {
    let m = mock(vec![completion("maybe 3")], Duration::ZERO);
    match evaluate_remote(&prompt(TemplateKind::Tcc), &cfg(&m.url)) {
        Err(EvalError::MalformedResponse { raw }) => assert_eq!(raw, "maybe 3"),
        other => panic!("{other:?}"),
    }
    let m = mock(vec![(200, "not json".into())], Duration::ZERO);
    match evaluate_remote(&prompt(TemplateKind::Tcc), &cfg(&m.url)) {
        Err(EvalError::MalformedResponse { raw }) => assert_eq!(raw, "not json"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn auth_failure_is_not_retried() {
    let m = mock(vec![(401, "{}".into())], Duration::ZERO);
    assert!(matches!(
        evaluate_remote(&prompt(TemplateKind::Tcc), &cfg(&m.url)),
        Err(EvalError::AuthFailed(401))
    ));
    assert_eq!(m.seen.lock().unwrap().len(), 1);
}

#[test]
fn transient_failures_retry_twice() {
    let m = mock(
        vec![
            (503, "{}".into()),
            (500, "{}".into()),
            completion("2\nMatches."),
        ],
        Duration::ZERO,
    );
    let r = evaluate_remote(&prompt(TemplateKind::Tcc), &cfg(&m.url)).unwrap();
    assert!(matches!(r, EvalResult::Tcc(TccResult { score: 2, .. })));
    assert_eq!(m.seen.lock().unwrap().len(), 3);

    let m = mock(vec![(500, "{}".into()); 5], Duration::ZERO);
    assert!(matches!(
        evaluate_remote(&prompt(TemplateKind::Tcc), &cfg(&m.url)),
        Err(EvalError::Transport(_))
    ));
    assert_eq!(m.seen.lock().unwrap().len(), 3);
    assert_eq!(
        DEFAULT_BACKOFF,
        [Duration::from_secs(1), Duration::from_secs(4)]
    );
}

#[test]
fn unreachable_endpoint_is_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let c = cfg(&format!("http://127.0.0.1:{port}"));
    assert!(matches!(
        evaluate_remote(&prompt(TemplateKind::Tcc), &c),
        Err(EvalError::Transport(_))
    ));
}

#[test]
fn batch_bounds_concurrency_and_keeps_order() {
    let replies: Vec<_> = (0..10).map(|_| completion("1\nPartly.")).collect();
    let m = mock(replies, Duration::from_millis(60));
    let prompts: Vec<_> = (0..10).map(|_| prompt(TemplateKind::Tcc)).collect();
    let out = evaluate_batch(&prompts, &cfg(&m.url), DEFAULT_IN_FLIGHT);
    assert_eq!(out.len(), 10);
    assert!(out
        .iter()
        .all(|r| matches!(r, Ok(EvalResult::Tcc(TccResult { score: 1, .. })))));
    let peak = m.peak.load(Ordering::SeqCst);
    assert!((2..=DEFAULT_IN_FLIGHT).contains(&peak), "peak {peak}");
}

#[test]
fn offline_matches_classifier_without_network() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    std::env::set_var(
        "EVAL_BASE_URL",
        format!("http://{}", listener.local_addr().unwrap()),
    );
    for i in 0..30 {
        let s = dataset_sample(6, i, 16).unwrap();
        let a = evaluate_offline(&s.camera, &s.motion);
        assert_eq!(a, classify_shot(&s.camera, &s.motion));
    }
    assert!(listener.accept().is_err());
}
