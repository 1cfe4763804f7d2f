mod common;

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use common::{chat_body, dead_endpoint, read_fixture, MiniServer, PNG_SIGNATURE};
use gcot_core::distiller::Distiller;
use gcot_core::extract::sub_question_prompt;
use gcot_core::gateway::{BackendProfile, ChatRequest, Gateway, GatewayError};
use gcot_core::grounder::{Grounder, LoadedImage};
use gcot_core::model::{DatasetTag, ImageRef, QASample, Span, SubQuestion, Target, TargetKind};

fn profile(url: &str, retries: u32) -> BackendProfile {
    let mut p = BackendProfile::new("test", url);
    p.max_retries = retries;
    p.backoff_base_s = 0.001;
    p.timeout_s = 5.0;
    p
}

fn ok_server(content: &'static str) -> MiniServer {
    MiniServer::start(Arc::new(move |_, _| (200, chat_body(content))))
}

#[test]
fn grounding_request_goes_out_byte_exact_with_bearer_auth() {
    let server = ok_server("The $0.72 is at [0.611, 0.381, 0.875, 0.455].");
    let mut p = profile(&server.url, 0);
    p.auth_env_var = "GCOT_HTTP_TEST_KEY".into();
    std::env::set_var("GCOT_HTTP_TEST_KEY", "sk-test");
    let grounder = Grounder::new(Gateway::http(p).unwrap(), "base");
    let image = ImageRef::new("img", "img.png", 480, 200).unwrap();
    let loaded = LoadedImage::from_bytes(image, PNG_SIGNATURE.to_vec());
    let subq = SubQuestion {
        target: Target {
            surface: "$0.72".into(),
            kind: TargetKind::Number,
            span: Span::new(0, 5),
        },
        prompt: sub_question_prompt("$0.72"),
        index_t: 1,
    };
    let b = grounder.request_box(&subq, &loaded).unwrap();
    assert_eq!([b.x1, b.y1, b.x2, b.y2], [0.611, 0.381, 0.875, 0.455]);

    let reqs = server.captured();
    assert_eq!(reqs.len(), 1);
    let req = &reqs[0];
    assert_eq!(req.method, "POST");
    assert_eq!(req.path, "/v1/chat/completions");
    assert_eq!(req.header("authorization"), Some("Bearer sk-test"));
    assert_eq!(req.header("content-type"), Some("application/json"));
    assert_eq!(req.body, read_fixture("wire/grounding_request.json"));
}

#[test]
fn distiller_sends_golden_body_from_disk_image() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("img.png");
    std::fs::write(&path, PNG_SIGNATURE).unwrap();
    let image = ImageRef::new("img", &path, 480, 200).unwrap();
    let sample = QASample::new(
        "s-1",
        image,
        "How much do the lemon tart and the iced tea cost together?",
        "$4.10",
        DatasetTag::Synth,
    )
    .unwrap();
    let server = ok_server("Add them. *Answer*: $4.10");
    let distiller = Distiller::new(Gateway::http(profile(&server.url, 0)).unwrap(), "teacher");
    let cot = distiller.distill_one(&sample).unwrap();
    assert!(cot.answer_ok);
    assert_eq!(cot.parsed_answer.as_deref(), Some("$4.10"));
    assert_eq!(server.captured()[0].body, read_fixture("wire/distill_request.json"));
}

#[test]
fn server_errors_are_retried_then_succeed() {
    let server = MiniServer::start(Arc::new(|n, _| {
        if n < 2 {
            (503, "{}".into())
        } else {
            (200, chat_body("fine"))
        }
    }));
    let gw = Gateway::http(profile(&server.url, 3)).unwrap();
    let text = gw.complete(&ChatRequest::user("m", "hi", None)).unwrap();
    assert_eq!(text, "fine");
    assert_eq!(server.captured().len(), 3);
    let stats = gw.stats();
    assert_eq!((stats.attempts, stats.completed, stats.failed), (3, 1, 0));
}

#[test]
fn rate_limit_is_retried() {
    let server = MiniServer::start(Arc::new(|n, _| {
        if n == 0 {
            (429, "{}".into())
        } else {
            (200, chat_body("fine"))
        }
    }));
    let gw = Gateway::http(profile(&server.url, 1)).unwrap();
    assert_eq!(gw.complete(&ChatRequest::user("m", "hi", None)).unwrap(), "fine");
}

#[test]
fn retries_exhausted_reports_attempts() {
    let server = MiniServer::start(Arc::new(|_, _| (500, "{}".into())));
    let gw = Gateway::http(profile(&server.url, 2)).unwrap();
    match gw.complete(&ChatRequest::user("m", "hi", None)) {
        Err(GatewayError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("{other:?}"),
    }
    assert_eq!(server.captured().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let server = MiniServer::start(Arc::new(|_, _| (400, "{\"error\":\"bad\"}".into())));
    let gw = Gateway::http(profile(&server.url, 3)).unwrap();
    match gw.complete(&ChatRequest::user("m", "hi", None)) {
        Err(GatewayError::Rejected { status, body }) => {
            assert_eq!(status, 400);
            assert!(body.contains("bad"));
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(server.captured().len(), 1);
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let gw = Gateway::http(profile(&dead_endpoint(), 1)).unwrap();
    match gw.complete(&ChatRequest::user("m", "hi", None)) {
        Err(GatewayError::Transport { attempts, .. }) => assert_eq!(attempts, 2),
        other => panic!("{other:?}"),
    }
}

#[test]
fn malformed_success_body_is_a_protocol_error() {
    let server = MiniServer::start(Arc::new(|_, _| (200, "not json".into())));
    let gw = Gateway::http(profile(&server.url, 3)).unwrap();
    let err = gw.complete(&ChatRequest::user("m", "hi", None)).unwrap_err();
    assert!(matches!(err, GatewayError::Protocol(_)), "{err:?}");
    assert_eq!(server.captured().len(), 1);
}

#[test]
fn slow_backend_times_out() {
    let server = MiniServer::start(Arc::new(|_, _| {
        thread::sleep(Duration::from_millis(800));
        (200, chat_body("late"))
    }));
    let mut p = profile(&server.url, 0);
    p.timeout_s = 0.1;
    let gw = Gateway::http(p).unwrap();
    let err = gw.complete(&ChatRequest::user("m", "hi", None)).unwrap_err();
    assert!(matches!(err, GatewayError::Transport { .. }), "{err:?}");
}

#[test]
fn in_flight_never_exceeds_the_bound() {
    let server = MiniServer::start(Arc::new(|_, _| {
        thread::sleep(Duration::from_millis(25));
        (200, chat_body("ok"))
    }));
    let mut p = profile(&server.url, 0);
    p.max_in_flight = 3;
    let gw = Gateway::http(p).unwrap();
    let handles: Vec<_> = (0..24)
        .map(|i| {
            let gw = gw.clone();
            thread::spawn(move || gw.complete(&ChatRequest::user("m", format!("q{i}"), None)))
        })
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap().unwrap(), "ok");
    }
    let stats = gw.stats();
    assert_eq!(stats.completed, 24);
    assert!(stats.peak_in_flight <= 3, "gateway peak {}", stats.peak_in_flight);
    assert!(stats.peak_in_flight >= 2, "requests never overlapped");
    let server_peak = server.peak.load(std::sync::atomic::Ordering::SeqCst);
    assert!(server_peak <= 3, "server saw {server_peak} at once");
    assert_eq!(gw.in_flight(), 0);
}
