use std::net::TcpListener;
use std::time::{Duration, Instant};

use kbvqa_core::gateway::server::{spawn_stub_server, StubServerConfig, StubServerHandle};
use kbvqa_core::gateway::wire::ServerStats;
use kbvqa_core::gateway::{
    render_with, ChatRequest, GatewayConfig, GatewayError, GatewayMode, ModelGateway,
    RemoteGateway, RerankRequest, ScenarioTable, StubGateway, TemplateId,
};

fn server(cfg: StubServerConfig) -> StubServerHandle {
    spawn_stub_server("127.0.0.1:0".parse().unwrap(), cfg).unwrap()
}

fn remote_cfg(url: String) -> GatewayConfig {
    GatewayConfig {
        endpoint_url: url,
        mode: GatewayMode::Remote,
        auth_token_env_var: String::new(),
        timeout_ms: 2_000,
        backoff_base_ms: 1,
        ..GatewayConfig::default()
    }
}

fn stats(url: &str) -> ServerStats {
    reqwest::blocking::get(format!("{url}/v1/stats"))
        .unwrap()
        .json()
        .unwrap()
}

#[test]
fn remote_matches_in_process_stub() {
    let srv = server(StubServerConfig {
        seed: 9,
        ..Default::default()
    });
    let remote = RemoteGateway::new(remote_cfg(srv.url()), 16, 24).unwrap();
    let local = StubGateway::new(9, 16, 24);

    assert_eq!(
        remote.embed_text("eiffel tower").unwrap(),
        local.embed_text("eiffel tower").unwrap()
    );
    assert_eq!(
        remote.embed_image("images/a.jpg").unwrap(),
        local.embed_image("images/a.jpg").unwrap()
    );
    let req = RerankRequest {
        query: "who built it".into(),
        image_ref: Some("q.jpg".into()),
        passages: vec!["built by engineers".into(), "a river".into()],
    };
    assert_eq!(remote.rerank(&req).unwrap(), local.rerank(&req).unwrap());

    let prompt = render_with(TemplateId::Refiner, &[("Query", "what is this?")]).unwrap();
    let chat = ChatRequest::from_prompt(prompt, Some("q.jpg"));
    assert_eq!(remote.chat(&chat).unwrap(), local.chat(&chat).unwrap());
}

#[test]
fn scenarios_override_chat() {
    let srv = server(StubServerConfig {
        scenarios: ScenarioTable::default().with(TemplateId::Inspector, "{\"pass\": true}"),
        ..Default::default()
    });
    let remote = RemoteGateway::new(remote_cfg(srv.url()), 4, 4).unwrap();
    let prompt = render_with(
        TemplateId::Inspector,
        &[("Query", "q"), ("Context", "c")],
    )
    .unwrap();
    let out = remote.chat(&ChatRequest::from_prompt(prompt, None)).unwrap();
    assert_eq!(out, "{\"pass\": true}");
}

#[test]
fn transient_failures_are_retried() {
    let srv = server(StubServerConfig {
        fail_first: 2,
        ..Default::default()
    });
    let remote = RemoteGateway::new(remote_cfg(srv.url()), 4, 4).unwrap();
    remote.embed_text("x").unwrap();
    assert_eq!(stats(&srv.url()).requests, 3);

    let srv = server(StubServerConfig {
        fail_first: 10,
        ..Default::default()
    });
    let cfg = GatewayConfig {
        max_retries: 2,
        ..remote_cfg(srv.url())
    };
    let err = RemoteGateway::new(cfg, 4, 4).unwrap().embed_text("x").unwrap_err();
    assert!(
        matches!(err, GatewayError::Status { status: 503, attempts: 3, .. }),
        "{err:?}"
    );
    assert_eq!(stats(&srv.url()).requests, 3);
}

#[test]
fn unresponsive_server_times_out_after_retries() {
    // Accepts connections but never answers.
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let cfg = GatewayConfig {
        timeout_ms: 150,
        max_retries: 1,
        ..remote_cfg(url)
    };
    let start = Instant::now();
    let err = RemoteGateway::new(cfg, 4, 4).unwrap().embed_text("x").unwrap_err();
    assert!(matches!(err, GatewayError::Timeout { attempts: 2 }), "{err:?}");
    assert!(start.elapsed() >= Duration::from_millis(300));
    drop(listener);
}

#[test]
fn connection_refused_is_transport_error() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let cfg = GatewayConfig {
        max_retries: 1,
        ..remote_cfg(format!("http://127.0.0.1:{port}"))
    };
    let err = RemoteGateway::new(cfg, 4, 4).unwrap().embed_text("x").unwrap_err();
    assert!(matches!(err, GatewayError::Transport { attempts: 2, .. }), "{err:?}");
}

#[test]
fn concurrency_is_bounded() {
    let srv = server(StubServerConfig {
        delay_ms: 60,
        ..Default::default()
    });
    let cfg = GatewayConfig {
        max_concurrent_requests: 3,
        ..remote_cfg(srv.url())
    };
    let remote = RemoteGateway::new(cfg, 4, 4).unwrap();
    std::thread::scope(|s| {
        for i in 0..12 {
            let remote = &remote;
            s.spawn(move || remote.embed_text(&format!("t{i}")).unwrap());
        }
    });
    let st = stats(&srv.url());
    assert_eq!(st.requests, 12);
    assert_eq!(st.max_in_flight, 3);
}

#[test]
fn bearer_token_from_env() {
    let srv = server(StubServerConfig::default());
    std::env::set_var("KBVQA_TEST_TOKEN_7", "s3cret");
    let cfg = GatewayConfig {
        auth_token_env_var: "KBVQA_TEST_TOKEN_7".into(),
        ..remote_cfg(srv.url())
    };
    RemoteGateway::new(cfg, 4, 4).unwrap().embed_text("x").unwrap();
    assert_eq!(
        stats(&srv.url()).last_authorization.as_deref(),
        Some("Bearer s3cret")
    );
}

#[test]
fn client_errors_are_not_retried() {
    let srv = server(StubServerConfig::default());
    let cfg = remote_cfg(format!("{}/health-nope", srv.url()));
    let err = RemoteGateway::new(cfg, 4, 4).unwrap().embed_text("x").unwrap_err();
    assert!(matches!(err, GatewayError::Status { status: 404, attempts: 1, .. }), "{err:?}");
}
