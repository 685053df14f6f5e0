use std::time::{Duration, Instant};

use medrag_core::embedding::{EmbedError, HttpEmbedder, HttpEmbedderConfig};
use medrag_core::gateway::{ChatModel, GatewayConfig, GatewayError, LlmGateway};
use medrag_core::mock::{MockOptions, MockScript, MockServer, ScriptRule};
use medrag_core::{hash_embed, Embedder, Purpose};

fn gateway(server: &MockServer) -> LlmGateway {
    LlmGateway::new(GatewayConfig {
        url: server.chat_url(),
        backoff_ms: 10,
        ..Default::default()
    })
}

async fn serve(rules: Vec<ScriptRule>) -> MockServer {
    MockServer::spawn(MockScript::new(rules), MockOptions::default())
        .await
        .unwrap()
}

#[tokio::test]
async fn success_on_first_attempt() {
    let server = serve(vec![ScriptRule::reply("", "Start 0.9% saline.")]).await;
    let gw = gateway(&server);
    let out = gw.complete(&gw.request("What fluids?")).await.unwrap();
    assert_eq!(out.text, "Start 0.9% saline.");
    assert_eq!(out.attempt_count, 1);
    assert_eq!(out.model_id, "mock-llm");
    assert!(out.token_usage.prompt > 0);
    assert_eq!(server.chat_requests(), 1);
}

#[tokio::test]
async fn server_errors_are_retried() {
    let server = serve(vec![ScriptRule::failing(503, 2), ScriptRule::reply("", "recovered")]).await;
    let gw = gateway(&server);
    let out = gw.complete(&gw.request("q")).await.unwrap();
    assert_eq!(out.text, "recovered");
    assert_eq!(out.attempt_count, 3);
    assert_eq!(server.chat_requests(), 3);
}

#[tokio::test]
async fn retries_are_bounded() {
    let server = serve(vec![ScriptRule::failing(500, 10)]).await;
    let gw = gateway(&server);
    let err = gw.complete(&gw.request("q")).await.unwrap_err();
    match &err {
        GatewayError::RemoteLlm { attempts, status, .. } => {
            assert_eq!(*attempts, 3);
            assert_eq!(*status, Some(500));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().starts_with("RemoteLLMError"));
    assert_eq!(server.chat_requests(), 3);
}

#[tokio::test]
async fn client_errors_fail_immediately() {
    let server = serve(vec![ScriptRule::failing(400, 5)]).await;
    let gw = gateway(&server);
    let err = gw.complete(&gw.request("q")).await.unwrap_err();
    assert!(matches!(
        err,
        GatewayError::RemoteLlm {
            attempts: 1,
            status: Some(400),
            ..
        }
    ));
    assert_eq!(server.chat_requests(), 1);
}

#[tokio::test]
async fn malformed_body_is_a_protocol_error() {
    let raw = ScriptRule {
        raw: true,
        ..ScriptRule::reply("", "{not json")
    };
    let server = serve(vec![raw]).await;
    let gw = gateway(&server);
    let err = gw.complete(&gw.request("q")).await.unwrap_err();
    assert!(matches!(err, GatewayError::Protocol(_)));
    assert!(err.to_string().starts_with("ProtocolError"));

    let empty = ScriptRule {
        raw: true,
        ..ScriptRule::reply("", r#"{"choices": []}"#)
    };
    let server = serve(vec![empty]).await;
    let gw = gateway(&server);
    assert!(matches!(
        gw.complete(&gw.request("q")).await,
        Err(GatewayError::Protocol(_))
    ));
}

#[tokio::test]
async fn prompt_reaches_the_server_byte_for_byte() {
    let server = serve(vec![ScriptRule::reply("", "ok")]).await;
    let gw = gateway(&server);
    let prompt = "[SYSTEM] line one\n\n[QUERY] patient’s K+ 5.9 mmol/L {user_query}\n\tResponse:";
    gw.complete(&gw.request(prompt)).await.unwrap();
    assert_eq!(server.prompts(), vec![prompt.to_string()]);
}

#[tokio::test]
async fn health_reports_reachable_and_unreachable() {
    let server = serve(vec![ScriptRule::reply("", "pong")]).await;
    let health = gateway(&server).health_check().await;
    assert!(health.ok);
    assert_eq!(health.model_id, "mock-llm");

    let dead_url = {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        format!("http://{}/v1/chat/completions", listener.local_addr().unwrap())
    };
    let gw = LlmGateway::new(GatewayConfig {
        url: dead_url,
        timeout_ms: 2000,
        ..Default::default()
    });
    let started = Instant::now();
    let health = gw.health_check().await;
    assert!(!health.ok);
    // A single attempt, so no backoff sleeps.
    assert!(started.elapsed() < Duration::from_millis(2000));
}

#[tokio::test]
async fn in_flight_requests_are_capped() {
    let slow = ScriptRule {
        delay_ms: 200,
        ..ScriptRule::reply("", "slow")
    };
    let server = serve(vec![slow]).await;
    let gw = LlmGateway::new(GatewayConfig {
        url: server.chat_url(),
        max_in_flight: 2,
        ..Default::default()
    });
    let started = Instant::now();
    let reqs: Vec<_> = (0..6).map(|i| gw.request(format!("q{i}"))).collect();
    let outs = futures::future::join_all(reqs.iter().map(|r| gw.complete(r))).await;
    assert!(outs.iter().all(|o| o.is_ok()));
    // Six 200 ms calls through two slots need at least three rounds.
    assert!(
        started.elapsed() >= Duration::from_millis(580),
        "{:?}",
        started.elapsed()
    );
}

fn embedder(server: &MockServer, dim: usize, batch_size: usize) -> HttpEmbedder {
    HttpEmbedder::new(HttpEmbedderConfig {
        url: server.embeddings_url(),
        model: "mock-embed".into(),
        dimension: dim,
        batch_size,
        backoff_ms: 10,
        query_prefix: "query: ".into(),
        ..Default::default()
    })
}

#[tokio::test]
async fn embeddings_keep_input_order_across_batches() {
    let server = MockServer::spawn(
        MockScript::default(),
        MockOptions {
            embedding_dim: 32,
            ..Default::default()
        },
    )
    .await
    .unwrap();
    let texts: Vec<String> = (0..10).map(|i| format!("chunk number {i} about sepsis")).collect();
    let out = embedder(&server, 32, 3).embed(&texts, Purpose::Document).await.unwrap();
    assert_eq!(server.embedding_requests(), 4);
    assert_eq!(out.len(), 10);
    for (t, e) in texts.iter().zip(&out) {
        let want = hash_embed(t, 32);
        assert!(want.values.iter().zip(&e.values).all(|(a, b)| (a - b).abs() < 1e-6));
        assert_eq!(e.model_id, "mock-embed");
    }
    let q = embedder(&server, 32, 3)
        .embed(&texts[..1], Purpose::Query)
        .await
        .unwrap();
    let want = hash_embed(&format!("query: {}", texts[0]), 32);
    assert!(want.values.iter().zip(&q[0].values).all(|(a, b)| (a - b).abs() < 1e-6));
}

#[tokio::test]
async fn embedding_failures_and_dimension_checks() {
    let opts = |status| MockOptions {
        embedding_dim: 16,
        embedding_status: status,
        ..Default::default()
    };
    let texts = vec!["a".to_string()];

    let server = MockServer::spawn(MockScript::default(), opts(Some(502))).await.unwrap();
    let err = embedder(&server, 16, 8)
        .embed(&texts, Purpose::Document)
        .await
        .unwrap_err();
    assert!(matches!(
        err,
        EmbedError::Remote {
            attempts: 3,
            status: Some(502),
            ..
        }
    ));
    assert_eq!(server.embedding_requests(), 3);

    let server = MockServer::spawn(MockScript::default(), opts(Some(422))).await.unwrap();
    let err = embedder(&server, 16, 8)
        .embed(&texts, Purpose::Document)
        .await
        .unwrap_err();
    assert!(matches!(err, EmbedError::Remote { attempts: 1, .. }));
    assert_eq!(server.embedding_requests(), 1);

    let server = MockServer::spawn(MockScript::default(), opts(None)).await.unwrap();
    let err = embedder(&server, 24, 8)
        .embed(&texts, Purpose::Document)
        .await
        .unwrap_err();
    assert!(matches!(
        err,
        EmbedError::DimensionMismatch {
            expected: 24,
            actual: 16
        }
    ));
}
