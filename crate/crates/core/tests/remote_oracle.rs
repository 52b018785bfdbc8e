use std::time::Duration;

use vqa_icl::embed_index::{EmbeddingClient, HashingEmbedder, TextEmbedder};
use vqa_icl::manipulate::{build_sequence, InContextSequence};
use vqa_icl::oracle::stub::{StubConfig, StubMode, StubServer};
use vqa_icl::oracle::{GenerationRequest, Oracle, RemoteOracle, RemoteParams};
use vqa_icl::prompt::{default_template, serialize, PromptText};
use vqa_icl::rng::seeded;
use vqa_icl::strategies::{RetrievalContext, StrategyKind, StrategySpec};
use vqa_icl::synthetic::{generate, SyntheticSpec};
use vqa_icl::{Error, OracleFailure};

fn stub(cfg: StubConfig) -> StubServer {
    StubServer::spawn("127.0.0.1:0", cfg).unwrap()
}

fn params(server: &StubServer) -> RemoteParams {
    RemoteParams {
        endpoint: Some(server.url()),
        backoff_ms: 5,
        ..Default::default()
    }
}

fn prompt() -> (InContextSequence, PromptText) {
    let data = generate(SyntheticSpec { n: 20, seed: 1, dim: 16 }).unwrap();
    let corpus = data.corpus().unwrap();
    let q = &corpus.samples.samples()[0];
    let list = RetrievalContext::new(&corpus, &corpus, true)
        .retrieve(q, &StrategySpec::new(StrategyKind::Rs, 4), &mut seeded(1))
        .unwrap();
    let seq = build_sequence(&corpus.samples, q, &list).unwrap();
    let p = serialize(&seq, &default_template()).unwrap();
    (seq, p)
}

fn ask(oracle: &RemoteOracle) -> vqa_icl::Result<String> {
    let (seq, p) = prompt();
    oracle
        .generate(&GenerationRequest {
            query_id: 7,
            prompt: &p,
            sequence: &seq,
        })
        .map(|a| a.text)
}

fn failure(r: vqa_icl::Result<String>) -> OracleFailure {
    match r {
        Err(Error::Oracle { query_id: 7, kind }) => kind,
        other => panic!("expected oracle failure, got {other:?}"),
    }
}

#[test]
fn fixed_and_echo_modes() {
    let s = stub(StubConfig::default());
    let o = RemoteOracle::new(&params(&s), vec![]).unwrap();
    assert_eq!(ask(&o).unwrap(), "yes");
    assert_eq!(o.network_calls(), 1);

    let s = stub(StubConfig {
        mode: StubMode::Echo,
        ..Default::default()
    });
    let o = RemoteOracle::new(&params(&s), vec![]).unwrap();
    let (_, p) = prompt();
    let last = p.text.split_whitespace().last().unwrap().to_string();
    assert_eq!(ask(&o).unwrap(), last);
}

#[test]
fn transient_failures_are_retried() {
    let s = stub(StubConfig {
        fail_first: 2,
        ..Default::default()
    });
    let o = RemoteOracle::new(&params(&s), vec![]).unwrap();
    assert_eq!(ask(&o).unwrap(), "yes");
    assert_eq!(o.network_calls(), 3);
    assert_eq!(s.requests(), 3);
}

#[test]
fn exhausted_retries_report_last_status() {
    let s = stub(StubConfig {
        fail_first: 10,
        ..Default::default()
    });
    let o = RemoteOracle::new(&params(&s), vec![]).unwrap();
    assert_eq!(failure(ask(&o)), OracleFailure::Http(503));
    assert_eq!(o.network_calls(), 3);
}

#[test]
fn malformed_body_is_not_retried() {
    let s = stub(StubConfig {
        mode: StubMode::Malformed,
        ..Default::default()
    });
    let o = RemoteOracle::new(&params(&s), vec![]).unwrap();
    assert!(matches!(failure(ask(&o)), OracleFailure::Malformed(_)));
    assert_eq!(o.network_calls(), 1);
}

#[test]
fn slow_server_times_out() {
    let s = stub(StubConfig {
        delay: Duration::from_millis(400),
        ..Default::default()
    });
    let o = RemoteOracle::new(
        &RemoteParams {
            timeout_ms: 50,
            max_attempts: 2,
            ..params(&s)
        },
        vec![],
    )
    .unwrap();
    assert_eq!(failure(ask(&o)), OracleFailure::Timeout);
    assert_eq!(o.network_calls(), 2);
}

#[test]
fn concurrency_is_bounded() {
    let s = stub(StubConfig {
        delay: Duration::from_millis(30),
        ..Default::default()
    });
    let o = RemoteOracle::new(
        &RemoteParams {
            max_in_flight: 2,
            ..params(&s)
        },
        vec![],
    )
    .unwrap();
    std::thread::scope(|scope| {
        for _ in 0..8 {
            scope.spawn(|| assert_eq!(ask(&o).unwrap(), "yes"));
        }
    });
    assert!(o.peak_in_flight() <= 2);
    assert!(s.peak_in_flight() <= 2);
    assert_eq!(o.network_calls(), 8);
}

#[test]
fn missing_endpoint_is_a_config_error() {
    if std::env::var(vqa_icl::oracle::ENDPOINT_ENV).is_ok() {
        return;
    }
    assert!(matches!(
        RemoteOracle::new(&RemoteParams::default(), vec![]),
        Err(Error::Config(_))
    ));
}

#[test]
fn embedding_client_matches_local_hashing() {
    let s = stub(StubConfig {
        embed_dim: 32,
        ..Default::default()
    });
    let client = EmbeddingClient::new(s.url(), 32, Duration::from_secs(5));
    let texts = vec!["what color is the dog".to_string(), "how many cats".to_string()];
    let remote = client.embed_texts(&texts).unwrap();
    let local = HashingEmbedder::new(32).embed_texts(&texts).unwrap();
    assert_eq!(remote, local);

    let wrong_dim = EmbeddingClient::new(s.url(), 16, Duration::from_secs(5));
    assert!(matches!(
        wrong_dim.embed_texts(&texts),
        Err(Error::DimMismatch { expected: 16, actual: 32 })
    ));
}
