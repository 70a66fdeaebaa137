use std::net::SocketAddr;
use std::time::{Duration, Instant};

use augloop_core::controller::FinetuneJobSpec;
use augloop_core::eval::{EvalConfig, EvalError, EvalJob, Evaluator};
use augloop_core::gateway::{CandidateGenerator, GenerationRequest, SamplingParams, SlotError};
use augloop_core::pairs::{render_dataset, PairProvenance, PreferencePair};
use augloop_core::ErrorClass;
use augloop_net::{
    start_mock_llm, start_mock_worker, ChatClient, ChatClientConfig, EvalScheduler, FinetuneClient, MockLlmMode,
    MockWorkerMode, SchedulerConfig,
};

fn any_port() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

fn closed_port() -> String {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap();
    drop(l);
    format!("http://{addr}")
}

fn client(url: String) -> ChatClient {
    ChatClient::new(ChatClientConfig { initial_backoff: Duration::from_millis(5), ..ChatClientConfig::new(url) }).unwrap()
}

fn requests(n: usize) -> Vec<GenerationRequest> {
    (0..n).map(|i| GenerationRequest { prompt: format!("prompt {i}"), seed: i as u64 }).collect()
}

#[test]
fn echo_endpoint_returns_every_slot() {
    let (server, log) = start_mock_llm(any_port(), MockLlmMode::Echo("<tr>ok</tr>".into())).unwrap();
    let c = client(format!("{}/v1", server.url()));
    let out = c.generate(&requests(10), &SamplingParams::default());
    assert_eq!(out, vec![Ok("<tr>ok</tr>".to_string()); 10]);
    assert!(c.generate(&[], &SamplingParams::default()).is_empty());

    let seen = log.requests();
    assert_eq!(seen.len(), 10);
    let body = serde_json::to_value(&seen[0]).unwrap();
    assert_eq!(body["temperature"], 0.8);
    assert_eq!(body["top_p"], 0.9);
    assert_eq!(body["top_k"], 70);
    assert_eq!(body["max_tokens"], 16384);
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], "prompt 0");
}

#[test]
fn failed_slots_do_not_disturb_neighbours() {
    let (clean, _) = start_mock_llm(any_port(), MockLlmMode::Recombine).unwrap();
    let (flaky, _) = start_mock_llm(any_port(), MockLlmMode::FailEveryOther).unwrap();
    let reqs = requests(8);
    let params = SamplingParams::default();
    let expected = client(clean.url()).generate(&reqs, &params);

    let no_retry = ChatClient::new(ChatClientConfig {
        max_attempts: 1,
        parallelism: 1,
        ..ChatClientConfig::new(flaky.url())
    })
    .unwrap();
    let out = no_retry.generate(&reqs, &params);
    for (i, (got, want)) in out.iter().zip(&expected).enumerate() {
        if i % 2 == 1 {
            assert_eq!(got, &Err(SlotError::Http(500)));
        } else {
            assert_eq!(got, want);
        }
    }

    // With retries every slot eventually succeeds with the same content.
    let (flaky2, _) = start_mock_llm(any_port(), MockLlmMode::FailEveryOther).unwrap();
    let retrying = ChatClient::new(ChatClientConfig { parallelism: 1, initial_backoff: Duration::from_millis(5), ..ChatClientConfig::new(flaky2.url()) }).unwrap();
    assert_eq!(retrying.generate(&reqs, &params), expected);
}

#[test]
fn top_k_dropped_when_rejected() {
    let (server, log) = start_mock_llm(any_port(), MockLlmMode::RejectTopK).unwrap();
    let c = ChatClient::new(ChatClientConfig { parallelism: 1, ..ChatClientConfig::new(server.url()) }).unwrap();
    let out = c.generate(&requests(3), &SamplingParams::default());
    assert!(out.iter().all(|r| r.is_ok()), "{out:?}");
    assert!(!c.sends_top_k());
    let seen = log.requests();
    assert_eq!(seen.len(), 4);
    assert!(seen[0].top_k.is_some() && seen[1..].iter().all(|r| r.top_k.is_none()));
}

#[test]
fn unreachable_endpoint_marks_each_slot() {
    let c = client(closed_port());
    let started = Instant::now();
    let out = c.generate(&requests(3), &SamplingParams::default());
    assert!(out.iter().all(|r| matches!(r, Err(SlotError::Unreachable(_)))));
    assert!(started.elapsed() < Duration::from_secs(5));
}

fn job(i: usize, code: &str) -> EvalJob {
    EvalJob { job_id: format!("j{i}"), code: code.into(), config: EvalConfig::default(), submitted_at: 0 }
}

fn scheduler(url: String, k: usize, timeout: Duration) -> EvalScheduler {
    EvalScheduler::new(SchedulerConfig { base_url: url, max_in_flight: k, job_timeout: timeout }).unwrap()
}

#[test]
fn fixed_worker_accuracy() {
    let (server, _) = start_mock_worker(any_port(), MockWorkerMode::Fixed(0.52)).unwrap();
    let out = scheduler(server.url(), 1, Duration::from_secs(5)).evaluate(&[job(0, "x")]).unwrap();
    assert_eq!(out[0].job_id, "j0");
    assert_eq!(out[0].accuracy_value(), Some(0.52));
}

#[test]
fn rejected_code_is_syntax_error() {
    let (server, _) = start_mock_worker(any_port(), MockWorkerMode::Reject).unwrap();
    let out = scheduler(server.url(), 1, Duration::from_secs(5)).evaluate(&[job(0, "def broken(")]).unwrap();
    assert_eq!(out[0].error_class(), Some(ErrorClass::SyntaxError));
}

#[test]
fn surrogate_worker_matches_local_surrogate() {
    let (server, _) = start_mock_worker(any_port(), MockWorkerMode::Surrogate).unwrap();
    let code = augloop_core::transform_space::render_compose(&[], &Default::default(), (64, 64));
    let remote = scheduler(server.url(), 1, Duration::from_secs(5)).evaluate(&[job(0, &code)]).unwrap();
    let local = augloop_core::SurrogateEvaluator::default().evaluate_one("j0", &code);
    assert_eq!(remote[0], local);
}

#[test]
fn crash_mid_batch_only_hits_unfinished_jobs() {
    let (server, log) = start_mock_worker(any_port(), MockWorkerMode::CrashAfter(2)).unwrap();
    let jobs: Vec<_> = (0..5).map(|i| job(i, "transforms.ToTensor()")).collect();
    let out = scheduler(server.url(), 1, Duration::from_secs(5)).evaluate(&jobs).unwrap();
    assert_eq!(out.len(), 5);
    assert_eq!(out.iter().map(|r| r.job_id.as_str()).collect::<Vec<_>>(), ["j0", "j1", "j2", "j3", "j4"]);
    assert!(out[..2].iter().all(|r| r.error_class() != Some(ErrorClass::WorkerUnreachable)));
    assert!(out[2..].iter().all(|r| r.error_class() == Some(ErrorClass::WorkerUnreachable)));
    assert_eq!(log.jobs_seen(), 5);
}

#[test]
fn unreachable_worker() {
    let out = scheduler(closed_port(), 2, Duration::from_secs(5)).evaluate(&[job(0, "a"), job(1, "b")]).unwrap();
    assert!(out.iter().all(|r| r.error_class() == Some(ErrorClass::WorkerUnreachable)));
}

#[test]
fn per_job_timeout() {
    let (server, _) = start_mock_worker(any_port(), MockWorkerMode::Delay(Duration::from_millis(400))).unwrap();
    let out = scheduler(server.url(), 1, Duration::from_millis(100)).evaluate(&[job(0, "a")]).unwrap();
    assert_eq!(out[0].error_class(), Some(ErrorClass::Timeout));
}

#[test]
fn in_flight_limit() {
    let (server, _) = start_mock_worker(any_port(), MockWorkerMode::Delay(Duration::from_millis(150))).unwrap();
    let jobs: Vec<_> = (0..4).map(|i| job(i, "transforms.ToTensor()")).collect();
    let t = Instant::now();
    scheduler(server.url(), 4, Duration::from_secs(5)).evaluate(&jobs).unwrap();
    let parallel = t.elapsed();
    let t = Instant::now();
    scheduler(server.url(), 1, Duration::from_secs(5)).evaluate(&jobs).unwrap();
    let serial = t.elapsed();
    assert!(serial >= Duration::from_millis(600), "{serial:?}");
    assert!(parallel < Duration::from_millis(450), "{parallel:?}");
}

#[test]
fn batch_preconditions() {
    let s = scheduler(closed_port(), 1, Duration::from_secs(1));
    assert_eq!(s.evaluate(&[]), Err(EvalError::EmptyBatch));
    assert!(matches!(s.evaluate(&[job(0, "")]), Err(EvalError::EmptyCode(_))));
}

#[test]
fn finetune_round_trip() {
    let (server, log) = start_mock_worker(any_port(), MockWorkerMode::Surrogate).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let pair = PreferencePair {
        base_id: 0,
        addon_id: 1,
        base_accuracy: 0.4,
        addon_accuracy: 0.6,
        base_code: "a".into(),
        addon_code: "b".into(),
        provenance: PairProvenance::Original,
    };
    std::fs::write(&path, render_dataset(&vec![pair; 10])).unwrap();
    let mut spec = FinetuneJobSpec::for_epoch(0, 10);
    spec.dataset_path = path.to_string_lossy().into_owned();
    let client = FinetuneClient::new(server.url(), Duration::from_secs(5)).unwrap();
    assert_eq!(client.submit(&spec).unwrap().adapter_path, "adapters/epoch_000");
    let received = log.finetune_jobs();
    assert_eq!(received.len(), 1);
    assert_eq!((received[0].hyperparameters.r, received[0].hyperparameters.lora_alpha), (32, 32));

    std::fs::write(&path, "").unwrap();
    assert!(matches!(client.submit(&spec), Err(augloop_net::NetError::Status(422, _))));
}
