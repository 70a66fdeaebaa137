use std::time::Duration;

use anyhow::Result;
use augloop_net::{start_mock_llm, start_mock_worker, MockLlmMode, MockWorkerMode};

use crate::args::{LlmModeArg, MockServeArgs, WorkerModeArg};

pub fn run(args: &MockServeArgs) -> Result<()> {
    let llm_mode = match args.llm_mode {
        LlmModeArg::Recombine => MockLlmMode::Recombine,
        LlmModeArg::Echo => MockLlmMode::Echo(args.echo_text.clone()),
        LlmModeArg::FailEveryOther => MockLlmMode::FailEveryOther,
        LlmModeArg::RejectTopK => MockLlmMode::RejectTopK,
    };
    let worker_mode = match args.worker_mode {
        WorkerModeArg::Surrogate if args.delay_ms > 0 => MockWorkerMode::Delay(Duration::from_millis(args.delay_ms)),
        WorkerModeArg::Surrogate => MockWorkerMode::Surrogate,
        WorkerModeArg::Fixed => MockWorkerMode::Fixed(args.fixed_accuracy),
        WorkerModeArg::Reject => MockWorkerMode::Reject,
        WorkerModeArg::CrashAfter => MockWorkerMode::CrashAfter(args.crash_after),
    };
    let (llm, _) = start_mock_llm(args.llm_addr, llm_mode)?;
    let (worker, _) = start_mock_worker(args.worker_addr, worker_mode)?;
    // Tests and scripts read these two lines to find the servers.
    println!("llm {}/v1", llm.url());
    println!("worker {}", worker.url());
    log::info!("serving until interrupted");
    worker.wait();
    drop(llm);
    Ok(())
}
