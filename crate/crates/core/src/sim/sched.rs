//! Continuous batching with chunked prefill.
//!
//! Every iteration: running decodes take one token each, then the remaining
//! token budget goes to partial prefills in admission order, then to waiting
//! requests (FCFS) while the batch cap and KV budget allow. A request reserves
//! KV for its full prompt and output when admitted and releases it on finish.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::modelir::Request;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedConfig {
    /// Token budget per iteration, decode tokens included.
    pub chunk: u64,
    pub max_batch: usize,
    pub max_kv_bytes: u64,
    pub kv_bytes_per_token: u64,
}

impl SchedConfig {
    pub fn reserve(&self, r: &Request) -> u64 {
        (r.prompt_tokens + r.output_tokens) * self.kv_bytes_per_token
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningRequest {
    pub request: Request,
    /// Prompt tokens in the KV cache, cached prefix included.
    pub prefilled: u64,
    /// Output tokens produced so far.
    pub generated: u64,
    pub reserved_bytes: u64,
}

impl RunningRequest {
    pub fn in_decode(&self) -> bool {
        self.prefilled == self.request.prompt_tokens
    }

    pub fn finished(&self) -> bool {
        self.generated >= self.request.output_tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scheduled {
    pub request: usize,
    pub tokens: u64,
    /// Tokens already in the KV cache before this iteration.
    pub kv_before: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationBatch {
    pub prefill: Vec<Scheduled>,
    pub decode: Vec<Scheduled>,
}

impl IterationBatch {
    pub fn is_empty(&self) -> bool {
        self.prefill.is_empty() && self.decode.is_empty()
    }

    pub fn num_tokens(&self) -> u64 {
        self.prefill.iter().chain(&self.decode).map(|s| s.tokens).sum()
    }

    pub fn num_reqs(&self) -> u64 {
        (self.prefill.len() + self.decode.len()) as u64
    }

    pub fn prefill_tokens(&self) -> u64 {
        self.prefill.iter().map(|s| s.tokens).sum()
    }
}

/// What an iteration did to one request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Progress {
    pub request: usize,
    pub first_token: bool,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerState {
    pub config: SchedConfig,
    pub waiting: VecDeque<Request>,
    pub running: Vec<RunningRequest>,
    pub kv_used: u64,
    pub clock: f64,
}

impl SchedulerState {
    pub fn new(config: SchedConfig) -> Self {
        Self {
            config,
            waiting: VecDeque::new(),
            running: Vec::new(),
            kv_used: 0,
            clock: 0.0,
        }
    }

    pub fn is_idle(&self) -> bool {
        self.waiting.is_empty() && self.running.is_empty()
    }
}

/// Plan one iteration, admitting waiting requests as needed.
pub fn schedule_step(state: &mut SchedulerState) -> IterationBatch {
    let cfg = state.config;
    let mut batch = IterationBatch::default();
    let mut budget = cfg.chunk;
    for r in state.running.iter().filter(|r| r.in_decode() && !r.finished()) {
        if budget == 0 {
            break;
        }
        batch.decode.push(Scheduled {
            request: r.request.id,
            tokens: 1,
            kv_before: r.prefilled + r.generated - 1,
        });
        budget -= 1;
    }
    for r in state.running.iter().filter(|r| !r.in_decode()) {
        if budget == 0 {
            break;
        }
        let take = (r.request.prompt_tokens - r.prefilled).min(budget);
        batch.prefill.push(Scheduled {
            request: r.request.id,
            tokens: take,
            kv_before: r.prefilled,
        });
        budget -= take;
    }
    while budget > 0 && state.running.len() < cfg.max_batch {
        let Some(head) = state.waiting.front() else { break };
        let reserve = cfg.reserve(head);
        if state.kv_used + reserve > cfg.max_kv_bytes {
            break;
        }
        let req = state.waiting.pop_front().expect("front exists");
        let cached = req.cached_tokens.min(req.prompt_tokens - 1);
        let take = (req.prompt_tokens - cached).min(budget);
        batch.prefill.push(Scheduled {
            request: req.id,
            tokens: take,
            kv_before: cached,
        });
        budget -= take;
        state.kv_used += reserve;
        state.running.push(RunningRequest {
            request: req,
            prefilled: cached,
            generated: 0,
            reserved_bytes: reserve,
        });
    }
    batch
}

/// Apply a finished iteration: advance prefills and decodes, then evict
/// completed requests.
pub fn complete_step(state: &mut SchedulerState, batch: &IterationBatch) -> Vec<Progress> {
    let mut out = Vec::with_capacity(batch.prefill.len() + batch.decode.len());
    for s in batch.prefill.iter().chain(&batch.decode) {
        let r = state
            .running
            .iter_mut()
            .find(|r| r.request.id == s.request)
            .expect("scheduled request is running");
        let mut first_token = false;
        if r.in_decode() {
            r.generated += 1;
        } else {
            r.prefilled += s.tokens;
            if r.in_decode() {
                r.generated = 1;
                first_token = true;
            }
        }
        out.push(Progress {
            request: s.request,
            first_token,
            finished: r.finished(),
        });
    }
    let mut freed = 0;
    state.running.retain(|r| {
        if r.finished() {
            freed += r.reserved_bytes;
        }
        !r.finished()
    });
    state.kv_used -= freed;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(chunk: u64, max_batch: usize) -> SchedConfig {
        SchedConfig {
            chunk,
            max_batch,
            max_kv_bytes: u64::MAX / 2,
            kv_bytes_per_token: 1,
        }
    }

    fn req(id: usize, prompt: u64, output: u64) -> Request {
        Request {
            id,
            arrival_s: 0.0,
            prompt_tokens: prompt,
            output_tokens: output,
            cached_tokens: 0,
        }
    }

    #[test]
    fn long_prompt_is_chunked() {
        let mut s = SchedulerState::new(cfg(8192, 256));
        s.waiting.push_back(req(0, 10000, 4));
        let b1 = schedule_step(&mut s);
        assert_eq!(b1.prefill_tokens(), 8192);
        assert!(!complete_step(&mut s, &b1)[0].first_token);
        let b2 = schedule_step(&mut s);
        assert_eq!(b2.prefill_tokens(), 1808);
        assert!(complete_step(&mut s, &b2)[0].first_token);
        let b3 = schedule_step(&mut s);
        assert_eq!((b3.prefill.len(), b3.decode.len()), (0, 1));
        assert_eq!(b3.decode[0].kv_before, 10000);
    }

    #[test]
    fn decodes_consume_budget() {
        let mut s = SchedulerState::new(cfg(8192, 256));
        for i in 0..64 {
            s.waiting.push_back(req(i, 1, 10));
        }
        let b = schedule_step(&mut s);
        complete_step(&mut s, &b);
        s.waiting.push_back(req(64, 20000, 2));
        let b = schedule_step(&mut s);
        assert_eq!(b.decode.len(), 64);
        assert_eq!(b.prefill_tokens(), 8192 - 64);
    }

    #[test]
    fn batch_cap_holds_queue() {
        let mut s = SchedulerState::new(cfg(8192, 1));
        s.waiting.push_back(req(0, 10, 5));
        s.waiting.push_back(req(1, 10, 5));
        let b = schedule_step(&mut s);
        assert_eq!(b.prefill.len(), 1);
        assert_eq!(s.waiting.len(), 1);
    }

    #[test]
    fn kv_reservation_blocks_admission() {
        let mut s = SchedulerState::new(SchedConfig {
            max_kv_bytes: 30,
            ..cfg(8192, 8)
        });
        s.waiting.push_back(req(0, 10, 10));
        s.waiting.push_back(req(1, 10, 10));
        let b = schedule_step(&mut s);
        assert_eq!(b.prefill.len(), 1);
        assert_eq!(s.kv_used, 20);
    }
}
