use std::collections::BTreeSet;

use dooly_core::corpus::{backend, command_r7b, coverage_fixtures, llama31_70b, llama31_8b};
use dooly_core::opset::{build_tree, find_opset, prune};
use dooly_core::tracer::{chrome, run_trace, DummyBatch, OpKind, TaintedTrace, TraceOptions};
use dooly_core::Taint;

fn trace(m: &dooly_core::ModelConfig, tp: u64) -> TaintedTrace {
    let be = backend("flashinfer", std::slice::from_ref(m));
    run_trace(m, &be, DummyBatch::collision_free(m, tp, &BTreeSet::new()), &TraceOptions::with_tp(tp)).unwrap()
}

#[test]
fn traces_are_byte_identical() {
    for (m, tp) in coverage_fixtures() {
        assert_eq!(chrome::export(&trace(&m, tp)), chrome::export(&trace(&m, tp)), "{}", m.name);
    }
}

#[test]
fn events_nest_as_a_forest() {
    let t = trace(&command_r7b(), 1);
    let by_id: std::collections::BTreeMap<u64, _> = t.events.iter().map(|e| (e.id, e)).collect();
    for e in &t.events {
        assert!(e.begin <= e.end);
        if let Some(p) = e.parent_id {
            let p = by_id[&p];
            assert!(p.begin <= e.begin && e.end <= p.end, "{} escapes {}", e.name, p.name);
        }
    }
}

#[test]
fn qkv_input_carries_token_and_model_taints() {
    let t = trace(&llama31_8b(), 1);
    let qkv = t.events.iter().find(|e| e.op_kind() == Some(OpKind::Linear)).unwrap();
    let x = &qkv.inputs[0];
    assert_eq!((x[0].size, &x[0].taint), (t.batch.total_tokens(), &Taint::NT));
    assert_eq!((x[1].size, &x[1].taint), (4096, &Taint::MC));
}

#[test]
fn tp4_collectives_take_no_time() {
    let t = trace(&llama31_70b(), 4);
    let colls: Vec<_> = t.events.iter().filter(|e| e.op_kind() == Some(OpKind::AllReduce)).collect();
    assert_eq!(colls.len(), 2 * 80);
    assert!(colls.iter().all(|c| c.begin == c.end));
    assert!(!t.events.iter().any(|e| e.parent_id.is_some_and(|p| colls.iter().any(|c| c.id == p))));
}

#[test]
fn runnable_set_covers_every_kernel_once() {
    for (m, tp) in coverage_fixtures() {
        let t = trace(&m, tp);
        let set = find_opset(&t).unwrap();
        let colls: u64 = set.collectives.iter().map(|c| c.repeat_count).sum();
        let covered: u64 = set.entries.iter().map(|e| e.covered_kernels * e.repeat_count).sum();
        assert_eq!(covered, t.kernel_count() as u64, "{}", m.name);
        assert_eq!(colls > 0, tp > 1);
    }
}

#[test]
fn prune_is_idempotent() {
    let t = trace(&command_r7b(), 1);
    let once = prune(&build_tree(&t).unwrap());
    assert_eq!(prune(&once), once);
    assert_eq!(once.kernel_count(), build_tree(&t).unwrap().kernel_count());
}
