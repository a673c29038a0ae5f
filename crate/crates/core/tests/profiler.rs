use std::collections::BTreeMap;

use dooly_core::corpus::{backend, command_r7b, corpus_manifest, llama31_8b, llama3_8b, serving_manifest};
use dooly_core::modelir::{HardwareSpec, Phase, SweepGrid};
use dooly_core::opset::RunnableEntry;
use dooly_core::profiler::{
    attention_group, canonicalize, dedup, profile_manifest, runnable_set, sign_entries, signature, signature_hash, sweep,
    CostModel, LatencyDb,
};
use dooly_core::tracer::AttrValue;
use dooly_core::{BackendSpec, ModelConfig};

fn entries(m: &ModelConfig, be: &BackendSpec) -> Vec<RunnableEntry> {
    runnable_set(m, be, 1).unwrap().0.entries
}

fn attention(m: &ModelConfig, be: &BackendSpec) -> Vec<RunnableEntry> {
    entries(m, be).into_iter().filter(|e| e.stateful_kind() == Some("attention")).collect()
}

#[test]
fn sha256_of_empty_input() {
    assert_eq!(
        hex::encode(signature_hash(b"")),
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    );
}

#[test]
fn shared_geometry_gives_identical_bytes() {
    let models = [llama3_8b(), llama31_8b()];
    let be = backend("flashinfer", &models);
    let a = attention(&models[0], &be);
    let b = attention(&models[1], &be);
    assert_eq!(canonicalize(&a[0]), canonicalize(&a[0]));
    assert_eq!(canonicalize(&a[0]), canonicalize(&b[0]));
    let other = backend("triton", &models);
    assert_ne!(signature(&a[0]).hash, signature(&attention(&models[0], &other)[0]).hash);
}

#[test]
fn sliding_window_changes_bytes() {
    let m = command_r7b();
    let be = backend("flashinfer", std::slice::from_ref(&m));
    let attn = attention(&m, &be);
    assert_eq!(attn.len(), 2);
    let groups: Vec<_> = attn.iter().map(|e| attention_group(e).unwrap()).collect();
    assert_eq!(groups, ["window=4K", "32/8/128"]);
    assert_eq!(attn.iter().map(|e| e.repeat_count).collect::<Vec<_>>(), [24, 8]);
    let mut full = attn[1].clone();
    assert_ne!(canonicalize(&full), canonicalize(&attn[0]));
    full.attrs.insert("sliding_window".into(), AttrValue::Int(4096));
    assert_ne!(canonicalize(&full), canonicalize(&attn[1]));
}

#[test]
fn linear_sweep_follows_roofline() {
    let m = llama31_8b();
    let be = backend("flashinfer", std::slice::from_ref(&m));
    let hw = HardwareSpec::a100();
    let qkv = entries(&m, &be).into_iter().find(|e| e.path.ends_with("qkv_proj/aten::linear")).unwrap();
    let grid = SweepGrid {
        token_counts: vec![1, 512, 8192],
        request_counts: vec![1, 8],
        kv_lens: vec![0],
        prefill_chunk: 8192,
        max_batch: 256,
    };
    let cost = CostModel { model: &m, backend: &be, hw: &hw };
    let recs = sweep(&qkv, &signature(&qkv).hash, &grid, &cost).unwrap();
    assert_eq!(recs.len(), 3);
    for r in &recs {
        let t = r.workload.num_toks as f64;
        let (k, n) = (4096.0, 6144.0);
        let want = 5e-6 + f64::max(2.0 * t * k * n / hw.peak_flops, 2.0 * (t * k + k * n + t * n) / hw.mem_bw);
        assert!((r.latency_s - want).abs() < 1e-12, "{t}: {} vs {want}", r.latency_s);
    }
}

#[test]
fn attention_sweep_covers_both_phases() {
    let m = llama31_8b();
    let be = backend("flashinfer", std::slice::from_ref(&m));
    let hw = HardwareSpec::a100();
    let attn = &attention(&m, &be)[0];
    let grid = SweepGrid {
        token_counts: vec![16, 128, 512, 2048],
        request_counts: vec![1, 8, 64],
        kv_lens: vec![512],
        prefill_chunk: 8192,
        max_batch: 256,
    };
    let cost = CostModel { model: &m, backend: &be, hw: &hw };
    let recs = sweep(attn, &signature(attn).hash, &grid, &cost).unwrap();
    assert_eq!(recs.len(), 24);
    let phases: BTreeMap<Phase, usize> = recs.iter().fold(BTreeMap::new(), |mut acc, r| {
        *acc.entry(r.workload.phase).or_default() += 1;
        acc
    });
    assert_eq!(phases.values().copied().collect::<Vec<_>>(), [12, 12]);
}

#[test]
fn corpus_attention_groups() {
    let m = corpus_manifest();
    let mut db = LatencyDb::in_memory().unwrap();
    let report = profile_manifest(&mut db, &m, &m.grid.thinned(4)).unwrap();
    let table: BTreeMap<String, (u64, u64)> =
        report.attention_table().into_iter().map(|r| (r.group, (r.occurrences, r.reused))).collect();
    let want = BTreeMap::from(
        [
            ("aggregate", (42, 27)),
            ("32/8/128", (24, 21)),
            ("28/4/128", (6, 3)),
            ("32/32/128", (6, 3)),
            ("window=4K", (3, 0)),
            ("window=32K", (3, 0)),
        ]
        .map(|(g, nr)| (g.to_string(), nr)),
    );
    assert_eq!(table, want);
    let all = report.overall();
    assert_eq!(db.signature_count().unwrap(), all.occurrences - all.reused);
    assert!(all.reused * 2 >= all.occurrences);
    let from_db = dooly_core::profiler::report_from_db(&db).unwrap();
    for (a, b) in from_db.attention_table().iter().zip(report.attention_table()) {
        assert_eq!((&a.group, a.occurrences, a.reused), (&b.group, b.occurrences, b.reused));
        // sums run in a different order
        assert!((a.profiled_seconds - b.profiled_seconds).abs() <= 1e-12 * b.profiled_seconds);
    }
    assert_eq!(from_db.cumulative_unique(), report.cumulative_unique());
}

#[test]
fn empty_db_skips_nothing_and_rerun_profiles_nothing() {
    let m = serving_manifest();
    let mut db = LatencyDb::in_memory().unwrap();
    let be = &m.backends[0];
    let (set, _) = runnable_set(&llama31_8b(), be, 1).unwrap();
    let (to_profile, skipped) = dedup(&sign_entries(&set), &db).unwrap();
    assert!(skipped.is_empty());
    assert_eq!(to_profile.len(), sign_entries(&set).len());

    let grid = m.grid.thinned(4);
    let first = profile_manifest(&mut db, &m, &grid).unwrap();
    assert!(first.configs.iter().all(|c| c.outcomes.iter().any(|o| !o.reused)));
    let count = db.measurement_count().unwrap();
    let again = profile_manifest(&mut db, &m, &grid).unwrap();
    assert!(again.configs.iter().flat_map(|c| &c.outcomes).all(|o| o.reused));
    assert_eq!(db.measurement_count().unwrap(), count);
    let (to_profile, skipped) = dedup(&sign_entries(&set), &db).unwrap();
    assert!(to_profile.is_empty());
    assert_eq!(skipped.len(), sign_entries(&set).len());
}

#[test]
fn denser_grid_fills_in_known_signatures() {
    let m = serving_manifest();
    let mut thin_first = LatencyDb::in_memory().unwrap();
    profile_manifest(&mut thin_first, &m, &m.grid.thinned(2)).unwrap();
    let partial = thin_first.measurement_count().unwrap();
    let second = profile_manifest(&mut thin_first, &m, &m.grid).unwrap();
    assert!(second.configs.iter().flat_map(|c| &c.outcomes).all(|o| o.reused));
    let mut direct = LatencyDb::in_memory().unwrap();
    profile_manifest(&mut direct, &m, &m.grid).unwrap();
    assert!(partial < direct.measurement_count().unwrap());
    assert_eq!(thin_first.export_jsonl().unwrap(), direct.export_jsonl().unwrap());
}
