//! Built-in model, backend and manifest definitions.
//!
//! The committed manifests under `manifests/` are generated from these
//! functions; a test keeps them in sync.

use std::collections::BTreeMap;

use crate::modelir::{
    geometry_key_for, AttentionKind, BackendSpec, CorpusManifest, HardwareSpec, KernelTableEntry, ModelConfig,
    MoeConfig, Phase, SweepGrid, SCHEMA_VERSION,
};

#[allow(clippy::too_many_arguments)]
fn dense(
    name: &str,
    hidden: u64,
    layers: u64,
    q: u64,
    kv: u64,
    hd: u64,
    inter: u64,
    vocab: u64,
    max_ctx: u64,
) -> ModelConfig {
    ModelConfig {
        name: name.into(),
        hidden_dim: hidden,
        num_layers: layers,
        num_q_heads: q,
        num_kv_heads: kv,
        head_dim: hd,
        intermediate_size: inter,
        vocab_size: vocab,
        dtype_bytes: 2,
        layer_attention: vec![AttentionKind::Full; layers as usize],
        moe: None,
        max_context: max_ctx,
    }
}

fn interleave(mut m: ModelConfig, window: u64, full: impl Fn(usize) -> bool) -> ModelConfig {
    for (i, k) in m.layer_attention.iter_mut().enumerate() {
        if !full(i) {
            *k = AttentionKind::Sliding { window };
        }
    }
    m
}

pub fn llama3_8b() -> ModelConfig {
    dense("Llama-3-8B", 4096, 32, 32, 8, 128, 14336, 128256, 8192)
}

pub fn llama31_8b() -> ModelConfig {
    dense("Llama-3.1-8B", 4096, 32, 32, 8, 128, 14336, 128256, 131072)
}

pub fn llama2_7b() -> ModelConfig {
    dense("Llama-2-7B", 4096, 32, 32, 32, 128, 11008, 32000, 4096)
}

pub fn qwen25_7b() -> ModelConfig {
    dense("Qwen2.5-7B", 3584, 28, 28, 4, 128, 18944, 152064, 131072)
}

pub fn qwen3_8b() -> ModelConfig {
    dense("Qwen3-8B", 4096, 36, 32, 8, 128, 12288, 151936, 40960)
}

pub fn aya_expanse_8b() -> ModelConfig {
    dense("Aya-Expanse-8B", 4096, 32, 32, 8, 128, 14336, 256000, 8192)
}

/// Three sliding-window layers for every full-attention layer.
pub fn command_r7b() -> ModelConfig {
    let m = dense("Command-R7B", 4096, 32, 32, 8, 128, 14336, 256000, 131072);
    interleave(m, 4096, |i| (i + 1) % 4 == 0)
}

pub fn mistral_7b() -> ModelConfig {
    dense("Mistral-7B-v0.3", 4096, 32, 32, 8, 128, 14336, 32768, 32768)
}

pub fn ministral_8b() -> ModelConfig {
    let m = dense("Ministral-8B", 4096, 36, 32, 8, 128, 12288, 131072, 131072);
    interleave(m, 32768, |i| i % 4 == 0)
}

pub fn deepseek_llm_7b() -> ModelConfig {
    dense("DeepSeek-LLM-7B", 4096, 30, 32, 32, 128, 11008, 102400, 4096)
}

pub fn deepseek_distill_llama_8b() -> ModelConfig {
    ModelConfig {
        name: "DeepSeek-R1-Distill-Llama-8B".into(),
        ..llama31_8b()
    }
}

pub fn deepseek_distill_qwen_7b() -> ModelConfig {
    ModelConfig {
        name: "DeepSeek-R1-Distill-Qwen-7B".into(),
        ..qwen25_7b()
    }
}

/// Mixtral-style sparse MoE.
pub fn moe_8x7b() -> ModelConfig {
    ModelConfig {
        moe: Some(MoeConfig {
            num_experts: 8,
            top_k: 2,
            expert_intermediate: 14336,
        }),
        ..dense("Mixtral-8x7B", 4096, 32, 32, 8, 128, 14336, 32000, 32768)
    }
}

pub fn llama31_70b() -> ModelConfig {
    dense("Llama-3.1-70B", 8192, 80, 64, 8, 128, 28672, 128256, 131072)
}

/// The 12-model corpus in profiling order. The first four cover every
/// attention variant.
pub fn corpus_models() -> Vec<ModelConfig> {
    vec![
        command_r7b(),
        ministral_8b(),
        qwen25_7b(),
        llama2_7b(),
        llama3_8b(),
        llama31_8b(),
        qwen3_8b(),
        aya_expanse_8b(),
        mistral_7b(),
        deepseek_llm_7b(),
        deepseek_distill_llama_8b(),
        deepseek_distill_qwen_7b(),
    ]
}

pub const BACKEND_FAMILIES: [&str; 3] = ["flashinfer", "flash-attn", "triton"];

fn kernel_names(family: &str, d: u64, group: u64, phase: Phase) -> Vec<String> {
    match (family, phase) {
        ("flashinfer", Phase::Prefill) => vec![format!(
            "flashinfer::BatchPrefillWithPagedKVCacheKernel<head_dim={d},group={group}>"
        )],
        ("flashinfer", Phase::Decode) => vec![
            format!("flashinfer::BatchDecodeWithPagedKVCacheKernel<head_dim={d},group={group}>"),
            format!("flashinfer::MergeStatesKernel<head_dim={d}>"),
        ],
        ("flash-attn", Phase::Prefill) => vec![format!("flash::flash_fwd_kernel<hdim{d},gqa{group}>")],
        ("flash-attn", Phase::Decode) => vec![
            format!("flash::flash_fwd_splitkv_kernel<hdim{d},gqa{group}>"),
            format!("flash::flash_fwd_splitkv_combine_kernel<hdim{d}>"),
        ],
        (_, Phase::Prefill) => vec![format!("triton_unified_attention_2d<HEAD_SIZE={d},QG={group}>")],
        (_, Phase::Decode) => vec![
            format!("triton_unified_attention_3d<HEAD_SIZE={d},QG={group}>"),
            "triton_reduce_segments".to_string(),
        ],
    }
}

/// A backend whose kernel table covers every attention geometry of `models`.
pub fn backend(family: &str, models: &[ModelConfig]) -> BackendSpec {
    let mut table = BTreeMap::new();
    for m in models {
        let group = m.num_q_heads / m.num_kv_heads;
        for kind in m.attention_kinds() {
            for phase in Phase::BOTH {
                table
                    .entry((geometry_key_for(m, kind), phase))
                    .or_insert_with(|| kernel_names(family, m.head_dim, group, phase));
            }
        }
    }
    let cost_multiplier = match family {
        "flashinfer" => BTreeMap::new(),
        "flash-attn" => kernel_multipliers(&table, "splitkv", 1.1),
        _ => kernel_multipliers(&table, "triton", 1.25),
    };
    BackendSpec {
        name: family.into(),
        kernel_table: table
            .into_iter()
            .map(|((geometry, phase), kernels)| KernelTableEntry {
                geometry,
                phase,
                kernels,
            })
            .collect(),
        cost_multiplier,
    }
}

fn kernel_multipliers(table: &BTreeMap<(String, Phase), Vec<String>>, needle: &str, m: f64) -> BTreeMap<String, f64> {
    table
        .values()
        .flatten()
        .filter(|k| k.contains(needle))
        .map(|k| (k.clone(), m))
        .collect()
}

fn manifest(models: Vec<ModelConfig>, tp: u64, grid: SweepGrid) -> CorpusManifest {
    let backends = BACKEND_FAMILIES.iter().map(|f| backend(f, &models)).collect();
    CorpusManifest {
        schema_version: SCHEMA_VERSION,
        models,
        backends,
        hardware: HardwareSpec::a100(),
        tp_degree: tp,
        grid,
    }
}

/// 12 models x 3 backends, 32K chunk, batch cap 256.
pub fn corpus_manifest() -> CorpusManifest {
    manifest(corpus_models(), 1, SweepGrid::defaults(32768, 256))
}

/// Serving fixture: the dense GQA model alone, 8K chunk.
pub fn serving_manifest() -> CorpusManifest {
    manifest(vec![llama31_8b()], 1, SweepGrid::defaults(8192, 256))
}

/// Fixtures for the taint-coverage protocol.
pub fn coverage_fixtures() -> Vec<(ModelConfig, u64)> {
    vec![(llama31_8b(), 1), (command_r7b(), 1), (moe_8x7b(), 1), (llama31_70b(), 4)]
}

pub fn fixtures_manifest(tp: u64, models: Vec<ModelConfig>) -> CorpusManifest {
    manifest(models, tp, SweepGrid::defaults(8192, 256))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_valid() {
        corpus_manifest().validate().unwrap();
        serving_manifest().validate().unwrap();
        for (m, tp) in coverage_fixtures() {
            fixtures_manifest(tp, vec![m]).validate().unwrap();
        }
    }

    #[test]
    fn interleaved_layer_counts() {
        let c = command_r7b();
        let full = c.layer_attention.iter().filter(|k| **k == AttentionKind::Full).count();
        assert_eq!((full, 32 - full), (8, 24));
        let m = ministral_8b();
        let full = m.layer_attention.iter().filter(|k| **k == AttentionKind::Full).count();
        assert_eq!((full, 36 - full), (9, 27));
    }

    #[test]
    fn window_not_in_kernel_names() {
        let b = backend("flashinfer", &[command_r7b()]);
        let full = b.kernels("q32/kv8/d128/full", Phase::Decode).unwrap();
        let swa = b.kernels("q32/kv8/d128/swa4096", Phase::Decode).unwrap();
        assert_eq!(full, swa);
    }
}
