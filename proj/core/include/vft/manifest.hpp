#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vft/fxp.hpp"
#include "vft/hashing.hpp"

namespace vft {

// Model shape. d_ff is fixed at 2*d_model; the desk-scale envelope below is
// enforced at validation so every committed run stays exactly replayable.
struct ModelSpec {
    uint32_t d_model = 32;
    uint32_t n_heads = 2;
    uint32_t head_dim = 16;
    uint32_t seq_len = 16;
    uint32_t vocab_size = 256;
    uint32_t n_blocks = 1;
    uint32_t lora_rank = 4;
    bool adapt_attention = true;
    bool adapt_mlp = false;

    uint32_t d_ff() const { return 2 * d_model; }
    bool operator==(const ModelSpec&) const = default;
};

struct ScheduleSpec {
    std::string id = "cosine_warmup";
    double base_rate = 0.01;
    double warmup_frac = 0.03;
    bool operator==(const ScheduleSpec&) const = default;
};

struct OptimizerSpec {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double epsilon = 1e-8;
    double weight_decay = 0.05;
    double clip_norm = 1.0;
    ScheduleSpec schedule;
    bool operator==(const OptimizerSpec&) const = default;
};

struct SamplerSpec {
    std::string mode = "public"; // "public" | "private"
    std::string seed_hex;        // 32-byte sampling seed s
    uint32_t batch_size = 4;
    bool with_replacement = false;
    std::string shuffle_policy = "none";
    bool operator==(const SamplerSpec&) const = default;
};

struct BinSpec {
    std::string label;
    uint64_t max_items = 0;
    uint64_t max_tokens = 0;
    bool operator==(const BinSpec&) const = default;
};

struct BudgetSpec {
    double delta_sm = 3e-3;       // per-row softmax L1 allowance
    double table_bound = 1e-4;    // per-lookup allowance for gelu/rsqrt/recip/log/cos
    double clip_lo = -8.0;        // logit/activation clip window
    double clip_hi = 8.0;
    double ln_epsilon = 0.0009765625; // 2^-10, variance floor for layer norm
    std::vector<double> delta_sm_per_block; // optional per-block overrides
    bool operator==(const BudgetSpec&) const = default;
};

struct PolicyManifest {
    uint32_t version = 1;
    FxpFormat fxp;
    ModelSpec model;
    OptimizerSpec optimizer;
    SamplerSpec sampler;
    std::vector<BinSpec> bins;
    BudgetSpec budgets;
    std::string init_seed_hex;   // 32-byte model init seed
    std::string quota_counting = "per-tagged-bin";

    void validate() const; // SchemaError naming the offending field or bin
    Digest sampling_seed() const;
    Digest init_seed() const;
    bool operator==(const PolicyManifest&) const = default;
};

// Canonical encoding: fixed field order, length-prefixed strings, LE
// integers, and every real quantized to its raw at the manifest's format.
// Two manifests encode identically exactly when they define the same
// protocol; JSON key order never matters.
Bytes canonical_encode(const PolicyManifest& m);
Digest hash_manifest(const PolicyManifest& m);

PolicyManifest manifest_from_json(const std::string& text);
PolicyManifest load_manifest(const std::string& path);
std::string manifest_to_json(const PolicyManifest& m);
void save_manifest(const PolicyManifest& m, const std::string& path);

// Paper-table quota bins plus tiny-model defaults; the starting point the
// CLI writes for new workspaces.
PolicyManifest default_manifest();

} // namespace vft
