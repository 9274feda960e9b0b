#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vft/commit.hpp"
#include "vft/lut.hpp"
#include "vft/manifest.hpp"
#include "vft/tensor.hpp"

namespace vft {

// Low-rank adapter around a frozen weight W (d_out x d_in):
//   y = x W^T + (x A^T) B^T
// The low-rank path is always evaluated in two steps; W + BA is never
// materialized. Only A and B receive gradients.
struct LoraAdapter {
    std::string path; // e.g. "b0.attn.wq"
    FxpTensor A;      // r x d_in
    FxpTensor B;      // d_out x r
};

struct BlockWeights {
    FxpTensor wq, wk, wv, wo; // d x d
    FxpTensor w1;             // ff x d
    FxpTensor w2;             // d x ff
    FxpTensor ln1_g, ln1_b;   // 1 x d
    FxpTensor ln2_g, ln2_b;   // 1 x d
};

// Everything outside the adapters stays frozen for the whole run: embeddings,
// positions, block weights, layer-norm affines, output projection.
struct FrozenBackbone {
    FxpTensor embed; // vocab x d
    FxpTensor pos;   // L x d
    std::vector<BlockWeights> blocks;
    FxpTensor w_out; // vocab x d

    Digest digest() const;
};

struct ModelState {
    ModelSpec spec;
    FxpFormat fmt;
    FrozenBackbone backbone;
    std::vector<LoraAdapter> adapters; // canonical order, see adapter_paths()

    std::vector<std::string> adapter_paths() const;
};

std::vector<std::string> adapter_paths(const ModelSpec& spec);

// Deterministic init from a 32-byte seed: uniform backbone at 1/sqrt(fan_in)
// scale, uniform A, zero B (so the adapted model starts identical to the
// frozen one).
ModelState init_model(const ModelSpec& spec, FxpFormat fmt, const Digest& seed);

// One training batch: token rows plus the number of real (unpadded) bytes.
struct TokenBatch {
    uint32_t seq_len = 0;                    // L
    std::vector<std::vector<uint8_t>> seqs;  // each L+1 tokens (inputs + shifted targets)
    std::vector<uint32_t> lens;              // real token count per row, <= L+1
};

TokenBatch make_token_batch(const Dataset& ds, std::span<const uint64_t> indices,
                            const ModelSpec& spec);

struct SoftmaxRow {
    std::vector<int64_t> p_raw;
    double rowsum_dev = 0.0; // |sum(p) - 1| after integer normalization
};

// Max-subtract (exact), clip into the exp table window, exp lookups, then
// integer normalization with round-half-even. The returned row sums to one
// within len * 2^-q.
SoftmaxRow softmax_approx(std::span<const int64_t> logits_raw, const TableSet& tables,
                          ErrorBudget* budget = nullptr);

struct LossGrads {
    FxpValue loss;
    std::vector<FxpTensor> grad_A; // per adapter, canonical order
    std::vector<FxpTensor> grad_B;
    std::vector<Digest> activation_digests; // one per block, then logits
    double rowsum_dev_max = 0.0;
    uint64_t predicted_positions = 0;
};

LossGrads loss_and_grads(const ModelState& state, const TableSet& tables,
                         const TokenBatch& batch, ErrorBudget* budget = nullptr);
FxpValue loss_only(const ModelState& state, const TableSet& tables, const TokenBatch& batch,
                   ErrorBudget* budget = nullptr);

Digest grads_digest(const LossGrads& lg);

// VFTM model file: spec header then tensors in canonical order, each as
// (name, shape, format, little-endian raws).
Bytes serialize_model(const ModelState& state);
ModelState parse_model(std::span<const uint8_t> data);
void write_model_file(const ModelState& state, const std::string& path);
ModelState read_model_file(const std::string& path);

} // namespace vft
