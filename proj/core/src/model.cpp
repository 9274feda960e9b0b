#include "vft/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "vft/rng.hpp"

namespace vft {

namespace {

// Uniform raws in [-scale, scale], one labeled stream per tensor so layout
// changes elsewhere never shift another tensor's values.
FxpTensor uniform_tensor(uint32_t rows, uint32_t cols, FxpFormat fmt, double scale,
                         const Digest& seed, const std::string& label) {
    FxpTensor t = FxpTensor::zeros(rows, cols, fmt);
    int64_t s = quantize(scale, fmt).raw;
    HashRng rng(Tag::Stream, seed, label);
    for (auto& v : t.raw) v = rng.uniform_signed(s);
    return t;
}

FxpTensor const_tensor(uint32_t rows, uint32_t cols, FxpFormat fmt, double value) {
    FxpTensor t = FxpTensor::zeros(rows, cols, fmt);
    int64_t raw = quantize(value, fmt).raw;
    for (auto& v : t.raw) v = raw;
    return t;
}

struct LnCache {
    FxpTensor xhat;
    std::vector<int64_t> r_raw; // per-row rsqrt(var + eps)
};

FxpTensor layer_norm(const FxpTensor& x, const FxpTensor& g, const FxpTensor& b, FxpValue eps,
                     const TableSet& tables, ErrorBudget* budget, LnCache* cache) {
    const FxpFormat fmt = x.fmt;
    const uint32_t d = x.cols;
    FxpTensor out = FxpTensor::zeros(x.rows, d, fmt);
    FxpTensor xhat = FxpTensor::zeros(x.rows, d, fmt);
    std::vector<int64_t> rs(x.rows);
    const int64_t var_den = static_cast<int64_t>(d) << fmt.frac_bits;
    for (uint32_t i = 0; i < x.rows; ++i) {
        __int128 sum = 0;
        for (uint32_t j = 0; j < d; ++j) sum += x.at(i, j);
        int64_t mu = div_round_half_even(sum, static_cast<int64_t>(d));
        __int128 ss = 0;
        for (uint32_t j = 0; j < d; ++j) {
            __int128 c = static_cast<__int128>(x.at(i, j)) - mu;
            ss += c * c;
        }
        // Sum of squared raws carries scale 2^2q; one combined rounding for
        // the mean and the rescale.
        int64_t var = div_round_half_even(ss, var_den);
        FxpValue r = rsqrt_pos(tables, fxp_add(FxpValue{var, fmt}, eps), budget);
        rs[i] = r.raw;
        for (uint32_t j = 0; j < d; ++j) {
            int64_t c = checked_raw(static_cast<__int128>(x.at(i, j)) - mu, fmt, "ln center");
            FxpValue xh = fxp_mul(FxpValue{c, fmt}, r);
            xhat.at(i, j) = xh.raw;
            out.set(i, j, fxp_add(fxp_mul(FxpValue{g.at(0, j), fmt}, xh), FxpValue{b.at(0, j), fmt}));
        }
        if (budget) budget->add_mul(fmt, 2 + 2 * d); // two divisions + per-coord muls
    }
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->r_raw = std::move(rs);
    }
    return out;
}

FxpTensor layer_norm_backward(const FxpTensor& dy, const FxpTensor& g, const LnCache& cache,
                              ErrorBudget* budget) {
    const FxpFormat fmt = dy.fmt;
    const uint32_t d = dy.cols;
    FxpTensor dx = FxpTensor::zeros(dy.rows, d, fmt);
    for (uint32_t i = 0; i < dy.rows; ++i) {
        FxpValue r{cache.r_raw[i], fmt};
        std::vector<int64_t> dxh(d);
        __int128 s1 = 0, s2 = 0;
        for (uint32_t j = 0; j < d; ++j) {
            FxpValue v = fxp_mul(FxpValue{g.at(0, j), fmt}, dy.value(i, j));
            dxh[j] = v.raw;
            s1 += v.raw;
            s2 += static_cast<__int128>(v.raw) * cache.xhat.at(i, j);
        }
        int64_t m1 = div_round_half_even(s1, static_cast<int64_t>(d));
        int64_t m2 = div_round_half_even(s2, static_cast<int64_t>(d) << fmt.frac_bits);
        for (uint32_t j = 0; j < d; ++j) {
            FxpValue inner{checked_raw(static_cast<__int128>(dxh[j]) - m1, fmt, "ln bwd"), fmt};
            inner = fxp_sub(inner, fxp_mul(FxpValue{cache.xhat.at(i, j), fmt}, FxpValue{m2, fmt}));
            dx.set(i, j, fxp_mul(r, inner));
        }
        if (budget) budget->add_mul(fmt, 2 + 3 * d);
    }
    return dx;
}

FxpTensor col_slice(const FxpTensor& t, uint32_t c0, uint32_t cn) {
    FxpTensor out = FxpTensor::zeros(t.rows, cn, t.fmt);
    for (uint32_t i = 0; i < t.rows; ++i)
        for (uint32_t j = 0; j < cn; ++j) out.at(i, j) = t.at(i, c0 + j);
    return out;
}

void col_assign(FxpTensor& dst, const FxpTensor& src, uint32_t c0) {
    for (uint32_t i = 0; i < src.rows; ++i)
        for (uint32_t j = 0; j < src.cols; ++j) dst.at(i, c0 + j) = src.at(i, j);
}

struct LinearCache {
    FxpTensor xa; // x A^T, reused for the B gradient
};

FxpTensor linear_fwd(const FxpTensor& x, const FxpTensor& w, const LoraAdapter* ad,
                     ErrorBudget* budget, LinearCache* cache) {
    FxpTensor y = matmul_nt(x, w, budget);
    if (ad) {
        FxpTensor xa = matmul_nt(x, ad->A, budget);
        add_inplace(y, matmul_nt(xa, ad->B, budget));
        if (cache) cache->xa = std::move(xa);
    }
    return y;
}

FxpTensor linear_bwd(const FxpTensor& dy, const FxpTensor& x, const FxpTensor& w,
                     const LoraAdapter* ad, const LinearCache* cache, FxpTensor* g_a,
                     FxpTensor* g_b, ErrorBudget* budget) {
    FxpTensor dx = matmul_nn(dy, w, budget);
    if (ad) {
        FxpTensor dy_b = matmul_nn(dy, ad->B, budget);
        add_inplace(dx, matmul_nn(dy_b, ad->A, budget));
        add_inplace(*g_a, matmul_tn(dy_b, x, budget));
        add_inplace(*g_b, matmul_tn(dy, cache->xa, budget));
    }
    return dx;
}

struct BlockCache {
    LnCache ln1, ln2;
    FxpTensor n1, n2;
    FxpTensor q, k, v, o_concat;
    LinearCache ca_q, ca_k, ca_v, ca_o, ca_fc1, ca_fc2;
    std::vector<FxpTensor> p_heads; // post-softmax rows, zero beyond the causal prefix
    FxpTensor h1_clipped, g_act;
    std::vector<uint8_t> clip_mask; // 1 where the gelu input was inside the window
};

struct BlockAdapters {
    const LoraAdapter *q = nullptr, *k = nullptr, *v = nullptr, *o = nullptr;
    const LoraAdapter *fc1 = nullptr, *fc2 = nullptr;
    size_t iq = 0, ik = 0, iv = 0, io = 0, ifc1 = 0, ifc2 = 0;
};

std::vector<BlockAdapters> map_adapters(const ModelState& state) {
    std::vector<BlockAdapters> out(state.spec.n_blocks);
    size_t idx = 0;
    for (uint32_t b = 0; b < state.spec.n_blocks; ++b) {
        if (state.spec.adapt_attention) {
            out[b].q = &state.adapters[idx]; out[b].iq = idx++;
            out[b].k = &state.adapters[idx]; out[b].ik = idx++;
            out[b].v = &state.adapters[idx]; out[b].iv = idx++;
            out[b].o = &state.adapters[idx]; out[b].io = idx++;
        }
        if (state.spec.adapt_mlp) {
            out[b].fc1 = &state.adapters[idx]; out[b].ifc1 = idx++;
            out[b].fc2 = &state.adapters[idx]; out[b].ifc2 = idx++;
        }
    }
    return out;
}

} // namespace

std::vector<std::string> adapter_paths(const ModelSpec& spec) {
    std::vector<std::string> out;
    for (uint32_t b = 0; b < spec.n_blocks; ++b) {
        std::string prefix = "b" + std::to_string(b) + ".";
        if (spec.adapt_attention)
            for (const char* n : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"})
                out.push_back(prefix + n);
        if (spec.adapt_mlp)
            for (const char* n : {"mlp.fc1", "mlp.fc2"}) out.push_back(prefix + n);
    }
    return out;
}

std::vector<std::string> ModelState::adapter_paths() const { return vft::adapter_paths(spec); }

Digest FrozenBackbone::digest() const {
    Hasher h(Tag::Backbone);
    h.update(tensor_digest("embed", embed));
    h.update(tensor_digest("pos", pos));
    for (size_t b = 0; b < blocks.size(); ++b) {
        std::string prefix = "b" + std::to_string(b) + ".";
        const BlockWeights& w = blocks[b];
        h.update(tensor_digest(prefix + "wq", w.wq));
        h.update(tensor_digest(prefix + "wk", w.wk));
        h.update(tensor_digest(prefix + "wv", w.wv));
        h.update(tensor_digest(prefix + "wo", w.wo));
        h.update(tensor_digest(prefix + "w1", w.w1));
        h.update(tensor_digest(prefix + "w2", w.w2));
        h.update(tensor_digest(prefix + "ln1_g", w.ln1_g));
        h.update(tensor_digest(prefix + "ln1_b", w.ln1_b));
        h.update(tensor_digest(prefix + "ln2_g", w.ln2_g));
        h.update(tensor_digest(prefix + "ln2_b", w.ln2_b));
    }
    h.update(tensor_digest("w_out", w_out));
    return h.finish();
}

ModelState init_model(const ModelSpec& spec, FxpFormat fmt, const Digest& seed) {
    const uint32_t d = spec.d_model;
    const uint32_t ff = spec.d_ff();
    const double w_scale = 1.0 / std::sqrt(static_cast<double>(d));
    const double ff_scale = 1.0 / std::sqrt(static_cast<double>(ff));

    ModelState s;
    s.spec = spec;
    s.fmt = fmt;
    s.backbone.embed = uniform_tensor(spec.vocab_size, d, fmt, 0.5, seed, "backbone/embed");
    s.backbone.pos = uniform_tensor(spec.seq_len, d, fmt, 0.5, seed, "backbone/pos");
    for (uint32_t b = 0; b < spec.n_blocks; ++b) {
        std::string prefix = "backbone/b" + std::to_string(b) + "/";
        BlockWeights w;
        w.wq = uniform_tensor(d, d, fmt, w_scale, seed, prefix + "wq");
        w.wk = uniform_tensor(d, d, fmt, w_scale, seed, prefix + "wk");
        w.wv = uniform_tensor(d, d, fmt, w_scale, seed, prefix + "wv");
        w.wo = uniform_tensor(d, d, fmt, w_scale, seed, prefix + "wo");
        w.w1 = uniform_tensor(ff, d, fmt, w_scale, seed, prefix + "w1");
        w.w2 = uniform_tensor(d, ff, fmt, ff_scale, seed, prefix + "w2");
        w.ln1_g = const_tensor(1, d, fmt, 1.0);
        w.ln1_b = FxpTensor::zeros(1, d, fmt);
        w.ln2_g = const_tensor(1, d, fmt, 1.0);
        w.ln2_b = FxpTensor::zeros(1, d, fmt);
        s.backbone.blocks.push_back(std::move(w));
    }
    s.backbone.w_out = uniform_tensor(spec.vocab_size, d, fmt, w_scale, seed, "backbone/w_out");

    for (const std::string& path : adapter_paths(spec)) {
        uint32_t d_in = d, d_out = d;
        if (path.find("mlp.fc1") != std::string::npos) { d_in = d; d_out = ff; }
        if (path.find("mlp.fc2") != std::string::npos) { d_in = ff; d_out = d; }
        LoraAdapter a;
        a.path = path;
        a.A = uniform_tensor(spec.lora_rank, d_in, fmt, 1.0 / std::sqrt(static_cast<double>(d_in)),
                             seed, "adapter/" + path + "/A");
        a.B = FxpTensor::zeros(d_out, spec.lora_rank, fmt);
        s.adapters.push_back(std::move(a));
    }
    return s;
}

TokenBatch make_token_batch(const Dataset& ds, std::span<const uint64_t> indices,
                            const ModelSpec& spec) {
    TokenBatch b;
    b.seq_len = spec.seq_len;
    for (uint64_t idx : indices) {
        if (idx >= ds.leaves.size())
            throw IndexOutOfRange("batch index " + std::to_string(idx) + " outside dataset");
        const Bytes& payload = ds.leaves[idx].payload;
        std::vector<uint8_t> seq(spec.seq_len + 1, 0);
        uint32_t len = static_cast<uint32_t>(std::min<size_t>(payload.size(), spec.seq_len + 1));
        for (uint32_t i = 0; i < len; ++i)
            seq[i] = static_cast<uint8_t>(payload[i] % spec.vocab_size);
        b.seqs.push_back(std::move(seq));
        b.lens.push_back(len);
    }
    return b;
}

SoftmaxRow softmax_approx(std::span<const int64_t> logits_raw, const TableSet& tables,
                          ErrorBudget* budget) {
    if (logits_raw.empty()) throw SchemaError("softmax: empty row");
    const FxpFormat fmt = tables.fmt;
    int64_t maxv = *std::max_element(logits_raw.begin(), logits_raw.end());
    std::vector<int64_t> exps(logits_raw.size());
    __int128 sum = 0;
    for (size_t j = 0; j < logits_raw.size(); ++j) {
        int64_t z = logits_raw[j] - maxv; // exact, <= 0
        if (z < tables.exp.lo_raw) z = tables.exp.lo_raw;
        exps[j] = tables.exp.lookup_raw(z);
        sum += exps[j];
    }
    SoftmaxRow out;
    out.p_raw.resize(logits_raw.size());
    __int128 psum = 0;
    const int64_t den = checked_raw(sum, FxpFormat::make(32, 30), "softmax sum"); // fits: n * 2^q
    for (size_t j = 0; j < logits_raw.size(); ++j) {
        out.p_raw[j] = div_round_half_even(static_cast<__int128>(exps[j]) << fmt.frac_bits, den);
        psum += out.p_raw[j];
    }
    out.rowsum_dev = std::abs(std::ldexp(static_cast<double>(psum), -fmt.frac_bits) - 1.0);
    if (budget) {
        double per_row = static_cast<double>(logits_raw.size()) *
                         (tables.exp.declared_bound + fmt.ulp());
        budget->add_table(per_row, 1);
    }
    return out;
}

namespace {

struct LossRow {
    uint32_t pos;
    uint8_t target;
    std::vector<int64_t> p_raw;
};

struct SeqForward {
    FxpTensor x0;
    std::vector<BlockCache> blocks;
    std::vector<FxpTensor> block_inputs; // x entering each block
    FxpTensor x_final;
    FxpTensor logits;
    std::vector<LossRow> loss_rows;
};

struct ForwardAccum {
    __int128 loss_sum = 0;
    uint64_t n_pos = 0;
    double rowsum_dev_max = 0.0;
};

SeqForward forward_sequence(const ModelState& state, const TableSet& tables,
                            const std::vector<BlockAdapters>& ads,
                            const std::vector<uint8_t>& seq, uint32_t len, bool keep_caches,
                            ForwardAccum& acc, ErrorBudget* budget) {
    const ModelSpec& spec = state.spec;
    const FxpFormat fmt = state.fmt;
    const uint32_t L = spec.seq_len;
    const uint32_t d = spec.d_model;
    const uint32_t dh = spec.head_dim;
    const FxpValue eps_ln = quantize(0.0, fmt); // placeholder, replaced below
    (void)eps_ln;

    SeqForward fw;
    fw.x0 = FxpTensor::zeros(L, d, fmt);
    for (uint32_t i = 0; i < L; ++i) {
        uint32_t tok = seq[i] % spec.vocab_size;
        for (uint32_t j = 0; j < d; ++j)
            fw.x0.at(i, j) = checked_raw(
                static_cast<__int128>(state.backbone.embed.at(tok, j)) + state.backbone.pos.at(i, j),
                fmt, "embed add");
    }

    FxpValue sc = quantize(1.0 / std::sqrt(static_cast<double>(dh)), fmt);
    FxpValue ln_eps = quantize(0.0009765625, fmt); // fallback; real value injected by caller
    (void)ln_eps;

    FxpTensor x = fw.x0;
    fw.blocks.resize(spec.n_blocks);
    for (uint32_t b = 0; b < spec.n_blocks; ++b) {
        const BlockWeights& w = state.backbone.blocks[b];
        BlockCache& cache = fw.blocks[b];
        fw.block_inputs.push_back(x);

        cache.n1 = layer_norm(x, w.ln1_g, w.ln1_b, tables.ln_eps_value, tables, budget,
                              keep_caches ? &cache.ln1 : nullptr);
        cache.q = linear_fwd(cache.n1, w.wq, ads[b].q, budget, keep_caches ? &cache.ca_q : nullptr);
        cache.k = linear_fwd(cache.n1, w.wk, ads[b].k, budget, keep_caches ? &cache.ca_k : nullptr);
        cache.v = linear_fwd(cache.n1, w.wv, ads[b].v, budget, keep_caches ? &cache.ca_v : nullptr);

        cache.o_concat = FxpTensor::zeros(L, d, fmt);
        cache.p_heads.resize(spec.n_heads);
        for (uint32_t h = 0; h < spec.n_heads; ++h) {
            uint32_t c0 = h * dh;
            FxpTensor qh = col_slice(cache.q, c0, dh);
            FxpTensor kh = col_slice(cache.k, c0, dh);
            FxpTensor vh = col_slice(cache.v, c0, dh);
            FxpTensor s = scale(matmul_nt(qh, kh, budget), sc, budget);
            FxpTensor p = FxpTensor::zeros(L, L, fmt);
            for (uint32_t i = 0; i < L; ++i) {
                std::span<const int64_t> row(s.raw.data() + static_cast<size_t>(i) * L, i + 1);
                SoftmaxRow sm = softmax_approx(row, tables, budget);
                acc.rowsum_dev_max = std::max(acc.rowsum_dev_max, sm.rowsum_dev);
                for (uint32_t j = 0; j <= i; ++j) p.at(i, j) = sm.p_raw[j];
            }
            FxpTensor oh = matmul_nn(p, vh, budget);
            col_assign(cache.o_concat, oh, c0);
            if (keep_caches) cache.p_heads[h] = std::move(p);
        }
        FxpTensor attn = linear_fwd(cache.o_concat, w.wo, ads[b].o, budget,
                                    keep_caches ? &cache.ca_o : nullptr);
        FxpTensor x1 = add(x, attn);

        cache.n2 = layer_norm(x1, w.ln2_g, w.ln2_b, tables.ln_eps_value, tables, budget,
                              keep_caches ? &cache.ln2 : nullptr);
        FxpTensor h1 = linear_fwd(cache.n2, w.w1, ads[b].fc1, budget,
                                  keep_caches ? &cache.ca_fc1 : nullptr);
        cache.h1_clipped = h1;
        cache.clip_mask.assign(h1.size(), 1);
        for (size_t i = 0; i < h1.raw.size(); ++i) {
            int64_t v = h1.raw[i];
            if (v < tables.gelu.lo_raw) { cache.h1_clipped.raw[i] = tables.gelu.lo_raw; cache.clip_mask[i] = 0; }
            else if (v > tables.gelu.hi_raw) { cache.h1_clipped.raw[i] = tables.gelu.hi_raw; cache.clip_mask[i] = 0; }
        }
        cache.g_act = cache.h1_clipped;
        for (size_t i = 0; i < cache.g_act.raw.size(); ++i)
            cache.g_act.raw[i] = tables.gelu.lookup_raw(cache.h1_clipped.raw[i]);
        if (budget) budget->add_table(tables.gelu.declared_bound, cache.g_act.size());
        FxpTensor h2 = linear_fwd(cache.g_act, w.w2, ads[b].fc2, budget,
                                  keep_caches ? &cache.ca_fc2 : nullptr);
        x = add(x1, h2);
        if (!keep_caches) {
            cache.p_heads.clear();
        }
        fw.blocks[b].n1 = keep_caches ? std::move(fw.blocks[b].n1) : FxpTensor{};
    }
    fw.x_final = x;
    fw.logits = matmul_nt(x, state.backbone.w_out, budget);

    uint32_t max_pos = std::min(L, len > 0 ? len - 1 : 0);
    for (uint32_t i = 0; i < max_pos; ++i) {
        std::span<const int64_t> row(fw.logits.raw.data() + static_cast<size_t>(i) * spec.vocab_size,
                                     spec.vocab_size);
        SoftmaxRow sm = softmax_approx(row, tables, budget);
        acc.rowsum_dev_max = std::max(acc.rowsum_dev_max, sm.rowsum_dev);
        uint8_t target = static_cast<uint8_t>(seq[i + 1] % spec.vocab_size);
        int64_t py = std::max<int64_t>(sm.p_raw[target], 1);
        FxpValue l = log_pos(tables, FxpValue{py, fmt}, budget);
        acc.loss_sum -= l.raw; // loss is -log p
        acc.n_pos += 1;
        LossRow lr;
        lr.pos = i;
        lr.target = target;
        if (keep_caches) lr.p_raw = std::move(sm.p_raw);
        fw.loss_rows.push_back(std::move(lr));
    }
    return fw;
}

} // namespace

FxpValue loss_only(const ModelState& state, const TableSet& tables, const TokenBatch& batch,
                   ErrorBudget* budget) {
    auto ads = map_adapters(state);
    ForwardAccum acc;
    for (size_t s = 0; s < batch.seqs.size(); ++s)
        forward_sequence(state, tables, ads, batch.seqs[s], batch.lens[s], false, acc, budget);
    if (acc.n_pos == 0) throw EmptyDataset("loss: no predicted positions in batch");
    int64_t loss = div_round_half_even(acc.loss_sum, static_cast<int64_t>(acc.n_pos));
    if (budget) budget->add_mul(state.fmt, 1);
    return FxpValue{checked_raw(loss, state.fmt, "loss"), state.fmt};
}

LossGrads loss_and_grads(const ModelState& state, const TableSet& tables, const TokenBatch& batch,
                         ErrorBudget* budget) {
    const ModelSpec& spec = state.spec;
    const FxpFormat fmt = state.fmt;
    const uint32_t L = spec.seq_len;
    const uint32_t d = spec.d_model;
    const uint32_t dh = spec.head_dim;
    auto ads = map_adapters(state);

    // Total predicted positions are known from lengths alone, so gradients
    // can be averaged on the fly, one sequence at a time.
    uint64_t n_pos_total = 0;
    for (size_t s = 0; s < batch.seqs.size(); ++s) {
        uint32_t len = batch.lens[s];
        n_pos_total += std::min(L, len > 0 ? len - 1 : 0);
    }
    if (n_pos_total == 0) throw EmptyDataset("loss: no predicted positions in batch");

    LossGrads out;
    out.grad_A.reserve(state.adapters.size());
    out.grad_B.reserve(state.adapters.size());
    for (const auto& a : state.adapters) {
        out.grad_A.push_back(FxpTensor::zeros(a.A.rows, a.A.cols, fmt));
        out.grad_B.push_back(FxpTensor::zeros(a.B.rows, a.B.cols, fmt));
    }

    std::vector<Hasher> act_hashers;
    act_hashers.reserve(spec.n_blocks + 1);
    for (uint32_t b = 0; b <= spec.n_blocks; ++b) act_hashers.emplace_back(Tag::Activation);

    ForwardAccum acc;
    FxpValue sc = quantize(1.0 / std::sqrt(static_cast<double>(dh)), fmt);

    for (size_t s = 0; s < batch.seqs.size(); ++s) {
        SeqForward fw = forward_sequence(state, tables, ads, batch.seqs[s], batch.lens[s], true,
                                         acc, budget);
        for (uint32_t b = 0; b < spec.n_blocks; ++b) {
            // Block output is the input of the next block, or x_final.
            const FxpTensor& bo = (b + 1 < spec.n_blocks) ? fw.block_inputs[b + 1] : fw.x_final;
            act_hashers[b].update(tensor_digest("act", bo));
        }
        act_hashers[spec.n_blocks].update(tensor_digest("logits", fw.logits));

        // dZ: (p - onehot) / n_pos on every predicted position.
        FxpTensor dz = FxpTensor::zeros(L, spec.vocab_size, fmt);
        const int64_t one_raw = int64_t(1) << fmt.frac_bits;
        for (const LossRow& lr : fw.loss_rows) {
            for (uint32_t vtok = 0; vtok < spec.vocab_size; ++vtok) {
                __int128 delta = lr.p_raw[vtok];
                if (vtok == lr.target) delta -= one_raw;
                dz.at(lr.pos, vtok) =
                    div_round_half_even(delta, static_cast<int64_t>(n_pos_total));
            }
            if (budget) budget->add_mul(fmt, spec.vocab_size);
        }

        FxpTensor dx = matmul_nn(dz, state.backbone.w_out, budget); // L x d

        for (int bi = static_cast<int>(spec.n_blocks) - 1; bi >= 0; --bi) {
            const BlockWeights& w = state.backbone.blocks[bi];
            BlockCache& cache = fw.blocks[bi];
            const BlockAdapters& ba = ads[bi];

            // MLP path: x2 = x1 + fc2(gelu(clip(fc1(n2))))
            FxpTensor dg = linear_bwd(dx, cache.g_act, w.w2, ba.fc2,
                                      ba.fc2 ? &cache.ca_fc2 : nullptr,
                                      ba.fc2 ? &out.grad_A[ba.ifc2] : nullptr,
                                      ba.fc2 ? &out.grad_B[ba.ifc2] : nullptr, budget);
            FxpTensor dh1 = FxpTensor::zeros(L, spec.d_ff(), fmt);
            for (size_t i = 0; i < dg.raw.size(); ++i) {
                if (!cache.clip_mask[i]) continue; // clip saturates: zero slope outside
                int64_t gg = tables.gelu_grad.lookup_raw(cache.h1_clipped.raw[i]);
                dh1.raw[i] = fxp_mul(FxpValue{dg.raw[i], fmt}, FxpValue{gg, fmt}).raw;
            }
            if (budget) {
                budget->add_table(tables.gelu_grad.declared_bound, dg.size());
                budget->add_mul(fmt, dg.size());
            }
            FxpTensor dn2 = linear_bwd(dh1, cache.n2, w.w1, ba.fc1,
                                       ba.fc1 ? &cache.ca_fc1 : nullptr,
                                       ba.fc1 ? &out.grad_A[ba.ifc1] : nullptr,
                                       ba.fc1 ? &out.grad_B[ba.ifc1] : nullptr, budget);
            FxpTensor dx1 = add(dx, layer_norm_backward(dn2, w.ln2_g, cache.ln2, budget));

            // Attention path: x1 = x0 + wo(attn(n1))
            FxpTensor dattn = dx1;
            FxpTensor do_concat = linear_bwd(dattn, cache.o_concat, w.wo, ba.o,
                                             ba.o ? &cache.ca_o : nullptr,
                                             ba.o ? &out.grad_A[ba.io] : nullptr,
                                             ba.o ? &out.grad_B[ba.io] : nullptr, budget);
            FxpTensor dq = FxpTensor::zeros(L, d, fmt);
            FxpTensor dk = FxpTensor::zeros(L, d, fmt);
            FxpTensor dv = FxpTensor::zeros(L, d, fmt);
            for (uint32_t h = 0; h < spec.n_heads; ++h) {
                uint32_t c0 = h * dh;
                FxpTensor do_h = col_slice(do_concat, c0, dh);
                FxpTensor vh = col_slice(cache.v, c0, dh);
                const FxpTensor& p = cache.p_heads[h];
                FxpTensor dp = matmul_nt(do_h, vh, budget);     // L x L
                FxpTensor dvh = matmul_tn(p, do_h, budget);     // L x dh
                FxpTensor ds = FxpTensor::zeros(L, L, fmt);
                for (uint32_t i = 0; i < L; ++i) {
                    __int128 dot = 0;
                    for (uint32_t j = 0; j <= i; ++j)
                        dot += static_cast<__int128>(dp.at(i, j)) * p.at(i, j);
                    int64_t dots = shift_right_round_half_even(dot, fmt.frac_bits);
                    for (uint32_t j = 0; j <= i; ++j) {
                        FxpValue inner{checked_raw(static_cast<__int128>(dp.at(i, j)) - dots, fmt,
                                                   "softmax bwd"),
                                       fmt};
                        ds.at(i, j) = fxp_mul(FxpValue{p.at(i, j), fmt}, inner).raw;
                    }
                    if (budget) budget->add_mul(fmt, i + 2);
                }
                ds = scale(ds, sc, budget);
                FxpTensor qh = col_slice(cache.q, c0, dh);
                FxpTensor kh = col_slice(cache.k, c0, dh);
                col_assign(dq, matmul_nn(ds, kh, budget), c0);
                col_assign(dk, matmul_tn(ds, qh, budget), c0);
                col_assign(dv, dvh, c0);
            }
            FxpTensor dn1 = linear_bwd(dq, cache.n1, w.wq, ba.q, ba.q ? &cache.ca_q : nullptr,
                                       ba.q ? &out.grad_A[ba.iq] : nullptr,
                                       ba.q ? &out.grad_B[ba.iq] : nullptr, budget);
            add_inplace(dn1, linear_bwd(dk, cache.n1, w.wk, ba.k, ba.k ? &cache.ca_k : nullptr,
                                        ba.k ? &out.grad_A[ba.ik] : nullptr,
                                        ba.k ? &out.grad_B[ba.ik] : nullptr, budget));
            add_inplace(dn1, linear_bwd(dv, cache.n1, w.wv, ba.v, ba.v ? &cache.ca_v : nullptr,
                                        ba.v ? &out.grad_A[ba.iv] : nullptr,
                                        ba.v ? &out.grad_B[ba.iv] : nullptr, budget));
            dx = add(dx1, layer_norm_backward(dn1, w.ln1_g, cache.ln1, budget));
        }
    }

    int64_t loss = div_round_half_even(acc.loss_sum, static_cast<int64_t>(acc.n_pos));
    if (budget) budget->add_mul(fmt, 1);
    out.loss = FxpValue{checked_raw(loss, fmt, "loss"), fmt};
    out.rowsum_dev_max = acc.rowsum_dev_max;
    out.predicted_positions = acc.n_pos;
    for (auto& h : act_hashers) out.activation_digests.push_back(h.finish());
    return out;
}

Digest grads_digest(const LossGrads& lg) {
    Hasher h(Tag::Grads);
    h.update_u64(lg.grad_A.size());
    for (size_t i = 0; i < lg.grad_A.size(); ++i) {
        h.update(tensor_digest("dA", lg.grad_A[i]));
        h.update(tensor_digest("dB", lg.grad_B[i]));
    }
    return h.finish();
}

// --- model file io ---

static constexpr char kModelMagic[4] = {'V', 'F', 'T', 'M'};
static constexpr uint16_t kModelVersion = 1;

static void write_tensor(ByteWriter& w, const std::string& name, const FxpTensor& t) {
    w.str(name);
    w.u32(t.rows);
    w.u32(t.cols);
    w.u8(t.fmt.int_bits);
    w.u8(t.fmt.frac_bits);
    for (int64_t v : t.raw) w.i64(v);
}

static FxpTensor read_tensor(ByteReader& r, const std::string& expect_name) {
    std::string name = r.str();
    if (name != expect_name)
        throw IoError("model file: expected tensor '" + expect_name + "', found '" + name + "'");
    FxpTensor t;
    t.rows = r.u32();
    t.cols = r.u32();
    t.fmt = FxpFormat::make(r.u8(), r.u8());
    t.raw.resize(t.size());
    for (auto& v : t.raw) v = r.i64();
    return t;
}

Bytes serialize_model(const ModelState& state) {
    ByteWriter w;
    w.raw(kModelMagic, 4);
    w.u16(kModelVersion);
    w.u32(state.spec.d_model);
    w.u32(state.spec.n_heads);
    w.u32(state.spec.head_dim);
    w.u32(state.spec.seq_len);
    w.u32(state.spec.vocab_size);
    w.u32(state.spec.n_blocks);
    w.u32(state.spec.lora_rank);
    w.u8(state.spec.adapt_attention ? 1 : 0);
    w.u8(state.spec.adapt_mlp ? 1 : 0);
    w.u8(state.fmt.int_bits);
    w.u8(state.fmt.frac_bits);
    write_tensor(w, "embed", state.backbone.embed);
    write_tensor(w, "pos", state.backbone.pos);
    for (size_t b = 0; b < state.backbone.blocks.size(); ++b) {
        std::string prefix = "b" + std::to_string(b) + ".";
        const BlockWeights& bw = state.backbone.blocks[b];
        write_tensor(w, prefix + "wq", bw.wq);
        write_tensor(w, prefix + "wk", bw.wk);
        write_tensor(w, prefix + "wv", bw.wv);
        write_tensor(w, prefix + "wo", bw.wo);
        write_tensor(w, prefix + "w1", bw.w1);
        write_tensor(w, prefix + "w2", bw.w2);
        write_tensor(w, prefix + "ln1_g", bw.ln1_g);
        write_tensor(w, prefix + "ln1_b", bw.ln1_b);
        write_tensor(w, prefix + "ln2_g", bw.ln2_g);
        write_tensor(w, prefix + "ln2_b", bw.ln2_b);
    }
    write_tensor(w, "w_out", state.backbone.w_out);
    for (const auto& a : state.adapters) {
        write_tensor(w, a.path + "/A", a.A);
        write_tensor(w, a.path + "/B", a.B);
    }
    return w.take();
}

ModelState parse_model(std::span<const uint8_t> data) {
    ByteReader r(data);
    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, kModelMagic, 4) != 0) throw IoError("model file: bad magic");
    if (r.u16() != kModelVersion) throw IoError("model file: unsupported version");
    ModelState s;
    s.spec.d_model = r.u32();
    s.spec.n_heads = r.u32();
    s.spec.head_dim = r.u32();
    s.spec.seq_len = r.u32();
    s.spec.vocab_size = r.u32();
    s.spec.n_blocks = r.u32();
    s.spec.lora_rank = r.u32();
    s.spec.adapt_attention = r.u8() != 0;
    s.spec.adapt_mlp = r.u8() != 0;
    s.fmt = FxpFormat::make(r.u8(), r.u8());
    s.backbone.embed = read_tensor(r, "embed");
    s.backbone.pos = read_tensor(r, "pos");
    for (uint32_t b = 0; b < s.spec.n_blocks; ++b) {
        std::string prefix = "b" + std::to_string(b) + ".";
        BlockWeights bw;
        bw.wq = read_tensor(r, prefix + "wq");
        bw.wk = read_tensor(r, prefix + "wk");
        bw.wv = read_tensor(r, prefix + "wv");
        bw.wo = read_tensor(r, prefix + "wo");
        bw.w1 = read_tensor(r, prefix + "w1");
        bw.w2 = read_tensor(r, prefix + "w2");
        bw.ln1_g = read_tensor(r, prefix + "ln1_g");
        bw.ln1_b = read_tensor(r, prefix + "ln1_b");
        bw.ln2_g = read_tensor(r, prefix + "ln2_g");
        bw.ln2_b = read_tensor(r, prefix + "ln2_b");
        s.backbone.blocks.push_back(std::move(bw));
    }
    s.backbone.w_out = read_tensor(r, "w_out");
    for (const std::string& path : adapter_paths(s.spec)) {
        LoraAdapter a;
        a.path = path;
        a.A = read_tensor(r, path + "/A");
        a.B = read_tensor(r, path + "/B");
        s.adapters.push_back(std::move(a));
    }
    r.expect_done("model file");
    return s;
}

void write_model_file(const ModelState& state, const std::string& path) {
    Bytes data = serialize_model(state);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write model: " + path);
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError("short write: " + path);
}

ModelState read_model_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open model: " + path);
    Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_model(data);
}

} // namespace vft
