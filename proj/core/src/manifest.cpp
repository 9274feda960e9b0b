#include "vft/manifest.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace vft {

using nlohmann::json;

static Digest seed_from_hex_field(const std::string& hex, const char* field) {
    Bytes b = from_hex(hex);
    if (b.size() != 32) throw SchemaError(std::string(field) + " must be 32 hex-encoded bytes");
    Digest d{};
    std::copy(b.begin(), b.end(), d.begin());
    return d;
}

Digest PolicyManifest::sampling_seed() const {
    return seed_from_hex_field(sampler.seed_hex, "sampler.seed");
}

Digest PolicyManifest::init_seed() const {
    return seed_from_hex_field(init_seed_hex, "init_seed");
}

void PolicyManifest::validate() const {
    fxp.validate();
    if (model.d_model == 0 || model.d_model > 64) throw SchemaError("model.d_model out of desk scale (1..64)");
    if (model.n_blocks < 1 || model.n_blocks > 2) throw SchemaError("model.n_blocks out of desk scale (1..2)");
    if (model.seq_len < 2 || model.seq_len > 32) throw SchemaError("model.seq_len out of desk scale (2..32)");
    if (model.vocab_size < 2 || model.vocab_size > 256) throw SchemaError("model.vocab_size out of desk scale (2..256)");
    if (model.n_heads == 0 || model.head_dim == 0 || model.n_heads * model.head_dim != model.d_model)
        throw SchemaError("model: n_heads*head_dim must equal d_model");
    if (model.lora_rank == 0 || model.lora_rank > model.d_model)
        throw SchemaError("model.lora_rank must be in 1..d_model");
    if (!model.adapt_attention && !model.adapt_mlp)
        throw SchemaError("model: at least one adapter placement required");
    if (optimizer.schedule.id != "cosine_warmup")
        throw SchemaError("optimizer.schedule.id unknown: " + optimizer.schedule.id);
    if (optimizer.schedule.base_rate <= 0) throw SchemaError("optimizer.schedule.base_rate must be positive");
    if (optimizer.schedule.warmup_frac < 0 || optimizer.schedule.warmup_frac >= 1)
        throw SchemaError("optimizer.schedule.warmup_frac must be in [0,1)");
    if (sampler.mode != "public" && sampler.mode != "private")
        throw SchemaError("sampler.mode must be public or private");
    if (sampler.batch_size == 0) throw SchemaError("sampler.batch_size must be positive");
    sampling_seed();
    init_seed();
    if (bins.empty()) throw SchemaError("bins: at least one policy bin required");
    std::vector<std::string> labels;
    for (const auto& b : bins) {
        if (b.label.empty()) throw SchemaError("bins: empty label");
        if (b.max_items == 0) throw SchemaError("bin '" + b.label + "': missing items ceiling");
        if (b.max_tokens == 0) throw SchemaError("bin '" + b.label + "': missing tokens ceiling");
        labels.push_back(b.label);
    }
    std::sort(labels.begin(), labels.end());
    if (std::adjacent_find(labels.begin(), labels.end()) != labels.end())
        throw SchemaError("bins: duplicate label");
    if (budgets.delta_sm <= 0 || budgets.table_bound <= 0)
        throw SchemaError("budgets: approximation allowances must be positive");
    if (budgets.clip_lo >= budgets.clip_hi) throw SchemaError("budgets: clip window inverted");
    if (!budgets.delta_sm_per_block.empty() && budgets.delta_sm_per_block.size() != model.n_blocks)
        throw SchemaError("budgets.delta_sm_per_block must have one entry per block");
    if (quota_counting != "per-tagged-bin")
        throw SchemaError("quota_counting: only per-tagged-bin is defined");
}

static int64_t canon_real(double x, FxpFormat fmt) { return quantize(x, fmt).raw; }

Bytes canonical_encode(const PolicyManifest& m) {
    m.validate();
    ByteWriter w;
    w.u32(m.version);
    w.u8(m.fxp.int_bits);
    w.u8(m.fxp.frac_bits);

    w.u32(m.model.d_model);
    w.u32(m.model.n_heads);
    w.u32(m.model.head_dim);
    w.u32(m.model.seq_len);
    w.u32(m.model.vocab_size);
    w.u32(m.model.n_blocks);
    w.u32(m.model.lora_rank);
    w.u8(m.model.adapt_attention ? 1 : 0);
    w.u8(m.model.adapt_mlp ? 1 : 0);

    w.i64(canon_real(m.optimizer.beta1, m.fxp));
    w.i64(canon_real(m.optimizer.beta2, m.fxp));
    w.i64(canon_real(m.optimizer.epsilon, m.fxp));
    w.i64(canon_real(m.optimizer.weight_decay, m.fxp));
    w.i64(canon_real(m.optimizer.clip_norm, m.fxp));
    w.str(m.optimizer.schedule.id);
    w.i64(canon_real(m.optimizer.schedule.base_rate, m.fxp));
    // Warmup resolves to a step count; encode in parts per 2^16 to stay real-free.
    w.u32(static_cast<uint32_t>(m.optimizer.schedule.warmup_frac * 65536.0 + 0.5));

    w.str(m.sampler.mode);
    Digest s = m.sampling_seed();
    w.raw(s.data(), s.size());
    w.u32(m.sampler.batch_size);
    w.u8(m.sampler.with_replacement ? 1 : 0);
    w.str(m.sampler.shuffle_policy);

    // Bins sorted by label so declaration order is irrelevant.
    std::vector<BinSpec> bins = m.bins;
    std::sort(bins.begin(), bins.end(),
              [](const BinSpec& a, const BinSpec& b) { return a.label < b.label; });
    w.u32(static_cast<uint32_t>(bins.size()));
    for (const auto& b : bins) {
        w.str(b.label);
        w.u64(b.max_items);
        w.u64(b.max_tokens);
    }

    // Budgets are sub-ulp reals; encode as IEEE bit patterns (metadata, not
    // committed arithmetic inputs).
    auto real_bits = [&w](double x) {
        uint64_t bits;
        static_assert(sizeof(bits) == sizeof(x));
        std::memcpy(&bits, &x, sizeof(bits));
        w.u64(bits);
    };
    real_bits(m.budgets.delta_sm);
    real_bits(m.budgets.table_bound);
    w.i64(canon_real(m.budgets.clip_lo, m.fxp));
    w.i64(canon_real(m.budgets.clip_hi, m.fxp));
    w.i64(canon_real(m.budgets.ln_epsilon, m.fxp));
    w.u32(static_cast<uint32_t>(m.budgets.delta_sm_per_block.size()));
    for (double d : m.budgets.delta_sm_per_block) real_bits(d);

    Digest init = m.init_seed();
    w.raw(init.data(), init.size());
    w.str(m.quota_counting);
    return w.take();
}

Digest hash_manifest(const PolicyManifest& m) {
    Bytes enc = canonical_encode(m);
    Hasher h(Tag::Manifest);
    h.update(enc);
    return h.finish();
}

namespace {

const json& need(const json& j, const char* key, const char* where) {
    auto it = j.find(key);
    if (it == j.end()) throw SchemaError(std::string(where) + ": missing field '" + key + "'");
    return *it;
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    auto it = j.find(key);
    if (it == j.end()) return fallback;
    return it->get<T>();
}

} // namespace

PolicyManifest manifest_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw SchemaError(std::string("manifest: invalid JSON: ") + e.what());
    }
    try {
        PolicyManifest m;
        m.version = get_or<uint32_t>(j, "version", 1);
        const json& jf = need(j, "fxp", "manifest");
        m.fxp = FxpFormat::make(need(jf, "int_bits", "fxp").get<int>(),
                                need(jf, "frac_bits", "fxp").get<int>());
        const json& jm = need(j, "model", "manifest");
        m.model.d_model = need(jm, "d_model", "model").get<uint32_t>();
        m.model.n_heads = need(jm, "n_heads", "model").get<uint32_t>();
        m.model.head_dim = need(jm, "head_dim", "model").get<uint32_t>();
        m.model.seq_len = need(jm, "seq_len", "model").get<uint32_t>();
        m.model.vocab_size = need(jm, "vocab_size", "model").get<uint32_t>();
        m.model.n_blocks = need(jm, "n_blocks", "model").get<uint32_t>();
        m.model.lora_rank = need(jm, "lora_rank", "model").get<uint32_t>();
        m.model.adapt_attention = get_or<bool>(jm, "adapt_attention", true);
        m.model.adapt_mlp = get_or<bool>(jm, "adapt_mlp", false);
        const json& jo = need(j, "optimizer", "manifest");
        m.optimizer.beta1 = need(jo, "beta1", "optimizer").get<double>();
        m.optimizer.beta2 = need(jo, "beta2", "optimizer").get<double>();
        m.optimizer.epsilon = need(jo, "epsilon", "optimizer").get<double>();
        m.optimizer.weight_decay = need(jo, "weight_decay", "optimizer").get<double>();
        m.optimizer.clip_norm = need(jo, "clip_norm", "optimizer").get<double>();
        const json& js = need(jo, "schedule", "optimizer");
        m.optimizer.schedule.id = need(js, "id", "schedule").get<std::string>();
        m.optimizer.schedule.base_rate = need(js, "base_rate", "schedule").get<double>();
        m.optimizer.schedule.warmup_frac = need(js, "warmup_frac", "schedule").get<double>();
        const json& jsam = need(j, "sampler", "manifest");
        m.sampler.mode = need(jsam, "mode", "sampler").get<std::string>();
        m.sampler.seed_hex = need(jsam, "seed", "sampler").get<std::string>();
        m.sampler.batch_size = need(jsam, "batch_size", "sampler").get<uint32_t>();
        m.sampler.with_replacement = get_or<bool>(jsam, "with_replacement", false);
        m.sampler.shuffle_policy = get_or<std::string>(jsam, "shuffle_policy", "none");
        const json& jb = need(j, "bins", "manifest");
        if (!jb.is_array()) throw SchemaError("bins must be an array");
        for (const auto& e : jb) {
            BinSpec b;
            b.label = need(e, "label", "bin").get<std::string>();
            auto items = e.find("max_items");
            if (items == e.end())
                throw SchemaError("bin '" + b.label + "': missing items ceiling");
            b.max_items = items->get<uint64_t>();
            auto tokens = e.find("max_tokens");
            if (tokens == e.end())
                throw SchemaError("bin '" + b.label + "': missing tokens ceiling");
            b.max_tokens = tokens->get<uint64_t>();
            m.bins.push_back(std::move(b));
        }
        if (j.contains("budgets")) {
            const json& jbud = j["budgets"];
            m.budgets.delta_sm = get_or<double>(jbud, "delta_sm", m.budgets.delta_sm);
            m.budgets.table_bound = get_or<double>(jbud, "table_bound", m.budgets.table_bound);
            m.budgets.clip_lo = get_or<double>(jbud, "clip_lo", m.budgets.clip_lo);
            m.budgets.clip_hi = get_or<double>(jbud, "clip_hi", m.budgets.clip_hi);
            m.budgets.ln_epsilon = get_or<double>(jbud, "ln_epsilon", m.budgets.ln_epsilon);
            if (jbud.contains("delta_sm_per_block"))
                m.budgets.delta_sm_per_block = jbud["delta_sm_per_block"].get<std::vector<double>>();
        }
        m.init_seed_hex = need(j, "init_seed", "manifest").get<std::string>();
        m.quota_counting = get_or<std::string>(j, "quota_counting", "per-tagged-bin");
        m.validate();
        return m;
    } catch (const json::exception& e) {
        throw SchemaError(std::string("manifest: bad field type: ") + e.what());
    }
}

PolicyManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return manifest_from_json(ss.str());
}

std::string manifest_to_json(const PolicyManifest& m) {
    json j;
    j["version"] = m.version;
    j["fxp"] = {{"int_bits", m.fxp.int_bits}, {"frac_bits", m.fxp.frac_bits}};
    j["model"] = {
        {"d_model", m.model.d_model},       {"n_heads", m.model.n_heads},
        {"head_dim", m.model.head_dim},     {"seq_len", m.model.seq_len},
        {"vocab_size", m.model.vocab_size}, {"n_blocks", m.model.n_blocks},
        {"lora_rank", m.model.lora_rank},   {"adapt_attention", m.model.adapt_attention},
        {"adapt_mlp", m.model.adapt_mlp},
    };
    j["optimizer"] = {
        {"beta1", m.optimizer.beta1},
        {"beta2", m.optimizer.beta2},
        {"epsilon", m.optimizer.epsilon},
        {"weight_decay", m.optimizer.weight_decay},
        {"clip_norm", m.optimizer.clip_norm},
        {"schedule",
         {{"id", m.optimizer.schedule.id},
          {"base_rate", m.optimizer.schedule.base_rate},
          {"warmup_frac", m.optimizer.schedule.warmup_frac}}},
    };
    j["sampler"] = {
        {"mode", m.sampler.mode},
        {"seed", m.sampler.seed_hex},
        {"batch_size", m.sampler.batch_size},
        {"with_replacement", m.sampler.with_replacement},
        {"shuffle_policy", m.sampler.shuffle_policy},
    };
    j["bins"] = json::array();
    for (const auto& b : m.bins)
        j["bins"].push_back({{"label", b.label}, {"max_items", b.max_items}, {"max_tokens", b.max_tokens}});
    j["budgets"] = {
        {"delta_sm", m.budgets.delta_sm},
        {"table_bound", m.budgets.table_bound},
        {"clip_lo", m.budgets.clip_lo},
        {"clip_hi", m.budgets.clip_hi},
        {"ln_epsilon", m.budgets.ln_epsilon},
    };
    if (!m.budgets.delta_sm_per_block.empty())
        j["budgets"]["delta_sm_per_block"] = m.budgets.delta_sm_per_block;
    j["init_seed"] = m.init_seed_hex;
    j["quota_counting"] = m.quota_counting;
    return j.dump(2) + "\n";
}

void save_manifest(const PolicyManifest& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest: " + path);
    out << manifest_to_json(m);
}

PolicyManifest default_manifest() {
    PolicyManifest m;
    m.fxp = FxpFormat::make(14, 14);
    m.sampler.seed_hex = std::string(64, '1');
    m.init_seed_hex = std::string(64, '2');
    m.bins = {
        {"general", 12000, 16000000},
        {"safety", 1800, 2400000},
        {"medical", 600, 800000},
        {"finance", 900, 1200000},
        {"telemetry", 300, 400000},
    };
    return m;
}

} // namespace vft
