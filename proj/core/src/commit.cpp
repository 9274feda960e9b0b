#include "vft/commit.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "vft/errors.hpp"
#include "vft/rng.hpp"

namespace vft {

Bytes encode_leaf(const ExampleLeaf& leaf) {
    ByteWriter w;
    w.blob(leaf.payload);
    w.str(leaf.source_id);
    w.str(leaf.license_id);
    w.raw(leaf.proc_digest.data(), leaf.proc_digest.size());
    std::vector<std::string> tags = leaf.policy_tags;
    std::sort(tags.begin(), tags.end());
    w.u32(static_cast<uint32_t>(tags.size()));
    for (const auto& t : tags) w.str(t);
    return w.take();
}

Digest leaf_digest(const ExampleLeaf& leaf) {
    Hasher h(Tag::Leaf);
    h.update(encode_leaf(leaf));
    return h.finish();
}

Digest merkle_combine(const Digest& left, const Digest& right) {
    Hasher h(Tag::Node);
    h.update(left);
    h.update(right);
    return h.finish();
}

MerkleTree MerkleTree::build(std::vector<Digest> leaf_digests) {
    if (leaf_digests.empty()) throw EmptyDataset("merkle: no leaves");
    MerkleTree t;
    t.levels_.push_back(std::move(leaf_digests));
    // Combine at least once so a lone leaf still hashes into a distinct root.
    while (t.levels_.back().size() > 1 || t.levels_.size() == 1) {
        const auto& cur = t.levels_.back();
        std::vector<Digest> next;
        next.reserve((cur.size() + 1) / 2);
        for (size_t i = 0; i < cur.size(); i += 2) {
            const Digest& left = cur[i];
            const Digest& right = (i + 1 < cur.size()) ? cur[i + 1] : cur[i];
            next.push_back(merkle_combine(left, right));
        }
        t.levels_.push_back(std::move(next));
    }
    return t;
}

MerkleTree::Path MerkleTree::path(uint64_t index) const {
    if (index >= leaf_count())
        throw IndexOutOfRange("merkle path: index " + std::to_string(index) + " >= leaf count " +
                              std::to_string(leaf_count()));
    Path out;
    uint64_t pos = index;
    for (size_t lvl = 0; lvl + 1 < levels_.size(); ++lvl) {
        const auto& cur = levels_[lvl];
        uint64_t sib = pos ^ 1;
        PathElem e;
        if (sib < cur.size()) {
            e.sibling = cur[sib];
            e.sibling_on_right = (sib > pos);
        } else {
            e.sibling = cur[pos]; // odd node pairs with its own copy
            e.sibling_on_right = true;
        }
        out.push_back(e);
        pos >>= 1;
    }
    return out;
}

bool verify_membership(const Digest& root, const Digest& leaf, const MerkleTree::Path& path) {
    Digest cur = leaf;
    for (const auto& e : path)
        cur = e.sibling_on_right ? merkle_combine(cur, e.sibling) : merkle_combine(e.sibling, cur);
    return cur == root;
}

DatasetCommitment DatasetCommitment::commit(const Dataset& ds) {
    std::vector<Digest> digests;
    digests.reserve(ds.leaves.size());
    for (const auto& leaf : ds.leaves) digests.push_back(leaf_digest(leaf));
    return DatasetCommitment{MerkleTree::build(std::move(digests))};
}

static constexpr char kCommitMagic[4] = {'V', 'F', 'T', 'C'};
static constexpr uint16_t kCommitVersion = 1;

Bytes serialize_commitment(const DatasetCommitment& c) {
    ByteWriter w;
    w.raw(kCommitMagic, 4);
    w.u16(kCommitVersion);
    w.u64(c.tree.leaf_count());
    for (const auto& level : c.tree.levels())
        for (const auto& d : level) w.raw(d.data(), d.size());
    return w.take();
}

DatasetCommitment parse_commitment(std::span<const uint8_t> data) {
    ByteReader r(data);
    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, kCommitMagic, 4) != 0) throw IoError("commitment: bad magic");
    uint16_t ver = r.u16();
    if (ver != kCommitVersion) throw IoError("commitment: unsupported version");
    uint64_t leaves = r.u64();
    if (leaves == 0) throw EmptyDataset("commitment: zero leaves");
    std::vector<Digest> level0(leaves);
    for (auto& d : level0) r.raw(d.data(), d.size());
    // Rebuild from the leaf level, then require the stored upper levels to
    // match; a file that disagrees with its own leaves is rejected.
    MerkleTree rebuilt = MerkleTree::build(level0);
    for (size_t lvl = 1; lvl < rebuilt.levels().size(); ++lvl) {
        for (const auto& expect : rebuilt.levels()[lvl]) {
            Digest got;
            r.raw(got.data(), got.size());
            if (got != expect) throw IoError("commitment: stored level digests disagree with leaves");
        }
    }
    r.expect_done("commitment");
    return DatasetCommitment{std::move(rebuilt)};
}

void write_commitment_file(const DatasetCommitment& c, const std::string& path) {
    Bytes data = serialize_commitment(c);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write commitment: " + path);
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError("short write: " + path);
}

DatasetCommitment read_commitment_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open commitment: " + path);
    Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_commitment(data);
}

Digest counter_leaf_digest(const std::string& label, uint64_t count,
                           const std::array<uint8_t, 16>& salt) {
    Hasher h(Tag::Counter);
    h.update_str(label);
    h.update_u64(count);
    h.update(std::span<const uint8_t>(salt.data(), salt.size()));
    return h.finish();
}

CounterCommitment CounterCommitment::commit(const std::map<std::string, uint64_t>& counts,
                                            const Digest& salt_seed) {
    if (counts.empty()) throw EmptyDataset("counter commitment: no bins");
    CounterCommitment c;
    HashRng rng(Tag::Stream, salt_seed, "counter-salts");
    std::vector<Digest> leaf_digests;
    for (const auto& [label, count] : counts) { // std::map iterates sorted
        std::array<uint8_t, 16> salt{};
        rng.fill(salt.data(), salt.size());
        c.labels_.push_back(label);
        c.counts_.push_back(count);
        c.salts_.push_back(salt);
        leaf_digests.push_back(counter_leaf_digest(label, count, salt));
    }
    c.tree_ = MerkleTree::build(std::move(leaf_digests));
    return c;
}

CounterOpening CounterCommitment::open(const std::string& label) const {
    auto it = std::lower_bound(labels_.begin(), labels_.end(), label);
    if (it == labels_.end() || *it != label)
        throw UnknownBin("counter commitment: no bin '" + label + "'");
    size_t idx = static_cast<size_t>(it - labels_.begin());
    CounterOpening o;
    o.label = label;
    o.count = counts_[idx];
    o.salt = salts_[idx];
    o.path = tree_.path(idx);
    return o;
}

bool verify_counter_opening(const Digest& root, const CounterOpening& opening) {
    return verify_membership(root, counter_leaf_digest(opening.label, opening.count, opening.salt),
                             opening.path);
}

Digest state_digest_from_parts(const Digest& frozen, std::span<const Digest> tensor_digests) {
    Hasher h(Tag::State);
    h.update(frozen);
    h.update_u64(tensor_digests.size());
    for (const auto& d : tensor_digests) h.update(d);
    return h.finish();
}

} // namespace vft
