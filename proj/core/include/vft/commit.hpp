#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vft/bytes.hpp"
#include "vft/hashing.hpp"
#include "vft/tensor.hpp"

namespace vft {

// One dataset example as committed: tokenized payload plus provenance and
// policy metadata. The processing digest pins whatever pipeline produced the
// payload so two leaves with equal text but different provenance differ.
struct ExampleLeaf {
    Bytes payload;
    std::string source_id;
    std::string license_id;
    Digest proc_digest{};
    std::vector<std::string> policy_tags;
};

Bytes encode_leaf(const ExampleLeaf& leaf); // canonical: sorted tags, length prefixes
Digest leaf_digest(const ExampleLeaf& leaf);

struct Dataset {
    std::vector<ExampleLeaf> leaves;
    size_t size() const { return leaves.size(); }
};

// Binary Merkle tree with domain-separated nodes. An odd node at any level is
// paired with a copy of itself, so even a single leaf gets one combining
// level and the root never equals a leaf digest.
class MerkleTree {
public:
    struct PathElem {
        Digest sibling;
        bool sibling_on_right = false;
    };
    using Path = std::vector<PathElem>;

    static MerkleTree build(std::vector<Digest> leaf_digests); // EmptyDataset if none

    const Digest& root() const { return levels_.back().front(); }
    uint64_t leaf_count() const { return static_cast<uint64_t>(levels_.front().size()); }
    const std::vector<std::vector<Digest>>& levels() const { return levels_; }

    Path path(uint64_t index) const; // IndexOutOfRange past the last leaf

private:
    std::vector<std::vector<Digest>> levels_; // levels_[0] = leaves, back = root
};

Digest merkle_combine(const Digest& left, const Digest& right);
bool verify_membership(const Digest& root, const Digest& leaf, const MerkleTree::Path& path);

struct DatasetCommitment {
    MerkleTree tree;
    static DatasetCommitment commit(const Dataset& ds);
    const Digest& root() const { return tree.root(); }
};

// VFTC: magic, version, leaf count, then every level's digests leaves-first.
Bytes serialize_commitment(const DatasetCommitment& c);
DatasetCommitment parse_commitment(std::span<const uint8_t> data);
void write_commitment_file(const DatasetCommitment& c, const std::string& path);
DatasetCommitment read_commitment_file(const std::string& path);

// Salted per-bin counters. Each quota bin commits two leaves, one per
// ceiling dimension, labeled "<bin>#items" and "<bin>#tokens"; opening a leaf
// reveals only that count and its salt.
struct CounterOpening {
    std::string label;
    uint64_t count = 0;
    std::array<uint8_t, 16> salt{};
    MerkleTree::Path path;
};

class CounterCommitment {
public:
    static CounterCommitment commit(const std::map<std::string, uint64_t>& counts,
                                    const Digest& salt_seed);
    const Digest& root() const { return tree_.root(); }
    CounterOpening open(const std::string& label) const; // UnknownBin if absent
    const std::vector<std::string>& labels() const { return labels_; }

private:
    std::vector<std::string> labels_; // sorted
    std::vector<uint64_t> counts_;
    std::vector<std::array<uint8_t, 16>> salts_;
    MerkleTree tree_;
};

Digest counter_leaf_digest(const std::string& label, uint64_t count,
                           const std::array<uint8_t, 16>& salt);
bool verify_counter_opening(const Digest& root, const CounterOpening& opening);

// State digest: the frozen backbone digest followed by each tracked tensor
// digest in canonical order (adapter A/B pairs, then optimizer m, then v).
Digest state_digest_from_parts(const Digest& frozen, std::span<const Digest> tensor_digests);

} // namespace vft
