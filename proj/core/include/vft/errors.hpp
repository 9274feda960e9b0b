#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace vft {

// Hard faults. These abort the computation that raised them; they are never
// part of a verification verdict.

struct RangeOverflow : std::runtime_error {
    explicit RangeOverflow(const std::string& what) : std::runtime_error(what) {}
};

struct TableDomainError : std::runtime_error {
    explicit TableDomainError(const std::string& what) : std::runtime_error(what) {}
};

struct SchemaError : std::runtime_error {
    explicit SchemaError(const std::string& what) : std::runtime_error(what) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

struct EmptyDataset : std::runtime_error {
    explicit EmptyDataset(const std::string& what) : std::runtime_error(what) {}
};

struct IndexOutOfRange : std::runtime_error {
    explicit IndexOutOfRange(const std::string& what) : std::runtime_error(what) {}
};

struct UnknownBin : std::runtime_error {
    explicit UnknownBin(const std::string& what) : std::runtime_error(what) {}
};

struct BatchTooLarge : std::runtime_error {
    explicit BatchTooLarge(const std::string& what) : std::runtime_error(what) {}
};

struct EpochClosed : std::runtime_error {
    explicit EpochClosed(const std::string& what) : std::runtime_error(what) {}
};

struct LockHeld : std::runtime_error {
    explicit LockHeld(const std::string& what) : std::runtime_error(what) {}
};

// Verification faults. Each value is tied to one class of misbehavior the
// protocol is designed to catch; verifiers return these rather than throw.
enum class VerifyFault : uint8_t {
    None = 0,
    OutOfPolicyBatch,    // batch member outside the committed dataset or its policy
    ManifestMismatch,    // declared manifest and runtime constants disagree
    ChainBreak,          // hash chain or state continuity broken
    ConstraintViolation, // optimizer transition or re-executed activations disagree
    BudgetExceeded,      // declared approximation error above the manifest budget
    QuotaViolation,      // a policy bin exceeded its ceiling
    BoundaryMismatch,    // fold children do not share a state boundary
};

const char* to_string(VerifyFault f);

struct VerifyResult {
    VerifyFault fault = VerifyFault::None;
    uint64_t epoch = 0;
    uint64_t step = 0;
    std::string detail;

    bool ok() const { return fault == VerifyFault::None; }

    static VerifyResult pass() { return {}; }
    static VerifyResult fail(VerifyFault f, uint64_t epoch, uint64_t step, std::string detail) {
        return VerifyResult{f, epoch, step, std::move(detail)};
    }
};

// Prover-side abort: raised when a run cannot legitimately continue (manifest
// mismatch before step 0, quota violation at an epoch boundary, fold boundary
// break). Carries the fault so the CLI can map it to an exit code.
struct ProveAbort : std::runtime_error {
    VerifyFault fault;
    uint64_t epoch;
    uint64_t step;
    ProveAbort(VerifyFault f, uint64_t epoch_, uint64_t step_, const std::string& what)
        : std::runtime_error(what), fault(f), epoch(epoch_), step(step_) {}
};

} // namespace vft
