#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vft/fxp.hpp"
#include "vft/hashing.hpp"

namespace vft {

// Dense row-major fixed-point matrix. All arithmetic goes through the checked
// scalar ops: products accumulate in 128 bits and are rescaled exactly once
// per output coordinate, so each matmul entry costs one rounding.
struct FxpTensor {
    uint32_t rows = 0;
    uint32_t cols = 0;
    FxpFormat fmt;
    std::vector<int64_t> raw;

    static FxpTensor zeros(uint32_t rows, uint32_t cols, FxpFormat fmt);

    size_t size() const { return static_cast<size_t>(rows) * cols; }
    int64_t& at(uint32_t r, uint32_t c) { return raw[static_cast<size_t>(r) * cols + c]; }
    int64_t at(uint32_t r, uint32_t c) const { return raw[static_cast<size_t>(r) * cols + c]; }
    FxpValue value(uint32_t r, uint32_t c) const { return FxpValue{at(r, c), fmt}; }
    void set(uint32_t r, uint32_t c, FxpValue v);

    bool same_shape(const FxpTensor& o) const {
        return rows == o.rows && cols == o.cols && fmt == o.fmt;
    }
    bool operator==(const FxpTensor& o) const = default;
};

// a (m x k) * b (k x n) -> m x n
FxpTensor matmul_nn(const FxpTensor& a, const FxpTensor& b, ErrorBudget* budget = nullptr);
// a (m x k) * b^T (n x k) -> m x n
FxpTensor matmul_nt(const FxpTensor& a, const FxpTensor& b, ErrorBudget* budget = nullptr);
// a^T (k x m) * b (k x n) -> m x n
FxpTensor matmul_tn(const FxpTensor& a, const FxpTensor& b, ErrorBudget* budget = nullptr);

FxpTensor add(const FxpTensor& a, const FxpTensor& b);
FxpTensor sub(const FxpTensor& a, const FxpTensor& b);
void add_inplace(FxpTensor& a, const FxpTensor& b);
FxpTensor hadamard(const FxpTensor& a, const FxpTensor& b, ErrorBudget* budget = nullptr);
FxpTensor scale(const FxpTensor& a, FxpValue s, ErrorBudget* budget = nullptr);

Digest tensor_digest(std::string_view name, const FxpTensor& t);

} // namespace vft
