#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vft/fxp.hpp"
#include "vft/hashing.hpp"
#include "vft/manifest.hpp"

namespace vft {

enum class TableFn : uint8_t {
    Exp = 0,      // e^x over the clip window
    Gelu = 1,     // x * Phi(x)
    GeluGrad = 2, // Phi(x) + x * phi(x)
    Rsqrt = 3,    // 1/sqrt(x) over [1,4]; other octaves reach it by shifting
    Recip = 4,    // 1/x over [1,2]; other octaves reach it by shifting
    Log = 5,      // ln(x) over [1,2]; ln(x) = ln(s) - k*ln2
    Cos = 6,      // cos(x) over [0, pi]
};

const char* table_fn_name(TableFn fn);
double table_fn_eval(TableFn fn, double x); // double-precision reference

// Dense table with one entry per representable input (stride = one raw unit,
// i.e. 2^-q), so a lookup is exact at its grid point and the only error is
// the quantization of the stored value. declared_bound is the certified
// ceiling on |entry - f(x)| across the whole domain.
struct LookupTable {
    TableFn fn;
    FxpFormat fmt;
    int64_t lo_raw = 0;
    int64_t hi_raw = 0; // inclusive
    int64_t stride_raw = 1;
    double declared_bound = 0.0;
    std::vector<int64_t> entries;

    int64_t lookup_raw(int64_t x_raw) const; // TableDomainError outside [lo, hi]
    FxpValue apply(FxpValue x) const;
    Digest entries_digest() const;
};

LookupTable build_table(TableFn fn, FxpFormat fmt, double lo, double hi, double declared_bound);
// Dense sweep against the double reference; returns the measured max error.
double certify_table(const LookupTable& t);

// The full set a run needs, all derived from the manifest. Constants ln2 and
// pi are quantized once here so every party shares the same raws.
struct TableSet {
    LookupTable exp;
    LookupTable gelu;
    LookupTable gelu_grad;
    LookupTable rsqrt;
    LookupTable recip;
    LookupTable log;
    LookupTable cos;
    FxpValue ln2;
    FxpValue pi;
    FxpFormat fmt;

    static TableSet build(const PolicyManifest& m);
    const LookupTable& by_fn(TableFn fn) const;
    LookupTable& by_fn(TableFn fn);
};

// Range-reduced applications: any positive input is shifted into the dense
// domain by even (rsqrt) or single (recip/log) powers of two and the result
// shifted back, so the certified window covers the whole positive axis.
FxpValue rsqrt_pos(const TableSet& t, FxpValue x, ErrorBudget* budget = nullptr);
FxpValue recip_pos(const TableSet& t, FxpValue x, ErrorBudget* budget = nullptr);
FxpValue log_pos(const TableSet& t, FxpValue x, ErrorBudget* budget = nullptr);
FxpValue cos_approx(const TableSet& t, FxpValue x, ErrorBudget* budget = nullptr);
FxpValue exp_clipped(const TableSet& t, FxpValue x, ErrorBudget* budget = nullptr);
FxpValue gelu_clipped(const TableSet& t, FxpValue x, ErrorBudget* budget = nullptr);
FxpValue gelu_grad_clipped(const TableSet& t, FxpValue x, ErrorBudget* budget = nullptr);

// VFTL table file: the prover serializes its tables, the verifier re-certifies
// the entries against its own reference and the declared bounds before use.
Bytes serialize_tables(const TableSet& t);
TableSet parse_tables(std::span<const uint8_t> data, const PolicyManifest& m);
void write_tables_file(const TableSet& t, const std::string& path);
TableSet read_tables_file(const std::string& path, const PolicyManifest& m);

} // namespace vft
