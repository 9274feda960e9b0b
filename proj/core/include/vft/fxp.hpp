#pragma once

#include <cstdint>
#include <string>

#include "vft/bytes.hpp"
#include "vft/errors.hpp"

namespace vft {

// Signed fixed-point format: values are raw/2^frac_bits with
// |raw| < 2^(int_bits + frac_bits). The committed training path runs entirely
// on these raws; doubles appear only at quantization boundaries and in test
// oracles.
struct FxpFormat {
    uint8_t int_bits = 14;  // b
    uint8_t frac_bits = 14; // q

    static FxpFormat make(int int_bits, int frac_bits);
    void validate() const;

    int64_t raw_limit() const { return int64_t(1) << (int_bits + frac_bits); }
    double ulp() const; // 2^-frac_bits
    bool operator==(const FxpFormat&) const = default;
};

struct FxpValue {
    int64_t raw = 0;
    FxpFormat fmt;

    static FxpValue from_raw(int64_t raw, FxpFormat fmt);
    double to_double() const;
};

// Round x*2^q to the nearest integer, ties to even, and range-check the
// result. Out-of-range input is a hard RangeOverflow, never a silent wrap.
FxpValue quantize(double x, FxpFormat fmt);
double dequantize(FxpValue v);

FxpValue fxp_add(FxpValue a, FxpValue b);
FxpValue fxp_sub(FxpValue a, FxpValue b);
FxpValue fxp_neg(FxpValue a);
// (a.raw * b.raw) in 128 bits, rescaled by 2^-q with round-half-to-even.
FxpValue fxp_mul(FxpValue a, FxpValue b);
// beta^n with n >= 0 by square-and-multiply over fxp_mul.
FxpValue fxp_pow(FxpValue base, uint64_t n);

// Integer helpers shared by the whole engine. Both round to nearest with
// ties to even; the divisor must be positive.
int64_t shift_right_round_half_even(__int128 v, unsigned shift);
int64_t div_round_half_even(__int128 num, int64_t den);

int64_t checked_raw(__int128 raw, FxpFormat fmt, const char* what);

// Worst-case rounding budget, accumulated per executed operation. eps_fxp
// grows by 2^-(q+1) per quantize or rescale; lookup-table applications add
// their certified bounds to delta_sm. tau = eps_fxp + delta_sm.
struct ErrorBudget {
    double eps_fxp = 0.0;
    double delta_sm = 0.0;
    uint64_t quantize_ops = 0;
    uint64_t mul_ops = 0;
    uint64_t table_ops = 0;

    double tau() const { return eps_fxp + delta_sm; }

    void add_quantize(FxpFormat fmt, uint64_t count);
    void add_mul(FxpFormat fmt, uint64_t count);
    void add_table(double bound, uint64_t count);
};

enum class FxpOp : uint8_t { Quantize, Mul };

// Spec-shaped entry point; forwards to the member accumulators.
ErrorBudget& accumulate_error(ErrorBudget& budget, FxpOp op, FxpFormat fmt, uint64_t count);

} // namespace vft
