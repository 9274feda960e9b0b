#include "vft/fxp.hpp"

#include <cmath>

namespace vft {

FxpFormat FxpFormat::make(int int_bits, int frac_bits) {
    FxpFormat f{static_cast<uint8_t>(int_bits), static_cast<uint8_t>(frac_bits)};
    if (int_bits < 1 || int_bits > 32 || frac_bits < 1 || frac_bits > 32)
        throw SchemaError("fxp format: bits out of [1,32]");
    f.validate();
    return f;
}

void FxpFormat::validate() const {
    if (int_bits < 1 || int_bits > 32 || frac_bits < 1 || frac_bits > 32 ||
        int_bits + frac_bits > 62)
        throw SchemaError("fxp format: require 1<=b<=32, 1<=q<=32, b+q<=62");
}

double FxpFormat::ulp() const {
    return std::ldexp(1.0, -static_cast<int>(frac_bits));
}

int64_t checked_raw(__int128 raw, FxpFormat fmt, const char* what) {
    __int128 limit = static_cast<__int128>(fmt.raw_limit());
    if (raw >= limit || raw <= -limit)
        throw RangeOverflow(std::string(what) + ": |raw| >= 2^" +
                            std::to_string(fmt.int_bits + fmt.frac_bits));
    return static_cast<int64_t>(raw);
}

FxpValue FxpValue::from_raw(int64_t raw, FxpFormat fmt) {
    fmt.validate();
    return FxpValue{checked_raw(raw, fmt, "from_raw"), fmt};
}

double FxpValue::to_double() const {
    return std::ldexp(static_cast<double>(raw), -static_cast<int>(fmt.frac_bits));
}

FxpValue quantize(double x, FxpFormat fmt) {
    fmt.validate();
    if (!std::isfinite(x)) throw RangeOverflow("quantize: non-finite input");
    // Scaling by 2^q only shifts the exponent, so this product is exact for
    // finite doubles; the tie-break below is then fully deterministic.
    double scaled = std::ldexp(x, fmt.frac_bits);
    double fl = std::floor(scaled);
    double frac = scaled - fl;
    if (std::abs(fl) > 0x1.0p62) throw RangeOverflow("quantize: input magnitude too large");
    int64_t base = static_cast<int64_t>(fl);
    if (frac > 0.5) {
        base += 1;
    } else if (frac == 0.5) {
        if (base & 1) base += 1; // ties to even
    }
    return FxpValue{checked_raw(base, fmt, "quantize"), fmt};
}

double dequantize(FxpValue v) { return v.to_double(); }

static void check_same_format(FxpValue a, FxpValue b, const char* what) {
    if (!(a.fmt == b.fmt)) throw SchemaError(std::string(what) + ": mixed fxp formats");
}

FxpValue fxp_add(FxpValue a, FxpValue b) {
    check_same_format(a, b, "fxp_add");
    __int128 sum = static_cast<__int128>(a.raw) + b.raw;
    return FxpValue{checked_raw(sum, a.fmt, "fxp_add"), a.fmt};
}

FxpValue fxp_sub(FxpValue a, FxpValue b) {
    check_same_format(a, b, "fxp_sub");
    __int128 diff = static_cast<__int128>(a.raw) - b.raw;
    return FxpValue{checked_raw(diff, a.fmt, "fxp_sub"), a.fmt};
}

FxpValue fxp_neg(FxpValue a) {
    return FxpValue{checked_raw(-static_cast<__int128>(a.raw), a.fmt, "fxp_neg"), a.fmt};
}

int64_t shift_right_round_half_even(__int128 v, unsigned shift) {
    if (shift == 0) return static_cast<int64_t>(v);
    __int128 floor_q = v >> shift; // arithmetic shift: floor for negatives too
    __int128 rem = v - (floor_q << shift);
    __int128 half = static_cast<__int128>(1) << (shift - 1);
    if (rem > half || (rem == half && (floor_q & 1))) floor_q += 1;
    return static_cast<int64_t>(floor_q);
}

int64_t div_round_half_even(__int128 num, int64_t den) {
    if (den <= 0) throw RangeOverflow("div_round_half_even: divisor must be positive");
    __int128 d = den;
    __int128 floor_q = num / d;
    __int128 rem = num % d;
    if (rem < 0) { // make remainder canonical in [0, den)
        floor_q -= 1;
        rem += d;
    }
    __int128 twice = rem * 2;
    if (twice > d || (twice == d && (floor_q & 1))) floor_q += 1;
    return static_cast<int64_t>(floor_q);
}

FxpValue fxp_mul(FxpValue a, FxpValue b) {
    check_same_format(a, b, "fxp_mul");
    __int128 prod = static_cast<__int128>(a.raw) * b.raw;
    int64_t scaled = shift_right_round_half_even(prod, a.fmt.frac_bits);
    return FxpValue{checked_raw(scaled, a.fmt, "fxp_mul"), a.fmt};
}

FxpValue fxp_pow(FxpValue base, uint64_t n) {
    FxpValue acc = FxpValue{int64_t(1) << base.fmt.frac_bits, base.fmt}; // 1.0
    FxpValue sq = base;
    while (n > 0) {
        if (n & 1) acc = fxp_mul(acc, sq);
        n >>= 1;
        if (n > 0) sq = fxp_mul(sq, sq);
    }
    return acc;
}

void ErrorBudget::add_quantize(FxpFormat fmt, uint64_t count) {
    quantize_ops += count;
    eps_fxp += static_cast<double>(count) * std::ldexp(1.0, -(static_cast<int>(fmt.frac_bits) + 1));
}

void ErrorBudget::add_mul(FxpFormat fmt, uint64_t count) {
    mul_ops += count;
    eps_fxp += static_cast<double>(count) * std::ldexp(1.0, -(static_cast<int>(fmt.frac_bits) + 1));
}

void ErrorBudget::add_table(double bound, uint64_t count) {
    table_ops += count;
    delta_sm += static_cast<double>(count) * bound;
}

ErrorBudget& accumulate_error(ErrorBudget& budget, FxpOp op, FxpFormat fmt, uint64_t count) {
    switch (op) {
        case FxpOp::Quantize: budget.add_quantize(fmt, count); break;
        case FxpOp::Mul: budget.add_mul(fmt, count); break;
    }
    return budget;
}

} // namespace vft
