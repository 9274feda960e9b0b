#include "vft/tensor.hpp"

namespace vft {

FxpTensor FxpTensor::zeros(uint32_t rows, uint32_t cols, FxpFormat fmt) {
    fmt.validate();
    FxpTensor t;
    t.rows = rows;
    t.cols = cols;
    t.fmt = fmt;
    t.raw.assign(static_cast<size_t>(rows) * cols, 0);
    return t;
}

void FxpTensor::set(uint32_t r, uint32_t c, FxpValue v) {
    if (!(v.fmt == fmt)) throw SchemaError("tensor set: mixed fxp formats");
    at(r, c) = v.raw;
}

static void require(bool ok, const char* what) {
    if (!ok) throw SchemaError(std::string("tensor shapes: ") + what);
}

// The accumulator must hold k products of (b+q)-bit raws. Desk-scale formats
// leave dozens of headroom bits, but guard anyway.
static void check_acc_headroom(const FxpTensor& a, uint32_t k, const char* what) {
    int prod_bits = 2 * (a.fmt.int_bits + a.fmt.frac_bits);
    int kbits = 0;
    while ((uint32_t(1) << kbits) < k) ++kbits;
    if (prod_bits + kbits >= 127) throw RangeOverflow(std::string(what) + ": accumulator overflow risk");
}

FxpTensor matmul_nn(const FxpTensor& a, const FxpTensor& b, ErrorBudget* budget) {
    require(a.cols == b.rows && a.fmt == b.fmt, "matmul_nn wants (m,k)*(k,n)");
    check_acc_headroom(a, a.cols, "matmul_nn");
    FxpTensor out = FxpTensor::zeros(a.rows, b.cols, a.fmt);
    for (uint32_t i = 0; i < a.rows; ++i) {
        for (uint32_t j = 0; j < b.cols; ++j) {
            __int128 acc = 0;
            for (uint32_t k = 0; k < a.cols; ++k)
                acc += static_cast<__int128>(a.at(i, k)) * b.at(k, j);
            out.at(i, j) = checked_raw(shift_right_round_half_even(acc, a.fmt.frac_bits),
                                       a.fmt, "matmul_nn");
        }
    }
    if (budget) budget->add_mul(a.fmt, out.size());
    return out;
}

FxpTensor matmul_nt(const FxpTensor& a, const FxpTensor& b, ErrorBudget* budget) {
    require(a.cols == b.cols && a.fmt == b.fmt, "matmul_nt wants (m,k)*(n,k)^T");
    check_acc_headroom(a, a.cols, "matmul_nt");
    FxpTensor out = FxpTensor::zeros(a.rows, b.rows, a.fmt);
    for (uint32_t i = 0; i < a.rows; ++i) {
        for (uint32_t j = 0; j < b.rows; ++j) {
            __int128 acc = 0;
            for (uint32_t k = 0; k < a.cols; ++k)
                acc += static_cast<__int128>(a.at(i, k)) * b.at(j, k);
            out.at(i, j) = checked_raw(shift_right_round_half_even(acc, a.fmt.frac_bits),
                                       a.fmt, "matmul_nt");
        }
    }
    if (budget) budget->add_mul(a.fmt, out.size());
    return out;
}

FxpTensor matmul_tn(const FxpTensor& a, const FxpTensor& b, ErrorBudget* budget) {
    require(a.rows == b.rows && a.fmt == b.fmt, "matmul_tn wants (k,m)^T*(k,n)");
    check_acc_headroom(a, a.rows, "matmul_tn");
    FxpTensor out = FxpTensor::zeros(a.cols, b.cols, a.fmt);
    for (uint32_t i = 0; i < a.cols; ++i) {
        for (uint32_t j = 0; j < b.cols; ++j) {
            __int128 acc = 0;
            for (uint32_t k = 0; k < a.rows; ++k)
                acc += static_cast<__int128>(a.at(k, i)) * b.at(k, j);
            out.at(i, j) = checked_raw(shift_right_round_half_even(acc, a.fmt.frac_bits),
                                       a.fmt, "matmul_tn");
        }
    }
    if (budget) budget->add_mul(a.fmt, out.size());
    return out;
}

FxpTensor add(const FxpTensor& a, const FxpTensor& b) {
    require(a.same_shape(b), "add wants equal shapes");
    FxpTensor out = a;
    for (size_t i = 0; i < out.raw.size(); ++i)
        out.raw[i] = checked_raw(static_cast<__int128>(a.raw[i]) + b.raw[i], a.fmt, "add");
    return out;
}

FxpTensor sub(const FxpTensor& a, const FxpTensor& b) {
    require(a.same_shape(b), "sub wants equal shapes");
    FxpTensor out = a;
    for (size_t i = 0; i < out.raw.size(); ++i)
        out.raw[i] = checked_raw(static_cast<__int128>(a.raw[i]) - b.raw[i], a.fmt, "sub");
    return out;
}

void add_inplace(FxpTensor& a, const FxpTensor& b) {
    require(a.same_shape(b), "add_inplace wants equal shapes");
    for (size_t i = 0; i < a.raw.size(); ++i)
        a.raw[i] = checked_raw(static_cast<__int128>(a.raw[i]) + b.raw[i], a.fmt, "add_inplace");
}

FxpTensor hadamard(const FxpTensor& a, const FxpTensor& b, ErrorBudget* budget) {
    require(a.same_shape(b), "hadamard wants equal shapes");
    FxpTensor out = a;
    for (size_t i = 0; i < out.raw.size(); ++i) {
        __int128 prod = static_cast<__int128>(a.raw[i]) * b.raw[i];
        out.raw[i] = checked_raw(shift_right_round_half_even(prod, a.fmt.frac_bits),
                                 a.fmt, "hadamard");
    }
    if (budget) budget->add_mul(a.fmt, out.size());
    return out;
}

FxpTensor scale(const FxpTensor& a, FxpValue s, ErrorBudget* budget) {
    require(a.fmt == s.fmt, "scale wants matching formats");
    FxpTensor out = a;
    for (size_t i = 0; i < out.raw.size(); ++i) {
        __int128 prod = static_cast<__int128>(a.raw[i]) * s.raw;
        out.raw[i] = checked_raw(shift_right_round_half_even(prod, a.fmt.frac_bits),
                                 a.fmt, "scale");
    }
    if (budget) budget->add_mul(a.fmt, out.size());
    return out;
}

Digest tensor_digest(std::string_view name, const FxpTensor& t) {
    Hasher h(Tag::Tensor);
    h.update_str(name);
    h.update_u64(t.rows);
    h.update_u64(t.cols);
    h.update_u8(t.fmt.int_bits);
    h.update_u8(t.fmt.frac_bits);
    for (int64_t v : t.raw) h.update_i64(v);
    return h.finish();
}

} // namespace vft
