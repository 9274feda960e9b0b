#include "vft/lut.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "vft/errors.hpp"

namespace vft {

const char* table_fn_name(TableFn fn) {
    switch (fn) {
        case TableFn::Exp: return "exp";
        case TableFn::Gelu: return "gelu";
        case TableFn::GeluGrad: return "gelu_grad";
        case TableFn::Rsqrt: return "rsqrt";
        case TableFn::Recip: return "recip";
        case TableFn::Log: return "log";
        case TableFn::Cos: return "cos";
    }
    return "?";
}

double table_fn_eval(TableFn fn, double x) {
    switch (fn) {
        case TableFn::Exp: return std::exp(x);
        case TableFn::Gelu: return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
        case TableFn::GeluGrad: {
            double phi_cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
            double phi_pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
            return phi_cdf + x * phi_pdf;
        }
        case TableFn::Rsqrt: return 1.0 / std::sqrt(x);
        case TableFn::Recip: return 1.0 / x;
        case TableFn::Log: return std::log(x);
        case TableFn::Cos: return std::cos(x);
    }
    return 0.0;
}

int64_t LookupTable::lookup_raw(int64_t x_raw) const {
    if (x_raw < lo_raw || x_raw > hi_raw)
        throw TableDomainError(std::string(table_fn_name(fn)) + " lookup: input " +
                               std::to_string(x_raw) + " outside [" + std::to_string(lo_raw) +
                               ", " + std::to_string(hi_raw) + "]");
    return entries[static_cast<size_t>(x_raw - lo_raw)];
}

FxpValue LookupTable::apply(FxpValue x) const {
    if (!(x.fmt == fmt)) throw SchemaError("table apply: format mismatch");
    return FxpValue{lookup_raw(x.raw), fmt};
}

Digest LookupTable::entries_digest() const {
    Hasher h(Tag::Table);
    h.update_u8(static_cast<uint8_t>(fn));
    h.update_u8(fmt.int_bits);
    h.update_u8(fmt.frac_bits);
    h.update_i64(lo_raw);
    h.update_i64(hi_raw);
    h.update_i64(stride_raw);
    for (int64_t e : entries) h.update_i64(e);
    return h.finish();
}

LookupTable build_table(TableFn fn, FxpFormat fmt, double lo, double hi, double declared_bound) {
    fmt.validate();
    LookupTable t;
    t.fn = fn;
    t.fmt = fmt;
    t.lo_raw = quantize(lo, fmt).raw;
    t.hi_raw = quantize(hi, fmt).raw;
    t.stride_raw = 1;
    t.declared_bound = declared_bound;
    if (t.hi_raw < t.lo_raw) throw SchemaError("table domain inverted");
    size_t n = static_cast<size_t>(t.hi_raw - t.lo_raw) + 1;
    t.entries.resize(n);
    for (size_t i = 0; i < n; ++i) {
        double x = std::ldexp(static_cast<double>(t.lo_raw + static_cast<int64_t>(i)),
                              -static_cast<int>(fmt.frac_bits));
        t.entries[i] = quantize(table_fn_eval(fn, x), fmt).raw;
    }
    return t;
}

double certify_table(const LookupTable& t) {
    double worst = 0.0;
    for (size_t i = 0; i < t.entries.size(); ++i) {
        double x = std::ldexp(static_cast<double>(t.lo_raw + static_cast<int64_t>(i)),
                              -static_cast<int>(t.fmt.frac_bits));
        double stored = std::ldexp(static_cast<double>(t.entries[i]),
                                   -static_cast<int>(t.fmt.frac_bits));
        double err = std::abs(stored - table_fn_eval(t.fn, x));
        if (err > worst) worst = err;
    }
    return worst;
}

const LookupTable& TableSet::by_fn(TableFn fn) const {
    switch (fn) {
        case TableFn::Exp: return exp;
        case TableFn::Gelu: return gelu;
        case TableFn::GeluGrad: return gelu_grad;
        case TableFn::Rsqrt: return rsqrt;
        case TableFn::Recip: return recip;
        case TableFn::Log: return log;
        case TableFn::Cos: return cos;
    }
    throw SchemaError("unknown table fn");
}

LookupTable& TableSet::by_fn(TableFn fn) {
    return const_cast<LookupTable&>(static_cast<const TableSet*>(this)->by_fn(fn));
}

TableSet TableSet::build(const PolicyManifest& m) {
    FxpFormat fmt = m.fxp;
    // Declared bound: half an ulp of stored-value quantization plus margin
    // for reference-function rounding differences between builders.
    double bound = std::ldexp(1.0, -(static_cast<int>(fmt.frac_bits) + 1)) + 1e-9;
    if (bound > m.budgets.table_bound)
        throw SchemaError("fxp format too coarse for the declared table budget");
    TableSet t;
    t.fmt = fmt;
    t.exp = build_table(TableFn::Exp, fmt, m.budgets.clip_lo, m.budgets.clip_hi, bound);
    t.gelu = build_table(TableFn::Gelu, fmt, m.budgets.clip_lo, m.budgets.clip_hi, bound);
    t.gelu_grad = build_table(TableFn::GeluGrad, fmt, m.budgets.clip_lo, m.budgets.clip_hi, bound);
    t.rsqrt = build_table(TableFn::Rsqrt, fmt, 1.0, 4.0, bound);
    t.recip = build_table(TableFn::Recip, fmt, 1.0, 2.0, bound);
    t.log = build_table(TableFn::Log, fmt, 1.0, 2.0, bound);
    t.pi = quantize(M_PI, fmt);
    t.cos = build_table(TableFn::Cos, fmt, 0.0, t.pi.to_double(), bound);
    t.ln2 = quantize(std::log(2.0), fmt);
    return t;
}

// Position of the value's leading bit relative to the binary point:
// x in [2^e, 2^(e+1)).
static int value_exponent(int64_t raw, FxpFormat fmt) {
    int msb = 63 - __builtin_clzll(static_cast<unsigned long long>(raw));
    return msb - static_cast<int>(fmt.frac_bits);
}

static int64_t shift_signed(int64_t raw, int k, FxpFormat fmt, const char* what) {
    // Multiply by 2^-k: right shift rounds half-to-even, left shift is exact
    // but range-checked.
    if (k >= 0) return shift_right_round_half_even(raw, static_cast<unsigned>(k));
    __int128 wide = static_cast<__int128>(raw) << static_cast<unsigned>(-k);
    return checked_raw(wide, fmt, what);
}

FxpValue rsqrt_pos(const TableSet& t, FxpValue x, ErrorBudget* budget) {
    if (x.raw <= 0) throw TableDomainError("rsqrt: input must be positive");
    int e = value_exponent(x.raw, t.fmt);
    int k = e >> 1; // floor(e/2): x * 4^-k lands in [1, 4)
    int64_t s_raw = shift_signed(x.raw, 2 * k, t.fmt, "rsqrt reduce");
    int64_t r_raw = t.rsqrt.lookup_raw(s_raw);
    int64_t out = shift_signed(r_raw, k, t.fmt, "rsqrt expand");
    if (budget) {
        double scale_up = k < 0 ? std::ldexp(1.0, -k) : 1.0;
        budget->add_table(t.rsqrt.declared_bound * scale_up, 1);
        budget->add_mul(t.fmt, 2);
    }
    return FxpValue{checked_raw(out, t.fmt, "rsqrt"), t.fmt};
}

FxpValue recip_pos(const TableSet& t, FxpValue x, ErrorBudget* budget) {
    if (x.raw <= 0) throw TableDomainError("recip: input must be positive");
    int k = value_exponent(x.raw, t.fmt); // x * 2^-k in [1, 2)
    int64_t s_raw = shift_signed(x.raw, k, t.fmt, "recip reduce");
    int64_t r_raw = t.recip.lookup_raw(s_raw);
    int64_t out = shift_signed(r_raw, k, t.fmt, "recip expand");
    if (budget) {
        double scale_up = k < 0 ? std::ldexp(1.0, -k) : 1.0;
        budget->add_table(t.recip.declared_bound * scale_up, 1);
        budget->add_mul(t.fmt, 2);
    }
    return FxpValue{checked_raw(out, t.fmt, "recip"), t.fmt};
}

FxpValue log_pos(const TableSet& t, FxpValue x, ErrorBudget* budget) {
    if (x.raw <= 0) throw TableDomainError("log: input must be positive");
    int k = value_exponent(x.raw, t.fmt); // x = s * 2^k with s in [1, 2)
    int64_t s_raw = shift_signed(x.raw, k, t.fmt, "log reduce");
    int64_t base = t.log.lookup_raw(s_raw);
    __int128 out = static_cast<__int128>(base) + static_cast<__int128>(k) * t.ln2.raw;
    if (budget) {
        budget->add_table(t.log.declared_bound, 1);
        budget->add_mul(t.fmt, 1);
        budget->add_quantize(t.fmt, static_cast<uint64_t>(k < 0 ? -k : k));
    }
    return FxpValue{checked_raw(out, t.fmt, "log"), t.fmt};
}

FxpValue cos_approx(const TableSet& t, FxpValue x, ErrorBudget* budget) {
    if (budget) budget->add_table(t.cos.declared_bound, 1);
    return t.cos.apply(x);
}

static FxpValue clipped_apply(const LookupTable& tab, FxpValue x, ErrorBudget* budget) {
    int64_t raw = x.raw;
    if (raw < tab.lo_raw) raw = tab.lo_raw;
    if (raw > tab.hi_raw) raw = tab.hi_raw;
    if (budget) budget->add_table(tab.declared_bound, 1);
    return FxpValue{tab.lookup_raw(raw), tab.fmt};
}

FxpValue exp_clipped(const TableSet& t, FxpValue x, ErrorBudget* budget) {
    return clipped_apply(t.exp, x, budget);
}

FxpValue gelu_clipped(const TableSet& t, FxpValue x, ErrorBudget* budget) {
    return clipped_apply(t.gelu, x, budget);
}

FxpValue gelu_grad_clipped(const TableSet& t, FxpValue x, ErrorBudget* budget) {
    return clipped_apply(t.gelu_grad, x, budget);
}

static constexpr char kTableMagic[4] = {'V', 'F', 'T', 'L'};
static constexpr uint16_t kTableVersion = 1;

static void write_one(ByteWriter& w, const LookupTable& t) {
    w.u8(static_cast<uint8_t>(t.fn));
    w.i64(t.lo_raw);
    w.i64(t.hi_raw);
    w.i64(t.stride_raw);
    uint64_t bits;
    std::memcpy(&bits, &t.declared_bound, sizeof(bits));
    w.u64(bits);
    w.u64(t.entries.size());
    for (int64_t e : t.entries) w.i64(e);
}

Bytes serialize_tables(const TableSet& t) {
    ByteWriter w;
    w.raw(kTableMagic, 4);
    w.u16(kTableVersion);
    w.u8(t.fmt.int_bits);
    w.u8(t.fmt.frac_bits);
    w.i64(t.ln2.raw);
    w.i64(t.pi.raw);
    w.u8(7);
    for (TableFn fn : {TableFn::Exp, TableFn::Gelu, TableFn::GeluGrad, TableFn::Rsqrt,
                       TableFn::Recip, TableFn::Log, TableFn::Cos})
        write_one(w, t.by_fn(fn));
    return w.take();
}

TableSet parse_tables(std::span<const uint8_t> data, const PolicyManifest& m) {
    ByteReader r(data);
    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, kTableMagic, 4) != 0) throw IoError("tables: bad magic");
    if (r.u16() != kTableVersion) throw IoError("tables: unsupported version");
    FxpFormat fmt = FxpFormat::make(r.u8(), r.u8());
    if (!(fmt == m.fxp)) throw IoError("tables: format disagrees with manifest");
    TableSet t;
    t.fmt = fmt;
    t.ln2 = FxpValue::from_raw(r.i64(), fmt);
    t.pi = FxpValue::from_raw(r.i64(), fmt);
    uint8_t count = r.u8();
    if (count != 7) throw IoError("tables: expected 7 tables");
    for (int i = 0; i < 7; ++i) {
        LookupTable tab;
        uint8_t fn = r.u8();
        if (fn > static_cast<uint8_t>(TableFn::Cos)) throw IoError("tables: unknown function id");
        tab.fn = static_cast<TableFn>(fn);
        tab.fmt = fmt;
        tab.lo_raw = r.i64();
        tab.hi_raw = r.i64();
        tab.stride_raw = r.i64();
        if (tab.stride_raw != 1) throw IoError("tables: stride must be one raw unit");
        uint64_t bits = r.u64();
        std::memcpy(&tab.declared_bound, &bits, sizeof(bits));
        uint64_t n = r.u64();
        if (tab.hi_raw < tab.lo_raw ||
            n != static_cast<uint64_t>(tab.hi_raw - tab.lo_raw) + 1)
            throw IoError("tables: entry count disagrees with domain");
        tab.entries.resize(n);
        for (auto& e : tab.entries) e = r.i64();
        t.by_fn(tab.fn) = std::move(tab);
    }
    r.expect_done("tables");
    return t;
}

void write_tables_file(const TableSet& t, const std::string& path) {
    Bytes data = serialize_tables(t);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write tables: " + path);
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError("short write: " + path);
}

TableSet read_tables_file(const std::string& path, const PolicyManifest& m) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open tables: " + path);
    Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_tables(data, m);
}

} // namespace vft
