#include "aquakv/quantizer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <sstream>

#include "aquakv/bitpack.hpp"
#include "aquakv/binary_io.hpp"
#include "aquakv/hadamard.hpp"
#include "aquakv/half.hpp"
#include "aquakv/parallel.hpp"

namespace aquakv {

void UniformConfig::validate() const {
    require(bits >= 1 && bits <= 8, ErrorKind::config, "uniform bits must be in [1, 8]");
    require(group_size >= 1, ErrorKind::config, "group size must be >= 1");
}

int VQConfig::index_bits() const { return std::countr_zero(static_cast<unsigned>(codebook_size)); }

double VQConfig::bits_per_value() const { return static_cast<double>(index_bits()) / dim; }

void VQConfig::validate() const {
    require(dim == 1 || dim == 2 || dim == 4, ErrorKind::config, "VQ dimension must be 1, 2 or 4");
    require(codebook_size >= 2 && codebook_size <= 256 && std::has_single_bit(static_cast<unsigned>(codebook_size)),
            ErrorKind::config, "VQ codebook size must be a power of two in [2, 256]");
    require(group_size >= dim && group_size % dim == 0, ErrorKind::config,
            "VQ group size must be a positive multiple of the dimension");
}

VQConfig VQConfig::preset(int bits, int dim) {
    VQConfig cfg;
    cfg.dim = dim;
    if (dim == 2 && bits >= 2 && bits <= 4) {
        cfg.codebook_size = 1 << (2 * bits);
    } else if (dim == 4 && bits == 2) {
        cfg.codebook_size = 256;
    } else {
        fail(ErrorKind::config, "no VQ preset for " + std::to_string(bits) + " bits at d=" + std::to_string(dim) +
                                    " (supported: d=2 with 2/3/4 bits, d=4 with 2 bits)");
    }
    return cfg;
}

std::uint64_t QuantizedBlock::stored_bits() const {
    if (scheme == Scheme::raw) {
        return std::uint64_t{16} * rows * cols;
    }
    return payload_bits +
           16u * static_cast<std::uint64_t>(scales.size() + zero_points.size() + tail_scales.size() +
                                            tail_zero_points.size());
}

namespace {

// Shared reconstruction expression for every uniform code.
inline float uniform_value(std::uint32_t code, float scale, float zero) {
    return static_cast<float>(code) * scale + zero;
}

struct UniformGroup {
    std::uint16_t scale;
    std::uint16_t zero;
};

UniformGroup uniform_params(std::span<const float> x, int bits) {
    float lo = x[0];
    float hi = x[0];
    for (float v : x) {
        require(std::isfinite(v), ErrorKind::shape, "non-finite value passed to quantizer");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const auto qmax = static_cast<float>((1u << bits) - 1u);
    const std::uint16_t zero = float_to_half(lo);
    const std::uint16_t scale = hi == lo ? std::uint16_t{0} : float_to_half((hi - lo) / qmax);
    require(std::isfinite(half_to_float(zero)) && std::isfinite(half_to_float(scale)), ErrorKind::shape,
            "quantizer input exceeds the binary16 scale range");
    return {scale, zero};
}

void uniform_encode(std::span<const float> x, UniformGroup g, int bits, BitWriter& w) {
    const float scale = half_to_float(g.scale);
    const float zero = half_to_float(g.zero);
    const auto qmax = static_cast<long>((1u << bits) - 1u);
    for (float v : x) {
        long code = 0;
        if (scale != 0.0f) {
            code = std::clamp(std::lrint((v - zero) / scale), 0L, qmax);
        }
        w.put(static_cast<std::uint32_t>(code), static_cast<unsigned>(bits));
    }
}

void uniform_decode(std::span<float> out, UniformGroup g, int bits, BitReader& r) {
    const float scale = half_to_float(g.scale);
    const float zero = half_to_float(g.zero);
    for (auto& v : out) {
        v = uniform_value(r.get(static_cast<unsigned>(bits)), scale, zero);
    }
}

// Per-token quantization of the rows of x; per-channel callers pass x^T.
QuantizedBlock uniform_rows(const Matrix& x, int bits, int group_size, Scheme scheme) {
    QuantizedBlock qb;
    qb.scheme = scheme;
    qb.code_bits = static_cast<std::uint8_t>(bits);
    qb.group_size = static_cast<std::uint32_t>(group_size);
    const std::size_t gs = static_cast<std::size_t>(group_size);
    const std::size_t groups_per_row = x.cols() == 0 ? 0 : (x.cols() + gs - 1) / gs;
    qb.n_groups = static_cast<std::uint32_t>(groups_per_row * x.rows());
    qb.scales.resize(qb.n_groups);
    qb.zero_points.resize(qb.n_groups);
    BitWriter w;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto row = x.row(r);
        for (std::size_t g = 0; g < groups_per_row; ++g) {
            const std::size_t begin = g * gs;
            const auto group = row.subspan(begin, std::min(gs, row.size() - begin));
            const auto params = uniform_params(group, bits);
            qb.scales[r * groups_per_row + g] = params.scale;
            qb.zero_points[r * groups_per_row + g] = params.zero;
            uniform_encode(group, params, bits, w);
        }
    }
    qb.payload_bits = w.bit_length();
    qb.payload = std::move(w).finish();
    return qb;
}

Matrix uniform_rows_decode(const QuantizedBlock& qb, std::size_t rows, std::size_t cols) {
    const std::size_t gs = qb.group_size;
    require(gs >= 1, ErrorKind::format, "uniform block has zero group size");
    const std::size_t groups_per_row = cols == 0 ? 0 : (cols + gs - 1) / gs;
    require(qb.n_groups == groups_per_row * rows && qb.scales.size() == qb.n_groups &&
                qb.zero_points.size() == qb.n_groups,
            ErrorKind::format, "uniform block group table does not match its shape");
    require(qb.payload_bits == static_cast<std::uint64_t>(rows) * cols * qb.code_bits &&
                qb.payload.size() == (qb.payload_bits + 7) / 8,
            ErrorKind::format, "corrupted payload length in uniform block");
    Matrix out(rows, cols);
    BitReader reader(qb.payload);
    for (std::size_t r = 0; r < rows; ++r) {
        auto row = out.row(r);
        for (std::size_t g = 0; g < groups_per_row; ++g) {
            const std::size_t begin = g * gs;
            auto group = row.subspan(begin, std::min(gs, cols - begin));
            uniform_decode(group, {qb.scales[r * groups_per_row + g], qb.zero_points[r * groups_per_row + g]},
                           qb.code_bits, reader);
        }
    }
    return out;
}

}  // namespace

QuantizedBlock uniform_quantize(const Matrix& x, const UniformConfig& cfg) {
    cfg.validate();
    if (cfg.axis == QuantAxis::per_token) {
        QuantizedBlock qb = uniform_rows(x, cfg.bits, cfg.group_size, Scheme::uniform_token);
        qb.rows = static_cast<std::uint32_t>(x.rows());
        qb.cols = static_cast<std::uint32_t>(x.cols());
        return qb;
    }
    QuantizedBlock qb = uniform_rows(x.transposed(), cfg.bits, cfg.group_size, Scheme::uniform_channel);
    qb.rows = static_cast<std::uint32_t>(x.rows());
    qb.cols = static_cast<std::uint32_t>(x.cols());
    return qb;
}

Matrix uniform_dequantize(const QuantizedBlock& qb) {
    if (qb.scheme == Scheme::uniform_token) {
        return uniform_rows_decode(qb, qb.rows, qb.cols);
    }
    require(qb.scheme == Scheme::uniform_channel, ErrorKind::format, "block is not uniformly quantized");
    return uniform_rows_decode(qb, qb.cols, qb.rows).transposed();
}

namespace {

struct VqLayout {
    std::size_t group_size;
    std::size_t groups_per_row;
    std::size_t tail;  // values per row after the last whole sub-vector

    std::size_t group_begin(std::size_t g) const { return g * group_size; }
    std::size_t group_length(std::size_t g, std::size_t cols) const {
        return std::min(group_size, cols - group_begin(g));
    }
};

VqLayout vq_layout(std::size_t cols, std::size_t group_size, std::size_t dim) {
    VqLayout l{group_size, cols == 0 ? 0 : (cols + group_size - 1) / group_size, 0};
    if (l.groups_per_row > 0) {
        l.tail = l.group_length(l.groups_per_row - 1, cols) % dim;
    }
    return l;
}

}  // namespace

QuantizedBlock vq_quantize(const Matrix& x, const VQConfig& cfg, const Codebook& cb) {
    cfg.validate();
    require(cb.dim == cfg.dim && cb.size == cfg.codebook_size, ErrorKind::config,
            "codebook does not match VQ configuration");
    const std::size_t d = static_cast<std::size_t>(cfg.dim);
    const std::size_t cols = x.cols();
    const VqLayout layout = vq_layout(cols, static_cast<std::size_t>(cfg.group_size), d);
    const unsigned width = static_cast<unsigned>(cfg.index_bits());

    QuantizedBlock qb;
    qb.scheme = Scheme::vq;
    qb.code_bits = static_cast<std::uint8_t>(width);
    qb.rows = static_cast<std::uint32_t>(x.rows());
    qb.cols = static_cast<std::uint32_t>(cols);
    qb.group_size = static_cast<std::uint32_t>(cfg.group_size);
    qb.n_groups = static_cast<std::uint32_t>(layout.groups_per_row * x.rows());
    qb.vq_dim = static_cast<std::uint8_t>(d);
    qb.vq_seed = cfg.seed;
    qb.codebook_seed = cfg.codebook_seed;
    qb.tail_length = static_cast<std::uint32_t>(layout.tail);
    qb.scales.resize(qb.n_groups);
    if (layout.tail > 0) {
        qb.tail_scales.resize(x.rows());
        qb.tail_zero_points.resize(x.rows());
    }

    BitWriter w;
    std::vector<float> y;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto row = x.row(r);
        for (std::size_t g = 0; g < layout.groups_per_row; ++g) {
            const std::size_t begin = layout.group_begin(g);
            const std::size_t len = layout.group_length(g, cols);
            const std::size_t main = len - len % d;
            y.assign(row.begin() + static_cast<std::ptrdiff_t>(begin),
                     row.begin() + static_cast<std::ptrdiff_t>(begin + main));
            for (float v : y) {
                require(std::isfinite(v), ErrorKind::shape, "non-finite value passed to quantizer");
            }
            rht_forward(y, cfg.seed, begin);
            double energy = 0.0;
            for (float v : y) {
                energy += static_cast<double>(v) * v;
            }
            const std::uint16_t scale_bits =
                main == 0 ? std::uint16_t{0} : float_to_half(static_cast<float>(std::sqrt(energy / main)));
            const float scale = half_to_float(scale_bits);
            require(std::isfinite(scale), ErrorKind::shape, "quantizer input exceeds the binary16 scale range");
            qb.scales[r * layout.groups_per_row + g] = scale_bits;
            float sub[8];
            for (std::size_t k = 0; k < main; k += d) {
                std::uint32_t code = 0;
                if (scale != 0.0f) {
                    for (std::size_t j = 0; j < d; ++j) {
                        sub[j] = y[k + j] / scale;
                    }
                    code = cb.nearest({sub, d});
                }
                w.put(code, width);
            }
            if (main < len) {
                const auto tail = row.subspan(begin + main, len - main);
                const auto params = uniform_params(tail, kVqTailBits);
                qb.tail_scales[r] = params.scale;
                qb.tail_zero_points[r] = params.zero;
                uniform_encode(tail, params, kVqTailBits, w);
            }
        }
    }
    qb.payload_bits = w.bit_length();
    qb.payload = std::move(w).finish();
    return qb;
}

Matrix vq_dequantize(const QuantizedBlock& qb, const Codebook& cb) {
    require(qb.scheme == Scheme::vq, ErrorKind::format, "block is not vector quantized");
    const std::size_t d = qb.vq_dim;
    require(cb.dim == static_cast<int>(d) && (1u << qb.code_bits) == static_cast<unsigned>(cb.size),
            ErrorKind::format, "codebook does not match block header");
    require(qb.group_size >= 1 && d >= 1, ErrorKind::format, "VQ block has an invalid header");
    const std::size_t rows = qb.rows;
    const std::size_t cols = qb.cols;
    const VqLayout layout = vq_layout(cols, qb.group_size, d);
    require(qb.n_groups == layout.groups_per_row * rows && qb.scales.size() == qb.n_groups &&
                qb.tail_length == layout.tail,
            ErrorKind::format, "VQ block group table does not match its shape");
    require(layout.tail == 0 || (qb.tail_scales.size() == rows && qb.tail_zero_points.size() == rows),
            ErrorKind::format, "VQ block tail table does not match its shape");
    const std::uint64_t expected_bits =
        static_cast<std::uint64_t>(rows) *
        ((cols - layout.tail) / d * qb.code_bits + layout.tail * static_cast<std::uint64_t>(kVqTailBits));
    require(qb.payload_bits == expected_bits && qb.payload.size() == (expected_bits + 7) / 8, ErrorKind::format,
            "corrupted payload length in VQ block");

    Matrix out(rows, cols);
    BitReader reader(qb.payload);
    std::vector<float> y;
    for (std::size_t r = 0; r < rows; ++r) {
        auto row = out.row(r);
        for (std::size_t g = 0; g < layout.groups_per_row; ++g) {
            const std::size_t begin = layout.group_begin(g);
            const std::size_t len = layout.group_length(g, cols);
            const std::size_t main = len - len % d;
            const float scale = half_to_float(qb.scales[r * layout.groups_per_row + g]);
            y.resize(main);
            for (std::size_t k = 0; k < main; k += d) {
                const auto code = reader.get(qb.code_bits);
                const auto point = cb.point(code);
                for (std::size_t j = 0; j < d; ++j) {
                    y[k + j] = point[j] * scale;
                }
            }
            if (scale == 0.0f) {
                std::fill(y.begin(), y.end(), 0.0f);
            } else {
                rht_inverse(y, qb.vq_seed, begin);
            }
            std::copy(y.begin(), y.end(), row.begin() + static_cast<std::ptrdiff_t>(begin));
            if (main < len) {
                uniform_decode(row.subspan(begin + main, len - main), {qb.tail_scales[r], qb.tail_zero_points[r]},
                               kVqTailBits, reader);
            }
        }
    }
    return out;
}

QuantizedBlock raw_store(const Matrix& x) {
    QuantizedBlock qb;
    qb.scheme = Scheme::raw;
    qb.code_bits = 32;
    qb.rows = static_cast<std::uint32_t>(x.rows());
    qb.cols = static_cast<std::uint32_t>(x.cols());
    ByteWriter w;
    w.f32s(x.values());
    qb.payload = std::move(w).take();
    qb.payload_bits = static_cast<std::uint64_t>(qb.payload.size()) * 8;
    return qb;
}

namespace {
Matrix raw_load(const QuantizedBlock& qb) {
    require(qb.payload.size() == static_cast<std::size_t>(qb.rows) * qb.cols * 4, ErrorKind::format,
            "corrupted payload length in raw block");
    Matrix out(qb.rows, qb.cols);
    ByteReader r(qb.payload, "raw block");
    r.f32s(out.values());
    return out;
}
}  // namespace

Matrix dequantize(const QuantizedBlock& qb) {
    switch (qb.scheme) {
        case Scheme::uniform_token:
        case Scheme::uniform_channel:
            return uniform_dequantize(qb);
        case Scheme::vq: {
            require(qb.vq_dim >= 1 && qb.code_bits >= 1 && qb.code_bits <= 8, ErrorKind::format,
                    "VQ block has an invalid header");
            auto cb = gaussian_codebook(qb.vq_dim, 1 << qb.code_bits, qb.codebook_seed);
            return vq_dequantize(qb, *cb);
        }
        case Scheme::raw:
            return raw_load(qb);
    }
    fail(ErrorKind::format, "unknown block scheme");
}

void QuantizedBlock::serialize(ByteWriter& out) const {
    out.u8(static_cast<std::uint8_t>(scheme));
    out.u8(code_bits);
    out.u32(rows);
    out.u32(cols);
    out.u32(group_size);
    out.u32(n_groups);
    if (scheme == Scheme::vq) {
        out.u8(vq_dim);
        out.u64(vq_seed);
        out.u64(codebook_seed);
        out.u32(tail_length);
    }
    out.u16s(scales);
    if (scheme == Scheme::uniform_token || scheme == Scheme::uniform_channel) {
        out.u16s(zero_points);
    }
    if (scheme == Scheme::vq && tail_length > 0) {
        out.u16s(tail_scales);
        out.u16s(tail_zero_points);
    }
    out.u64(payload_bits);
    out.raw(payload);
}

QuantizedBlock QuantizedBlock::deserialize(ByteReader& in) {
    QuantizedBlock qb;
    const auto scheme = in.u8();
    require(scheme <= static_cast<std::uint8_t>(Scheme::raw), ErrorKind::format, "unknown block scheme");
    qb.scheme = static_cast<Scheme>(scheme);
    qb.code_bits = in.u8();
    qb.rows = in.u32();
    qb.cols = in.u32();
    qb.group_size = in.u32();
    qb.n_groups = in.u32();
    require(qb.n_groups <= static_cast<std::uint64_t>(qb.rows) * qb.cols + 1, ErrorKind::format,
            "block group count is inconsistent with its shape");
    if (qb.scheme == Scheme::vq) {
        qb.vq_dim = in.u8();
        qb.vq_seed = in.u64();
        qb.codebook_seed = in.u64();
        qb.tail_length = in.u32();
    }
    if (qb.scheme != Scheme::raw) {
        require(in.remaining() >= 2u * qb.n_groups, ErrorKind::format, "block scale table truncated");
        qb.scales.resize(qb.n_groups);
        in.u16s(qb.scales);
    }
    if (qb.scheme == Scheme::uniform_token || qb.scheme == Scheme::uniform_channel) {
        require(in.remaining() >= 2u * qb.n_groups, ErrorKind::format, "block zero-point table truncated");
        qb.zero_points.resize(qb.n_groups);
        in.u16s(qb.zero_points);
    }
    if (qb.scheme == Scheme::vq && qb.tail_length > 0) {
        require(in.remaining() >= 4u * qb.rows, ErrorKind::format, "block tail table truncated");
        qb.tail_scales.resize(qb.rows);
        qb.tail_zero_points.resize(qb.rows);
        in.u16s(qb.tail_scales);
        in.u16s(qb.tail_zero_points);
    }
    qb.payload_bits = in.u64();
    const std::uint64_t bytes = (qb.payload_bits + 7) / 8;
    require(bytes <= in.remaining(), ErrorKind::format, "block payload truncated");
    auto payload = in.raw(static_cast<std::size_t>(bytes));
    qb.payload.assign(payload.begin(), payload.end());
    return qb;
}

Backbone::Backbone(std::variant<RawConfig, UniformConfig, VQConfig> cfg) : config_(std::move(cfg)) {
    if (auto* vq = std::get_if<VQConfig>(&config_)) {
        codebook_ = gaussian_codebook(vq->dim, vq->codebook_size, vq->codebook_seed);
    }
}

Backbone Backbone::uniform(UniformConfig cfg) {
    cfg.validate();
    return Backbone(cfg);
}

Backbone Backbone::vq(VQConfig cfg) {
    cfg.validate();
    return Backbone(cfg);
}

Backbone Backbone::raw() { return Backbone(RawConfig{}); }

Backbone Backbone::from_options(const std::string& kind, int bits, int group_size, int vq_dim, QuantAxis axis) {
    if (kind == "none" || bits >= 16) {
        return raw();
    }
    if (kind == "uniform") {
        UniformConfig cfg;
        cfg.bits = bits;
        cfg.axis = axis;
        if (group_size > 0) {
            cfg.group_size = group_size;
        }
        return uniform(cfg);
    }
    if (kind == "vq") {
        VQConfig cfg = VQConfig::preset(bits, vq_dim);
        if (group_size > 0) {
            cfg.group_size = group_size;
        }
        return vq(cfg);
    }
    fail(ErrorKind::config, "unknown backbone '" + kind + "' (expected uniform, vq or none)");
}

Backbone Backbone::with_bits(int bits) const {
    if (bits >= 16) {
        return raw();
    }
    if (const auto* u = std::get_if<UniformConfig>(&config_)) {
        UniformConfig cfg = *u;
        cfg.bits = bits;
        return uniform(cfg);
    }
    if (const auto* v = std::get_if<VQConfig>(&config_)) {
        // Higher-bit presets exist only at d=2.
        VQConfig cfg = VQConfig::preset(bits, v->dim == 4 && bits == 2 ? 4 : 2);
        cfg.group_size = v->group_size;
        cfg.seed = v->seed;
        cfg.codebook_seed = v->codebook_seed;
        return vq(cfg);
    }
    fail(ErrorKind::config, "a lossless backbone has no lower-bit variant");
}

QuantizedBlock Backbone::quantize(const Matrix& x) const {
    return std::visit(
        [&](const auto& cfg) -> QuantizedBlock {
            using T = std::decay_t<decltype(cfg)>;
            if constexpr (std::is_same_v<T, UniformConfig>) {
                return uniform_quantize(x, cfg);
            } else if constexpr (std::is_same_v<T, VQConfig>) {
                return vq_quantize(x, cfg, *codebook_);
            } else {
                require(x.all_finite(), ErrorKind::shape, "non-finite value passed to quantizer");
                return raw_store(x);
            }
        },
        config_);
}

Matrix Backbone::dequantize(const QuantizedBlock& qb) const {
    if (qb.scheme == Scheme::vq && codebook_) {
        return vq_dequantize(qb, *codebook_);
    }
    return aquakv::dequantize(qb);
}

Scheme Backbone::scheme() const {
    if (const auto* u = std::get_if<UniformConfig>(&config_)) {
        return u->axis == QuantAxis::per_token ? Scheme::uniform_token : Scheme::uniform_channel;
    }
    return std::holds_alternative<VQConfig>(config_) ? Scheme::vq : Scheme::raw;
}

std::string Backbone::kind() const {
    if (std::holds_alternative<UniformConfig>(config_)) {
        return "uniform";
    }
    return std::holds_alternative<VQConfig>(config_) ? "vq" : "none";
}

int Backbone::bits() const {
    if (const auto* u = std::get_if<UniformConfig>(&config_)) {
        return u->bits;
    }
    if (const auto* v = std::get_if<VQConfig>(&config_)) {
        return static_cast<int>(std::lround(v->bits_per_value()));
    }
    return 16;
}

double Backbone::code_bits_per_value() const {
    if (const auto* u = std::get_if<UniformConfig>(&config_)) {
        return u->bits;
    }
    if (const auto* v = std::get_if<VQConfig>(&config_)) {
        return v->bits_per_value();
    }
    return 16.0;
}

int Backbone::group_size() const {
    if (const auto* u = std::get_if<UniformConfig>(&config_)) {
        return u->group_size;
    }
    if (const auto* v = std::get_if<VQConfig>(&config_)) {
        return v->group_size;
    }
    return 0;
}

int Backbone::overhead_bits_per_group() const {
    if (std::holds_alternative<UniformConfig>(config_)) {
        return 32;  // binary16 scale + binary16 zero point
    }
    if (std::holds_alternative<VQConfig>(config_)) {
        return 16;
    }
    return 0;
}

std::string Backbone::describe() const {
    std::ostringstream os;
    if (const auto* u = std::get_if<UniformConfig>(&config_)) {
        os << "uniform(bits=" << u->bits << ",group=" << u->group_size
           << ",axis=" << (u->axis == QuantAxis::per_token ? "token" : "channel") << ")";
    } else if (const auto* v = std::get_if<VQConfig>(&config_)) {
        os << "vq(d=" << v->dim << ",n=" << v->codebook_size << ",group=" << v->group_size << ",seed=" << v->seed
           << ",codebook_seed=" << v->codebook_seed << ")";
    } else {
        os << "none(16-bit)";
    }
    return os.str();
}

std::uint64_t Backbone::hash() const { return fnv1a64(describe()); }

}  // namespace aquakv
