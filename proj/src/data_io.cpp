#include "phenoflow/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace phenoflow {

namespace {

void check_ids(const ScreenSpec& spec, std::int64_t perturbation, std::int64_t context) {
    if (perturbation < 0 || perturbation >= spec.perturbations) {
        throw ContractError("screen: perturbation id " + std::to_string(perturbation) +
                            " outside [0, " + std::to_string(spec.perturbations) + ")");
    }
    if (context < 0 || context >= spec.contexts) {
        throw ContractError("screen: context id " + std::to_string(context) + " outside [0, " +
                            std::to_string(spec.contexts) + ")");
    }
}

}  // namespace

ScreenSpec ScreenSpec::make(const Params& p) {
    if (p.perturbations < 1 || p.contexts < 1) {
        throw ContractError("screen: need at least one perturbation and one context");
    }
    for (std::int64_t h : p.holdout) {
        if (h < 1 || h >= p.perturbations) {
            throw ContractError("screen: holdout id " + std::to_string(h) +
                                " must lie in [1, P)");
        }
    }
    ScreenSpec spec;
    spec.sample_shape = p.sample_shape;
    spec.perturbations = p.perturbations;
    spec.contexts = p.contexts;
    spec.sigma = p.sigma;
    spec.holdout = p.holdout;
    spec.phi_noise = p.phi_noise;
    spec.phi_informative = p.phi_informative;
    spec.seed = p.seed;

    const std::int64_t d = numel(p.sample_shape);
    Rng mu_rng = Rng::stream(p.seed, 1);
    spec.mu.push_back(Tensor::zeros({d}));  // control
    for (std::int64_t i = 1; i < p.perturbations; ++i) {
        spec.mu.push_back(scale(Tensor::randn({d}, mu_rng), p.mean_scale));
    }
    Rng ctx_rng = Rng::stream(p.seed, 2);
    spec.ctx_offset.push_back(Tensor::zeros({d}));  // neutral context
    spec.ctx_scale.push_back(Tensor::full({d}, 1.0));
    for (std::int64_t e = 1; e < p.contexts; ++e) {
        spec.ctx_offset.push_back(scale(Tensor::randn({d}, ctx_rng), p.offset_scale));
        Tensor s = Tensor::randn({d}, ctx_rng);
        auto sv = s.values_mut();
        for (double& v : sv) v = std::exp(p.scale_jitter * v);
        spec.ctx_scale.push_back(s);
    }
    Rng phi_rng = Rng::stream(p.seed, 3);
    for (std::int64_t i = 0; i < p.perturbations; ++i) {
        if (p.phi_informative) {
            Tensor f = spec.mu[static_cast<std::size_t>(i)].clone();
            if (p.phi_noise > 0.0) {
                f = add(f, scale(Tensor::randn({d}, phi_rng), p.phi_noise));
            }
            spec.phi.push_back(f);
        } else {
            spec.phi.push_back(Tensor::randn({d}, phi_rng));
        }
    }
    return spec;
}

bool ScreenSpec::is_holdout(std::int64_t p) const {
    return std::find(holdout.begin(), holdout.end(), p) != holdout.end();
}

std::vector<std::int64_t> ScreenSpec::seen_perturbations() const {
    std::vector<std::int64_t> seen;
    for (std::int64_t p = 0; p < perturbations; ++p) {
        if (!is_holdout(p)) seen.push_back(p);
    }
    return seen;
}

Tensor ScreenSpec::conditional_mean(std::int64_t perturbation, std::int64_t context) const {
    check_ids(*this, perturbation, context);
    return add(mul(ctx_scale[static_cast<std::size_t>(context)],
                   mu[static_cast<std::size_t>(perturbation)]),
               ctx_offset[static_cast<std::size_t>(context)]);
}

Tensor sample_screen(const ScreenSpec& spec, std::int64_t perturbation, std::int64_t context,
                     std::int64_t n, Rng& rng) {
    check_ids(spec, perturbation, context);
    if (n <= 0) throw ContractError("sample_screen: n must be positive");
    const std::int64_t d = spec.dim();
    auto muv = spec.mu[static_cast<std::size_t>(perturbation)].values();
    auto bv = spec.ctx_offset[static_cast<std::size_t>(context)].values();
    auto sv = spec.ctx_scale[static_cast<std::size_t>(context)].values();
    std::vector<double> out(static_cast<std::size_t>(n * d));
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < d; ++j) {
            const auto ji = static_cast<std::size_t>(j);
            out[static_cast<std::size_t>(i * d + j)] =
                sv[ji] * (muv[ji] + spec.sigma * rng.normal()) + bv[ji];
        }
    }
    return Tensor({n, d}, std::move(out));
}

Tensor sample_screen_one(const ScreenSpec& spec, std::int64_t perturbation, std::int64_t context,
                         Rng& rng) {
    Tensor row = sample_screen(spec, perturbation, context, 1, rng);
    return reshape(row, spec.sample_shape);
}

// ---------------------------------------------------------------------------

const Tensor& cp2rgb_weights() {
    static const Tensor weights({6, 3}, {
                                            0.0, 0.0, 1.0,  // Hoechst -> Blue
                                            0.0, 1.0, 0.0,  // ConA -> Green
                                            1.0, 0.0, 0.0,  // Phalloidin -> Red
                                            0.0, 0.5, 0.5,  // Syto14 -> Cyan
                                            0.5, 0.0, 0.5,  // MitoTracker -> Magenta
                                            0.5, 0.5, 0.0,  // WGA -> Yellow
                                        });
    return weights;
}

Tensor cp2rgb(const Tensor& images) {
    if (images.rank() != 4 || images.shape()[1] != 6) {
        throw ContractError("cp2rgb: expected [B,6,H,W], got " + shape_str(images.shape()));
    }
    const std::int64_t b = images.shape()[0];
    const std::int64_t h = images.shape()[2];
    const std::int64_t w = images.shape()[3];
    const std::int64_t hw = h * w;
    auto iv = images.values();
    auto wv = cp2rgb_weights().values();
    std::vector<double> out(static_cast<std::size_t>(b * 3 * hw), 0.0);
    for (std::int64_t bi = 0; bi < b; ++bi) {
        for (std::int64_t n = 0; n < 3; ++n) {
            double* dst = &out[static_cast<std::size_t>((bi * 3 + n) * hw)];
            for (std::int64_t c = 0; c < 6; ++c) {
                const double weight = wv[static_cast<std::size_t>(c * 3 + n)];
                if (weight == 0.0) continue;
                const double* src = &iv[static_cast<std::size_t>((bi * 6 + c) * hw)];
                for (std::int64_t p = 0; p < hw; ++p) dst[p] += weight * src[p];
            }
        }
    }
    return Tensor({b, 3, h, w}, std::move(out));
}

double estimate_train_flops(double flops_per_fwd_per_image, double global_batch, double steps) {
    if (flops_per_fwd_per_image < 0 || global_batch < 0 || steps < 0) {
        throw ContractError("estimate_train_flops: inputs must be non-negative");
    }
    return flops_per_fwd_per_image * global_batch * steps * 3.0 / 1e18;
}

// ---------------------------------------------------------------------------
// Tensor file format
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'F', 'L', 'T', '1'};

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
}

std::uint32_t get_u32(const std::vector<unsigned char>& in, std::size_t pos) {
    return static_cast<std::uint32_t>(in[pos]) | (static_cast<std::uint32_t>(in[pos + 1]) << 8) |
           (static_cast<std::uint32_t>(in[pos + 2]) << 16) |
           (static_cast<std::uint32_t>(in[pos + 3]) << 24);
}

}  // namespace

std::vector<unsigned char> encode_tensor(const Tensor& t) {
    if (!t.all_finite()) throw ContractError("write_tensor: refusing to write non-finite values");
    std::vector<unsigned char> out;
    out.reserve(8 + 4 * t.shape().size() + 8 * static_cast<std::size_t>(t.size()));
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::int64_t e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (double v : t.values()) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        for (int b = 0; b < 8; ++b) {
            out.push_back(static_cast<unsigned char>((bits >> (8 * b)) & 0xff));
        }
    }
    return out;
}

Tensor decode_tensor(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < 8) throw FormatError("tensor file truncated in header", 0);
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw FormatError("bad magic; expected FLT1", 0);
    }
    const std::uint32_t rank = get_u32(bytes, 4);
    if (rank > 8) throw FormatError("implausible rank " + std::to_string(rank), 4);
    std::size_t pos = 8;
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) {
        if (bytes.size() < pos + 4) {
            throw FormatError("tensor file truncated in extents", static_cast<long long>(pos));
        }
        shape.push_back(static_cast<std::int64_t>(get_u32(bytes, pos)));
        pos += 4;
    }
    const std::int64_t n = numel(shape);
    if (bytes.size() != pos + 8 * static_cast<std::size_t>(n)) {
        throw FormatError("payload length mismatch: expected " + std::to_string(8 * n) +
                              " bytes, file has " + std::to_string(bytes.size() - pos),
                          static_cast<long long>(pos));
    }
    std::vector<double> values(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) {
            bits |= static_cast<std::uint64_t>(bytes[pos + static_cast<std::size_t>(8 * i + b)])
                    << (8 * b);
        }
        std::memcpy(&values[static_cast<std::size_t>(i)], &bits, 8);
    }
    return Tensor(std::move(shape), std::move(values));
}

void write_tensor(const std::string& path, const Tensor& t) {
    const std::vector<unsigned char> bytes = encode_tensor(t);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("write_tensor: cannot open " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("write_tensor: short write to " + path);
}

Tensor read_tensor(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw DataError("read_tensor: cannot open " + path);
    const std::streamsize size = f.tellg();
    f.seekg(0);
    std::vector<unsigned char> bytes(static_cast<std::size_t>(size));
    if (size > 0) f.read(reinterpret_cast<char*>(bytes.data()), size);
    if (!f) throw DataError("read_tensor: short read from " + path);
    return decode_tensor(bytes);
}

}  // namespace phenoflow
