#include "phenoflow/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

namespace phenoflow {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void ensure_finite(const std::vector<double>& values, const char* op) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op) + ": produced non-finite values");
        }
    }
}

Tape* common_tape(std::initializer_list<const Tensor*> ts) {
    Tape* tape = nullptr;
    for (const Tensor* t : ts) {
        if (!t->on_tape()) continue;
        if (tape != nullptr && tape != t->tape()) {
            throw StateError("operands belong to different tapes");
        }
        tape = t->tape();
    }
    return tape;
}

int node_of(const Tensor& t, Tape* tape) { return (tape && t.tape() == tape) ? t.node() : -1; }

// Right operand may equal the left shape, or be the left shape with its
// leading dimension dropped (broadcast over rows).
bool row_broadcast(const Shape& a, const Shape& b) {
    if (a.size() != b.size() + 1 || a.empty()) return false;
    for (std::size_t i = 0; i < b.size(); ++i) {
        if (a[i + 1] != b[i]) return false;
    }
    return true;
}

std::int64_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

Tensor sum_rows_plain(std::span<const double> g, std::int64_t rows, std::int64_t inner,
                      Shape out_shape) {
    std::vector<double> acc(static_cast<std::size_t>(inner), 0.0);
    for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t j = 0; j < inner; ++j) {
            acc[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(r * inner + j)];
        }
    }
    return Tensor(std::move(out_shape), std::move(acc));
}

}  // namespace

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (std::int64_t e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
    for (std::int64_t e : shape_) {
        if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
    }
    if (numel(shape_) != static_cast<std::int64_t>(values.size())) {
        throw ShapeError("tensor data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape_));
    }
    data_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::zeros(Shape shape) {
    std::vector<double> v(static_cast<std::size_t>(numel(shape)), 0.0);
    return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::full(Shape shape, double value) {
    std::vector<double> v(static_cast<std::size_t>(numel(shape)), value);
    return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::randn(Shape shape, Rng& rng) {
    std::vector<double> v(static_cast<std::size_t>(numel(shape)));
    for (double& x : v) x = rng.normal();
    return Tensor(std::move(shape), std::move(v));
}

double Tensor::value() const {
    if (size() != 1) throw ContractError("value() requires a single-element tensor");
    return (*data_)[0];
}

double Tensor::at(std::int64_t i, std::int64_t j) const {
    if (rank() != 2) throw ShapeError("at(i,j) requires rank 2");
    if (i < 0 || i >= shape_[0] || j < 0 || j >= shape_[1]) {
        throw ShapeError("index out of bounds");
    }
    return (*data_)[static_cast<std::size_t>(i * shape_[1] + j)];
}

std::int64_t Tensor::check_index(std::int64_t i) const {
    if (i < 0 || i >= size()) throw ShapeError("flat index out of bounds");
    return i;
}

Tensor Tensor::clone() const {
    return Tensor(shape_, *data_);
}

Tensor Tensor::detached() const {
    Tensor t = *this;
    t.tape_ = nullptr;
    t.node_ = -1;
    return t;
}

bool Tensor::all_finite() const {
    for (double v : *data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

bool Tensor::same_values(const Tensor& other) const {
    return shape_ == other.shape_ && *data_ == *other.data_;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tensor Tape::watch(const Tensor& t) {
    const void* key = t.values().data();
    for (const auto& [ptr, node] : watched_) {
        if (ptr == key) {
            Tensor alias = t;
            alias.tape_ = this;
            alias.node_ = node;
            return alias;
        }
    }
    Tensor alias = t;
    alias.tape_ = this;
    alias.node_ = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{t.shape(), {}, nullptr});
    watched_.emplace_back(key, alias.node_);
    return alias;
}

Tensor Tape::record(Tensor value, std::vector<int> inputs, Vjp vjp) {
    value.tape_ = this;
    value.node_ = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{value.shape(), std::move(inputs), std::move(vjp)});
    return value;
}

void Tape::accumulate(int node, const Tensor& g) {
    if (grads_.empty()) {
        grads_.resize(nodes_.size());
        grad_set_.assign(nodes_.size(), false);
    }
    if (g.shape() != nodes_[static_cast<std::size_t>(node)].shape) {
        throw ShapeError("gradient shape mismatch during backward");
    }
    auto idx = static_cast<std::size_t>(node);
    if (!grad_set_[idx]) {
        grads_[idx] = g.clone();  // fresh storage: later accumulation is in place
        grad_set_[idx] = true;
        return;
    }
    auto dst = grads_[idx].values_mut();
    auto src = g.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::backward(const Tensor& loss) {
    if (backward_run_) throw StateError("backward already run on this tape; call reset() first");
    if (loss.tape_ != this || loss.node_ < 0) throw ContractError("loss is not on this tape");
    if (loss.size() != 1) throw ContractError("backward requires a scalar loss");

    grads_.assign(nodes_.size(), Tensor());
    grad_set_.assign(nodes_.size(), false);
    accumulate(loss.node_, Tensor(loss.shape(), std::vector<double>{1.0}));

    for (int i = loss.node_; i >= 0; --i) {
        auto idx = static_cast<std::size_t>(i);
        if (!grad_set_[idx] || !nodes_[idx].vjp) continue;
        std::vector<Tensor> gs = nodes_[idx].vjp(grads_[idx]);
        const auto& inputs = nodes_[idx].inputs;
        for (std::size_t j = 0; j < inputs.size(); ++j) {
            if (inputs[j] >= 0) accumulate(inputs[j], gs[j]);
        }
    }
    backward_run_ = true;
}

Tensor Tape::grad(const Tensor& t) const {
    if (!backward_run_) throw StateError("grad queried before backward");
    int node = -1;
    if (t.tape_ == this && t.node_ >= 0) {
        node = t.node_;
    } else {
        const void* key = t.values().data();
        for (const auto& [ptr, n] : watched_) {
            if (ptr == key) {
                node = n;
                break;
            }
        }
    }
    if (node < 0 || !grad_set_[static_cast<std::size_t>(node)]) {
        return Tensor::zeros(t.shape());
    }
    return grads_[static_cast<std::size_t>(node)].clone();
}

void Tape::reset() {
    grads_.clear();
    grad_set_.clear();
    backward_run_ = false;
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const std::int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
    auto av = a.values();
    auto bv = b.values();
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t p = 0; p < k; ++p) {
            const double aip = av[static_cast<std::size_t>(i * k + p)];
            if (aip == 0.0) continue;
            const double* brow = &bv[static_cast<std::size_t>(p * n)];
            double* orow = &out[static_cast<std::size_t>(i * n)];
            for (std::int64_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
    ensure_finite(out, "matmul");
    Tensor result({m, n}, std::move(out));
    Tape* tape = common_tape({&a, &b});
    if (!tape) return result;
    const int na = node_of(a, tape), nb = node_of(b, tape);
    Tensor sa = a.detached(), sb = b.detached();
    return tape->record(std::move(result), {na, nb}, [sa, sb, na, nb](const Tensor& g) {
        std::vector<Tensor> gs(2);
        if (na >= 0) gs[0] = matmul(g, transpose(sb));
        if (nb >= 0) gs[1] = matmul(transpose(sa), g);
        return gs;
    });
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: rank-2 tensor required");
    const std::int64_t m = a.shape()[0], n = a.shape()[1];
    std::vector<double> out(static_cast<std::size_t>(m * n));
    auto av = a.values();
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            out[static_cast<std::size_t>(j * m + i)] = av[static_cast<std::size_t>(i * n + j)];
        }
    }
    Tensor result({n, m}, std::move(out));
    Tape* tape = common_tape({&a});
    if (!tape) return result;
    return tape->record(std::move(result), {a.node()},
                        [](const Tensor& g) { return std::vector<Tensor>{transpose(g)}; });
}

namespace {

enum class BinKind { Add, Sub, Mul };

Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind, const char* name) {
    const bool same = a.shape() == b.shape();
    const bool bcast = !same && row_broadcast(a.shape(), b.shape());
    if (!same && !bcast) {
        throw ShapeError(std::string(name) + ": incompatible shapes " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
    const std::int64_t total = a.size();
    const std::int64_t inner = same ? total : b.size();
    auto av = a.values();
    auto bv = b.values();
    std::vector<double> out(static_cast<std::size_t>(total));
    for (std::int64_t i = 0; i < total; ++i) {
        const double x = av[static_cast<std::size_t>(i)];
        const double y = bv[static_cast<std::size_t>(i % inner)];
        switch (kind) {
            case BinKind::Add: out[static_cast<std::size_t>(i)] = x + y; break;
            case BinKind::Sub: out[static_cast<std::size_t>(i)] = x - y; break;
            case BinKind::Mul: out[static_cast<std::size_t>(i)] = x * y; break;
        }
    }
    ensure_finite(out, name);
    Tensor result(a.shape(), std::move(out));
    Tape* tape = common_tape({&a, &b});
    if (!tape) return result;
    const int na = node_of(a, tape), nb = node_of(b, tape);
    const std::int64_t rows = total / inner;
    Tensor sa = a.detached(), sb = b.detached();
    Shape bshape = b.shape();
    return tape->record(
        std::move(result), {na, nb},
        [=](const Tensor& g) {
            std::vector<Tensor> gs(2);
            auto gv = g.values();
            if (na >= 0) {
                switch (kind) {
                    case BinKind::Add: gs[0] = g; break;
                    case BinKind::Sub: gs[0] = g; break;
                    case BinKind::Mul: {
                        std::vector<double> da(static_cast<std::size_t>(total));
                        auto bvv = sb.values();
                        for (std::int64_t i = 0; i < total; ++i) {
                            da[static_cast<std::size_t>(i)] =
                                gv[static_cast<std::size_t>(i)] *
                                bvv[static_cast<std::size_t>(i % inner)];
                        }
                        gs[0] = Tensor(sa.shape(), std::move(da));
                        break;
                    }
                }
            }
            if (nb >= 0) {
                std::vector<double> db(static_cast<std::size_t>(inner), 0.0);
                auto avv = sa.values();
                for (std::int64_t i = 0; i < total; ++i) {
                    double contrib = gv[static_cast<std::size_t>(i)];
                    if (kind == BinKind::Sub) contrib = -contrib;
                    if (kind == BinKind::Mul) contrib *= avv[static_cast<std::size_t>(i)];
                    db[static_cast<std::size_t>(i % inner)] += contrib;
                }
                gs[1] = Tensor(bshape, std::move(db));
            }
            return gs;
        });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Mul, "mul"); }

namespace {

Tensor unary_map(const Tensor& a, const char* name, const std::function<double(double)>& fwd,
                 const std::function<double(double)>& dfdx) {
    std::vector<double> out(static_cast<std::size_t>(a.size()));
    auto av = a.values();
    for (std::int64_t i = 0; i < a.size(); ++i) {
        out[static_cast<std::size_t>(i)] = fwd(av[static_cast<std::size_t>(i)]);
    }
    ensure_finite(out, name);
    Tensor result(a.shape(), std::move(out));
    Tape* tape = common_tape({&a});
    if (!tape) return result;
    Tensor sa = a.detached();
    return tape->record(std::move(result), {a.node()}, [sa, dfdx](const Tensor& g) {
        std::vector<double> da(static_cast<std::size_t>(sa.size()));
        auto av2 = sa.values();
        auto gv = g.values();
        for (std::size_t i = 0; i < da.size(); ++i) da[i] = gv[i] * dfdx(av2[i]);
        return std::vector<Tensor>{Tensor(sa.shape(), std::move(da))};
    });
}

}  // namespace

Tensor scale(const Tensor& a, double s) {
    return unary_map(
        a, "scale", [s](double x) { return x * s; }, [s](double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary_map(
        a, "add_scalar", [s](double x) { return x + s; }, [](double) { return 1.0; });
}

Tensor gelu(const Tensor& a) {
    // Exact erf form; derivative Phi(x) + x * phi(x).
    return unary_map(
        a, "gelu", [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
        [](double x) {
            const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            return cdf + x * pdf;
        });
}

Tensor softmax_lastdim(const Tensor& a) {
    const std::int64_t n = last_dim(a.shape());
    const std::int64_t rows = a.size() / n;
    std::vector<double> out(static_cast<std::size_t>(a.size()));
    auto av = a.values();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* x = &av[static_cast<std::size_t>(r * n)];
        double* y = &out[static_cast<std::size_t>(r * n)];
        double mx = x[0];
        for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        for (std::int64_t j = 0; j < n; ++j) y[j] /= sum;
    }
    ensure_finite(out, "softmax_lastdim");
    Tensor result(a.shape(), std::move(out));
    Tape* tape = common_tape({&a});
    if (!tape) return result;
    Tensor sy = result.detached();
    return tape->record(std::move(result), {a.node()}, [sy, n, rows](const Tensor& g) {
        std::vector<double> dx(static_cast<std::size_t>(sy.size()));
        auto yv = sy.values();
        auto gv = g.values();
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* y = &yv[static_cast<std::size_t>(r * n)];
            const double* gr = &gv[static_cast<std::size_t>(r * n)];
            double dot = 0.0;
            for (std::int64_t j = 0; j < n; ++j) dot += gr[j] * y[j];
            for (std::int64_t j = 0; j < n; ++j) {
                dx[static_cast<std::size_t>(r * n + j)] = y[j] * (gr[j] - dot);
            }
        }
        return std::vector<Tensor>{Tensor(sy.shape(), std::move(dx))};
    });
}

Tensor rmsnorm(const Tensor& a, const Tensor& gain) {
    const std::int64_t n = last_dim(a.shape());
    if (gain.rank() != 1 || gain.shape()[0] != n) {
        throw ShapeError("rmsnorm: gain must have shape [" + std::to_string(n) + "]");
    }
    const std::int64_t rows = a.size() / n;
    std::vector<double> out(static_cast<std::size_t>(a.size()));
    std::vector<double> inv(static_cast<std::size_t>(rows));
    auto av = a.values();
    auto gv = gain.values();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* x = &av[static_cast<std::size_t>(r * n)];
        double ms = 0.0;
        for (std::int64_t j = 0; j < n; ++j) ms += x[j] * x[j];
        ms /= static_cast<double>(n);
        const double s = 1.0 / std::sqrt(ms + detail::kNormEps);
        inv[static_cast<std::size_t>(r)] = s;
        for (std::int64_t j = 0; j < n; ++j) {
            out[static_cast<std::size_t>(r * n + j)] = x[j] * s * gv[static_cast<std::size_t>(j)];
        }
    }
    ensure_finite(out, "rmsnorm");
    Tensor result(a.shape(), std::move(out));
    Tape* tape = common_tape({&a, &gain});
    if (!tape) return result;
    const int na = node_of(a, tape), ng = node_of(gain, tape);
    Tensor sx = a.detached(), sg = gain.detached();
    auto sinv = std::make_shared<std::vector<double>>(std::move(inv));
    return tape->record(std::move(result), {na, ng}, [=](const Tensor& g) {
        std::vector<Tensor> gs(2);
        auto xv = sx.values();
        auto gnv = sg.values();
        auto gradv = g.values();
        if (na >= 0) {
            std::vector<double> dx(static_cast<std::size_t>(sx.size()));
            for (std::int64_t r = 0; r < rows; ++r) {
                const double s = (*sinv)[static_cast<std::size_t>(r)];
                const double* x = &xv[static_cast<std::size_t>(r * n)];
                const double* gr = &gradv[static_cast<std::size_t>(r * n)];
                double dot = 0.0;
                for (std::int64_t j = 0; j < n; ++j) {
                    dot += gr[j] * gnv[static_cast<std::size_t>(j)] * x[j];
                }
                const double c = dot * s * s * s / static_cast<double>(n);
                for (std::int64_t j = 0; j < n; ++j) {
                    dx[static_cast<std::size_t>(r * n + j)] =
                        gr[j] * gnv[static_cast<std::size_t>(j)] * s - x[j] * c;
                }
            }
            gs[0] = Tensor(sx.shape(), std::move(dx));
        }
        if (ng >= 0) {
            std::vector<double> dg(static_cast<std::size_t>(n), 0.0);
            for (std::int64_t r = 0; r < rows; ++r) {
                const double s = (*sinv)[static_cast<std::size_t>(r)];
                for (std::int64_t j = 0; j < n; ++j) {
                    dg[static_cast<std::size_t>(j)] +=
                        gradv[static_cast<std::size_t>(r * n + j)] *
                        xv[static_cast<std::size_t>(r * n + j)] * s;
                }
            }
            gs[1] = Tensor(sg.shape(), std::move(dg));
        }
        return gs;
    });
}

Tensor layernorm(const Tensor& a, const Tensor& gain, const Tensor& bias) {
    const std::int64_t n = last_dim(a.shape());
    if (gain.rank() != 1 || gain.shape()[0] != n || bias.rank() != 1 || bias.shape()[0] != n) {
        throw ShapeError("layernorm: gain/bias must have shape [" + std::to_string(n) + "]");
    }
    const std::int64_t rows = a.size() / n;
    std::vector<double> out(static_cast<std::size_t>(a.size()));
    std::vector<double> xhat(static_cast<std::size_t>(a.size()));
    std::vector<double> inv(static_cast<std::size_t>(rows));
    auto av = a.values();
    auto gv = gain.values();
    auto bv = bias.values();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* x = &av[static_cast<std::size_t>(r * n)];
        double mean = 0.0;
        for (std::int64_t j = 0; j < n; ++j) mean += x[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::int64_t j = 0; j < n; ++j) var += (x[j] - mean) * (x[j] - mean);
        var /= static_cast<double>(n);
        const double s = 1.0 / std::sqrt(var + detail::kNormEps);
        inv[static_cast<std::size_t>(r)] = s;
        for (std::int64_t j = 0; j < n; ++j) {
            const double xh = (x[j] - mean) * s;
            xhat[static_cast<std::size_t>(r * n + j)] = xh;
            out[static_cast<std::size_t>(r * n + j)] =
                xh * gv[static_cast<std::size_t>(j)] + bv[static_cast<std::size_t>(j)];
        }
    }
    ensure_finite(out, "layernorm");
    Tensor result(a.shape(), std::move(out));
    Tape* tape = common_tape({&a, &gain, &bias});
    if (!tape) return result;
    const int na = node_of(a, tape), ng = node_of(gain, tape), nb = node_of(bias, tape);
    Tensor sg = gain.detached();
    Shape ashape = a.shape();
    auto sxhat = std::make_shared<std::vector<double>>(std::move(xhat));
    auto sinv = std::make_shared<std::vector<double>>(std::move(inv));
    return tape->record(std::move(result), {na, ng, nb}, [=](const Tensor& g) {
        std::vector<Tensor> gs(3);
        auto gradv = g.values();
        auto gnv = sg.values();
        if (na >= 0) {
            std::vector<double> dx(static_cast<std::size_t>(rows * n));
            for (std::int64_t r = 0; r < rows; ++r) {
                const double s = (*sinv)[static_cast<std::size_t>(r)];
                double m1 = 0.0, m2 = 0.0;
                for (std::int64_t j = 0; j < n; ++j) {
                    const double gg =
                        gradv[static_cast<std::size_t>(r * n + j)] * gnv[static_cast<std::size_t>(j)];
                    m1 += gg;
                    m2 += gg * (*sxhat)[static_cast<std::size_t>(r * n + j)];
                }
                m1 /= static_cast<double>(n);
                m2 /= static_cast<double>(n);
                for (std::int64_t j = 0; j < n; ++j) {
                    const double gg =
                        gradv[static_cast<std::size_t>(r * n + j)] * gnv[static_cast<std::size_t>(j)];
                    dx[static_cast<std::size_t>(r * n + j)] =
                        s * (gg - m1 - (*sxhat)[static_cast<std::size_t>(r * n + j)] * m2);
                }
            }
            gs[0] = Tensor(ashape, std::move(dx));
        }
        if (ng >= 0) {
            std::vector<double> dg(static_cast<std::size_t>(n), 0.0);
            for (std::int64_t r = 0; r < rows; ++r) {
                for (std::int64_t j = 0; j < n; ++j) {
                    dg[static_cast<std::size_t>(j)] +=
                        gradv[static_cast<std::size_t>(r * n + j)] *
                        (*sxhat)[static_cast<std::size_t>(r * n + j)];
                }
            }
            gs[1] = Tensor({n}, std::move(dg));
        }
        if (nb >= 0) {
            gs[2] = sum_rows_plain(gradv, rows, n, {n});
        }
        return gs;
    });
}

Tensor dropout(const Tensor& a, double p, Rng& rng, bool train) {
    if (p < 0.0 || p >= 1.0) throw ContractError("dropout: p must be in [0, 1)");
    if (!train || p == 0.0) return a;
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> mask(static_cast<std::size_t>(a.size()));
    for (double& m : mask) m = rng.bernoulli(p) ? 0.0 : keep_scale;
    std::vector<double> out(static_cast<std::size_t>(a.size()));
    auto av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * mask[i];
    ensure_finite(out, "dropout");
    Tensor result(a.shape(), std::move(out));
    Tape* tape = common_tape({&a});
    if (!tape) return result;
    auto smask = std::make_shared<std::vector<double>>(std::move(mask));
    Shape ashape = a.shape();
    return tape->record(std::move(result), {a.node()}, [smask, ashape](const Tensor& g) {
        std::vector<double> dx(smask->size());
        auto gv = g.values();
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = gv[i] * (*smask)[i];
        return std::vector<Tensor>{Tensor(ashape, std::move(dx))};
    });
}

Tensor concat_lastdim(std::span<const Tensor> parts) {
    if (parts.empty()) throw ContractError("concat_lastdim: no inputs");
    const Shape& s0 = parts[0].shape();
    if (s0.empty()) throw ShapeError("concat_lastdim: rank must be >= 1");
    std::int64_t total_last = 0;
    for (const Tensor& t : parts) {
        if (t.rank() != parts[0].rank()) throw ShapeError("concat_lastdim: rank mismatch");
        for (std::size_t d = 0; d + 1 < s0.size(); ++d) {
            if (t.shape()[d] != s0[d]) throw ShapeError("concat_lastdim: leading dims differ");
        }
        total_last += t.shape().back();
    }
    Shape out_shape = s0;
    out_shape.back() = total_last;
    const std::int64_t rows = numel(out_shape) / total_last;
    std::vector<double> out(static_cast<std::size_t>(rows * total_last));
    std::vector<std::int64_t> lasts;
    std::int64_t off = 0;
    for (const Tensor& t : parts) {
        const std::int64_t ln = t.shape().back();
        lasts.push_back(ln);
        auto tv = t.values();
        for (std::int64_t r = 0; r < rows; ++r) {
            std::copy_n(&tv[static_cast<std::size_t>(r * ln)], ln,
                        &out[static_cast<std::size_t>(r * total_last + off)]);
        }
        off += ln;
    }
    ensure_finite(out, "concat_lastdim");
    Tensor result(out_shape, std::move(out));
    std::vector<const Tensor*> ptrs;
    Tape* tape = nullptr;
    for (const Tensor& t : parts) {
        if (t.on_tape()) {
            if (tape && tape != t.tape()) throw StateError("operands belong to different tapes");
            tape = t.tape();
        }
    }
    if (!tape) return result;
    std::vector<int> inputs;
    std::vector<Shape> shapes;
    for (const Tensor& t : parts) {
        inputs.push_back(node_of(t, tape));
        shapes.push_back(t.shape());
    }
    return tape->record(std::move(result), inputs, [=](const Tensor& g) {
        std::vector<Tensor> gs(shapes.size());
        auto gv = g.values();
        std::int64_t offset = 0;
        for (std::size_t i = 0; i < shapes.size(); ++i) {
            const std::int64_t ln = lasts[i];
            std::vector<double> dx(static_cast<std::size_t>(rows * ln));
            for (std::int64_t r = 0; r < rows; ++r) {
                std::copy_n(&gv[static_cast<std::size_t>(r * total_last + offset)], ln,
                            &dx[static_cast<std::size_t>(r * ln)]);
            }
            gs[i] = Tensor(shapes[i], std::move(dx));
            offset += ln;
        }
        return gs;
    });
}

Tensor concat_lastdim(const Tensor& a, const Tensor& b) {
    const Tensor parts[] = {a, b};
    return concat_lastdim(std::span<const Tensor>(parts, 2));
}

Tensor slice_lastdim(const Tensor& a, std::int64_t start, std::int64_t len) {
    const std::int64_t n = last_dim(a.shape());
    if (a.rank() < 1 || start < 0 || len <= 0 || start + len > n) {
        throw ShapeError("slice_lastdim: invalid range");
    }
    const std::int64_t rows = a.size() / n;
    Shape out_shape = a.shape();
    out_shape.back() = len;
    std::vector<double> out(static_cast<std::size_t>(rows * len));
    auto av = a.values();
    for (std::int64_t r = 0; r < rows; ++r) {
        std::copy_n(&av[static_cast<std::size_t>(r * n + start)], len,
                    &out[static_cast<std::size_t>(r * len)]);
    }
    Tensor result(out_shape, std::move(out));
    Tape* tape = common_tape({&a});
    if (!tape) return result;
    Shape ashape = a.shape();
    return tape->record(std::move(result), {a.node()}, [=](const Tensor& g) {
        std::vector<double> dx(static_cast<std::size_t>(rows * n), 0.0);
        auto gv = g.values();
        for (std::int64_t r = 0; r < rows; ++r) {
            std::copy_n(&gv[static_cast<std::size_t>(r * len)], len,
                        &dx[static_cast<std::size_t>(r * n + start)]);
        }
        return std::vector<Tensor>{Tensor(ashape, std::move(dx))};
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
    }
    Tensor result(shape, std::vector<double>(a.values().begin(), a.values().end()));
    Tape* tape = common_tape({&a});
    if (!tape) return result;
    Shape ashape = a.shape();
    return tape->record(std::move(result), {a.node()}, [ashape](const Tensor& g) {
        return std::vector<Tensor>{reshape(g, ashape)};
    });
}

Tensor gather(const Tensor& a, std::shared_ptr<const std::vector<std::int64_t>> indices,
              Shape out_shape) {
    if (!indices || numel(out_shape) != static_cast<std::int64_t>(indices->size())) {
        throw ShapeError("gather: index count does not match output shape");
    }
    auto av = a.values();
    std::vector<double> out(indices->size());
    for (std::size_t i = 0; i < indices->size(); ++i) {
        const std::int64_t idx = (*indices)[i];
        if (idx < 0 || idx >= a.size()) throw ShapeError("gather: index out of range");
        out[i] = av[static_cast<std::size_t>(idx)];
    }
    Tensor result(out_shape, std::move(out));
    Tape* tape = common_tape({&a});
    if (!tape) return result;
    Shape ashape = a.shape();
    const std::int64_t asize = a.size();
    return tape->record(std::move(result), {a.node()}, [indices, ashape, asize](const Tensor& g) {
        std::vector<double> dx(static_cast<std::size_t>(asize), 0.0);
        auto gv = g.values();
        for (std::size_t i = 0; i < indices->size(); ++i) {
            dx[static_cast<std::size_t>((*indices)[i])] += gv[i];
        }
        return std::vector<Tensor>{Tensor(ashape, std::move(dx))};
    });
}

Tensor mean_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    const double m = s / static_cast<double>(a.size());
    if (!std::isfinite(m)) throw NumericError("mean_all: produced non-finite values");
    Tensor result = Tensor::scalar(m);
    Tape* tape = common_tape({&a});
    if (!tape) return result;
    Shape ashape = a.shape();
    const double invn = 1.0 / static_cast<double>(a.size());
    return tape->record(std::move(result), {a.node()}, [ashape, invn](const Tensor& g) {
        return std::vector<Tensor>{Tensor::full(ashape, g.value() * invn)};
    });
}

Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    if (!std::isfinite(s)) throw NumericError("sum_all: produced non-finite values");
    Tensor result = Tensor::scalar(s);
    Tape* tape = common_tape({&a});
    if (!tape) return result;
    Shape ashape = a.shape();
    return tape->record(std::move(result), {a.node()}, [ashape](const Tensor& g) {
        return std::vector<Tensor>{Tensor::full(ashape, g.value())};
    });
}

Tensor mse(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mse: shapes differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    auto av = a.values();
    auto bv = b.values();
    double s = 0.0;
    std::vector<double> diff(static_cast<std::size_t>(a.size()));
    for (std::size_t i = 0; i < diff.size(); ++i) {
        diff[i] = av[i] - bv[i];
        s += diff[i] * diff[i];
    }
    const double m = s / static_cast<double>(a.size());
    if (!std::isfinite(m)) throw NumericError("mse: produced non-finite values");
    Tensor result = Tensor::scalar(m);
    Tape* tape = common_tape({&a, &b});
    if (!tape) return result;
    const int na = node_of(a, tape), nb = node_of(b, tape);
    auto sdiff = std::make_shared<std::vector<double>>(std::move(diff));
    Shape ashape = a.shape();
    const double c = 2.0 / static_cast<double>(a.size());
    return tape->record(std::move(result), {na, nb}, [=](const Tensor& g) {
        std::vector<Tensor> gs(2);
        const double gc = g.value() * c;
        if (na >= 0) {
            std::vector<double> da(sdiff->size());
            for (std::size_t i = 0; i < da.size(); ++i) da[i] = gc * (*sdiff)[i];
            gs[0] = Tensor(ashape, std::move(da));
        }
        if (nb >= 0) {
            std::vector<double> db(sdiff->size());
            for (std::size_t i = 0; i < db.size(); ++i) db[i] = -gc * (*sdiff)[i];
            gs[1] = Tensor(ashape, std::move(db));
        }
        return gs;
    });
}

double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& x,
                  double h) {
    if (h < 1e-7 || h > 1e-3) throw ContractError("grad_check: h must be in [1e-7, 1e-3]");
    Tape tape;
    Tensor xw = tape.watch(x);
    Tensor out = f(tape, xw);
    if (out.size() != 1) throw ContractError("grad_check: f must return a scalar");
    tape.backward(out);
    Tensor analytic = tape.grad(xw);

    Tensor probe = x.clone();
    auto pv = probe.values_mut();
    auto xv = x.values();
    auto gv = analytic.values();
    double max_rel = 0.0;
    for (std::int64_t i = 0; i < x.size(); ++i) {
        const auto idx = static_cast<std::size_t>(i);
        pv[idx] = xv[idx] + h;
        Tape tp;
        const double fp = f(tp, probe).value();
        pv[idx] = xv[idx] - h;
        Tape tm;
        const double fm = f(tm, probe).value();
        pv[idx] = xv[idx];
        const double cd = (fp - fm) / (2.0 * h);
        const double rel = std::abs(gv[idx] - cd) / (std::abs(gv[idx]) + 1e-12);
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace phenoflow
