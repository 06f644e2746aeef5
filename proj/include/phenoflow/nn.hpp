#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "phenoflow/tensor.hpp"

namespace phenoflow {

/// A model parameter: `value` aliases the owning module's storage, so
/// in-place updates through values_mut() are visible to the module.
struct NamedParam {
    std::string name;
    Tensor value;
};

/// Per-call evaluation context. tape == nullptr means pure inference; train
/// enables dropout paths and requires rng.
struct EvalCtx {
    Tape* tape = nullptr;
    bool train = false;
    Rng* rng = nullptr;

    Tensor use(const Tensor& param) const { return tape ? tape->watch(param) : param; }
    Rng& rand() const {
        if (!rng) throw StateError("EvalCtx: rng required for stochastic paths");
        return *rng;
    }
};

/// Counts multiply-accumulate operations of parameterised linear layers in
/// the current thread. Attention score products are intentionally excluded:
/// analytic per-forward FLOP figures use the weight-matmul (fused-MAC)
/// convention.
struct MacCounter {
    static thread_local std::int64_t count;
    static thread_local bool enabled;

    struct Scoped {
        Scoped() {
            MacCounter::count = 0;
            MacCounter::enabled = true;
        }
        ~Scoped() { MacCounter::enabled = false; }
    };
};

/// Dense layer y = x W + b with W [in, out]. Accepts [in] or [rows, in].
class Linear {
  public:
    Linear() = default;
    Linear(std::string name, std::int64_t in, std::int64_t out, Rng& rng, bool zero_init = false);

    Tensor forward(const EvalCtx& ctx, const Tensor& x) const;
    void collect(std::vector<NamedParam>& out) const;

    std::int64_t in_dim() const { return in_; }
    std::int64_t out_dim() const { return out_; }
    std::int64_t param_count() const { return in_ * out_ + out_; }

    Tensor weight;
    Tensor bias;

  private:
    std::string name_;
    std::int64_t in_ = 0;
    std::int64_t out_ = 0;
};

/// Sinusoidal embedding of a scalar (time or dose): first half sines, second
/// half cosines over log-spaced frequencies from 1 to 1/10000.
Tensor sinusoidal_embedding(double t, std::int64_t dim);

/// Sum of all parameter sizes.
std::int64_t total_param_count(const std::vector<NamedParam>& params);

}  // namespace phenoflow
