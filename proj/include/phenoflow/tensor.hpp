#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "phenoflow/errors.hpp"
#include "phenoflow/rng.hpp"

namespace phenoflow {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

/// Dense row-major double tensor with value semantics (storage is shared,
/// copies alias). A tensor may carry a handle onto a Tape node, in which case
/// ops consuming it record backward rules on that tape. Rank 0 is a scalar.
class Tensor {
  public:
    Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double v) { return Tensor({}, {v}); }
    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double v);
    static Tensor randn(Shape shape, Rng& rng);

    const Shape& shape() const { return shape_; }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
    std::int64_t size() const { return static_cast<std::int64_t>(data_->size()); }

    std::span<const double> values() const { return {data_->data(), data_->size()}; }
    /// Mutable access to the underlying storage. Intended for optimizers and
    /// test harnesses that poke leaf parameters between tape builds.
    std::span<double> values_mut() { return {data_->data(), data_->size()}; }

    /// Value of a rank-0 / single-element tensor.
    double value() const;
    double at(std::int64_t i) const { return (*data_)[check_index(i)]; }
    double at(std::int64_t i, std::int64_t j) const;

    /// Deep copy, detached from any tape.
    Tensor clone() const;
    /// Same storage, no tape handle.
    Tensor detached() const;

    bool on_tape() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    int node() const { return node_; }

    bool all_finite() const;
    bool same_values(const Tensor& other) const;  // bitwise compare

  private:
    friend class Tape;
    std::int64_t check_index(std::int64_t i) const;

    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
    Tape* tape_ = nullptr;
    int node_ = -1;
};

/// Reverse-mode tape. Nodes are appended in execution (topological) order;
/// backward() walks them in reverse, accumulating vector-Jacobian products.
/// One backward per tape unless reset() is called. Tapes are intended to be
/// rebuilt for every training step and are not thread-safe.
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Register a leaf. Watching the same storage twice returns the same node.
    Tensor watch(const Tensor& t);

    /// Reverse accumulation from a scalar loss on this tape.
    void backward(const Tensor& loss);

    /// Gradient of a watched leaf (or any tensor aliasing a node on this
    /// tape). Returns zeros of the right shape for unreached leaves.
    Tensor grad(const Tensor& t) const;

    /// Clear gradients so backward() may run again on the same graph.
    void reset();

    std::size_t node_count() const { return nodes_.size(); }
    bool backward_run() const { return backward_run_; }

    /// Op-recording hook: `vjp(gout)` returns one gradient per input, in
    /// order, each matching the input's shape.
    using Vjp = std::function<std::vector<Tensor>(const Tensor& gout)>;
    Tensor record(Tensor value, std::vector<int> inputs, Vjp vjp);

  private:
    struct Node {
        Shape shape;
        std::vector<int> inputs;
        Vjp vjp;
    };
    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;       // parallel to nodes_; empty shape-0 when unset
    std::vector<bool> grad_set_;
    std::vector<std::pair<const void*, int>> watched_;  // storage ptr -> node
    bool backward_run_ = false;

    void accumulate(int node, const Tensor& g);
};

// ---------------------------------------------------------------------------
// Registered ops. Every op validates shapes, rejects non-finite results, and
// records a backward rule when any input lives on a tape. Elementwise binary
// ops accept equal shapes or a right operand whose shape equals the left
// shape with the leading dimension dropped (broadcast over rows).
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor gelu(const Tensor& a);
Tensor softmax_lastdim(const Tensor& a);
/// y = x / sqrt(mean_lastdim(x^2) + 1e-6) * gain, gain has shape [lastdim].
Tensor rmsnorm(const Tensor& a, const Tensor& gain);
/// Standard layer norm over the last dimension with learnable gain and bias.
Tensor layernorm(const Tensor& a, const Tensor& gain, const Tensor& bias);

/// Inverted dropout: keeps entries with probability 1-p and scales them by
/// 1/(1-p); identity when !train or p == 0. Mask values come from `rng`.
Tensor dropout(const Tensor& a, double p, Rng& rng, bool train);

Tensor concat_lastdim(std::span<const Tensor> parts);
Tensor concat_lastdim(const Tensor& a, const Tensor& b);
Tensor slice_lastdim(const Tensor& a, std::int64_t start, std::int64_t len);
Tensor reshape(const Tensor& a, Shape shape);
/// out.flat[i] = a.flat[indices[i]]; backward scatter-adds.
Tensor gather(const Tensor& a, std::shared_ptr<const std::vector<std::int64_t>> indices,
              Shape out_shape);

Tensor mean_all(const Tensor& a);
Tensor sum_all(const Tensor& a);
Tensor mse(const Tensor& a, const Tensor& b);

/// Max over coordinates of |analytic - central difference| / (|analytic| + 1e-12)
/// for a scalar-valued f. f must be deterministic (run dropout in eval mode).
double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& x,
                  double h);

namespace detail {
/// Shared RMS epsilon for rmsnorm/layernorm.
inline constexpr double kNormEps = 1e-6;
}  // namespace detail

}  // namespace phenoflow
