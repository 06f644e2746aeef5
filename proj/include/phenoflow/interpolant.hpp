#pragma once

#include "phenoflow/tensor.hpp"

namespace phenoflow {

enum class InterpolantKind { Linear, VariancePreserving, BrownianBridge };

/// Path x_t between a source sample x0 and a target sample x1:
///   Linear               t*x1 + (1-t)*x0
///   VariancePreserving   x1*sin(pi*t/2) + x0*cos(pi*t/2)
///   BrownianBridge       t*x1 + (1-t)*x0 + eps*k*sqrt(2t(1-t))
struct Interpolant {
    InterpolantKind kind = InterpolantKind::Linear;
    double k = 0.1;  // Brownian-bridge noise scale; ignored otherwise

    static Interpolant linear() { return {InterpolantKind::Linear, 0.0}; }
    static Interpolant variance_preserving() { return {InterpolantKind::VariancePreserving, 0.0}; }
    static Interpolant brownian_bridge(double k);

    bool uses_noise() const { return kind == InterpolantKind::BrownianBridge; }

    /// Lower clamp for training-time t draws; the Brownian-bridge target
    /// velocity is singular at the endpoints.
    double t_min() const { return uses_noise() ? 1e-3 : 0.0; }

    std::string name() const;
};

Interpolant interpolant_from_name(const std::string& name, double k);

/// x_t for the given interpolant. `eps` must match x0's shape and is ignored
/// unless the interpolant uses noise. The same eps draw must be shared with
/// target_velocity for a given training triple.
Tensor interpolate(const Interpolant& ip, const Tensor& x0, const Tensor& x1, double t,
                   const Tensor& eps);

/// d/dt of interpolate at fixed (x0, x1, eps).
Tensor target_velocity(const Interpolant& ip, const Tensor& x0, const Tensor& x1, double t,
                       const Tensor& eps);

}  // namespace phenoflow
