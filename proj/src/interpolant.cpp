#include "phenoflow/interpolant.hpp"

#include <cmath>

namespace phenoflow {

namespace {

constexpr double kHalfPi = 1.57079632679489661923;

void check_shapes(const Tensor& x0, const Tensor& x1, const Tensor& eps, bool need_eps) {
    if (x0.shape() != x1.shape()) {
        throw ShapeError("interpolant: x0 and x1 shapes differ");
    }
    if (need_eps && eps.shape() != x0.shape()) {
        throw ShapeError("interpolant: eps shape must match x0");
    }
}

void check_t(double t) {
    if (!(t >= 0.0 && t <= 1.0)) {
        throw DomainError("interpolant: t must lie in [0, 1], got " + std::to_string(t));
    }
}

}  // namespace

Interpolant Interpolant::brownian_bridge(double k) {
    if (!(k > 0.0)) throw ContractError("brownian_bridge: k must be positive");
    return {InterpolantKind::BrownianBridge, k};
}

std::string Interpolant::name() const {
    switch (kind) {
        case InterpolantKind::Linear: return "linear";
        case InterpolantKind::VariancePreserving: return "variance_preserving";
        case InterpolantKind::BrownianBridge: return "brownian_bridge";
    }
    return "?";
}

Interpolant interpolant_from_name(const std::string& name, double k) {
    if (name == "linear") return Interpolant::linear();
    if (name == "variance_preserving") return Interpolant::variance_preserving();
    if (name == "brownian_bridge") return Interpolant::brownian_bridge(k);
    throw ConfigError("unknown interpolant '" + name + "'");
}

Tensor interpolate(const Interpolant& ip, const Tensor& x0, const Tensor& x1, double t,
                   const Tensor& eps) {
    check_shapes(x0, x1, eps, ip.uses_noise());
    check_t(t);
    switch (ip.kind) {
        case InterpolantKind::Linear:
            return add(scale(x1, t), scale(x0, 1.0 - t));
        case InterpolantKind::VariancePreserving:
            return add(scale(x1, std::sin(kHalfPi * t)), scale(x0, std::cos(kHalfPi * t)));
        case InterpolantKind::BrownianBridge: {
            Tensor base = add(scale(x1, t), scale(x0, 1.0 - t));
            const double coeff = ip.k * std::sqrt(2.0 * t * (1.0 - t));
            if (coeff == 0.0) return base;  // exact endpoints
            return add(base, scale(eps, coeff));
        }
    }
    throw ContractError("interpolate: unknown kind");
}

Tensor target_velocity(const Interpolant& ip, const Tensor& x0, const Tensor& x1, double t,
                       const Tensor& eps) {
    check_shapes(x0, x1, eps, ip.uses_noise());
    check_t(t);
    switch (ip.kind) {
        case InterpolantKind::Linear:
            return sub(x1, x0);
        case InterpolantKind::VariancePreserving:
            return scale(sub(scale(x1, std::cos(kHalfPi * t)), scale(x0, std::sin(kHalfPi * t))),
                         kHalfPi);
        case InterpolantKind::BrownianBridge: {
            if (t == 0.0 || t == 1.0) {
                throw DomainError("brownian_bridge target velocity is singular at t=" +
                                  std::to_string(t));
            }
            const double coeff = ip.k * (1.0 - 2.0 * t) / std::sqrt(2.0 * t * (1.0 - t));
            return add(sub(x1, x0), scale(eps, coeff));
        }
    }
    throw ContractError("target_velocity: unknown kind");
}

}  // namespace phenoflow
