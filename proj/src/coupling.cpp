#include "phenoflow/coupling.hpp"

#include <cmath>
#include <limits>

namespace phenoflow {

namespace {

double sq_dist(const Tensor& a, const Tensor& b) {
    auto av = a.values();
    auto bv = b.values();
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        const double d = av[i] - bv[i];
        s += d * d;
    }
    return s;
}

/// Kuhn-Munkres with potentials and shortest augmenting paths, O(n^3).
/// Deterministic: columns are scanned in ascending index order, so equal-cost
/// alternatives resolve to the lowest index.
std::vector<std::int64_t> hungarian(const std::vector<double>& cost, std::int64_t n) {
    constexpr double kInf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
    std::vector<double> v(static_cast<std::size_t>(n) + 1, 0.0);
    std::vector<std::int64_t> p(static_cast<std::size_t>(n) + 1, 0);
    std::vector<std::int64_t> way(static_cast<std::size_t>(n) + 1, 0);
    for (std::int64_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::int64_t j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(n) + 1, kInf);
        std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            const std::int64_t i0 = p[static_cast<std::size_t>(j0)];
            std::int64_t j1 = -1;
            double delta = kInf;
            for (std::int64_t j = 1; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                const double cur = cost[static_cast<std::size_t>((i0 - 1) * n + (j - 1))] -
                                   u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
                if (cur < minv[static_cast<std::size_t>(j)]) {
                    minv[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = j0;
                }
                if (minv[static_cast<std::size_t>(j)] < delta) {
                    delta = minv[static_cast<std::size_t>(j)];
                    j1 = j;
                }
            }
            for (std::int64_t j = 0; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<std::size_t>(j0)] != 0);
        do {
            const std::int64_t j1 = way[static_cast<std::size_t>(j0)];
            p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<std::int64_t> assignment(static_cast<std::size_t>(n), -1);
    for (std::int64_t j = 1; j <= n; ++j) {
        if (p[static_cast<std::size_t>(j)] > 0) {
            assignment[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
        }
    }
    return assignment;
}

}  // namespace

FlowConstruction FlowConstruction::control_to_perturbed(double noise_aug_prob) {
    if (noise_aug_prob < 0.0 || noise_aug_prob > 1.0) {
        throw ContractError("control_to_perturbed: noise_aug_prob must be in [0, 1]");
    }
    return {FlowKind::ControlToPerturbed, noise_aug_prob};
}

std::vector<Tensor> pair_independent(const std::vector<Tensor>& x1_batch, Rng& rng) {
    std::vector<Tensor> x0;
    x0.reserve(x1_batch.size());
    for (const Tensor& x1 : x1_batch) x0.push_back(Tensor::randn(x1.shape(), rng));
    return x0;
}

CouplingPlan pair_ot(const std::vector<Tensor>& x0_batch, const std::vector<Tensor>& x1_batch) {
    if (x0_batch.size() != x1_batch.size()) {
        throw ContractError("pair_ot: batch sizes differ (" + std::to_string(x0_batch.size()) +
                            " vs " + std::to_string(x1_batch.size()) + ")");
    }
    if (x0_batch.empty()) throw ContractError("pair_ot: empty batch");
    const auto n = static_cast<std::int64_t>(x0_batch.size());
    if (n > 4096) throw ContractError("pair_ot: batch size exceeds 4096");
    for (const Tensor& t : x1_batch) {
        if (t.size() != x0_batch[0].size()) throw ContractError("pair_ot: sample sizes differ");
    }
    for (const Tensor& t : x0_batch) {
        if (t.size() != x0_batch[0].size()) throw ContractError("pair_ot: sample sizes differ");
    }
    std::vector<double> cost(static_cast<std::size_t>(n * n));
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            cost[static_cast<std::size_t>(i * n + j)] =
                sq_dist(x0_batch[static_cast<std::size_t>(i)], x1_batch[static_cast<std::size_t>(j)]);
        }
    }
    CouplingPlan plan;
    plan.permutation = hungarian(cost, n);
    plan.cost = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        plan.cost += cost[static_cast<std::size_t>(i * n + plan.permutation[static_cast<std::size_t>(i)])];
    }
    return plan;
}

double positional_cost(const std::vector<Tensor>& x0_batch, const std::vector<Tensor>& x1_batch) {
    if (x0_batch.size() != x1_batch.size()) {
        throw ContractError("positional_cost: batch sizes differ");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < x0_batch.size(); ++i) s += sq_dist(x0_batch[i], x1_batch[i]);
    return s;
}

std::vector<Tensor> pair_control(const std::vector<Tensor>& x1_batch,
                                 const std::vector<std::int64_t>& context_ids,
                                 const std::map<std::int64_t, std::vector<Tensor>>& control_pool,
                                 Rng& rng, double noise_aug_prob) {
    if (x1_batch.size() != context_ids.size()) {
        throw ContractError("pair_control: context id count does not match batch");
    }
    std::vector<Tensor> x0;
    x0.reserve(x1_batch.size());
    for (std::size_t i = 0; i < x1_batch.size(); ++i) {
        const auto it = control_pool.find(context_ids[i]);
        if (it == control_pool.end() || it->second.empty()) {
            throw DataError("pair_control: no controls for context id " +
                            std::to_string(context_ids[i]));
        }
        const auto& pool = it->second;
        const Tensor& pick = pool[static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::int64_t>(pool.size())))];
        if (rng.bernoulli(noise_aug_prob)) {
            x0.push_back(add(pick, Tensor::randn(pick.shape(), rng)));
        } else {
            x0.push_back(pick.clone());
        }
    }
    return x0;
}

}  // namespace phenoflow
