#pragma once

#include <map>
#include <vector>

#include "phenoflow/tensor.hpp"

namespace phenoflow {

enum class FlowKind { NoiseToData, ControlToPerturbed };

/// How training pairs (x0, x1) are produced.
struct FlowConstruction {
    FlowKind kind = FlowKind::NoiseToData;
    /// Probability of replacing a control draw with control + N(0, I) noise.
    /// Only meaningful for ControlToPerturbed; 0.5 reproduces Config A.
    double noise_aug_prob = 0.5;

    static FlowConstruction noise_to_data() { return {FlowKind::NoiseToData, 0.0}; }
    static FlowConstruction control_to_perturbed(double noise_aug_prob = 0.5);
};

/// Result of minibatch optimal-transport matching. permutation[i] is the
/// target index paired with source i; cost is the total squared Euclidean
/// transport cost of that assignment.
struct CouplingPlan {
    std::vector<std::int64_t> permutation;
    double cost = 0.0;
};

/// Independent coupling: x0 ~ N(0, I), positional pairing with x1.
std::vector<Tensor> pair_independent(const std::vector<Tensor>& x1_batch, Rng& rng);

/// Exact optimal assignment between equal-size batches under squared
/// Euclidean cost on flattened samples (Hungarian algorithm, O(n^3)).
CouplingPlan pair_ot(const std::vector<Tensor>& x0_batch, const std::vector<Tensor>& x1_batch);

/// Squared Euclidean cost of the positional (identity) pairing.
double positional_cost(const std::vector<Tensor>& x0_batch, const std::vector<Tensor>& x1_batch);

/// Control-to-perturbed coupling: each x1 is paired with a uniformly drawn
/// control from its own context's pool; with probability noise_aug_prob the
/// control is replaced by control + standard normal noise.
std::vector<Tensor> pair_control(const std::vector<Tensor>& x1_batch,
                                 const std::vector<std::int64_t>& context_ids,
                                 const std::map<std::int64_t, std::vector<Tensor>>& control_pool,
                                 Rng& rng, double noise_aug_prob);

}  // namespace phenoflow
