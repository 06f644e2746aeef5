#pragma once

#include <string>
#include <vector>

#include "phenoflow/tensor.hpp"

namespace phenoflow {

/// Synthetic conditional screen: a Gaussian family with per-perturbation mean
/// shifts (the ground-truth embedding map), per-context batch effects, and a
/// per-perturbation feature map phi with a controllable noise level.
/// Samples follow y = s_e * (mu_p + sigma * eps) + b_e. Perturbation 0 is the
/// untreated control (mu_0 = 0) and context 0 is neutral (b = 0, s = 1).
struct ScreenSpec {
    Shape sample_shape;            // e.g. {2} for flat toys, {6,8,8} for images
    std::int64_t perturbations = 0;  // P, ids 0..P-1, id 0 = control
    std::int64_t contexts = 0;       // E, ids 0..E-1, id 0 = neutral
    double sigma = 1.0;              // observation noise scale
    std::vector<Tensor> mu;          // P mean shifts, mu[0] = 0
    std::vector<Tensor> ctx_offset;  // E per-context offsets b_e
    std::vector<Tensor> ctx_scale;   // E per-context scales s_e (> 0)
    std::vector<std::int64_t> holdout;  // held-out perturbation ids, subset of 1..P-1
    std::vector<Tensor> phi;         // P perturbation feature vectors
    double phi_noise = 0.0;
    bool phi_informative = true;     // false: phi is pure noise
    std::uint64_t seed = 0;

    struct Params {
        Shape sample_shape = {2};
        std::int64_t perturbations = 4;
        std::int64_t contexts = 2;
        double sigma = 0.5;
        double mean_scale = 2.0;      // spread of the mu_p draws
        double offset_scale = 0.5;    // spread of per-context offsets
        double scale_jitter = 0.2;    // s_e = exp(jitter * N(0,1))
        std::vector<std::int64_t> holdout;
        double phi_noise = 0.0;
        bool phi_informative = true;
        std::uint64_t seed = 0;
    };

    static ScreenSpec make(const Params& p);

    std::int64_t dim() const { return numel(sample_shape); }
    bool is_holdout(std::int64_t p) const;
    std::vector<std::int64_t> seen_perturbations() const;  // ids not in holdout
    /// Ground-truth conditional mean s_e * mu_p + b_e.
    Tensor conditional_mean(std::int64_t perturbation, std::int64_t context) const;
};

/// Draw n samples of P(Y | perturbation, context) as an [n, d] row matrix
/// regardless of sample_shape (rows are flattened samples).
Tensor sample_screen(const ScreenSpec& spec, std::int64_t perturbation, std::int64_t context,
                     std::int64_t n, Rng& rng);

/// One sample with the spec's native sample_shape.
Tensor sample_screen_one(const ScreenSpec& spec, std::int64_t perturbation, std::int64_t context,
                         Rng& rng);

// ---------------------------------------------------------------------------
// Cell-paint to RGB projection
// ---------------------------------------------------------------------------

/// Fixed 6x3 projection weights (Hoechst->Blue, ConA->Green, Phalloidin->Red,
/// Syto14->Cyan, MitoTracker->Magenta, WGA->Yellow).
const Tensor& cp2rgb_weights();

/// [B,6,H,W] -> [B,3,H,W]; per-pixel product with cp2rgb_weights, channels
/// accumulated in ascending order for bit-exact reproducibility.
Tensor cp2rgb(const Tensor& images);

// ---------------------------------------------------------------------------
// Training-compute estimate
// ---------------------------------------------------------------------------

/// ExaFLOPs = flops_per_forward_per_image * global_batch * steps * 3 / 1e18,
/// under the fused multiply-accumulate convention (reported ~ half of true).
double estimate_train_flops(double flops_per_fwd_per_image, double global_batch, double steps);

// ---------------------------------------------------------------------------
// Tensor file format: magic "FLT1", u32 rank, u32 extents (LE), then
// little-endian IEEE-754 doubles in row-major order.
// ---------------------------------------------------------------------------

void write_tensor(const std::string& path, const Tensor& t);
Tensor read_tensor(const std::string& path);

std::vector<unsigned char> encode_tensor(const Tensor& t);
Tensor decode_tensor(const std::vector<unsigned char>& bytes);

}  // namespace phenoflow
