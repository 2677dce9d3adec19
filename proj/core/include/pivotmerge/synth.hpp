#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "pivotmerge/tensorstore.hpp"

namespace pivotmerge {

// Synthetic experts sharing a planted low-rank core.
//
// Per layer (augmented width w = d_in + 1 when bias is on):
//   C   = G_left (d_out x core_rank) * G_right (core_rank x w) / sqrt(core_rank)
//   R_i = residual_scale * (f * R_common + (1 - f) * R_private_i)
//   W_i = W_0 + C + R_i + noise_scale * E_i
// All Gaussian draws have standard deviation 1 / sqrt(d_in) and come from
// Philox streams keyed by `seed`.
struct SynthSpec {
    std::vector<std::pair<std::size_t, std::size_t>> dims{{16, 8}, {12, 16}}; // (d_out, d_in)
    std::size_t experts = 5;
    std::size_t core_rank = 2;
    double residual_scale = 1.0;
    double shared_residual_fraction = 0.0;
    double noise_scale = 0.0;
    bool bias = true;
    std::uint64_t seed = 0;

    // Throws ConfigError / ShapeError.
    void validate() const;
};

struct SynthResult {
    ProjectorCheckpoint base;
    std::vector<ProjectorCheckpoint> experts; // ids "expert_0", "expert_1", ...
    std::vector<Matrix> cores;                // planted C per layer (augmented)
};

SynthResult generate(const SynthSpec& spec);

// Planted cores as tensors "layer.{l}.core".
std::vector<Tensor> cores_to_tensors(const std::vector<Matrix>& cores);
std::vector<Matrix> cores_from_tensors(const std::vector<Tensor>& tensors);

std::string synth_spec_to_json(const SynthSpec& spec);
SynthSpec synth_spec_from_json(const std::string& text);

struct RecoveryScore {
    std::vector<double> per_layer_degrees;
    std::vector<bool> degenerate; // zero delta, reported as 90 degrees
    double mean_degrees() const;
};

// Mean principal angle, per layer, between the planted core column space
// and the dominant column space of (merged - base) of the same dimension.
RecoveryScore recovery_score(const ProjectorCheckpoint& merged, const ProjectorCheckpoint& base,
                             const std::vector<Matrix>& cores);

// Dominant q-dimensional left singular subspace (q clipped to the numerical
// rank). Throws NumericalError for a zero matrix.
Matrix dominant_subspace(const Matrix& m, int q);

} // namespace pivotmerge
