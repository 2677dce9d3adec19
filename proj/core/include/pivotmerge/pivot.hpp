#pragma once

// Shared-space decomposition, core/residual decoupling, consistency-aware
// residual filtering and alignment-weighted layer merging of projector
// checkpoints.
//
// Per layer l, with augmented task vectors D_i = W_i - W_0:
//   [D_1 | ... | D_N] = U diag(S) [V_1 | ... | V_N]        joint SVD
//   A_i = rank-r truncation of V_i,  B_i = V_i - A_i        decoupling
//   c_k = mean over ordered pairs of cos(row k of B_i, row k of B_j)
//   m_k = sigmoid(gamma (c_k - tau)),  B~_i = m (.) B_i, L1-compensated
//   V* = Merge({A_i}, alpha) + Merge({B~_i}, uniform)
//   W* = W_0 + U diag(S) V*
// For magnitude-based inner operators the V_i above are replaced by
// diag(S) V_i, and V* is mapped back by diag(S)^-1 before reconstruction.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pivotmerge/linalg.hpp"
#include "pivotmerge/operators.hpp"
#include "pivotmerge/scores.hpp"
#include "pivotmerge/tensorstore.hpp"

namespace pivotmerge {

inline constexpr int kDefaultRank = 64;
inline constexpr double kDefaultGamma = 20.0;
inline constexpr double kDefaultRhoClustered = 0.5;
inline constexpr double kDefaultRhoRandom = 0.8;
// Singular values below this are treated as zero when mapping back from
// magnitude space.
inline constexpr double kSingularFloor = 1e-12;

struct PivotConfig {
    int rank = kDefaultRank;
    double gamma = kDefaultGamma;
    double rho = kDefaultRhoClustered;
    double beta = kDefaultBeta;
    MergeOperator inner = MergeOperator::ties(1.0);
    // Run decoupling, filtering and the inner operator on diag(S) V_i.
    // Unset means "on exactly when the inner operator is magnitude-based".
    std::optional<bool> magnitude_space;

    bool use_magnitude_space() const { return magnitude_space.value_or(inner.magnitude_based()); }

    // Throws ConfigError.
    void validate() const;
};

// Joint-SVD directions with S <= kBasisRelTol * S_max are not kept.
inline constexpr double kBasisRelTol = 1e-12;

struct SharedSpaceLayer {
    Matrix U;                   // d_out x k, k <= min(d_out, N w)
    Vector S;                   // k
    std::vector<Matrix> coeffs; // N blocks V_i^T, each k x w
    // Set when the concatenated deltas are exactly zero; U, S are empty.
    bool degenerate = false;

    Eigen::Index width() const { return coeffs.empty() ? 0 : coeffs.front().cols(); }
};

struct ResidualFilter {
    std::vector<Matrix> filtered; // B~_i
    Vector mask;                  // m, length k
    Vector consistencies;         // c, length k (empty for N = 1)
    std::optional<double> tau;    // unset for N = 1
    // Experts whose masked residual had L1 mass < 1e-12 and were left
    // unscaled.
    std::vector<std::size_t> uncompensated;
};

struct DecoupledLayer {
    std::vector<Matrix> cores;     // A_i
    std::vector<Matrix> residuals; // B_i
    int rank_used = 0;
    ResidualFilter filter;         // filled by filter_residuals
};

// Augmented deltas per layer: result[l][i] = augment(W_i^l) - augment(W_0^l).
std::vector<std::vector<Matrix>> task_vectors(std::span<const ProjectorCheckpoint> experts,
                                              const ProjectorCheckpoint& base);

SharedSpaceLayer joint_decompose(std::span<const Matrix> deltas);

// Rows of each coefficient block scaled by S (magnitude space).
std::vector<Matrix> scale_coefficients(const SharedSpaceLayer& layer);

// A_i = truncate_rank(coeff_i, r), B_i = coeff_i - A_i. r is clamped to
// min(k, w) with a warning.
DecoupledLayer decouple(std::span<const Matrix> coeffs, int rank);

ResidualFilter filter_residuals(std::span<const Matrix> residuals, double gamma, double rho);

// Rows of `residual` scaled by `mask`, then rescaled so the entrywise L1
// mass matches the unmasked residual. When the masked mass is below
// kCompensationFloor the masked matrix is returned unscaled and
// *compensated is set to false.
inline constexpr double kCompensationFloor = 1e-12;
Matrix mask_and_compensate(const Matrix& residual, const Vector& mask, bool* compensated = nullptr);

// Row-wise average pairwise cosine across experts.
Vector residual_consistency(std::span<const Matrix> residuals);

double sigmoid(double x);

// Merges cores with `alphas` and filtered residuals with uniform weights,
// returning V*^T in plain coefficient space. When `magnitude_space` the
// decoupled layer is taken to live in diag(S) V space and the result is
// divided back by S (rows with S < 1e-12 become zero).
Matrix merge_layer(const SharedSpaceLayer& shared, const DecoupledLayer& decoupled, const Vector& alphas,
                   const MergeOperator& op, bool magnitude_space);

// W* = W_0 + U diag(S) V*, split back into weight and bias.
Layer reconstruct(const SharedSpaceLayer& shared, const Matrix& merged_coeffs, const AugmentedLayer& base);

// Decomposition + decoupling + filtering of one layer.
struct LayerState {
    SharedSpaceLayer shared;
    DecoupledLayer decoupled;
    bool magnitude_space = false;

    // A_i + B~_i in the working space.
    std::vector<Matrix> filtered_coefficients() const;
};

LayerState decompose_layer(std::span<const Matrix> deltas, const PivotConfig& config);

struct LayerDiagnostics {
    std::size_t layer = 0; // 1-based
    std::vector<double> alpha;
    std::vector<double> consistencies;
    std::vector<double> mask;
    std::optional<double> tau;
    std::vector<double> singular_values;
    int rank_used = 0;
    bool degenerate = false;
    std::vector<std::string> uncompensated;
};

struct PivotDiagnostics {
    std::vector<std::string> expert_ids;
    PivotConfig config;
    std::vector<LayerDiagnostics> layers;
};

std::string diagnostics_to_json(const PivotDiagnostics& diagnostics);

struct PivotResult {
    ProjectorCheckpoint merged;
    PivotDiagnostics diagnostics;
};

// Experts sorted by id; throws ConfigError on duplicate ids.
std::vector<ProjectorCheckpoint> sort_experts(std::span<const ProjectorCheckpoint> experts);

// Runs the full pipeline on one layer (0-based index) of experts that are
// already sorted by id.
struct LayerOutcome {
    Layer merged;
    LayerDiagnostics diagnostics;
};
LayerOutcome pivot_merge_layer(std::span<const ProjectorCheckpoint> sorted_experts, const ProjectorCheckpoint& base,
                               std::size_t layer, const Vector& alphas, const PivotConfig& config);

// Full merge. Experts are processed in lexicographic id order and looked up
// in `scores` by id. `threads` = 0 picks the hardware concurrency; layers
// are independent so the output does not depend on it.
PivotResult pivot_merge(std::span<const ProjectorCheckpoint> experts, const ProjectorCheckpoint& base,
                        const ScoreTable& scores, const PivotConfig& config, unsigned threads = 1);

// Baseline: merge task vectors layer by layer with `op` and uniform weights.
ProjectorCheckpoint baseline_merge(std::span<const ProjectorCheckpoint> experts, const ProjectorCheckpoint& base,
                                   const MergeOperator& op);

} // namespace pivotmerge
