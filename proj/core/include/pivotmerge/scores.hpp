#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pivotmerge/tensorstore.hpp"

namespace pivotmerge {

inline constexpr double kDefaultBeta = 0.05;

// Per-expert, per-layer alignment scores s_i^(l).
struct ScoreTable {
    std::vector<std::string> expert_ids;
    Matrix scores; // N x L
    double beta = kDefaultBeta;

    std::size_t experts() const { return expert_ids.size(); }
    std::size_t layers() const { return static_cast<std::size_t>(scores.cols()); }

    // Throws unless N, L >= 1, ids are unique and all scores finite.
    void validate() const;

    // Row of the given expert id; throws ConfigError when absent.
    Vector row(const std::string& id) const;
};

// Softmax merge weights alpha_i^(l); each column sums to 1.
struct LayerWeights {
    Matrix alpha; // N x L
};

// Mean over samples of cosine(feature row, text row), one value per layer.
// Features must already be pooled to one vector per sample.
Vector compute_scores_from_features(std::span<const Matrix> layer_features, const Matrix& texts);

// Builds a score table from a container holding "expert.{id}.layer.{l}.features"
// (M x d) tensors and one "texts" tensor (M x d).
ScoreTable scores_from_feature_tensors(const std::vector<Tensor>& tensors, double beta = kDefaultBeta);

// First layer keeps its score; later layers take the difference to the
// previous one.
Vector score_increments(const Vector& scores);
Matrix score_increments(const Matrix& scores); // row-wise, N x L

LayerWeights layer_weights(const Matrix& increments, double beta);
LayerWeights layer_weights(const ScoreTable& table);

// Order-statistic threshold: sorts ascending, k = max(1, floor(m (1 - rho))),
// returns the k-th smallest (1-based, clipped to [1, m]).
double threshold_from_ratio(std::span<const double> consistencies, double rho);

// JSON: {"beta": b, "experts": [{"id": "...", "scores": [...]}, ...]}.
// A missing "beta" falls back to 0.05 with a warning.
ScoreTable read_scores(const std::filesystem::path& path);
void write_scores(const std::filesystem::path& path, const ScoreTable& table);
ScoreTable parse_scores(const std::string& text);
std::string format_scores(const ScoreTable& table);

} // namespace pivotmerge
