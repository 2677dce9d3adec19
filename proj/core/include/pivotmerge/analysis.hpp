#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pivotmerge/pivot.hpp"

namespace pivotmerge {

// Pairwise cosine between flattened matrices; symmetric, unit diagonal.
// Zero inputs get a zero diagonal entry and are listed in `zero_inputs`.
struct SimilarityMatrix {
    Matrix values;
    std::vector<std::size_t> zero_inputs;
};
SimilarityMatrix residual_similarity(std::span<const Matrix> residuals);

// Mean principal angle (degrees) between column spaces; symmetric, zero
// diagonal. Pairs involving a zero input are set to 90 and listed in
// `zero_inputs`.
struct AngleMatrix {
    Matrix values;
    std::vector<std::size_t> zero_inputs;
};
AngleMatrix pairwise_principal_angles(std::span<const Matrix> sources);

// One subspace source per model from its per-layer matrices: horizontal
// concatenation when every layer has the same row count, otherwise the
// block-diagonal direct sum.
Matrix model_subspace(std::span<const Matrix> layer_matrices);

// All layers of one model flattened (row-major per layer) into a column.
Matrix flatten_layers(std::span<const Matrix> layer_matrices);

double mean_off_diagonal(const Matrix& m);

// Per-layer decomposition state for a set of experts, used by the reports.
struct ModelDecomposition {
    std::vector<std::string> expert_ids;   // sorted
    std::vector<std::vector<Matrix>> deltas; // [layer][expert]
    std::vector<LayerState> layers;
};
ModelDecomposition decompose_models(std::span<const ProjectorCheckpoint> experts, const ProjectorCheckpoint& base,
                                    const PivotConfig& config);

// Per-expert residuals before (B_i) and after (B~_i) filtering, one matrix
// per layer: result[expert][layer].
std::vector<std::vector<Matrix>> residuals_by_expert(const ModelDecomposition& d, bool filtered);

// A collection of named matrices plus a JSON summary.
//
// emit_report writes <dir>/<name>.csv for every matrix (comma separated,
// one row per line, 17 significant digits) and <dir>/summary.json:
//   {"experts": [...],
//    "layers": [{"layer": l, "alpha": [...], "tau": t|null,
//                "mask": {"min": ., "max": ., "mean": .}}, ...],
//    "statistics": {"<name>": value, ...},
//    "flags": ["..."],
//    "matrices": ["<name>.csv", ...]}
struct AnalysisReport {
    std::vector<std::string> expert_ids;
    std::vector<LayerDiagnostics> layers;
    std::vector<std::pair<std::string, Matrix>> matrices;
    std::map<std::string, double> statistics;
    std::vector<std::string> flags;
};

std::string report_summary_json(const AnalysisReport& report);
void emit_report(const AnalysisReport& report, const std::filesystem::path& dir);

void write_matrix_csv(const std::filesystem::path& path, const Matrix& m);
Matrix read_matrix_csv(const std::filesystem::path& path);

// Report builders used by the `analyze` command.
AnalysisReport residual_similarity_report(std::span<const ProjectorCheckpoint> experts,
                                          const ProjectorCheckpoint& base, const PivotConfig& config);
AnalysisReport principal_angle_report(std::span<const ProjectorCheckpoint> experts, const ProjectorCheckpoint& base,
                                      const PivotConfig& config);
AnalysisReport layer_weight_report(const ScoreTable& scores, double beta);

} // namespace pivotmerge
