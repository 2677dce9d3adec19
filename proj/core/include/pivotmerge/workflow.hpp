#pragma once

// File-level workflows behind the `pivotmerge` command-line tool.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pivotmerge/analysis.hpp"
#include "pivotmerge/pivot.hpp"
#include "pivotmerge/synth.hpp"

namespace pivotmerge {

inline constexpr const char* kCheckpointExtension = ".tensors";

enum class MergeMethod { Average, TaskArithmetic, Ties, DareTies, Pivot };

MergeMethod parse_merge_method(std::string_view name);

struct MergeJob {
    MergeMethod method = MergeMethod::Pivot;
    std::filesystem::path base;
    std::vector<std::filesystem::path> experts;
    std::filesystem::path out;
    std::optional<std::filesystem::path> scores;      // required for pivot
    std::optional<std::filesystem::path> diagnostics; // pivot only
    MergeOperator baseline = MergeOperator::weight_average(); // non-pivot methods
    PivotConfig pivot;
    // When unset, the score file's beta is used for pivot merges.
    std::optional<double> beta_override;
    unsigned threads = 1;
};

// Loads checkpoints (ids = file stems) sorted lexicographically by id.
std::vector<ProjectorCheckpoint> load_experts(const std::vector<std::filesystem::path>& paths);

void run_merge(const MergeJob& job);

enum class AnalysisMode { ResidualSimilarity, PrincipalAngles, LayerWeights };

AnalysisMode parse_analysis_mode(std::string_view name);

struct AnalyzeJob {
    AnalysisMode mode = AnalysisMode::ResidualSimilarity;
    std::optional<std::filesystem::path> base;
    std::vector<std::filesystem::path> experts;
    std::optional<std::filesystem::path> scores;
    std::filesystem::path out_dir;
    PivotConfig pivot;
    std::optional<double> beta_override;
};

AnalysisReport build_analysis(const AnalyzeJob& job);
void run_analysis(const AnalyzeJob& job);

// Writes base.tensors, one <expert id>.tensors per expert,
// ground_truth.tensors (planted cores), spec.json and scores.json (equal
// scores for every expert) into `dir`.
void run_synth(const SynthSpec& spec, const std::filesystem::path& dir);

// Reads feature tensors and writes a score JSON.
void run_scores(const std::filesystem::path& features, const std::filesystem::path& out, double beta);

// PIVOTMERGE_THREADS: unset or 0 = hardware concurrency.
unsigned threads_from_env();

} // namespace pivotmerge
