#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace pivotmerge {

using Matrix = Eigen::MatrixXd;

enum class MergeKind { WeightAverage, TaskArithmetic, Ties, DareTies };

std::string_view merge_kind_name(MergeKind kind);
// Accepts "average", "weight_average", "task-arithmetic", "task_arithmetic",
// "ties", "dare-ties", "dare_ties".
MergeKind parse_merge_kind(std::string_view name);

// A merge operator and its parameters. A parameter is present exactly when
// the operator kind uses it; use the factory functions to construct.
struct MergeOperator {
    MergeKind kind = MergeKind::WeightAverage;
    std::optional<double> trim_fraction; // ties, dare_ties: (0, 1]
    std::optional<double> scale;         // task_arithmetic: lambda > 0
    std::optional<double> drop_rate;     // dare_ties: [0, 1)
    std::optional<std::uint64_t> seed;   // dare_ties
    // Weights are rescaled to sum to this before use; defaults to N.
    std::optional<double> weight_sum_target;

    static MergeOperator weight_average();
    static MergeOperator task_arithmetic(double lambda);
    static MergeOperator ties(double trim_fraction);
    static MergeOperator dare_ties(double trim_fraction, double drop_rate, std::uint64_t seed);

    // Throws ConfigError when parameters are missing, extra or out of range.
    void validate() const;

    // True for operators that prune by magnitude (ties, dare_ties).
    bool magnitude_based() const { return kind == MergeKind::Ties || kind == MergeKind::DareTies; }
};

// Generic weighted merge: validates inputs, rescales weights to
// weight_sum_target (default N) and dispatches. A single input is returned
// unchanged for every operator.
Matrix merge_weighted(const MergeOperator& op, std::span<const Matrix> mats, std::span<const double> weights);

// sum_i w_i M_i / sum_i w_i
Matrix weight_average(std::span<const Matrix> mats, std::span<const double> weights);

// lambda * sum_i w_i M_i (inputs are task-vector deltas).
Matrix task_arithmetic(std::span<const Matrix> mats, std::span<const double> weights, double lambda);

// Trim (per matrix, row-major flat order, ties at the cutoff keep the lower
// index), elect sign by weighted sum, then take the weighted mean of the
// agreeing trimmed values. Entries whose weighted sum is exactly zero are 0.
Matrix ties(std::span<const Matrix> mats, std::span<const double> weights, double trim_fraction);

// Keeps the top ceil(trim_fraction * n) entries by magnitude and zeroes the
// rest. Exposed for testing.
Matrix ties_trim(const Matrix& m, double trim_fraction);

// Zeroes each entry with probability p (keyed by seed and row-major entry
// index) and rescales survivors by 1/(1-p).
Matrix dare(const Matrix& m, double drop_rate, std::uint64_t seed);

} // namespace pivotmerge
