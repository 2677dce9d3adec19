#include "pivotmerge/operators.hpp"

#include "pivotmerge/error.hpp"
#include "pivotmerge/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pivotmerge {
namespace {

void check_inputs(std::span<const Matrix> mats, std::span<const double> weights) {
    if (mats.empty()) {
        throw ShapeError("merge: at least one input matrix is required");
    }
    if (weights.size() != mats.size()) {
        throw ShapeError("merge: " + std::to_string(weights.size()) + " weights for " +
                         std::to_string(mats.size()) + " matrices");
    }
    for (std::size_t i = 1; i < mats.size(); ++i) {
        if (mats[i].rows() != mats[0].rows() || mats[i].cols() != mats[0].cols()) {
            throw ShapeError("merge: input " + std::to_string(i) + " has shape " + std::to_string(mats[i].rows()) +
                             "x" + std::to_string(mats[i].cols()) + ", expected " + std::to_string(mats[0].rows()) +
                             "x" + std::to_string(mats[0].cols()));
        }
    }
    double total = 0.0;
    for (double w : weights) {
        if (!std::isfinite(w) || w < 0.0) {
            throw ConfigError("merge: weights must be finite and non-negative");
        }
        total += w;
    }
    if (!(total > 0.0)) {
        throw ConfigError("merge: all weights are zero");
    }
}

int sign_of(double v) {
    return (v > 0.0) - (v < 0.0);
}

} // namespace

std::string_view merge_kind_name(MergeKind kind) {
    switch (kind) {
    case MergeKind::WeightAverage: return "average";
    case MergeKind::TaskArithmetic: return "task-arithmetic";
    case MergeKind::Ties: return "ties";
    case MergeKind::DareTies: return "dare-ties";
    }
    return "average";
}

MergeKind parse_merge_kind(std::string_view name) {
    if (name == "average" || name == "weight_average" || name == "weight-average") return MergeKind::WeightAverage;
    if (name == "task-arithmetic" || name == "task_arithmetic") return MergeKind::TaskArithmetic;
    if (name == "ties") return MergeKind::Ties;
    if (name == "dare-ties" || name == "dare_ties") return MergeKind::DareTies;
    throw ConfigError("unknown merge operator '" + std::string(name) + "'");
}

MergeOperator MergeOperator::weight_average() {
    return MergeOperator{};
}

MergeOperator MergeOperator::task_arithmetic(double lambda) {
    MergeOperator op;
    op.kind = MergeKind::TaskArithmetic;
    op.scale = lambda;
    return op;
}

MergeOperator MergeOperator::ties(double trim_fraction) {
    MergeOperator op;
    op.kind = MergeKind::Ties;
    op.trim_fraction = trim_fraction;
    return op;
}

MergeOperator MergeOperator::dare_ties(double trim_fraction, double drop_rate, std::uint64_t seed) {
    MergeOperator op;
    op.kind = MergeKind::DareTies;
    op.trim_fraction = trim_fraction;
    op.drop_rate = drop_rate;
    op.seed = seed;
    return op;
}

void MergeOperator::validate() const {
    const bool wants_trim = kind == MergeKind::Ties || kind == MergeKind::DareTies;
    const bool wants_scale = kind == MergeKind::TaskArithmetic;
    const bool wants_drop = kind == MergeKind::DareTies;
    const std::string name(merge_kind_name(kind));
    auto presence = [&](bool wanted, bool present, const char* param) {
        if (wanted && !present) throw ConfigError(name + ": missing parameter " + param);
        if (!wanted && present) throw ConfigError(name + ": parameter " + std::string(param) + " does not apply");
    };
    presence(wants_trim, trim_fraction.has_value(), "trim_fraction");
    presence(wants_scale, scale.has_value(), "scale");
    presence(wants_drop, drop_rate.has_value(), "drop_rate");
    presence(wants_drop, seed.has_value(), "seed");

    if (trim_fraction && !(*trim_fraction > 0.0 && *trim_fraction <= 1.0)) {
        throw ConfigError(name + ": trim_fraction must be in (0, 1]");
    }
    if (scale && !(*scale > 0.0 && std::isfinite(*scale))) {
        throw ConfigError(name + ": scale must be > 0");
    }
    if (drop_rate && !(*drop_rate >= 0.0 && *drop_rate < 1.0)) {
        throw ConfigError(name + ": drop_rate must be in [0, 1)");
    }
    if (weight_sum_target && !(*weight_sum_target > 0.0 && std::isfinite(*weight_sum_target))) {
        throw ConfigError(name + ": weight_sum_target must be > 0");
    }
}

Matrix merge_weighted(const MergeOperator& op, std::span<const Matrix> mats, std::span<const double> weights) {
    op.validate();
    check_inputs(mats, weights);
    if (mats.size() == 1) {
        return mats.front();
    }

    const double target = op.weight_sum_target.value_or(static_cast<double>(mats.size()));
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    std::vector<double> w(weights.begin(), weights.end());
    for (double& x : w) x *= target / total;

    switch (op.kind) {
    case MergeKind::WeightAverage:
        return weight_average(mats, w);
    case MergeKind::TaskArithmetic:
        return task_arithmetic(mats, w, *op.scale);
    case MergeKind::Ties:
        return ties(mats, w, *op.trim_fraction);
    case MergeKind::DareTies: {
        std::vector<Matrix> dropped;
        dropped.reserve(mats.size());
        for (std::size_t i = 0; i < mats.size(); ++i) {
            dropped.push_back(dare(mats[i], *op.drop_rate, derive_seed(*op.seed, i)));
        }
        return ties(dropped, w, *op.trim_fraction);
    }
    }
    throw ConfigError("merge: unhandled operator kind");
}

Matrix weight_average(std::span<const Matrix> mats, std::span<const double> weights) {
    check_inputs(mats, weights);
    // Accumulate offsets from a reference input so identical inputs come
    // back bit-exact.
    std::size_t ref = 0;
    while (weights[ref] <= 0.0) ++ref;
    Matrix acc = Matrix::Zero(mats[0].rows(), mats[0].cols());
    double total = 0.0;
    for (std::size_t i = 0; i < mats.size(); ++i) {
        if (weights[i] <= 0.0) continue;
        acc += weights[i] * (mats[i] - mats[ref]);
        total += weights[i];
    }
    return mats[ref] + acc / total;
}

Matrix task_arithmetic(std::span<const Matrix> mats, std::span<const double> weights, double lambda) {
    check_inputs(mats, weights);
    if (!std::isfinite(lambda) || lambda < 0.0) {
        throw ConfigError("task_arithmetic: lambda must be finite and >= 0");
    }
    Matrix acc = Matrix::Zero(mats[0].rows(), mats[0].cols());
    for (std::size_t i = 0; i < mats.size(); ++i) {
        acc += weights[i] * mats[i];
    }
    return lambda * acc;
}

Matrix ties_trim(const Matrix& m, double trim_fraction) {
    if (!(trim_fraction > 0.0 && trim_fraction <= 1.0)) {
        throw ConfigError("ties: trim_fraction must be in (0, 1]");
    }
    const auto n = static_cast<std::size_t>(m.size());
    if (n == 0) return m;
    auto keep = static_cast<std::size_t>(std::ceil(trim_fraction * static_cast<double>(n) - 1e-9));
    keep = std::clamp<std::size_t>(keep, 1, n);
    if (keep == n) return m;

    // Row-major magnitudes; (magnitude desc, index asc) is a strict total
    // order, so the selected set is exactly the documented one.
    const auto cols = static_cast<std::size_t>(m.cols());
    std::vector<double> mag(n);
    for (std::size_t flat = 0; flat < n; ++flat) {
        mag[flat] = std::abs(m(static_cast<Eigen::Index>(flat / cols), static_cast<Eigen::Index>(flat % cols)));
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep - 1), order.end(),
                     [&](std::size_t a, std::size_t b) { return mag[a] > mag[b] || (mag[a] == mag[b] && a < b); });

    Matrix out = Matrix::Zero(m.rows(), m.cols());
    for (std::size_t i = 0; i < keep; ++i) {
        const std::size_t flat = order[i];
        const auto r = static_cast<Eigen::Index>(flat / cols);
        const auto c = static_cast<Eigen::Index>(flat % cols);
        out(r, c) = m(r, c);
    }
    return out;
}

Matrix ties(std::span<const Matrix> mats, std::span<const double> weights, double trim_fraction) {
    check_inputs(mats, weights);
    std::vector<Matrix> trimmed;
    trimmed.reserve(mats.size());
    for (const auto& m : mats) trimmed.push_back(ties_trim(m, trim_fraction));

    const std::size_t n = mats.size();
    Matrix out = Matrix::Zero(mats[0].rows(), mats[0].cols());
    for (Eigen::Index e = 0; e < out.size(); ++e) {
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) sum += weights[i] * trimmed[i](e);
        const int elected = sign_of(sum);
        if (elected == 0) continue;

        std::size_t ref = n;
        double total = 0.0;
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double v = trimmed[i](e);
            if (sign_of(v) != elected || weights[i] <= 0.0) continue;
            if (ref == n) ref = i;
            acc += weights[i] * (v - trimmed[ref](e));
            total += weights[i];
        }
        out(e) = trimmed[ref](e) + acc / total;
    }
    return out;
}

Matrix dare(const Matrix& m, double drop_rate, std::uint64_t seed) {
    if (!(drop_rate >= 0.0 && drop_rate < 1.0)) {
        throw ConfigError("dare: drop_rate must be in [0, 1)");
    }
    if (drop_rate == 0.0) return m;
    const CounterStream rng(seed, 0);
    const double rescale = 1.0 / (1.0 - drop_rate);
    Matrix out(m.rows(), m.cols());
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            const auto flat = static_cast<std::uint64_t>(r * m.cols() + c);
            out(r, c) = rng.uniform(flat) < drop_rate ? 0.0 : m(r, c) * rescale;
        }
    }
    return out;
}

} // namespace pivotmerge
