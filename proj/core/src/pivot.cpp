#include "pivotmerge/pivot.hpp"

#include "pivotmerge/error.hpp"
#include "pivotmerge/log.hpp"
#include "pivotmerge/random.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <set>
#include <thread>

#include <json.hpp>

namespace pivotmerge {
namespace {

using json = nlohmann::json;

std::vector<double> to_std(const Vector& v) {
    return {v.data(), v.data() + v.size()};
}

// Distinct DARE streams per layer and branch so no two merges share a mask.
MergeOperator with_derived_seed(MergeOperator op, std::uint64_t ordinal) {
    if (op.seed) op.seed = derive_seed(*op.seed, ordinal);
    return op;
}

void check_same_shapes(std::span<const Matrix> mats, const char* what) {
    if (mats.empty()) {
        throw ShapeError(std::string(what) + ": at least one expert is required");
    }
    for (const auto& m : mats) {
        if (m.rows() != mats[0].rows() || m.cols() != mats[0].cols()) {
            throw ShapeError(std::string(what) + ": expert matrices differ in shape");
        }
    }
}

} // namespace

void PivotConfig::validate() const {
    if (rank < 1) throw ConfigError("rank must be >= 1");
    if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ConfigError("gamma must be > 0");
    if (!(rho > 0.0 && rho < 1.0)) throw ConfigError("rho must be in (0, 1)");
    if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be > 0");
    inner.validate();
}

std::vector<std::vector<Matrix>> task_vectors(std::span<const ProjectorCheckpoint> experts,
                                              const ProjectorCheckpoint& base) {
    if (experts.empty()) {
        throw ShapeError("task_vectors: at least one expert is required");
    }
    validate_checkpoint(base);
    for (const auto& e : experts) require_same_layout(base, e);

    std::vector<std::vector<Matrix>> out(base.layers.size());
    for (std::size_t l = 0; l < base.layers.size(); ++l) {
        const Matrix w0 = augment(base.layers[l]).matrix;
        for (const auto& e : experts) {
            out[l].push_back(augment(e.layers[l]).matrix - w0);
        }
    }
    return out;
}

SharedSpaceLayer joint_decompose(std::span<const Matrix> deltas) {
    check_same_shapes(deltas, "joint_decompose");
    const Eigen::Index rows = deltas[0].rows();
    const Eigen::Index width = deltas[0].cols();
    const auto n = static_cast<Eigen::Index>(deltas.size());

    Matrix concat(rows, width * n);
    for (Eigen::Index i = 0; i < n; ++i) {
        concat.middleCols(i * width, width) = deltas[static_cast<std::size_t>(i)];
    }

    SharedSpaceLayer layer;
    if (concat.size() == 0 || (concat.array() == 0.0).all()) {
        layer.degenerate = true;
        layer.U = Matrix::Zero(rows, 0);
        layer.S = Vector::Zero(0);
        layer.coeffs.assign(deltas.size(), Matrix::Zero(0, width));
        return layer;
    }

    // Directions with numerically zero singular value have arbitrary
    // coefficient rows; they carry no part of any delta and are dropped.
    const SvdFactors f = thin_svd(concat);
    const auto keep = static_cast<Eigen::Index>((f.S.array() > kBasisRelTol * f.S(0)).count());
    layer.U = f.U.leftCols(keep);
    layer.S = f.S.head(keep);
    layer.coeffs.reserve(deltas.size());
    for (Eigen::Index i = 0; i < n; ++i) {
        layer.coeffs.push_back(f.Vt.block(0, i * width, keep, width));
    }
    return layer;
}

std::vector<Matrix> scale_coefficients(const SharedSpaceLayer& layer) {
    std::vector<Matrix> out;
    out.reserve(layer.coeffs.size());
    for (const auto& c : layer.coeffs) out.push_back(layer.S.asDiagonal() * c);
    return out;
}

DecoupledLayer decouple(std::span<const Matrix> coeffs, int rank) {
    if (rank < 1) throw ConfigError("decouple: rank must be >= 1");
    check_same_shapes(coeffs, "decouple");

    DecoupledLayer out;
    const Eigen::Index limit = std::min(coeffs[0].rows(), coeffs[0].cols());
    if (limit == 0) {
        out.cores.assign(coeffs.size(), Matrix::Zero(coeffs[0].rows(), coeffs[0].cols()));
        out.residuals = out.cores;
        return out;
    }
    if (rank > limit) {
        warn("rank " + std::to_string(rank) + " exceeds min(k, w) = " + std::to_string(limit) + "; clamping");
    }
    out.rank_used = static_cast<int>(std::min<Eigen::Index>(rank, limit));
    out.cores.reserve(coeffs.size());
    out.residuals.reserve(coeffs.size());
    for (const auto& c : coeffs) {
        Matrix core = truncate_rank(c, out.rank_used);
        out.residuals.push_back(c - core);
        out.cores.push_back(std::move(core));
    }
    return out;
}

Vector residual_consistency(std::span<const Matrix> residuals) {
    check_same_shapes(residuals, "residual_consistency");
    const std::size_t n = residuals.size();
    const Eigen::Index k = residuals[0].rows();
    Vector c = Vector::Zero(k);
    if (n < 2) return c;
    const double pairs = static_cast<double>(n * (n - 1));
    for (Eigen::Index row = 0; row < k; ++row) {
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                sum += cosine(residuals[i].row(row), residuals[j].row(row));
            }
        }
        // Each unordered pair stands for the two ordered pairs (i,j), (j,i).
        c(row) = 2.0 * sum / pairs;
    }
    return c;
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

ResidualFilter filter_residuals(std::span<const Matrix> residuals, double gamma, double rho) {
    if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ConfigError("filter_residuals: gamma must be > 0");
    if (!(rho > 0.0 && rho < 1.0)) throw ConfigError("filter_residuals: rho must be in (0, 1)");
    check_same_shapes(residuals, "filter_residuals");

    ResidualFilter out;
    const Eigen::Index k = residuals[0].rows();
    if (residuals.size() == 1) {
        out.filtered.assign(residuals.begin(), residuals.end());
        out.mask = Vector::Ones(k);
        return out;
    }
    out.consistencies = residual_consistency(residuals);
    if (k == 0) {
        out.mask = Vector::Zero(0);
        out.filtered.assign(residuals.begin(), residuals.end());
        return out;
    }
    const double tau = threshold_from_ratio(std::span<const double>(out.consistencies.data(), k), rho);
    out.tau = tau;
    out.mask.resize(k);
    for (Eigen::Index row = 0; row < k; ++row) {
        out.mask(row) = sigmoid(gamma * (out.consistencies(row) - tau));
    }

    out.filtered.reserve(residuals.size());
    for (std::size_t i = 0; i < residuals.size(); ++i) {
        bool compensated = true;
        out.filtered.push_back(mask_and_compensate(residuals[i], out.mask, &compensated));
        if (!compensated) out.uncompensated.push_back(i);
    }
    return out;
}

Matrix mask_and_compensate(const Matrix& residual, const Vector& mask, bool* compensated) {
    if (mask.size() != residual.rows()) {
        throw ShapeError("mask_and_compensate: mask length does not match residual rows");
    }
    Matrix masked = mask.asDiagonal() * residual;
    const double masked_l1 = masked.cwiseAbs().sum();
    const bool ok = masked_l1 >= kCompensationFloor;
    if (ok) masked *= residual.cwiseAbs().sum() / masked_l1;
    if (compensated) *compensated = ok;
    return masked;
}

Matrix merge_layer(const SharedSpaceLayer& shared, const DecoupledLayer& decoupled, const Vector& alphas,
                   const MergeOperator& op, bool magnitude_space) {
    const std::size_t n = decoupled.cores.size();
    if (n == 0 || decoupled.filter.filtered.size() != n) {
        throw ShapeError("merge_layer: decoupled layer is incomplete (filter_residuals not applied?)");
    }
    if (static_cast<std::size_t>(alphas.size()) != n) {
        throw ShapeError("merge_layer: " + std::to_string(alphas.size()) + " alphas for " + std::to_string(n) +
                         " experts");
    }
    if (!alphas.allFinite() || (alphas.array() < 0.0).any() || std::abs(alphas.sum() - 1.0) > 1e-9) {
        throw ConfigError("merge_layer: alphas must be non-negative and sum to 1");
    }

    const std::vector<double> core_weights = to_std(alphas);
    const std::vector<double> uniform(n, 1.0);
    const Matrix core = merge_weighted(with_derived_seed(op, 0), decoupled.cores, core_weights);
    const Matrix residual = merge_weighted(with_derived_seed(op, 1), decoupled.filter.filtered, uniform);
    Matrix merged = core + residual;

    if (magnitude_space) {
        if (shared.S.size() != merged.rows()) {
            throw ShapeError("merge_layer: singular values do not match coefficient rows");
        }
        for (Eigen::Index k = 0; k < merged.rows(); ++k) {
            const double s = shared.S(k);
            if (s < kSingularFloor) {
                merged.row(k).setZero();
            } else {
                merged.row(k) /= s;
            }
        }
    }
    return merged;
}

Layer reconstruct(const SharedSpaceLayer& shared, const Matrix& merged_coeffs, const AugmentedLayer& base) {
    if (shared.degenerate || shared.S.size() == 0) {
        return split(base);
    }
    if (shared.U.rows() != base.matrix.rows() || merged_coeffs.rows() != shared.S.size() ||
        merged_coeffs.cols() != base.matrix.cols()) {
        throw ShapeError("reconstruct: inconsistent shapes");
    }
    AugmentedLayer out{base.matrix + shared.U * shared.S.asDiagonal() * merged_coeffs, base.had_bias};
    return split(out);
}

std::vector<Matrix> LayerState::filtered_coefficients() const {
    std::vector<Matrix> out;
    out.reserve(decoupled.cores.size());
    for (std::size_t i = 0; i < decoupled.cores.size(); ++i) {
        out.push_back(decoupled.cores[i] + decoupled.filter.filtered[i]);
    }
    return out;
}

LayerState decompose_layer(std::span<const Matrix> deltas, const PivotConfig& config) {
    LayerState state;
    state.magnitude_space = config.use_magnitude_space();
    state.shared = joint_decompose(deltas);
    const std::vector<Matrix> coeffs =
        state.magnitude_space ? scale_coefficients(state.shared) : state.shared.coeffs;
    state.decoupled = decouple(coeffs, config.rank);
    state.decoupled.filter = filter_residuals(state.decoupled.residuals, config.gamma, config.rho);
    return state;
}

std::vector<ProjectorCheckpoint> sort_experts(std::span<const ProjectorCheckpoint> experts) {
    std::vector<ProjectorCheckpoint> sorted(experts.begin(), experts.end());
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const ProjectorCheckpoint& a, const ProjectorCheckpoint& b) { return a.id < b.id; });
    for (std::size_t i = 1; i < sorted.size(); ++i) {
        if (sorted[i].id == sorted[i - 1].id) {
            throw ConfigError("duplicate expert id '" + sorted[i].id + "'");
        }
    }
    return sorted;
}

LayerOutcome pivot_merge_layer(std::span<const ProjectorCheckpoint> sorted_experts, const ProjectorCheckpoint& base,
                               std::size_t layer, const Vector& alphas, const PivotConfig& config) {
    if (layer >= base.layers.size()) {
        throw ShapeError("pivot_merge_layer: layer index out of range");
    }
    const AugmentedLayer base_aug = augment(base.layers[layer]);
    std::vector<Matrix> deltas;
    deltas.reserve(sorted_experts.size());
    for (const auto& e : sorted_experts) {
        deltas.push_back(augment(e.layers[layer]).matrix - base_aug.matrix);
    }

    const LayerState state = decompose_layer(deltas, config);
    const MergeOperator op = with_derived_seed(config.inner, layer);
    const Matrix merged_coeffs = merge_layer(state.shared, state.decoupled, alphas, op, state.magnitude_space);

    LayerOutcome out;
    out.merged = reconstruct(state.shared, merged_coeffs, base_aug);

    auto& d = out.diagnostics;
    d.layer = layer + 1;
    d.alpha = to_std(alphas);
    d.consistencies = to_std(state.decoupled.filter.consistencies);
    d.mask = to_std(state.decoupled.filter.mask);
    d.tau = state.decoupled.filter.tau;
    d.singular_values = to_std(state.shared.S);
    d.rank_used = state.decoupled.rank_used;
    d.degenerate = state.shared.degenerate;
    for (std::size_t i : state.decoupled.filter.uncompensated) {
        d.uncompensated.push_back(sorted_experts[i].id);
    }
    return out;
}

PivotResult pivot_merge(std::span<const ProjectorCheckpoint> experts, const ProjectorCheckpoint& base,
                        const ScoreTable& scores, const PivotConfig& config, unsigned threads) {
    config.validate();
    if (experts.empty()) {
        throw ShapeError("pivot_merge: at least one expert is required");
    }
    const std::vector<ProjectorCheckpoint> sorted = sort_experts(experts);
    validate_checkpoint(base);
    for (const auto& e : sorted) require_same_layout(base, e);

    scores.validate();
    const std::size_t layers = base.layers.size();
    if (scores.layers() != layers) {
        throw ShapeError("score table has " + std::to_string(scores.layers()) + " layers, checkpoints have " +
                         std::to_string(layers));
    }
    Matrix table(static_cast<Eigen::Index>(sorted.size()), static_cast<Eigen::Index>(layers));
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        table.row(static_cast<Eigen::Index>(i)) = scores.row(sorted[i].id).transpose();
    }
    const LayerWeights weights = layer_weights(score_increments(table), config.beta);

    std::vector<std::optional<LayerOutcome>> outcomes(layers);
    std::vector<std::exception_ptr> errors(layers);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t l = next++; l < layers; l = next++) {
            try {
                outcomes[l] = pivot_merge_layer(sorted, base, l, weights.alpha.col(static_cast<Eigen::Index>(l)),
                                                config);
            } catch (...) {
                errors[l] = std::current_exception();
            }
        }
    };
    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    threads = static_cast<unsigned>(std::min<std::size_t>(threads, layers));
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    PivotResult result;
    result.merged.id = "merged";
    result.merged.dtype = base.dtype;
    result.diagnostics.config = config;
    for (const auto& e : sorted) result.diagnostics.expert_ids.push_back(e.id);
    for (auto& o : outcomes) {
        result.merged.layers.push_back(std::move(o->merged));
        result.diagnostics.layers.push_back(std::move(o->diagnostics));
    }
    return result;
}

ProjectorCheckpoint baseline_merge(std::span<const ProjectorCheckpoint> experts, const ProjectorCheckpoint& base,
                                   const MergeOperator& op) {
    op.validate();
    const std::vector<ProjectorCheckpoint> sorted = sort_experts(experts);
    const auto deltas = task_vectors(sorted, base);
    const std::vector<double> uniform(sorted.size(), 1.0);

    ProjectorCheckpoint out;
    out.id = "merged";
    out.dtype = base.dtype;
    for (std::size_t l = 0; l < deltas.size(); ++l) {
        AugmentedLayer aug = augment(base.layers[l]);
        aug.matrix += merge_weighted(with_derived_seed(op, l), deltas[l], uniform);
        out.layers.push_back(split(aug));
    }
    return out;
}

std::string diagnostics_to_json(const PivotDiagnostics& diagnostics) {
    const auto& cfg = diagnostics.config;
    json inner = {{"kind", merge_kind_name(cfg.inner.kind)}};
    if (cfg.inner.trim_fraction) inner["trim_fraction"] = *cfg.inner.trim_fraction;
    if (cfg.inner.scale) inner["lambda"] = *cfg.inner.scale;
    if (cfg.inner.drop_rate) inner["drop_rate"] = *cfg.inner.drop_rate;
    if (cfg.inner.seed) inner["seed"] = *cfg.inner.seed;

    json doc;
    doc["experts"] = diagnostics.expert_ids;
    doc["config"] = {
        {"rank", cfg.rank},   {"gamma", cfg.gamma}, {"rho", cfg.rho},
        {"beta", cfg.beta},   {"inner", inner},     {"magnitude_space", cfg.use_magnitude_space()},
    };
    doc["layers"] = json::array();
    for (const auto& l : diagnostics.layers) {
        doc["layers"].push_back({
            {"layer", l.layer},
            {"alpha", l.alpha},
            {"consistency", l.consistencies},
            {"mask", l.mask},
            {"tau", l.tau ? json(*l.tau) : json(nullptr)},
            {"singular_values", l.singular_values},
            {"rank_used", l.rank_used},
            {"degenerate", l.degenerate},
            {"uncompensated", l.uncompensated},
        });
    }
    return doc.dump(2) + "\n";
}

} // namespace pivotmerge
