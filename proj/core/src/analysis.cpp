#include "pivotmerge/analysis.hpp"

#include "pivotmerge/error.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace pivotmerge {
namespace {

using json = nlohmann::json;

bool is_zero(const Matrix& m) {
    return m.size() == 0 || (m.array() == 0.0).all();
}

void check_shapes(std::span<const Matrix> mats, const char* what) {
    if (mats.size() < 2) {
        throw ConfigError(std::string(what) + ": at least two inputs are required");
    }
    for (const auto& m : mats) {
        if (m.rows() != mats[0].rows() || m.cols() != mats[0].cols()) {
            throw ShapeError(std::string(what) + ": inputs differ in shape");
        }
    }
}

void add_layer_summaries(AnalysisReport& report, const ModelDecomposition& d) {
    for (std::size_t l = 0; l < d.layers.size(); ++l) {
        const auto& f = d.layers[l].decoupled.filter;
        LayerDiagnostics diag;
        diag.layer = l + 1;
        diag.tau = f.tau;
        diag.mask.assign(f.mask.data(), f.mask.data() + f.mask.size());
        diag.consistencies.assign(f.consistencies.data(), f.consistencies.data() + f.consistencies.size());
        diag.singular_values.assign(d.layers[l].shared.S.data(),
                                    d.layers[l].shared.S.data() + d.layers[l].shared.S.size());
        diag.rank_used = d.layers[l].decoupled.rank_used;
        diag.degenerate = d.layers[l].shared.degenerate;
        report.layers.push_back(std::move(diag));
    }
}

void flag_zero_inputs(AnalysisReport& report, const std::string& what, const std::vector<std::size_t>& zeros) {
    for (std::size_t i : zeros) {
        report.flags.push_back(what + ": input '" + report.expert_ids.at(i) + "' is a zero matrix");
    }
}

} // namespace

SimilarityMatrix residual_similarity(std::span<const Matrix> residuals) {
    check_shapes(residuals, "residual_similarity");
    const auto n = static_cast<Eigen::Index>(residuals.size());
    SimilarityMatrix out;
    out.values = Matrix::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const bool zero = is_zero(residuals[static_cast<std::size_t>(i)]);
        if (zero) out.zero_inputs.push_back(static_cast<std::size_t>(i));
        out.values(i, i) = zero ? 0.0 : 1.0;
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const double c =
                flat_cosine(residuals[static_cast<std::size_t>(i)], residuals[static_cast<std::size_t>(j)]);
            out.values(i, j) = c;
            out.values(j, i) = c;
        }
    }
    return out;
}

AngleMatrix pairwise_principal_angles(std::span<const Matrix> sources) {
    if (sources.size() < 2) {
        throw ConfigError("pairwise_principal_angles: at least two inputs are required");
    }
    for (const auto& m : sources) {
        if (m.rows() != sources[0].rows()) {
            throw ShapeError("pairwise_principal_angles: inputs live in different ambient spaces");
        }
    }
    const auto n = static_cast<Eigen::Index>(sources.size());
    AngleMatrix out;
    out.values = Matrix::Zero(n, n);
    std::vector<bool> zero(sources.size());
    for (std::size_t i = 0; i < sources.size(); ++i) {
        zero[i] = is_zero(sources[i]);
        if (zero[i]) out.zero_inputs.push_back(i);
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const auto a = static_cast<std::size_t>(i);
            const auto b = static_cast<std::size_t>(j);
            const double angle = (zero[a] || zero[b]) ? 90.0 : mean(principal_angles(sources[a], sources[b]));
            out.values(i, j) = angle;
            out.values(j, i) = angle;
        }
    }
    return out;
}

Matrix model_subspace(std::span<const Matrix> layer_matrices) {
    if (layer_matrices.empty()) {
        throw ShapeError("model_subspace: no layers");
    }
    Eigen::Index rows_total = 0;
    Eigen::Index cols_total = 0;
    bool same_rows = true;
    for (const auto& m : layer_matrices) {
        rows_total += m.rows();
        cols_total += m.cols();
        same_rows = same_rows && m.rows() == layer_matrices.front().rows();
    }
    if (same_rows) {
        Matrix out(layer_matrices.front().rows(), cols_total);
        Eigen::Index col = 0;
        for (const auto& m : layer_matrices) {
            out.middleCols(col, m.cols()) = m;
            col += m.cols();
        }
        return out;
    }
    Matrix out = Matrix::Zero(rows_total, cols_total);
    Eigen::Index row = 0;
    Eigen::Index col = 0;
    for (const auto& m : layer_matrices) {
        out.block(row, col, m.rows(), m.cols()) = m;
        row += m.rows();
        col += m.cols();
    }
    return out;
}

Matrix flatten_layers(std::span<const Matrix> layer_matrices) {
    Eigen::Index total = 0;
    for (const auto& m : layer_matrices) total += m.size();
    Matrix out(total, 1);
    Eigen::Index at = 0;
    for (const auto& m : layer_matrices) {
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            for (Eigen::Index c = 0; c < m.cols(); ++c) out(at++, 0) = m(r, c);
        }
    }
    return out;
}

double mean_off_diagonal(const Matrix& m) {
    const Eigen::Index n = m.rows();
    if (n < 2) return 0.0;
    double sum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            if (i != j) sum += m(i, j);
        }
    }
    return sum / static_cast<double>(n * (n - 1));
}

ModelDecomposition decompose_models(std::span<const ProjectorCheckpoint> experts, const ProjectorCheckpoint& base,
                                    const PivotConfig& config) {
    config.validate();
    const std::vector<ProjectorCheckpoint> sorted = sort_experts(experts);
    ModelDecomposition d;
    for (const auto& e : sorted) d.expert_ids.push_back(e.id);
    d.deltas = task_vectors(sorted, base);
    for (const auto& layer_deltas : d.deltas) {
        d.layers.push_back(decompose_layer(layer_deltas, config));
    }
    return d;
}

std::vector<std::vector<Matrix>> residuals_by_expert(const ModelDecomposition& d, bool filtered) {
    std::vector<std::vector<Matrix>> out(d.expert_ids.size());
    for (const auto& layer : d.layers) {
        const auto& source = filtered ? layer.decoupled.filter.filtered : layer.decoupled.residuals;
        for (std::size_t i = 0; i < out.size(); ++i) out[i].push_back(source[i]);
    }
    return out;
}

std::string report_summary_json(const AnalysisReport& report) {
    json doc;
    doc["experts"] = report.expert_ids;
    doc["layers"] = json::array();
    for (const auto& l : report.layers) {
        json mask = nullptr;
        if (!l.mask.empty()) {
            const auto [lo, hi] = std::minmax_element(l.mask.begin(), l.mask.end());
            mask = {{"min", *lo}, {"max", *hi}, {"mean", mean(l.mask)}};
        }
        doc["layers"].push_back({
            {"layer", l.layer},
            {"alpha", l.alpha},
            {"tau", l.tau ? json(*l.tau) : json(nullptr)},
            {"mask", mask},
        });
    }
    doc["statistics"] = json::object();
    for (const auto& [name, value] : report.statistics) doc["statistics"][name] = value;
    doc["flags"] = report.flags;
    doc["matrices"] = json::array();
    for (const auto& [name, m] : report.matrices) doc["matrices"].push_back(name + ".csv");
    return doc.dump(2) + "\n";
}

void write_matrix_csv(const std::filesystem::path& path, const Matrix& m) {
    std::ostringstream os;
    os << std::setprecision(17);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            if (c) os << ',';
            os << m(r, c);
        }
        os << '\n';
    }
    std::ofstream file(path, std::ios::trunc);
    if (!file) throw IoError("cannot open '" + path.string() + "' for writing");
    file << os.str();
    if (!file) throw IoError("failed writing '" + path.string() + "'");
}

Matrix read_matrix_csv(const std::filesystem::path& path) {
    std::ifstream file(path);
    if (!file) throw IoError("cannot open '" + path.string() + "'");
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(file, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            try {
                row.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw FormatError("bad CSV value '" + cell + "' in '" + path.string() + "'");
            }
        }
        if (!rows.empty() && row.size() != rows.front().size()) {
            throw FormatError("ragged CSV rows in '" + path.string() + "'");
        }
        rows.push_back(std::move(row));
    }
    Matrix m(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t c = 0; c < rows[r].size(); ++c) {
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
        }
    }
    return m;
}

void emit_report(const AnalysisReport& report, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
    for (const auto& [name, m] : report.matrices) {
        write_matrix_csv(dir / (name + ".csv"), m);
    }
    const std::string summary = report_summary_json(report);
    std::ofstream os(dir / "summary.json", std::ios::trunc);
    if (!os) throw IoError("cannot write '" + (dir / "summary.json").string() + "'");
    os << summary;
    if (!os) throw IoError("failed writing '" + (dir / "summary.json").string() + "'");
}

AnalysisReport residual_similarity_report(std::span<const ProjectorCheckpoint> experts,
                                          const ProjectorCheckpoint& base, const PivotConfig& config) {
    const ModelDecomposition d = decompose_models(experts, base, config);
    AnalysisReport report;
    report.expert_ids = d.expert_ids;
    add_layer_summaries(report, d);

    std::vector<double> before_layers, after_layers;
    for (std::size_t l = 0; l < d.layers.size(); ++l) {
        const auto& dec = d.layers[l].decoupled;
        const std::string suffix = "_layer" + std::to_string(l + 1);
        const SimilarityMatrix before = residual_similarity(dec.residuals);
        const SimilarityMatrix after = residual_similarity(dec.filter.filtered);
        flag_zero_inputs(report, "residual_sim_before" + suffix, before.zero_inputs);
        flag_zero_inputs(report, "residual_sim_after" + suffix, after.zero_inputs);
        report.statistics["residual_sim_before" + suffix + ".mean_off_diagonal"] = mean_off_diagonal(before.values);
        report.statistics["residual_sim_after" + suffix + ".mean_off_diagonal"] = mean_off_diagonal(after.values);
        report.matrices.emplace_back("residual_sim_before" + suffix, before.values);
        report.matrices.emplace_back("residual_sim_after" + suffix, after.values);
    }

    std::vector<Matrix> before_flat, after_flat;
    for (const auto& layers : residuals_by_expert(d, false)) before_flat.push_back(flatten_layers(layers));
    for (const auto& layers : residuals_by_expert(d, true)) after_flat.push_back(flatten_layers(layers));
    const SimilarityMatrix before = residual_similarity(before_flat);
    const SimilarityMatrix after = residual_similarity(after_flat);
    flag_zero_inputs(report, "residual_sim_before_model", before.zero_inputs);
    flag_zero_inputs(report, "residual_sim_after_model", after.zero_inputs);
    report.statistics["residual_sim_before_model.mean_off_diagonal"] = mean_off_diagonal(before.values);
    report.statistics["residual_sim_after_model.mean_off_diagonal"] = mean_off_diagonal(after.values);
    report.matrices.emplace_back("residual_sim_before_model", before.values);
    report.matrices.emplace_back("residual_sim_after_model", after.values);
    report.matrices.emplace_back("residual_sim_improvement_model", after.values - before.values);
    return report;
}

AnalysisReport principal_angle_report(std::span<const ProjectorCheckpoint> experts, const ProjectorCheckpoint& base,
                                      const PivotConfig& config) {
    const ModelDecomposition d = decompose_models(experts, base, config);
    AnalysisReport report;
    report.expert_ids = d.expert_ids;
    add_layer_summaries(report, d);

    const std::size_t n = d.expert_ids.size();
    std::vector<std::vector<Matrix>> raw(n), filtered(n);
    for (std::size_t l = 0; l < d.layers.size(); ++l) {
        const std::vector<Matrix> coeffs = d.layers[l].filtered_coefficients();
        for (std::size_t i = 0; i < n; ++i) {
            raw[i].push_back(d.deltas[l][i]);
            filtered[i].push_back(coeffs[i]);
        }
    }
    std::vector<Matrix> raw_models, filtered_models;
    for (std::size_t i = 0; i < n; ++i) {
        raw_models.push_back(model_subspace(raw[i]));
        filtered_models.push_back(model_subspace(filtered[i]));
    }
    const AngleMatrix raw_angles = pairwise_principal_angles(raw_models);
    const AngleMatrix filtered_angles = pairwise_principal_angles(filtered_models);
    flag_zero_inputs(report, "principal_angles_raw", raw_angles.zero_inputs);
    flag_zero_inputs(report, "principal_angles_filtered", filtered_angles.zero_inputs);
    report.statistics["principal_angles_raw.mean_off_diagonal"] = mean_off_diagonal(raw_angles.values);
    report.statistics["principal_angles_filtered.mean_off_diagonal"] = mean_off_diagonal(filtered_angles.values);
    report.matrices.emplace_back("principal_angles_raw", raw_angles.values);
    report.matrices.emplace_back("principal_angles_filtered", filtered_angles.values);
    return report;
}

AnalysisReport layer_weight_report(const ScoreTable& scores, double beta) {
    scores.validate();
    const LayerWeights w = layer_weights(score_increments(scores.scores), beta);
    AnalysisReport report;
    report.expert_ids = scores.expert_ids;
    for (Eigen::Index l = 0; l < w.alpha.cols(); ++l) {
        LayerDiagnostics diag;
        diag.layer = static_cast<std::size_t>(l) + 1;
        diag.alpha.assign(w.alpha.col(l).data(), w.alpha.col(l).data() + w.alpha.rows());
        const auto [lo, hi] = std::minmax_element(diag.alpha.begin(), diag.alpha.end());
        report.statistics["layer" + std::to_string(l + 1) + ".weight_spread"] = *hi - *lo;
        report.layers.push_back(std::move(diag));
    }
    report.matrices.emplace_back("layer_weights", w.alpha);
    report.statistics["beta"] = beta;
    return report;
}

} // namespace pivotmerge
