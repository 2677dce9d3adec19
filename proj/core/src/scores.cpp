#include "pivotmerge/scores.hpp"

#include "pivotmerge/error.hpp"
#include "pivotmerge/linalg.hpp"
#include "pivotmerge/log.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

namespace pivotmerge {

using json = nlohmann::json;

void ScoreTable::validate() const {
    if (expert_ids.empty() || scores.cols() < 1) {
        throw ConfigError("score table needs at least one expert and one layer");
    }
    if (static_cast<Eigen::Index>(expert_ids.size()) != scores.rows()) {
        throw ShapeError("score table: " + std::to_string(expert_ids.size()) + " ids for " +
                         std::to_string(scores.rows()) + " score rows");
    }
    if (std::set<std::string>(expert_ids.begin(), expert_ids.end()).size() != expert_ids.size()) {
        throw ConfigError("score table: duplicate expert id");
    }
    if (!scores.allFinite()) {
        throw NumericalError("score table: non-finite score");
    }
    if (!(beta > 0.0) || !std::isfinite(beta)) {
        throw ConfigError("score table: beta must be > 0");
    }
}

Vector ScoreTable::row(const std::string& id) const {
    const auto it = std::find(expert_ids.begin(), expert_ids.end(), id);
    if (it == expert_ids.end()) {
        throw ConfigError("score table has no entry for expert '" + id + "'");
    }
    return scores.row(it - expert_ids.begin()).transpose();
}

Vector compute_scores_from_features(std::span<const Matrix> layer_features, const Matrix& texts) {
    if (texts.rows() == 0) {
        throw ShapeError("alignment scores: no samples (M = 0)");
    }
    Vector out(static_cast<Eigen::Index>(layer_features.size()));
    for (std::size_t l = 0; l < layer_features.size(); ++l) {
        const Matrix& f = layer_features[l];
        if (f.rows() != texts.rows() || f.cols() != texts.cols()) {
            throw ShapeError("alignment scores: layer " + std::to_string(l + 1) + " features are " +
                             std::to_string(f.rows()) + "x" + std::to_string(f.cols()) + ", texts are " +
                             std::to_string(texts.rows()) + "x" + std::to_string(texts.cols()));
        }
        double sum = 0.0;
        for (Eigen::Index m = 0; m < f.rows(); ++m) {
            sum += cosine(f.row(m), texts.row(m));
        }
        out(static_cast<Eigen::Index>(l)) = sum / static_cast<double>(f.rows());
    }
    return out;
}

ScoreTable scores_from_feature_tensors(const std::vector<Tensor>& tensors, double beta) {
    const Tensor* texts = nullptr;
    std::map<std::string, std::map<std::size_t, const Tensor*>> features;
    constexpr std::string_view prefix = "expert.";
    constexpr std::string_view suffix = ".features";
    constexpr std::string_view middle = ".layer.";
    for (const auto& t : tensors) {
        if (t.name == "texts") {
            texts = &t;
            continue;
        }
        const std::string& n = t.name;
        const bool shaped = n.size() > prefix.size() + suffix.size() && n.rfind(prefix, 0) == 0 &&
                            n.compare(n.size() - suffix.size(), suffix.size(), suffix) == 0;
        const auto mid = shaped ? n.rfind(middle) : std::string::npos;
        if (mid == std::string::npos || mid < prefix.size() + 1) {
            throw FormatError("unexpected tensor '" + n + "' in feature container");
        }
        const std::string id = n.substr(prefix.size(), mid - prefix.size());
        const std::string idx = n.substr(mid + middle.size(), n.size() - suffix.size() - mid - middle.size());
        std::size_t layer = 0;
        try {
            std::size_t used = 0;
            layer = std::stoul(idx, &used);
            if (used != idx.size() || layer == 0) throw std::invalid_argument(idx);
        } catch (const std::exception&) {
            throw FormatError("bad layer index in feature tensor '" + n + "'");
        }
        features[id][layer] = &t;
    }
    if (!texts) {
        throw FormatError("feature container has no 'texts' tensor");
    }
    if (features.empty()) {
        throw FormatError("feature container has no expert features");
    }
    const Matrix text_matrix = tensor_to_matrix(*texts);

    ScoreTable table;
    table.beta = beta;
    std::size_t layers = 0;
    std::vector<Vector> rows;
    for (const auto& [id, per_layer] : features) {
        const std::size_t count = per_layer.rbegin()->first;
        if (per_layer.size() != count) {
            throw ShapeError("expert '" + id + "': feature layers are not contiguous from 1");
        }
        if (layers == 0) layers = count;
        if (count != layers) {
            throw ShapeError("expert '" + id + "' has " + std::to_string(count) + " feature layers, expected " +
                             std::to_string(layers));
        }
        std::vector<Matrix> mats;
        for (const auto& [l, t] : per_layer) mats.push_back(tensor_to_matrix(*t));
        rows.push_back(compute_scores_from_features(mats, text_matrix));
        table.expert_ids.push_back(id);
    }
    table.scores.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(layers));
    for (std::size_t i = 0; i < rows.size(); ++i) table.scores.row(static_cast<Eigen::Index>(i)) = rows[i];
    table.validate();
    return table;
}

Vector score_increments(const Vector& scores) {
    Vector out = scores;
    for (Eigen::Index l = scores.size() - 1; l > 0; --l) {
        out(l) = scores(l) - scores(l - 1);
    }
    return out;
}

Matrix score_increments(const Matrix& scores) {
    Matrix out(scores.rows(), scores.cols());
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        out.row(i) = score_increments(Vector(scores.row(i).transpose())).transpose();
    }
    return out;
}

LayerWeights layer_weights(const Matrix& increments, double beta) {
    if (!(beta > 0.0) || !std::isfinite(beta)) {
        throw ConfigError("layer_weights: beta must be > 0");
    }
    if (increments.rows() < 1) {
        throw ShapeError("layer_weights: need at least one expert");
    }
    LayerWeights w;
    w.alpha.resize(increments.rows(), increments.cols());
    for (Eigen::Index l = 0; l < increments.cols(); ++l) {
        const Vector logits = increments.col(l) / beta;
        const Vector e = (logits.array() - logits.maxCoeff()).exp().matrix();
        w.alpha.col(l) = e / e.sum();
    }
    return w;
}

LayerWeights layer_weights(const ScoreTable& table) {
    return layer_weights(score_increments(table.scores), table.beta);
}

double threshold_from_ratio(std::span<const double> consistencies, double rho) {
    if (!(rho > 0.0 && rho < 1.0)) {
        throw ConfigError("threshold_from_ratio: rho must be in (0, 1)");
    }
    if (consistencies.empty()) {
        throw ShapeError("threshold_from_ratio: no consistency scores");
    }
    std::vector<double> sorted(consistencies.begin(), consistencies.end());
    std::sort(sorted.begin(), sorted.end());
    const auto m = static_cast<double>(sorted.size());
    // The epsilon keeps floor() from dropping a whole step on values such
    // as 10 * (1 - 0.8) = 1.9999999999999996.
    auto k = static_cast<std::ptrdiff_t>(std::floor(m * (1.0 - rho) + 1e-9));
    k = std::clamp<std::ptrdiff_t>(std::max<std::ptrdiff_t>(1, k), 1, static_cast<std::ptrdiff_t>(sorted.size()));
    return sorted[static_cast<std::size_t>(k - 1)];
}

std::string format_scores(const ScoreTable& table) {
    table.validate();
    json doc;
    doc["beta"] = table.beta;
    doc["experts"] = json::array();
    for (std::size_t i = 0; i < table.experts(); ++i) {
        const auto row = table.scores.row(static_cast<Eigen::Index>(i));
        doc["experts"].push_back({{"id", table.expert_ids[i]}, {"scores", std::vector<double>(row.begin(), row.end())}});
    }
    return doc.dump(2) + "\n";
}

ScoreTable parse_scores(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("malformed score file: ") + e.what());
    }
    ScoreTable table;
    try {
        if (!doc.is_object()) throw FormatError("malformed score file: expected a JSON object");
        if (doc.contains("beta")) {
            table.beta = doc.at("beta").get<double>();
        } else {
            warn("score file has no \"beta\"; using default 0.05");
            table.beta = kDefaultBeta;
        }
        std::vector<std::vector<double>> rows;
        for (const auto& e : doc.at("experts")) {
            table.expert_ids.push_back(e.at("id").get<std::string>());
            rows.push_back(e.at("scores").get<std::vector<double>>());
        }
        if (rows.empty()) throw FormatError("score file lists no experts");
        const std::size_t layers = rows.front().size();
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i].size() != layers) {
                throw FormatError("score file: expert '" + table.expert_ids[i] + "' has " +
                                  std::to_string(rows[i].size()) + " scores, expected " + std::to_string(layers));
            }
        }
        table.scores.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(layers));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            for (std::size_t l = 0; l < layers; ++l) {
                table.scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(l)) = rows[i][l];
            }
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed score file: ") + e.what());
    }
    table.validate();
    return table;
}

ScoreTable read_scores(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw IoError("cannot open score file '" + path.string() + "'");
    }
    std::stringstream buf;
    buf << is.rdbuf();
    return parse_scores(buf.str());
}

void write_scores(const std::filesystem::path& path, const ScoreTable& table) {
    const std::string text = format_scores(table);
    std::ofstream os(path, std::ios::trunc);
    if (!os) {
        throw IoError("cannot open score file '" + path.string() + "' for writing");
    }
    os << text;
    if (!os) {
        throw IoError("failed writing score file '" + path.string() + "'");
    }
}

} // namespace pivotmerge
