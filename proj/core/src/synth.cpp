#include "pivotmerge/synth.hpp"

#include "pivotmerge/error.hpp"
#include "pivotmerge/linalg.hpp"
#include "pivotmerge/random.hpp"

#include <cmath>
#include <map>

#include <json.hpp>

namespace pivotmerge {
namespace {

using json = nlohmann::json;

enum class Draw : std::uint64_t { Base = 1, CoreLeft, CoreRight, CommonResidual, PrivateResidual, Noise };

std::uint64_t stream_id(Draw kind, std::size_t layer, std::size_t expert) {
    return (static_cast<std::uint64_t>(kind) << 48) | (static_cast<std::uint64_t>(layer) << 32) |
           static_cast<std::uint64_t>(expert);
}

Matrix gaussian(std::uint64_t seed, std::uint64_t stream, Eigen::Index rows, Eigen::Index cols, double stddev) {
    const CounterStream rng(seed, stream);
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) {
            m(r, c) = stddev * rng.normal(static_cast<std::uint64_t>(r * cols + c));
        }
    }
    return m;
}

std::string expert_id(std::size_t i, std::size_t count) {
    const std::size_t width = std::to_string(count > 0 ? count - 1 : 0).size();
    std::string digits = std::to_string(i);
    return "expert_" + std::string(width - digits.size(), '0') + digits;
}

} // namespace

void SynthSpec::validate() const {
    if (dims.empty()) throw ConfigError("synth: at least one layer is required");
    for (std::size_t l = 0; l < dims.size(); ++l) {
        const auto [d_out, d_in] = dims[l];
        if (d_out == 0 || d_in == 0) {
            throw ShapeError("synth: layer " + std::to_string(l + 1) + " has a zero dimension");
        }
        if (l > 0 && d_in != dims[l - 1].first) {
            throw ShapeError("synth: layer " + std::to_string(l + 1) + " d_in " + std::to_string(d_in) +
                             " does not match previous d_out " + std::to_string(dims[l - 1].first));
        }
        const std::size_t width = d_in + (bias ? 1 : 0);
        if (core_rank > std::min(d_out, width)) {
            throw ConfigError("synth: core_rank " + std::to_string(core_rank) + " exceeds layer " +
                              std::to_string(l + 1) + " dimensions");
        }
    }
    if (experts == 0) throw ConfigError("synth: at least one expert is required");
    if (core_rank == 0) throw ConfigError("synth: core_rank must be >= 1");
    if (!(residual_scale >= 0.0) || !std::isfinite(residual_scale)) {
        throw ConfigError("synth: residual_scale must be >= 0");
    }
    if (!(noise_scale >= 0.0) || !std::isfinite(noise_scale)) {
        throw ConfigError("synth: noise_scale must be >= 0");
    }
    if (!(shared_residual_fraction >= 0.0 && shared_residual_fraction <= 1.0)) {
        throw ConfigError("synth: shared_residual_fraction must be in [0, 1]");
    }
}

SynthResult generate(const SynthSpec& spec) {
    spec.validate();
    SynthResult out;
    out.base.id = "base";
    out.experts.resize(spec.experts);
    for (std::size_t i = 0; i < spec.experts; ++i) out.experts[i].id = expert_id(i, spec.experts);

    const double f = spec.shared_residual_fraction;
    for (std::size_t l = 0; l < spec.dims.size(); ++l) {
        const auto d_out = static_cast<Eigen::Index>(spec.dims[l].first);
        const auto d_in = static_cast<Eigen::Index>(spec.dims[l].second);
        const Eigen::Index width = d_in + (spec.bias ? 1 : 0);
        const double sd = 1.0 / std::sqrt(static_cast<double>(d_in));
        const auto rank = static_cast<Eigen::Index>(spec.core_rank);

        const Matrix w0 = gaussian(spec.seed, stream_id(Draw::Base, l, 0), d_out, width, sd);
        const Matrix core = gaussian(spec.seed, stream_id(Draw::CoreLeft, l, 0), d_out, rank, 1.0) *
                            gaussian(spec.seed, stream_id(Draw::CoreRight, l, 0), rank, width, sd) /
                            std::sqrt(static_cast<double>(rank));
        const Matrix common = gaussian(spec.seed, stream_id(Draw::CommonResidual, l, 0), d_out, width, sd);

        out.base.layers.push_back(split(AugmentedLayer{w0, spec.bias}));
        out.cores.push_back(core);
        for (std::size_t i = 0; i < spec.experts; ++i) {
            Matrix w = w0 + core;
            if (spec.residual_scale > 0.0) {
                const Matrix priv = gaussian(spec.seed, stream_id(Draw::PrivateResidual, l, i), d_out, width, sd);
                w += spec.residual_scale * (f * common + (1.0 - f) * priv);
            }
            if (spec.noise_scale > 0.0) {
                w += spec.noise_scale * gaussian(spec.seed, stream_id(Draw::Noise, l, i), d_out, width, sd);
            }
            out.experts[i].layers.push_back(split(AugmentedLayer{std::move(w), spec.bias}));
        }
    }
    return out;
}

std::vector<Tensor> cores_to_tensors(const std::vector<Matrix>& cores) {
    std::vector<Tensor> out;
    for (std::size_t l = 0; l < cores.size(); ++l) {
        out.push_back(matrix_to_tensor("layer." + std::to_string(l + 1) + ".core", cores[l], DType::Float64));
    }
    return out;
}

std::vector<Matrix> cores_from_tensors(const std::vector<Tensor>& tensors) {
    std::map<std::size_t, Matrix> by_layer;
    for (const auto& t : tensors) {
        const std::string& n = t.name;
        constexpr std::string_view prefix = "layer.";
        constexpr std::string_view suffix = ".core";
        if (n.rfind(prefix, 0) != 0 || n.size() <= prefix.size() + suffix.size() ||
            n.compare(n.size() - suffix.size(), suffix.size(), suffix) != 0) {
            throw FormatError("unexpected tensor '" + n + "' in ground-truth container");
        }
        const std::string idx = n.substr(prefix.size(), n.size() - prefix.size() - suffix.size());
        std::size_t layer = 0;
        try {
            std::size_t used = 0;
            layer = std::stoul(idx, &used);
            if (used != idx.size() || layer == 0) throw std::invalid_argument(idx);
        } catch (const std::exception&) {
            throw FormatError("bad layer index in ground-truth tensor '" + n + "'");
        }
        by_layer[layer] = tensor_to_matrix(t);
    }
    std::vector<Matrix> out;
    for (std::size_t l = 1; l <= by_layer.size(); ++l) {
        auto it = by_layer.find(l);
        if (it == by_layer.end()) throw ShapeError("ground truth is missing layer " + std::to_string(l));
        out.push_back(it->second);
    }
    return out;
}

std::string synth_spec_to_json(const SynthSpec& spec) {
    json dims = json::array();
    for (const auto& [d_out, d_in] : spec.dims) dims.push_back({d_out, d_in});
    json doc = {
        {"dims", dims},
        {"experts", spec.experts},
        {"core_rank", spec.core_rank},
        {"residual_scale", spec.residual_scale},
        {"shared_residual_fraction", spec.shared_residual_fraction},
        {"noise_scale", spec.noise_scale},
        {"bias", spec.bias},
        {"seed", spec.seed},
    };
    return doc.dump(2) + "\n";
}

SynthSpec synth_spec_from_json(const std::string& text) {
    SynthSpec spec;
    try {
        const json doc = json::parse(text);
        spec.dims.clear();
        for (const auto& d : doc.at("dims")) {
            spec.dims.emplace_back(d.at(0).get<std::size_t>(), d.at(1).get<std::size_t>());
        }
        spec.experts = doc.at("experts").get<std::size_t>();
        spec.core_rank = doc.at("core_rank").get<std::size_t>();
        spec.residual_scale = doc.at("residual_scale").get<double>();
        spec.shared_residual_fraction = doc.at("shared_residual_fraction").get<double>();
        spec.noise_scale = doc.at("noise_scale").get<double>();
        spec.bias = doc.at("bias").get<bool>();
        spec.seed = doc.at("seed").get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed synth spec: ") + e.what());
    }
    spec.validate();
    return spec;
}

double RecoveryScore::mean_degrees() const {
    return mean(per_layer_degrees);
}

Matrix dominant_subspace(const Matrix& m, int q) {
    const SvdFactors f = thin_svd(m);
    if (f.S.size() == 0 || f.S(0) == 0.0) {
        throw NumericalError("dominant_subspace: zero matrix");
    }
    const auto rank = static_cast<Eigen::Index>((f.S.array() > 1e-10 * f.S(0)).count());
    return f.U.leftCols(std::min<Eigen::Index>(q, rank));
}

RecoveryScore recovery_score(const ProjectorCheckpoint& merged, const ProjectorCheckpoint& base,
                             const std::vector<Matrix>& cores) {
    require_same_layout(base, merged);
    if (cores.size() != base.layers.size()) {
        throw ShapeError("recovery_score: " + std::to_string(cores.size()) + " cores for " +
                         std::to_string(base.layers.size()) + " layers");
    }
    RecoveryScore score;
    for (std::size_t l = 0; l < cores.size(); ++l) {
        const Matrix delta = augment(merged.layers[l]).matrix - augment(base.layers[l]).matrix;
        if (delta.rows() != cores[l].rows()) {
            throw ShapeError("recovery_score: core rows do not match layer " + std::to_string(l + 1));
        }
        if ((delta.array() == 0.0).all()) {
            score.per_layer_degrees.push_back(90.0);
            score.degenerate.push_back(true);
            continue;
        }
        const int q = numerical_rank(cores[l]);
        score.per_layer_degrees.push_back(mean(principal_angles(dominant_subspace(delta, q), cores[l])));
        score.degenerate.push_back(false);
    }
    return score;
}

} // namespace pivotmerge
