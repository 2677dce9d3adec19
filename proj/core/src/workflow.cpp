#include "pivotmerge/workflow.hpp"

#include "pivotmerge/error.hpp"

#include <cstdlib>
#include <fstream>
#include <thread>

namespace pivotmerge {
namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::trunc | std::ios::binary);
    if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
    os << text;
    if (!os) throw IoError("failed writing '" + path.string() + "'");
}

} // namespace

MergeMethod parse_merge_method(std::string_view name) {
    if (name == "average") return MergeMethod::Average;
    if (name == "task-arithmetic") return MergeMethod::TaskArithmetic;
    if (name == "ties") return MergeMethod::Ties;
    if (name == "dare-ties") return MergeMethod::DareTies;
    if (name == "pivot") return MergeMethod::Pivot;
    throw ConfigError("unknown merge method '" + std::string(name) + "'");
}

AnalysisMode parse_analysis_mode(std::string_view name) {
    if (name == "residual-sim") return AnalysisMode::ResidualSimilarity;
    if (name == "principal-angles") return AnalysisMode::PrincipalAngles;
    if (name == "layer-weights") return AnalysisMode::LayerWeights;
    throw ConfigError("unknown analysis mode '" + std::string(name) + "'");
}

std::vector<ProjectorCheckpoint> load_experts(const std::vector<std::filesystem::path>& paths) {
    std::vector<ProjectorCheckpoint> experts;
    experts.reserve(paths.size());
    for (const auto& p : paths) experts.push_back(load_checkpoint(p));
    return sort_experts(experts);
}

void run_merge(const MergeJob& job) {
    if (job.experts.empty()) throw ConfigError("at least one expert is required");
    const ProjectorCheckpoint base = load_checkpoint(job.base);
    const std::vector<ProjectorCheckpoint> experts = load_experts(job.experts);

    if (job.method != MergeMethod::Pivot) {
        save_checkpoint(job.out, baseline_merge(experts, base, job.baseline));
        return;
    }
    if (!job.scores) throw ConfigError("pivot merge requires a score file");
    const ScoreTable scores = read_scores(*job.scores);
    PivotConfig config = job.pivot;
    config.beta = job.beta_override.value_or(scores.beta);
    const PivotResult result = pivot_merge(experts, base, scores, config, job.threads);
    save_checkpoint(job.out, result.merged);
    if (job.diagnostics) {
        write_text(*job.diagnostics, diagnostics_to_json(result.diagnostics));
    }
}

AnalysisReport build_analysis(const AnalyzeJob& job) {
    if (job.mode == AnalysisMode::LayerWeights) {
        if (!job.scores) throw ConfigError("layer-weights analysis requires a score file");
        const ScoreTable scores = read_scores(*job.scores);
        return layer_weight_report(scores, job.beta_override.value_or(scores.beta));
    }
    if (!job.base) throw ConfigError("analysis requires a base checkpoint");
    const ProjectorCheckpoint base = load_checkpoint(*job.base);
    const std::vector<ProjectorCheckpoint> experts = load_experts(job.experts);
    PivotConfig config = job.pivot;
    if (job.beta_override) config.beta = *job.beta_override;
    if (job.mode == AnalysisMode::ResidualSimilarity) {
        return residual_similarity_report(experts, base, config);
    }
    return principal_angle_report(experts, base, config);
}

void run_analysis(const AnalyzeJob& job) {
    emit_report(build_analysis(job), job.out_dir);
}

void run_synth(const SynthSpec& spec, const std::filesystem::path& dir) {
    const SynthResult result = generate(spec);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());

    save_checkpoint(dir / (std::string("base") + kCheckpointExtension), result.base);
    for (const auto& e : result.experts) {
        save_checkpoint(dir / (e.id + kCheckpointExtension), e);
    }
    write_container(dir / (std::string("ground_truth") + kCheckpointExtension), cores_to_tensors(result.cores));
    write_text(dir / "spec.json", synth_spec_to_json(spec));

    ScoreTable scores;
    for (const auto& e : result.experts) scores.expert_ids.push_back(e.id);
    scores.scores = Matrix::Zero(static_cast<Eigen::Index>(result.experts.size()),
                                 static_cast<Eigen::Index>(spec.dims.size()));
    write_scores(dir / "scores.json", scores);
}

void run_scores(const std::filesystem::path& features, const std::filesystem::path& out, double beta) {
    write_scores(out, scores_from_feature_tensors(read_container(features), beta));
}

unsigned threads_from_env() {
    const char* raw = std::getenv("PIVOTMERGE_THREADS");
    unsigned requested = 0;
    if (raw && *raw) {
        try {
            const long v = std::stol(raw);
            if (v < 0) throw std::out_of_range(raw);
            requested = static_cast<unsigned>(v);
        } catch (const std::exception&) {
            throw ConfigError("PIVOTMERGE_THREADS must be a non-negative integer");
        }
    }
    if (requested == 0) requested = std::max(1u, std::thread::hardware_concurrency());
    return requested;
}

} // namespace pivotmerge
