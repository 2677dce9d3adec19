// pivotmerge command-line tool. All real work lives in the library; this
// file only maps flags onto jobs and exceptions onto exit codes.

#include <cmath>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pivotmerge/error.hpp"
#include "pivotmerge/workflow.hpp"

namespace pm = pivotmerge;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

// A flag combination the parser cannot catch on its own.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

CLI::Validator positive_real() {
    return CLI::Validator(
        [](std::string& s) -> std::string {
            double v = 0.0;
            if (!CLI::detail::lexical_cast(s, v) || !std::isfinite(v) || v <= 0.0) return "must be a real > 0";
            return {};
        },
        "REAL>0");
}

CLI::Validator open_unit() {
    return CLI::Validator(
        [](std::string& s) -> std::string {
            double v = 0.0;
            if (!CLI::detail::lexical_cast(s, v) || !(v > 0.0 && v < 1.0)) return "must be in (0, 1)";
            return {};
        },
        "REAL in (0,1)");
}

CLI::Validator half_open_unit(bool include_zero) {
    return CLI::Validator(
        [include_zero](std::string& s) -> std::string {
            double v = 0.0;
            const bool ok = CLI::detail::lexical_cast(s, v) &&
                            (include_zero ? (v >= 0.0 && v < 1.0) : (v > 0.0 && v <= 1.0));
            if (!ok) return include_zero ? "must be in [0, 1)" : "must be in (0, 1]";
            return {};
        },
        include_zero ? "REAL in [0,1)" : "REAL in (0,1]");
}

const std::vector<std::string> kOperatorNames{"average", "task-arithmetic", "ties", "dare-ties"};

struct OperatorFlags {
    double trim = 0.0; // unset: 0.2 for the ties baselines, 1.0 as a pivot inner operator
    double lambda = 1.0;
    double drop = 0.5;
    std::uint64_t seed = 0;
    CLI::Option* trim_opt = nullptr;
    CLI::Option* lambda_opt = nullptr;
    CLI::Option* drop_opt = nullptr;
    CLI::Option* seed_opt = nullptr;

    void add(CLI::App& cmd) {
        trim_opt = cmd.add_option("--trim", trim,
                                  "Fraction of entries kept by ties trimming (default 0.2, or 1.0 for --inner)")
                       ->check(half_open_unit(false));
        lambda_opt = cmd.add_option("--lambda", lambda, "Task-arithmetic scale")
                         ->check(positive_real())
                         ->capture_default_str();
        drop_opt = cmd.add_option("--drop", drop, "DARE drop rate")->check(half_open_unit(true))->capture_default_str();
        seed_opt = cmd.add_option("--seed", seed, "DARE seed")->capture_default_str();
    }

    // Builds the operator, rejecting explicitly given flags it does not use.
    pm::MergeOperator build(pm::MergeKind kind, const std::string& owner, double default_trim) const {
        const double k = trim_opt->count() > 0 ? trim : default_trim;
        auto reject = [&](const CLI::Option* opt, const char* flag) {
            if (opt->count() > 0) {
                throw UsageError(std::string(flag) + " does not apply to " + owner);
            }
        };
        switch (kind) {
        case pm::MergeKind::WeightAverage:
            reject(trim_opt, "--trim");
            reject(lambda_opt, "--lambda");
            reject(drop_opt, "--drop");
            reject(seed_opt, "--seed");
            return pm::MergeOperator::weight_average();
        case pm::MergeKind::TaskArithmetic:
            reject(trim_opt, "--trim");
            reject(drop_opt, "--drop");
            reject(seed_opt, "--seed");
            return pm::MergeOperator::task_arithmetic(lambda);
        case pm::MergeKind::Ties:
            reject(lambda_opt, "--lambda");
            reject(drop_opt, "--drop");
            reject(seed_opt, "--seed");
            return pm::MergeOperator::ties(k);
        case pm::MergeKind::DareTies:
            reject(lambda_opt, "--lambda");
            return pm::MergeOperator::dare_ties(k, drop, seed);
        }
        throw UsageError("unknown operator for " + owner);
    }
};

struct PivotFlags {
    int rank = pm::kDefaultRank;
    double gamma = pm::kDefaultGamma;
    double rho = pm::kDefaultRhoClustered;
    double beta = pm::kDefaultBeta;
    std::string inner = "ties";
    CLI::Option* beta_opt = nullptr;
    std::vector<CLI::Option*> options;

    void add(CLI::App& cmd) {
        options.push_back(cmd.add_option("--rank", rank, "Core rank r")->check(CLI::PositiveNumber)->capture_default_str());
        options.push_back(cmd.add_option("--gamma", gamma, "Mask sharpness")->check(positive_real())->capture_default_str());
        options.push_back(cmd.add_option("--rho", rho, "Retention ratio")->check(open_unit())->capture_default_str());
        beta_opt = cmd.add_option("--beta", beta, "Layer-weight temperature (default: the score file's, else 0.05)")
                       ->check(positive_real());
        options.push_back(beta_opt);
        options.push_back(cmd.add_option("--inner", inner, "Inner merge operator")
                              ->check(CLI::IsMember(kOperatorNames))
                              ->capture_default_str());
    }

    pm::PivotConfig build(const OperatorFlags& ops) const {
        pm::PivotConfig config;
        config.rank = rank;
        config.gamma = gamma;
        config.rho = rho;
        config.beta = beta;
        config.inner = ops.build(pm::parse_merge_kind(inner), "--inner " + inner, 1.0);
        return config;
    }

    std::optional<double> beta_override() const {
        return beta_opt->count() > 0 ? std::optional<double>(beta) : std::nullopt;
    }

    void reject_all(const std::string& owner) const {
        for (const CLI::Option* opt : options) {
            if (opt->count() > 0) throw UsageError(opt->get_name() + " does not apply to " + owner);
        }
    }
};

std::vector<std::pair<std::size_t, std::size_t>> parse_dims(const std::string& text) {
    // "16x8,12x16" -> {(16, 8), (12, 16)}
    std::vector<std::pair<std::size_t, std::size_t>> dims;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto x = item.find('x');
        std::size_t used_a = 0;
        std::size_t used_b = 0;
        try {
            if (x == std::string::npos) throw std::invalid_argument(item);
            const std::string a = item.substr(0, x);
            const std::string b = item.substr(x + 1);
            const unsigned long d_out = std::stoul(a, &used_a);
            const unsigned long d_in = std::stoul(b, &used_b);
            if (used_a != a.size() || used_b != b.size()) throw std::invalid_argument(item);
            dims.emplace_back(d_out, d_in);
        } catch (const std::exception&) {
            throw UsageError("--dims: expected OUTxIN[,OUTxIN...], got '" + text + "'");
        }
    }
    if (dims.empty()) throw UsageError("--dims: at least one layer is required");
    return dims;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Merge projector checkpoints with PivotMerge and baseline operators"};
    app.require_subcommand(1);

    // merge
    auto* merge = app.add_subcommand("merge", "Merge expert checkpoints into one");
    std::string method = "pivot";
    pm::MergeJob merge_job;
    std::string merge_base;
    std::vector<std::string> merge_experts;
    std::string merge_out;
    std::string merge_scores;
    std::string merge_diag;
    OperatorFlags merge_ops;
    PivotFlags merge_pivot;
    merge->add_option("--method", method, "Merge method")
        ->check(CLI::IsMember({"average", "task-arithmetic", "ties", "dare-ties", "pivot"}))
        ->capture_default_str();
    merge->add_option("--base", merge_base, "Base checkpoint")->required();
    merge->add_option("--expert", merge_experts, "Expert checkpoint (repeatable)")->required();
    merge->add_option("--out", merge_out, "Output checkpoint")->required();
    auto* merge_scores_opt = merge->add_option("--scores", merge_scores, "Alignment score JSON (pivot)");
    auto* merge_diag_opt = merge->add_option("--diagnostics", merge_diag, "Diagnostics JSON output (pivot)");
    merge_pivot.add(*merge);
    merge_ops.add(*merge);

    // analyze
    auto* analyze = app.add_subcommand("analyze", "Write residual-similarity, principal-angle or layer-weight reports");
    std::string mode;
    std::string an_base;
    std::vector<std::string> an_experts;
    std::string an_scores;
    std::string an_out;
    OperatorFlags an_ops;
    PivotFlags an_pivot;
    pm::AnalyzeJob analyze_job;
    analyze->add_option("--mode", mode, "Report kind")
        ->required()
        ->check(CLI::IsMember({"residual-sim", "principal-angles", "layer-weights"}));
    auto* an_base_opt = analyze->add_option("--base", an_base, "Base checkpoint");
    auto* an_experts_opt = analyze->add_option("--expert", an_experts, "Expert checkpoint (repeatable)");
    auto* an_scores_opt = analyze->add_option("--scores", an_scores, "Alignment score JSON");
    analyze->add_option("--out", an_out, "Output directory")->required();
    an_pivot.add(*analyze);
    an_ops.add(*analyze);

    // synth
    auto* synth = app.add_subcommand("synth", "Generate synthetic experts with a planted shared core");
    pm::SynthSpec spec;
    std::string dims_text = "16x8,12x16";
    bool no_bias = false;
    std::string synth_out;
    synth->add_option("--dims", dims_text, "Per-layer OUTxIN, comma separated")->capture_default_str();
    synth->add_option("--experts", spec.experts, "Number of experts")->check(CLI::PositiveNumber)->capture_default_str();
    synth->add_option("--core-rank", spec.core_rank, "Planted core rank")->check(CLI::PositiveNumber)->capture_default_str();
    synth->add_option("--residual-scale", spec.residual_scale, "Residual scale")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();
    synth->add_option("--shared-residual-fraction", spec.shared_residual_fraction, "Shared part of the residual")
        ->check(CLI::Range(0.0, 1.0))
        ->capture_default_str();
    synth->add_option("--noise-scale", spec.noise_scale, "Entrywise noise scale")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();
    synth->add_flag("--no-bias", no_bias, "Generate layers without bias");
    synth->add_option("--seed", spec.seed, "Generator seed")->capture_default_str();
    synth->add_option("--out", synth_out, "Output directory")->required();

    // scores
    auto* scores = app.add_subcommand("scores", "Compute alignment scores from projected features");
    std::string features;
    std::string scores_out;
    double scores_beta = pm::kDefaultBeta;
    scores->add_option("--features", features, "Feature container")->required();
    scores->add_option("--out", scores_out, "Score JSON output")->required();
    scores->add_option("--beta", scores_beta, "Temperature stored in the score file")
        ->check(positive_real())
        ->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    // Flag checks and job construction; anything rejected here is a usage
    // error. Running the job afterwards can only fail computationally.
    std::function<void()> run;
    try {
        const unsigned threads = [] {
            try {
                return pm::threads_from_env();
            } catch (const pm::ConfigError& e) {
                throw UsageError(e.what());
            }
        }();
        if (merge->parsed()) {
            merge_job.method = pm::parse_merge_method(method);
            merge_job.base = merge_base;
            for (const auto& e : merge_experts) merge_job.experts.emplace_back(e);
            merge_job.out = merge_out;
            merge_job.threads = threads;
            if (merge_job.method == pm::MergeMethod::Pivot) {
                if (merge_scores_opt->count() == 0) throw UsageError("--scores is required for --method pivot");
                merge_job.scores = merge_scores;
                if (merge_diag_opt->count() > 0) merge_job.diagnostics = merge_diag;
                merge_job.pivot = merge_pivot.build(merge_ops);
                merge_job.beta_override = merge_pivot.beta_override();
                merge_job.pivot.validate();
            } else {
                const std::string owner = "--method " + method;
                if (merge_scores_opt->count() > 0) throw UsageError("--scores does not apply to " + owner);
                if (merge_diag_opt->count() > 0) throw UsageError("--diagnostics does not apply to " + owner);
                merge_pivot.reject_all(owner);
                merge_job.baseline = merge_ops.build(pm::parse_merge_kind(method), owner, 0.2);
                merge_job.baseline.validate();
            }
            run = [&] { pm::run_merge(merge_job); };
        } else if (analyze->parsed()) {
            analyze_job.mode = pm::parse_analysis_mode(mode);
            analyze_job.out_dir = an_out;
            if (analyze_job.mode == pm::AnalysisMode::LayerWeights) {
                if (an_scores_opt->count() == 0) throw UsageError("--scores is required for --mode layer-weights");
                analyze_job.scores = an_scores;
                analyze_job.beta_override = an_pivot.beta_override();
            } else {
                if (an_base_opt->count() == 0) throw UsageError("--base is required for --mode " + mode);
                if (an_experts_opt->count() == 0) throw UsageError("--expert is required for --mode " + mode);
                analyze_job.base = an_base;
                for (const auto& e : an_experts) analyze_job.experts.emplace_back(e);
                analyze_job.pivot = an_pivot.build(an_ops);
                analyze_job.beta_override = an_pivot.beta_override();
                analyze_job.pivot.validate();
            }
            run = [&] { pm::run_analysis(analyze_job); };
        } else if (synth->parsed()) {
            spec.dims = parse_dims(dims_text);
            spec.bias = !no_bias;
            spec.validate();
            run = [&] { pm::run_synth(spec, synth_out); };
        } else if (scores->parsed()) {
            run = [&] { pm::run_scores(features, scores_out, scores_beta); };
        }
    } catch (const std::exception& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    }

    try {
        run();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitOk;
}
