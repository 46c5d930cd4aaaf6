#pragma once

// Command-line driver: merge, analyze {conflict-curve, interference,
// trim-emit, synth}, diff, apply.
//
// Exit codes: 0 success, 2 for anything rejected before tensor math starts
// (bad flags, unreadable or malformed inputs, schema mismatches), 1 otherwise.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tensor_ties/analysis.hpp"
#include "tensor_ties/archive.hpp"
#include "tensor_ties/baselines.hpp"
#include "tensor_ties/report.hpp"
#include "tensor_ties/task_vector.hpp"
#include "tensor_ties/ties.hpp"

namespace tensor_ties::cli {

struct RunConfig {
    std::string method = "ties";
    std::string base;
    std::vector<std::string> models;
    std::optional<double> k;
    std::optional<double> lambda;
    std::string granularity = "global";
    std::vector<std::string> ablate;
    std::string sign_override;
    std::vector<std::string> fisher;
    std::vector<std::string> gram;
    double alpha = 0.1;
    std::optional<double> ridge;
    double epsilon = 1e-8;
    std::string out;
    std::string report;
    std::string out_dtype = "preserve";
    std::optional<std::size_t> threads;
    std::uint64_t seed = 0;
};

namespace detail {

inline std::size_t resolve_threads(const std::optional<std::size_t>& flag)
{
    if (flag) {
        if (*flag == 0) throw ValidationError("--threads must be >= 1");
        return *flag;
    }
    if (const char* env = std::getenv("TENSOR_TIES_THREADS"); env && *env) {
        try {
            const long v = std::stol(env);
            if (v >= 1) return static_cast<std::size_t>(v);
        } catch (...) {
        }
        throw ValidationError(std::string("TENSOR_TIES_THREADS must be a positive integer, got '") + env + "'");
    }
    return hardware_threads();
}

inline void write_text(const std::string& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << text;
    if (!out) throw IoError("failed writing '" + path + "'");
}

/// Splices `key = value` lines from the --config file into argv for every key
/// not already given on the command line. Blank lines and '#' comments are
/// skipped; list values are whitespace- or comma-separated.
inline std::vector<std::string> splice_config(std::vector<std::string> args)
{
    std::string path;
    for (std::size_t i = 0; i + 1 < args.size(); ++i) {
        if (args[i] == "--config") path = args[i + 1];
    }
    for (const auto& a : args) {
        if (a.rfind("--config=", 0) == 0) path = a.substr(9);
    }
    if (path.empty()) return args;

    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config file '" + path + "'");
    auto given = [&](const std::string& key) {
        for (const auto& a : args) {
            if (a == "--" + key || a.rfind("--" + key + "=", 0) == 0) return true;
        }
        return false;
    };
    std::vector<std::string> extra;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        const auto eq = line.find('=');
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        if (trim(line).empty()) continue;
        if (eq == std::string::npos) {
            throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty() || key == "config") throw ValidationError("config line " + std::to_string(lineno) + ": bad key");
        if (given(key)) continue;
        std::replace(value.begin(), value.end(), ',', ' ');
        std::istringstream tokens(value);
        extra.push_back("--" + key);
        for (std::string tok; tokens >> tok;) extra.push_back(tok);
    }
    args.insert(args.end(), extra.begin(), extra.end());
    return args;
}

/// Reads an input archive; unreadable inputs are reported against `flag`.
inline Checkpoint load(const std::string& path, const char* flag)
{
    try {
        return read_checkpoint(path);
    } catch (const IoError& e) {
        throw ValidationError(std::string(flag) + ": " + e.what());
    } catch (const ValidationError& e) {
        throw ValidationError(std::string(flag) + ": " + e.what());
    }
}

inline std::vector<Checkpoint> load_all(const std::vector<std::string>& paths, const char* flag)
{
    std::vector<Checkpoint> out;
    out.reserve(paths.size());
    for (const auto& p : paths) out.push_back(load(p, flag));
    return out;
}

inline void require_k(double k, const char* flag = "--k")
{
    if (!(k > 0.0 && k <= 100.0)) throw ValidationError(std::string(flag) + " must be in (0, 100], got " + std::to_string(k));
}

/// Delta statistics for methods without a trimming stage.
inline MergeStats describe_merge(const Checkpoint* base, std::span<const Checkpoint> models, const Checkpoint& merged,
                                 std::size_t threads)
{
    MergeStats stats;
    const Checkpoint& ref = base ? *base : models[0];
    std::vector<TaskVector> taus;
    if (base) {
        for (const auto& m : models) taus.push_back(compute_task_vector(m, *base, threads));
    }
    std::size_t conflicts_total = 0;
    for (const auto& [name, t] : merged.tensors) {
        if (!is_float(t.dtype) || !ref.contains(name)) continue;
        const auto a = t.to_float32();
        const auto b = ref.at(name).to_float32();
        double sumsq = 0.0;
        for (std::size_t e = 0; e < a.size(); ++e) {
            const double d = static_cast<double>(a[e]) - b[e];
            sumsq += d * d;
        }
        TensorStats ts;
        ts.name = name;
        ts.numel = a.size();
        ts.l2_norm_of_delta = std::sqrt(sumsq);
        ts.kept_count = a.size() * models.size();
        if (!taus.empty()) {
            std::size_t conflicts = 0;
            for (std::size_t e = 0; e < a.size(); ++e) {
                bool pos = false, neg = false;
                for (const auto& tau : taus) {
                    const float x = tau.deltas.at(name).values[e];
                    pos |= x > 0.0f;
                    neg |= x < 0.0f;
                }
                conflicts += pos && neg;
            }
            ts.conflict_fraction = a.empty() ? 0.0 : static_cast<double>(conflicts) / a.size();
            conflicts_total += conflicts;
        }
        stats.global.total_params += ts.numel;
        stats.global.kept_params += ts.kept_count;
        stats.per_tensor.push_back(std::move(ts));
    }
    if (stats.global.total_params) {
        stats.global.sign_conflict_fraction_after_trim =
            static_cast<double>(conflicts_total) / static_cast<double>(stats.global.total_params);
    }
    return stats;
}

inline int cmd_merge(RunConfig cfg, std::ostream& log)
{
    const auto t0 = std::chrono::steady_clock::now();
    static const std::set<std::string> methods = {"ties", "average", "task-arithmetic", "fisher", "regmean"};
    if (!methods.count(cfg.method)) throw ValidationError("--method: unknown method '" + cfg.method + "'");
    if (cfg.models.empty()) throw ValidationError("--models: at least one model is required");
    if (cfg.out.empty()) throw ValidationError("--out is required");
    const bool needs_base = cfg.method == "ties" || cfg.method == "task-arithmetic";
    if (needs_base && cfg.base.empty()) throw ValidationError("--base is required for method " + cfg.method);
    const auto policy = parse_dtype_policy(cfg.out_dtype);
    const std::size_t threads = resolve_threads(cfg.threads);

    MergeReport report;
    report.method = cfg.method;
    report.config["out_dtype"] = cfg.out_dtype;
    report.config["threads"] = threads;
    report.config["seed"] = cfg.seed;

    TiesConfig tcfg;
    if (cfg.method == "ties") {
        tcfg.k_percent = cfg.k.value_or(20.0);
        tcfg.lambda = cfg.lambda.value_or(1.0);
        tcfg.granularity = parse_granularity(cfg.granularity);
        for (const auto& a : cfg.ablate) tcfg.ablation.set(a);
        tcfg.threads = threads;
        require_k(tcfg.k_percent);
        tensor_ties::detail::require_lambda(tcfg.lambda);
        if (!cfg.sign_override.empty() && tcfg.ablation.no_elect) {
            throw ValidationError("--sign-override cannot be combined with --ablate no-elect");
        }
        report.config["k"] = tcfg.k_percent;
        report.config["lambda"] = tcfg.lambda;
        report.config["granularity"] = std::string(granularity_name(tcfg.granularity));
        report.config["ablations"] = tcfg.ablation.names();
        report.config["sign_override"] = cfg.sign_override.empty() ? nlohmann::json(nullptr) : nlohmann::json(cfg.sign_override);
    } else if (cfg.method == "task-arithmetic") {
        report.config["lambda"] = cfg.lambda.value_or(0.4);
        tensor_ties::detail::require_lambda(cfg.lambda.value_or(0.4));
    } else if (cfg.method == "fisher") {
        if (cfg.fisher.size() != cfg.models.size()) {
            throw ValidationError("--fisher: expected " + std::to_string(cfg.models.size()) + " sidecars aligned with --models, got " +
                                  std::to_string(cfg.fisher.size()));
        }
        if (!(cfg.epsilon > 0.0)) throw ValidationError("--epsilon must be > 0");
        report.config["fisher"] = cfg.fisher;
        report.config["epsilon"] = cfg.epsilon;
    } else if (cfg.method == "regmean") {
        if (cfg.gram.size() != cfg.models.size()) {
            throw ValidationError("--gram: expected " + std::to_string(cfg.models.size()) + " sidecars aligned with --models, got " +
                                  std::to_string(cfg.gram.size()));
        }
        if (!(cfg.alpha >= 0.0 && cfg.alpha <= 1.0)) throw ValidationError("--alpha must be in [0, 1]");
        if (cfg.ridge && !(*cfg.ridge >= 0.0)) throw ValidationError("--ridge must be >= 0");
        report.config["gram"] = cfg.gram;
        report.config["alpha"] = cfg.alpha;
        report.config["ridge"] = cfg.ridge ? nlohmann::json(*cfg.ridge) : nlohmann::json("auto");
    }

    std::optional<Checkpoint> base;
    if (!cfg.base.empty()) base = load(cfg.base, "--base");
    const auto models = load_all(cfg.models, "--models");
    if (base) {
        for (std::size_t t = 0; t < models.size(); ++t) {
            const Checkpoint* pair[] = {&models[t], &*base};
            const auto compat = validate_compatible(std::span<const Checkpoint* const>(pair));
            if (const auto* m = compat.first_mismatch()) {
                throw ValidationError("model '" + cfg.models[t] + "' tensor '" + m->first + "' is mismatched: " +
                                      m->second.reason);
            }
        }
    }
    if (cfg.method == "ties" && !cfg.sign_override.empty()) {
        tcfg.sign_override = sign_vector_from_sidecar(load(cfg.sign_override, "--sign-override"));
    }

    Checkpoint merged;
    if (cfg.method == "ties") {
        auto r = ties_merge(*base, models, tcfg);
        merged = std::move(r.merged);
        report.stats = std::move(r.stats);
    } else if (cfg.method == "task-arithmetic") {
        merged = task_arithmetic(*base, models, cfg.lambda.value_or(0.4), threads);
        report.stats = describe_merge(&*base, models, merged, threads);
    } else if (cfg.method == "average") {
        merged = simple_average(models, threads);
        report.stats = describe_merge(base ? &*base : nullptr, models, merged, threads);
    } else if (cfg.method == "fisher") {
        const auto fishers = load_all(cfg.fisher, "--fisher");
        merged = fisher_merge(models, fishers, {cfg.epsilon, threads});
        report.stats = describe_merge(base ? &*base : nullptr, models, merged, threads);
    } else {
        const auto grams = load_all(cfg.gram, "--gram");
        auto r = regmean_merge(models, grams, {cfg.alpha, cfg.ridge, threads});
        merged = std::move(r.merged);
        auto layers = nlohmann::json::array();
        for (const auto& l : r.layers) {
            layers.push_back({{"gram", l.gram_name}, {"tensor", l.tensor_name}, {"path", l.path},
                              {"ridge", l.ridge}, {"relative_residual", l.relative_residual}});
            if (l.path != "solved") log << "warning: layer '" << l.tensor_name << "' fell back to averaging\n";
        }
        report.extra = {{"regmean_layers", layers}, {"averaged_tensors", r.averaged}};
        report.stats = describe_merge(base ? &*base : nullptr, models, merged, threads);
    }
    if (!base && cfg.method != "ties") report.config["delta_reference"] = "models[0]";

    write_checkpoint(merged, cfg.out, policy);
    report.provenance.base_path = cfg.base;
    report.provenance.model_paths = cfg.models;
    report.provenance.wall_time_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    const std::string report_path = cfg.report.empty() ? cfg.out + ".report.json" : cfg.report;
    write_text(report_path, report.to_json().dump(2) + "\n");
    log << "merged " << models.size() << " model(s) with " << cfg.method << " -> " << cfg.out << "\n";
    return 0;
}

struct AnalyzeInputs {
    std::string base;
    std::vector<std::string> models;
    std::vector<std::string> vectors;
};

inline std::vector<TaskVector> load_vectors(const AnalyzeInputs& in, std::size_t threads)
{
    std::vector<TaskVector> taus;
    if (!in.vectors.empty()) {
        if (!in.models.empty()) throw ValidationError("give either --vectors or --base/--models, not both");
        for (const auto& p : in.vectors) taus.push_back(task_vector_from_sidecar(load(p, "--vectors")));
        return taus;
    }
    if (in.base.empty() || in.models.empty()) throw ValidationError("--base and --models (or --vectors) are required");
    const auto base = load(in.base, "--base");
    for (const auto& p : in.models) {
        const auto m = load(p, "--models");
        try {
            taus.push_back(compute_task_vector(m, base, threads));
        } catch (const ValidationError& e) {
            throw ValidationError("model '" + p + "': " + e.what());
        }
    }
    return taus;
}

inline void emit(const nlohmann::json& json, const std::string& csv, const std::string& json_path,
                 const std::string& csv_path, std::ostream& out)
{
    if (!json_path.empty()) write_text(json_path, json.dump(2) + "\n");
    if (!csv_path.empty()) write_text(csv_path, csv);
    if (json_path.empty() && csv_path.empty()) out << json.dump(2) << "\n";
}

} // namespace detail

/// Runs the CLI with the given arguments (argv[0] excluded).
inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr)
{
    CLI::App app{"tensor_ties: merge fine-tuned checkpoints with TIES and baseline methods"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kToolVersion));
    std::string config_path;
    app.add_option("--config", config_path, "flat key = value file; command-line flags win");

    // merge
    RunConfig mc;
    auto* merge = app.add_subcommand("merge", "merge fine-tuned checkpoints");
    merge->add_option("--config", config_path, "flat key = value file; command-line flags win");
    merge->add_option("--method", mc.method, "ties | average | task-arithmetic | fisher | regmean")
        ->check(CLI::IsMember({"ties", "average", "task-arithmetic", "fisher", "regmean"}));
    merge->add_option("--base", mc.base, "initialisation checkpoint");
    merge->add_option("--models", mc.models, "fine-tuned checkpoints, in merge order")->take_all();
    merge->add_option("--k", mc.k, "percent of entries kept per task vector (default 20)");
    merge->add_option("--lambda", mc.lambda, "scale of the merged task vector (default 1; 0.4 for task-arithmetic)");
    merge->add_option("--granularity", mc.granularity, "global | per-tensor")
        ->check(CLI::IsMember({"global", "per-tensor"}));
    merge->add_option("--ablate", mc.ablate, "no-trim | no-elect | no-disjoint-mean | no-scale")
        ->check(CLI::IsMember({"no-trim", "no-elect", "no-disjoint-mean", "no-scale"}))
        ->take_all();
    merge->add_option("--sign-override", mc.sign_override, "I8 sign sidecar replacing sign election");
    merge->add_option("--fisher", mc.fisher, "Fisher diagonal sidecars aligned with --models")->take_all();
    merge->add_option("--gram", mc.gram, "Gram sidecars aligned with --models")->take_all();
    merge->add_option("--alpha", mc.alpha, "RegMean off-diagonal shrinkage (default 0.1)");
    merge->add_option("--ridge", mc.ridge, "RegMean ridge (default 1e-6 x mean diagonal)");
    merge->add_option("--epsilon", mc.epsilon, "Fisher zero-mass guard (default 1e-8)");
    merge->add_option("--out", mc.out, "merged checkpoint path");
    merge->add_option("--report", mc.report, "report JSON path (default <out>.report.json)");
    merge->add_option("--out-dtype", mc.out_dtype, "preserve | f32 | f16 | bf16")
        ->check(CLI::IsMember({"preserve", "f32", "f16", "bf16"}));
    merge->add_option("--threads", mc.threads, "worker threads (default: TENSOR_TIES_THREADS or all cores)");
    merge->add_option("--seed", mc.seed, "recorded for provenance");

    // analyze
    auto* analyze = app.add_subcommand("analyze", "interference diagnostics");
    analyze->require_subcommand(1);
    detail::AnalyzeInputs ain;
    double a_k = 20.0;
    std::size_t a_trials = 10;
    std::uint64_t a_seed = 0;
    std::vector<double> a_k_grid;
    std::string a_gran = "global", a_json, a_csv, a_method = "ties";
    std::optional<std::size_t> a_threads;
    auto add_inputs = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "flat key = value file; command-line flags win");
        sub->add_option("--base", ain.base, "initialisation checkpoint");
        sub->add_option("--models", ain.models, "fine-tuned checkpoints")->take_all();
        sub->add_option("--vectors", ain.vectors, "task-vector sidecars (instead of --base/--models)")->take_all();
        sub->add_option("--k", a_k, "trim percent (default 20)");
        sub->add_option("--granularity", a_gran, "global | per-tensor")->check(CLI::IsMember({"global", "per-tensor"}));
        sub->add_option("--json", a_json, "JSON output path");
        sub->add_option("--csv", a_csv, "CSV output path");
        sub->add_option("--threads", a_threads, "worker threads");
    };
    auto* curve = analyze->add_subcommand("conflict-curve", "sign-conflict fraction vs number of models and k");
    add_inputs(curve);
    curve->add_option("--trials", a_trials, "max subsets per model count (default 10)");
    curve->add_option("--seed", a_seed, "subset sampling seed");
    curve->add_option("--k-grid", a_k_grid, "k values for the k sweep")->take_all();
    auto* interf = analyze->add_subcommand("interference", "magnitude statistics by influence count and agreement");
    add_inputs(interf);
    interf->add_option("--method", a_method, "plain_mean | trim_then_disjoint | elect_then_disjoint | ties")
        ->check(CLI::IsMember({"plain_mean", "trim_then_disjoint", "elect_then_disjoint", "ties"}));

    auto* emit_cmd = analyze->add_subcommand("trim-emit", "write base + trimmed task vector for each k");
    std::string te_base, te_model, te_out_dir, te_dtype = "preserve", te_gran = "global";
    std::vector<double> te_grid;
    std::optional<std::size_t> te_threads;
    emit_cmd->add_option("--config", config_path, "flat key = value file; command-line flags win");
    emit_cmd->add_option("--base", te_base, "initialisation checkpoint")->required();
    emit_cmd->add_option("--model", te_model, "fine-tuned checkpoint")->required();
    emit_cmd->add_option("--k-grid", te_grid, "k values")->take_all();
    emit_cmd->add_option("--out-dir", te_out_dir, "output directory")->required();
    emit_cmd->add_option("--granularity", te_gran, "global | per-tensor")->check(CLI::IsMember({"global", "per-tensor"}));
    emit_cmd->add_option("--out-dtype", te_dtype, "preserve | f32 | f16 | bf16")
        ->check(CLI::IsMember({"preserve", "f32", "f16", "bf16"}));
    emit_cmd->add_option("--threads", te_threads, "worker threads");

    auto* synth = analyze->add_subcommand("synth", "generate synthetic task vectors");
    SyntheticSpec spec;
    std::string s_out_dir, s_csv, s_json;
    std::optional<std::size_t> s_threads;
    synth->add_option("--config", config_path, "flat key = value file; command-line flags win");
    synth->add_option("--d", spec.d, "parameters per task vector");
    synth->add_option("--n", spec.n, "number of task vectors");
    synth->add_option("--density", spec.density, "fraction of influential entries per task");
    synth->add_option("--agreement", spec.sign_agreement, "probability a task keeps the consensus sign");
    synth->add_option("--scale", spec.magnitude_scale, "magnitude scale");
    synth->add_option("--tensors", spec.num_tensors, "split d over this many tensors");
    synth->add_option("--seed", spec.seed, "generator seed");
    synth->add_option("--out-dir", s_out_dir, "write task_NN.safetensors sidecars here");
    synth->add_option("--csv", s_csv, "write nonzero entries as CSV");
    synth->add_option("--json", s_json, "write a per-task summary as JSON");
    synth->add_option("--threads", s_threads, "worker threads");

    // diff / apply
    auto* diff = app.add_subcommand("diff", "write the task vector model - base as a sidecar");
    std::string d_base, d_model, d_out;
    diff->add_option("--config", config_path, "flat key = value file; command-line flags win");
    diff->add_option("--base", d_base, "initialisation checkpoint")->required();
    diff->add_option("--model", d_model, "fine-tuned checkpoint")->required();
    diff->add_option("--out", d_out, "task-vector sidecar path")->required();

    auto* apply = app.add_subcommand("apply", "write base + lambda * task vector");
    std::string p_base, p_vector, p_out, p_dtype = "preserve";
    double p_lambda = 1.0;
    apply->add_option("--config", config_path, "flat key = value file; command-line flags win");
    apply->add_option("--base", p_base, "initialisation checkpoint")->required();
    apply->add_option("--vector", p_vector, "task-vector sidecar")->required();
    apply->add_option("--lambda", p_lambda, "scale (default 1)");
    apply->add_option("--out", p_out, "output checkpoint")->required();
    apply->add_option("--out-dtype", p_dtype, "preserve | f32 | f16 | bf16")
        ->check(CLI::IsMember({"preserve", "f32", "f16", "bf16"}));

    try {
        args = detail::splice_config(std::move(args));
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::Success& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return 2;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (*merge) return detail::cmd_merge(mc, err);
        if (*diff) {
            const auto base = detail::load(d_base, "--base");
            const auto model = detail::load(d_model, "--model");
            const auto tau = compute_task_vector(model, base);
            write_checkpoint(to_sidecar(tau), d_out);
            return 0;
        }
        if (*apply) {
            const auto policy = parse_dtype_policy(p_dtype);
            tensor_ties::detail::require_lambda(p_lambda);
            const auto base = detail::load(p_base, "--base");
            const auto tau = task_vector_from_sidecar(detail::load(p_vector, "--vector"));
            write_checkpoint(apply_task_vector(base, tau, p_lambda), p_out, policy);
            return 0;
        }
        if (*curve || *interf) {
            detail::require_k(a_k);
            for (double k : a_k_grid) detail::require_k(k, "--k-grid");
            const auto gran = parse_granularity(a_gran);
            const auto threads = detail::resolve_threads(a_threads);
            const auto method = parse_interference_method(a_method);
            const auto taus = detail::load_vectors(ain, threads);
            if (*curve) {
                const auto c = conflict_curve(taus, a_k, a_trials, a_seed, a_k_grid, gran, threads);
                detail::emit(c.to_json(), c.to_csv(), a_json, a_csv, out);
            } else {
                const auto s = interference_stats(taus, a_k, method, gran, threads);
                detail::emit(s.to_json(), s.to_csv(), a_json, a_csv, out);
            }
            return 0;
        }
        if (*emit_cmd) {
            if (te_grid.empty()) throw ValidationError("--k-grid needs at least one value");
            for (double k : te_grid) detail::require_k(k, "--k-grid");
            const auto policy = parse_dtype_policy(te_dtype);
            const auto gran = parse_granularity(te_gran);
            const auto threads = detail::resolve_threads(te_threads);
            const auto base = detail::load(te_base, "--base");
            const auto model = detail::load(te_model, "--model");
            for (const auto& p : emit_trimmed_checkpoints(base, model, te_grid, te_out_dir, gran, policy, threads)) {
                out << p.string() << "\n";
            }
            return 0;
        }
        if (*synth) {
            spec.validate();
            const auto threads = detail::resolve_threads(s_threads);
            const auto taus = generate_synthetic(spec, threads);
            if (!s_out_dir.empty()) {
                std::error_code ec;
                std::filesystem::create_directories(s_out_dir, ec);
                if (ec) throw IoError("cannot create '" + s_out_dir + "': " + ec.message());
                for (std::size_t t = 0; t < taus.size(); ++t) {
                    char name[32];
                    std::snprintf(name, sizeof name, "task_%02zu.safetensors", t);
                    write_checkpoint(to_sidecar(taus[t]), std::filesystem::path(s_out_dir) / name);
                }
            }
            auto summary = nlohmann::json::array();
            std::string csv = "task,tensor,index,value\n";
            for (std::size_t t = 0; t < taus.size(); ++t) {
                std::size_t pos = 0, neg = 0;
                double l2 = 0.0;
                for (const auto& [name, d] : taus[t].deltas) {
                    for (std::size_t e = 0; e < d.size(); ++e) {
                        const float v = d.values[e];
                        if (v == 0.0f) continue;
                        (v > 0 ? pos : neg)++;
                        l2 += static_cast<double>(v) * v;
                        if (!s_csv.empty()) {
                            char buf[96];
                            std::snprintf(buf, sizeof buf, "%zu,%s,%zu,%.9g\n", t, name.c_str(), e, static_cast<double>(v));
                            csv += buf;
                        }
                    }
                }
                summary.push_back({{"task", t}, {"positive", pos}, {"negative", neg}, {"l2_norm", std::sqrt(l2)}});
            }
            const nlohmann::json json = {{"d", spec.d}, {"n", spec.n}, {"density", spec.density},
                                         {"agreement", spec.sign_agreement}, {"scale", spec.magnitude_scale},
                                         {"seed", spec.seed}, {"tensors", spec.num_tensors}, {"tasks", summary}};
            if (!s_csv.empty()) detail::write_text(s_csv, csv);
            if (!s_json.empty()) detail::write_text(s_json, json.dump(2) + "\n");
            if (s_csv.empty() && s_json.empty() && s_out_dir.empty()) out << json.dump(2) << "\n";
            return 0;
        }
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr)
{
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(std::move(args), out, err);
}

} // namespace tensor_ties::cli
