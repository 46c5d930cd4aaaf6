#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace tensor_ties {

#ifndef TENSOR_TIES_VERSION
#define TENSOR_TIES_VERSION "0.0.0"
#endif

inline constexpr const char* kToolVersion = TENSOR_TIES_VERSION;

struct TensorStats {
    std::string name;
    std::size_t numel = 0;
    double l2_norm_of_delta = 0.0;
    std::size_t kept_count = 0;     ///< summed over tasks
    double conflict_fraction = 0.0; ///< after trimming
};

struct GlobalStats {
    std::size_t total_params = 0;
    std::size_t kept_params = 0;
    double sign_conflict_fraction_after_trim = 0.0;
    std::optional<double> elected_positive_fraction;
    std::optional<double> empty_A_fraction;
};

struct MergeStats {
    std::vector<TensorStats> per_tensor;
    GlobalStats global;
};

struct Provenance {
    std::string base_path;
    std::vector<std::string> model_paths;
    std::string tool_version = kToolVersion;
    double wall_time_ms = 0.0;
};

/// Machine-readable summary of a merge run. Serialises with sorted keys.
struct MergeReport {
    std::string method;
    nlohmann::json config = nlohmann::json::object();
    MergeStats stats;
    Provenance provenance;
    nlohmann::json extra; ///< method-specific details (e.g. RegMean solve paths)

    nlohmann::json to_json() const
    {
        nlohmann::json j;
        j["method"] = method;
        j["config"] = config;
        auto per = nlohmann::json::array();
        for (const auto& t : stats.per_tensor) {
            per.push_back({{"name", t.name},
                           {"numel", t.numel},
                           {"l2_norm_of_delta", t.l2_norm_of_delta},
                           {"kept_count", t.kept_count},
                           {"conflict_fraction", t.conflict_fraction}});
        }
        j["per_tensor"] = std::move(per);
        const auto& g = stats.global;
        j["global"] = {{"total_params", g.total_params},
                       {"kept_params", g.kept_params},
                       {"sign_conflict_fraction_after_trim", g.sign_conflict_fraction_after_trim},
                       {"elected_positive_fraction", nullptr},
                       {"empty_A_fraction", nullptr}};
        if (g.elected_positive_fraction) j["global"]["elected_positive_fraction"] = *g.elected_positive_fraction;
        if (g.empty_A_fraction) j["global"]["empty_A_fraction"] = *g.empty_A_fraction;
        j["provenance"] = {{"base_path", provenance.base_path},
                           {"model_paths", provenance.model_paths},
                           {"tool_version", provenance.tool_version},
                           {"wall_time_ms", provenance.wall_time_ms}};
        if (!extra.is_null()) j["details"] = extra;
        return j;
    }
};

} // namespace tensor_ties
