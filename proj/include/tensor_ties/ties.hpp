#pragma once

// TIES merging: trim each task vector to its top-k% magnitudes, elect a sign
// per parameter from the summed trimmed values, average only the entries that
// agree with the elected sign, then add the scaled result to the base.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tensor_ties/archive.hpp"
#include "tensor_ties/parallel.hpp"
#include "tensor_ties/report.hpp"
#include "tensor_ties/task_vector.hpp"

namespace tensor_ties {

enum class Granularity { Global, PerTensor };

inline Granularity parse_granularity(std::string_view s)
{
    if (s == "global") return Granularity::Global;
    if (s == "per-tensor" || s == "per_tensor") return Granularity::PerTensor;
    throw ValidationError("unknown granularity '" + std::string(s) + "'");
}

inline std::string_view granularity_name(Granularity g) noexcept
{
    return g == Granularity::Global ? "global" : "per-tensor";
}

/// Component ablations: each flag removes one stage of the pipeline.
struct Ablations {
    bool no_trim = false;          ///< keep every entry (k = 100)
    bool no_elect = false;         ///< mean of nonzero entries regardless of sign
    bool no_disjoint_mean = false; ///< mean over elected-sign entries and trimmed zeros
    bool no_scale = false;         ///< lambda = 1

    std::vector<std::string> names() const
    {
        std::vector<std::string> out;
        if (no_trim) out.emplace_back("no-trim");
        if (no_elect) out.emplace_back("no-elect");
        if (no_disjoint_mean) out.emplace_back("no-disjoint-mean");
        if (no_scale) out.emplace_back("no-scale");
        return out;
    }

    void set(std::string_view flag)
    {
        if (flag == "no-trim" || flag == "no_trim") no_trim = true;
        else if (flag == "no-elect" || flag == "no_elect") no_elect = true;
        else if (flag == "no-disjoint-mean" || flag == "no_disjoint_mean") no_disjoint_mean = true;
        else if (flag == "no-scale" || flag == "no_scale") no_scale = true;
        else throw ValidationError("unknown ablation '" + std::string(flag) + "'");
    }
};

struct TiesConfig {
    double k_percent = 20.0;
    double lambda = 1.0;
    Granularity granularity = Granularity::Global;
    Ablations ablation;
    std::optional<SignVector> sign_override;
    std::size_t threads = 1;

    void validate() const
    {
        if (!(k_percent > 0.0 && k_percent <= 100.0)) {
            throw ValidationError("k must be in (0, 100], got " + std::to_string(k_percent));
        }
        detail::require_lambda(lambda);
        if (sign_override && ablation.no_elect) {
            throw ValidationError("a sign override cannot be combined with the no-elect ablation");
        }
    }

    double effective_k() const noexcept { return ablation.no_trim ? 100.0 : k_percent; }
    double effective_lambda() const noexcept { return ablation.no_scale ? 1.0 : lambda; }
};

/// Number of entries kept out of d: round-half-up(k/100 * d), at least 1 when d > 0.
inline std::size_t kept_count_for(double k_percent, std::size_t d) noexcept
{
    if (d == 0) return 0;
    const double x = k_percent * static_cast<double>(d) / 100.0;
    const auto kept = static_cast<std::size_t>(std::floor(x + 0.5));
    return std::clamp<std::size_t>(kept, 1, d);
}

struct TrimmedTaskVector {
    TaskVector vector;
    std::size_t kept_count = 0;
    /// Smallest magnitude that survived trimming (the selection threshold).
    float threshold_magnitude = 0.0f;
    std::map<std::string, std::size_t> kept_per_tensor;
};

namespace detail {

struct TrimOutcome {
    std::vector<std::size_t> kept_per_part;
    float threshold = 0.0f;
};

/// Keeps the `kept` largest-magnitude entries of the concatenation of `parts`
/// and zeroes the rest, in place. Equal magnitudes at the threshold are
/// resolved in favour of the lower flat index. Two passes: an O(d) selection
/// of the threshold, then a chunked mark pass whose tie allowance per chunk is
/// fixed by a prefix sum, so the kept set never depends on the worker count.
inline TrimOutcome trim_parts(const std::vector<std::span<float>>& parts, std::size_t kept,
                              std::size_t threads)
{
    TrimOutcome out;
    std::vector<std::size_t> sizes;
    std::size_t total = 0;
    for (const auto& p : parts) {
        sizes.push_back(p.size());
        total += p.size();
    }
    out.kept_per_part.assign(parts.size(), 0);
    if (total == 0) return out;

    if (kept >= total) {
        out.kept_per_part = sizes;
        out.threshold = std::numeric_limits<float>::infinity();
        for (const auto& p : parts)
            for (float x : p) out.threshold = std::min(out.threshold, std::fabs(x));
        return out;
    }

    const auto chunks = make_chunks(sizes);
    float thr;
    {
        std::vector<std::size_t> offsets(parts.size(), 0);
        for (std::size_t i = 1; i < parts.size(); ++i) offsets[i] = offsets[i - 1] + sizes[i - 1];
        std::vector<float> mags(total);
        parallel_for(chunks.size(), threads, [&](std::size_t c) {
            const auto& ch = chunks[c];
            const auto src = parts[ch.tensor];
            float* dst = mags.data() + offsets[ch.tensor];
            for (std::size_t e = ch.begin; e < ch.end; ++e) dst[e] = std::fabs(src[e]);
        });
        auto nth = mags.begin() + static_cast<std::ptrdiff_t>(kept - 1);
        std::nth_element(mags.begin(), nth, mags.end(), std::greater<float>());
        thr = *nth;
    }
    out.threshold = thr;

    std::vector<std::size_t> above(chunks.size()), at(chunks.size());
    parallel_for(chunks.size(), threads, [&](std::size_t c) {
        const auto& ch = chunks[c];
        const auto src = parts[ch.tensor];
        std::size_t a = 0, t = 0;
        for (std::size_t e = ch.begin; e < ch.end; ++e) {
            const float m = std::fabs(src[e]);
            a += m > thr;
            t += m == thr;
        }
        above[c] = a;
        at[c] = t;
    });

    std::size_t above_total = 0;
    for (auto a : above) above_total += a;
    std::size_t ties_left = kept - above_total;
    std::vector<std::size_t> allowance(chunks.size());
    for (std::size_t c = 0; c < chunks.size(); ++c) {
        allowance[c] = std::min(at[c], ties_left);
        ties_left -= allowance[c];
    }

    std::vector<std::size_t> kept_in_chunk(chunks.size());
    parallel_for(chunks.size(), threads, [&](std::size_t c) {
        const auto& ch = chunks[c];
        auto dst = parts[ch.tensor];
        std::size_t allow = allowance[c], k = 0;
        for (std::size_t e = ch.begin; e < ch.end; ++e) {
            const float m = std::fabs(dst[e]);
            if (m > thr) {
                ++k;
            } else if (m == thr && allow > 0) {
                --allow;
                ++k;
            } else {
                dst[e] = 0.0f;
            }
        }
        kept_in_chunk[c] = k;
    });
    for (std::size_t c = 0; c < chunks.size(); ++c) out.kept_per_part[chunks[c].tensor] += kept_in_chunk[c];
    return out;
}

inline std::int8_t sign_of(double x) noexcept
{
    return static_cast<std::int8_t>((x > 0.0) - (x < 0.0));
}

enum class MergeRule {
    DisjointMean,     ///< mean over entries whose sign equals the elected sign
    NonzeroMean,      ///< mean over all nonzero entries (no election)
    ElectedWithZeros, ///< mean over elected-sign entries and trimmed zeros
    PlainMean,        ///< mean over all n entries
};

/// sign(sum_t src[t][e]), float64 accumulation in task order.
inline std::int8_t elect_element(std::span<const float* const> src, std::size_t e) noexcept
{
    double sum = 0.0;
    for (const float* s : src) sum += static_cast<double>(s[e]);
    return sign_of(sum);
}

/// Merges one parameter across tasks. `matched` receives the number of
/// nonzero entries that entered the mean.
inline float merge_element(std::span<const float* const> src, std::size_t e, std::int8_t elected,
                           MergeRule rule, std::size_t& matched) noexcept
{
    double acc = 0.0;
    std::size_t count = 0;
    matched = 0;
    for (const float* s : src) {
        const float x = s[e];
        const bool zero = x == 0.0f;
        switch (rule) {
        case MergeRule::DisjointMean:
            if (!zero && sign_of(x) == elected) {
                acc += x;
                ++matched;
            }
            break;
        case MergeRule::NonzeroMean:
            if (!zero) {
                acc += x;
                ++matched;
            }
            break;
        case MergeRule::ElectedWithZeros:
            if (zero) {
                ++count;
            } else if (sign_of(x) == elected) {
                acc += x;
                ++matched;
            }
            break;
        case MergeRule::PlainMean:
            acc += x;
            ++count;
            matched += !zero;
            break;
        }
    }
    if (rule != MergeRule::PlainMean) count += matched;
    return count ? static_cast<float>(acc / static_cast<double>(count)) : 0.0f;
}

inline MergeRule rule_for(const Ablations& a) noexcept
{
    if (a.no_elect && a.no_disjoint_mean) return MergeRule::PlainMean;
    if (a.no_elect) return MergeRule::NonzeroMean;
    if (a.no_disjoint_mean) return MergeRule::ElectedWithZeros;
    return MergeRule::DisjointMean;
}

template <class V>
void require_common_schema(std::span<const V> vs, auto&& deltas_of, std::string_view what)
{
    if (vs.empty()) throw ValidationError(std::string(what) + ": empty list");
    for (std::size_t t = 1; t < vs.size(); ++t) {
        require_same_schema(deltas_of(vs[t]), deltas_of(vs[0]),
                            std::string(what) + " (vector " + std::to_string(t) + ")");
    }
}

/// Per-tensor source pointers: sources[tensor][task].
inline std::vector<std::vector<const float*>> gather_sources(std::span<const TaskVector* const> vs)
{
    std::vector<std::vector<const float*>> sources;
    for (const auto& [name, d] : vs[0]->deltas) {
        std::vector<const float*> src;
        for (const auto* v : vs) src.push_back(v->deltas.at(name).values.data());
        sources.push_back(std::move(src));
    }
    return sources;
}

} // namespace detail

/// Keeps the top k% entries of `tau` by magnitude and zeroes the rest.
/// Ties at the threshold go to the lower flat index (tensor-name order, then
/// element order). Global granularity ranks all tensors together; per-tensor
/// granularity ranks and counts each tensor separately.
inline TrimmedTaskVector trim(TaskVector tau, double k_percent, Granularity granularity = Granularity::Global,
                              std::size_t threads = 1)
{
    if (!(k_percent > 0.0 && k_percent <= 100.0)) {
        throw ValidationError("k must be in (0, 100], got " + std::to_string(k_percent));
    }
    TrimmedTaskVector out;
    std::vector<std::string> names;
    std::vector<std::span<float>> parts;
    for (auto& [name, d] : tau.deltas) {
        names.push_back(name);
        parts.emplace_back(d.values);
    }

    if (granularity == Granularity::Global) {
        const auto r = detail::trim_parts(parts, kept_count_for(k_percent, tau.size()), threads);
        for (std::size_t i = 0; i < names.size(); ++i) out.kept_per_tensor[names[i]] = r.kept_per_part[i];
        out.threshold_magnitude = r.threshold;
    } else {
        out.threshold_magnitude = std::numeric_limits<float>::infinity();
        for (std::size_t i = 0; i < names.size(); ++i) {
            const auto r = detail::trim_parts({parts[i]}, kept_count_for(k_percent, parts[i].size()), threads);
            out.kept_per_tensor[names[i]] = r.kept_per_part[0];
            if (!parts[i].empty()) out.threshold_magnitude = std::min(out.threshold_magnitude, r.threshold);
        }
    }
    if (std::isinf(out.threshold_magnitude)) out.threshold_magnitude = 0.0f;
    for (const auto& kv : out.kept_per_tensor) out.kept_count += kv.second;
    out.vector = std::move(tau);
    return out;
}

/// Elected sign per parameter: sign of the summed trimmed values (the side
/// carrying more total magnitude). Zero only where the sum is exactly zero.
inline SignVector elect_sign(std::span<const TrimmedTaskVector> trimmed, std::size_t threads = 1)
{
    detail::require_common_schema(trimmed, [](const TrimmedTaskVector& v) -> const auto& { return v.vector.deltas; },
                                  "elect_sign");
    std::vector<const TaskVector*> vs;
    for (const auto& t : trimmed) vs.push_back(&t.vector);
    const auto sources = detail::gather_sources(vs);

    SignVector out;
    std::vector<std::int8_t*> targets;
    for (const auto& [name, d] : vs[0]->deltas) {
        auto& s = out.signs[name];
        s.shape = d.shape;
        s.values.resize(d.size());
        targets.push_back(s.values.data());
    }
    const auto chunks = make_chunks(tensor_sizes(vs[0]->deltas));
    parallel_for(chunks.size(), threads, [&](std::size_t c) {
        const auto& ch = chunks[c];
        for (std::size_t e = ch.begin; e < ch.end; ++e) {
            targets[ch.tensor][e] = detail::elect_element(sources[ch.tensor], e);
        }
    });
    return out;
}

/// Per parameter, the mean of the trimmed values whose sign equals the
/// elected sign (zeros never count). Parameters with no such value get 0.
inline TaskVector disjoint_merge(std::span<const TrimmedTaskVector> trimmed, const SignVector& elected,
                                 std::size_t threads = 1)
{
    detail::require_common_schema(trimmed, [](const TrimmedTaskVector& v) -> const auto& { return v.vector.deltas; },
                                  "disjoint_merge");
    require_same_schema(elected.signs, trimmed[0].vector.deltas, "disjoint_merge elected signs");
    std::vector<const TaskVector*> vs;
    for (const auto& t : trimmed) vs.push_back(&t.vector);
    const auto sources = detail::gather_sources(vs);

    TaskVector out;
    out.base_fingerprint = vs[0]->base_fingerprint;
    std::vector<float*> targets;
    std::vector<const std::int8_t*> signs;
    for (const auto& [name, d] : vs[0]->deltas) {
        auto& o = out.deltas[name];
        o.shape = d.shape;
        o.values.resize(d.size());
        targets.push_back(o.values.data());
        signs.push_back(elected.signs.at(name).values.data());
    }
    const auto chunks = make_chunks(tensor_sizes(vs[0]->deltas));
    parallel_for(chunks.size(), threads, [&](std::size_t c) {
        const auto& ch = chunks[c];
        std::size_t matched;
        for (std::size_t e = ch.begin; e < ch.end; ++e) {
            targets[ch.tensor][e] = detail::merge_element(sources[ch.tensor], e, signs[ch.tensor][e],
                                                          detail::MergeRule::DisjointMean, matched);
        }
    });
    return out;
}

struct TiesResult {
    TaskVector merged; ///< unscaled merged task vector
    double lambda = 1.0; ///< scale to apply (1 under the no-scale ablation)
    MergeStats stats;
};

/// Trim, elect (or take cfg.sign_override) and merge a set of task vectors.
/// The vectors are consumed: trimming happens in place.
inline TiesResult ties_merge_task_vectors(std::vector<TaskVector> taus, const TiesConfig& cfg)
{
    cfg.validate();
    if (taus.empty()) throw ValidationError("ties merge needs at least one task vector");
    for (std::size_t t = 1; t < taus.size(); ++t) {
        require_same_schema(taus[t].deltas, taus[0].deltas, "ties merge (vector " + std::to_string(t) + ")");
    }
    if (cfg.sign_override) require_same_schema(cfg.sign_override->signs, taus[0].deltas, "sign override");

    const std::size_t threads = std::max<std::size_t>(cfg.threads, 1);
    std::vector<TrimmedTaskVector> trimmed;
    trimmed.reserve(taus.size());
    for (auto& tau : taus) trimmed.push_back(trim(std::move(tau), cfg.effective_k(), cfg.granularity, threads));
    taus.clear();

    std::vector<const TaskVector*> vs;
    for (const auto& t : trimmed) vs.push_back(&t.vector);
    const auto sources = detail::gather_sources(vs);
    const auto rule = detail::rule_for(cfg.ablation);

    TiesResult result;
    result.lambda = cfg.effective_lambda();
    result.merged.base_fingerprint = vs[0]->base_fingerprint;
    std::vector<float*> targets;
    std::vector<const std::int8_t*> overrides;
    for (const auto& [name, d] : vs[0]->deltas) {
        auto& o = result.merged.deltas[name];
        o.shape = d.shape;
        o.values.resize(d.size());
        targets.push_back(o.values.data());
        overrides.push_back(cfg.sign_override ? cfg.sign_override->signs.at(name).values.data() : nullptr);
    }

    struct Partial {
        std::size_t conflicts = 0, positive = 0, empty = 0;
        double sumsq = 0.0;
    };
    const auto sizes = tensor_sizes(result.merged.deltas);
    const auto chunks = make_chunks(sizes);
    std::vector<Partial> partials(chunks.size());
    parallel_for(chunks.size(), threads, [&](std::size_t c) {
        const auto& ch = chunks[c];
        const auto& src = sources[ch.tensor];
        const std::int8_t* ov = overrides[ch.tensor];
        float* dst = targets[ch.tensor];
        Partial p;
        std::size_t matched;
        for (std::size_t e = ch.begin; e < ch.end; ++e) {
            bool pos = false, neg = false;
            for (const float* s : src) {
                pos |= s[e] > 0.0f;
                neg |= s[e] < 0.0f;
            }
            const std::int8_t gamma = ov ? ov[e] : detail::elect_element(src, e);
            const float v = detail::merge_element(src, e, gamma, rule, matched);
            dst[e] = v;
            p.conflicts += pos && neg;
            p.positive += gamma > 0;
            p.empty += matched == 0;
            p.sumsq += static_cast<double>(v) * static_cast<double>(v);
        }
        partials[c] = p;
    });

    auto& stats = result.stats;
    std::vector<Partial> per_tensor(sizes.size());
    for (std::size_t c = 0; c < chunks.size(); ++c) {
        auto& t = per_tensor[chunks[c].tensor];
        t.conflicts += partials[c].conflicts;
        t.positive += partials[c].positive;
        t.empty += partials[c].empty;
        t.sumsq += partials[c].sumsq;
    }
    std::size_t conflicts = 0, positive = 0, empty = 0, i = 0;
    for (const auto& [name, d] : result.merged.deltas) {
        TensorStats ts;
        ts.name = name;
        ts.numel = d.size();
        ts.l2_norm_of_delta = result.lambda * std::sqrt(per_tensor[i].sumsq);
        for (const auto& t : trimmed) ts.kept_count += t.kept_per_tensor.at(name);
        ts.conflict_fraction = d.size() ? static_cast<double>(per_tensor[i].conflicts) / d.size() : 0.0;
        conflicts += per_tensor[i].conflicts;
        positive += per_tensor[i].positive;
        empty += per_tensor[i].empty;
        stats.global.total_params += d.size();
        stats.global.kept_params += ts.kept_count;
        stats.per_tensor.push_back(std::move(ts));
        ++i;
    }
    const double d = static_cast<double>(stats.global.total_params);
    if (stats.global.total_params) {
        stats.global.sign_conflict_fraction_after_trim = conflicts / d;
        stats.global.elected_positive_fraction = positive / d;
        stats.global.empty_A_fraction = empty / d;
    } else {
        stats.global.elected_positive_fraction = 0.0;
        stats.global.empty_A_fraction = 0.0;
    }
    return result;
}

struct MergeOutput {
    Checkpoint merged;
    MergeStats stats;
};

/// End-to-end TIES merge of fine-tuned checkpoints sharing `base`.
inline MergeOutput ties_merge(const Checkpoint& base, std::span<const Checkpoint> finetuned, const TiesConfig& cfg)
{
    cfg.validate();
    if (finetuned.empty()) throw ValidationError("ties merge needs at least one fine-tuned checkpoint");
    const std::size_t threads = std::max<std::size_t>(cfg.threads, 1);
    std::vector<TaskVector> taus;
    taus.reserve(finetuned.size());
    for (std::size_t t = 0; t < finetuned.size(); ++t) {
        try {
            taus.push_back(compute_task_vector(finetuned[t], base, threads));
        } catch (const ValidationError& e) {
            throw ValidationError("model " + std::to_string(t) + ": " + e.what());
        }
    }
    auto r = ties_merge_task_vectors(std::move(taus), cfg);
    return {apply_task_vector(base, r.merged, r.lambda, threads), std::move(r.stats)};
}

} // namespace tensor_ties
