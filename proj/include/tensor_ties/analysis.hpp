#pragma once

// Interference diagnostics over sets of task vectors: sign-conflict
// fractions and curves, magnitude statistics grouped by influence count and
// sign agreement, trimmed-checkpoint emission, and a synthetic task-vector
// generator for desk-scale experiments.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tensor_ties/archive.hpp"
#include "tensor_ties/parallel.hpp"
#include "tensor_ties/random.hpp"
#include "tensor_ties/task_vector.hpp"
#include "tensor_ties/ties.hpp"

namespace tensor_ties {

namespace detail {

inline std::string fmt_double(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::vector<TrimmedTaskVector> trim_all(std::span<const TaskVector> taus, double k_percent,
                                               Granularity g, std::size_t threads)
{
    std::vector<TrimmedTaskVector> out;
    out.reserve(taus.size());
    for (const auto& t : taus) out.push_back(trim(t, k_percent, g, threads));
    return out;
}

/// Number of parameters whose values (across the given vectors) include both
/// a strictly positive and a strictly negative entry.
inline std::size_t count_conflicts(std::span<const TaskVector* const> vs, std::size_t threads)
{
    const auto sources = gather_sources(vs);
    const auto chunks = make_chunks(tensor_sizes(vs[0]->deltas));
    std::vector<std::size_t> partial(chunks.size());
    parallel_for(chunks.size(), threads, [&](std::size_t c) {
        const auto& ch = chunks[c];
        const auto& src = sources[ch.tensor];
        std::size_t n = 0;
        for (std::size_t e = ch.begin; e < ch.end; ++e) {
            bool pos = false, neg = false;
            for (const float* s : src) {
                pos |= s[e] > 0.0f;
                neg |= s[e] < 0.0f;
            }
            n += pos && neg;
        }
        partial[c] = n;
    });
    std::size_t total = 0;
    for (auto p : partial) total += p;
    return total;
}

inline void require_vectors(std::span<const TaskVector> taus, std::size_t min_count, const char* what)
{
    if (taus.size() < min_count) {
        throw ValidationError(std::string(what) + " needs at least " + std::to_string(min_count) +
                              " task vectors, got " + std::to_string(taus.size()));
    }
    for (std::size_t t = 1; t < taus.size(); ++t) {
        require_same_schema(taus[t].deltas, taus[0].deltas, std::string(what) + " (vector " + std::to_string(t) + ")");
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Sign conflicts

/// Fraction of parameters where the trimmed vectors disagree in sign (at
/// least one strictly positive and one strictly negative entry).
inline double sign_conflict_fraction(std::span<const TaskVector> taus, double k_percent,
                                     Granularity g = Granularity::Global, std::size_t threads = 1)
{
    detail::require_vectors(taus, 2, "sign_conflict_fraction");
    const auto trimmed = detail::trim_all(taus, k_percent, g, threads);
    std::vector<const TaskVector*> vs;
    for (const auto& t : trimmed) vs.push_back(&t.vector);
    const std::size_t d = taus[0].size();
    return d ? static_cast<double>(detail::count_conflicts(vs, threads)) / static_cast<double>(d) : 0.0;
}

struct ConflictPoint {
    std::size_t num_models = 0;
    double conflict_fraction = 0.0;
    std::size_t subsets = 0; ///< number of subsets averaged
};

struct KSweepPoint {
    double k_percent = 0.0;
    double conflict_fraction = 0.0;
};

struct ConflictCurve {
    std::vector<ConflictPoint> points;
    double k_percent = 20.0;
    std::string subset_policy;
    std::vector<KSweepPoint> k_sweep; ///< all models, varying k

    nlohmann::json to_json() const
    {
        auto pts = nlohmann::json::array();
        for (const auto& p : points) {
            pts.push_back({{"num_models", p.num_models}, {"conflict_fraction", p.conflict_fraction},
                           {"subsets", p.subsets}});
        }
        auto sweep = nlohmann::json::array();
        for (const auto& p : k_sweep) sweep.push_back({{"k_percent", p.k_percent}, {"conflict_fraction", p.conflict_fraction}});
        return {{"points", pts}, {"k_percent", k_percent}, {"subset_policy", subset_policy}, {"k_sweep", sweep}};
    }

    std::string to_csv() const
    {
        std::string out = "kind,num_models,k_percent,conflict_fraction,subsets\n";
        for (const auto& p : points) {
            out += "models," + std::to_string(p.num_models) + "," + detail::fmt_double(k_percent) + "," +
                   detail::fmt_double(p.conflict_fraction) + "," + std::to_string(p.subsets) + "\n";
        }
        for (const auto& p : k_sweep) {
            out += "k_sweep," + std::to_string(points.empty() ? 0 : points.back().num_models) + "," +
                   detail::fmt_double(p.k_percent) + "," + detail::fmt_double(p.conflict_fraction) + ",1\n";
        }
        return out;
    }
};

namespace detail {

inline std::uint64_t binomial_capped(std::size_t n, std::size_t m, std::uint64_t cap)
{
    std::uint64_t c = 1;
    for (std::size_t i = 1; i <= m; ++i) {
        c = c * (n - m + i) / i;
        if (c > cap) return cap + 1;
    }
    return c;
}

/// Either every m-subset of [0, n) (when there are at most `trials`) or
/// `trials` distinct random ones, each sorted ascending.
inline std::vector<std::vector<std::size_t>> pick_subsets(std::size_t n, std::size_t m, std::size_t trials,
                                                          std::uint64_t seed)
{
    std::vector<std::vector<std::size_t>> out;
    if (binomial_capped(n, m, trials) <= trials) {
        std::vector<bool> mask(n, false);
        std::fill(mask.begin(), mask.begin() + static_cast<std::ptrdiff_t>(m), true);
        do {
            std::vector<std::size_t> s;
            for (std::size_t i = 0; i < n; ++i)
                if (mask[i]) s.push_back(i);
            out.push_back(std::move(s));
        } while (std::prev_permutation(mask.begin(), mask.end()));
        return out;
    }
    std::set<std::vector<std::size_t>> seen;
    std::uint64_t counter = 0;
    while (out.size() < trials) {
        std::vector<std::size_t> perm(n);
        for (std::size_t i = 0; i < n; ++i) perm[i] = i;
        for (std::size_t i = 0; i < m; ++i) {
            const auto j = i + rng::draw(seed, 0x5b5e7ull + m, counter++) % (n - i);
            std::swap(perm[i], perm[j]);
        }
        std::vector<std::size_t> s(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(m));
        std::sort(s.begin(), s.end());
        if (seen.insert(s).second) out.push_back(std::move(s));
    }
    return out;
}

} // namespace detail

/// Conflict fraction versus number of merged models (m = 2..n, averaged over
/// at most `trials` subsets per m), plus a k sweep over all models.
inline ConflictCurve conflict_curve(std::span<const TaskVector> taus, double k_percent, std::size_t trials = 10,
                                    std::uint64_t seed = 0, std::span<const double> k_grid = {},
                                    Granularity g = Granularity::Global, std::size_t threads = 1)
{
    detail::require_vectors(taus, 2, "conflict_curve");
    if (trials == 0) throw ValidationError("conflict_curve: trials must be >= 1");
    ConflictCurve curve;
    curve.k_percent = k_percent;
    curve.subset_policy = "all subsets when C(n,m) <= " + std::to_string(trials) + ", else " +
                          std::to_string(trials) + " distinct random subsets (seed " + std::to_string(seed) + ")";

    const auto trimmed = detail::trim_all(taus, k_percent, g, threads);
    const double d = static_cast<double>(taus[0].size());
    const std::size_t n = taus.size();
    for (std::size_t m = 2; m <= n; ++m) {
        const auto subsets = detail::pick_subsets(n, m, trials, seed);
        double sum = 0.0;
        for (const auto& s : subsets) {
            std::vector<const TaskVector*> vs;
            for (auto i : s) vs.push_back(&trimmed[i].vector);
            sum += d > 0 ? static_cast<double>(detail::count_conflicts(vs, threads)) / d : 0.0;
        }
        curve.points.push_back({m, sum / static_cast<double>(subsets.size()), subsets.size()});
    }
    for (double k : k_grid) curve.k_sweep.push_back({k, sign_conflict_fraction(taus, k, g, threads)});
    return curve;
}

// ---------------------------------------------------------------------------
// Interference statistics

enum class InterferenceMethod { PlainMean, TrimThenDisjoint, ElectThenDisjoint, Ties };

inline InterferenceMethod parse_interference_method(std::string_view s)
{
    if (s == "plain_mean") return InterferenceMethod::PlainMean;
    if (s == "trim_then_disjoint") return InterferenceMethod::TrimThenDisjoint;
    if (s == "elect_then_disjoint") return InterferenceMethod::ElectThenDisjoint;
    if (s == "ties") return InterferenceMethod::Ties;
    throw ValidationError("unknown interference method '" + std::string(s) + "'");
}

inline std::string_view interference_method_name(InterferenceMethod m) noexcept
{
    switch (m) {
    case InterferenceMethod::PlainMean: return "plain_mean";
    case InterferenceMethod::TrimThenDisjoint: return "trim_then_disjoint";
    case InterferenceMethod::ElectThenDisjoint: return "elect_then_disjoint";
    case InterferenceMethod::Ties: return "ties";
    }
    return "?";
}

struct GroupStats {
    double mean_abs = 0.0;
    double std_abs = 0.0; ///< population standard deviation
    std::size_t count = 0;
};

struct InterferenceStats {
    std::map<std::size_t, GroupStats> by_influence_count;
    std::map<std::string, GroupStats> by_agreement_bin;
    InterferenceMethod method = InterferenceMethod::PlainMean;
    double k_percent = 20.0;

    nlohmann::json to_json() const
    {
        auto group = [](const GroupStats& g) {
            return nlohmann::json{{"mean_abs", g.mean_abs}, {"std_abs", g.std_abs}, {"count", g.count}};
        };
        nlohmann::json inf = nlohmann::json::object(), agr = nlohmann::json::object();
        for (const auto& [k, g] : by_influence_count) inf[std::to_string(k)] = group(g);
        for (const auto& [k, g] : by_agreement_bin) agr[k] = group(g);
        return {{"method", interference_method_name(method)}, {"k_percent", k_percent},
                {"by_influence_count", inf}, {"by_agreement_bin", agr}};
    }

    std::string to_csv() const
    {
        std::string out = "method,group_kind,group,count,mean_abs,std_abs\n";
        const std::string m(interference_method_name(method));
        for (const auto& [k, g] : by_influence_count) {
            out += m + ",influence_count," + std::to_string(k) + "," + std::to_string(g.count) + "," +
                   detail::fmt_double(g.mean_abs) + "," + detail::fmt_double(g.std_abs) + "\n";
        }
        for (const auto& [k, g] : by_agreement_bin) {
            out += m + ",agreement," + k + "," + std::to_string(g.count) + "," + detail::fmt_double(g.mean_abs) +
                   "," + detail::fmt_double(g.std_abs) + "\n";
        }
        return out;
    }
};

/// Agreement bins over max(#pos, #neg) / (#pos + #neg): [0.5,0.6) ... [0.9,1.0),
/// exactly 1.0, and "undefined" when no entry is nonzero. Integer arithmetic,
/// so ratios such as 3/5 land exactly on their bin edge.
inline std::string agreement_bin(std::size_t pos, std::size_t neg)
{
    static const char* const labels[] = {"[0.5,0.6)", "[0.6,0.7)", "[0.7,0.8)", "[0.8,0.9)", "[0.9,1.0)"};
    const std::size_t total = pos + neg;
    if (total == 0) return "undefined";
    const std::size_t top = std::max(pos, neg);
    if (top == total) return "1.0";
    std::size_t b = 0;
    while (b < 4 && 10 * top >= (6 + b) * total) ++b;
    return labels[b];
}

/// Groups parameters by influence count (tasks with a nonzero trimmed entry)
/// and by sign agreement of the trimmed entries, and reports |merged value|
/// statistics per group for the chosen merge method:
///   plain_mean          mean of the untrimmed values over all tasks
///   trim_then_disjoint  mean of nonzero trimmed values, no election
///   elect_then_disjoint elect on untrimmed values, disjoint mean
///   ties                trim, elect, disjoint mean
inline InterferenceStats interference_stats(std::span<const TaskVector> taus, double k_percent,
                                            InterferenceMethod method, Granularity g = Granularity::Global,
                                            std::size_t threads = 1)
{
    detail::require_vectors(taus, 2, "interference_stats");
    const auto trimmed = detail::trim_all(taus, k_percent, g, threads);
    std::vector<const TaskVector*> raw, cut;
    for (const auto& t : taus) raw.push_back(&t);
    for (const auto& t : trimmed) cut.push_back(&t.vector);
    const auto raw_src = detail::gather_sources(raw);
    const auto cut_src = detail::gather_sources(cut);
    const std::size_t n = taus.size();

    struct Acc {
        std::size_t count = 0;
        double sum = 0.0, sumsq = 0.0;
        void add(double v)
        {
            ++count;
            sum += v;
            sumsq += v * v;
        }
        void merge(const Acc& o)
        {
            count += o.count;
            sum += o.sum;
            sumsq += o.sumsq;
        }
    };
    static const std::vector<std::string> bins = {"[0.5,0.6)", "[0.6,0.7)", "[0.7,0.8)", "[0.8,0.9)",
                                                  "[0.9,1.0)", "1.0", "undefined"};
    struct Partial {
        std::vector<Acc> influence;
        std::map<std::string, Acc> agreement;
    };

    const auto chunks = make_chunks(tensor_sizes(taus[0].deltas));
    std::vector<Partial> partials(chunks.size());
    parallel_for(chunks.size(), threads, [&](std::size_t c) {
        const auto& ch = chunks[c];
        const auto& rs = raw_src[ch.tensor];
        const auto& cs = cut_src[ch.tensor];
        Partial p;
        p.influence.resize(n + 1);
        std::size_t matched;
        for (std::size_t e = ch.begin; e < ch.end; ++e) {
            std::size_t pos = 0, neg = 0;
            for (const float* s : cs) {
                pos += s[e] > 0.0f;
                neg += s[e] < 0.0f;
            }
            float v = 0.0f;
            switch (method) {
            case InterferenceMethod::PlainMean:
                v = detail::merge_element(rs, e, 0, detail::MergeRule::PlainMean, matched);
                break;
            case InterferenceMethod::TrimThenDisjoint:
                v = detail::merge_element(cs, e, 0, detail::MergeRule::NonzeroMean, matched);
                break;
            case InterferenceMethod::ElectThenDisjoint:
                v = detail::merge_element(rs, e, detail::elect_element(rs, e), detail::MergeRule::DisjointMean,
                                          matched);
                break;
            case InterferenceMethod::Ties:
                v = detail::merge_element(cs, e, detail::elect_element(cs, e), detail::MergeRule::DisjointMean,
                                          matched);
                break;
            }
            const double a = std::fabs(static_cast<double>(v));
            p.influence[pos + neg].add(a);
            p.agreement[agreement_bin(pos, neg)].add(a);
        }
        partials[c] = std::move(p);
    });

    std::vector<Acc> influence(n + 1);
    std::map<std::string, Acc> agreement;
    for (const auto& p : partials) {
        for (std::size_t i = 0; i <= n; ++i) influence[i].merge(p.influence[i]);
        for (const auto& [k, a] : p.agreement) agreement[k].merge(a);
    }
    auto finish = [](const Acc& a) {
        GroupStats gs;
        gs.count = a.count;
        if (a.count) {
            gs.mean_abs = a.sum / static_cast<double>(a.count);
            gs.std_abs = std::sqrt(std::max(0.0, a.sumsq / static_cast<double>(a.count) - gs.mean_abs * gs.mean_abs));
        }
        return gs;
    };
    InterferenceStats out;
    out.method = method;
    out.k_percent = k_percent;
    for (std::size_t i = 0; i <= n; ++i) out.by_influence_count[i] = finish(influence[i]);
    for (const auto& b : bins) out.by_agreement_bin[b] = finish(agreement[b]);
    return out;
}

// ---------------------------------------------------------------------------
// Trimmed checkpoints

inline std::string k_label(double k)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", k);
    return buf;
}

/// Writes base + trim(finetuned - base, k) for every k in the grid, named
/// "trimmed_k<k>.safetensors" under out_dir. Returns the paths in grid order.
inline std::vector<std::filesystem::path> emit_trimmed_checkpoints(
    const Checkpoint& base, const Checkpoint& finetuned, std::span<const double> k_grid,
    const std::filesystem::path& out_dir, Granularity g = Granularity::Global,
    DtypePolicy policy = DtypePolicy::Preserve, std::size_t threads = 1)
{
    for (double k : k_grid) {
        if (!(k > 0.0 && k <= 100.0)) throw ValidationError("k must be in (0, 100], got " + std::to_string(k));
    }
    std::vector<std::filesystem::path> paths;
    if (k_grid.empty()) return paths;
    const auto tau = compute_task_vector(finetuned, base, threads);
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create '" + out_dir.string() + "': " + ec.message());
    for (double k : k_grid) {
        auto trimmed = trim(tau, k, g, threads);
        const auto out = apply_task_vector(base, trimmed.vector, 1.0, threads);
        auto path = out_dir / ("trimmed_k" + k_label(k) + ".safetensors");
        write_checkpoint(out, path, policy);
        paths.push_back(std::move(path));
    }
    return paths;
}

// ---------------------------------------------------------------------------
// Synthetic task vectors

struct SyntheticSpec {
    std::size_t d = 100000;
    std::size_t n = 11;
    double density = 0.2;        ///< fraction of influential entries per task
    double sign_agreement = 0.7; ///< P(task sign == consensus sign) per entry
    double magnitude_scale = 1.0;
    std::uint64_t seed = 0;
    std::size_t num_tensors = 1; ///< d is split evenly over this many tensors

    void validate() const
    {
        if (d < 1) throw ValidationError("synthetic: d must be >= 1");
        if (n < 1) throw ValidationError("synthetic: n must be >= 1");
        if (!(density > 0.0 && density <= 1.0)) throw ValidationError("synthetic: density must be in (0, 1]");
        if (!(sign_agreement >= 0.5 && sign_agreement <= 1.0)) {
            throw ValidationError("synthetic: agreement must be in [0.5, 1]");
        }
        if (!(magnitude_scale > 0.0) || !std::isfinite(magnitude_scale)) {
            throw ValidationError("synthetic: magnitude scale must be finite and > 0");
        }
        if (num_tensors < 1 || num_tensors > d) throw ValidationError("synthetic: tensors must be in [1, d]");
    }
};

namespace detail {

enum SyntheticStream : std::uint64_t {
    kConsensus = 1,
    kSupport = 2,
    kFlip = 3,
    kMagnitude = 4,
};

inline std::uint64_t task_stream(std::size_t task, SyntheticStream s) noexcept
{
    return (static_cast<std::uint64_t>(task) << 8) | s;
}

} // namespace detail

/// Generates n task vectors over d parameters. Per task, the support is the
/// round(density * d) indices with the smallest keys draw(seed, support, i)
/// (ties by index). Each index has a consensus sign from draw(seed, consensus, i);
/// a task keeps it with probability sign_agreement, else flips it. Magnitudes
/// are |N(0,1)| * magnitude_scale (polar method). Output depends only on `spec`.
inline std::vector<TaskVector> generate_synthetic(const SyntheticSpec& spec, std::size_t threads = 1)
{
    spec.validate();
    std::vector<std::string> names;
    std::vector<std::size_t> sizes;
    for (std::size_t t = 0; t < spec.num_tensors; ++t) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "synthetic.%03zu", t);
        names.emplace_back(buf);
        sizes.push_back(spec.d / spec.num_tensors + (t < spec.d % spec.num_tensors ? 1 : 0));
    }
    const auto chunks = make_chunks(sizes);
    std::vector<std::size_t> offsets(sizes.size(), 0);
    for (std::size_t i = 1; i < sizes.size(); ++i) offsets[i] = offsets[i - 1] + sizes[i - 1];
    const std::size_t support = kept_count_for(spec.density * 100.0, spec.d);
    const auto agree_cut = static_cast<std::uint64_t>(spec.sign_agreement * 0x1.0p53);

    std::vector<TaskVector> out(spec.n);
    for (std::size_t task = 0; task < spec.n; ++task) {
        const auto sup_stream = detail::task_stream(task, detail::kSupport);
        std::uint64_t key_cut = ~std::uint64_t{0};
        std::size_t ties_allowed = 0;
        if (support < spec.d) {
            std::vector<std::uint64_t> keys(spec.d);
            parallel_for(chunks.size(), threads, [&](std::size_t c) {
                const auto& ch = chunks[c];
                for (std::size_t e = ch.begin; e < ch.end; ++e) {
                    const auto i = offsets[ch.tensor] + e;
                    keys[i] = rng::draw(spec.seed, sup_stream, i);
                }
            });
            auto nth = keys.begin() + static_cast<std::ptrdiff_t>(support - 1);
            std::nth_element(keys.begin(), nth, keys.end());
            key_cut = *nth;
            const auto below = static_cast<std::size_t>(
                std::count_if(keys.begin(), keys.end(), [&](std::uint64_t k) { return k < key_cut; }));
            ties_allowed = support - below;
        }

        TaskVector& tv = out[task];
        std::vector<float*> targets;
        for (std::size_t t = 0; t < names.size(); ++t) {
            auto& dt = tv.deltas[names[t]];
            dt.shape = {static_cast<std::int64_t>(sizes[t])};
            dt.values.assign(sizes[t], 0.0f);
            targets.push_back(dt.values.data());
        }
        // Exact key collisions at the cut are resolved by flat index, sequentially.
        std::vector<std::uint8_t> at_cut_keep;
        if (support < spec.d && ties_allowed > 0) {
            at_cut_keep.assign(spec.d, 0);
            for (std::size_t i = 0; i < spec.d && ties_allowed > 0; ++i) {
                if (rng::draw(spec.seed, sup_stream, i) == key_cut) {
                    at_cut_keep[i] = 1;
                    --ties_allowed;
                }
            }
        }
        parallel_for(chunks.size(), threads, [&](std::size_t c) {
            const auto& ch = chunks[c];
            for (std::size_t e = ch.begin; e < ch.end; ++e) {
                const std::size_t i = offsets[ch.tensor] + e;
                if (support < spec.d) {
                    const auto key = rng::draw(spec.seed, sup_stream, i);
                    if (key > key_cut || (key == key_cut && !at_cut_keep[i])) continue;
                }
                const bool consensus_pos = (rng::draw(spec.seed, detail::kConsensus, i) >> 63) != 0;
                const bool agree = (rng::draw(spec.seed, detail::task_stream(task, detail::kFlip), i) >> 11) < agree_cut;
                const bool positive = consensus_pos == agree;
                double mag = 0.0;
                for (std::uint64_t attempt = 0; mag == 0.0; ++attempt) {
                    mag = std::fabs(rng::normal(spec.seed, detail::task_stream(task, detail::kMagnitude),
                                                (static_cast<std::uint64_t>(i) << 4) + attempt)) *
                          spec.magnitude_scale;
                    mag = static_cast<float>(mag);
                }
                targets[ch.tensor][e] = static_cast<float>(positive ? mag : -mag);
            }
        });
    }
    return out;
}

} // namespace tensor_ties
