#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tensor_ties/archive.hpp"
#include "tensor_ties/error.hpp"
#include "tensor_ties/parallel.hpp"

namespace tensor_ties {

template <class T>
struct DenseTensor {
    Shape shape;
    std::vector<T> values;

    std::size_t size() const noexcept { return values.size(); }
    bool operator==(const DenseTensor&) const = default;
};

template <class T>
using TensorMap = std::map<std::string, DenseTensor<T>>;

/// Per-tensor deltas of a fine-tuned checkpoint relative to its base, over the
/// base's float ("mergeable") tensors.
struct TaskVector {
    TensorMap<float> deltas;
    std::string base_fingerprint;

    std::size_t size() const noexcept
    {
        std::size_t n = 0;
        for (const auto& kv : deltas) n += kv.second.size();
        return n;
    }
};

/// Values in {-1, 0, +1}.
struct SignVector {
    TensorMap<std::int8_t> signs;
};

struct MagnitudeVector {
    TensorMap<float> magnitudes;
};

template <class T>
std::vector<std::size_t> tensor_sizes(const TensorMap<T>& m)
{
    std::vector<std::size_t> sizes;
    sizes.reserve(m.size());
    for (const auto& kv : m) sizes.push_back(kv.second.size());
    return sizes;
}

/// Throws ValidationError naming the first tensor where the two maps disagree
/// on name or shape.
template <class A, class B>
void require_same_schema(const TensorMap<A>& a, const TensorMap<B>& b, std::string_view what)
{
    auto ia = a.begin();
    auto ib = b.begin();
    for (; ia != a.end() && ib != b.end(); ++ia, ++ib) {
        if (ia->first != ib->first) {
            throw ValidationError(std::string(what) + ": tensor '" + std::min(ia->first, ib->first) +
                                  "' is not present in both");
        }
        if (ia->second.shape != ib->second.shape) {
            throw ValidationError(std::string(what) + ": tensor '" + ia->first + "' has shape " +
                                  shape_str(ia->second.shape) + " vs " + shape_str(ib->second.shape));
        }
    }
    if (ia != a.end()) throw ValidationError(std::string(what) + ": unexpected tensor '" + ia->first + "'");
    if (ib != b.end()) throw ValidationError(std::string(what) + ": missing tensor '" + ib->first + "'");
}

/// 64-bit FNV-1a over the sorted (name, dtype, shape) triples of the
/// checkpoint's float tensors. Values do not enter the digest.
inline std::string schema_fingerprint(const Checkpoint& base)
{
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](std::string_view s) {
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001b3ull;
        }
    };
    for (const auto& [name, t] : base.tensors) {
        if (!is_float(t.dtype)) continue;
        mix(name);
        mix("|");
        mix(dtype_name(t.dtype));
        mix("|");
        mix(shape_str(t.shape));
        mix(";");
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

namespace detail {

inline void require_finite(std::span<const float> v, const std::string& name, const char* which)
{
    for (float x : v) {
        if (!std::isfinite(x)) {
            throw ValidationError("tensor '" + name + "' in " + which + " has non-finite values");
        }
    }
}

inline void require_lambda(double lambda)
{
    if (!std::isfinite(lambda) || lambda <= 0.0) {
        throw ValidationError("lambda must be finite and > 0, got " + std::to_string(lambda));
    }
}

} // namespace detail

inline TaskVector compute_task_vector(const Checkpoint& finetuned, const Checkpoint& base,
                                      std::size_t threads = 1)
{
    const Checkpoint* pair[] = {&finetuned, &base};
    const auto report = validate_compatible(std::span<const Checkpoint* const>(pair));
    report.require_compatible();

    TaskVector tau;
    tau.base_fingerprint = schema_fingerprint(base);
    std::vector<std::string> names = report.mergeable();
    std::vector<DenseTensor<float>*> slots;
    for (const auto& name : names) {
        auto& slot = tau.deltas[name];
        slot.shape = base.at(name).shape;
        slots.push_back(&slot);
    }
    parallel_for(names.size(), threads, [&](std::size_t i) {
        const auto& name = names[i];
        auto ft = finetuned.at(name).to_float32();
        const auto b = base.at(name).to_float32();
        detail::require_finite(ft, name, "fine-tuned checkpoint");
        detail::require_finite(b, name, "base checkpoint");
        for (std::size_t e = 0; e < ft.size(); ++e) ft[e] -= b[e];
        slots[i]->values = std::move(ft);
    });
    for (const auto& [name, d] : tau.deltas) {
        for (float x : d.values) {
            if (!std::isfinite(x)) throw ComputeError("task vector tensor '" + name + "' overflows");
        }
    }
    return tau;
}

inline std::pair<SignVector, MagnitudeVector> decompose(const TaskVector& tau)
{
    SignVector sv;
    MagnitudeVector mv;
    for (const auto& [name, d] : tau.deltas) {
        auto& s = sv.signs[name];
        auto& m = mv.magnitudes[name];
        s.shape = m.shape = d.shape;
        s.values.resize(d.size());
        m.values.resize(d.size());
        for (std::size_t i = 0; i < d.size(); ++i) {
            const float x = d.values[i];
            s.values[i] = static_cast<std::int8_t>((x > 0.0f) - (x < 0.0f));
            m.values[i] = std::fabs(x);
        }
    }
    return {std::move(sv), std::move(mv)};
}

inline TaskVector recompose(const SignVector& signs, const MagnitudeVector& mags)
{
    require_same_schema(signs.signs, mags.magnitudes, "recompose");
    TaskVector tau;
    auto is = signs.signs.begin();
    for (const auto& [name, m] : mags.magnitudes) {
        auto& d = tau.deltas[name];
        d.shape = m.shape;
        d.values.resize(m.size());
        for (std::size_t i = 0; i < m.size(); ++i) {
            d.values[i] = static_cast<float>(is->second.values[i]) * m.values[i];
        }
        ++is;
    }
    return tau;
}

/// base + lambda * tau on the base's float tensors; other tensors and the
/// header metadata are copied from the base. Float results are encoded in the
/// base tensor's own dtype.
inline Checkpoint apply_task_vector(const Checkpoint& base, const TaskVector& tau, double lambda,
                                    std::size_t threads = 1)
{
    detail::require_lambda(lambda);
    TensorMap<float> base_schema;
    for (const auto& [name, t] : base.tensors) {
        if (is_float(t.dtype)) base_schema[name].shape = t.shape;
    }
    require_same_schema(tau.deltas, base_schema, "apply_task_vector");
    if (!tau.base_fingerprint.empty() && tau.base_fingerprint != schema_fingerprint(base)) {
        throw ValidationError("task vector was computed against a base with a different schema "
                              "(fingerprint " + tau.base_fingerprint + ")");
    }

    Checkpoint out;
    out.metadata = base.metadata;
    std::vector<std::string> names;
    std::vector<Tensor*> slots;
    for (const auto& [name, t] : base.tensors) {
        if (is_float(t.dtype)) {
            names.push_back(name);
            slots.push_back(&out.tensors[name]);
        } else {
            out.tensors.emplace(name, t);
        }
    }
    parallel_for(names.size(), threads, [&](std::size_t i) {
        const auto& name = names[i];
        const Tensor& bt = base.at(name);
        auto values = bt.to_float32();
        const auto& d = tau.deltas.at(name).values;
        for (std::size_t e = 0; e < values.size(); ++e) {
            values[e] = static_cast<float>(static_cast<double>(values[e]) +
                                           lambda * static_cast<double>(d[e]));
            if (!std::isfinite(values[e])) {
                throw ComputeError("non-finite result in tensor '" + name + "' after scaling");
            }
        }
        *slots[i] = Tensor::from_float32(bt.dtype, bt.shape, values, name);
    });
    return out;
}

/// Sum over t of weights[t] * taus[t], accumulated in float64 in list order.
inline TaskVector linear_combination(std::span<const TaskVector> taus, std::span<const double> weights,
                                     std::size_t threads = 1)
{
    if (taus.empty()) throw ValidationError("linear_combination: empty task-vector list");
    if (taus.size() != weights.size()) {
        throw ValidationError("linear_combination: " + std::to_string(taus.size()) + " vectors but " +
                              std::to_string(weights.size()) + " weights");
    }
    for (double w : weights) {
        if (!std::isfinite(w)) throw ValidationError("linear_combination: non-finite weight");
    }
    for (std::size_t t = 1; t < taus.size(); ++t) {
        require_same_schema(taus[t].deltas, taus[0].deltas,
                            "linear_combination (vector " + std::to_string(t) + ")");
    }

    TaskVector out;
    out.base_fingerprint = taus[0].base_fingerprint;
    std::vector<std::vector<const float*>> sources;
    std::vector<float*> targets;
    for (const auto& [name, d] : taus[0].deltas) {
        auto& o = out.deltas[name];
        o.shape = d.shape;
        o.values.resize(d.size());
        targets.push_back(o.values.data());
        std::vector<const float*> src;
        for (const auto& tau : taus) src.push_back(tau.deltas.at(name).values.data());
        sources.push_back(std::move(src));
    }
    const auto chunks = make_chunks(tensor_sizes(out.deltas));
    parallel_for(chunks.size(), threads, [&](std::size_t c) {
        const auto& ch = chunks[c];
        const auto& src = sources[ch.tensor];
        for (std::size_t e = ch.begin; e < ch.end; ++e) {
            double acc = 0.0;
            for (std::size_t t = 0; t < src.size(); ++t) acc += weights[t] * static_cast<double>(src[t][e]);
            targets[ch.tensor][e] = static_cast<float>(acc);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Sidecar serialisation

inline Checkpoint to_sidecar(const TaskVector& tau)
{
    Checkpoint ck;
    for (const auto& [name, d] : tau.deltas) {
        ck.tensors.emplace(name, Tensor::from_float32(DType::F32, d.shape, d.values, name));
    }
    if (!tau.base_fingerprint.empty()) ck.metadata["base_fingerprint"] = tau.base_fingerprint;
    ck.metadata["kind"] = "task_vector";
    return ck;
}

inline TaskVector task_vector_from_sidecar(const Checkpoint& ck)
{
    TaskVector tau;
    if (auto it = ck.metadata.find("base_fingerprint"); it != ck.metadata.end()) {
        tau.base_fingerprint = it->second;
    }
    for (const auto& [name, t] : ck.tensors) {
        if (!is_float(t.dtype)) {
            throw ValidationError("task-vector sidecar tensor '" + name + "' is not a float tensor");
        }
        auto values = t.to_float32();
        detail::require_finite(values, name, "task-vector sidecar");
        tau.deltas[name] = {t.shape, std::move(values)};
    }
    return tau;
}

inline Checkpoint to_sidecar(const SignVector& sv)
{
    Checkpoint ck;
    for (const auto& [name, s] : sv.signs) {
        Tensor t;
        t.dtype = DType::I8;
        t.shape = s.shape;
        t.data.resize(s.size());
        if (!s.values.empty()) std::memcpy(t.data.data(), s.values.data(), s.size());
        ck.tensors.emplace(name, std::move(t));
    }
    ck.metadata["kind"] = "sign_vector";
    return ck;
}

inline SignVector sign_vector_from_sidecar(const Checkpoint& ck)
{
    SignVector sv;
    for (const auto& [name, t] : ck.tensors) {
        if (t.dtype != DType::I8) {
            throw ValidationError("sign sidecar tensor '" + name + "' must be I8, got " +
                                  std::string(dtype_name(t.dtype)));
        }
        DenseTensor<std::int8_t> s{t.shape, std::vector<std::int8_t>(t.numel())};
        if (!s.values.empty()) std::memcpy(s.values.data(), t.data.data(), s.size());
        for (auto v : s.values) {
            if (v < -1 || v > 1) {
                throw ValidationError("sign sidecar tensor '" + name + "' holds value " +
                                      std::to_string(v) + " outside {-1,0,1}");
            }
        }
        sv.signs.emplace(name, std::move(s));
    }
    return sv;
}

} // namespace tensor_ties
