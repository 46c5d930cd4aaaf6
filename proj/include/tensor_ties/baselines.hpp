#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tensor_ties/archive.hpp"
#include "tensor_ties/error.hpp"
#include "tensor_ties/parallel.hpp"
#include "tensor_ties/task_vector.hpp"

namespace tensor_ties {

namespace detail {

/// Decoded float32 views of one mergeable tensor across all models.
struct Stack {
    std::string name;
    const Tensor* first = nullptr; ///< dtype/shape template for the output
    std::vector<std::vector<float>> models;
};

inline std::vector<std::string> require_mergeable_set(std::span<const Checkpoint> models, const char* what)
{
    if (models.empty()) throw ValidationError(std::string(what) + ": no models given");
    auto report = validate_compatible(models);
    report.require_compatible();
    return report.mergeable();
}

/// Builds an output checkpoint from per-tensor float results. Carry-over
/// tensors and header metadata come from models[0]; float tensors keep
/// models[0]'s dtype.
template <class PerTensor>
Checkpoint merge_tensorwise(std::span<const Checkpoint> models, const std::vector<std::string>& names,
                            std::size_t threads, PerTensor&& per_tensor)
{
    Checkpoint out;
    out.metadata = models[0].metadata;
    std::vector<Tensor*> slots;
    for (const auto& [name, t] : models[0].tensors) {
        if (std::find(names.begin(), names.end(), name) == names.end()) {
            out.tensors.emplace(name, t);
        }
    }
    for (const auto& name : names) slots.push_back(&out.tensors[name]);

    parallel_for(names.size(), threads, [&](std::size_t i) {
        Stack s;
        s.name = names[i];
        s.first = &models[0].at(names[i]);
        for (const auto& m : models) {
            s.models.push_back(m.at(names[i]).to_float32());
            require_finite(s.models.back(), names[i], "model");
        }
        const std::vector<float> merged = per_tensor(s);
        *slots[i] = Tensor::from_float32(s.first->dtype, s.first->shape, merged, names[i]);
    });
    return out;
}

inline std::vector<float> mean_of(const Stack& s)
{
    const std::size_t n = s.models.size();
    std::vector<float> out(s.models[0].size());
    for (std::size_t e = 0; e < out.size(); ++e) {
        double acc = 0.0;
        for (std::size_t t = 0; t < n; ++t) acc += s.models[t][e];
        out[e] = static_cast<float>(acc / static_cast<double>(n));
    }
    return out;
}

} // namespace detail

/// Element-wise mean of the models, float64 accumulation in model order.
inline Checkpoint simple_average(std::span<const Checkpoint> models, std::size_t threads = 1)
{
    const auto names = detail::require_mergeable_set(models, "simple_average");
    return detail::merge_tensorwise(models, names, threads, detail::mean_of);
}

/// base + lambda * sum_t (model_t - base).
inline Checkpoint task_arithmetic(const Checkpoint& base, std::span<const Checkpoint> models, double lambda,
                                  std::size_t threads = 1)
{
    detail::require_lambda(lambda);
    if (models.empty()) throw ValidationError("task_arithmetic: no models given");
    std::vector<TaskVector> taus;
    for (std::size_t t = 0; t < models.size(); ++t) {
        try {
            taus.push_back(compute_task_vector(models[t], base, threads));
        } catch (const ValidationError& e) {
            throw ValidationError("model " + std::to_string(t) + ": " + e.what());
        }
    }
    const std::vector<double> ones(taus.size(), 1.0);
    return apply_task_vector(base, linear_combination(taus, ones, threads), lambda, threads);
}

struct FisherOptions {
    /// Guards the all-zero Fisher mass case; where sum_t F_t == 0 the element
    /// falls back to the unweighted mean.
    double epsilon = 1e-8;
    std::size_t threads = 1;
};

/// Per element: sum_t F_t * theta_t / sum_t F_t.
inline Checkpoint fisher_merge(std::span<const Checkpoint> models, std::span<const Checkpoint> fishers,
                               const FisherOptions& opts = {})
{
    const auto names = detail::require_mergeable_set(models, "fisher_merge");
    if (fishers.size() != models.size()) {
        throw ValidationError("fisher_merge: " + std::to_string(models.size()) + " models but " +
                              std::to_string(fishers.size()) + " Fisher sidecars");
    }
    if (!(opts.epsilon > 0.0) || !std::isfinite(opts.epsilon)) {
        throw ValidationError("fisher_merge: epsilon must be finite and > 0");
    }
    std::vector<std::vector<std::vector<float>>> diag(names.size());
    for (std::size_t i = 0; i < names.size(); ++i) {
        const auto& name = names[i];
        for (std::size_t t = 0; t < fishers.size(); ++t) {
            auto it = fishers[t].tensors.find(name);
            if (it == fishers[t].tensors.end()) {
                throw ValidationError("Fisher sidecar " + std::to_string(t) + " is missing tensor '" + name + "'");
            }
            if (it->second.shape != models[0].at(name).shape) {
                throw ValidationError("Fisher sidecar " + std::to_string(t) + " tensor '" + name + "' has shape " +
                                      shape_str(it->second.shape));
            }
            auto f = it->second.to_float32();
            for (float v : f) {
                if (!std::isfinite(v) || v < 0.0f) {
                    throw ValidationError("Fisher sidecar " + std::to_string(t) + " tensor '" + name +
                                          "' has negative or non-finite values");
                }
            }
            diag[i].push_back(std::move(f));
        }
    }
    for (std::size_t t = 0; t < fishers.size(); ++t) {
        for (const auto& [name, ten] : fishers[t].tensors) {
            if (std::find(names.begin(), names.end(), name) == names.end()) {
                throw ValidationError("Fisher sidecar " + std::to_string(t) + " has unexpected tensor '" + name + "'");
            }
        }
    }

    return detail::merge_tensorwise(models, names, opts.threads, [&](const detail::Stack& s) {
        const auto i = static_cast<std::size_t>(std::find(names.begin(), names.end(), s.name) - names.begin());
        const auto& F = diag[i];
        const std::size_t n = s.models.size();
        std::vector<float> out(s.models[0].size());
        for (std::size_t e = 0; e < out.size(); ++e) {
            double num = 0.0, den = 0.0, plain = 0.0;
            for (std::size_t t = 0; t < n; ++t) {
                num += static_cast<double>(F[t][e]) * s.models[t][e];
                den += F[t][e];
                plain += s.models[t][e];
            }
            out[e] = den == 0.0 ? static_cast<float>(plain / static_cast<double>(n))
                                : static_cast<float>(num / den);
        }
        return out;
    });
}

// ---------------------------------------------------------------------------
// RegMean

struct RegMeanOptions {
    double alpha = 0.1; ///< shrinkage of off-diagonal Gram entries, in [0, 1]
    /// Ridge added to the summed Gram; default is 1e-6 x its mean diagonal.
    std::optional<double> ridge;
    std::size_t threads = 1;
};

struct RegMeanLayer {
    std::string gram_name;
    std::string tensor_name;
    std::string path; ///< "solved" or "singular-fallback"
    double ridge = 0.0;
    double relative_residual = 0.0;
};

struct RegMeanOutput {
    Checkpoint merged;
    std::vector<RegMeanLayer> layers;
    std::vector<std::string> averaged; ///< tensors merged by plain averaging
};

namespace detail {

inline Eigen::MatrixXd to_matrix(const Tensor& t, const std::string& what)
{
    if (t.shape.size() != 2 || t.shape[0] != t.shape[1]) {
        throw ValidationError(what + " is not a square matrix (shape " + shape_str(t.shape) + ")");
    }
    const auto dim = static_cast<Eigen::Index>(t.shape[0]);
    const auto v = t.to_float32();
    Eigen::MatrixXd m(dim, dim);
    double scale = 0.0;
    for (Eigen::Index r = 0; r < dim; ++r) {
        for (Eigen::Index c = 0; c < dim; ++c) {
            const float x = v[static_cast<std::size_t>(r * dim + c)];
            if (!std::isfinite(x)) throw ValidationError(what + " has non-finite values");
            m(r, c) = x;
            scale = std::max(scale, std::fabs(static_cast<double>(x)));
        }
    }
    if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-5 * scale) {
        throw ValidationError(what + " is not symmetric");
    }
    return m;
}

/// Maps a Gram key to the weight it conditions: the tensor of the same name,
/// else "<name>.weight".
inline std::string gram_target(const std::string& key, const std::vector<std::string>& mergeable)
{
    for (const auto& cand : {key, key + ".weight"}) {
        if (std::find(mergeable.begin(), mergeable.end(), cand) != mergeable.end()) return cand;
    }
    throw ValidationError("Gram matrix '" + key + "' does not match any mergeable tensor");
}

} // namespace detail

/// Solves (sum_t G~_t + ridge I) W = sum_t G~_t W_t per layer that has Gram
/// matrices, with G~ = (1 - alpha) G + alpha diag(G). Weights are 2-D; the
/// axis equal to the Gram dimension is the input axis (the last axis when
/// both match, as in [out, in] linear layers). Other tensors are averaged.
inline RegMeanOutput regmean_merge(std::span<const Checkpoint> models, std::span<const Checkpoint> grams,
                                   const RegMeanOptions& opts = {})
{
    const auto names = detail::require_mergeable_set(models, "regmean_merge");
    if (grams.size() != models.size()) {
        throw ValidationError("regmean_merge: " + std::to_string(models.size()) + " models but " +
                              std::to_string(grams.size()) + " Gram sidecars");
    }
    if (!(opts.alpha >= 0.0 && opts.alpha <= 1.0)) throw ValidationError("regmean_merge: alpha must be in [0, 1]");
    if (opts.ridge && !(*opts.ridge >= 0.0 && std::isfinite(*opts.ridge))) {
        throw ValidationError("regmean_merge: ridge must be finite and >= 0");
    }

    struct Job {
        std::string key, tensor;
        bool transposed = false; ///< weight stored as [out, in]
        std::vector<Eigen::MatrixXd> grams;
    };
    std::vector<Job> jobs;
    for (const auto& [key, g0] : grams[0].tensors) {
        Job job;
        job.key = key;
        job.tensor = detail::gram_target(key, names);
        const Tensor& w = models[0].at(job.tensor);
        if (w.shape.size() != 2) {
            throw ValidationError("tensor '" + job.tensor + "' paired with a Gram matrix is not 2-D");
        }
        for (std::size_t t = 0; t < grams.size(); ++t) {
            auto it = grams[t].tensors.find(key);
            if (it == grams[t].tensors.end()) {
                throw ValidationError("Gram sidecar " + std::to_string(t) + " is missing layer '" + key + "'");
            }
            job.grams.push_back(detail::to_matrix(it->second, "Gram '" + key + "' of model " + std::to_string(t)));
        }
        const auto dim = job.grams[0].rows();
        for (const auto& g : job.grams) {
            if (g.rows() != dim) throw ValidationError("Gram '" + key + "' dimension differs across models");
        }
        if (w.shape[1] == dim) {
            job.transposed = true;
        } else if (w.shape[0] == dim) {
            job.transposed = false;
        } else {
            throw ValidationError("Gram '" + key + "' has dimension " + std::to_string(dim) +
                                  " but tensor '" + job.tensor + "' has shape " + shape_str(w.shape));
        }
        jobs.push_back(std::move(job));
    }
    for (std::size_t t = 1; t < grams.size(); ++t) {
        for (const auto& kv : grams[t].tensors) {
            if (!grams[0].contains(kv.first)) {
                throw ValidationError("Gram sidecar " + std::to_string(t) + " has extra layer '" + kv.first + "'");
            }
        }
    }

    RegMeanOutput result;
    result.layers.resize(jobs.size());
    std::map<std::string, std::size_t> job_of;
    for (std::size_t j = 0; j < jobs.size(); ++j) job_of[jobs[j].tensor] = j;
    for (const auto& name : names)
        if (!job_of.count(name)) result.averaged.push_back(name);

    result.merged = detail::merge_tensorwise(models, names, opts.threads, [&](const detail::Stack& s) {
        auto it = job_of.find(s.name);
        if (it == job_of.end()) return detail::mean_of(s);
        const Job& job = jobs[it->second];
        RegMeanLayer& layer = result.layers[it->second];
        layer.gram_name = job.key;
        layer.tensor_name = job.tensor;

        const auto rows = s.first->shape[0], cols = s.first->shape[1];
        const Eigen::Index dim = job.grams[0].rows();
        const Eigen::Index width = job.transposed ? rows : cols;
        auto as_input_major = [&](const std::vector<float>& v) {
            Eigen::MatrixXd x(dim, width);
            for (Eigen::Index r = 0; r < rows; ++r)
                for (Eigen::Index c = 0; c < cols; ++c) {
                    const double val = v[static_cast<std::size_t>(r * cols + c)];
                    if (job.transposed) x(c, r) = val;
                    else x(r, c) = val;
                }
            return x;
        };

        Eigen::MatrixXd lhs = Eigen::MatrixXd::Zero(dim, dim);
        Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(dim, width);
        for (std::size_t t = 0; t < s.models.size(); ++t) {
            Eigen::MatrixXd g = (1.0 - opts.alpha) * job.grams[t];
            g.diagonal() = job.grams[t].diagonal();
            lhs += g;
            rhs += g * as_input_major(s.models[t]);
        }
        layer.ridge = opts.ridge ? *opts.ridge : (dim ? 1e-6 * lhs.diagonal().mean() : 0.0);
        lhs.diagonal().array() += layer.ridge;

        Eigen::LDLT<Eigen::MatrixXd> ldlt(lhs);
        Eigen::MatrixXd sol = ldlt.solve(rhs);
        const double rhs_norm = rhs.size() ? rhs.cwiseAbs().maxCoeff() : 0.0;
        const double res = sol.size() ? (lhs * sol - rhs).cwiseAbs().maxCoeff() : 0.0;
        const auto& pivots = ldlt.vectorD();
        const double pivot_max = pivots.size() ? pivots.cwiseAbs().maxCoeff() : 0.0;
        const bool definite = pivots.size() == 0 || (pivot_max > 0.0 && pivots.minCoeff() > 1e-12 * pivot_max);
        const bool ok = ldlt.info() == Eigen::Success && definite && sol.allFinite() && res <= 1e-4 * rhs_norm;
        layer.relative_residual = rhs_norm > 0.0 ? res / rhs_norm : res;
        if (!ok) {
            layer.path = "singular-fallback";
            return detail::mean_of(s);
        }
        layer.path = "solved";
        std::vector<float> out(static_cast<std::size_t>(rows * cols));
        for (Eigen::Index r = 0; r < rows; ++r)
            for (Eigen::Index c = 0; c < cols; ++c)
                out[static_cast<std::size_t>(r * cols + c)] =
                    static_cast<float>(job.transposed ? sol(c, r) : sol(r, c));
        return out;
    });
    return result;
}

} // namespace tensor_ties
