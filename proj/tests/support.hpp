#pragma once

#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "tensor_ties/tensor_ties.hpp"

namespace tt_test {

using namespace tensor_ties;

inline Tensor f32(Shape shape, const std::vector<float>& v)
{
    return Tensor::from_float32(DType::F32, std::move(shape), v, "test");
}

inline Tensor f32(const std::vector<float>& v)
{
    return f32({static_cast<std::int64_t>(v.size())}, v);
}

using Named = std::vector<std::pair<std::string, std::vector<float>>>;

inline Checkpoint ckpt(const Named& tensors)
{
    Checkpoint c;
    for (const auto& [name, v] : tensors) c.tensors[name] = f32(v);
    return c;
}

inline TaskVector tv(const Named& tensors)
{
    TaskVector t;
    for (const auto& [name, v] : tensors) {
        t.deltas[name] = {{static_cast<std::int64_t>(v.size())}, v};
    }
    return t;
}

inline std::vector<float> vals(const Checkpoint& c, const std::string& name)
{
    return c.at(name).to_float32();
}

inline std::vector<float> vals(const TaskVector& t, const std::string& name)
{
    return t.deltas.at(name).values;
}

/// Flattens a task vector in tensor-name order.
inline std::vector<float> flat(const TaskVector& t)
{
    std::vector<float> out;
    for (const auto& [name, d] : t.deltas) out.insert(out.end(), d.values.begin(), d.values.end());
    return out;
}

class TempDir {
public:
    TempDir()
    {
        std::string tmpl = (std::filesystem::temp_directory_path() / "tensor_ties_XXXXXX").string();
        path_ = ::mkdtemp(tmpl.data());
    }
    ~TempDir()
    {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline std::vector<float> normals(std::mt19937_64& rng, std::size_t n, float scale = 1.0f)
{
    std::normal_distribution<float> dist(0.0f, scale);
    std::vector<float> v(n);
    for (auto& x : v) x = dist(rng);
    return v;
}

/// Random base plus `n` fine-tuned checkpoints whose deltas are small enough
/// that ft - base recovers the delta exactly (|delta| <= |base|).
struct Family {
    Checkpoint base;
    std::vector<Checkpoint> models;
};

inline Family make_family(std::mt19937_64& rng, const std::vector<std::size_t>& sizes, std::size_t n,
                          float delta_scale = 0.01f)
{
    Family f;
    std::uniform_real_distribution<float> mag(0.5f, 2.0f);
    std::bernoulli_distribution neg(0.5);
    std::vector<std::vector<float>> base_vals;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        std::vector<float> b(sizes[i]);
        for (auto& x : b) x = neg(rng) ? -mag(rng) : mag(rng);
        f.base.tensors["layer" + std::to_string(i) + ".weight"] = f32(b);
        base_vals.push_back(std::move(b));
    }
    for (std::size_t t = 0; t < n; ++t) {
        Checkpoint m;
        for (std::size_t i = 0; i < sizes.size(); ++i) {
            auto d = normals(rng, sizes[i], delta_scale);
            for (std::size_t e = 0; e < d.size(); ++e) d[e] = base_vals[i][e] + d[e];
            m.tensors["layer" + std::to_string(i) + ".weight"] = f32(d);
        }
        f.models.push_back(std::move(m));
    }
    return f;
}

} // namespace tt_test
