#include <gtest/gtest.h>

#include "support.hpp"

using namespace tt_test;

namespace {

Checkpoint gram(const std::string& name, std::int64_t dim, const std::vector<float>& v)
{
    Checkpoint c;
    c.tensors[name] = f32({dim, dim}, v);
    return c;
}

float max_abs_diff(const Checkpoint& a, const Checkpoint& b)
{
    float m = 0.0f;
    for (const auto& [name, t] : a.tensors) {
        const auto x = t.to_float32(), y = vals(b, name);
        for (std::size_t e = 0; e < x.size(); ++e) m = std::max(m, std::fabs(x[e] - y[e]));
    }
    return m;
}

TEST(SimpleAverage, Basics)
{
    const std::vector<Checkpoint> two{ckpt({{"w", {2, 0}}}), ckpt({{"w", {0, 4}}})};
    EXPECT_EQ(vals(simple_average(two), "w"), (std::vector<float>{1, 2}));
    const auto one = ckpt({{"w", {1.5f, -3}}});
    const std::vector<Checkpoint> copies(3, one);
    EXPECT_EQ(simple_average(copies), one);
    EXPECT_THROW(simple_average({}), ValidationError);
}

TEST(SimpleAverage, CarriesOverFromFirstModel)
{
    auto a = ckpt({{"w", {2}}});
    auto b = ckpt({{"w", {4}}});
    a.tensors["step"] = Tensor{DType::I64, {}, std::vector<std::byte>(8, std::byte{1})};
    b.tensors["step"] = Tensor{DType::I64, {}, std::vector<std::byte>(8, std::byte{2})};
    a.metadata["origin"] = "a";
    const std::vector<Checkpoint> set{a, b};
    const auto out = simple_average(set);
    EXPECT_EQ(out.at("step"), a.at("step"));
    EXPECT_EQ(out.metadata.at("origin"), "a");
    EXPECT_EQ(vals(out, "w")[0], 3.0f);
}

TEST(SimpleAverage, RejectsMismatch)
{
    const std::vector<Checkpoint> set{ckpt({{"w", {1, 2}}}), ckpt({{"w", {1}}})};
    try {
        simple_average(set);
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("'w'"), std::string::npos) << e.what();
    }
}

TEST(TaskArithmetic, Basics)
{
    const auto base = ckpt({{"w", {1}}});
    const std::vector<Checkpoint> models{ckpt({{"w", {2}}}), ckpt({{"w", {0}}})};
    EXPECT_EQ(vals(task_arithmetic(base, models, 0.5), "w"), (std::vector<float>{1}));
    std::mt19937_64 rng(2);
    const auto fam = make_family(rng, {300}, 1);
    EXPECT_EQ(task_arithmetic(fam.base, fam.models, 1.0), fam.models[0]);
}

TEST(Fisher, WeightsByFisher)
{
    const std::vector<Checkpoint> models{ckpt({{"w", {10, 2}}}), ckpt({{"w", {0, 4}}})};
    const std::vector<Checkpoint> fishers{ckpt({{"w", {3, 0}}}), ckpt({{"w", {1, 0}}})};
    EXPECT_EQ(vals(fisher_merge(models, fishers), "w"), (std::vector<float>{7.5f, 3}));
}

TEST(Fisher, UniformWeightsReduceToAverage)
{
    std::mt19937_64 rng(8);
    std::vector<Checkpoint> models, fishers;
    for (int t = 0; t < 3; ++t) {
        models.push_back(ckpt({{"a", normals(rng, 500)}, {"b", normals(rng, 20)}}));
        fishers.push_back(ckpt({{"a", std::vector<float>(500, 1.0f)}, {"b", std::vector<float>(20, 1.0f)}}));
    }
    EXPECT_LE(max_abs_diff(fisher_merge(models, fishers), simple_average(models)), 1e-6f);
}

TEST(Fisher, ProportionalWeightsGiveWeightedMean)
{
    std::mt19937_64 rng(17);
    const std::vector<float> c{0.5f, 2.0f, 3.5f};
    std::vector<Checkpoint> models, fishers;
    for (float w : c) {
        models.push_back(ckpt({{"w", normals(rng, 1000)}}));
        fishers.push_back(ckpt({{"w", std::vector<float>(1000, w)}}));
    }
    const auto got = vals(fisher_merge(models, fishers), "w");
    for (std::size_t e = 0; e < got.size(); ++e) {
        double want = 0.0;
        for (std::size_t t = 0; t < c.size(); ++t) want += c[t] / 6.0 * vals(models[t], "w")[e];
        ASSERT_NEAR(got[e], want, 1e-6);
    }
}

TEST(Fisher, ZeroMassFallsBackToMean)
{
    const std::vector<Checkpoint> models{ckpt({{"w", {2}}}), ckpt({{"w", {4}}})};
    const std::vector<Checkpoint> fishers{ckpt({{"w", {0}}}), ckpt({{"w", {0}}})};
    EXPECT_EQ(vals(fisher_merge(models, fishers), "w"), (std::vector<float>{3}));
}

TEST(Baselines, SingleModelIsReturned)
{
    std::mt19937_64 rng(18);
    const auto fam = make_family(rng, {120, 30}, 1);
    const auto& m = fam.models[0];
    const std::span<const Checkpoint> one(fam.models);
    EXPECT_EQ(simple_average(one), m);
    EXPECT_EQ(task_arithmetic(fam.base, one, 1.0), m);
    Checkpoint f;
    for (const auto& [name, t] : m.tensors) f.tensors[name] = f32(t.shape, normals(rng, t.numel(), 1.0f));
    for (auto& [name, t] : f.tensors) {
        auto v = t.to_float32();
        for (auto& x : v) x = std::fabs(x) + 0.1f;
        t = f32(t.shape, v);
    }
    const std::vector<Checkpoint> fs{f};
    EXPECT_EQ(fisher_merge(one, fs), m);
    EXPECT_EQ(regmean_merge(one, std::vector<Checkpoint>{Checkpoint{}}).merged, m);
}

TEST(Fisher, RejectsBadSidecars)
{
    const std::vector<Checkpoint> models{ckpt({{"w", {1}}}), ckpt({{"w", {2}}})};
    const std::vector<Checkpoint> one{ckpt({{"w", {1}}})};
    EXPECT_THROW(fisher_merge(models, one), ValidationError);
    const std::vector<Checkpoint> negative{ckpt({{"w", {1}}}), ckpt({{"w", {-1}}})};
    EXPECT_THROW(fisher_merge(models, negative), ValidationError);
    const std::vector<Checkpoint> shape{ckpt({{"w", {1}}}), ckpt({{"w", {1, 1}}})};
    EXPECT_THROW(fisher_merge(models, shape), ValidationError);
    const std::vector<Checkpoint> ok{ckpt({{"w", {1}}}), ckpt({{"w", {1}}})};
    EXPECT_THROW(fisher_merge(models, ok, {0.0, 1}), ValidationError);
}

TEST(RegMean, TwoByTwoClosedForm)
{
    Checkpoint w1, w2;
    w1.tensors["fc.weight"] = f32({2, 1}, {1, 0});
    w2.tensors["fc.weight"] = f32({2, 1}, {0, 1});
    const std::vector<Checkpoint> models{w1, w2};
    const std::vector<Checkpoint> grams{gram("fc", 2, {4, 0, 0, 1}), gram("fc", 2, {1, 0, 0, 1})};
    const auto r = regmean_merge(models, grams, {0.0, 0.0, 1});
    const auto w = vals(r.merged, "fc.weight");
    EXPECT_NEAR(w[0], 0.8f, 1e-6f);
    EXPECT_NEAR(w[1], 0.5f, 1e-6f);
    ASSERT_EQ(r.layers.size(), 1u);
    EXPECT_EQ(r.layers[0].path, "solved");
    EXPECT_EQ(r.layers[0].tensor_name, "fc.weight");
}

TEST(RegMean, OutInLayoutUsesLastAxis)
{
    Checkpoint w1, w2;
    w1.tensors["fc"] = f32({1, 2}, {1, 0});
    w2.tensors["fc"] = f32({1, 2}, {0, 1});
    const std::vector<Checkpoint> models{w1, w2};
    const std::vector<Checkpoint> grams{gram("fc", 2, {4, 0, 0, 1}), gram("fc", 2, {1, 0, 0, 1})};
    const auto w = vals(regmean_merge(models, grams, {0.0, 0.0, 1}).merged, "fc");
    EXPECT_NEAR(w[0], 0.8f, 1e-6f);
    EXPECT_NEAR(w[1], 0.5f, 1e-6f);
}

TEST(RegMean, IdentityGramsReduceToAverage)
{
    std::mt19937_64 rng(9);
    std::vector<Checkpoint> models, grams;
    std::vector<float> eye(16 * 16, 0.0f);
    for (int i = 0; i < 16; ++i) eye[static_cast<std::size_t>(i * 17)] = 1.0f;
    for (int t = 0; t < 3; ++t) {
        Checkpoint m;
        m.tensors["fc.weight"] = f32({8, 16}, normals(rng, 128));
        m.tensors["fc.bias"] = f32({8}, normals(rng, 8));
        models.push_back(m);
        grams.push_back(gram("fc", 16, eye));
    }
    const auto r = regmean_merge(models, grams, {0.0, 0.0, 1});
    EXPECT_LE(max_abs_diff(r.merged, simple_average(models)), 1e-6f);
    EXPECT_EQ(r.averaged, (std::vector<std::string>{"fc.bias"}));
}

TEST(RegMean, SingleModelIsRecovered)
{
    std::mt19937_64 rng(10);
    const auto x = normals(rng, 40 * 6);
    std::vector<float> g(36, 0.0f);
    for (int a = 0; a < 6; ++a)
        for (int b = 0; b < 6; ++b)
            for (int r = 0; r < 40; ++r) g[static_cast<std::size_t>(a * 6 + b)] += x[r * 6 + a] * x[r * 6 + b];
    Checkpoint m;
    m.tensors["fc.weight"] = f32({3, 6}, normals(rng, 18));
    const std::vector<Checkpoint> models{m};
    const std::vector<Checkpoint> grams{gram("fc.weight", 6, g)};
    EXPECT_LE(max_abs_diff(regmean_merge(models, grams, {0.1, 0.0, 1}).merged, m), 1e-6f);
    // The default ridge shifts the solution by roughly ridge / smallest eigenvalue.
    EXPECT_LE(max_abs_diff(regmean_merge(models, grams).merged, m), 1e-4f);
}

TEST(RegMean, SingularGramFallsBackToAverage)
{
    Checkpoint w1, w2;
    w1.tensors["fc"] = f32({2, 2}, {1, 2, 3, 4});
    w2.tensors["fc"] = f32({2, 2}, {3, 2, 1, 0});
    const std::vector<Checkpoint> models{w1, w2};
    const std::vector<Checkpoint> grams{gram("fc", 2, {0, 0, 0, 0}), gram("fc", 2, {0, 0, 0, 0})};
    const auto r = regmean_merge(models, grams, {0.0, 0.0, 1});
    EXPECT_EQ(r.layers[0].path, "singular-fallback");
    EXPECT_EQ(vals(r.merged, "fc"), (std::vector<float>{2, 2, 2, 2}));
}

TEST(RegMean, RejectsBadGrams)
{
    Checkpoint w;
    w.tensors["fc"] = f32({2, 3}, {1, 2, 3, 4, 5, 6});
    const std::vector<Checkpoint> models{w, w};
    const std::vector<Checkpoint> asym{gram("fc", 2, {1, 5, 0, 1}), gram("fc", 2, {1, 0, 0, 1})};
    EXPECT_THROW(regmean_merge(models, asym), ValidationError);
    const std::vector<Checkpoint> unknown{gram("nope", 2, {1, 0, 0, 1}), gram("nope", 2, {1, 0, 0, 1})};
    EXPECT_THROW(regmean_merge(models, unknown), ValidationError);
    const std::vector<Checkpoint> wrong_dim{gram("fc", 4, std::vector<float>(16)), gram("fc", 4, std::vector<float>(16))};
    EXPECT_THROW(regmean_merge(models, wrong_dim), ValidationError);
    const std::vector<Checkpoint> ok{gram("fc", 2, {1, 0, 0, 1}), gram("fc", 2, {1, 0, 0, 1})};
    EXPECT_THROW(regmean_merge(models, ok, {1.5, std::nullopt, 1}), ValidationError);
    EXPECT_THROW(regmean_merge(models, std::span(ok).first(1)), ValidationError);
}

} // namespace
