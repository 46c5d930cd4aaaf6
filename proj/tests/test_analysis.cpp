#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace tt_test;

namespace {

TEST(Rng, SplitmixReferenceValues)
{
    // First outputs of the reference splitmix64 stream seeded with 0.
    EXPECT_EQ(rng::splitmix64(0), 0xe220a8397b1dcdafull);
    EXPECT_EQ(rng::splitmix64(0x9e3779b97f4a7c15ull), 0x6e789e6aa1b965f4ull);
    EXPECT_EQ(rng::draw(1, 2, 3), rng::draw(1, 2, 3));
    EXPECT_NE(rng::draw(1, 2, 3), rng::draw(1, 2, 4));
    EXPECT_NE(rng::draw(1, 2, 3), rng::draw(1, 3, 3));
}

TEST(Rng, PortableLogTracksLibm)
{
    for (double x : {1e-300, 1e-10, 0.001, 0.3, 0.7071, 1.0, 1.5, 2.0, 10.0, 12345.678, 1e300}) {
        EXPECT_NEAR(rng::portable_log(x), std::log(x), 4e-16 * std::max(1.0, std::fabs(std::log(x)))) << x;
    }
    EXPECT_TRUE(std::isinf(rng::portable_log(0.0)));
}

TEST(Rng, NormalMoments)
{
    double sum = 0.0, sumsq = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double x = rng::normal(42, 7, static_cast<std::uint64_t>(i));
        sum += x;
        sumsq += x * x;
    }
    EXPECT_NEAR(sum / n, 0.0, 0.01);
    EXPECT_NEAR(sumsq / n, 1.0, 0.015);
}

TEST(Conflict, DefinitionExamples)
{
    const std::vector<TaskVector> a{tv({{"w", {1, -1, 0}}}), tv({{"w", {1, 1, 0}}})};
    EXPECT_DOUBLE_EQ(sign_conflict_fraction(a, 100), 1.0 / 3.0);
    const std::vector<TaskVector> same{tv({{"w", {1, -1, 2}}}), tv({{"w", {1, -1, 2}}})};
    EXPECT_EQ(sign_conflict_fraction(same, 100), 0.0);
    const std::vector<TaskVector> opposite{tv({{"w", {1, -1, 2}}}), tv({{"w", {-1, 1, -2}}})};
    EXPECT_EQ(sign_conflict_fraction(opposite, 100), 1.0);
    EXPECT_THROW(sign_conflict_fraction(std::span(a).first(1), 100), ValidationError);
}

TEST(Conflict, InvariantToPositiveRescaling)
{
    std::mt19937_64 rng(4);
    std::vector<TaskVector> taus;
    for (int t = 0; t < 4; ++t) taus.push_back(tv({{"w", normals(rng, 2000)}}));
    const double ref = sign_conflict_fraction(taus, 20);
    for (auto& x : taus[2].deltas["w"].values) x *= 8.0f;
    EXPECT_EQ(sign_conflict_fraction(taus, 20), ref);
}

TEST(ConflictCurve, TwoVectorsGiveOnePoint)
{
    std::mt19937_64 rng(12);
    const std::vector<TaskVector> taus{tv({{"w", normals(rng, 500)}}), tv({{"w", normals(rng, 500)}})};
    const auto c = conflict_curve(taus, 20);
    ASSERT_EQ(c.points.size(), 1u);
    EXPECT_EQ(c.points[0].num_models, 2u);
    EXPECT_EQ(c.points[0].conflict_fraction, sign_conflict_fraction(taus, 20));
}

TEST(ConflictCurve, DisjointSupportsNeverConflict)
{
    std::vector<TaskVector> taus;
    for (int t = 0; t < 5; ++t) {
        std::vector<float> v(50, 0.0f);
        for (int e = t * 10; e < t * 10 + 10; ++e) v[static_cast<std::size_t>(e)] = (e % 2 ? -1.0f : 1.0f) * (e + 1);
        taus.push_back(tv({{"w", v}}));
    }
    const std::vector<double> grid{10, 50, 100};
    const auto c = conflict_curve(taus, 100, 10, 0, grid);
    ASSERT_EQ(c.points.size(), 4u);
    for (const auto& p : c.points) EXPECT_EQ(p.conflict_fraction, 0.0);
    ASSERT_EQ(c.k_sweep.size(), 3u);
    for (const auto& p : c.k_sweep) EXPECT_EQ(p.conflict_fraction, 0.0);
}

TEST(ConflictCurve, SubsetCountAndSeed)
{
    std::mt19937_64 rng(13);
    std::vector<TaskVector> taus;
    for (int t = 0; t < 6; ++t) taus.push_back(tv({{"w", normals(rng, 300)}}));
    const auto a = conflict_curve(taus, 20, 10, 1);
    ASSERT_EQ(a.points.size(), 5u);
    EXPECT_EQ(a.points[0].subsets, 10u); // C(6,2) = 15 > 10
    EXPECT_EQ(a.points[3].subsets, 6u);  // C(6,5) = 6
    EXPECT_EQ(a.points[4].subsets, 1u);
    EXPECT_EQ(a.to_json(), conflict_curve(taus, 20, 10, 1).to_json());
    EXPECT_NE(a.to_csv().find("models,2,20,"), std::string::npos);
}

TEST(Interference, PlainMeanAndDisjointExamples)
{
    const std::vector<TaskVector> taus{tv({{"w", {4, 0}}}), tv({{"w", {0, 0}}})};
    const auto plain = interference_stats(taus, 100, InterferenceMethod::PlainMean);
    EXPECT_EQ(plain.by_influence_count.at(1).count, 1u);
    EXPECT_EQ(plain.by_influence_count.at(1).mean_abs, 2.0);
    EXPECT_EQ(plain.by_influence_count.at(0).count, 1u);
    EXPECT_EQ(plain.by_influence_count.at(0).mean_abs, 0.0);
    const auto disjoint = interference_stats(taus, 100, InterferenceMethod::TrimThenDisjoint);
    EXPECT_EQ(disjoint.by_influence_count.at(1).mean_abs, 4.0);
    EXPECT_EQ(disjoint.by_agreement_bin.at("1.0").count, 1u);
    EXPECT_EQ(disjoint.by_agreement_bin.at("undefined").count, 1u);
}

TEST(Interference, AgreementBins)
{
    EXPECT_EQ(agreement_bin(0, 0), "undefined");
    EXPECT_EQ(agreement_bin(1, 1), "[0.5,0.6)");
    EXPECT_EQ(agreement_bin(3, 2), "[0.6,0.7)");
    EXPECT_EQ(agreement_bin(2, 5), "[0.7,0.8)");
    EXPECT_EQ(agreement_bin(4, 1), "[0.8,0.9)");
    EXPECT_EQ(agreement_bin(9, 1), "[0.9,1.0)");
    EXPECT_EQ(agreement_bin(0, 3), "1.0");
}

TEST(Interference, GroupsPartitionParameters)
{
    std::mt19937_64 rng(14);
    std::vector<TaskVector> taus;
    for (int t = 0; t < 5; ++t) taus.push_back(tv({{"a", normals(rng, 700)}, {"b", normals(rng, 301)}}));
    for (auto method : {InterferenceMethod::PlainMean, InterferenceMethod::TrimThenDisjoint,
                        InterferenceMethod::ElectThenDisjoint, InterferenceMethod::Ties}) {
        const auto s = interference_stats(taus, 20, method);
        std::size_t by_count = 0, by_bin = 0;
        for (const auto& [k, g] : s.by_influence_count) by_count += g.count;
        for (const auto& [k, g] : s.by_agreement_bin) by_bin += g.count;
        EXPECT_EQ(by_count, 1001u);
        EXPECT_EQ(by_bin, 1001u);
        EXPECT_EQ(s.to_json()["method"], std::string(interference_method_name(method)));
    }
}

TEST(Interference, FullAgreementLandsInTopBin)
{
    std::mt19937_64 rng(15);
    std::vector<TaskVector> taus;
    for (int t = 0; t < 3; ++t) {
        auto v = normals(rng, 200);
        for (auto& x : v) x = std::fabs(x) + 0.01f;
        taus.push_back(tv({{"w", v}}));
    }
    const auto s = interference_stats(taus, 100, InterferenceMethod::Ties);
    for (const auto& [bin, g] : s.by_agreement_bin) EXPECT_EQ(g.count, bin == "1.0" ? 200u : 0u) << bin;

    // With k = 100 and positive vectors, ties and plain mean agree.
    const auto plain = interference_stats(taus, 100, InterferenceMethod::PlainMean);
    EXPECT_NEAR(plain.by_influence_count.at(3).mean_abs, s.by_influence_count.at(3).mean_abs, 1e-6);
}

TEST(TrimEmit, WritesOneCheckpointPerK)
{
    std::mt19937_64 rng(16);
    const auto fam = make_family(rng, {400, 100}, 1);
    TempDir dir;
    const std::vector<double> grid{100, 20};
    const auto paths = emit_trimmed_checkpoints(fam.base, fam.models[0], grid, dir.path());
    ASSERT_EQ(paths.size(), 2u);
    EXPECT_EQ(paths[0].filename(), "trimmed_k100.safetensors");
    EXPECT_EQ(read_checkpoint(paths[0]), fam.models[0]);
    const auto trimmed = read_checkpoint(paths[1]);
    std::size_t changed = 0;
    for (const auto& [name, t] : fam.base.tensors) {
        const auto b = t.to_float32(), x = vals(trimmed, name);
        for (std::size_t e = 0; e < b.size(); ++e) changed += b[e] != x[e];
    }
    EXPECT_EQ(changed, 100u);
    EXPECT_TRUE(emit_trimmed_checkpoints(fam.base, fam.models[0], {}, dir.path()).empty());
}

TEST(Synthetic, DeterministicAndShaped)
{
    SyntheticSpec spec;
    spec.d = 1000;
    spec.n = 4;
    spec.num_tensors = 3;
    spec.seed = 9;
    const auto a = generate_synthetic(spec);
    const auto b = generate_synthetic(spec, 3);
    ASSERT_EQ(a.size(), 4u);
    for (std::size_t t = 0; t < a.size(); ++t) {
        EXPECT_EQ(a[t].deltas, b[t].deltas);
        EXPECT_EQ(a[t].size(), 1000u);
        const auto v = flat(a[t]);
        EXPECT_EQ(static_cast<std::size_t>(std::count_if(v.begin(), v.end(), [](float x) { return x != 0.0f; })),
                  200u);
    }
    EXPECT_EQ(a[0].deltas.begin()->first, "synthetic.000");
    EXPECT_TRUE(a[0].base_fingerprint.empty());
    spec.seed = 10;
    EXPECT_NE(generate_synthetic(spec)[0].deltas, a[0].deltas);
}

// Expected values from tests/oracles/synthetic.py, an independent Python
// implementation of the generator.
TEST(Synthetic, MatchesReferenceImplementation)
{
    SyntheticSpec spec;
    spec.d = 8;
    spec.n = 2;
    spec.density = 0.5;
    spec.seed = 123;
    auto taus = generate_synthetic(spec);
    EXPECT_EQ(flat(taus[0]),
              (std::vector<float>{-0.85018003f, 0, 1.74044871f, 0, -0.148913532f, 0.587976158f, 0, 0}));
    EXPECT_EQ(flat(taus[1]), (std::vector<float>{-1.63931608f, -2.07527423f, 0, 0, 0, 0.616567969f, 0, -1.06026983f}));

    spec.d = 6;
    spec.n = 3;
    spec.density = 1.0;
    spec.sign_agreement = 0.5;
    spec.magnitude_scale = 2.5;
    spec.seed = 7;
    spec.num_tensors = 2;
    taus = generate_synthetic(spec);
    EXPECT_EQ(flat(taus[0]),
              (std::vector<float>{-1.1223582f, 3.70640826f, 3.7646544f, 0.612900734f, 1.27732444f, -0.0533723757f}));
    EXPECT_EQ(flat(taus[1]),
              (std::vector<float>{3.18047714f, -0.505656123f, -3.38799834f, 0.809931099f, -1.03949618f, 2.16614437f}));
    EXPECT_EQ(flat(taus[2]),
              (std::vector<float>{0.447080493f, 3.85816097f, 5.10638905f, 0.0636959746f, -0.720402062f, -0.393005639f}));
}

TEST(Synthetic, FullAgreementHasNoConflicts)
{
    SyntheticSpec spec;
    spec.d = 5000;
    spec.n = 4;
    spec.density = 1.0;
    spec.sign_agreement = 1.0;
    EXPECT_EQ(sign_conflict_fraction(generate_synthetic(spec), 100), 0.0);
}

TEST(Synthetic, HalfAgreementConflictRate)
{
    SyntheticSpec spec;
    spec.d = 100000;
    spec.n = 2;
    spec.density = 1.0;
    spec.sign_agreement = 0.5;
    // Each position conflicts with probability 1/2; 3 sigma over 1e5 draws is under 0.005.
    EXPECT_NEAR(sign_conflict_fraction(generate_synthetic(spec), 100), 0.5, 0.02);
}

TEST(Synthetic, RejectsBadSpec)
{
    SyntheticSpec spec;
    spec.density = 0;
    EXPECT_THROW(generate_synthetic(spec), ValidationError);
    spec = {};
    spec.sign_agreement = 0.2;
    EXPECT_THROW(generate_synthetic(spec), ValidationError);
    spec = {};
    spec.num_tensors = 0;
    EXPECT_THROW(generate_synthetic(spec), ValidationError);
}

} // namespace
