#include <cmath>
#include <set>

#include "doctest.h"
#include "forgetdissect/error.hpp"
#include "forgetdissect/pda.hpp"
#include "forgetdissect/store.hpp"
#include "test_util.hpp"

using namespace forgetdissect;
using namespace forgetdissect::pda;

namespace {

std::vector<Image> constant_donors(int n, int size, float value) {
    return std::vector<Image>(static_cast<std::size_t>(n), Image(size, size, 3, value));
}

std::vector<Image> random_donors(Rng& rng, int n, int size) {
    std::vector<Image> out;
    for (int i = 0; i < n; ++i) out.push_back(testutil::random_image(rng, size, size));
    return out;
}

/// Linear in one pixel of channel 0.
Probe one_pixel(const Image& img, int r, int c) {
    Probe p;
    p.hidden = Eigen::VectorXd::Constant(1, 3.0 * img.at(r, c, 0));
    return p;
}

}  // namespace

TEST_SUITE("pda") {

TEST_CASE("a constant model has zero relevance under every sampler") {
    Rng rng(3);
    const auto image = testutil::random_image(rng, 12, 12);
    const auto donors = random_donors(rng, 6, 12);
    FunctionProbe probe(
        [](const Image&) {
            Probe p;
            p.hidden = Eigen::VectorXd::Constant(2, 0.7);
            p.class_probs = Eigen::Vector3d(0.2, 0.3, 0.5);
            return p;
        },
        image);
    for (auto kind : {SamplerKind::Marginal, SamplerKind::Conditional}) {
        const auto sampler = make_sampler(kind, donors, 5);
        PdaParams params;
        params.sampler = kind;
        params.seed = 4;
        const auto rel = relevance_all(probe, image, params, *sampler, 100);
        double worst = 0.0;
        for (const auto* maps : {&rel.hidden, &rel.classes}) {
            for (const auto& m : *maps) {
                for (double v : m.data) worst = std::max(worst, std::abs(v));
            }
        }
        CHECK(worst < 1e-9);
    }
}

TEST_CASE("single sensitive pixel: support and values match the exhaustive window oracle") {
    const int size = 8, k = 3, pr = 2, pc = 5;
    Rng rng(9);
    auto image = testutil::random_image(rng, size, size);
    image.at(pr, pc, 0) = 0.9f;
    const auto donors = constant_donors(3, size, 0.1f);
    MarginalSampler sampler(donors);
    FunctionProbe probe([&](const Image& img) { return one_pixel(img, pr, pc); }, image);
    PdaParams params;
    params.window = k;
    params.num_samples = 2;
    params.seed = 1;
    const auto rel = relevance_all(probe, image, params, sampler, 1);

    // Every valid window, imputed directly and evaluated on the full image.
    ScoreGrid sum(size, size, 1, 0.0), count(size, size, 1, 0.0);
    std::set<int> coverage;
    int windows = 0;
    for (int r0 = 0; r0 + k <= size; ++r0) {
        for (int c0 = 0; c0 + k <= size; ++c0) {
            ++windows;
            Image imputed = image;
            for (int r = r0; r < r0 + k; ++r) {
                for (int c = c0; c < c0 + k; ++c) {
                    for (int ch = 0; ch < 3; ++ch) imputed.at(r, c, ch) = 0.1f;
                }
            }
            const double w = one_pixel(image, pr, pc).hidden(0) - one_pixel(imputed, pr, pc).hidden(0);
            const bool covers = pr >= r0 && pr < r0 + k && pc >= c0 && pc < c0 + k;
            for (int r = r0; r < r0 + k; ++r) {
                for (int c = c0; c < c0 + k; ++c) {
                    sum.at(r, c) += w;
                    count.at(r, c) += 1.0;
                    if (covers) coverage.insert(r * size + c);
                }
            }
        }
    }
    CHECK(windows == 36);
    std::set<int> support;
    for (int i = 0; i < size * size; ++i) {
        const double v = rel.hidden[0].data[static_cast<std::size_t>(i)];
        if (v != 0.0) support.insert(i);
        CHECK(v == doctest::Approx(sum.data[static_cast<std::size_t>(i)] / count.data[static_cast<std::size_t>(i)]));
    }
    CHECK(support == coverage);
}

TEST_CASE("relevance is deterministic and thread count does not change it") {
    Rng rng(2);
    auto config = nets::ModelConfig::desk_default(20, 16);
    const auto model = nets::build_model(config, {0, 1}, 3);
    const auto image = testutil::random_image(rng, 16, 16);
    const auto donors = random_donors(rng, 5, 16);
    const auto sampler = make_sampler(SamplerKind::Marginal, donors, 5);
    PdaParams params;
    params.seed = 21;
    params.laplace_n = 50;
    const auto a = model_relevance_sweep(model, image, params, *sampler);
    const auto b = model_relevance_sweep(model, image, params, *sampler);
    params.threads = 3;
    const auto c = model_relevance_sweep(model, image, params, *sampler);
    for (std::size_t blk = 0; blk < a.size(); ++blk) {
        for (std::size_t m = 0; m < a[blk].size(); ++m) {
            CHECK(a[blk][m].scores == b[blk][m].scores);
            CHECK(a[blk][m].scores == c[blk][m].scores);
        }
    }
}

TEST_CASE("shared-sample sweep equals independent per-target runs") {
    Rng rng(7);
    const auto model = nets::build_model(nets::ModelConfig::desk_default(20, 16), {0, 1}, 5);
    const auto image = testutil::random_image(rng, 16, 16);
    const auto donors = random_donors(rng, 4, 16);
    const auto sampler = make_sampler(SamplerKind::Conditional, donors, 3);
    PdaParams params;
    params.window = 3;
    params.sampler = SamplerKind::Conditional;
    params.num_samples = 3;
    params.seed = 8;
    params.laplace_n = 40;
    const auto sweep = block_relevance_sweep(model, image, 2, params, *sampler);
    REQUIRE(static_cast<int>(sweep.size()) == model.config.block_channels()[1]);
    for (int m = 0; m < static_cast<int>(sweep.size()); ++m) {
        const auto single = pda_relevance(model, image, Target::hidden(2, m), params, *sampler);
        CHECK(single.target == sweep[static_cast<std::size_t>(m)].target);
        for (std::size_t i = 0; i < single.scores.data.size(); ++i) {
            REQUIRE(std::abs(single.scores.data[i] - sweep[static_cast<std::size_t>(m)].scores.data[i]) < 1e-9);
        }
    }
    const auto cls = pda_relevance(model, image, Target::output_class(1), params, *sampler);
    CHECK(cls.target.tag() == "class1");
}

TEST_CASE("identical filters give identical relevance maps") {
    Rng rng(1);
    auto model = nets::build_model(nets::ModelConfig::desk_default(20, 16), {0, 1}, 5);
    auto& w = model.group("block1").tensor("conv1.weight").values;
    auto& bias = model.group("block1").tensor("conv1.bias").values;
    const std::size_t per_filter = w.size() / bias.size();
    std::copy(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(per_filter),
              w.begin() + static_cast<std::ptrdiff_t>(per_filter));
    bias[1] = bias[0];
    const auto image = testutil::random_image(rng, 16, 16);
    const auto sampler = make_sampler(SamplerKind::Marginal, random_donors(rng, 3, 16), 5);
    PdaParams params;
    params.laplace_n = 10;
    const auto maps = block_relevance_sweep(model, image, 1, params, *sampler);
    CHECK(maps[0].scores == maps[1].scores);
}

TEST_CASE("weight of evidence uses a Laplace-corrected log2-odds") {
    for (double p : {0.0, 0.1, 0.5, 0.9, 1.0}) {
        const double corrected = (p * 100 + 1) / (100 + 4);
        CHECK(weight_of_evidence(p, 100, 4) == doctest::Approx(std::log2(corrected / (1 - corrected))));
    }
    CHECK(std::isfinite(weight_of_evidence(1.0, 10, 2)));
    CHECK(weight_of_evidence(0.5, 10, 2) == doctest::Approx(0.0));
}

TEST_CASE("parameter validation") {
    Rng rng(1);
    const auto image = testutil::random_image(rng, 8, 8);
    FunctionProbe probe([](const Image& img) { return one_pixel(img, 0, 0); }, image);
    MarginalSampler sampler(constant_donors(1, 8, 0.0f));
    PdaParams even;
    even.window = 4;
    CHECK_THROWS_AS(relevance_all(probe, image, even, sampler, 1), Error);
    PdaParams big;
    big.window = 9;
    CHECK_THROWS_AS(relevance_all(probe, image, big, sampler, 1), Error);
    PdaParams none;
    none.num_samples = 0;
    try {
        relevance_all(probe, image, none, sampler, 1);
        FAIL("expected a parameter error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Parameter);
    }
    CHECK_THROWS_AS(MarginalSampler({}), Error);
}

TEST_CASE("sign and percentile evidence masks") {
    Rng rng(4);
    ScoreGrid scores(10, 10, 1, 0.0);
    for (auto& v : scores.data) v = -rng.uniform(0.1, 1.0);
    CHECK(count_set(evidence_mask(scores).mask) == 0);

    std::vector<int> idx(100);
    for (int i = 0; i < 100; ++i) idx[static_cast<std::size_t>(i)] = i;
    rng.shuffle(idx.begin(), idx.end());
    for (int i = 0; i < 30; ++i) scores.data[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = rng.uniform(0.1, 1.0);
    const auto sign = evidence_mask(scores);
    CHECK(count_set(sign.mask) == 30);
    const auto pct = evidence_mask(scores, ThresholdRule::Percentile, 0.2);
    CHECK(count_set(pct.mask) == 20);
    // Sort-and-count: every kept cell scores at least as high as every dropped one.
    double min_kept = 1e9, max_dropped = -1e9;
    for (std::size_t i = 0; i < 100; ++i) {
        if (pct.mask.data[i]) min_kept = std::min(min_kept, scores.data[i]);
        else max_dropped = std::max(max_dropped, scores.data[i]);
    }
    CHECK(min_kept >= max_dropped);
    CHECK(pct.rule_tag() != sign.rule_tag());

    ScoreGrid flipped = scores;
    for (auto& v : flipped.data) v = -v;
    const auto neg = evidence_mask(flipped);
    for (std::size_t i = 0; i < 100; ++i) CHECK_FALSE((sign.mask.data[i] && neg.mask.data[i]));
    CHECK_THROWS_AS(evidence_mask(scores, ThresholdRule::Percentile, 0.0), Error);
}

TEST_CASE("relevance archives store scores and masks") {
    Rng rng(5);
    const auto model = nets::build_model(nets::ModelConfig::desk_default(20, 16), {0, 1}, 5);
    const auto image = testutil::random_image(rng, 16, 16);
    const auto sampler = make_sampler(SamplerKind::Marginal, random_donors(rng, 3, 16), 5);
    PdaParams params;
    params.laplace_n = 10;
    const auto maps = block_relevance_sweep(model, image, 1, params, *sampler);
    std::vector<EvidenceMask> masks;
    for (const auto& m : maps) masks.push_back(evidence_mask(m));
    const auto dir = testutil::scratch_dir("pda_archive");
    write_relevance_archive(dir, maps, masks);
    const auto archive = store::read_archive(dir);
    CHECK(archive.entries.size() == 2 * maps.size());
    CHECK_THROWS_AS(write_relevance_archive(dir / "x", maps, {}), Error);
}

}  // TEST_SUITE
