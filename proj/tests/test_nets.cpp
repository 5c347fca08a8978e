#include <cmath>
#include <fstream>
#include <set>

#include "doctest.h"
#include "forgetdissect/error.hpp"
#include "forgetdissect/nets.hpp"
#include "forgetdissect/store.hpp"
#include "forgetdissect/synthdata.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace forgetdissect;
using namespace forgetdissect::nets;

TEST_SUITE("nets") {

TEST_CASE("analytic gradients match central differences on a micro model") {
    Rng rng(5);
    const auto config = testutil::micro_config();
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto model = build_model(config, {0, 1, 2}, seed);
        const auto image = testutil::random_image(rng, 8, 8);
        const auto result = oracle::gradient_check(model, image, static_cast<int>(seed % 3), {4, 7, 5, synthdata::kEos}, 1e-3);
        INFO("worst group: " << result.worst_group);
        CHECK(result.worst_relative < 1e-4);
    }
}

TEST_CASE("gradient check holds after widening the head") {
    Rng rng(6);
    auto model = build_model(testutil::micro_config(), {0, 1}, 4);
    widen_head(model, {2}, 9);
    const auto image = testutil::random_image(rng, 8, 8);
    const auto result = oracle::gradient_check(model, image, 2, {5, 6, synthdata::kEos}, 1e-3);
    CHECK(result.worst_relative < 1e-4);
}

TEST_CASE("cross entropy") {
    const std::vector<double> uniform(40, 1.0 / 40.0);
    CHECK(cross_entropy(uniform, 7) == doctest::Approx(std::log(40.0)).epsilon(1e-12));
    CHECK(cross_entropy(uniform, 7) == doctest::Approx(3.6889).epsilon(1e-4));
    const std::vector<double> one_hot = {0.0, 1.0, 0.0};
    CHECK(cross_entropy(one_hot, 1) == 0.0);
    Rng rng(3);
    std::vector<double> p(10);
    double sum = 0.0;
    for (auto& x : p) sum += x = rng.uniform(0.01, 1.0);
    for (auto& x : p) x /= sum;
    for (int t = 0; t < 10; ++t) CHECK(cross_entropy(p, t) == doctest::Approx(-std::log(p[static_cast<std::size_t>(t)])));
}

TEST_CASE("desk default architecture") {
    const auto config = ModelConfig::desk_default(25);
    CHECK(config.num_blocks() == 4);
    CHECK(config.block_sizes() == std::vector<int>{24, 12, 6, 3});
    const auto model = build_model(config, {0, 1, 2, 3}, 1);
    const auto ds = synthdata::generate_dataset(synthdata::DatasetConfig{}, 1);
    const auto f = forward_features(model, ds.sample(0).image);
    REQUIRE(f.blocks.size() == 4);
    const auto channels = config.block_channels();
    for (std::size_t b = 0; b < 4; ++b) {
        CHECK(f.blocks[b].maps.rows() == channels[b]);
        CHECK(f.blocks[b].height == config.block_sizes()[b]);
    }
    CHECK(f.blocks[3].height == 3);
    CHECK(f.logits.size() == 4);
}

TEST_CASE("building is deterministic and parameter groups cover everything once") {
    const auto config = testutil::micro_config();
    const auto a = build_model(config, {0, 1}, 42);
    const auto b = build_model(config, {0, 1}, 42);
    const auto c = build_model(config, {0, 1}, 43);
    CHECK(a == b);
    CHECK_FALSE(a == c);

    std::vector<std::string> names;
    for (const auto& g : a.groups) names.push_back(g.name);
    CHECK(names == group_names(2));
    std::size_t sum = 0;
    std::set<std::string> tensor_ids;
    bool float_exact = true;
    for (const auto& g : a.groups) {
        for (const auto& t : g.tensors) {
            sum += t.values.size();
            CHECK(tensor_ids.insert(g.name + "/" + t.name).second);
            for (double v : t.values) float_exact = float_exact && static_cast<double>(static_cast<float>(v)) == v;
        }
    }
    CHECK(sum == a.parameter_count());
    CHECK(float_exact);

    for (const auto& n : names) {
        const bool enc = is_encoder_group(n);
        const bool dec = is_decoder_group(n);
        CHECK_FALSE((enc && dec));
        if (n == kClassifierGroup) {
            CHECK_FALSE(enc);
            CHECK_FALSE(dec);
        } else {
            CHECK((enc || dec));
        }
    }
}

TEST_CASE("invalid architectures are configuration errors") {
    auto collapse = testutil::micro_config();
    collapse.blocks.push_back({3, {{4, 3, Activation::Relu, true}}});
    collapse.blocks.push_back({4, {{4, 3, Activation::Relu, true}}});
    try {
        collapse.validate();
        FAIL("expected a configuration error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Config);
    }
    auto single = testutil::micro_config();
    single.blocks.resize(1);
    CHECK_THROWS_AS(single.validate(), Error);
    auto gap = testutil::micro_config();
    gap.blocks[1].block_id = 3;
    CHECK_THROWS_AS(gap.validate(), Error);
}

TEST_CASE("forward pass properties") {
    Rng rng(8);
    const auto model = build_model(testutil::micro_config(9, false), {0, 1}, 3);
    const Image zero(8, 8, 3, 0.0f);
    for (const auto& b : forward_features(model, zero).blocks) CHECK(b.maps.cwiseAbs().maxCoeff() == 0.0);

    const auto img = testutil::random_image(rng, 8, 8);
    const auto f1 = forward_features(model, img);
    const auto f2 = forward_features(model, img);
    CHECK(f1.logits == f2.logits);

    try {
        forward_features(model, Image(9, 9, 3));
        FAIL("expected an input error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Input);
    }
}

TEST_CASE("greedy decoding terminates and is deterministic") {
    Rng rng(2);
    const auto model = build_model(testutil::micro_config(), {0}, 7);
    for (int i = 0; i < 20; ++i) {
        const auto img = testutil::random_image(rng, 8, 8);
        const auto cap = decode_caption(model, img);
        CHECK(static_cast<int>(cap.size()) <= model.config.decoder.max_length);
        CHECK(cap == decode_caption(model, img));
    }
}

TEST_CASE("incremental encoder agrees with a full forward pass") {
    Rng rng(12);
    auto config = ModelConfig::desk_default(20, 16);
    const auto model = build_model(config, {0, 1, 2}, 5);
    const auto image = testutil::random_image(rng, 16, 16);
    IncrementalEncoder enc(model, image);
    ProbeResult out;
    for (int trial = 0; trial < 20; ++trial) {
        const int k = 1 + 2 * static_cast<int>(rng.below(3));
        const int r0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(16 - k + 1)));
        const int c0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(16 - k + 1)));
        const Rect rect{r0, r0 + k, c0, c0 + k};
        std::vector<double> patch(static_cast<std::size_t>(k * k * 3));
        Image edited = image;
        for (int r = 0; r < k; ++r) {
            for (int c = 0; c < k; ++c) {
                for (int ch = 0; ch < 3; ++ch) {
                    const auto v = static_cast<float>(rng.uniform());
                    patch[static_cast<std::size_t>((r * k + c) * 3 + ch)] = v;
                    edited.at(r0 + r, c0 + c, ch) = v;
                }
            }
        }
        enc.evaluate(rect, patch, out);
        const auto full = forward_features(model, edited);
        for (std::size_t b = 0; b < full.blocks.size(); ++b) {
            const Eigen::VectorXd sums = full.blocks[b].maps.rowwise().sum();
            CHECK((sums - out.block_sums[b]).cwiseAbs().maxCoeff() < 1e-9);
        }
        CHECK((full.logits - out.logits).cwiseAbs().maxCoeff() < 1e-9);
    }
}

TEST_CASE("widening the head keeps existing rows") {
    auto model = build_model(testutil::micro_config(), {0, 1}, 3);
    const auto before = model.group(kClassifierGroup);
    widen_head(model, {1, 2, 3}, 11);
    CHECK(model.head_classes == std::vector<int>{0, 1, 2, 3});
    const auto& w_old = before.tensor("weight").values;
    const auto& w_new = model.group(kClassifierGroup).tensor("weight").values;
    REQUIRE(w_new.size() == w_old.size() * 2);
    CHECK(std::equal(w_old.begin(), w_old.end(), w_new.begin()));
    CHECK(model.head_row(3) == 3);
    CHECK(model.head_row(9) == -1);
}

TEST_CASE("training: frozen groups stay bit-identical and the run is reproducible") {
    const auto ds = synthdata::generate_dataset(testutil::small_dataset_config(6), 3);
    const auto sp = synthdata::split_dataset(ds, {0.5, 0.25, 0.25}, 3);
    const auto model = build_model(ModelConfig::desk_default(ds.vocabulary.size(), 16), {0, 1}, 2);
    const TrainHyperparams hp{2, 0.05, 4};
    const LrMultipliers mult = {{"block1", 0.0}, {"recurrent", 0.0}, {"block3", 0.01}};
    const auto a = train_task(model, ds, sp.train, {0, 1}, mult, hp, 17);
    const auto b = train_task(model, ds, sp.train, {0, 1}, mult, hp, 17);
    CHECK(a.model == b.model);
    CHECK(a.epoch_losses == b.epoch_losses);
    CHECK(a.epoch_losses.size() == 2);
    CHECK(a.model.group("block1") == model.group("block1"));
    CHECK(a.model.group("recurrent") == model.group("recurrent"));
    CHECK_FALSE(a.model.group("block2") == model.group("block2"));
    CHECK_FALSE(a.model.group("block3") == model.group("block3"));
    REQUIRE(a.model.provenance.tasks.size() == 1);
    CHECK(a.model.provenance.tasks.back() == std::vector<int>{0, 1});
}

TEST_CASE("training with everything frozen is a configuration error") {
    const auto ds = synthdata::generate_dataset(testutil::small_dataset_config(4), 3);
    const auto sp = synthdata::split_dataset(ds, {0.5, 0.25, 0.25}, 3);
    const auto model = build_model(ModelConfig::desk_default(ds.vocabulary.size(), 16), {0, 1}, 2);
    LrMultipliers all;
    for (const auto& g : model.groups) all[g.name] = 0.0;
    try {
        train_task(model, ds, sp.train, {0}, all, {}, 1);
        FAIL("expected a configuration error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Config);
    }
    CHECK_THROWS_AS(train_task(model, ds, sp.train, {0}, {{"block9", 0.0}}, {}, 1), Error);
    CHECK_THROWS_AS(train_task(model, ds, sp.train, {5}, {}, {}, 1), Error);
}

TEST_CASE("snapshots round-trip and reject foreign files") {
    Rng rng(4);
    auto model = build_model(testutil::micro_config(), {0, 1}, 8);
    model.provenance.tasks = {{0, 1}};
    model.provenance.seed = 99;
    const auto dir = testutil::scratch_dir("snapshot");
    save_snapshot(model, dir / "m.fdsnap");
    const auto back = load_snapshot(dir / "m.fdsnap");
    CHECK(back == model);
    CHECK(back.provenance.tasks == model.provenance.tasks);
    CHECK(back.provenance.seed == 99);
    for (int i = 0; i < 10; ++i) {
        const auto img = testutil::random_image(rng, 8, 8);
        CHECK(forward_features(back, img).logits == forward_features(model, img).logits);
    }

    auto bytes = store::read_file(dir / "m.fdsnap");
    auto wrong_magic = bytes;
    wrong_magic[0] = 'X';
    store::write_file_atomic(dir / "bad.fdsnap", wrong_magic);
    try {
        load_snapshot(dir / "bad.fdsnap");
        FAIL("expected a format error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Format);
    }
    store::write_file_atomic(dir / "short.fdsnap", bytes.substr(0, bytes.size() / 2));
    try {
        load_snapshot(dir / "short.fdsnap");
        FAIL("expected a format error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Format);
    }
    try {
        load_snapshot(dir / "missing.fdsnap");
        FAIL("expected an io error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Io);
    }
}

}  // TEST_SUITE
