#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <vector>

#include "mfl/checkpoint.hpp"
#include "mfl/error.hpp"
#include "mfl/optim.hpp"
#include "mfl/rng.hpp"
#include "mfl/tensor.hpp"

using namespace mfl;

namespace {

ParamList one_param(double value, double grad) {
    Tensor w = Tensor::from_data({1}, {value});
    w.set_requires_grad(true);
    w.mutable_grad()[0] = grad;
    return {{"w", w}};
}

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("sgd step: w=1, g=2, lr=0.1 gives 0.8") {
    ParamList params = one_param(1.0, 2.0);
    Sgd opt(0.1);
    opt.step(params);
    CHECK(params[0].tensor.at(0) == doctest::Approx(0.8).epsilon(1e-15));
    // grads untouched
    CHECK(params[0].tensor.grad()[0] == 2.0);
}

TEST_CASE("adamw first step has bias-corrected magnitude ~ lr") {
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.95;
    cfg.eps = 1e-6;
    cfg.weight_decay = 0.0;
    ParamList params = one_param(1.0, 2.0);
    AdamW opt(cfg);
    opt.step(params);
    // One-step Adam moments: m_hat = g, v_hat = g^2, so the update is
    // lr * g / (|g| + eps).
    const double expected = 1.0 - 0.1 * (2.0 / (2.0 + 1e-6));
    CHECK(params[0].tensor.at(0) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(std::abs(1.0 - params[0].tensor.at(0)) == doctest::Approx(0.1).epsilon(1e-5));
}

TEST_CASE("adamw with decoupled weight decay matches the hand-computed step") {
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.01;
    ParamList params = one_param(1.0, 2.0);
    AdamW opt(cfg);
    opt.step(params);
    CHECK(params[0].tensor.at(0) == doctest::Approx(0.899000049999975).epsilon(1e-12));
}

TEST_CASE("lr zero leaves parameters unchanged") {
    ParamList params = one_param(1.5, 2.0);
    AdamWConfig cfg;
    cfg.lr = 0.0;
    cfg.weight_decay = 0.01;  // decay is also lr-scaled
    AdamW adam(cfg);
    adam.step(params);
    CHECK(params[0].tensor.at(0) == 1.5);
    Sgd sgd(0.0);
    sgd.step(params);
    CHECK(params[0].tensor.at(0) == 1.5);
}

TEST_CASE("missing gradient is a state error") {
    Tensor w = Tensor::from_data({1}, {1.0});
    w.set_requires_grad(true);
    ParamList params{{"w", w}};
    Sgd sgd(0.1);
    CHECK_THROWS_AS(sgd.step(params), StateError);
    AdamW adam(AdamWConfig{});
    CHECK_THROWS_AS(adam.step(params), StateError);
}

TEST_CASE("frozen parameters are skipped") {
    Tensor w = Tensor::from_data({1}, {1.0});
    w.set_requires_grad(false);
    ParamList params{{"w", w}};
    Sgd sgd(0.1);
    sgd.step(params);  // no grad needed, no update
    CHECK(params[0].tensor.at(0) == 1.0);
}

TEST_CASE("cosine schedule spans lr0 down to the floor") {
    CHECK(cosine_lr(1.0, 0.1, 0, 100) == doctest::Approx(1.0));
    CHECK(cosine_lr(1.0, 0.1, 99, 100) == doctest::Approx(0.1));
    CHECK(cosine_lr(1.0, 0.1, 50, 100) > 0.1);
    CHECK(cosine_lr(1.0, 0.1, 50, 100) < 1.0);
}

TEST_CASE("checkpoint files round-trip bit-exactly") {
    Rng rng(77);
    Checkpoint ckpt;
    ckpt.arch = "{\"test\":true}";
    ckpt.step = 1234;
    ckpt.task_index = 3;
    ckpt.seed = 99;
    std::vector<double> values(64);
    for (auto& v : values) v = rng.normal() * std::pow(10.0, rng.uniform(-300.0, 300.0));
    values[0] = 0.1 + 0.2;  // not exactly representable as 0.3
    values[1] = -0.0;
    values[2] = 5e-324;  // denormal
    ckpt.params.push_back({"a", Tensor::from_data({8, 8}, values)});
    ckpt.params.push_back({"b", Tensor::from_data({3}, {1.0, 2.0, 3.0})});

    const std::string path = temp_path("mfl_ckpt_roundtrip.mfl");
    save_checkpoint(path, ckpt);
    const Checkpoint loaded = load_checkpoint(path);

    CHECK(loaded.arch == ckpt.arch);
    CHECK(loaded.step == ckpt.step);
    CHECK(loaded.task_index == ckpt.task_index);
    CHECK(loaded.seed == ckpt.seed);
    REQUIRE(loaded.params.size() == ckpt.params.size());
    for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
        CHECK(loaded.params[i].name == ckpt.params[i].name);
        CHECK(loaded.params[i].tensor.shape() == ckpt.params[i].tensor.shape());
        const auto a = ckpt.params[i].tensor.data();
        const auto b = loaded.params[i].tensor.data();
        REQUIRE(a.size() == b.size());
        CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
    }
    std::remove(path.c_str());
}

TEST_CASE("checkpoint loader rejects foreign files") {
    const std::string path = temp_path("mfl_ckpt_bogus.mfl");
    {
        std::FILE* f = std::fopen(path.c_str(), "wb");
        std::fputs("NOPE this is not a checkpoint\n", f);
        std::fclose(f);
    }
    CHECK_THROWS_AS(load_checkpoint(path), ValueError);
    std::remove(path.c_str());
}

TEST_CASE("checkpoint file starts with the MFL1 magic") {
    Checkpoint ckpt;
    ckpt.arch = "{}";
    ckpt.params.push_back({"w", Tensor::from_data({1}, {1.0})});
    const std::string path = temp_path("mfl_ckpt_magic.mfl");
    save_checkpoint(path, ckpt);
    std::FILE* f = std::fopen(path.c_str(), "rb");
    char magic[4];
    REQUIRE(std::fread(magic, 1, 4, f) == 4);
    std::fclose(f);
    CHECK(std::strncmp(magic, "MFL1", 4) == 0);
    std::remove(path.c_str());
}
