#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "mfl/error.hpp"
#include "mfl/model.hpp"
#include "mfl/optim.hpp"
#include "mfl/rng.hpp"
#include "mfl/tensor.hpp"

using namespace mfl;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : data) v = scale * rng.normal();
    return Tensor::from_data(std::move(shape), std::move(data));
}

Tensor& param_named(ParamList& params, const std::string& name) {
    for (auto& p : params)
        if (p.name == name) return p.tensor;
    throw std::runtime_error("missing param " + name);
}

void fill(Tensor& t, double v) {
    for (auto& x : t.mutable_data()) x = v;
}

}  // namespace

TEST_CASE("causal attention ignores future positions") {
    Rng rng(1);
    AttentionBlock attn(2, 8, true, rng);
    Tensor x = random_tensor({5, 8}, rng);
    const Tensor h1 = attn.forward(x).h.detach();

    // Scramble the inputs at positions 3 and 4; rows 0..2 must not move.
    Tensor x2 = x.detach();
    for (std::int64_t j = 0; j < 8; ++j) {
        x2.mutable_data()[static_cast<std::size_t>(3 * 8 + j)] = rng.normal() * 5;
        x2.mutable_data()[static_cast<std::size_t>(4 * 8 + j)] = rng.normal() * 5;
    }
    const Tensor h2 = attn.forward(x2).h.detach();
    for (std::int64_t t = 0; t < 3; ++t)
        for (std::int64_t j = 0; j < 8; ++j) CHECK(h1.at(t, j) == h2.at(t, j));
}

TEST_CASE("single-token attention is the value-projection chain") {
    Rng rng(2);
    AttentionBlock attn(2, 8, true, rng);
    Tensor x = random_tensor({1, 8}, rng);
    auto out = attn.forward(x, true);
    // With one position, attention weights are exactly 1, so each head block
    // is x * Wv of that head.
    ParamList params;
    attn.collect_params("attn", params);
    for (std::int64_t m = 0; m < 2; ++m) {
        Tensor expected = matmul(x, param_named(params, "attn.h" + std::to_string(m) + ".wv"));
        for (std::int64_t j = 0; j < 4; ++j)
            CHECK(out.head_blocks[static_cast<std::size_t>(m)].at(0, j) ==
                  doctest::Approx(expected.at(0, j)).epsilon(1e-12));
    }
}

TEST_CASE("residual plus head contributions sum exactly to the attention output") {
    Rng rng(3);
    AttentionBlock attn(4, 16, true, rng);
    Tensor x = random_tensor({6, 16}, rng);
    auto out = attn.forward(x, true);
    REQUIRE(out.contributions.size() == 4);
    REQUIRE(out.residual.defined());
    for (std::int64_t t = 0; t < 6; ++t) {
        for (std::int64_t j = 0; j < 16; ++j) {
            double acc = out.residual.at(t, j);
            for (const auto& c : out.contributions) acc += c.at(t, j);
            CHECK(acc == doctest::Approx(out.h.at(t, j)).epsilon(1e-12));
        }
    }
}

TEST_CASE("attention gradients match finite differences") {
    Rng rng(4);
    AttentionBlock attn(2, 8, true, rng);
    Tensor x = random_tensor({3, 8}, rng);
    ParamList params;
    attn.collect_params("attn", params);
    for (auto& p : params) p.tensor.set_requires_grad(true);

    std::vector<double> proj(3 * 8);
    for (auto& v : proj) v = rng.normal();
    const Tensor w = Tensor::from_data({3, 8}, proj);

    ComputationRecord rec;
    {
        RecordScope scope(rec);
        backward(sum(mul(attn.forward(x).h, w)));
    }
    for (auto& p : params) {
        Tensor fd = finite_diff_grad(
            [&](const Tensor& probe) {
                NoRecordScope quiet;
                Tensor saved = p.tensor.detach();
                std::copy(probe.data().begin(), probe.data().end(), p.tensor.mutable_data().begin());
                double acc = 0;
                Tensor h = attn.forward(x).h;
                const auto hd = h.data();
                for (std::size_t i = 0; i < hd.size(); ++i) acc += proj[i] * hd[i];
                std::copy(saved.data().begin(), saved.data().end(), p.tensor.mutable_data().begin());
                return acc;
            },
            p.tensor);
        INFO(p.name);
        CHECK(max_rel_err(p.tensor.grad(), fd.data()) < 1e-4);
    }
}

TEST_CASE("standard moe top-1 picks the max logit with gate 1") {
    Rng rng(5);
    StandardMoeLayer layer(4, 1, 4, 8, rng);
    ParamList params;
    layer.collect_params("moe", params);
    Tensor& router = param_named(params, "moe.router");
    fill(router, 0.0);
    // Logits for h = e_0 are the first router column.
    for (std::int64_t e = 0; e < 4; ++e)
        router.mutable_data()[static_cast<std::size_t>(e * 4)] = std::vector<double>{0.1, 0.9, 0.3, 0.5}[static_cast<std::size_t>(e)];

    Tensor h = Tensor::from_data({1, 4}, {1, 0, 0, 0});
    const auto out = layer.forward(h);
    REQUIRE(out.trace.size() == 1);
    CHECK(out.trace[0].sets[0] == std::vector<std::int64_t>{1});
    CHECK(out.trace[0].gates[0][0] == 1.0);
}

TEST_CASE("standard moe top-2 gates are the restricted softmax") {
    Rng rng(6);
    StandardMoeLayer layer(4, 2, 4, 8, rng);
    ParamList params;
    layer.collect_params("moe", params);
    Tensor& router = param_named(params, "moe.router");
    fill(router, 0.0);
    for (std::int64_t e = 0; e < 4; ++e)
        router.mutable_data()[static_cast<std::size_t>(e * 4)] = std::vector<double>{0.1, 0.9, 0.3, 0.5}[static_cast<std::size_t>(e)];

    Tensor h = Tensor::from_data({1, 4}, {1, 0, 0, 0});
    const auto out = layer.forward(h);
    CHECK(out.trace[0].sets[0] == std::vector<std::int64_t>{1, 3});
    CHECK(out.trace[0].gates[0][0] == doctest::Approx(0.598687660112452).epsilon(1e-12));
    CHECK(out.trace[0].gates[0][1] == doctest::Approx(0.401312339887548).epsilon(1e-12));
    CHECK(out.trace[0].gates[0][0] + out.trace[0].gates[0][1] == doctest::Approx(1.0).epsilon(1e-13));
}

TEST_CASE("non-selected experts receive exactly zero gradient") {
    Rng rng(7);
    StandardMoeLayer layer(4, 1, 8, 16, rng);
    ParamList params;
    layer.collect_params("moe", params);
    for (auto& p : params) p.tensor.set_requires_grad(true);

    Tensor h = random_tensor({6, 8}, rng);
    ComputationRecord rec;
    MoeForward out;
    {
        RecordScope scope(rec);
        out = layer.forward(h);
        backward(sum(out.y));
    }
    std::set<std::int64_t> used;
    for (const auto& t : out.trace) used.insert(t.sets[0][0]);
    for (std::int64_t e = 0; e < 4; ++e) {
        const bool selected = used.contains(e);
        for (const auto& p : params) {
            if (p.name.find(".e" + std::to_string(e) + ".") == std::string::npos) continue;
            if (!selected) {
                CHECK_FALSE(p.tensor.has_grad());
            }
        }
    }
}

TEST_CASE("top-k selection breaks ties toward the lowest expert index") {
    const std::vector<double> logits{0.5, 0.7, 0.7, 0.5};
    CHECK(top_k_select(logits, 1) == std::vector<std::int64_t>{1});
    CHECK(top_k_select(logits, 2) == std::vector<std::int64_t>{1, 2});
    CHECK(top_k_select(logits, 3) == std::vector<std::int64_t>{0, 1, 2});
    CHECK_THROWS_AS(top_k_select(logits, 5), ConfigError);
}

TEST_CASE("mhmoe with one head equals the standard layer bit-for-bit") {
    Rng rng_a(8);
    StandardMoeLayer std_layer(4, 2, 8, 16, rng_a);
    Rng rng_b(9);
    MhMoeLayer mh_layer(1, 4, 2, 8, 16, rng_b);

    // Share weights: copy the standard layer's parameters into the
    // single-head bank.
    ParamList std_params, mh_params;
    std_layer.collect_params("moe", std_params);
    mh_layer.collect_params("moe", mh_params);
    REQUIRE(std_params.size() == mh_params.size());
    for (auto& p : std_params) {
        std::string name = p.name;
        const std::string mh_name = name == "moe.router" ? "moe.h0.router"
                                                          : "moe.h0" + name.substr(3);
        Tensor& dst = param_named(mh_params, mh_name);
        std::copy(p.tensor.data().begin(), p.tensor.data().end(), dst.mutable_data().begin());
        p.tensor.set_requires_grad(true);
        dst.set_requires_grad(true);
    }

    Rng rng(10);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor h = random_tensor({5, 8}, rng);
        std::vector<double> proj(5 * 8);
        for (auto& v : proj) v = rng.normal();
        Tensor w = Tensor::from_data({5, 8}, proj);

        for (auto& p : std_params) p.tensor.zero_grad();
        for (auto& p : mh_params) p.tensor.zero_grad();

        Tensor y_std, y_mh;
        {
            ComputationRecord rec;
            RecordScope scope(rec);
            y_std = std_layer.forward(h).y;
            backward(sum(mul(y_std, w)));
        }
        {
            ComputationRecord rec;
            RecordScope scope(rec);
            y_mh = mh_layer.forward(h).y;
            backward(sum(mul(y_mh, w)));
        }
        for (std::int64_t i = 0; i < y_std.numel(); ++i)
            CHECK(std::abs(y_std.at(i) - y_mh.at(i)) <=  1e-12);
        for (std::size_t pi = 0; pi < std_params.size(); ++pi) {
            const auto& sp = std_params[pi];
            const std::string mh_name = sp.name == "moe.router" ? "moe.h0.router"
                                                                 : "moe.h0" + sp.name.substr(3);
            const Tensor& mp = param_named(mh_params, mh_name);
            if (!sp.tensor.has_grad()) {
                CHECK_FALSE(mp.has_grad());
                continue;
            }
            const auto ga = sp.tensor.grad();
            const auto gb = mp.grad();
            for (std::size_t i = 0; i < ga.size(); ++i) CHECK(std::abs(ga[i] - gb[i]) <= 1e-12);
        }
    }
}

TEST_CASE("mhmoe gates sum to one per head and sets stay within the bank") {
    Rng rng(11);
    MhMoeLayer layer(4, 4, 2, 16, 8, rng);
    Tensor h = random_tensor({7, 16}, rng);
    const auto out = layer.forward(h);
    for (const auto& t : out.trace) {
        REQUIRE(t.sets.size() == 4);
        for (std::size_t m = 0; m < 4; ++m) {
            double total = 0;
            for (const double g : t.gates[m]) total += g;
            CHECK(std::abs(total - 1.0) <= 1e-12);
            for (const auto e : t.sets[m]) {
                CHECK(e >= 0);
                CHECK(e < 4);
            }
            CHECK(std::is_sorted(t.sets[m].begin(), t.sets[m].end()));
        }
    }
}

TEST_CASE("mhmoe config errors") {
    Rng rng(12);
    CHECK_THROWS_AS(MhMoeLayer(3, 4, 1, 16, 8, rng), ConfigError);  // 3 does not divide 16
    CHECK_THROWS_AS(MhMoeLayer(4, 4, 5, 16, 8, rng), ConfigError);  // k > K
    CHECK_THROWS_AS(StandardMoeLayer(4, 5, 16, 8, rng), ConfigError);
}

TEST_CASE("zeroing expert output weights leaves only the output biases") {
    Rng rng(13);
    MhMoeLayer layer(2, 4, 1, 8, 8, rng);
    ParamList params;
    layer.collect_params("moe", params);
    double bias_sum_expected = 0.0;
    for (auto& p : params) {
        if (p.name.ends_with(".w2")) fill(p.tensor, 0.0);
        if (p.name.ends_with(".b2")) fill(p.tensor, 0.25);
    }
    bias_sum_expected = 0.25 * 2;  // one expert mixture per head, gates sum to 1

    Tensor h = random_tensor({3, 8}, rng);
    const auto out = layer.forward(h);
    for (std::int64_t t = 0; t < 3; ++t)
        for (std::int64_t j = 0; j < 8; ++j)
            CHECK(out.y.at(t, j) == doctest::Approx(bias_sum_expected).epsilon(1e-12));
    for (const auto& tr : out.trace)
        for (const auto& g : tr.gates) {
            double total = 0;
            for (const double v : g) total += v;
            CHECK(std::abs(total - 1.0) <= 1e-12);
        }
}

TEST_CASE("composite_apply replays a traced token exactly") {
    Rng rng(14);
    MhMoeLayer layer(4, 4, 2, 16, 8, rng);
    Tensor h = random_tensor({5, 16}, rng);
    const auto out = layer.forward(h);

    for (std::int64_t t = 0; t < 5; ++t) {
        std::vector<double> row(h.data().begin() + t * 16, h.data().begin() + (t + 1) * 16);
        Tensor ht = Tensor::from_data({16}, row);
        Tensor replay = layer.composite_apply(out.trace[static_cast<std::size_t>(t)], ht);
        for (std::int64_t j = 0; j < 16; ++j)
            CHECK(std::abs(replay.at(j) - out.y.at(t, j)) <= 1e-12);
    }
}

TEST_CASE("composite_apply of zero input with zero biases is zero") {
    Rng rng(15);
    MhMoeLayer layer(2, 2, 1, 8, 8, rng);
    ParamList params;
    layer.collect_params("moe", params);
    for (auto& p : params)
        if (p.name.ends_with(".b1") || p.name.ends_with(".b2")) fill(p.tensor, 0.0);

    TokenRouting routing;
    routing.sets = {{0}, {1}};
    routing.gates = {{1.0}, {1.0}};
    Tensor z = Tensor::zeros({8});
    Tensor y = layer.composite_apply(routing, z);
    for (const double v : y.data()) CHECK(v == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("composite_apply distinguishes inputs under a fixed routing") {
    Rng rng(16);
    MhMoeLayer layer(2, 2, 1, 8, 8, rng);
    TokenRouting routing;
    routing.sets = {{0}, {1}};
    routing.gates = {{1.0}, {1.0}};
    Tensor h1 = random_tensor({8}, rng);
    Tensor h2 = random_tensor({8}, rng);
    Tensor y1 = layer.composite_apply(routing, h1);
    Tensor y1_again = layer.composite_apply(routing, h1);
    Tensor y2 = layer.composite_apply(routing, h2);
    double diff_same = 0, diff_other = 0;
    for (std::int64_t j = 0; j < 8; ++j) {
        diff_same += std::abs(y1.at(j) - y1_again.at(j));
        diff_other += std::abs(y1.at(j) - y2.at(j));
    }
    CHECK(diff_same == 0.0);
    CHECK(diff_other > 1e-8);
}

TEST_CASE("composite_apply rejects a mismatched tuple") {
    Rng rng(17);
    MhMoeLayer layer(2, 2, 1, 8, 8, rng);
    TokenRouting bad;
    bad.sets = {{0}};
    bad.gates = {{1.0}};
    CHECK_THROWS_AS(layer.composite_apply(bad, Tensor::zeros({8})), ValueError);
    TokenRouting out_of_bank;
    out_of_bank.sets = {{0}, {5}};
    out_of_bank.gates = {{1.0}, {1.0}};
    CHECK_THROWS_AS(layer.composite_apply(out_of_bank, Tensor::zeros({8})), ValueError);
}

TEST_CASE("count_route_space reproduces the paper's accounting") {
    CHECK(count_route_space(4, 1, 8) == 65536);
    CHECK(count_route_space(26, 5, 1) == 65780);
    CHECK(count_route_space(7, 7, 3) == 1);
    CHECK_THROWS_AS(count_route_space(4, 5, 1), ConfigError);
    CHECK_THROWS_AS(count_route_space(4, 1, 0), ConfigError);
    CHECK_THROWS_AS(count_route_space(64, 32, 8), ValueError);  // overflow
}

TEST_CASE("lm_loss with zero unembedding is ln V per position") {
    ToyLmConfig cfg;
    cfg.vocab = 32;
    cfg.d_model = 16;
    cfg.attn_heads = 2;
    cfg.max_seq = 8;
    cfg.moe_kind = MoeKind::MultiHead;
    cfg.moe_heads = 2;
    cfg.n_experts = 2;
    cfg.top_k = 1;
    cfg.init_seed = 3;
    ToyLm model(cfg);
    fill(param_named(model.params(), "unembed.w"), 0.0);

    const std::vector<std::int64_t> tokens{1, 5, 9, 13};
    const auto out = model.lm_loss(tokens);
    CHECK(out.loss.item() == doctest::Approx(std::log(32.0)).epsilon(1e-12));
    REQUIRE(out.per_token.size() == 3);
    for (const double l : out.per_token) CHECK(l == doctest::Approx(std::log(32.0)).epsilon(1e-12));
    REQUIRE(out.trace.size() == 4);
}

TEST_CASE("lm_loss is deterministic across repeated calls") {
    ToyLmConfig cfg;
    cfg.vocab = 32;
    cfg.d_model = 16;
    cfg.attn_heads = 2;
    cfg.max_seq = 8;
    cfg.init_seed = 4;
    ToyLm model(cfg);
    const std::vector<std::int64_t> tokens{3, 7, 2, 30, 11};
    const double l1 = model.lm_loss(tokens).loss.item();
    const double l2 = model.lm_loss(tokens).loss.item();
    CHECK(l1 == l2);
}

TEST_CASE("lm_loss rejects out-of-vocab ids and too-short sequences") {
    ToyLmConfig cfg;
    cfg.vocab = 16;
    cfg.d_model = 8;
    cfg.attn_heads = 2;
    cfg.max_seq = 8;
    ToyLm model(cfg);
    const std::vector<std::int64_t> bad{3, 16};
    CHECK_THROWS_AS(model.lm_loss(bad), IndexError);
    const std::vector<std::int64_t> single{3};
    CHECK_THROWS_AS(model.lm_loss(single), ValueError);
}

TEST_CASE("observed routing tuples stay within the route space") {
    ToyLmConfig cfg;
    cfg.vocab = 64;
    cfg.d_model = 16;
    cfg.attn_heads = 2;
    cfg.max_seq = 16;
    cfg.moe_kind = MoeKind::MultiHead;
    cfg.moe_heads = 4;
    cfg.n_experts = 2;
    cfg.top_k = 1;
    cfg.init_seed = 5;
    ToyLm model(cfg);

    Rng rng(6);
    std::set<std::vector<std::vector<std::int64_t>>> tuples;
    for (int s = 0; s < 50; ++s) {
        std::vector<std::int64_t> tokens;
        for (int t = 0; t < 16; ++t) tokens.push_back(rng.uniform_int(64));
        for (const auto& tr : model.forward(tokens).trace) tuples.insert(tr.sets);
    }
    CHECK(tuples.size() <= count_route_space(2, 1, 4));
}

TEST_CASE("full model gradients match finite differences, frozen and not") {
    for (const bool freeze : {false, true}) {
        for (const MoeKind kind : {MoeKind::Standard, MoeKind::MultiHead}) {
            ToyLmConfig cfg;
            cfg.vocab = 12;
            cfg.d_model = 8;
            cfg.attn_heads = 2;
            cfg.max_seq = 4;
            cfg.moe_kind = kind;
            cfg.moe_heads = 2;
            cfg.n_experts = 2;
            cfg.top_k = 1;
            cfg.init_seed = 7;
            cfg.freeze_backbone = freeze;
            ToyLm model(cfg);
            const std::vector<std::int64_t> tokens{1, 5, 9, 2};

            ParamList trainable = model.trainable_params();
            REQUIRE(!trainable.empty());
            zero_grads(trainable);
            ComputationRecord rec;
            {
                RecordScope scope(rec);
                backward(model.lm_loss(tokens).loss);
            }
            for (auto& p : trainable) {
                Tensor fd = finite_diff_grad(
                    [&](const Tensor& probe) {
                        NoRecordScope quiet;
                        Tensor saved = p.tensor.detach();
                        std::copy(probe.data().begin(), probe.data().end(),
                                  p.tensor.mutable_data().begin());
                        const double v = model.lm_loss(tokens).loss.item();
                        std::copy(saved.data().begin(), saved.data().end(),
                                  p.tensor.mutable_data().begin());
                        return v;
                    },
                    p.tensor);
                std::vector<double> grad(p.tensor.numel(), 0.0);
                if (p.tensor.has_grad()) grad.assign(p.tensor.grad().begin(), p.tensor.grad().end());
                INFO(p.name << " freeze=" << freeze);
                CHECK(max_rel_err(grad, fd.data()) < 1e-4);
            }
        }
    }
}

TEST_CASE("loss on a short repeating stream becomes memorized") {
    ToyLmConfig cfg;
    cfg.vocab = 8;
    cfg.d_model = 16;
    cfg.attn_heads = 2;
    cfg.max_seq = 9;
    cfg.moe_kind = MoeKind::MultiHead;
    cfg.moe_heads = 2;
    cfg.n_experts = 2;
    cfg.top_k = 1;
    cfg.init_seed = 8;
    ToyLm model(cfg);
    const std::vector<std::int64_t> tokens{1, 4, 7, 1, 4, 7, 1, 4, 7};

    ParamList params = model.trainable_params();
    AdamWConfig acfg;
    acfg.lr = 3e-3;
    AdamW opt(acfg);
    double last = 0;
    for (int step = 0; step < 200; ++step) {
        zero_grads(params);
        ComputationRecord rec;
        RecordScope scope(rec);
        Tensor loss = model.lm_loss(tokens).loss;
        last = loss.item();
        backward(loss);
        opt.step(params);
    }
    CHECK(last < 0.1);
}
