// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <mpfr.h>

#include <cmath>
#include <set>

#include "bnas/elasticity.hpp"
#include "bnas/engine.hpp"
#include "bnas/errors.hpp"
#include "bnas/zoo.hpp"
#include "support/oracles.hpp"

using namespace bnas;

namespace {

// Mean cross-entropy at 256-bit precision.
double mpfr_cross_entropy(const std::vector<double>& logits, const std::vector<std::int32_t>& labels, int classes) {
    mpfr_t sum, term, total, lse;
    mpfr_inits2(256, sum, term, total, lse, nullptr);
    mpfr_set_d(total, 0.0, MPFR_RNDN);
    for (std::size_t b = 0; b < labels.size(); ++b) {
        mpfr_set_d(sum, 0.0, MPFR_RNDN);
        for (int c = 0; c < classes; ++c) {
            mpfr_set_d(term, logits[b * classes + c], MPFR_RNDN);
            mpfr_exp(term, term, MPFR_RNDN);
            mpfr_add(sum, sum, term, MPFR_RNDN);
        }
        mpfr_log(lse, sum, MPFR_RNDN);
        mpfr_sub_d(lse, lse, logits[b * classes + labels[b]], MPFR_RNDN);
        mpfr_add(total, total, lse, MPFR_RNDN);
    }
    mpfr_div_ui(total, total, labels.size(), MPFR_RNDN);
    const double out = mpfr_get_d(total, MPFR_RNDN);
    mpfr_clears(sum, term, total, lse, nullptr);
    return out;
}


SuperNetwork narrow_net(const ModelGraph& g) { return convert(g, oracle::narrow_policy()).supernet; }

// width: 1 = full, 2 = half on every group; crop: smallest kernel everywhere
SubnetworkConfig scaled(const SuperNetwork& net, int width_div, bool crop) {
    auto c = net.maximal();
    for (const auto& g : net.space().width_groups) c.width_choice[g.id] = g.max_channels / width_div;
    if (crop)
        for (const auto& [id, opts] : net.space().kernel_dims) c.kernel_choice[id] = opts.back();
    return c;
}

} // namespace

TEST_CASE("1x1 conv at width 2 of 4 on all-ones input") {
    GraphBuilder b(1);
    auto x = b.input(4, 2, 2);
    x = b.conv("conv", x, 4, 1, 1, 0);
    x = b.global_avgpool("gap", x);
    x = b.flatten("flat", x);
    x = b.linear("fc", x, 3);
    b.output(x);
    auto g = b.build();
    for (auto& v : g.weights()["conv.weight"].data) v = 1.0f;
    auto net = narrow_net(g);
    auto c = net.maximal();
    REQUIRE(net.space().width_groups.size() == 1);
    c.width_choice[net.space().width_groups[0].id] = 2;
    auto plan = net.plan_for(c);
    std::vector<float> ones(16, 1.0f);
    ForwardTrace<float> tr;
    forward_pass<float>(net.base(), net.base().weights(), plan, ones, 1, Mode::Eval, &tr);
    const auto& conv = tr.nodes[*g.index_of("conv")];
    CHECK(conv.shape == TensorShape{1, 2, 2, 2});
    REQUIRE(conv.out.size() == 8);
    for (float v : conv.out) CHECK(v == 4.0f);
}

TEST_CASE("all-skip toy ResNet equals a hand-built reduced graph") {
    auto m = make_zoo_model("toy_resnet", 3, 3, 8, 8, 10);
    auto net = convert(m).supernet;
    auto c = net.maximal();
    for (auto& [id, s] : c.skip_mask) s = true;

    // The downsampling stage remains; identity blocks collapse onto their ReLUs.
    const std::set<std::string> dropped{
        "s1b0_conv_a", "s1b0_bn_a", "s1b0_relu_a", "s1b0_conv_b", "s1b0_bn_b", "s1b0_add",
        "s1b1_conv_a", "s1b1_bn_a", "s1b1_relu_a", "s1b1_conv_b", "s1b1_bn_b", "s1b1_add",
        "s2b1_conv_a", "s2b1_bn_a", "s2b1_relu_a", "s2b1_conv_b", "s2b1_bn_b", "s2b1_add"};
    std::vector<LayerNode> nodes;
    for (const auto& n : net.base().nodes()) {
        if (dropped.count(n.id)) continue;
        auto copy = n;
        if (n.id == "s1b0_relu") copy.inputs = {"stem_relu"};
        if (n.id == "s1b1_relu") copy.inputs = {"s1b0_relu"};
        if (n.id == "s2b1_relu") copy.inputs = {"s2b0_relu"};
        nodes.push_back(copy);
    }
    WeightStore w;
    for (const auto& n : nodes)
        for (const auto& [role, key] : n.weight_refs) w[key] = net.base().weights().at(key);
    ModelGraph reduced(nodes, w);
    REQUIRE(validate_graph(reduced).empty());

    Rng rng(2);
    auto batch = oracle::random_batch(rng, m, 4);
    net.activate(c);
    CHECK(forward(net, batch) == forward(reduced, full_plan(reduced), batch));
}

TEST_CASE("gradients match finite differences on every op kind, width and kernel") {
    auto g = oracle::all_ops_model(21);
    auto net = narrow_net(g);
    REQUIRE(net.space().kernel_dims.count("c1"));
    Rng rng(3);
    auto batch = oracle::random_batch(rng, g, 3);
    for (int div : {1, 2})
        for (bool crop : {false, true})
            for (auto mode : {Mode::Eval, Mode::Train}) {
                auto plan = net.plan_for(scaled(net, div, crop));
                auto r = oracle::finite_difference_check(net.base(), plan, batch.inputs, batch.labels, mode);
                INFO("width/" << div << " crop " << crop << " train " << (mode == Mode::Train) << " worst at "
                              << r.worst_at << " kinks " << r.kinks);
                MESSAGE("width/" << div << " crop " << crop << " train " << (mode == Mode::Train) << ": checked "
                                 << r.checked << ", kinks " << r.kinks << ", worst " << r.worst);
                CHECK(r.checked > 50);
                CHECK(r.kinks * 10 < r.checked);
                CHECK(r.worst <= 1e-4);
            }
}

TEST_CASE("gradients match finite differences on the zoo") {
    Rng rng(4);
    for (const auto& name : zoo_names()) {
        auto m = make_zoo_model(name, 1, 2, 6, 6, 4);
        auto net = convert(m).supernet;
        auto batch = oracle::random_batch(rng, m, 3);
        for (int trial = 0; trial < 3; ++trial) {
            auto c = trial == 0 ? net.maximal() : trial == 1 ? net.minimal() : sample_config(net.space(), rng);
            auto r = oracle::finite_difference_check(net.base(), net.plan_for(c), batch.inputs, batch.labels,
                                                     Mode::Train, 40);
            INFO(name << " trial " << trial << " worst at " << r.worst_at);
            CHECK(r.worst <= 1e-4);
        }
    }
}

TEST_CASE("inactive slices get exactly zero gradient") {
    auto g = oracle::all_ops_model(5);
    auto net = narrow_net(g);
    auto c = scaled(net, 2, true);
    net.activate(c);
    Rng rng(6);
    auto r = backward(net, oracle::random_batch(rng, g, 4));
    const auto* w = r.grads.find("c2.weight");
    REQUIRE(w != nullptr);
    // c2 is 4x4x3x3 at width 2 of 4 with 2 input channels
    for (std::int64_t o = 0; o < 4; ++o)
        for (std::int64_t i = 0; i < 4; ++i)
            for (std::int64_t k = 0; k < 9; ++k) {
                const auto j = static_cast<std::size_t>((o * 4 + i) * 9 + k);
                const bool live = o < 2 && i < 2;
                CHECK(bool(w->active[j]) == live);
                if (!live) CHECK(w->grad[j] == 0.0f);
            }
    // c1 cropped from 5x5 to 3x3: the border ring is inactive
    const auto* c1 = r.grads.find("c1.weight");
    REQUIRE(c1 != nullptr);
    for (std::int64_t ky = 0; ky < 5; ++ky)
        for (std::int64_t kx = 0; kx < 5; ++kx) {
            const bool ring = ky == 0 || ky == 4 || kx == 0 || kx == 4;
            const auto j = static_cast<std::size_t>(ky * 5 + kx);
            CHECK(bool(c1->active[j]) == !ring);
            if (ring) CHECK(c1->grad[j] == 0.0f);
        }
    for (const auto& [key, gt] : r.grads.tensors)
        for (std::size_t j = 0; j < gt.grad.size(); ++j)
            if (!gt.active[j]) CHECK(gt.grad[j] == 0.0f);

    // skipped block layers contribute no tensors at all
    auto s = net.maximal();
    for (auto& [id, v] : s.skip_mask) v = true;
    net.activate(s);
    auto skipped = backward(net, oracle::random_batch(rng, g, 4));
    CHECK(skipped.grads.find("c2.weight") == nullptr);
    CHECK(skipped.grads.find("dw.weight") == nullptr);
}

TEST_CASE("matching one-hot logits give near-zero loss and gradients") {
    GraphBuilder b(1);
    auto x = b.input(4, 1, 1);
    x = b.flatten("flat", x);
    x = b.linear("fc", x, 4);
    b.output(x);
    auto g = b.build();
    auto& w = g.weights()["fc.weight"].data;
    std::fill(w.begin(), w.end(), 0.0f);
    for (int i = 0; i < 4; ++i) w[i * 4 + i] = 100.0f;
    std::fill(g.weights()["fc.bias"].data.begin(), g.weights()["fc.bias"].data.end(), 0.0f);
    Batch batch{TensorShape{4, 4, 1, 1}, std::vector<float>(16, 0.0f), {0, 1, 2, 3}};
    for (int i = 0; i < 4; ++i) batch.inputs[i * 4 + i] = 1.0f;
    auto r = train_pass(g, full_plan(g), batch);
    CHECK(r.loss < 1e-30);
    for (const auto& [key, gt] : r.grads.tensors)
        for (float v : gt.grad) CHECK(std::abs(v) < 1e-30);
}

TEST_CASE("cross-entropy examples") {
    std::vector<float> uniform(10, 0.7f);
    std::vector<std::int32_t> label{3};
    CHECK(cross_entropy<float>(uniform, label, 10) == doctest::Approx(std::log(10.0)).epsilon(1e-6));
    CHECK(cross_entropy<double>(std::vector<double>(10, -2.0), label, 10) ==
          doctest::Approx(2.302585092994046).epsilon(1e-14));

    std::vector<double> big{1000.0, 0.0};
    std::vector<double> d;
    const double l = cross_entropy<double>(big, std::vector<std::int32_t>{0}, 2, &d);
    CHECK(std::isfinite(l));
    CHECK(l < 1e-9);
    CHECK(std::isfinite(d[0]));
    std::vector<float> bigf{1000.0f, 0.0f};
    CHECK(cross_entropy<float>(bigf, std::vector<std::int32_t>{0}, 2) < 1e-9f);
}

TEST_CASE("cross-entropy against a 256-bit oracle") {
    Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        const int classes = 2 + static_cast<int>(rng.below(9));
        const int n = 1 + static_cast<int>(rng.below(5));
        const double scale = trial < 100 ? 5.0 : 1e4;
        std::vector<double> z(n * classes);
        for (auto& v : z) v = scale * (2 * rng.uniform() - 1);
        std::vector<std::int32_t> y(n);
        for (auto& v : y) v = static_cast<std::int32_t>(rng.below(classes));
        const double ref = mpfr_cross_entropy(z, y, classes);
        const double got = cross_entropy<double>(z, y, classes);
        CHECK(std::abs(got - ref) <= 1e-12 * std::max(1.0, std::abs(ref)));
        std::vector<float> zf(z.begin(), z.end());
        std::vector<float> df;
        const float gotf = cross_entropy<float>(zf, y, classes, &df);
        CHECK(std::isfinite(gotf));
        for (float v : df) CHECK(std::isfinite(v));
        const double reff = mpfr_cross_entropy(std::vector<double>(zf.begin(), zf.end()), y, classes);
        CHECK(std::abs(gotf - reff) <= 1e-5 * std::max(1.0, std::abs(reff)));
    }
}

TEST_CASE("distillation identities") {
    Rng rng(8);
    std::vector<double> s(12), t(12);
    for (auto& v : s) v = 3 * rng.normal();
    for (auto& v : t) v = 3 * rng.normal();
    std::vector<std::int32_t> y{1, 0, 3};
    const double ce = cross_entropy<double>(s, y, 4);
    for (double alpha : {0.0, 0.3, 0.5, 1.0})
        CHECK(distillation_loss<double>(s, s, y, 4, alpha, 4.0) == doctest::Approx((1 - alpha) * ce).epsilon(1e-12));
    CHECK(distillation_loss<double>(s, t, y, 4, 0.0, 4.0) == ce);
    std::vector<float> sf(s.begin(), s.end()), tf(t.begin(), t.end());
    CHECK(distillation_loss<float>(sf, tf, y, 4, 0.0, 2.0) == cross_entropy<float>(sf, y, 4));
}

TEST_CASE("distillation two-class closed form") {
    // teacher softmax (1/4, 3/4), student (1/2, 1/2)
    std::vector<double> teacher{0.0, std::log(3.0)}, student{0.0, 0.0};
    std::vector<std::int32_t> y{0};
    const double kl = 0.25 * std::log(0.25 / 0.5) + 0.75 * std::log(0.75 / 0.5);
    CHECK(distillation_loss<double>(student, teacher, y, 2, 1.0, 1.0) == doctest::Approx(kl).epsilon(1e-14));
    // T = 2: teacher logits (0, 2 ln 3) soften to the same (1/4, 3/4); scaled by T^2
    std::vector<double> teacher2{0.0, 2 * std::log(3.0)};
    CHECK(distillation_loss<double>(student, teacher2, y, 2, 1.0, 2.0) == doctest::Approx(4 * kl).epsilon(1e-14));
    // mixed: 0.5 * 4 * KL + 0.5 * ln 2
    CHECK(distillation_loss<double>(student, teacher2, y, 2, 0.5, 2.0) ==
          doctest::Approx(2 * kl + 0.5 * std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("loss gradients match finite differences") {
    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> s(15), t(15);
        for (auto& v : s) v = 2 * rng.normal();
        for (auto& v : t) v = 2 * rng.normal();
        std::vector<std::int32_t> y{0, 4, 2};
        const double alpha = rng.uniform(), temp = 0.5 + 4 * rng.uniform();
        std::vector<double> d, dce;
        distillation_loss<double>(s, t, y, 5, alpha, temp, &d);
        cross_entropy<double>(s, y, 5, &dce);
        for (std::size_t j = 0; j < s.size(); ++j) {
            auto p = s, m = s;
            p[j] += 1e-6;
            m[j] -= 1e-6;
            const double fd = (distillation_loss<double>(p, t, y, 5, alpha, temp) -
                               distillation_loss<double>(m, t, y, 5, alpha, temp)) / 2e-6;
            CHECK(std::abs(fd - d[j]) <= 1e-7 + 1e-6 * std::abs(fd));
            const double fdce = (cross_entropy<double>(p, y, 5) - cross_entropy<double>(m, y, 5)) / 2e-6;
            CHECK(std::abs(fdce - dce[j]) <= 1e-7 + 1e-6 * std::abs(fdce));
        }
    }
}

TEST_CASE("sgd examples") {
    WeightStore w;
    w["a"] = {TensorShape{3}, {1.0f, -2.0f, 0.5f}};
    GradientStore g;
    auto& slot = g.slot("a", 3);
    slot.grad = {0.5f, 0.25f, -1.0f};
    std::fill(slot.active.begin(), slot.active.end(), 1);

    OptimizerState plain{0.1, 0.0, 0.0};
    auto w1 = w;
    sgd_step(w1, g, plain);
    CHECK(w1["a"].data == std::vector<float>{1.0f - 0.1f * 0.5f, -2.0f - 0.1f * 0.25f, 0.5f + 0.1f * 1.0f});

    OptimizerState mom{0.1, 0.9, 0.0};
    auto w2 = w;
    sgd_step(w2, g, mom);
    sgd_step(w2, g, mom);
    for (int j = 0; j < 3; ++j)
        CHECK(w2["a"].data[j] == doctest::Approx(w["a"].data[j] - 0.1 * slot.grad[j] * 2.9).epsilon(1e-6));

    // weight decay folds into the velocity
    OptimizerState decay{0.1, 0.0, 0.01};
    auto w3 = w;
    sgd_step(w3, g, decay);
    CHECK(w3["a"].data[0] == doctest::Approx(1.0 - 0.1 * (0.5 + 0.01 * 1.0)).epsilon(1e-6));

    // zero gradient or untracked entries: bit-for-bit unchanged
    GradientStore zero;
    auto& z = zero.slot("a", 3);
    std::fill(z.active.begin(), z.active.end(), 1);
    OptimizerState st{0.1, 0.9, 0.0};
    auto w4 = w;
    sgd_step(w4, zero, st);
    CHECK(w4 == w);
    GradientStore untracked;
    untracked.slot("a", 3).grad = {5.0f, 5.0f, 5.0f};
    OptimizerState wd{0.1, 0.9, 0.5};
    auto w5 = w;
    sgd_step(w5, untracked, wd);
    CHECK(w5 == w);
}

TEST_CASE("determinism of logits and gradients") {
    auto m = make_zoo_model("toy_mobilenet", 2, 3, 8, 8, 10);
    auto net = convert(m).supernet;
    Rng rng(10);
    auto batch = oracle::random_batch(rng, m, 5);
    auto c = sample_config(net.space(), rng);
    net.activate(c);
    auto a = backward(net, batch);
    auto b = backward(net, batch);
    CHECK(a.logits == b.logits);
    CHECK(a.grads == b.grads);
    CHECK(a.loss == b.loss);
    CHECK(forward(net, batch) == forward(net, batch));
}

TEST_CASE("weight sharing: an update through A reaches B only via shared slices") {
    auto m = make_zoo_model("toy_resnet", 4, 3, 8, 8, 10);
    auto net = convert(m).supernet;
    Rng rng(11);
    auto batch = oracle::random_batch(rng, m, 4);
    const auto a = net.minimal();
    auto b = sample_config(net.space(), rng);
    for (auto& [id, s] : b.skip_mask) s = false;

    const auto before = net.weights();
    net.activate(b);
    const auto grads_b = backward(net, batch).grads;
    const auto logits_b0 = forward(net, batch);

    net.activate(a);
    auto pass = backward(net, batch);
    OptimizerState opt{0.1, 0.0, 0.0};
    sgd_step(net.weights(), pass.grads, opt);

    // only A's touched elements moved
    for (const auto& [key, t] : net.weights()) {
        const auto* ga = pass.grads.find(key);
        for (std::size_t j = 0; j < t.data.size(); ++j)
            if (!ga || !ga->active[j]) CHECK(t.data[j] == before.at(key).data[j]);
    }
    // B sees exactly the moved elements inside its own slices
    WeightStore mixed = before;
    for (const auto& [key, gb] : grads_b.tensors)
        for (std::size_t j = 0; j < gb.active.size(); ++j)
            if (gb.active[j]) mixed[key].data[j] = net.weights().at(key).data[j];
    net.activate(b);
    const auto logits_b1 = forward(net, batch);
    auto plan_b = net.plan_for(b);
    CHECK(forward_pass<float>(net.base(), mixed, plan_b, batch.inputs, 4, Mode::Eval) == logits_b1);
    CHECK(logits_b1 != logits_b0);
}

TEST_CASE("batch norm statistics") {
    GraphBuilder b(12);
    auto x = b.input(2, 2, 2);
    x = b.conv("conv", x, 4, 1, 1, 0);
    x = b.batchnorm("bn", x);
    x = b.global_avgpool("gap", x);
    x = b.flatten("flat", x);
    x = b.linear("fc", x, 2);
    b.output(x);
    auto g = b.build();
    auto net = narrow_net(g);
    auto c = net.maximal();
    c.width_choice[net.space().width_groups[0].id] = 2;
    auto plan = net.plan_for(c);
    Rng rng(13);
    auto batch = oracle::random_batch(rng, g, 3);

    ForwardTrace<double> tr;
    auto w = oracle::to_double(net.base().weights());
    forward_pass<double>(net.base(), w, plan, std::vector<double>(batch.inputs.begin(), batch.inputs.end()), 3,
                         Mode::Train, &tr);
    const auto& conv_out = tr.nodes[*g.index_of("conv")].out; // (3, 2, 2, 2)
    const auto rm0 = w.at("bn.running_mean").data;
    const auto rv0 = w.at("bn.running_var").data;
    update_running_stats<double>(net.base(), w, plan, tr, 0.1);
    for (int ch = 0; ch < 2; ++ch) {
        double mean = 0, sq = 0;
        for (int n = 0; n < 3; ++n)
            for (int p = 0; p < 4; ++p) mean += conv_out[(n * 2 + ch) * 4 + p];
        mean /= 12;
        for (int n = 0; n < 3; ++n)
            for (int p = 0; p < 4; ++p) sq += std::pow(conv_out[(n * 2 + ch) * 4 + p] - mean, 2);
        CHECK(w.at("bn.running_mean").data[ch] == doctest::Approx(0.9 * rm0[ch] + 0.1 * mean).epsilon(1e-12));
        CHECK(w.at("bn.running_var").data[ch] == doctest::Approx(0.9 * rv0[ch] + 0.1 * sq / 11).epsilon(1e-12));
    }
    for (int ch = 2; ch < 4; ++ch) {
        CHECK(w.at("bn.running_mean").data[ch] == rm0[ch]);
        CHECK(w.at("bn.running_var").data[ch] == rv0[ch]);
    }

    // evaluation normalizes with running statistics: output independent of batch composition
    auto one = forward(net.base(), plan, Batch{g.input_shape(1), {batch.inputs.begin(), batch.inputs.begin() + 8}, {0}});
    auto all = forward(net.base(), plan, batch);
    CHECK(std::vector<float>(all.begin(), all.begin() + 2) == one);
}

TEST_CASE("non-finite activations are reported") {
    auto m = make_zoo_model("toy_cnn", 1, 1, 12, 12, 10);
    Batch batch{m.input_shape(1), std::vector<float>(144, 0.5f), {0}};
    batch.inputs[17] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(forward(m, full_plan(m), batch), NonFiniteActivation);
}
