// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>
#include <sstream>

#include "bnas/metrics.hpp"
#include "bnas/training.hpp"
#include "bnas/zoo.hpp"
#include "support/oracles.hpp"

using namespace bnas;

namespace {

SuperNetwork small_cnn(std::uint64_t seed = 1) {
    return convert(make_zoo_model("toy_cnn", seed, 1, 8, 8, 4)).supernet;
}

Dataset small_data(std::uint64_t seed, std::int64_t n) {
    return make_synthetic_dataset(seed, n, 4, TensorShape{1, 8, 8});
}

// Elementwise left-to-right sum of isolated per-config gradients.
GradientStore summed(const std::vector<GradientStore>& parts) {
    GradientStore out;
    for (const auto& p : parts)
        for (const auto& [key, g] : p.tensors) {
            auto& slot = out.slot(key, g.grad.size());
            for (std::size_t j = 0; j < g.grad.size(); ++j) {
                slot.grad[j] = slot.grad[j] + g.grad[j];
                slot.active[j] = slot.active[j] | g.active[j];
            }
        }
    return out;
}

// Independent passes over a frozen copy of the network.
std::vector<GradientStore> isolated(const SuperNetwork& net, const Batch& batch,
                                    const std::vector<SubnetworkConfig>& configs, bool distill) {
    std::vector<GradientStore> out;
    std::vector<float> teacher;
    for (std::size_t i = 0; i < configs.size(); ++i) {
        LossSpec spec;
        if (distill && i > 0) {
            spec.kind = LossSpec::Kind::Distillation;
            spec.teacher = teacher;
        }
        auto r = train_pass(net.base(), net.plan_for(configs[i]), batch, spec);
        if (i == 0) teacher = r.logits;
        out.push_back(std::move(r.grads));
    }
    return out;
}

TrainingSchedule quick_schedule() {
    TrainingSchedule s;
    s.batch_size = 16;
    s.epochs = 2;
    s.epochs_per_stage = 1;
    s.n_random = 1;
    return s;
}

} // namespace

TEST_CASE("n_random = 0 aggregates a_max and a_min") {
    auto net = small_cnn();
    Rng rng(1);
    auto batch = oracle::random_batch(rng, net.base(), 8);
    for (bool distill : {false, true}) {
        auto frozen = net;
        auto parts = isolated(frozen, batch, {net.maximal(), net.minimal()}, distill);
        auto agg = sandwich_gradients(net, batch, {net.maximal(), net.minimal()}, distill);
        CHECK(agg.grads == summed(parts));

        // a slice active only in a_max carries a_max's gradient alone
        const auto* g = agg.grads.find("block4_conv.weight");
        const auto* gmin = parts[1].find("block4_conv.weight");
        const auto* gmax = parts[0].find("block4_conv.weight");
        REQUIRE((g && gmin && gmax));
        int only_max = 0;
        for (std::size_t j = 0; j < g->grad.size(); ++j)
            if (gmax->active[j] && !gmin->active[j]) {
                CHECK(g->grad[j] == gmax->grad[j]);
                ++only_max;
            }
        CHECK(only_max > 0);
    }
}

TEST_CASE("aggregation equals the sum of isolated gradients") {
    auto net = convert(make_zoo_model("toy_resnet", 2, 3, 8, 8, 10)).supernet;
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        auto batch = oracle::random_batch(rng, net.base(), 2 + static_cast<std::int64_t>(rng.below(6)));
        std::vector<SubnetworkConfig> configs;
        const int k = 2 + static_cast<int>(rng.below(4));
        for (int i = 0; i < k; ++i) configs.push_back(sample_config(net.space(), rng));
        const bool distill = trial % 2 == 1;
        auto frozen = net;
        auto expect = summed(isolated(frozen, batch, configs, distill));
        auto agg = sandwich_gradients(net, batch, configs, distill);
        CHECK(agg.grads == expect);
    }
}

TEST_CASE("single-config space doubles the gradient") {
    auto m = make_zoo_model("toy_cnn", 3, 1, 8, 8, 4);
    auto roles = detect_elastic_layers(m);
    auto groups = build_width_groups(m, roles);
    SuperNetwork net(m, SearchSpace{}, roles, groups);
    REQUIRE(net.space().cardinality() == 1);
    REQUIRE(net.maximal() == net.minimal());
    Rng rng(3);
    auto batch = oracle::random_batch(rng, m, 6);
    auto single = train_pass(m, full_plan(m), batch).grads;
    auto agg = sandwich_gradients(net, batch, {net.maximal(), net.minimal()}, false);
    for (auto& [key, g] : single.tensors)
        for (auto& v : g.grad) v = v + v;
    CHECK(agg.grads == single);
}

TEST_CASE("sandwich step applies one optimizer step on the summed gradient") {
    auto net = small_cnn(4);
    auto twin = net;
    Rng rng(5), rng_twin(5);
    auto batch = oracle::random_batch(rng, net.base(), 8);
    Rng r1(6), r2(6);
    OptimizerState opt;
    sandwich_train_step(net, batch, 2, r1, true, opt);

    std::vector<SubnetworkConfig> configs{twin.maximal(), twin.minimal()};
    for (int i = 0; i < 2; ++i) configs.push_back(sample_config(twin.space(), r2));
    auto agg = sandwich_gradients(twin, batch, configs, true);
    OptimizerState opt2;
    sgd_step(twin.weights(), agg.grads, opt2);
    CHECK(net.weights() == twin.weights());
}

TEST_CASE("running statistics are updated for each sandwich pass") {
    auto net = small_cnn(7);
    Rng rng(8);
    auto batch = oracle::random_batch(rng, net.base(), 8);
    const auto before = net.weights().at("block1_bn.running_mean").data;
    sandwich_gradients(net, batch, {net.maximal()}, false);
    const auto once = net.weights().at("block1_bn.running_mean").data;
    CHECK(once != before);
    // a_min touches only the leading channels of block1
    sandwich_gradients(net, batch, {net.minimal()}, false);
    const auto twice = net.weights().at("block1_bn.running_mean").data;
    std::int64_t w_min = 0;
    for (const auto& g : net.space().width_groups)
        if (g.members == std::vector<std::string>{"block1_conv"}) w_min = g.options.back();
    REQUIRE(w_min > 0);
    for (std::size_t c = 0; c < twice.size(); ++c) {
        if (static_cast<std::int64_t>(c) < w_min) CHECK(twice[c] != once[c]);
        else CHECK(twice[c] == once[c]);
    }
}

TEST_CASE("progressive shrinking locks dimensions stage by stage") {
    auto net = convert(make_zoo_model("toy_resnet", 1, 1, 6, 6, 4)).supernet;
    auto train = make_synthetic_dataset(1, 96, 4, TensorShape{1, 6, 6});
    auto val = make_synthetic_dataset(2, 32, 4, TensorShape{1, 6, 6});
    auto s = quick_schedule();
    s.kind = TrainingSchedule::Kind::ProgressiveShrinking;
    s.batch_size = 8;
    s.epochs_per_stage = 1;
    Rng rng(9);
    SampleLog log;
    auto report = progressive_shrinking_train(net, train, val, s, rng, &log);
    REQUIRE(report.epochs.size() == 3);
    CHECK(report.epochs[0].stage == "kernel");
    CHECK(report.epochs[1].stage == "depth");
    CHECK(report.epochs[2].stage == "width");
    REQUIRE(log.size() == 36);
    const auto mx = net.maximal();
    std::set<std::map<std::string, std::int64_t>> kernels_seen, widths_seen;
    std::set<std::map<std::string, bool>> skips_seen;
    for (const auto& [stage, c] : log) {
        CHECK_NOTHROW(check_config(net.space(), c));
        if (stage <= 1) CHECK(c.width_choice == mx.width_choice);
        if (stage == 0) CHECK(c.skip_mask == mx.skip_mask);
        if (stage == 2) widths_seen.insert(c.width_choice);
        if (stage == 1) skips_seen.insert(c.skip_mask);
        if (stage == 0) kernels_seen.insert(c.kernel_choice);
    }
    CHECK(kernels_seen.size() > 1);
    CHECK(skips_seen.size() > 1);
    CHECK(widths_seen.size() > 1);
    for (const auto& e : report.epochs) CHECK(e.configs_sampled == 12);
}

TEST_CASE("final stage covers every dimension over 100 batches") {
    auto net = small_cnn(10);
    auto train = small_data(3, 400);
    auto val = small_data(4, 16);
    TrainingSchedule s;
    s.kind = TrainingSchedule::Kind::ProgressiveShrinking;
    s.stages = {DimensionKind::Kernel, DimensionKind::Depth, DimensionKind::Width};
    s.epochs_per_stage = 1;
    s.batch_size = 4;
    s.distillation = false;
    Rng rng(11);
    SampleLog log;
    progressive_shrinking_train(net, train, val, s, rng, &log);
    std::map<std::string, std::set<std::int64_t>> widths;
    int final_batches = 0;
    for (const auto& [stage, c] : log) {
        if (stage != 2) continue;
        ++final_batches;
        for (const auto& [g, w] : c.width_choice) widths[g].insert(w);
    }
    CHECK(final_batches == 100);
    for (const auto& g : net.space().width_groups) CHECK(widths[g.id].size() > 1);
}

TEST_CASE("zero-epoch schedules change nothing") {
    auto net = small_cnn(12);
    const auto before = net.weights();
    auto train = small_data(5, 32), val = small_data(6, 16);
    Rng rng(13);
    auto s = quick_schedule();
    s.epochs = 0;
    CHECK(sandwich_train(net, train, val, s, rng).epochs.empty());
    s.kind = TrainingSchedule::Kind::ProgressiveShrinking;
    s.epochs_per_stage = 0;
    CHECK(progressive_shrinking_train(net, train, val, s, rng).epochs.empty());
    CHECK(net.weights() == before);
}

TEST_CASE("training is deterministic") {
    auto train = small_data(7, 64), val = small_data(8, 32);
    for (auto kind : {TrainingSchedule::Kind::Sandwich, TrainingSchedule::Kind::ProgressiveShrinking}) {
        auto s = quick_schedule();
        s.kind = kind;
        auto a = small_cnn(14), b = small_cnn(14);
        Rng ra(15), rb(15);
        auto ra_report = train_supernet(a, train, val, s, ra);
        auto rb_report = train_supernet(b, train, val, s, rb);
        CHECK(ra_report == rb_report);
        CHECK(a.weights() == b.weights());
        CHECK(ra_report.csv() == rb_report.csv());
    }
}

TEST_CASE("report contents") {
    auto net = small_cnn(16);
    auto train = small_data(9, 64), val = small_data(10, 32);
    auto s = quick_schedule();
    s.epochs = 3;
    Rng rng(17);
    auto report = sandwich_train(net, train, val, s, rng);
    REQUIRE(report.epochs.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        const auto& e = report.epochs[i];
        CHECK(e.epoch == static_cast<int>(i) + 1);
        CHECK(e.stage == "sandwich");
        CHECK((e.acc_max >= 0.0 && e.acc_max <= 1.0));
        CHECK((e.acc_min >= 0.0 && e.acc_min <= 1.0));
        CHECK(e.configs_sampled == 4 * 3); // 4 batches x (max, min, 1 random)
    }
    std::istringstream csv(report.csv());
    std::string line;
    std::getline(csv, line);
    CHECK(line == "epoch,stage,mean_loss,acc_max,acc_min");
    int rows = 0;
    while (std::getline(csv, line)) ++rows;
    CHECK(rows == 3);
    CHECK(report.epochs.back().acc_max == evaluate(net, net.maximal(), val));
    CHECK(report.epochs.back().acc_min == evaluate(net, net.minimal(), val));
}

TEST_CASE("evaluate examples") {
    auto m = make_zoo_model("toy_cnn", 18, 1, 8, 8, 10);
    auto data = make_synthetic_dataset(11, 1000, 10, TensorShape{1, 8, 8});

    auto one = data.head(1);
    auto logits = forward(m, full_plan(m), one.batch(0, 1));
    one.labels[0] = argmax_rows(logits, 10)[0];
    CHECK(evaluate(m, full_plan(m), one) == 1.0);
    one.labels[0] = (one.labels[0] + 1) % 10;
    CHECK(evaluate(m, full_plan(m), one) == 0.0);

    auto shuffled = data;
    Rng rng(19);
    for (auto& l : shuffled.labels) l = static_cast<std::int32_t>(rng.below(10));
    const double acc = evaluate(m, full_plan(m), shuffled);
    CHECK(acc >= 0.05);
    CHECK(acc <= 0.15);

    auto net = convert(m).supernet;
    CHECK(evaluate(net, net.maximal(), data) == evaluate(m, full_plan(m), data));
    CHECK(evaluate(net, net.minimal(), data) == evaluate(net, net.minimal(), data));
    // batch size does not change the result
    CHECK(evaluate(m, full_plan(m), data, 7) == evaluate(m, full_plan(m), data, 256));
}

TEST_CASE("pre-training reduces the loss") {
    auto m = make_zoo_model("toy_cnn", 20, 1, 8, 8, 4);
    auto train = small_data(12, 256), val = small_data(13, 128);
    TrainingSchedule hyper;
    Rng rng(21);
    auto report = train_model(m, train, val, 3, hyper, rng);
    REQUIRE(report.epochs.size() == 3);
    CHECK(report.epochs.back().mean_loss < report.epochs.front().mean_loss);
    CHECK(report.epochs.back().stage == "pretrain");
}

TEST_CASE("a fixed teacher distills every config, a_max included") {
    auto net = small_cnn(22);
    Rng rng(23);
    auto batch = oracle::random_batch(rng, net.base(), 6);
    const auto original = net;
    const auto teacher = forward(original.base(), original.plan_for(original.maximal()), batch, Mode::Eval);
    std::vector<SubnetworkConfig> configs{net.maximal(), net.minimal(), sample_config(net.space(), rng)};

    std::vector<GradientStore> parts;
    for (const auto& c : configs) {
        LossSpec spec;
        spec.kind = LossSpec::Kind::Distillation;
        spec.teacher = teacher;
        parts.push_back(train_pass(original.base(), original.plan_for(c), batch, spec).grads);
    }
    auto agg = sandwich_gradients(net, batch, configs, true, 0.5, 4.0, teacher);
    CHECK(agg.grads == summed(parts));
    // without distillation the teacher is ignored
    auto plain = net;
    CHECK(sandwich_gradients(plain, batch, configs, false, 0.5, 4.0, teacher).grads ==
          summed(isolated(original, batch, configs, false)));
}

TEST_CASE("original-model teacher") {
    auto train = small_data(14, 64), val = small_data(15, 32);
    for (auto kind : {TrainingSchedule::Kind::Sandwich, TrainingSchedule::Kind::ProgressiveShrinking}) {
        auto s = quick_schedule();
        s.kind = kind;
        s.teacher = TrainingSchedule::Teacher::Original;
        auto a = small_cnn(24), b = small_cnn(24), c = small_cnn(24);
        Rng ra(25), rb(25), rc(25);
        train_supernet(a, train, val, s, ra);
        train_supernet(b, train, val, s, rb);
        CHECK(a.weights() == b.weights());
        s.teacher = TrainingSchedule::Teacher::Maximal;
        train_supernet(c, train, val, s, rc);
        CHECK(a.weights() != c.weights());
    }
}
