// SPDX-License-Identifier: Apache-2.0
// One PASS/FAIL line per acceptance criterion. Pass criterion numbers as
// arguments to run a subset; the exit status is nonzero if any line fails.
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "bnas/cli.hpp"
#include "bnas/errors.hpp"
#include "bnas/metrics.hpp"
#include "bnas/search.hpp"
#include "bnas/training.hpp"
#include "bnas/zoo.hpp"
#include "support/oracles.hpp"

using namespace bnas;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

// 1. Maximal subnetwork of the converted toy ResNet and inverted-residual net
// reproduces the original within 1e-6 relative on 8 probe batches.
Verdict conversion_fidelity() {
    std::ostringstream d;
    bool ok = true;
    for (const char* name : {"toy_resnet", "toy_mobilenet"}) {
        const auto m = make_zoo_model(name, 1, 3, 8, 8, 10);
        const auto net = convert(m).supernet;
        const auto r = fidelity_check(m, net, 2024, 8, 4, 1e-6);
        ok = ok && r.passed;
        d << name << " max|diff| " << fmt("%.2e", r.max_abs_diff) << " (allowed " << fmt("%.2e", r.tolerance) << ") ";
        if (std::string(name) == "toy_resnet" && net.space().skippable_blocks.size() != 3) {
            ok = false;
            d << "[expected 3 identity blocks] ";
        }
    }
    return {ok, d.str()};
}

ModelGraph single_conv(std::int64_t channels) {
    GraphBuilder b(1);
    auto x = b.input(3, 8, 8);
    x = b.conv("conv", x, channels, 3);
    x = b.relu("relu", x);
    x = b.global_avgpool("gap", x);
    x = b.flatten("flat", x);
    x = b.linear("fc", x, 10);
    b.output(x);
    return b.build();
}

// 2. Cardinality equals enumeration on every space up to 1000 configs, and
// 512 channels give {512, 256, 128}.
Verdict search_space_law() {
    int checked = 0, mismatched = 0;
    std::vector<ModelGraph> models;
    for (const auto& name : zoo_names()) models.push_back(make_zoo_model(name, 1, 3, 8, 8, 10));
    for (std::uint64_t seed = 0; seed < 60; ++seed) models.push_back(oracle::random_model(seed));
    for (const auto& m : models) {
        SuperNetwork net = [&] {
            try {
                return convert(m).supernet;
            } catch (const EmptySpace&) {
                return SuperNetwork(m, {}, {}, {});
            }
        }();
        const auto card = net.space().cardinality();
        if (card > 1000) continue;
        auto all = oracle::enumerate_configs(net.space());
        const std::set<SubnetworkConfig> distinct(all.begin(), all.end());
        if (all.size() != card || distinct.size() != card) ++mismatched;
        ++checked;
    }
    const auto net = convert(single_conv(512)).supernet;
    const auto& opts = net.space().width_groups.at(0).options;
    const bool rule = opts == std::vector<std::int64_t>{512, 256, 128};
    std::ostringstream d;
    d << checked << " spaces enumerated, " << mismatched << " mismatches; 512 -> {";
    for (std::size_t i = 0; i < opts.size(); ++i) d << (i ? "," : "") << opts[i];
    d << "}";
    return {mismatched == 0 && checked >= 10 && rule, d.str()};
}

// 3. Finite differences on every op kind at full/half width and full/cropped
// kernels, in both modes, at 1e-4 relative tolerance.
Verdict gradient_correctness() {
    const auto g = oracle::all_ops_model(21);
    const auto net = convert(g, oracle::narrow_policy()).supernet;
    Rng rng(3);
    const auto batch = oracle::random_batch(rng, g, 3);
    double worst = 0.0;
    long checked = 0, kinks = 0;
    bool ok = net.space().kernel_dims.count("c1") == 1;
    for (int div : {1, 2})
        for (bool crop : {false, true})
            for (auto mode : {Mode::Eval, Mode::Train}) {
                auto c = net.maximal();
                for (const auto& grp : net.space().width_groups) c.width_choice[grp.id] = grp.max_channels / div;
                if (crop)
                    for (const auto& [id, o] : net.space().kernel_dims) c.kernel_choice[id] = o.back();
                const auto r =
                    oracle::finite_difference_check(net.base(), net.plan_for(c), batch.inputs, batch.labels, mode);
                worst = std::max(worst, r.worst);
                checked += r.checked;
                kinks += r.kinks;
                ok = ok && r.worst <= 1e-4 && r.checked > 50;
            }
    std::ostringstream d;
    d << "8 settings, " << checked << " elements, worst rel err " << fmt("%.2e", worst) << ", " << kinks
      << " skipped at kinks";
    return {ok, d.str()};
}

// 4. Aggregated sandwich gradient equals the elementwise left-to-right sum of
// isolated per-config gradients, exactly.
Verdict sandwich_aggregation() {
    auto net = convert(make_zoo_model("toy_resnet", 2, 3, 8, 8, 10)).supernet;
    Rng rng(2);
    int equal = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const auto batch = oracle::random_batch(rng, net.base(), 2 + static_cast<std::int64_t>(rng.below(6)));
        std::vector<SubnetworkConfig> configs{net.maximal(), net.minimal()};
        const int extra = static_cast<int>(rng.below(4));
        for (int i = 0; i < extra; ++i) configs.push_back(sample_config(net.space(), rng));
        const bool distill = trial % 2 == 1;

        const auto frozen = net;
        GradientStore expect;
        std::vector<float> teacher;
        for (std::size_t i = 0; i < configs.size(); ++i) {
            LossSpec spec;
            if (distill && i > 0) spec.kind = LossSpec::Kind::Distillation, spec.teacher = teacher;
            auto r = train_pass(frozen.base(), frozen.plan_for(configs[i]), batch, spec);
            if (i == 0) teacher = r.logits;
            for (const auto& [key, gt] : r.grads.tensors) {
                auto& slot = expect.slot(key, gt.grad.size());
                for (std::size_t j = 0; j < gt.grad.size(); ++j) {
                    slot.grad[j] = slot.grad[j] + gt.grad[j];
                    slot.active[j] = slot.active[j] | gt.active[j];
                }
            }
        }
        equal += sandwich_gradients(net, batch, configs, distill).grads == expect;
    }
    return {equal == 20, std::to_string(equal) + "/20 cases bit-identical"};
}

// 5. Non-dominated sort against the pairwise oracle; crowding hand cases.
Verdict nsga_oracle() {
    Rng rng(5);
    int agree = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const auto n = 1 + static_cast<std::size_t>(rng.below(200));
        std::vector<Objectives> pop(n);
        std::vector<oracle::Point> pts;
        for (auto& p : pop) {
            p = {double(rng.below(25)) / 25.0, std::int64_t(rng.below(40)) * 10};
            pts.push_back({p.accuracy, p.macs});
        }
        agree += fast_non_dominated_sort(pop) == oracle::brute_force_fronts(pts);
    }
    const double inf = std::numeric_limits<double>::infinity();
    const auto two = crowding_distance({{0.5, 10}, {0.7, 20}});
    const auto line = crowding_distance({{0.1, 100}, {0.2, 200}, {0.3, 300}});
    const auto same = crowding_distance({{0.5, 10}, {0.5, 10}, {0.5, 10}});
    const bool hand = two == std::vector<double>{inf, inf} && line[0] == inf && line[2] == inf &&
                      std::abs(line[1] - 2.0) < 1e-12 && same[1] == 0.0;
    std::ostringstream d;
    d << agree << "/100 populations match; crowding hand cases " << (hand ? "ok" : "wrong");
    return {agree == 100 && hand, d.str()};
}

// 6. Search on a trained toy supernet with at most 200 configs recovers the
// whole exhaustive front.
Verdict front_recovery() {
    const TensorShape shape{1, 12, 12};
    const auto train = make_synthetic_dataset(61, 1024, 10, shape);
    const auto val = make_synthetic_dataset(62, 512, 10, shape);
    auto net = convert(make_zoo_model("toy_cnn", 6, 1, 12, 12, 10)).supernet;
    TrainingSchedule s;
    s.epochs = 2;
    Rng rng(63);
    sandwich_train(net, train, val, s, rng);

    const auto all = oracle::enumerate_configs(net.space());
    if (all.size() > 200) return {false, "space has " + std::to_string(all.size()) + " configs"};
    const auto eval = supernet_evaluator(net, val);
    std::vector<oracle::Point> pts;
    for (const auto& c : all) {
        const auto e = eval(c);
        pts.push_back({e.accuracy, e.macs});
    }
    const auto truth = oracle::pareto_points(pts);

    SearchSettings ss; // population 50, crossover 0.9, mutation 0.02, budget 3000
    const auto archive = evolve(net.space(), eval, ss, 64);
    std::vector<oracle::Point> found;
    for (const auto& ind : archive.front()) found.push_back({ind.objectives.accuracy, ind.objectives.macs});
    const auto got = oracle::pareto_points(found);
    std::size_t hit = 0;
    for (const auto& p : truth) hit += std::binary_search(got.begin(), got.end(), p);
    std::ostringstream d;
    d << all.size() << " configs, true front " << truth.size() << " points, recovered " << hit << ", "
      << archive.evaluations() << " requests";
    return {hit == truth.size() && got == truth, d.str()};
}

// 7. Pre-train a 4-block CNN, convert, sandwich-train, search; some front
// member keeps accuracy within 0.5 points of the pre-trained model at no
// more than 60% of its MACs.
Verdict end_to_end() {
    const TensorShape shape{1, 12, 12};
    const auto train = make_synthetic_dataset(71, 4096, 10, shape);
    const auto val = make_synthetic_dataset(72, 1024, 10, shape);
    auto model = make_zoo_model("toy_cnn", 7, 1, 12, 12, 10);

    // step schedule; a constant rate leaves eval-mode accuracy oscillating with the BN running stats
    TrainingSchedule hyper;
    hyper.batch_size = 64;
    hyper.learning_rate = 0.05;
    Rng pre_rng(73);
    train_model(model, train, val, 10, hyper, pre_rng);
    hyper.learning_rate = 0.005;
    train_model(model, train, val, 5, hyper, pre_rng);
    const int epochs = 15;
    const Objectives baseline{evaluate(model, full_plan(model), val), count_costs(model).total_macs};

    auto net = convert(model).supernet;
    TrainingSchedule s;
    s.kind = TrainingSchedule::Kind::Sandwich;
    s.batch_size = 64;
    s.n_random = 2;
    s.epochs = 8;
    s.learning_rate = 0.02;
    Rng rng(74);
    auto report = sandwich_train(net, train, val, s, rng);
    s.epochs = 4;
    s.learning_rate = 0.002;
    const auto tail = sandwich_train(net, train, val, s, rng);
    report.epochs.insert(report.epochs.end(), tail.epochs.begin(), tail.epochs.end());

    const auto archive = evolve(net.space(), supernet_evaluator(net, val), SearchSettings{}, 75);
    const auto region = outperforming_region(archive, baseline, 0.005, 0.6);
    bool verified = true;
    for (const auto& ind : region) {
        const auto c = decode(net.space(), ind.genome);
        verified = verified && evaluate(net, c, val) == ind.objectives.accuracy &&
                   count_macs(net, c).total_macs == ind.objectives.macs;
    }
    std::ostringstream d;
    d << "pre-trained " << epochs << " epochs: acc " << fmt("%.4f", baseline.accuracy) << ", " << baseline.macs
      << " MACs; supernet " << report.epochs.size() << " epochs: acc_max " << fmt("%.4f", report.epochs.back().acc_max)
      << " acc_min " << fmt("%.4f", report.epochs.back().acc_min) << "; region " << region.size() << " members";
    double best_cheap = 0.0;
    for (const auto& ind : archive.front())
        if (double(ind.objectives.macs) <= 0.6 * double(baseline.macs))
            best_cheap = std::max(best_cheap, ind.objectives.accuracy);
    d << "; best front acc at <= 0.6x MACs " << fmt("%.4f", best_cheap);
    if (!region.empty()) {
        const auto& cheapest = *std::min_element(region.begin(), region.end(), [](const auto& a, const auto& b) {
            return a.objectives.macs < b.objectives.macs;
        });
        d << ", cheapest " << fmt("%.4f", cheapest.objectives.accuracy) << " at "
          << fmt("%.3f", double(cheapest.objectives.macs) / double(baseline.macs)) << "x MACs";
    }
    return {!region.empty() && verified, d.str()};
}

// 8. The whole command-line pipeline run twice gives byte-identical archives.
Verdict determinism() {
    std::string csv[2];
    for (int run = 0; run < 2; ++run) {
        const auto root = oracle::scratch_dir("acceptance_run" + std::to_string(run));
        const auto p = [&](const char* sub) { return (root / sub).string(); };
        write_file_atomic(root / "run.json", R"({
  "seed": 42,
  "training": {"schedule": "sandwich", "epochs": 2, "n_random": 2, "batch_size": 32},
  "search": {"population": 20, "budget": 200, "val_samples": 256, "jobs": 2}
})");
        std::ostringstream sink;
        const std::vector<std::vector<std::string>> steps{
            {"init", "--arch", "toy_resnet", "--channels", "1", "--height", "8", "--width", "8", "--classes", "4",
             "--out", p("model")},
            {"make-data", "--train", "256", "--val", "256", "--classes", "4", "--height", "8", "--width", "8", "--out",
             p("data")},
            {"pretrain", "--model", p("model/model.json"), "--weights", p("model/model.bin"), "--data", p("data"),
             "--config", p("run.json"), "--epochs", "2", "--out", p("pre")},
            {"convert", "--model", p("pre/model.json"), "--weights", p("pre/model.bin"), "--out", p("super")},
            {"train", "--supernet", p("super"), "--data", p("data"), "--config", p("run.json"), "--out", p("trained")},
            {"search", "--supernet", p("trained"), "--data", p("data"), "--config", p("run.json"), "--out",
             p("search")}};
        for (const auto& step : steps)
            if (cli::run(step, sink, sink) != 0) return {false, step[0] + " failed: " + sink.str()};
        csv[run] = read_file(root / "search/archive.csv");
    }
    const bool same = csv[0] == csv[1] && !csv[0].empty();
    return {same, std::to_string(csv[0].size()) + " bytes, " + (same ? "identical" : "different")};
}

} // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
        {"conversion fidelity", conversion_fidelity},   {"search-space law", search_space_law},
        {"gradient correctness", gradient_correctness}, {"sandwich aggregation", sandwich_aggregation},
        {"NSGA-II oracle equivalence", nsga_oracle},    {"exhaustive-front recovery", front_recovery},
        {"end-to-end outperforming region", end_to_end}, {"pipeline determinism", determinism}};
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int n = static_cast<int>(i) + 1;
        if (!wanted.empty() && !wanted.count(n)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Verdict v;
        try {
            v = criteria[i].second();
        } catch (const std::exception& e) {
            v = {false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        failures += !v.pass;
        std::cout << (v.pass ? "PASS" : "FAIL") << " " << n << " " << criteria[i].first << ": " << v.detail << " ["
                  << fmt("%.1f", secs) << " s]" << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
