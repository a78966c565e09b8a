// SPDX-License-Identifier: Apache-2.0
#include "bnas/training.hpp"

#include <cstdio>
#include <numeric>

#include "bnas/errors.hpp"

namespace bnas {

std::string TrainingReport::csv() const {
    std::string out = "epoch,stage,mean_loss,acc_max,acc_min\n";
    char buf[160];
    for (const auto& e : epochs) {
        std::snprintf(buf, sizeof buf, "%d,%s,%.10g,%.10g,%.10g\n", e.epoch, e.stage.c_str(), e.mean_loss, e.acc_max,
                      e.acc_min);
        out += buf;
    }
    return out;
}

double evaluate(const ModelGraph& graph, const ExecPlan& plan, const Dataset& data, std::int64_t batch_size) {
    if (data.size() == 0) throw ConfigError("cannot evaluate on an empty dataset");
    std::int64_t correct = 0;
    for (std::int64_t begin = 0; begin < data.size(); begin += batch_size) {
        const auto batch = data.batch(begin, batch_size);
        const auto logits = forward(graph, plan, batch, Mode::Eval);
        const auto pred = argmax_rows(logits, static_cast<std::int64_t>(logits.size()) / batch.size());
        for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == batch.labels[i];
    }
    return double(correct) / double(data.size());
}

double evaluate(const SuperNetwork& net, const SubnetworkConfig& config, const Dataset& data, std::int64_t batch_size) {
    return evaluate(net.base(), net.plan_for(config), data, batch_size);
}

AggregatedGradients sandwich_gradients(SuperNetwork& net, const Batch& batch, const std::vector<SubnetworkConfig>& configs,
                                       bool distill, double alpha, double temperature,
                                       std::span<const float> fixed_teacher) {
    AggregatedGradients out;
    std::vector<float> teacher(fixed_teacher.begin(), fixed_teacher.end());
    const bool external = !fixed_teacher.empty();
    double loss_sum = 0.0;
    for (std::size_t i = 0; i < configs.size(); ++i) {
        const auto plan = net.plan_for(configs[i]);
        LossSpec loss;
        if (distill && (i > 0 || external)) {
            loss.kind = LossSpec::Kind::Distillation;
            loss.teacher = teacher;
            loss.alpha = alpha;
            loss.temperature = temperature;
        }
        auto r = train_pass(net.base(), plan, batch, loss);
        update_running_stats<float>(net.base(), net.weights(), plan, r.trace);
        if (i == 0) {
            if (!external) teacher = r.logits;
            out.grads = std::move(r.grads);
        } else {
            out.grads.accumulate(r.grads);
        }
        loss_sum += r.loss;
    }
    out.mean_loss = configs.empty() ? 0.0f : static_cast<float>(loss_sum / double(configs.size()));
    return out;
}

float sandwich_train_step(SuperNetwork& net, const Batch& batch, int n_random, Rng& rng, bool distill,
                          OptimizerState& opt, double alpha, double temperature,
                          std::span<const float> fixed_teacher) {
    std::vector<SubnetworkConfig> configs{net.maximal(), net.minimal()};
    for (int i = 0; i < n_random; ++i) configs.push_back(sample_config(net.space(), rng));
    auto agg = sandwich_gradients(net, batch, configs, distill, alpha, temperature, fixed_teacher);
    sgd_step(net.weights(), agg.grads, opt);
    return agg.mean_loss;
}

namespace {

const char* stage_name(DimensionKind k) {
    switch (k) {
    case DimensionKind::Kernel: return "kernel";
    case DimensionKind::Depth: return "depth";
    case DimensionKind::Width: return "width";
    }
    return "?";
}

std::vector<std::int64_t> shuffled_indices(std::int64_t n, Rng& rng) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), std::int64_t{0});
    rng.shuffle(idx.begin(), idx.end());
    return idx;
}

template <class Step>
double run_epoch(const Dataset& train, std::int64_t batch_size, Rng& rng, Step&& step) {
    if (train.size() == 0) throw ConfigError("cannot train on an empty dataset");
    const auto order = shuffled_indices(train.size(), rng);
    double total = 0.0;
    std::int64_t batches = 0;
    for (std::int64_t begin = 0; begin < train.size(); begin += batch_size) {
        const auto end = std::min(train.size(), begin + batch_size);
        const auto batch = train.gather(std::span(order).subspan(begin, end - begin));
        total += step(batch);
        ++batches;
    }
    return total / double(batches);
}

OptimizerState optimizer_for(const TrainingSchedule& s) {
    OptimizerState opt;
    opt.learning_rate = s.learning_rate;
    opt.momentum = s.momentum;
    opt.weight_decay = s.weight_decay;
    return opt;
}

// Eval-mode logits of the model as it was before super-network training.
class FrozenTeacher {
public:
    FrozenTeacher(const SuperNetwork& net, const TrainingSchedule& s)
        : enabled_(s.distillation && s.teacher == TrainingSchedule::Teacher::Original) {
        if (enabled_) graph_ = net.base(), plan_ = net.plan_for(net.maximal());
    }
    bool enabled() const noexcept { return enabled_; }
    std::vector<float> logits(const Batch& batch) const { return forward(graph_, plan_, batch, Mode::Eval); }

private:
    bool enabled_;
    ModelGraph graph_;
    ExecPlan plan_;
};

EpochRecord record(const SuperNetwork& net, const Dataset& val, int epoch, std::string stage, double loss,
                   std::int64_t sampled) {
    EpochRecord r;
    r.epoch = epoch;
    r.stage = std::move(stage);
    r.mean_loss = loss;
    r.acc_max = evaluate(net, net.maximal(), val);
    r.acc_min = evaluate(net, net.minimal(), val);
    r.configs_sampled = sampled;
    return r;
}

} // namespace

TrainingReport progressive_shrinking_train(SuperNetwork& net, const Dataset& train, const Dataset& val,
                                           const TrainingSchedule& s, Rng& rng, SampleLog* log) {
    validate(s);
    TrainingReport report;
    auto opt = optimizer_for(s);
    std::vector<DimensionKind> unlocked;
    const FrozenTeacher original(net, s);
    int epoch = 0;
    for (std::size_t stage = 0; stage < s.stages.size(); ++stage) {
        unlocked.push_back(s.stages[stage]);
        if (stage > 0) opt.learning_rate *= 0.5;
        for (int e = 0; e < s.epochs_per_stage; ++e) {
            std::int64_t sampled = 0;
            const auto loss = run_epoch(train, s.batch_size, rng, [&](const Batch& batch) {
                const auto config = sample_config(net.space(), rng, unlocked);
                if (log) log->emplace_back(static_cast<int>(stage), config);
                ++sampled;
                LossSpec spec;
                std::vector<float> teacher;
                // a live a_max teacher trains itself on plain cross-entropy
                if (original.enabled() || (s.distillation && config != net.maximal())) {
                    if (original.enabled()) {
                        teacher = original.logits(batch);
                    } else {
                        const auto tplan = net.plan_for(net.maximal());
                        teacher = forward_pass<float>(net.base(), net.base().weights(), tplan, batch.inputs,
                                                      batch.size(), Mode::Train);
                    }
                    spec.kind = LossSpec::Kind::Distillation;
                    spec.teacher = teacher;
                    spec.alpha = s.alpha;
                    spec.temperature = s.temperature;
                }
                const auto plan = net.plan_for(config);
                auto r = train_pass(net.base(), plan, batch, spec);
                update_running_stats<float>(net.base(), net.weights(), plan, r.trace);
                sgd_step(net.weights(), r.grads, opt);
                return double(r.loss);
            });
            report.epochs.push_back(record(net, val, ++epoch, stage_name(s.stages[stage]), loss, sampled));
        }
    }
    return report;
}

TrainingReport sandwich_train(SuperNetwork& net, const Dataset& train, const Dataset& val, const TrainingSchedule& s,
                              Rng& rng) {
    validate(s);
    TrainingReport report;
    auto opt = optimizer_for(s);
    const FrozenTeacher original(net, s);
    for (int e = 0; e < s.epochs; ++e) {
        std::int64_t sampled = 0;
        const auto loss = run_epoch(train, s.batch_size, rng, [&](const Batch& batch) {
            sampled += 2 + s.n_random;
            const auto teacher = original.enabled() ? original.logits(batch) : std::vector<float>{};
            return double(sandwich_train_step(net, batch, s.n_random, rng, s.distillation, opt, s.alpha, s.temperature,
                                              teacher));
        });
        report.epochs.push_back(record(net, val, e + 1, "sandwich", loss, sampled));
    }
    return report;
}

TrainingReport train_supernet(SuperNetwork& net, const Dataset& train, const Dataset& val, const TrainingSchedule& s,
                              Rng& rng) {
    if (s.kind == TrainingSchedule::Kind::ProgressiveShrinking) return progressive_shrinking_train(net, train, val, s, rng);
    return sandwich_train(net, train, val, s, rng);
}

TrainingReport train_model(ModelGraph& graph, const Dataset& train, const Dataset& val, int epochs,
                           const TrainingSchedule& hyper, Rng& rng) {
    validate(hyper);
    require_valid(graph);
    TrainingReport report;
    auto opt = optimizer_for(hyper);
    const auto plan = full_plan(graph);
    for (int e = 0; e < epochs; ++e) {
        const auto loss = run_epoch(train, hyper.batch_size, rng, [&](const Batch& batch) {
            auto r = train_pass(graph, plan, batch);
            update_running_stats<float>(graph, graph.weights(), plan, r.trace);
            sgd_step(graph.weights(), r.grads, opt);
            return double(r.loss);
        });
        EpochRecord rec;
        rec.epoch = e + 1;
        rec.stage = "pretrain";
        rec.mean_loss = loss;
        rec.acc_max = rec.acc_min = evaluate(graph, plan, val);
        report.epochs.push_back(rec);
    }
    return report;
}

} // namespace bnas
