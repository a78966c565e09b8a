// SPDX-License-Identifier: Apache-2.0
#ifndef BNAS_TRAINING_HPP
#define BNAS_TRAINING_HPP

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bnas/elasticity.hpp"
#include "bnas/engine.hpp"
#include "bnas/model_io.hpp"
#include "bnas/rng.hpp"
#include "bnas/settings.hpp"

namespace bnas {

struct EpochRecord {
    int epoch = 0; // 1-based, counted across stages
    std::string stage;
    double mean_loss = 0.0;
    double acc_max = 0.0;
    double acc_min = 0.0;
    std::int64_t configs_sampled = 0;

    friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainingReport {
    std::vector<EpochRecord> epochs;

    /// `epoch,stage,mean_loss,acc_max,acc_min`
    std::string csv() const;
    friend bool operator==(const TrainingReport&, const TrainingReport&) = default;
};

inline constexpr std::int64_t kEvalBatch = 256;

/// Top-1 accuracy of eval-mode forward passes in fixed-size batches.
double evaluate(const ModelGraph& graph, const ExecPlan& plan, const Dataset& data, std::int64_t batch_size = kEvalBatch);
/// Uses a private activation context, so concurrent calls are safe.
double evaluate(const SuperNetwork& net, const SubnetworkConfig& config, const Dataset& data,
                std::int64_t batch_size = kEvalBatch);

struct AggregatedGradients {
    float mean_loss = 0.0f;
    GradientStore grads;
};

/// Train-mode passes over `configs` in order, summing gradients left to right.
/// With distillation, configs[0] is the teacher: it uses cross-entropy and
/// the others are distilled from its detached logits. A non-empty
/// `fixed_teacher` replaces it, and then every config is distilled. Running
/// statistics of every pass are blended in; weights are otherwise untouched.
AggregatedGradients sandwich_gradients(SuperNetwork& net, const Batch& batch, const std::vector<SubnetworkConfig>& configs,
                                       bool distill, double alpha = 0.5, double temperature = 4.0,
                                       std::span<const float> fixed_teacher = {});

/// a_max, a_min and `n_random` sampled configs, one optimizer step.
float sandwich_train_step(SuperNetwork& net, const Batch& batch, int n_random, Rng& rng, bool distill,
                          OptimizerState& opt, double alpha = 0.5, double temperature = 4.0,
                          std::span<const float> fixed_teacher = {});

/// Every config a progressive-shrinking run samples, in order.
using SampleLog = std::vector<std::pair<int, SubnetworkConfig>>; // (stage index, config)

TrainingReport progressive_shrinking_train(SuperNetwork& net, const Dataset& train, const Dataset& val,
                                           const TrainingSchedule& schedule, Rng& rng, SampleLog* log = nullptr);
TrainingReport sandwich_train(SuperNetwork& net, const Dataset& train, const Dataset& val,
                              const TrainingSchedule& schedule, Rng& rng);
/// Dispatches on schedule.kind.
TrainingReport train_supernet(SuperNetwork& net, const Dataset& train, const Dataset& val,
                              const TrainingSchedule& schedule, Rng& rng);

/// Plain cross-entropy training of a standalone model for `epochs` epochs
/// (pre-training, or fine-tuning an extracted subnetwork).
TrainingReport train_model(ModelGraph& graph, const Dataset& train, const Dataset& val, int epochs,
                           const TrainingSchedule& hyper, Rng& rng);

} // namespace bnas

#endif // BNAS_TRAINING_HPP
