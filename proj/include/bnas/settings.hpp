// SPDX-License-Identifier: Apache-2.0
#ifndef BNAS_SETTINGS_HPP
#define BNAS_SETTINGS_HPP

#include <cstdint>
#include <vector>

#include "bnas/elasticity.hpp"

namespace bnas {

struct TrainingSchedule {
    enum class Kind { ProgressiveShrinking, Sandwich };
    Kind kind = Kind::Sandwich;
    /// Progressive shrinking: dimensions unlocked stage by stage.
    std::vector<DimensionKind> stages{DimensionKind::Kernel, DimensionKind::Depth, DimensionKind::Width};
    int epochs_per_stage = 2;
    /// Sandwich rule: total epochs.
    int epochs = 5;
    int n_random = 2;
    bool distillation = true;
    /// Distillation source: the live maximal subnetwork, or a frozen copy
    /// of the converted model evaluated in eval mode.
    enum class Teacher { Maximal, Original };
    Teacher teacher = Teacher::Maximal;
    double alpha = 0.5;
    double temperature = 4.0;
    std::int64_t batch_size = 32;
    double learning_rate = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-4;
};

struct SearchSettings {
    int population = 50;
    double crossover_rate = 0.9;
    double mutation_rate = 0.02;
    std::int64_t budget = 3000;
    /// 0: bounded by the budget only.
    int generations = 0;
    /// 0: same as the population.
    int front_size = 0;
    int tournament_size = 2;
    std::int64_t val_samples = 1024;
    int jobs = 1;
};

struct RunConfig {
    ElasticityPolicy elasticity;
    TrainingSchedule training;
    SearchSettings search;
    std::uint64_t seed = 42;
};

/// Throws ConfigError on the first violated constraint.
void validate(const TrainingSchedule& t);
void validate(const SearchSettings& s);
void validate(const ElasticityPolicy& p);
void validate(const RunConfig& c);

} // namespace bnas

#endif // BNAS_SETTINGS_HPP
