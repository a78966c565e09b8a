// SPDX-License-Identifier: Apache-2.0
#include "bnas/settings.hpp"

#include <string>

#include "bnas/errors.hpp"

namespace bnas {

namespace {

void require(bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
}

bool unit(double v) { return v >= 0.0 && v <= 1.0; }

} // namespace

void validate(const ElasticityPolicy& p) {
    require(p.width_divisor >= 2, "width_divisor must be >= 2");
    require(p.min_width >= 1, "min_width must be >= 1");
    require(p.max_width_options >= 1, "max_width_options must be >= 1");
    require(p.min_kernel >= 1, "min_kernel must be >= 1");
}

void validate(const TrainingSchedule& t) {
    require(!t.stages.empty(), "training.stages must not be empty");
    auto position = [](DimensionKind k) { return k == DimensionKind::Kernel ? 0 : k == DimensionKind::Depth ? 1 : 2; };
    for (std::size_t i = 1; i < t.stages.size(); ++i)
        require(position(t.stages[i - 1]) < position(t.stages[i]),
                "training.stages must follow the order kernel, depth, width without repeats");
    require(t.epochs_per_stage >= 0, "training.epochs_per_stage must be >= 0");
    require(t.epochs >= 0, "training.epochs must be >= 0");
    require(t.n_random >= 0, "training.n_random must be >= 0");
    require(unit(t.alpha), "training.alpha must be in [0,1]");
    require(t.temperature > 0.0, "training.temperature must be > 0");
    require(t.batch_size >= 1, "training.batch_size must be >= 1");
    require(t.learning_rate >= 0.0, "training.learning_rate must be >= 0");
    require(unit(t.momentum), "training.momentum must be in [0,1]");
    require(t.weight_decay >= 0.0, "training.weight_decay must be >= 0");
}

void validate(const SearchSettings& s) {
    require(s.population >= 4 && s.population % 2 == 0, "search.population must be even and >= 4");
    require(unit(s.crossover_rate), "search.crossover_rate must be in [0,1]");
    require(unit(s.mutation_rate), "search.mutation_rate must be in [0,1]");
    require(s.budget >= s.population, "search.budget must be >= search.population");
    require(s.generations >= 0, "search.generations must be >= 0");
    require(s.front_size >= 0, "search.front_size must be >= 0");
    require(s.tournament_size >= 1, "search.tournament_size must be >= 1");
    require(s.val_samples >= 1, "search.val_samples must be >= 1");
    require(s.jobs >= 1, "search.jobs must be >= 1");
}

void validate(const RunConfig& c) {
    validate(c.elasticity);
    validate(c.training);
    validate(c.search);
}

} // namespace bnas
