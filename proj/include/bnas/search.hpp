// SPDX-License-Identifier: Apache-2.0
#ifndef BNAS_SEARCH_HPP
#define BNAS_SEARCH_HPP

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "bnas/elasticity.hpp"
#include "bnas/model_io.hpp"
#include "bnas/rng.hpp"
#include "bnas/settings.hpp"

namespace bnas {

/// One gene per dimension in canonical order: option index for width and
/// kernel dimensions, 0/1 (keep/skip) for blocks.
using Genome = std::vector<std::int32_t>;

Genome encode(const SearchSpace& space, const SubnetworkConfig& config);
SubnetworkConfig decode(const SearchSpace& space, const Genome& genome);
/// Per-gene option counts.
std::vector<std::int32_t> gene_cardinalities(const SearchSpace& space);
std::uint64_t genome_hash(const Genome& genome) noexcept;
/// 16 lowercase hex digits of the genome hash.
std::string config_id(const Genome& genome);

/// Accuracy is maximized, MACs minimized.
struct Objectives {
    double accuracy = 0.0;
    std::int64_t macs = 0;

    friend bool operator==(const Objectives&, const Objectives&) = default;
};

bool dominates(const Objectives& a, const Objectives& b) noexcept;

/// Fronts of indices into `points`; each front in ascending index order.
std::vector<std::vector<std::size_t>> fast_non_dominated_sort(const std::vector<Objectives>& points);

/// Distances aligned with `front`. Boundary points get +infinity; interior
/// points sum neighbour gaps over objective ranges (zero range adds 0).
std::vector<double> crowding_distance(const std::vector<Objectives>& front);

struct Individual {
    Genome genome;
    std::uint64_t hash = 0;
    Objectives objectives;
    std::int64_t params = 0;
    int rank = 0;
    double crowding = 0.0;
};

struct Evaluation {
    double accuracy = 0.0;
    std::int64_t macs = 0;
    std::int64_t params = 0;
};

/// Must be safe to call concurrently when jobs > 1.
using Evaluator = std::function<Evaluation(const SubnetworkConfig&)>;

class ParetoArchive {
public:
    /// Every distinct genome evaluated so far.
    const std::map<std::uint64_t, Individual>& evaluated() const noexcept { return all_; }
    /// Non-dominated individuals among all evaluated, at most k of them,
    /// sorted by ascending MACs then descending accuracy.
    const std::vector<Individual>& front() const noexcept { return front_; }
    /// Evaluation requests, cache hits included.
    std::int64_t evaluations() const noexcept { return requests_; }
    /// Evaluator invocations.
    std::int64_t unique_evaluations() const noexcept { return static_cast<std::int64_t>(all_.size()); }
    int generations() const noexcept { return generations_; }

    const Individual* find(const Genome& g) const;

    /// Every evaluated individual ranked over the whole archive; rows
    /// ordered by (rank, macs, -accuracy, config id).
    std::vector<ArchiveRow> rows() const;
    /// config id -> SubnetworkConfig document.
    std::string sidecar_json(const SearchSpace& space) const;

private:
    friend class Evolution;
    std::map<std::uint64_t, Individual> all_;
    std::vector<Individual> front_;
    std::int64_t requests_ = 0;
    int generations_ = 0;
};

/// NSGA-II. The initial population holds a_max, a_min and random genomes.
/// Stops once the request counter reaches the budget (or the generation
/// cap). When evaluation throws, `on_abort` receives the archive first.
ParetoArchive evolve(const SearchSpace& space, const Evaluator& evaluate, const SearchSettings& settings,
                     std::uint64_t seed, const std::function<void(const ParetoArchive&)>& on_abort = {});

/// Accuracy on `val` and analytic costs of each config on `net`.
Evaluator supernet_evaluator(const SuperNetwork& net, const Dataset& val);

/// Front members with accuracy >= baseline.accuracy - accuracy_slack and
/// macs < baseline.macs and macs <= macs_fraction * baseline.macs.
std::vector<Individual> outperforming_region(const ParetoArchive& archive, const Objectives& baseline,
                                             double accuracy_slack = 0.0, double macs_fraction = 1.0);
std::vector<ArchiveRow> outperforming_region(const std::vector<ArchiveRow>& rows, const Objectives& baseline,
                                             double accuracy_slack = 0.0, double macs_fraction = 1.0);

/// Self-contained scatter: MACs on x, accuracy on y, front highlighted,
/// baseline marked with dashed guides.
std::string pareto_svg(const std::vector<ArchiveRow>& rows, const Objectives* baseline = nullptr);

} // namespace bnas

#endif // BNAS_SEARCH_HPP
