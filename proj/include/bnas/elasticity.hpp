// SPDX-License-Identifier: Apache-2.0
#ifndef BNAS_ELASTICITY_HPP
#define BNAS_ELASTICITY_HPP

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bnas/graph.hpp"
#include "bnas/rng.hpp"

namespace bnas {

/// How a layer may vary across subnetworks. Options are sorted descending and
/// start at the pre-trained value; both lists are empty for static layers
/// until the search space has been generated.
struct ElasticityRole {
    bool elastic_width = false;
    bool elastic_kernel = false;
    std::vector<std::int64_t> width_options;
    std::vector<std::int64_t> kernel_options;

    bool is_static() const noexcept { return !elastic_width && !elastic_kernel; }
    friend bool operator==(const ElasticityRole&, const ElasticityRole&) = default;
};

using RoleMap = std::map<std::string, ElasticityRole>;

/// Producers (Input, Conv2D, Linear) whose output channel counts must vary
/// together. A pinned group contains the model input or a static layer and
/// never varies.
struct WidthGroup {
    std::string id;
    std::vector<std::string> members;
    std::int64_t max_channels = 0;
    bool pinned = false;
    std::vector<std::int64_t> options;

    friend bool operator==(const WidthGroup&, const WidthGroup&) = default;
};

/// A single-entry chain from `source` to the Add `sink`, which also reads
/// `source` directly. Skipping it turns the Add into an identity of `source`.
struct SkippableBlock {
    std::string id;
    std::vector<std::string> nodes;
    std::string source;
    std::string sink;

    friend bool operator==(const SkippableBlock&, const SkippableBlock&) = default;
};

struct ElasticityPolicy {
    std::int64_t width_divisor = 2;
    std::int64_t min_width = 8;
    std::int64_t max_width_options = 3;
    std::int64_t min_kernel = 3;
    bool reorder_channels = true;
};

struct SearchSpace {
    std::vector<WidthGroup> width_groups; // unpinned groups only
    std::map<std::string, std::vector<std::int64_t>> kernel_dims;
    std::vector<SkippableBlock> skippable_blocks;

    /// Product of option counts times 2^blocks, saturating at UINT64_MAX.
    std::uint64_t cardinality() const noexcept;

    friend bool operator==(const SearchSpace&, const SearchSpace&) = default;
};

struct SubnetworkConfig {
    std::map<std::string, std::int64_t> width_choice;
    std::map<std::string, std::int64_t> kernel_choice;
    std::map<std::string, bool> skip_mask; // true = omitted

    friend bool operator==(const SubnetworkConfig&, const SubnetworkConfig&) = default;
    friend auto operator<=>(const SubnetworkConfig&, const SubnetworkConfig&) = default;
};

enum class DimensionKind { Width, Kernel, Depth };

/// One searchable axis. Depth dimensions have options {0 = keep, 1 = skip}.
struct Dimension {
    DimensionKind kind;
    std::string id;
    std::vector<std::int64_t> options;
};

/// Canonical dimension order: width groups, kernel layers (by id), blocks.
std::vector<Dimension> dimensions(const SearchSpace& space);

/// Throws InvalidChoice when a choice is missing, unknown, or outside its options.
void check_config(const SearchSpace& space, const SubnetworkConfig& config);

SubnetworkConfig maximal_config(const SearchSpace& space);
SubnetworkConfig minimal_config(const SearchSpace& space);

/// Uniform independent draw per dimension. Dimensions whose kind is not in
/// `unlocked` stay at their maximal value.
SubnetworkConfig sample_config(const SearchSpace& space, Rng& rng,
                               const std::vector<DimensionKind>& unlocked = {DimensionKind::Width,
                                                                             DimensionKind::Kernel,
                                                                             DimensionKind::Depth});

RoleMap detect_elastic_layers(const ModelGraph& graph);

/// Every channel-equivalence class that contains a producer, pinned or not,
/// in order of first member declaration. Options are left empty.
std::vector<WidthGroup> build_width_groups(const ModelGraph& graph, const RoleMap& roles);

/// Index into `groups` of the class governing each node's output channels
/// (-1 when none, e.g. Output of a graph without producers).
std::vector<int> node_width_groups(const ModelGraph& graph, const std::vector<WidthGroup>& groups);

std::vector<SkippableBlock> detect_skippable_blocks(const ModelGraph& graph, const std::vector<WidthGroup>& groups);

/// Fills options into unpinned groups and returns the resulting space. Roles
/// are updated with the options they end up with.
SearchSpace generate_search_space(const ModelGraph& graph, RoleMap& roles, const std::vector<WidthGroup>& groups,
                                  const std::vector<SkippableBlock>& blocks, const ElasticityPolicy& policy);

/// Permutes channels inside every unpinned group by descending L1 norm of the
/// producers' filters. The network function is unchanged.
void reorder_channels(ModelGraph& graph, const std::vector<WidthGroup>& groups);

/// Config bound to the plan that executes it.
struct ActivationContext {
    SubnetworkConfig config;
    ExecPlan plan;
};

class SuperNetwork {
public:
    SuperNetwork(ModelGraph base, SearchSpace space, RoleMap roles, std::vector<WidthGroup> groups);

    const ModelGraph& base() const noexcept { return base_; }
    /// Weights are mutable; topology is not.
    WeightStore& weights() noexcept { return base_.weights(); }
    const SearchSpace& space() const noexcept { return space_; }
    const RoleMap& roles() const noexcept { return roles_; }
    const std::vector<WidthGroup>& all_groups() const noexcept { return groups_; }

    const ActivationContext& active() const noexcept { return active_; }
    const SubnetworkConfig& active_config() const noexcept { return active_.config; }
    const ExecPlan& active_plan() const noexcept { return active_.plan; }

    /// Validates the config and swaps the activation state. Idempotent.
    void activate(const SubnetworkConfig& config);

    /// Activation state for `config` without touching this network's own,
    /// for concurrent evaluation over shared weights.
    ActivationContext context_for(const SubnetworkConfig& config) const;
    ExecPlan plan_for(const SubnetworkConfig& config) const;

    SubnetworkConfig maximal() const { return maximal_config(space_); }
    SubnetworkConfig minimal() const { return minimal_config(space_); }

    /// Standalone graph of a subnetwork with sliced copies of the weights.
    ModelGraph materialize(const SubnetworkConfig& config) const;

private:
    ModelGraph base_;
    SearchSpace space_;
    RoleMap roles_;
    std::vector<WidthGroup> groups_;
    std::vector<int> node_group_;
    std::map<std::string, int> space_group_;   // group id -> index in space_.width_groups
    std::map<std::string, std::size_t> block_of_; // node id -> index in space_.skippable_blocks
    ActivationContext active_;
};

/// Registry + sampler + activator over one super-network.
class ElasticityHandler {
public:
    ElasticityHandler(SuperNetwork& net, std::uint64_t seed) : net_(&net), rng_(seed) {}

    const std::vector<Dimension>& registry() const;
    SubnetworkConfig sample_random();
    SubnetworkConfig sample_random(const std::vector<DimensionKind>& unlocked);
    void activate(const SubnetworkConfig& config) { net_->activate(config); }
    SubnetworkConfig minimal() const { return net_->minimal(); }
    SubnetworkConfig maximal() const { return net_->maximal(); }
    SuperNetwork& network() noexcept { return *net_; }
    Rng& rng() noexcept { return rng_; }

private:
    SuperNetwork* net_;
    Rng rng_;
    mutable std::vector<Dimension> registry_;
};

struct FidelityReport {
    double max_abs_diff = 0.0;
    double tolerance = 0.0;
    bool passed = false;
};

/// Forward-output agreement between `original` and the maximal subnetwork of
/// `net` on `batches` uniform-random probe batches.
/// Passes when max |diff| <= rel_tol * max(1, max |original logit|).
FidelityReport fidelity_check(const ModelGraph& original, const SuperNetwork& net, std::uint64_t seed,
                              int batches = 1, std::int64_t batch_size = 4, double rel_tol = 1e-6);

struct ConversionResult {
    SuperNetwork supernet;
    FidelityReport fidelity;
};

/// Detect, group, find blocks, generate the space, optionally reorder
/// channels, then verify fidelity. Throws FidelityCheckFailed on disagreement.
ConversionResult convert(const ModelGraph& model, const ElasticityPolicy& policy = {}, std::uint64_t probe_seed = 0x5eed);

/// Rebuilds a super-network from an already converted graph, without
/// reordering or fidelity checking.
SuperNetwork assemble(ModelGraph graph, const ElasticityPolicy& policy);

} // namespace bnas

#endif // BNAS_ELASTICITY_HPP
