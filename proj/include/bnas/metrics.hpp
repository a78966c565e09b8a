// SPDX-License-Identifier: Apache-2.0
#ifndef BNAS_METRICS_HPP
#define BNAS_METRICS_HPP

#include <cstdint>
#include <map>
#include <string>

#include "bnas/elasticity.hpp"
#include "bnas/graph.hpp"

namespace bnas {

struct NodeCost {
    std::int64_t macs = 0;
    std::int64_t params = 0;

    friend bool operator==(const NodeCost&, const NodeCost&) = default;
};

/// One MAC per multiply-accumulate of Conv2D, DepthwiseConv2D and Linear;
/// bias additions and elementwise ops are free. Inactive nodes are absent.
struct CostBreakdown {
    std::int64_t total_macs = 0;
    std::int64_t total_params = 0;
    std::map<std::string, NodeCost> per_node;
};

CostBreakdown count_costs(const ModelGraph& graph, const ExecPlan& plan);
/// Costs of the graph as written.
CostBreakdown count_costs(const ModelGraph& graph);

CostBreakdown count_macs(const SuperNetwork& net, const SubnetworkConfig& config);
std::int64_t count_params(const SuperNetwork& net, const SubnetworkConfig& config);

/// How many times fewer MACs `candidate` needs than `reference`.
double macs_ratio(std::int64_t reference, std::int64_t candidate);

} // namespace bnas

#endif // BNAS_METRICS_HPP
