// SPDX-License-Identifier: Apache-2.0
#include "bnas/metrics.hpp"

#include "bnas/errors.hpp"

namespace bnas {

CostBreakdown count_costs(const ModelGraph& graph, const ExecPlan& plan) {
    CostBreakdown out;
    for (auto i : plan.order) {
        const auto& node = graph.node(i);
        const auto& e = plan.nodes[i];
        const auto& y = plan.shapes[i];
        const TensorShape* x = e.inputs.empty() ? nullptr : &plan.shapes[e.inputs[0]];
        const std::int64_t bias = node.weight("bias") ? 1 : 0;
        NodeCost c;
        switch (node.kind) {
        case OpKind::Conv2D: {
            const auto per_out = (*x)[1] * e.kernel * e.kernel;
            c.macs = y[2] * y[3] * y[1] * per_out;
            c.params = y[1] * per_out + bias * y[1];
            break;
        }
        case OpKind::DepthwiseConv2D:
            c.macs = y[2] * y[3] * y[1] * e.kernel * e.kernel;
            c.params = y[1] * e.kernel * e.kernel + bias * y[1];
            break;
        case OpKind::Linear:
            c.macs = (*x)[1] * y[1];
            c.params = c.macs + bias * y[1];
            break;
        case OpKind::BatchNorm:
            c.params = 4 * y[1];
            break;
        default:
            continue;
        }
        out.total_macs += c.macs;
        out.total_params += c.params;
        out.per_node[node.id] = c;
    }
    return out;
}

CostBreakdown count_costs(const ModelGraph& graph) { return count_costs(graph, full_plan(graph)); }

CostBreakdown count_macs(const SuperNetwork& net, const SubnetworkConfig& config) {
    return count_costs(net.base(), net.plan_for(config));
}

std::int64_t count_params(const SuperNetwork& net, const SubnetworkConfig& config) {
    return count_macs(net, config).total_params;
}

double macs_ratio(std::int64_t reference, std::int64_t candidate) {
    if (candidate <= 0) throw ConfigError("MACs ratio needs a positive candidate count");
    return double(reference) / double(candidate);
}

} // namespace bnas
