// SPDX-License-Identifier: Apache-2.0
#include "bnas/elasticity.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "bnas/engine.hpp"
#include "bnas/errors.hpp"

namespace bnas {

std::uint64_t SearchSpace::cardinality() const noexcept {
    constexpr auto kMax = std::numeric_limits<std::uint64_t>::max();
    std::uint64_t total = 1;
    auto times = [&](std::uint64_t f) {
        if (f != 0 && total > kMax / f)
            total = kMax;
        else
            total *= f;
    };
    for (const auto& g : width_groups) times(g.options.size());
    for (const auto& [id, opts] : kernel_dims) times(opts.size());
    for (std::size_t b = 0; b < skippable_blocks.size(); ++b) times(2);
    return total;
}

std::vector<Dimension> dimensions(const SearchSpace& space) {
    std::vector<Dimension> dims;
    for (const auto& g : space.width_groups) dims.push_back({DimensionKind::Width, g.id, g.options});
    for (const auto& [id, opts] : space.kernel_dims) dims.push_back({DimensionKind::Kernel, id, opts});
    for (const auto& b : space.skippable_blocks) dims.push_back({DimensionKind::Depth, b.id, {0, 1}});
    return dims;
}

namespace {

template <class Map>
void check_keys(const Map& choices, const std::set<std::string>& known, const char* what) {
    for (const auto& [id, v] : choices)
        if (!known.count(id)) throw InvalidChoice(std::string("unknown ") + what + " dimension '" + id + "'");
}

} // namespace

void check_config(const SearchSpace& space, const SubnetworkConfig& config) {
    std::set<std::string> groups, kernels, blocks;
    for (const auto& g : space.width_groups) {
        groups.insert(g.id);
        auto it = config.width_choice.find(g.id);
        if (it == config.width_choice.end()) throw InvalidChoice("no width chosen for group '" + g.id + "'");
        if (std::find(g.options.begin(), g.options.end(), it->second) == g.options.end())
            throw InvalidChoice("width " + std::to_string(it->second) + " not an option of group '" + g.id + "'");
    }
    for (const auto& [id, opts] : space.kernel_dims) {
        kernels.insert(id);
        auto it = config.kernel_choice.find(id);
        if (it == config.kernel_choice.end()) throw InvalidChoice("no kernel chosen for layer '" + id + "'");
        if (std::find(opts.begin(), opts.end(), it->second) == opts.end())
            throw InvalidChoice("kernel " + std::to_string(it->second) + " not an option of layer '" + id + "'");
    }
    for (const auto& b : space.skippable_blocks) {
        blocks.insert(b.id);
        if (!config.skip_mask.count(b.id)) throw InvalidChoice("no skip bit for block '" + b.id + "'");
    }
    check_keys(config.width_choice, groups, "width");
    check_keys(config.kernel_choice, kernels, "kernel");
    check_keys(config.skip_mask, blocks, "block");
}

SubnetworkConfig maximal_config(const SearchSpace& space) {
    SubnetworkConfig c;
    for (const auto& g : space.width_groups) c.width_choice[g.id] = g.options.front();
    for (const auto& [id, opts] : space.kernel_dims) c.kernel_choice[id] = opts.front();
    for (const auto& b : space.skippable_blocks) c.skip_mask[b.id] = false;
    return c;
}

SubnetworkConfig minimal_config(const SearchSpace& space) {
    SubnetworkConfig c;
    for (const auto& g : space.width_groups) c.width_choice[g.id] = g.options.back();
    for (const auto& [id, opts] : space.kernel_dims) c.kernel_choice[id] = opts.back();
    for (const auto& b : space.skippable_blocks) c.skip_mask[b.id] = true;
    return c;
}

SubnetworkConfig sample_config(const SearchSpace& space, Rng& rng, const std::vector<DimensionKind>& unlocked) {
    auto is_unlocked = [&](DimensionKind k) { return std::find(unlocked.begin(), unlocked.end(), k) != unlocked.end(); };
    SubnetworkConfig c = maximal_config(space);
    for (const auto& dim : dimensions(space)) {
        if (!is_unlocked(dim.kind)) continue;
        const auto v = dim.options[rng.below(dim.options.size())];
        switch (dim.kind) {
        case DimensionKind::Width: c.width_choice[dim.id] = v; break;
        case DimensionKind::Kernel: c.kernel_choice[dim.id] = v; break;
        case DimensionKind::Depth: c.skip_mask[dim.id] = v != 0; break;
        }
    }
    return c;
}

namespace {

constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

bool is_producer(OpKind kind) {
    return kind == OpKind::Input || kind == OpKind::Conv2D || kind == OpKind::Linear;
}

std::int64_t produced_channels(const LayerNode& node) {
    switch (node.kind) {
    case OpKind::Input: return node.attr("channels");
    case OpKind::Conv2D: return node.attr("out_channels");
    case OpKind::Linear: return node.attr("out_features");
    default: return 0;
    }
}

class UnionFind {
public:
    explicit UnionFind(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), std::size_t{0}); }
    std::size_t find(std::size_t x) {
        while (parent_[x] != x) x = parent_[x] = parent_[parent_[x]];
        return x;
    }
    // The smaller index becomes the root so classes have a stable representative.
    void unite(std::size_t a, std::size_t b) {
        a = find(a), b = find(b);
        if (a == b) return;
        if (b < a) std::swap(a, b);
        parent_[b] = a;
    }

private:
    std::vector<std::size_t> parent_;
};

// Representative producer index for each node's output channels (kNone when
// the node has no producer upstream).
std::vector<std::size_t> channel_classes(const ModelGraph& graph) {
    const auto n = graph.size();
    UnionFind uf(n);
    std::vector<std::size_t> origin(n, kNone);
    for (auto i : topological_indices(graph)) {
        const auto& node = graph.node(i);
        const auto& ins = graph.input_indices()[i];
        if (is_producer(node.kind)) {
            origin[i] = i;
        } else if (!ins.empty()) {
            origin[i] = origin[ins[0]];
            if (node.kind == OpKind::Add)
                for (auto k : ins)
                    if (origin[k] != kNone && origin[i] != kNone) uf.unite(origin[i], origin[k]);
        }
    }
    for (auto& o : origin)
        if (o != kNone) o = uf.find(o);
    return origin;
}

std::size_t classifier_index(const ModelGraph& graph) {
    auto cur = graph.index_of(graph.output_id());
    while (cur) {
        const auto& node = graph.node(*cur);
        if (node.kind == OpKind::Conv2D || node.kind == OpKind::Linear) return *cur;
        const auto& ins = graph.input_indices()[*cur];
        if (ins.empty() || node.kind == OpKind::Add) break;
        cur = ins[0];
    }
    return kNone;
}

} // namespace

RoleMap detect_elastic_layers(const ModelGraph& graph) {
    RoleMap roles;
    const auto classifier = classifier_index(graph);
    for (std::size_t i = 0; i < graph.size(); ++i) {
        const auto& node = graph.node(i);
        ElasticityRole role;
        if (i != classifier && supports_elastic_width(node.kind)) role.elastic_width = true;
        if (i != classifier && supports_elastic_kernel(node.kind) && node.attr("kernel_size") > 1)
            role.elastic_kernel = true;
        roles[node.id] = role;
    }
    return roles;
}

std::vector<WidthGroup> build_width_groups(const ModelGraph& graph, const RoleMap& roles) {
    const auto classes = channel_classes(graph);
    std::vector<WidthGroup> groups;
    std::map<std::size_t, std::size_t> by_root;
    for (std::size_t i = 0; i < graph.size(); ++i) {
        const auto& node = graph.node(i);
        if (!is_producer(node.kind)) continue;
        const auto root = classes[i];
        auto [it, fresh] = by_root.emplace(root, groups.size());
        if (fresh) {
            WidthGroup g;
            g.id = "g" + std::to_string(groups.size());
            g.max_channels = produced_channels(node);
            groups.push_back(std::move(g));
        }
        auto& g = groups[it->second];
        g.members.push_back(node.id);
        auto role = roles.find(node.id);
        const bool fixed = node.kind == OpKind::Input || role == roles.end() || !role->second.elastic_width;
        if (produced_channels(node) != g.max_channels)
            throw ConflictingConstraint("layer '" + node.id + "' with " + std::to_string(produced_channels(node)) +
                                        " channels is tied to group " + g.id + " of " +
                                        std::to_string(g.max_channels) + " channels");
        g.pinned = g.pinned || fixed;
    }
    return groups;
}

std::vector<int> node_width_groups(const ModelGraph& graph, const std::vector<WidthGroup>& groups) {
    const auto classes = channel_classes(graph);
    std::map<std::size_t, int> root_to_group;
    for (std::size_t g = 0; g < groups.size(); ++g)
        for (const auto& m : groups[g].members) root_to_group[classes[*graph.index_of(m)]] = static_cast<int>(g);
    std::vector<int> out(graph.size(), -1);
    for (std::size_t i = 0; i < graph.size(); ++i) {
        auto it = root_to_group.find(classes[i]);
        if (classes[i] != kNone && it != root_to_group.end()) out[i] = it->second;
    }
    return out;
}

std::vector<SkippableBlock> detect_skippable_blocks(const ModelGraph& graph, const std::vector<WidthGroup>& groups) {
    const auto node_group = node_width_groups(graph, groups);
    const auto base = full_plan(graph);
    const auto& ins = graph.input_indices();
    const auto& outs = graph.consumers();

    std::vector<SkippableBlock> blocks;
    for (std::size_t a = 0; a < graph.size(); ++a) {
        if (graph.node(a).kind != OpKind::Add || ins[a].size() != 2) continue;
        for (int side = 0; side < 2; ++side) {
            const auto source = ins[a][side];
            auto cur = ins[a][1 - side];
            std::vector<std::size_t> chain;
            bool ok = cur != source;
            while (ok && cur != source) {
                const auto& node = graph.node(cur);
                if (node.kind == OpKind::Input || node.kind == OpKind::Add || ins[cur].size() != 1 ||
                    outs[cur].size() != 1) {
                    ok = false;
                    break;
                }
                chain.push_back(cur);
                cur = ins[cur][0];
            }
            if (!ok || chain.empty()) continue;
            if (node_group[source] != node_group[a]) continue;

            ExecPlan plan = base;
            std::set<std::size_t> removed(chain.begin(), chain.end());
            for (auto c : chain) plan.nodes[c].active = false;
            plan.nodes[a].inputs = {source};
            std::erase_if(plan.order, [&](std::size_t k) { return removed.count(k) > 0; });
            try {
                infer_plan_shapes(graph, plan, graph.input_shape(1), false);
            } catch (const ShapeMismatch&) {
                continue;
            }

            SkippableBlock b;
            b.id = "b" + std::to_string(blocks.size());
            for (auto it = chain.rbegin(); it != chain.rend(); ++it) b.nodes.push_back(graph.node(*it).id);
            b.source = graph.node(source).id;
            b.sink = graph.node(a).id;
            blocks.push_back(std::move(b));
            break;
        }
    }
    return blocks;
}

namespace {

std::vector<std::int64_t> width_options(std::int64_t c, const ElasticityPolicy& p) {
    std::vector<std::int64_t> opts{c};
    auto v = c;
    while (static_cast<std::int64_t>(opts.size()) < p.max_width_options && p.width_divisor > 1) {
        v /= p.width_divisor;
        if (v < p.min_width || v < 1) break;
        opts.push_back(v);
    }
    return opts;
}

std::vector<std::int64_t> kernel_options(std::int64_t k, std::int64_t padding, const ElasticityPolicy& p) {
    std::vector<std::int64_t> opts{k};
    for (auto v = k - 2; v >= p.min_kernel && v >= 1; v -= 2) {
        if ((k - v) / 2 > padding) break;
        opts.push_back(v);
    }
    return opts;
}

} // namespace

SearchSpace generate_search_space(const ModelGraph& graph, RoleMap& roles, const std::vector<WidthGroup>& groups,
                                  const std::vector<SkippableBlock>& blocks, const ElasticityPolicy& policy) {
    SearchSpace space;
    for (const auto& g : groups) {
        const bool has_elastic = std::any_of(g.members.begin(), g.members.end(), [&](const std::string& m) {
            auto it = roles.find(m);
            return it != roles.end() && it->second.elastic_width;
        });
        if (g.pinned) {
            for (const auto& m : g.members) {
                roles[m].elastic_width = false;
                roles[m].width_options.clear();
            }
            continue;
        }
        if (!has_elastic) continue;
        WidthGroup wg = g;
        wg.options = width_options(g.max_channels, policy);
        for (const auto& m : g.members) roles[m].width_options = wg.options;
        space.width_groups.push_back(std::move(wg));
    }
    for (const auto& node : graph.nodes()) {
        auto& role = roles[node.id];
        if (!role.elastic_kernel) continue;
        role.kernel_options = kernel_options(node.attr("kernel_size"), node.attr("padding"), policy);
        space.kernel_dims[node.id] = role.kernel_options;
    }
    space.skippable_blocks = blocks;

    const bool trivial = std::all_of(space.width_groups.begin(), space.width_groups.end(),
                                     [](const WidthGroup& g) { return g.options.size() == 1; }) &&
                         std::all_of(space.kernel_dims.begin(), space.kernel_dims.end(),
                                     [](const auto& kv) { return kv.second.size() == 1; }) &&
                         blocks.empty();
    if (trivial) throw EmptySpace("every elastic dimension has a single option and no block can be skipped");
    return space;
}

namespace {

// new index c holds old index perm[c]
template <class Fn>
void permute_blocks(std::vector<float>& data, const std::vector<std::size_t>& perm, std::size_t block, Fn&& offset) {
    const auto old = data;
    for (std::size_t c = 0; c < perm.size(); ++c)
        for (std::size_t r = 0; r < block; ++r) data[offset(c, r)] = old[offset(perm[c], r)];
}

void permute_rows(Tensor& t, const std::vector<std::size_t>& perm) {
    const auto row = static_cast<std::size_t>(t.shape.numel() / t.shape[0]);
    permute_blocks(t.data, perm, row, [&](std::size_t c, std::size_t r) { return c * row + r; });
}

// Permutes groups of `block` consecutive entries along dim 1 of a tensor
// viewed as (rows, cols).
void permute_columns(Tensor& t, const std::vector<std::size_t>& perm, std::size_t block) {
    const auto rows = static_cast<std::size_t>(t.shape[0]);
    const auto cols = static_cast<std::size_t>(t.shape.numel()) / rows;
    const auto old = t.data;
    for (std::size_t o = 0; o < rows; ++o)
        for (std::size_t c = 0; c < perm.size(); ++c)
            for (std::size_t r = 0; r < block; ++r)
                t.data[o * cols + c * block + r] = old[o * cols + perm[c] * block + r];
}

} // namespace

void reorder_channels(ModelGraph& graph, const std::vector<WidthGroup>& groups) {
    const auto node_group = node_width_groups(graph, groups);
    const auto plan = full_plan(graph);
    auto& weights = graph.weights();

    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        const auto& group = groups[gi];
        if (group.pinned) continue;
        const auto channels = static_cast<std::size_t>(group.max_channels);

        std::vector<double> importance(channels, 0.0);
        for (const auto& m : group.members) {
            const auto& w = weights.at(*graph.node(m).weight("weight"));
            const auto row = static_cast<std::size_t>(w.shape.numel() / w.shape[0]);
            for (std::size_t c = 0; c < channels; ++c)
                for (std::size_t r = 0; r < row; ++r) importance[c] += std::abs(double(w.data[c * row + r]));
        }
        std::vector<std::size_t> perm(channels);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        std::stable_sort(perm.begin(), perm.end(),
                         [&](std::size_t a, std::size_t b) { return importance[a] > importance[b]; });
        if (std::is_sorted(perm.begin(), perm.end())) continue;

        for (std::size_t i = 0; i < graph.size(); ++i) {
            const auto& node = graph.node(i);
            const auto& ins = graph.input_indices()[i];
            const int own = node_group[i];
            const int upstream = ins.empty() ? -1 : node_group[ins[0]];
            auto permute_all = [&](std::initializer_list<const char*> roles) {
                for (const char* role : roles)
                    if (auto key = node.weight(role)) permute_rows(weights.at(*key), perm);
            };
            switch (node.kind) {
            case OpKind::Conv2D:
                if (own == static_cast<int>(gi)) permute_all({"weight", "bias"});
                if (upstream == static_cast<int>(gi)) {
                    auto& w = weights.at(*node.weight("weight"));
                    permute_columns(w, perm, static_cast<std::size_t>(w.shape[2] * w.shape[3]));
                }
                break;
            case OpKind::Linear:
                if (own == static_cast<int>(gi)) permute_all({"weight", "bias"});
                if (upstream == static_cast<int>(gi)) {
                    auto& w = weights.at(*node.weight("weight"));
                    const auto features = static_cast<std::size_t>(plan.shapes[ins[0]][1]);
                    permute_columns(w, perm, features / channels);
                }
                break;
            case OpKind::DepthwiseConv2D:
                if (own == static_cast<int>(gi)) permute_all({"weight", "bias"});
                break;
            case OpKind::BatchNorm:
                if (own == static_cast<int>(gi)) permute_all({"gamma", "beta", "running_mean", "running_var"});
                break;
            default:
                break;
            }
        }
    }
}

SuperNetwork::SuperNetwork(ModelGraph base, SearchSpace space, RoleMap roles, std::vector<WidthGroup> groups)
    : base_(std::move(base)), space_(std::move(space)), roles_(std::move(roles)), groups_(std::move(groups)) {
    node_group_ = node_width_groups(base_, groups_);
    for (std::size_t k = 0; k < space_.width_groups.size(); ++k) {
        space_group_[space_.width_groups[k].id] = static_cast<int>(k);
        for (auto& g : groups_)
            if (g.id == space_.width_groups[k].id) g.options = space_.width_groups[k].options;
    }
    for (std::size_t b = 0; b < space_.skippable_blocks.size(); ++b)
        for (const auto& id : space_.skippable_blocks[b].nodes) block_of_[id] = b;
    activate(maximal());
}

ExecPlan SuperNetwork::plan_for(const SubnetworkConfig& config) const {
    check_config(space_, config);
    ExecPlan plan;
    plan.nodes.resize(base_.size());
    std::vector<std::size_t> order = topological_indices(base_);
    for (std::size_t i = 0; i < base_.size(); ++i) {
        const auto& node = base_.node(i);
        auto& e = plan.nodes[i];
        if (auto it = block_of_.find(node.id); it != block_of_.end())
            e.active = !config.skip_mask.at(space_.skippable_blocks[it->second].id);
    }
    for (std::size_t i = 0; i < base_.size(); ++i) {
        const auto& node = base_.node(i);
        auto& e = plan.nodes[i];
        for (auto k : base_.input_indices()[i])
            if (plan.nodes[k].active) e.inputs.push_back(k);
        if (node.kind == OpKind::Conv2D || node.kind == OpKind::Linear) {
            e.out_channels = node.attr(node.kind == OpKind::Conv2D ? "out_channels" : "out_features");
            if (node_group_[i] >= 0)
                if (auto it = space_group_.find(groups_[node_group_[i]].id); it != space_group_.end())
                    e.out_channels = config.width_choice.at(it->first);
        }
        if (node.kind == OpKind::Conv2D || node.kind == OpKind::DepthwiseConv2D) {
            const auto k_full = node.attr("kernel_size");
            e.kernel = k_full;
            if (auto it = config.kernel_choice.find(node.id); it != config.kernel_choice.end()) e.kernel = it->second;
            e.padding = node.attr("padding") - (k_full - e.kernel) / 2;
        }
    }
    for (auto i : order)
        if (plan.nodes[i].active) plan.order.push_back(i);
    plan.shapes = infer_plan_shapes(base_, plan, base_.input_shape(1), true);
    return plan;
}

ActivationContext SuperNetwork::context_for(const SubnetworkConfig& config) const {
    return ActivationContext{config, plan_for(config)};
}

void SuperNetwork::activate(const SubnetworkConfig& config) {
    if (config == active_.config && !active_.plan.order.empty()) return;
    active_ = context_for(config);
}

ModelGraph SuperNetwork::materialize(const SubnetworkConfig& config) const {
    const auto plan = plan_for(config);
    const auto& weights = base_.weights();
    std::vector<std::string> alias(base_.size());
    std::vector<LayerNode> nodes;
    WeightStore out;

    auto resolve = [&](std::size_t k) {
        while (!alias[k].empty()) k = *base_.index_of(alias[k]);
        return base_.node(k).id;
    };
    auto slice = [&](const std::string& key, TensorShape shape, auto&& index) {
        Tensor t;
        t.shape = std::move(shape);
        t.data.resize(static_cast<std::size_t>(t.shape.numel()));
        const auto& src = weights.at(key);
        for (std::size_t j = 0; j < t.data.size(); ++j) t.data[j] = src.data[index(j)];
        out[key] = std::move(t);
    };
    auto prefix = [&](const std::string& key, std::int64_t n) {
        slice(key, TensorShape{n}, [](std::size_t j) { return j; });
    };

    for (std::size_t i = 0; i < base_.size(); ++i) {
        const auto& e = plan.nodes[i];
        if (!e.active) continue;
        const auto& src = base_.node(i);
        if (src.kind == OpKind::Add && e.inputs.size() == 1) {
            alias[i] = base_.node(e.inputs[0]).id;
            continue;
        }
        LayerNode node = src;
        node.inputs.clear();
        for (auto k : e.inputs) node.inputs.push_back(resolve(k));
        const auto& shape = plan.shapes[i];
        const TensorShape* in = e.inputs.empty() ? nullptr : &plan.shapes[e.inputs[0]];

        switch (src.kind) {
        case OpKind::Conv2D:
        case OpKind::DepthwiseConv2D: {
            const bool dw = src.kind == OpKind::DepthwiseConv2D;
            const auto wkey = *src.weight("weight");
            const auto& ws = weights.at(wkey).shape;
            const auto co = shape[1], ci = dw ? 1 : (*in)[1], k = e.kernel, off = (ws[2] - k) / 2;
            if (!dw) node.attrs["out_channels"] = double(co);
            node.attrs["kernel_size"] = double(k);
            node.attrs["padding"] = double(e.padding);
            slice(wkey, TensorShape{co, ci, k, k}, [&](std::size_t j) {
                const auto kw = std::int64_t(j) % k, kh = std::int64_t(j) / k % k;
                const auto c = std::int64_t(j) / (k * k) % ci, o = std::int64_t(j) / (k * k * ci);
                return static_cast<std::size_t>(((o * ws[1] + c) * ws[2] + kh + off) * ws[3] + kw + off);
            });
            if (auto b = src.weight("bias")) prefix(*b, co);
            break;
        }
        case OpKind::Linear: {
            const auto wkey = *src.weight("weight");
            const auto stored = weights.at(wkey).shape[1];
            const auto co = shape[1], ci = (*in)[1];
            node.attrs["out_features"] = double(co);
            slice(wkey, TensorShape{co, ci}, [&](std::size_t j) {
                return static_cast<std::size_t>(std::int64_t(j) / ci * stored + std::int64_t(j) % ci);
            });
            if (auto b = src.weight("bias")) prefix(*b, co);
            break;
        }
        case OpKind::BatchNorm:
            for (const auto& [role, key] : src.weight_refs) prefix(key, shape[1]);
            break;
        default:
            break;
        }
        nodes.push_back(std::move(node));
    }
    return ModelGraph(std::move(nodes), std::move(out));
}

const std::vector<Dimension>& ElasticityHandler::registry() const {
    if (registry_.empty()) registry_ = dimensions(net_->space());
    return registry_;
}

SubnetworkConfig ElasticityHandler::sample_random() { return sample_config(net_->space(), rng_); }

SubnetworkConfig ElasticityHandler::sample_random(const std::vector<DimensionKind>& unlocked) {
    return sample_config(net_->space(), rng_, unlocked);
}

FidelityReport fidelity_check(const ModelGraph& original, const SuperNetwork& net, std::uint64_t seed, int batches,
                              std::int64_t batch_size, double rel_tol) {
    const auto ref_plan = full_plan(original);
    const auto max_plan = net.plan_for(net.maximal());
    const auto shape = original.input_shape(batch_size);
    double max_diff = 0.0, max_ref = 0.0;
    for (int b = 0; b < batches; ++b) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(b)));
        std::vector<float> input(static_cast<std::size_t>(shape.numel()));
        for (auto& v : input) v = static_cast<float>(rng.uniform());
        const auto ref = forward_pass<float>(original, original.weights(), ref_plan, input, batch_size, Mode::Eval);
        const auto got = forward_pass<float>(net.base(), net.base().weights(), max_plan, input, batch_size, Mode::Eval);
        for (std::size_t j = 0; j < ref.size(); ++j) {
            max_diff = std::max(max_diff, std::abs(double(ref[j]) - double(got[j])));
            max_ref = std::max(max_ref, std::abs(double(ref[j])));
        }
    }
    FidelityReport r;
    r.max_abs_diff = max_diff;
    r.tolerance = rel_tol * std::max(1.0, max_ref);
    r.passed = max_diff <= r.tolerance;
    return r;
}

namespace {

struct Analysis {
    RoleMap roles;
    std::vector<WidthGroup> groups;
    SearchSpace space;
};

Analysis analyse(const ModelGraph& model, const ElasticityPolicy& policy) {
    require_valid(model);
    Analysis a;
    a.roles = detect_elastic_layers(model);
    a.groups = build_width_groups(model, a.roles);
    const auto blocks = detect_skippable_blocks(model, a.groups);
    a.space = generate_search_space(model, a.roles, a.groups, blocks, policy);
    return a;
}

} // namespace

ConversionResult convert(const ModelGraph& model, const ElasticityPolicy& policy, std::uint64_t probe_seed) {
    auto a = analyse(model, policy);
    ModelGraph graph = model;
    if (policy.reorder_channels) reorder_channels(graph, a.groups);
    SuperNetwork net(std::move(graph), std::move(a.space), std::move(a.roles), std::move(a.groups));
    auto report = fidelity_check(model, net, probe_seed);
    if (!report.passed) throw FidelityCheckFailed(report.max_abs_diff);
    return ConversionResult{std::move(net), report};
}

SuperNetwork assemble(ModelGraph graph, const ElasticityPolicy& policy) {
    auto a = analyse(graph, policy);
    return SuperNetwork(std::move(graph), std::move(a.space), std::move(a.roles), std::move(a.groups));
}

} // namespace bnas
