// SPDX-License-Identifier: Apache-2.0
#include "bnas/graph.hpp"

#include <algorithm>
#include <functional>
#include <queue>
#include <set>
#include <sstream>

#include "bnas/errors.hpp"

namespace bnas {

std::int64_t TensorShape::numel() const noexcept {
    std::int64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
}

bool TensorShape::valid() const noexcept {
    if (rank() != 1 && rank() != 2 && rank() != 4) return false;
    return std::all_of(dims.begin(), dims.end(), [](std::int64_t d) { return d >= 1; });
}

std::string TensorShape::str() const {
    std::string s = "(";
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(dims[i]);
    }
    return s + ")";
}

namespace {

struct KindInfo {
    OpKind kind;
    std::string_view name;
};

constexpr KindInfo kKinds[] = {
    {OpKind::Input, "Input"},
    {OpKind::Output, "Output"},
    {OpKind::Conv2D, "Conv2D"},
    {OpKind::DepthwiseConv2D, "DepthwiseConv2D"},
    {OpKind::Linear, "Linear"},
    {OpKind::BatchNorm, "BatchNorm"},
    {OpKind::ReLU, "ReLU"},
    {OpKind::Add, "Add"},
    {OpKind::MaxPool2D, "MaxPool2D"},
    {OpKind::AvgPool2D, "AvgPool2D"},
    {OpKind::GlobalAvgPool, "GlobalAvgPool"},
    {OpKind::Flatten, "Flatten"},
};

} // namespace

std::string_view to_string(OpKind kind) noexcept {
    for (const auto& k : kKinds)
        if (k.kind == kind) return k.name;
    return "?";
}

std::optional<OpKind> parse_op_kind(std::string_view name) noexcept {
    for (const auto& k : kKinds)
        if (k.name == name) return k.kind;
    return std::nullopt;
}

bool is_weight_bearing(OpKind kind) noexcept {
    return kind == OpKind::Conv2D || kind == OpKind::DepthwiseConv2D || kind == OpKind::Linear;
}

bool supports_elastic_width(OpKind kind) noexcept {
    return kind == OpKind::Conv2D || kind == OpKind::Linear;
}

bool supports_elastic_kernel(OpKind kind) noexcept {
    return kind == OpKind::Conv2D;
}

bool preserves_channels(OpKind kind) noexcept {
    switch (kind) {
    case OpKind::Output:
    case OpKind::DepthwiseConv2D:
    case OpKind::BatchNorm:
    case OpKind::ReLU:
    case OpKind::Add:
    case OpKind::MaxPool2D:
    case OpKind::AvgPool2D:
    case OpKind::GlobalAvgPool:
        return true;
    default:
        return false;
    }
}

std::int64_t LayerNode::attr(std::string_view name) const {
    return static_cast<std::int64_t>(attr_real(name));
}

double LayerNode::attr_real(std::string_view name) const {
    auto it = attrs.find(std::string(name));
    if (it == attrs.end()) throw GraphError("node '" + id + "' lacks attribute '" + std::string(name) + "'");
    return it->second;
}

std::optional<std::string> LayerNode::weight(std::string_view role) const {
    auto it = weight_refs.find(std::string(role));
    if (it == weight_refs.end()) return std::nullopt;
    return it->second;
}

const std::vector<std::string>& required_attrs(OpKind kind) {
    static const std::vector<std::string> none;
    static const std::vector<std::string> input{"channels", "height", "width"};
    static const std::vector<std::string> conv{"out_channels", "kernel_size", "stride", "padding"};
    static const std::vector<std::string> window{"kernel_size", "stride", "padding"};
    static const std::vector<std::string> linear{"out_features"};
    static const std::vector<std::string> bn{"epsilon"};
    switch (kind) {
    case OpKind::Input: return input;
    case OpKind::Conv2D: return conv;
    case OpKind::DepthwiseConv2D:
    case OpKind::MaxPool2D:
    case OpKind::AvgPool2D: return window;
    case OpKind::Linear: return linear;
    case OpKind::BatchNorm: return bn;
    default: return none;
    }
}

const std::vector<std::string>& required_weights(OpKind kind) {
    static const std::vector<std::string> none;
    static const std::vector<std::string> w{"weight"};
    static const std::vector<std::string> bn{"gamma", "beta", "running_mean", "running_var"};
    switch (kind) {
    case OpKind::Conv2D:
    case OpKind::DepthwiseConv2D:
    case OpKind::Linear: return w;
    case OpKind::BatchNorm: return bn;
    default: return none;
    }
}

ModelGraph::ModelGraph(std::vector<LayerNode> nodes, WeightStore weights)
    : nodes_(std::move(nodes)), weights_(std::move(weights)) {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        index_.emplace(nodes_[i].id, i);
        if (nodes_[i].kind == OpKind::Input && input_id_.empty()) input_id_ = nodes_[i].id;
        if (nodes_[i].kind == OpKind::Output && output_id_.empty()) output_id_ = nodes_[i].id;
    }
    consumers_.resize(nodes_.size());
    inputs_.resize(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        for (const auto& in : nodes_[i].inputs) {
            auto it = index_.find(in);
            if (it == index_.end()) continue;
            inputs_[i].push_back(it->second);
            consumers_[it->second].push_back(i);
        }
    }
}

const LayerNode& ModelGraph::node(std::string_view id) const {
    auto idx = index_of(id);
    if (!idx) throw GraphError("unknown node '" + std::string(id) + "'");
    return nodes_[*idx];
}

std::optional<std::size_t> ModelGraph::index_of(std::string_view id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

TensorShape ModelGraph::input_shape(std::int64_t batch) const {
    if (input_id_.empty()) throw GraphError("graph has no Input node");
    const auto& in = node(input_id_);
    return TensorShape{batch, in.attr("channels"), in.attr("height"), in.attr("width")};
}

std::int64_t ModelGraph::num_classes() const {
    auto shapes = infer_shapes(*this, input_shape(1));
    const auto& out = shapes.at(output_id_);
    return out.numel();
}

std::vector<std::size_t> topological_indices(const ModelGraph& graph) {
    const auto n = graph.size();
    for (const auto& node : graph.nodes())
        for (const auto& in : node.inputs)
            if (!graph.index_of(in)) throw GraphError("node '" + node.id + "' reads unknown node '" + in + "'");

    const auto& ins = graph.input_indices();
    const auto& outs = graph.consumers();
    std::vector<std::size_t> pending(n);
    for (std::size_t i = 0; i < n; ++i) pending[i] = ins[i].size();

    std::priority_queue<std::size_t, std::vector<std::size_t>, std::greater<>> ready;
    for (std::size_t i = 0; i < n; ++i)
        if (pending[i] == 0) ready.push(i);

    std::vector<std::size_t> order;
    order.reserve(n);
    while (!ready.empty()) {
        auto i = ready.top();
        ready.pop();
        order.push_back(i);
        for (auto c : outs[i])
            if (--pending[c] == 0) ready.push(c);
    }
    if (order.size() == n) return order;

    // Walk input edges among the leftover nodes until a node repeats.
    std::vector<bool> done(n, false);
    for (auto i : order) done[i] = true;
    std::size_t cur = 0;
    while (done[cur]) ++cur;
    std::vector<int> seen_at(n, -1);
    for (int step = 0;; ++step) {
        seen_at[cur] = step;
        std::size_t next = cur;
        for (auto p : ins[cur])
            if (!done[p]) {
                next = p;
                break;
            }
        if (seen_at[next] >= 0)
            throw CycleDetected("cycle through edge '" + graph.node(next).id + "' -> '" + graph.node(cur).id + "'");
        cur = next;
    }
}

std::vector<std::string> topological_order(const ModelGraph& graph) {
    std::vector<std::string> ids;
    for (auto i : topological_indices(graph)) ids.push_back(graph.node(i).id);
    return ids;
}

namespace {

const Tensor& weight_of(const ModelGraph& g, const LayerNode& node, std::string_view role) {
    auto key = node.weight(role);
    if (!key) throw GraphError("node '" + node.id + "' lacks weight '" + std::string(role) + "'");
    auto it = g.weights().find(*key);
    if (it == g.weights().end()) throw GraphError("missing weight tensor '" + *key + "'");
    return it->second;
}

std::int64_t window_out(std::int64_t in, std::int64_t k, std::int64_t stride, std::int64_t pad) {
    const auto span = in + 2 * pad - k;
    if (span < 0 || stride < 1) return 0;
    return span / stride + 1;
}

void expect_rank(const LayerNode& node, const TensorShape& x, std::size_t rank) {
    if (x.rank() != rank)
        throw ShapeMismatch(node.id, "rank " + std::to_string(rank) + " input", x.str());
}

void expect_extent(const LayerNode& node, std::int64_t got, std::int64_t stored, bool sliced, const char* what) {
    const bool ok = sliced ? (got >= 1 && got <= stored) : got == stored;
    if (!ok)
        throw ShapeMismatch(node.id, std::string(what) + (sliced ? " <= " : " == ") + std::to_string(stored),
                            std::to_string(got));
}

} // namespace

std::vector<TensorShape> infer_plan_shapes(const ModelGraph& graph, const ExecPlan& plan,
                                           const TensorShape& input_shape, bool sliced) {
    std::vector<TensorShape> shapes(graph.size());
    for (auto i : plan.order) {
        const auto& node = graph.node(i);
        const auto& exec = plan.nodes[i];
        auto in = [&](std::size_t k) -> const TensorShape& { return shapes[exec.inputs.at(k)]; };
        TensorShape out;
        switch (node.kind) {
        case OpKind::Input: {
            const TensorShape want{input_shape.rank() == 4 ? input_shape[0] : 1, node.attr("channels"),
                                   node.attr("height"), node.attr("width")};
            if (input_shape != want) throw ShapeMismatch(node.id, want.str(), input_shape.str());
            out = input_shape;
            break;
        }
        case OpKind::Output:
        case OpKind::ReLU:
            out = in(0);
            break;
        case OpKind::Conv2D: {
            const auto& x = in(0);
            expect_rank(node, x, 4);
            const auto& w = weight_of(graph, node, "weight");
            expect_extent(node, x[1], w.shape[1], sliced, "input channels");
            const auto k = exec.kernel;
            const auto stride = node.attr("stride");
            out = TensorShape{x[0], exec.out_channels, window_out(x[2], k, stride, exec.padding),
                              window_out(x[3], k, stride, exec.padding)};
            if (!out.valid()) throw ShapeMismatch(node.id, "positive output extent", out.str());
            break;
        }
        case OpKind::DepthwiseConv2D: {
            const auto& x = in(0);
            expect_rank(node, x, 4);
            const auto& w = weight_of(graph, node, "weight");
            expect_extent(node, x[1], w.shape[0], sliced, "channels");
            const auto k = exec.kernel;
            const auto stride = node.attr("stride");
            out = TensorShape{x[0], x[1], window_out(x[2], k, stride, exec.padding),
                              window_out(x[3], k, stride, exec.padding)};
            if (!out.valid()) throw ShapeMismatch(node.id, "positive output extent", out.str());
            break;
        }
        case OpKind::Linear: {
            const auto& x = in(0);
            expect_rank(node, x, 2);
            const auto& w = weight_of(graph, node, "weight");
            expect_extent(node, x[1], w.shape[1], sliced, "input features");
            out = TensorShape{x[0], exec.out_channels};
            break;
        }
        case OpKind::BatchNorm: {
            const auto& x = in(0);
            if (x.rank() != 2 && x.rank() != 4) throw ShapeMismatch(node.id, "rank 2 or 4 input", x.str());
            const auto& g = weight_of(graph, node, "gamma");
            expect_extent(node, x[1], g.shape.numel(), sliced, "channels");
            out = x;
            break;
        }
        case OpKind::Add: {
            if (exec.inputs.empty()) throw ShapeMismatch(node.id, "at least one input", "none");
            out = in(0);
            for (std::size_t k = 1; k < exec.inputs.size(); ++k)
                if (in(k) != out) throw ShapeMismatch(node.id, out.str(), in(k).str());
            break;
        }
        case OpKind::MaxPool2D:
        case OpKind::AvgPool2D: {
            const auto& x = in(0);
            expect_rank(node, x, 4);
            const auto k = node.attr("kernel_size"), s = node.attr("stride"), p = node.attr("padding");
            out = TensorShape{x[0], x[1], window_out(x[2], k, s, p), window_out(x[3], k, s, p)};
            if (!out.valid()) throw ShapeMismatch(node.id, "positive output extent", out.str());
            break;
        }
        case OpKind::GlobalAvgPool: {
            const auto& x = in(0);
            expect_rank(node, x, 4);
            out = TensorShape{x[0], x[1], 1, 1};
            break;
        }
        case OpKind::Flatten: {
            const auto& x = in(0);
            if (x.rank() == 2)
                out = x;
            else {
                expect_rank(node, x, 4);
                out = TensorShape{x[0], x[1] * x[2] * x[3]};
            }
            break;
        }
        }
        shapes[i] = std::move(out);
    }
    return shapes;
}

namespace {

ExecPlan plan_skeleton(const ModelGraph& graph, std::vector<std::size_t> order) {
    ExecPlan plan;
    plan.order = std::move(order);
    plan.nodes.resize(graph.size());
    for (std::size_t i = 0; i < graph.size(); ++i) {
        const auto& node = graph.node(i);
        auto& e = plan.nodes[i];
        e.inputs = graph.input_indices()[i];
        if (node.kind == OpKind::Conv2D) e.out_channels = node.attr("out_channels");
        if (node.kind == OpKind::Linear) e.out_channels = node.attr("out_features");
        if (node.kind == OpKind::Conv2D || node.kind == OpKind::DepthwiseConv2D) {
            e.kernel = node.attr("kernel_size");
            e.padding = node.attr("padding");
        }
    }
    return plan;
}

} // namespace

std::map<std::string, TensorShape> infer_shapes(const ModelGraph& graph, const TensorShape& input_shape) {
    auto plan = plan_skeleton(graph, topological_indices(graph));
    auto shapes = infer_plan_shapes(graph, plan, input_shape, false);
    std::map<std::string, TensorShape> result;
    for (auto i : plan.order) result.emplace(graph.node(i).id, std::move(shapes[i]));
    return result;
}

ExecPlan full_plan(const ModelGraph& graph) {
    auto plan = plan_skeleton(graph, topological_indices(graph));
    plan.shapes = infer_plan_shapes(graph, plan, graph.input_shape(1), false);
    return plan;
}

std::string_view to_string(DiagnosticCode code) noexcept {
    switch (code) {
    case DiagnosticCode::DuplicateId: return "DuplicateId";
    case DiagnosticCode::UnknownInput: return "UnknownInput";
    case DiagnosticCode::BadArity: return "BadArity";
    case DiagnosticCode::MissingAttr: return "MissingAttr";
    case DiagnosticCode::MissingWeight: return "MissingWeight";
    case DiagnosticCode::WeightShape: return "WeightShape";
    case DiagnosticCode::NoInput: return "NoInput";
    case DiagnosticCode::MultipleInputs: return "MultipleInputs";
    case DiagnosticCode::NoOutput: return "NoOutput";
    case DiagnosticCode::MultipleOutputs: return "MultipleOutputs";
    case DiagnosticCode::Cycle: return "Cycle";
    case DiagnosticCode::Unreachable: return "Unreachable";
    case DiagnosticCode::ShapeError: return "ShapeError";
    }
    return "?";
}

namespace {

void check_weights(const ModelGraph& graph, const LayerNode& node, std::vector<Diagnostic>& out) {
    auto add = [&](DiagnosticCode c, std::string why) { out.push_back({c, node.id, std::move(why)}); };
    auto lookup = [&](const std::string& role) -> const Tensor* {
        auto key = node.weight(role);
        if (!key) return nullptr;
        auto it = graph.weights().find(*key);
        return it == graph.weights().end() ? nullptr : &it->second;
    };

    bool complete = true;
    for (const auto& role : required_weights(node.kind)) {
        auto key = node.weight(role);
        if (!key) {
            add(DiagnosticCode::MissingWeight, "no '" + role + "' weight reference");
            complete = false;
        } else if (!graph.weights().count(*key)) {
            add(DiagnosticCode::MissingWeight, "weight key '" + *key + "' not in store");
            complete = false;
        }
    }
    if (auto key = node.weight("bias"); key && !graph.weights().count(*key)) {
        add(DiagnosticCode::MissingWeight, "weight key '" + *key + "' not in store");
        complete = false;
    }
    for (const auto& [role, key] : node.weight_refs) {
        auto it = graph.weights().find(key);
        if (it != graph.weights().end() &&
            (!it->second.shape.valid() ||
             static_cast<std::size_t>(it->second.shape.numel()) != it->second.data.size()))
            add(DiagnosticCode::WeightShape, "tensor '" + key + "' element count disagrees with its shape");
    }
    if (!complete) return;
    for (const auto& a : required_attrs(node.kind))
        if (!node.has_attr(a)) return;

    auto bias_ok = [&](std::int64_t n) {
        const Tensor* b = lookup("bias");
        return !b || b->shape == TensorShape{n};
    };
    switch (node.kind) {
    case OpKind::Conv2D: {
        const auto& w = lookup("weight")->shape;
        const auto k = node.attr("kernel_size");
        if (w.rank() != 4 || w[0] != node.attr("out_channels") || w[2] != k || w[3] != k || !bias_ok(w[0]))
            add(DiagnosticCode::WeightShape, "conv weight " + w.str() + " disagrees with attributes");
        break;
    }
    case OpKind::DepthwiseConv2D: {
        const auto& w = lookup("weight")->shape;
        const auto k = node.attr("kernel_size");
        if (w.rank() != 4 || w[1] != 1 || w[2] != k || w[3] != k || !bias_ok(w[0]))
            add(DiagnosticCode::WeightShape, "depthwise weight " + w.str() + " disagrees with attributes");
        break;
    }
    case OpKind::Linear: {
        const auto& w = lookup("weight")->shape;
        if (w.rank() != 2 || w[0] != node.attr("out_features") || !bias_ok(w[0]))
            add(DiagnosticCode::WeightShape, "linear weight " + w.str() + " disagrees with attributes");
        break;
    }
    case OpKind::BatchNorm: {
        const auto& g = lookup("gamma")->shape;
        for (const auto& role : required_weights(node.kind))
            if (lookup(role)->shape.rank() != 1 || lookup(role)->shape != g)
                add(DiagnosticCode::WeightShape, "batchnorm tensor '" + role + "' has inconsistent shape");
        break;
    }
    default:
        break;
    }
}

} // namespace

std::vector<Diagnostic> validate_graph(const ModelGraph& graph) {
    std::vector<Diagnostic> out;
    std::set<std::string> ids;
    bool unresolved = false;
    std::size_t n_inputs = 0, n_outputs = 0;

    for (const auto& node : graph.nodes()) {
        if (!ids.insert(node.id).second) out.push_back({DiagnosticCode::DuplicateId, node.id, "id declared twice"});
        if (node.kind == OpKind::Input) ++n_inputs;
        if (node.kind == OpKind::Output) {
            ++n_outputs;
            if (n_outputs > 1) out.push_back({DiagnosticCode::MultipleOutputs, node.id, "second Output node"});
        }
        if (node.kind == OpKind::Input && n_inputs > 1)
            out.push_back({DiagnosticCode::MultipleInputs, node.id, "second Input node"});

        const auto arity = node.inputs.size();
        const bool arity_ok = node.kind == OpKind::Input ? arity == 0
                              : node.kind == OpKind::Add ? arity >= 2
                                                         : arity == 1;
        if (!arity_ok)
            out.push_back({DiagnosticCode::BadArity, node.id,
                           std::string(to_string(node.kind)) + " with " + std::to_string(arity) + " inputs"});
        for (const auto& in : node.inputs)
            if (!graph.index_of(in)) {
                out.push_back({DiagnosticCode::UnknownInput, node.id, "reads unknown node '" + in + "'"});
                unresolved = true;
            }
        for (const auto& a : required_attrs(node.kind))
            if (!node.has_attr(a)) out.push_back({DiagnosticCode::MissingAttr, node.id, "missing attribute '" + a + "'"});
        check_weights(graph, node, out);
    }
    if (n_inputs == 0) out.push_back({DiagnosticCode::NoInput, "", "graph has no Input node"});
    if (n_outputs == 0) out.push_back({DiagnosticCode::NoOutput, "", "graph has no Output node"});
    if (unresolved) return out;

    try {
        topological_indices(graph);
    } catch (const CycleDetected& e) {
        out.push_back({DiagnosticCode::Cycle, "", e.what()});
        return out;
    }

    if (n_inputs >= 1 && n_outputs >= 1) {
        const auto n = graph.size();
        auto sweep = [&](std::size_t start, const std::vector<std::vector<std::size_t>>& edges) {
            std::vector<bool> seen(n, false);
            std::vector<std::size_t> stack{start};
            seen[start] = true;
            while (!stack.empty()) {
                auto i = stack.back();
                stack.pop_back();
                for (auto j : edges[i])
                    if (!seen[j]) {
                        seen[j] = true;
                        stack.push_back(j);
                    }
            }
            return seen;
        };
        auto fwd = sweep(*graph.index_of(graph.input_id()), graph.consumers());
        auto bwd = sweep(*graph.index_of(graph.output_id()), graph.input_indices());
        for (std::size_t i = 0; i < n; ++i) {
            if (!fwd[i])
                out.push_back({DiagnosticCode::Unreachable, graph.node(i).id, "not reachable from Input"});
            else if (!bwd[i])
                out.push_back({DiagnosticCode::Unreachable, graph.node(i).id, "does not reach Output"});
        }
    }

    if (out.empty()) {
        try {
            infer_shapes(graph, graph.input_shape(1));
        } catch (const ShapeMismatch& e) {
            out.push_back({DiagnosticCode::ShapeError, e.node(), e.what()});
        }
    }
    return out;
}

void require_valid(const ModelGraph& graph) {
    auto diags = validate_graph(graph);
    if (diags.empty()) return;
    std::ostringstream msg;
    msg << "invalid graph:";
    for (const auto& d : diags) msg << "\n  [" << to_string(d.code) << "] " << d.node << ": " << d.reason;
    throw GraphError(msg.str());
}

} // namespace bnas
