// SPDX-License-Identifier: Apache-2.0
#ifndef BNAS_GRAPH_HPP
#define BNAS_GRAPH_HPP

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace bnas {

/// Dense tensor extents. Activations are NCHW (or N,F after Flatten/Linear),
/// conv kernels Cout,Cin,Kh,Kw, linear weights Out,In.
struct TensorShape {
    std::vector<std::int64_t> dims;

    TensorShape() = default;
    TensorShape(std::initializer_list<std::int64_t> d) : dims(d) {}
    explicit TensorShape(std::vector<std::int64_t> d) : dims(std::move(d)) {}

    std::size_t rank() const noexcept { return dims.size(); }
    std::int64_t operator[](std::size_t i) const { return dims.at(i); }
    std::int64_t numel() const noexcept;
    /// All dims >= 1 and rank in {1, 2, 4}.
    bool valid() const noexcept;
    std::string str() const;

    friend bool operator==(const TensorShape&, const TensorShape&) = default;
};

enum class OpKind {
    Input,
    Output,
    Conv2D,
    DepthwiseConv2D,
    Linear,
    BatchNorm,
    ReLU,
    Add,
    MaxPool2D,
    AvgPool2D,
    GlobalAvgPool,
    Flatten,
};

std::string_view to_string(OpKind kind) noexcept;
std::optional<OpKind> parse_op_kind(std::string_view name) noexcept;

// Capability table.
bool is_weight_bearing(OpKind kind) noexcept;
bool supports_elastic_width(OpKind kind) noexcept;
bool supports_elastic_kernel(OpKind kind) noexcept;
/// Output channel count equals the (first) input's channel count.
bool preserves_channels(OpKind kind) noexcept;

template <class T>
struct BasicTensor {
    TensorShape shape;
    std::vector<T> data;

    friend bool operator==(const BasicTensor&, const BasicTensor&) = default;
};

using Tensor = BasicTensor<float>;

template <class T>
using BasicWeightStore = std::map<std::string, BasicTensor<T>>;
using WeightStore = BasicWeightStore<float>;

/// Kind-specific integer/real attributes (stride, padding, kernel_size,
/// out_channels, out_features, epsilon, ...).
using Attrs = std::map<std::string, double>;

struct LayerNode {
    std::string id;
    OpKind kind = OpKind::ReLU;
    Attrs attrs;
    std::vector<std::string> inputs;
    /// role ("weight", "bias", "gamma", ...) -> WeightStore key
    std::map<std::string, std::string> weight_refs;

    std::int64_t attr(std::string_view name) const;
    double attr_real(std::string_view name) const;
    bool has_attr(std::string_view name) const { return attrs.find(std::string(name)) != attrs.end(); }
    std::optional<std::string> weight(std::string_view role) const;

    friend bool operator==(const LayerNode&, const LayerNode&) = default;
};

/// Attribute names each kind must carry.
const std::vector<std::string>& required_attrs(OpKind kind);
/// Weight roles each kind must carry (optional "bias" excluded).
const std::vector<std::string>& required_weights(OpKind kind);

/// Topology is fixed at construction; weights stay mutable for training.
class ModelGraph {
public:
    ModelGraph() = default;
    ModelGraph(std::vector<LayerNode> nodes, WeightStore weights);

    const std::vector<LayerNode>& nodes() const noexcept { return nodes_; }
    std::size_t size() const noexcept { return nodes_.size(); }
    const LayerNode& node(std::size_t i) const { return nodes_.at(i); }
    const LayerNode& node(std::string_view id) const;
    std::optional<std::size_t> index_of(std::string_view id) const;

    /// Empty when the graph has no Input (Output) node.
    const std::string& input_id() const noexcept { return input_id_; }
    const std::string& output_id() const noexcept { return output_id_; }

    const WeightStore& weights() const noexcept { return weights_; }
    WeightStore& weights() noexcept { return weights_; }

    /// (batch, C, H, W) from the Input node's attributes.
    TensorShape input_shape(std::int64_t batch = 1) const;
    std::int64_t num_classes() const;

    /// consumers()[i] lists indices of nodes that read node i, in declaration order.
    const std::vector<std::vector<std::size_t>>& consumers() const noexcept { return consumers_; }
    /// Node input ids resolved to indices; unknown references are dropped.
    const std::vector<std::vector<std::size_t>>& input_indices() const noexcept { return inputs_; }

    friend bool operator==(const ModelGraph& a, const ModelGraph& b) {
        return a.nodes_ == b.nodes_ && a.weights_ == b.weights_;
    }

private:
    std::vector<LayerNode> nodes_;
    WeightStore weights_;
    std::map<std::string, std::size_t, std::less<>> index_;
    std::vector<std::vector<std::size_t>> consumers_;
    std::vector<std::vector<std::size_t>> inputs_;
    std::string input_id_;
    std::string output_id_;
};

/// Per-node execution parameters. A plan describes either the graph as
/// written or one activated subnetwork of it.
struct NodeExec {
    bool active = true;
    std::vector<std::size_t> inputs;
    std::int64_t out_channels = 0; // Conv2D / Linear
    std::int64_t kernel = 0;       // Conv2D / DepthwiseConv2D
    std::int64_t padding = 0;      // Conv2D / DepthwiseConv2D
};

struct ExecPlan {
    std::vector<std::size_t> order; // active nodes, topological
    std::vector<NodeExec> nodes;    // indexed like ModelGraph::nodes()
    std::vector<TensorShape> shapes; // per-sample (batch 1) output shapes
};

/// Nodes sorted so every node follows its inputs; ties by declaration order.
std::vector<std::string> topological_order(const ModelGraph& graph);
std::vector<std::size_t> topological_indices(const ModelGraph& graph);

/// Output activation shape of every node.
std::map<std::string, TensorShape> infer_shapes(const ModelGraph& graph, const TensorShape& input_shape);

/// Shapes under a plan. With `sliced`, weight-bearing ops may read a prefix
/// of their stored input extent; otherwise extents must match exactly.
std::vector<TensorShape> infer_plan_shapes(const ModelGraph& graph, const ExecPlan& plan,
                                           const TensorShape& input_shape, bool sliced);

/// Plan that executes the graph exactly as written.
ExecPlan full_plan(const ModelGraph& graph);

enum class DiagnosticCode {
    DuplicateId,
    UnknownInput,
    BadArity,
    MissingAttr,
    MissingWeight,
    WeightShape,
    NoInput,
    MultipleInputs,
    NoOutput,
    MultipleOutputs,
    Cycle,
    Unreachable,
    ShapeError,
};

std::string_view to_string(DiagnosticCode code) noexcept;

struct Diagnostic {
    DiagnosticCode code;
    std::string node;
    std::string reason;
};

/// Empty iff every structural invariant holds.
std::vector<Diagnostic> validate_graph(const ModelGraph& graph);

/// Throws GraphError listing the diagnostics when the graph is invalid.
void require_valid(const ModelGraph& graph);

} // namespace bnas

#endif // BNAS_GRAPH_HPP
