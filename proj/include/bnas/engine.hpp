// SPDX-License-Identifier: Apache-2.0
#ifndef BNAS_ENGINE_HPP
#define BNAS_ENGINE_HPP

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "bnas/graph.hpp"

namespace bnas {

class SuperNetwork;

enum class Mode { Eval, Train };

/// Inputs in NCHW order plus one label per sample.
struct Batch {
    TensorShape shape;
    std::vector<float> inputs;
    std::vector<std::int32_t> labels;

    std::int64_t size() const { return shape.rank() ? shape[0] : 0; }
};

template <class T>
struct NodeCache {
    TensorShape shape;           // with batch dimension
    std::vector<T> out;
    std::vector<T> xhat;         // BatchNorm
    std::vector<T> inv_std;      // BatchNorm, per channel
    std::vector<T> batch_mean;   // BatchNorm (train)
    std::vector<T> batch_var;    // BatchNorm (train), biased
    std::vector<std::int32_t> argmax; // MaxPool2D, -1 where the window saw only padding
};

template <class T>
struct ForwardTrace {
    Mode mode = Mode::Eval;
    std::vector<NodeCache<T>> nodes;
};

template <class T>
struct GradTensor {
    std::vector<T> grad;
    std::vector<std::uint8_t> active; // 1 where the slice was touched

    friend bool operator==(const GradTensor&, const GradTensor&) = default;
};

/// Gradients keyed like the WeightStore. Only tensors of executed layers
/// appear; inside them, untouched elements are exactly zero.
template <class T>
struct BasicGradientStore {
    std::map<std::string, GradTensor<T>> tensors;

    GradTensor<T>& slot(const std::string& key, std::size_t size);
    const GradTensor<T>* find(const std::string& key) const;
    /// Elementwise sum; the receiving operand is always the left addend.
    void accumulate(const BasicGradientStore& other);

    friend bool operator==(const BasicGradientStore&, const BasicGradientStore&) = default;
};

using GradientStore = BasicGradientStore<float>;

/// Runs the active nodes of `plan`. Accumulation order is fixed by the loop
/// nesting, so identical inputs give bit-identical outputs. When `trace` is
/// given, everything backward_pass needs is recorded.
template <class T>
std::vector<T> forward_pass(const ModelGraph& graph, const BasicWeightStore<T>& weights, const ExecPlan& plan,
                            std::span<const T> input, std::int64_t batch, Mode mode, ForwardTrace<T>* trace = nullptr);

/// Accumulates weight gradients of d(loss)/d(logits) = `dlogits` into `grads`.
template <class T>
void backward_pass(const ModelGraph& graph, const BasicWeightStore<T>& weights, const ExecPlan& plan,
                   const ForwardTrace<T>& trace, std::span<const T> dlogits, BasicGradientStore<T>& grads);

/// Mean of -log softmax(logits)[label]; fills d(loss)/d(logits) when asked.
template <class T>
T cross_entropy(std::span<const T> logits, std::span<const std::int32_t> labels, std::int64_t classes,
                std::vector<T>* dlogits = nullptr);

/// alpha * T^2 * KL(softmax(teacher/T) || softmax(student/T)) + (1 - alpha) * CE,
/// both terms averaged over the batch. The teacher is a constant.
template <class T>
T distillation_loss(std::span<const T> student, std::span<const T> teacher, std::span<const std::int32_t> labels,
                    std::int64_t classes, double alpha, double temperature, std::vector<T>* dlogits = nullptr);

/// Blends train-mode batch statistics into running statistics of every
/// active BatchNorm channel; uses the unbiased variance estimate.
template <class T>
void update_running_stats(const ModelGraph& graph, BasicWeightStore<T>& weights, const ExecPlan& plan,
                          const ForwardTrace<T>& trace, double momentum = 0.1);

struct LossSpec {
    enum class Kind { CrossEntropy, Distillation };
    Kind kind = Kind::CrossEntropy;
    std::span<const float> teacher; // detached teacher logits
    double alpha = 0.5;
    double temperature = 4.0;
};

struct PassResult {
    float loss = 0.0f;
    std::vector<float> logits;
    GradientStore grads;
    ForwardTrace<float> trace;
};

std::vector<float> forward(const ModelGraph& graph, const ExecPlan& plan, const Batch& batch, Mode mode = Mode::Eval);
/// Forward through the active subnetwork.
std::vector<float> forward(const SuperNetwork& net, const Batch& batch, Mode mode = Mode::Eval);

/// Train-mode forward + backward. Running statistics are not modified.
PassResult train_pass(const ModelGraph& graph, const ExecPlan& plan, const Batch& batch, const LossSpec& loss = {});
PassResult backward(const SuperNetwork& net, const Batch& batch, const LossSpec& loss = {});

struct OptimizerState {
    double learning_rate = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::map<std::string, std::vector<float>> velocity;
};

/// v = momentum*v + g + wd*w; w -= lr*v, on touched elements only.
void sgd_step(WeightStore& weights, const GradientStore& grads, OptimizerState& state);

/// Index of the largest logit per row (first on ties).
std::vector<std::int32_t> argmax_rows(std::span<const float> logits, std::int64_t classes);

} // namespace bnas

#endif // BNAS_ENGINE_HPP
