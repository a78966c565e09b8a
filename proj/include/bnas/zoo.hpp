// SPDX-License-Identifier: Apache-2.0
#ifndef BNAS_ZOO_HPP
#define BNAS_ZOO_HPP

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "bnas/graph.hpp"
#include "bnas/rng.hpp"

namespace bnas {

/// Incremental graph construction with seeded weight initialisation.
/// Conv/linear weights are He-normal; BatchNorm gets perturbed affine
/// parameters and running statistics so that inference is non-trivial.
class GraphBuilder {
public:
    explicit GraphBuilder(std::uint64_t seed = 0) : rng_(seed) {}

    std::string input(std::int64_t channels, std::int64_t height, std::int64_t width, std::string id = "input");
    std::string conv(std::string id, const std::string& in, std::int64_t out_channels, std::int64_t kernel,
                     std::int64_t stride = 1, std::int64_t padding = -1, bool bias = false);
    std::string depthwise(std::string id, const std::string& in, std::int64_t kernel, std::int64_t stride = 1,
                          std::int64_t padding = -1, bool bias = false);
    std::string linear(std::string id, const std::string& in, std::int64_t out_features, bool bias = true);
    std::string batchnorm(std::string id, const std::string& in, double epsilon = 1e-5);
    std::string relu(std::string id, const std::string& in);
    std::string add(std::string id, std::vector<std::string> inputs);
    std::string maxpool(std::string id, const std::string& in, std::int64_t kernel, std::int64_t stride,
                        std::int64_t padding = 0);
    std::string avgpool(std::string id, const std::string& in, std::int64_t kernel, std::int64_t stride,
                        std::int64_t padding = 0);
    std::string global_avgpool(std::string id, const std::string& in);
    std::string flatten(std::string id, const std::string& in);
    std::string output(const std::string& in, std::string id = "output");

    /// Appends a node verbatim; no weights are created.
    void raw(LayerNode node) { nodes_.push_back(std::move(node)); }
    void set_weight(const std::string& key, Tensor t) { weights_[key] = std::move(t); }

    /// Per-sample output shape of a node added so far.
    const TensorShape& shape(const std::string& id) const { return shapes_.at(id); }

    ModelGraph build() const { return ModelGraph(nodes_, weights_); }

private:
    std::string push(LayerNode node, TensorShape shape);
    Tensor random_tensor(TensorShape shape, double stddev);

    Rng rng_;
    std::vector<LayerNode> nodes_;
    WeightStore weights_;
    std::map<std::string, TensorShape> shapes_;
};

struct ResNetStage {
    std::int64_t channels;
    int blocks;
    std::int64_t stride;
    std::int64_t inner_kernel = 3;
};

struct ResNetOptions {
    std::int64_t in_channels = 3, height = 8, width = 8;
    std::int64_t stem_channels = 16;
    std::vector<ResNetStage> stages{{16, 2, 1, 5}, {32, 2, 2, 3}};
    std::int64_t num_classes = 10;
};

/// Basic-block residual network. The defaults give three identity blocks and
/// one downsampling block.
ModelGraph toy_resnet(std::uint64_t seed, const ResNetOptions& options = {});

struct InvertedResidualOptions {
    std::int64_t in_channels = 3, height = 8, width = 8;
    std::int64_t stem_channels = 16;
    std::int64_t expansion = 3;
    std::int64_t depthwise_kernel = 5;
    /// (output channels, stride) per block
    std::vector<std::pair<std::int64_t, std::int64_t>> blocks{{16, 1}, {24, 2}, {24, 1}};
    std::int64_t num_classes = 10;
};

/// MobileNetV2-style network of inverted-residual blocks.
ModelGraph toy_mobilenet(std::uint64_t seed, const InvertedResidualOptions& options = {});

struct PlainCnnOptions {
    std::int64_t in_channels = 1, height = 12, width = 12;
    /// (channels, kernel, stride) per conv-bn-relu block
    std::vector<std::array<std::int64_t, 3>> blocks{{16, 3, 1}, {32, 3, 2}, {32, 5, 1}, {64, 3, 2}};
    std::int64_t num_classes = 10;
};

/// Plain conv-bn-relu stack with a global-pool classifier head.
ModelGraph toy_cnn(std::uint64_t seed, const PlainCnnOptions& options = {});

/// Names accepted by make_zoo_model: "toy_resnet", "toy_mobilenet", "toy_cnn".
std::vector<std::string> zoo_names();
ModelGraph make_zoo_model(const std::string& name, std::uint64_t seed, std::int64_t in_channels,
                          std::int64_t height, std::int64_t width, std::int64_t num_classes);

} // namespace bnas

#endif // BNAS_ZOO_HPP
