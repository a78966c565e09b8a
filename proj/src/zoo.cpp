// SPDX-License-Identifier: Apache-2.0
#include "bnas/zoo.hpp"

#include <cmath>

#include "bnas/errors.hpp"

namespace bnas {

namespace {

std::int64_t window_out(std::int64_t in, std::int64_t k, std::int64_t s, std::int64_t p) {
    return (in + 2 * p - k) / s + 1;
}

} // namespace

std::string GraphBuilder::push(LayerNode node, TensorShape shape) {
    shapes_[node.id] = std::move(shape);
    nodes_.push_back(std::move(node));
    return nodes_.back().id;
}

Tensor GraphBuilder::random_tensor(TensorShape shape, double stddev) {
    Tensor t;
    t.data.resize(static_cast<std::size_t>(shape.numel()));
    for (auto& v : t.data) v = static_cast<float>(stddev * rng_.normal());
    t.shape = std::move(shape);
    return t;
}

std::string GraphBuilder::input(std::int64_t channels, std::int64_t height, std::int64_t width, std::string id) {
    LayerNode n{id, OpKind::Input, {{"channels", double(channels)}, {"height", double(height)}, {"width", double(width)}}};
    return push(std::move(n), TensorShape{1, channels, height, width});
}

std::string GraphBuilder::conv(std::string id, const std::string& in, std::int64_t out_channels, std::int64_t kernel,
                               std::int64_t stride, std::int64_t padding, bool bias) {
    if (padding < 0) padding = kernel / 2;
    const auto& x = shape(in);
    const auto cin = x[1];
    LayerNode n{id, OpKind::Conv2D,
                {{"out_channels", double(out_channels)}, {"kernel_size", double(kernel)},
                 {"stride", double(stride)}, {"padding", double(padding)}},
                {in}};
    n.weight_refs["weight"] = id + ".weight";
    weights_[id + ".weight"] =
        random_tensor(TensorShape{out_channels, cin, kernel, kernel}, std::sqrt(2.0 / double(cin * kernel * kernel)));
    if (bias) {
        n.weight_refs["bias"] = id + ".bias";
        weights_[id + ".bias"] = random_tensor(TensorShape{out_channels}, 0.05);
    }
    TensorShape y{1, out_channels, window_out(x[2], kernel, stride, padding), window_out(x[3], kernel, stride, padding)};
    return push(std::move(n), std::move(y));
}

std::string GraphBuilder::depthwise(std::string id, const std::string& in, std::int64_t kernel, std::int64_t stride,
                                    std::int64_t padding, bool bias) {
    if (padding < 0) padding = kernel / 2;
    const auto& x = shape(in);
    const auto c = x[1];
    LayerNode n{id, OpKind::DepthwiseConv2D,
                {{"kernel_size", double(kernel)}, {"stride", double(stride)}, {"padding", double(padding)}},
                {in}};
    n.weight_refs["weight"] = id + ".weight";
    weights_[id + ".weight"] = random_tensor(TensorShape{c, 1, kernel, kernel}, std::sqrt(2.0 / double(kernel * kernel)));
    if (bias) {
        n.weight_refs["bias"] = id + ".bias";
        weights_[id + ".bias"] = random_tensor(TensorShape{c}, 0.05);
    }
    TensorShape y{1, c, window_out(x[2], kernel, stride, padding), window_out(x[3], kernel, stride, padding)};
    return push(std::move(n), std::move(y));
}

std::string GraphBuilder::linear(std::string id, const std::string& in, std::int64_t out_features, bool bias) {
    const auto& x = shape(in);
    if (x.rank() != 2) throw GraphError("linear '" + id + "' needs a flattened input");
    const auto fan_in = x[1];
    LayerNode n{id, OpKind::Linear, {{"out_features", double(out_features)}}, {in}};
    n.weight_refs["weight"] = id + ".weight";
    weights_[id + ".weight"] = random_tensor(TensorShape{out_features, fan_in}, std::sqrt(1.0 / double(fan_in)));
    if (bias) {
        n.weight_refs["bias"] = id + ".bias";
        weights_[id + ".bias"] = random_tensor(TensorShape{out_features}, 0.05);
    }
    return push(std::move(n), TensorShape{1, out_features});
}

std::string GraphBuilder::batchnorm(std::string id, const std::string& in, double epsilon) {
    const auto& x = shape(in);
    const auto c = x[1];
    LayerNode n{id, OpKind::BatchNorm, {{"epsilon", epsilon}}, {in}};
    for (const char* role : {"gamma", "beta", "running_mean", "running_var"}) n.weight_refs[role] = id + "." + role;

    auto gamma = random_tensor(TensorShape{c}, 0.1);
    for (auto& v : gamma.data) v += 1.0f;
    auto var = random_tensor(TensorShape{c}, 0.2);
    for (auto& v : var.data) v = 1.0f + std::abs(v);
    weights_[id + ".gamma"] = std::move(gamma);
    weights_[id + ".beta"] = random_tensor(TensorShape{c}, 0.1);
    weights_[id + ".running_mean"] = random_tensor(TensorShape{c}, 0.1);
    weights_[id + ".running_var"] = std::move(var);
    return push(std::move(n), x);
}

std::string GraphBuilder::relu(std::string id, const std::string& in) {
    auto s = shape(in);
    return push(LayerNode{std::move(id), OpKind::ReLU, {}, {in}}, std::move(s));
}

std::string GraphBuilder::add(std::string id, std::vector<std::string> inputs) {
    auto s = shape(inputs.at(0));
    return push(LayerNode{std::move(id), OpKind::Add, {}, std::move(inputs)}, std::move(s));
}

std::string GraphBuilder::maxpool(std::string id, const std::string& in, std::int64_t kernel, std::int64_t stride,
                                  std::int64_t padding) {
    const auto& x = shape(in);
    TensorShape y{1, x[1], window_out(x[2], kernel, stride, padding), window_out(x[3], kernel, stride, padding)};
    LayerNode n{std::move(id), OpKind::MaxPool2D,
                {{"kernel_size", double(kernel)}, {"stride", double(stride)}, {"padding", double(padding)}},
                {in}};
    return push(std::move(n), std::move(y));
}

std::string GraphBuilder::avgpool(std::string id, const std::string& in, std::int64_t kernel, std::int64_t stride,
                                  std::int64_t padding) {
    const auto& x = shape(in);
    TensorShape y{1, x[1], window_out(x[2], kernel, stride, padding), window_out(x[3], kernel, stride, padding)};
    LayerNode n{std::move(id), OpKind::AvgPool2D,
                {{"kernel_size", double(kernel)}, {"stride", double(stride)}, {"padding", double(padding)}},
                {in}};
    return push(std::move(n), std::move(y));
}

std::string GraphBuilder::global_avgpool(std::string id, const std::string& in) {
    const auto& x = shape(in);
    TensorShape y{1, x[1], 1, 1};
    return push(LayerNode{std::move(id), OpKind::GlobalAvgPool, {}, {in}}, std::move(y));
}

std::string GraphBuilder::flatten(std::string id, const std::string& in) {
    const auto& x = shape(in);
    TensorShape y = x.rank() == 2 ? x : TensorShape{1, x[1] * x[2] * x[3]};
    return push(LayerNode{std::move(id), OpKind::Flatten, {}, {in}}, std::move(y));
}

std::string GraphBuilder::output(const std::string& in, std::string id) {
    auto s = shape(in);
    return push(LayerNode{std::move(id), OpKind::Output, {}, {in}}, std::move(s));
}

ModelGraph toy_resnet(std::uint64_t seed, const ResNetOptions& o) {
    GraphBuilder b(seed);
    auto x = b.input(o.in_channels, o.height, o.width);
    x = b.conv("stem", x, o.stem_channels, 3);
    x = b.batchnorm("stem_bn", x);
    x = b.relu("stem_relu", x);
    std::int64_t channels = o.stem_channels;
    for (std::size_t s = 0; s < o.stages.size(); ++s) {
        const auto& stage = o.stages[s];
        for (int k = 0; k < stage.blocks; ++k) {
            const std::string p = "s" + std::to_string(s + 1) + "b" + std::to_string(k) + "_";
            const auto stride = k == 0 ? stage.stride : 1;
            auto y = b.conv(p + "conv_a", x, stage.channels, stage.inner_kernel, stride);
            y = b.batchnorm(p + "bn_a", y);
            y = b.relu(p + "relu_a", y);
            y = b.conv(p + "conv_b", y, stage.channels, 3);
            y = b.batchnorm(p + "bn_b", y);
            std::string shortcut = x;
            if (stride != 1 || channels != stage.channels) {
                shortcut = b.conv(p + "down", x, stage.channels, 1, stride, 0);
                shortcut = b.batchnorm(p + "down_bn", shortcut);
            }
            y = b.add(p + "add", {y, shortcut});
            x = b.relu(p + "relu", y);
            channels = stage.channels;
        }
    }
    x = b.global_avgpool("pool", x);
    x = b.flatten("flatten", x);
    x = b.linear("fc", x, o.num_classes);
    b.output(x);
    return b.build();
}

ModelGraph toy_mobilenet(std::uint64_t seed, const InvertedResidualOptions& o) {
    GraphBuilder b(seed);
    auto x = b.input(o.in_channels, o.height, o.width);
    x = b.conv("stem", x, o.stem_channels, 3);
    x = b.batchnorm("stem_bn", x);
    x = b.relu("stem_relu", x);
    std::int64_t channels = o.stem_channels;
    for (std::size_t k = 0; k < o.blocks.size(); ++k) {
        const auto [out, stride] = o.blocks[k];
        const std::string p = "ir" + std::to_string(k) + "_";
        auto y = b.conv(p + "expand", x, channels * o.expansion, 1, 1, 0);
        y = b.batchnorm(p + "expand_bn", y);
        y = b.relu(p + "expand_relu", y);
        y = b.depthwise(p + "dw", y, o.depthwise_kernel, stride);
        y = b.batchnorm(p + "dw_bn", y);
        y = b.relu(p + "dw_relu", y);
        y = b.conv(p + "project", y, out, 1, 1, 0);
        y = b.batchnorm(p + "project_bn", y);
        if (stride == 1 && out == channels) y = b.add(p + "add", {y, x});
        x = y;
        channels = out;
    }
    x = b.global_avgpool("pool", x);
    x = b.flatten("flatten", x);
    x = b.linear("fc", x, o.num_classes);
    b.output(x);
    return b.build();
}

ModelGraph toy_cnn(std::uint64_t seed, const PlainCnnOptions& o) {
    GraphBuilder b(seed);
    auto x = b.input(o.in_channels, o.height, o.width);
    for (std::size_t k = 0; k < o.blocks.size(); ++k) {
        const auto [c, kernel, stride] = o.blocks[k];
        const std::string p = "block" + std::to_string(k + 1) + "_";
        x = b.conv(p + "conv", x, c, kernel, stride);
        x = b.batchnorm(p + "bn", x);
        x = b.relu(p + "relu", x);
    }
    x = b.global_avgpool("pool", x);
    x = b.flatten("flatten", x);
    x = b.linear("fc", x, o.num_classes);
    b.output(x);
    return b.build();
}

std::vector<std::string> zoo_names() { return {"toy_resnet", "toy_mobilenet", "toy_cnn"}; }

ModelGraph make_zoo_model(const std::string& name, std::uint64_t seed, std::int64_t in_channels, std::int64_t height,
                          std::int64_t width, std::int64_t num_classes) {
    if (name == "toy_resnet") {
        ResNetOptions o;
        o.in_channels = in_channels, o.height = height, o.width = width, o.num_classes = num_classes;
        return toy_resnet(seed, o);
    }
    if (name == "toy_mobilenet") {
        InvertedResidualOptions o;
        o.in_channels = in_channels, o.height = height, o.width = width, o.num_classes = num_classes;
        return toy_mobilenet(seed, o);
    }
    if (name == "toy_cnn") {
        PlainCnnOptions o;
        o.in_channels = in_channels, o.height = height, o.width = width, o.num_classes = num_classes;
        return toy_cnn(seed, o);
    }
    throw ConfigError("unknown model '" + name + "'");
}

} // namespace bnas
