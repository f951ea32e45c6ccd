#pragma once

#include <random>
#include <string>
#include <vector>

#include "osnet/ops.hpp"
#include "osnet/tensor.hpp"

namespace osnet {

// Registry entry for checkpointing and optimisation. Tensors are aliased,
// not copied, so mutating through the entry mutates the layer.
struct NamedTensor {
    std::string name;
    Tensor tensor;
    bool trainable = true;
};

// He-style init: zero-mean normal with variance 2/fan_in.
Tensor init_conv_weight(int out_ch, int in_ch, int k, std::mt19937_64& rng);
Tensor init_depthwise_weight(int channels, int k, std::mt19937_64& rng);
Tensor init_linear_weight(int out_dim, int in_dim, std::mt19937_64& rng);

struct ConvLayer {
    Tensor weight;  // [out, in, k, k], bias-free (always feeds a norm)
    int stride = 1;
    int padding = 0;

    ConvLayer() = default;
    ConvLayer(int in_ch, int out_ch, int k, int stride, int padding,
              std::mt19937_64& rng);
    Tensor forward(const Tensor& x) const { return conv2d(x, weight, stride, padding); }
    void collect(const std::string& prefix, std::vector<NamedTensor>& out);
};

struct BatchNormLayer {
    Tensor gamma, beta;
    Tensor running_mean, running_var;
    Tensor batches_seen;  // [1] counter, persisted with the running stats

    BatchNormLayer() = default;
    explicit BatchNormLayer(int channels);
    Tensor forward(const Tensor& x, bool training);
    void collect(const std::string& prefix, std::vector<NamedTensor>& out);

  private:
    bool warned_uninitialised_ = false;
};

struct InstanceNormLayer {
    Tensor gamma, beta;

    InstanceNormLayer() = default;
    explicit InstanceNormLayer(int channels);
    Tensor forward(const Tensor& x) const { return instance_norm(x, gamma, beta); }
    void collect(const std::string& prefix, std::vector<NamedTensor>& out);
};

struct LinearLayer {
    Tensor weight, bias;

    LinearLayer() = default;
    LinearLayer(int in_dim, int out_dim, std::mt19937_64& rng);
    Tensor forward(const Tensor& x) const { return linear(x, weight, bias); }
    void collect(const std::string& prefix, std::vector<NamedTensor>& out);
};

// Factorised 3x3 unit: pointwise 1x1 channel mixing, then depthwise 3x3
// spatial filtering, then BN and ReLU.
struct Lite3x3Layer {
    Tensor pointwise;  // [c', c, 1, 1]
    Tensor depthwise;  // [c', 1, 3, 3]
    BatchNormLayer bn;

    Lite3x3Layer() = default;
    Lite3x3Layer(int in_ch, int out_ch, std::mt19937_64& rng);
    Tensor forward(const Tensor& x, bool training);
    void collect(const std::string& prefix, std::vector<NamedTensor>& out);
};

// Conv parameter count / multiply count for one Lite 3x3 unit, excluding the
// norm affine parameters: (k^2 + c) * c' with k = 3.
long long lite3x3_conv_params(int in_ch, int out_ch);
long long lite3x3_mult_adds(int in_ch, int out_ch, int h, int w);

// Shared channel-wise gate: global average pooling, a bottleneck MLP with one
// ReLU hidden layer of size C/r, and a sigmoid output per channel. One
// instance serves every stream of its block.
struct AggregationGate {
    LinearLayer fc1, fc2;
    int channels = 0;
    int hidden = 0;

    AggregationGate() = default;
    AggregationGate(int channels, int reduction, std::mt19937_64& rng);
    // [N,C,H,W] -> [N,C,1,1], values in (0,1)
    Tensor forward(const Tensor& stream) const;
    void collect(const std::string& prefix, std::vector<NamedTensor>& out);
};

}  // namespace osnet
