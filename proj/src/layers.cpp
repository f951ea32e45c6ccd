#include "osnet/layers.hpp"

#include <cmath>
#include <cstdio>

namespace osnet {

Tensor init_conv_weight(int out_ch, int in_ch, int k, std::mt19937_64& rng) {
    const double stddev = std::sqrt(2.0 / (static_cast<double>(in_ch) * k * k));
    Tensor w = Tensor::randn({out_ch, in_ch, k, k}, rng, stddev);
    w.set_requires_grad(true);
    return w;
}

Tensor init_depthwise_weight(int channels, int k, std::mt19937_64& rng) {
    const double stddev = std::sqrt(2.0 / (static_cast<double>(k) * k));
    Tensor w = Tensor::randn({channels, 1, k, k}, rng, stddev);
    w.set_requires_grad(true);
    return w;
}

Tensor init_linear_weight(int out_dim, int in_dim, std::mt19937_64& rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(in_dim));
    Tensor w = Tensor::randn({out_dim, in_dim}, rng, stddev);
    w.set_requires_grad(true);
    return w;
}

ConvLayer::ConvLayer(int in_ch, int out_ch, int k, int stride, int padding,
                     std::mt19937_64& rng)
    : weight(init_conv_weight(out_ch, in_ch, k, rng)), stride(stride), padding(padding) {}

void ConvLayer::collect(const std::string& prefix, std::vector<NamedTensor>& out) {
    out.push_back({prefix + ".weight", weight, true});
}

BatchNormLayer::BatchNormLayer(int channels)
    : gamma(Tensor::full({channels}, 1.0)),
      beta(Tensor::zeros({channels})),
      running_mean(Tensor::zeros({channels})),
      running_var(Tensor::full({channels}, 1.0)),
      batches_seen(Tensor::zeros({1})) {
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
}

Tensor BatchNormLayer::forward(const Tensor& x, bool training) {
    if (training) {
        batches_seen[0] += 1.0;
    } else if (batches_seen[0] == 0.0 && !warned_uninitialised_) {
        std::fprintf(stderr,
                     "[osnet] warning: batch norm evaluated before any statistics were "
                     "accumulated; using (0 mean, 1 var) init\n");
        warned_uninitialised_ = true;
    }
    return batch_norm(x, gamma, beta, running_mean, running_var, training);
}

void BatchNormLayer::collect(const std::string& prefix, std::vector<NamedTensor>& out) {
    out.push_back({prefix + ".gamma", gamma, true});
    out.push_back({prefix + ".beta", beta, true});
    out.push_back({prefix + ".running_mean", running_mean, false});
    out.push_back({prefix + ".running_var", running_var, false});
    out.push_back({prefix + ".batches_seen", batches_seen, false});
}

InstanceNormLayer::InstanceNormLayer(int channels)
    : gamma(Tensor::full({channels}, 1.0)), beta(Tensor::zeros({channels})) {
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
}

void InstanceNormLayer::collect(const std::string& prefix,
                                std::vector<NamedTensor>& out) {
    out.push_back({prefix + ".gamma", gamma, true});
    out.push_back({prefix + ".beta", beta, true});
}

LinearLayer::LinearLayer(int in_dim, int out_dim, std::mt19937_64& rng)
    : weight(init_linear_weight(out_dim, in_dim, rng)), bias(Tensor::zeros({out_dim})) {
    bias.set_requires_grad(true);
}

void LinearLayer::collect(const std::string& prefix, std::vector<NamedTensor>& out) {
    out.push_back({prefix + ".weight", weight, true});
    out.push_back({prefix + ".bias", bias, true});
}

Lite3x3Layer::Lite3x3Layer(int in_ch, int out_ch, std::mt19937_64& rng)
    : pointwise(init_conv_weight(out_ch, in_ch, 1, rng)),
      depthwise(init_depthwise_weight(out_ch, 3, rng)),
      bn(out_ch) {}

Tensor Lite3x3Layer::forward(const Tensor& x, bool training) {
    Tensor y = pointwise_conv2d(x, pointwise);
    y = depthwise_conv2d(y, depthwise, 1, 1);
    return relu(bn.forward(y, training));
}

void Lite3x3Layer::collect(const std::string& prefix, std::vector<NamedTensor>& out) {
    out.push_back({prefix + ".pointwise", pointwise, true});
    out.push_back({prefix + ".depthwise", depthwise, true});
    bn.collect(prefix + ".bn", out);
}

long long lite3x3_conv_params(int in_ch, int out_ch) {
    return static_cast<long long>(9 + in_ch) * out_ch;
}

long long lite3x3_mult_adds(int in_ch, int out_ch, int h, int w) {
    return static_cast<long long>(h) * w * (9 + in_ch) * out_ch;
}

AggregationGate::AggregationGate(int channels, int reduction, std::mt19937_64& rng)
    : fc1(channels, std::max(1, channels / reduction), rng),
      fc2(std::max(1, channels / reduction), channels, rng),
      channels(channels),
      hidden(std::max(1, channels / reduction)) {}

Tensor AggregationGate::forward(const Tensor& stream) const {
    const int n = stream.dim(0);
    Tensor v = reshape(global_avg_pool(stream), {n, channels});
    Tensor h = relu(fc1.forward(v));
    Tensor g = sigmoid(fc2.forward(h));
    return reshape(g, {n, channels, 1, 1});
}

void AggregationGate::collect(const std::string& prefix, std::vector<NamedTensor>& out) {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
}

}  // namespace osnet
