#pragma once

#include <vector>

#include "osnet/tensor.hpp"

namespace osnet {

// Elementwise with limited broadcasting: operands of identical shape, a
// scalar (numel == 1) operand, or an [N,C,1,1] channel vector against an
// [N,C,H,W] map. Anything else is a DimensionError.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// input [N,C,H,W], kernel [C',C,k,k]; bias-free (every conv here feeds a
// normalisation layer). Output spatial extent floor((H + 2p - k)/stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding);
// kernel [C,1,k,k], one filter per input channel (channel multiplier 1).
Tensor depthwise_conv2d(const Tensor& input, const Tensor& kernel, int stride = 1,
                        int padding = 1);
// kernel [C',C,1,1]
Tensor pointwise_conv2d(const Tensor& input, const Tensor& kernel);

Tensor max_pool2d(const Tensor& x, int kernel, int stride, int padding = 0);
Tensor avg_pool2d(const Tensor& x, int kernel, int stride, int padding = 0);
Tensor global_avg_pool(const Tensor& x);  // -> [N,C,1,1]

// x [N,d], weight [d',d], bias [d'] -> [N,d']
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Per-channel normalisation over (N,H,W). Training mode normalises with
// batch statistics and folds them into the running buffers by EMA; eval mode
// normalises with the running buffers.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, bool training,
                  double eps = 1e-5, double momentum = 0.1);

// Per-(sample, channel) normalisation over H*W; identical in train and eval.
Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                     double eps = 1e-5);

Tensor softmax(const Tensor& x);  // over the last dimension
Tensor sum(const Tensor& x);      // -> [1]
Tensor reshape(const Tensor& x, Shape shape);

// sum_i alpha[i] * xs[i]; gradients flow to both the operands and the weights.
Tensor weighted_sum(const std::vector<Tensor>& xs, const Tensor& alpha);

// Mean over the batch of -sum_k q_k log softmax(logits)_k with
// q = (1 - epsilon) * onehot(label) + epsilon / K.
Tensor label_smoothed_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                                    double epsilon);

}  // namespace osnet
