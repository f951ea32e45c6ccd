#pragma once

#include <array>
#include <cstdint>
#include <utility>

#include "osnet/blocks.hpp"

namespace osnet {

inline constexpr int kOsBlockCount = 6;
// fc output width; fixed regardless of the width multiplier.
inline constexpr int kFeatureDim = 512;

// Stage layout: conv1 7x7/2 -> 3x3/2 max pool -> 2 OS blocks -> transition
// (1x1 conv + 2x2/2 avg pool) -> 2 OS blocks -> transition -> 2 OS blocks ->
// conv5 1x1 -> global avg pool -> fc -> optional classifier.
struct ModelSpec {
    double width_multiplier = 1.0;       // beta, scales every width except fc out
    double resolution_multiplier = 1.0;  // gamma, scales the input extent
    std::array<CandidateKind, kOsBlockCount> variants{
        CandidateKind::OS, CandidateKind::OS, CandidateKind::OS,
        CandidateKind::OS, CandidateKind::OS, CandidateKind::OS};
    int num_classes = 0;  // 0 = feature extractor only
    int stream_count = 4;
    int gate_reduction = 16;
    int base_height = 256;
    int base_width = 128;
};

struct ChannelPlan {
    int conv1, stage2, stage3, stage4, conv5;
    int mid2, mid3, mid4;
};

ChannelPlan channel_plan(const ModelSpec& spec);

// Output widths per Table-1 row order: conv1, 2x stage2, 2x stage3,
// 2x stage4, conv5.
std::array<int, 8> stage_output_channels(const ModelSpec& spec);

// gamma-scaled extents, rounded to the nearest even integer, floored at 16x8.
std::pair<int, int> scaled_input_extent(const ModelSpec& spec, int h, int w);

// Learnable parameter count of the feature extractor (classifier excluded,
// normalisation affines included). Pure arithmetic, no tensors allocated.
long long count_params(const ModelSpec& spec);

// Conv, fc and gate-MLP multiply counts for one image of the given base
// extent (gamma applied internally); normalisation, pooling and activations
// are free. Classifier excluded.
long long count_mult_adds(const ModelSpec& spec, int input_h, int input_w);

class Model {
  public:
    Model() = default;
    Model(const ModelSpec& spec, std::uint64_t seed);

    const ModelSpec& spec() const { return spec_; }

    // [N,3,H,W] -> [N,512]; optionally captures the conv5 feature map.
    Tensor features(const Tensor& images, bool training, Tensor* last_conv = nullptr);
    Tensor logits_from_features(const Tensor& feats);
    Tensor logits(const Tensor& images, bool training);

    std::vector<NamedTensor> named_tensors();
    std::vector<Tensor> parameters();             // trainable
    std::vector<Tensor> classifier_parameters();  // trainable subset

    OsBlock& block(int i) { return blocks_.at(i); }
    bool has_classifier() const { return has_classifier_; }

  private:
    ModelSpec spec_;
    ConvLayer conv1_;
    BatchNormLayer conv1_bn_;
    std::array<OsBlock, kOsBlockCount> blocks_;
    ConvLayer tr1_;
    BatchNormLayer tr1_bn_;
    ConvLayer tr2_;
    BatchNormLayer tr2_bn_;
    ConvLayer conv5_;
    BatchNormLayer conv5_bn_;
    LinearLayer fc_;
    BatchNormLayer fc_bn_;
    LinearLayer classifier_;
    bool has_classifier_ = false;
};

// Per-sample map of channel-wise absolute sums with spatial l2 normalisation.
// All-zero feature maps stay zero and their sample indices are reported.
Tensor activation_map(const Tensor& features, std::vector<int>* zero_samples = nullptr);

}  // namespace osnet
