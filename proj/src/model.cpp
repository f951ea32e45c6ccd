#include "osnet/model.hpp"

#include <cmath>
#include <cstdio>

namespace osnet {

namespace {

int scale_width(int base, double beta) {
    return std::max(1, static_cast<int>(std::lround(base * beta)));
}

int round_even(double v) {
    return 2 * static_cast<int>(std::lround(v / 2.0));
}

void validate(const ModelSpec& spec) {
    if (spec.width_multiplier <= 0.0 || spec.resolution_multiplier <= 0.0) {
        throw ConfigError("model multipliers must be positive");
    }
    if (spec.stream_count < 1) throw ConfigError("stream count must be >= 1");
    if (spec.base_height < 16 || spec.base_width < 8) {
        throw ConfigError("base input extent too small");
    }
}

struct BlockDims {
    int in, mid, out;
    CandidateKind kind;
};

std::array<BlockDims, kOsBlockCount> block_dims(const ModelSpec& spec,
                                                const ChannelPlan& plan) {
    return {{{plan.conv1, plan.mid2, plan.stage2, spec.variants[0]},
             {plan.stage2, plan.mid2, plan.stage2, spec.variants[1]},
             {plan.stage2, plan.mid3, plan.stage3, spec.variants[2]},
             {plan.stage3, plan.mid3, plan.stage3, spec.variants[3]},
             {plan.stage3, plan.mid4, plan.stage4, spec.variants[4]},
             {plan.stage4, plan.mid4, plan.stage4, spec.variants[5]}}};
}

long long block_params(const BlockDims& d, int T, int reduction) {
    const int hidden = std::max(1, d.mid / reduction);
    long long p = 0;
    p += static_cast<long long>(d.in) * d.mid + 2LL * d.mid;  // reduce + bn
    for (int t = 1; t <= T; ++t) {
        p += static_cast<long long>(t) *
             (lite3x3_conv_params(d.mid, d.mid) + 2LL * d.mid);
    }
    p += static_cast<long long>(d.mid) * hidden + hidden +
         static_cast<long long>(hidden) * d.mid + d.mid;     // gate MLP
    p += static_cast<long long>(d.mid) * d.out;              // restore conv
    switch (d.kind) {                                        // norm heads
        case CandidateKind::OS:
        case CandidateKind::IN_in:
            p += 2LL * d.out;
            break;
        case CandidateKind::IN_out:
        case CandidateKind::IN_in_out:
            p += 4LL * d.out;
            break;
    }
    if (d.in != d.out) {
        p += static_cast<long long>(d.in) * d.out + 2LL * d.out;  // skip + bn
    }
    return p;
}

long long block_mult_adds(const BlockDims& d, int T, int reduction, long long hw) {
    const int hidden = std::max(1, d.mid / reduction);
    long long m = 0;
    m += hw * d.in * d.mid;
    for (int t = 1; t <= T; ++t) {
        m += static_cast<long long>(t) * lite3x3_mult_adds(d.mid, d.mid, 1, 1) * hw;
    }
    m += static_cast<long long>(T) * 2 * d.mid * hidden;  // gate MLP per stream
    m += hw * d.mid * d.out;
    if (d.in != d.out) m += hw * d.in * d.out;
    return m;
}

}  // namespace

ChannelPlan channel_plan(const ModelSpec& spec) {
    validate(spec);
    ChannelPlan plan;
    plan.conv1 = scale_width(64, spec.width_multiplier);
    plan.stage2 = scale_width(256, spec.width_multiplier);
    plan.stage3 = scale_width(384, spec.width_multiplier);
    plan.stage4 = scale_width(512, spec.width_multiplier);
    plan.conv5 = scale_width(512, spec.width_multiplier);
    plan.mid2 = std::max(1, plan.stage2 / 4);
    plan.mid3 = std::max(1, plan.stage3 / 4);
    plan.mid4 = std::max(1, plan.stage4 / 4);
    return plan;
}

std::array<int, 8> stage_output_channels(const ModelSpec& spec) {
    const ChannelPlan p = channel_plan(spec);
    return {p.conv1, p.stage2, p.stage2, p.stage3, p.stage3, p.stage4, p.stage4, p.conv5};
}

std::pair<int, int> scaled_input_extent(const ModelSpec& spec, int h, int w) {
    int sh = round_even(h * spec.resolution_multiplier);
    int sw = round_even(w * spec.resolution_multiplier);
    return {std::max(16, sh), std::max(8, sw)};
}

long long count_params(const ModelSpec& spec) {
    validate(spec);
    const ChannelPlan plan = channel_plan(spec);
    long long p = 0;
    p += 49LL * 3 * plan.conv1 + 2LL * plan.conv1;  // conv1 + bn
    for (const BlockDims& d : block_dims(spec, plan)) {
        p += block_params(d, spec.stream_count, spec.gate_reduction);
    }
    p += static_cast<long long>(plan.stage2) * plan.stage2 + 2LL * plan.stage2;
    p += static_cast<long long>(plan.stage3) * plan.stage3 + 2LL * plan.stage3;
    p += static_cast<long long>(plan.stage4) * plan.conv5 + 2LL * plan.conv5;
    p += static_cast<long long>(plan.conv5) * kFeatureDim + kFeatureDim;  // fc
    p += 2LL * kFeatureDim;                                               // fc bn
    return p;
}

long long count_mult_adds(const ModelSpec& spec, int input_h, int input_w) {
    validate(spec);
    const ChannelPlan plan = channel_plan(spec);
    auto [h, w] = scaled_input_extent(spec, input_h, input_w);

    auto conv_out = [](int extent, int k, int stride, int pad) {
        return (extent + 2 * pad - k) / stride + 1;
    };

    long long m = 0;
    // conv1 7x7 stride 2 pad 3
    int h1 = conv_out(h, 7, 2, 3), w1 = conv_out(w, 7, 2, 3);
    m += static_cast<long long>(h1) * w1 * plan.conv1 * 49 * 3;
    // max pool 3x3 stride 2 pad 1
    int h2 = conv_out(h1, 3, 2, 1), w2 = conv_out(w1, 3, 2, 1);

    const auto dims = block_dims(spec, plan);
    const long long hw2 = static_cast<long long>(h2) * w2;
    m += block_mult_adds(dims[0], spec.stream_count, spec.gate_reduction, hw2);
    m += block_mult_adds(dims[1], spec.stream_count, spec.gate_reduction, hw2);
    m += hw2 * plan.stage2 * plan.stage2;  // transition conv, pre-pool extent
    int h3 = conv_out(h2, 2, 2, 0), w3 = conv_out(w2, 2, 2, 0);

    const long long hw3 = static_cast<long long>(h3) * w3;
    m += block_mult_adds(dims[2], spec.stream_count, spec.gate_reduction, hw3);
    m += block_mult_adds(dims[3], spec.stream_count, spec.gate_reduction, hw3);
    m += hw3 * plan.stage3 * plan.stage3;
    int h4 = conv_out(h3, 2, 2, 0), w4 = conv_out(w3, 2, 2, 0);

    const long long hw4 = static_cast<long long>(h4) * w4;
    m += block_mult_adds(dims[4], spec.stream_count, spec.gate_reduction, hw4);
    m += block_mult_adds(dims[5], spec.stream_count, spec.gate_reduction, hw4);
    m += hw4 * plan.stage4 * plan.conv5;  // conv5
    m += static_cast<long long>(plan.conv5) * kFeatureDim;  // fc
    return m;
}

Model::Model(const ModelSpec& spec, std::uint64_t seed) : spec_(spec) {
    validate(spec);
    const ChannelPlan plan = channel_plan(spec);
    std::mt19937_64 rng(seed);

    conv1_ = ConvLayer(3, plan.conv1, 7, 2, 3, rng);
    conv1_bn_ = BatchNormLayer(plan.conv1);
    const auto dims = block_dims(spec, plan);
    for (int i = 0; i < kOsBlockCount; ++i) {
        OsBlockConfig cfg;
        cfg.in_channels = dims[i].in;
        cfg.mid_channels = dims[i].mid;
        cfg.out_channels = dims[i].out;
        cfg.stream_count = spec.stream_count;
        cfg.gate_reduction = spec.gate_reduction;
        cfg.kind = dims[i].kind;
        blocks_[i] = OsBlock(cfg, rng);
    }
    tr1_ = ConvLayer(plan.stage2, plan.stage2, 1, 1, 0, rng);
    tr1_bn_ = BatchNormLayer(plan.stage2);
    tr2_ = ConvLayer(plan.stage3, plan.stage3, 1, 1, 0, rng);
    tr2_bn_ = BatchNormLayer(plan.stage3);
    conv5_ = ConvLayer(plan.stage4, plan.conv5, 1, 1, 0, rng);
    conv5_bn_ = BatchNormLayer(plan.conv5);
    fc_ = LinearLayer(plan.conv5, kFeatureDim, rng);
    fc_bn_ = BatchNormLayer(kFeatureDim);
    if (spec.num_classes > 0) {
        classifier_ = LinearLayer(kFeatureDim, spec.num_classes, rng);
        has_classifier_ = true;
    }
}

Tensor Model::features(const Tensor& images, bool training, Tensor* last_conv) {
    Tensor x = relu(conv1_bn_.forward(conv1_.forward(images), training));
    x = max_pool2d(x, 3, 2, 1);
    x = blocks_[0].forward(x, training);
    x = blocks_[1].forward(x, training);
    x = relu(tr1_bn_.forward(tr1_.forward(x), training));
    x = avg_pool2d(x, 2, 2);
    x = blocks_[2].forward(x, training);
    x = blocks_[3].forward(x, training);
    x = relu(tr2_bn_.forward(tr2_.forward(x), training));
    x = avg_pool2d(x, 2, 2);
    x = blocks_[4].forward(x, training);
    x = blocks_[5].forward(x, training);
    x = relu(conv5_bn_.forward(conv5_.forward(x), training));
    if (last_conv) *last_conv = x;
    const int n = x.dim(0);
    Tensor v = reshape(global_avg_pool(x), {n, x.dim(1)});
    v = fc_.forward(v);
    v = reshape(fc_bn_.forward(reshape(v, {n, kFeatureDim, 1, 1}), training),
                {n, kFeatureDim});
    return relu(v);
}

Tensor Model::logits_from_features(const Tensor& feats) {
    if (!has_classifier_) throw ContractError("model built without a classifier");
    return classifier_.forward(feats);
}

Tensor Model::logits(const Tensor& images, bool training) {
    return logits_from_features(features(images, training));
}

std::vector<NamedTensor> Model::named_tensors() {
    std::vector<NamedTensor> out;
    conv1_.collect("conv1", out);
    conv1_bn_.collect("conv1_bn", out);
    for (int i = 0; i < kOsBlockCount; ++i) {
        blocks_[i].collect("block" + std::to_string(i), out);
    }
    tr1_.collect("transition1", out);
    tr1_bn_.collect("transition1_bn", out);
    tr2_.collect("transition2", out);
    tr2_bn_.collect("transition2_bn", out);
    conv5_.collect("conv5", out);
    conv5_bn_.collect("conv5_bn", out);
    fc_.collect("fc", out);
    fc_bn_.collect("fc_bn", out);
    if (has_classifier_) classifier_.collect("classifier", out);
    return out;
}

std::vector<Tensor> Model::parameters() {
    std::vector<Tensor> out;
    for (auto& nt : named_tensors()) {
        if (nt.trainable) out.push_back(nt.tensor);
    }
    return out;
}

std::vector<Tensor> Model::classifier_parameters() {
    if (!has_classifier_) return {};
    return {classifier_.weight, classifier_.bias};
}

Tensor activation_map(const Tensor& features, std::vector<int>* zero_samples) {
    if (features.ndim() != 4) {
        throw DimensionError("activation_map expects [N,C,H,W]");
    }
    const int N = features.dim(0), C = features.dim(1);
    const int HW = features.dim(2) * features.dim(3);
    Tensor map({N, 1, features.dim(2), features.dim(3)});
    const double* f = features.data();
    double* m = map.data();
    for (int n = 0; n < N; ++n) {
        double* mn = m + static_cast<std::size_t>(n) * HW;
        for (int c = 0; c < C; ++c) {
            const double* fc = f + (static_cast<std::size_t>(n) * C + c) * HW;
            for (int i = 0; i < HW; ++i) mn[i] += std::fabs(fc[i]);
        }
        double norm = 0.0;
        for (int i = 0; i < HW; ++i) norm += mn[i] * mn[i];
        norm = std::sqrt(norm);
        if (norm == 0.0) {
            if (zero_samples) zero_samples->push_back(n);
            std::fprintf(stderr,
                         "[osnet] warning: all-zero feature map for sample %d, "
                         "skipping activation-map normalisation\n",
                         n);
            continue;
        }
        for (int i = 0; i < HW; ++i) mn[i] /= norm;
    }
    return map;
}

}  // namespace osnet
