#include "osnet/nas.hpp"

#include <cmath>

namespace osnet {

namespace {

Tensor relax(const Tensor& logits, double temperature,
             const std::vector<double>& noise) {
    if (temperature <= 0.0) throw ConfigError("gumbel temperature must be positive");
    if (logits.numel() != noise.size()) {
        throw ContractError("noise length does not match logits");
    }
    Tensor z(Shape{static_cast<int>(noise.size())});
    for (std::size_t i = 0; i < noise.size(); ++i) z[i] = noise[i];
    return softmax(scale(add(logits, z), 1.0 / temperature));
}

}  // namespace

GumbelSample sample_gumbel_softmax(const Tensor& logits, double temperature,
                                   std::mt19937_64& rng) {
    GumbelSample s;
    s.uniforms.resize(logits.numel());
    s.noise.resize(logits.numel());
    for (std::size_t i = 0; i < logits.numel(); ++i) {
        const double u = uniform_open01(rng);
        s.uniforms[i] = u;
        s.noise[i] = -std::log(-std::log(u));
    }
    s.alpha = relax(logits, temperature, s.noise);
    return s;
}

GumbelSample gumbel_softmax_at(const Tensor& logits, double temperature,
                               const std::vector<double>& noise) {
    GumbelSample s;
    s.noise = noise;
    s.alpha = relax(logits, temperature, noise);
    return s;
}

double temperature_schedule(int epoch) {
    if (epoch < 0) throw ContractError("epoch must be non-negative");
    return std::max(1.0, 10.0 - 0.5 * (epoch / 20));
}

Supernet::Supernet(const ModelSpec& spec, std::uint64_t seed) : spec_(spec) {
    if (spec.num_classes < 2) {
        throw ConfigError("supernet training needs a classifier (num_classes >= 2)");
    }
    const ChannelPlan plan = channel_plan(spec);
    std::mt19937_64 rng(seed);

    conv1_ = ConvLayer(3, plan.conv1, 7, 2, 3, rng);
    conv1_bn_ = BatchNormLayer(plan.conv1);
    const std::array<std::array<int, 3>, kOsBlockCount> dims = {{
        {plan.conv1, plan.mid2, plan.stage2},
        {plan.stage2, plan.mid2, plan.stage2},
        {plan.stage2, plan.mid3, plan.stage3},
        {plan.stage3, plan.mid3, plan.stage3},
        {plan.stage3, plan.mid4, plan.stage4},
        {plan.stage4, plan.mid4, plan.stage4},
    }};
    for (int i = 0; i < kOsBlockCount; ++i) {
        OsBlockConfig cfg;
        cfg.in_channels = dims[i][0];
        cfg.mid_channels = dims[i][1];
        cfg.out_channels = dims[i][2];
        cfg.stream_count = spec.stream_count;
        cfg.gate_reduction = spec.gate_reduction;
        cfg.all_candidates = true;
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
    classifier_ = LinearLayer(kFeatureDim, spec.num_classes, rng);

    arch_.resize(kOsBlockCount);
    for (auto& a : arch_) {
        // Zero logits: uniform prior over the candidates.
        a.logits = Tensor::zeros({kCandidateCount});
        a.logits.set_requires_grad(true);
    }
}

Tensor Supernet::features(const Tensor& images, const std::vector<GumbelSample>& samples,
                          bool training) {
    if (samples.size() != static_cast<std::size_t>(kOsBlockCount)) {
        throw ContractError("supernet forward needs one sample per OS layer, got " +
                            std::to_string(samples.size()));
    }
    Tensor x = relu(conv1_bn_.forward(conv1_.forward(images), training));
    x = max_pool2d(x, 3, 2, 1);
    x = blocks_[0].forward_weighted(x, samples[0].alpha, training);
    x = blocks_[1].forward_weighted(x, samples[1].alpha, training);
    x = relu(tr1_bn_.forward(tr1_.forward(x), training));
    x = avg_pool2d(x, 2, 2);
    x = blocks_[2].forward_weighted(x, samples[2].alpha, training);
    x = blocks_[3].forward_weighted(x, samples[3].alpha, training);
    x = relu(tr2_bn_.forward(tr2_.forward(x), training));
    x = avg_pool2d(x, 2, 2);
    x = blocks_[4].forward_weighted(x, samples[4].alpha, training);
    x = blocks_[5].forward_weighted(x, samples[5].alpha, training);
    x = relu(conv5_bn_.forward(conv5_.forward(x), training));
    const int n = x.dim(0);
    Tensor v = reshape(global_avg_pool(x), {n, x.dim(1)});
    v = fc_.forward(v);
    v = reshape(fc_bn_.forward(reshape(v, {n, kFeatureDim, 1, 1}), training),
                {n, kFeatureDim});
    return relu(v);
}

Tensor Supernet::logits(const Tensor& images, const std::vector<GumbelSample>& samples,
                        bool training) {
    return classifier_.forward(features(images, samples, training));
}

std::vector<NamedTensor> Supernet::named_tensors() {
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
    classifier_.collect("classifier", out);
    for (int i = 0; i < kOsBlockCount; ++i) {
        out.push_back({"arch" + std::to_string(i) + ".logits", arch_[i].logits, true});
    }
    return out;
}

std::vector<Tensor> Supernet::parameters() {
    std::vector<Tensor> out;
    for (auto& nt : named_tensors()) {
        if (nt.trainable) out.push_back(nt.tensor);
    }
    return out;
}

std::vector<Tensor> Supernet::arch_parameters() {
    std::vector<Tensor> out;
    for (auto& a : arch_) out.push_back(a.logits);
    return out;
}

std::array<double, kCandidateCount> Supernet::candidate_probabilities(int layer) const {
    const Tensor& logits = arch_.at(layer).logits;
    std::array<double, kCandidateCount> p{};
    double mx = logits[0];
    for (int k = 1; k < kCandidateCount; ++k) mx = std::max(mx, logits[k]);
    double s = 0.0;
    for (int k = 0; k < kCandidateCount; ++k) {
        p[k] = std::exp(logits[k] - mx);
        s += p[k];
    }
    for (double& v : p) v /= s;
    return p;
}

ModelSpec Supernet::derive() const { return derive_architecture(arch_, spec_); }

ModelSpec derive_architecture(const std::vector<ArchParams>& arch,
                              const ModelSpec& base) {
    if (arch.size() != static_cast<std::size_t>(kOsBlockCount)) {
        throw ContractError("architecture derivation needs logits for every block");
    }
    ModelSpec derived = base;
    for (int i = 0; i < kOsBlockCount; ++i) {
        const Tensor& logits = arch[i].logits;
        int best = 0;
        for (int k = 1; k < kCandidateCount; ++k) {
            if (logits[k] > logits[best]) best = k;
        }
        derived.variants[i] = static_cast<CandidateKind>(best);
    }
    return derived;
}

double estimate_gradients(Supernet& net, const Tensor& images,
                          const std::vector<int>& labels, double label_smoothing,
                          double temperature, int sample_count, std::mt19937_64& rng) {
    if (sample_count < 1) throw ConfigError("sample count must be >= 1");
    double mean_loss = 0.0;
    for (int s = 0; s < sample_count; ++s) {
        Tape tape;
        TapeScope scope(tape);
        std::vector<GumbelSample> samples;
        samples.reserve(kOsBlockCount);
        for (auto& a : net.arch()) {
            samples.push_back(sample_gumbel_softmax(a.logits, temperature, rng));
        }
        Tensor loss = label_smoothed_cross_entropy(
            net.logits(images, samples, /*training=*/true), labels, label_smoothing);
        tape.backward(loss);
        mean_loss += loss[0];
    }
    if (sample_count > 1) {
        const double inv = 1.0 / sample_count;
        for (Tensor& p : net.parameters()) {
            double* g = p.grad_data();
            for (std::size_t i = 0; i < p.numel(); ++i) g[i] *= inv;
        }
    }
    return mean_loss / sample_count;
}

}  // namespace osnet
