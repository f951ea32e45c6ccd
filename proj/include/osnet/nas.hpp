#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <vector>

#include "osnet/model.hpp"

namespace osnet {

// Per-layer architecture state: unconstrained logits over the four block
// candidates. softmax(logits) is the candidate distribution.
struct ArchParams {
    Tensor logits;  // [kCandidateCount]
};

struct GumbelSample {
    std::vector<double> uniforms;  // u, redrawn away from 0 (log singularity)
    std::vector<double> noise;     // z = -log(-log u)
    Tensor alpha;                  // softmax((logits + z) / temperature)
};

// Draws Gumbel(0,1) noise by inverse transform and relaxes the categorical
// pick to alpha = softmax((logits + z)/temperature). alpha is recorded on the
// active tape, so gradients flow back to the logits.
GumbelSample sample_gumbel_softmax(const Tensor& logits, double temperature,
                                   std::mt19937_64& rng);

// Same relaxation at caller-fixed noise (grad checks and quadrature).
GumbelSample gumbel_softmax_at(const Tensor& logits, double temperature,
                               const std::vector<double>& noise);

// lambda(e) = max(1, 10 - 0.5 * floor(e / 20))
double temperature_schedule(int epoch);

// Over-parameterised network holding all four candidates per OS layer. The
// candidates of a layer share the residual-branch weights and differ only in
// their IN parameters.
class Supernet {
  public:
    Supernet() = default;
    Supernet(const ModelSpec& spec, std::uint64_t seed);

    const ModelSpec& spec() const { return spec_; }
    std::vector<ArchParams>& arch() { return arch_; }
    const std::vector<ArchParams>& arch() const { return arch_; }

    // One GumbelSample per OS layer, in block order.
    Tensor features(const Tensor& images, const std::vector<GumbelSample>& samples,
                    bool training);
    Tensor logits(const Tensor& images, const std::vector<GumbelSample>& samples,
                  bool training);

    std::vector<NamedTensor> named_tensors();  // model weights + arch logits
    std::vector<Tensor> parameters();          // trainable, theta then pi
    std::vector<Tensor> arch_parameters();

    std::array<double, kCandidateCount> candidate_probabilities(int layer) const;
    ModelSpec derive() const;

    OsBlock& block(int i) { return blocks_.at(i); }

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
    std::vector<ArchParams> arch_;
};

// argmax of the logits per layer; ties resolve to the first candidate in
// fixed order (OS < IN_in < IN_out < IN_in_out).
ModelSpec derive_architecture(const std::vector<ArchParams>& arch,
                              const ModelSpec& base);

// Averages `sample_count` independent sampled backward passes into the
// parameter gradients (caller zeroes them first). Returns the mean loss.
double estimate_gradients(Supernet& net, const Tensor& images,
                          const std::vector<int>& labels, double label_smoothing,
                          double temperature, int sample_count, std::mt19937_64& rng);

}  // namespace osnet
