#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "osnet/layers.hpp"

namespace osnet {

// IN-placement variants of the omni-scale residual block. IN_in swaps the
// restore conv's BN for IN on the residual branch; IN_out appends IN after
// the post-add ReLU; IN_in_out does both. Candidate order is the tie-break
// order for architecture derivation.
enum class CandidateKind { OS = 0, IN_in = 1, IN_out = 2, IN_in_out = 3 };
inline constexpr int kCandidateCount = 4;

const char* candidate_name(CandidateKind kind);
CandidateKind candidate_from_name(const std::string& name);

struct OsBlockConfig {
    int in_channels = 0;
    int mid_channels = 0;  // bottleneck width, conventionally out/4
    int out_channels = 0;
    int stream_count = 4;   // T; stream t stacks t Lite 3x3 layers
    int gate_reduction = 16;
    CandidateKind kind = CandidateKind::OS;
    bool all_candidates = false;  // materialise every IN head (supernet layer)
};

// Intermediates exposed for the shared-gate diagnostics.
struct OsBlockCapture {
    std::vector<Tensor> stream_outputs;  // x^t, mid channels
    std::vector<Tensor> gate_vectors;    // G(x^t), [N,mid,1,1]
    Tensor gated_sum;                    // x-tilde before the restore conv
};

struct OsBlock {
    OsBlockConfig config;
    ConvLayer reduce;
    BatchNormLayer reduce_bn;
    std::vector<std::vector<Lite3x3Layer>> streams;  // streams[t] has t+1 layers
    AggregationGate gate;
    ConvLayer restore;
    std::optional<BatchNormLayer> restore_bn;     // OS / IN_out head
    std::optional<InstanceNormLayer> restore_in;  // IN_in head
    std::optional<InstanceNormLayer> out_in;      // IN_out head
    // IN_in_out owns its own pair in supernet mode; aliases the two above in
    // a fixed-kind block.
    std::optional<InstanceNormLayer> restore_in2;
    std::optional<InstanceNormLayer> out_in2;
    bool has_skip_projection = false;
    ConvLayer skip;
    BatchNormLayer skip_bn;

    OsBlock() = default;
    OsBlock(const OsBlockConfig& config, std::mt19937_64& rng);

    // bypass_gate replaces every gate vector by exact ones (diagnostic knob
    // for the single-stream equivalence check).
    Tensor forward(const Tensor& x, bool training, OsBlockCapture* capture = nullptr,
                   bool bypass_gate = false);

    // Supernet path: alpha holds one weight per candidate; the output is the
    // alpha-weighted sum of all four candidate heads over a shared trunk.
    Tensor forward_weighted(const Tensor& x, const Tensor& alpha, bool training);

    void collect(const std::string& prefix, std::vector<NamedTensor>& out);

  private:
    struct TrunkOut {
        Tensor pre_norm;  // restore conv output, before any normalisation
        Tensor skip_path;
    };
    TrunkOut trunk(const Tensor& x, bool training, OsBlockCapture* capture,
                   bool bypass_gate);
};

// Single-scale residual baseline sharing the block's parameters: the
// reduce/restore 1x1 pair around stream 1's single Lite 3x3 layer, plus the
// skip connection and post-add ReLU.
Tensor baseline_block_forward(OsBlock& block, const Tensor& x, bool training);

// Verifies the shared-gate backprop property on a block: the gradient
// reaching gate output t must equal the spatial sum of dL/d(x-tilde) ⊙ x^t,
// and the gate parameter gradients must equal the sum of the per-stream
// contributions pushed through the gate alone. Also cross-checks the gate
// parameters against finite differences.
struct GateGradientReport {
    double max_stream_contribution_err = 0.0;
    double max_param_assembly_err = 0.0;
    double max_param_fd_rel_err = 0.0;
    std::vector<double> per_stream_contribution_norms;
};

GateGradientReport shared_gate_gradient_check(OsBlock& block, const Tensor& x,
                                              std::mt19937_64& rng);

}  // namespace osnet
