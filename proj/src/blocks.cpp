#include "osnet/blocks.hpp"

#include <cmath>

#include "osnet/finite_difference.hpp"

namespace osnet {

const char* candidate_name(CandidateKind kind) {
    switch (kind) {
        case CandidateKind::OS: return "OS";
        case CandidateKind::IN_in: return "IN_in";
        case CandidateKind::IN_out: return "IN_out";
        case CandidateKind::IN_in_out: return "IN_in_out";
    }
    throw ContractError("unknown candidate kind");
}

CandidateKind candidate_from_name(const std::string& name) {
    if (name == "OS") return CandidateKind::OS;
    if (name == "IN_in") return CandidateKind::IN_in;
    if (name == "IN_out") return CandidateKind::IN_out;
    if (name == "IN_in_out") return CandidateKind::IN_in_out;
    throw ConfigError("unknown candidate kind: " + name);
}

OsBlock::OsBlock(const OsBlockConfig& cfg, std::mt19937_64& rng) : config(cfg) {
    if (cfg.in_channels < 1 || cfg.mid_channels < 1 || cfg.out_channels < 1) {
        throw ConfigError("os block channel widths must be positive");
    }
    if (cfg.stream_count < 1) {
        throw ConfigError("os block needs at least one stream");
    }
    reduce = ConvLayer(cfg.in_channels, cfg.mid_channels, 1, 1, 0, rng);
    reduce_bn = BatchNormLayer(cfg.mid_channels);
    streams.resize(cfg.stream_count);
    for (int t = 0; t < cfg.stream_count; ++t) {
        for (int depth = 0; depth <= t; ++depth) {
            streams[t].emplace_back(cfg.mid_channels, cfg.mid_channels, rng);
        }
    }
    gate = AggregationGate(cfg.mid_channels, cfg.gate_reduction, rng);
    restore = ConvLayer(cfg.mid_channels, cfg.out_channels, 1, 1, 0, rng);

    const bool all = cfg.all_candidates;
    const bool wants_bn =
        all || cfg.kind == CandidateKind::OS || cfg.kind == CandidateKind::IN_out;
    const bool wants_in_restore =
        all || cfg.kind == CandidateKind::IN_in || cfg.kind == CandidateKind::IN_in_out;
    const bool wants_in_out =
        all || cfg.kind == CandidateKind::IN_out || cfg.kind == CandidateKind::IN_in_out;
    if (wants_bn) restore_bn.emplace(cfg.out_channels);
    if (wants_in_restore) restore_in.emplace(cfg.out_channels);
    if (wants_in_out) out_in.emplace(cfg.out_channels);
    if (all) {
        restore_in2.emplace(cfg.out_channels);
        out_in2.emplace(cfg.out_channels);
    }

    if (cfg.in_channels != cfg.out_channels) {
        has_skip_projection = true;
        skip = ConvLayer(cfg.in_channels, cfg.out_channels, 1, 1, 0, rng);
        skip_bn = BatchNormLayer(cfg.out_channels);
    }
}

OsBlock::TrunkOut OsBlock::trunk(const Tensor& x, bool training, OsBlockCapture* capture,
                                 bool bypass_gate) {
    if (x.dim(1) != config.in_channels) {
        throw DimensionError("os block expected " + std::to_string(config.in_channels) +
                             " input channels, got " + std::to_string(x.dim(1)));
    }
    Tensor r = relu(reduce_bn.forward(reduce.forward(x), training));

    std::vector<Tensor> gated;
    gated.reserve(streams.size());
    for (auto& stream : streams) {
        Tensor s = r;
        for (auto& layer : stream) s = layer.forward(s, training);
        if (capture) capture->stream_outputs.push_back(s);
        if (bypass_gate) {
            gated.push_back(s);
        } else {
            Tensor g = gate.forward(s);
            if (capture) capture->gate_vectors.push_back(g);
            gated.push_back(mul(s, g));
        }
    }
    Tensor acc = gated.front();
    for (std::size_t t = 1; t < gated.size(); ++t) acc = add(acc, gated[t]);
    if (capture) capture->gated_sum = acc;

    TrunkOut out;
    out.pre_norm = restore.forward(acc);
    out.skip_path =
        has_skip_projection ? skip_bn.forward(skip.forward(x), training) : x;
    return out;
}

Tensor OsBlock::forward(const Tensor& x, bool training, OsBlockCapture* capture,
                        bool bypass_gate) {
    TrunkOut t = trunk(x, training, capture, bypass_gate);
    Tensor branch;
    switch (config.kind) {
        case CandidateKind::OS:
        case CandidateKind::IN_out:
            branch = restore_bn->forward(t.pre_norm, training);
            break;
        case CandidateKind::IN_in:
        case CandidateKind::IN_in_out:
            branch = restore_in->forward(t.pre_norm);
            break;
    }
    Tensor y = relu(add(t.skip_path, branch));
    if (config.kind == CandidateKind::IN_out || config.kind == CandidateKind::IN_in_out) {
        y = out_in->forward(y);
    }
    return y;
}

Tensor OsBlock::forward_weighted(const Tensor& x, const Tensor& alpha, bool training) {
    if (!config.all_candidates) {
        throw ContractError("forward_weighted requires an all-candidate block");
    }
    if (alpha.numel() != kCandidateCount) {
        throw ContractError("forward_weighted needs one weight per candidate");
    }
    TrunkOut t = trunk(x, training, nullptr, false);
    // BN head evaluated once so the two BN-backed candidates share one
    // running-stats update.
    Tensor bn_branch = restore_bn->forward(t.pre_norm, training);
    Tensor out_os = relu(add(t.skip_path, bn_branch));
    Tensor out_in_in = relu(add(t.skip_path, restore_in->forward(t.pre_norm)));
    Tensor out_in_out = out_in->forward(out_os);
    Tensor out_in_in_out =
        out_in2->forward(relu(add(t.skip_path, restore_in2->forward(t.pre_norm))));
    return weighted_sum({out_os, out_in_in, out_in_out, out_in_in_out}, alpha);
}

void OsBlock::collect(const std::string& prefix, std::vector<NamedTensor>& out) {
    reduce.collect(prefix + ".reduce", out);
    reduce_bn.collect(prefix + ".reduce_bn", out);
    for (std::size_t t = 0; t < streams.size(); ++t) {
        for (std::size_t d = 0; d < streams[t].size(); ++d) {
            streams[t][d].collect(
                prefix + ".stream" + std::to_string(t + 1) + ".lite" + std::to_string(d),
                out);
        }
    }
    gate.collect(prefix + ".gate", out);
    restore.collect(prefix + ".restore", out);
    if (restore_bn) restore_bn->collect(prefix + ".restore_bn", out);
    if (restore_in) restore_in->collect(prefix + ".restore_in", out);
    if (out_in) out_in->collect(prefix + ".out_in", out);
    if (restore_in2) restore_in2->collect(prefix + ".restore_in2", out);
    if (out_in2) out_in2->collect(prefix + ".out_in2", out);
    if (has_skip_projection) {
        skip.collect(prefix + ".skip", out);
        skip_bn.collect(prefix + ".skip_bn", out);
    }
}

Tensor baseline_block_forward(OsBlock& block, const Tensor& x, bool training) {
    Tensor r = relu(block.reduce_bn.forward(block.reduce.forward(x), training));
    Tensor s = block.streams.front().front().forward(r, training);
    Tensor z = block.restore.forward(s);
    Tensor branch = block.restore_bn
                        ? block.restore_bn->forward(z, training)
                        : block.restore_in->forward(z);
    Tensor sk = block.has_skip_projection
                    ? block.skip_bn.forward(block.skip.forward(x), training)
                    : x;
    return relu(add(sk, branch));
}

GateGradientReport shared_gate_gradient_check(OsBlock& block, const Tensor& x,
                                              std::mt19937_64& rng) {
    GateGradientReport report;
    const int T = block.config.stream_count;

    std::vector<NamedTensor> gate_params;
    block.gate.collect("gate", gate_params);
    for (auto& p : gate_params) p.tensor.zero_grad();

    OsBlockCapture capture;
    Tensor probe;
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor y = block.forward(x, /*training=*/true, &capture);
        probe = Tensor(y.shape());
        for (std::size_t i = 0; i < probe.numel(); ++i) probe[i] = uniform01(rng) - 0.5;
        tape.backward(sum(mul(y, probe)));
    }

    // Per-stream contribution into the gate output: spatial sum of
    // dL/d(x-tilde) ⊙ x^t.
    const Tensor& xt_grad_holder = capture.gated_sum;
    const double* dsum = xt_grad_holder.grad_data();
    const int N = x.dim(0), C = block.config.mid_channels;
    const int HW = capture.stream_outputs.front().dim(2) *
                   capture.stream_outputs.front().dim(3);
    std::vector<Tensor> contributions;
    for (int t = 0; t < T; ++t) {
        Tensor c({N, C, 1, 1});
        const double* xt = capture.stream_outputs[t].data();
        for (int n = 0; n < N; ++n)
            for (int ch = 0; ch < C; ++ch) {
                const std::size_t base = (static_cast<std::size_t>(n) * C + ch) * HW;
                double s = 0.0;
                for (int i = 0; i < HW; ++i) s += dsum[base + i] * xt[base + i];
                c[n * C + ch] = s;
            }
        contributions.push_back(c);
        double norm = 0.0;
        for (std::size_t i = 0; i < c.numel(); ++i) norm += c[i] * c[i];
        report.per_stream_contribution_norms.push_back(std::sqrt(norm));

        const double* observed = capture.gate_vectors[t].grad_data();
        for (std::size_t i = 0; i < c.numel(); ++i) {
            report.max_stream_contribution_err =
                std::max(report.max_stream_contribution_err,
                         std::fabs(observed[i] - c[i]));
        }
    }

    // Assemble the gate parameter gradients stream by stream: backprop
    // sum(G(x^t) ⊙ c_t) through the gate alone and accumulate over t.
    std::vector<std::vector<double>> full_grads;
    for (auto& p : gate_params) full_grads.push_back(p.tensor.grad_copy());
    for (auto& p : gate_params) p.tensor.zero_grad();
    for (int t = 0; t < T; ++t) {
        Tape gate_tape;
        TapeScope scope(gate_tape);
        Tensor g = block.gate.forward(capture.stream_outputs[t]);
        gate_tape.backward(sum(mul(g, contributions[t])));
    }
    for (std::size_t i = 0; i < gate_params.size(); ++i) {
        const double* assembled = gate_params[i].tensor.grad_data();
        for (std::size_t j = 0; j < gate_params[i].tensor.numel(); ++j) {
            report.max_param_assembly_err = std::max(
                report.max_param_assembly_err, std::fabs(assembled[j] - full_grads[i][j]));
        }
    }

    // Independent cross-check of the full-block gate gradients.
    auto forward_value = [&]() {
        Tensor y = block.forward(x, /*training=*/true);
        double s = 0.0;
        const double* a = y.data();
        const double* b = probe.data();
        for (std::size_t i = 0; i < y.numel(); ++i) s += a[i] * b[i];
        return s;
    };
    for (std::size_t i = 0; i < gate_params.size(); ++i) {
        // Step 1e-5 keeps the probe inside one linear piece of the ReLUs.
        std::vector<double> numeric =
            finite_difference_grad(forward_value, gate_params[i].tensor, 1e-5);
        report.max_param_fd_rel_err = std::max(
            report.max_param_fd_rel_err, max_relative_error(full_grads[i], numeric));
    }
    return report;
}

}  // namespace osnet
