#include "osnet/gradcheck.hpp"

#include <cmath>

#include "osnet/finite_difference.hpp"
#include "osnet/nas.hpp"
#include "osnet/train.hpp"

namespace osnet::gradcheck {

namespace {

constexpr double kOpTol = 1e-4;
constexpr double kNetTol = 1e-3;
constexpr double kOpStep = 1e-4;
constexpr double kNetStep = 1e-5;

Tensor random_uniform(const Shape& shape, std::mt19937_64& rng, double lo, double hi) {
    Tensor t(shape);
    for (std::size_t i = 0; i < t.numel(); ++i) {
        t[i] = lo + (hi - lo) * uniform01(rng);
    }
    return t;
}

double dot_probe(const Tensor& out, const Tensor& probe) {
    double s = 0.0;
    for (std::size_t i = 0; i < out.numel(); ++i) s += out[i] * probe[i];
    return s;
}

// Tape gradient of probe.forward() w.r.t. param vs central differences.
CheckResult run_check(const std::string& name,
                      const std::function<Tensor()>& forward, const Tensor& probe,
                      Tensor param, double step, double tol) {
    param.set_requires_grad(true);
    param.zero_grad();
    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(sum(mul(forward(), probe)));
    }
    std::vector<double> numeric = finite_difference_grad(
        [&]() { return dot_probe(forward(), probe); }, param, step);
    return {name, max_relative_error(param.grad_copy(), numeric), tol};
}

std::vector<std::size_t> probe_indices(const Tensor& t, std::mt19937_64& rng,
                                       std::size_t count) {
    std::vector<std::size_t> idx;
    const std::size_t n = t.numel();
    for (std::size_t k = 0; k < std::min(count, n); ++k) {
        idx.push_back(static_cast<std::size_t>(std::floor(uniform01(rng) * n)));
    }
    return idx;
}

}  // namespace

SuiteReport check_ops(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    SuiteReport report;

    {
        Tensor x = random_uniform({1, 2, 5, 5}, rng, -1, 1);
        Tensor w = random_uniform({3, 2, 3, 3}, rng, -1, 1);
        Tensor probe = random_uniform({1, 3, 3, 3}, rng, -1, 1);
        auto fwd = [&]() { return conv2d(x, w, 1, 0); };
        report.checks.push_back(run_check("conv2d/kernel", fwd, probe, w, kOpStep, kOpTol));
        report.checks.push_back(run_check("conv2d/input", fwd, probe, x, kOpStep, kOpTol));
    }
    {
        Tensor x = random_uniform({2, 3, 4, 4}, rng, -1, 1);
        Tensor w = random_uniform({3, 1, 3, 3}, rng, -1, 1);
        Tensor probe = random_uniform({2, 3, 4, 4}, rng, -1, 1);
        auto fwd = [&]() { return depthwise_conv2d(x, w, 1, 1); };
        report.checks.push_back(
            run_check("depthwise/kernel", fwd, probe, w, kOpStep, kOpTol));
        report.checks.push_back(
            run_check("depthwise/input", fwd, probe, x, kOpStep, kOpTol));
    }
    {
        Tensor x = random_uniform({2, 3, 3, 3}, rng, -1, 1);
        Tensor w = random_uniform({4, 3, 1, 1}, rng, -1, 1);
        Tensor probe = random_uniform({2, 4, 3, 3}, rng, -1, 1);
        auto fwd = [&]() { return pointwise_conv2d(x, w); };
        report.checks.push_back(
            run_check("pointwise/kernel", fwd, probe, w, kOpStep, kOpTol));
    }
    {
        Tensor x = random_uniform({3, 4}, rng, -1, 1);
        Tensor w = random_uniform({5, 4}, rng, -1, 1);
        Tensor b = random_uniform({5}, rng, -1, 1);
        Tensor probe = random_uniform({3, 5}, rng, -1, 1);
        auto fwd = [&]() { return linear(x, w, b); };
        report.checks.push_back(run_check("linear/weight", fwd, probe, w, kOpStep, kOpTol));
        report.checks.push_back(run_check("linear/bias", fwd, probe, b, kOpStep, kOpTol));
        report.checks.push_back(run_check("linear/input", fwd, probe, x, kOpStep, kOpTol));
    }
    {
        Tensor x = random_uniform({3, 2, 4, 4}, rng, -1, 1);
        Tensor gamma = random_uniform({2}, rng, 0.5, 1.5);
        Tensor beta = random_uniform({2}, rng, -0.5, 0.5);
        Tensor probe = random_uniform({3, 2, 4, 4}, rng, -1, 1);
        auto fwd = [&]() {
            Tensor rm = Tensor::zeros({2});
            Tensor rv = Tensor::full({2}, 1.0);
            return batch_norm(x, gamma, beta, rm, rv, true);
        };
        report.checks.push_back(
            run_check("batch_norm/input", fwd, probe, x, kOpStep, kOpTol));
        report.checks.push_back(
            run_check("batch_norm/gamma", fwd, probe, gamma, kOpStep, kOpTol));
        auto fwd_in = [&]() { return instance_norm(x, gamma, beta); };
        report.checks.push_back(
            run_check("instance_norm/input", fwd_in, probe, x, kOpStep, kOpTol));
        report.checks.push_back(
            run_check("instance_norm/gamma", fwd_in, probe, gamma, kOpStep, kOpTol));
    }
    {
        // Distinct values keep the max-pool argmax stable under the step.
        Tensor x({1, 2, 4, 4});
        for (std::size_t i = 0; i < x.numel(); ++i) {
            x[i] = 0.31 * static_cast<double>((i * 7) % 29) + 0.001 * i;
        }
        Tensor probe = random_uniform({1, 2, 2, 2}, rng, -1, 1);
        auto fwd_max = [&]() { return max_pool2d(x, 2, 2); };
        auto fwd_avg = [&]() { return avg_pool2d(x, 2, 2); };
        report.checks.push_back(
            run_check("max_pool/input", fwd_max, probe, x, kOpStep, kOpTol));
        report.checks.push_back(
            run_check("avg_pool/input", fwd_avg, probe, x, kOpStep, kOpTol));
        Tensor probe_gap = random_uniform({1, 2, 1, 1}, rng, -1, 1);
        auto fwd_gap = [&]() { return global_avg_pool(x); };
        report.checks.push_back(
            run_check("global_avg_pool/input", fwd_gap, probe_gap, x, kOpStep, kOpTol));
    }
    {
        Tensor a = random_uniform({2, 3, 3, 3}, rng, 0.1, 1.0);
        Tensor g = random_uniform({2, 3, 1, 1}, rng, -1, 1);
        Tensor probe = random_uniform({2, 3, 3, 3}, rng, -1, 1);
        auto fwd_mul = [&]() { return mul(a, g); };
        report.checks.push_back(
            run_check("mul/broadcast_gate", fwd_mul, probe, g, kOpStep, kOpTol));
        auto fwd_sig = [&]() { return sigmoid(a); };
        report.checks.push_back(
            run_check("sigmoid/input", fwd_sig, probe, a, kOpStep, kOpTol));
        auto fwd_relu = [&]() { return relu(a); };  // inputs bounded away from 0
        report.checks.push_back(
            run_check("relu/input", fwd_relu, probe, a, kOpStep, kOpTol));
        auto fwd_soft = [&]() { return softmax(reshape(a, {6, 9})); };
        Tensor probe_soft = random_uniform({6, 9}, rng, -1, 1);
        report.checks.push_back(
            run_check("softmax/input", fwd_soft, probe_soft, a, kOpStep, kOpTol));
    }
    {
        Tensor logits = random_uniform({4, 6}, rng, -1.5, 1.5);
        std::vector<int> labels{1, 3, 0, 5};
        logits.set_requires_grad(true);
        logits.zero_grad();
        Tape tape;
        {
            TapeScope scope(tape);
            tape.backward(label_smoothed_cross_entropy(logits, labels, 0.1));
        }
        std::vector<double> numeric = finite_difference_grad(
            [&]() { return label_smoothed_cross_entropy(logits, labels, 0.1)[0]; },
            logits, kOpStep);
        report.checks.push_back({"cross_entropy/logits",
                                 max_relative_error(logits.grad_copy(), numeric),
                                 kOpTol});
    }
    return report;
}

SuiteReport check_block(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    SuiteReport report;
    OsBlockConfig cfg;
    cfg.in_channels = 4;
    cfg.mid_channels = 2;
    cfg.out_channels = 4;
    cfg.stream_count = 4;
    cfg.gate_reduction = 4;
    OsBlock block(cfg, rng);
    Tensor x = random_uniform({2, 4, 4, 4}, rng, -1, 1);
    Tensor probe = random_uniform({2, 4, 4, 4}, rng, -1, 1);
    auto fwd = [&]() { return block.forward(x, true); };
    std::vector<NamedTensor> tensors;
    block.collect("block", tensors);
    for (auto& nt : tensors) {
        if (!nt.trainable) continue;
        report.checks.push_back(
            run_check(nt.name, fwd, probe, nt.tensor, kNetStep, kNetTol));
    }
    GateGradientReport gate = shared_gate_gradient_check(block, x, rng);
    report.checks.push_back(
        {"gate/stream_contribution", gate.max_stream_contribution_err, 1e-9});
    report.checks.push_back({"gate/param_assembly", gate.max_param_assembly_err, 1e-9});
    report.checks.push_back({"gate/param_fd", gate.max_param_fd_rel_err, kNetTol});
    return report;
}

SuiteReport check_model(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    SuiteReport report;
    ModelSpec spec;
    spec.width_multiplier = 1.0 / 16.0;
    spec.num_classes = 3;
    spec.variants = {CandidateKind::OS,     CandidateKind::IN_in,
                     CandidateKind::OS,     CandidateKind::IN_out,
                     CandidateKind::IN_in_out, CandidateKind::OS};
    Model model(spec, seed);
    // Batch of four: with two samples the fc batch norm normalises each
    // channel to exactly +-1, which finite differences cannot probe.
    Tensor x = random_uniform({4, 3, 32, 16}, rng, 0.0, 1.0);
    std::vector<int> labels{0, 2, 1, 2};

    auto loss_value = [&]() {
        return label_smoothed_cross_entropy(model.logits(x, true), labels, 0.1)[0];
    };
    std::vector<NamedTensor> tensors = model.named_tensors();
    for (auto& nt : tensors) {
        if (!nt.trainable) continue;
        nt.tensor.zero_grad();
    }
    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(
            label_smoothed_cross_entropy(model.logits(x, true), labels, 0.1));
    }
    for (auto& nt : tensors) {
        if (!nt.trainable) continue;
        // Subsampled probes keep the full-network check tractable.
        std::vector<std::size_t> idx = probe_indices(nt.tensor, rng, 4);
        std::vector<double> numeric =
            finite_difference_grad_at(loss_value, nt.tensor, idx, kNetStep);
        std::vector<double> analytic;
        const double* g = nt.tensor.grad_data();
        for (std::size_t i : idx) analytic.push_back(g[i]);
        report.checks.push_back(
            {nt.name, max_relative_error(analytic, numeric), kNetTol});
    }
    return report;
}

SuiteReport check_supernet(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    SuiteReport report;
    ModelSpec spec;
    spec.width_multiplier = 1.0 / 16.0;
    spec.num_classes = 3;
    Supernet net(spec, seed);
    Tensor x = random_uniform({4, 3, 32, 16}, rng, 0.0, 1.0);
    std::vector<int> labels{1, 0, 2, 1};
    const double temperature = 2.0;

    // Fixed Gumbel noise per layer; nonzero logits make the check non-trivial.
    std::vector<std::vector<double>> noise(kOsBlockCount);
    for (auto& layer : noise) {
        layer.resize(kCandidateCount);
        for (double& z : layer) z = -std::log(-std::log(uniform_open01(rng)));
    }
    for (auto& a : net.arch()) {
        for (std::size_t i = 0; i < a.logits.numel(); ++i) {
            a.logits[i] = uniform01(rng) - 0.5;
        }
    }

    auto loss_at_fixed_noise = [&]() {
        std::vector<GumbelSample> samples;
        for (int b = 0; b < kOsBlockCount; ++b) {
            samples.push_back(
                gumbel_softmax_at(net.arch()[b].logits, temperature, noise[b]));
        }
        return label_smoothed_cross_entropy(net.logits(x, samples, true), labels, 0.1);
    };

    for (Tensor& p : net.parameters()) p.zero_grad();
    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(loss_at_fixed_noise());
    }
    auto loss_value = [&]() { return loss_at_fixed_noise()[0]; };
    for (int b = 0; b < kOsBlockCount; ++b) {
        Tensor logits = net.arch()[b].logits;
        std::vector<double> numeric =
            finite_difference_grad(loss_value, logits, kNetStep);
        report.checks.push_back({"arch" + std::to_string(b) + "/logits",
                                 max_relative_error(logits.grad_copy(), numeric),
                                 kNetTol});
    }
    // A couple of shared-weight probes confirm theta gradients flow through
    // the weighted heads too.
    std::vector<NamedTensor> tensors = net.named_tensors();
    for (auto& nt : tensors) {
        if (!nt.trainable) continue;
        if (nt.name != "block0.restore.weight" && nt.name != "block5.gate.fc1.weight" &&
            nt.name != "block2.restore_in2.gamma") {
            continue;
        }
        // The IN heads sit right after a ReLU; near-dead channels give the
        // loss extreme curvature there, so the weight probes need a step
        // below that curvature scale.
        std::vector<std::size_t> idx = probe_indices(nt.tensor, rng, 4);
        std::vector<double> numeric =
            finite_difference_grad_at(loss_value, nt.tensor, idx, 1e-7);
        std::vector<double> analytic;
        const double* g = nt.tensor.grad_data();
        for (std::size_t i : idx) analytic.push_back(g[i]);
        report.checks.push_back(
            {nt.name, max_relative_error(analytic, numeric), kNetTol});
    }
    return report;
}

SuiteReport run_scope(const std::string& scope, std::uint64_t seed) {
    if (scope == "ops") return check_ops(seed);
    if (scope == "block") return check_block(seed);
    if (scope == "model") return check_model(seed);
    if (scope == "supernet") return check_supernet(seed);
    throw ConfigError("unknown gradcheck scope: " + scope);
}

}  // namespace osnet::gradcheck
