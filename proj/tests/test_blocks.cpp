#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "osnet/blocks.hpp"
#include "osnet/finite_difference.hpp"
#include "test_support.hpp"

using namespace osnet;
using test_support::make_rng;
using test_support::probe_value;
using test_support::random_probe;
using test_support::random_tensor;

namespace {

OsBlockConfig small_config(int in, int mid, int out, int streams,
                           CandidateKind kind = CandidateKind::OS) {
    OsBlockConfig cfg;
    cfg.in_channels = in;
    cfg.mid_channels = mid;
    cfg.out_channels = out;
    cfg.stream_count = streams;
    cfg.gate_reduction = 4;
    cfg.kind = kind;
    return cfg;
}

long long trainable_param_count(OsBlock& block) {
    std::vector<NamedTensor> tensors;
    block.collect("b", tensors);
    long long n = 0;
    for (auto& nt : tensors) {
        if (nt.trainable) n += static_cast<long long>(nt.tensor.numel());
    }
    return n;
}

}  // namespace

TEST_CASE("lite 3x3 factorisation shrinks parameters and multiplies") {
    CHECK(lite3x3_conv_params(4, 8) == 104);       // (9 + 4) * 8
    CHECK(9LL * 4 * 8 == 288);                     // standard conv for comparison
    CHECK(lite3x3_mult_adds(4, 8, 16, 8) == 13312);
    CHECK(16LL * 8 * 9 * 4 * 8 == 36864);
}

TEST_CASE("lite 3x3 layer keeps the spatial extent and checks channels") {
    auto rng = make_rng(101);
    Lite3x3Layer layer(4, 8, rng);
    Tensor x = random_tensor({2, 4, 6, 5}, rng);
    Tensor y = layer.forward(x, true);
    CHECK(y.shape() == Shape{2, 8, 6, 5});
    Tensor bad = random_tensor({2, 3, 6, 5}, rng);
    CHECK_THROWS_AS(layer.forward(bad, true), DimensionError);
}

TEST_CASE("os block output shape and channel preconditions") {
    auto rng = make_rng(103);
    OsBlock block(small_config(4, 2, 8, 4), rng);
    Tensor x = random_tensor({2, 4, 5, 5}, rng);
    Tensor y = block.forward(x, true);
    CHECK(y.shape() == Shape{2, 8, 5, 5});
    CHECK_THROWS_AS(block.forward(random_tensor({2, 3, 5, 5}, rng), true),
                    DimensionError);
}

TEST_CASE("gate outputs lie strictly inside (0,1)") {
    auto rng = make_rng(107);
    OsBlock block(small_config(4, 4, 4, 4), rng);
    Tensor x = random_tensor({3, 4, 5, 5}, rng);
    OsBlockCapture cap;
    block.forward(x, true, &cap);
    REQUIRE(cap.gate_vectors.size() == 4);
    for (const Tensor& g : cap.gate_vectors) {
        for (std::size_t i = 0; i < g.numel(); ++i) {
            CHECK(g[i] > 0.0);
            CHECK(g[i] < 1.0);
        }
    }
}

TEST_CASE("gated sum of identical streams is T times one gated stream") {
    auto rng = make_rng(109);
    AggregationGate gate(4, 4, rng);
    Tensor x = random_tensor({2, 4, 3, 3}, rng);
    Tensor g = gate.forward(x);
    const int T = 4;
    Tensor acc = mul(x, g);
    for (int t = 1; t < T; ++t) acc = add(acc, mul(x, g));
    Tensor expected = scale(mul(x, g), static_cast<double>(T));
    for (std::size_t i = 0; i < acc.numel(); ++i)
        CHECK(acc[i] == doctest::Approx(expected[i]).epsilon(1e-12));
}

TEST_CASE("zeroed gate MLP gives 0.5 everywhere so the residual halves the stream sum") {
    auto rng = make_rng(113);
    OsBlock block(small_config(4, 4, 4, 3), rng);
    for (Tensor t : {block.gate.fc1.weight, block.gate.fc1.bias, block.gate.fc2.weight,
                     block.gate.fc2.bias}) {
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 0.0;
    }
    Tensor x = random_tensor({2, 4, 4, 4}, rng);
    OsBlockCapture cap;
    block.forward(x, true, &cap);
    for (const Tensor& g : cap.gate_vectors)
        for (std::size_t i = 0; i < g.numel(); ++i) CHECK(g[i] == doctest::Approx(0.5));
    Tensor half_sum(cap.stream_outputs.front().shape());
    for (const Tensor& s : cap.stream_outputs)
        for (std::size_t i = 0; i < s.numel(); ++i) half_sum[i] += 0.5 * s[i];
    for (std::size_t i = 0; i < half_sum.numel(); ++i)
        CHECK(cap.gated_sum[i] == doctest::Approx(half_sum[i]).epsilon(1e-12));
}

TEST_CASE("single-stream block with the gate bypassed matches the plain residual block") {
    auto rng = make_rng(127);
    OsBlock block(small_config(5, 3, 5, 1), rng);
    Tensor x = random_tensor({2, 5, 6, 4}, rng);
    Tensor via_os = block.forward(x, true, nullptr, /*bypass_gate=*/true);
    Tensor via_baseline = baseline_block_forward(block, x, true);
    REQUIRE(via_os.shape() == via_baseline.shape());
    for (std::size_t i = 0; i < via_os.numel(); ++i) {
        CHECK(std::fabs(via_os[i] - via_baseline[i]) <= 1e-12);
    }
}

TEST_CASE("T=4 block parameter gradients match finite differences") {
    auto rng = make_rng(131);
    OsBlock block(small_config(4, 2, 4, 4), rng);
    Tensor x = random_tensor({2, 4, 4, 4}, rng);
    Tensor probe = random_probe({2, 4, 4, 4}, rng);

    std::vector<NamedTensor> tensors;
    block.collect("b", tensors);
    auto forward_scalar = [&]() { return probe_value(block.forward(x, true), probe); };
    for (auto& nt : tensors) {
        if (!nt.trainable) continue;
        nt.tensor.zero_grad();
    }
    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(sum(mul(block.forward(x, true), probe)));
    }
    for (auto& nt : tensors) {
        if (!nt.trainable) continue;
        CAPTURE(nt.name);
        // Step 1e-5 keeps the probe inside one linear piece of the ReLUs.
        std::vector<double> numeric =
            finite_difference_grad(forward_scalar, nt.tensor, 1e-5);
        CHECK(max_relative_error(nt.tensor.grad_copy(), numeric) < 1e-3);
    }
}

TEST_CASE("variant gradients also match finite differences") {
    auto rng = make_rng(137);
    for (CandidateKind kind : {CandidateKind::IN_in, CandidateKind::IN_out,
                               CandidateKind::IN_in_out}) {
        OsBlock block(small_config(4, 2, 4, 2, kind), rng);
        Tensor x = random_tensor({2, 4, 4, 4}, rng);
        Tensor probe = random_probe({2, 4, 4, 4}, rng);
        std::vector<NamedTensor> tensors;
        block.collect("b", tensors);
        auto forward_scalar = [&]() {
            return probe_value(block.forward(x, true), probe);
        };
        for (auto& nt : tensors) nt.tensor.zero_grad();
        Tape tape;
        {
            TapeScope scope(tape);
            tape.backward(sum(mul(block.forward(x, true), probe)));
        }
        // Spot-check one tensor per layer family to keep runtime down.
        for (auto& nt : tensors) {
            if (!nt.trainable) continue;
            if (nt.name.find("gate.fc2") == std::string::npos &&
                nt.name.find("restore_in") == std::string::npos &&
                nt.name.find("out_in") == std::string::npos)
                continue;
            CAPTURE(nt.name);
            std::vector<double> numeric =
                finite_difference_grad(forward_scalar, nt.tensor, 1e-5);
            CHECK(max_relative_error(nt.tensor.grad_copy(), numeric) < 1e-3);
        }
    }
}

TEST_CASE("shared gate gradient assembly holds on random blocks") {
    auto rng = make_rng(139);
    OsBlock block(small_config(4, 4, 4, 4), rng);
    Tensor x = random_tensor({2, 4, 4, 4}, rng);
    GateGradientReport report = shared_gate_gradient_check(block, x, rng);
    CHECK(report.max_stream_contribution_err < 1e-10);
    CHECK(report.max_param_assembly_err < 1e-10);
    CHECK(report.max_param_fd_rel_err < 1e-3);
    for (double n : report.per_stream_contribution_norms) CHECK(n > 0.0);
}

TEST_CASE("a zeroed stream contributes nothing to the gate gradient") {
    auto rng = make_rng(149);
    OsBlock block(small_config(4, 4, 4, 3), rng);
    // Zero the affine of stream 2's last lite layer: its output is relu(0) = 0.
    Lite3x3Layer& last = block.streams[2].back();
    for (std::size_t i = 0; i < last.bn.gamma.numel(); ++i) last.bn.gamma[i] = 0.0;
    for (std::size_t i = 0; i < last.bn.beta.numel(); ++i) last.bn.beta[i] = 0.0;
    Tensor x = random_tensor({2, 4, 4, 4}, rng);
    GateGradientReport report = shared_gate_gradient_check(block, x, rng);
    CHECK(report.per_stream_contribution_norms[2] == 0.0);
    CHECK(report.per_stream_contribution_norms[0] > 0.0);
}

TEST_CASE("with one stream the shared gate assembly is exact") {
    auto rng = make_rng(151);
    OsBlock block(small_config(4, 4, 4, 1), rng);
    Tensor x = random_tensor({2, 4, 4, 4}, rng);
    GateGradientReport report = shared_gate_gradient_check(block, x, rng);
    CHECK(report.max_param_assembly_err == 0.0);
}

TEST_CASE("stream t sees exactly a (2t+1)-sized window") {
    auto rng = make_rng(157);
    const int C = 3, H = 13, W = 13;
    for (int t = 1; t <= 4; ++t) {
        std::vector<Lite3x3Layer> stack;
        for (int d = 0; d < t; ++d) stack.emplace_back(C, C, rng);
        // Eval mode: BN is a per-channel affine, so supports propagate only
        // through the depthwise 3x3 windows.
        auto forward = [&](const Tensor& in) {
            Tensor y = in;
            for (auto& layer : stack) y = layer.forward(y, false);
            return y;
        };
        Tensor x = random_tensor({1, C, H, W}, rng, 0.5, 1.5);
        Tensor base = forward(x);
        Tensor bumped = x.values_copy().empty() ? x : Tensor(x.shape(), x.values_copy());
        const int ph = H / 2, pw = W / 2;
        bumped[bumped.index4(0, 1, ph, pw)] += 0.37;
        Tensor changed = forward(bumped);
        const int radius = t;  // window (2t+1) per side
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                double diff = 0.0;
                for (int c = 0; c < C; ++c) {
                    diff += std::fabs(changed[changed.index4(0, c, h, w)] -
                                      base[base.index4(0, c, h, w)]);
                }
                if (std::abs(h - ph) > radius || std::abs(w - pw) > radius) {
                    CHECK(diff == 0.0);
                }
            }
    }
}

TEST_CASE("variants differ only by IN affine parameters") {
    auto rng = make_rng(163);
    auto count_for = [&](CandidateKind kind) {
        OsBlock block(small_config(6, 3, 8, 4, kind), rng);
        return trainable_param_count(block);
    };
    const long long base = count_for(CandidateKind::OS);
    CHECK(count_for(CandidateKind::IN_in) == base);
    CHECK(count_for(CandidateKind::IN_out) == base + 2 * 8);
    CHECK(count_for(CandidateKind::IN_in_out) == base + 2 * 8);
}

TEST_CASE("block construction is deterministic by seed") {
    auto build = []() {
        auto rng = make_rng(9001);
        return OsBlock(small_config(4, 2, 6, 4), rng);
    };
    OsBlock a = build();
    OsBlock b = build();
    std::vector<NamedTensor> ta, tb;
    a.collect("x", ta);
    b.collect("x", tb);
    REQUIRE(ta.size() == tb.size());
    for (std::size_t i = 0; i < ta.size(); ++i) {
        for (std::size_t j = 0; j < ta[i].tensor.numel(); ++j) {
            CHECK(ta[i].tensor[j] == tb[i].tensor[j]);
        }
    }
}

TEST_CASE("candidate names round-trip") {
    for (CandidateKind k : {CandidateKind::OS, CandidateKind::IN_in, CandidateKind::IN_out,
                            CandidateKind::IN_in_out}) {
        CHECK(candidate_from_name(candidate_name(k)) == k);
    }
    CHECK_THROWS_AS(candidate_from_name("bogus"), ConfigError);
}
