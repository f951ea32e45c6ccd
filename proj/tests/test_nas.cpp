#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <array>
#include <cmath>

#include "doctest.h"
#include "osnet/gradcheck.hpp"
#include "osnet/nas.hpp"
#include "test_support.hpp"

using namespace osnet;
using test_support::make_rng;
using test_support::random_tensor;

namespace {

std::array<double, 4> softmax4(const std::array<double, 4>& v) {
    double mx = v[0];
    for (double x : v) mx = std::max(mx, x);
    std::array<double, 4> p{};
    double s = 0.0;
    for (int i = 0; i < 4; ++i) {
        p[i] = std::exp(v[i] - mx);
        s += p[i];
    }
    for (double& x : p) x /= s;
    return p;
}

int argmax4(const Tensor& t) {
    int best = 0;
    for (int i = 1; i < 4; ++i) {
        if (t[i] > t[best]) best = i;
    }
    return best;
}

ModelSpec tiny_supernet_spec() {
    ModelSpec spec;
    spec.width_multiplier = 1.0 / 16.0;
    spec.num_classes = 3;
    return spec;
}

}  // namespace

TEST_CASE("the gumbel transform maps u=0.5 to about 0.366513") {
    CHECK(-std::log(-std::log(0.5)) ==
          doctest::Approx(0.366512920581664).epsilon(1e-12));
}

TEST_CASE("sampled noise follows the inverse transform of the drawn uniforms") {
    auto rng = make_rng(3);
    Tensor logits = Tensor::zeros({4});
    for (int i = 0; i < 50; ++i) {
        GumbelSample s = sample_gumbel_softmax(logits, 1.0, rng);
        for (int k = 0; k < 4; ++k) {
            CHECK(s.uniforms[k] > 0.0);
            CHECK(s.uniforms[k] < 1.0);
            CHECK(s.noise[k] ==
                  doctest::Approx(-std::log(-std::log(s.uniforms[k]))).epsilon(1e-14));
        }
    }
}

TEST_CASE("every relaxed draw lies in the open simplex") {
    auto rng = make_rng(5);
    Tensor logits = Tensor::from_values({4}, {0.5, -1.0, 2.0, 0.0});
    for (int i = 0; i < 1000; ++i) {
        GumbelSample s = sample_gumbel_softmax(logits, 3.0, rng);
        double sum = 0.0;
        for (int k = 0; k < 4; ++k) {
            CHECK(s.alpha[k] > 0.0);
            sum += s.alpha[k];
        }
        CHECK(std::fabs(sum - 1.0) < 1e-12);
    }
    CHECK_THROWS_AS(sample_gumbel_softmax(logits, 0.0, rng), ConfigError);
}

TEST_CASE("argmax frequencies of uniform logits are 0.25 each") {
    auto rng = make_rng(7);
    Tensor logits = Tensor::zeros({4});
    std::array<int, 4> counts{};
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) {
        GumbelSample s = sample_gumbel_softmax(logits, 1.0, rng);
        ++counts[argmax4(s.alpha)];
    }
    for (int k = 0; k < 4; ++k) {
        CHECK(std::fabs(static_cast<double>(counts[k]) / draws - 0.25) < 0.01);
    }
}

TEST_CASE("argmax frequencies track softmax(pi) and pass a chi-square test") {
    auto rng = make_rng(11);
    const std::array<double, 4> pi{0.8, -0.3, 0.1, -1.2};
    Tensor logits =
        Tensor::from_values({4}, std::vector<double>(pi.begin(), pi.end()));
    const std::array<double, 4> expected = softmax4(pi);
    std::array<int, 4> counts{};
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) {
        GumbelSample s = sample_gumbel_softmax(logits, 1.0, rng);
        ++counts[argmax4(s.alpha)];
    }
    double chi2 = 0.0;
    for (int k = 0; k < 4; ++k) {
        const double freq = static_cast<double>(counts[k]) / draws;
        CHECK(std::fabs(freq - expected[k]) < 0.01);
        const double e = expected[k] * draws;
        chi2 += (counts[k] - e) * (counts[k] - e) / e;
    }
    CHECK(chi2 < 11.345);  // chi-square 99th percentile, 3 dof
}

TEST_CASE("sampled entropy trends down as the temperature anneals") {
    auto rng = make_rng(13);
    Tensor logits = Tensor::from_values({4}, {1.0, 0.3, -0.4, -1.1});
    const int draws = 10000;
    double prev_mean_entropy = 1e9;
    double prev_mixture_entropy = 1e9;
    for (double temperature : {10.0, 5.0, 2.0, 1.0}) {
        double mean_entropy = 0.0;
        std::array<double, 4> mean_alpha{};
        for (int i = 0; i < draws; ++i) {
            GumbelSample s = sample_gumbel_softmax(logits, temperature, rng);
            for (int k = 0; k < 4; ++k) {
                mean_alpha[k] += s.alpha[k];
                mean_entropy -= s.alpha[k] * std::log(s.alpha[k]);
            }
        }
        mean_entropy /= draws;
        double mixture_entropy = 0.0;
        for (int k = 0; k < 4; ++k) {
            mean_alpha[k] /= draws;
            mixture_entropy -= mean_alpha[k] * std::log(mean_alpha[k]);
        }
        CHECK(mean_entropy < prev_mean_entropy);
        CHECK(mixture_entropy < prev_mixture_entropy);
        prev_mean_entropy = mean_entropy;
        prev_mixture_entropy = mixture_entropy;
    }
}

TEST_CASE("temperature schedule starts at 10, steps by 0.5 every 20 epochs, floors at 1") {
    CHECK(temperature_schedule(0) == 10.0);
    CHECK(temperature_schedule(19) == 10.0);
    CHECK(temperature_schedule(20) == 9.5);
    CHECK(temperature_schedule(39) == 9.5);
    CHECK(temperature_schedule(40) == 9.0);
    CHECK(temperature_schedule(360) == 1.0);
    CHECK(temperature_schedule(1000) == 1.0);
    CHECK_THROWS_AS(temperature_schedule(-1), ContractError);
}

TEST_CASE("weighted block output is linear in alpha and selects heads one-hot") {
    auto rng = make_rng(17);
    OsBlockConfig cfg;
    cfg.in_channels = 4;
    cfg.mid_channels = 2;
    cfg.out_channels = 4;
    cfg.stream_count = 2;
    cfg.gate_reduction = 4;
    cfg.all_candidates = true;
    OsBlock block(cfg, rng);
    Tensor x = random_tensor({2, 4, 4, 4}, rng, 0.0, 1.0);

    std::array<Tensor, 4> head_outputs;
    for (int k = 0; k < 4; ++k) {
        Tensor onehot = Tensor::zeros({4});
        onehot[k] = 1.0;
        head_outputs[k] = block.forward_weighted(x, onehot, true);
    }
    Tensor alpha = Tensor::from_values({4}, {0.1, 0.4, 0.3, 0.2});
    Tensor mixed = block.forward_weighted(x, alpha, true);
    for (std::size_t i = 0; i < mixed.numel(); ++i) {
        double expected = 0.0;
        for (int k = 0; k < 4; ++k) expected += alpha[k] * head_outputs[k][i];
        CHECK(mixed[i] == doctest::Approx(expected).epsilon(1e-12));
    }
    // The heads genuinely differ (BN vs IN normalisation paths).
    bool differ = false;
    for (std::size_t i = 0; i < head_outputs[0].numel(); ++i) {
        differ = differ || head_outputs[0][i] != head_outputs[1][i];
    }
    CHECK(differ);
}

TEST_CASE("supernet forward demands one sample per layer") {
    Supernet net(tiny_supernet_spec(), 5);
    auto rng = make_rng(19);
    Tensor x = random_tensor({2, 3, 32, 16}, rng, 0.0, 1.0);
    std::vector<GumbelSample> samples;
    for (int b = 0; b < kOsBlockCount - 1; ++b) {
        samples.push_back(sample_gumbel_softmax(net.arch()[b].logits, 2.0, rng));
    }
    CHECK_THROWS_AS(net.features(x, samples, true), ContractError);
    samples.push_back(sample_gumbel_softmax(net.arch()[5].logits, 2.0, rng));
    Tensor f = net.features(x, samples, true);
    CHECK(f.shape() == Shape{2, kFeatureDim});
    CHECK(f.all_finite());
}

TEST_CASE("supernet pi-gradients at fixed noise match finite differences") {
    auto report = gradcheck::check_supernet(7);
    for (const auto& c : report.checks) {
        CAPTURE(c.name);
        CHECK(c.rel_err < c.tolerance);
    }
}

TEST_CASE("one-sample estimates equal a single sampled backward pass") {
    ModelSpec spec = tiny_supernet_spec();
    Supernet net(spec, 23);
    auto rng_data = make_rng(29);
    Tensor x = random_tensor({2, 3, 32, 16}, rng_data, 0.0, 1.0);
    std::vector<int> labels{0, 2};

    auto rng1 = make_rng(31);
    for (Tensor& p : net.parameters()) p.zero_grad();
    estimate_gradients(net, x, labels, 0.1, 4.0, 1, rng1);
    std::vector<std::vector<double>> via_estimator;
    for (Tensor& p : net.arch_parameters()) via_estimator.push_back(p.grad_copy());

    // Fresh identically-built net replays the same draw by hand.
    Supernet net2(spec, 23);
    auto rng2 = make_rng(31);
    for (Tensor& p : net2.parameters()) p.zero_grad();
    {
        Tape tape;
        TapeScope scope(tape);
        std::vector<GumbelSample> samples;
        for (auto& a : net2.arch()) {
            samples.push_back(sample_gumbel_softmax(a.logits, 4.0, rng2));
        }
        tape.backward(label_smoothed_cross_entropy(net2.logits(x, samples, true),
                                                   labels, 0.1));
    }
    std::vector<Tensor> arch2 = net2.arch_parameters();
    for (std::size_t b = 0; b < arch2.size(); ++b) {
        const double* g = arch2[b].grad_data();
        for (int k = 0; k < kCandidateCount; ++k) {
            CHECK(via_estimator[b][k] == g[k]);
        }
    }
}

TEST_CASE("an S=4 estimate is the mean of the four S=1 estimates it chains") {
    ModelSpec spec = tiny_supernet_spec();
    auto rng_data = make_rng(37);
    Tensor x = random_tensor({2, 3, 32, 16}, rng_data, 0.0, 1.0);
    std::vector<int> labels{1, 2};

    Supernet net_a(spec, 41);
    auto rng_a = make_rng(43);
    for (Tensor& p : net_a.parameters()) p.zero_grad();
    estimate_gradients(net_a, x, labels, 0.1, 4.0, 4, rng_a);

    Supernet net_b(spec, 41);
    auto rng_b = make_rng(43);
    std::vector<std::vector<double>> sum(kOsBlockCount,
                                         std::vector<double>(kCandidateCount, 0.0));
    for (int s = 0; s < 4; ++s) {
        for (Tensor& p : net_b.parameters()) p.zero_grad();
        estimate_gradients(net_b, x, labels, 0.1, 4.0, 1, rng_b);
        std::vector<Tensor> arch = net_b.arch_parameters();
        for (int b = 0; b < kOsBlockCount; ++b) {
            const double* g = arch[b].grad_data();
            for (int k = 0; k < kCandidateCount; ++k) sum[b][k] += g[k];
        }
    }
    std::vector<Tensor> arch_a = net_a.arch_parameters();
    for (int b = 0; b < kOsBlockCount; ++b) {
        const double* g = arch_a[b].grad_data();
        for (int k = 0; k < kCandidateCount; ++k) {
            CHECK(g[k] == doctest::Approx(sum[b][k] * 0.25).epsilon(1e-13));
        }
    }
}

TEST_CASE("derive picks the per-layer argmax with fixed-order tie breaking") {
    ModelSpec base;
    std::vector<ArchParams> arch(kOsBlockCount);
    for (auto& a : arch) a.logits = Tensor::zeros({4});

    SUBCASE("clear winner") {
        arch[0].logits = Tensor::from_values({4}, {3.0, 1.0, 0.0, -2.0});
        ModelSpec derived = derive_architecture(arch, base);
        CHECK(derived.variants[0] == CandidateKind::OS);
    }
    SUBCASE("all-equal logits fall back to the first candidate") {
        ModelSpec derived = derive_architecture(arch, base);
        for (int b = 0; b < kOsBlockCount; ++b) {
            CHECK(derived.variants[b] == CandidateKind::OS);
        }
    }
    SUBCASE("shift invariance per layer") {
        auto rng = make_rng(47);
        for (auto& a : arch) {
            for (int k = 0; k < 4; ++k) a.logits[k] = uniform01(rng) * 4.0 - 2.0;
        }
        ModelSpec before = derive_architecture(arch, base);
        for (int b = 0; b < kOsBlockCount; ++b) {
            for (int k = 0; k < 4; ++k) arch[b].logits[k] += 7.5;
        }
        ModelSpec after = derive_architecture(arch, base);
        CHECK(before.variants == after.variants);
    }
    SUBCASE("a published-style outcome layout is representable") {
        const std::array<CandidateKind, 6> target{
            CandidateKind::IN_in, CandidateKind::IN_in, CandidateKind::OS,
            CandidateKind::IN_in, CandidateKind::IN_in, CandidateKind::OS};
        for (int b = 0; b < kOsBlockCount; ++b) {
            arch[b].logits[static_cast<int>(target[b])] = 1.0;
        }
        ModelSpec derived = derive_architecture(arch, base);
        CHECK(derived.variants == target);
    }
}

TEST_CASE("candidate probabilities are a softmax of the logits") {
    Supernet net(tiny_supernet_spec(), 53);
    net.arch()[2].logits = Tensor::from_values({4}, {1.0, 2.0, 0.5, -1.0});
    const auto p = net.candidate_probabilities(2);
    const auto expected = softmax4({1.0, 2.0, 0.5, -1.0});
    double sum = 0.0;
    for (int k = 0; k < 4; ++k) {
        CHECK(p[k] == doctest::Approx(expected[k]).epsilon(1e-12));
        sum += p[k];
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
}
