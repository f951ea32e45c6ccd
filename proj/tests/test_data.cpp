#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "osnet/data.hpp"
#include "test_support.hpp"

using namespace osnet;
using test_support::make_rng;
using test_support::random_tensor;

namespace {

DataConfig small_config() {
    DataConfig cfg;
    cfg.num_identities = 6;
    cfg.train_identities = 4;
    cfg.images_per_identity = 6;
    cfg.num_cameras = 3;
    cfg.height = 32;
    cfg.width = 16;
    cfg.seed = 123;
    return cfg;
}

bool images_equal(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) return false;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        if (a[i] != b[i]) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("generation is deterministic given the seed") {
    Dataset a = generate_dataset(small_config());
    Dataset b = generate_dataset(small_config());
    REQUIRE(a.train.size() == b.train.size());
    for (std::size_t i = 0; i < a.train.size(); ++i) {
        CHECK(a.train[i].identity == b.train[i].identity);
        CHECK(a.train[i].camera == b.train[i].camera);
        CHECK(images_equal(a.train[i].image, b.train[i].image));
    }
}

TEST_CASE("pixel values stay in the unit interval with valid metadata") {
    Dataset ds = generate_dataset(small_config());
    for (const auto* split : {&ds.train, &ds.query, &ds.gallery}) {
        for (const auto& img : *split) {
            CHECK(img.identity >= 0);
            CHECK(img.camera >= 0);
            for (std::size_t i = 0; i < img.image.numel(); ++i) {
                CHECK(img.image[i] >= 0.0);
                CHECK(img.image[i] <= 1.0);
            }
        }
    }
}

TEST_CASE("train and test identity populations are disjoint") {
    Dataset ds = generate_dataset(small_config());
    std::set<int> train_ids, test_ids;
    for (const auto& img : ds.train) train_ids.insert(img.identity);
    for (const auto& img : ds.query) test_ids.insert(img.identity);
    for (const auto& img : ds.gallery) test_ids.insert(img.identity);
    for (int id : train_ids) CHECK(test_ids.count(id) == 0);
    CHECK(train_ids.size() == 4);
    CHECK(test_ids.size() == 2);
    // Query and gallery identities overlap (same population).
    std::set<int> query_ids;
    for (const auto& img : ds.query) query_ids.insert(img.identity);
    for (int id : query_ids) {
        bool in_gallery = false;
        for (const auto& img : ds.gallery) in_gallery |= img.identity == id;
        CHECK(in_gallery);
    }
}

TEST_CASE("each test identity contributes one query per camera it appears on") {
    Dataset ds = generate_dataset(small_config());
    std::set<std::pair<int, int>> seen;
    for (const auto& img : ds.query) {
        CHECK(seen.insert({img.identity, img.camera}).second);
    }
}

TEST_CASE("camera partitions route train and test identities differently") {
    DataConfig cfg = small_config();
    cfg.num_cameras = 4;
    cfg.train_cameras = {0, 1};
    cfg.test_cameras = {2, 3};
    Dataset ds = generate_dataset(cfg);
    for (const auto& img : ds.train) CHECK((img.camera == 0 || img.camera == 1));
    for (const auto& img : ds.query) CHECK((img.camera == 2 || img.camera == 3));
    for (const auto& img : ds.gallery) CHECK((img.camera == 2 || img.camera == 3));
}

TEST_CASE("identities differing only in the motif render different pixels") {
    IdentityParams a = make_identity_params(99, 0);
    IdentityParams b = a;
    b.motif_u = a.motif_u > 0.5 ? a.motif_u - 0.3 : a.motif_u + 0.3;
    b.motif_colour = {1.0 - a.motif_colour[0], 1.0 - a.motif_colour[1],
                      1.0 - a.motif_colour[2]};
    PoseParams pose;
    Tensor img_a = render_person(a, pose, 32, 16);
    Tensor img_b = render_person(b, pose, 32, 16);
    CHECK_FALSE(images_equal(img_a, img_b));
}

TEST_CASE("within-identity variance stays below between-identity variance") {
    const int ids = 8, reps = 6, h = 32, w = 16;
    std::vector<std::vector<Tensor>> renders(ids);
    for (int id = 0; id < ids; ++id) {
        IdentityParams p = make_identity_params(7, id);
        for (int r = 0; r < reps; ++r) {
            renders[id].push_back(render_person(p, make_pose_params(7, id, r), h, w));
        }
    }
    const std::size_t n = renders[0][0].numel();
    std::vector<double> global_mean(n, 0.0);
    std::vector<std::vector<double>> id_mean(ids, std::vector<double>(n, 0.0));
    for (int id = 0; id < ids; ++id) {
        for (int r = 0; r < reps; ++r)
            for (std::size_t i = 0; i < n; ++i) id_mean[id][i] += renders[id][r][i];
        for (std::size_t i = 0; i < n; ++i) {
            id_mean[id][i] /= reps;
            global_mean[i] += id_mean[id][i] / ids;
        }
    }
    double within = 0.0, between = 0.0;
    for (int id = 0; id < ids; ++id) {
        for (int r = 0; r < reps; ++r)
            for (std::size_t i = 0; i < n; ++i) {
                const double d = renders[id][r][i] - id_mean[id][i];
                within += d * d / (ids * reps);
            }
        for (std::size_t i = 0; i < n; ++i) {
            const double d = id_mean[id][i] - global_mean[i];
            between += d * d / ids;
        }
    }
    CHECK(within < between);
}

TEST_CASE("degenerate configurations are rejected") {
    DataConfig cfg = small_config();
    cfg.num_identities = 1;
    CHECK_THROWS_AS(generate_dataset(cfg), ConfigError);
    cfg = small_config();
    cfg.num_cameras = 1;
    CHECK_THROWS_AS(generate_dataset(cfg), ConfigError);
    cfg = small_config();
    cfg.height = 4;
    CHECK_THROWS_AS(generate_dataset(cfg), ConfigError);
    cfg = small_config();
    cfg.styles.resize(2);  // three cameras
    CHECK_THROWS_AS(generate_dataset(cfg), ConfigError);
}

TEST_CASE("datasets round-trip through the on-disk container format") {
    const std::string dir = "dataset_roundtrip_test";
    Dataset ds = generate_dataset(small_config());
    ds.config.styles.push_back(default_style(1, 0));
    ds.config.styles.push_back(default_style(1, 1));
    ds.config.styles.push_back(default_style(1, 2));
    save_dataset(dir, ds);
    Dataset back = load_dataset(dir);
    REQUIRE(back.train.size() == ds.train.size());
    REQUIRE(back.query.size() == ds.query.size());
    REQUIRE(back.gallery.size() == ds.gallery.size());
    for (std::size_t i = 0; i < ds.train.size(); ++i) {
        CHECK(back.train[i].identity == ds.train[i].identity);
        CHECK(back.train[i].camera == ds.train[i].camera);
        CHECK(images_equal(back.train[i].image, ds.train[i].image));
    }
    CHECK(back.num_train_identities == ds.num_train_identities);
    std::filesystem::remove_all(dir);
}

TEST_CASE("style application is a clamped per-channel affine") {
    auto rng = make_rng(11);
    Tensor img = random_tensor({3, 8, 4}, rng, 0.0, 1.0);
    StyleProfile style;
    style.scale = {0.5, 1.5, 1.0};
    style.shift = {0.2, -0.1, 0.0};
    style.noise = 0.0;
    auto noise_rng = make_rng(0);
    Tensor styled = apply_style(img, style, noise_rng);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 32; ++i) {
            const double expected =
                std::min(1.0, std::max(0.0, style.scale[c] * img[c * 32 + i] +
                                                style.shift[c]));
            CHECK(styled[c * 32 + i] == doctest::Approx(expected));
        }
}

TEST_CASE("flipping twice with the same decision restores the image") {
    auto rng = make_rng(13);
    Tensor img = random_tensor({3, 8, 6}, rng, 0.0, 1.0);
    // Find a seed whose first draw triggers the flip.
    std::uint64_t flip_seed = 0;
    for (std::uint64_t s = 0; s < 64; ++s) {
        auto probe = make_rng(s);
        if (uniform01(probe) < 0.5) {
            flip_seed = s;
            break;
        }
    }
    auto rng1 = make_rng(flip_seed);
    Tensor once = random_flip(img, rng1);
    CHECK_FALSE(images_equal(once, img));
    auto rng2 = make_rng(flip_seed);
    Tensor twice = random_flip(once, rng2);
    CHECK(images_equal(twice, img));
}

TEST_CASE("random crop preserves the extent") {
    auto rng = make_rng(17);
    Tensor img = random_tensor({3, 16, 8}, rng, 0.0, 1.0);
    Tensor cropped = random_crop(img, rng);
    CHECK(cropped.shape() == img.shape());
}

TEST_CASE("random erasing keeps the erased fraction inside the sampler bounds") {
    auto rng = make_rng(19);
    Tensor img = Tensor::full({3, 32, 16}, 2.0);  // sentinel outside [0,1)
    RandomErasingParams params;
    params.probability = 1.0;
    int erased_events = 0;
    for (int trial = 0; trial < 10000; ++trial) {
        Tensor out = random_erasing(img, rng, params);
        int changed = 0;
        for (std::size_t i = 0; i < out.numel() / 3; ++i) changed += out[i] != 2.0;
        if (changed == 0) continue;
        ++erased_events;
        const double fraction = static_cast<double>(changed) / (32.0 * 16.0);
        CHECK(fraction >= params.area_lo);
        CHECK(fraction <= params.area_hi);
    }
    CHECK(erased_events > 9000);
}

TEST_CASE("random patch pastes one rectangle and leaves the rest untouched") {
    auto rng = make_rng(23);
    PatchPool pool;
    Tensor donor = Tensor::full({3, 32, 16}, 0.25);
    random_patch(donor, rng, pool);  // seeds the pool
    CHECK(pool.size() == 1);

    // The pool may hand back a patch of the image itself (invisible paste),
    // so scan trials until a donor patch lands.
    Tensor img = Tensor::full({3, 32, 16}, 0.75);
    RandomPatchParams params;
    params.paste_probability = 1.0;
    int visible_pastes = 0;
    for (int trial = 0; trial < 50; ++trial) {
        Tensor out = random_patch(img, rng, pool, params);
        int h0 = 1 << 20, h1 = -1, w0 = 1 << 20, w1 = -1, changed = 0;
        for (int h = 0; h < 32; ++h)
            for (int w = 0; w < 16; ++w) {
                if (out[h * 16 + w] != 0.75) {
                    ++changed;
                    h0 = std::min(h0, h);
                    h1 = std::max(h1, h);
                    w0 = std::min(w0, w);
                    w1 = std::max(w1, w);
                }
            }
        if (changed == 0) continue;
        ++visible_pastes;
        CHECK(changed == (h1 - h0 + 1) * (w1 - w0 + 1));
        for (int h = h0; h <= h1; ++h)
            for (int w = w0; w <= w1; ++w)
                CHECK(out[h * 16 + w] == doctest::Approx(0.25));
    }
    CHECK(visible_pastes > 0);

    SUBCASE("the pool keeps a bounded history") {
        PatchPool tiny(2);
        auto rng2 = make_rng(29);
        for (int i = 0; i < 5; ++i) random_patch(donor, rng2, tiny);
        CHECK(tiny.size() == 2);
    }
}
