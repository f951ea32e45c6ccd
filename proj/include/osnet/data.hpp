#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <random>
#include <string>
#include <vector>

#include "osnet/tensor.hpp"

namespace osnet {

// Per-camera rendering style: a per-channel affine plus pixel noise, applied
// identically to every image captured by that camera.
struct StyleProfile {
    std::array<double, 3> scale{1.0, 1.0, 1.0};
    std::array<double, 3> shift{0.0, 0.0, 0.0};
    double noise = 0.0;
};

struct PersonImage {
    Tensor image;  // [3,H,W], values in [0,1]
    int identity = -1;
    int camera = -1;
};

struct DataConfig {
    int num_identities = 48;   // identities 0..n-1; the first block is the train split
    int train_identities = 32;
    int images_per_identity = 20;
    int num_cameras = 4;
    int height = 64;
    int width = 32;
    std::vector<StyleProfile> styles;  // per camera; empty = mild seeded defaults
    std::vector<int> train_cameras;    // cameras used for train identities; empty = all
    std::vector<int> test_cameras;     // cameras used for test identities; empty = all
    std::uint64_t seed = 0;
};

// Re-ID protocol splits: train identities are disjoint from test identities;
// query and gallery share the test identities. Per test identity and camera,
// the first image goes to the query split and the rest to the gallery.
struct Dataset {
    std::vector<PersonImage> train;
    std::vector<PersonImage> query;
    std::vector<PersonImage> gallery;
    int num_train_identities = 0;  // train labels are the identity ids 0..n-1
    DataConfig config;
};

// Identity appearance: a global silhouette (torso/leg colours and body
// proportions) plus a small local motif whose colour, shape and position are
// identity-specific. Telling identities apart needs both scales.
struct IdentityParams {
    std::array<double, 3> torso_colour;
    std::array<double, 3> leg_colour;
    std::array<double, 3> motif_colour;
    double head_tone;
    double body_width;    // fraction of image width
    double motif_u;       // horizontal position within the torso box
    double motif_v;       // vertical position within the torso box
    double motif_size;    // fraction of image width
    bool motif_is_disc;   // disc or square
};

struct PoseParams {
    int dx = 0;
    int dy = 0;
    double brightness = 1.0;
    double background = 0.82;
};

IdentityParams make_identity_params(std::uint64_t seed, int identity);
PoseParams make_pose_params(std::uint64_t seed, int identity, int image_index);
Tensor render_person(const IdentityParams& id, const PoseParams& pose, int h, int w);

// clamp(scale * image + shift + noise, [0,1]) per channel
Tensor apply_style(const Tensor& image, const StyleProfile& style,
                   std::mt19937_64& noise_rng);

StyleProfile default_style(std::uint64_t seed, int camera);

Dataset generate_dataset(const DataConfig& config);

void save_dataset(const std::string& dir, const Dataset& dataset);
Dataset load_dataset(const std::string& dir);

// Augmentations. All preserve the [3,H,W] extent.
Tensor random_flip(const Tensor& image, std::mt19937_64& rng);  // p = 0.5
// Replicate-pad by `pad` and crop back at a random offset.
Tensor random_crop(const Tensor& image, std::mt19937_64& rng, int pad = 4);

struct RandomErasingParams {
    double probability = 0.5;
    double area_lo = 0.02, area_hi = 0.4;
    double aspect_lo = 0.3, aspect_hi = 3.3;
};
Tensor random_erasing(const Tensor& image, std::mt19937_64& rng,
                      const RandomErasingParams& params = {});

// FIFO pool of patches ripped out of previously seen images.
class PatchPool {
  public:
    explicit PatchPool(std::size_t capacity = 50) : capacity_(capacity) {}
    std::size_t size() const { return patches_.size(); }
    void push(Tensor patch);
    const Tensor& at(std::size_t i) const { return patches_.at(i); }

  private:
    std::size_t capacity_;
    std::deque<Tensor> patches_;
};

struct RandomPatchParams {
    double paste_probability = 0.5;
    double area_lo = 0.01, area_hi = 0.5;
    double aspect_lo = 0.5, aspect_hi = 2.0;
};
// Extracts one random patch into the pool, then with the configured
// probability pastes a random pooled patch at a random position.
Tensor random_patch(const Tensor& image, std::mt19937_64& rng, PatchPool& pool,
                    const RandomPatchParams& params = {});

}  // namespace osnet
