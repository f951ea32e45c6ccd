#include "osnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "osnet/checkpoint.hpp"

namespace osnet {

namespace {

std::uint64_t mix(std::uint64_t x) {
    // splitmix64 finaliser
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

std::mt19937_64 keyed_rng(std::uint64_t seed, std::uint64_t tag, std::uint64_t a = 0,
                          std::uint64_t b = 0) {
    return std::mt19937_64(mix(seed ^ mix(tag ^ mix(a ^ mix(b)))));
}

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

void fill_rect(Tensor& img, int h0, int h1, int w0, int w1,
               const std::array<double, 3>& colour) {
    const int H = img.dim(1), W = img.dim(2);
    h0 = std::max(0, h0);
    w0 = std::max(0, w0);
    h1 = std::min(H, h1);
    w1 = std::min(W, w1);
    for (int c = 0; c < 3; ++c)
        for (int h = h0; h < h1; ++h)
            for (int w = w0; w < w1; ++w)
                img[(static_cast<std::size_t>(c) * H + h) * W + w] = colour[c];
}

void fill_disc(Tensor& img, double ch, double cw, double radius,
               const std::array<double, 3>& colour) {
    const int H = img.dim(1), W = img.dim(2);
    const int h0 = std::max(0, static_cast<int>(std::floor(ch - radius)));
    const int h1 = std::min(H, static_cast<int>(std::ceil(ch + radius)) + 1);
    const int w0 = std::max(0, static_cast<int>(std::floor(cw - radius)));
    const int w1 = std::min(W, static_cast<int>(std::ceil(cw + radius)) + 1);
    for (int h = h0; h < h1; ++h)
        for (int w = w0; w < w1; ++w) {
            const double dh = h - ch, dw = w - cw;
            if (dh * dh + dw * dw <= radius * radius) {
                for (int c = 0; c < 3; ++c)
                    img[(static_cast<std::size_t>(c) * H + h) * W + w] = colour[c];
            }
        }
}

void validate(const DataConfig& cfg) {
    if (cfg.num_identities < 2) throw ConfigError("need at least 2 identities");
    if (cfg.num_cameras < 2) throw ConfigError("need at least 2 cameras");
    if (cfg.train_identities < 1 || cfg.train_identities > cfg.num_identities) {
        throw ConfigError("train identity count out of range");
    }
    if (cfg.images_per_identity < 1) throw ConfigError("need images per identity");
    if (cfg.height < 16 || cfg.width < 8) {
        throw ConfigError("image extent too small (min 16x8)");
    }
    if (!cfg.styles.empty() &&
        cfg.styles.size() != static_cast<std::size_t>(cfg.num_cameras)) {
        throw ConfigError("style list must match the camera count");
    }
    for (int cam : cfg.train_cameras) {
        if (cam < 0 || cam >= cfg.num_cameras) throw ConfigError("bad train camera id");
    }
    for (int cam : cfg.test_cameras) {
        if (cam < 0 || cam >= cfg.num_cameras) throw ConfigError("bad test camera id");
    }
}

}  // namespace

IdentityParams make_identity_params(std::uint64_t seed, int identity) {
    auto rng = keyed_rng(seed, 0xA11CE, static_cast<std::uint64_t>(identity));
    IdentityParams p;
    // Hue spreading via the golden ratio keeps identities well separated even
    // for small identity counts.
    const double golden = 0.6180339887498949;
    const double hue = std::fmod(identity * golden + uniform01(rng) * 0.15, 1.0);
    auto hue_to_rgb = [](double h, double sat, double val) {
        const double r = std::fabs(std::fmod(h * 6.0, 6.0) - 3.0) - 1.0;
        const double g = 2.0 - std::fabs(std::fmod(h * 6.0 + 4.0, 6.0) - 3.0);
        const double b = 2.0 - std::fabs(std::fmod(h * 6.0 + 2.0, 6.0) - 3.0);
        auto mixc = [&](double base) {
            const double c = std::min(1.0, std::max(0.0, base));
            return val * (1.0 - sat * (1.0 - c));
        };
        return std::array<double, 3>{mixc(r), mixc(g), mixc(b)};
    };
    p.torso_colour = hue_to_rgb(hue, 0.55 + 0.4 * uniform01(rng),
                                0.45 + 0.5 * uniform01(rng));
    p.leg_colour = hue_to_rgb(std::fmod(hue + 0.25 + 0.5 * uniform01(rng), 1.0),
                              0.5 + 0.4 * uniform01(rng), 0.3 + 0.5 * uniform01(rng));
    p.motif_colour = hue_to_rgb(std::fmod(hue + 0.5, 1.0), 0.9, 0.95);
    p.head_tone = 0.55 + 0.35 * uniform01(rng);
    p.body_width = 0.45 + 0.25 * uniform01(rng);
    p.motif_u = 0.2 + 0.6 * uniform01(rng);
    p.motif_v = 0.2 + 0.6 * uniform01(rng);
    p.motif_size = 0.10 + 0.08 * uniform01(rng);
    p.motif_is_disc = uniform01(rng) < 0.5;
    return p;
}

PoseParams make_pose_params(std::uint64_t seed, int identity, int image_index) {
    auto rng = keyed_rng(seed, 0x90513, static_cast<std::uint64_t>(identity),
                         static_cast<std::uint64_t>(image_index));
    PoseParams p;
    p.dx = static_cast<int>(std::floor(uniform01(rng) * 3.0)) - 1;
    p.dy = static_cast<int>(std::floor(uniform01(rng) * 3.0)) - 1;
    p.brightness = 0.97 + 0.06 * uniform01(rng);
    p.background = 0.78 + 0.08 * uniform01(rng);
    return p;
}

Tensor render_person(const IdentityParams& id, const PoseParams& pose, int h, int w) {
    Tensor img({3, h, w}, pose.background);
    const int cx = w / 2 + pose.dx;
    const int body_w = std::max(3, static_cast<int>(std::lround(id.body_width * w)));

    // Head: a small disc near the top.
    const double head_r = std::max(1.5, 0.09 * h / 2.0 + 0.06 * w);
    fill_disc(img, 0.12 * h + pose.dy, cx, head_r,
              {id.head_tone, id.head_tone * 0.92, id.head_tone * 0.85});

    // Torso block.
    const int t0 = static_cast<int>(0.22 * h) + pose.dy;
    const int t1 = static_cast<int>(0.58 * h) + pose.dy;
    const int tw0 = cx - body_w / 2, tw1 = cx + (body_w + 1) / 2;
    fill_rect(img, t0, t1, tw0, tw1, id.torso_colour);

    // Legs: two strips with a gap.
    const int l1 = static_cast<int>(0.92 * h) + pose.dy;
    const int leg_w = std::max(1, body_w / 3);
    fill_rect(img, t1, l1, tw0, tw0 + leg_w, id.leg_colour);
    fill_rect(img, t1, l1, tw1 - leg_w, tw1, id.leg_colour);

    // Local motif inside the torso box.
    const double mh = t0 + id.motif_v * (t1 - t0);
    const double mw = tw0 + id.motif_u * (tw1 - tw0);
    const double msize = std::max(1.0, id.motif_size * w);
    if (id.motif_is_disc) {
        fill_disc(img, mh, mw, msize / 2.0 + 0.5, id.motif_colour);
    } else {
        const int half = static_cast<int>(msize / 2.0 + 0.5);
        fill_rect(img, static_cast<int>(mh) - half, static_cast<int>(mh) + half + 1,
                  static_cast<int>(mw) - half, static_cast<int>(mw) + half + 1,
                  id.motif_colour);
    }

    for (std::size_t i = 0; i < img.numel(); ++i) {
        img[i] = clamp01(img[i] * pose.brightness);
    }
    return img;
}

Tensor apply_style(const Tensor& image, const StyleProfile& style,
                   std::mt19937_64& noise_rng) {
    const int H = image.dim(1), W = image.dim(2);
    Tensor out(image.shape());
    for (int c = 0; c < 3; ++c) {
        const std::size_t base = static_cast<std::size_t>(c) * H * W;
        for (int i = 0; i < H * W; ++i) {
            double v = style.scale[c] * image[base + i] + style.shift[c];
            if (style.noise > 0.0) v += style.noise * normal01(noise_rng);
            out[base + i] = clamp01(v);
        }
    }
    return out;
}

StyleProfile default_style(std::uint64_t seed, int camera) {
    auto rng = keyed_rng(seed, 0xCA0, static_cast<std::uint64_t>(camera));
    StyleProfile s;
    for (int c = 0; c < 3; ++c) {
        s.scale[c] = 0.92 + 0.16 * uniform01(rng);
        s.shift[c] = -0.04 + 0.08 * uniform01(rng);
    }
    s.noise = 0.01;
    return s;
}

Dataset generate_dataset(const DataConfig& config) {
    validate(config);
    Dataset ds;
    ds.config = config;
    ds.num_train_identities = config.train_identities;

    std::vector<StyleProfile> styles = config.styles;
    if (styles.empty()) {
        for (int cam = 0; cam < config.num_cameras; ++cam) {
            styles.push_back(default_style(config.seed, cam));
        }
    }
    std::vector<int> all_cams(config.num_cameras);
    for (int c = 0; c < config.num_cameras; ++c) all_cams[c] = c;
    const std::vector<int>& train_cams =
        config.train_cameras.empty() ? all_cams : config.train_cameras;
    const std::vector<int>& test_cams =
        config.test_cameras.empty() ? all_cams : config.test_cameras;

    for (int id = 0; id < config.num_identities; ++id) {
        const bool is_train = id < config.train_identities;
        const std::vector<int>& cams = is_train ? train_cams : test_cams;
        const IdentityParams idp = make_identity_params(config.seed, id);
        std::vector<int> seen_query;  // cameras that already contributed a query
        for (int j = 0; j < config.images_per_identity; ++j) {
            const int cam = cams[j % cams.size()];
            const PoseParams pose = make_pose_params(config.seed, id, j);
            Tensor img = render_person(idp, pose, config.height, config.width);
            auto noise_rng = keyed_rng(config.seed, 0x501E, id, j);
            img = apply_style(img, styles[cam], noise_rng);
            PersonImage pi{img, id, cam};
            if (is_train) {
                ds.train.push_back(std::move(pi));
            } else if (std::find(seen_query.begin(), seen_query.end(), cam) ==
                       seen_query.end()) {
                seen_query.push_back(cam);
                ds.query.push_back(std::move(pi));
            } else {
                ds.gallery.push_back(std::move(pi));
            }
        }
    }
    return ds;
}

namespace {

void save_split(const std::string& dir, const std::vector<PersonImage>& images) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json manifest = nlohmann::json::array();
    char name[32];
    for (std::size_t i = 0; i < images.size(); ++i) {
        std::snprintf(name, sizeof(name), "img_%06zu.tns", i);
        write_image(dir + "/" + name, images[i].image, images[i].identity,
                    images[i].camera);
        manifest.push_back(
            {{"id", images[i].identity}, {"camera", images[i].camera}, {"file", name}});
    }
    std::ofstream os(dir + "/manifest.json");
    os << manifest.dump(1) << "\n";
}

std::vector<PersonImage> load_split(const std::string& dir) {
    std::ifstream is(dir + "/manifest.json");
    if (!is) throw ContractError("missing manifest in '" + dir + "'");
    nlohmann::json manifest = nlohmann::json::parse(is);
    std::vector<PersonImage> images;
    for (const auto& entry : manifest) {
        PersonImage pi;
        pi.identity = entry.at("id").get<int>();
        pi.camera = entry.at("camera").get<int>();
        pi.image = read_image(dir + "/" + entry.at("file").get<std::string>());
        images.push_back(std::move(pi));
    }
    return images;
}

nlohmann::json style_to_json(const StyleProfile& s) {
    return {{"scale", s.scale}, {"shift", s.shift}, {"noise", s.noise}};
}

StyleProfile style_from_json(const nlohmann::json& j) {
    StyleProfile s;
    s.scale = j.at("scale").get<std::array<double, 3>>();
    s.shift = j.at("shift").get<std::array<double, 3>>();
    s.noise = j.at("noise").get<double>();
    return s;
}

}  // namespace

void save_dataset(const std::string& dir, const Dataset& dataset) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    save_split(dir + "/train", dataset.train);
    save_split(dir + "/query", dataset.query);
    save_split(dir + "/gallery", dataset.gallery);

    nlohmann::json cfg{{"num_identities", dataset.config.num_identities},
                       {"train_identities", dataset.config.train_identities},
                       {"images_per_identity", dataset.config.images_per_identity},
                       {"num_cameras", dataset.config.num_cameras},
                       {"height", dataset.config.height},
                       {"width", dataset.config.width},
                       {"train_cameras", dataset.config.train_cameras},
                       {"test_cameras", dataset.config.test_cameras},
                       {"seed", dataset.config.seed}};
    nlohmann::json styles = nlohmann::json::array();
    for (const auto& s : dataset.config.styles) styles.push_back(style_to_json(s));
    cfg["styles"] = styles;
    cfg["num_train_identities"] = dataset.num_train_identities;
    std::ofstream os(dir + "/config.json");
    os << cfg.dump(1) << "\n";
}

Dataset load_dataset(const std::string& dir) {
    std::ifstream is(dir + "/config.json");
    if (!is) throw ContractError("missing dataset config in '" + dir + "'");
    nlohmann::json cfg = nlohmann::json::parse(is);
    Dataset ds;
    ds.config.num_identities = cfg.at("num_identities").get<int>();
    ds.config.train_identities = cfg.at("train_identities").get<int>();
    ds.config.images_per_identity = cfg.at("images_per_identity").get<int>();
    ds.config.num_cameras = cfg.at("num_cameras").get<int>();
    ds.config.height = cfg.at("height").get<int>();
    ds.config.width = cfg.at("width").get<int>();
    ds.config.train_cameras = cfg.at("train_cameras").get<std::vector<int>>();
    ds.config.test_cameras = cfg.at("test_cameras").get<std::vector<int>>();
    ds.config.seed = cfg.at("seed").get<std::uint64_t>();
    for (const auto& j : cfg.at("styles")) {
        ds.config.styles.push_back(style_from_json(j));
    }
    ds.num_train_identities = cfg.at("num_train_identities").get<int>();
    ds.train = load_split(dir + "/train");
    ds.query = load_split(dir + "/query");
    ds.gallery = load_split(dir + "/gallery");
    return ds;
}

Tensor random_flip(const Tensor& image, std::mt19937_64& rng) {
    if (uniform01(rng) >= 0.5) return image;
    const int H = image.dim(1), W = image.dim(2);
    Tensor out(image.shape());
    for (int c = 0; c < 3; ++c)
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                out[(static_cast<std::size_t>(c) * H + h) * W + w] =
                    image[(static_cast<std::size_t>(c) * H + h) * W + (W - 1 - w)];
            }
    return out;
}

Tensor random_crop(const Tensor& image, std::mt19937_64& rng, int pad) {
    const int H = image.dim(1), W = image.dim(2);
    const int oh = static_cast<int>(std::floor(uniform01(rng) * (2 * pad + 1))) - pad;
    const int ow = static_cast<int>(std::floor(uniform01(rng) * (2 * pad + 1))) - pad;
    Tensor out(image.shape());
    for (int c = 0; c < 3; ++c)
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                const int sh = std::min(H - 1, std::max(0, h + oh));
                const int sw = std::min(W - 1, std::max(0, w + ow));
                out[(static_cast<std::size_t>(c) * H + h) * W + w] =
                    image[(static_cast<std::size_t>(c) * H + sh) * W + sw];
            }
    return out;
}

namespace {

// Samples a rectangle whose realized (post-rounding) area ratio and aspect
// stay inside the given bounds; returns false if none was found.
bool sample_rect(std::mt19937_64& rng, int H, int W, double area_lo, double area_hi,
                 double aspect_lo, double aspect_hi, int* h0, int* w0, int* rh,
                 int* rw) {
    for (int attempt = 0; attempt < 64; ++attempt) {
        const double area = (area_lo + (area_hi - area_lo) * uniform01(rng)) * H * W;
        const double aspect = aspect_lo + (aspect_hi - aspect_lo) * uniform01(rng);
        const int h = static_cast<int>(std::lround(std::sqrt(area * aspect)));
        const int w = static_cast<int>(std::lround(std::sqrt(area / aspect)));
        if (h < 1 || w < 1 || h > H || w > W) continue;
        const double realized = static_cast<double>(h) * w / (H * W);
        if (realized < area_lo || realized > area_hi) continue;
        *rh = h;
        *rw = w;
        *h0 = static_cast<int>(std::floor(uniform01(rng) * (H - h + 1)));
        *w0 = static_cast<int>(std::floor(uniform01(rng) * (W - w + 1)));
        return true;
    }
    return false;
}

}  // namespace

Tensor random_erasing(const Tensor& image, std::mt19937_64& rng,
                      const RandomErasingParams& params) {
    if (uniform01(rng) >= params.probability) return image;
    const int H = image.dim(1), W = image.dim(2);
    int h0, w0, rh, rw;
    if (!sample_rect(rng, H, W, params.area_lo, params.area_hi, params.aspect_lo,
                     params.aspect_hi, &h0, &w0, &rh, &rw)) {
        return image;
    }
    Tensor out(image.shape(), image.values_copy());
    for (int c = 0; c < 3; ++c)
        for (int h = h0; h < h0 + rh; ++h)
            for (int w = w0; w < w0 + rw; ++w)
                out[(static_cast<std::size_t>(c) * H + h) * W + w] = uniform01(rng);
    return out;
}

void PatchPool::push(Tensor patch) {
    if (patches_.size() == capacity_) patches_.pop_front();
    patches_.push_back(std::move(patch));
}

Tensor random_patch(const Tensor& image, std::mt19937_64& rng, PatchPool& pool,
                    const RandomPatchParams& params) {
    const int H = image.dim(1), W = image.dim(2);
    int h0, w0, rh, rw;
    if (sample_rect(rng, H, W, params.area_lo, params.area_hi, params.aspect_lo,
                    params.aspect_hi, &h0, &w0, &rh, &rw)) {
        Tensor patch({3, rh, rw});
        for (int c = 0; c < 3; ++c)
            for (int h = 0; h < rh; ++h)
                for (int w = 0; w < rw; ++w)
                    patch[(static_cast<std::size_t>(c) * rh + h) * rw + w] =
                        image[(static_cast<std::size_t>(c) * H + h0 + h) * W + w0 + w];
        pool.push(std::move(patch));
    }
    if (pool.size() == 0 || uniform01(rng) >= params.paste_probability) return image;

    const std::size_t pick =
        static_cast<std::size_t>(std::floor(uniform01(rng) * pool.size()));
    const Tensor& patch = pool.at(std::min(pick, pool.size() - 1));
    const int ph = patch.dim(1), pw = patch.dim(2);
    if (ph > H || pw > W) return image;
    const int th = static_cast<int>(std::floor(uniform01(rng) * (H - ph + 1)));
    const int tw = static_cast<int>(std::floor(uniform01(rng) * (W - pw + 1)));
    Tensor out(image.shape(), image.values_copy());
    for (int c = 0; c < 3; ++c)
        for (int h = 0; h < ph; ++h)
            for (int w = 0; w < pw; ++w)
                out[(static_cast<std::size_t>(c) * H + th + h) * W + tw + w] =
                    patch[(static_cast<std::size_t>(c) * ph + h) * pw + w];
    return out;
}

}  // namespace osnet
