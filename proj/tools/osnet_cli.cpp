// Command-line front end: model accounting, gradient checking, synthetic
// data generation, training, architecture search, derivation, retrieval
// evaluation and activation-map export.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "osnet/checkpoint.hpp"
#include "osnet/eval.hpp"
#include "osnet/gradcheck.hpp"
#include "osnet/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace osnet;

namespace {

json load_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file '" + path + "'");
    try {
        return json::parse(is);
    } catch (const json::parse_error& e) {
        throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
    }
}

void write_json(const std::string& path, const json& j) {
    std::ofstream os(path);
    os << j.dump(1) << "\n";
    if (!os) throw ContractError("failed writing '" + path + "'");
}

// Permissive spec parsing: absent keys keep their defaults, unknown variants
// fail with the key path.
ModelSpec model_spec_from_config(const json& j) {
    ModelSpec spec;
    spec.width_multiplier = j.value("width_multiplier", spec.width_multiplier);
    spec.resolution_multiplier =
        j.value("resolution_multiplier", spec.resolution_multiplier);
    spec.stream_count = j.value("stream_count", spec.stream_count);
    spec.gate_reduction = j.value("gate_reduction", spec.gate_reduction);
    spec.base_height = j.value("base_height", spec.base_height);
    spec.base_width = j.value("base_width", spec.base_width);
    spec.num_classes = j.value("num_classes", spec.num_classes);
    if (j.contains("variants")) {
        const auto& v = j.at("variants");
        if (v.size() != static_cast<std::size_t>(kOsBlockCount)) {
            throw ConfigError("model.variants must list " +
                              std::to_string(kOsBlockCount) + " entries");
        }
        for (int i = 0; i < kOsBlockCount; ++i) {
            spec.variants[i] = candidate_from_name(v[i].get<std::string>());
        }
    }
    return spec;
}

DataConfig data_config_from_json(const json& j) {
    DataConfig cfg;
    cfg.num_identities = j.value("num_identities", cfg.num_identities);
    cfg.train_identities = j.value("train_identities", cfg.train_identities);
    cfg.images_per_identity = j.value("images_per_identity", cfg.images_per_identity);
    cfg.num_cameras = j.value("num_cameras", cfg.num_cameras);
    cfg.height = j.value("height", cfg.height);
    cfg.width = j.value("width", cfg.width);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.train_cameras = j.value("train_cameras", cfg.train_cameras);
    cfg.test_cameras = j.value("test_cameras", cfg.test_cameras);
    if (j.contains("styles")) {
        for (const auto& s : j.at("styles")) {
            StyleProfile style;
            style.scale = s.at("scale").get<std::array<double, 3>>();
            style.shift = s.at("shift").get<std::array<double, 3>>();
            style.noise = s.value("noise", 0.0);
            cfg.styles.push_back(style);
        }
    }
    return cfg;
}

json data_config_to_json(const DataConfig& cfg) {
    json styles = json::array();
    for (const auto& s : cfg.styles) {
        styles.push_back({{"scale", s.scale}, {"shift", s.shift}, {"noise", s.noise}});
    }
    return {{"num_identities", cfg.num_identities},
            {"train_identities", cfg.train_identities},
            {"images_per_identity", cfg.images_per_identity},
            {"num_cameras", cfg.num_cameras},
            {"height", cfg.height},
            {"width", cfg.width},
            {"seed", cfg.seed},
            {"train_cameras", cfg.train_cameras},
            {"test_cameras", cfg.test_cameras},
            {"styles", styles}};
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig cfg;
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.base_lr = j.value("base_lr", cfg.base_lr);
    cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
    cfg.momentum = j.value("momentum", cfg.momentum);
    cfg.label_smoothing = j.value("label_smoothing", cfg.label_smoothing);
    const std::string schedule = j.value("schedule", std::string("cosine"));
    if (schedule == "cosine") {
        cfg.schedule = LrScheduleKind::Cosine;
    } else if (schedule == "step") {
        cfg.schedule = LrScheduleKind::Step;
    } else {
        throw ConfigError("train.schedule must be 'cosine' or 'step'");
    }
    cfg.milestones = j.value("milestones", cfg.milestones);
    cfg.step_decay = j.value("step_decay", cfg.step_decay);
    cfg.frozen_base_epochs = j.value("frozen_base_epochs", cfg.frozen_base_epochs);
    cfg.augment = j.value("augment", cfg.augment);
    cfg.checkpoint_interval = j.value("checkpoint_interval", cfg.checkpoint_interval);
    return cfg;
}

json train_config_to_json(const TrainConfig& cfg) {
    return {{"batch_size", cfg.batch_size},
            {"epochs", cfg.epochs},
            {"base_lr", cfg.base_lr},
            {"weight_decay", cfg.weight_decay},
            {"momentum", cfg.momentum},
            {"label_smoothing", cfg.label_smoothing},
            {"schedule", cfg.schedule == LrScheduleKind::Cosine ? "cosine" : "step"},
            {"milestones", cfg.milestones},
            {"step_decay", cfg.step_decay},
            {"frozen_base_epochs", cfg.frozen_base_epochs},
            {"augment", cfg.augment},
            {"checkpoint_interval", cfg.checkpoint_interval}};
}

SearchConfig search_config_from_json(const json& j) {
    SearchConfig cfg;
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.base_lr = j.value("base_lr", cfg.base_lr);
    cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
    cfg.momentum = j.value("momentum", cfg.momentum);
    cfg.label_smoothing = j.value("label_smoothing", cfg.label_smoothing);
    cfg.sample_count = j.value("sample_count", cfg.sample_count);
    return cfg;
}

json search_config_to_json(const SearchConfig& cfg) {
    return {{"batch_size", cfg.batch_size},
            {"epochs", cfg.epochs},
            {"base_lr", cfg.base_lr},
            {"weight_decay", cfg.weight_decay},
            {"momentum", cfg.momentum},
            {"label_smoothing", cfg.label_smoothing},
            {"sample_count", cfg.sample_count}};
}

void print_count_row(const ModelSpec& spec, int height, int width) {
    const long long params = count_params(spec);
    const long long ma = count_mult_adds(spec, height, width);
    auto [h, w] = scaled_input_extent(spec, height, width);
    std::printf("%6.2f  %6.2f  %4dx%-4d  %11lld  %14lld\n", spec.width_multiplier,
                spec.resolution_multiplier, h, w, params, ma);
}

int cmd_count(double beta, double gamma, int height, int width, bool grid) {
    std::printf("%6s  %6s  %9s  %11s  %14s\n", "beta", "gamma", "input", "params",
                "mult-adds");
    if (!grid) {
        ModelSpec spec;
        spec.width_multiplier = beta;
        spec.resolution_multiplier = gamma;
        print_count_row(spec, height, width);
        return 0;
    }
    for (double b : {1.0, 0.75, 0.5, 0.25}) {
        for (double g : {1.0, 0.75, 0.5, 0.25}) {
            ModelSpec spec;
            spec.width_multiplier = b;
            spec.resolution_multiplier = g;
            print_count_row(spec, height, width);
        }
    }
    ModelSpec base;
    const double base_ma = static_cast<double>(count_mult_adds(base, height, width));
    std::printf("\nmult-add ratios vs gamma=1:");
    for (double g : {0.75, 0.5, 0.25}) {
        ModelSpec spec;
        spec.resolution_multiplier = g;
        std::printf("  %.2f:%.4f", g, count_mult_adds(spec, height, width) / base_ma);
    }
    std::printf("\n");
    return 0;
}

int cmd_gradcheck(const std::string& scope, std::uint64_t seed) {
    std::vector<std::string> scopes;
    if (scope == "all") {
        scopes = {"ops", "block", "model", "supernet"};
    } else {
        scopes = {scope};
    }
    bool ok = true;
    for (const auto& s : scopes) {
        gradcheck::SuiteReport report = gradcheck::run_scope(s, seed);
        int failed = 0;
        double worst = 0.0;
        for (const auto& c : report.checks) {
            if (!c.passed()) {
                ++failed;
                std::printf("  FAIL %-40s rel_err %.3e tol %.0e\n", c.name.c_str(),
                            c.rel_err, c.tolerance);
            }
            worst = std::max(worst, c.rel_err);
        }
        std::printf("%-8s %3zu checks  %d failed  worst rel_err %.3e\n", s.c_str(),
                    report.checks.size(), failed, worst);
        ok = ok && failed == 0;
    }
    return ok ? 0 : 1;
}

int cmd_gen_data(const std::string& config_path, const std::string& out_dir,
                 std::int64_t seed_override) {
    DataConfig cfg = data_config_from_json(load_json(config_path));
    if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
    Dataset ds = generate_dataset(cfg);
    if (ds.config.styles.empty()) {
        for (int cam = 0; cam < cfg.num_cameras; ++cam) {
            ds.config.styles.push_back(default_style(cfg.seed, cam));
        }
    }
    fs::create_directories(out_dir);
    save_dataset(out_dir, ds);
    write_json(out_dir + "/resolved_config.json", data_config_to_json(ds.config));
    std::printf("wrote %zu train / %zu query / %zu gallery images to %s\n",
                ds.train.size(), ds.query.size(), ds.gallery.size(), out_dir.c_str());
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, std::int64_t seed_override) {
    json cfg_json = load_json(config_path);
    TrainConfig cfg = train_config_from_json(cfg_json.value("train", json::object()));
    ModelSpec spec = model_spec_from_config(cfg_json.value("model", json::object()));
    cfg.seed = cfg_json.value("seed", 0ull);
    if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);

    Dataset ds = load_dataset(data_dir);
    if (spec.num_classes == 0) spec.num_classes = ds.num_train_identities;

    fs::create_directories(out_dir);
    json resolved{{"model", model_spec_to_json(spec)},
                  {"train", train_config_to_json(cfg)},
                  {"seed", cfg.seed},
                  {"data", data_dir}};
    write_json(out_dir + "/resolved_config.json", resolved);

    Model model(spec, cfg.seed);
    std::ofstream csv(out_dir + "/metrics.csv");
    TrainResult result = train_classifier(model, ds.train, cfg, &csv, out_dir);
    save_model(out_dir + "/model.ckpt", model, {{"seed", cfg.seed}});
    std::printf("trained %d epochs, final loss %.4f accuracy %.4f; model saved to %s\n",
                cfg.epochs, result.history.back().loss, result.history.back().accuracy,
                (out_dir + "/model.ckpt").c_str());
    return 0;
}

int cmd_search(const std::string& config_path, const std::string& data_dir,
               const std::string& out_dir, std::int64_t seed_override) {
    json cfg_json = load_json(config_path);
    SearchConfig cfg = search_config_from_json(cfg_json.value("search", json::object()));
    ModelSpec spec = model_spec_from_config(cfg_json.value("model", json::object()));
    cfg.seed = cfg_json.value("seed", 0ull);
    if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);

    Dataset ds = load_dataset(data_dir);
    if (spec.num_classes == 0) spec.num_classes = ds.num_train_identities;

    fs::create_directories(out_dir);
    json resolved{{"model", model_spec_to_json(spec)},
                  {"search", search_config_to_json(cfg)},
                  {"seed", cfg.seed},
                  {"data", data_dir}};
    write_json(out_dir + "/resolved_config.json", resolved);

    Supernet net(spec, cfg.seed);
    std::ofstream csv(out_dir + "/search.csv");
    SearchResult result = search_architecture(net, ds.train, cfg, &csv);
    write_container(out_dir + "/supernet.ckpt",
                    {{"model_spec", model_spec_to_json(spec)},
                     {"supernet", true},
                     {"seed", cfg.seed}},
                    net.named_tensors());
    std::printf("search ran %d epochs (final lambda %.2f, loss %.4f); checkpoint %s\n",
                cfg.epochs, result.history.back().temperature,
                result.history.back().loss,
                (out_dir + "/supernet.ckpt").c_str());
    return 0;
}

int cmd_derive(const std::string& checkpoint_path, const std::string& out_path) {
    Container c = read_container(checkpoint_path);
    if (!c.header.value("supernet", false)) {
        throw ConfigError("'" + checkpoint_path + "' is not a search checkpoint");
    }
    ModelSpec base = model_spec_from_json(c.header.at("model_spec"));
    std::vector<ArchParams> arch(kOsBlockCount);
    for (int b = 0; b < kOsBlockCount; ++b) {
        const Tensor& logits = c.tensor("arch" + std::to_string(b) + ".logits");
        arch[b].logits = Tensor(logits.shape(), logits.values_copy());
    }
    ModelSpec derived = derive_architecture(arch, base);
    json out = json::array();
    for (CandidateKind k : derived.variants) out.push_back(candidate_name(k));
    write_json(out_path, out);
    std::printf("derived architecture: %s\n", out.dump().c_str());
    return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& data_dir,
             const std::string& out_path, bool per_query) {
    Model model = load_model(checkpoint_path);
    Dataset ds = load_dataset(data_dir);
    Tensor qf = extract_features(model, ds.query);
    Tensor gf = extract_features(model, ds.gallery);
    RankingResult r =
        evaluate_cmc_map(cosine_distance_matrix(qf, gf), metas_of(ds.query),
                         metas_of(ds.gallery));
    json report{{"R1", r.r1},
                {"R5", r.r5},
                {"R10", r.r10},
                {"mAP", r.mean_ap},
                {"num_queries", ds.query.size()},
                {"num_gallery", ds.gallery.size()},
                {"skipped_queries", r.skipped_queries}};
    if (per_query) report["per_query_ap"] = r.per_query_ap;
    write_json(out_path, report);
    std::printf("R1 %.4f  R5 %.4f  R10 %.4f  mAP %.4f  (report %s)\n", r.r1, r.r5,
                r.r10, r.mean_ap, out_path.c_str());
    return 0;
}

void write_pgm(const std::string& path, const Tensor& map, int sample) {
    const int h = map.dim(2), w = map.dim(3);
    double mx = 0.0;
    const double* m = map.data() + static_cast<std::size_t>(sample) * h * w;
    for (int i = 0; i < h * w; ++i) mx = std::max(mx, m[i]);
    std::ofstream os(path);
    os << "P2\n" << w << " " << h << "\n255\n";
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int v =
                mx > 0.0 ? static_cast<int>(std::lround(255.0 * m[y * w + x] / mx)) : 0;
            os << v << (x + 1 == w ? "" : " ");
        }
        os << "\n";
    }
    if (!os) throw ContractError("failed writing '" + path + "'");
}

int cmd_actmap(const std::string& checkpoint_path, const std::string& data_dir,
               const std::string& split, int count, const std::string& out_dir) {
    Model model = load_model(checkpoint_path);
    Dataset ds = load_dataset(data_dir);
    const std::vector<PersonImage>* images = nullptr;
    if (split == "query") {
        images = &ds.query;
    } else if (split == "gallery") {
        images = &ds.gallery;
    } else if (split == "train") {
        images = &ds.train;
    } else {
        throw ConfigError("split must be train, query or gallery");
    }
    if (images->empty()) throw ConfigError("split '" + split + "' is empty");
    count = std::min<int>(count, static_cast<int>(images->size()));

    fs::create_directories(out_dir);
    const int H = images->front().image.dim(1);
    const int W = images->front().image.dim(2);
    Tensor batch({count, 3, H, W});
    for (int i = 0; i < count; ++i) {
        const Tensor& img = (*images)[i].image;
        std::copy(img.data(), img.data() + img.numel(),
                  batch.data() + static_cast<std::size_t>(i) * img.numel());
    }
    Tensor last_conv;
    model.features(batch, /*training=*/false, &last_conv);
    std::vector<int> zero_samples;
    Tensor maps = activation_map(last_conv, &zero_samples);
    char name[32];
    for (int i = 0; i < count; ++i) {
        std::snprintf(name, sizeof(name), "actmap_%03d.pgm", i);
        write_pgm(out_dir + "/" + std::string(name), maps, i);
    }
    std::printf("wrote %d activation maps (%dx%d) to %s\n", count, maps.dim(3),
                maps.dim(2), out_dir.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Omni-scale network toolbox"};
    app.require_subcommand(1);

    double beta = 1.0, gamma = 1.0;
    int height = 256, width = 128;
    bool grid = false;
    auto* count = app.add_subcommand("count", "print parameter and mult-add counts");
    count->add_option("--beta", beta, "width multiplier");
    count->add_option("--gamma", gamma, "resolution multiplier");
    count->add_option("--height", height, "base input height");
    count->add_option("--width", width, "base input width");
    count->add_flag("--grid", grid, "emit the full multiplier grid");

    std::string scope = "all";
    std::uint64_t seed = 7;
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suites");
    gc->add_option("--scope", scope, "ops|block|model|supernet|all");
    gc->add_option("--seed", seed, "rng seed");

    std::string config_path, data_dir, out_dir = "out";
    std::int64_t seed_override = -1;
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic identity dataset");
    gen->add_option("--config", config_path, "data config JSON")->required();
    gen->add_option("--out", out_dir, "output directory")->required();
    gen->add_option("--seed", seed_override, "seed override");

    std::string train_config, train_data, train_out = "train_out";
    std::int64_t train_seed = -1;
    auto* train = app.add_subcommand("train", "train a model on a dataset");
    train->add_option("--config", train_config, "train config JSON")->required();
    train->add_option("--data", train_data, "dataset directory")->required();
    train->add_option("--out", train_out, "output directory")->required();
    train->add_option("--seed", train_seed, "seed override");

    std::string search_config, search_data, search_out = "search_out";
    std::int64_t search_seed = -1;
    auto* search = app.add_subcommand("search", "differentiable architecture search");
    search->add_option("--config", search_config, "search config JSON")->required();
    search->add_option("--data", search_data, "dataset directory")->required();
    search->add_option("--out", search_out, "output directory")->required();
    search->add_option("--seed", search_seed, "seed override");

    std::string derive_ckpt, derive_out = "architecture.json";
    auto* derive = app.add_subcommand("derive", "derive the argmax architecture");
    derive->add_option("--checkpoint", derive_ckpt, "search checkpoint")->required();
    derive->add_option("--out", derive_out, "output JSON path");

    std::string eval_ckpt, eval_data, eval_out = "report.json";
    bool per_query = false;
    auto* eval = app.add_subcommand("eval", "retrieval evaluation (CMC / mAP)");
    eval->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
    eval->add_option("--data", eval_data, "dataset directory")->required();
    eval->add_option("--out", eval_out, "report JSON path");
    eval->add_flag("--per-query", per_query, "include per-query AP");

    std::string act_ckpt, act_data, act_split = "query", act_out = "actmaps";
    int act_count = 8;
    auto* act = app.add_subcommand("actmap", "export activation maps as PGM");
    act->add_option("--checkpoint", act_ckpt, "model checkpoint")->required();
    act->add_option("--data", act_data, "dataset directory")->required();
    act->add_option("--split", act_split, "train|query|gallery");
    act->add_option("--count", act_count, "number of images");
    act->add_option("--out", act_out, "output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (count->parsed()) return cmd_count(beta, gamma, height, width, grid);
        if (gc->parsed()) return cmd_gradcheck(scope, seed);
        if (gen->parsed()) return cmd_gen_data(config_path, out_dir, seed_override);
        if (train->parsed())
            return cmd_train(train_config, train_data, train_out, train_seed);
        if (search->parsed())
            return cmd_search(search_config, search_data, search_out, search_seed);
        if (derive->parsed()) return cmd_derive(derive_ckpt, derive_out);
        if (eval->parsed()) return cmd_eval(eval_ckpt, eval_data, eval_out, per_query);
        if (act->parsed())
            return cmd_actmap(act_ckpt, act_data, act_split, act_count, act_out);
    } catch (const json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
