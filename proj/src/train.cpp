#include "osnet/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>

#include "osnet/checkpoint.hpp"

namespace osnet {

void validate_train_config(const TrainConfig& config) {
    if (config.batch_size < 2) throw ConfigError("batch size must be >= 2");
    if (config.epochs < 1) throw ConfigError("epochs must be >= 1");
    if (config.base_lr <= 0.0) throw ConfigError("base_lr must be positive");
    if (config.weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (config.label_smoothing < 0.0 || config.label_smoothing >= 1.0) {
        throw ConfigError("label smoothing must lie in [0,1)");
    }
    if (config.frozen_base_epochs < 0 || config.frozen_base_epochs > config.epochs) {
        throw ConfigError("frozen_base_epochs out of range");
    }
}

double cosine_lr(int epoch, int total_epochs, double base_lr) {
    if (total_epochs < 1) throw ConfigError("total epochs must be >= 1");
    return base_lr * 0.5 *
           (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) /
                           static_cast<double>(total_epochs)));
}

double step_lr(int epoch, const std::vector<int>& milestones, double decay,
               double base_lr) {
    double lr = base_lr;
    for (int m : milestones) {
        if (epoch >= m) lr *= decay;
    }
    return lr;
}

void sgd_step(Tensor param, const double* grad, std::vector<double>& velocity,
              double lr, double momentum, double weight_decay) {
    const std::size_t n = param.numel();
    if (velocity.size() != n) velocity.assign(n, 0.0);
    double* p = param.data();
    for (std::size_t i = 0; i < n; ++i) {
        const double g = grad[i] + weight_decay * p[i];
        velocity[i] = momentum * velocity[i] + g;
        p[i] -= lr * velocity[i];
    }
}

SgdOptimizer::SgdOptimizer(std::vector<Tensor> params, std::vector<bool> decay_mask)
    : params_(std::move(params)), decay_mask_(std::move(decay_mask)) {
    if (!decay_mask_.empty() && decay_mask_.size() != params_.size()) {
        throw ConfigError("decay mask size must match parameter count");
    }
    velocity_.resize(params_.size());
}

void SgdOptimizer::zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
}

void SgdOptimizer::step(double lr, double momentum, double weight_decay) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const double wd =
            (decay_mask_.empty() || decay_mask_[i]) ? weight_decay : 0.0;
        sgd_step(params_[i], params_[i].grad_data(), velocity_[i], lr, momentum, wd);
    }
}

void SgdOptimizer::step_subset(const std::vector<std::size_t>& active, double lr,
                               double momentum, double weight_decay) {
    for (std::size_t i : active) {
        const double wd =
            (decay_mask_.empty() || decay_mask_[i]) ? weight_decay : 0.0;
        sgd_step(params_.at(i), params_.at(i).grad_data(), velocity_.at(i), lr, momentum,
                 wd);
    }
}

namespace {

struct BatchPlan {
    std::vector<std::vector<int>> batches;
};

// Seeded Fisher-Yates permutation, then fixed-size batches. A trailing
// singleton is dropped (batch statistics need at least two samples).
BatchPlan plan_batches(std::size_t count, int batch_size, std::mt19937_64& rng) {
    std::vector<int> order(count);
    for (std::size_t i = 0; i < count; ++i) order[i] = static_cast<int>(i);
    for (std::size_t i = count; i > 1; --i) {
        const std::size_t j =
            static_cast<std::size_t>(std::floor(uniform01(rng) * i));
        std::swap(order[i - 1], order[std::min(j, i - 1)]);
    }
    BatchPlan plan;
    for (std::size_t start = 0; start < count; start += batch_size) {
        const std::size_t end = std::min(count, start + batch_size);
        if (end - start < 2) break;
        plan.batches.emplace_back(order.begin() + start, order.begin() + end);
    }
    return plan;
}

enum class Augment { None, FlipOnly, Full };

Tensor assemble_batch(const std::vector<PersonImage>& images,
                      const std::vector<int>& indices, std::vector<int>* labels,
                      Augment augment, std::mt19937_64& rng, PatchPool& pool) {
    const int H = images.front().image.dim(1);
    const int W = images.front().image.dim(2);
    const int B = static_cast<int>(indices.size());
    Tensor batch({B, 3, H, W});
    labels->clear();
    for (int i = 0; i < B; ++i) {
        Tensor img = images[indices[i]].image;
        if (augment != Augment::None) {
            img = random_flip(img, rng);
        }
        if (augment == Augment::Full) {
            img = random_crop(img, rng);
            img = random_patch(img, rng, pool);
        }
        std::copy(img.data(), img.data() + img.numel(),
                  batch.data() + static_cast<std::size_t>(i) * img.numel());
        labels->push_back(images[indices[i]].identity);
    }
    return batch;
}

}  // namespace

TrainResult train_classifier(Model& model, const std::vector<PersonImage>& images,
                             const TrainConfig& config, std::ostream* metrics_csv,
                             const std::string& checkpoint_dir) {
    validate_train_config(config);
    if (images.empty()) throw ConfigError("training split is empty");
    if (!model.has_classifier()) throw ConfigError("model has no classifier head");
    int max_label = 0;
    for (const auto& img : images) max_label = std::max(max_label, img.identity);
    if (model.spec().num_classes != max_label + 1) {
        throw ConfigError("classifier width " + std::to_string(model.spec().num_classes) +
                          " does not match the class count " +
                          std::to_string(max_label + 1));
    }

    std::vector<Tensor> params = model.parameters();
    SgdOptimizer optimizer(params);
    std::vector<std::size_t> classifier_indices;
    for (const Tensor& cp : model.classifier_parameters()) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (params[i].same_storage(cp)) classifier_indices.push_back(i);
        }
    }

    std::mt19937_64 rng(config.seed);
    PatchPool pool;
    TrainResult result;
    if (metrics_csv) (*metrics_csv) << "epoch,lr,loss,accuracy\n";

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const double lr = config.schedule == LrScheduleKind::Cosine
                              ? cosine_lr(epoch, config.epochs, config.base_lr)
                              : step_lr(epoch, config.milestones, config.step_decay,
                                        config.base_lr);
        const bool frozen = epoch < config.frozen_base_epochs;
        BatchPlan plan = plan_batches(images.size(), config.batch_size, rng);
        double epoch_loss = 0.0;
        long correct = 0, seen = 0;
        for (const auto& batch_indices : plan.batches) {
            std::vector<int> labels;
            Tensor batch =
                assemble_batch(images, batch_indices, &labels,
                               config.augment ? Augment::Full : Augment::None, rng, pool);
            optimizer.zero_grad();
            Tape tape;
            Tensor logits, loss;
            {
                TapeScope scope(tape);
                logits = model.logits(batch, /*training=*/true);
                loss = label_smoothed_cross_entropy(logits, labels,
                                                    config.label_smoothing);
                tape.backward(loss);
            }
            if (!std::isfinite(loss[0])) {
                if (!checkpoint_dir.empty()) {
                    std::filesystem::create_directories(checkpoint_dir);
                    save_model(checkpoint_dir + "/diagnostic.ckpt", model,
                               {{"aborted_epoch", epoch}});
                }
                throw EvaluationError("non-finite loss at epoch " +
                                      std::to_string(epoch));
            }
            if (frozen) {
                optimizer.step_subset(classifier_indices, lr, config.momentum,
                                      config.weight_decay);
            } else {
                optimizer.step(lr, config.momentum, config.weight_decay);
            }
            epoch_loss += loss[0];
            const int K = logits.dim(1);
            for (std::size_t i = 0; i < labels.size(); ++i) {
                int best = 0;
                for (int k = 1; k < K; ++k) {
                    if (logits[i * K + k] > logits[i * K + best]) best = k;
                }
                correct += best == labels[i];
                ++seen;
            }
        }
        EpochStats stats{epoch, lr, epoch_loss / std::max<std::size_t>(1, plan.batches.size()),
                         seen ? static_cast<double>(correct) / seen : 0.0};
        result.history.push_back(stats);
        if (metrics_csv) {
            (*metrics_csv) << stats.epoch << ',' << stats.lr << ',' << stats.loss << ','
                           << stats.accuracy << '\n';
        }
        if (config.checkpoint_interval > 0 && !checkpoint_dir.empty() &&
            (epoch + 1) % config.checkpoint_interval == 0) {
            std::filesystem::create_directories(checkpoint_dir);
            save_model(checkpoint_dir + "/epoch_" + std::to_string(epoch) + ".ckpt",
                       model, {{"epoch", epoch}});
        }
    }
    return result;
}

void write_search_csv_header(std::ostream& os) {
    os << "epoch,lambda,loss";
    for (int b = 0; b < kOsBlockCount; ++b) {
        for (int k = 0; k < kCandidateCount; ++k) {
            os << ",p" << b << '_' << candidate_name(static_cast<CandidateKind>(k));
        }
    }
    os << '\n';
}

SearchResult search_architecture(Supernet& net, const std::vector<PersonImage>& images,
                                 const SearchConfig& config, std::ostream* metrics_csv) {
    if (config.batch_size < 2) throw ConfigError("batch size must be >= 2");
    if (config.epochs < 1) throw ConfigError("epochs must be >= 1");
    if (config.sample_count < 1) throw ConfigError("sample_count must be >= 1");
    if (images.empty()) throw ConfigError("search split is empty");

    // One optimizer, one step for theta and pi jointly; the architecture
    // logits are exempt from weight decay.
    std::vector<NamedTensor> named = net.named_tensors();
    std::vector<Tensor> params;
    std::vector<bool> decay_mask;
    for (auto& nt : named) {
        if (!nt.trainable) continue;
        params.push_back(nt.tensor);
        decay_mask.push_back(nt.name.rfind("arch", 0) != 0);
    }
    SgdOptimizer optimizer(params, decay_mask);

    std::mt19937_64 rng(config.seed);
    SearchResult result;
    if (metrics_csv) write_search_csv_header(*metrics_csv);

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const double temperature = temperature_schedule(epoch);
        const double lr = cosine_lr(epoch, config.epochs, config.base_lr);
        BatchPlan plan = plan_batches(images.size(), config.batch_size, rng);
        PatchPool pool;  // unused: search augments with flips only
        double epoch_loss = 0.0;
        for (const auto& batch_indices : plan.batches) {
            std::vector<int> labels;
            Tensor batch = assemble_batch(images, batch_indices, &labels,
                                          Augment::FlipOnly, rng, pool);
            optimizer.zero_grad();
            epoch_loss +=
                estimate_gradients(net, batch, labels, config.label_smoothing,
                                   temperature, config.sample_count, rng);
            optimizer.step(lr, config.momentum, config.weight_decay);
        }
        SearchEpochStats stats;
        stats.epoch = epoch;
        stats.temperature = temperature;
        stats.loss = epoch_loss / std::max<std::size_t>(1, plan.batches.size());
        for (int b = 0; b < kOsBlockCount; ++b) {
            stats.probabilities.push_back(net.candidate_probabilities(b));
        }
        result.history.push_back(stats);
        if (metrics_csv) {
            (*metrics_csv) << stats.epoch << ',' << stats.temperature << ','
                           << stats.loss;
            for (const auto& layer : stats.probabilities) {
                for (double p : layer) (*metrics_csv) << ',' << p;
            }
            (*metrics_csv) << '\n';
        }
    }
    return result;
}

}  // namespace osnet
