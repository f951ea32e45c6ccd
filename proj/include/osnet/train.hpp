#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "osnet/data.hpp"
#include "osnet/model.hpp"
#include "osnet/nas.hpp"

namespace osnet {

enum class LrScheduleKind { Cosine, Step };

struct TrainConfig {
    int batch_size = 32;
    int epochs = 100;
    double base_lr = 0.065;
    double weight_decay = 5e-4;
    double momentum = 0.9;
    double label_smoothing = 0.1;
    LrScheduleKind schedule = LrScheduleKind::Cosine;
    std::vector<int> milestones{150, 225, 300};
    double step_decay = 0.1;
    int frozen_base_epochs = 0;  // classifier-only warmup
    std::uint64_t seed = 0;
    bool augment = true;  // random flip + crop + patch
    int checkpoint_interval = 0;  // epochs between checkpoints; 0 = none
};

void validate_train_config(const TrainConfig& config);

// lr(e) = base * 0.5 * (1 + cos(pi * e / epochs)), no restarts
double cosine_lr(int epoch, int total_epochs, double base_lr);
// base * decay^(milestones passed)
double step_lr(int epoch, const std::vector<int>& milestones, double decay,
               double base_lr);

// Classic momentum with L2 decay folded into the gradient:
//   v <- momentum * v + (g + wd * p);  p <- p - lr * v
void sgd_step(Tensor param, const double* grad, std::vector<double>& velocity,
              double lr, double momentum, double weight_decay);

class SgdOptimizer {
  public:
    SgdOptimizer() = default;
    // decay_mask marks parameters that receive weight decay; empty = all.
    explicit SgdOptimizer(std::vector<Tensor> params,
                          std::vector<bool> decay_mask = {});
    void zero_grad();
    void step(double lr, double momentum, double weight_decay);
    // Updates only the listed parameter indices (velocity elsewhere is
    // untouched, so frozen tensors stay bitwise identical).
    void step_subset(const std::vector<std::size_t>& active, double lr, double momentum,
                     double weight_decay);
    std::size_t size() const { return params_.size(); }

  private:
    std::vector<Tensor> params_;
    std::vector<bool> decay_mask_;
    std::vector<std::vector<double>> velocity_;
};

struct EpochStats {
    int epoch;
    double lr;
    double loss;
    double accuracy;
};

struct TrainResult {
    std::vector<EpochStats> history;
};

// Supervised identity classification over the train split. Labels are the
// identity ids, which the generator keeps in [0, num_train_identities).
// Writes one CSV row per epoch (epoch,lr,loss,accuracy) when a stream is
// given. A NaN loss aborts with a diagnostic checkpoint in `checkpoint_dir`.
TrainResult train_classifier(Model& model, const std::vector<PersonImage>& images,
                             const TrainConfig& config, std::ostream* metrics_csv = nullptr,
                             const std::string& checkpoint_dir = "");

struct SearchConfig {
    int batch_size = 32;
    int epochs = 45;
    double base_lr = 0.1;
    double weight_decay = 5e-4;
    double momentum = 0.9;
    double label_smoothing = 0.1;
    int sample_count = 1;  // Monte-Carlo draws per step
    std::uint64_t seed = 0;
};

struct SearchEpochStats {
    int epoch;
    double temperature;
    double loss;
    std::vector<std::array<double, kCandidateCount>> probabilities;  // per layer
};

struct SearchResult {
    std::vector<SearchEpochStats> history;
};

// Joint SGD over model weights and architecture logits with the annealed
// Gumbel-Softmax temperature schedule. CSV rows: epoch,lambda,loss, then
// softmax(pi) per layer and candidate.
SearchResult search_architecture(Supernet& net, const std::vector<PersonImage>& images,
                                 const SearchConfig& config,
                                 std::ostream* metrics_csv = nullptr);

void write_search_csv_header(std::ostream& os);

}  // namespace osnet
