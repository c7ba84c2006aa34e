#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "filmseg/pipeline.hpp"
#include "filmseg/tensor.hpp"
#include "filmseg/unet.hpp"

namespace filmseg::train {

enum class Optimizer { SgdNesterov, AdamW };

struct TrainConfig {
    Optimizer optimizer = Optimizer::SgdNesterov;
    float learning_rate = 0.01f;
    float momentum = 0.99f;             // SGD-Nesterov only
    float beta1 = 0.9f;                 // AdamW only
    float beta2 = 0.999f;
    float adam_epsilon = 1e-8f;
    float weight_decay = 0.0f;          // SGD couples it into the gradient;
                                        // AdamW applies it directly to weights
    int epochs = 30;
    int batches_per_epoch = 10;
    int batch_size = 2;
    std::array<int, 3> patch_size{32, 32, 32};
    float fg_probability = 0.5f;        // tumor-centered patch share
    float dice_weight = 1.0f;
    float ce_weight = 1.0f;
    bool poly_lr_decay = true;          // lr * (1 - epoch/epochs)^0.9
    int val_max_cases = 0;              // 0 = score every validation case
    uint64_t seed = 0;

    static TrainConfig adamw_defaults();
};

void validate(const TrainConfig& config);

/// 1 - mean over samples of (2*sum(p_fg*y) + eps) / (sum(p_fg) + sum(y) + eps).
/// probs is a softmax output [N,2,D,H,W]; target holds 0/1 labels [N,D,H,W].
/// Only the foreground channel enters the overlap.
Tensor soft_dice_loss(Tape* tape, const Tensor& probs, const Tensor& target,
                      float epsilon = 1e-5f);

/// Mean voxelwise negative log-softmax of the target class, computed through
/// a max-subtracted log-sum-exp. logits [N,C,D,H,W], target labels [N,D,H,W].
Tensor cross_entropy_loss(Tape* tape, const Tensor& logits, const Tensor& target);

struct OptimizerState {
    Optimizer kind = Optimizer::SgdNesterov;
    int64_t step = 0;
    std::vector<std::vector<float>> velocity;  // SGD momentum buffers
    std::vector<std::vector<float>> m, v;      // AdamW moments
};

OptimizerState make_optimizer_state(const TrainConfig& config,
                                    const std::vector<Tensor>& params);

/// One update from the gradients currently stored on params, at the given
/// effective learning rate.
void optimizer_step(const TrainConfig& config, OptimizerState& state,
                    std::vector<Tensor>& params, float lr);

/// Binary round-trip of the full optimizer state.
void save_optimizer_state(const std::string& path, const OptimizerState& state);
OptimizerState load_optimizer_state(const std::string& path);

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double val_dice = 0.0;
    double lr = 0.0;
};

void save_history_csv(const std::string& path, const std::vector<EpochStats>& history);
std::vector<EpochStats> load_history_csv(const std::string& path);

struct TrainResult {
    unet::ModelParams model;       // parameters after the final epoch
    unet::ModelParams best_model;  // parameters at the best validation Dice
    std::vector<EpochStats> history;
    double best_val_dice = 0.0;
    int best_epoch = 0;
};

/// Full run: loads the manifest's train/val studies from data_dir, samples
/// foreground-biased triplet patches, accumulates per-sample gradients into
/// batch means, steps the optimizer, and scores validation Dice after every
/// epoch. When out_dir is nonempty, writes best.ckpt, last.ckpt, and
/// history.csv there. Identical inputs give bit-identical results.
TrainResult train(const std::string& data_dir, const pipeline::Manifest& manifest,
                  const unet::ArchitectureConfig& arch, const TrainConfig& config,
                  const std::string& out_dir = "");

}  // namespace filmseg::train
