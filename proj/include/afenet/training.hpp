#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "afenet/data_io.hpp"
#include "afenet/network.hpp"
#include "afenet/tensor.hpp"

namespace afenet {

// Optimization recipe and loop controls. Defaults follow the reference
// recipe (Adam, lr 6e-4, weight decay 0.01); batch_size 4 is the desk
// default, the reference setting is 8 with 100 batches per epoch.
struct TrainConfig {
  float learning_rate = 6e-4f;
  float weight_decay = 1e-2f;
  // Decoupled decay (p -= lr*wd*p before the Adam delta) unless set; coupled
  // folds wd*p into the gradient instead.
  bool coupled_weight_decay = false;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float adam_epsilon = 1e-8f;
  int batch_size = 4;
  int batches_per_epoch = 100;
  int epochs = 1;
  uint64_t seed = 0;
  float ce_weight = 1.0f;
  float dice_weight = 1.0f;
  float dice_smooth = 1.0f;
  bool augment_flip = true;
  bool augment_scale = true;
  int ignore_index = -1;  // label excluded from the CE mean; -1 disables
  // Checkpoints are written to checkpoint_path every checkpoint_every steps
  // (0 = final only) and once after the last step. Empty path disables both.
  int checkpoint_every = 0;
  std::string checkpoint_path;
  std::string history_path;  // loss CSV, written when non-empty
  int log_every = 0;         // stderr progress cadence in steps; 0 = silent

  int64_t total_steps() const {
    return static_cast<int64_t>(epochs) * batches_per_epoch;
  }
  void validate() const;
};

// First/second Adam moments keyed by canonical parameter name, plus the
// shared step counter. Buffers appear lazily, zero-initialized.
struct AdamState {
  std::map<std::string, Tensor> m, v;
  int64_t step = 0;
};

struct HistoryRow {
  int64_t step = 0;  // 1-based, after the update
  double loss_total = 0.0;
  double loss_ce = 0.0;
  double loss_dice = 0.0;
  double lr = 0.0;
};

// Mean over non-ignored pixels of -log softmax(logits)[label].
// logits (N,K,H,W), labels (N,H,W) with values in [0,K) or ignore_index.
Tensor ce_loss(const Tensor& logits, const IntTensor& labels,
               int ignore_index = -1);

// Class-balanced soft Dice over batch-global per-class sums:
//   1 - (1/K) sum_k (2*inter_k + s) / (pred_k + truth_k + s).
Tensor dice_loss(const Tensor& logits, const IntTensor& labels,
                 float smooth = 1.0f);

// ce_weight * ce + dice_weight * dice (both weights default 1).
Tensor total_loss(const Tensor& logits, const IntTensor& labels,
                  float ce_weight = 1.0f, float dice_weight = 1.0f,
                  float smooth = 1.0f, int ignore_index = -1);

// Handles to every trainable tensor in fixed traversal order.
std::vector<std::pair<std::string, Tensor>> named_params(ModelWeights& w);

// One bias-corrected Adam update over params, consuming each tensor's
// accumulated gradient (absent gradients count as zero). Advances
// state.step; weight decay follows cfg.coupled_weight_decay.
void adam_step(std::vector<std::pair<std::string, Tensor>>& params,
               AdamState& state, const TrainConfig& cfg);

// ---- augmentation helpers (plain data, image (C,H,W), label (H,W)) ----
Tensor resize_bilinear(const Tensor& image, int64_t out_h, int64_t out_w);
IntTensor resize_nearest(const IntTensor& label, int64_t out_h, int64_t out_w);
IntTensor flip_label(const IntTensor& label, bool horizontal);

// Random h/v flips (p = 1/2 each) applied identically to image and label,
// then random scaling in [0.75, 1.25] with a random crop (upscale) or
// edge-replicating placement (downscale) restoring the original size.
// Labels resize by nearest neighbor, so class values are preserved exactly.
void augment(Tensor& image, IntTensor& label, std::mt19937_64& rng,
             bool flips, bool scaling);

// Runs total_steps() - state.step optimization steps (a non-zero incoming
// step counter resumes a run deterministically). Batches walk shuffled
// passes over the dataset (reshuffled every pass), and each augmentation
// stream derives from (seed, global sample index), so the schedule never
// depends on wall clock or thread count. Aborts with a diagnostic when the
// loss leaves the finite range. Returns one history row per executed step.
std::vector<HistoryRow> train(ModelWeights& w, const ModelConfig& mcfg,
                              const std::vector<Sample>& dataset,
                              const TrainConfig& cfg,
                              AdamState* state = nullptr);

// Model + config + step + optimizer moments in one named-tensor table
// ("__opt__.m.<param>" / "__opt__.v.<param>" entries ride alongside the
// model entries; unpack_model ignores them).
Checkpoint pack_training(const ModelWeights& w, const ModelConfig& cfg,
                         const AdamState& state);
AdamState load_opt_state(const Checkpoint& ck);

// "step,loss_total,loss_ce,loss_dice" header plus one row per step.
std::string history_csv(const std::vector<HistoryRow>& rows);

// Mean of logits over {identity, h-flip, v-flip, hv-flip}, each branch
// mapped back to input orientation before averaging. No gradients recorded.
Tensor tta_infer(const Tensor& image, const ModelWeights& w,
                 const ModelConfig& cfg);

}  // namespace afenet
