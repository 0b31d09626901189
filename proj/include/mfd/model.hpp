#pragma once

// CRNN producing frame-wise (strong) and clip-wise (weak) event probabilities.
// The conv stack's block type is swappable among all dynamic conv variants.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mfd/checkpoint.hpp"
#include "mfd/dynconv.hpp"
#include "mfd/tensor.hpp"

namespace mfd::sed {

enum class WeakPoolMode { linear_softmax, max, mean };

const char* weak_pool_name(WeakPoolMode mode);
WeakPoolMode weak_pool_from_name(const std::string& name);

struct ConvBlockConfig {
  std::size_t out_channels = 16;
  std::size_t kernel = 3;
  std::size_t pool_t = 2;
  std::size_t pool_f = 2;
};

struct CRNNConfig {
  std::size_t mel_bins = 128;
  std::vector<ConvBlockConfig> blocks;
  conv::ConvVariantConfig variant;
  std::size_t gru_hidden = 64;
  std::size_t classes = 1;
  WeakPoolMode weak_pool = WeakPoolMode::linear_softmax;
  bool use_batch_norm = true;
  double bn_momentum = 0.99;

  // 3 blocks of 16/32/64 channels with 2x2 pooling; trains in minutes on CPU.
  static CRNNConfig desk_default(std::size_t classes);

  void validate() const;
  // Product of the time pool sizes: input frames per output frame.
  std::size_t time_pool_factor() const;
};

struct Prediction {
  Tensor strong;  // [T', K] per-frame probabilities
  Tensor weak;    // [K] clip probabilities
};

// Pool frame probabilities into clip probabilities. linear_softmax is
// sum(p^2)/sum(p) per class, 0 when a class column is all zero.
Tensor weak_from_strong(const Tensor& strong, WeakPoolMode mode);

// Max-pool frame labels down to the model's output frame rate.
Tensor downsample_labels(const Tensor& labels, std::size_t factor);

struct LabelMask {
  bool strong = false;
  bool weak = false;
};

struct LossResult {
  Tensor value;
  bool warned = false;  // empty mask
};

// Entry-sum plus entry count, for averaging across a batch.
struct LossParts {
  Tensor sum;  // scalar
  std::size_t count = 0;
};

LossParts supervised_loss_parts(const Prediction& pred, const Tensor& strong_labels,
                                const Tensor& weak_labels, LabelMask mask);
// Mean BCE over the labeled entries selected by the mask.
LossResult supervised_loss(const Prediction& pred, const Tensor& strong_labels,
                           const Tensor& weak_labels, LabelMask mask);

class Crnn {
 public:
  Crnn(CRNNConfig cfg, std::uint64_t seed);
  Crnn(const Crnn&) = delete;
  Crnn& operator=(const Crnn&) = delete;

  const CRNNConfig& config() const { return cfg_; }

  // mel: [T, mel_bins]. training toggles batch-norm statistics updates.
  Prediction forward(const Tensor& mel, bool training);

  // Attention maps of one conv block; throws for static-variant blocks.
  conv::FreqAttention attention_maps(const Tensor& mel, std::size_t block_index);

  // Trainable parameters (gradient targets).
  NamedTensorList parameters() const;
  // Trainable parameters plus batch-norm running statistics.
  NamedTensorList state() const;
  // Replace internal tensors with the given ones (shared storage), matched by
  // name. Gradient flags of the existing slots are preserved.
  void adopt_state(const NamedTensorList& incoming);

  std::size_t param_count() const;

 private:
  struct Block {
    conv::DynKernelBank bank;
    std::optional<conv::AttentionHead> head;
    Tensor bn_gamma, bn_beta, bn_mean, bn_var;
  };

  Tensor conv_stack(const Tensor& mel, bool training);
  void register_slots();

  CRNNConfig cfg_;
  std::vector<Block> blocks_;
  GruParams gru_fwd_, gru_bwd_;
  Tensor out_w_, out_b_;
  std::vector<std::pair<std::string, Tensor*>> trainable_slots_;
  std::vector<std::pair<std::string, Tensor*>> state_slots_;
};

}  // namespace mfd::sed
