#include "mfd/model.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_map>

namespace mfd::sed {

const char* weak_pool_name(WeakPoolMode mode) {
  switch (mode) {
    case WeakPoolMode::linear_softmax: return "linear_softmax";
    case WeakPoolMode::max: return "max";
    case WeakPoolMode::mean: return "mean";
  }
  return "?";
}

WeakPoolMode weak_pool_from_name(const std::string& name) {
  if (name == "linear_softmax") return WeakPoolMode::linear_softmax;
  if (name == "max") return WeakPoolMode::max;
  if (name == "mean") return WeakPoolMode::mean;
  throw std::invalid_argument("unknown weak pooling mode: " + name);
}

CRNNConfig CRNNConfig::desk_default(std::size_t classes) {
  CRNNConfig cfg;
  cfg.blocks = {{16, 3, 2, 2}, {32, 3, 2, 2}, {64, 3, 2, 2}};
  cfg.gru_hidden = 64;
  cfg.classes = classes;
  return cfg;
}

void CRNNConfig::validate() const {
  if (classes == 0) throw std::invalid_argument("crnn config: class count must be >= 1");
  if (blocks.empty()) throw std::invalid_argument("crnn config: need at least one conv block");
  if (mel_bins == 0) throw std::invalid_argument("crnn config: mel_bins must be >= 1");
  if (gru_hidden == 0) throw std::invalid_argument("crnn config: gru hidden size must be >= 1");
  variant.validate();
  std::size_t f = mel_bins;
  for (const auto& b : blocks) {
    if (b.out_channels == 0 || b.kernel % 2 == 0)
      throw std::invalid_argument("crnn config: bad conv block (channels or even kernel)");
    if (f / b.pool_f == 0)
      throw std::invalid_argument("crnn config: frequency axis pooled away mid-stack");
    f /= b.pool_f;
  }
}

std::size_t CRNNConfig::time_pool_factor() const {
  std::size_t factor = 1;
  for (const auto& b : blocks) factor *= b.pool_t;
  return factor;
}

Tensor weak_from_strong(const Tensor& strong, WeakPoolMode mode) {
  if (strong.rank() != 2)
    throw std::invalid_argument("weak_from_strong: expected [T,K] input, got " +
                                shape_str(strong.shape()));
  switch (mode) {
    case WeakPoolMode::linear_softmax: {
      Tensor s2 = reduce_sum(mul(strong, strong), 0);
      Tensor s1 = reduce_sum(strong, 0);
      return safe_div(s2, s1);
    }
    case WeakPoolMode::max: return reduce_max(strong, 0);
    case WeakPoolMode::mean: return reduce_mean(strong, 0);
  }
  throw std::logic_error("unreachable");
}

Tensor downsample_labels(const Tensor& labels, std::size_t factor) {
  if (labels.rank() != 2) throw std::invalid_argument("downsample_labels: expected [T,K]");
  if (factor <= 1) return labels.clone();
  const std::size_t t_in = labels.shape()[0], k = labels.shape()[1];
  const std::size_t t_out = t_in / factor;
  if (t_out == 0) throw std::invalid_argument("downsample_labels: factor exceeds frame count");
  Tensor out({t_out, k}, 0.0);
  const auto& lv = labels.values();
  auto& ov = out.mutable_values();
  for (std::size_t t = 0; t < t_out; ++t)
    for (std::size_t a = 0; a < factor; ++a)
      for (std::size_t c = 0; c < k; ++c)
        ov[t * k + c] = std::max(ov[t * k + c], lv[(t * factor + a) * k + c]);
  return out;
}

LossParts supervised_loss_parts(const Prediction& pred, const Tensor& strong_labels,
                                const Tensor& weak_labels, LabelMask mask) {
  LossParts parts;
  parts.sum = Tensor::scalar(0.0);
  if (mask.strong) {
    if (strong_labels.shape() != pred.strong.shape())
      throw std::invalid_argument("supervised_loss: strong label shape " +
                                  shape_str(strong_labels.shape()) + " != prediction " +
                                  shape_str(pred.strong.shape()));
    parts.sum = add(parts.sum, bce_loss(pred.strong, strong_labels,
                                        Tensor::ones(strong_labels.shape()), 1.0));
    parts.count += strong_labels.size();
  }
  if (mask.weak) {
    if (weak_labels.shape() != pred.weak.shape())
      throw std::invalid_argument("supervised_loss: weak label shape " +
                                  shape_str(weak_labels.shape()) + " != prediction " +
                                  shape_str(pred.weak.shape()));
    parts.sum = add(parts.sum, bce_loss(pred.weak, weak_labels,
                                        Tensor::ones(weak_labels.shape()), 1.0));
    parts.count += weak_labels.size();
  }
  return parts;
}

LossResult supervised_loss(const Prediction& pred, const Tensor& strong_labels,
                           const Tensor& weak_labels, LabelMask mask) {
  LossParts parts = supervised_loss_parts(pred, strong_labels, weak_labels, mask);
  if (parts.count == 0) return {Tensor::scalar(0.0), true};
  return {scale(parts.sum, 1.0 / static_cast<double>(parts.count)), false};
}

// ---------------------------------------------------------------------------
// Crnn
// ---------------------------------------------------------------------------

Crnn::Crnn(CRNNConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  std::size_t c_in = 1;
  blocks_.reserve(cfg_.blocks.size());
  for (const auto& bc : cfg_.blocks) {
    Block blk;
    blk.bank = conv::DynKernelBank::init(cfg_.variant.kernel_count, bc.out_channels, c_in,
                                         bc.kernel, rng);
    if (cfg_.variant.is_dynamic())
      blk.head = conv::AttentionHead::init(cfg_.variant, c_in, bc.out_channels, rng);
    blk.bn_gamma = Tensor::ones({bc.out_channels}, true);
    blk.bn_beta = Tensor::zeros({bc.out_channels}, true);
    blk.bn_mean = Tensor::zeros({bc.out_channels});
    blk.bn_var = Tensor::ones({bc.out_channels});
    blocks_.push_back(std::move(blk));
    c_in = bc.out_channels;
  }
  gru_fwd_ = GruParams::init(c_in, cfg_.gru_hidden, rng);
  gru_bwd_ = GruParams::init(c_in, cfg_.gru_hidden, rng);
  const std::size_t d = 2 * cfg_.gru_hidden;
  out_w_ = Tensor::uniform({d, cfg_.classes}, std::sqrt(1.0 / static_cast<double>(d)), rng, true);
  out_b_ = Tensor::zeros({1, cfg_.classes}, true);
  register_slots();
}

void Crnn::register_slots() {
  auto add = [&](const std::string& name, Tensor& t, bool trainable) {
    if (trainable) trainable_slots_.emplace_back(name, &t);
    state_slots_.emplace_back(name, &t);
  };
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string p = "block" + std::to_string(i) + ".";
    Block& b = blocks_[i];
    add(p + "kernels", b.bank.kernels, true);
    add(p + "bias", b.bank.bias, true);
    if (b.head) {
      add(p + "attn.stem_w", b.head->stem_w, true);
      add(p + "attn.stem_b", b.head->stem_b, true);
      if (b.head->kernel_w.defined()) {
        add(p + "attn.kernel_w", b.head->kernel_w, true);
        add(p + "attn.kernel_b", b.head->kernel_b, true);
      }
      if (b.head->out_w.defined()) {
        add(p + "attn.out_w", b.head->out_w, true);
        add(p + "attn.out_b", b.head->out_b, true);
      }
      if (b.head->in_w.defined()) {
        add(p + "attn.in_w", b.head->in_w, true);
        add(p + "attn.in_b", b.head->in_b, true);
      }
    }
    add(p + "bn.gamma", b.bn_gamma, true);
    add(p + "bn.beta", b.bn_beta, true);
    add(p + "bn.running_mean", b.bn_mean, false);
    add(p + "bn.running_var", b.bn_var, false);
  }
  auto add_gru = [&](const std::string& p, GruParams& g) {
    add(p + "update_w", g.update_w, true);
    add(p + "update_u", g.update_u, true);
    add(p + "update_b", g.update_b, true);
    add(p + "reset_w", g.reset_w, true);
    add(p + "reset_u", g.reset_u, true);
    add(p + "reset_b", g.reset_b, true);
    add(p + "cand_w", g.cand_w, true);
    add(p + "cand_u", g.cand_u, true);
    add(p + "cand_b", g.cand_b, true);
  };
  add_gru("gru.fwd.", gru_fwd_);
  add_gru("gru.bwd.", gru_bwd_);
  add("out.w", out_w_, true);
  add("out.b", out_b_, true);
}

Tensor Crnn::conv_stack(const Tensor& mel, bool training) {
  if (mel.rank() != 2 || mel.shape()[1] != cfg_.mel_bins)
    throw std::invalid_argument("crnn: expected [T," + std::to_string(cfg_.mel_bins) +
                                "] features, got " + shape_str(mel.shape()));
  Tensor x = reshape(mel, Shape{mel.shape()[0], cfg_.mel_bins, 1});
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    Block& b = blocks_[i];
    const auto& bc = cfg_.blocks[i];
    Tensor y = conv::dynamic_conv_forward(x, b.bank, b.head ? &*b.head : nullptr, cfg_.variant);
    if (cfg_.use_batch_norm)
      y = batch_norm(y, b.bn_gamma, b.bn_beta, b.bn_mean, b.bn_var, cfg_.bn_momentum, 1e-5,
                     training);
    y = relu(y);
    x = avg_pool2d(y, bc.pool_t, bc.pool_f);
  }
  return reduce_mean(x, 1);  // frequency fully pooled before the recurrent stage
}

Prediction Crnn::forward(const Tensor& mel, bool training) {
  Tensor seq = conv_stack(mel, training);
  Tensor h = bigru_forward(seq, gru_fwd_, gru_bwd_);
  Tensor strong = sigmoid(add_bias(matmul(h, out_w_), reshape(out_b_, Shape{cfg_.classes})));
  Prediction pred;
  pred.strong = strong;
  pred.weak = weak_from_strong(strong, cfg_.weak_pool);
  return pred;
}

conv::FreqAttention Crnn::attention_maps(const Tensor& mel, std::size_t block_index) {
  if (block_index >= blocks_.size())
    throw std::invalid_argument("attention_maps: block " + std::to_string(block_index) +
                                " out of range (model has " + std::to_string(blocks_.size()) +
                                " blocks)");
  if (!cfg_.variant.is_dynamic())
    throw std::invalid_argument("attention_maps: block " + std::to_string(block_index) +
                                " uses the static variant and has no attention maps");
  Tensor x = reshape(mel, Shape{mel.shape()[0], cfg_.mel_bins, 1});
  for (std::size_t i = 0; i < block_index; ++i) {
    Block& b = blocks_[i];
    const auto& bc = cfg_.blocks[i];
    Tensor y = conv::dynamic_conv_forward(x, b.bank, b.head ? &*b.head : nullptr, cfg_.variant);
    if (cfg_.use_batch_norm)
      y = batch_norm(y, b.bn_gamma, b.bn_beta, b.bn_mean, b.bn_var, cfg_.bn_momentum, 1e-5,
                     false);
    y = relu(y);
    x = avg_pool2d(y, bc.pool_t, bc.pool_f);
  }
  return conv::compute_attentions(x, *blocks_[block_index].head, cfg_.variant);
}

NamedTensorList Crnn::parameters() const {
  NamedTensorList out;
  out.reserve(trainable_slots_.size());
  for (const auto& [name, t] : trainable_slots_) out.emplace_back(name, *t);
  return out;
}

NamedTensorList Crnn::state() const {
  NamedTensorList out;
  out.reserve(state_slots_.size());
  for (const auto& [name, t] : state_slots_) out.emplace_back(name, *t);
  return out;
}

void Crnn::adopt_state(const NamedTensorList& incoming) {
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : incoming) by_name[name] = &t;
  for (auto& [name, slot] : state_slots_) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::invalid_argument("adopt_state: missing tensor '" + name + "'");
    if (it->second->shape() != slot->shape())
      throw std::invalid_argument("adopt_state: shape mismatch for '" + name + "': " +
                                  shape_str(it->second->shape()) + " vs " +
                                  shape_str(slot->shape()));
    const bool req = slot->requires_grad();
    *slot = *it->second;
    slot->set_requires_grad(req);
  }
}

std::size_t Crnn::param_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : trainable_slots_) n += t->size();
  return n;
}

}  // namespace mfd::sed
