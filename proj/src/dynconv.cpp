#include "mfd/dynconv.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace mfd::conv {

const char* variant_name(ConvVariant v) {
  switch (v) {
    case ConvVariant::static_kernel: return "static";
    case ConvVariant::dyconv: return "dyconv";
    case ConvVariant::fdconv: return "fdconv";
    case ConvVariant::odconv: return "odconv";
    case ConvVariant::mfdconv: return "mfdconv";
  }
  return "?";
}

ConvVariant variant_from_name(const std::string& name) {
  if (name == "static") return ConvVariant::static_kernel;
  if (name == "dyconv") return ConvVariant::dyconv;
  if (name == "fdconv") return ConvVariant::fdconv;
  if (name == "odconv") return ConvVariant::odconv;
  if (name == "mfdconv") return ConvVariant::mfdconv;
  throw std::invalid_argument("unknown conv variant: " + name);
}

ConvVariantConfig ConvVariantConfig::for_variant(ConvVariant v, std::size_t n, std::size_t r) {
  ConvVariantConfig cfg;
  cfg.variant = v;
  cfg.kernel_count = n;
  cfg.reduction = r;
  switch (v) {
    case ConvVariant::static_kernel:
      cfg.kernel_count = 1;
      cfg.enable_in_gate = cfg.enable_out_gate = cfg.enable_kernel_attn = false;
      break;
    case ConvVariant::dyconv:
    case ConvVariant::fdconv:
      cfg.enable_in_gate = cfg.enable_out_gate = false;
      cfg.enable_kernel_attn = true;
      break;
    case ConvVariant::odconv:
    case ConvVariant::mfdconv:
      cfg.enable_in_gate = cfg.enable_out_gate = cfg.enable_kernel_attn = true;
      break;
  }
  return cfg;
}

void ConvVariantConfig::validate() const {
  if (kernel_count == 0) throw std::invalid_argument("conv config: kernel count must be >= 1");
  if (reduction == 0) throw std::invalid_argument("conv config: reduction must be >= 1");
  if (stem_kernel_size % 2 == 0 || branch_kernel_size % 2 == 0)
    throw std::invalid_argument("conv config: attention conv kernel sizes must be odd");
  if (!(softmax_temperature > 0.0))
    throw std::invalid_argument("conv config: softmax temperature must be positive");
  if (variant == ConvVariant::static_kernel) {
    if (kernel_count != 1 || enable_in_gate || enable_out_gate || enable_kernel_attn)
      throw std::invalid_argument(
          "conv config: static variant forces kernel_count=1 and all attention switches off");
  }
}

DynKernelBank DynKernelBank::init(std::size_t n, std::size_t c_out, std::size_t c_in,
                                  std::size_t k, Rng& rng) {
  if (n == 0) throw std::invalid_argument("kernel bank: n must be >= 1");
  if (k % 2 == 0) throw std::invalid_argument("kernel bank: spatial size must be odd");
  const double bound = std::sqrt(1.0 / static_cast<double>(c_in * k * k));
  DynKernelBank bank;
  bank.kernels = Tensor::uniform({n, c_out, c_in, k, k}, bound, rng, true);
  bank.bias = Tensor::zeros({c_out}, true);
  return bank;
}

void DynKernelBank::validate() const {
  if (kernels.rank() != 5)
    throw std::invalid_argument("kernel bank: kernels must be [n,c_out,c_in,k,k]");
  if (kernel_count() == 0) throw std::invalid_argument("kernel bank: n must be >= 1");
  if (spatial_size() % 2 == 0 || kernels.shape()[4] != spatial_size())
    throw std::invalid_argument("kernel bank: spatial size must be odd and square");
  if (bias.size() != out_channels())
    throw std::invalid_argument("kernel bank: bias size does not match output channels");
  if (!kernels.all_finite() || !bias.all_finite())
    throw std::invalid_argument("kernel bank: non-finite parameter values");
}

namespace {

std::size_t squeeze_channels(std::size_t c_in, std::size_t reduction) {
  return std::max<std::size_t>(1, c_in / reduction);
}

}  // namespace

AttentionHead AttentionHead::init(const ConvVariantConfig& cfg, std::size_t c_in,
                                  std::size_t c_out, Rng& rng) {
  cfg.validate();
  const std::size_t c_mid = squeeze_channels(c_in, cfg.reduction);
  const std::size_t sk = cfg.stem_kernel_size;
  const std::size_t bk = cfg.branch_kernel_size;
  AttentionHead head;
  head.out_channels = c_out;
  head.stem_w = Tensor::uniform({c_mid, c_in, sk}, std::sqrt(1.0 / static_cast<double>(c_in * sk)),
                                rng, true);
  head.stem_b = Tensor::zeros({c_mid}, true);
  const double bb = std::sqrt(1.0 / static_cast<double>(c_mid * bk));
  if (cfg.enable_kernel_attn) {
    head.kernel_w = Tensor::uniform({cfg.kernel_count, c_mid, bk}, bb, rng, true);
    head.kernel_b = Tensor::zeros({cfg.kernel_count}, true);
  }
  if (cfg.enable_out_gate) {
    head.out_w = Tensor::uniform({c_out, c_mid, bk}, bb, rng, true);
    head.out_b = Tensor::zeros({c_out}, true);
  }
  if (cfg.enable_in_gate) {
    head.in_w = Tensor::uniform({c_in, c_mid, bk}, bb, rng, true);
    head.in_b = Tensor::zeros({c_in}, true);
  }
  return head;
}

std::size_t head_param_count(const ConvVariantConfig& cfg, std::size_t c_in, std::size_t c_out) {
  if (!cfg.is_dynamic()) return 0;
  const std::size_t c_mid = squeeze_channels(c_in, cfg.reduction);
  std::size_t count = c_mid * c_in * cfg.stem_kernel_size + c_mid;
  const std::size_t bk = cfg.branch_kernel_size;
  if (cfg.enable_kernel_attn) count += cfg.kernel_count * c_mid * bk + cfg.kernel_count;
  if (cfg.enable_out_gate) count += c_out * c_mid * bk + c_out;
  if (cfg.enable_in_gate) count += c_in * c_mid * bk + c_in;
  return count;
}

namespace {

Tensor normalize_branch(const Tensor& z, BranchNorm norm, double temperature) {
  if (norm == BranchNorm::softmax) {
    const Tensor scaled = (temperature == 1.0) ? z : scale(z, 1.0 / temperature);
    return softmax(scaled, 1);
  }
  return sigmoid(z);
}

// Per-channel standardization with detached statistics.
Tensor standardize_columns(const Tensor& pooled) {
  const std::size_t rows = pooled.shape()[0], c = pooled.shape()[1];
  std::vector<double> mean(c, 0.0), var(c, 0.0);
  const auto& v = pooled.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < c; ++i) mean[i] += v[r * c + i];
  for (std::size_t i = 0; i < c; ++i) mean[i] /= static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < c; ++i) {
      const double d = v[r * c + i] - mean[i];
      var[i] += d * d;
    }
  std::vector<double> shift(rows * c), iscale(rows * c);
  for (std::size_t i = 0; i < c; ++i) {
    const double inv = 1.0 / std::sqrt(var[i] / static_cast<double>(rows) + 1e-8);
    for (std::size_t r = 0; r < rows; ++r) {
      shift[r * c + i] = -mean[i];
      iscale[r * c + i] = inv;
    }
  }
  return mul(add(pooled, Tensor(pooled.shape(), std::move(shift))),
             Tensor(pooled.shape(), std::move(iscale)));
}

}  // namespace

FreqAttention compute_attentions(const Tensor& x, const AttentionHead& head,
                                 const ConvVariantConfig& cfg) {
  if (x.rank() != 3)
    throw std::invalid_argument("compute_attentions: expected [T,F,C] input, got " +
                                shape_str(x.shape()));
  if (x.shape()[2] != head.in_channels())
    throw std::invalid_argument("compute_attentions: input channels " +
                                std::to_string(x.shape()[2]) + " do not match head channels " +
                                std::to_string(head.in_channels()));
  const std::size_t n = cfg.kernel_count;

  Tensor pooled = reduce_mean(x, 0);  // [F, c_in]
  if (cfg.frequency_global()) pooled = reduce_mean(pooled, 0, /*keepdim=*/true);
  if (cfg.standardize_attn_input) pooled = standardize_columns(pooled);
  const std::size_t rows = pooled.shape()[0];

  Tensor h = relu(conv1d(pooled, head.stem_w, head.stem_b, Padding::same));

  FreqAttention attn;
  if (cfg.enable_kernel_attn) {
    attn.kernel_weights = normalize_branch(conv1d(h, head.kernel_w, head.kernel_b, Padding::same),
                                           cfg.kernel_norm, cfg.softmax_temperature);
  } else {
    attn.kernel_weights = Tensor::ones({rows, n});
  }
  if (cfg.enable_out_gate) {
    attn.out_gates = normalize_branch(conv1d(h, head.out_w, head.out_b, Padding::same),
                                      cfg.gate_norm, cfg.softmax_temperature);
  } else {
    attn.out_gates = Tensor::ones({rows, head.out_channels});
  }
  if (cfg.enable_in_gate) {
    attn.in_gates = normalize_branch(conv1d(h, head.in_w, head.in_b, Padding::same),
                                     cfg.gate_norm, cfg.softmax_temperature);
  } else {
    attn.in_gates = Tensor::ones({rows, x.shape()[2]});
  }
  return attn;
}

Tensor assemble_effective_kernel(const DynKernelBank& bank, const FreqAttention& attn,
                                 std::size_t f) {
  const std::size_t rows = attn.rows();
  if (f >= rows)
    throw std::out_of_range("assemble_effective_kernel: frequency index " + std::to_string(f) +
                            " out of range [0, " + std::to_string(rows) + ")");
  if (attn.kernel_weights.shape()[1] != bank.kernel_count())
    throw std::invalid_argument("assemble_effective_kernel: kernel weight width mismatch");

  Tensor mix = reshape(slice(attn.kernel_weights, 0, f, 1), Shape{bank.kernel_count()});
  Tensor kernel = blend_first_axis(bank.kernels, mix);  // [c_out, c_in, k, k]
  if (attn.out_gates.defined()) {
    Tensor row = reshape(slice(attn.out_gates, 0, f, 1), Shape{bank.out_channels()});
    kernel = scale_axis(kernel, 0, row);
  }
  if (attn.in_gates.defined()) {
    Tensor row = reshape(slice(attn.in_gates, 0, f, 1), Shape{bank.in_channels()});
    kernel = scale_axis(kernel, 1, row);
  }
  return kernel;
}

namespace {

// Maps with one row broadcast to the input's frequency axis.
Tensor broadcast_map(const Tensor& map, std::size_t freq_bins) {
  if (!map.defined()) return map;
  if (map.shape()[0] == freq_bins) return map;
  if (map.shape()[0] == 1) return repeat_rows(reshape(map, Shape{map.size()}), freq_bins);
  throw std::invalid_argument("attention map rows do not match frequency bins");
}

}  // namespace

Tensor mfdconv_apply(const Tensor& x, const DynKernelBank& bank, const FreqAttention& attn,
                     const ConvVariantConfig& cfg) {
  bank.validate();
  if (x.rank() != 3)
    throw std::invalid_argument("mfdconv: expected [T,F,C] input, got " + shape_str(x.shape()));
  if (x.shape()[2] != bank.in_channels())
    throw std::invalid_argument("mfdconv: input channels " + std::to_string(x.shape()[2]) +
                                " do not match kernel bank (" +
                                std::to_string(bank.in_channels()) + ")");
  const std::size_t t_len = x.shape()[0], freq = x.shape()[1];
  const std::size_t n = bank.kernel_count(), c_out = bank.out_channels();
  const std::size_t c_in = bank.in_channels(), k = bank.spatial_size();

  Tensor cols = im2col(x, k, Padding::same);  // [T*F, c_in*k*k]
  // Input-channel gates are indexed by the OUTPUT frequency row: they scale
  // the unfolded patch, not the raw input, because the receptive field spans
  // neighboring frequencies.
  if (cfg.enable_in_gate) {
    Tensor gates = broadcast_map(attn.in_gates, freq);
    cols = scale_freq_groups(cols, gates, freq, k * k);
  }
  std::vector<Tensor> mixed_parts;
  mixed_parts.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor w_i = reshape(slice(bank.kernels, 0, i, 1), Shape{c_out, c_in * k * k});
    mixed_parts.push_back(matmul_nt(cols, w_i));  // [T*F, c_out]
  }
  Tensor mixed;
  if (cfg.enable_kernel_attn) {
    mixed = mix_over_banks(mixed_parts, broadcast_map(attn.kernel_weights, freq), freq);
  } else if (n == 1) {
    mixed = mixed_parts[0];
  } else {
    mixed = mix_over_banks(mixed_parts, Tensor::ones({freq, n}), freq);
  }
  if (cfg.enable_out_gate) {
    Tensor gates = broadcast_map(attn.out_gates, freq);
    mixed = scale_freq_groups(mixed, gates, freq, 1);
  }
  return reshape(add_bias(mixed, bank.bias), Shape{t_len, freq, c_out});
}

Tensor mfdconv_forward(const Tensor& x, const DynKernelBank& bank, const AttentionHead& head,
                       const ConvVariantConfig& cfg) {
  return mfdconv_apply(x, bank, compute_attentions(x, head, cfg), cfg);
}

Tensor dyconv_forward(const Tensor& x, const DynKernelBank& bank, const AttentionHead& head,
                      const ConvVariantConfig& cfg) {
  bank.validate();
  FreqAttention attn = compute_attentions(x, head, cfg);
  Tensor mix = reshape(attn.kernel_weights, Shape{bank.kernel_count()});
  Tensor kernel = blend_first_axis(bank.kernels, mix);
  return conv2d(x, kernel, bank.bias, Padding::same);
}

Tensor odconv_forward(const Tensor& x, const DynKernelBank& bank, const AttentionHead& head,
                      const ConvVariantConfig& cfg) {
  bank.validate();
  FreqAttention attn = compute_attentions(x, head, cfg);
  Tensor mix = reshape(attn.kernel_weights, Shape{bank.kernel_count()});
  Tensor kernel = blend_first_axis(bank.kernels, mix);
  if (attn.out_gates.defined())
    kernel = scale_axis(kernel, 0, reshape(attn.out_gates, Shape{bank.out_channels()}));
  if (attn.in_gates.defined())
    kernel = scale_axis(kernel, 1, reshape(attn.in_gates, Shape{bank.in_channels()}));
  return conv2d(x, kernel, bank.bias, Padding::same);
}

Tensor dynamic_conv_forward(const Tensor& x, const DynKernelBank& bank,
                            const AttentionHead* head, const ConvVariantConfig& cfg) {
  cfg.validate();
  if (cfg.variant == ConvVariant::static_kernel) {
    bank.validate();
    Tensor kernel = reshape(slice(bank.kernels, 0, 0, 1),
                            Shape{bank.out_channels(), bank.in_channels(), bank.spatial_size(),
                                  bank.spatial_size()});
    return conv2d(x, kernel, bank.bias, Padding::same);
  }
  if (!head) throw std::invalid_argument("dynamic variant requires an attention head");
  switch (cfg.variant) {
    case ConvVariant::dyconv: return dyconv_forward(x, bank, *head, cfg);
    case ConvVariant::odconv: return odconv_forward(x, bank, *head, cfg);
    default: return mfdconv_forward(x, bank, *head, cfg);
  }
}

std::string attention_csv(const FreqAttention& attn, const ConvVariantConfig& cfg,
                          std::size_t freq_bins) {
  std::ostringstream os;
  os.precision(10);
  os << "freq";
  const std::size_t n = attn.kernel_weights.defined() ? attn.kernel_weights.shape()[1] : 0;
  if (cfg.enable_kernel_attn)
    for (std::size_t i = 0; i < n; ++i) os << ",kernel_" << i;
  if (cfg.enable_out_gate && attn.out_gates.defined())
    for (std::size_t i = 0; i < attn.out_gates.shape()[1]; ++i) os << ",out_" << i;
  if (cfg.enable_in_gate && attn.in_gates.defined())
    for (std::size_t i = 0; i < attn.in_gates.shape()[1]; ++i) os << ",in_" << i;
  os << "\n";
  for (std::size_t f = 0; f < freq_bins; ++f) {
    os << f;
    auto emit = [&](const Tensor& map) {
      const std::size_t row = (map.shape()[0] == 1) ? 0 : f;
      const std::size_t w = map.shape()[1];
      for (std::size_t i = 0; i < w; ++i) os << "," << map.at({row, i});
    };
    if (cfg.enable_kernel_attn) emit(attn.kernel_weights);
    if (cfg.enable_out_gate && attn.out_gates.defined()) emit(attn.out_gates);
    if (cfg.enable_in_gate && attn.in_gates.defined()) emit(attn.in_gates);
    os << "\n";
  }
  return os.str();
}

}  // namespace mfd::conv
