#pragma once

// Dynamic convolution variants over [T, F, C] feature maps:
//   static   - plain convolution, single kernel
//   dyconv   - one attention weight per basis kernel, global pooling
//   fdconv   - per-frequency kernel attention only
//   odconv   - kernel + channel attentions, frequency-agnostic
//   mfdconv  - kernel + channel attentions, all per frequency bin
//
// The production forward runs a fused im2col path; the per-frequency kernel
// assembly (assemble_effective_kernel) defines the reference semantics and
// the two are equal to within 1e-10.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "mfd/rng.hpp"
#include "mfd/tensor.hpp"

namespace mfd::conv {

enum class ConvVariant { static_kernel, dyconv, fdconv, odconv, mfdconv };

const char* variant_name(ConvVariant v);
ConvVariant variant_from_name(const std::string& name);

enum class BranchNorm { softmax, sigmoid };

struct ConvVariantConfig {
  ConvVariant variant = ConvVariant::mfdconv;
  // Ablation switches for the three attention dimensions.
  bool enable_in_gate = true;      // input-channel gates
  bool enable_out_gate = true;     // output-channel gates
  bool enable_kernel_attn = true;  // per-kernel mixture weights
  std::size_t kernel_count = 4;    // basis kernels n
  std::size_t reduction = 4;       // squeeze ratio r
  double softmax_temperature = 1.0;
  BranchNorm kernel_norm = BranchNorm::softmax;
  BranchNorm gate_norm = BranchNorm::sigmoid;
  std::size_t stem_kernel_size = 3;
  std::size_t branch_kernel_size = 1;
  // When set, the attention stem sees a per-channel standardized copy of the
  // pooled input instead of the raw values.
  bool standardize_attn_input = false;

  static ConvVariantConfig for_variant(ConvVariant v, std::size_t n = 4, std::size_t r = 4);

  bool is_dynamic() const { return variant != ConvVariant::static_kernel; }
  // dyconv/odconv pool over time and frequency; attention maps have one row.
  bool frequency_global() const {
    return variant == ConvVariant::dyconv || variant == ConvVariant::odconv;
  }
  void validate() const;
};

// The n basis kernels plus one static bias.
struct DynKernelBank {
  Tensor kernels;  // [n, c_out, c_in, k, k]
  Tensor bias;     // [c_out]

  std::size_t kernel_count() const { return kernels.shape()[0]; }
  std::size_t out_channels() const { return kernels.shape()[1]; }
  std::size_t in_channels() const { return kernels.shape()[2]; }
  std::size_t spatial_size() const { return kernels.shape()[3]; }

  static DynKernelBank init(std::size_t n, std::size_t c_out, std::size_t c_in, std::size_t k,
                            Rng& rng);
  void validate() const;
};

// Squeeze stem plus up to three 1-D conv branches. Disabled branches carry no
// parameters; their map widths are kept so all-ones maps can be produced.
struct AttentionHead {
  Tensor stem_w;  // [c_mid, c_in, stem_k]
  Tensor stem_b;  // [c_mid]
  Tensor kernel_w, kernel_b;  // [n, c_mid, bk], [n]
  Tensor out_w, out_b;        // [c_out, c_mid, bk], [c_out]
  Tensor in_w, in_b;          // [c_in, c_mid, bk], [c_in]
  std::size_t out_channels = 0;

  std::size_t in_channels() const { return stem_w.shape()[1]; }

  static AttentionHead init(const ConvVariantConfig& cfg, std::size_t c_in, std::size_t c_out,
                            Rng& rng);
};

std::size_t head_param_count(const ConvVariantConfig& cfg, std::size_t c_in, std::size_t c_out);

// The three frequency-indexed attention maps. For frequency-global variants
// every map has a single row. Disabled branches are all-ones maps.
struct FreqAttention {
  Tensor kernel_weights;  // [F, n], rows sum to 1 under softmax normalization
  Tensor out_gates;       // [F, c_out], sigmoid range
  Tensor in_gates;        // [F, c_in]

  std::size_t rows() const { return kernel_weights.shape()[0]; }
};

// Time-pool -> squeeze conv -> branches. Maps are differentiable w.r.t. x and
// every head parameter.
FreqAttention compute_attentions(const Tensor& x, const AttentionHead& head,
                                 const ConvVariantConfig& cfg);

// Reference semantics of Eq.-style kernel assembly for output frequency f.
Tensor assemble_effective_kernel(const DynKernelBank& bank, const FreqAttention& attn,
                                 std::size_t f);

// Fused im2col forward given precomputed attention maps.
Tensor mfdconv_apply(const Tensor& x, const DynKernelBank& bank, const FreqAttention& attn,
                     const ConvVariantConfig& cfg);

Tensor mfdconv_forward(const Tensor& x, const DynKernelBank& bank, const AttentionHead& head,
                       const ConvVariantConfig& cfg);
Tensor dyconv_forward(const Tensor& x, const DynKernelBank& bank, const AttentionHead& head,
                      const ConvVariantConfig& cfg);
Tensor odconv_forward(const Tensor& x, const DynKernelBank& bank, const AttentionHead& head,
                      const ConvVariantConfig& cfg);

// Variant dispatch used by the model. head may be null for the static variant.
Tensor dynamic_conv_forward(const Tensor& x, const DynKernelBank& bank,
                            const AttentionHead* head, const ConvVariantConfig& cfg);

// CSV export: one row per frequency bin, columns labeled by branch and index
// (kernel_i, out_i, in_i). Only enabled branches are emitted.
std::string attention_csv(const FreqAttention& attn, const ConvVariantConfig& cfg,
                          std::size_t freq_bins);

}  // namespace mfd::conv
