#pragma once

// Flat key=value run configuration with [section] prefixes, plus
// --override key=value handling. The serialized text doubles as the
// checkpoint trailer so evaluation can rebuild the model.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mfd/dynconv.hpp"
#include "mfd/model.hpp"

namespace mfd::cli {

enum class SslMode { supervised, mt, cmt };
const char* ssl_mode_name(SslMode m);
SslMode ssl_mode_from_name(const std::string& name);

struct RunConfig {
  // data
  std::string data_dir = "data";
  std::size_t classes = 4;
  std::vector<std::string> class_names;  // filled from the dataset index

  // features
  std::size_t mel_bins = 128;
  std::size_t stft_window = 1024;
  std::size_t stft_hop = 313;

  // model
  conv::ConvVariant variant = conv::ConvVariant::mfdconv;
  bool attn_in = true;
  bool attn_out = true;
  bool attn_kernel = true;
  std::size_t kernel_count = 4;  // n
  std::size_t reduction = 4;     // r
  std::size_t conv_kernel = 3;
  std::vector<std::size_t> channels = {16, 32, 64};
  std::vector<std::size_t> pool_t = {2, 2, 2};
  std::vector<std::size_t> pool_f = {2, 2, 2};
  std::size_t gru_hidden = 64;
  sed::WeakPoolMode weak_pool = sed::WeakPoolMode::linear_softmax;
  bool batch_norm = true;

  // ssl
  SslMode ssl_mode = SslMode::cmt;
  double clip_threshold = 0.5;
  double frame_threshold = 0.5;
  double median_seconds = 0.45;
  double lambda_max = 2.0;
  double lambda_ramp_frac = 0.2;
  double ema_decay = 0.999;
  bool literal_frame_clip_zeroing = false;

  // optimizer
  double lr = 0.01;
  double momentum = 0.9;
  bool cosine_decay = true;

  // loop
  std::size_t epochs = 10;
  std::size_t batch_strong = 2;
  std::size_t batch_weak = 2;
  std::size_t batch_unlabeled = 4;
  std::size_t val_every = 1;
  std::uint64_t seed = 1;

  void validate() const;
  sed::CRNNConfig crnn_config() const;
  conv::ConvVariantConfig variant_config() const;

  std::string to_text() const;
  static RunConfig from_text(const std::string& text);
  static RunConfig from_file(const std::string& path);
  void apply_override(const std::string& key_equals_value);
};

// Low-level parsing shared by config files and checkpoint trailers.
std::map<std::string, std::string> parse_key_values(const std::string& text);

}  // namespace mfd::cli
