#include "mfd/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mfd::cli {

const char* ssl_mode_name(SslMode m) {
  switch (m) {
    case SslMode::supervised: return "supervised";
    case SslMode::mt: return "mt";
    case SslMode::cmt: return "cmt";
  }
  return "?";
}

SslMode ssl_mode_from_name(const std::string& name) {
  if (name == "supervised") return SslMode::supervised;
  if (name == "mt") return SslMode::mt;
  if (name == "cmt") return SslMode::cmt;
  throw std::invalid_argument("unknown ssl mode: " + name);
}

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw std::invalid_argument("bad boolean value: " + v);
}

std::size_t parse_size(const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw std::invalid_argument("bad integer value: " + v);
  return out;
}

double parse_real(const std::string& v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw std::invalid_argument("bad numeric value: " + v);
  return out;
}

std::vector<std::size_t> parse_size_list(const std::string& v) {
  std::vector<std::size_t> out;
  std::string cur;
  for (char c : v) {
    if (c == ',') {
      out.push_back(parse_size(trim(cur)));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!trim(cur).empty()) out.push_back(parse_size(trim(cur)));
  return out;
}

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) os << ",";
    os << v[i];
  }
  return os.str();
}

}  // namespace

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line, section;
  while (std::getline(is, line)) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[' && t.back() == ']') {
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: expected key=value, got '" + t + "'");
    std::string key = trim(t.substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    kv[key] = trim(t.substr(eq + 1));
  }
  return kv;
}

void RunConfig::validate() const {
  if (classes == 0) throw std::invalid_argument("config: classes must be >= 1");
  if (channels.empty() || channels.size() != pool_t.size() || channels.size() != pool_f.size())
    throw std::invalid_argument("config: channels/pool_t/pool_f must have equal lengths");
  if (!(clip_threshold > 0.0 && clip_threshold < 1.0) ||
      !(frame_threshold > 0.0 && frame_threshold < 1.0))
    throw std::invalid_argument("config: thresholds must lie in (0,1)");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0))
    throw std::invalid_argument("config: ema_decay must lie in [0,1)");
  if (!(lr > 0.0)) throw std::invalid_argument("config: lr must be positive");
  if (batch_strong + batch_weak + batch_unlabeled == 0)
    throw std::invalid_argument("config: batch size is zero");
  variant_config().validate();
}

conv::ConvVariantConfig RunConfig::variant_config() const {
  conv::ConvVariantConfig cfg =
      conv::ConvVariantConfig::for_variant(variant, kernel_count, reduction);
  if (variant == conv::ConvVariant::mfdconv) {
    cfg.enable_in_gate = attn_in;
    cfg.enable_out_gate = attn_out;
    cfg.enable_kernel_attn = attn_kernel;
  }
  return cfg;
}

sed::CRNNConfig RunConfig::crnn_config() const {
  sed::CRNNConfig cfg;
  cfg.mel_bins = mel_bins;
  cfg.variant = variant_config();
  for (std::size_t i = 0; i < channels.size(); ++i)
    cfg.blocks.push_back({channels[i], conv_kernel, pool_t[i], pool_f[i]});
  cfg.gru_hidden = gru_hidden;
  cfg.classes = classes;
  cfg.weak_pool = weak_pool;
  cfg.use_batch_norm = batch_norm;
  return cfg;
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  os << "[data]\n";
  os << "dir = " << data_dir << "\n";
  os << "classes = " << classes << "\n";
  if (!class_names.empty()) {
    os << "class_names = ";
    for (std::size_t i = 0; i < class_names.size(); ++i) {
      if (i) os << ";";
      os << class_names[i];
    }
    os << "\n";
  }
  os << "[features]\n";
  os << "mel_bins = " << mel_bins << "\n";
  os << "window = " << stft_window << "\n";
  os << "hop = " << stft_hop << "\n";
  os << "[model]\n";
  os << "variant = " << conv::variant_name(variant) << "\n";
  os << "attn_in = " << (attn_in ? "true" : "false") << "\n";
  os << "attn_out = " << (attn_out ? "true" : "false") << "\n";
  os << "attn_kernel = " << (attn_kernel ? "true" : "false") << "\n";
  os << "kernel_count = " << kernel_count << "\n";
  os << "reduction = " << reduction << "\n";
  os << "conv_kernel = " << conv_kernel << "\n";
  os << "channels = " << join_sizes(channels) << "\n";
  os << "pool_t = " << join_sizes(pool_t) << "\n";
  os << "pool_f = " << join_sizes(pool_f) << "\n";
  os << "gru_hidden = " << gru_hidden << "\n";
  os << "weak_pool = " << sed::weak_pool_name(weak_pool) << "\n";
  os << "batch_norm = " << (batch_norm ? "true" : "false") << "\n";
  os << "[ssl]\n";
  os << "mode = " << ssl_mode_name(ssl_mode) << "\n";
  os << "clip_threshold = " << clip_threshold << "\n";
  os << "frame_threshold = " << frame_threshold << "\n";
  os << "median_seconds = " << median_seconds << "\n";
  os << "lambda_max = " << lambda_max << "\n";
  os << "lambda_ramp_frac = " << lambda_ramp_frac << "\n";
  os << "ema_decay = " << ema_decay << "\n";
  os << "literal_frame_clip_zeroing = " << (literal_frame_clip_zeroing ? "true" : "false")
     << "\n";
  os << "[optim]\n";
  os << "lr = " << lr << "\n";
  os << "momentum = " << momentum << "\n";
  os << "cosine_decay = " << (cosine_decay ? "true" : "false") << "\n";
  os << "[train]\n";
  os << "epochs = " << epochs << "\n";
  os << "batch_strong = " << batch_strong << "\n";
  os << "batch_weak = " << batch_weak << "\n";
  os << "batch_unlabeled = " << batch_unlabeled << "\n";
  os << "val_every = " << val_every << "\n";
  os << "seed = " << seed << "\n";
  return os.str();
}

namespace {

void apply_kv(RunConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "data.dir") cfg.data_dir = value;
  else if (key == "data.classes") cfg.classes = parse_size(value);
  else if (key == "data.class_names") {
    cfg.class_names.clear();
    std::string cur;
    for (char c : value) {
      if (c == ';') {
        if (!cur.empty()) cfg.class_names.push_back(cur);
        cur.clear();
      } else {
        cur.push_back(c);
      }
    }
    if (!cur.empty()) cfg.class_names.push_back(cur);
  }
  else if (key == "features.mel_bins") cfg.mel_bins = parse_size(value);
  else if (key == "features.window") cfg.stft_window = parse_size(value);
  else if (key == "features.hop") cfg.stft_hop = parse_size(value);
  else if (key == "model.variant") cfg.variant = conv::variant_from_name(value);
  else if (key == "model.attn_in") cfg.attn_in = parse_bool(value);
  else if (key == "model.attn_out") cfg.attn_out = parse_bool(value);
  else if (key == "model.attn_kernel") cfg.attn_kernel = parse_bool(value);
  else if (key == "model.kernel_count") cfg.kernel_count = parse_size(value);
  else if (key == "model.reduction") cfg.reduction = parse_size(value);
  else if (key == "model.conv_kernel") cfg.conv_kernel = parse_size(value);
  else if (key == "model.channels") cfg.channels = parse_size_list(value);
  else if (key == "model.pool_t") cfg.pool_t = parse_size_list(value);
  else if (key == "model.pool_f") cfg.pool_f = parse_size_list(value);
  else if (key == "model.gru_hidden") cfg.gru_hidden = parse_size(value);
  else if (key == "model.weak_pool") cfg.weak_pool = sed::weak_pool_from_name(value);
  else if (key == "model.batch_norm") cfg.batch_norm = parse_bool(value);
  else if (key == "ssl.mode") cfg.ssl_mode = ssl_mode_from_name(value);
  else if (key == "ssl.clip_threshold") cfg.clip_threshold = parse_real(value);
  else if (key == "ssl.frame_threshold") cfg.frame_threshold = parse_real(value);
  else if (key == "ssl.median_seconds") cfg.median_seconds = parse_real(value);
  else if (key == "ssl.lambda_max") cfg.lambda_max = parse_real(value);
  else if (key == "ssl.lambda_ramp_frac") cfg.lambda_ramp_frac = parse_real(value);
  else if (key == "ssl.ema_decay") cfg.ema_decay = parse_real(value);
  else if (key == "ssl.literal_frame_clip_zeroing")
    cfg.literal_frame_clip_zeroing = parse_bool(value);
  else if (key == "optim.lr") cfg.lr = parse_real(value);
  else if (key == "optim.momentum") cfg.momentum = parse_real(value);
  else if (key == "optim.cosine_decay") cfg.cosine_decay = parse_bool(value);
  else if (key == "train.epochs") cfg.epochs = parse_size(value);
  else if (key == "train.batch_strong") cfg.batch_strong = parse_size(value);
  else if (key == "train.batch_weak") cfg.batch_weak = parse_size(value);
  else if (key == "train.batch_unlabeled") cfg.batch_unlabeled = parse_size(value);
  else if (key == "train.val_every") cfg.val_every = parse_size(value);
  else if (key == "train.seed") cfg.seed = parse_size(value);
  else throw std::invalid_argument("config: unknown key '" + key + "'");
}

}  // namespace

RunConfig RunConfig::from_text(const std::string& text) {
  RunConfig cfg;
  for (const auto& [key, value] : parse_key_values(text)) apply_kv(cfg, key, value);
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return from_text(text);
}

void RunConfig::apply_override(const std::string& key_equals_value) {
  const std::size_t eq = key_equals_value.find('=');
  if (eq == std::string::npos)
    throw std::invalid_argument("override must be key=value, got '" + key_equals_value + "'");
  apply_kv(*this, trim(key_equals_value.substr(0, eq)),
           trim(key_equals_value.substr(eq + 1)));
}

}  // namespace mfd::cli
