#include "mfd/features.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "mfd/rng.hpp"

namespace mfd::audio {

namespace {

constexpr double kPi = 3.14159265358979323846;

// ---- little-endian byte helpers ----

std::uint32_t rd_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t rd_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void wr_u32(std::ostream& os, std::uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

void wr_u16(std::ostream& os, std::uint16_t v) {
  char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
  os.write(b, 2);
}

std::string fmt_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc())
    throw std::runtime_error("failed to format double");
  return std::string(buf, ptr);
}

double parse_double(const std::string& s) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw std::runtime_error("bad numeric field: '" + s + "'");
  return v;
}

std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// WAV
// ---------------------------------------------------------------------------

AudioClip load_wav(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("wav: cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw std::runtime_error("wav: not a RIFF/WAVE file: " + path);

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::uint32_t data_len = 0;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const char* tag = reinterpret_cast<const char*>(bytes.data() + pos);
    const std::uint32_t len = rd_u32(bytes.data() + pos + 4);
    const std::size_t body = pos + 8;
    if (body + len > bytes.size()) throw std::runtime_error("wav: truncated chunk in " + path);
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      if (len < 16) throw std::runtime_error("wav: malformed fmt chunk in " + path);
      format = rd_u16(bytes.data() + body);
      channels = rd_u16(bytes.data() + body + 2);
      rate = rd_u32(bytes.data() + body + 4);
      bits = rd_u16(bytes.data() + body + 14);
    } else if (std::memcmp(tag, "data", 4) == 0) {
      data = bytes.data() + body;
      data_len = len;
    }
    pos = body + len + (len & 1);  // chunks are word-aligned
  }
  if (!data || rate == 0 || channels == 0)
    throw std::runtime_error("wav: missing fmt/data chunk in " + path);
  if (channels > 2) throw std::runtime_error("wav: only mono/stereo supported: " + path);

  AudioClip clip;
  clip.sample_rate = rate;
  if (format == 1 && bits == 16) {
    const std::size_t frames = data_len / (2 * channels);
    clip.samples.resize(frames);
    for (std::size_t i = 0; i < frames; ++i) {
      double acc = 0.0;
      for (std::size_t c = 0; c < channels; ++c) {
        const std::int16_t raw = static_cast<std::int16_t>(rd_u16(data + (i * channels + c) * 2));
        acc += static_cast<double>(raw) / 32768.0;
      }
      clip.samples[i] = acc / channels;
    }
  } else if (format == 3 && bits == 32) {
    const std::size_t frames = data_len / (4 * channels);
    clip.samples.resize(frames);
    for (std::size_t i = 0; i < frames; ++i) {
      double acc = 0.0;
      for (std::size_t c = 0; c < channels; ++c) {
        float v;
        std::memcpy(&v, data + (i * channels + c) * 4, 4);
        acc += static_cast<double>(v);
      }
      clip.samples[i] = std::clamp(acc / channels, -1.0, 1.0);
    }
  } else {
    throw std::runtime_error("wav: unsupported codec (format " + std::to_string(format) + ", " +
                             std::to_string(bits) + " bit) in " + path);
  }
  return clip;
}

void save_wav(const std::string& path, const AudioClip& clip) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("wav: cannot open for writing " + path);
  const std::uint32_t data_len = static_cast<std::uint32_t>(clip.samples.size() * 2);
  os.write("RIFF", 4);
  wr_u32(os, 36 + data_len);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  wr_u32(os, 16);
  wr_u16(os, 1);  // PCM
  wr_u16(os, 1);  // mono
  wr_u32(os, static_cast<std::uint32_t>(clip.sample_rate));
  wr_u32(os, static_cast<std::uint32_t>(clip.sample_rate * 2));
  wr_u16(os, 2);
  wr_u16(os, 16);
  os.write("data", 4);
  wr_u32(os, data_len);
  for (double s : clip.samples) {
    const double clamped = std::clamp(s, -1.0, 1.0);
    const std::int16_t v = static_cast<std::int16_t>(std::lround(clamped * 32767.0));
    wr_u16(os, static_cast<std::uint16_t>(v));
  }
  if (!os) throw std::runtime_error("wav: write failed for " + path);
}

AudioClip resample_linear(const AudioClip& clip, std::size_t target_rate) {
  if (clip.sample_rate == target_rate) return clip;
  if (clip.samples.empty()) return {std::vector<double>{}, target_rate};
  const double ratio = static_cast<double>(clip.sample_rate) / static_cast<double>(target_rate);
  const std::size_t out_len =
      static_cast<std::size_t>(static_cast<double>(clip.samples.size()) / ratio);
  std::vector<double> out(out_len);
  for (std::size_t i = 0; i < out_len; ++i) {
    const double t = static_cast<double>(i) * ratio;
    const std::size_t i0 = static_cast<std::size_t>(t);
    const std::size_t i1 = std::min(i0 + 1, clip.samples.size() - 1);
    const double frac = t - static_cast<double>(i0);
    out[i] = (1.0 - frac) * clip.samples[i0] + frac * clip.samples[i1];
  }
  return {std::move(out), target_rate};
}

// ---------------------------------------------------------------------------
// log-mel
// ---------------------------------------------------------------------------

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

namespace {

// In-place iterative radix-2 FFT.
void fft_radix2(std::vector<double>& re, std::vector<double>& im) {
  const std::size_t n = re.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i], re[j]);
      std::swap(im[i], im[j]);
    }
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * kPi / static_cast<double>(len);
    const double wr = std::cos(ang), wi = std::sin(ang);
    for (std::size_t i = 0; i < n; i += len) {
      double cr = 1.0, ci = 0.0;
      for (std::size_t k = 0; k < len / 2; ++k) {
        const double ur = re[i + k], ui = im[i + k];
        const double vr = re[i + k + len / 2] * cr - im[i + k + len / 2] * ci;
        const double vi = re[i + k + len / 2] * ci + im[i + k + len / 2] * cr;
        re[i + k] = ur + vr;
        im[i + k] = ui + vi;
        re[i + k + len / 2] = ur - vr;
        im[i + k + len / 2] = ui - vi;
        const double ncr = cr * wr - ci * wi;
        ci = cr * wi + ci * wr;
        cr = ncr;
      }
    }
  }
}

std::vector<double> mel_points(const LogMelConfig& cfg) {
  const double lo = hz_to_mel(cfg.fmin), hi = hz_to_mel(cfg.fmax);
  std::vector<double> pts(cfg.mel_bins + 2);
  for (std::size_t i = 0; i < pts.size(); ++i)
    pts[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(cfg.mel_bins + 1);
  return pts;
}

// [mel_bins x (window/2 + 1)] triangular weights sampled at FFT bin centers.
std::vector<double> mel_filterbank(const LogMelConfig& cfg) {
  const std::size_t bins = cfg.window / 2 + 1;
  const std::vector<double> pts = mel_points(cfg);
  std::vector<double> fb(cfg.mel_bins * bins, 0.0);
  for (std::size_t m = 0; m < cfg.mel_bins; ++m) {
    const double left = mel_to_hz(pts[m]);
    const double center = mel_to_hz(pts[m + 1]);
    const double right = mel_to_hz(pts[m + 2]);
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * static_cast<double>(cfg.sample_rate) /
                       static_cast<double>(cfg.window);
      if (f <= left || f >= right) continue;
      fb[m * bins + k] =
          (f <= center) ? (f - left) / (center - left) : (right - f) / (right - center);
    }
  }
  return fb;
}

}  // namespace

std::vector<double> mel_center_frequencies(const LogMelConfig& cfg) {
  const std::vector<double> pts = mel_points(cfg);
  std::vector<double> centers(cfg.mel_bins);
  for (std::size_t m = 0; m < cfg.mel_bins; ++m) centers[m] = mel_to_hz(pts[m + 1]);
  return centers;
}

LogMelSpec logmel(const AudioClip& input, const LogMelConfig& cfg) {
  if ((cfg.window & (cfg.window - 1)) != 0 || cfg.window == 0)
    throw std::invalid_argument("logmel: window must be a power of two");
  AudioClip clip = resample_linear(input, cfg.sample_rate);
  if (clip.samples.size() < cfg.window)
    throw std::invalid_argument("logmel: clip shorter than one analysis window (" +
                                std::to_string(clip.samples.size()) + " < " +
                                std::to_string(cfg.window) + " samples)");
  const std::size_t t_len = (clip.samples.size() - cfg.window) / cfg.hop + 1;
  const std::size_t bins = cfg.window / 2 + 1;

  std::vector<double> hann(cfg.window);
  for (std::size_t i = 0; i < cfg.window; ++i)
    hann[i] = 0.5 - 0.5 * std::cos(2.0 * kPi * static_cast<double>(i) /
                                   static_cast<double>(cfg.window));

  const std::vector<double> fb = mel_filterbank(cfg);
  Tensor frames({t_len, cfg.mel_bins}, 0.0);
  auto& out = frames.mutable_values();

  std::vector<double> re(cfg.window), im(cfg.window), power(bins);
  for (std::size_t t = 0; t < t_len; ++t) {
    const double* src = clip.samples.data() + t * cfg.hop;
    for (std::size_t i = 0; i < cfg.window; ++i) {
      re[i] = src[i] * hann[i];
      im[i] = 0.0;
    }
    fft_radix2(re, im);
    for (std::size_t k = 0; k < bins; ++k) power[k] = re[k] * re[k] + im[k] * im[k];
    for (std::size_t m = 0; m < cfg.mel_bins; ++m) {
      double acc = 0.0;
      const double* row = fb.data() + m * bins;
      for (std::size_t k = 0; k < bins; ++k) acc += row[k] * power[k];
      out[t * cfg.mel_bins + m] = std::log(acc + cfg.log_floor);
    }
  }
  return {frames, cfg.hop_seconds(), cfg.mel_bins};
}

// ---------------------------------------------------------------------------
// dataset index
// ---------------------------------------------------------------------------

const char* split_name(Split s) {
  switch (s) {
    case Split::strong: return "strong";
    case Split::weak: return "weak";
    case Split::unlabeled: return "unlabeled";
    case Split::validation: return "validation";
  }
  return "?";
}

Split split_from_name(const std::string& name) {
  if (name == "strong") return Split::strong;
  if (name == "weak") return Split::weak;
  if (name == "unlabeled") return Split::unlabeled;
  if (name == "validation") return Split::validation;
  throw std::runtime_error("unknown split: " + name);
}

std::size_t DatasetIndex::class_id(const std::string& label) const {
  for (std::size_t i = 0; i < classes.size(); ++i)
    if (classes[i] == label) return i;
  throw std::runtime_error("unknown class label: " + label);
}

std::vector<const ClipRecord*> DatasetIndex::by_split(Split s) const {
  std::vector<const ClipRecord*> out;
  for (const auto& c : clips)
    if (c.split == s) out.push_back(&c);
  return out;
}

void save_index(const std::string& path, const DatasetIndex& index) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("index: cannot open for writing " + path);
  os << "#classes\t";
  for (std::size_t i = 0; i < index.classes.size(); ++i) {
    if (i) os << ";";
    os << index.classes[i];
  }
  os << "\n";
  for (const auto& clip : index.clips) {
    os << clip.path << "\t" << split_name(clip.split) << "\t";
    if (clip.split == Split::weak) {
      for (std::size_t i = 0; i < clip.tags.size(); ++i) {
        if (i) os << ";";
        os << clip.tags[i];
      }
    } else {
      for (std::size_t i = 0; i < clip.events.size(); ++i) {
        if (i) os << ";";
        os << fmt_double(clip.events[i].onset) << "," << fmt_double(clip.events[i].offset) << ","
           << clip.events[i].label;
      }
    }
    os << "\n";
  }
  if (!os) throw std::runtime_error("index: write failed for " + path);
}

DatasetIndex load_index(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("index: cannot open " + path);
  DatasetIndex index;
  index.root = std::filesystem::path(path).parent_path().string();
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto fields = split_on(line, '\t');
    if (first && fields.size() == 2 && fields[0] == "#classes") {
      for (const auto& c : split_on(fields[1], ';'))
        if (!c.empty()) index.classes.push_back(c);
      first = false;
      continue;
    }
    first = false;
    if (fields.size() != 3)
      throw std::runtime_error("index: expected 3 tab-separated fields, got '" + line + "'");
    ClipRecord rec;
    rec.path = fields[0];
    rec.split = split_from_name(fields[1]);
    if (!fields[2].empty()) {
      if (rec.split == Split::weak) {
        for (const auto& tag : split_on(fields[2], ';'))
          if (!tag.empty()) rec.tags.push_back(tag);
      } else {
        for (const auto& triple : split_on(fields[2], ';')) {
          if (triple.empty()) continue;
          const auto parts = split_on(triple, ',');
          if (parts.size() != 3)
            throw std::runtime_error("index: bad event triple '" + triple + "'");
          Event e;
          e.onset = parse_double(parts[0]);
          e.offset = parse_double(parts[1]);
          e.label = parts[2];
          rec.events.push_back(std::move(e));
        }
      }
    }
    index.clips.push_back(std::move(rec));
  }
  return index;
}

// ---------------------------------------------------------------------------
// synthetic corpus
// ---------------------------------------------------------------------------

std::vector<std::string> builtin_class_names(std::size_t count) {
  static const std::vector<std::string> names = {"tone440",  "tone1760", "chirp_up",
                                                 "noise_burst", "tone3200", "chirp_down",
                                                 "tone880",  "noise_am"};
  if (count == 0) throw std::invalid_argument("synthetic corpus: need at least one class");
  if (count > names.size())
    throw std::invalid_argument("synthetic corpus: at most " + std::to_string(names.size()) +
                                " built-in classes");
  return std::vector<std::string>(names.begin(), names.begin() + count);
}

namespace {

// Unit-RMS event template for one class.
std::vector<double> render_template(std::size_t cls, std::size_t samples, std::size_t rate,
                                    Rng& rng) {
  std::vector<double> sig(samples, 0.0);
  const double sr = static_cast<double>(rate);
  auto tone = [&](double freq) {
    for (std::size_t i = 0; i < samples; ++i)
      sig[i] = std::sqrt(2.0) * std::sin(2.0 * kPi * freq * static_cast<double>(i) / sr);
  };
  auto chirp = [&](double f0, double f1) {
    const double dur = static_cast<double>(samples) / sr;
    for (std::size_t i = 0; i < samples; ++i) {
      const double t = static_cast<double>(i) / sr;
      const double phase = 2.0 * kPi * (f0 * t + 0.5 * (f1 - f0) / dur * t * t);
      sig[i] = std::sqrt(2.0) * std::sin(phase);
    }
  };
  auto noise = [&](double am_hz) {
    for (std::size_t i = 0; i < samples; ++i) {
      double v = rng.gaussian();
      if (am_hz > 0.0)
        v *= 0.5 + 0.5 * std::sin(2.0 * kPi * am_hz * static_cast<double>(i) / sr);
      sig[i] = v;
    }
    double rms = 0.0;
    for (double v : sig) rms += v * v;
    rms = std::sqrt(rms / static_cast<double>(samples));
    if (rms > 0.0)
      for (double& v : sig) v /= rms;
  };
  switch (cls) {
    case 0: tone(440.0); break;
    case 1: tone(1760.0); break;
    case 2: chirp(500.0, 3000.0); break;
    case 3: noise(0.0); break;
    case 4: tone(3200.0); break;
    case 5: chirp(4000.0, 800.0); break;
    case 6: tone(880.0); break;
    default: noise(8.0); break;
  }
  // 10 ms cosine ramps against clicks.
  const std::size_t ramp = std::min<std::size_t>(samples / 2, rate / 100);
  for (std::size_t i = 0; i < ramp; ++i) {
    const double g = 0.5 - 0.5 * std::cos(kPi * static_cast<double>(i) / static_cast<double>(ramp));
    sig[i] *= g;
    sig[samples - 1 - i] *= g;
  }
  return sig;
}

}  // namespace

DatasetIndex synth_generate(const SynthConfig& cfg, const std::string& out_dir) {
  if (cfg.classes == 0) throw std::invalid_argument("synthetic corpus: zero classes");
  if (!(cfg.clip_seconds > 0.0))
    throw std::invalid_argument("synthetic corpus: clip length must be positive");
  const std::vector<std::string> classes = builtin_class_names(cfg.classes);
  std::filesystem::create_directories(out_dir);

  const std::size_t rate = 16000;
  const std::size_t clip_samples = static_cast<std::size_t>(cfg.clip_seconds * static_cast<double>(rate));

  DatasetIndex index;
  index.classes = classes;
  index.root = out_dir;
  DatasetIndex hidden;  // withheld annotations of the unlabeled split
  hidden.classes = classes;
  hidden.root = out_dir;

  Rng rng(cfg.seed);
  const struct {
    Split split;
    std::size_t count;
  } plan[] = {{Split::strong, cfg.strong_clips},
              {Split::weak, cfg.weak_clips},
              {Split::unlabeled, cfg.unlabeled_clips},
              {Split::validation, cfg.validation_clips}};

  for (const auto& [split, count] : plan) {
    for (std::size_t idx = 0; idx < count; ++idx) {
      std::ostringstream name;
      name << split_name(split) << "_";
      name.fill('0');
      name.width(4);
      name << idx;
      name << ".wav";

      std::vector<double> samples(clip_samples);
      for (double& v : samples) v = cfg.background_rms * rng.gaussian();

      EventList events;
      const std::size_t n_events = 1 + rng.below(cfg.max_events_per_clip);
      for (std::size_t e = 0; e < n_events; ++e) {
        const std::size_t cls = static_cast<std::size_t>(rng.below(classes.size()));
        const double max_dur = std::min(cfg.event_max_seconds, cfg.clip_seconds);
        const double dur = rng.uniform(std::min(cfg.event_min_seconds, max_dur), max_dur);
        const double onset = rng.uniform(0.0, cfg.clip_seconds - dur);
        const double snr_db = rng.uniform(cfg.snr_db_lo, cfg.snr_db_hi);
        const double gain = cfg.background_rms * std::pow(10.0, snr_db / 20.0);

        const std::size_t start = static_cast<std::size_t>(onset * static_cast<double>(rate));
        const std::size_t len = std::min<std::size_t>(
            static_cast<std::size_t>(dur * static_cast<double>(rate)), clip_samples - start);
        const std::vector<double> tpl = render_template(cls, len, rate, rng);
        for (std::size_t i = 0; i < len; ++i) samples[start + i] += gain * tpl[i];

        events.push_back({onset, onset + static_cast<double>(len) / static_cast<double>(rate),
                          classes[cls]});
      }

      double peak = 0.0;
      for (double v : samples) peak = std::max(peak, std::fabs(v));
      if (peak > 0.99)
        for (double& v : samples) v *= 0.99 / peak;

      AudioClip clip{std::move(samples), rate};
      save_wav((std::filesystem::path(out_dir) / name.str()).string(), clip);

      ClipRecord rec;
      rec.path = name.str();
      rec.split = split;
      if (split == Split::strong || split == Split::validation) {
        rec.events = events;
      } else if (split == Split::weak) {
        for (const auto& ev : events)
          if (std::find(rec.tags.begin(), rec.tags.end(), ev.label) == rec.tags.end())
            rec.tags.push_back(ev.label);
        std::sort(rec.tags.begin(), rec.tags.end());
      } else {
        ClipRecord full = rec;
        full.split = Split::validation;  // hidden file stores full annotations
        full.events = events;
        hidden.clips.push_back(std::move(full));
      }
      index.clips.push_back(std::move(rec));
    }
  }

  save_index((std::filesystem::path(out_dir) / "index.tsv").string(), index);
  if (!hidden.clips.empty())
    save_index((std::filesystem::path(out_dir) / "index.hidden.tsv").string(), hidden);
  return index;
}

Tensor rasterize_events(const EventList& events, const std::vector<std::string>& classes,
                        std::size_t frames, double hop_seconds) {
  Tensor out({frames, classes.size()}, 0.0);
  auto& ov = out.mutable_values();
  for (const auto& ev : events) {
    std::size_t cls = classes.size();
    for (std::size_t i = 0; i < classes.size(); ++i)
      if (classes[i] == ev.label) {
        cls = i;
        break;
      }
    if (cls == classes.size()) throw std::runtime_error("rasterize: unknown label " + ev.label);
    for (std::size_t t = 0; t < frames; ++t) {
      const double lo = static_cast<double>(t) * hop_seconds;
      const double hi = lo + hop_seconds;
      if (hi > ev.onset && lo < ev.offset) ov[t * classes.size() + cls] = 1.0;
    }
  }
  return out;
}

}  // namespace mfd::audio
