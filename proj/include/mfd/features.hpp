#pragma once

// Audio ingestion, log-mel features, and the synthetic labeled corpus that
// stands in for a real SED dataset at desk scale.

#include <cstdint>
#include <string>
#include <vector>

#include "mfd/events.hpp"
#include "mfd/tensor.hpp"

namespace mfd::audio {

struct AudioClip {
  std::vector<double> samples;  // in [-1, 1]
  std::size_t sample_rate = 16000;

  double duration() const {
    return static_cast<double>(samples.size()) / static_cast<double>(sample_rate);
  }
};

// RIFF/WAVE, PCM 16-bit or IEEE float-32, mono or stereo (averaged down).
AudioClip load_wav(const std::string& path);
// RIFF PCM 16-bit mono.
void save_wav(const std::string& path, const AudioClip& clip);

AudioClip resample_linear(const AudioClip& clip, std::size_t target_rate);

struct LogMelConfig {
  std::size_t sample_rate = 16000;
  std::size_t window = 1024;  // power of two
  std::size_t hop = 313;
  std::size_t mel_bins = 128;
  double fmin = 0.0;
  double fmax = 8000.0;
  double log_floor = 1e-10;

  double hop_seconds() const {
    return static_cast<double>(hop) / static_cast<double>(sample_rate);
  }
};

struct LogMelSpec {
  Tensor frames;  // [T, mel_bins]
  double hop_seconds = 0.0;
  std::size_t mel_bins = 0;
};

// Hann-windowed power STFT -> triangular HTK-mel filterbank -> log(x + floor).
// Clips at other rates are linearly resampled first.
LogMelSpec logmel(const AudioClip& clip, const LogMelConfig& cfg = {});

double hz_to_mel(double hz);
double mel_to_hz(double mel);
// Center frequencies (Hz) of the triangular filters, for diagnostics/tests.
std::vector<double> mel_center_frequencies(const LogMelConfig& cfg);

enum class Split { strong, weak, unlabeled, validation };
const char* split_name(Split s);
Split split_from_name(const std::string& name);

struct ClipRecord {
  std::string path;  // relative to the index directory
  Split split = Split::strong;
  EventList events;               // strong / validation annotations
  std::vector<std::string> tags;  // weak tags
};

struct DatasetIndex {
  std::vector<std::string> classes;
  std::vector<ClipRecord> clips;
  std::string root;  // directory of the index file; not serialized

  std::size_t class_id(const std::string& label) const;
  std::vector<const ClipRecord*> by_split(Split s) const;
};

// Tab-separated: path, split, and either "tag1;tag2" or
// "onset,offset,class;..." triples. A "#classes" header row carries the
// vocabulary. Floats round-trip losslessly.
void save_index(const std::string& path, const DatasetIndex& index);
DatasetIndex load_index(const std::string& path);

struct SynthConfig {
  std::uint64_t seed = 1;
  std::size_t strong_clips = 10;
  std::size_t weak_clips = 10;
  std::size_t unlabeled_clips = 20;
  std::size_t validation_clips = 10;
  std::size_t classes = 4;  // up to 8 built-in templates
  double clip_seconds = 10.0;
  double snr_db_lo = 15.0;
  double snr_db_hi = 25.0;
  double event_min_seconds = 0.4;
  double event_max_seconds = 1.2;
  std::size_t max_events_per_clip = 3;
  double background_rms = 0.02;
};

// Deterministic per seed, byte-level. Writes WAV files plus index.tsv; the
// unlabeled split's withheld annotations go to index.hidden.tsv for
// diagnostics only.
DatasetIndex synth_generate(const SynthConfig& cfg, const std::string& out_dir);

std::vector<std::string> builtin_class_names(std::size_t count);

// Frame-level rasterization of events at the given hop (frame t covers
// [t*hop, (t+1)*hop)); used to build strong training targets.
Tensor rasterize_events(const EventList& events, const std::vector<std::string>& classes,
                        std::size_t frames, double hop_seconds);

}  // namespace mfd::audio
