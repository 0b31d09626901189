// mfdsed: synthesize corpora, train SED models with dynamic convolutions and
// mean-teacher variants, evaluate checkpoints, and inspect attention maps.
//
// Exit codes: 0 success, 1 usage/validation, 2 I/O, 3 numerical failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "mfd/checkpoint.hpp"
#include "mfd/config.hpp"
#include "mfd/dynconv.hpp"
#include "mfd/eval.hpp"
#include "mfd/features.hpp"
#include "mfd/trainer.hpp"

namespace {

using namespace mfd;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitIo = 2;
constexpr int kExitNumerical = 3;

int cmd_synth_data(std::uint64_t seed, const std::string& out_dir, const std::string& per_split,
                   std::size_t classes, double clip_seconds) {
  audio::SynthConfig cfg;
  cfg.seed = seed;
  cfg.classes = classes;
  cfg.clip_seconds = clip_seconds;
  if (!per_split.empty()) {
    std::vector<std::size_t> counts;
    std::string cur;
    for (char c : per_split + ",") {
      if (c == ',') {
        counts.push_back(static_cast<std::size_t>(std::stoul(cur)));
        cur.clear();
      } else {
        cur.push_back(c);
      }
    }
    if (counts.size() != 4)
      throw std::invalid_argument(
          "--clips-per-split wants strong,weak,unlabeled,validation counts");
    cfg.strong_clips = counts[0];
    cfg.weak_clips = counts[1];
    cfg.unlabeled_clips = counts[2];
    cfg.validation_clips = counts[3];
  }
  audio::DatasetIndex index = audio::synth_generate(cfg, out_dir);

  std::size_t per[4] = {0, 0, 0, 0};
  for (const auto& clip : index.clips) per[static_cast<int>(clip.split)]++;
  std::cout << "corpus written to " << out_dir << "\n";
  std::cout << "  classes:";
  for (const auto& c : index.classes) std::cout << " " << c;
  std::cout << "\n  strong " << per[0] << ", weak " << per[1] << ", unlabeled " << per[2]
            << ", validation " << per[3] << "\n";
  std::cout << "  index: " << (std::filesystem::path(out_dir) / "index.tsv").string() << "\n";
  return kExitOk;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& data_dir, const std::string& out_dir) {
  cli::RunConfig cfg =
      config_path.empty() ? cli::RunConfig{} : cli::RunConfig::from_file(config_path);
  for (const auto& ov : overrides) cfg.apply_override(ov);
  if (!data_dir.empty()) cfg.data_dir = data_dir;

  audio::DatasetIndex index =
      audio::load_index((std::filesystem::path(cfg.data_dir) / "index.tsv").string());
  train::Trainer trainer(cfg, index);
  try {
    train::TrainResult result = trainer.run(out_dir);
    std::cout << "trained " << result.steps << " steps\n";
    if (result.validated)
      std::cout << "best validation collar F1: " << result.best_val_collar_f1 << "\n";
    std::cout << "checkpoint: " << result.checkpoint_path << "\n";
    std::cout << "metrics: " << (std::filesystem::path(out_dir) / "metrics.jsonl").string()
              << "\n";
    return kExitOk;
  } catch (const train::NumericalError& e) {
    nlohmann::json dump;
    dump["error"] = e.what();
    dump["batch"] = e.batch;
    const std::string dump_path =
        (std::filesystem::path(out_dir) / "diagnostic_batch.json").string();
    std::filesystem::create_directories(out_dir);
    std::ofstream(dump_path) << dump.dump(2) << "\n";
    std::cerr << "numerical failure: " << e.what() << "\n";
    std::cerr << "offending batch dumped to " << dump_path << "\n";
    return kExitNumerical;
  }
}

int cmd_evaluate(const std::string& checkpoint_path, const std::string& data_dir,
                 const std::string& report_path) {
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  cli::RunConfig cfg = cli::RunConfig::from_text(ckpt.trailer);
  audio::DatasetIndex index =
      audio::load_index((std::filesystem::path(data_dir) / "index.tsv").string());
  if (!cfg.class_names.empty() && cfg.class_names != index.classes)
    throw std::invalid_argument(
        "vocabulary mismatch between checkpoint and dataset index");

  sed::Crnn model(cfg.crnn_config(), cfg.seed);
  model.adopt_state(ckpt.tensors);

  std::vector<train::PreparedClip> clips = train::prepare_clips(cfg, index);
  bool any_validation = false;
  for (const auto& clip : clips)
    if (clip.split == audio::Split::validation) any_validation = true;
  if (!any_validation) throw std::invalid_argument("empty validation set");

  const audio::LogMelConfig mel_cfg{16000, cfg.stft_window, cfg.stft_hop, cfg.mel_bins};
  const double hop_out =
      mel_cfg.hop_seconds() * static_cast<double>(cfg.crnn_config().time_pool_factor());
  eval::EvalSummary summary = train::evaluate_model(model, clips, audio::Split::validation,
                                                    index.classes, cfg, hop_out);
  if (!report_path.empty()) std::ofstream(report_path) << eval::summary_json(summary) << "\n";
  std::cout << eval::summary_table(conv::variant_name(cfg.variant), summary);
  return kExitOk;
}

int cmd_inspect_attn(const std::string& checkpoint_path, const std::string& clip_path,
                     std::size_t layer, const std::string& out_path) {
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  cli::RunConfig cfg = cli::RunConfig::from_text(ckpt.trailer);
  sed::Crnn model(cfg.crnn_config(), cfg.seed);
  model.adopt_state(ckpt.tensors);

  audio::LogMelConfig mel_cfg;
  mel_cfg.window = cfg.stft_window;
  mel_cfg.hop = cfg.stft_hop;
  mel_cfg.mel_bins = cfg.mel_bins;
  audio::LogMelSpec spec = audio::logmel(audio::load_wav(clip_path), mel_cfg);

  conv::FreqAttention attn = model.attention_maps(spec.frames, layer);
  const std::string csv = conv::attention_csv(attn, cfg.variant_config(), attn.rows());
  std::ofstream os(out_path);
  if (!os) throw std::runtime_error("cannot open " + out_path);
  os << csv;
  std::cout << "attention maps for layer " << layer << " (" << attn.rows()
            << " frequency rows) written to " << out_path << "\n";
  return kExitOk;
}

int cmd_grad_check(const std::string& variant_name, std::uint64_t seed, bool inject_bug) {
  const conv::ConvVariant variant = conv::variant_from_name(variant_name);
  conv::ConvVariantConfig cfg = conv::ConvVariantConfig::for_variant(variant, 2, 2);
  Rng rng(seed);
  const std::size_t c_in = 2, c_out = 3;
  Tensor x = Tensor::uniform({4, 6, c_in}, 1.0, rng);
  conv::DynKernelBank bank = conv::DynKernelBank::init(cfg.kernel_count, c_out, c_in, 3, rng);
  std::optional<conv::AttentionHead> head;
  if (cfg.is_dynamic()) head = conv::AttentionHead::init(cfg, c_in, c_out, rng);

  // The harness self-test: an extra loss term visible only to the taped
  // (analytic) pass, mimicking a backward-rule bug.
  auto sabotage = [inject_bug](const Tensor& t) {
    if (!inject_bug || !Tape::current()) return Tensor::scalar(0.0);
    return scale(sum_all(t), 0.01);
  };

  struct Target {
    std::string name;
    std::function<Tensor(const Tensor&)> loss;
    Tensor point;
  };
  std::vector<Target> targets;
  auto forward = [&](const Tensor& xin, const conv::DynKernelBank& b,
                     const conv::AttentionHead* h) {
    return conv::dynamic_conv_forward(xin, b, h, cfg);
  };
  targets.push_back({"input",
                     [&](const Tensor& t) {
                       return add(sum_all(forward(t, bank, head ? &*head : nullptr)),
                                  sabotage(t));
                     },
                     x});
  targets.push_back({"kernels",
                     [&](const Tensor& t) {
                       conv::DynKernelBank b2{t, bank.bias};
                       return add(sum_all(forward(x, b2, head ? &*head : nullptr)), sabotage(t));
                     },
                     bank.kernels});
  targets.push_back({"bias",
                     [&](const Tensor& t) {
                       conv::DynKernelBank b2{bank.kernels, t};
                       return add(sum_all(forward(x, b2, head ? &*head : nullptr)), sabotage(t));
                     },
                     bank.bias});
  if (head) {
    auto head_target = [&](const std::string& name, Tensor conv::AttentionHead::*field,
                           const Tensor& point) {
      targets.push_back({name,
                         [&, field](const Tensor& t) {
                           conv::AttentionHead h2 = *head;
                           h2.*field = t;
                           return add(sum_all(forward(x, bank, &h2)), sabotage(t));
                         },
                         point});
    };
    head_target("attn.stem_w", &conv::AttentionHead::stem_w, head->stem_w);
    head_target("attn.stem_b", &conv::AttentionHead::stem_b, head->stem_b);
    if (head->kernel_w.defined())
      head_target("attn.kernel_w", &conv::AttentionHead::kernel_w, head->kernel_w);
    if (head->out_w.defined())
      head_target("attn.out_w", &conv::AttentionHead::out_w, head->out_w);
    if (head->in_w.defined())
      head_target("attn.in_w", &conv::AttentionHead::in_w, head->in_w);
  }

  bool failed = false;
  for (const auto& target : targets) {
    const GradCheckResult res = grad_check(target.loss, target.point, 1e-4);
    const bool ok = res.max_rel_error < 1e-4;
    std::cout << variant_name << " d/d(" << target.name << "): max rel error "
              << res.max_rel_error << (ok ? "  ok" : "  FAIL") << "\n";
    if (!ok) {
      std::cout << "  worst coordinate " << res.worst_coord << ": tape " << res.analytic
                << " vs finite-difference " << res.numeric << "\n";
      failed = true;
    }
  }
  return failed ? kExitNumerical : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-dimensional frequency dynamic convolution SED toolkit"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth-data", "generate a synthetic labeled corpus");
  std::uint64_t synth_seed = 1;
  std::string synth_out = "data";
  std::string per_split;
  std::size_t synth_classes = 4;
  double clip_seconds = 10.0;
  synth->add_option("--seed", synth_seed, "corpus RNG seed");
  synth->add_option("--out", synth_out, "output directory");
  synth->add_option("--clips-per-split", per_split, "strong,weak,unlabeled,validation counts");
  synth->add_option("--classes", synth_classes, "number of event classes");
  synth->add_option("--clip-seconds", clip_seconds, "clip length in seconds");

  auto* train_cmd = app.add_subcommand("train", "train a model");
  std::string config_path, train_data, train_out = "run";
  std::vector<std::string> overrides;
  train_cmd->add_option("--config", config_path, "key=value config file");
  train_cmd->add_option("--override", overrides, "config override key=value")->take_all();
  train_cmd->add_option("--data", train_data, "corpus directory (overrides config)");
  train_cmd->add_option("--out", train_out, "output directory");

  auto* eval_cmd = app.add_subcommand("evaluate", "score a checkpoint on the validation split");
  std::string eval_ckpt, eval_data, report_path;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
  eval_cmd->add_option("--data", eval_data, "corpus directory")->required();
  eval_cmd->add_option("--report", report_path, "JSON report output path");

  auto* attn_cmd = app.add_subcommand("inspect-attn", "dump attention maps for one clip");
  std::string attn_ckpt, attn_clip, attn_out = "attention.csv";
  std::size_t attn_layer = 0;
  attn_cmd->add_option("--checkpoint", attn_ckpt, "model checkpoint")->required();
  attn_cmd->add_option("--clip", attn_clip, "input WAV file")->required();
  attn_cmd->add_option("--layer", attn_layer, "conv block index");
  attn_cmd->add_option("--out", attn_out, "CSV output path");

  auto* grad_cmd = app.add_subcommand("grad-check", "finite-difference gradient verification");
  std::string grad_variant = "mfdconv";
  std::uint64_t grad_seed = 1;
  bool inject_bug = false;
  grad_cmd->add_option("--variant", grad_variant, "conv variant to check");
  grad_cmd->add_option("--seed", grad_seed, "RNG seed");
  grad_cmd->add_flag("--inject-bug", inject_bug, "harness self-test: sabotage the tape pass");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (synth->parsed())
      return cmd_synth_data(synth_seed, synth_out, per_split, synth_classes, clip_seconds);
    if (train_cmd->parsed()) return cmd_train(config_path, overrides, train_data, train_out);
    if (eval_cmd->parsed()) return cmd_evaluate(eval_ckpt, eval_data, report_path);
    if (attn_cmd->parsed()) return cmd_inspect_attn(attn_ckpt, attn_clip, attn_layer, attn_out);
    if (grad_cmd->parsed()) return cmd_grad_check(grad_variant, grad_seed, inject_bug);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::runtime_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitUsage;
}
