#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <sstream>

#include "wnet/checkpoint.hpp"
#include "wnet/data.hpp"
#include "wnet/eval.hpp"
#include "wnet/gradcheck.hpp"
#include "wnet/image_io.hpp"
#include "wnet/keyvalue.hpp"
#include "wnet/metrics.hpp"
#include "wnet/train.hpp"

namespace wnet::cli {
namespace {

namespace fs = std::filesystem;

// Raised for invalid option combinations discovered after parsing.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A flag that overrides one config key.
struct Flag {
  std::string name;
  std::string key;
  std::string help;
};

struct Context {
  std::string workdir = ".";
  std::string config;
  std::string manifest = "run_manifest.txt";
  std::map<std::string, std::string> values;
  std::vector<std::pair<std::string, CLI::Option*>> bound;
  std::vector<std::string> checkpoints;
  KeyValues kv;
  std::vector<fs::path> artifacts;

  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path : fs::path(workdir) / path;
  }
  std::string get(const std::string& key, const std::string& fallback) const {
    return kv_string(kv, key, fallback);
  }
  std::string require_key(const std::string& key, const std::string& flag) const {
    const auto it = kv.find(key);
    if (it == kv.end() || it->second.empty())
      throw UsageError(flag + " is required (or '" + key + "' in the config)");
    return it->second;
  }
};

void add_common(CLI::App* sub, Context& ctx) {
  sub->add_option("--workdir", ctx.workdir, "Directory all relative paths are resolved against")
      ->capture_default_str();
  sub->add_option("--config", ctx.config, "Key-value config file ([section] key = value); flags win");
  sub->add_option("--manifest", ctx.manifest, "Run manifest path")->capture_default_str();
}

void add_flags(CLI::App* sub, Context& ctx, const std::vector<Flag>& flags) {
  for (const auto& f : flags) {
    CLI::Option* opt = sub->add_option(f.name, ctx.values[f.key], f.help + " [" + f.key + "]");
    ctx.bound.emplace_back(f.key, opt);
  }
}

const std::vector<Flag> kModelFlags = {
    {"--preset", "model.preset", "Model size: full (depth 4, base 32) or tiny (depth 2, base 8)"},
    {"--depth", "model.depth", "Number of 2x2 poolings per U-Net"},
    {"--base-channels", "model.base_channels", "Width of the first Convs block"},
    {"--in-channels", "model.in_channels", "Raw input channels: 1 mosaic, 4 packed RGGB"},
};

const std::vector<Flag> kDataFlags = {
    {"--data", "data.dir", "Dataset directory with raw/NNN.png and rgb/NNN.png"},
    {"--split", "data.split", "TRAIN/VAL pair counts, e.g. 8/2 (default: every pair)"},
};

ModelConfig model_config(const KeyValues& kv) {
  const std::string preset = kv_string(kv, "model.preset", "full");
  ModelConfig base;
  if (preset == "tiny") {
    base = ModelConfig::tiny();
  } else if (preset != "full") {
    throw UsageError("model preset must be 'full' or 'tiny', got '" + preset + "'");
  }
  ModelConfig mc = model_config_from_key_values(kv, base);
  mc.validate();
  return mc;
}

DatasetSplits load_data(const Context& ctx, RawMode mode) {
  const fs::path dir = ctx.resolve(ctx.require_key("data.dir", "--data"));
  const std::string split = ctx.get("data.split", "");
  if (split.empty()) return {load_pairs(dir, mode), {}};
  return load_dataset(dir, SplitSpec::parse(split), mode);
}

Stages parse_stages(const std::string& s) {
  if (s == "first") return Stages::first;
  if (s == "both") return Stages::both;
  throw UsageError("stages must be 'first' or 'both', got '" + s + "'");
}

void write_text(const fs::path& path, const std::string& text, Context& ctx) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("write failed for " + path.string());
  ctx.artifacts.push_back(path);
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

SynthRanges ranges_from(const KeyValues& kv) {
  SynthRanges r;
  r.red_gain_min = kv_double(kv, "synth.red_gain_min", r.red_gain_min);
  r.red_gain_max = kv_double(kv, "synth.red_gain_max", r.red_gain_max);
  r.blue_gain_min = kv_double(kv, "synth.blue_gain_min", r.blue_gain_min);
  r.blue_gain_max = kv_double(kv, "synth.blue_gain_max", r.blue_gain_max);
  r.ccm_jitter = kv_double(kv, "synth.ccm_jitter", r.ccm_jitter);
  r.gamma_min = kv_double(kv, "synth.gamma_min", r.gamma_min);
  r.gamma_max = kv_double(kv, "synth.gamma_max", r.gamma_max);
  r.noise_sigma = kv_double(kv, "synth.noise_sigma", r.noise_sigma);
  r.max_shift = kv_double(kv, "synth.max_shift", r.max_shift);
  r.max_rotation_deg = kv_double(kv, "synth.max_rotation_deg", r.max_rotation_deg);
  return r;
}

int cmd_synth(Context& ctx, std::ostream& out) {
  SynthConfig sc;
  sc.count = kv_int(ctx.kv, "synth.count", sc.count);
  sc.height = kv_int(ctx.kv, "synth.height", sc.height);
  sc.width = kv_int(ctx.kv, "synth.width", sc.width);
  sc.seed = kv_u64(ctx.kv, "synth.seed", sc.seed);
  sc.ranges = ranges_from(ctx.kv);
  const fs::path dir = ctx.resolve(ctx.get("synth.out", "data"));
  const Dataset data = synth_dataset(sc);
  write_dataset(dir, data);
  ctx.artifacts.push_back(dir / "raw");
  ctx.artifacts.push_back(dir / "rgb");

  KeyValues manifest = sc.to_metadata();
  manifest["synth.pairs"] = std::to_string(data.size());
  manifest["synth.raw_format"] = "16-bit grayscale RGGB mosaic";
  manifest["synth.rgb_format"] = "8-bit RGB";
  for (std::size_t i = 0; i < data.size(); ++i) {
    char prefix[32];
    std::snprintf(prefix, sizeof prefix, "sample%03zu", i);
    for (const auto& [k, v] : data[i].params->to_metadata(prefix)) manifest[k] = v;
  }
  write_text(dir / "manifest.txt", format_key_values(manifest), ctx);
  out << "wrote " << data.size() << " pairs to " << dir.string() << "\n";
  return 0;
}

std::string history_line(const EpochRecord& r) {
  std::ostringstream s;
  s << std::setprecision(6) << r.phase << " " << r.epoch + 1 << " " << r.steps << " " << r.lr << " " << r.loss
    << " " << r.pixel << " " << r.feat << " " << r.color;
  return s.str();
}

int cmd_train(Context& ctx, std::ostream& out) {
  const ModelConfig mc = model_config(ctx.kv);
  TrainConfig tc = TrainConfig::from_key_values(ctx.kv);
  if (!tc.extractor.path.empty()) tc.extractor.path = ctx.resolve(tc.extractor.path).string();
  tc.validate();
  DatasetSplits splits = load_data(ctx, raw_mode_for_channels(mc.in_channels));
  const fs::path dir = ctx.resolve(ctx.get("train.out", "run"));

  std::string history = "# phase epoch steps lr loss pixel feat color\n";
  TrainOptions opts;
  opts.checkpoint_dir = dir;
  opts.on_epoch = [&](const EpochRecord& r) {
    history += history_line(r) + "\n";
    out << "phase " << r.phase << " epoch " << r.epoch + 1 << " loss " << r.loss << "\n";
  };
  Trainer trainer(mc, tc, splits.train, opts);
  try {
    trainer.run();
  } catch (...) {
    for (const auto& p : trainer.checkpoints()) ctx.artifacts.push_back(p);
    write_text(dir / "history.txt", history, ctx);
    throw;
  }
  for (const auto& p : trainer.checkpoints()) ctx.artifacts.push_back(p);
  write_text(dir / "history.txt", history, ctx);

  if (!splits.val.empty()) {
    std::optional<FeatureExtractor> fx;
    if (tc.loss.use_feat) fx = tc.extractor.build(tc.loss.feat_tap);
    EvalReport report =
        evaluate(trainer.model(), trainer.stats(), splits.val, tc.loss, fx ? &*fx : nullptr, EvalOptions{});
    report.config_digest = config_digest(trainer.checkpoint().metadata);
    write_text(dir / "eval.txt", report.to_text(), ctx);
    out << "validation PSNR " << report.mean_psnr << " dB, SSIM " << report.mean_ssim << "\n";
  }
  out << "final checkpoint " << (dir / "final.ckpt").string() << "\n";
  return 0;
}

std::optional<FeatureExtractor> extractor_for(const LoadedModel& m) {
  if (!m.train.loss.use_feat) return std::nullopt;
  return m.train.extractor.build(m.train.loss.feat_tap);
}

int cmd_eval(Context& ctx, std::ostream& out) {
  const LoadedModel m = LoadedModel::load(ctx.resolve(ctx.require_key("eval.checkpoint", "--checkpoint")));
  const DatasetSplits splits = load_data(ctx, raw_mode_for_channels(m.model->config().in_channels));
  const Dataset& data = splits.val.empty() ? splits.train : splits.val;
  const auto fx = extractor_for(m);
  EvalOptions opts;
  opts.stages = parse_stages(ctx.get("eval.stages", "both"));
  if (const std::string t = ctx.get("eval.triptychs", ""); !t.empty()) {
    opts.triptych_dir = ctx.resolve(t);
    ctx.artifacts.push_back(*opts.triptych_dir);
  }
  EvalReport report = evaluate(*m.model, m.stats, data, m.train.loss, fx ? &*fx : nullptr, opts);
  report.config_digest = config_digest(m.metadata);
  write_text(ctx.resolve(ctx.get("eval.report", "eval.txt")), report.to_text(), ctx);
  out << "PSNR " << report.mean_psnr << " dB, SSIM " << report.mean_ssim << " over " << data.size()
      << " images\n";
  return 0;
}

Tensor read_raw(const fs::path& path, const ModelConfig& mc) {
  const PngImage img = read_png(path);
  if (img.channels != 1) throw DataError(path.string() + ": raw input must be a single-channel mosaic");
  Tensor raw = png_to_tensor(img);
  if (mc.packed_input()) raw = pack_bayer(raw);
  return raw;
}

int cmd_infer(Context& ctx, std::ostream& out) {
  const LoadedModel m = LoadedModel::load(ctx.resolve(ctx.require_key("infer.checkpoint", "--checkpoint")));
  const Tensor raw = read_raw(ctx.resolve(ctx.require_key("infer.input", "--input")), m.model->config());
  const Prediction p = predict(*m.model, m.stats, raw, parse_stages(ctx.get("infer.stages", "both")));
  const fs::path dst = ctx.resolve(ctx.require_key("infer.output", "--output"));
  write_png(dst, tensor_to_png(clamp_unit(p.final())));
  ctx.artifacts.push_back(dst);
  out << "wrote " << dst.string() << "\n";
  return 0;
}

int cmd_ensemble(Context& ctx, std::ostream& out) {
  if (ctx.checkpoints.empty()) throw UsageError("--checkpoint is required at least once");
  std::vector<LoadedModel> members;
  std::string digests;
  for (const auto& c : ctx.checkpoints) {
    members.push_back(LoadedModel::load(ctx.resolve(c)));
    digests += config_digest(members.back().metadata) + "\n";
  }
  const ModelConfig& mc = members.front().model->config();
  for (const auto& m : members) {
    if (m.model->config().in_channels != mc.in_channels) {
      throw UsageError("ensemble members disagree on the raw input channels");
    }
  }
  std::vector<const WNet*> models;
  std::vector<const NormStats*> stats;
  for (const auto& m : members) {
    models.push_back(m.model.get());
    stats.push_back(&m.stats);
  }
  const Stages stages = parse_stages(ctx.get("ensemble.stages", "both"));

  if (const std::string input = ctx.get("ensemble.input", ""); !input.empty()) {
    const Prediction p = ensemble_predict(models, stats, read_raw(ctx.resolve(input), mc), stages);
    const fs::path dst = ctx.resolve(ctx.require_key("ensemble.output", "--output"));
    write_png(dst, tensor_to_png(clamp_unit(p.final())));
    ctx.artifacts.push_back(dst);
    out << "wrote " << dst.string() << "\n";
    return 0;
  }
  const DatasetSplits splits = load_data(ctx, raw_mode_for_channels(mc.in_channels));
  const Dataset& data = splits.val.empty() ? splits.train : splits.val;
  std::vector<Prediction> preds;
  for (const auto& s : data) preds.push_back(ensemble_predict(models, stats, s.raw, stages));
  const auto fx = extractor_for(members.front());
  EvalReport report =
      score_predictions(data, preds, members.front().stats, members.front().train.loss, fx ? &*fx : nullptr);
  report.config_digest = sha256_hex(digests);
  write_text(ctx.resolve(ctx.get("ensemble.report", "ensemble.txt")), report.to_text(), ctx);
  out << "ensemble of " << members.size() << ": PSNR " << report.mean_psnr << " dB, SSIM " << report.mean_ssim
      << "\n";
  return 0;
}

int cmd_gradcheck(Context& ctx, std::ostream& out) {
  const std::uint64_t seed = kv_u64(ctx.kv, "gradcheck.seed", 3);
  const auto results = gradcheck_suite(seed);
  std::ostringstream table;
  table << std::left << std::setw(24) << "op" << std::setw(6) << "prec" << std::setw(14) << "rel_error"
        << std::setw(12) << "tol" << std::setw(9) << "checked" << std::setw(9) << "skipped"
        << "result\n";
  bool all = true;
  for (const auto& r : results) {
    table << std::left << std::setw(24) << r.name << std::setw(6) << r.precision << std::setw(14)
          << std::setprecision(4) << std::scientific << r.relative_error << std::setw(12)
          << std::setprecision(1) << r.tolerance << std::defaultfloat << std::setw(9) << r.checked_elements
          << std::setw(9) << r.skipped_elements << (r.passed ? "PASS" : "FAIL") << "\n";
    all = all && r.passed;
  }
  table << (all ? "all " : "FAILED: not all ") << results.size() << " checks passed (seed " << seed << ")\n";
  out << table.str();
  if (const std::string report = ctx.get("gradcheck.report", ""); !report.empty()) {
    write_text(ctx.resolve(report), table.str(), ctx);
  }
  return all ? 0 : 2;
}

int cmd_inspect(Context& ctx, std::ostream& out) {
  const fs::path path = ctx.resolve(ctx.require_key("inspect.checkpoint", "--checkpoint"));
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  const auto records = Checkpoint::manifest(bytes);
  const Checkpoint ck = Checkpoint::deserialize(bytes);
  out << "file = " << path.string() << "\n";
  out << "format_version = " << Checkpoint::kFormatVersion << "\n";
  out << "digest = " << ck.digest() << " (verified)\n";
  out << "tensors = " << records.size() << "\n";
  out << "\n" << format_key_values(ck.metadata) << "\n# name dtype shape offset nbytes\n";
  for (const auto& r : records) {
    out << r.name << " " << r.dtype << " (";
    for (std::size_t i = 0; i < r.shape.size(); ++i) out << (i ? "," : "") << r.shape[i];
    out << ") " << r.offset << " " << r.nbytes << "\n";
  }
  return 0;
}

void write_manifest(const Context& ctx, const std::vector<std::string>& args, const std::string& command,
                    const std::string& start, int code, const std::string& error) {
  KeyValues m;
  std::string line;
  for (const auto& a : args) line += (line.empty() ? "" : " ") + a;
  m["run.command_line"] = line;
  m["run.subcommand"] = command;
  m["run.exit_code"] = std::to_string(code);
  m["run.status"] = code == 0 ? "success" : code == 1 ? "usage-error" : "failure";
  if (!error.empty()) m["run.error"] = error;
  m["run.config_digest"] = sha256_hex(format_key_values(ctx.kv));
  for (const char* key : {"train.seed", "synth.seed", "gradcheck.seed"}) {
    if (ctx.kv.count(key)) m["run.seed"] = ctx.kv.at(key);
  }
  m["run.toolkit_version"] = kToolkitVersion;
  m["run.start"] = start;
  m["run.end"] = utc_now();
  m["run.workdir"] = fs::absolute(ctx.workdir).string();
  for (std::size_t i = 0; i < ctx.artifacts.size(); ++i) {
    char key[32];
    std::snprintf(key, sizeof key, "artifacts.%03zu", i);
    m[key] = ctx.artifacts[i].string();
  }
  // Newlines would break the line format.
  for (auto& [k, v] : m) std::replace(v.begin(), v.end(), '\n', ' ');
  const fs::path path = ctx.resolve(ctx.manifest);
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream f(path);
  f << format_key_values(m);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const std::string start = utc_now();
  Context ctx;
  CLI::App app{"W-Net raw-to-RGB toolkit: synthesis, training, evaluation, inference and ensembling", "wnet"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.set_version_flag("--version", kToolkitVersion);

  std::map<std::string, std::function<int(Context&, std::ostream&)>> handlers;

  auto* synth = app.add_subcommand("synth", "Write a synthetic raw/RGB pair dataset and its manifest");
  add_common(synth, ctx);
  add_flags(synth, ctx,
            {{"--out", "synth.out", "Output dataset directory (default data)"},
             {"--seed", "synth.seed", "Generator seed"},
             {"--count", "synth.count", "Number of pairs"},
             {"--height", "synth.height", "Image height"},
             {"--width", "synth.width", "Image width"},
             {"--max-shift", "synth.max_shift", "Largest |dx|, |dy| misalignment in pixels (<= 4)"},
             {"--max-rotation", "synth.max_rotation_deg", "Largest misalignment rotation in degrees (<= 1)"},
             {"--noise-sigma", "synth.noise_sigma", "Gaussian sensor noise sigma"}});
  handlers["synth"] = cmd_synth;

  auto* train = app.add_subcommand("train", "Two-phase training; writes checkpoints, history and eval.txt");
  add_common(train, ctx);
  add_flags(train, ctx, kModelFlags);
  add_flags(train, ctx, kDataFlags);
  add_flags(train, ctx,
            {{"--out", "train.out", "Checkpoint directory (default run)"},
             {"--seed", "train.seed", "Training seed"},
             {"--batch-size", "train.batch_size", "Mini-batch size"},
             {"--stage1-epochs", "train.stage1_epochs", "Phase-1 epochs"},
             {"--stage2-epochs", "train.stage2_epochs", "Phase-2 epochs"},
             {"--lr", "train.lr_initial", "Learning rate"},
             {"--lr-final", "train.lr_final", "Learning rate of the last epoch of each phase"},
             {"--checkpoint-every", "train.checkpoint_every", "Epochs between checkpoints (0: phase ends)"},
             {"--pixel", "loss.use_pixel", "Enable the pixel term (true/false)"},
             {"--feat", "loss.use_feat", "Enable the feature term (true/false)"},
             {"--feat-tap", "loss.feat_tap", "Feature tap: relu4_1 or relu5_1"},
             {"--color", "loss.use_color", "Enable the color term (true/false)"},
             {"--extractor", "extractor.path", "Converted feature-extractor file (default: seeded random)"},
             {"--extractor-seed", "extractor.seed", "Seed of the random extractor"}});
  handlers["train"] = cmd_train;

  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a dataset; writes an EvalReport");
  add_common(eval, ctx);
  add_flags(eval, ctx, kDataFlags);
  add_flags(eval, ctx,
            {{"--checkpoint", "eval.checkpoint", "Checkpoint to evaluate"},
             {"--stages", "eval.stages", "first or both (default both)"},
             {"--report", "eval.report", "Report path (default eval.txt)"},
             {"--triptychs", "eval.triptychs", "Directory for input | prediction | target PNGs"}});
  handlers["eval"] = cmd_eval;

  auto* infer = app.add_subcommand("infer", "Convert one raw mosaic PNG to an RGB PNG");
  add_common(infer, ctx);
  add_flags(infer, ctx,
            {{"--checkpoint", "infer.checkpoint", "Checkpoint to run"},
             {"--input", "infer.input", "Raw mosaic PNG (8- or 16-bit grayscale)"},
             {"--output", "infer.output", "Output RGB PNG"},
             {"--stages", "infer.stages", "first or both (default both)"}});
  handlers["infer"] = cmd_infer;

  auto* ensemble = app.add_subcommand("ensemble", "Average the display-space outputs of several checkpoints");
  add_common(ensemble, ctx);
  ensemble->add_option("--checkpoint", ctx.checkpoints, "Member checkpoint (repeat for each member)");
  add_flags(ensemble, ctx, kDataFlags);
  add_flags(ensemble, ctx,
            {{"--input", "ensemble.input", "Single raw mosaic PNG instead of a dataset"},
             {"--output", "ensemble.output", "Output RGB PNG for --input"},
             {"--stages", "ensemble.stages", "first or both (default both)"},
             {"--report", "ensemble.report", "Report path for dataset mode (default ensemble.txt)"}});
  handlers["ensemble"] = cmd_ensemble;

  auto* grad = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
  add_common(grad, ctx);
  add_flags(grad, ctx,
            {{"--seed", "gradcheck.seed", "Input seed (default 3)"},
             {"--report", "gradcheck.report", "Also write the table to this file"}});
  handlers["gradcheck"] = cmd_gradcheck;

  auto* inspect = app.add_subcommand("inspect", "Print a checkpoint's header, metadata and tensor manifest");
  add_common(inspect, ctx);
  add_flags(inspect, ctx, {{"--checkpoint", "inspect.checkpoint", "Checkpoint to inspect"}});
  handlers["inspect"] = cmd_inspect;

  std::string command = "";
  int code = 0;
  std::string error;
  try {
    std::vector<std::string> rev(args.size() > 1 ? args.begin() + 1 : args.end(), args.end());
    std::reverse(rev.begin(), rev.end());
    app.parse(rev);
    for (auto* sub : app.get_subcommands()) command = sub->get_name();
    if (!ctx.config.empty()) ctx.kv = read_key_value_file(ctx.resolve(ctx.config));
    for (const auto& [key, opt] : ctx.bound) {
      if (opt->count() > 0) ctx.kv[key] = ctx.values[key];
    }
    if (!ctx.checkpoints.empty()) {
      std::string joined;
      for (const auto& c : ctx.checkpoints) joined += (joined.empty() ? "" : ",") + c;
      ctx.kv["ensemble.checkpoints"] = joined;
    }
    code = handlers.at(command)(ctx, out);
    if (code != 0) error = "command reported failure";
  } catch (const CLI::ParseError& e) {
    const int c = app.exit(e, out, err);
    for (auto* sub : app.get_subcommands()) command = sub->get_name();
    code = c == 0 ? 0 : 1;
    if (code != 0) error = e.what();
    // Help and version requests are not runs.
    if (code == 0) return 0;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    code = 1;
    error = e.what();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    code = 2;
    error = e.what();
  }
  try {
    write_manifest(ctx, args, command, start, code, error);
  } catch (const std::exception& e) {
    err << "warning: could not write the run manifest: " << e.what() << "\n";
  }
  return code;
}

}  // namespace wnet::cli
