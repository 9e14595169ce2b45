// Command-line front end: train, sample, explain, eval, schedule, dataset.

#include "bcosdiff/checkpoint.hpp"
#include "bcosdiff/image_io.hpp"
#include "bcosdiff/interpret.hpp"
#include "bcosdiff/report.hpp"
#include "bcosdiff/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace bcosdiff;
using nlohmann::json;

namespace {

enum Exit : int { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kNumeric = 4 };

struct Common {
  std::string out;
  std::string config_file;
  std::vector<std::string> overrides;  // key=value, applied after the file
};

struct Resolved {
  ModelConfig model;
  TrainConfig train;
};

std::pair<std::string, std::string> split_kv(const std::string& line) {
  const auto eq = line.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + line + "'");
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  return {trim(line.substr(0, eq)), trim(line.substr(eq + 1))};
}

// Keys prefixed "train." go to the trainer, everything else to the model.
void apply_setting(Resolved& r, const std::string& key, const std::string& value) {
  if (key.rfind("train.", 0) == 0) {
    r.train.set(key.substr(6), value);
  } else {
    r.model.set(key, value);
  }
}

void apply_config(Resolved& r, const Common& c) {
  if (!c.config_file.empty()) {
    std::ifstream is(c.config_file);
    if (!is) throw ConfigError("cannot read config file " + c.config_file);
    std::string line;
    while (std::getline(is, line)) {
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      const auto [k, v] = split_kv(line);
      apply_setting(r, k, v);
    }
  }
  for (const auto& o : c.overrides) {
    const auto [k, v] = split_kv(o);
    apply_setting(r, k, v);
  }
}

Resolved preset(const std::string& name) {
  Resolved r;
  if (name == "desk") return r;
  if (name == "paper") {
    r.model.image_size = 64;
    r.model.base_channels = 128;
    r.model.context_dim = 128;
    r.model.heads = 4;
    r.model.time_dim = 256;
    r.train.lr = 2e-6;
    r.train.lr_final = 2e-6;
    r.train.steps = 1000000;
    r.train.batch = 3;
    return r;
  }
  throw ConfigError("unknown preset '" + name + "' (expected desk or paper)");
}

fs::path prepare_out(const std::string& dir) {
  const fs::path p(dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw ConfigError("cannot create output directory " + dir);
  const fs::path probe = p / ".write-probe";
  {
    std::ofstream os(probe);
    if (!os) throw ConfigError("output directory is not writable: " + dir);
  }
  fs::remove(probe, ec);
  return p;
}

json map_json(const std::map<std::string, std::string>& m) {
  json j = json::object();
  for (const auto& [k, v] : m) j[k] = v;
  return j;
}

void write_manifest(const fs::path& out, const std::string& command, json fields) {
  fields["command"] = command;
  write_text((out / (command + ".manifest.json")).string(), fields.dump(2) + "\n");
}

DiffusionModel<float> load_model(const std::string& path) {
  if (path.empty()) throw ConfigError("--checkpoint is required");
  if (!fs::exists(path)) throw DataError("checkpoint not found: " + path);
  return model_from_checkpoint<float>(load_checkpoint(path));
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Min-max scaled view of the direct (RGB) half of a reconstruction.
Tensor<double> raw_view(const Tensor<double>& r) {
  const Index plane = 3 * r.dim(1) * r.dim(2);
  Tensor<double> img({3, r.dim(1), r.dim(2)});
  const auto head = r.array().head(plane);
  const double lo = head.minCoeff(), hi = head.maxCoeff();
  if (hi > lo) img.array() = (head - lo) / (hi - lo);
  return img;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string preset = "desk";
  bool yes = false;
  int steps = -1;
  long long seed = -1;
  std::string resume;
  int checkpoint_every = 1000;
  double bcos_b = 0;
  std::string target;
  int log_every = 100;
};

int cmd_train(const Common& c, const TrainArgs& a) {
  Resolved r = preset(a.preset);
  if (a.preset == "paper") {
    std::cerr << "warning: the paper preset trains a 64x64 model for 1e6 steps at batch 3; this takes weeks on a desk "
                 "machine\n";
    if (!a.yes) throw ConfigError("refusing to start the paper preset without --yes");
  }
  apply_config(r, c);
  if (a.steps >= 0) r.train.steps = a.steps;
  if (a.seed >= 0) r.train.seed = static_cast<std::uint64_t>(a.seed);
  if (a.bcos_b > 0) r.model.bcos_b = a.bcos_b;
  if (!a.target.empty()) r.model.target = parse_target(a.target);
  if (a.checkpoint_every < 1) throw ConfigError("--checkpoint-every must be >= 1");
  const fs::path out = prepare_out(c.out);

  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) {
    if (!fs::exists(a.resume)) throw DataError("checkpoint not found: " + a.resume);
    resume = load_checkpoint(a.resume);
    r.model = resume->config;
    for (const auto& [k, v] : resume->meta) {
      if (k.rfind("train.", 0) == 0) r.train.set(k.substr(6), v);
    }
    if (a.steps >= 0) r.train.steps = a.steps;
  }
  r.model.validate();

  DiffusionModel<float> model = resume ? model_from_checkpoint<float>(*resume)
                                       : DiffusionModel<float>(r.model, Vocabulary::standard());
  Trainer<float> trainer(model, r.train, build_dataset(Split::kTrain));
  if (resume) trainer.restore(*resume);

  write_manifest(out, "train",
                 {{"preset", a.preset},
                  {"resume", a.resume},
                  {"checkpoint_every", a.checkpoint_every},
                  {"model", map_json(r.model.entries())},
                  {"train", map_json(r.train.entries())},
                  {"parameters", model.parameter_count()}});

  // Keep the loss log consistent with the restored step.
  const fs::path log_path = out / "loss.txt";
  std::string kept;
  if (resume) {
    std::ifstream is(log_path);
    std::string line;
    while (std::getline(is, line)) {
      std::istringstream ls(line);
      int step = -1;
      if ((ls >> step) && step < trainer.step()) kept += line + "\n";
    }
  }
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw ConfigError("cannot write " + log_path.string());
  log << kept;

  std::cerr << "training " << model.parameter_count() << " parameters from step " << trainer.step() << " to "
            << r.train.steps << "\n";
  const auto t0 = std::chrono::steady_clock::now();
  double window = 0;
  int in_window = 0;
  while (trainer.step() < r.train.steps) {
    const int step = trainer.step();
    const double loss = trainer.advance();
    log << step << " " << fmt("%.9g", loss) << "\n";
    window += loss;
    ++in_window;
    if (trainer.step() % a.log_every == 0) {
      log.flush();
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cerr << "step " << trainer.step() << " loss " << fmt("%.5f", window / in_window) << " lr "
                << fmt("%.2e", r.train.lr_at(step)) << " " << fmt("%.0f", secs) << "s\n";
      window = 0;
      in_window = 0;
    }
    if (trainer.step() % a.checkpoint_every == 0) {
      char name[64];
      std::snprintf(name, sizeof name, "step_%07d.ckpt", trainer.step());
      save_checkpoint((out / name).string(), trainer.checkpoint());
    }
  }
  log.flush();
  save_checkpoint((out / "final.ckpt").string(), trainer.checkpoint());
  std::cout << (out / "final.ckpt").string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct SampleArgs {
  std::string checkpoint;
  std::vector<std::string> prompts;
  int steps = 25;
  std::uint64_t seed = 0;
  int count = 1;
  int scale = 1;
};

int cmd_sample(const Common& c, const SampleArgs& a) {
  Resolved r;
  apply_config(r, c);
  const DiffusionModel<float> model = load_model(a.checkpoint);
  if (a.count < 1) throw ConfigError("--count must be >= 1");
  const fs::path out = prepare_out(c.out);
  write_manifest(out, "sample",
                 {{"checkpoint", a.checkpoint},
                  {"prompts", a.prompts},
                  {"steps", a.steps},
                  {"seed", a.seed},
                  {"count", a.count},
                  {"scale", a.scale},
                  {"eta", 0.0},
                  {"model", map_json(model.config().entries())}});
  for (const auto& text : a.prompts) {
    const Prompt p = model.tokenize(text);
    for (int k = 0; k < a.count; ++k) {
      const std::uint64_t seed = a.seed + static_cast<std::uint64_t>(k);
      const auto traj = model.sample(p, a.steps, seed);
      const fs::path file = out / (slugify(text) + "_" + std::to_string(seed) + ".ppm");
      write_ppm(file.string(), traj.image.cast<double>(), a.scale);
      std::cout << file.string() << "\n";
    }
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct ExplainArgs {
  std::string checkpoint;
  std::string prompt;
  int steps = 4;
  std::uint64_t seed = 0;
  double theta = 0.02;
  int scale = 8;
};

int cmd_explain(const Common& c, const ExplainArgs& a) {
  Resolved r;
  apply_config(r, c);
  const DiffusionModel<double> model = load_model(a.checkpoint).cast<double>();
  const fs::path out = prepare_out(c.out);
  const Prompt p = model.tokenize(a.prompt);
  const FrozenRun<double> run(model, p, a.steps, a.seed);
  const Shape& s = run.sample().shape();
  const Tensor<double> sample = decode_image(run.sample().reshaped({s[1], s[2], s[3]}));
  const Tensor<double> recon = reconstruction(run);
  const auto norm = normalize_reconstruction(recon);
  const RelevanceReport rep = relevance_scores(run);
  const double bias = bias_fraction(run);
  const double mse = defined_mse(norm, sample);

  const std::string stem = slugify(a.prompt) + "_" + std::to_string(a.seed);
  write_ppm((out / (stem + "_sample.ppm")).string(), sample, a.scale);
  write_ppm((out / (stem + "_recon_raw.ppm")).string(), raw_view(recon), a.scale);
  write_ppm((out / (stem + "_recon_norm.ppm")).string(), norm.image, a.scale);

  std::vector<std::string> maps;
  for (const auto& t : rep.tokens) {
    const Tensor<double> m = token_attribution_map(run, t.position);
    const bool word = std::any_of(t.token.begin(), t.token.end(), [](unsigned char ch) { return std::isalnum(ch); });
    const std::string name = stem + "_token" + std::to_string(t.position) + "_" + (word ? slugify(t.token) : "punct") + ".ppm";
    write_ppm((out / name).string(), diverging_colormap(m), a.scale);
    maps.push_back(name);
  }
  std::string table = relevance_table(rep, a.theta);
  table += "bias/sample norm: " + fmt("%.6f", bias) + "\n";
  table += "normalized reconstruction mse: " + fmt("%.6e", mse) + " (" + std::to_string(norm.undefined) +
           " undefined values)\n";
  write_text((out / (stem + "_relevance.txt")).string(), table);
  write_text((out / (stem + "_relevance.jsonl")).string(), relevance_jsonl(rep, maps));
  write_manifest(out, "explain",
                 {{"checkpoint", a.checkpoint},
                  {"prompt", a.prompt},
                  {"steps", a.steps},
                  {"seed", a.seed},
                  {"theta", a.theta},
                  {"scale", a.scale},
                  {"model", map_json(model.config().entries())}});

  std::cout << table;
  std::size_t low = 0;
  for (const auto& t : rep.tokens) low += t.score < a.theta;
  if (low) std::cout << low << " token(s) below " << a.theta << ": consider regenerating\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  int prompts = 240;
  int relevance_steps = 4;
  int sample_steps = 25;
  int per_prompt = 2;
  std::uint64_t seed = 0;
};

int cmd_eval(const Common& c, const EvalArgs& a) {
  Resolved r;
  apply_config(r, c);
  const DiffusionModel<float> model = load_model(a.checkpoint);
  const DiffusionModel<double> wide = model.cast<double>();
  const fs::path out = prepare_out(c.out);
  const auto suite = relevance_prompt_suite(static_cast<std::size_t>(a.prompts));
  const RelevanceSummary rs = summarize_relevance(wide, suite, a.relevance_steps, a.seed);
  const auto colors = color_eval_prompts();
  const ColorAccuracy acc = eval_color_accuracy(model, colors, a.per_prompt, a.sample_steps, a.seed);
  const ColorAccuracy masked = eval_color_accuracy(model, colors, a.per_prompt, a.sample_steps, a.seed, true);

  std::string text = summary_table(rs);
  text += "color accuracy: " + fmt("%.4f", acc.accuracy()) + " (" + std::to_string(acc.correct) + "/" +
          std::to_string(acc.total) + ")\n";
  text += "color accuracy, color masked: " + fmt("%.4f", masked.accuracy()) + " (" + std::to_string(masked.correct) +
          "/" + std::to_string(masked.total) + ")\n";
  text += "chance: " + fmt("%.4f", 1.0 / 5.0) + "\n";

  json tokens = json::array();
  for (const auto& t : rs.tokens) tokens.push_back({{"token", t.token}, {"kind", word_kind_name(t.kind)}, {"count", t.count}, {"mean", t.mean}});
  const json report{{"prompts", rs.prompts},
                    {"tokens", tokens},
                    {"content_mean", rs.content_mean},
                    {"filler_mean", rs.filler_mean},
                    {"masked_max", rs.special_max},
                    {"frequency_pearson", rs.frequency_pearson},
                    {"color_accuracy", acc.accuracy()},
                    {"color_accuracy_masked", masked.accuracy()},
                    {"color_samples", acc.total}};
  write_text((out / "eval.txt").string(), text);
  write_text((out / "eval.json").string(), report.dump(2) + "\n");
  write_manifest(out, "eval",
                 {{"checkpoint", a.checkpoint},
                  {"prompts", a.prompts},
                  {"relevance_steps", a.relevance_steps},
                  {"sample_steps", a.sample_steps},
                  {"per_prompt", a.per_prompt},
                  {"seed", a.seed},
                  {"model", map_json(model.config().entries())}});
  std::cout << text;
  return kOk;
}

// ---------------------------------------------------------------------------

int cmd_schedule(const Common& c, int T) {
  Resolved r;
  apply_config(r, c);
  if (T > 0) r.model.T = T;
  const DiffusionSchedule s = r.model.schedule();
  const fs::path out = prepare_out(c.out);
  std::string text = "t beta alpha alpha_bar\n";
  for (int t = 1; t <= s.T(); ++t) {
    char line[128];
    std::snprintf(line, sizeof line, "%d %.17g %.17g %.17g\n", t, s.beta(t), s.alpha(t), s.alpha_bar(t));
    text += line;
  }
  const double ab = s.alpha_bar(s.T());
  char tail[256];
  std::snprintf(tail, sizeof tail, "terminal mean: %.17g\nterminal variance: %.17g\nalpha_bar_T: %.17g%s\n", r.model.mu,
                r.model.sigma * r.model.sigma * (1.0 - ab), ab, s.reaches_noise() ? "" : " (does not reach noise)");
  text += tail;
  write_manifest(out, "schedule", {{"model", map_json(r.model.entries())}});
  std::cout << text;
  return kOk;
}

int cmd_dataset(const Common& c) {
  Resolved r;
  apply_config(r, c);
  const fs::path out = prepare_out(c.out);
  const std::string manifest = dataset_manifest(Vocabulary::standard(), r.model.max_tokens);
  write_text((out / "dataset.jsonl").string(), manifest);
  write_manifest(out, "dataset", {{"model", map_json(r.model.entries())}});
  std::cout << (out / "dataset.jsonl").string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"B-cos text-to-image diffusion at desk scale"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  const char* env_out = std::getenv("BCOSDIFF_OUT");
  common.out = env_out && *env_out ? env_out : "bcosdiff_out";
  app.add_option("--out,-o", common.out, "output directory (default $BCOSDIFF_OUT or ./bcosdiff_out)");
  app.add_option("--config", common.config_file, "key=value config file");
  app.add_option("--set", common.overrides, "key=value override, applied after --config")->take_all();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a model and write checkpoints and a loss log");
  train->add_option("--preset", ta.preset, "desk or paper")->capture_default_str();
  train->add_flag("--yes", ta.yes, "confirm a long-running preset");
  train->add_option("--steps", ta.steps, "total optimizer steps");
  train->add_option("--seed", ta.seed, "training seed");
  train->add_option("--resume", ta.resume, "checkpoint to continue from");
  train->add_option("--checkpoint-every", ta.checkpoint_every)->capture_default_str();
  train->add_option("--log-every", ta.log_every)->capture_default_str();
  train->add_option("--bcos-b", ta.bcos_b, "alignment exponent B");
  train->add_option("--target", ta.target, "x0 or eps");

  SampleArgs sa;
  auto* sample = app.add_subcommand("sample", "generate images");
  sample->add_option("--checkpoint,-c", sa.checkpoint)->required();
  sample->add_option("--prompt,-p", sa.prompts)->required();
  sample->add_option("--steps", sa.steps)->capture_default_str();
  sample->add_option("--seed", sa.seed)->capture_default_str();
  sample->add_option("--count", sa.count, "images per prompt, seeds seed..seed+count-1")->capture_default_str();
  sample->add_option("--scale", sa.scale, "pixel replication")->capture_default_str();

  ExplainArgs ea;
  auto* explain = app.add_subcommand("explain", "reconstruct a sample from its prompt and score tokens");
  explain->add_option("--checkpoint,-c", ea.checkpoint)->required();
  explain->add_option("--prompt,-p", ea.prompt)->required();
  explain->add_option("--steps", ea.steps)->capture_default_str();
  explain->add_option("--seed", ea.seed)->capture_default_str();
  explain->add_option("--theta", ea.theta, "low-relevance threshold")->capture_default_str();
  explain->add_option("--scale", ea.scale)->capture_default_str();

  EvalArgs va;
  auto* eval = app.add_subcommand("eval", "token relevance statistics and color accuracy");
  eval->add_option("--checkpoint,-c", va.checkpoint)->required();
  eval->add_option("--prompts", va.prompts)->capture_default_str();
  eval->add_option("--relevance-steps", va.relevance_steps)->capture_default_str();
  eval->add_option("--sample-steps", va.sample_steps)->capture_default_str();
  eval->add_option("--per-prompt", va.per_prompt)->capture_default_str();
  eval->add_option("--seed", va.seed)->capture_default_str();

  int schedule_T = 0;
  auto* schedule = app.add_subcommand("schedule", "print the noise schedule");
  schedule->add_option("--T", schedule_T, "number of diffusion steps");

  auto* dataset = app.add_subcommand("dataset", "write the dataset manifest");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (*train) return cmd_train(common, ta);
    if (*sample) return cmd_sample(common, sa);
    if (*explain) return cmd_explain(common, ea);
    if (*eval) return cmd_eval(common, va);
    if (*schedule) return cmd_schedule(common, schedule_T);
    if (*dataset) return cmd_dataset(common);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
  return kOther;
}
