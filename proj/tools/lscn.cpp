#include <png.h>

#include <Eigen/Core>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lscn/lscn.hpp"

namespace fs = std::filesystem;
using lscn::Json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

// ---------------------------------------------------------------------------
// Provenance

struct RunRecord {
  std::string subcommand;
  std::vector<std::string> argv;
  std::string config_file;
  Json resolved = Json::object();
  Json sources = Json::object();
  std::vector<std::string> outputs;
  std::string run_json_path;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  bool single_thread = false;
};

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

Json versions() {
  return {{"lscn", lscn::kVersion},
          {"compiler", __VERSION__},
          {"cxx_standard", __cplusplus},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
          {"cli11", CLI11_VERSION},
          {"libpng", PNG_LIBPNG_VER_STRING}};
}

/// Timestamps and wall time are the only fields that differ between
/// identical reruns.
void write_run_record(const RunRecord& r, int exit_code, const std::string& error, const std::string& started,
                      double seconds) {
  if (r.run_json_path.empty()) return;
  Json j = {{"tool", "lscn"},
            {"subcommand", r.subcommand},
            {"argv", r.argv},
            {"config_file", r.config_file.empty() ? Json(nullptr) : Json(r.config_file)},
            {"config", r.resolved},
            {"config_sources", r.sources},
            {"config_hash", hex64(lscn::hash_string(r.resolved.dump()))},
            {"seed", r.seed},
            {"threads", r.threads},
            {"single_thread", r.single_thread},
            {"versions", versions()},
            {"outputs", r.outputs},
            {"exit_code", exit_code},
            {"error", error.empty() ? Json(nullptr) : Json(error)},
            {"started_at", started},
            {"wall_time_seconds", seconds}};
  try {
    fs::create_directories(fs::path(r.run_json_path).parent_path().empty() ? fs::path(".")
                                                                          : fs::path(r.run_json_path).parent_path());
    lscn::detail::write_text_file(r.run_json_path, j.dump(2) + "\n");
  } catch (const std::exception& e) {
    std::cerr << "lscn: could not write run record: " << e.what() << "\n";
  }
}

// ---------------------------------------------------------------------------
// Config file: flat JSON object whose keys are long option names
// (underscores and dashes interchangeable). Flags given on the command line
// win over the file; the file wins over built-in defaults.

void apply_config_file(CLI::App* sub, const std::string& path, RunRecord& rec) {
  const Json j = lscn::detail::read_json_file(path);
  if (!j.is_object()) throw lscn::ValidationError(path, "config file must hold a JSON object");
  for (const auto& [key, value] : j.items()) {
    std::string name = key;
    std::replace(name.begin(), name.end(), '_', '-');
    CLI::Option* op = sub->get_option_no_throw("--" + name);
    if (op == nullptr || name == "config" || name == "help")
      throw lscn::ValidationError("config." + key, "unknown key for '" + sub->get_name() + "'");
    if (op->count() > 0) continue;
    auto to_str = [&](const Json& v) -> std::string {
      if (v.is_string()) return v.get<std::string>();
      if (v.is_object() || v.is_null()) throw lscn::ValidationError("config." + key, "unsupported value");
      return v.dump();
    };
    if (value.is_array()) {
      if (value.empty()) throw lscn::ValidationError("config." + key, "empty list");
      for (const auto& e : value) op->add_result(to_str(e));
    } else {
      op->add_result(to_str(value));
    }
    try {
      op->run_callback();
    } catch (const CLI::Error& e) {
      throw lscn::ValidationError("config." + key, e.what());
    }
    rec.sources[name] = "config";
  }
}

/// Effective value of every option of `sub`, for provenance.
void resolve_options(CLI::App* sub, RunRecord& rec) {
  for (const CLI::Option* op : sub->get_options()) {
    const std::string name = op->get_single_name();
    if (name == "help" || name == "config" || name.empty()) continue;
    if (!rec.sources.contains(name)) rec.sources[name] = op->count() > 0 ? "flag" : "default";
    if (op->get_expected_max() == 0) {
      rec.resolved[name] = op->count() > 0;
    } else if (op->count() > 0) {
      const auto& res = op->results();
      rec.resolved[name] = res.size() == 1 && op->get_expected_max() <= 1 ? Json(res[0]) : Json(res);
    } else {
      rec.resolved[name] = op->get_default_str();
    }
  }
}

// ---------------------------------------------------------------------------
// Shared helpers

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw lscn::ValidationError(what, "path required");
  if (!fs::is_regular_file(path)) throw lscn::ValidationError(what, "file not found: " + path);
}

fs::path parent_or_dot(const std::string& path) {
  const fs::path p = fs::path(path).parent_path();
  return p.empty() ? fs::path(".") : p;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw lscn::RuntimeFailure("cannot create directory " + dir.string());
}

std::vector<lscn::Image> load_images(const lscn::DatasetManifest& m, const std::string& manifest_path,
                                     const std::string& images_dir) {
  const fs::path root = images_dir.empty() ? parent_or_dot(manifest_path) : fs::path(images_dir);
  std::vector<lscn::Image> out;
  out.reserve(m.images.size());
  for (const auto& rec : m.images) {
    const fs::path p = root / rec.source;
    if (!fs::is_regular_file(p)) throw lscn::ValidationError(rec.id, "image file not found: " + p.string());
    lscn::Image img = lscn::read_png(p.string());
    if (img.width != rec.width || img.height != rec.height)
      throw lscn::ValidationError(rec.id, "image size differs from the manifest");
    out.push_back(std::move(img));
  }
  return out;
}

std::vector<int> parse_novel(const std::vector<int>& novel, const std::string& split_path,
                             const lscn::DatasetManifest& m) {
  if (!split_path.empty()) {
    require_file(split_path, "--split");
    return lscn::load_split(split_path, m).novel_class_ids;
  }
  for (int c : novel)
    if (c < 0 || c >= m.num_classes()) throw lscn::ValidationError("--novel", "unknown class id " + std::to_string(c));
  return novel;
}

lscn::LogLevel parse_level(const std::string& s) {
  if (s == "debug") return lscn::LogLevel::kDebug;
  if (s == "info") return lscn::LogLevel::kInfo;
  if (s == "error") return lscn::LogLevel::kError;
  return lscn::LogLevel::kWarning;
}

// ---------------------------------------------------------------------------
// Options

struct GlobalOptions {
  bool single_thread = false;
  std::size_t threads = 0;
  std::string log_level = "warning";
  std::string run_json;
};

struct GenerateOptions {
  std::string out;
  int classes = 12;
  int images = 200;
  std::uint64_t seed = 7;
  std::vector<int> rare_classes;
  double rare_fraction = 0.0;
  int canvas = 128;
  int min_objects = 1, max_objects = 4;
  int min_size = 18, max_size = 40;
  double clutter = 6.0;
};

struct SimulateOptions {
  std::string manifest, out, split;
  std::string noise = "degraded";
  std::vector<int> novel;
  std::uint64_t seed = 11;
  double base_accuracy = 0.8, novel_accuracy = 0.3;
  double jitter = -1.0, concentration = -1.0, fp_rate = -1.0;
};

struct SplitOptions {
  std::string manifest, out;
  std::vector<int> novel;
  int k = 5;
  std::uint64_t seed = 3;
};

struct TrainOptions {
  std::string manifest, detections, split, checkpoint, out, images_dir;
  std::vector<int> novel;
  int phase = 1;
  lscn::TrainConfig cfg;
};

struct ImprintOptions {
  std::string manifest, detections, split, checkpoint, out, images_dir;
  lscn::TrainConfig cfg;
};

struct RefineOptions {
  std::string manifest, detections, checkpoint, out, images_dir;
  std::size_t batch_size = 64;
};

struct EvaluateOptions {
  std::string manifest, detections, split, out;
  std::vector<int> novel;
  std::string ap_variant = "all-point";
  bool histogram = false;
  int bins = 10;
  std::string histogram_mode = "same-class";
  std::vector<double> oracle_thresholds;
  std::string oracle_mode = "combined";
  int top_t = 300;
};

struct AnalyzeOptions {
  std::string manifest, detections, split, out;
  std::vector<int> novel;
  int bins = 10;
  std::string histogram_mode = "same-class";
  std::vector<double> thresholds{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::string oracle_mode = "combined";
  int top_t = 300;
  bool no_plots = false;
};

void add_train_config_options(CLI::App* sub, lscn::TrainConfig& c) {
  sub->add_option("--images-per-batch", c.images_per_batch, "Images per batch (N)");
  sub->add_option("--boxes-per-image", c.boxes_per_image, "Boxes sampled per image (M)");
  sub->add_option("--logit-scale", c.logit_scale, "Cosine logit scale alpha");
  sub->add_option("--margin", c.margin, "Hinge margin m");
  sub->add_option("--jitter-scale", c.jitter_scale, "Box jitter scale (0 disables)");
  sub->add_option("--phase1-lr", c.phase1_lr, "Phase-1 learning rate");
  sub->add_option("--lr-decay-at", c.lr_decay_at, "Fraction of phase-1 iterations after which LR decays");
  sub->add_option("--lr-decay", c.lr_decay, "Phase-1 LR decay factor");
  sub->add_option("--phase2-lr", c.phase2_lr, "Phase-2 learning rate");
  sub->add_option("--phase1-iterations", c.phase1_iterations, "Phase-1 iterations");
  sub->add_option("--phase2-iterations", c.phase2_iterations, "Phase-2 iterations");
  sub->add_option("--novel-oversampling", c.novel_oversampling, "Draw weight of novel-shot images vs base images");
  sub->add_option("--momentum", c.momentum, "SGD momentum");
  sub->add_option("--weight-decay", c.weight_decay, "L2 weight decay");
  sub->add_option("--grad-clip-norm", c.grad_clip_norm, "Global gradient-norm clip (0 disables)");
  sub->add_option("--seed", c.seed, "Random seed");
  sub->add_option("--crop-size", c.extractor.input_size, "Crop size S");
  sub->add_option("--channels", c.extractor.channels, "Channels per conv stage");
  sub->add_option("--embedding-dim", c.extractor.embedding_dim, "Embedding dimension d");
  sub->add_option("--cgnl-stage", c.extractor.cgnl_stage, "Stage after which the non-local block runs (0: none)");
  sub->add_option("--foreground-iou", c.grouping.foreground_iou, "Foreground IoU threshold");
  sub->add_option("--background-iou", c.grouping.background_iou, "Background IoU ceiling");
  sub->add_option("--top-t", c.grouping.top_t, "Detections kept per image");
  sub->add_option("--require-class-match", c.grouping.require_class_match,
                  "Foreground also requires the predicted class to match (true/false)");
  sub->add_flag("--literal-bg-equation", c.literal_bg_equation, "Use the literal sign convention of the bg loss");
  sub->add_flag("--mean-normalize-hinge", c.mean_normalize_hinge, "Average hinge terms instead of summing");
  sub->add_flag("--freeze-imprinted", c.freeze_imprinted, "Keep imprinted novel rows fixed in phase 2");
  sub->add_option("--background-samples", c.background_samples, "Background embeddings pooled for the bg row");
  sub->add_option("--heldout-images", c.heldout_images, "Base images held out of training");
  sub->add_option("--eval-every", c.eval_every, "Iterations between held-out snapshots");
}

void print_table(const lscn::EvalReport& r) {
  std::printf("%-4s %-22s %-6s %8s %8s %8s\n", "id", "class", "split", "AP50", "AP75", "AP");
  auto f = [](const std::optional<double>& v) {
    char b[16];
    if (v)
      std::snprintf(b, sizeof b, "%8.2f", 100.0 * *v);
    else
      std::snprintf(b, sizeof b, "%8s", "-");
    return std::string(b);
  };
  for (const auto& c : r.per_class)
    std::printf("%-4d %-22s %-6s %s %s %s\n", c.class_id, c.name.c_str(), c.novel ? "novel" : "base",
                f(c.ap50).c_str(), f(c.ap75).c_str(), f(c.ap).c_str());
  for (const auto& [name, m] : {std::pair{"base", r.base}, std::pair{"novel", r.novel}, std::pair{"all", r.all}})
    std::printf("%-4s %-22s %-6s %8.2f %8.2f %8.2f\n", "", "mean", name, 100 * m.ap50, 100 * m.ap75, 100 * m.ap);
}

lscn::HistogramMode parse_hist_mode(const std::string& s) {
  return s == "class-agnostic" ? lscn::HistogramMode::kClassAgnostic : lscn::HistogramMode::kSameClass;
}

lscn::OracleMode parse_oracle_mode(const std::string& s) {
  if (s == "suppress") return lscn::OracleMode::kSuppressOnly;
  if (s == "correct") return lscn::OracleMode::kCorrectOnly;
  return lscn::OracleMode::kCombined;
}

// ---------------------------------------------------------------------------
// Subcommands

void cmd_generate(const GenerateOptions& o, RunRecord& rec) {
  lscn::SceneSpec spec;
  spec.num_classes = o.classes;
  spec.canvas_width = spec.canvas_height = o.canvas;
  spec.min_objects = o.min_objects;
  spec.max_objects = o.max_objects;
  spec.min_object_size = o.min_size;
  spec.max_object_size = o.max_size;
  spec.clutter_density = o.clutter;
  spec.rare_classes = o.rare_classes;
  spec.rare_image_fraction = o.rare_fraction;
  spec.validate();
  if (o.images < 1) throw lscn::ValidationError("--images", "must be at least 1");
  const fs::path dir(o.out);
  ensure_dir(dir);
  const auto ds = lscn::generate_dataset(spec, o.images, o.seed);
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    const fs::path p = dir / ds.manifest.images[i].source;
    ensure_dir(parent_or_dot(p.string()));
    lscn::write_png(ds.images[i], p.string());
  }
  lscn::save_manifest(ds.manifest, (dir / "manifest.json").string());
  rec.outputs.push_back((dir / "manifest.json").string());
  std::printf("wrote %zu images, %zu annotations, %d classes to %s\n", ds.manifest.images.size(),
              ds.manifest.annotations.size(), ds.manifest.num_classes(), o.out.c_str());
}

void cmd_simulate(const SimulateOptions& o, RunRecord& rec) {
  require_file(o.manifest, "--manifest");
  const auto m = lscn::load_manifest(o.manifest);
  const auto novel = parse_novel(o.novel, o.split, m);
  lscn::DetectorNoise noise;
  if (o.noise == "noiseless")
    noise = lscn::DetectorNoise::noiseless(m.num_classes());
  else if (o.noise == "degraded")
    noise = lscn::DetectorNoise::degraded_novel(m.num_classes(), novel, o.base_accuracy, o.novel_accuracy);
  else
    throw lscn::ValidationError("--noise", "expected noiseless or degraded");
  if (o.jitter >= 0.0) noise.jitter_scale = o.jitter;
  if (o.concentration > 0.0) noise.concentration = o.concentration;
  if (o.fp_rate >= 0.0) noise.false_positive_rate = o.fp_rate;
  const auto dets = lscn::simulate_detections(m, noise, novel, o.seed);
  ensure_dir(parent_or_dot(o.out));
  lscn::save_detections(dets, o.out);
  rec.outputs.push_back(o.out);
  std::printf("wrote %zu detections to %s\n", dets.size(), o.out.c_str());
}

void cmd_split(const SplitOptions& o, RunRecord& rec) {
  require_file(o.manifest, "--manifest");
  const auto m = lscn::load_manifest(o.manifest);
  if (o.novel.empty()) throw lscn::ValidationError("--novel", "at least one novel class required");
  const auto split = lscn::make_kshot_split(m, o.novel, o.k, o.seed);
  ensure_dir(parent_or_dot(o.out));
  lscn::save_split(split, o.out);
  rec.outputs.push_back(o.out);
  std::printf("selected %zu novel annotations (k=%d) into %s\n", split.selected_novel_annotation_ids.size(), o.k,
              o.out.c_str());
}

void cmd_train(TrainOptions o, RunRecord& rec) {
  require_file(o.manifest, "--manifest");
  require_file(o.detections, "--detections");
  if (o.phase != 1 && o.phase != 2) throw lscn::ValidationError("--phase", "must be 1 or 2");
  if (o.phase == 2) {
    require_file(o.checkpoint, "--checkpoint");
    require_file(o.split, "--split");
  }
  o.cfg.threads = rec.threads;
  o.cfg.validate();
  const auto m = lscn::load_manifest(o.manifest);
  const auto dets = lscn::load_detections(o.detections, m);
  const fs::path dir(o.out);
  ensure_dir(dir);

  std::optional<lscn::Model> start;
  if (o.phase == 2) {
    start = lscn::load_checkpoint<lscn::Real>(o.checkpoint);
    if (start->stage != "imprinted")
      throw lscn::ValidationError("--checkpoint", "phase 2 needs an imprinted checkpoint (got stage '" + start->stage +
                                                      "'); run imprint first");
    if (start->class_names != m.class_names)
      throw lscn::ValidationError("--checkpoint", "class list differs from the manifest");
  }
  const auto images = load_images(m, o.manifest, o.images_dir);
  const lscn::TrainingSet data(m, images, dets);

  lscn::Model model = o.phase == 1 ? lscn::initial_model(o.cfg, m, {}) : *start;
  lscn::TrainReport report;
  if (o.phase == 1) {
    const auto novel = parse_novel(o.novel, o.split, m);
    std::tie(model, report) = lscn::train_phase1(data, novel, o.cfg);
  } else {
    const auto split = lscn::load_split(o.split, m);
    std::tie(model, report) = lscn::train_phase2(*start, data, split, o.cfg);
  }
  const std::string ckpt = (dir / ("checkpoint_phase" + std::to_string(o.phase) + ".json")).string();
  report.checkpoint_path = ckpt;
  lscn::save_checkpoint(model, ckpt);
  const std::string rep = (dir / ("train_report_phase" + std::to_string(o.phase) + ".json")).string();
  Json rj = lscn::train_report_to_json(report);
  rj["config"] = lscn::train_config_to_json(o.cfg);
  lscn::detail::write_text_file(rep, rj.dump(1) + "\n");
  rec.outputs = {ckpt, rep};
  if (!report.snapshots.empty())
    std::printf("phase %d: %zu iterations, held-out cls %.4f -> %.4f, %.1fs\n", o.phase, report.iterations.size(),
                report.snapshots.front().heldout_cls, report.snapshots.back().heldout_cls, report.wall_time_seconds);
}

void cmd_imprint(ImprintOptions o, RunRecord& rec) {
  for (auto [p, n] : {std::pair{&o.checkpoint, "--checkpoint"}, std::pair{&o.manifest, "--manifest"},
                      std::pair{&o.detections, "--detections"}, std::pair{&o.split, "--split"}})
    require_file(*p, n);
  o.cfg.threads = rec.threads;
  const auto m = lscn::load_manifest(o.manifest);
  const auto model = lscn::load_checkpoint<lscn::Real>(o.checkpoint);
  if (model.stage != "phase1")
    throw lscn::ValidationError("--checkpoint", "imprinting needs a phase-1 checkpoint (got stage '" + model.stage +
                                                    "'); run train --phase 1 first");
  if (model.class_names != m.class_names)
    throw lscn::ValidationError("--checkpoint", "class list differs from the manifest");
  const auto split = lscn::load_split(o.split, m);
  const auto dets = lscn::load_detections(o.detections, m);
  const auto images = load_images(m, o.manifest, o.images_dir);
  const lscn::TrainingSet data(m, images, dets);
  auto out = lscn::imprint_and_infer(model, data, split, o.cfg);
  out.novel_class_ids = split.novel_class_ids;
  ensure_dir(parent_or_dot(o.out));
  lscn::save_checkpoint(out, o.out);
  rec.outputs.push_back(o.out);
  std::printf("imprinted %zu novel classes from %zu shots into %s\n", split.novel_class_ids.size(),
              split.selected_novel_annotation_ids.size(), o.out.c_str());
}

void cmd_refine(const RefineOptions& o, RunRecord& rec) {
  require_file(o.checkpoint, "--checkpoint");
  require_file(o.manifest, "--manifest");
  require_file(o.detections, "--detections");
  if (o.batch_size == 0) throw lscn::ValidationError("--batch-size", "must be positive");
  const auto m = lscn::load_manifest(o.manifest);
  const auto model = lscn::load_checkpoint<lscn::Real>(o.checkpoint);
  if (model.stage != "imprinted" && model.stage != "phase2")
    throw lscn::ValidationError("--checkpoint", "refinement needs an imprinted or phase-2 checkpoint (got stage '" +
                                                    model.stage + "'); run train and imprint first");
  if (model.class_names != m.class_names)
    throw lscn::ValidationError("--checkpoint", "class list differs from the manifest");
  const auto dets = lscn::load_detections(o.detections, m);
  const auto images = load_images(m, o.manifest, o.images_dir);
  const auto by_image = lscn::detections_by_image(dets);
  std::vector<lscn::RefinedDetection> refined;
  refined.reserve(dets.size());
  for (std::size_t i = 0; i < m.images.size(); ++i) {
    auto it = by_image.find(m.images[i].id);
    if (it == by_image.end()) continue;
    std::vector<lscn::Detection> mine;
    for (std::size_t j : it->second) mine.push_back(dets[j]);
    for (auto& r : lscn::refine_detections(images[i], mine, model, o.batch_size, rec.threads))
      refined.push_back(std::move(r));
  }
  ensure_dir(parent_or_dot(o.out));
  lscn::detail::write_text_file(o.out, lscn::refined_to_json(refined).dump(1) + "\n");
  rec.outputs.push_back(o.out);
  std::printf("refined %zu detections into %s\n", refined.size(), o.out.c_str());
}

void cmd_evaluate(const EvaluateOptions& o, RunRecord& rec) {
  require_file(o.manifest, "--manifest");
  require_file(o.detections, "--detections");
  const auto m = lscn::load_manifest(o.manifest);
  const auto novel = parse_novel(o.novel, o.split, m);
  const auto dets = lscn::load_detections(o.detections, m);
  lscn::EvalOptions opt;
  if (o.ap_variant == "11-point")
    opt.variant = lscn::ApVariant::kElevenPoint;
  else if (o.ap_variant != "all-point")
    throw lscn::ValidationError("--ap-variant", "expected all-point or 11-point");
  opt.with_histogram = o.histogram;
  opt.histogram_bins = o.bins;
  opt.histogram_mode = parse_hist_mode(o.histogram_mode);
  opt.oracle_thresholds = o.oracle_thresholds;
  opt.oracle.mode = parse_oracle_mode(o.oracle_mode);
  opt.oracle.top_t = o.top_t;
  if (o.bins < 1) throw lscn::ValidationError("--bins", "must be at least 1");
  const auto report = lscn::evaluate(dets, m, novel, opt);
  Json j = lscn::eval_report_to_json(report);
  j["ap_variant"] = o.ap_variant;
  j["novel_class_ids"] = novel;
  ensure_dir(parent_or_dot(o.out));
  lscn::detail::write_text_file(o.out, j.dump(1) + "\n");
  rec.outputs.push_back(o.out);
  print_table(report);
}

void cmd_analyze(const AnalyzeOptions& o, RunRecord& rec) {
  require_file(o.manifest, "--manifest");
  require_file(o.detections, "--detections");
  if (o.bins < 1) throw lscn::ValidationError("--bins", "must be at least 1");
  const auto m = lscn::load_manifest(o.manifest);
  const auto novel = parse_novel(o.novel, o.split, m);
  const auto dets = lscn::load_detections(o.detections, m);
  lscn::OracleConfig oc;
  oc.mode = parse_oracle_mode(o.oracle_mode);
  oc.top_t = o.top_t;
  const auto hist = lscn::iou_histogram(lscn::keep_top_t(dets, o.top_t), m.annotations, novel,
                                        lscn::uniform_edges(o.bins), parse_hist_mode(o.histogram_mode));
  const auto curve = lscn::oracle_fp_curve(dets, m.annotations, m.num_classes(), novel, o.thresholds, oc);

  const fs::path dir(o.out);
  ensure_dir(dir);
  std::ostringstream h;
  h << "bin_lo,bin_hi,base,novel\n";
  for (std::size_t b = 0; b + 1 < hist.edges.size(); ++b)
    h << hist.edges[b] << ',' << hist.edges[b + 1] << ',' << hist.base[b] << ',' << hist.novel[b] << '\n';
  std::ostringstream c;
  c << "threshold,ap50_all,ap50_base,ap50_novel\n";
  c << std::setprecision(10);
  for (const auto& p : curve) c << p.threshold << ',' << p.ap50_all << ',' << p.ap50_base << ',' << p.ap50_novel << '\n';
  lscn::detail::write_text_file((dir / "iou_histogram.csv").string(), h.str());
  lscn::detail::write_text_file((dir / "oracle_curve.csv").string(), c.str());
  rec.outputs = {(dir / "iou_histogram.csv").string(), (dir / "oracle_curve.csv").string()};

  lscn::EvalReport er;
  er.histogram = hist;
  er.oracle_curve = curve;
  Json j = lscn::eval_report_to_json(er);
  j.erase("per_class");
  j.erase("mean");
  j.erase("ap_definition");
  j["histogram_mode"] = o.histogram_mode;
  j["oracle_mode"] = o.oracle_mode;
  j["top_t"] = o.top_t;
  lscn::detail::write_text_file((dir / "analysis.json").string(), j.dump(1) + "\n");
  rec.outputs.push_back((dir / "analysis.json").string());

  if (!o.no_plots) {
    lscn::plot::histogram_chart(hist.edges, {hist.base, hist.novel}, {lscn::plot::kBlue, lscn::plot::kOrange})
        .save((dir / "iou_histogram.png").string());
    std::vector<double> xs, all, base, nov;
    for (const auto& p : curve) {
      xs.push_back(p.threshold);
      all.push_back(p.ap50_all);
      base.push_back(p.ap50_base);
      nov.push_back(p.ap50_novel);
    }
    lscn::plot::line_chart(xs, {base, nov, all}, {lscn::plot::kBlue, lscn::plot::kOrange, lscn::plot::kGreen})
        .save((dir / "oracle_curve.png").string());
    rec.outputs.push_back((dir / "iou_histogram.png").string());
    rec.outputs.push_back((dir / "oracle_curve.png").string());
  }
  std::printf("%-10s %10s %10s %10s\n", "threshold", "AP50 base", "AP50 novel", "AP50 all");
  for (const auto& p : curve)
    std::printf("%-10.3f %10.2f %10.2f %10.2f\n", p.threshold, 100 * p.ap50_base, 100 * p.ap50_novel, 100 * p.ap50_all);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("Low-shot classification correction: synthetic data, training, refinement and evaluation");
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  app.fallthrough();

  GlobalOptions g;
  app.add_flag("--single-thread", g.single_thread, "Run everything on one thread (reproducibility mode)");
  app.add_option("--threads", g.threads, "Worker threads (0: hardware concurrency)");
  app.add_option("--log-level", g.log_level, "debug, info, warning or error")
      ->check(CLI::IsMember({"debug", "info", "warning", "error"}));
  app.add_option("--run-json", g.run_json, "Provenance record path (default: <output dir>/run.json)");

  std::map<std::string, std::string> config_paths;
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_paths[sub->get_name()], "JSON file of option values (flags take precedence)");
    sub->footer(
        "Global options (accepted before or after the subcommand):\n"
        "  --single-thread             Run everything on one thread (reproducibility mode)\n"
        "  --threads UINT [0]          Worker threads (0: hardware concurrency)\n"
        "  --log-level TEXT [warning]  debug, info, warning or error\n"
        "  --run-json TEXT             Provenance record path (default: <output dir>/run.json)\n"
        "Exit codes: 0 success, 1 validation error, 2 runtime failure.");
  };

  GenerateOptions gen;
  auto* s_gen = app.add_subcommand("generate", "Render a synthetic shapes dataset (manifest + PNGs)");
  s_gen->add_option("--out", gen.out, "Output directory")->required();
  s_gen->add_option("--classes", gen.classes, "Number of classes");
  s_gen->add_option("--images", gen.images, "Number of images");
  s_gen->add_option("--seed", gen.seed, "Random seed");
  s_gen->add_option("--rare-classes", gen.rare_classes, "Classes that only appear in rare images");
  s_gen->add_option("--rare-fraction", gen.rare_fraction, "Fraction of images holding one rare object");
  s_gen->add_option("--canvas", gen.canvas, "Canvas width and height");
  s_gen->add_option("--min-objects", gen.min_objects, "Minimum objects per image");
  s_gen->add_option("--max-objects", gen.max_objects, "Maximum objects per image");
  s_gen->add_option("--min-size", gen.min_size, "Minimum object size");
  s_gen->add_option("--max-size", gen.max_size, "Maximum object size");
  s_gen->add_option("--clutter", gen.clutter, "Mean clutter blobs per image");
  add_config(s_gen);

  SimulateOptions sim;
  auto* s_sim = app.add_subcommand("simulate", "Simulate base-detector output for a manifest");
  s_sim->add_option("--manifest", sim.manifest, "Dataset manifest")->required();
  s_sim->add_option("--out", sim.out, "Detections file")->required();
  s_sim->add_option("--noise", sim.noise, "noiseless or degraded")->check(CLI::IsMember({"noiseless", "degraded"}));
  s_sim->add_option("--novel", sim.novel, "Novel class ids");
  s_sim->add_option("--split", sim.split, "Take novel class ids from this split file");
  s_sim->add_option("--seed", sim.seed, "Random seed");
  s_sim->add_option("--base-accuracy", sim.base_accuracy, "Probability of the correct class for base objects");
  s_sim->add_option("--novel-accuracy", sim.novel_accuracy, "Probability of the correct class for novel objects");
  s_sim->add_option("--jitter", sim.jitter, "Localization jitter scale (negative: preset)");
  s_sim->add_option("--concentration", sim.concentration, "Score Dirichlet concentration (non-positive: preset)");
  s_sim->add_option("--fp-rate", sim.fp_rate, "Mean false positives per image (negative: preset)");
  add_config(s_sim);

  SplitOptions spl;
  auto* s_split = app.add_subcommand("split", "Select k annotated shots per novel class");
  s_split->add_option("--manifest", spl.manifest, "Dataset manifest")->required();
  s_split->add_option("--out", spl.out, "Split file")->required();
  s_split->add_option("--novel", spl.novel, "Novel class ids")->required();
  s_split->add_option("--k", spl.k, "Shots per novel class");
  s_split->add_option("--seed", spl.seed, "Random seed");
  add_config(s_split);

  TrainOptions tr;
  auto* s_train = app.add_subcommand("train", "Train the correction network (phase 1, or phase 2 after imprint)");
  s_train->add_option("--manifest", tr.manifest, "Training manifest")->required();
  s_train->add_option("--detections", tr.detections, "Base-detector output on the training images")->required();
  s_train->add_option("--out", tr.out, "Output directory")->required();
  s_train->add_option("--phase", tr.phase, "1 or 2");
  s_train->add_option("--split", tr.split, "k-shot split (required for phase 2)");
  s_train->add_option("--novel", tr.novel, "Novel class ids for phase 1 when no split is given");
  s_train->add_option("--checkpoint", tr.checkpoint, "Imprinted checkpoint (phase 2)");
  s_train->add_option("--images-dir", tr.images_dir, "Image root (default: manifest directory)");
  add_train_config_options(s_train, tr.cfg);
  add_config(s_train);

  ImprintOptions imp;
  auto* s_imp = app.add_subcommand("imprint", "Imprint novel weights and re-infer the background weight");
  s_imp->add_option("--checkpoint", imp.checkpoint, "Phase-1 checkpoint")->required();
  s_imp->add_option("--manifest", imp.manifest, "Training manifest")->required();
  s_imp->add_option("--detections", imp.detections, "Base-detector output on the training images")->required();
  s_imp->add_option("--split", imp.split, "k-shot split")->required();
  s_imp->add_option("--out", imp.out, "Output checkpoint")->required();
  s_imp->add_option("--images-dir", imp.images_dir, "Image root (default: manifest directory)");
  s_imp->add_option("--background-samples", imp.cfg.background_samples, "Background embeddings pooled");
  s_imp->add_option("--foreground-iou", imp.cfg.grouping.foreground_iou, "Foreground IoU threshold");
  s_imp->add_option("--background-iou", imp.cfg.grouping.background_iou, "Background IoU ceiling");
  s_imp->add_option("--top-t", imp.cfg.grouping.top_t, "Detections kept per image");
  s_imp->add_option("--heldout-images", imp.cfg.heldout_images, "Base images held out of training");
  s_imp->add_option("--seed", imp.cfg.seed, "Random seed");
  add_config(s_imp);

  RefineOptions ref;
  auto* s_ref = app.add_subcommand("refine", "Rescore detections with a trained correction network");
  s_ref->add_option("--checkpoint", ref.checkpoint, "Imprinted or phase-2 checkpoint")->required();
  s_ref->add_option("--manifest", ref.manifest, "Manifest of the images to refine")->required();
  s_ref->add_option("--detections", ref.detections, "Base-detector output to refine")->required();
  s_ref->add_option("--out", ref.out, "Refined detections file")->required();
  s_ref->add_option("--images-dir", ref.images_dir, "Image root (default: manifest directory)");
  s_ref->add_option("--batch-size", ref.batch_size, "Crops per forward batch");
  add_config(s_ref);

  EvaluateOptions ev;
  auto* s_ev = app.add_subcommand("evaluate", "AP / AP50 / AP75 per class and per split");
  s_ev->add_option("--manifest", ev.manifest, "Manifest with ground truth")->required();
  s_ev->add_option("--detections", ev.detections, "Detections to score")->required();
  s_ev->add_option("--out", ev.out, "Report file")->required();
  s_ev->add_option("--novel", ev.novel, "Novel class ids");
  s_ev->add_option("--split", ev.split, "Take novel class ids from this split file");
  s_ev->add_option("--ap-variant", ev.ap_variant, "all-point or 11-point")
      ->check(CLI::IsMember({"all-point", "11-point"}));
  s_ev->add_flag("--histogram", ev.histogram, "Include the IoU histogram");
  s_ev->add_option("--bins", ev.bins, "Histogram bins");
  s_ev->add_option("--histogram-mode", ev.histogram_mode, "same-class or class-agnostic")
      ->check(CLI::IsMember({"same-class", "class-agnostic"}));
  s_ev->add_option("--oracle-thresholds", ev.oracle_thresholds, "Thresholds of the oracle correction curve");
  s_ev->add_option("--oracle-mode", ev.oracle_mode, "combined, suppress or correct")
      ->check(CLI::IsMember({"combined", "suppress", "correct"}));
  s_ev->add_option("--top-t", ev.top_t, "Detections per image entering the oracle curve");
  add_config(s_ev);

  AnalyzeOptions an;
  auto* s_an = app.add_subcommand("analyze", "IoU histogram and oracle correction curve (data + plots)");
  s_an->add_option("--manifest", an.manifest, "Manifest with ground truth")->required();
  s_an->add_option("--detections", an.detections, "Detections to analyze")->required();
  s_an->add_option("--out", an.out, "Output directory")->required();
  s_an->add_option("--novel", an.novel, "Novel class ids");
  s_an->add_option("--split", an.split, "Take novel class ids from this split file");
  s_an->add_option("--bins", an.bins, "Histogram bins");
  s_an->add_option("--histogram-mode", an.histogram_mode, "same-class or class-agnostic")
      ->check(CLI::IsMember({"same-class", "class-agnostic"}));
  s_an->add_option("--thresholds", an.thresholds, "Oracle curve thresholds");
  s_an->add_option("--oracle-mode", an.oracle_mode, "combined, suppress or correct")
      ->check(CLI::IsMember({"combined", "suppress", "correct"}));
  s_an->add_option("--top-t", an.top_t, "Detections kept per image");
  s_an->add_flag("--no-plots", an.no_plots, "Skip PNG plots");
  add_config(s_an);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  CLI::App* sub = app.get_subcommands().front();
  RunRecord rec;
  rec.subcommand = sub->get_name();
  rec.argv.assign(argv, argv + argc);
  rec.config_file = config_paths[rec.subcommand];
  const std::string started = utc_now();
  const auto t0 = std::chrono::steady_clock::now();
  int code = kExitOk;
  std::string error;

  try {
    if (!rec.config_file.empty()) {
      require_file(rec.config_file, "--config");
      apply_config_file(sub, rec.config_file, rec);
    }
    resolve_options(sub, rec);
    lscn::set_log_level(parse_level(g.log_level));
    rec.single_thread = g.single_thread;
    rec.threads = g.single_thread ? 1 : (g.threads == 0 ? lscn::default_thread_count() : g.threads);

    const std::string name = rec.subcommand;
    std::string out_dir;
    if (name == "generate" || name == "train" || name == "analyze")
      out_dir = name == "generate" ? gen.out : (name == "train" ? tr.out : an.out);
    else
      out_dir = parent_or_dot(name == "simulate"   ? sim.out
                              : name == "split"    ? spl.out
                              : name == "imprint"  ? imp.out
                              : name == "refine"   ? ref.out
                                                   : ev.out)
                    .string();
    rec.run_json_path = g.run_json.empty() ? (fs::path(out_dir) / "run.json").string() : g.run_json;
    if (name == "generate") rec.seed = gen.seed;
    if (name == "simulate") rec.seed = sim.seed;
    if (name == "split") rec.seed = spl.seed;
    if (name == "train") rec.seed = tr.cfg.seed;
    if (name == "imprint") rec.seed = imp.cfg.seed;
    std::cerr << "[lscn] " << name << " config " << rec.resolved.dump() << "\n";

    if (name == "generate") cmd_generate(gen, rec);
    if (name == "simulate") cmd_simulate(sim, rec);
    if (name == "split") cmd_split(spl, rec);
    if (name == "train") cmd_train(tr, rec);
    if (name == "imprint") cmd_imprint(imp, rec);
    if (name == "refine") cmd_refine(ref, rec);
    if (name == "evaluate") cmd_evaluate(ev, rec);
    if (name == "analyze") cmd_analyze(an, rec);
  } catch (const lscn::ValidationError& e) {
    code = kExitValidation;
    error = e.what();
  } catch (const lscn::RuntimeFailure& e) {
    code = kExitRuntime;
    error = e.what();
  } catch (const std::exception& e) {
    code = kExitRuntime;
    error = e.what();
  }
  if (!error.empty()) std::cerr << "lscn " << rec.subcommand << ": error: " << error << "\n";
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (code != kExitValidation || !rec.run_json_path.empty()) {
    // A validation failure before the output location is known leaves no record.
    if (code == kExitOk || fs::is_directory(parent_or_dot(rec.run_json_path)))
      write_run_record(rec, code, error, started, seconds);
  }
  return code;
}
