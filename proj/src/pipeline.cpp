#include "specgt/pipeline.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>

#include <openssl/evp.h>

#include "binary_io.hpp"
#include "specgt/dataset.hpp"
#include "specgt/error.hpp"
#include "specgt/rng.hpp"
#include "specgt/scenegen.hpp"

namespace specgt::pipeline {
namespace fs = std::filesystem;

namespace {

std::string line_search_name(unmixing::LineSearch ls) {
  return ls == unmixing::LineSearch::golden_section ? "golden" : "backtracking";
}

unmixing::LineSearch parse_line_search(const std::string& name) {
  if (name == "golden") return unmixing::LineSearch::golden_section;
  if (name == "backtracking") return unmixing::LineSearch::backtracking;
  throw usage_error("unknown line search '" + name + "' (expected golden or backtracking)");
}

std::string init_name(unmixing::Init init) {
  return init == unmixing::Init::uniform_interior ? "uniform" : "least_squares";
}

unmixing::Init parse_init(const std::string& name) {
  if (name == "uniform") return unmixing::Init::uniform_interior;
  if (name == "least_squares") return unmixing::Init::projected_least_squares;
  throw usage_error("unknown init '" + name + "' (expected uniform or least_squares)");
}

void reject_unknown(const nlohmann::json& doc, const std::set<std::string>& allowed, const fs::path& source,
                    const std::string& where) {
  if (!doc.is_object()) throw usage_error("'" + source.string() + "': " + where + " must be an object");
  for (const auto& [key, value] : doc.items()) {
    if (!allowed.contains(key)) throw usage_error("'" + source.string() + "': unknown key '" + where + key + "'");
  }
}

template <typename T>
void read_if(const nlohmann::json& doc, const char* key, T& out, const fs::path& source) {
  if (doc.contains(key) && !doc[key].is_null()) out = detail::field<T>(doc, key, source);
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

}  // namespace

unmixing::Objective parse_objective(const std::string& name) {
  if (name == "sam") return unmixing::Objective::spectral_angle;
  if (name == "l2") return unmixing::Objective::euclidean;
  throw usage_error("unknown objective '" + name + "' (expected sam or l2)");
}

std::string objective_name(unmixing::Objective objective) {
  return objective == unmixing::Objective::spectral_angle ? "sam" : "l2";
}

// ---------------------------------------------------------------------------
// Config

void PipelineConfig::validate() const {
  if (scenes < 2) throw usage_error("pipeline: at least 2 scenes are needed for leave-one-out folds");
  if (rows == 0 || cols == 0) throw usage_error("pipeline: rows and cols must be positive");
  if (aggregation.factor == 0 || rows / aggregation.factor < patch_size || cols / aggregation.factor < patch_size) {
    throw usage_error("pipeline: aggregated scenes are smaller than one patch");
  }
  if (patch_size == 0 || patch_size % 2 == 0) throw usage_error("pipeline: patch_size must be odd");
  for (std::size_t k : folds) {
    if (k >= scenes) throw usage_error("pipeline: fold " + std::to_string(k) + " >= scene count");
  }
  bands.validate();
  unmix.validate();
  train.validate();
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw usage_error("pipeline: train_fraction must be in (0, 1)");
  if (!(smoothness >= 0.0) || !(noise_sigma >= 0.0)) throw usage_error("pipeline: smoothness and noise must be >= 0");
}

nlohmann::json to_json(const PipelineConfig& c) {
  nlohmann::json doc = {
      {"scenes", c.scenes},
      {"rows", c.rows},
      {"cols", c.cols},
      {"smoothness", c.smoothness},
      {"noise_sigma", c.noise_sigma},
      {"snr_db", c.snr_db ? nlohmann::json(*c.snr_db) : nlohmann::json(nullptr)},
      {"endmembers", c.endmembers.empty() ? nlohmann::json(nullptr) : nlohmann::json(c.endmembers.string())},
      {"factor", c.aggregation.factor},
      {"bands",
       {{"centers_nm", c.bands.centers_nm},
        {"widths_nm", c.bands.widths_nm},
        {"excluded_indices", c.bands.excluded_indices}}},
      {"unmix",
       {{"objective", objective_name(c.unmix.objective)},
        {"max_iters", c.unmix.max_iters},
        {"grad_tol", c.unmix.grad_tol},
        {"obj_tol", c.unmix.obj_tol},
        {"line_search", line_search_name(c.unmix.line_search)},
        {"init", init_name(c.unmix.init)}}},
      {"patch_size", c.patch_size},
      {"model",
       {{"conv_filters", c.conv_filters},
        {"hidden_sizes", c.hidden_sizes},
        {"dropout_rate", c.dropout_rate},
        {"input_noise_sigma", c.input_noise_sigma}}},
      {"train",
       {{"batch_size", c.train.batch_size},
        {"learning_rate", c.train.learning_rate},
        {"epochs", c.train.epochs},
        {"per_label", c.train.per_label_samples},
        {"augment_noise_sigma", c.train.augment_noise_sigma}}},
      {"train_fraction", c.train_fraction},
      {"folds", c.folds},
      {"seed", c.seed}};
  return doc;
}

PipelineConfig config_from_json(const nlohmann::json& doc, const fs::path& source) {
  reject_unknown(doc,
                 {"scenes", "rows", "cols", "smoothness", "noise_sigma", "snr_db", "endmembers", "factor", "bands",
                  "unmix", "patch_size", "model", "train", "train_fraction", "folds", "seed"},
                 source, "");
  PipelineConfig c;
  read_if(doc, "scenes", c.scenes, source);
  read_if(doc, "rows", c.rows, source);
  read_if(doc, "cols", c.cols, source);
  read_if(doc, "smoothness", c.smoothness, source);
  read_if(doc, "noise_sigma", c.noise_sigma, source);
  if (doc.contains("snr_db")) {
    c.snr_db = doc["snr_db"].is_null() ? std::nullopt : std::optional<double>(detail::field<double>(doc, "snr_db", source));
  }
  if (doc.contains("endmembers") && !doc["endmembers"].is_null()) {
    c.endmembers = detail::field<std::string>(doc, "endmembers", source);
    if (c.endmembers.is_relative()) c.endmembers = source.parent_path() / c.endmembers;
  }
  read_if(doc, "factor", c.aggregation.factor, source);
  if (doc.contains("bands")) {
    const auto& b = doc["bands"];
    reject_unknown(b, {"centers_nm", "widths_nm", "excluded_indices"}, source, "bands.");
    c.bands.centers_nm = detail::field<std::vector<double>>(b, "centers_nm", source);
    c.bands.widths_nm = detail::field<std::vector<double>>(b, "widths_nm", source);
    c.bands.excluded_indices.clear();
    read_if(b, "excluded_indices", c.bands.excluded_indices, source);
  }
  if (doc.contains("unmix")) {
    const auto& u = doc["unmix"];
    reject_unknown(u, {"objective", "max_iters", "grad_tol", "obj_tol", "line_search", "init"}, source, "unmix.");
    if (u.contains("objective")) c.unmix.objective = parse_objective(detail::field<std::string>(u, "objective", source));
    read_if(u, "max_iters", c.unmix.max_iters, source);
    read_if(u, "grad_tol", c.unmix.grad_tol, source);
    read_if(u, "obj_tol", c.unmix.obj_tol, source);
    if (u.contains("line_search")) {
      c.unmix.line_search = parse_line_search(detail::field<std::string>(u, "line_search", source));
    }
    if (u.contains("init")) c.unmix.init = parse_init(detail::field<std::string>(u, "init", source));
  }
  read_if(doc, "patch_size", c.patch_size, source);
  if (doc.contains("model")) {
    const auto& m = doc["model"];
    reject_unknown(m, {"conv_filters", "hidden_sizes", "dropout_rate", "input_noise_sigma"}, source, "model.");
    read_if(m, "conv_filters", c.conv_filters, source);
    read_if(m, "hidden_sizes", c.hidden_sizes, source);
    read_if(m, "dropout_rate", c.dropout_rate, source);
    read_if(m, "input_noise_sigma", c.input_noise_sigma, source);
  }
  if (doc.contains("train")) {
    const auto& t = doc["train"];
    reject_unknown(t, {"batch_size", "learning_rate", "epochs", "per_label", "augment_noise_sigma"}, source,
                   "train.");
    read_if(t, "batch_size", c.train.batch_size, source);
    read_if(t, "learning_rate", c.train.learning_rate, source);
    read_if(t, "epochs", c.train.epochs, source);
    read_if(t, "per_label", c.train.per_label_samples, source);
    read_if(t, "augment_noise_sigma", c.train.augment_noise_sigma, source);
  }
  read_if(doc, "train_fraction", c.train_fraction, source);
  read_if(doc, "folds", c.folds, source);
  read_if(doc, "seed", c.seed, source);
  c.validate();
  return c;
}

PipelineConfig read_pipeline_config(const fs::path& path) {
  return config_from_json(detail::read_json(path), path);
}

// ---------------------------------------------------------------------------
// Artifact writers

void write_unmix_report(const unmixing::UnmixReport& report, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw io_error("cannot open '" + path.string() + "' for writing");
  out.precision(17);
  out << "pixels,mean_iterations,non_converged\n"
      << report.pixels << ',' << report.mean_iterations << ',' << report.non_converged << '\n';
  if (!out) throw io_error("write failed for '" + path.string() + "'");
}

nlohmann::json metrics_json(const nn::Metrics& m, const std::vector<std::string>& class_names) {
  nlohmann::json per_class = nlohmann::json::array();
  for (const auto& a : m.per_class_accuracy) per_class.push_back(a ? nlohmann::json(*a) : nlohmann::json(nullptr));
  return {{"overall_accuracy", m.overall_accuracy},
          {"per_class_accuracy", per_class},
          {"confusion_matrix", m.confusion},
          {"n_evaluated", m.n_evaluated},
          {"n_sentinel", m.n_sentinel},
          {"class_names", class_names}};
}

void write_metrics(const nn::Metrics& m, const std::vector<std::string>& class_names, const fs::path& prefix) {
  detail::write_json(with_suffix(prefix, ".metrics.json"), metrics_json(m, class_names));
  const fs::path csv = with_suffix(prefix, ".confusion.csv");
  std::ofstream out(csv, std::ios::trunc);
  if (!out) throw io_error("cannot open '" + csv.string() + "' for writing");
  out << "truth\\prediction";
  for (const auto& name : class_names) out << ",\"" << name << '"';
  out << '\n';
  for (std::size_t t = 0; t < m.confusion.size(); ++t) {
    out << '"' << (t < class_names.size() ? class_names[t] : std::to_string(t)) << '"';
    for (std::size_t v : m.confusion[t]) out << ',' << v;
    out << '\n';
  }
  if (!out) throw io_error("write failed for '" + csv.string() + "'");
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open '" + path.string() + "'");
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw io_error("sha256 init failed");
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0 && EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount())) != 1) {
      throw io_error("sha256 failed for '" + path.string() + "'");
    }
  }
  if (in.bad()) throw io_error("read failed for '" + path.string() + "'");
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int length = 0;
  if (EVP_DigestFinal_ex(ctx.get(), digest.data(), &length) != 1) throw io_error("sha256 failed");
  std::string hex;
  char two[3];
  for (unsigned int i = 0; i < length; ++i) {
    std::snprintf(two, sizeof two, "%02x", digest[i]);
    hex += two;
  }
  return hex;
}

nlohmann::json artifact_hashes(const fs::path& dir, const fs::path& exclude) {
  const fs::path skip = exclude.empty() ? fs::path() : fs::weakly_canonical(exclude);
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    if (!skip.empty() && fs::weakly_canonical(entry.path()) == skip) continue;
    files.push_back(fs::relative(entry.path(), dir));
  }
  std::sort(files.begin(), files.end());
  nlohmann::json out = nlohmann::json::array();
  for (const auto& rel : files) {
    out.push_back({{"path", rel.generic_string()}, {"bytes", fs::file_size(dir / rel)}, {"sha256", sha256_file(dir / rel)}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// run-all

PipelineResult run_pipeline(const PipelineConfig& config, const fs::path& out_dir, const Logger& log) {
  config.validate();
  auto say = [&](const std::string& msg) {
    if (log) log(msg);
  };
  fs::create_directories(out_dir);
  const EndmemberLibrary library =
      config.endmembers.empty() ? scenegen::default_library() : read_endmembers(config.endmembers);
  const std::vector<std::string>& names = library.names();
  write_endmembers(library, out_dir / "endmembers.csv");
  resolution::write_band_spec(config.bands, out_dir / "bands.json");
  detail::write_json(out_dir / "config.json", to_json(config));

  std::vector<dataset::LabeledImage> images;
  for (std::size_t i = 0; i < config.scenes; ++i) {
    Stopwatch clock;
    const fs::path dir = out_dir / ("scene_" + std::to_string(i));
    fs::create_directories(dir);

    // gen-scene
    scenegen::SceneSpec spec{config.rows,       config.cols, library, config.smoothness, config.noise_sigma,
                             Rng::derive_seed(config.seed, "scene/" + std::to_string(i)), config.snr_db};
    const scenegen::Scene scene = scenegen::generate_scene(spec);
    write_cube(scene.cube, dir / "hires");
    write_fraction_map(scene.fractions, dir / "truth.fractions");
    write_label_map(resolution::synthesize_labels(scene.fractions, names), dir / "truth");

    // unmix
    unmixing::UnmixReport report;
    const FractionMap unmixed = unmixing::unmix_image(scene.cube, library, config.unmix, &report, config.threads);
    write_fraction_map(unmixed, dir / "unmixed");
    write_unmix_report(report, dir / "unmix_report.csv");

    // adapt + synth-gt
    SpectralCube adapted =
        resolution::resample_spectral(resolution::aggregate_spatial(scene.cube, config.aggregation), config.bands);
    write_cube(adapted, dir / "adapted");
    LabelMap gt = resolution::synthesize_labels(resolution::aggregate_fractions(unmixed, config.aggregation), names);
    write_label_map(gt, dir / "gt");
    render_label_map(gt, dir / "gt.png");
    say("scene " + std::to_string(i) + ": sigma " + fixed(scene.noise_sigma, 6) + ", unmix mean iterations " +
        fixed(report.mean_iterations, 1) + ", non-converged " + std::to_string(report.non_converged) + " (" +
        fixed(clock.seconds(), 1) + " s)");
    images.push_back({std::move(adapted), std::move(gt)});
  }

  std::vector<std::size_t> folds = config.folds;
  if (folds.empty()) {
    for (std::size_t k = 0; k < config.scenes; ++k) folds.push_back(k);
  }

  PipelineResult result;
  for (std::size_t k : folds) {
    Stopwatch clock;
    const fs::path dir = out_dir / ("fold_" + std::to_string(k));
    fs::create_directories(dir);
    const std::string tag = "fold/" + std::to_string(k);

    // build-dataset
    const dataset::LoioSplit split =
        dataset::split_loio(images, {k, config.train_fraction, Rng::derive_seed(config.seed, tag + "/split")},
                            config.patch_size);
    dataset::write_dataset(split.train, dir / "train");
    dataset::write_dataset(split.validation, dir / "val");

    // train
    nn::ModelConfig mc;
    mc.patch_size = config.patch_size;
    mc.bands = split.train.bands;
    mc.conv_filters = config.conv_filters;
    mc.dense_sizes = config.hidden_sizes;
    mc.dense_sizes.push_back(names.size());
    mc.dropout_rate = config.dropout_rate;
    mc.class_count = names.size();
    mc.input_noise_sigma = config.input_noise_sigma;
    nn::TrainConfig tc = config.train;
    tc.seed = Rng::derive_seed(config.seed, tag + "/train");
    nn::Model model(mc, tc.seed);
    FoldResult fold;
    fold.test_image = k;
    fold.history = nn::train(model, split.train, &split.validation, tc, [&](const nn::HistoryRow& row) {
      say("fold " + std::to_string(k) + " epoch " + std::to_string(row.epoch) + ": loss " + fixed(row.loss, 4) +
          ", train " + fixed(row.train_accuracy, 4) + ", val " + fixed(row.val_accuracy, 4));
    });
    fold.validation_accuracy = fold.history.empty() ? 0.0 : fold.history.back().val_accuracy;
    nn::write_checkpoint({model, split.train.band_stats, names, tc.seed, tc.epochs}, dir / "model");
    nn::write_history_csv(fold.history, dir / "model.history.csv");

    // classify + eval
    const LabelMap predicted = nn::classify_image(model, images[k].cube, split.train.band_stats, names);
    write_label_map(predicted, dir / "pred");
    render_label_map(predicted, dir / "pred.png");
    fold.metrics = nn::evaluate(predicted, images[k].labels);
    write_metrics(fold.metrics, names, dir / "eval");
    say("fold " + std::to_string(k) + ": test accuracy " + fixed(fold.metrics.overall_accuracy, 4) + ", validation " +
        fixed(fold.validation_accuracy, 4) + " (" + fixed(clock.seconds(), 1) + " s)");
    result.folds.push_back(std::move(fold));
  }

  nlohmann::json fold_summary = nlohmann::json::array();
  for (const auto& f : result.folds) {
    fold_summary.push_back({{"test_image", f.test_image},
                            {"test_accuracy", f.metrics.overall_accuracy},
                            {"validation_accuracy", f.validation_accuracy}});
  }
  nlohmann::json seeds = nlohmann::json::object();
  for (std::size_t i = 0; i < config.scenes; ++i) {
    seeds["scene/" + std::to_string(i)] = Rng::derive_seed(config.seed, "scene/" + std::to_string(i));
  }
  for (std::size_t k : folds) {
    const std::string tag = "fold/" + std::to_string(k);
    seeds[tag + "/split"] = Rng::derive_seed(config.seed, tag + "/split");
    seeds[tag + "/train"] = Rng::derive_seed(config.seed, tag + "/train");
  }
  result.manifest = out_dir / "manifest.json";
  detail::write_json(result.manifest, {{"version", 1},
                                       {"seed", config.seed},
                                       {"seeds", seeds},
                                       {"folds", fold_summary},
                                       {"artifacts", artifact_hashes(out_dir, result.manifest)}});
  return result;
}

}  // namespace specgt::pipeline
