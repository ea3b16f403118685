#include "specgt/cli.hpp"

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "specgt/dataset.hpp"
#include "specgt/error.hpp"
#include "specgt/nn.hpp"
#include "specgt/pipeline.hpp"
#include "specgt/resolution.hpp"
#include "specgt/scenegen.hpp"
#include "specgt/unmixing.hpp"

namespace specgt::cli {
namespace fs = std::filesystem;

namespace {

bool ends_with(const std::string& s, const std::string& tail) {
  return s.size() >= tail.size() && s.compare(s.size() - tail.size(), tail.size(), tail) == 0;
}

// Accepts either a file prefix or one of its two member files.
fs::path prefix_of(const fs::path& p, const std::string& stem_suffix = "") {
  std::string s = p.string();
  for (const std::string ext : {".json", ".bin"}) {
    if (ends_with(s, stem_suffix + ext)) return s.substr(0, s.size() - stem_suffix.size() - ext.size());
  }
  return p;
}

fs::path labels_prefix(const fs::path& p) { return prefix_of(p, ".labels"); }

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::vector<std::string> class_names_of(const FractionMap& fm) {
  if (!fm.names().empty()) return fm.names();
  std::vector<std::string> names;
  for (std::size_t k = 0; k < fm.endmembers(); ++k) names.push_back("class_" + std::to_string(k));
  return names;
}

struct Options {
  // gen-scene
  fs::path spec;
  std::optional<std::uint64_t> seed;
  // shared paths
  fs::path cube, endmembers, fractions, out, bands, model, pred, truth, labels_in, config;
  std::string objective = "sam";
  std::size_t max_iters = 500;
  std::size_t factor = 5;
  // build-dataset
  std::vector<std::string> cubes, label_maps;
  std::optional<std::size_t> test_image;
  std::size_t patch = 5;
  double train_fraction = 0.9;
  // train
  fs::path train_set, val_set;
  std::size_t epochs = 200, per_label = 30000, batch_size = 64;
  double lr = 0.001, dropout = 0.25, input_noise = 0.0, augment_noise = 0.1;
  std::vector<std::size_t> conv{64, 64, 32, 16}, hidden{128, 64};
  // classify
  bool probabilities = false;
  // run-all
  std::optional<std::size_t> scenes, rows, cols;
  std::vector<std::size_t> folds;
};

void cmd_gen_scene(const Options& o, std::ostream& out) {
  scenegen::SceneSpec spec = [&] {
    try {
      return scenegen::read_scene_spec(o.spec);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::data) throw usage_error(e.what());
      throw;
    }
  }();
  if (o.seed) spec.seed = *o.seed;
  ensure_parent(o.out);
  const scenegen::Scene scene = scenegen::generate_scene(spec);
  write_cube(scene.cube, with_suffix(o.out, ".cube"));
  write_fraction_map(scene.fractions, with_suffix(o.out, ".fractions"));
  write_label_map(resolution::synthesize_labels(scene.fractions, spec.endmembers.names()), with_suffix(o.out, ".truth"));
  out << "wrote " << o.out.string() << ".cube, .fractions, .truth.labels (" << scene.cube.rows() << "x"
      << scene.cube.cols() << "x" << scene.cube.bands() << ", noise sigma " << scene.noise_sigma << ")\n";
}

void cmd_unmix(const Options& o, std::ostream& out) {
  const SpectralCube cube = read_cube(prefix_of(o.cube));
  const EndmemberLibrary library = read_endmembers(o.endmembers);
  unmixing::UnmixOptions opts;
  opts.objective = pipeline::parse_objective(o.objective);
  opts.max_iters = o.max_iters;
  ensure_parent(o.out);
  unmixing::UnmixReport report;
  const FractionMap fm = unmixing::unmix_image(cube, library, opts, &report);
  write_fraction_map(fm, o.out);
  pipeline::write_unmix_report(report, with_suffix(o.out, ".report.csv"));
  out << "unmixed " << report.pixels << " pixels, mean iterations " << report.mean_iterations << ", non-converged "
      << report.non_converged << '\n';
}

void cmd_adapt(const Options& o, std::ostream& out) {
  const resolution::BandSpec bands = o.bands.empty() ? resolution::default_target_bands() : resolution::read_band_spec(o.bands);
  const SpectralCube cube = read_cube(prefix_of(o.cube));
  const SpectralCube adapted =
      resolution::resample_spectral(resolution::aggregate_spatial(cube, {o.factor, resolution::Reducer::mean}), bands);
  ensure_parent(o.out);
  write_cube(adapted, o.out);
  out << "adapted " << cube.rows() << "x" << cube.cols() << "x" << cube.bands() << " -> " << adapted.rows() << "x"
      << adapted.cols() << "x" << adapted.bands() << '\n';
}

void cmd_synth_gt(const Options& o, std::ostream& out) {
  const FractionMap fm = read_fraction_map(prefix_of(o.fractions));
  const LabelMap labels = resolution::synthesize_labels(
      resolution::aggregate_fractions(fm, {o.factor, resolution::Reducer::mean}), class_names_of(fm));
  ensure_parent(o.out);
  write_label_map(labels, o.out);
  out << "wrote " << labels.rows() << "x" << labels.cols() << " labels with " << labels.class_count() << " classes\n";
}

void cmd_build_dataset(const Options& o, std::ostream& out) {
  if (o.cubes.size() != o.label_maps.size()) {
    throw usage_error("build-dataset: --cube and --labels must be given the same number of times");
  }
  if (o.test_image && *o.test_image >= o.cubes.size()) throw usage_error("build-dataset: --test-image out of range");
  std::vector<dataset::LabeledImage> images;
  for (std::size_t i = 0; i < o.cubes.size(); ++i) {
    SpectralCube cube = read_cube(prefix_of(o.cubes[i]));
    LabelMap labels = read_label_map(labels_prefix(o.label_maps[i]));
    if (cube.rows() != labels.rows() || cube.cols() != labels.cols()) {
      throw data_error("build-dataset: cube " + o.cubes[i] + " and labels " + o.label_maps[i] + " differ in size");
    }
    images.push_back({std::move(cube), std::move(labels)});
  }
  const std::uint64_t seed = o.seed.value_or(0);
  const dataset::LoioSplit split =
      o.test_image ? dataset::split_loio(images, {*o.test_image, o.train_fraction, seed}, o.patch)
                   : dataset::split_pooled(images, o.train_fraction, seed, o.patch);
  ensure_parent(o.out);
  dataset::write_dataset(split.train, with_suffix(o.out, ".train"));
  dataset::write_dataset(split.validation, with_suffix(o.out, ".val"));
  if (o.test_image) dataset::write_dataset(split.test, with_suffix(o.out, ".test"));
  out << "patches: train " << split.train.patches.size() << ", validation " << split.validation.patches.size();
  if (o.test_image) out << ", test " << split.test.patches.size();
  out << '\n';
}

void cmd_train(const Options& o, std::ostream& out) {
  const dataset::PatchDataset train_set = dataset::read_dataset(prefix_of(o.train_set));
  std::optional<dataset::PatchDataset> val;
  if (!o.val_set.empty()) {
    val = dataset::read_dataset(prefix_of(o.val_set));
    if (val->bands != train_set.bands || val->patch_size != train_set.patch_size ||
        val->class_count != train_set.class_count) {
      throw data_error("train: validation set disagrees with the training set on bands, patch size or classes");
    }
  }
  if (train_set.band_stats.bands() != train_set.bands) {
    throw data_error("train: training set carries no band statistics; build it with build-dataset");
  }
  nn::ModelConfig mc;
  mc.patch_size = train_set.patch_size;
  mc.bands = train_set.bands;
  mc.conv_filters = o.conv;
  mc.dense_sizes = o.hidden;
  mc.dense_sizes.push_back(train_set.class_count);
  mc.dropout_rate = o.dropout;
  mc.class_count = train_set.class_count;
  mc.input_noise_sigma = o.input_noise;
  mc.validate();
  nn::TrainConfig tc;
  tc.batch_size = o.batch_size;
  tc.learning_rate = o.lr;
  tc.epochs = o.epochs;
  tc.per_label_samples = o.per_label;
  tc.seed = o.seed.value_or(0);
  tc.augment_noise_sigma = o.augment_noise;
  tc.validate();
  const auto histogram = train_set.class_histogram();
  for (std::size_t k = 0; k < histogram.size(); ++k) {
    if (histogram[k] == 0) throw data_error("train: class " + std::to_string(k) + " has no training patches");
  }
  ensure_parent(o.out);
  nn::Model model(mc, tc.seed);
  const auto history = nn::train(model, train_set, val ? &*val : nullptr, tc);
  nn::write_checkpoint({model, train_set.band_stats, train_set.class_names, tc.seed, tc.epochs}, o.out);
  nn::write_history_csv(history, with_suffix(o.out, ".history.csv"));
  const auto& last = history.back();
  out << "trained " << tc.epochs << " epochs: loss " << last.loss << ", train accuracy " << last.train_accuracy;
  if (val) out << ", validation accuracy " << last.val_accuracy;
  out << '\n';
}

void cmd_classify(const Options& o, std::ostream& out) {
  nn::Checkpoint cp = nn::read_checkpoint(prefix_of(o.model));
  const SpectralCube cube = read_cube(prefix_of(o.cube));
  if (cube.bands() != cp.model.config().bands) {
    throw data_error("classify: cube has " + std::to_string(cube.bands()) + " bands, model expects " +
                     std::to_string(cp.model.config().bands));
  }
  ensure_parent(o.out);
  std::vector<double> probs;
  const LabelMap labels = nn::classify_image(cp.model, cube, cp.band_stats, cp.class_names,
                                             o.probabilities ? &probs : nullptr);
  write_label_map(labels, o.out);
  if (o.probabilities) {
    const std::size_t d = cp.class_names.size();
    const std::size_t n = cube.pixel_count();
    std::vector<double> bsq(n * d);
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t k = 0; k < d; ++k) bsq[k * n + p] = probs[p * d + k];
    }
    std::vector<double> centers(d), widths(d, 1.0);
    for (std::size_t k = 0; k < d; ++k) centers[k] = static_cast<double>(k);
    write_cube(SpectralCube(cube.rows(), cube.cols(), std::move(centers), std::move(widths), std::move(bsq)),
               with_suffix(o.out, ".probabilities"));
  }
  out << "classified " << cube.rows() << "x" << cube.cols() << " pixels\n";
}

void cmd_eval(const Options& o, std::ostream& out) {
  const LabelMap pred = read_label_map(labels_prefix(o.pred));
  const LabelMap truth = read_label_map(labels_prefix(o.truth));
  const nn::Metrics m = nn::evaluate(pred, truth);
  std::vector<std::string> names;
  for (std::size_t k = 0; k < truth.class_count(); ++k) {
    // Class indices skip the sentinel slot, wherever it sits in the palette.
    const std::size_t slot = (truth.sentinel() && k >= *truth.sentinel()) ? k + 1 : k;
    names.push_back(truth.palette()[slot].name);
  }
  ensure_parent(o.out);
  pipeline::write_metrics(m, names, o.out);
  out << "overall accuracy " << m.overall_accuracy << " over " << m.n_evaluated << " pixels (" << m.n_sentinel
      << " sentinel)\n";
}

void cmd_render(const Options& o, std::ostream& out) {
  const LabelMap labels = read_label_map(labels_prefix(o.labels_in));
  ensure_parent(o.out);
  render_label_map(labels, o.out);
  out << "wrote " << o.out.string() << '\n';
}

void cmd_run_all(const Options& o, std::ostream& out) {
  pipeline::PipelineConfig config = o.config.empty() ? pipeline::PipelineConfig{} : pipeline::read_pipeline_config(o.config);
  if (o.seed) config.seed = *o.seed;
  if (o.scenes) config.scenes = *o.scenes;
  if (o.rows) config.rows = *o.rows;
  if (o.cols) config.cols = *o.cols;
  if (!o.folds.empty()) config.folds = o.folds;
  config.validate();
  const auto result = pipeline::run_pipeline(config, o.out, [&](const std::string& line) { out << line << '\n' << std::flush; });
  std::size_t passing = 0;
  for (const auto& f : result.folds) passing += f.metrics.overall_accuracy >= 0.9;
  out << "folds at >= 0.90 test accuracy: " << passing << " of " << result.folds.size() << "; manifest "
      << result.manifest.string() << '\n';
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Synthetic ground truth from spectral unmixing, and a patch CNN trained on it."};
  app.name("specgt");
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("gen-scene", "Generate a synthetic scene (cube, true fractions, true labels)");
  gen->add_option("--spec", o.spec, "Scene spec JSON")->required();
  gen->add_option("--out", o.out, "Output prefix")->required();
  gen->add_option("--seed", o.seed, "Override the spec's seed");

  auto* unmix = app.add_subcommand("unmix", "Estimate per-pixel abundance fractions");
  unmix->add_option("--cube", o.cube, "Input cube")->required();
  unmix->add_option("--endmembers", o.endmembers, "Endmember CSV")->required();
  unmix->add_option("--out", o.out, "Output fraction map prefix")->required();
  unmix->add_option("--objective", o.objective, "sam or l2")->check(CLI::IsMember({"sam", "l2"}));
  unmix->add_option("--max-iters", o.max_iters, "PGD iteration cap");

  auto* adapt = app.add_subcommand("adapt", "Aggregate spatially and resample to target bands");
  adapt->add_option("--cube", o.cube, "Input cube")->required();
  adapt->add_option("--bands", o.bands, "Target band spec JSON (default: built-in 12-band table)");
  adapt->add_option("--factor", o.factor, "Aggregation factor");
  adapt->add_option("--out", o.out, "Output cube prefix")->required();

  auto* synth = app.add_subcommand("synth-gt", "Aggregate fractions and label by the largest fraction");
  synth->add_option("--fractions", o.fractions, "Fraction map")->required();
  synth->add_option("--factor", o.factor, "Aggregation factor");
  synth->add_option("--out", o.out, "Output label map prefix")->required();

  auto* build = app.add_subcommand("build-dataset", "Extract standardized patch datasets");
  build->add_option("--cube", o.cubes, "Cube (repeat per image)")->required();
  build->add_option("--labels", o.label_maps, "Label map (repeat per image, same order)")->required();
  build->add_option("--test-image", o.test_image, "Index of the held-out image");
  build->add_option("--patch", o.patch, "Patch size (odd)");
  build->add_option("--train-fraction", o.train_fraction, "Train share of the pooled patches");
  build->add_option("--seed", o.seed, "Shuffle seed");
  build->add_option("--out", o.out, "Output prefix (.train, .val, .test)")->required();

  auto* train = app.add_subcommand("train", "Train the patch CNN");
  train->add_option("--train", o.train_set, "Training dataset")->required();
  train->add_option("--val", o.val_set, "Validation dataset");
  train->add_option("--out", o.out, "Checkpoint prefix")->required();
  train->add_option("--epochs", o.epochs, "Epochs");
  train->add_option("--per-label", o.per_label, "Samples per class per epoch");
  train->add_option("--batch-size", o.batch_size, "Batch size");
  train->add_option("--lr", o.lr, "Adam learning rate");
  train->add_option("--seed", o.seed, "Training seed");
  train->add_option("--conv", o.conv, "Conv filter counts")->delimiter(',');
  train->add_option("--hidden", o.hidden, "Hidden dense widths")->delimiter(',');
  train->add_option("--dropout", o.dropout, "Dropout rate");
  train->add_option("--input-noise", o.input_noise, "Train-only input noise sigma");
  train->add_option("--augment-noise", o.augment_noise, "Noise sigma of the noise augmentation");

  auto* classify = app.add_subcommand("classify", "Label every interior pixel of a cube");
  classify->add_option("--model", o.model, "Checkpoint")->required();
  classify->add_option("--cube", o.cube, "Raw (unstandardized) cube")->required();
  classify->add_option("--out", o.out, "Output label map prefix")->required();
  classify->add_flag("--probabilities", o.probabilities, "Also write <out>.probabilities cube");

  auto* eval = app.add_subcommand("eval", "Compare a predicted label map with ground truth");
  eval->add_option("--pred", o.pred, "Predicted label map")->required();
  eval->add_option("--truth", o.truth, "Ground-truth label map")->required();
  eval->add_option("--out", o.out, "Output prefix (.metrics.json, .confusion.csv)")->required();

  auto* render = app.add_subcommand("render", "Render a label map as PNG");
  render->add_option("--labels", o.labels_in, "Label map")->required();
  render->add_option("--out", o.out, "PNG path")->required();

  auto* all = app.add_subcommand("run-all", "Full synthetic leave-one-scene-out experiment");
  all->add_option("--config", o.config, "Pipeline config JSON");
  all->add_option("--out", o.out, "Output directory")->required();
  all->add_option("--seed", o.seed, "Global seed");
  all->add_option("--scenes", o.scenes, "Scene count");
  all->add_option("--rows", o.rows, "Scene rows");
  all->add_option("--cols", o.cols, "Scene cols");
  all->add_option("--folds", o.folds, "Held-out scene indices")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "specgt: usage error: " << e.what() << '\n';
    return exit_code(ErrorKind::usage);
  }

  try {
    if (gen->parsed()) cmd_gen_scene(o, out);
    else if (unmix->parsed()) cmd_unmix(o, out);
    else if (adapt->parsed()) cmd_adapt(o, out);
    else if (synth->parsed()) cmd_synth_gt(o, out);
    else if (build->parsed()) cmd_build_dataset(o, out);
    else if (train->parsed()) cmd_train(o, out);
    else if (classify->parsed()) cmd_classify(o, out);
    else if (eval->parsed()) cmd_eval(o, out);
    else if (render->parsed()) cmd_render(o, out);
    else if (all->parsed()) cmd_run_all(o, out);
  } catch (const Error& e) {
    static constexpr const char* kLabels[] = {"usage error", "data error", "numerical error", "i/o error"};
    err << "specgt: " << kLabels[static_cast<int>(e.kind())] << ": " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    err << "specgt: i/o error: " << e.what() << '\n';
    return exit_code(ErrorKind::io);
  } catch (const std::exception& e) {
    err << "specgt: numerical error: " << e.what() << '\n';
    return exit_code(ErrorKind::numerical);
  }
  return 0;
}

int run(int argc, const char* const* argv) { return run(argc, argv, std::cout, std::cerr); }

}  // namespace specgt::cli
