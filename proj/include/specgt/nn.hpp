#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "specgt/cube_io.hpp"
#include "specgt/dataset.hpp"
#include "specgt/rng.hpp"

namespace specgt::nn {

/// Storage for every tensor the network touches. A fixed alignment keeps
/// Eigen's vectorized reductions in the same order wherever the heap puts a
/// buffer, which makes training bit-reproducible.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

/// Dense NHWC tensor (batch, height, width, channels), channels fastest.
struct Tensor4 {
  std::size_t n = 0;
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t c = 0;
  Buffer data;

  Tensor4() = default;
  Tensor4(std::size_t n, std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
      : n(n), h(h), w(w), c(c), data(n * h * w * c, fill) {}

  std::size_t size() const noexcept { return data.size(); }
  std::size_t index(std::size_t i, std::size_t y, std::size_t x, std::size_t ch) const noexcept {
    return ((i * h + y) * w + x) * c + ch;
  }
  double& at(std::size_t i, std::size_t y, std::size_t x, std::size_t ch) { return data[index(i, y, x, ch)]; }
  double at(std::size_t i, std::size_t y, std::size_t x, std::size_t ch) const { return data[index(i, y, x, ch)]; }
  bool same_shape(const Tensor4& o) const noexcept { return n == o.n && h == o.h && w == o.w && c == o.c; }
  bool operator==(const Tensor4&) const = default;
};

enum class Mode { train, infer };

/// Trainable tensor with its gradient and Adam moments.
struct Param {
  std::string name;
  std::vector<std::size_t> shape;
  Buffer value;
  Buffer grad;
  Buffer m;
  Buffer v;

  Param() = default;
  Param(std::string name, std::vector<std::size_t> shape, double fill = 0.0);
  std::size_t size() const noexcept { return value.size(); }
};

/// Stride-1 cross-correlation with zero "same" padding. Weights are laid out
/// (ky, kx, in_channel, out_channel).
class Conv2d {
 public:
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel = 3);

  Tensor4 forward(const Tensor4& x);
  /// Fills weight.grad / bias.grad and returns dL/dx for the last forward input
  /// (an empty tensor when input_grad is false).
  Tensor4 backward(const Tensor4& grad_out, bool input_grad = true);

  std::size_t in_channels() const noexcept { return in_; }
  std::size_t out_channels() const noexcept { return out_; }
  std::size_t kernel() const noexcept { return k_; }

  Param weight;
  Param bias;

 private:
  std::size_t in_;
  std::size_t out_;
  std::size_t k_;
  std::size_t n_ = 0, h_ = 0, w_ = 0;
  Buffer columns_;
  Buffer grad_columns_;
  Buffer weight_t_;
};

/// Per-channel batch normalization over (batch, height, width).
class BatchNorm {
 public:
  explicit BatchNorm(std::size_t channels, double momentum = 0.9, double epsilon = 1e-5);

  /// Train mode needs at least two samples and updates the running statistics.
  Tensor4 forward(const Tensor4& x, Mode mode);
  Tensor4 backward(const Tensor4& grad_out);

  Param gain;
  Param shift;
  Buffer running_mean;
  Buffer running_var;
  double momentum;
  double epsilon;

 private:
  Mode last_mode_ = Mode::infer;
  Tensor4 x_hat_;
  Buffer inv_std_;
};

class Relu {
 public:
  Tensor4 forward(Tensor4 x);
  Tensor4 backward(Tensor4 grad_out) const;

 private:
  Buffer mask_;  // 1 where the input was positive
};

/// Inverted dropout: train mode zeroes with probability `rate` and scales
/// survivors by 1 / (1 - rate); infer mode is the identity. The rate is
/// resolved to a multiple of 2^-32.
class Dropout {
 public:
  explicit Dropout(double rate);

  Tensor4 forward(Tensor4 x, Mode mode, Rng& rng);
  Tensor4 backward(Tensor4 grad_out) const;
  double rate() const noexcept { return rate_; }

 private:
  double rate_;
  Buffer scale_;
};

/// Affine map on (n, 1, 1, features) tensors; weights laid out (in, out).
class Dense {
 public:
  Dense(std::size_t in_features, std::size_t out_features);

  Tensor4 forward(const Tensor4& x);
  Tensor4 backward(const Tensor4& grad_out);

  std::size_t in_features() const noexcept { return in_; }
  std::size_t out_features() const noexcept { return out_; }

  Param weight;
  Param bias;

 private:
  std::size_t in_;
  std::size_t out_;
  Tensor4 input_;
};

/// Row-wise softmax of (n, 1, 1, d) logits, with max subtraction.
Tensor4 softmax(const Tensor4& logits);

struct LossResult {
  double loss = 0.0;
  Tensor4 grad;  // (p - onehot) / n
};
LossResult softmax_cross_entropy(const Tensor4& logits, std::span<const std::uint8_t> labels);

struct ModelConfig {
  std::size_t patch_size = 5;
  std::size_t bands = 11;
  std::vector<std::size_t> conv_filters{64, 64, 32, 16};
  std::size_t kernel = 3;
  std::vector<std::size_t> dense_sizes{128, 64, 7};
  double dropout_rate = 0.25;
  std::size_t class_count = 7;
  /// Optional train-only Gaussian input noise ("denoising" layer); 0 disables it.
  double input_noise_sigma = 0.0;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct TrainConfig {
  std::size_t batch_size = 64;
  double learning_rate = 0.001;
  std::size_t epochs = 200;
  std::size_t per_label_samples = 30000;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double augment_noise_sigma = 0.1;

  void validate() const;
};

/// [conv -> batchnorm -> relu -> dropout] per conv filter count, flatten,
/// [dense -> relu -> dropout] per hidden width, final dense, softmax.
class Model {
 public:
  /// He-normal weights (std sqrt(2 / fan_in)), zero biases, unit gains.
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }

  Tensor4 logits(const Tensor4& x, Mode mode, Rng* rng = nullptr);
  Tensor4 forward(const Tensor4& x, Mode mode, Rng* rng = nullptr) { return softmax(logits(x, mode, rng)); }
  /// Back-propagates dL/dlogits of the last train/infer pass into every Param::grad.
  void backward(const Tensor4& grad_logits);

  std::vector<Param*> parameters();
  std::vector<const Param*> parameters() const;
  std::vector<BatchNorm*> batch_norms();
  std::vector<const BatchNorm*> batch_norms() const;

  std::uint64_t adam_steps = 0;

 private:
  void check_input(const Tensor4& x) const;

  ModelConfig config_;
  std::vector<Conv2d> convs_;
  std::vector<BatchNorm> norms_;
  std::vector<Relu> conv_relus_;
  std::vector<Dropout> conv_drops_;
  std::vector<Dense> denses_;
  std::vector<Relu> dense_relus_;
  std::vector<Dropout> dense_drops_;
  std::size_t flat_h_ = 0, flat_w_ = 0, flat_c_ = 0;
};

/// Bias-corrected Adam update of every parameter. Throws a numerical error on
/// a non-finite gradient before touching any state.
void adam_step(std::span<Param* const> params, std::uint64_t& step, const TrainConfig& cfg);
void adam_step(Model& model, const TrainConfig& cfg);

/// Stacks patches into an (n, size, size, bands) tensor.
Tensor4 stack_patches(std::span<const dataset::Patch> patches);

/// One forward/backward/Adam step on a batch; returns the train-mode loss.
double train_step(Model& model, const Tensor4& x, std::span<const std::uint8_t> labels, const TrainConfig& cfg,
                  Rng& rng, double* accuracy = nullptr);

struct EpochStats {
  double mean_loss = 0.0;
  double accuracy = 0.0;
  std::size_t samples = 0;
};

/// Consumes the epoch plan in batches of cfg.batch_size. A trailing batch of
/// one sample is skipped because train-mode batch normalization needs two.
EpochStats train_epoch(Model& model, const dataset::PatchDataset& ds, std::span<const dataset::EpochItem> plan,
                       const TrainConfig& cfg, Rng& rng);

struct HistoryRow {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
};

/// Full training loop: a fresh balanced epoch per epoch, validation accuracy in
/// infer mode after each. Randomness derives from cfg.seed only.
std::vector<HistoryRow> train(Model& model, const dataset::PatchDataset& train_set,
                              const dataset::PatchDataset* validation, const TrainConfig& cfg,
                              const std::function<void(const HistoryRow&)>& on_epoch = {});

/// Infer-mode accuracy over a patch set (0 for an empty set).
double accuracy(Model& model, std::span<const dataset::Patch> patches, std::size_t batch_size = 256);

/// Index of the largest entry of each row, lowest index on ties.
std::vector<std::uint8_t> argmax_rows(const Tensor4& probabilities);

/// Labels every pixel with a full patch window from infer-mode probabilities.
/// The raw cube is standardized with `band_stats` first. Border pixels get the
/// sentinel class_count, recorded in the palette as "unlabeled".
LabelMap classify_image(Model& model, const SpectralCube& cube, const dataset::BandStats& band_stats,
                        const std::vector<std::string>& class_names,
                        std::vector<double>* probabilities = nullptr);

struct Metrics {
  double overall_accuracy = 0.0;
  std::vector<std::optional<double>> per_class_accuracy;
  std::vector<std::vector<std::size_t>> confusion;  // [truth][prediction]
  std::size_t n_evaluated = 0;
  std::size_t n_sentinel = 0;
};

/// Compares non-sentinel pixels of two maps with the same dims and class count.
Metrics evaluate(const LabelMap& prediction, const LabelMap& truth);

struct Checkpoint {
  Model model;
  dataset::BandStats band_stats;
  std::vector<std::string> class_names;
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
};

// <path>.bin: every tensor as f64 little-endian; <path>.json: config and tensor directory.
void write_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

void write_history_csv(const std::vector<HistoryRow>& history, const std::filesystem::path& path);

}  // namespace specgt::nn
