#include "specgt/nn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <Eigen/Dense>

#include "binary_io.hpp"
#include "specgt/error.hpp"

namespace specgt::nn {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

constexpr int kCheckpointVersion = 1;

Eigen::Index ix(std::size_t v) { return static_cast<Eigen::Index>(v); }

void he_init(Param& p, std::size_t fan_in, Rng& rng) {
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : p.value) v = sd * rng.normal();
}

}  // namespace

Param::Param(std::string name_, std::vector<std::size_t> shape_, double fill)
    : name(std::move(name_)), shape(std::move(shape_)) {
  std::size_t count = 1;
  for (std::size_t s : shape) count *= s;
  value.assign(count, fill);
  grad.assign(count, 0.0);
  m.assign(count, 0.0);
  v.assign(count, 0.0);
}

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel)
    : weight("weight", {kernel, kernel, in_channels, out_channels}),
      bias("bias", {out_channels}),
      in_(in_channels),
      out_(out_channels),
      k_(kernel) {
  if (in_ == 0 || out_ == 0 || k_ == 0 || k_ % 2 == 0) {
    throw usage_error("conv2d: channels must be positive and the kernel odd");
  }
}

Tensor4 Conv2d::forward(const Tensor4& x) {
  if (x.c != in_) {
    throw data_error("conv2d: input has " + std::to_string(x.c) + " channels, layer expects " + std::to_string(in_));
  }
  n_ = x.n;
  h_ = x.h;
  w_ = x.w;
  const std::size_t rows = n_ * h_ * w_;
  const std::size_t kkc = k_ * k_ * in_;
  const long pad = static_cast<long>(k_ / 2);
  columns_.resize(rows * kkc);
  for (std::size_t i = 0; i < n_; ++i) {
    for (std::size_t y = 0; y < h_; ++y) {
      for (std::size_t xx = 0; xx < w_; ++xx) {
        double* row = &columns_[((i * h_ + y) * w_ + xx) * kkc];
        for (std::size_t ky = 0; ky < k_; ++ky) {
          const long sy = static_cast<long>(y + ky) - pad;
          const bool row_inside = sy >= 0 && sy < static_cast<long>(h_);
          for (std::size_t kx = 0; kx < k_; ++kx, row += in_) {
            const long sx = static_cast<long>(xx + kx) - pad;
            if (!row_inside || sx < 0 || sx >= static_cast<long>(w_)) {
              std::fill_n(row, in_, 0.0);
              continue;
            }
            const double* src = &x.data[x.index(i, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx), 0)];
            std::copy_n(src, in_, row);
          }
        }
      }
    }
  }
  Tensor4 out(n_, h_, w_, out_);
  MapMat y(out.data.data(), ix(rows), ix(out_));
  y.noalias() = ConstMapMat(columns_.data(), ix(rows), ix(kkc)) * ConstMapMat(weight.value.data(), ix(kkc), ix(out_));
  y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.value.data(), ix(out_));
  return out;
}

Tensor4 Conv2d::backward(const Tensor4& grad_out, bool input_grad) {
  if (grad_out.n != n_ || grad_out.h != h_ || grad_out.w != w_ || grad_out.c != out_) {
    throw data_error("conv2d backward: gradient shape does not match the last forward output");
  }
  const std::size_t rows = n_ * h_ * w_;
  const std::size_t kkc = k_ * k_ * in_;
  const long pad = static_cast<long>(k_ / 2);
  ConstMapMat dy(grad_out.data.data(), ix(rows), ix(out_));
  ConstMapMat cols(columns_.data(), ix(rows), ix(kkc));
  MapMat(weight.grad.data(), ix(kkc), ix(out_)).noalias() = cols.transpose() * dy;
  Eigen::Map<Eigen::RowVectorXd>(bias.grad.data(), ix(out_)) = dy.colwise().sum();
  if (!input_grad) return {};

  // dx is the full correlation of dy with the spatially flipped kernel:
  // gather dy windows (offset p - ky, p - kx) and multiply by the weights
  // re-laid out as (ky, kx, out_channel) x in_channel.
  const std::size_t kko = k_ * k_ * out_;
  weight_t_.resize(kko * in_);
  for (std::size_t kk = 0; kk < k_ * k_; ++kk) {
    for (std::size_t ci = 0; ci < in_; ++ci) {
      for (std::size_t co = 0; co < out_; ++co) {
        weight_t_[(kk * out_ + co) * in_ + ci] = weight.value[(kk * in_ + ci) * out_ + co];
      }
    }
  }
  grad_columns_.resize(rows * kko);
  for (std::size_t i = 0; i < n_; ++i) {
    for (std::size_t y = 0; y < h_; ++y) {
      for (std::size_t xx = 0; xx < w_; ++xx) {
        double* row = &grad_columns_[((i * h_ + y) * w_ + xx) * kko];
        for (std::size_t ky = 0; ky < k_; ++ky) {
          const long sy = static_cast<long>(y) + pad - static_cast<long>(ky);
          const bool row_inside = sy >= 0 && sy < static_cast<long>(h_);
          for (std::size_t kx = 0; kx < k_; ++kx, row += out_) {
            const long sx = static_cast<long>(xx) + pad - static_cast<long>(kx);
            if (!row_inside || sx < 0 || sx >= static_cast<long>(w_)) {
              std::fill_n(row, out_, 0.0);
              continue;
            }
            std::copy_n(&grad_out.data[grad_out.index(i, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx), 0)],
                        out_, row);
          }
        }
      }
    }
  }
  Tensor4 dx(n_, h_, w_, in_);
  MapMat(dx.data.data(), ix(rows), ix(in_)).noalias() =
      ConstMapMat(grad_columns_.data(), ix(rows), ix(kko)) * ConstMapMat(weight_t_.data(), ix(kko), ix(in_));
  return dx;
}

// ---------------------------------------------------------------------------
// BatchNorm

BatchNorm::BatchNorm(std::size_t channels, double momentum_, double epsilon_)
    : gain("gain", {channels}, 1.0),
      shift("shift", {channels}),
      running_mean(channels, 0.0),
      running_var(channels, 1.0),
      momentum(momentum_),
      epsilon(epsilon_) {}

Tensor4 BatchNorm::forward(const Tensor4& x, Mode mode) {
  const std::size_t channels = gain.size();
  if (x.c != channels) throw data_error("batch_norm: channel count mismatch");
  const std::size_t count = x.n * x.h * x.w;
  last_mode_ = mode;
  inv_std_.assign(channels, 0.0);
  x_hat_ = Tensor4(x.n, x.h, x.w, x.c);
  Tensor4 y(x.n, x.h, x.w, x.c);
  if (mode == Mode::train) {
    if (x.n < 2) throw data_error("batch_norm: train mode needs a batch of at least 2");
    std::vector<double> mean(channels, 0.0);
    std::vector<double> var(channels, 0.0);
    for (std::size_t p = 0; p < count; ++p) {
      for (std::size_t ch = 0; ch < channels; ++ch) mean[ch] += x.data[p * channels + ch];
    }
    for (double& v : mean) v /= static_cast<double>(count);
    for (std::size_t p = 0; p < count; ++p) {
      for (std::size_t ch = 0; ch < channels; ++ch) {
        const double d = x.data[p * channels + ch] - mean[ch];
        var[ch] += d * d;
      }
    }
    for (std::size_t ch = 0; ch < channels; ++ch) {
      var[ch] /= static_cast<double>(count);
      inv_std_[ch] = 1.0 / std::sqrt(var[ch] + epsilon);
      running_mean[ch] = momentum * running_mean[ch] + (1.0 - momentum) * mean[ch];
      running_var[ch] = momentum * running_var[ch] + (1.0 - momentum) * var[ch];
    }
    for (std::size_t p = 0; p < count; ++p) {
      for (std::size_t ch = 0; ch < channels; ++ch) {
        const std::size_t i = p * channels + ch;
        x_hat_.data[i] = (x.data[i] - mean[ch]) * inv_std_[ch];
        y.data[i] = gain.value[ch] * x_hat_.data[i] + shift.value[ch];
      }
    }
  } else {
    for (std::size_t ch = 0; ch < channels; ++ch) inv_std_[ch] = 1.0 / std::sqrt(running_var[ch] + epsilon);
    for (std::size_t p = 0; p < count; ++p) {
      for (std::size_t ch = 0; ch < channels; ++ch) {
        const std::size_t i = p * channels + ch;
        x_hat_.data[i] = (x.data[i] - running_mean[ch]) * inv_std_[ch];
        y.data[i] = gain.value[ch] * x_hat_.data[i] + shift.value[ch];
      }
    }
  }
  return y;
}

Tensor4 BatchNorm::backward(const Tensor4& grad_out) {
  if (!grad_out.same_shape(x_hat_)) throw data_error("batch_norm backward: shape mismatch");
  const std::size_t channels = gain.size();
  const std::size_t count = grad_out.n * grad_out.h * grad_out.w;
  std::fill(gain.grad.begin(), gain.grad.end(), 0.0);
  std::fill(shift.grad.begin(), shift.grad.end(), 0.0);
  for (std::size_t p = 0; p < count; ++p) {
    for (std::size_t ch = 0; ch < channels; ++ch) {
      const std::size_t i = p * channels + ch;
      gain.grad[ch] += grad_out.data[i] * x_hat_.data[i];
      shift.grad[ch] += grad_out.data[i];
    }
  }
  Tensor4 dx(grad_out.n, grad_out.h, grad_out.w, grad_out.c);
  if (last_mode_ == Mode::infer) {
    for (std::size_t p = 0; p < count; ++p) {
      for (std::size_t ch = 0; ch < channels; ++ch) {
        const std::size_t i = p * channels + ch;
        dx.data[i] = grad_out.data[i] * gain.value[ch] * inv_std_[ch];
      }
    }
    return dx;
  }
  // dx = inv_std / M * (M dxhat - sum(dxhat) - xhat * sum(dxhat * xhat)), dxhat = dy * gain.
  const double m = static_cast<double>(count);
  for (std::size_t p = 0; p < count; ++p) {
    for (std::size_t ch = 0; ch < channels; ++ch) {
      const std::size_t i = p * channels + ch;
      const double dxhat = grad_out.data[i] * gain.value[ch];
      const double sum_dxhat = shift.grad[ch] * gain.value[ch];
      const double sum_dxhat_xhat = gain.grad[ch] * gain.value[ch];
      dx.data[i] = inv_std_[ch] / m * (m * dxhat - sum_dxhat - x_hat_.data[i] * sum_dxhat_xhat);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Relu, Dropout

Tensor4 Relu::forward(Tensor4 y) {
  mask_.resize(y.size());
  double* d = y.data.data();
  double* m = mask_.data();
  for (std::size_t i = 0; i < y.size(); ++i) {
    m[i] = d[i] > 0.0 ? 1.0 : 0.0;
    d[i] *= m[i];
  }
  return y;
}

Tensor4 Relu::backward(Tensor4 dx) const {
  if (dx.size() != mask_.size()) throw data_error("relu backward: shape mismatch");
  double* d = dx.data.data();
  const double* m = mask_.data();
  for (std::size_t i = 0; i < dx.size(); ++i) d[i] *= m[i];
  return dx;
}

Dropout::Dropout(double rate) : rate_(rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw usage_error("dropout: rate must be in [0, 1)");
}

Tensor4 Dropout::forward(Tensor4 y, Mode mode, Rng& rng) {
  if (mode == Mode::infer || rate_ == 0.0) {
    scale_.assign(y.size(), 1.0);
    return y;
  }
  // Each engine draw yields two 32-bit lanes; a lane below rate * 2^32 drops its value.
  const double keep = 1.0 / (1.0 - rate_);
  const auto threshold = static_cast<std::uint64_t>(std::ldexp(rate_, 32));
  scale_.resize(y.size());
  for (std::size_t i = 0; i < y.size(); i += 2) {
    const std::uint64_t bits = rng.next_u64();
    scale_[i] = (bits & 0xffffffffULL) < threshold ? 0.0 : keep;
    if (i + 1 < y.size()) scale_[i + 1] = (bits >> 32) < threshold ? 0.0 : keep;
  }
  double* d = y.data.data();
  const double* sc = scale_.data();
  for (std::size_t i = 0; i < y.size(); ++i) d[i] *= sc[i];
  return y;
}

Tensor4 Dropout::backward(Tensor4 dx) const {
  if (dx.size() != scale_.size()) throw data_error("dropout backward: shape mismatch");
  for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] *= scale_[i];
  return dx;
}

// ---------------------------------------------------------------------------
// Dense

Dense::Dense(std::size_t in_features, std::size_t out_features)
    : weight("weight", {in_features, out_features}), bias("bias", {out_features}), in_(in_features), out_(out_features) {
  if (in_ == 0 || out_ == 0) throw usage_error("dense: feature counts must be positive");
}

Tensor4 Dense::forward(const Tensor4& x) {
  if (x.h * x.w * x.c != in_) {
    throw data_error("dense: input has " + std::to_string(x.h * x.w * x.c) + " features, layer expects " +
                     std::to_string(in_));
  }
  input_ = x;
  Tensor4 y(x.n, 1, 1, out_);
  MapMat out(y.data.data(), ix(x.n), ix(out_));
  out.noalias() = ConstMapMat(x.data.data(), ix(x.n), ix(in_)) * ConstMapMat(weight.value.data(), ix(in_), ix(out_));
  out.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.value.data(), ix(out_));
  return y;
}

Tensor4 Dense::backward(const Tensor4& grad_out) {
  if (grad_out.n != input_.n || grad_out.h * grad_out.w * grad_out.c != out_) {
    throw data_error("dense backward: shape mismatch");
  }
  ConstMapMat dy(grad_out.data.data(), ix(grad_out.n), ix(out_));
  ConstMapMat x(input_.data.data(), ix(input_.n), ix(in_));
  MapMat(weight.grad.data(), ix(in_), ix(out_)).noalias() = x.transpose() * dy;
  Eigen::Map<Eigen::RowVectorXd>(bias.grad.data(), ix(out_)) = dy.colwise().sum();
  Tensor4 dx(input_.n, input_.h, input_.w, input_.c);
  MapMat(dx.data.data(), ix(input_.n), ix(in_)).noalias() =
      dy * ConstMapMat(weight.value.data(), ix(in_), ix(out_)).transpose();
  return dx;
}

// ---------------------------------------------------------------------------
// Softmax / loss

Tensor4 softmax(const Tensor4& logits) {
  Tensor4 p = logits;
  const std::size_t d = logits.h * logits.w * logits.c;
  for (std::size_t i = 0; i < logits.n; ++i) {
    double* row = &p.data[i * d];
    const double mx = *std::max_element(row, row + d);
    double sum = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      row[k] = std::exp(row[k] - mx);
      sum += row[k];
    }
    for (std::size_t k = 0; k < d; ++k) row[k] /= sum;
  }
  return p;
}

LossResult softmax_cross_entropy(const Tensor4& logits, std::span<const std::uint8_t> labels) {
  const std::size_t d = logits.h * logits.w * logits.c;
  if (labels.size() != logits.n) throw data_error("cross entropy: label count differs from batch size");
  LossResult result{0.0, softmax(logits)};
  const double inv_n = 1.0 / static_cast<double>(logits.n);
  for (std::size_t i = 0; i < logits.n; ++i) {
    if (labels[i] >= d) throw data_error("cross entropy: label " + std::to_string(labels[i]) + " out of range");
    const double* z = &logits.data[i * d];
    const double mx = *std::max_element(z, z + d);
    double sum = 0.0;
    for (std::size_t k = 0; k < d; ++k) sum += std::exp(z[k] - mx);
    // -log softmax computed in log space keeps confident predictions finite.
    result.loss += (std::log(sum) + mx - z[labels[i]]) * inv_n;
    double* g = &result.grad.data[i * d];
    g[labels[i]] -= 1.0;
    for (std::size_t k = 0; k < d; ++k) g[k] *= inv_n;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Configs

void ModelConfig::validate() const {
  if (patch_size == 0 || bands == 0) throw usage_error("model config: patch_size and bands must be positive");
  if (conv_filters.empty()) throw usage_error("model config: at least one conv layer is required");
  if (kernel == 0 || kernel % 2 == 0) throw usage_error("model config: kernel must be odd");
  if (dense_sizes.empty() || dense_sizes.back() != class_count) {
    throw usage_error("model config: last dense size must equal class_count");
  }
  if (class_count == 0 || class_count > 255) throw usage_error("model config: class_count must be in [1, 255]");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw usage_error("model config: dropout_rate must be in [0, 1)");
  if (!(input_noise_sigma >= 0.0)) throw usage_error("model config: input_noise_sigma must be >= 0");
  for (std::size_t f : conv_filters) {
    if (f == 0) throw usage_error("model config: conv filter counts must be positive");
  }
  for (std::size_t s : dense_sizes) {
    if (s == 0) throw usage_error("model config: dense sizes must be positive");
  }
}

void TrainConfig::validate() const {
  if (batch_size < 2) throw usage_error("train config: batch_size must be >= 2");
  if (!(learning_rate > 0.0)) throw usage_error("train config: learning_rate must be positive");
  if (epochs == 0 || per_label_samples == 0) throw usage_error("train config: epochs and per_label must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(adam_epsilon > 0.0)) {
    throw usage_error("train config: invalid Adam constants");
  }
  if (!(augment_noise_sigma >= 0.0)) throw usage_error("train config: augment_noise_sigma must be >= 0");
}

// ---------------------------------------------------------------------------
// Model

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(Rng::derive_seed(seed, "init"));
  std::size_t channels = config_.bands;
  for (std::size_t i = 0; i < config_.conv_filters.size(); ++i) {
    const std::size_t filters = config_.conv_filters[i];
    Conv2d conv(channels, filters, config_.kernel);
    conv.weight.name = "conv" + std::to_string(i) + ".weight";
    conv.bias.name = "conv" + std::to_string(i) + ".bias";
    he_init(conv.weight, config_.kernel * config_.kernel * channels, rng);
    convs_.push_back(std::move(conv));
    BatchNorm bn(filters);
    bn.gain.name = "bn" + std::to_string(i) + ".gain";
    bn.shift.name = "bn" + std::to_string(i) + ".shift";
    norms_.push_back(std::move(bn));
    conv_relus_.emplace_back();
    conv_drops_.emplace_back(config_.dropout_rate);
    channels = filters;
  }
  std::size_t features = config_.patch_size * config_.patch_size * channels;
  for (std::size_t j = 0; j < config_.dense_sizes.size(); ++j) {
    Dense dense(features, config_.dense_sizes[j]);
    dense.weight.name = "dense" + std::to_string(j) + ".weight";
    dense.bias.name = "dense" + std::to_string(j) + ".bias";
    he_init(dense.weight, features, rng);
    denses_.push_back(std::move(dense));
    if (j + 1 < config_.dense_sizes.size()) {
      dense_relus_.emplace_back();
      dense_drops_.emplace_back(config_.dropout_rate);
    }
    features = config_.dense_sizes[j];
  }
}

void Model::check_input(const Tensor4& x) const {
  if (x.h != config_.patch_size || x.w != config_.patch_size || x.c != config_.bands) {
    throw data_error("model: input is " + std::to_string(x.h) + "x" + std::to_string(x.w) + "x" +
                     std::to_string(x.c) + ", expected " + std::to_string(config_.patch_size) + "x" +
                     std::to_string(config_.patch_size) + "x" + std::to_string(config_.bands));
  }
}

Tensor4 Model::logits(const Tensor4& x, Mode mode, Rng* rng) {
  check_input(x);
  if (mode == Mode::train && !rng) throw usage_error("model: train mode needs a random stream");
  Rng unused(0);
  Rng& r = rng ? *rng : unused;
  Tensor4 a = x;
  if (mode == Mode::train && config_.input_noise_sigma > 0.0) {
    for (double& v : a.data) v += config_.input_noise_sigma * r.normal();
  }
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    a = convs_[i].forward(a);
    a = norms_[i].forward(a, mode);
    a = conv_relus_[i].forward(std::move(a));
    a = conv_drops_[i].forward(std::move(a), mode, r);
  }
  flat_h_ = a.h;
  flat_w_ = a.w;
  flat_c_ = a.c;
  a.c = a.h * a.w * a.c;
  a.h = 1;
  a.w = 1;
  for (std::size_t j = 0; j < denses_.size(); ++j) {
    a = denses_[j].forward(a);
    if (j + 1 < denses_.size()) {
      a = dense_relus_[j].forward(std::move(a));
      a = dense_drops_[j].forward(std::move(a), mode, r);
    }
  }
  return a;
}

void Model::backward(const Tensor4& grad_logits) {
  Tensor4 g = grad_logits;
  for (std::size_t j = denses_.size(); j-- > 0;) {
    if (j + 1 < denses_.size()) {
      g = dense_drops_[j].backward(std::move(g));
      g = dense_relus_[j].backward(std::move(g));
    }
    g = denses_[j].backward(g);
  }
  g.h = flat_h_;
  g.w = flat_w_;
  g.c = flat_c_;
  for (std::size_t i = convs_.size(); i-- > 0;) {
    g = conv_drops_[i].backward(std::move(g));
    g = conv_relus_[i].backward(std::move(g));
    g = norms_[i].backward(g);
    g = convs_[i].backward(g, i > 0);
  }
}

std::vector<Param*> Model::parameters() {
  std::vector<Param*> out;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    out.push_back(&convs_[i].weight);
    out.push_back(&convs_[i].bias);
    out.push_back(&norms_[i].gain);
    out.push_back(&norms_[i].shift);
  }
  for (auto& d : denses_) {
    out.push_back(&d.weight);
    out.push_back(&d.bias);
  }
  return out;
}

std::vector<const Param*> Model::parameters() const {
  std::vector<const Param*> out;
  for (Param* p : const_cast<Model*>(this)->parameters()) out.push_back(p);
  return out;
}

std::vector<BatchNorm*> Model::batch_norms() {
  std::vector<BatchNorm*> out;
  for (auto& bn : norms_) out.push_back(&bn);
  return out;
}

std::vector<const BatchNorm*> Model::batch_norms() const {
  std::vector<const BatchNorm*> out;
  for (const auto& bn : norms_) out.push_back(&bn);
  return out;
}

// ---------------------------------------------------------------------------
// Optimization

void adam_step(std::span<Param* const> params, std::uint64_t& step, const TrainConfig& cfg) {
  for (const Param* p : params) {
    for (double g : p->grad) {
      if (!std::isfinite(g)) throw numerical_error("adam: non-finite gradient in '" + p->name + "'");
    }
  }
  ++step;
  const double t = static_cast<double>(step);
  const double correction1 = 1.0 - std::pow(cfg.beta1, t);
  const double correction2 = 1.0 - std::pow(cfg.beta2, t);
  for (Param* p : params) {
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double g = p->grad[i];
      p->m[i] = cfg.beta1 * p->m[i] + (1.0 - cfg.beta1) * g;
      p->v[i] = cfg.beta2 * p->v[i] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = p->m[i] / correction1;
      const double v_hat = p->v[i] / correction2;
      p->value[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.adam_epsilon);
    }
  }
}

void adam_step(Model& model, const TrainConfig& cfg) {
  const auto params = model.parameters();
  adam_step(params, model.adam_steps, cfg);
}

Tensor4 stack_patches(std::span<const dataset::Patch> patches) {
  if (patches.empty()) return {};
  const std::size_t size = patches.front().size;
  const std::size_t bands = patches.front().bands;
  Tensor4 x(patches.size(), size, size, bands);
  const std::size_t per = size * size * bands;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    if (patches[i].values.size() != per) throw data_error("stack_patches: patches differ in shape");
    std::copy(patches[i].values.begin(), patches[i].values.end(), x.data.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return x;
}

std::vector<std::uint8_t> argmax_rows(const Tensor4& probabilities) {
  const std::size_t d = probabilities.h * probabilities.w * probabilities.c;
  std::vector<std::uint8_t> out(probabilities.n);
  for (std::size_t i = 0; i < probabilities.n; ++i) {
    const double* row = &probabilities.data[i * d];
    std::size_t best = 0;
    for (std::size_t k = 1; k < d; ++k) {
      if (row[k] > row[best]) best = k;
    }
    out[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

double train_step(Model& model, const Tensor4& x, std::span<const std::uint8_t> labels, const TrainConfig& cfg,
                  Rng& rng, double* accuracy_out) {
  const Tensor4 z = model.logits(x, Mode::train, &rng);
  const LossResult loss = softmax_cross_entropy(z, labels);
  if (!std::isfinite(loss.loss)) throw numerical_error("train: non-finite loss");
  model.backward(loss.grad);
  adam_step(model, cfg);
  if (accuracy_out) {
    const auto predicted = argmax_rows(z);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) correct += predicted[i] == labels[i];
    *accuracy_out = static_cast<double>(correct) / static_cast<double>(labels.size());
  }
  return loss.loss;
}

EpochStats train_epoch(Model& model, const dataset::PatchDataset& ds, std::span<const dataset::EpochItem> plan,
                       const TrainConfig& cfg, Rng& rng) {
  cfg.validate();
  EpochStats stats;
  double loss_sum = 0.0;
  double correct = 0.0;
  std::vector<dataset::Patch> batch;
  std::vector<std::uint8_t> labels;
  for (std::size_t start = 0; start < plan.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(plan.size(), start + cfg.batch_size);
    if (end - start < 2) break;
    batch.clear();
    labels.clear();
    for (std::size_t i = start; i < end; ++i) {
      batch.push_back(dataset::materialize(ds, plan[i], cfg.augment_noise_sigma));
      labels.push_back(batch.back().label);
    }
    double acc = 0.0;
    const double loss = train_step(model, stack_patches(batch), labels, cfg, rng, &acc);
    const double count = static_cast<double>(labels.size());
    loss_sum += loss * count;
    correct += acc * count;
    stats.samples += labels.size();
  }
  if (stats.samples > 0) {
    stats.mean_loss = loss_sum / static_cast<double>(stats.samples);
    stats.accuracy = correct / static_cast<double>(stats.samples);
  }
  return stats;
}

double accuracy(Model& model, std::span<const dataset::Patch> patches, std::size_t batch_size) {
  if (patches.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < patches.size(); start += batch_size) {
    const auto chunk = patches.subspan(start, std::min(batch_size, patches.size() - start));
    const auto predicted = argmax_rows(model.forward(stack_patches(chunk), Mode::infer));
    for (std::size_t i = 0; i < chunk.size(); ++i) correct += predicted[i] == chunk[i].label;
  }
  return static_cast<double>(correct) / static_cast<double>(patches.size());
}

std::vector<HistoryRow> train(Model& model, const dataset::PatchDataset& train_set,
                              const dataset::PatchDataset* validation, const TrainConfig& cfg,
                              const std::function<void(const HistoryRow&)>& on_epoch) {
  cfg.validate();
  train_set.validate();
  if (train_set.bands != model.config().bands || train_set.patch_size != model.config().patch_size ||
      train_set.class_count != model.config().class_count) {
    throw data_error("train: dataset shape or class count does not match the model");
  }
  Rng plan_rng(Rng::derive_seed(cfg.seed, "train/epochs"));
  Rng dropout_rng(Rng::derive_seed(cfg.seed, "train/dropout"));
  std::vector<HistoryRow> history;
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    const auto plan = dataset::plan_balanced_epoch(train_set, cfg.per_label_samples, plan_rng);
    const EpochStats stats = train_epoch(model, train_set, plan, cfg, dropout_rng);
    HistoryRow row{e, stats.mean_loss, stats.accuracy, std::numeric_limits<double>::quiet_NaN()};
    if (validation && !validation->patches.empty()) row.val_accuracy = accuracy(model, validation->patches);
    history.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  return history;
}

// ---------------------------------------------------------------------------
// Inference / evaluation

LabelMap classify_image(Model& model, const SpectralCube& cube, const dataset::BandStats& band_stats,
                        const std::vector<std::string>& class_names, std::vector<double>* probabilities) {
  const ModelConfig& cfg = model.config();
  if (cube.bands() != cfg.bands) {
    throw data_error("classify: cube has " + std::to_string(cube.bands()) + " bands, model expects " +
                     std::to_string(cfg.bands));
  }
  if (class_names.size() != cfg.class_count) throw data_error("classify: class name count differs from the model");
  const SpectralCube z = dataset::apply_standardization(cube, band_stats);
  const std::size_t n = cfg.patch_size;
  const std::size_t half = n / 2;
  const std::size_t d = cfg.class_count;
  const auto sentinel = static_cast<std::uint8_t>(d);
  std::vector<std::uint8_t> labels(cube.pixel_count(), sentinel);
  if (probabilities) probabilities->assign(cube.pixel_count() * d, 0.0);

  constexpr std::size_t kBatch = 256;
  std::vector<std::size_t> pixels;
  for (std::size_t r = half; r + half < cube.rows(); ++r) {
    for (std::size_t c = half; c + half < cube.cols(); ++c) pixels.push_back(r * cube.cols() + c);
  }
  for (std::size_t start = 0; start < pixels.size(); start += kBatch) {
    const std::size_t count = std::min(kBatch, pixels.size() - start);
    Tensor4 x(count, n, n, cube.bands());
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t r = pixels[start + i] / cube.cols();
      const std::size_t c = pixels[start + i] % cube.cols();
      for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t xx = 0; xx < n; ++xx) {
          for (std::size_t b = 0; b < cube.bands(); ++b) x.at(i, y, xx, b) = z.at(r - half + y, c - half + xx, b);
        }
      }
    }
    const Tensor4 p = model.forward(x, Mode::infer);
    const auto predicted = argmax_rows(p);
    for (std::size_t i = 0; i < count; ++i) {
      labels[pixels[start + i]] = predicted[i];
      if (probabilities) {
        std::copy_n(&p.data[i * d], d, probabilities->begin() + static_cast<std::ptrdiff_t>(pixels[start + i] * d));
      }
    }
  }
  auto palette = make_palette(class_names);
  palette.push_back({"unlabeled", {0, 0, 0}});
  return LabelMap(cube.rows(), cube.cols(), std::move(labels), std::move(palette), sentinel);
}

Metrics evaluate(const LabelMap& prediction, const LabelMap& truth) {
  if (prediction.rows() != truth.rows() || prediction.cols() != truth.cols()) {
    throw data_error("evaluate: prediction is " + std::to_string(prediction.rows()) + "x" +
                     std::to_string(prediction.cols()) + ", truth is " + std::to_string(truth.rows()) + "x" +
                     std::to_string(truth.cols()));
  }
  const std::size_t d = truth.class_count();
  if (prediction.class_count() != d) {
    throw data_error("evaluate: prediction has " + std::to_string(prediction.class_count()) + " classes, truth has " +
                     std::to_string(d));
  }
  auto class_of = [](const LabelMap& map, std::uint8_t label) -> std::size_t {
    return (map.sentinel() && label > *map.sentinel()) ? label - 1u : label;
  };
  Metrics m;
  m.confusion.assign(d, std::vector<std::size_t>(d, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.labels().size(); ++i) {
    const std::uint8_t pl = prediction.labels()[i];
    const std::uint8_t tl = truth.labels()[i];
    if ((prediction.sentinel() && pl == *prediction.sentinel()) || (truth.sentinel() && tl == *truth.sentinel())) {
      ++m.n_sentinel;
      continue;
    }
    const std::size_t p = class_of(prediction, pl);
    const std::size_t t = class_of(truth, tl);
    ++m.confusion[t][p];
    correct += p == t;
    ++m.n_evaluated;
  }
  m.overall_accuracy = m.n_evaluated ? static_cast<double>(correct) / static_cast<double>(m.n_evaluated) : 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    std::size_t support = 0;
    for (std::size_t v : m.confusion[k]) support += v;
    m.per_class_accuracy.push_back(support ? std::optional<double>(static_cast<double>(m.confusion[k][k]) /
                                                                   static_cast<double>(support))
                                           : std::nullopt);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

struct TensorRef {
  std::string name;
  std::vector<std::size_t> shape;
  Buffer* data;
};

std::vector<TensorRef> tensor_directory(Model& model) {
  std::vector<TensorRef> out;
  for (Param* p : model.parameters()) out.push_back({p->name, p->shape, &p->value});
  for (Param* p : model.parameters()) {
    out.push_back({p->name + ".adam_m", p->shape, &p->m});
    out.push_back({p->name + ".adam_v", p->shape, &p->v});
  }
  std::size_t i = 0;
  for (BatchNorm* bn : model.batch_norms()) {
    out.push_back({"bn" + std::to_string(i) + ".running_mean", {bn->running_mean.size()}, &bn->running_mean});
    out.push_back({"bn" + std::to_string(i) + ".running_var", {bn->running_var.size()}, &bn->running_var});
    ++i;
  }
  return out;
}

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"patch_size", c.patch_size},     {"bands", c.bands},
          {"conv_filters", c.conv_filters}, {"kernel", c.kernel},
          {"padding", "same"},              {"dense_sizes", c.dense_sizes},
          {"dropout_rate", c.dropout_rate}, {"class_count", c.class_count},
          {"input_noise_sigma", c.input_noise_sigma}};
}

ModelConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& src) {
  ModelConfig c;
  c.patch_size = detail::field<std::size_t>(j, "patch_size", src);
  c.bands = detail::field<std::size_t>(j, "bands", src);
  c.conv_filters = detail::field<std::vector<std::size_t>>(j, "conv_filters", src);
  c.kernel = detail::field<std::size_t>(j, "kernel", src);
  c.dense_sizes = detail::field<std::vector<std::size_t>>(j, "dense_sizes", src);
  c.dropout_rate = detail::field<double>(j, "dropout_rate", src);
  c.class_count = detail::field<std::size_t>(j, "class_count", src);
  c.input_noise_sigma = detail::field<double>(j, "input_noise_sigma", src);
  try {
    c.validate();
  } catch (const Error& e) {
    throw data_error("'" + src.string() + "': " + e.what());
  }
  return c;
}

}  // namespace

void write_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  Model& model = const_cast<Model&>(checkpoint.model);
  std::vector<double> blob;
  nlohmann::json tensors = nlohmann::json::array();
  for (const TensorRef& t : tensor_directory(model)) {
    tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", blob.size()}, {"count", t.data->size()}});
    blob.insert(blob.end(), t.data->begin(), t.data->end());
  }
  nlohmann::json palette = nlohmann::json::array();
  for (const auto& e : make_palette(checkpoint.class_names)) {
    palette.push_back({{"name", e.name}, {"rgb", {e.color[0], e.color[1], e.color[2]}}});
  }
  const nlohmann::json doc = {{"version", kCheckpointVersion},
                              {"kind", "model"},
                              {"dtype", "f64le"},
                              {"config", config_to_json(checkpoint.model.config())},
                              {"band_stats", {{"mean", checkpoint.band_stats.mean}, {"std", checkpoint.band_stats.std}}},
                              {"class_names", checkpoint.class_names},
                              {"palette", palette},
                              {"seed", checkpoint.seed},
                              {"epochs", checkpoint.epochs},
                              {"adam_steps", checkpoint.model.adam_steps},
                              {"tensors", tensors}};
  detail::write_f64le(with_suffix(path, ".bin"), blob);
  detail::write_json(with_suffix(path, ".json"), doc);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  const auto json_path = with_suffix(path, ".json");
  const auto doc = detail::read_json(json_path);
  if (detail::field<int>(doc, "version", json_path) != kCheckpointVersion ||
      detail::field<std::string>(doc, "kind", json_path) != "model") {
    throw data_error("'" + json_path.string() + "': not a version-1 model checkpoint");
  }
  const ModelConfig config = config_from_json(detail::field<nlohmann::json>(doc, "config", json_path), json_path);
  Checkpoint cp{Model(config, 0), {}, {}, 0, 0};
  const auto stats = detail::field<nlohmann::json>(doc, "band_stats", json_path);
  cp.band_stats.mean = detail::field<std::vector<double>>(stats, "mean", json_path);
  cp.band_stats.std = detail::field<std::vector<double>>(stats, "std", json_path);
  if (cp.band_stats.mean.size() != config.bands || cp.band_stats.std.size() != config.bands) {
    throw data_error("'" + json_path.string() + "': band_stats do not match the model's band count");
  }
  cp.class_names = detail::field<std::vector<std::string>>(doc, "class_names", json_path);
  if (cp.class_names.size() != config.class_count) {
    throw data_error("'" + json_path.string() + "': class_names do not match class_count");
  }
  cp.seed = detail::field<std::uint64_t>(doc, "seed", json_path);
  cp.epochs = detail::field<std::size_t>(doc, "epochs", json_path);
  cp.model.adam_steps = detail::field<std::uint64_t>(doc, "adam_steps", json_path);

  const auto listed = detail::field<nlohmann::json>(doc, "tensors", json_path);
  auto expected = tensor_directory(cp.model);
  if (!listed.is_array() || listed.size() != expected.size()) {
    throw data_error("'" + json_path.string() + "': tensor directory does not match the model config");
  }
  std::size_t total = 0;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto name = detail::field<std::string>(listed[i], "name", json_path);
    const auto shape = detail::field<std::vector<std::size_t>>(listed[i], "shape", json_path);
    const auto offset = detail::field<std::size_t>(listed[i], "offset", json_path);
    const auto count = detail::field<std::size_t>(listed[i], "count", json_path);
    if (name != expected[i].name || shape != expected[i].shape || offset != total ||
        count != expected[i].data->size()) {
      throw data_error("'" + json_path.string() + "': tensor '" + name + "' does not match the model layout");
    }
    total += count;
  }
  const auto blob = detail::read_f64le(with_suffix(path, ".bin"), total);
  detail::require_finite(blob, "'" + with_suffix(path, ".bin").string() + "'");
  std::size_t offset = 0;
  for (auto& t : expected) {
    std::copy_n(blob.begin() + static_cast<std::ptrdiff_t>(offset), t.data->size(), t.data->begin());
    offset += t.data->size();
  }
  return cp;
}

void write_history_csv(const std::vector<HistoryRow>& history, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw io_error("cannot open '" + path.string() + "' for writing");
  out << "epoch,loss,train_accuracy,val_accuracy\n";
  out.precision(17);
  for (const auto& row : history) {
    out << row.epoch << ',' << row.loss << ',' << row.train_accuracy << ',';
    if (!std::isnan(row.val_accuracy)) out << row.val_accuracy;
    out << '\n';
  }
  if (!out) throw io_error("write failed for '" + path.string() + "'");
}

}  // namespace specgt::nn
