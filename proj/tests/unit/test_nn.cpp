#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <vector>

#include <doctest.h>

#include "oracles/fixtures.hpp"
#include "oracles/gradcheck.hpp"
#include "specgt/error.hpp"
#include "specgt/nn.hpp"
#include "unit/tmpdir.hpp"

using namespace specgt;
using namespace specgt::nn;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.patch_size = 3;
  cfg.bands = 2;
  cfg.conv_filters = {3, 2};
  cfg.dense_sizes = {4, 3};
  cfg.class_count = 3;
  cfg.dropout_rate = 0.0;
  return cfg;
}

}  // namespace

TEST_CASE("conv2d shapes and identity kernel") {
  Rng rng(1);
  Conv2d conv(11, 64, 3);
  CHECK(conv.forward(oracle::random_tensor(rng, 2, 5, 5, 11)).c == 64);
  Conv2d id(1, 1, 1);
  id.weight.value = {1.0};
  const auto x = oracle::random_tensor(rng, 2, 4, 4, 1);
  CHECK(id.forward(x) == x);
}

TEST_CASE("layer gradients match central differences") {
  Rng rng(2);
  SUBCASE("conv2d") {
    for (int t = 0; t < 10; ++t) {
      Conv2d conv(3, 4, 3);
      oracle::randomize(conv.weight, rng);
      oracle::randomize(conv.bias, rng);
      oracle::LayerProbe probe{[&](const Tensor4& x) { return conv.forward(x); },
                               [&](const Tensor4& g) { return conv.backward(g); }, {&conv.weight, &conv.bias}};
      CHECK(oracle::probe_error(probe, oracle::random_tensor(rng, 2, 4, 3, 3), rng) <= 1e-6);
    }
  }
  SUBCASE("batchnorm train and infer") {
    for (Mode mode : {Mode::train, Mode::infer}) {
      for (int t = 0; t < 10; ++t) {
        BatchNorm bn(3);
        oracle::randomize(bn.gain, rng);
        oracle::randomize(bn.shift, rng);
        for (std::size_t c = 0; c < 3; ++c) {
          bn.running_mean[c] = rng.normal();
          bn.running_var[c] = 0.5 + rng.uniform();
        }
        oracle::LayerProbe probe{[&](const Tensor4& x) { return bn.forward(x, mode); },
                                 [&](const Tensor4& g) { return bn.backward(g); }, {&bn.gain, &bn.shift}};
        CHECK(oracle::probe_error(probe, oracle::random_tensor(rng, 3, 2, 2, 3), rng) <= 1e-6);
      }
    }
  }
  SUBCASE("relu") {
    for (int t = 0; t < 10; ++t) {
      Relu relu;
      auto x = oracle::random_tensor(rng, 2, 3, 3, 2);
      oracle::avoid_kinks(x);
      oracle::LayerProbe probe{[&](const Tensor4& in) { return relu.forward(in); },
                               [&](const Tensor4& g) { return relu.backward(g); }, {}};
      CHECK(oracle::probe_error(probe, x, rng) <= 1e-6);
    }
  }
  SUBCASE("dropout with a fixed mask") {
    for (int t = 0; t < 10; ++t) {
      Dropout drop(0.25);
      oracle::LayerProbe probe{[&](const Tensor4& in) {
                                 Rng mask_rng(123);
                                 return drop.forward(in, Mode::train, mask_rng);
                               },
                               [&](const Tensor4& g) { return drop.backward(g); }, {}};
      CHECK(oracle::probe_error(probe, oracle::random_tensor(rng, 2, 3, 3, 2), rng) <= 1e-6);
    }
  }
  SUBCASE("dense") {
    for (int t = 0; t < 10; ++t) {
      Dense dense(6, 4);
      oracle::randomize(dense.weight, rng);
      oracle::randomize(dense.bias, rng);
      oracle::LayerProbe probe{[&](const Tensor4& x) { return dense.forward(x); },
                               [&](const Tensor4& g) { return dense.backward(g); }, {&dense.weight, &dense.bias}};
      CHECK(oracle::probe_error(probe, oracle::random_tensor(rng, 3, 1, 1, 6), rng) <= 1e-6);
    }
  }
  SUBCASE("softmax cross-entropy") {
    for (int t = 0; t < 10; ++t) CHECK(oracle::cross_entropy_error(rng, 4, 7) <= 1e-6);
  }
}

TEST_CASE("whole-model gradient in train mode") {
  Rng rng(3);
  Model model(small_config(), 9);
  auto x = oracle::random_tensor(rng, 4, 3, 3, 2);
  std::vector<std::uint8_t> labels{0, 1, 2, 1};
  Rng unused(0);
  auto loss_of = [&] { return softmax_cross_entropy(model.logits(x, Mode::train, &unused), labels).loss; };
  const auto z = model.logits(x, Mode::train, &unused);
  for (auto* p : model.parameters()) std::fill(p->grad.begin(), p->grad.end(), 0.0);
  model.backward(softmax_cross_entropy(z, labels).grad);
  for (auto* p : model.parameters()) {
    std::vector<double> fd(p->size());
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double keep = p->value[i];
      p->value[i] = keep + 1e-6;
      const double up = loss_of();
      p->value[i] = keep - 1e-6;
      const double down = loss_of();
      p->value[i] = keep;
      fd[i] = (up - down) / 2e-6;
    }
    CAPTURE(p->name);
    // Conv biases feed train-mode batch norm, which cancels them: both sides vanish.
    double norm = 0.0;
    for (double g : p->grad) norm = std::max(norm, std::abs(g));
    if (p->name.find("conv") != std::string::npos && p->name.find("bias") != std::string::npos) {
      CHECK(norm < 1e-12);
      continue;
    }
    CHECK(oracle::relative_error(fd, p->grad) <= 1e-4);
  }
}

TEST_CASE("batchnorm behaviour") {
  Rng rng(4);
  BatchNorm bn(3);
  auto x = oracle::random_tensor(rng, 8, 2, 2, 3);
  for (double& v : x.data) v = 3.0 * v + 2.0;
  const auto y = bn.forward(x, Mode::train);
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t i = c; i < y.size(); i += 3) mean += y.data[i];
    mean /= 32.0;
    for (std::size_t i = c; i < y.size(); i += 3) sq += (y.data[i] - mean) * (y.data[i] - mean);
    CHECK(std::abs(mean) < 1e-12);
    CHECK(std::abs(sq / 32.0 - 1.0) < 1e-4);
  }
  BatchNorm fresh(3);
  const auto z = fresh.forward(x, Mode::infer);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(z.data[i] - x.data[i] / std::sqrt(1.0 + 1e-5)) < 1e-15);
  CHECK_THROWS_AS(fresh.forward(oracle::random_tensor(rng, 1, 1, 1, 3), Mode::train), Error);
}

TEST_CASE("dropout") {
  Rng rng(5);
  const auto x = oracle::random_tensor(rng, 4, 5, 5, 16);
  Dropout none(0.0);
  CHECK(none.forward(x, Mode::train, rng) == x);
  Dropout quarter(0.25);
  CHECK(quarter.forward(x, Mode::infer, rng) == x);
  Tensor4 ones(100, 10, 10, 10, 1.0);
  const auto y = quarter.forward(ones, Mode::train, rng);
  const double mean = std::accumulate(y.data.begin(), y.data.end(), 0.0) / static_cast<double>(y.size());
  CHECK(std::abs(mean - 1.0) < 0.01);
  std::size_t zeros = 0;
  for (double v : y.data) {
    if (v == 0.0) ++zeros;
    else CHECK(std::abs(v - 4.0 / 3.0) < 1e-15);
  }
  CHECK(std::abs(static_cast<double>(zeros) / 1e5 - 0.25) < 0.01);
}

TEST_CASE("dense identity and softmax") {
  Rng rng(6);
  Dense dense(4, 4);
  for (std::size_t i = 0; i < 4; ++i) dense.weight.value[i * 4 + i] = 1.0;
  const auto x = oracle::random_tensor(rng, 3, 1, 1, 4);
  CHECK(dense.forward(x) == x);

  Tensor4 uniform(2, 1, 1, 7, 0.3);
  CHECK(std::abs(softmax_cross_entropy(uniform, std::vector<std::uint8_t>{0, 6}).loss - std::log(7.0)) < 1e-12);
  Tensor4 logits(1, 1, 1, 3);
  logits.data = {1000.0, 0.0, -5.0};
  const auto p = softmax(logits);
  CHECK(std::abs(p.data[0] + p.data[1] + p.data[2] - 1.0) < 1e-12);
  logits.data = {2.0, 1.0, -1.0};
  const auto q = softmax(logits);
  for (double v : q.data) CHECK((v > 0.0 && v < 1.0));
  CHECK(std::abs(q.data[0] + q.data[1] + q.data[2] - 1.0) < 1e-12);
}

TEST_CASE("adam") {
  TrainConfig cfg;
  Param p("p", {1}, 1.0);
  std::uint64_t step = 0;
  std::vector<Param*> params{&p};
  p.grad = {0.0};
  adam_step(params, step, cfg);
  CHECK(p.value[0] == 1.0);
  Param q("q", {1}, 1.0);
  q.grad = {2.0};
  std::uint64_t s2 = 0;
  std::vector<Param*> qs{&q};
  adam_step(qs, s2, cfg);
  CHECK(std::abs(q.value[0] - (1.0 - 0.001 * 2.0 / (2.0 + 1e-8))) < 1e-12);
  q.grad = {std::numeric_limits<double>::infinity()};
  const double before = q.value[0];
  CHECK_THROWS_AS(adam_step(qs, s2, cfg), Error);
  CHECK(q.value[0] == before);
  CHECK(s2 == 1);
}

TEST_CASE("twenty-patch overfit") {
  Rng rng(7);
  ModelConfig cfg;
  std::vector<dataset::Patch> patches(20);
  std::vector<std::uint8_t> labels(20);
  for (std::size_t i = 0; i < 20; ++i) {
    patches[i].size = 5;
    patches[i].bands = 11;
    for (int v = 0; v < 275; ++v) patches[i].values.push_back(rng.normal());
    patches[i].label = labels[i] = static_cast<std::uint8_t>(i % 7);
  }
  Model model(cfg, 1);
  TrainConfig tc;
  tc.batch_size = 20;
  const auto x = stack_patches(patches);
  Rng drop(2);
  std::size_t steps = 0;
  double loss = 1.0, acc = 0.0;
  while (steps < 200) {
    train_step(model, x, labels, tc, drop);
    ++steps;
    const auto z = model.logits(x, Mode::infer);
    loss = softmax_cross_entropy(z, labels).loss;
    const auto pred = argmax_rows(z);
    acc = 0.0;
    for (std::size_t i = 0; i < 20; ++i) acc += pred[i] == labels[i] ? 0.05 : 0.0;
    if (loss < 0.05 && acc > 0.999) break;
  }
  MESSAGE("overfit after " << steps << " steps, loss " << loss);
  CHECK(loss < 0.05);
  CHECK(acc > 0.999);
}

TEST_CASE("training is deterministic") {
  Rng rng(8);
  const auto img = fixture::labeled_image(rng, 12, 12, 2, 3);
  auto ds = dataset::extract_patches(img.cube, img.labels, 3);
  ds.band_stats = dataset::compute_band_stats(img.cube);
  TrainConfig tc;
  tc.epochs = 2;
  tc.per_label_samples = 20;
  tc.batch_size = 8;
  tc.seed = 5;
  Model a(small_config(), 4), b(small_config(), 4);
  const auto ha = train(a, ds, &ds, tc);
  const auto hb = train(b, ds, &ds, tc);
  REQUIRE(ha.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) CHECK(ha[i].loss == hb[i].loss);
  for (std::size_t i = 0; i < a.parameters().size(); ++i) CHECK(a.parameters()[i]->value == b.parameters()[i]->value);
}

TEST_CASE("training does not depend on heap addresses") {
  Rng rng(9);
  const auto img = fixture::labeled_image(rng, 16, 16, 11, 4);
  auto ds = dataset::extract_patches(img.cube, img.labels, 5);
  ds.band_stats = dataset::compute_band_stats(img.cube);
  ModelConfig cfg;
  cfg.bands = 11;
  cfg.conv_filters = {8, 6};
  cfg.dense_sizes = {10, 4};
  cfg.class_count = 4;
  TrainConfig tc;
  tc.epochs = 1;
  tc.per_label_samples = 24;
  tc.batch_size = 16;
  tc.seed = 3;
  Model a(cfg, 4);
  train(a, ds, nullptr, tc);
  // Shift later allocations to different alignments.
  std::vector<std::vector<char>> ballast;
  for (std::size_t shift : {8, 16, 24}) {
    for (std::size_t k = 1; k < 64; ++k) ballast.emplace_back(shift * k + 8);
    Model b(cfg, 4);
    train(b, ds, nullptr, tc);
    for (std::size_t i = 0; i < a.parameters().size(); ++i) CHECK(a.parameters()[i]->value == b.parameters()[i]->value);
  }
}

TEST_CASE("classification and evaluation") {
  Rng rng(9);
  const auto img = fixture::labeled_image(rng, 6, 7, 2, 3);
  SUBCASE("zeroed model predicts the tie class everywhere inside") {
    Model model(small_config(), 1);
    for (auto* p : model.parameters())
      if (p->name.find("gain") == std::string::npos) std::fill(p->value.begin(), p->value.end(), 0.0);
    std::vector<double> probs;
    const auto labels = classify_image(model, img.cube, dataset::compute_band_stats(img.cube),
                                       fixture::class_names(3), &probs);
    REQUIRE(labels.sentinel().has_value());
    CHECK(*labels.sentinel() == 3);
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t c = 0; c < 7; ++c) {
        const bool inside = r >= 1 && r <= 4 && c >= 1 && c <= 5;
        CHECK(labels.at(r, c) == (inside ? 0 : 3));
      }
    CHECK(probs.size() == 42 * 3);
  }
  SUBCASE("metrics") {
    const auto pal = make_palette(fixture::class_names(2));
    LabelMap truth(2, 2, {0, 0, 1, 1}, pal);
    CHECK(evaluate(truth, truth).overall_accuracy == 1.0);
    CHECK(evaluate(LabelMap(2, 2, {1, 1, 0, 0}, pal), truth).overall_accuracy == 0.0);
    const auto m = evaluate(LabelMap(2, 2, {0, 1, 1, 1}, pal), truth);
    CHECK(m.overall_accuracy == 0.75);
    CHECK(m.confusion[0][0] + m.confusion[0][1] == 2);
    CHECK(m.confusion[1][0] + m.confusion[1][1] == 2);
    CHECK(m.per_class_accuracy[0] == 0.5);
    CHECK(m.per_class_accuracy[1] == 1.0);
  }
}

TEST_CASE("checkpoint round trip and corruption") {
  auto dir = testutil::scratch_dir("checkpoint");
  Model model(small_config(), 3);
  model.adam_steps = 17;
  model.parameters()[0]->m[0] = 0.25;
  model.batch_norms()[0]->running_var[1] = 1.75;
  Checkpoint ck{model, {{0.1, 0.2}, {1.0, 2.0}}, fixture::class_names(3), 11, 4};
  write_checkpoint(ck, dir / "m");
  const auto back = read_checkpoint(dir / "m");
  CHECK(back.model.config() == model.config());
  CHECK(back.model.adam_steps == 17);
  CHECK(back.band_stats == ck.band_stats);
  CHECK(back.class_names == ck.class_names);
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    CHECK(back.model.parameters()[i]->value == model.parameters()[i]->value);
    CHECK(back.model.parameters()[i]->m == model.parameters()[i]->m);
    CHECK(back.model.parameters()[i]->v == model.parameters()[i]->v);
  }
  CHECK(back.model.batch_norms()[0]->running_var == model.batch_norms()[0]->running_var);
  write_checkpoint(back, dir / "again");
  std::ifstream a(dir / "m.bin", std::ios::binary), b(dir / "again.bin", std::ios::binary);
  CHECK(std::string(std::istreambuf_iterator<char>(a), {}) == std::string(std::istreambuf_iterator<char>(b), {}));
  std::filesystem::resize_file(dir / "m.bin", 64);
  CHECK_THROWS_AS(read_checkpoint(dir / "m"), Error);
}
