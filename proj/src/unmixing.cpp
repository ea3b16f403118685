#include "specgt/unmixing.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "specgt/error.hpp"
#include "specgt/parallel.hpp"

namespace specgt::unmixing {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kFeasibleSumSlack = 1e-12;
// Below this sine the angle is treated as zero and the subgradient 0 is returned.
constexpr double kMinSine = 1e-14;
constexpr std::size_t kScanPoints = 32;
constexpr double kGoldenRelTol = 1e-8;
constexpr std::size_t kGeometricPoints = 24;

// Sort-based projection onto the unit simplex {f >= 0, sum f = 1}.
Eigen::VectorXd project_simplex(const Eigen::Ref<const Eigen::VectorXd>& v) {
  std::vector<double> u(v.data(), v.data() + v.size());
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumulative = 0.0;
  double tau = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    cumulative += u[j];
    const double t = (cumulative - 1.0) / static_cast<double>(j + 1);
    if (u[j] - t > 0.0) tau = t;
  }
  return (v.array() - tau).max(0.0).matrix();
}

}  // namespace

void UnmixOptions::validate() const {
  if (max_iters < 1) throw usage_error("unmix options: max_iters must be >= 1");
  if (!(grad_tol > 0.0) || !(obj_tol > 0.0) || !(epsilon_norm > 0.0)) {
    throw usage_error("unmix options: tolerances must be positive");
  }
}

double sam(const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& b) {
  if (a.size() != b.size()) throw data_error("sam: spectra have different lengths");
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw SingularPointError("sam: zero-norm spectrum");
  const Eigen::VectorXd ua = a / na;
  const Eigen::VectorXd ub = b / nb;
  // 2 atan2(|ua - ub|, |ua + ub|) stays accurate for angles near 0 and pi.
  const double angle = 2.0 * std::atan2((ua - ub).norm(), (ua + ub).norm());
  return std::clamp(angle, 0.0, M_PI);
}

Eigen::VectorXd project_feasible(const Eigen::Ref<const Eigen::VectorXd>& v) {
  const bool nonneg = (v.array() >= 0.0).all();
  if (nonneg && v.sum() <= 1.0 + kFeasibleSumSlack) return v;
  Eigen::VectorXd clipped = v.cwiseMax(0.0);
  if (clipped.sum() <= 1.0 + kFeasibleSumSlack) return clipped;
  return project_simplex(v);
}

// ---------------------------------------------------------------------------
// PixelProblem

PixelProblem::PixelProblem(const Eigen::Ref<const Eigen::VectorXd>& m, const Eigen::MatrixXd& E,
                           const UnmixOptions& opts)
    : PixelProblem(m, E, E.transpose() * E, opts) {}

PixelProblem::PixelProblem(const Eigen::Ref<const Eigen::VectorXd>& m, const Eigen::MatrixXd& E,
                           const Eigen::MatrixXd& gram, const UnmixOptions& opts)
    : E_(&E), m_(m), gram_(gram), etm_(E.transpose() * m), m_norm2_(m.squaredNorm()), opts_(opts) {
  if (m.size() != E.rows()) {
    throw data_error("unmix: pixel has " + std::to_string(m.size()) + " bands but endmembers have " +
                     std::to_string(E.rows()));
  }
  if (opts_.objective == Objective::spectral_angle && std::sqrt(m_norm2_) <= opts_.epsilon_norm) {
    throw SingularPointError("unmix: zero-norm pixel");
  }
}

double PixelProblem::value(const Eigen::Ref<const Eigen::VectorXd>& f) const {
  const double v = value_or_inf(f);
  if (std::isinf(v)) throw SingularPointError("objective: ||E f|| is below epsilon_norm");
  return v;
}

double PixelProblem::value_or_inf(const Eigen::Ref<const Eigen::VectorXd>& f) const noexcept {
  const double y_norm2 = f.dot(gram_ * f);
  const double my = etm_.dot(f);
  if (opts_.objective == Objective::euclidean) {
    const double quick = m_norm2_ - 2.0 * my + y_norm2;
    if (quick > 1e-6 * m_norm2_) return quick;
    return (m_ - *E_ * f).squaredNorm();
  }
  if (!(y_norm2 > 0.0) || std::sqrt(y_norm2) <= opts_.epsilon_norm) return kInf;
  const double c = std::clamp(my / std::sqrt(m_norm2_ * y_norm2), -1.0, 1.0);
  if (c < 1.0 - 1e-6) return std::acos(c);
  // Near-parallel: the cosine form loses half the digits, evaluate directly.
  const Eigen::VectorXd y = *E_ * f;
  const Eigen::VectorXd um = m_ / std::sqrt(m_norm2_);
  const Eigen::VectorXd uy = y / y.norm();
  return 2.0 * std::atan2((um - uy).norm(), (um + uy).norm());
}

Eigen::VectorXd PixelProblem::gradient(const Eigen::Ref<const Eigen::VectorXd>& f) const {
  if (opts_.objective == Objective::euclidean) return 2.0 * (gram_ * f - etm_);
  const Eigen::VectorXd y = *E_ * f;
  const double y_norm = y.norm();
  if (y_norm <= opts_.epsilon_norm) throw SingularPointError("gradient: ||E f|| is below epsilon_norm");
  const Eigen::VectorXd um = m_ / std::sqrt(m_norm2_);
  const Eigen::VectorXd uy = y / y_norm;
  const double c = um.dot(uy);
  // w is the part of the unit pixel orthogonal to the unit model spectrum; |w| = sin(angle).
  const Eigen::VectorXd w = um - c * uy;
  const double sine = w.norm();
  if (sine <= kMinSine) return Eigen::VectorXd::Zero(f.size());
  return -(E_->transpose() * w) / (y_norm * sine);
}

double objective(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& m,
                 const EndmemberLibrary& E, const UnmixOptions& opts) {
  return PixelProblem(m, E.spectra(), opts).value(f);
}

Eigen::VectorXd gradient(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& m,
                         const EndmemberLibrary& E, const UnmixOptions& opts) {
  return PixelProblem(m, E.spectra(), opts).gradient(f);
}

// ---------------------------------------------------------------------------
// Line search

LineSearchResult line_search(const PixelProblem& problem, const Eigen::Ref<const Eigen::VectorXd>& f,
                             const Eigen::Ref<const Eigen::VectorXd>& g, double scale) {
  LineSearchResult result;
  const double phi0 = problem.value_or_inf(f);
  result.value = phi0;
  const double g_norm = g.norm();
  if (!(g_norm > 0.0) || !std::isfinite(g_norm)) return result;
  const double alpha_max = scale / g_norm;
  result.alpha_max = alpha_max;

  Eigen::VectorXd trial(f.size());
  auto phi = [&](double a) {
    trial = f - a * g;
    return problem.value_or_inf(project_feasible(trial));
  };

  double best_step = 0.0;
  double best_value = phi0;

  if (problem.options().line_search == LineSearch::backtracking) {
    double a = alpha_max;
    for (int i = 0; i < 60; ++i, a *= 0.5) {
      const double v = phi(a);
      if (v < phi0) {
        best_step = a;
        best_value = v;
        break;
      }
    }
  } else {
    // Scan points: a uniform grid over (0, alpha_max] plus a geometric ladder
    // below its first point, since projection kinks can leave a narrow dip
    // near zero that the uniform grid steps over.
    std::vector<double> steps;
    const double h = alpha_max / kScanPoints;
    for (std::size_t k = kGeometricPoints; k >= 1; --k) steps.push_back(h * std::ldexp(1.0, -static_cast<int>(k)));
    for (std::size_t i = 1; i <= kScanPoints; ++i) steps.push_back(alpha_max * static_cast<double>(i) / kScanPoints);
    std::size_t best_index = steps.size();  // none
    for (std::size_t i = 0; i < steps.size(); ++i) {
      const double v = phi(steps[i]);
      if (v < best_value) {
        best_value = v;
        best_step = steps[i];
        best_index = i;
      }
    }
    // Golden-section refinement between the neighbors of the best scan point.
    double lo = 0.0;
    double hi = steps.front();
    if (best_index < steps.size()) {
      lo = best_index == 0 ? 0.0 : steps[best_index - 1];
      hi = best_index + 1 < steps.size() ? steps[best_index + 1] : alpha_max;
    }
    const double ratio = (std::sqrt(5.0) - 1.0) / 2.0;
    double x1 = hi - ratio * (hi - lo);
    double x2 = lo + ratio * (hi - lo);
    double v1 = phi(x1);
    double v2 = phi(x2);
    while (hi - lo > kGoldenRelTol * hi) {
      if (v1 <= v2) {
        hi = x2;
        x2 = x1;
        v2 = v1;
        x1 = hi - ratio * (hi - lo);
        v1 = phi(x1);
      } else {
        lo = x1;
        x1 = x2;
        v1 = v2;
        x2 = lo + ratio * (hi - lo);
        v2 = phi(x2);
      }
    }
    for (const auto& [a, v] : {std::pair{x1, v1}, std::pair{x2, v2}}) {
      if (v < best_value) {
        best_value = v;
        best_step = a;
      }
    }
  }
  if (!(best_value < phi0)) return result;
  result.step = best_step;
  result.value = best_value;
  return result;
}

LineSearchResult line_search(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& g,
                             const Eigen::Ref<const Eigen::VectorXd>& m, const EndmemberLibrary& E,
                             const UnmixOptions& opts, double scale) {
  return line_search(PixelProblem(m, E.spectra(), opts), f, g, scale);
}

// ---------------------------------------------------------------------------
// Projected gradient descent

UnmixResult unmix_pixel(const Eigen::Ref<const Eigen::VectorXd>& m, const Eigen::MatrixXd& E,
                        const Eigen::MatrixXd& gram, const UnmixOptions& opts) {
  opts.validate();
  if (m.norm() == 0.0) throw data_error("unmix: zero-norm pixel");
  const PixelProblem problem(m, E, gram, opts);
  const auto d = E.cols();

  UnmixResult result;
  Eigen::VectorXd f = Eigen::VectorXd::Constant(d, 1.0 / (2.0 * static_cast<double>(d)));
  if (opts.init == Init::projected_least_squares) {
    Eigen::VectorXd ls = project_feasible(E.colPivHouseholderQr().solve(m));
    if (std::isfinite(problem.value_or_inf(ls))) f = ls;
  }
  double value = problem.value(f);
  if (opts.record_trace) result.trace.push_back(value);

  double scale = 1.0;
  for (std::size_t k = 0; k < opts.max_iters; ++k) {
    const Eigen::VectorXd g = problem.gradient(f);
    if ((f - project_feasible(f - g)).norm() < opts.grad_tol) {
      result.converged = true;
      break;
    }
    const LineSearchResult ls = line_search(problem, f, g, scale);
    ++result.iterations;
    if (ls.step == 0.0) {
      // No descent along the projected path: stationary up to rounding.
      result.converged = true;
      break;
    }
    if (ls.step >= 0.9 * ls.alpha_max) {
      scale *= 4.0;
    } else if (ls.step < ls.alpha_max / 64.0) {
      scale = std::max(scale * 0.5, 1e-3);
    }
    f = project_feasible(f - ls.step * g);
    const double decrease = value - ls.value;
    value = ls.value;
    if (opts.record_trace) result.trace.push_back(value);
    if (decrease < opts.obj_tol) {
      result.converged = true;
      break;
    }
  }

  if (opts.objective == Objective::spectral_angle) {
    // The angle is blind to f -> c f; report the representative on the unit-sum face.
    const double s = f.sum();
    if (s > 0.0) f /= s;
  }
  result.fractions = std::move(f);
  result.objective = value;
  return result;
}

UnmixResult unmix_pixel(const Eigen::Ref<const Eigen::VectorXd>& m, const EndmemberLibrary& E,
                        const UnmixOptions& opts) {
  const Eigen::MatrixXd gram = E.spectra().transpose() * E.spectra();
  return unmix_pixel(m, E.spectra(), gram, opts);
}

FractionMap unmix_image(const SpectralCube& cube, const EndmemberLibrary& E, const UnmixOptions& opts,
                        UnmixReport* report, std::size_t threads) {
  opts.validate();
  if (cube.bands() != E.bands()) {
    throw data_error("unmix: cube has " + std::to_string(cube.bands()) + " bands but endmember library has " +
                     std::to_string(E.bands()));
  }
  for (std::size_t b = 0; b < cube.bands(); ++b) {
    if (std::abs(cube.band_centers()[b] - E.band_centers()[b]) > 1e-9) {
      throw data_error("unmix: band grid mismatch at band " + std::to_string(b) + " (" +
                       std::to_string(cube.band_centers()[b]) + " nm vs " + std::to_string(E.band_centers()[b]) +
                       " nm)");
    }
  }
  const std::size_t n = cube.pixel_count();
  const std::size_t d = E.count();
  const Eigen::MatrixXd gram = E.spectra().transpose() * E.spectra();
  std::vector<double> fractions(n * d);
  std::vector<std::size_t> iterations(n);
  std::vector<std::uint8_t> converged(n);
  parallel_for(
      n,
      [&](std::size_t p) {
        const std::size_t r = p / cube.cols();
        const std::size_t c = p % cube.cols();
        const UnmixResult res = unmix_pixel(cube.pixel(r, c), E.spectra(), gram, opts);
        for (std::size_t k = 0; k < d; ++k) {
          fractions[p * d + k] = std::max(0.0, res.fractions[static_cast<Eigen::Index>(k)]);
        }
        iterations[p] = res.iterations;
        converged[p] = res.converged ? 1 : 0;
      },
      threads);
  if (report) {
    report->pixels = n;
    report->mean_iterations =
        n ? static_cast<double>(std::accumulate(iterations.begin(), iterations.end(), std::size_t{0})) /
                static_cast<double>(n)
          : 0.0;
    report->non_converged = static_cast<std::size_t>(std::count(converged.begin(), converged.end(), 0));
  }
  return FractionMap(cube.rows(), cube.cols(), d, std::move(fractions), E.names());
}

// ---------------------------------------------------------------------------
// Brute-force reference

Eigen::VectorXd brute_force_unmix(const Eigen::Ref<const Eigen::VectorXd>& m, const EndmemberLibrary& E,
                                  double grid_step, const UnmixOptions& opts) {
  const std::size_t d = E.count();
  if (d > 4) throw usage_error("brute_force_unmix: refusing d=" + std::to_string(d) + " (limit 4)");
  if (!(grid_step > 0.0) || grid_step > 1.0) throw usage_error("brute_force_unmix: grid_step must be in (0, 1]");
  const PixelProblem problem(m, E.spectra(), opts);
  const long steps = static_cast<long>(std::floor(1.0 / grid_step + 1e-9));

  Eigen::VectorXd best = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
  double best_value = kInf;
  std::vector<long> k(d, 0);
  Eigen::VectorXd f(static_cast<Eigen::Index>(d));
  // Odometer over k in lexicographic order with sum(k) <= steps.
  while (true) {
    for (std::size_t i = 0; i < d; ++i) f[static_cast<Eigen::Index>(i)] = static_cast<double>(k[i]) * grid_step;
    const double v = problem.value_or_inf(f);
    if (v < best_value) {
      best_value = v;
      best = f;
    }
    std::size_t pos = d;
    while (pos > 0) {
      --pos;
      ++k[pos];
      if (std::accumulate(k.begin(), k.end(), 0L) <= steps) break;
      k[pos] = 0;
      if (pos == 0) {
        // Same unit-sum representative as unmix_pixel.
        if (opts.objective == Objective::spectral_angle && best.sum() > 0.0) best /= best.sum();
        return best;
      }
    }
  }
}

}  // namespace specgt::unmixing
