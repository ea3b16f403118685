#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Dense>

#include "specgt/cube_io.hpp"

namespace specgt::unmixing {

enum class Objective { spectral_angle, euclidean };
enum class LineSearch { golden_section, backtracking };
enum class Init { uniform_interior, projected_least_squares };

struct UnmixOptions {
  Objective objective = Objective::spectral_angle;
  std::size_t max_iters = 500;
  double grad_tol = 1e-8;
  double obj_tol = 1e-10;
  LineSearch line_search = LineSearch::golden_section;
  Init init = Init::uniform_interior;
  double epsilon_norm = 1e-12;
  /// Keep the objective value of every iterate in UnmixResult::trace.
  bool record_trace = false;

  void validate() const;
};

/// Spectral angle in radians, in [0, pi]. Throws SingularPointError when either
/// argument has zero norm.
double sam(const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& b);

/// Euclidean projection onto {f >= 0, sum(f) <= 1}. Points already inside the
/// set (sum within 1e-12) are returned unchanged, which makes the map
/// exactly idempotent.
Eigen::VectorXd project_feasible(const Eigen::Ref<const Eigen::VectorXd>& v);

/// Objective and gradient of one pixel problem. Precomputes E^T E and E^T m so
/// each evaluation costs O(d^2) instead of O(bands * d). Holds a reference to
/// E, which must outlive the problem.
class PixelProblem {
 public:
  PixelProblem(const Eigen::Ref<const Eigen::VectorXd>& m, const Eigen::MatrixXd& E, const UnmixOptions& opts);
  PixelProblem(const Eigen::Ref<const Eigen::VectorXd>& m, const Eigen::MatrixXd& E, const Eigen::MatrixXd& gram,
               const UnmixOptions& opts);

  /// sam(m, E f) or ||m - E f||^2. Throws SingularPointError in angle mode when ||E f|| <= epsilon_norm.
  double value(const Eigen::Ref<const Eigen::VectorXd>& f) const;
  /// Same as value() but returns +inf at singular points.
  double value_or_inf(const Eigen::Ref<const Eigen::VectorXd>& f) const noexcept;
  Eigen::VectorXd gradient(const Eigen::Ref<const Eigen::VectorXd>& f) const;

  std::size_t endmembers() const noexcept { return static_cast<std::size_t>(gram_.rows()); }
  const UnmixOptions& options() const noexcept { return opts_; }

 private:
  const Eigen::MatrixXd* E_;
  Eigen::VectorXd m_;
  Eigen::MatrixXd gram_;   // E^T E
  Eigen::VectorXd etm_;    // E^T m
  double m_norm2_ = 0.0;
  UnmixOptions opts_;
};

double objective(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& m,
                 const EndmemberLibrary& E, const UnmixOptions& opts = {});
Eigen::VectorXd gradient(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& m,
                         const EndmemberLibrary& E, const UnmixOptions& opts = {});

struct LineSearchResult {
  double step = 0.0;
  double alpha_max = 0.0;
  double value = 0.0;  // phi(step)
};

/// Minimizes phi(a) = objective(project_feasible(f - a g)) over [0, scale / ||g||].
/// A scan (32 uniform points plus a geometric ladder of 24 points below the
/// first one) brackets the best region, golden-section refines it to 1e-8
/// relative width; the returned step never increases phi over phi(0).
LineSearchResult line_search(const PixelProblem& problem, const Eigen::Ref<const Eigen::VectorXd>& f,
                             const Eigen::Ref<const Eigen::VectorXd>& g, double scale = 1.0);
LineSearchResult line_search(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& g,
                             const Eigen::Ref<const Eigen::VectorXd>& m, const EndmemberLibrary& E,
                             const UnmixOptions& opts = {}, double scale = 1.0);

struct UnmixResult {
  Eigen::VectorXd fractions;
  bool converged = false;
  std::size_t iterations = 0;
  double objective = 0.0;
  std::vector<double> trace;
};

UnmixResult unmix_pixel(const Eigen::Ref<const Eigen::VectorXd>& m, const EndmemberLibrary& E,
                        const UnmixOptions& opts = {});
/// Variant that reuses a precomputed E^T E.
UnmixResult unmix_pixel(const Eigen::Ref<const Eigen::VectorXd>& m, const Eigen::MatrixXd& E,
                        const Eigen::MatrixXd& gram, const UnmixOptions& opts);

struct UnmixReport {
  std::size_t pixels = 0;
  double mean_iterations = 0.0;
  std::size_t non_converged = 0;
};

/// Unmixes every pixel independently; the output does not depend on the worker count.
FractionMap unmix_image(const SpectralCube& cube, const EndmemberLibrary& E, const UnmixOptions& opts = {},
                        UnmixReport* report = nullptr, std::size_t threads = 0);

/// Exhaustive search over the feasible grid {k * step} (d <= 4). Reference
/// solver for tests; ties go to the lexicographically first grid point. In
/// spectral-angle mode the winner is rescaled to unit sum, as in unmix_pixel.
Eigen::VectorXd brute_force_unmix(const Eigen::Ref<const Eigen::VectorXd>& m, const EndmemberLibrary& E,
                                  double grid_step, const UnmixOptions& opts = {});

}  // namespace specgt::unmixing
