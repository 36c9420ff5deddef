#include "spatconf/optimize.hpp"

#include <boost/math/tools/minima.hpp>
#include <gsl/gsl_errno.h>
#include <gsl/gsl_multimin.h>

#include <cmath>
#include <limits>
#include <memory>
#include <random>

namespace spatconf {

namespace {

// GSL's simplex needs finite values at the initial vertices.
constexpr double kPenalty = 1e300;

struct Callback {
  const Objective* f;
  int evals = 0;
  Eigen::VectorXd scratch;
};

double safe_eval(Callback& cb, const Eigen::VectorXd& x) {
  ++cb.evals;
  const double v = (*cb.f)(x);
  return std::isfinite(v) ? v : kPenalty;
}

double gsl_trampoline(const gsl_vector* v, void* params) {
  auto* cb = static_cast<Callback*>(params);
  for (std::size_t i = 0; i < v->size; ++i) cb->scratch(Eigen::Index(i)) = gsl_vector_get(v, i);
  return safe_eval(*cb, cb->scratch);
}

struct GslDeleter {
  void operator()(gsl_vector* v) const { gsl_vector_free(v); }
  void operator()(gsl_multimin_fminimizer* m) const { gsl_multimin_fminimizer_free(m); }
};

}  // namespace

OptimizeResult nelder_mead(const Objective& f, const Eigen::VectorXd& x0, double step,
                           int max_evals, double tol) {
  const auto dim = static_cast<std::size_t>(x0.size());
  Callback cb{&f, 0, Eigen::VectorXd(x0.size())};
  OptimizeResult out;
  if (dim == 0) {
    out.x = x0;
    out.value = safe_eval(cb, x0);
    out.evaluations = 1;
    out.converged = true;
    return out;
  }
  gsl_set_error_handler_off();
  std::unique_ptr<gsl_vector, GslDeleter> x(gsl_vector_alloc(dim));
  std::unique_ptr<gsl_vector, GslDeleter> ss(gsl_vector_alloc(dim));
  for (std::size_t i = 0; i < dim; ++i) gsl_vector_set(x.get(), i, x0(Eigen::Index(i)));
  gsl_vector_set_all(ss.get(), step);

  gsl_multimin_function fn{&gsl_trampoline, dim, &cb};
  std::unique_ptr<gsl_multimin_fminimizer, GslDeleter> s(
      gsl_multimin_fminimizer_alloc(gsl_multimin_fminimizer_nmsimplex2, dim));
  gsl_multimin_fminimizer_set(s.get(), &fn, x.get(), ss.get());

  bool converged = false;
  while (cb.evals < max_evals) {
    if (gsl_multimin_fminimizer_iterate(s.get()) != GSL_SUCCESS) break;
    if (gsl_multimin_test_size(gsl_multimin_fminimizer_size(s.get()), tol) == GSL_SUCCESS) {
      converged = true;
      break;
    }
  }
  out.x.resize(x0.size());
  const gsl_vector* best = gsl_multimin_fminimizer_x(s.get());
  for (std::size_t i = 0; i < dim; ++i) out.x(Eigen::Index(i)) = gsl_vector_get(best, i);
  out.value = gsl_multimin_fminimizer_minimum(s.get());
  out.evaluations = cb.evals;
  out.converged = converged;
  return out;
}

OptimizeResult coordinate_polish(const Objective& f, const Eigen::VectorXd& x0, double half_width) {
  Callback cb{&f, 0, Eigen::VectorXd()};
  OptimizeResult out;
  out.x = x0;
  out.value = safe_eval(cb, x0);
  for (Eigen::Index i = 0; i < x0.size(); ++i) {
    Eigen::VectorXd probe = out.x;
    auto line = [&](double t) {
      probe(i) = t;
      return safe_eval(cb, probe);
    };
    std::uintmax_t iters = 60;
    auto [t, v] = boost::math::tools::brent_find_minima(line, out.x(i) - half_width,
                                                        out.x(i) + half_width, 40, iters);
    if (v < out.value) {
      out.x(i) = t;
      out.value = v;
    }
  }
  out.evaluations = cb.evals;
  out.converged = true;
  return out;
}

OptimizeResult minimize(const Objective& f, const Eigen::VectorXd& x0, const OptimizeOptions& opt) {
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> nd(0.0, opt.start_spread);
  OptimizeResult best;
  best.value = std::numeric_limits<double>::infinity();
  int total = 0;
  const int starts = std::max(1, opt.starts);
  for (int k = 0; k < starts; ++k) {
    Eigen::VectorXd start = x0;
    if (k > 0) {
      for (Eigen::Index i = 0; i < start.size(); ++i) start(i) += nd(rng);
    }
    auto r = nelder_mead(f, start, opt.initial_step, opt.max_evals, opt.tol);
    total += r.evaluations;
    for (int round = 0; round < opt.polish_rounds; ++round) {
      auto p = coordinate_polish(f, r.x, 0.25);
      total += p.evaluations;
      auto again = nelder_mead(f, p.x, 0.05, opt.max_evals, opt.tol);
      total += again.evaluations;
      const double before = r.value;
      const bool conv = r.converged;
      if (again.value <= p.value) {
        r = again;
      } else {
        r.x = p.x;
        r.value = p.value;
        r.converged = conv;
      }
      if (std::abs(before - r.value) < 1e-10 * (1.0 + std::abs(r.value))) break;
    }
    if (r.value < best.value) best = r;
  }
  best.evaluations = total;
  if (!(best.value < kPenalty)) best.converged = false;
  return best;
}

}  // namespace spatconf
