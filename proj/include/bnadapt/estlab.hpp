#pragma once

#include <charconv>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "bnadapt/errors.hpp"
#include "bnadapt/numcore/random.hpp"

// Estimators of a domain offset from C controls and L perturbed samples of
// one scalar feature: x_l = mu + c_l + e_l, z_c = mu + e_c.
namespace bnadapt::est {

enum class Estimator { arm_bn, controls_only, cs_arm_bn };
inline constexpr std::array<Estimator, 3> kEstimators = {Estimator::arm_bn, Estimator::controls_only,
                                                         Estimator::cs_arm_bn};

inline std::string to_string(Estimator e) {
  switch (e) {
    case Estimator::arm_bn: return "arm-bn";
    case Estimator::controls_only: return "controls-only";
    case Estimator::cs_arm_bn: return "cs-arm-bn";
  }
  return "?";
}

inline Estimator parse_estimator(const std::string& s) {
  for (Estimator e : kEstimators)
    if (to_string(e) == s) return e;
  throw ConfigError("unknown estimator \"" + s + "\"");
}

enum class Noise { gaussian, uniform };
// fixed: every perturbed sample carries class effect mu_bar in every trial.
// resampled: class effects drawn per trial as mu_bar + N(0, class_spread^2).
enum class ClassMode { fixed, resampled };

struct Params {
  std::size_t C = 0;
  std::size_t L = 1;
  double sigma = 1.0;
  double mu_bar = 0.0;
  std::size_t trials = 200000;
  std::uint64_t seed = 0;
  Noise noise = Noise::gaussian;
  ClassMode class_mode = ClassMode::fixed;
  double class_spread = 1.0;  // resampled mode only
  double mu_domain = 0.0;

  std::size_t M() const { return C + L; }

  void validate() const {
    if (C + L < 1) throw ConfigError("estimator params: C + L must be >= 1");
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError("estimator params: sigma must be > 0");
    if (trials < 1) throw ConfigError("estimator params: trials must be >= 1");
    if (!std::isfinite(mu_bar)) throw ConfigError("estimator params: mu_bar must be finite");
    if (class_spread < 0.0) throw ConfigError("estimator params: class_spread must be >= 0");
  }
};

struct Decomposition {
  double bias2 = 0.0;
  double variance = 0.0;
  double mse = 0.0;
};

inline bool operator==(const Decomposition& a, const Decomposition& b) {
  auto same = [](double x, double y) { return x == y || (std::isnan(x) && std::isnan(y)); };
  return same(a.bias2, b.bias2) && same(a.variance, b.variance) && same(a.mse, b.mse);
}

inline void require_counts(Estimator which, const Params& p) {
  p.validate();
  if (which == Estimator::arm_bn && p.L < 1) throw ConfigError("arm-bn estimator needs L >= 1");
  if (which == Estimator::controls_only && p.C < 1) throw ConfigError("controls-only estimator needs C >= 1");
}

// arm-bn: (mu^2, s^2/L); controls-only: (0, s^2/C); cs: ((L/M)^2 mu^2, s^2/M).
// Resampled class effects add their spread to the perturbed terms.
inline Decomposition mse_closed_form(Estimator which, const Params& p) {
  require_counts(which, p);
  const double s2 = p.sigma * p.sigma;
  const double mu2 = p.mu_bar * p.mu_bar;
  const double extra = p.class_mode == ClassMode::resampled ? p.class_spread * p.class_spread : 0.0;
  const double L = static_cast<double>(p.L), C = static_cast<double>(p.C), M = static_cast<double>(p.M());
  Decomposition d;
  switch (which) {
    case Estimator::arm_bn:
      d.bias2 = mu2;
      d.variance = extra == 0.0 ? s2 / L : (s2 + extra) / L;
      break;
    case Estimator::controls_only:
      d.bias2 = 0.0;
      d.variance = s2 / C;
      break;
    case Estimator::cs_arm_bn: {
      const double ratio = L / M;
      d.bias2 = ratio * ratio * mu2;
      d.variance = extra == 0.0 ? s2 / M : s2 / M + L * extra / (M * M);
      break;
    }
  }
  d.mse = d.bias2 + d.variance;
  return d;
}

namespace detail {

struct Accumulator {
  double sum = 0.0, sum_sq = 0.0;
  void add(double err) {
    sum += err;
    sum_sq += err * err;
  }
  Decomposition finish(std::size_t n) const {
    const double t = static_cast<double>(n);
    Decomposition d;
    const double mean = sum / t;
    d.bias2 = mean * mean;
    d.mse = sum_sq / t;
    d.variance = std::max(d.mse - d.bias2, 0.0);
    return d;
  }
};

inline double draw_noise(RandomStream& rs, const Params& p) {
  if (p.noise == Noise::gaussian) return p.sigma * rs.normal();
  const double half = p.sigma * std::sqrt(3.0);
  return (2.0 * rs.uniform() - 1.0) * half;
}

}  // namespace detail

// Simulates the observation model directly. All three estimators see the
// same draws within a trial; an estimator whose count is zero reports NaN.
inline std::array<Decomposition, 3> monte_carlo_all(const Params& p) {
  p.validate();
  RandomStream rs(p.seed, 0x65737431ULL);
  detail::Accumulator acc[3];
  for (std::size_t t = 0; t < p.trials; ++t) {
    double sx = 0.0, sz = 0.0;
    for (std::size_t l = 0; l < p.L; ++l) {
      const double c = p.class_mode == ClassMode::fixed ? p.mu_bar : p.mu_bar + p.class_spread * rs.normal();
      sx += p.mu_domain + c + detail::draw_noise(rs, p);
    }
    for (std::size_t c = 0; c < p.C; ++c) sz += p.mu_domain + detail::draw_noise(rs, p);
    if (p.L > 0) acc[0].add(sx / static_cast<double>(p.L) - p.mu_domain);
    if (p.C > 0) acc[1].add(sz / static_cast<double>(p.C) - p.mu_domain);
    acc[2].add((sx + sz) / static_cast<double>(p.M()) - p.mu_domain);
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::array<Decomposition, 3> out;
  out[0] = p.L > 0 ? acc[0].finish(p.trials) : Decomposition{nan, nan, nan};
  out[1] = p.C > 0 ? acc[1].finish(p.trials) : Decomposition{nan, nan, nan};
  out[2] = acc[2].finish(p.trials);
  return out;
}

inline Decomposition mse_monte_carlo(Estimator which, const Params& p) {
  require_counts(which, p);
  return monte_carlo_all(p)[static_cast<std::size_t>(which)];
}

struct Tolerance {
  double relative = 0.02;
  double absolute = 1e-3;
  double absolute_below = 0.05;  // closed-form MSE under which `absolute` applies

  bool passes(double closed, double empirical) const {
    const double gap = std::abs(empirical - closed);
    if (closed < absolute_below) return gap <= absolute;
    return gap <= relative * closed;
  }
};

struct ReportRow {
  Estimator estimator = Estimator::arm_bn;
  std::size_t C = 0, L = 0;
  double sigma = 0.0, mu_bar = 0.0;
  Decomposition closed_form, monte_carlo;
  double rel_gap = 0.0;  // |mse_mc - mse_cf| / mse_cf
  bool flagged = false;

  bool operator==(const ReportRow&) const = default;
};

struct Report {
  std::vector<ReportRow> rows;

  std::size_t flagged_count() const {
    std::size_t n = 0;
    for (const auto& r : rows) n += r.flagged;
    return n;
  }
  bool operator==(const Report&) const = default;
};

// C, L in {2, 4, 16, 64}; sigma in {0.5, 1}; mu_bar in {0, 0.5, 2}.
inline std::vector<Params> default_grid(std::size_t trials = 200000, std::uint64_t seed = 0) {
  std::vector<Params> grid;
  const std::size_t counts[] = {2, 4, 16, 64};
  const double sigmas[] = {0.5, 1.0};
  const double mus[] = {0.0, 0.5, 2.0};
  for (std::size_t c : counts)
    for (std::size_t l : counts)
      for (double s : sigmas)
        for (double m : mus) {
          Params p;
          p.C = c;
          p.L = l;
          p.sigma = s;
          p.mu_bar = m;
          p.trials = trials;
          p.seed = seed + grid.size();
          grid.push_back(p);
        }
  return grid;
}

// One row per (cell, applicable estimator), flagged when the Monte Carlo MSE
// misses the closed form by more than the tolerance.
inline Report compare_estimators(const std::vector<Params>& grid, const Tolerance& tol = {}) {
  if (grid.empty()) throw ConfigError("compare_estimators: empty grid");
  Report report;
  for (const Params& p : grid) {
    const auto mc = monte_carlo_all(p);
    for (Estimator e : kEstimators) {
      if (e == Estimator::arm_bn && p.L == 0) continue;
      if (e == Estimator::controls_only && p.C == 0) continue;
      ReportRow row;
      row.estimator = e;
      row.C = p.C;
      row.L = p.L;
      row.sigma = p.sigma;
      row.mu_bar = p.mu_bar;
      row.closed_form = mse_closed_form(e, p);
      row.monte_carlo = mc[static_cast<std::size_t>(e)];
      row.rel_gap = std::abs(row.monte_carlo.mse - row.closed_form.mse) / row.closed_form.mse;
      row.flagged = !tol.passes(row.closed_form.mse, row.monte_carlo.mse);
      report.rows.push_back(row);
    }
  }
  return report;
}

inline constexpr const char* kCsvHeader =
    "estimator,C,L,sigma,mu_bar,bias2_cf,var_cf,mse_cf,bias2_mc,var_mc,mse_mc,rel_gap";

inline std::string format_double(double v) {
  char buf[40];
  // shortest form that parses back to the same double
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string to_csv(const Report& r) {
  std::string out = std::string(kCsvHeader) + "\n";
  for (const auto& row : r.rows) {
    out += to_string(row.estimator) + "," + std::to_string(row.C) + "," + std::to_string(row.L) + "," +
           format_double(row.sigma) + "," + format_double(row.mu_bar) + "," + format_double(row.closed_form.bias2) +
           "," + format_double(row.closed_form.variance) + "," + format_double(row.closed_form.mse) + "," +
           format_double(row.monte_carlo.bias2) + "," + format_double(row.monte_carlo.variance) + "," +
           format_double(row.monte_carlo.mse) + "," + format_double(row.rel_gap) + "\n";
  }
  return out;
}

// Inverse of to_csv. The flag column is not stored; it is recomputed from
// the tolerance.
inline Report parse_csv(const std::string& text, const Tolerance& tol = {}) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw IoError("estimator CSV: bad header");
  Report r;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 12) throw IoError("estimator CSV line " + std::to_string(lineno) + ": expected 12 fields");
    ReportRow row;
    try {
      row.estimator = parse_estimator(f[0]);
      row.C = std::stoull(f[1]);
      row.L = std::stoull(f[2]);
      row.sigma = std::stod(f[3]);
      row.mu_bar = std::stod(f[4]);
      row.closed_form = {std::stod(f[5]), std::stod(f[6]), std::stod(f[7])};
      row.monte_carlo = {std::stod(f[8]), std::stod(f[9]), std::stod(f[10])};
      row.rel_gap = std::stod(f[11]);
    } catch (const std::logic_error&) {
      throw IoError("estimator CSV line " + std::to_string(lineno) + ": bad number");
    }
    row.flagged = !tol.passes(row.closed_form.mse, row.monte_carlo.mse);
    r.rows.push_back(row);
  }
  return r;
}

}  // namespace bnadapt::est
