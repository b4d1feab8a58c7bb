#include "advseg/detectors.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <algorithm>
#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <numeric>

#include "advseg/errors.hpp"
#include "advseg/parallel.hpp"
#include "advseg/rng.hpp"
#include "advseg/serialize.hpp"
#include "advseg/tape.hpp"

namespace advseg {
namespace {

using nlohmann::json;

double logistic(double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); }

double softplus(double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }

std::vector<std::vector<double>> feature_rows(const std::vector<UncertaintyFeatures>& f) {
  std::vector<std::vector<double>> rows;
  rows.reserve(f.size());
  for (const auto& x : f) rows.push_back(x.as_vector());
  for (const auto& r : rows) {
    if (r.size() != rows.front().size()) throw ShapeError("detector fit: feature vectors differ in length");
  }
  return rows;
}

double quantile_sorted(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return quantile_sorted(v, 0.5);
}

double rbf(const std::vector<double>& a, const std::vector<double>& b, double gamma) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::exp(-gamma * s);
}

json tensor_json(const Tensor& t) {
  return json{{"shape", t.shape()}, {"data", std::vector<double>(t.values().begin(), t.values().end())}};
}

Tensor tensor_from(const json& j) {
  return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

// ---------------------------------------------------------------- heatmap net

struct HeatmapNet {
  Var logit;
  std::vector<Var> params;
  Var input;
};

Tensor heatmap_input(const Heatmap& h, double mean, double scale) {
  Tensor x({h.height(), h.width(), 1});
  for (std::size_t i = 0; i < h.values.size(); ++i) x[i] = (h.values[i] - mean) / scale;
  return x;
}

HeatmapNet build_heatmap_net(Tape& tape, const std::vector<Tensor>& tensors, const Tensor& input, bool grad) {
  HeatmapNet n;
  n.input = tape.leaf(input, false);
  for (const auto& t : tensors) n.params.push_back(tape.leaf(t, grad));
  Var h = tape.relu(tape.conv2d(n.input, n.params[0], n.params[1], 1, 1));
  h = tape.relu(tape.conv2d(h, n.params[2], n.params[3], 1, 1));
  Var pooled = tape.global_avg_pool(h);
  n.logit = tape.dense(pooled, n.params[4], n.params[5]);
  return n;
}

}  // namespace

std::string to_string(DetectorVariant v) {
  switch (v) {
    case DetectorVariant::entropy: return "Entropy";
    case DetectorVariant::ocsvm: return "OCSVM";
    case DetectorVariant::ellipse: return "Ellipse";
    case DetectorVariant::crossa: return "CrossA";
    case DetectorVariant::heatmap: return "Heatmap";
  }
  return "Entropy";
}

DetectorVariant detector_variant_from_string(const std::string& s) {
  for (auto v : {DetectorVariant::entropy, DetectorVariant::ocsvm, DetectorVariant::ellipse, DetectorVariant::crossa,
                 DetectorVariant::heatmap}) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown detector '" + s + "'");
}

bool is_supervised(DetectorVariant v) { return v == DetectorVariant::crossa || v == DetectorVariant::heatmap; }

Standardizer Standardizer::fit(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw ConfigError("standardizer: no rows");
  const std::size_t p = rows.front().size();
  Standardizer s;
  s.mean.assign(p, 0.0);
  s.scale.assign(p, 0.0);
  for (const auto& r : rows) {
    for (std::size_t k = 0; k < p; ++k) s.mean[k] += r[k];
  }
  for (auto& m : s.mean) m /= static_cast<double>(rows.size());
  for (const auto& r : rows) {
    for (std::size_t k = 0; k < p; ++k) s.scale[k] += (r[k] - s.mean[k]) * (r[k] - s.mean[k]);
  }
  for (auto& v : s.scale) {
    v = std::sqrt(v / static_cast<double>(rows.size()));
    if (!(v > 1e-12)) v = 1.0;
  }
  return s;
}

std::vector<double> Standardizer::apply(const std::vector<double>& x) const {
  if (x.size() != mean.size()) {
    throw ShapeError("standardizer: expected " + std::to_string(mean.size()) + " features, got " +
                     std::to_string(x.size()));
  }
  std::vector<double> out(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) out[k] = (x[k] - mean[k]) / scale[k];
  return out;
}

double DetectorModel::raw_score(const UncertaintyFeatures& features) const {
  if (consumes_heatmaps()) throw ShapeError("Heatmap detector scores heatmaps, not feature vectors");
  const auto x = features.as_vector();
  if (!standardizer_.mean.empty() && x.size() != standardizer_.mean.size()) {
    throw ShapeError("detector: expected " + std::to_string(standardizer_.mean.size()) + " features, got " +
                     std::to_string(x.size()));
  }
  return std::visit(
      [&](const auto& p) -> double {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, EntropyParams>) {
          return -x[0];
        } else if constexpr (std::is_same_v<P, OcsvmParams>) {
          const auto z = standardizer_.apply(x);
          double s = 0.0;
          for (std::size_t i = 0; i < p.support.size(); ++i) s += p.coef[i] * rbf(p.support[i], z, p.gamma);
          return s - p.rho;
        } else if constexpr (std::is_same_v<P, EllipseParams>) {
          const auto z = standardizer_.apply(x);
          const std::size_t d = z.size();
          std::vector<double> c(d);
          for (std::size_t i = 0; i < d; ++i) c[i] = z[i] - p.location[i];
          double m = 0.0;
          for (std::size_t i = 0; i < d; ++i) {
            double row = 0.0;
            for (std::size_t j = 0; j < d; ++j) row += p.precision[i * d + j] * c[j];
            m += c[i] * row;
          }
          return p.threshold - m;
        } else if constexpr (std::is_same_v<P, CrossaParams>) {
          const auto z = standardizer_.apply(x);
          double s = p.intercept;
          for (std::size_t i = 0; i < z.size(); ++i) s += p.weights[i] * z[i];
          return s;
        } else {
          throw ShapeError("Heatmap detector scores heatmaps, not feature vectors");
        }
      },
      params_);
}

double DetectorModel::score(const UncertaintyFeatures& features) const {
  const double raw = raw_score(features);
  double d = 0.5;
  switch (variant_) {
    case DetectorVariant::entropy: {
      const auto& p = std::get<EntropyParams>(params_);
      const double span = p.max_entropy - p.min_entropy;
      d = span > 0.0 ? std::clamp((p.max_entropy + raw) / span, 0.0, 1.0) : 0.5;
      break;
    }
    case DetectorVariant::ocsvm: d = logistic(raw / std::get<OcsvmParams>(params_).scale); break;
    case DetectorVariant::ellipse: d = logistic(raw / std::get<EllipseParams>(params_).scale); break;
    case DetectorVariant::crossa: d = logistic(raw); break;
    case DetectorVariant::heatmap: break;
  }
  return d;
}

double DetectorModel::score(const Heatmap& heatmap) const {
  if (!consumes_heatmaps()) throw ShapeError(to_string(variant_) + " detector scores feature vectors, not heatmaps");
  if (heatmap.kind != HeatmapKind::entropy) throw ShapeError("Heatmap detector expects entropy heatmaps");
  const auto& p = std::get<HeatmapNetParams>(params_);
  Tape tape;
  auto net = build_heatmap_net(tape, p.tensors, heatmap_input(heatmap, p.input_mean, p.input_scale), false);
  return logistic(tape.value(net.logit)[0]);
}

Verdict classify(double d, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("classify: tau must lie in [0, 1]");
  return Verdict{d, tau, d < tau};
}

// ---------------------------------------------------------------- fitting

DetectorModel fit_entropy(const std::vector<UncertaintyFeatures>& benign) {
  if (benign.size() < 2) throw ConfigError("Entropy detector needs at least 2 benign samples");
  EntropyParams p;
  p.min_entropy = p.max_entropy = benign.front().mean_entropy;
  for (const auto& f : benign) {
    p.min_entropy = std::min(p.min_entropy, f.mean_entropy);
    p.max_entropy = std::max(p.max_entropy, f.mean_entropy);
  }
  std::vector<std::vector<double>> rows;
  for (const auto& f : benign) rows.push_back(f.as_vector());
  return DetectorModel(DetectorVariant::entropy, Standardizer::fit(rows), p);
}

DetectorModel fit_ocsvm(const std::vector<UncertaintyFeatures>& benign, const OcsvmOptions& options) {
  if (benign.size() < 10) throw ConfigError("OCSVM needs at least 10 benign samples");
  if (!(options.nu > 0.0 && options.nu <= 1.0)) throw ConfigError("OCSVM: nu must lie in (0, 1]");
  const auto rows = feature_rows(benign);
  const Standardizer stdz = Standardizer::fit(rows);
  std::vector<std::vector<double>> x;
  for (const auto& r : rows) x.push_back(stdz.apply(r));
  const std::size_t n = x.size();
  const std::size_t dim = x.front().size();

  double gamma = options.gamma;
  if (!(gamma > 0.0)) {
    double mean = 0.0, sq = 0.0;
    for (const auto& r : x) {
      for (double v : r) {
        mean += v;
        sq += v * v;
      }
    }
    const double cnt = static_cast<double>(n * dim);
    mean /= cnt;
    const double var = sq / cnt - mean * mean;
    gamma = 1.0 / (static_cast<double>(dim) * (var > 0.0 ? var : 1.0));
  }

  std::vector<double> q(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) q[i * n + j] = q[j * n + i] = rbf(x[i], x[j], gamma);
  }

  // Dual: min 1/2 a'Qa  s.t. 0 <= a_i <= 1, sum a = nu * n.
  std::vector<double> alpha(n, 0.0);
  double remaining = options.nu * static_cast<double>(n);
  for (std::size_t i = 0; i < n && remaining > 0.0; ++i) {
    alpha[i] = std::min(1.0, remaining);
    remaining -= alpha[i];
  }
  std::vector<double> grad(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (alpha[i] == 0.0) continue;
    for (std::size_t t = 0; t < n; ++t) grad[t] += alpha[i] * q[t * n + i];
  }

  constexpr double kTau = 1e-12;
  std::size_t iter = 0;
  double gap = 0.0;
  for (;; ++iter) {
    // Working set selection with second-order information.
    double gmax = -INFINITY;
    std::ptrdiff_t i_sel = -1;
    for (std::size_t t = 0; t < n; ++t) {
      if (alpha[t] < 1.0 && -grad[t] >= gmax) {
        gmax = -grad[t];
        i_sel = static_cast<std::ptrdiff_t>(t);
      }
    }
    double gmax2 = -INFINITY;
    double obj_min = INFINITY;
    std::ptrdiff_t j_sel = -1;
    for (std::size_t t = 0; t < n; ++t) {
      if (alpha[t] <= 0.0) continue;
      gmax2 = std::max(gmax2, grad[t]);
      if (i_sel < 0) continue;
      const double diff = gmax + grad[t];
      if (diff > 0.0) {
        const auto i = static_cast<std::size_t>(i_sel);
        double quad = q[i * n + i] + q[t * n + t] - 2.0 * q[i * n + t];
        if (quad <= 0.0) quad = kTau;
        const double obj = -(diff * diff) / quad;
        if (obj <= obj_min) {
          obj_min = obj;
          j_sel = static_cast<std::ptrdiff_t>(t);
        }
      }
    }
    gap = gmax + gmax2;
    if (gap < options.tolerance || j_sel < 0 || i_sel < 0) break;
    if (iter >= options.max_iterations) {
      throw NumericError("OCSVM: SMO did not converge within " + std::to_string(options.max_iterations) +
                         " iterations, residual " + std::to_string(gap));
    }
    const auto i = static_cast<std::size_t>(i_sel);
    const auto j = static_cast<std::size_t>(j_sel);
    double quad = q[i * n + i] + q[j * n + j] - 2.0 * q[i * n + j];
    if (quad <= 0.0) quad = kTau;
    const double old_i = alpha[i], old_j = alpha[j];
    const double delta = (grad[i] - grad[j]) / quad;
    const double sum = alpha[i] + alpha[j];
    alpha[i] -= delta;
    alpha[j] += delta;
    if (sum > 1.0) {
      if (alpha[i] > 1.0) {
        alpha[i] = 1.0;
        alpha[j] = sum - 1.0;
      }
    } else if (alpha[j] < 0.0) {
      alpha[j] = 0.0;
      alpha[i] = sum;
    }
    if (sum > 1.0) {
      if (alpha[j] > 1.0) {
        alpha[j] = 1.0;
        alpha[i] = sum - 1.0;
      }
    } else if (alpha[i] < 0.0) {
      alpha[i] = 0.0;
      alpha[j] = sum;
    }
    const double di = alpha[i] - old_i, dj = alpha[j] - old_j;
    for (std::size_t t = 0; t < n; ++t) grad[t] += q[t * n + i] * di + q[t * n + j] * dj;
  }

  // rho: mean gradient over free variables, else midpoint of the bounds.
  double ub = INFINITY, lb = -INFINITY, free_sum = 0.0;
  std::size_t n_free = 0;
  for (std::size_t t = 0; t < n; ++t) {
    if (alpha[t] >= 1.0) lb = std::max(lb, grad[t]);
    else if (alpha[t] <= 0.0) ub = std::min(ub, grad[t]);
    else {
      free_sum += grad[t];
      ++n_free;
    }
  }
  OcsvmParams p;
  p.gamma = gamma;
  p.nu = options.nu;
  p.rho = n_free ? free_sum / static_cast<double>(n_free) : (ub + lb) / 2.0;
  for (std::size_t t = 0; t < n; ++t) {
    if (alpha[t] > 0.0) {
      p.support.push_back(x[t]);
      p.coef.push_back(alpha[t]);
    }
  }
  DetectorModel draft(DetectorVariant::ocsvm, stdz, p);
  std::vector<double> raws;
  for (const auto& f : benign) raws.push_back(std::abs(draft.raw_score(f)));
  const double med = median_of(raws);
  p.scale = med > 0.0 ? med : 1.0;
  return DetectorModel(DetectorVariant::ocsvm, stdz, std::move(p));
}

DetectorModel fit_ellipse(const std::vector<UncertaintyFeatures>& benign, const EllipseOptions& options) {
  const auto rows = feature_rows(benign);
  if (rows.empty() || rows.size() <= rows.front().size()) {
    throw ConfigError("Ellipse detector needs more samples than features");
  }
  if (!(options.trim_fraction >= 0.0 && options.trim_fraction < 1.0)) {
    throw ConfigError("Ellipse: trim_fraction must lie in [0, 1)");
  }
  const Standardizer stdz = Standardizer::fit(rows);
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto d = static_cast<Eigen::Index>(rows.front().size());
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto z = stdz.apply(rows[static_cast<std::size_t>(i)]);
    for (Eigen::Index k = 0; k < d; ++k) x(i, k) = z[static_cast<std::size_t>(k)];
  }

  Eigen::VectorXd mu;
  Eigen::MatrixXd prec;
  auto estimate = [&](const std::vector<Eigen::Index>& keep) {
    mu = Eigen::VectorXd::Zero(d);
    for (auto i : keep) mu += x.row(i).transpose();
    mu /= static_cast<double>(keep.size());
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
    for (auto i : keep) {
      const Eigen::VectorXd c = x.row(i).transpose() - mu;
      cov += c * c.transpose();
    }
    cov /= static_cast<double>(keep.size());
    cov += options.ridge * Eigen::MatrixXd::Identity(d, d);
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) throw NumericError("Ellipse: covariance is singular after regularization");
    prec = llt.solve(Eigen::MatrixXd::Identity(d, d));
  };
  auto distances = [&]() {
    std::vector<double> out(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::VectorXd c = x.row(i).transpose() - mu;
      out[static_cast<std::size_t>(i)] = c.dot(prec * c);
    }
    return out;
  };

  std::vector<Eigen::Index> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), Eigen::Index{0});
  estimate(all);
  const auto keep_count = static_cast<std::size_t>(n) -
                          static_cast<std::size_t>(std::floor(options.trim_fraction * static_cast<double>(n)));
  for (std::size_t round = 0; round < options.rounds; ++round) {
    const auto dist = distances();
    std::vector<Eigen::Index> order = all;
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
      return dist[static_cast<std::size_t>(a)] < dist[static_cast<std::size_t>(b)];
    });
    order.resize(std::max<std::size_t>(keep_count, static_cast<std::size_t>(d) + 1));
    std::sort(order.begin(), order.end());
    estimate(order);
  }

  // Trimming shrinks the scatter; rescale so the median distance matches
  // the chi-square median.
  const boost::math::chi_squared chi(static_cast<double>(d));
  const double consistency = median_of(distances()) / boost::math::quantile(chi, 0.5);
  if (consistency > 0.0) prec /= consistency;

  EllipseParams p;
  p.quantile = options.quantile;
  p.threshold = boost::math::quantile(chi, options.quantile);
  p.location.assign(mu.data(), mu.data() + d);
  p.precision.resize(static_cast<std::size_t>(d * d));
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index k = 0; k < d; ++k) p.precision[static_cast<std::size_t>(i * d + k)] = prec(i, k);
  }
  std::vector<double> raws = distances();
  std::sort(raws.begin(), raws.end());
  const double iqr = quantile_sorted(raws, 0.75) - quantile_sorted(raws, 0.25);
  p.scale = iqr > 0.0 ? iqr : 1.0;
  return DetectorModel(DetectorVariant::ellipse, stdz, std::move(p));
}

double crossa_objective(const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                        const std::vector<double>& w, double b, double lambda) {
  double loss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double z = b;
    for (std::size_t k = 0; k < w.size(); ++k) z += w[k] * x[i][k];
    loss += softplus(z) - y[i] * z;
  }
  double l1 = 0.0;
  for (double v : w) l1 += std::abs(v);
  return loss / static_cast<double>(x.size()) + lambda * l1;
}

DetectorModel fit_crossa(const std::vector<UncertaintyFeatures>& benign,
                         const std::vector<UncertaintyFeatures>& adversarial, const CrossaOptions& options) {
  if (benign.empty() || adversarial.empty()) throw ConfigError("CrossA needs benign and adversarial samples");
  if (!(options.lambda >= 0.0)) throw ConfigError("CrossA: lambda must be >= 0");
  auto rows = feature_rows(benign);
  const auto adv_rows = feature_rows(adversarial);
  rows.insert(rows.end(), adv_rows.begin(), adv_rows.end());
  std::vector<int> y(rows.size(), 0);
  std::fill(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(benign.size()), 1);
  const Standardizer stdz = Standardizer::fit(rows);
  std::vector<std::vector<double>> x;
  for (const auto& r : rows) x.push_back(stdz.apply(r));
  const std::size_t n = x.size(), p = x.front().size();
  const double lambda = options.lambda;

  auto smooth = [&](const std::vector<double>& w, double b) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double z = b;
      for (std::size_t k = 0; k < p; ++k) z += w[k] * x[i][k];
      s += softplus(z) - y[i] * z;
    }
    return s / static_cast<double>(n);
  };
  auto l1 = [](const std::vector<double>& w) {
    double s = 0.0;
    for (double v : w) s += std::abs(v);
    return s;
  };

  std::vector<double> w(p, 0.0);
  double b = 0.0;
  double f = smooth(w, b);
  double objective = f + lambda * l1(w);
  double step = 1.0;
  CrossaParams params;
  params.lambda = lambda;
  for (std::size_t iter = 1; iter <= options.max_iterations; ++iter) {
    std::vector<double> gw(p, 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double z = b;
      for (std::size_t k = 0; k < p; ++k) z += w[k] * x[i][k];
      const double r = logistic(z) - y[i];
      for (std::size_t k = 0; k < p; ++k) gw[k] += r * x[i][k];
      gb += r;
    }
    for (auto& g : gw) g /= static_cast<double>(n);
    gb /= static_cast<double>(n);

    std::vector<double> wn(p);
    double bn = 0.0, fn = 0.0;
    for (int backtrack = 0; backtrack < 60; ++backtrack) {
      for (std::size_t k = 0; k < p; ++k) {
        const double v = w[k] - step * gw[k];
        const double thr = step * lambda;
        wn[k] = v > thr ? v - thr : (v < -thr ? v + thr : 0.0);
      }
      bn = b - step * gb;
      fn = smooth(wn, bn);
      double lin = gb * (bn - b), sq = (bn - b) * (bn - b);
      for (std::size_t k = 0; k < p; ++k) {
        lin += gw[k] * (wn[k] - w[k]);
        sq += (wn[k] - w[k]) * (wn[k] - w[k]);
      }
      if (fn <= f + lin + sq / (2.0 * step) + 1e-15) break;
      step *= 0.5;
    }
    const double next = fn + lambda * l1(wn);
    params.iterations = iter;
    if (next > objective) {
      // no progress possible at machine precision
      params.converged = true;
      break;
    }
    const double decrease = objective - next;
    w = std::move(wn);
    b = bn;
    f = fn;
    objective = next;
    if (decrease < options.tolerance) {
      params.converged = true;
      break;
    }
    step = std::min(step * 1.25, 1e3);
  }
  params.weights = std::move(w);
  params.intercept = b;
  return DetectorModel(DetectorVariant::crossa, stdz, std::move(params));
}

DetectorModel fit_heatmap_cnn(const std::vector<Heatmap>& benign, const std::vector<Heatmap>& adversarial,
                              const HeatmapTrainConfig& config) {
  if (benign.empty() || adversarial.empty()) throw ConfigError("Heatmap detector needs benign and adversarial heatmaps");
  if (config.batch_size == 0 || config.channels == 0) throw ConfigError("Heatmap detector: bad train config");
  std::vector<const Heatmap*> maps;
  std::vector<double> targets;
  for (const auto& h : benign) {
    maps.push_back(&h);
    targets.push_back(1.0);
  }
  for (const auto& h : adversarial) {
    maps.push_back(&h);
    targets.push_back(0.0);
  }
  for (const auto* h : maps) {
    if (h->values.shape() != maps.front()->values.shape()) throw ShapeError("Heatmap detector: heatmaps differ in shape");
  }

  HeatmapNetParams p;
  double sum = 0.0, sq = 0.0, cnt = 0.0;
  for (const auto* h : maps) {
    for (double v : h->values.values()) {
      sum += v;
      sq += v * v;
      cnt += 1.0;
    }
  }
  p.input_mean = sum / cnt;
  const double var = sq / cnt - p.input_mean * p.input_mean;
  p.input_scale = var > 1e-24 ? std::sqrt(var) : 1.0;

  Rng rng(config.seed);
  const std::size_t c = config.channels;
  auto he = [&](Shape shape, std::size_t fan_in) {
    Tensor t(std::move(shape));
    const double s = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.values()) v = s * rng.normal();
    return t;
  };
  p.tensors.push_back(he({3, 3, 1, c}, 9));
  p.tensors.emplace_back(Shape{c}, 0.0);
  p.tensors.push_back(he({3, 3, c, c}, 9 * c));
  p.tensors.emplace_back(Shape{c}, 0.0);
  p.tensors.push_back(he({c, 1}, c));
  p.tensors.emplace_back(Shape{1}, 0.0);

  std::vector<Tensor> inputs;
  for (const auto* h : maps) inputs.push_back(heatmap_input(*h, p.input_mean, p.input_scale));

  std::vector<Tensor> velocity;
  for (const auto& t : p.tensors) velocity.emplace_back(t.shape(), 0.0);
  std::vector<std::size_t> order(maps.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      std::vector<std::vector<Tensor>> grads(stop - start);
      std::vector<double> losses(stop - start);
      parallel_for(grads.size(), [&](std::size_t i) {
        const std::size_t idx = order[start + i];
        Tape tape;
        auto net = build_heatmap_net(tape, p.tensors, inputs[idx], true);
        Var loss = tape.bce_with_logit(net.logit, targets[idx]);
        tape.backward(loss);
        losses[i] = tape.value(loss)[0];
        for (Var v : net.params) grads[i].push_back(tape.grad(v));
      });
      for (double l : losses) {
        if (!std::isfinite(l)) throw NumericError("Heatmap detector: training diverged");
      }
      const double inv = 1.0 / static_cast<double>(grads.size());
      for (std::size_t t = 0; t < p.tensors.size(); ++t) {
        for (std::size_t k = 0; k < p.tensors[t].size(); ++k) {
          double g = 0.0;
          for (const auto& gr : grads) g += gr[t][k];
          velocity[t][k] = config.momentum * velocity[t][k] - config.learning_rate * g * inv;
          p.tensors[t][k] += velocity[t][k];
        }
      }
    }
  }
  for (const auto& t : p.tensors) {
    if (!t.all_finite()) throw NumericError("Heatmap detector: non-finite weights after training");
  }
  return DetectorModel(DetectorVariant::heatmap, Standardizer{}, std::move(p));
}

// ---------------------------------------------------------------- persistence

json DetectorModel::to_json() const {
  json j{{"format", "advseg-detector"}, {"version", 1}, {"variant", to_string(variant_)}};
  j["standardizer"] = json{{"mean", standardizer_.mean}, {"scale", standardizer_.scale}};
  std::visit(
      [&](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        json& o = j["params"];
        if constexpr (std::is_same_v<P, EntropyParams>) {
          o = json{{"min_entropy", p.min_entropy}, {"max_entropy", p.max_entropy}};
        } else if constexpr (std::is_same_v<P, OcsvmParams>) {
          o = json{{"gamma", p.gamma}, {"nu", p.nu},      {"rho", p.rho},
                   {"scale", p.scale}, {"coef", p.coef}, {"support", p.support}};
        } else if constexpr (std::is_same_v<P, EllipseParams>) {
          o = json{{"location", p.location}, {"precision", p.precision}, {"quantile", p.quantile},
                   {"threshold", p.threshold}, {"scale", p.scale}};
        } else if constexpr (std::is_same_v<P, CrossaParams>) {
          o = json{{"weights", p.weights},     {"intercept", p.intercept}, {"lambda", p.lambda},
                   {"iterations", p.iterations}, {"converged", p.converged}};
        } else {
          json ts = json::array();
          for (const auto& t : p.tensors) ts.push_back(tensor_json(t));
          o = json{{"tensors", ts}, {"input_mean", p.input_mean}, {"input_scale", p.input_scale}};
        }
      },
      params_);
  return j;
}

DetectorModel DetectorModel::from_json(const json& j) {
  try {
    if (j.at("format") != "advseg-detector" || j.at("version") != 1) throw FormatError("not a detector file");
    const auto variant = detector_variant_from_string(j.at("variant").get<std::string>());
    Standardizer s;
    s.mean = j.at("standardizer").at("mean").get<std::vector<double>>();
    s.scale = j.at("standardizer").at("scale").get<std::vector<double>>();
    const json& o = j.at("params");
    switch (variant) {
      case DetectorVariant::entropy:
        return DetectorModel(variant, s, EntropyParams{o.at("min_entropy"), o.at("max_entropy")});
      case DetectorVariant::ocsvm: {
        OcsvmParams p;
        p.gamma = o.at("gamma");
        p.nu = o.at("nu");
        p.rho = o.at("rho");
        p.scale = o.at("scale");
        p.coef = o.at("coef").get<std::vector<double>>();
        p.support = o.at("support").get<std::vector<std::vector<double>>>();
        return DetectorModel(variant, s, std::move(p));
      }
      case DetectorVariant::ellipse: {
        EllipseParams p;
        p.location = o.at("location").get<std::vector<double>>();
        p.precision = o.at("precision").get<std::vector<double>>();
        p.quantile = o.at("quantile");
        p.threshold = o.at("threshold");
        p.scale = o.at("scale");
        return DetectorModel(variant, s, std::move(p));
      }
      case DetectorVariant::crossa: {
        CrossaParams p;
        p.weights = o.at("weights").get<std::vector<double>>();
        p.intercept = o.at("intercept");
        p.lambda = o.at("lambda");
        p.iterations = o.at("iterations");
        p.converged = o.at("converged");
        return DetectorModel(variant, s, std::move(p));
      }
      case DetectorVariant::heatmap: {
        HeatmapNetParams p;
        for (const auto& t : o.at("tensors")) p.tensors.push_back(tensor_from(t));
        if (p.tensors.size() != 6) throw FormatError("heatmap detector needs 6 tensors");
        p.input_mean = o.at("input_mean");
        p.input_scale = o.at("input_scale");
        return DetectorModel(variant, s, std::move(p));
      }
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed detector file: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
  throw FormatError("malformed detector file");
}

void DetectorModel::save(const std::filesystem::path& path) const { write_text_file(path, to_json().dump(1) + "\n"); }

DetectorModel DetectorModel::load(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw FormatError("corrupt detector file " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

}  // namespace advseg
