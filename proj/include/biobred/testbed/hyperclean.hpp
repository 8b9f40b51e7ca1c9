#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/QR>

#include "biobred/constants.hpp"
#include "biobred/problem.hpp"
#include "biobred/rng.hpp"
#include "biobred/solvers.hpp"
#include "biobred/types.hpp"

namespace biobred {

struct Dataset {
  Mat features;             // one row per sample
  std::vector<int> labels;  // values in [0, classes)

  int size() const { return static_cast<int>(features.rows()); }
  int dim() const { return static_cast<int>(features.cols()); }
};

/* CSV schema: header "label,f0,f1,...,f{d-1}", one sample per row. */
inline Dataset load_dataset_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_dataset_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("load_dataset_csv: empty file " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> head;
  {
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) head.push_back(tok);
  }
  if (head.empty() || head[0] != "label")
    throw std::runtime_error("load_dataset_csv: first column must be 'label' in " + path);
  const int d = static_cast<int>(head.size()) - 1;
  if (d < 1) throw std::runtime_error("load_dataset_csv: no feature columns in " + path);
  for (int j = 0; j < d; ++j)
    if (head[static_cast<std::size_t>(j) + 1] != "f" + std::to_string(j))
      throw std::runtime_error("load_dataset_csv: expected column f" + std::to_string(j) +
                               ", got " + head[static_cast<std::size_t>(j) + 1]);
  std::vector<double> values;
  std::vector<int> labels;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string tok;
    std::vector<std::string> cells;
    while (std::getline(ss, tok, ',')) cells.push_back(tok);
    if (static_cast<int>(cells.size()) != d + 1)
      throw std::runtime_error("load_dataset_csv: row " + std::to_string(row) + " has " +
                               std::to_string(cells.size()) + " cells, expected " +
                               std::to_string(d + 1));
    std::size_t used = 0;
    int label;
    try {
      label = std::stoi(cells[0], &used);
    } catch (const std::exception&) {
      throw std::runtime_error("load_dataset_csv: bad label at row " + std::to_string(row));
    }
    if (used != cells[0].size() || label < 0)
      throw std::runtime_error("load_dataset_csv: bad label at row " + std::to_string(row));
    labels.push_back(label);
    for (int j = 0; j < d; ++j) {
      double v;
      try {
        v = std::stod(cells[static_cast<std::size_t>(j) + 1], &used);
      } catch (const std::exception&) {
        throw std::runtime_error("load_dataset_csv: bad value at row " + std::to_string(row));
      }
      if (used != cells[static_cast<std::size_t>(j) + 1].size() || !std::isfinite(v))
        throw std::runtime_error("load_dataset_csv: bad value at row " + std::to_string(row));
      values.push_back(v);
    }
  }
  if (labels.empty()) throw std::runtime_error("load_dataset_csv: no data rows in " + path);
  Dataset ds;
  ds.labels = std::move(labels);
  ds.features = Mat(static_cast<int>(ds.labels.size()), d);
  for (int i = 0; i < ds.size(); ++i)
    for (int j = 0; j < d; ++j)
      ds.features(i, j) = values[static_cast<std::size_t>(i) * static_cast<std::size_t>(d) +
                                 static_cast<std::size_t>(j)];
  return ds;
}

inline void write_dataset_csv(const std::string& path, const Dataset& ds) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_dataset_csv: cannot open " + path);
  out << "label";
  for (int j = 0; j < ds.dim(); ++j) out << ",f" << j;
  out << "\n";
  char buf[64];
  for (int i = 0; i < ds.size(); ++i) {
    out << ds.labels[static_cast<std::size_t>(i)];
    for (int j = 0; j < ds.dim(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", ds.features(i, j));
      out << ',' << buf;
    }
    out << "\n";
  }
  if (!out) throw std::runtime_error("write_dataset_csv: write failed for " + path);
}

struct CorruptionSpec {
  double rho = 0.0;  // flip probability per training label
  std::uint64_t seed = 0;
};

/* Each label is flipped with probability rho to a uniformly random other
 * class. One uniform draw per row, one extra draw per flipped row. */
inline std::vector<int> corrupt_labels(const std::vector<int>& labels, int classes,
                                       const CorruptionSpec& spec) {
  if (!(spec.rho >= 0.0 && spec.rho <= 1.0))
    throw std::invalid_argument("corrupt_labels: rho must be in [0,1]");
  if (classes < 2 && spec.rho > 0.0)
    throw std::invalid_argument("corrupt_labels: need >= 2 classes to corrupt");
  Rng rng(spec.seed);
  std::vector<int> out = labels;
  for (auto& lab : out) {
    if (rng.uniform() < spec.rho) {
      const int r = static_cast<int>(rng.below(classes - 1));
      lab = r < lab ? r : r + 1;
    }
  }
  return out;
}

/* Data hyper-cleaning: learn one importance weight per (possibly corrupted)
 * training sample. With sigma the logistic function, ce the softmax
 * cross-entropy, and W read column-major from the inner variable,
 *
 *   g(lambda, w; i) = sigma(lambda_i) ce_i(W) + ridge |w|^2   (train row i)
 *   f(lambda, w; j) = ce_j(W)                                 (val row j)
 *
 * The outer variable never enters f, so grad_x f = 0 and the hypergradient
 * flows entirely through the mixed second derivative of g. */
struct HyperCleanProblem {
  struct Data {
    Dataset train;                  // labels already corrupted
    std::vector<int> clean_labels;  // pre-corruption, kept for diagnostics
    Dataset val;
    int classes = 0;
    double ridge = 1e-3;
    SmoothnessBase constants;
  };

  std::shared_ptr<const Data> data;

  int d1() const { return data->train.size(); }
  int d2() const { return data->train.dim() * data->classes; }
  const SmoothnessBase& constants() const { return data->constants; }

  static double sigmoid(double t) {
    return t >= 0.0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
  }

  // softmax probabilities of one logit row, computed against the row max
  static Vec softmax(const Vec& z) {
    const double m = z.maxCoeff();
    Vec p = (z.array() - m).exp();
    p /= p.sum();
    return p;
  }

  static double cross_entropy(const Vec& z, int label) {
    const double m = z.maxCoeff();
    const double lse = m + std::log((z.array() - m).exp().sum());
    return lse - z[label];
  }

  BilevelOracleSet oracles() const {
    auto d = data;
    const int dim = d->train.dim();
    const int classes = d->classes;
    const int d1 = d->train.size();
    const int d2 = dim * classes;
    auto weights = [d](const Vec& y) {
      return Eigen::Map<const Mat>(y.data(), d->train.dim(), d->classes);
    };
    auto train_probs = [d, weights](const Vec& y) {
      const Mat z = d->train.features * weights(y);
      Mat p(z.rows(), z.cols());
      for (int i = 0; i < z.rows(); ++i) p.row(i) = softmax(z.row(i).transpose()).transpose();
      return p;
    };

    BilevelOracleSet p;
    p.d1 = d1;
    p.d2 = d2;
    p.f_value = [d, weights](const Vec&, const Vec& y) {
      const Mat z = d->val.features * weights(y);
      double s = 0.0;
      for (int j = 0; j < d->val.size(); ++j)
        s += cross_entropy(z.row(j).transpose(), d->val.labels[static_cast<std::size_t>(j)]);
      return s / d->val.size();
    };
    p.g_value = [d, weights](const Vec& x, const Vec& y) {
      const Mat z = d->train.features * weights(y);
      double s = 0.0;
      for (int i = 0; i < d->train.size(); ++i)
        s += sigmoid(x[i]) * cross_entropy(z.row(i).transpose(),
                                           d->train.labels[static_cast<std::size_t>(i)]);
      return s / d->train.size() + d->ridge * y.squaredNorm();
    };
    p.grad_x_f = [d1](const Vec&, const Vec&) { return Vec(Vec::Zero(d1)); };
    p.grad_y_f = [d, weights, dim, classes, d2](const Vec&, const Vec& y) {
      const Mat z = d->val.features * weights(y);
      Mat grad = Mat::Zero(dim, classes);
      for (int j = 0; j < d->val.size(); ++j) {
        Vec pr = softmax(z.row(j).transpose());
        pr[d->val.labels[static_cast<std::size_t>(j)]] -= 1.0;
        grad += d->val.features.row(j).transpose() * pr.transpose();
      }
      grad /= d->val.size();
      return Vec(Eigen::Map<const Vec>(grad.data(), d2));
    };
    p.grad_y_g = [d, weights, train_probs, dim, classes, d2](const Vec& x, const Vec& y) {
      const Mat probs = train_probs(y);
      Mat grad = Mat::Zero(dim, classes);
      for (int i = 0; i < d->train.size(); ++i) {
        Vec pr = probs.row(i).transpose();
        pr[d->train.labels[static_cast<std::size_t>(i)]] -= 1.0;
        grad += sigmoid(x[i]) * d->train.features.row(i).transpose() * pr.transpose();
      }
      grad /= d->train.size();
      Vec out = Eigen::Map<const Vec>(grad.data(), d2);
      out += 2.0 * d->ridge * y;
      return out;
    };
    p.jvp_gxy = [d, weights, train_probs, d1](const Vec& x, const Vec& y, const Vec& v) {
      const Mat vmat = Eigen::Map<const Mat>(v.data(), d->train.dim(), d->classes);
      const Mat u = d->train.features * vmat;
      const Mat probs = train_probs(y);
      Vec out(d1);
      for (int i = 0; i < d1; ++i) {
        const double s = sigmoid(x[i]);
        Vec pr = probs.row(i).transpose();
        pr[d->train.labels[static_cast<std::size_t>(i)]] -= 1.0;
        out[i] = s * (1.0 - s) * pr.dot(u.row(i).transpose());
      }
      return Vec(out / d1);
    };
    p.hvp_gyy = [d, weights, train_probs, dim, classes, d2](const Vec& x, const Vec& y,
                                                            const Vec& v) {
      const Mat vmat = Eigen::Map<const Mat>(v.data(), dim, classes);
      const Mat u = d->train.features * vmat;
      const Mat probs = train_probs(y);
      Mat acc = Mat::Zero(dim, classes);
      for (int i = 0; i < d->train.size(); ++i) {
        const Vec pr = probs.row(i).transpose();
        const Vec ui = u.row(i).transpose();
        const Vec dp = pr.cwiseProduct(ui) - pr * pr.dot(ui);
        acc += sigmoid(x[i]) * d->train.features.row(i).transpose() * dp.transpose();
      }
      acc /= d->train.size();
      Vec out = Eigen::Map<const Vec>(acc.data(), d2);
      out += 2.0 * d->ridge * v;
      return out;
    };
    return p;
  }

  StochasticBilevelOracleSet stochastic() const {
    auto d = data;
    const int dim = d->train.dim();
    const int classes = d->classes;
    const int d1 = d->train.size();
    const int d2 = dim * classes;

    StochasticBilevelOracleSet p;
    p.d1 = d1;
    p.d2 = d2;
    p.n_f = d->val.size();
    p.n_g = d->train.size();
    // crude but valid: per-sample gradients of both levels are bounded by
    // max-row-norm * sqrt(2) plus the ridge term over any bounded region;
    // the variance bound is only consumed by diagnostics, not by solvers
    {
      double mn = 0.0;
      for (int i = 0; i < d->train.size(); ++i)
        mn = std::max(mn, d->train.features.row(i).norm());
      for (int j = 0; j < d->val.size(); ++j) mn = std::max(mn, d->val.features.row(j).norm());
      p.noise_bound = 8.0 * mn * mn;
    }
    p.f_value_at = [d](const Vec&, const Vec& y, int j) {
      const Mat w = Eigen::Map<const Mat>(y.data(), d->train.dim(), d->classes);
      const Vec z = (d->val.features.row(j) * w).transpose();
      return cross_entropy(z, d->val.labels[static_cast<std::size_t>(j)]);
    };
    p.g_value_at = [d](const Vec& x, const Vec& y, int i) {
      const Mat w = Eigen::Map<const Mat>(y.data(), d->train.dim(), d->classes);
      const Vec z = (d->train.features.row(i) * w).transpose();
      return sigmoid(x[i]) * cross_entropy(z, d->train.labels[static_cast<std::size_t>(i)]) +
             d->ridge * y.squaredNorm();
    };
    p.grad_x_f_at = [d1](const Vec&, const Vec&, int) { return Vec(Vec::Zero(d1)); };
    p.grad_y_f_at = [d, dim, classes, d2](const Vec&, const Vec& y, int j) {
      const Mat w = Eigen::Map<const Mat>(y.data(), dim, classes);
      Vec pr = softmax((d->val.features.row(j) * w).transpose());
      pr[d->val.labels[static_cast<std::size_t>(j)]] -= 1.0;
      const Mat grad = d->val.features.row(j).transpose() * pr.transpose();
      return Vec(Eigen::Map<const Vec>(grad.data(), d2));
    };
    p.grad_y_g_at = [d, dim, classes, d2](const Vec& x, const Vec& y, int i) {
      const Mat w = Eigen::Map<const Mat>(y.data(), dim, classes);
      Vec pr = softmax((d->train.features.row(i) * w).transpose());
      pr[d->train.labels[static_cast<std::size_t>(i)]] -= 1.0;
      const Mat grad = sigmoid(x[i]) * d->train.features.row(i).transpose() * pr.transpose();
      Vec out = Eigen::Map<const Vec>(grad.data(), d2);
      out += 2.0 * d->ridge * y;
      return out;
    };
    p.jvp_gxy_at = [d, dim, classes, d1](const Vec& x, const Vec& y, const Vec& v, int i) {
      const Mat w = Eigen::Map<const Mat>(y.data(), dim, classes);
      const Mat vmat = Eigen::Map<const Mat>(v.data(), dim, classes);
      Vec pr = softmax((d->train.features.row(i) * w).transpose());
      pr[d->train.labels[static_cast<std::size_t>(i)]] -= 1.0;
      const Vec u = (d->train.features.row(i) * vmat).transpose();
      const double s = sigmoid(x[i]);
      Vec out = Vec::Zero(d1);
      out[i] = s * (1.0 - s) * pr.dot(u);
      return out;
    };
    p.hvp_gyy_at = [d, dim, classes, d2](const Vec& x, const Vec& y, const Vec& v, int i) {
      const Mat w = Eigen::Map<const Mat>(y.data(), dim, classes);
      const Mat vmat = Eigen::Map<const Mat>(v.data(), dim, classes);
      const Vec pr = softmax((d->train.features.row(i) * w).transpose());
      const Vec u = (d->train.features.row(i) * vmat).transpose();
      const Vec dp = pr.cwiseProduct(u) - pr * pr.dot(u);
      const Mat acc = sigmoid(x[i]) * d->train.features.row(i).transpose() * dp.transpose();
      Vec out = Eigen::Map<const Vec>(acc.data(), d2);
      out += 2.0 * d->ridge * v;
      return out;
    };
    p.mean = oracles();
    return p;
  }

  // reference handles for metrics: phi is the validation loss at the current
  // iterate pair, so no inner solve is needed per row
  ReferenceOracles references() const {
    auto mean = oracles();
    ReferenceOracles r;
    r.phi_value = [mean](const Vec& x, const Vec& y) { return mean.f_value(x, y); };
    return r;
  }

  static HyperCleanProblem from_data(Dataset train, Dataset val, const CorruptionSpec& corruption,
                                     double ridge = 1e-3) {
    if (train.size() < 1 || val.size() < 1)
      throw std::invalid_argument("HyperCleanProblem: empty split");
    if (train.dim() != val.dim())
      throw std::invalid_argument("HyperCleanProblem: feature dims differ between splits");
    if (!(ridge > 0.0)) throw std::invalid_argument("HyperCleanProblem: ridge must be > 0");
    auto d = std::make_shared<Data>();
    int classes = 0;
    for (int lab : train.labels) classes = std::max(classes, lab + 1);
    for (int lab : val.labels) classes = std::max(classes, lab + 1);
    if (classes < 2) throw std::invalid_argument("HyperCleanProblem: need >= 2 classes");
    d->classes = classes;
    d->ridge = ridge;
    d->clean_labels = train.labels;
    train.labels = corrupt_labels(train.labels, classes, corruption);
    d->train = std::move(train);
    d->val = std::move(val);

    double mn = 0.0;
    for (int i = 0; i < d->train.size(); ++i) mn = std::max(mn, d->train.features.row(i).norm());
    for (int j = 0; j < d->val.size(); ++j) mn = std::max(mn, d->val.features.row(j).norm());
    // softmax cross-entropy Hessians are bounded by half the squared feature
    // norm; second derivatives pick up one more feature factor each
    d->constants.L = 0.5 * mn * mn + 2.0 * ridge;
    d->constants.mu = 2.0 * ridge;
    d->constants.c_fy = std::max(std::sqrt(2.0) * mn, 1e-6);
    d->constants.l_gxy = std::max(0.25 * mn * mn + 0.25 * mn, 1e-6);
    d->constants.l_gyy = std::max(mn * mn * mn, 1e-6);
    d->constants.validate();
    return HyperCleanProblem{std::move(d)};
  }
};

/* Synthetic class-conditional Gaussian data: orthonormal class directions
 * scaled by `separation`, unit isotropic noise, features rescaled so the
 * largest row norm equals `feature_scale`. Labels are then corrupted on the
 * training split only. */
inline HyperCleanProblem make_hyperclean(int n_train, int n_val, int dim, int classes,
                                         const CorruptionSpec& corruption, std::uint64_t seed,
                                         double separation = 2.0, double feature_scale = 2.0,
                                         double ridge = 1e-3) {
  if (n_train < 1 || n_val < 1) throw std::invalid_argument("make_hyperclean: empty split");
  if (classes < 2) throw std::invalid_argument("make_hyperclean: need >= 2 classes");
  if (dim < classes) throw std::invalid_argument("make_hyperclean: need dim >= classes");
  if (!(separation > 0.0) || !(feature_scale > 0.0))
    throw std::invalid_argument("make_hyperclean: scales must be > 0");
  Rng rng(seed);
  Mat gauss(dim, classes);
  for (int i = 0; i < dim; ++i)
    for (int c = 0; c < classes; ++c) gauss(i, c) = rng.normal();
  Eigen::HouseholderQR<Mat> qr(gauss);
  const Mat q = Mat(qr.householderQ()).leftCols(classes);

  auto draw = [&](int n) {
    Dataset ds;
    ds.features = Mat(n, dim);
    ds.labels.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const int lab = static_cast<int>(rng.below(classes));
      ds.labels[static_cast<std::size_t>(i)] = lab;
      ds.features.row(i) = (separation * q.col(lab) + rng.gaussian(dim)).transpose();
    }
    return ds;
  };
  Dataset train = draw(n_train);
  Dataset val = draw(n_val);
  double mn = 0.0;
  for (int i = 0; i < n_train; ++i) mn = std::max(mn, train.features.row(i).norm());
  for (int j = 0; j < n_val; ++j) mn = std::max(mn, val.features.row(j).norm());
  const double scale = feature_scale / mn;
  train.features *= scale;
  val.features *= scale;
  return HyperCleanProblem::from_data(std::move(train), std::move(val), corruption, ridge);
}

}  // namespace biobred
