#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "pearl/transformer.hpp"

namespace oracle {

std::vector<double> finite_diff(const std::function<double(const std::vector<Tensor>&)>& f,
                                std::vector<Tensor> inputs, std::size_t which, double eps) {
  pearl::NoGradGuard no_grad;
  Tensor& x = inputs[which];
  auto data = x.mutable_data();
  std::vector<double> g(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double saved = data[i];
    data[i] = saved + eps;
    const double up = f(inputs);
    data[i] = saved - eps;
    const double down = f(inputs);
    data[i] = saved;
    g[i] = (up - down) / (2 * eps);
  }
  return g;
}

double max_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({1.0, std::abs(a[i]), std::abs(b[i])});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

std::vector<double> naive_attention(const std::vector<double>& q, const std::vector<double>& k,
                                    const std::vector<double>& v, std::size_t s, std::size_t n,
                                    std::size_t d, std::size_t heads) {
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> out(s * d, 0.0);
  std::vector<double> w(n);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < s; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double dot = 0;
        for (std::size_t c = 0; c < dh; ++c) dot += q[i * d + h * dh + c] * k[j * d + h * dh + c];
        w[j] = dot * sc;
      }
      const double mx = *std::max_element(w.begin(), w.end());
      double z = 0;
      for (auto& x : w) {
        x = std::exp(x - mx);
        z += x;
      }
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t c = 0; c < dh; ++c) out[i * d + h * dh + c] += w[j] / z * v[j * d + h * dh + c];
      }
    }
  }
  return out;
}

Eigen::MatrixXd ridge_qr(const Eigen::MatrixXd& phi, const Eigen::MatrixXd& onehot, double ridge) {
  const Eigen::Index n = phi.rows(), p = phi.cols();
  Eigen::MatrixXd a(n + p, p);
  a << phi, std::sqrt(ridge) * Eigen::MatrixXd::Identity(p, p);
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(n + p, onehot.cols());
  b.topRows(n) = onehot;
  return a.colPivHouseholderQr().solve(b);
}

int nearest_centroid(const std::vector<std::vector<double>>& centroids, const double* x, std::size_t dim) {
  int best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.size(); ++c) {
    double dist = 0;
    for (std::size_t j = 0; j < dim; ++j) dist += (x[j] - centroids[c][j]) * (x[j] - centroids[c][j]);
    if (dist < best_d) {
      best_d = dist;
      best = static_cast<int>(c);
    }
  }
  return best;
}

Tensor random_tensor(pearl::Shape shape, std::mt19937_64& rng, double stddev, bool grad) {
  return Tensor::randn(std::move(shape), stddev, rng, grad);
}

std::vector<double> affine(const std::vector<double>& x, std::size_t n, const Tensor& w, const Tensor& b) {
  const std::size_t in = w.size(0), out = w.size(1);
  std::vector<double> y(n * out);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < out; ++c) {
      double acc = b.at(c);
      for (std::size_t i = 0; i < in; ++i) acc += x[r * in + i] * w.at(i, c);
      y[r * out + c] = acc;
    }
  }
  return y;
}

std::vector<double> prefix_attention(const pearl::MultiHeadAttention& attn, const std::vector<double>& h,
                                     std::size_t s, const pearl::PrefixPair& prefix) {
  const std::size_t d = attn.query.weight.size(1);
  const auto q = affine(h, s, attn.query.weight, attn.query.bias);
  auto k = affine(h, s, attn.key.weight, attn.key.bias);
  auto v = affine(h, s, attn.value.weight, attn.value.bias);
  std::vector<double> keys, vals;
  if (!prefix.empty()) {
    keys.assign(prefix.key.data().begin(), prefix.key.data().end());
    vals.assign(prefix.value.data().begin(), prefix.value.data().end());
  }
  keys.insert(keys.end(), k.begin(), k.end());
  vals.insert(vals.end(), v.begin(), v.end());
  const std::size_t n = keys.size() / d;
  const auto mixed = naive_attention(q, keys, vals, s, n, d, attn.heads);
  return affine(mixed, s, attn.output.weight, attn.output.bias);
}

}  // namespace oracle

namespace oracle {

double scaled_rel_err(const std::vector<double>& got, const std::vector<double>& want, double floor) {
  if (got.size() != want.size()) return std::numeric_limits<double>::infinity();
  if (floor < 0) {
    double scale = 0;
    for (double w : want) scale = std::max(scale, std::abs(w));
    floor = 1e-3 * scale;
  }
  floor = std::max(floor, 1e-12);
  double worst = 0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    const double denom = std::max({std::abs(got[i]), std::abs(want[i]), floor});
    worst = std::max(worst, std::abs(got[i] - want[i]) / denom);
  }
  return worst;
}

}  // namespace oracle
