#include "scae/classifiers.hpp"

#include <algorithm>
#include <limits>
#include <random>

#include "scae/errors.hpp"

namespace scae::classify {

namespace {

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

torch::Tensor as_double_2d(const torch::Tensor& t, const char* what) {
  if (t.dim() != 2) throw ConfigError(std::string(what) + " must be 2-D");
  return t.to(torch::kFloat64).contiguous();
}

// Squared distances [N, k].
torch::Tensor squared_distances(const torch::Tensor& x, const torch::Tensor& centers) {
  auto diff = x.unsqueeze(1) - centers.unsqueeze(0);
  return diff.pow(2).sum(-1);
}

}  // namespace

std::string to_string(FeatureSource source) {
  return source == FeatureSource::kPrior ? "prior" : "posterior";
}

FeatureSource parse_feature_source(const std::string& name) {
  if (name == "prior" || name == "prior_kmeans") return FeatureSource::kPrior;
  if (name == "posterior" || name == "posterior_kmeans") return FeatureSource::kPosterior;
  throw ConfigError("unknown classifier '" + name + "' (expected prior or posterior)");
}

torch::Tensor reduce_posterior(const torch::Tensor& posterior) {
  if (posterior.dim() != 3) throw ConfigError("posterior presence must be [B,K,M]");
  return posterior.sum(-1);
}

std::vector<int> hungarian_match(const torch::Tensor& cost_in) {
  if (cost_in.dim() != 2 || cost_in.size(0) != cost_in.size(1)) {
    throw ConfigError("hungarian_match needs a square cost matrix");
  }
  const auto cost = cost_in.to(torch::kFloat64).contiguous();
  if (!torch::isfinite(cost).all().item<bool>()) {
    throw ConfigError("hungarian_match needs finite costs");
  }
  const int n = static_cast<int>(cost.size(0));
  auto a = cost.accessor<double, 2>();
  constexpr double kInf = std::numeric_limits<double>::infinity();

  // Shortest augmenting path with row/column potentials; 1-based with a
  // virtual column 0.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = kInf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> perm(n, 0);
  for (int j = 1; j <= n; ++j) perm[p[j] - 1] = j - 1;
  return perm;
}

double assignment_cost(const torch::Tensor& cost, const std::vector<int>& perm) {
  const auto c = cost.to(torch::kFloat64).contiguous();
  auto a = c.accessor<double, 2>();
  double total = 0.0;
  for (std::size_t i = 0; i < perm.size(); ++i) total += a[static_cast<std::int64_t>(i)][perm[i]];
  return total;
}

torch::Tensor argmax_lowest(const torch::Tensor& scores) {
  const auto s = scores.to(torch::kFloat64).contiguous();
  const auto n = s.size(0);
  const auto c = s.size(1);
  auto out = torch::empty({n}, torch::kInt64);
  auto sa = s.accessor<double, 2>();
  auto oa = out.accessor<std::int64_t, 1>();
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < c; ++j) {
      if (sa[i][j] > sa[i][best]) best = j;
    }
    oa[i] = best;
  }
  return out;
}

torch::Tensor nearest_cluster(const torch::Tensor& centers, const torch::Tensor& features) {
  const auto x = as_double_2d(features, "features");
  return argmax_lowest(-squared_distances(x, centers.to(torch::kFloat64)));
}

KMeansClassifier fit_kmeans_classifier(const torch::Tensor& features, const torch::Tensor& labels,
                                       const KMeansOptions& options, FeatureSource source) {
  const auto x = as_double_2d(features, "features");
  const std::int64_t n = x.size(0);
  const int k = options.k;
  if (k < 1 || n < k) throw ConfigError("k-means needs at least k samples");
  if (labels.dim() != 1 || labels.size(0) != n) throw ConfigError("labels must be [N]");

  std::mt19937_64 rng(options.seed);

  // k-means++ seeding.
  auto centers = torch::empty({k, x.size(1)}, torch::kFloat64);
  std::int64_t first = static_cast<std::int64_t>(uniform01(rng) * static_cast<double>(n));
  first = std::min(first, n - 1);
  centers[0].copy_(x[first]);
  auto closest = squared_distances(x, centers.slice(0, 0, 1)).squeeze(1).contiguous();
  for (int c = 1; c < k; ++c) {
    const double total = closest.sum().item<double>();
    std::int64_t pick = n - 1;
    if (total > 0.0) {
      const double target = uniform01(rng) * total;
      auto ca = closest.accessor<double, 1>();
      double acc = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        acc += ca[i];
        if (acc > target) {
          pick = i;
          break;
        }
      }
    } else {
      pick = std::min(n - 1, static_cast<std::int64_t>(uniform01(rng) * static_cast<double>(n)));
    }
    centers[c].copy_(x[pick]);
    closest = torch::minimum(closest, squared_distances(x, centers.slice(0, c, c + 1)).squeeze(1));
  }

  KMeansClassifier clf;
  clf.source = source;
  torch::Tensor assign;
  for (int it = 0; it < options.max_iterations; ++it) {
    auto d2 = squared_distances(x, centers);
    assign = argmax_lowest(-d2);
    auto next = torch::zeros_like(centers);
    auto counts = torch::zeros({k}, torch::kFloat64);
    next.index_add_(0, assign, x);
    counts.index_add_(0, assign, torch::ones({n}, torch::kFloat64));
    auto own = d2.gather(1, assign.unsqueeze(1)).squeeze(1).contiguous();
    auto counts_a = counts.accessor<double, 1>();
    for (int c = 0; c < k; ++c) {
      if (counts_a[c] > 0) {
        next[c] /= counts_a[c];
        continue;
      }
      // Empty cluster: move it onto the point farthest from its center.
      auto oa = own.accessor<double, 1>();
      std::int64_t far = 0;
      for (std::int64_t i = 1; i < n; ++i) {
        if (oa[i] > oa[far]) far = i;
      }
      next[c].copy_(x[far]);
      oa[far] = -1.0;
    }
    const double shift = (next - centers).pow(2).sum(-1).sqrt().max().item<double>();
    centers = next;
    clf.iterations = it + 1;
    if (shift < options.tolerance) break;
  }
  assign = argmax_lowest(-squared_distances(x, centers));

  const int classes = options.num_classes;
  const int side = std::max(k, classes);
  auto cost = torch::zeros({side, side}, torch::kFloat64);
  auto cost_a = cost.accessor<double, 2>();
  auto assign_a = assign.accessor<std::int64_t, 1>();
  const auto y = labels.to(torch::kInt64).contiguous();
  auto y_a = y.accessor<std::int64_t, 1>();
  for (std::int64_t i = 0; i < n; ++i) {
    if (y_a[i] < 0 || y_a[i] >= classes) throw ConfigError("label out of range");
    cost_a[assign_a[i]][y_a[i]] -= 1.0;
  }
  const auto perm = hungarian_match(cost);
  clf.permutation.resize(static_cast<std::size_t>(k));
  for (int c = 0; c < k; ++c) {
    int label = perm[static_cast<std::size_t>(c)];
    if (label >= classes) {
      // More clusters than classes: fall back to the majority label.
      label = static_cast<int>(argmax_lowest(-cost.slice(1, 0, classes)[c].unsqueeze(0))[0].item<std::int64_t>());
    }
    clf.permutation[static_cast<std::size_t>(c)] = label;
  }
  clf.centers = centers;
  return clf;
}

torch::Tensor predict_kmeans(const KMeansClassifier& clf, const torch::Tensor& features) {
  if (!clf.fitted()) throw ConfigError("k-means classifier is not fitted");
  auto cluster = nearest_cluster(clf.centers, features);
  auto out = torch::empty_like(cluster);
  auto ca = cluster.accessor<std::int64_t, 1>();
  auto oa = out.accessor<std::int64_t, 1>();
  for (std::int64_t i = 0; i < cluster.size(0); ++i) {
    oa[i] = clf.permutation[static_cast<std::size_t>(ca[i])];
  }
  return out;
}

torch::Tensor LinearClassifier::logits(const torch::Tensor& features) const {
  return torch::addmm(bias, features.to(torch::kFloat64), weights);
}

torch::Tensor predict_linear(const LinearClassifier& clf, const torch::Tensor& features) {
  if (!clf.fitted()) throw ConfigError("linear classifier is not fitted");
  return argmax_lowest(clf.logits(features));
}

double cross_entropy(const LinearClassifier& clf, const torch::Tensor& features,
                     const torch::Tensor& labels) {
  auto logp = torch::log_softmax(clf.logits(features), 1);
  return -logp.gather(1, labels.to(torch::kInt64).unsqueeze(1)).mean().item<double>();
}

LinearClassifier cross_entropy_gradient(const LinearClassifier& clf,
                                        const torch::Tensor& features,
                                        const torch::Tensor& labels) {
  const auto x = features.to(torch::kFloat64);
  const auto n = static_cast<double>(x.size(0));
  auto probs = torch::softmax(clf.logits(x), 1);
  auto onehot = torch::one_hot(labels.to(torch::kInt64), clf.weights.size(1)).to(torch::kFloat64);
  auto delta = (probs - onehot) / n;
  return {x.t().mm(delta), delta.sum(0)};
}

LinearClassifier train_linear(const torch::Tensor& features, const torch::Tensor& labels,
                              const LinearOptions& options) {
  const auto x = as_double_2d(features, "features");
  const auto y = labels.to(torch::kInt64);
  if (y.dim() != 1 || y.size(0) != x.size(0)) throw ConfigError("labels must be [N]");
  if (y.numel() > 0 && (y.min().item<std::int64_t>() < 0 ||
                        y.max().item<std::int64_t>() >= options.num_classes)) {
    throw ConfigError("label out of range");
  }
  auto mean = x.mean(0);
  auto scale = x.std(0, /*unbiased=*/false).clamp_min(1e-6);
  auto xs = (x - mean) / scale;

  LinearClassifier z{torch::zeros({x.size(1), options.num_classes}, torch::kFloat64),
                     torch::zeros({options.num_classes}, torch::kFloat64)};
  for (int e = 0; e < options.epochs; ++e) {
    auto g = cross_entropy_gradient(z, xs, y);
    z.weights -= options.learning_rate * g.weights;
    z.bias -= options.learning_rate * g.bias;
  }
  LinearClassifier out;
  out.weights = z.weights / scale.unsqueeze(1);
  out.bias = z.bias - (mean / scale).unsqueeze(0).mm(z.weights).squeeze(0);
  return out;
}

}  // namespace scae::classify
