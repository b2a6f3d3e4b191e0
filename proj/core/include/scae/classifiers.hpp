#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace scae::classify {

enum class FeatureSource { kPrior, kPosterior };
std::string to_string(FeatureSource source);
FeatureSource parse_feature_source(const std::string& name);

/// [B,K,M] posterior presences -> [B,K] by summing over parts.
torch::Tensor reduce_posterior(const torch::Tensor& posterior);

/// Minimum-cost assignment on a square cost matrix. Returns perm with
/// perm[row] = assigned column.
std::vector<int> hungarian_match(const torch::Tensor& cost);

/// Total cost of an assignment; shared by tests and the matcher.
double assignment_cost(const torch::Tensor& cost, const std::vector<int>& perm);

struct KMeansClassifier {
  torch::Tensor centers;         // [k, D] float64
  std::vector<int> permutation;  // cluster id -> class label
  FeatureSource source = FeatureSource::kPrior;
  int iterations = 0;

  bool fitted() const { return centers.defined() && !permutation.empty(); }
};

struct KMeansOptions {
  int k = 10;
  int max_iterations = 300;
  double tolerance = 1e-6;  // max center shift
  std::uint64_t seed = 0;
  int num_classes = 10;
};

/// Lloyd iterations from k-means++ seeds, then cluster->label matching that
/// maximises the number of correctly matched training points.
KMeansClassifier fit_kmeans_classifier(const torch::Tensor& features, const torch::Tensor& labels,
                                       const KMeansOptions& options,
                                       FeatureSource source = FeatureSource::kPrior);

/// Index of the nearest center (lowest index on ties), before permutation.
torch::Tensor nearest_cluster(const torch::Tensor& centers, const torch::Tensor& features);

torch::Tensor predict_kmeans(const KMeansClassifier& clf, const torch::Tensor& features);

/// Softmax-regression head on reduced posterior presences.
struct LinearClassifier {
  torch::Tensor weights;  // [K, C] float64
  torch::Tensor bias;     // [C]

  bool fitted() const { return weights.defined(); }
  torch::Tensor logits(const torch::Tensor& features) const;
};

struct LinearOptions {
  int epochs = 200;
  double learning_rate = 0.5;
  int num_classes = 10;
};

/// Full-batch gradient descent on mean cross-entropy from zero weights;
/// deterministic. Features are standardised internally and the scaling is
/// folded back into the returned weights.
LinearClassifier train_linear(const torch::Tensor& features, const torch::Tensor& labels,
                              const LinearOptions& options = {});

/// argmax of logits; lowest class index on ties.
torch::Tensor predict_linear(const LinearClassifier& clf, const torch::Tensor& features);

/// Mean cross-entropy and its analytic gradient, exposed for the
/// finite-difference test.
double cross_entropy(const LinearClassifier& clf, const torch::Tensor& features,
                     const torch::Tensor& labels);
LinearClassifier cross_entropy_gradient(const LinearClassifier& clf, const torch::Tensor& features,
                                        const torch::Tensor& labels);

/// Row-wise argmax with the lowest index winning ties.
torch::Tensor argmax_lowest(const torch::Tensor& scores);

}  // namespace scae::classify
