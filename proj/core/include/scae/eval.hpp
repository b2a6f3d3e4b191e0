#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "scae/attack.hpp"
#include "scae/checkpoint.hpp"
#include "scae/classifiers.hpp"
#include "scae/data.hpp"
#include "scae/model.hpp"

namespace scae::eval {

struct EvalConfig {
  int n_attack_samples = 5000;
  double l2_threshold = 4.0;  // 4 for MNIST, 5 for Fashion-MNIST
  classify::FeatureSource classifier = classify::FeatureSource::kPosterior;
  int curve_points = 50;
  double curve_max_factor = 1.5;  // grid spans [0, factor * threshold]
  std::uint64_t sample_seed = 0;
  int attack_batch = 100;

  void validate() const;
  nlohmann::json to_json() const;
  static EvalConfig from_json(const nlohmann::json& j, EvalConfig base);
  static double default_threshold(data::DatasetName dataset);
};

/// Prior presences and M-summed posterior presences, [N, K] each.
struct Encodings {
  torch::Tensor prior;
  torch::Tensor posterior;
};
Encodings encode_dataset(model::ScaeModel& model, const torch::Tensor& images,
                         int batch_size = 500);

/// Fits both k-means classifiers on training-split encodings and the linear
/// head on the reduced posteriors.
checkpoint::ClassifierSet fit_classifier_set(model::ScaeModel& model,
                                             const data::Dataset& train_set, std::uint64_t seed,
                                             bool with_linear = true);

std::unique_ptr<attack::LabelPredictor> make_predictor(const checkpoint::ClassifierSet& set,
                                                       classify::FeatureSource source);

/// Fraction of `dataset` labelled correctly.
double evaluate_clean(model::ScaeModel& model, const attack::LabelPredictor& classifier,
                      const data::Dataset& dataset, int batch_size = 500);

/// One attacked sample. `clean_label` is the ground truth, `predicted_label`
/// the classifier output on the clean image.
struct AttackRecord {
  std::int64_t sample_id = 0;
  int clean_label = 0;
  int predicted_label = 0;
  bool success = false;
  double l2_norm = 0.0;
  int adversarial_label = 0;
  std::string status = "failed";

  bool clean_correct() const { return predicted_label == clean_label; }
};

/// Correct iff the clean prediction was right and no successful attack with
/// norm <= threshold exists for the sample.
bool correct_at(const AttackRecord& record, double threshold);
double accuracy_at(const std::vector<AttackRecord>& records, double threshold);
double clean_accuracy(const std::vector<AttackRecord>& records);

/// Deterministic draw of `n` distinct test indices.
std::vector<std::int64_t> sample_indices(std::int64_t dataset_size, int n, std::uint64_t seed);

struct AdversarialEvaluation {
  double accuracy = 0.0;        // at the configured threshold
  double clean_accuracy = 0.0;  // on the same sampled images
  std::vector<AttackRecord> records;
};

AdversarialEvaluation evaluate_adversarial(model::ScaeModel& model,
                                           const attack::LabelPredictor& classifier,
                                           const data::Dataset& test_set,
                                           const attack::AttackConfig& attack_config,
                                           const EvalConfig& eval_config, bool verbose = false);

void write_records_csv(const std::filesystem::path& path,
                       const std::vector<AttackRecord>& records);
std::vector<AttackRecord> read_records_csv(const std::filesystem::path& path);

struct CurvePoint {
  double threshold = 0.0;
  double accuracy = 0.0;
};

struct RobustnessCurve {
  std::vector<CurvePoint> points;
  std::string model_id;
  std::string classifier_id;

  bool monotone_non_increasing() const;
};

/// `points` evenly spaced thresholds from 0 to max_threshold inclusive.
std::vector<double> threshold_grid(double max_threshold, int points);

RobustnessCurve robustness_curve(const std::vector<AttackRecord>& records,
                                 const std::vector<double>& thresholds,
                                 std::string model_id = "", std::string classifier_id = "");

struct ReportRow {
  std::string classifier;
  std::string regime;
  std::string dataset;
  double clean_acc = 0.0;
  double adv_acc = 0.0;
};

void write_report_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows);
void write_curve_csv(const std::filesystem::path& path, const RobustnessCurve& curve);
std::vector<CurvePoint> read_curve_csv(const std::filesystem::path& path);

/// Static line plot of one or more curves (accuracy vs L2 threshold).
void write_curve_svg(const std::filesystem::path& path,
                     const std::vector<RobustnessCurve>& curves, const std::string& title = "");

/// Writes the table plus one curve CSV and one SVG per curve into `dir`.
struct CurveArtifact {
  RobustnessCurve curve;
  std::string stem;  // file name stem, e.g. "hat_posterior_mnist"
};
void emit_report(const std::filesystem::path& dir, const std::vector<ReportRow>& rows,
                 const std::vector<CurveArtifact>& curves);

}  // namespace scae::eval
