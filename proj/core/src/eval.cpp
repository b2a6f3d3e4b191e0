#include "scae/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "scae/errors.hpp"
#include "scae/rng.hpp"

namespace scae::eval {

namespace {

std::ofstream open_for_write(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(17);
  return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream s(line);
  std::string cell;
  while (std::getline(s, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

}  // namespace

void EvalConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid EvalConfig: " + what);
  };
  require(n_attack_samples >= 1, "n_attack_samples >= 1");
  require(l2_threshold > 0, "l2_threshold > 0");
  require(curve_points >= 2, "curve_points >= 2");
  require(curve_max_factor > 0, "curve_max_factor > 0");
  require(attack_batch >= 1, "attack_batch >= 1");
}

nlohmann::json EvalConfig::to_json() const {
  return {{"n_attack_samples", n_attack_samples},
          {"l2_threshold", l2_threshold},
          {"classifier", classify::to_string(classifier)},
          {"curve_points", curve_points},
          {"curve_max_factor", curve_max_factor},
          {"sample_seed", sample_seed},
          {"attack_batch", attack_batch}};
}

EvalConfig EvalConfig::from_json(const nlohmann::json& j, EvalConfig base) {
  if (!j.is_object()) throw ConfigError("EvalConfig JSON must be an object");
  const auto known = base.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown EvalConfig key '" + key + "'");
  }
  auto m = known;
  m.update(j);
  try {
    base.n_attack_samples = m.at("n_attack_samples").get<int>();
    base.l2_threshold = m.at("l2_threshold").get<double>();
    base.classifier = classify::parse_feature_source(m.at("classifier").get<std::string>());
    base.curve_points = m.at("curve_points").get<int>();
    base.curve_max_factor = m.at("curve_max_factor").get<double>();
    base.sample_seed = m.at("sample_seed").get<std::uint64_t>();
    base.attack_batch = m.at("attack_batch").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad EvalConfig value: ") + e.what());
  }
  base.validate();
  return base;
}

double EvalConfig::default_threshold(data::DatasetName dataset) {
  return dataset == data::DatasetName::kMnist ? 4.0 : 5.0;
}

Encodings encode_dataset(model::ScaeModel& model, const torch::Tensor& images, int batch_size) {
  torch::NoGradGuard no_grad;
  const bool was_training = model->is_training();
  model->eval();
  std::vector<torch::Tensor> prior, posterior;
  for (std::int64_t i = 0; i < images.size(0); i += batch_size) {
    auto out = model->encode(images.slice(0, i, i + batch_size),
                             {.training = false, .with_reconstruction = false});
    prior.push_back(out.prior_presence);
    posterior.push_back(classify::reduce_posterior(out.posterior_presence));
  }
  model->train(was_training);
  return {torch::cat(prior), torch::cat(posterior)};
}

checkpoint::ClassifierSet fit_classifier_set(model::ScaeModel& model,
                                             const data::Dataset& train_set, std::uint64_t seed,
                                             bool with_linear) {
  const auto enc = encode_dataset(model, train_set.images);
  classify::KMeansOptions km;
  km.seed = seed;
  checkpoint::ClassifierSet set;
  set.prior =
      classify::fit_kmeans_classifier(enc.prior, train_set.labels, km, classify::FeatureSource::kPrior);
  set.posterior = classify::fit_kmeans_classifier(enc.posterior, train_set.labels, km,
                                                  classify::FeatureSource::kPosterior);
  if (with_linear) set.linear = classify::train_linear(enc.posterior, train_set.labels);
  return set;
}

std::unique_ptr<attack::LabelPredictor> make_predictor(const checkpoint::ClassifierSet& set,
                                                       classify::FeatureSource source) {
  const auto& clf = source == classify::FeatureSource::kPrior ? set.prior : set.posterior;
  if (!clf || !clf->fitted()) {
    throw ConfigError("checkpoint has no fitted " + classify::to_string(source) +
                      " k-means classifier");
  }
  return std::make_unique<attack::KMeansPredictor>(*clf);
}

double evaluate_clean(model::ScaeModel& model, const attack::LabelPredictor& classifier,
                      const data::Dataset& dataset, int batch_size) {
  if (dataset.size() == 0) throw ConfigError("evaluate_clean on an empty dataset");
  torch::NoGradGuard no_grad;
  const bool was_training = model->is_training();
  model->eval();
  std::int64_t correct = 0;
  for (std::int64_t i = 0; i < dataset.size(); i += batch_size) {
    auto out = model->encode(dataset.images.slice(0, i, i + batch_size),
                             {.training = false, .with_reconstruction = false});
    auto pred = classifier.predict(out);
    correct += pred.eq(dataset.labels.slice(0, i, i + batch_size)).sum().item<std::int64_t>();
  }
  model->train(was_training);
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

bool correct_at(const AttackRecord& record, double threshold) {
  if (!record.clean_correct()) return false;
  return !(record.success && record.l2_norm <= threshold);
}

double accuracy_at(const std::vector<AttackRecord>& records, double threshold) {
  if (records.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& r : records) correct += correct_at(r, threshold) ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

double clean_accuracy(const std::vector<AttackRecord>& records) {
  if (records.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& r : records) correct += r.clean_correct() ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

std::vector<std::int64_t> sample_indices(std::int64_t dataset_size, int n, std::uint64_t seed) {
  if (n > dataset_size) {
    throw ConfigError("cannot draw " + std::to_string(n) + " attack samples from " +
                      std::to_string(dataset_size) + " test images");
  }
  auto order = data::epoch_order(dataset_size, true, seed);
  order.resize(static_cast<std::size_t>(n));
  return order;
}

AdversarialEvaluation evaluate_adversarial(model::ScaeModel& model,
                                           const attack::LabelPredictor& classifier,
                                           const data::Dataset& test_set,
                                           const attack::AttackConfig& attack_config,
                                           const EvalConfig& eval_config, bool verbose) {
  eval_config.validate();
  const auto indices =
      sample_indices(test_set.size(), eval_config.n_attack_samples, eval_config.sample_seed);
  AdversarialEvaluation result;
  for (std::size_t start = 0; start < indices.size();
       start += static_cast<std::size_t>(eval_config.attack_batch)) {
    const auto end =
        std::min(indices.size(), start + static_cast<std::size_t>(eval_config.attack_batch));
    const std::vector<std::int64_t> chunk(indices.begin() + static_cast<std::ptrdiff_t>(start),
                                          indices.begin() + static_cast<std::ptrdiff_t>(end));
    auto batch = test_set.gather(chunk);
    std::vector<std::uint64_t> seeds;
    for (auto id : chunk) {
      seeds.push_back(derive_seed(eval_config.sample_seed, static_cast<std::uint64_t>(id)));
    }
    auto results = attack::run_attack_batch(batch.images, model, classifier, attack_config, seeds);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const auto& r = results[i];
      AttackRecord rec;
      rec.sample_id = chunk[i];
      rec.clean_label = static_cast<int>(batch.labels[static_cast<std::int64_t>(i)].item<std::int64_t>());
      rec.predicted_label = r.clean_label;
      rec.success = r.success;
      rec.l2_norm = r.success ? r.l2_norm : 0.0;
      rec.adversarial_label = r.adversarial_label;
      rec.status = attack::to_string(r.status);
      if (verbose && r.status == attack::AttackStatus::kNoActiveCapsule) {
        std::cerr << "sample " << rec.sample_id << ": no active capsule, kept clean outcome\n";
      }
      result.records.push_back(rec);
    }
    if (verbose) {
      std::cerr << "attacked " << end << "/" << indices.size() << " samples, adv acc so far "
                << accuracy_at(result.records, eval_config.l2_threshold) << std::endl;
    }
  }
  result.accuracy = accuracy_at(result.records, eval_config.l2_threshold);
  result.clean_accuracy = clean_accuracy(result.records);
  return result;
}

void write_records_csv(const std::filesystem::path& path,
                       const std::vector<AttackRecord>& records) {
  auto out = open_for_write(path);
  out << "sample_id,clean_label,predicted_label,success,l2_norm,adversarial_label,status\n";
  for (const auto& r : records) {
    out << r.sample_id << ',' << r.clean_label << ',' << r.predicted_label << ','
        << (r.success ? 1 : 0) << ',' << r.l2_norm << ',' << r.adversarial_label << ','
        << r.status << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::vector<AttackRecord> read_records_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open attack records: " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("sample_id,clean_label,predicted_label,success,l2_norm", 0) != 0) {
    throw IngestionError("unexpected attack-record header in " + path.string());
  }
  std::vector<AttackRecord> records;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() < 5) {
      throw IngestionError(path.string() + ":" + std::to_string(row) + ": expected >= 5 columns");
    }
    try {
      AttackRecord r;
      r.sample_id = std::stoll(cells[0]);
      r.clean_label = std::stoi(cells[1]);
      r.predicted_label = std::stoi(cells[2]);
      r.success = std::stoi(cells[3]) != 0;
      r.l2_norm = std::stod(cells[4]);
      r.adversarial_label = cells.size() > 5 ? std::stoi(cells[5]) : r.predicted_label;
      r.status = cells.size() > 6 ? cells[6] : (r.success ? "succeeded" : "failed");
      records.push_back(r);
    } catch (const std::logic_error&) {
      throw IngestionError(path.string() + ":" + std::to_string(row) + ": malformed number");
    }
  }
  return records;
}

bool RobustnessCurve::monotone_non_increasing() const {
  for (std::size_t i = 1; i < points.size(); ++i) {
    if (points[i].accuracy > points[i - 1].accuracy) return false;
  }
  return true;
}

std::vector<double> threshold_grid(double max_threshold, int points) {
  if (points < 2 || !(max_threshold > 0)) {
    throw ConfigError("threshold grid needs >= 2 points and a positive maximum");
  }
  std::vector<double> grid;
  for (int i = 0; i < points; ++i) grid.push_back(max_threshold * i / (points - 1));
  return grid;
}

RobustnessCurve robustness_curve(const std::vector<AttackRecord>& records,
                                 const std::vector<double>& thresholds, std::string model_id,
                                 std::string classifier_id) {
  RobustnessCurve curve{{}, std::move(model_id), std::move(classifier_id)};
  auto sorted = thresholds;
  std::sort(sorted.begin(), sorted.end());
  for (double t : sorted) curve.points.push_back({t, accuracy_at(records, t)});
  return curve;
}

void write_report_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows) {
  auto out = open_for_write(path);
  out << "classifier,regime,dataset,clean_acc,adv_acc\n";
  for (const auto& r : rows) {
    out << r.classifier << ',' << r.regime << ',' << r.dataset << ',' << r.clean_acc << ','
        << r.adv_acc << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

void write_curve_csv(const std::filesystem::path& path, const RobustnessCurve& curve) {
  auto out = open_for_write(path);
  out << "threshold,accuracy\n";
  for (const auto& p : curve.points) out << p.threshold << ',' << p.accuracy << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::vector<CurvePoint> read_curve_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open curve: " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<CurvePoint> points;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != 2) throw IngestionError("malformed curve row in " + path.string());
    points.push_back({std::stod(cells[0]), std::stod(cells[1])});
  }
  return points;
}

void write_curve_svg(const std::filesystem::path& path,
                     const std::vector<RobustnessCurve>& curves, const std::string& title) {
  constexpr double W = 640, H = 420, left = 60, right = 160, top = 40, bottom = 50;
  const double pw = W - left - right, ph = H - top - bottom;
  double xmax = 0;
  for (const auto& c : curves) {
    for (const auto& p : c.points) xmax = std::max(xmax, p.threshold);
  }
  if (xmax <= 0) xmax = 1;
  auto sx = [&](double x) { return left + pw * x / xmax; };
  auto sy = [&](double y) { return top + ph * (1.0 - y); };

  auto out = open_for_write(path);
  out << std::setprecision(6);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!title.empty()) {
    out << "<text x=\"" << left + pw / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
        << title << "</text>\n";
  }
  for (int i = 0; i <= 5; ++i) {
    const double y = i / 5.0, x = xmax * i / 5.0;
    out << "<line x1=\"" << left << "\" x2=\"" << left + pw << "\" y1=\"" << sy(y) << "\" y2=\""
        << sy(y) << "\" stroke=\"#ddd\"/>\n";
    out << "<text x=\"" << left - 6 << "\" y=\"" << sy(y) + 4 << "\" text-anchor=\"end\">"
        << static_cast<int>(std::lround(y * 100)) << "%</text>\n";
    out << "<text x=\"" << sx(x) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">"
        << x << "</text>\n";
  }
  out << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"black\"/>\n";
  out << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 12
      << "\" text-anchor=\"middle\">L2 threshold</text>\n";
  out << "<text transform=\"translate(16," << top + ph / 2
      << ") rotate(-90)\" text-anchor=\"middle\">accuracy</text>\n";
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const char* colour = kPalette[i % std::size(kPalette)];
    out << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
    for (const auto& p : curves[i].points) out << sx(p.threshold) << ',' << sy(p.accuracy) << ' ';
    out << "\"/>\n";
    std::string label = curves[i].model_id;
    if (!curves[i].classifier_id.empty()) {
      label += (label.empty() ? "" : " / ") + curves[i].classifier_id;
    }
    const double ly = top + 16 + 18.0 * static_cast<double>(i);
    out << "<line x1=\"" << left + pw + 12 << "\" x2=\"" << left + pw + 32 << "\" y1=\"" << ly
        << "\" y2=\"" << ly << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << left + pw + 38 << "\" y=\"" << ly + 4 << "\">" << label << "</text>\n";
  }
  out << "</svg>\n";
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

void emit_report(const std::filesystem::path& dir, const std::vector<ReportRow>& rows,
                 const std::vector<CurveArtifact>& curves) {
  std::filesystem::create_directories(dir);
  write_report_csv(dir / "report.csv", rows);
  for (const auto& c : curves) {
    write_curve_csv(dir / (c.stem + ".csv"), c.curve);
    write_curve_svg(dir / (c.stem + ".svg"), {c.curve}, c.stem);
  }
}

}  // namespace scae::eval
