#include "scae/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "scae/errors.hpp"

namespace scae::checkpoint {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written in native little-endian order");

namespace {

constexpr char kMagic[8] = {'S', 'C', 'A', 'E', 'C', 'K', 'P', 'T'};

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex;
  s.width(16);
  s.fill('0');
  s << v;
  return s.str();
}

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "float32";
    case torch::kFloat64: return "float64";
    case torch::kInt64: return "int64";
    default: throw CheckpointError("unsupported tensor dtype in checkpoint");
  }
}

torch::ScalarType parse_dtype(const std::string& name) {
  if (name == "float32") return torch::kFloat32;
  if (name == "float64") return torch::kFloat64;
  if (name == "int64") return torch::kInt64;
  throw CheckpointError("unknown tensor dtype '" + name + "' in checkpoint");
}

class PayloadWriter {
 public:
  nlohmann::json add(const std::string& name, const torch::Tensor& t) {
    auto c = t.detach().cpu().contiguous();
    const auto bytes = static_cast<std::size_t>(c.numel()) * c.element_size();
    nlohmann::json entry = {{"name", name},
                            {"dtype", dtype_name(c.scalar_type())},
                            {"shape", c.sizes().vec()},
                            {"offset", buffer_.size()},
                            {"nbytes", bytes}};
    const auto* p = static_cast<const char*>(c.data_ptr());
    buffer_.insert(buffer_.end(), p, p + bytes);
    return entry;
  }
  const std::string& buffer() const { return buffer_; }

 private:
  std::string buffer_;
};

nlohmann::json kmeans_entry(PayloadWriter& w, const std::string& name,
                            const classify::KMeansClassifier& clf) {
  return {{"centers", w.add(name + ".centers", clf.centers)},
          {"permutation", clf.permutation},
          {"source", classify::to_string(clf.source)},
          {"iterations", clf.iterations}};
}

torch::Tensor read_tensor(const nlohmann::json& entry, const std::string& payload) {
  const auto offset = entry.at("offset").get<std::size_t>();
  const auto nbytes = entry.at("nbytes").get<std::size_t>();
  if (offset > payload.size() || nbytes > payload.size() - offset) {
    throw CheckpointError("tensor '" + entry.at("name").get<std::string>() +
                          "' lies outside the payload");
  }
  const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
  auto t = torch::empty(shape, torch::TensorOptions().dtype(parse_dtype(entry.at("dtype"))));
  if (static_cast<std::size_t>(t.numel()) * t.element_size() != nbytes) {
    throw CheckpointError("tensor '" + entry.at("name").get<std::string>() +
                          "' size does not match its shape");
  }
  std::memcpy(t.data_ptr(), payload.data() + offset, nbytes);
  return t;
}

classify::KMeansClassifier read_kmeans(const nlohmann::json& j, const std::string& payload) {
  classify::KMeansClassifier clf;
  clf.centers = read_tensor(j.at("centers"), payload);
  clf.permutation = j.at("permutation").get<std::vector<int>>();
  clf.source = classify::parse_feature_source(j.at("source").get<std::string>());
  clf.iterations = j.at("iterations").get<int>();
  return clf;
}

}  // namespace

std::string config_hash(const model::ScaeConfig& config) {
  const auto dump = config.to_json().dump();
  return hex64(fnv1a(dump.data(), dump.size()));
}

void save_checkpoint(const std::filesystem::path& path, const model::ScaeModel& model,
                     const ClassifierSet& classifiers, const Metadata& metadata) {
  PayloadWriter payload;
  nlohmann::json params = nlohmann::json::array();
  for (const auto& item : model->named_parameters()) {
    params.push_back(payload.add(item.key(), item.value()));
  }
  nlohmann::json clfs = nlohmann::json::object();
  if (classifiers.prior) clfs["prior"] = kmeans_entry(payload, "prior", *classifiers.prior);
  if (classifiers.posterior) {
    clfs["posterior"] = kmeans_entry(payload, "posterior", *classifiers.posterior);
  }
  if (classifiers.linear) {
    clfs["linear"] = {{"weights", payload.add("linear.weights", classifiers.linear->weights)},
                      {"bias", payload.add("linear.bias", classifiers.linear->bias)}};
  }

  const auto& buf = payload.buffer();
  const nlohmann::json header = {
      {"format_version", kFormatVersion},
      {"config", model->config().to_json()},
      {"config_hash", config_hash(model->config())},
      {"regime", metadata.regime},
      {"dataset", metadata.dataset},
      {"seed", metadata.seed},
      {"epoch", metadata.epoch},
      {"extra", metadata.extra},
      {"parameters", params},
      {"classifiers", clfs},
      {"payload_bytes", buf.size()},
      {"payload_fnv1a", hex64(fnv1a(buf.data(), buf.size()))}};
  const std::string text = header.dump(2) + "\n";

  // Write to a sibling temp file and rename so readers never see a partial
  // checkpoint.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint: " + path.string());
    const std::uint32_t version = kFormatVersion;
    const std::uint64_t header_len = text.size();
    out.write(kMagic, sizeof kMagic);
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&header_len), sizeof header_len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CheckpointError("failed writing checkpoint: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  constexpr std::size_t kPrefix = sizeof kMagic + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (bytes.size() < kPrefix || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError("not a .scae checkpoint: " + path.string());
  }
  std::uint32_t version = 0;
  std::uint64_t header_len = 0;
  std::memcpy(&version, bytes.data() + sizeof kMagic, sizeof version);
  std::memcpy(&header_len, bytes.data() + sizeof kMagic + sizeof version, sizeof header_len);
  if (version != kFormatVersion) {
    throw CheckpointError("incompatible checkpoint format version " + std::to_string(version) +
                          " (this build reads version " + std::to_string(kFormatVersion) +
                          "): " + path.string());
  }
  if (header_len > bytes.size() - kPrefix) {
    throw CheckpointError("truncated checkpoint header: " + path.string());
  }

  Checkpoint ck;
  try {
    const auto header = nlohmann::json::parse(bytes.substr(kPrefix, header_len));
    if (header.at("format_version").get<int>() != kFormatVersion) {
      throw CheckpointError("checkpoint header version mismatch: " + path.string());
    }
    const std::string payload = bytes.substr(kPrefix + header_len);
    if (payload.size() != header.at("payload_bytes").get<std::size_t>()) {
      throw CheckpointError("truncated checkpoint payload: " + path.string());
    }
    if (hex64(fnv1a(payload.data(), payload.size())) != header.at("payload_fnv1a")) {
      throw CheckpointError("checkpoint payload checksum mismatch: " + path.string());
    }

    auto config = model::ScaeConfig::from_json(header.at("config"));
    model::ScaeModel model(config);
    auto named = model->named_parameters();
    std::size_t seen = 0;
    torch::NoGradGuard no_grad;
    for (const auto& entry : header.at("parameters")) {
      const auto name = entry.at("name").get<std::string>();
      auto* dst = named.find(name);
      if (dst == nullptr) throw CheckpointError("unexpected parameter '" + name + "'");
      auto src = read_tensor(entry, payload);
      if (src.sizes() != dst->sizes()) {
        throw CheckpointError("parameter '" + name + "' has the wrong shape");
      }
      if (src.scalar_type() != dst->scalar_type()) model->to(src.scalar_type());
      named[name].copy_(src);
      ++seen;
    }
    if (seen != named.size()) throw CheckpointError("checkpoint is missing model parameters");

    const auto& clfs = header.at("classifiers");
    if (clfs.contains("prior")) ck.classifiers.prior = read_kmeans(clfs["prior"], payload);
    if (clfs.contains("posterior")) {
      ck.classifiers.posterior = read_kmeans(clfs["posterior"], payload);
    }
    if (clfs.contains("linear")) {
      ck.classifiers.linear = classify::LinearClassifier{
          read_tensor(clfs["linear"].at("weights"), payload),
          read_tensor(clfs["linear"].at("bias"), payload)};
    }
    ck.metadata.regime = header.at("regime").get<std::string>();
    ck.metadata.dataset = header.at("dataset").get<std::string>();
    ck.metadata.seed = header.at("seed").get<std::uint64_t>();
    ck.metadata.epoch = header.at("epoch").get<int>();
    ck.metadata.extra = header.at("extra");
    ck.config_hash = header.at("config_hash").get<std::string>();
    model->eval();
    ck.model = model;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError("checkpoint " + path.string() + " holds an invalid config: " + e.what());
  }
  return ck;
}

}  // namespace scae::checkpoint
