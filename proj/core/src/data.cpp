#include "scae/data.hpp"

#include <cstdlib>
#include <fstream>

#include "scae/errors.hpp"
#include "scae/rng.hpp"

namespace scae::data {

namespace {

std::uint32_t read_be32(std::istream& in, const std::filesystem::path& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) {
    throw IngestionError("truncated IDX header: " + path.string());
  }
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) |
         std::uint32_t{b[3]};
}

std::string split_prefix(Split split) { return split == Split::kTrain ? "train" : "t10k"; }

}  // namespace

DatasetName parse_dataset_name(std::string_view name) {
  if (name == "mnist") return DatasetName::kMnist;
  if (name == "fashion_mnist" || name == "fashion-mnist") return DatasetName::kFashionMnist;
  throw ConfigError("unknown dataset '" + std::string(name) + "' (expected mnist or fashion_mnist)");
}

std::string to_string(DatasetName name) {
  return name == DatasetName::kMnist ? "mnist" : "fashion_mnist";
}

CanvasImage Dataset::at(std::int64_t i) const {
  return {images[i], static_cast<int>(labels[i].item<std::int64_t>())};
}

Batch Dataset::gather(const std::vector<std::int64_t>& indices) const {
  auto idx = torch::tensor(indices, torch::kInt64);
  return {images.index_select(0, idx), labels.index_select(0, idx), indices};
}

Dataset Dataset::head(std::int64_t n) const {
  n = std::min(n, size());
  return {images.slice(0, 0, n).clone(), labels.slice(0, 0, n).clone()};
}

std::filesystem::path data_root() {
  if (const char* env = std::getenv("SCAE_DATA_DIR"); env != nullptr && *env != '\0') {
    return env;
  }
  return "data";
}

IdxArray read_idx(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open dataset file: " + path.string());
  const std::uint32_t magic = read_be32(in, path);
  if ((magic >> 8) != 0x08 || (magic & 0xff) == 0 || (magic & 0xff) > 4) {
    throw IngestionError("not a uint8 IDX file: " + path.string());
  }
  IdxArray out;
  std::int64_t total = 1;
  for (std::uint32_t d = 0; d < (magic & 0xff); ++d) {
    out.dims.push_back(read_be32(in, path));
    total *= out.dims.back();
  }
  out.values.resize(static_cast<std::size_t>(total));
  if (!in.read(reinterpret_cast<char*>(out.values.data()), total)) {
    throw IngestionError("truncated IDX payload: " + path.string());
  }
  return out;
}

std::pair<int, int> canvas_offset(int src_h, int src_w, int canvas_size, Placement mode,
                                  std::mt19937_64* rng) {
  if (src_h > canvas_size || src_w > canvas_size) {
    throw ConfigError("source image " + std::to_string(src_h) + "x" + std::to_string(src_w) +
                      " does not fit on a " + std::to_string(canvas_size) + " canvas");
  }
  const int slack_h = canvas_size - src_h;
  const int slack_w = canvas_size - src_w;
  if (mode == Placement::kCenter) return {slack_h / 2, slack_w / 2};
  if (rng == nullptr) throw ConfigError("random_shift placement needs an rng");
  const int dy = static_cast<int>(uniform_index(*rng, slack_h + 1));
  const int dx = static_cast<int>(uniform_index(*rng, slack_w + 1));
  return {dy, dx};
}

torch::Tensor place_on_canvas(const torch::Tensor& src, int canvas_size, Placement mode,
                              std::mt19937_64* rng) {
  TORCH_CHECK(src.dim() == 2, "place_on_canvas expects a 2-D source");
  const auto [dy, dx] =
      canvas_offset(static_cast<int>(src.size(0)), static_cast<int>(src.size(1)), canvas_size,
                    mode, rng);
  auto canvas = torch::zeros({canvas_size, canvas_size}, src.options());
  canvas.slice(0, dy, dy + src.size(0)).slice(1, dx, dx + src.size(1)).copy_(src);
  return canvas;
}

Dataset load_dataset(DatasetName name, Split split, const LoadOptions& options) {
  const auto root = (options.root.empty() ? data_root() : options.root) / to_string(name);
  const auto prefix = split_prefix(split);
  const auto images = read_idx(root / (prefix + "-images-idx3-ubyte"));
  const auto labels = read_idx(root / (prefix + "-labels-idx1-ubyte"));
  if (images.dims.size() != 3 || labels.dims.size() != 1 || images.dims[0] != labels.dims[0]) {
    throw IngestionError("image/label files disagree in shape under " + root.string());
  }
  std::int64_t n = images.dims[0];
  if (options.limit) n = std::min(n, *options.limit);
  const int h = static_cast<int>(images.dims[1]);
  const int w = static_cast<int>(images.dims[2]);

  std::mt19937_64 rng(options.seed);
  Dataset out{torch::zeros({n, options.canvas_size, options.canvas_size}),
              torch::empty({n}, torch::kInt64)};
  auto label_acc = out.labels.accessor<std::int64_t, 1>();
  for (std::int64_t i = 0; i < n; ++i) {
    auto src = torch::from_blob(const_cast<std::uint8_t*>(images.values.data()) + i * h * w,
                                {h, w}, torch::kUInt8)
                   .to(torch::kFloat32)
                   .div_(255.0f);
    out.images[i].copy_(place_on_canvas(src, options.canvas_size, options.placement, &rng));
    const auto y = labels.values[static_cast<std::size_t>(i)];
    if (y > 9) throw IngestionError("label out of range in " + root.string());
    label_acc[i] = y;
  }
  return out;
}

std::vector<std::int64_t> epoch_order(std::int64_t n, bool shuffle, std::uint64_t seed) {
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  if (shuffle && n > 1) {
    std::mt19937_64 rng(seed);
    for (std::int64_t i = n - 1; i > 0; --i) {
      const auto j = static_cast<std::int64_t>(uniform_index(rng, static_cast<std::uint64_t>(i + 1)));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
  }
  return order;
}

BatchStream::BatchStream(const Dataset& dataset, int batch_size, bool shuffle, std::uint64_t seed)
    : dataset_(&dataset), batch_size_(batch_size) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  order_ = epoch_order(dataset.size(), shuffle, seed);
}

std::int64_t BatchStream::num_batches() const {
  return (static_cast<std::int64_t>(order_.size()) + batch_size_ - 1) / batch_size_;
}

std::optional<Batch> BatchStream::next() {
  if (cursor_ >= order_.size()) return std::nullopt;
  const std::size_t end = std::min(order_.size(), cursor_ + static_cast<std::size_t>(batch_size_));
  std::vector<std::int64_t> idx(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                order_.begin() + static_cast<std::ptrdiff_t>(end));
  cursor_ = end;
  return dataset_->gather(idx);
}

}  // namespace scae::data
