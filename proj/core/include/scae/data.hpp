#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace scae::data {

enum class DatasetName { kMnist, kFashionMnist };
enum class Split { kTrain, kTest };
enum class Placement { kCenter, kRandomShift };

DatasetName parse_dataset_name(std::string_view name);
std::string to_string(DatasetName name);

/// A single sample placed on the square canvas; pixels are float32 in [0,1].
struct CanvasImage {
  torch::Tensor pixels;  // [canvas, canvas]
  int label = 0;
};

struct Batch {
  torch::Tensor images;  // [B, H, W] float32
  torch::Tensor labels;  // [B] int64
  std::vector<std::int64_t> indices;
};

/// Immutable in-memory dataset of canvas images.
struct Dataset {
  torch::Tensor images;  // [N, H, W] float32
  torch::Tensor labels;  // [N] int64

  std::int64_t size() const { return images.defined() ? images.size(0) : 0; }
  int canvas_size() const { return static_cast<int>(images.size(1)); }
  CanvasImage at(std::int64_t i) const;
  Batch gather(const std::vector<std::int64_t>& indices) const;
  /// First `n` samples (or all when n exceeds the size).
  Dataset head(std::int64_t n) const;
};

struct LoadOptions {
  std::filesystem::path root;  // empty: data_root()
  int canvas_size = 40;
  Placement placement = Placement::kCenter;
  std::uint64_t seed = 0;      // random_shift offsets
  std::optional<std::int64_t> limit;
};

/// $SCAE_DATA_DIR when set, otherwise ./data.
std::filesystem::path data_root();

/// Raw IDX array: big-endian header, uint8 payload.
struct IdxArray {
  std::vector<std::int64_t> dims;
  std::vector<std::uint8_t> values;
};
IdxArray read_idx(const std::filesystem::path& path);

/// Loads a split, normalises to [0,1] and places every image on the canvas.
Dataset load_dataset(DatasetName name, Split split, const LoadOptions& options = {});

/// Copies a [h,w] source into a zero canvas: offset ((c-h)/2, (c-w)/2) for
/// kCenter, uniform in [0, c-h] x [0, c-w] for kRandomShift (needs rng).
torch::Tensor place_on_canvas(const torch::Tensor& src, int canvas_size, Placement mode,
                              std::mt19937_64* rng = nullptr);

/// Offset chosen by place_on_canvas for the given geometry; exposed for tests.
std::pair<int, int> canvas_offset(int src_h, int src_w, int canvas_size, Placement mode,
                                  std::mt19937_64* rng);

/// One epoch of batches. The final partial batch is kept.
class BatchStream {
 public:
  BatchStream(const Dataset& dataset, int batch_size, bool shuffle, std::uint64_t seed);

  std::optional<Batch> next();
  const std::vector<std::int64_t>& order() const { return order_; }
  std::int64_t num_batches() const;

 private:
  const Dataset* dataset_;
  int batch_size_;
  std::vector<std::int64_t> order_;
  std::size_t cursor_ = 0;
};

/// Epoch visiting order; identity when shuffle is false, otherwise a
/// Fisher-Yates permutation driven by `seed`.
std::vector<std::int64_t> epoch_order(std::int64_t n, bool shuffle, std::uint64_t seed);

}  // namespace scae::data
