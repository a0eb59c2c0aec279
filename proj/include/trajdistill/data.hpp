#pragma once

#include "trajdistill/autodiff.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace trajdistill {

/// Real data: images [n, sample_shape...] with values in [0, 1].
struct LabeledDataset {
  Tensor images;
  std::vector<int> labels;
  int class_count = 0;

  Index size() const { return static_cast<Index>(labels.size()); }
  Shape sample_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }
  /// Sample indices grouped by class.
  std::vector<std::vector<Index>> by_class() const;
  /// Gathers the given samples into a new batch tensor.
  Tensor gather(std::span<const Index> indices) const;
  std::vector<int> gather_labels(std::span<const Index> indices) const;
  /// Throws std::invalid_argument when an invariant is violated.
  void validate() const;
};

/// Learnable distilled set: ipc images per class, fixed labels, and a
/// trainable learning rate alpha.
struct SyntheticDataset {
  Tensor images;
  std::vector<int> labels;
  int class_count = 0;
  int ipc = 0;
  double alpha = 0.01;

  Index size() const { return static_cast<Index>(labels.size()); }
  Shape sample_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }
  void validate() const;
};

/// Uses a real dataset verbatim as a "synthetic" one (for full-data runs).
SyntheticDataset as_synthetic(const LabeledDataset& data, double alpha);

/// Gaussian class clusters. A rank-1 `sample_shape` yields raw feature
/// vectors; a [channels, h, w] shape renders each sample as a smooth bump
/// whose position is the sampled point. Deterministic in `seed`.
LabeledDataset gen_blobs(int classes, int per_class, const Shape& sample_shape, double spread, std::uint64_t seed);

/// Splits off the first `first` samples of every class (in dataset order)
/// from the rest.
std::pair<LabeledDataset, LabeledDataset> split_per_class(const LabeledDataset& data, int first);

enum class DataErrorCode { io, bad_magic, truncated_header, truncated_data, count_mismatch, bad_value };

class DataError : public std::runtime_error {
 public:
  DataError(DataErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  DataErrorCode code() const { return code_; }

 private:
  DataErrorCode code_;
};

/// MNIST-style IDX pair (ubyte images 0x00000803, labels 0x00000801).
/// Pixels are scaled to [0, 1]; images come out as [n, 1, rows, cols].
LabeledDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

struct CsvLoad {
  LabeledDataset data;
  bool scaled_from_255 = false;
};

/// Rows of `label, pixel...`. If any pixel exceeds 1 all pixels are divided
/// by 255. `sample_shape` defaults to a flat vector.
CsvLoad load_csv(const std::filesystem::path& path, const Shape& sample_shape = {});

/// Differentiable siamese augmentation restricted to flip, integer shift and
/// bilinear scale. Each call samples one transform and applies it with the
/// same parameters to every sample in the batch.
struct AugmentationPolicy {
  bool flip = false;
  int shift = 0;       // max offset in pixels; 0 disables
  double scale = 0.0;  // max relative zoom, e.g. 0.2 for +-20%; 0 disables

  bool enabled() const { return flip || shift > 0 || scale > 0.0; }
  bool operator==(const AugmentationPolicy&) const = default;
};

struct Transform {
  enum class Kind { identity, flip, shift, scale } kind = Kind::identity;
  int dy = 0, dx = 0;
  double factor = 1.0;
};

Transform sample_transform(const AugmentationPolicy& policy, std::uint64_t step_seed);
std::shared_ptr<const PlaneMap> transform_map(const Transform& t, Index h, Index w);

/// Identity for non-image (rank < 3 per sample) batches or disabled policies.
Var augment(const Var& images, const AugmentationPolicy& policy, std::uint64_t step_seed);

/// CRC32 over labels and pixel bytes; used to tie trajectories to their data.
std::uint32_t fingerprint(const LabeledDataset& data);

}  // namespace trajdistill
