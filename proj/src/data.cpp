#include "trajdistill/data.hpp"

#include "trajdistill/rng.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

namespace trajdistill {

std::vector<std::vector<Index>> LabeledDataset::by_class() const {
  std::vector<std::vector<Index>> out(static_cast<std::size_t>(class_count));
  for (Index i = 0; i < size(); ++i) out.at(static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])).push_back(i);
  return out;
}

Tensor LabeledDataset::gather(std::span<const Index> indices) const {
  const Index per = shape_size(sample_shape());
  Shape s = images.shape();
  s[0] = static_cast<Index>(indices.size());
  Tensor out(s);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    out.array().segment(static_cast<Index>(k) * per, per) = images.array().segment(indices[k] * per, per);
  }
  return out;
}

std::vector<int> LabeledDataset::gather_labels(std::span<const Index> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (Index i : indices) out.push_back(labels.at(static_cast<std::size_t>(i)));
  return out;
}

void LabeledDataset::validate() const {
  if (images.rank() < 2 || images.dim(0) != size()) {
    throw std::invalid_argument("dataset: " + std::to_string(size()) + " labels for images " +
                                shape_str(images.shape()));
  }
  if (class_count < 1) throw std::invalid_argument("dataset: no classes");
  std::vector<Index> counts(static_cast<std::size_t>(class_count), 0);
  for (int y : labels) {
    if (y < 0 || y >= class_count) throw std::invalid_argument("dataset: label " + std::to_string(y) + " out of range");
    ++counts[static_cast<std::size_t>(y)];
  }
  for (int c = 0; c < class_count; ++c) {
    if (counts[static_cast<std::size_t>(c)] == 0) {
      throw std::invalid_argument("dataset: class " + std::to_string(c) + " has no samples");
    }
  }
  if (!images.all_finite() || images.array().minCoeff() < 0.0 || images.array().maxCoeff() > 1.0) {
    throw std::invalid_argument("dataset: pixel values outside [0, 1]");
  }
}

void SyntheticDataset::validate() const {
  if (ipc < 1 || class_count < 1 || size() != static_cast<Index>(ipc) * class_count) {
    throw std::invalid_argument("synthetic dataset must hold exactly ipc x classes samples");
  }
  if (images.rank() < 2 || images.dim(0) != size()) throw std::invalid_argument("synthetic dataset: image count mismatch");
  if (!(alpha > 0.0)) throw std::invalid_argument("synthetic dataset: alpha must be positive");
}

SyntheticDataset as_synthetic(const LabeledDataset& data, double alpha) {
  SyntheticDataset s;
  s.images = data.images;
  s.labels = data.labels;
  s.class_count = data.class_count;
  s.alpha = alpha;
  // Not necessarily balanced; ipc records the average for bookkeeping only.
  s.ipc = static_cast<int>(data.size() / std::max(1, data.class_count));
  return s;
}

LabeledDataset gen_blobs(int classes, int per_class, const Shape& sample_shape, double spread, std::uint64_t seed) {
  if (classes < 2 || per_class < 1) throw std::invalid_argument("gen_blobs: need classes >= 2 and per_class >= 1");
  if (sample_shape.size() != 1 && sample_shape.size() != 3) {
    throw ShapeError("gen_blobs: sample shape must be [d] or [channels, h, w], got " + shape_str(sample_shape));
  }
  Rng centers_rng(derive_seed(seed, "blob-centers"));
  Rng noise_rng(derive_seed(seed, "blob-noise"));
  std::normal_distribution<double> normal(0.0, 1.0);

  LabeledDataset ds;
  ds.class_count = classes;
  Shape shape{static_cast<Index>(classes) * per_class};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  ds.images = Tensor(shape);
  ds.labels.reserve(static_cast<std::size_t>(shape[0]));
  const Index per = shape_size(sample_shape);

  if (sample_shape.size() == 1) {
    const Index d = sample_shape[0];
    std::uniform_real_distribution<double> u(0.2, 0.8);
    Eigen::MatrixXd centers(classes, d);
    for (int c = 0; c < classes; ++c)
      for (Index k = 0; k < d; ++k) centers(c, k) = u(centers_rng);
    Index row = 0;
    for (int c = 0; c < classes; ++c)
      for (int i = 0; i < per_class; ++i, ++row) {
        for (Index k = 0; k < d; ++k) {
          ds.images[row * per + k] = std::clamp(centers(c, k) + spread * normal(noise_rng), 0.0, 1.0);
        }
        ds.labels.push_back(c);
      }
  } else {
    const Index ch = sample_shape[0], h = sample_shape[1], w = sample_shape[2];
    const double sigma = static_cast<double>(std::min(h, w)) / 5.0;
    std::uniform_real_distribution<double> uy(0.25 * (h - 1), 0.75 * (h - 1));
    std::uniform_real_distribution<double> ux(0.25 * (w - 1), 0.75 * (w - 1));
    std::uniform_real_distribution<double> amp(0.3, 1.0);
    std::vector<double> cy(classes), cx(classes);
    Eigen::MatrixXd amplitude(classes, ch);
    for (int c = 0; c < classes; ++c) {
      cy[c] = uy(centers_rng);
      cx[c] = ux(centers_rng);
      for (Index k = 0; k < ch; ++k) amplitude(c, k) = amp(centers_rng);
    }
    Index row = 0;
    for (int c = 0; c < classes; ++c)
      for (int i = 0; i < per_class; ++i, ++row) {
        const double py = cy[c] + spread * normal(noise_rng);
        const double px = cx[c] + spread * normal(noise_rng);
        for (Index k = 0; k < ch; ++k)
          for (Index y = 0; y < h; ++y)
            for (Index x = 0; x < w; ++x) {
              const double d2 = (y - py) * (y - py) + (x - px) * (x - px);
              ds.images[row * per + (k * h + y) * w + x] = amplitude(c, k) * std::exp(-d2 / (2.0 * sigma * sigma));
            }
        ds.labels.push_back(c);
      }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// IDX

namespace {

std::vector<unsigned char> read_all(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError(DataErrorCode::io, "cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

}  // namespace

LabeledDataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto img = read_all(images_path);
  const auto lab = read_all(labels_path);
  if (img.size() < 16) throw DataError(DataErrorCode::truncated_header, "truncated header in " + images_path.string());
  if (lab.size() < 8) throw DataError(DataErrorCode::truncated_header, "truncated header in " + labels_path.string());
  if (be32(img, 0) != 0x00000803) throw DataError(DataErrorCode::bad_magic, "bad magic in " + images_path.string());
  if (be32(lab, 0) != 0x00000801) throw DataError(DataErrorCode::bad_magic, "bad magic in " + labels_path.string());
  const std::uint64_t n = be32(img, 4), rows = be32(img, 8), cols = be32(img, 12);
  const std::uint64_t nl = be32(lab, 4);
  if (n != nl) {
    throw DataError(DataErrorCode::count_mismatch, "label/image count mismatch (" + std::to_string(nl) + " labels, " +
                                                       std::to_string(n) + " images)");
  }
  if (img.size() < 16 + n * rows * cols) {
    throw DataError(DataErrorCode::truncated_data, "truncated pixel data in " + images_path.string());
  }
  if (lab.size() < 8 + n) throw DataError(DataErrorCode::truncated_data, "truncated labels in " + labels_path.string());

  LabeledDataset ds;
  ds.images = Tensor(Shape{static_cast<Index>(n), 1, static_cast<Index>(rows), static_cast<Index>(cols)});
  for (std::uint64_t i = 0; i < n * rows * cols; ++i) ds.images[static_cast<Index>(i)] = img[16 + i] / 255.0;
  int max_label = -1;
  for (std::uint64_t i = 0; i < n; ++i) {
    ds.labels.push_back(lab[8 + i]);
    max_label = std::max(max_label, static_cast<int>(lab[8 + i]));
  }
  ds.class_count = max_label + 1;
  return ds;
}

CsvLoad load_csv(const std::filesystem::path& path, const Shape& sample_shape) {
  std::ifstream in(path);
  if (!in) throw DataError(DataErrorCode::io, "cannot open " + path.string());
  std::vector<int> labels;
  std::vector<double> pixels;
  Index width = -1;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    std::string cell;
    Index count = 0;
    bool first = true;
    while (std::getline(ss, cell, ',')) {
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str() || !std::isfinite(v)) {
        throw DataError(DataErrorCode::bad_value, path.string() + ":" + std::to_string(lineno) + ": bad value '" +
                                                      cell + "'");
      }
      if (first) {
        if (v < 0 || v != std::floor(v)) throw DataError(DataErrorCode::bad_value, "non-integer label at line " + std::to_string(lineno));
        labels.push_back(static_cast<int>(v));
        first = false;
      } else {
        pixels.push_back(v);
        ++count;
      }
    }
    if (width < 0) width = count;
    if (count != width || count == 0) {
      throw DataError(DataErrorCode::count_mismatch, path.string() + ":" + std::to_string(lineno) +
                                                         ": row width differs from first row");
    }
  }
  if (labels.empty()) throw DataError(DataErrorCode::truncated_data, "no rows in " + path.string());
  Shape s = sample_shape.empty() ? Shape{width} : sample_shape;
  if (shape_size(s) != width) {
    throw DataError(DataErrorCode::count_mismatch, "csv rows have " + std::to_string(width) +
                                                       " pixels, sample shape " + shape_str(s) + " needs " +
                                                       std::to_string(shape_size(s)));
  }
  CsvLoad out;
  Shape full{static_cast<Index>(labels.size())};
  full.insert(full.end(), s.begin(), s.end());
  Eigen::ArrayXd values = Eigen::Map<const Eigen::ArrayXd>(pixels.data(), static_cast<Index>(pixels.size()));
  if (values.maxCoeff() > 1.0) {
    values /= 255.0;
    out.scaled_from_255 = true;
  }
  out.data.images = Tensor(full, std::move(values));
  out.data.labels = std::move(labels);
  out.data.class_count = *std::max_element(out.data.labels.begin(), out.data.labels.end()) + 1;
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

Transform sample_transform(const AugmentationPolicy& policy, std::uint64_t step_seed) {
  std::vector<Transform::Kind> kinds;
  if (policy.flip) kinds.push_back(Transform::Kind::flip);
  if (policy.shift > 0) kinds.push_back(Transform::Kind::shift);
  if (policy.scale > 0.0) kinds.push_back(Transform::Kind::scale);
  Transform t;
  if (kinds.empty()) return t;
  Rng rng(derive_seed(step_seed, "augment"));
  t.kind = kinds[std::uniform_int_distribution<std::size_t>(0, kinds.size() - 1)(rng)];
  switch (t.kind) {
    case Transform::Kind::flip:
      break;
    case Transform::Kind::shift: {
      std::uniform_int_distribution<int> off(-policy.shift, policy.shift);
      t.dy = off(rng);
      t.dx = off(rng);
      break;
    }
    case Transform::Kind::scale:
      t.factor = std::uniform_real_distribution<double>(1.0 - policy.scale, 1.0 + policy.scale)(rng);
      break;
    case Transform::Kind::identity:
      break;
  }
  return t;
}

std::shared_ptr<const PlaneMap> transform_map(const Transform& t, Index h, Index w) {
  auto m = std::make_shared<PlaneMap>();
  m->in_h = m->out_h = h;
  m->in_w = m->out_w = w;
  auto at = [w](Index y, Index x) { return y * w + x; };
  switch (t.kind) {
    case Transform::Kind::identity:
      for (Index i = 0; i < h * w; ++i) m->entries.push_back({i, i, 1.0});
      break;
    case Transform::Kind::flip:
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) m->entries.push_back({at(y, x), at(y, w - 1 - x), 1.0});
      break;
    case Transform::Kind::shift:
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
          const Index sy = y - t.dy, sx = x - t.dx;
          if (sy >= 0 && sy < h && sx >= 0 && sx < w) m->entries.push_back({at(y, x), at(sy, sx), 1.0});
        }
      break;
    case Transform::Kind::scale: {
      const double cy = 0.5 * static_cast<double>(h - 1), cx = 0.5 * static_cast<double>(w - 1);
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
          const double sy = (static_cast<double>(y) - cy) / t.factor + cy;
          const double sx = (static_cast<double>(x) - cx) / t.factor + cx;
          const Index y0 = static_cast<Index>(std::floor(sy)), x0 = static_cast<Index>(std::floor(sx));
          const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
          for (Index a = 0; a < 2; ++a)
            for (Index b = 0; b < 2; ++b) {
              const Index yy = y0 + a, xx = x0 + b;
              const double wgt = (a ? fy : 1.0 - fy) * (b ? fx : 1.0 - fx);
              if (wgt != 0.0 && yy >= 0 && yy < h && xx >= 0 && xx < w) {
                m->entries.push_back({at(y, x), at(yy, xx), wgt});
              }
            }
        }
      break;
    }
  }
  return m;
}

Var augment(const Var& images, const AugmentationPolicy& policy, std::uint64_t step_seed) {
  if (!policy.enabled() || images.value().rank() < 4) return images;
  const Transform t = sample_transform(policy, step_seed);
  if (t.kind == Transform::Kind::identity) return images;
  const Shape& s = images.shape();
  return plane_map(images, transform_map(t, s[s.size() - 2], s[s.size() - 1]));
}

std::pair<LabeledDataset, LabeledDataset> split_per_class(const LabeledDataset& data, int first) {
  const auto groups = data.by_class();
  std::vector<Index> head, tail;
  for (std::size_t c = 0; c < groups.size(); ++c) {
    if (first < 1 || static_cast<std::size_t>(first) >= groups[c].size()) {
      throw std::invalid_argument("split_per_class: class " + std::to_string(c) + " has " +
                                  std::to_string(groups[c].size()) + " samples, cannot split off " +
                                  std::to_string(first));
    }
    head.insert(head.end(), groups[c].begin(), groups[c].begin() + first);
    tail.insert(tail.end(), groups[c].begin() + first, groups[c].end());
  }
  std::sort(head.begin(), head.end());
  std::sort(tail.begin(), tail.end());
  auto pick = [&](const std::vector<Index>& idx) {
    LabeledDataset out;
    out.images = data.gather(idx);
    out.labels = data.gather_labels(idx);
    out.class_count = data.class_count;
    return out;
  };
  return {pick(head), pick(tail)};
}

std::uint32_t fingerprint(const LabeledDataset& data) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(data.labels.data()),
              static_cast<uInt>(data.labels.size() * sizeof(int)));
  crc = crc32(crc, reinterpret_cast<const Bytef*>(data.images.data()),
              static_cast<uInt>(data.images.size() * sizeof(double)));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace trajdistill
