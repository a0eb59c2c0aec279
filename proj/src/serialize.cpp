#include "trajdistill/serialize.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>

namespace trajdistill {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, b_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, raw, sizeof(T));
    return v;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw FormatError(FormatErrorCode::truncated, "checkpoint truncated");
  }

  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ParamLayout& layout, const Eigen::VectorXd& values) {
  if (values.size() != layout.total) throw FormatError(FormatErrorCode::layout_mismatch, "payload does not match layout");
  std::vector<std::uint8_t> out{'T', 'D', 'C', 'K'};
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(layout.records.size()));
  for (const auto& r : layout.records) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    out.insert(out.end(), r.name.begin(), r.name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(r.shape.size()));
    for (Index d : r.shape) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(r.offset));
  }
  put<std::uint64_t>(out, static_cast<std::uint64_t>(values.size()));
  for (Index i = 0; i < values.size(); ++i) put<double>(out, values[i]);
  return out;
}

std::pair<ParamLayout, Eigen::VectorXd> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader rd(bytes);
  if (rd.remaining() < 4 || rd.bytes(4) != "TDCK") throw FormatError(FormatErrorCode::bad_magic, "bad checkpoint magic");
  const auto version = rd.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError(FormatErrorCode::version_mismatch, "checkpoint version " + std::to_string(version) +
                                                             " is not supported (expected " +
                                                             std::to_string(kCheckpointVersion) + ")");
  }
  ParamLayout layout;
  const auto records = rd.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < records; ++i) {
    LayerRecord r;
    r.name = rd.bytes(rd.get<std::uint32_t>());
    const auto rank = rd.get<std::uint32_t>();
    if (rank > 8) throw FormatError(FormatErrorCode::layout_mismatch, "implausible rank in layout record");
    for (std::uint32_t k = 0; k < rank; ++k) r.shape.push_back(static_cast<Index>(rd.get<std::uint64_t>()));
    r.offset = static_cast<Index>(rd.get<std::uint64_t>());
    if (r.offset != layout.total) throw FormatError(FormatErrorCode::layout_mismatch, "non-contiguous layout records");
    layout.total += r.size();
    layout.records.push_back(std::move(r));
  }
  const auto count = rd.get<std::uint64_t>();
  if (count != static_cast<std::uint64_t>(layout.total)) {
    throw FormatError(FormatErrorCode::layout_mismatch, "payload length differs from layout total");
  }
  if (rd.remaining() != count * sizeof(double)) throw FormatError(FormatErrorCode::truncated, "checkpoint payload size mismatch");
  Eigen::VectorXd values(static_cast<Index>(count));
  for (Index i = 0; i < values.size(); ++i) values[i] = rd.get<double>();
  return {std::move(layout), std::move(values)};
}

std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(crc32(crc, bytes.data(), static_cast<uInt>(bytes.size())));
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorCode::io, "cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(FormatErrorCode::io, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError(FormatErrorCode::io, "short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

json to_json(const ModelSpec& spec) {
  return json{{"kind", to_string(spec.kind)},
              {"depth", spec.depth},
              {"width", spec.width},
              {"input_shape", spec.input_shape},
              {"num_classes", spec.num_classes}};
}

ModelSpec model_spec_from_json(const json& j) {
  ModelSpec s;
  s.kind = parse_model_kind(j.at("kind").get<std::string>());
  s.depth = j.at("depth").get<int>();
  s.width = j.at("width").get<int>();
  s.input_shape = j.at("input_shape").get<Shape>();
  s.num_classes = j.at("num_classes").get<int>();
  return s;
}

std::string checkpoint_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%04zu.bin", index);
  return buf;
}

namespace {

json smoothness_json(const SmoothnessConfig& s) {
  return json{{"lambda_schedule", s.lambda_schedule}, {"mu", s.mu}, {"k_target", s.k_target}};
}

json json_or_throw(const fs::path& path) {
  const auto bytes = read_file(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw FormatError(FormatErrorCode::truncated, "malformed " + path.string() + ": " + e.what());
  }
}

}  // namespace

void save_trajectory(const Trajectory& traj, const fs::path& dir) {
  if (traj.checkpoints.size() != static_cast<std::size_t>(traj.meta.epochs) + 1) {
    throw FormatError(FormatErrorCode::count_mismatch, "trajectory holds " + std::to_string(traj.checkpoints.size()) +
                                                           " checkpoints for " + std::to_string(traj.meta.epochs) +
                                                           " epochs");
  }
  fs::create_directories(dir);
  json files = json::array();
  for (std::size_t i = 0; i < traj.checkpoints.size(); ++i) {
    const auto& ck = traj.checkpoints[i];
    const auto bytes = encode_checkpoint(*ck.layout, ck.values);
    write_file(dir / checkpoint_name(i), bytes);
    files.push_back(json{{"name", checkpoint_name(i)}, {"crc32", crc32_of(bytes)}});
  }
  json metrics = json::array();
  for (const auto& m : traj.meta.metrics) {
    metrics.push_back(json{{"epoch", m.epoch},
                           {"loss", m.loss},
                           {"train_accuracy", m.train_accuracy},
                           {"test_accuracy", m.test_accuracy},
                           {"learning_rate", m.learning_rate},
                           {"lambda", m.lambda},
                           {"delta_sq_mean", m.delta_sq_mean}});
  }
  const auto& o = traj.meta.optimizer;
  json manifest{{"format_version", kManifestVersion},
                {"kind", "trajectory"},
                {"spec", to_json(traj.spec)},
                {"seed", traj.meta.seed},
                {"epochs", traj.meta.epochs},
                {"optimizer", {{"eta", o.eta}, {"gamma", o.gamma}, {"batch_size", o.batch_size}, {"halve_lr", o.halve_lr}}},
                {"smoothness", smoothness_json(traj.meta.smoothness)},
                {"dataset_fingerprint", traj.meta.dataset_fingerprint},
                {"initial_train_accuracy", traj.meta.initial_train_accuracy},
                {"initial_test_accuracy", traj.meta.initial_test_accuracy},
                {"metrics", metrics},
                {"files", files}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

Trajectory load_trajectory(const fs::path& dir) {
  const json m = json_or_throw(dir / "manifest.json");
  const int version = m.value("format_version", -1);
  if (version != kManifestVersion) {
    throw FormatError(FormatErrorCode::version_mismatch, "manifest version " + std::to_string(version) +
                                                             " is not supported in " + dir.string());
  }
  Trajectory traj;
  try {
    traj.spec = model_spec_from_json(m.at("spec"));
    traj.meta.seed = m.at("seed").get<std::uint64_t>();
    traj.meta.epochs = m.at("epochs").get<int>();
    const auto& o = m.at("optimizer");
    traj.meta.optimizer = {o.at("eta").get<double>(), o.at("gamma").get<double>(), o.at("batch_size").get<int>(),
                           o.at("halve_lr").get<bool>()};
    const auto& s = m.at("smoothness");
    traj.meta.smoothness = {s.at("lambda_schedule").get<std::vector<double>>(), s.at("mu").get<double>(),
                            s.at("k_target").get<double>()};
    traj.meta.dataset_fingerprint = m.at("dataset_fingerprint").get<std::uint32_t>();
    traj.meta.initial_train_accuracy = m.at("initial_train_accuracy").get<double>();
    traj.meta.initial_test_accuracy = m.at("initial_test_accuracy").get<double>();
    for (const auto& e : m.at("metrics")) {
      EpochMetrics em;
      em.epoch = e.at("epoch").get<int>();
      em.loss = e.at("loss").get<double>();
      em.train_accuracy = e.at("train_accuracy").get<double>();
      em.test_accuracy = e.at("test_accuracy").get<double>();
      em.learning_rate = e.at("learning_rate").get<double>();
      em.lambda = e.at("lambda").get<double>();
      em.delta_sq_mean = e.at("delta_sq_mean").get<double>();
      traj.meta.metrics.push_back(em);
    }
  } catch (const json::exception& e) {
    throw FormatError(FormatErrorCode::layout_mismatch, "malformed manifest in " + dir.string() + ": " + e.what());
  }

  const auto& files = m.at("files");
  const std::size_t expected = static_cast<std::size_t>(traj.meta.epochs) + 1;
  std::size_t on_disk = 0;
  for (std::size_t i = 0; i < std::max(expected, files.size()); ++i) on_disk += fs::exists(dir / checkpoint_name(i));
  if (files.size() != expected || on_disk != expected) {
    throw FormatError(FormatErrorCode::count_mismatch, "manifest declares " + std::to_string(traj.meta.epochs) +
                                                           " epochs (" + std::to_string(expected) +
                                                           " checkpoints) but " + std::to_string(on_disk) +
                                                           " checkpoint files exist in " + dir.string());
  }
  const auto layout = std::make_shared<const ParamLayout>(param_layout(traj.spec));
  for (std::size_t i = 0; i < expected; ++i) {
    const std::string name = checkpoint_name(i);
    if (files[i].at("name").get<std::string>() != name) {
      throw FormatError(FormatErrorCode::count_mismatch, "manifest lists files out of order");
    }
    const auto bytes = read_file(dir / name);
    if (crc32_of(bytes) != files[i].at("crc32").get<std::uint32_t>()) {
      throw FormatError(FormatErrorCode::checksum_mismatch, "checksum mismatch in " + (dir / name).string());
    }
    auto [file_layout, values] = decode_checkpoint(bytes);
    if (!(file_layout == *layout)) {
      throw FormatError(FormatErrorCode::layout_mismatch, "layout of " + name + " does not match the model spec");
    }
    traj.checkpoints.push_back(ParamVector{std::move(values), layout});
  }
  return traj;
}

void save_synthetic(const SyntheticDataset& syn, const fs::path& dir) {
  syn.validate();
  fs::create_directories(dir);
  ParamLayout layout;
  layout.records.push_back({"images", syn.images.shape(), 0});
  layout.records.push_back({"alpha", Shape{1}, syn.images.size()});
  layout.total = syn.images.size() + 1;
  Eigen::VectorXd values(layout.total);
  values.head(syn.images.size()) = syn.images.array().matrix();
  values[syn.images.size()] = syn.alpha;
  const auto bytes = encode_checkpoint(layout, values);
  write_file(dir / "synthetic.bin", bytes);
  json labels{{"format_version", kManifestVersion},
              {"labels", syn.labels},
              {"class_count", syn.class_count},
              {"ipc", syn.ipc},
              {"crc32", crc32_of(bytes)}};
  write_text(dir / "labels.json", labels.dump(2) + "\n");
}

SyntheticDataset load_synthetic(const fs::path& dir) {
  const json lj = json_or_throw(dir / "labels.json");
  if (lj.value("format_version", -1) != kManifestVersion) {
    throw FormatError(FormatErrorCode::version_mismatch, "unsupported labels.json version in " + dir.string());
  }
  const auto bytes = read_file(dir / "synthetic.bin");
  if (crc32_of(bytes) != lj.at("crc32").get<std::uint32_t>()) {
    throw FormatError(FormatErrorCode::checksum_mismatch, "checksum mismatch in " + (dir / "synthetic.bin").string());
  }
  auto [layout, values] = decode_checkpoint(bytes);
  if (layout.records.size() != 2 || layout.records[0].name != "images" || layout.records[1].name != "alpha") {
    throw FormatError(FormatErrorCode::layout_mismatch, "synthetic.bin must hold blocks 'images' and 'alpha'");
  }
  SyntheticDataset syn;
  const auto& img = layout.records[0];
  syn.images = Tensor(img.shape, values.head(img.size()).array());
  syn.alpha = values[img.size()];
  syn.labels = lj.at("labels").get<std::vector<int>>();
  syn.class_count = lj.at("class_count").get<int>();
  syn.ipc = lj.at("ipc").get<int>();
  syn.validate();
  return syn;
}

}  // namespace trajdistill
