#pragma once

#include "trajdistill/buffer.hpp"
#include "trajdistill/data.hpp"
#include "trajdistill/model.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace trajdistill {

// Checkpoint file layout (all integers and floats little-endian):
//
//   "TDCK" | u32 version | u32 record count
//   per record: u32 name length | name bytes | u32 rank | u64 dims[rank] | u64 offset
//   u64 value count | f64 values[count]

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr int kManifestVersion = 1;

enum class FormatErrorCode { io, bad_magic, version_mismatch, truncated, checksum_mismatch, layout_mismatch, count_mismatch };

class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  FormatErrorCode code() const { return code_; }

 private:
  FormatErrorCode code_;
};

std::vector<std::uint8_t> encode_checkpoint(const ParamLayout& layout, const Eigen::VectorXd& values);
/// Decoded layout and payload; validates magic, version and sizes.
std::pair<ParamLayout, Eigen::VectorXd> decode_checkpoint(const std::vector<std::uint8_t>& bytes);

std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
/// Writes atomically via a temporary sibling.
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

nlohmann::json to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

/// `manifest.json` plus `epoch_%04d.bin` for every checkpoint (0 = init).
void save_trajectory(const Trajectory& traj, const std::filesystem::path& dir);
Trajectory load_trajectory(const std::filesystem::path& dir);
std::string checkpoint_name(std::size_t index);

/// `synthetic.bin` (blocks "images" and "alpha") plus `labels.json`.
void save_synthetic(const SyntheticDataset& syn, const std::filesystem::path& dir);
SyntheticDataset load_synthetic(const std::filesystem::path& dir);

}  // namespace trajdistill
