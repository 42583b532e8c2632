#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lowrank/attacks.hpp"
#include "lowrank/model.hpp"
#include "lowrank/tensor.hpp"

// Binary formats. All integers and floats are little-endian; every file ends
// with a CRC32 (reflected, polynomial 0xEDB88320) of all preceding bytes.
// Byte layouts are documented in docs/formats.md.
namespace lowrank::io {

using Bytes = std::vector<std::uint8_t>;

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::size_t kDatasetHeaderBytes = 24;
inline constexpr std::size_t kAttackHeaderBytes = 38;

std::uint32_t crc32(std::span<const std::uint8_t> bytes);
std::uint32_t crc32(std::string_view text);

// ---- LRTD: datasets -------------------------------------------------------

Bytes encode_dataset(const Dataset& data);
/// Pixels outside [0,1] and, when num_classes is given, labels >= num_classes
/// are rejected.
Dataset decode_dataset(std::span<const std::uint8_t> bytes,
                       std::optional<std::size_t> num_classes = std::nullopt);
void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path,
                     std::optional<std::size_t> num_classes = std::nullopt);

/// Deterministic desk-scale data. generator is "blobs" (class-dependent
/// Gaussian bumps) or "stripes" (class-dependent stripe frequencies).
/// Pixels are clamped to [0,1] and rounded to float precision, so a dataset
/// survives an LRTD round trip unchanged.
Dataset synth_dataset(const std::string& generator, std::size_t d, std::size_t c, std::size_t n,
                      std::size_t m, std::size_t classes, std::uint64_t seed);

// ---- LRAT: attacks --------------------------------------------------------

enum class AttackKind : std::uint8_t { kFull = 0, kFactored = 1 };

struct AttackFile {
  attacks::Perturbation perturbation;
  double tau = 0.0;
  NormKind norm_kind = NormKind::kFrobenius;

  AttackKind kind() const noexcept;
  Dims4 dims() const;
  std::size_t rank() const noexcept;  // 0 for full
};

AttackFile attack_file(const attacks::AttackResult& result, double tau, NormKind norm_kind);

/// Payload size in bytes: 4*D*C*N*M (full) or 4*D*C*r*(N+M) (factored).
std::uint64_t attack_payload_bytes(AttackKind kind, const Dims4& dims, std::size_t rank);

Bytes encode_attack(const AttackFile& file);
AttackFile decode_attack(std::span<const std::uint8_t> bytes);
void save_attack(const AttackFile& file, const std::filesystem::path& path);
AttackFile load_attack(const std::filesystem::path& path);

// ---- LRMD: model checkpoints ----------------------------------------------

Bytes encode_model(const model::Model& m);
model::Model decode_model(std::span<const std::uint8_t> bytes);
void save_model(const model::Model& m, const std::filesystem::path& path);
model::Model load_model(const std::filesystem::path& path);

/// Rounds every stored value to float, matching what a checkpoint round trip
/// yields.
model::ModelParams round_to_float(model::ModelParams params);

// ---- images and plumbing --------------------------------------------------

/// Binary P6 of image `index`, 8 bits per channel, byte = floor(255 v + 0.5).
/// Single-channel images are written as gray RGB. C must be 1 or 3.
Bytes encode_ppm(const Tensor& batch, std::size_t index);
void render_ppm(const Tensor& batch, std::size_t index, const std::filesystem::path& path);

Bytes read_file(const std::filesystem::path& path);
/// Writes to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);

}  // namespace lowrank::io
