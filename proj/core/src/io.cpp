#include "lowrank/io.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "lowrank/error.hpp"

namespace lowrank::io {

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in pieces.
  constexpr std::size_t kChunk = 1u << 30;
  for (std::size_t off = 0; off < bytes.size(); off += kChunk) {
    const auto n = static_cast<uInt>(std::min(kChunk, bytes.size() - off));
    crc = ::crc32(crc, bytes.data() + off, n);
  }
  return static_cast<std::uint32_t>(crc);
}

std::uint32_t crc32(std::string_view text) {
  return crc32(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

namespace {

constexpr char kDatasetMagic[4] = {'L', 'R', 'T', 'D'};
constexpr char kAttackMagic[4] = {'L', 'R', 'A', 'T'};
constexpr char kModelMagic[4] = {'L', 'R', 'M', 'D'};

class Writer {
 public:
  void magic(const char (&m)[4]) {
    for (char ch : m) bytes_.push_back(static_cast<std::uint8_t>(ch));
  }
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void f32s(std::span<const double> vs) {
    bytes_.reserve(bytes_.size() + 4 * vs.size());
    for (double v : vs) f32(v);
  }
  void dim(std::size_t v, const char* what) {
    if (v > 0xffffffffu) throw ContractViolation(std::string(what) + " does not fit in u32");
    u32(static_cast<std::uint32_t>(v));
  }
  Bytes finish() {
    const std::uint32_t crc = crc32(bytes_);
    u32(crc);
    return std::move(bytes_);
  }

 private:
  Bytes bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t size() const noexcept { return bytes_.size(); }

  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw IoError(IoErrorKind::kTruncated, bytes_.size(),
                    "need " + std::to_string(n) + " more bytes at offset " + std::to_string(pos_));
    }
  }
  void magic(const char (&m)[4], const char* format) {
    need(4);
    if (std::memcmp(bytes_.data(), m, 4) != 0) {
      throw IoError(IoErrorKind::kBadMagic, 0, std::string("not an ") + format + " file");
    }
    pos_ += 4;
  }
  void version() {
    const std::size_t at = pos_;
    const auto v = u32();
    if (v != kFormatVersion) {
      throw IoError(IoErrorKind::kBadVersion, at, "unsupported format version " + std::to_string(v));
    }
  }
  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f32() { return static_cast<double>(std::bit_cast<float>(u32())); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::size_t positive_dim(const char* what) {
    const std::size_t at = pos_;
    const auto v = u32();
    if (v == 0) throw IoError(IoErrorKind::kBadField, at, std::string(what) + " must be >= 1");
    return v;
  }

  // Checks that the buffer is exactly `total` bytes and that its CRC trailer
  // matches.
  void check_length_and_crc(std::uint64_t total) const {
    if (bytes_.size() < total) {
      throw IoError(IoErrorKind::kTruncated, bytes_.size(),
                    "expected " + std::to_string(total) + " bytes, got " + std::to_string(bytes_.size()));
    }
    if (bytes_.size() > total) {
      throw IoError(IoErrorKind::kTrailingBytes, total,
                    std::to_string(bytes_.size() - total) + " unexpected trailing bytes");
    }
    const std::size_t body = bytes_.size() - 4;
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes_[body + i]) << (8 * i);
    const std::uint32_t actual = crc32(bytes_.first(body));
    if (stored != actual) {
      std::ostringstream os;
      os << "stored CRC 0x" << std::hex << stored << " != computed 0x" << actual;
      throw IoError(IoErrorKind::kCrcMismatch, body, os.str());
    }
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

// Guards the size arithmetic against absurd headers.
std::uint64_t checked_mul(std::initializer_list<std::uint64_t> factors, std::size_t at) {
  std::uint64_t out = 1;
  for (auto f : factors) {
    if (f != 0 && out > (std::uint64_t{1} << 60) / f) {
      throw IoError(IoErrorKind::kBadField, at, "header dimensions overflow");
    }
    out *= f;
  }
  return out;
}

}  // namespace

// ---- LRTD ----

Bytes encode_dataset(const Dataset& data) {
  const auto d = data.images.dims4();
  LOWRANK_REQUIRE(d.b == data.labels.size(), "image and label counts differ");
  Writer w;
  w.magic(kDatasetMagic);
  w.u32(kFormatVersion);
  w.dim(d.b, "D");
  w.dim(d.c, "C");
  w.dim(d.n, "N");
  w.dim(d.m, "M");
  w.f32s(data.images.values());
  for (auto y : data.labels) w.u32(y);
  return w.finish();
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes, std::optional<std::size_t> num_classes) {
  Reader r(bytes);
  r.magic(kDatasetMagic, "LRTD");
  r.version();
  const std::size_t at = r.offset();
  Dims4 d;
  d.b = r.positive_dim("D");
  d.c = r.positive_dim("C");
  d.n = r.positive_dim("N");
  d.m = r.positive_dim("M");
  const std::uint64_t pixels = checked_mul({d.b, d.c, d.n, d.m}, at);
  r.check_length_and_crc(kDatasetHeaderBytes + 4 * pixels + 4 * d.b + 4);

  Dataset out{Tensor(d), Labels(d.b)};
  for (double& v : out.images.values()) {
    const std::size_t pos = r.offset();
    v = r.f32();
    if (!(v >= 0.0 && v <= 1.0)) {
      throw IoError(IoErrorKind::kPixelOutOfRange, pos, "pixel value " + std::to_string(v));
    }
  }
  for (auto& y : out.labels) {
    const std::size_t pos = r.offset();
    y = r.u32();
    if (num_classes && y >= *num_classes) {
      throw IoError(IoErrorKind::kLabelOutOfRange, pos, "label " + std::to_string(y));
    }
  }
  return out;
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  write_file_atomic(path, encode_dataset(data));
}

Dataset load_dataset(const std::filesystem::path& path, std::optional<std::size_t> num_classes) {
  return decode_dataset(read_file(path), num_classes);
}

namespace {

double gaussian_bump(double dy, double dx, double width) {
  return std::exp(-(dy * dy + dx * dx) / (2.0 * width * width));
}

}  // namespace

Dataset synth_dataset(const std::string& generator, std::size_t d, std::size_t c, std::size_t n,
                      std::size_t m, std::size_t classes, std::uint64_t seed) {
  LOWRANK_REQUIRE(d >= 1 && c >= 1 && n >= 1 && m >= 1, "dataset dims must be positive");
  LOWRANK_REQUIRE(classes >= 2, "need at least two classes");
  LOWRANK_REQUIRE(generator == "blobs" || generator == "stripes",
                  "unknown generator '" + generator + "' (expected blobs or stripes)");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  constexpr double kPi = 3.14159265358979323846;

  // Per-class, per-channel intensity of the pattern.
  std::vector<double> amplitude(classes * c);
  for (double& a : amplitude) a = 0.35 + 0.25 * unit(rng);

  Dataset out{Tensor(Dims4{d, c, n, m}), Labels(d)};
  const double nn = static_cast<double>(n), mm = static_cast<double>(m);
  for (std::size_t i = 0; i < d; ++i) {
    const auto label = static_cast<std::uint32_t>(rng() % classes);
    out.labels[i] = label;
    const double angle = 2.0 * kPi * static_cast<double>(label) / static_cast<double>(classes);
    if (generator == "blobs") {
      const double cy = nn / 2.0 + 0.28 * nn * std::sin(angle) + (unit(rng) - 0.5) * 0.12 * nn;
      const double cx = mm / 2.0 + 0.28 * mm * std::cos(angle) + (unit(rng) - 0.5) * 0.12 * mm;
      const double width = 0.16 * std::min(nn, mm) * (0.85 + 0.3 * unit(rng));
      const double base = 0.2 + 0.1 * unit(rng);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double amp = amplitude[label * c + ch];
        for (std::size_t y = 0; y < n; ++y)
          for (std::size_t x = 0; x < m; ++x) {
            const double v = base +
                             amp * gaussian_bump(static_cast<double>(y) - cy, static_cast<double>(x) - cx, width) +
                             0.03 * noise(rng);
            out.images.at(i, ch, y, x) = std::clamp(v, 0.0, 1.0);
          }
      }
    } else {
      const double freq = 1.0 + static_cast<double>(label);
      const double theta = (unit(rng) - 0.5) * 0.3;
      const double phase = 2.0 * kPi * unit(rng);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double amp = 0.5 * amplitude[label * c + ch];
        for (std::size_t y = 0; y < n; ++y)
          for (std::size_t x = 0; x < m; ++x) {
            const double t = (static_cast<double>(y) * std::cos(theta) / nn +
                              static_cast<double>(x) * std::sin(theta) / mm);
            const double v = 0.5 + amp * std::sin(2.0 * kPi * freq * t + phase) + 0.03 * noise(rng);
            out.images.at(i, ch, y, x) = std::clamp(v, 0.0, 1.0);
          }
      }
    }
  }
  for (double& v : out.images.values()) v = static_cast<double>(static_cast<float>(v));
  return out;
}

// ---- LRAT ----

AttackKind AttackFile::kind() const noexcept {
  return std::holds_alternative<attacks::FactoredPerturbation>(perturbation) ? AttackKind::kFactored
                                                                            : AttackKind::kFull;
}

Dims4 AttackFile::dims() const {
  if (const auto* f = std::get_if<attacks::FactoredPerturbation>(&perturbation)) {
    return {f->u.dim(0), f->u.dim(1), f->u.dim(2), f->v.dim(3)};
  }
  return std::get<Tensor>(perturbation).dims4();
}

std::size_t AttackFile::rank() const noexcept {
  if (const auto* f = std::get_if<attacks::FactoredPerturbation>(&perturbation)) return f->rank;
  return 0;
}

AttackFile attack_file(const attacks::AttackResult& result, double tau, NormKind norm_kind) {
  AttackFile f{result.perturbation, tau, norm_kind};
  if (const auto* fp = std::get_if<attacks::FactoredPerturbation>(&f.perturbation)) {
    f.tau = fp->tau;
    f.norm_kind = fp->norm_kind;
  }
  return f;
}

std::uint64_t attack_payload_bytes(AttackKind kind, const Dims4& d, std::size_t rank) {
  if (kind == AttackKind::kFull) return 4ull * d.b * d.c * d.n * d.m;
  return 4ull * d.b * d.c * rank * (d.n + d.m);
}

Bytes encode_attack(const AttackFile& file) {
  const Dims4 d = file.dims();
  Writer w;
  w.magic(kAttackMagic);
  w.u32(kFormatVersion);
  w.u8(static_cast<std::uint8_t>(file.kind()));
  w.dim(d.b, "D");
  w.dim(d.c, "C");
  w.dim(d.n, "N");
  w.dim(d.m, "M");
  w.dim(file.rank(), "rank");
  w.f64(file.tau);
  w.u8(static_cast<std::uint8_t>(file.norm_kind));
  if (const auto* f = std::get_if<attacks::FactoredPerturbation>(&file.perturbation)) {
    LOWRANK_REQUIRE(f->u.dims4() == (Dims4{d.b, d.c, d.n, f->rank}) &&
                        f->v.dims4() == (Dims4{d.b, d.c, f->rank, d.m}),
                    "factor shapes do not match the recorded rank");
    w.f32s(f->u.values());
    w.f32s(f->v.values());
  } else {
    w.f32s(std::get<Tensor>(file.perturbation).values());
  }
  return w.finish();
}

AttackFile decode_attack(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  r.magic(kAttackMagic, "LRAT");
  r.version();
  const std::size_t kind_at = r.offset();
  const auto kind_byte = r.u8();
  if (kind_byte > 1) throw IoError(IoErrorKind::kBadField, kind_at, "unknown attack kind");
  const auto kind = static_cast<AttackKind>(kind_byte);
  const std::size_t dims_at = r.offset();
  Dims4 d;
  d.b = r.positive_dim("D");
  d.c = r.positive_dim("C");
  d.n = r.positive_dim("N");
  d.m = r.positive_dim("M");
  const std::size_t rank_at = r.offset();
  const std::size_t rank = r.u32();
  if (kind == AttackKind::kFull && rank != 0) {
    throw IoError(IoErrorKind::kBadField, rank_at, "full attacks must record rank 0");
  }
  if (kind == AttackKind::kFactored && (rank == 0 || rank > std::min(d.n, d.m))) {
    throw IoError(IoErrorKind::kBadField, rank_at, "factored rank out of range");
  }
  const double tau = r.f64();
  const std::size_t norm_at = r.offset();
  const auto norm_byte = r.u8();
  if (norm_byte > 2) throw IoError(IoErrorKind::kBadField, norm_at, "unknown norm kind");
  checked_mul({d.b, d.c, d.n + d.m, std::max<std::size_t>(rank, d.n * d.m)}, dims_at);
  r.check_length_and_crc(kAttackHeaderBytes + attack_payload_bytes(kind, d, rank) + 4);

  AttackFile out;
  out.tau = tau;
  out.norm_kind = static_cast<NormKind>(norm_byte);
  if (kind == AttackKind::kFull) {
    Tensor t(d);
    for (double& v : t.values()) v = r.f32();
    out.perturbation = std::move(t);
  } else {
    attacks::FactoredPerturbation f{Tensor(Dims4{d.b, d.c, d.n, rank}), Tensor(Dims4{d.b, d.c, rank, d.m}),
                                    rank, tau, out.norm_kind};
    for (double& v : f.u.values()) v = r.f32();
    for (double& v : f.v.values()) v = r.f32();
    out.perturbation = std::move(f);
  }
  return out;
}

void save_attack(const AttackFile& file, const std::filesystem::path& path) {
  write_file_atomic(path, encode_attack(file));
}

AttackFile load_attack(const std::filesystem::path& path) { return decode_attack(read_file(path)); }

// ---- LRMD ----

Bytes encode_model(const model::Model& m) {
  m.spec.validate();
  Writer w;
  w.magic(kModelMagic);
  w.u32(kFormatVersion);
  for (auto dim : m.spec.input_dims) w.dim(dim, "input dim");
  w.dim(m.spec.num_classes, "num_classes");
  w.dim(m.spec.layers.size(), "layer count");
  for (const auto& l : m.spec.layers) {
    w.u8(static_cast<std::uint8_t>(l.kind));
    w.dim(l.in, "layer in");
    w.dim(l.out, "layer out");
    w.dim(l.kernel, "layer kernel");
    w.dim(l.stride, "layer stride");
    w.dim(l.pad, "layer pad");
  }
  w.u64(m.params.seed);
  w.u64(m.params.parameter_count());
  for (std::size_t i = 0; i < m.spec.layers.size(); ++i) {
    w.f32s(m.params.weights.at(i));
    w.f32s(m.params.biases.at(i));
  }
  return w.finish();
}

model::Model decode_model(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  r.magic(kModelMagic, "LRMD");
  r.version();
  model::Model m;
  for (auto& dim : m.spec.input_dims) dim = r.positive_dim("input dim");
  m.spec.num_classes = r.u32();
  const std::size_t count_at = r.offset();
  const std::size_t layers = r.u32();
  if (layers > 4096) throw IoError(IoErrorKind::kBadField, count_at, "implausible layer count");
  for (std::size_t i = 0; i < layers; ++i) {
    const std::size_t at = r.offset();
    const auto kind = r.u8();
    if (kind > 4) throw IoError(IoErrorKind::kBadField, at, "unknown layer kind");
    model::LayerSpec l;
    l.kind = static_cast<model::LayerKind>(kind);
    l.in = r.u32();
    l.out = r.u32();
    l.kernel = r.u32();
    l.stride = r.u32();
    l.pad = r.u32();
    m.spec.layers.push_back(l);
  }
  const std::size_t spec_end = r.offset();
  try {
    m.params = model::zero_params(m.spec);
  } catch (const ContractViolation& e) {
    throw IoError(IoErrorKind::kBadField, spec_end, std::string("invalid model descriptor: ") + e.what());
  }
  m.params.seed = r.u64();
  const std::size_t pc_at = r.offset();
  const auto param_count = r.u64();
  if (param_count != m.params.parameter_count()) {
    throw IoError(IoErrorKind::kBadField, pc_at, "parameter count does not match the descriptor");
  }
  r.check_length_and_crc(r.offset() + 4 * param_count + 4);
  for (std::size_t i = 0; i < layers; ++i) {
    for (double& v : m.params.weights[i]) v = r.f32();
    for (double& v : m.params.biases[i]) v = r.f32();
  }
  return m;
}

void save_model(const model::Model& m, const std::filesystem::path& path) {
  write_file_atomic(path, encode_model(m));
}

model::Model load_model(const std::filesystem::path& path) { return decode_model(read_file(path)); }

model::ModelParams round_to_float(model::ModelParams params) {
  for (auto* group : {&params.weights, &params.biases})
    for (auto& layer : *group)
      for (double& v : layer) v = static_cast<double>(static_cast<float>(v));
  return params;
}

// ---- PPM and files ----

Bytes encode_ppm(const Tensor& batch, std::size_t index) {
  const auto d = batch.dims4();
  LOWRANK_REQUIRE(index < d.b, "image index " + std::to_string(index) + " out of range");
  LOWRANK_REQUIRE(d.c == 1 || d.c == 3, "PPM rendering needs 1 or 3 channels");
  const std::string header = "P6\n" + std::to_string(d.m) + " " + std::to_string(d.n) + "\n255\n";
  Bytes out(header.begin(), header.end());
  out.reserve(out.size() + 3 * d.n * d.m);
  auto to_byte = [](double v) {
    const double scaled = std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
    return static_cast<std::uint8_t>(std::min(255.0, scaled));
  };
  for (std::size_t y = 0; y < d.n; ++y)
    for (std::size_t x = 0; x < d.m; ++x)
      for (std::size_t ch = 0; ch < 3; ++ch)
        out.push_back(to_byte(batch.at(index, d.c == 1 ? 0 : ch, y, x)));
  return out;
}

void render_ppm(const Tensor& batch, std::size_t index, const std::filesystem::path& path) {
  write_file_atomic(path, encode_ppm(batch, index));
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(IoErrorKind::kOpenFailed, 0, "cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(IoErrorKind::kWriteFailed, 0, "cannot create " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError(IoErrorKind::kWriteFailed, 0, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError(IoErrorKind::kWriteFailed, 0, "cannot rename onto " + path.string() + ": " + ec.message());
}

void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace lowrank::io
