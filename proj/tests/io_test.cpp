#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "lowrank/attacks.hpp"
#include "lowrank/error.hpp"
#include "lowrank/io.hpp"
#include "support.hpp"

using namespace lowrank;
using namespace lowrank::io;

namespace {

Dataset tiny_dataset() {
  Dataset d{Tensor(Dims4{1, 1, 2, 2}), {0}};
  d.images[0] = 0.0;
  d.images[1] = 0.25;
  d.images[2] = 0.5;
  d.images[3] = 1.0;
  return d;
}

std::uint32_t read_u32(const Bytes& b, std::size_t off) {
  std::uint32_t v = 0;
  for (int k = 3; k >= 0; --k) v = (v << 8) | b[off + k];
  return v;
}

void refresh_crc(Bytes& b) {
  const std::uint32_t c = crc32(std::span<const std::uint8_t>(b.data(), b.size() - 4));
  for (int k = 0; k < 4; ++k) b[b.size() - 4 + k] = static_cast<std::uint8_t>(c >> (8 * k));
}

template <class F>
IoError capture(F&& f) {
  try {
    f();
  } catch (const IoError& e) {
    return e;
  }
  ADD_FAILURE() << "expected IoError";
  return IoError(IoErrorKind::kOpenFailed, 0, "none");
}

attacks::AttackResult lora_result(std::uint64_t seed) {
  const auto net = tu::seeded_model(model::Architecture::kCnn, 3, 8, 8, 4, seed);
  const Tensor x = tu::random_batch({3, 3, 8, 8}, seed + 1, 0, 1);
  attacks::AttackConfig c;
  c.algorithm = attacks::Algorithm::kLoraPgd;
  c.rank_fraction = 0.25;
  c.steps = 2;
  return attacks::run_attack(net, x, tu::random_labels(3, 4, seed + 2), c);
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("lowrank_io_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST(Crc32, PublishedVector) {
  EXPECT_EQ(crc32(std::string_view("123456789")), 0xCBF43926u);
  EXPECT_EQ(crc32(std::string_view("")), 0u);
}

TEST(Dataset, MinimalFileLayout) {
  const Bytes b = encode_dataset(tiny_dataset());
  ASSERT_EQ(b.size(), 48u);
  EXPECT_EQ(std::memcmp(b.data(), "LRTD", 4), 0);
  EXPECT_EQ(read_u32(b, 4), kFormatVersion);
  EXPECT_EQ(read_u32(b, 8), 1u);
  EXPECT_EQ(read_u32(b, 20), 2u);
  float f = 0;
  std::memcpy(&f, b.data() + 24 + 8, 4);
  EXPECT_EQ(f, 0.5f);
  EXPECT_EQ(read_u32(b, 40), 0u);
  EXPECT_EQ(read_u32(b, 44), crc32(std::span<const std::uint8_t>(b.data(), 44)));
}

TEST(Dataset, RoundTripIsBitwise) {
  const Dataset d = synth_dataset("stripes", 7, 3, 5, 6, 4, 1);
  const Dataset back = decode_dataset(encode_dataset(d));
  EXPECT_EQ(back.images, d.images);
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(encode_dataset(back), encode_dataset(d));
}

TEST(Dataset, CorruptionIsPositioned) {
  Bytes b = encode_dataset(tiny_dataset());
  Bytes bad = b;
  bad[30] ^= 0x01;
  const auto crc = capture([&] { decode_dataset(bad); });
  EXPECT_EQ(crc.kind(), IoErrorKind::kCrcMismatch);
  EXPECT_EQ(crc.offset(), 44u);

  bad = b;
  bad[0] = 'X';
  EXPECT_EQ(capture([&] { decode_dataset(bad); }).kind(), IoErrorKind::kBadMagic);

  bad = b;
  bad[4] = 9;
  refresh_crc(bad);
  EXPECT_EQ(capture([&] { decode_dataset(bad); }).kind(), IoErrorKind::kBadVersion);

  for (std::size_t cut : {0u, 3u, 20u, 30u, 47u}) {
    const Bytes shortened(b.begin(), b.begin() + cut);
    const auto e = capture([&] { decode_dataset(shortened); });
    EXPECT_EQ(e.kind(), IoErrorKind::kTruncated) << "cut " << cut;
    EXPECT_LE(e.offset(), cut);
  }

  bad = b;
  bad.push_back(0);
  EXPECT_EQ(capture([&] { decode_dataset(bad); }).kind(), IoErrorKind::kTrailingBytes);
}

TEST(Dataset, RangeChecks) {
  Bytes b = encode_dataset(tiny_dataset());
  const float big = 1.5f;
  std::memcpy(b.data() + 24 + 4, &big, 4);
  refresh_crc(b);
  const auto e = capture([&] { decode_dataset(b); });
  EXPECT_EQ(e.kind(), IoErrorKind::kPixelOutOfRange);
  EXPECT_EQ(e.offset(), 28u);

  Dataset d = tiny_dataset();
  d.labels[0] = 5;
  const Bytes lb = encode_dataset(d);
  EXPECT_NO_THROW(decode_dataset(lb));
  const auto le = capture([&] { decode_dataset(lb, 3); });
  EXPECT_EQ(le.kind(), IoErrorKind::kLabelOutOfRange);
  EXPECT_EQ(le.offset(), 40u);
}

TEST(Dataset, FileRoundTripAndMissingFile) {
  TempDir dir;
  const Dataset d = synth_dataset("blobs", 5, 3, 6, 6, 3, 2);
  save_dataset(d, dir.path / "d.lrtd");
  EXPECT_EQ(load_dataset(dir.path / "d.lrtd").images, d.images);
  EXPECT_FALSE(std::filesystem::exists(dir.path / "d.lrtd.tmp"));
  EXPECT_EQ(capture([&] { load_dataset(dir.path / "missing.lrtd"); }).kind(), IoErrorKind::kOpenFailed);
}

TEST(Synth, DeterministicAndInBox) {
  for (const char* gen : {"blobs", "stripes"}) {
    const Dataset a = synth_dataset(gen, 20, 3, 8, 8, 5, 3);
    const Dataset b = synth_dataset(gen, 20, 3, 8, 8, 5, 3);
    EXPECT_EQ(a.images, b.images);
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_NE(synth_dataset(gen, 20, 3, 8, 8, 5, 4).images, a.images);
    for (double v : a.images.values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      EXPECT_EQ(v, static_cast<double>(static_cast<float>(v)));
    }
    for (auto l : a.labels) EXPECT_LT(l, 5u);
  }
  EXPECT_THROW(synth_dataset("noise", 2, 1, 4, 4, 2, 1), ContractViolation);
}

TEST(Synth, TwoClassBlobsAreLinearlyLearnable) {
  const Dataset d = synth_dataset("blobs", 200, 3, 8, 8, 2, 5);
  const auto spec = model::reference_spec(model::Architecture::kLinear, 3, 8, 8, 2);
  model::TrainConfig cfg;
  cfg.epochs = 20;
  cfg.learning_rate = 0.1;
  cfg.seed = 6;
  const model::Model m{spec, model::train_sgd(spec, d, cfg)};
  const Labels pred = model::predict_class(m, d.images);
  std::size_t ok = 0;
  for (std::size_t b = 0; b < d.size(); ++b) ok += pred[b] == d.labels[b];
  EXPECT_GE(static_cast<double>(ok) / d.size(), 0.95);
}

TEST(Attack, FactoredRoundTripIsBitwise) {
  const auto res = lora_result(7);
  const AttackFile f = attack_file(res, 0.5, NormKind::kFrobenius);
  EXPECT_EQ(f.kind(), AttackKind::kFactored);
  EXPECT_EQ(f.rank(), 2u);
  const Bytes b = encode_attack(f);
  EXPECT_EQ(b.size(), kAttackHeaderBytes + attack_payload_bytes(AttackKind::kFactored, f.dims(), 2) + 4);
  const AttackFile back = decode_attack(b);
  EXPECT_EQ(encode_attack(back), b);
  EXPECT_EQ(back.tau, 0.5);
  const auto& fp = std::get<attacks::FactoredPerturbation>(back.perturbation);
  EXPECT_EQ(fp.u.dims4(), (Dims4{3, 3, 8, 2}));
}

TEST(Attack, FullFileHasZeroRank) {
  const Tensor d = tu::random_batch({2, 1, 4, 3}, 8, -0.5, 0.5);
  attacks::AttackResult r;
  r.perturbation = d;
  r.adversarial = d;
  const Bytes b = encode_attack(attack_file(r, 0.3, NormKind::kLinf));
  EXPECT_EQ(b.size(), kAttackHeaderBytes + 4u * 24 + 4);
  EXPECT_EQ(b[8], 0u);
  EXPECT_EQ(read_u32(b, 25), 0u);
  const AttackFile back = decode_attack(b);
  EXPECT_EQ(back.kind(), AttackKind::kFull);
  EXPECT_EQ(back.norm_kind, NormKind::kLinf);
  EXPECT_EQ(encode_attack(back), b);
}

TEST(Attack, PayloadArithmetic) {
  const Dims4 d{5000, 3, 32, 32};
  const auto factored = attack_payload_bytes(AttackKind::kFactored, d, 3);
  const auto full = attack_payload_bytes(AttackKind::kFull, d, 0);
  EXPECT_EQ(factored, 4ull * 5000 * 3 * 3 * 64);
  EXPECT_EQ(full, 4ull * 5000 * 3 * 32 * 32);
  EXPECT_EQ(static_cast<double>(factored) / static_cast<double>(full), 0.1875);
}

TEST(Attack, MalformedHeadersRejected) {
  const Bytes good = encode_attack(attack_file(lora_result(9), 0.5, NormKind::kFrobenius));
  Bytes bad = good;
  bad[8] = 7;  // kind
  refresh_crc(bad);
  EXPECT_EQ(capture([&] { decode_attack(bad); }).kind(), IoErrorKind::kBadField);
  bad = good;
  bad[25] = 9;  // rank > min(N, M)
  refresh_crc(bad);
  EXPECT_EQ(capture([&] { decode_attack(bad); }).kind(), IoErrorKind::kBadField);
  bad = good;
  bad[37] = 3;  // norm kind
  refresh_crc(bad);
  EXPECT_EQ(capture([&] { decode_attack(bad); }).kind(), IoErrorKind::kBadField);
  bad.assign(good.begin(), good.end() - 1);
  EXPECT_EQ(capture([&] { decode_attack(bad); }).kind(), IoErrorKind::kTruncated);
}

TEST(Model, CheckpointRoundTrip) {
  for (auto arch : {model::Architecture::kLinear, model::Architecture::kMlp, model::Architecture::kCnn}) {
    const auto m = tu::seeded_model(arch, 3, 8, 8, 4, 10);
    const Bytes b = encode_model(m);
    const auto back = decode_model(b);
    EXPECT_EQ(back.spec, m.spec);
    EXPECT_EQ(back.params, round_to_float(m.params));
    EXPECT_EQ(encode_model(back), b);
    Bytes bad = b;
    bad[b.size() / 2] ^= 0x10;
    EXPECT_EQ(capture([&] { decode_model(bad); }).kind(), IoErrorKind::kCrcMismatch);
  }
}

TEST(Ppm, Encoding) {
  Tensor x(Dims4{2, 3, 1, 2});
  for (std::size_t i = 6; i < 12; ++i) x[i] = 1.0;
  x[0] = 0.5;
  const Bytes black = encode_ppm(x, 0);
  const std::string header = "P6\n2 1\n255\n";
  ASSERT_EQ(black.size(), header.size() + 6);
  EXPECT_EQ(std::string(black.begin(), black.begin() + header.size()), header);
  EXPECT_EQ(black[header.size()], 128u);
  for (std::size_t i = header.size() + 1; i < black.size(); ++i) EXPECT_EQ(black[i], 0u);
  const Bytes white = encode_ppm(x, 1);
  for (std::size_t i = header.size(); i < white.size(); ++i) EXPECT_EQ(white[i], 255u);

  Tensor gray(Dims4{1, 1, 1, 1});
  gray[0] = 0.2;
  const Bytes g = encode_ppm(gray, 0);
  EXPECT_EQ(g[g.size() - 1], 51u);
  EXPECT_EQ(g[g.size() - 2], 51u);
  EXPECT_EQ(g[g.size() - 3], 51u);
  EXPECT_THROW(encode_ppm(x, 2), ContractViolation);
  EXPECT_THROW(encode_ppm(Tensor(Dims4{1, 2, 1, 1}), 0), ContractViolation);
}
