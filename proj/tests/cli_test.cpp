#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include <unistd.h>

#include "lowrank/cli.hpp"
#include "lowrank/io.hpp"

namespace fs = std::filesystem;
using lowrank::cli::dispatch;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  const auto b = lowrank::io::read_file(p);
  return {b.begin(), b.end()};
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / ("lowrank_cli_test_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
    ASSERT_EQ(run({"gen-data", "--count", "48", "--rows", "8", "--cols", "8", "--classes", "3", "--seed", "1",
                   "--out", p("d.lrtd")})
                  .code,
              0);
    ASSERT_EQ(run({"train", "--data", p("d.lrtd"), "--epochs", "2", "--seed", "2", "--out", p("m.lrmd")}).code, 0);
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }
  static std::string p(const std::string& name) { return (dir_ / name).string(); }

  static fs::path dir_;
};

fs::path Cli::dir_;

}  // namespace

TEST_F(Cli, HelpExitsZeroAndListsFlags) {
  const auto top = run({"--help"});
  EXPECT_EQ(top.code, 0);
  for (const char* sub : {"gen-data", "train", "attack", "eval", "spectrum", "nuc-profile", "bench", "render", "formats"})
    EXPECT_NE(top.out.find(sub), std::string::npos) << sub;
  const auto eval = run({"eval", "--help"});
  EXPECT_EQ(eval.code, 0);
  EXPECT_NE(eval.out.find("--rank-frac"), std::string::npos);
}

TEST_F(Cli, UnknownFlagPrintsUsage) {
  const auto r = run({"formats", "--frobnicate"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("frobnicate"), std::string::npos);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
  EXPECT_EQ(run({"nonsense"}).code, 1);
  EXPECT_EQ(run({}).code, 1);
}

TEST_F(Cli, ErrorVariantsMapToExitCodes) {
  const auto missing = run({"eval", "--model", p("nope.lrmd"), "--data", p("d.lrtd")});
  EXPECT_EQ(missing.code, 2);
  EXPECT_NE(missing.err.find("open_failed"), std::string::npos);

  auto bytes = lowrank::io::read_file(p("d.lrtd"));
  bytes[40] ^= 0xff;
  lowrank::io::write_file_atomic(p("bad.lrtd"), bytes);
  const auto crc = run({"render", "--data", p("bad.lrtd"), "--out", p("x.ppm")});
  EXPECT_EQ(crc.code, 2);
  EXPECT_NE(crc.err.find("crc_mismatch"), std::string::npos);

  const auto contract = run({"eval", "--model", p("m.lrmd"), "--data", p("d.lrtd"), "--attack", "lora_pgd",
                             "--norm", "linf"});
  EXPECT_EQ(contract.code, 1);
  EXPECT_NE(contract.err.find("contract"), std::string::npos);
}

TEST_F(Cli, EvalWritesRowWithFlags) {
  const auto r = run({"eval", "--model", p("m.lrmd"), "--data", p("d.lrtd"), "--attack", "pgd", "--tau", "0.5",
                      "--steps", "10", "--out", p("ra.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = slurp(p("ra.csv"));
  EXPECT_EQ(csv.rfind("model_id,attack,steps,tau,norm,rank_frac,init,rho,clean_acc,n\nm,pgd,10,0.5,frobenius,,random,", 0),
            0u)
      << csv;
  EXPECT_TRUE(fs::exists(p("ra.csv.manifest.json")));
  EXPECT_NE(r.out.find(p("ra.csv")), std::string::npos);
}

TEST_F(Cli, AttackIsDeterministic) {
  const std::vector<std::string> base{"attack", "--model", p("m.lrmd"), "--data", p("d.lrtd"), "--algo", "lora_pgd",
                                      "--rank-frac", "0.1", "--init", "random", "--seed", "7", "--out"};
  auto a = base, b = base;
  a.push_back(p("a1.lrat"));
  b.push_back(p("a2.lrat"));
  ASSERT_EQ(run(a).code, 0);
  ASSERT_EQ(run(b).code, 0);
  EXPECT_EQ(slurp(p("a1.lrat")), slurp(p("a2.lrat")));
}

TEST_F(Cli, ManifestReplayReproducesOutputs) {
  ASSERT_EQ(run({"attack", "--model", p("m.lrmd"), "--data", p("d.lrtd"), "--algo", "rank_projected_pgd",
                 "--rank-frac", "0.25", "--seed", "3", "--steps", "3", "--out", p("r.lrat")})
                .code,
            0);
  const std::string first = slurp(p("r.lrat"));
  fs::remove(p("r.lrat"));
  const auto replay = run({"--manifest", p("r.lrat.manifest.json")});
  ASSERT_EQ(replay.code, 0) << replay.err;
  EXPECT_EQ(slurp(p("r.lrat")), first);

  const auto spec = run({"spectrum", "--data", p("d.lrtd"), "--attack-file", p("r.lrat"), "--out", p("s.csv")});
  ASSERT_EQ(spec.code, 0) << spec.err;
  const std::string s1 = slurp(p("s.csv"));
  ASSERT_EQ(run({"--manifest", p("s.csv.manifest.json")}).code, 0);
  EXPECT_EQ(slurp(p("s.csv")), s1);
  EXPECT_EQ(s1.rfind("index,mean_rel_change\n1,", 0), 0u);
}

TEST_F(Cli, BenchReportsThreeRowsAndOrdering) {
  const auto r = run({"bench", "--model", p("m.lrmd"), "--data", p("d.lrtd"), "--algos",
                      "pgd,lora_pgd,rank_projected_pgd", "--rank-frac", "0.1", "--steps", "2", "--reps", "2",
                      "--out", p("res.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("ordering:"), std::string::npos);
  const std::string csv = slurp(p("res.csv"));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  const auto nt = run({"bench", "--model", p("m.lrmd"), "--data", p("d.lrtd"), "--no-timing", "--out", p("mem.csv")});
  ASSERT_EQ(nt.code, 0);
  EXPECT_EQ(slurp(p("mem.csv")),
            "algo,d,c,n,m,r,elements,ratio,median_ms\n"
            "pgd,48,3,8,8,0,9216,1,\n"
            "lora_pgd,48,3,8,8,1,2304,0.25,\n"
            "rank_projected_pgd,48,3,8,8,1,2304,0.25,\n");
}

TEST_F(Cli, NucProfileRenderAndFormats) {
  ASSERT_EQ(run({"attack", "--model", p("m.lrmd"), "--data", p("d.lrtd"), "--steps", "2", "--out", p("f.lrat")}).code, 0);
  const auto nuc = run({"nuc-profile", "--attack-file", "std=" + p("f.lrat"), "--out", p("n.csv")});
  ASSERT_EQ(nuc.code, 0) << nuc.err;
  EXPECT_EQ(slurp(p("n.csv")).rfind("model_id,mean_nuclear_norm,n\nstd,", 0), 0u);
  ASSERT_EQ(run({"render", "--data", p("d.lrtd"), "--index", "2", "--out", p("i.ppm")}).code, 0);
  EXPECT_EQ(slurp(p("i.ppm")).rfind("P6\n8 8\n255\n", 0), 0u);
  EXPECT_EQ(run({"render", "--data", p("d.lrtd"), "--index", "48", "--out", p("i.ppm")}).code, 1);
  const auto fmt = run({"formats"});
  EXPECT_EQ(fmt.code, 0);
  EXPECT_NE(fmt.out.find("LRAT"), std::string::npos);
  const auto ins = run({"formats", "--inspect", p("f.lrat")});
  EXPECT_NE(ins.out.find("\"kind\": \"full\""), std::string::npos);
}

TEST_F(Cli, ManifestErrors) {
  lowrank::io::write_text_atomic(p("junk.json"), "{not json");
  EXPECT_EQ(run({"--manifest", p("junk.json")}).code, 1);
  EXPECT_EQ(run({"--manifest", p("absent.json")}).code, 2);
}
