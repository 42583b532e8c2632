#include "lowrank/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <ostream>
#include <sstream>

#include "lowrank/analysis.hpp"
#include "lowrank/attacks.hpp"
#include "lowrank/error.hpp"
#include "lowrank/io.hpp"
#include "lowrank/model.hpp"
#include "lowrank/parallel.hpp"

#ifndef LOWRANK_VERSION
#define LOWRANK_VERSION "0.0.0-unknown"
#endif

namespace lowrank::cli {

const char* version() noexcept { return LOWRANK_VERSION; }

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using attacks::AttackConfig;

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

double parse_double(const std::string& s, const char* what) {
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  LOWRANK_REQUIRE(ec == std::errc() && p == s.data() + s.size(),
                  std::string("invalid number for ") + what + ": '" + s + "'");
  return v;
}

std::string percent(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

// ---- per-invocation state --------------------------------------------------

struct Run {
  std::ostream& out;
  std::vector<std::string> outputs;

  void write_bytes(const fs::path& p, std::span<const std::uint8_t> bytes) {
    io::write_file_atomic(p, bytes);
    outputs.push_back(p.string());
  }
  void write_text(const fs::path& p, std::string_view text) {
    io::write_text_atomic(p, text);
    outputs.push_back(p.string());
  }
};

// ---- shared attack flags ---------------------------------------------------

struct AttackFlags {
  std::string algo = "pgd";
  double tau = 0.5;
  int steps = 10;
  std::string norm = "frobenius";
  std::string rank_frac = "0.1";
  std::string init = "random";
  std::uint64_t seed = 0;
  std::string grad_through = "exact";
  std::string source_model;
  bool nuclear_matched = false;
  std::size_t batch = 128;

  void add_to(CLI::App* sub) {
    sub->add_option("--algo,--attack", algo, "fgsm, pgd, lora_pgd or rank_projected_pgd");
    sub->add_option("--tau", tau, "Perturbation budget");
    sub->add_option("--steps", steps, "Gradient steps");
    sub->add_option("--norm", norm, "frobenius, nuclear or linf");
    sub->add_option("--rank-frac", rank_frac, "Rank as a fraction of min(N, M)");
    sub->add_option("--init", init, "random, transfer or warmup");
    sub->add_option("--seed", seed, "Attack seed; batch k uses seed + k");
    sub->add_option("--grad-through", grad_through, "exact or straight_through (lora_pgd)");
    sub->add_option("--source-model", source_model, "Standard model for --init transfer");
    sub->add_flag("--nuclear-matched", nuclear_matched,
                  "lora_pgd rescaled to the nuclear norm of pgd (same steps, tau, seed)");
    sub->add_option("--batch", batch, "Images per attack batch");
  }

  AttackConfig config(double frac) const {
    AttackConfig c;
    c.algorithm = attacks::algorithm_from_string(algo);
    c.tau = tau;
    c.steps = steps;
    c.norm_kind = norm_kind_from_string(norm);
    c.rank_fraction = frac;
    c.init = attacks::init_from_string(init);
    c.seed = seed;
    c.grad_through = attacks::grad_through_from_string(grad_through);
    c.validate();
    LOWRANK_REQUIRE(!nuclear_matched || c.algorithm == attacks::Algorithm::kLoraPgd,
                    "--nuclear-matched requires --algo lora_pgd");
    LOWRANK_REQUIRE(batch >= 1, "--batch must be >= 1");
    return c;
  }

  std::vector<double> fractions() const {
    std::vector<double> out;
    for (const auto& s : split_list(rank_frac)) out.push_back(parse_double(s, "--rank-frac"));
    LOWRANK_REQUIRE(!out.empty(), "--rank-frac needs at least one value");
    return out;
  }

  std::string label(const AttackConfig& c) const {
    return nuclear_matched ? "lora_pgd_nuclear_matched" : attacks::to_string(c.algorithm);
  }
};

struct LoadedSource {
  std::optional<model::Model> model;
  attacks::AttackContext ctx;
};

void load_source(const AttackFlags& f, const AttackConfig& c, LoadedSource& src) {
  if (c.init != attacks::Init::kTransfer) return;
  LOWRANK_REQUIRE(!f.source_model.empty(), "--init transfer requires --source-model");
  src.model = io::load_model(f.source_model);
  src.ctx.transfer_source = &*src.model;
}

void append_images(std::vector<double>& dst, const Tensor& t) {
  dst.insert(dst.end(), t.values().begin(), t.values().end());
}

// Attacks the whole dataset batch by batch and stitches the pieces together.
attacks::AttackResult attack_dataset(const model::Model& m, const Dataset& data, const AttackConfig& cfg,
                                     bool nuclear_matched, const attacks::AttackContext& ctx,
                                     std::size_t batch) {
  const auto d = data.images.dims4();
  const analysis::AttackFn matched =
      nuclear_matched ? analysis::nuclear_matched_attack(m, cfg, ctx) : analysis::AttackFn{};
  std::vector<double> delta, u, v, adv;
  attacks::AttackResult out;
  std::size_t rank = 0;
  bool factored = false;
  NormKind factor_norm = cfg.norm_kind;
  std::uint64_t k = 0;
  for (std::size_t first = 0; first < d.b; first += batch, ++k) {
    const std::size_t count = std::min(batch, d.b - first);
    const Dataset part = data.slice(first, count);
    attacks::AttackResult r;
    if (nuclear_matched) {
      r = matched(part.images, part.labels, cfg.seed + k);
    } else {
      AttackConfig ck = cfg;
      ck.seed = cfg.seed + k;
      r = attacks::run_attack(m, part.images, part.labels, ck, ctx);
    }
    if (const auto* f = std::get_if<attacks::FactoredPerturbation>(&r.perturbation)) {
      factored = true;
      rank = f->rank;
      factor_norm = f->norm_kind;
      append_images(u, f->u);
      append_images(v, f->v);
    } else {
      append_images(delta, std::get<Tensor>(r.perturbation));
    }
    append_images(adv, r.adversarial);
    out.degenerate.insert(out.degenerate.end(), r.degenerate.begin(), r.degenerate.end());
    out.steps_executed = r.steps_executed;
  }
  out.adversarial = Tensor({d.b, d.c, d.n, d.m}, std::move(adv));
  if (factored) {
    out.perturbation = attacks::FactoredPerturbation{Tensor({d.b, d.c, d.n, rank}, std::move(u)),
                                                     Tensor({d.b, d.c, rank, d.m}, std::move(v)), rank,
                                                     cfg.tau, factor_norm};
  } else {
    out.perturbation = Tensor({d.b, d.c, d.n, d.m}, std::move(delta));
  }
  return out;
}

// ---- subcommands -----------------------------------------------------------

struct GenData {
  std::string generator = "blobs";
  std::size_t count = 1000, channels = 3, rows = 16, cols = 16, classes = 10;
  std::uint64_t seed = 0;
  std::string out;

  void add_to(CLI::App* sub) {
    sub->add_option("--generator", generator, "blobs or stripes");
    sub->add_option("--count", count, "Number of images");
    sub->add_option("--channels", channels, "C");
    sub->add_option("--rows", rows, "N");
    sub->add_option("--cols", cols, "M");
    sub->add_option("--classes", classes, "Number of classes");
    sub->add_option("--seed", seed, "Generator seed");
    sub->add_option("--out", out, "Output LRTD file")->required();
  }

  void run(Run& r) const {
    LOWRANK_REQUIRE(count >= 1 && channels >= 1 && rows >= 1 && cols >= 1, "dimensions must be positive");
    LOWRANK_REQUIRE(classes >= 2, "--classes must be >= 2");
    const Dataset d = io::synth_dataset(generator, count, channels, rows, cols, classes, seed);
    r.write_bytes(out, io::encode_dataset(d));
    r.out << "gen-data: " << count << " images " << channels << "x" << rows << "x" << cols << ", "
          << classes << " classes -> " << out << "\n";
  }
};

struct Train {
  std::string data, arch = "cnn", out;
  std::size_t classes = 0, batch = 32;
  int epochs = 10;
  double lr = 0.05;
  std::uint64_t seed = 0;
  std::string adv_algo;
  double adv_tau = 0.5;
  int adv_steps = 3;
  double adv_rank_frac = 0.1;
  std::uint64_t adv_seed = 0;

  void add_to(CLI::App* sub) {
    sub->add_option("--data", data, "Training set (LRTD)")->required();
    sub->add_option("--arch", arch, "linear, mlp or cnn");
    sub->add_option("--classes", classes, "Class count; 0 infers it from the labels");
    sub->add_option("--epochs", epochs, "Epochs");
    sub->add_option("--batch", batch, "Minibatch size");
    sub->add_option("--lr", lr, "SGD learning rate");
    sub->add_option("--seed", seed, "Initialization and shuffle seed");
    sub->add_option("--adv-algo", adv_algo, "Adversarial training attack (empty: standard training)");
    sub->add_option("--adv-tau", adv_tau, "Adversarial training budget");
    sub->add_option("--adv-steps", adv_steps, "Adversarial training attack steps");
    sub->add_option("--adv-rank-frac", adv_rank_frac, "Adversarial training rank fraction");
    sub->add_option("--adv-seed", adv_seed, "Adversarial training attack seed");
    sub->add_option("--out", out, "Output LRMD checkpoint")->required();
  }

  void run(Run& r) const {
    const Dataset d = io::load_dataset(data);
    const auto dims = d.images.dims4();
    std::size_t k = classes;
    if (k == 0) {
      for (auto l : d.labels) k = std::max<std::size_t>(k, l + 1);
      k = std::max<std::size_t>(k, 2);
    }
    for (auto l : d.labels) LOWRANK_REQUIRE(l < k, "label exceeds --classes");
    const auto spec = model::reference_spec(model::architecture_from_string(arch), dims.c, dims.n, dims.m, k);
    model::TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.batch_size = batch;
    cfg.learning_rate = lr;
    cfg.seed = seed;
    if (!adv_algo.empty()) {
      AttackConfig a;
      a.algorithm = attacks::algorithm_from_string(adv_algo);
      a.tau = adv_tau;
      a.steps = adv_steps;
      a.rank_fraction = adv_rank_frac;
      a.seed = adv_seed;
      cfg.adversarial = a;
    }
    double acc = 0.0;
    const auto log = [&](const model::EpochLog& e) {
      acc = e.accuracy;
      r.out << "epoch " << e.epoch << " loss " << analysis::format_number(e.mean_loss) << " acc "
            << analysis::format_number(e.accuracy) << "\n";
    };
    const auto params = cfg.adversarial ? model::adversarial_train(spec, d, cfg, log)
                                        : model::train_sgd(spec, d, cfg, log);
    r.write_bytes(out, io::encode_model({spec, params}));
    r.out << "train: " << arch << (cfg.adversarial ? " (adversarial)" : "") << ", " << epochs
          << " epochs, train accuracy " << percent(acc) << " -> " << out << "\n";
  }
};

struct Attack {
  std::string model_path, data, out;
  AttackFlags flags;

  void add_to(CLI::App* sub) {
    sub->add_option("--model", model_path, "Target model (LRMD)")->required();
    sub->add_option("--data", data, "Images to attack (LRTD)")->required();
    flags.add_to(sub);
    sub->add_option("--out", out, "Output LRAT file")->required();
  }

  void run(Run& r) const {
    const auto m = io::load_model(model_path);
    const Dataset d = io::load_dataset(data, m.spec.num_classes);
    const auto fr = flags.fractions();
    LOWRANK_REQUIRE(fr.size() == 1, "attack takes a single --rank-frac");
    const AttackConfig cfg = flags.config(fr[0]);
    LoadedSource src;
    load_source(flags, cfg, src);
    const auto res = attack_dataset(m, d, cfg, flags.nuclear_matched, src.ctx, flags.batch);
    const auto file = io::attack_file(res, cfg.tau, cfg.norm_kind);
    r.write_bytes(out, io::encode_attack(file));
    const std::size_t flagged = std::count(res.degenerate.begin(), res.degenerate.end(), 1);
    r.out << "attack: " << flags.label(cfg) << " on " << d.size() << " images, rank " << file.rank()
          << ", " << flagged << " degenerate -> " << out << "\n";
  }
};

struct Eval {
  std::string model_path, data, model_id, out = "robust_accuracy.csv";
  AttackFlags flags;

  void add_to(CLI::App* sub) {
    sub->add_option("--model", model_path, "Model (LRMD)")->required();
    sub->add_option("--data", data, "Evaluation set (LRTD)")->required();
    sub->add_option("--model-id", model_id, "model_id column; defaults to the model file stem");
    flags.add_to(sub);
    sub->add_option("--out", out, "Output CSV");
  }

  void run(Run& r) const {
    const auto m = io::load_model(model_path);
    const Dataset d = io::load_dataset(data, m.spec.num_classes);
    const std::string id = model_id.empty() ? fs::path(model_path).stem().string() : model_id;
    std::vector<analysis::RobustAccuracyReport> rows;
    for (double frac : flags.fractions()) {
      const AttackConfig cfg = flags.config(frac);
      LoadedSource src;
      load_source(flags, cfg, src);
      const analysis::EvalOptions opts{id, flags.batch};
      auto rep = flags.nuclear_matched
                     ? analysis::robust_accuracy(m, d, cfg, analysis::nuclear_matched_attack(m, cfg, src.ctx), opts)
                     : analysis::robust_accuracy(m, d, cfg, opts, src.ctx);
      rep.attack_label = flags.label(cfg);
      rows.push_back(std::move(rep));
      if (!attacks::is_low_rank(cfg.algorithm)) break;
    }
    r.write_text(out, analysis::robust_accuracy_csv(rows));
    r.out << "eval: " << id << " " << rows.front().attack_label << " tau " << analysis::format_number(flags.tau)
          << " steps " << flags.steps << " clean " << percent(rows.front().clean_accuracy) << " rho";
    for (const auto& row : rows) r.out << " " << percent(row.rho);
    r.out << " -> " << out << "\n";
  }
};

Tensor attacked_images(const Dataset& d, const io::AttackFile& f) {
  LOWRANK_REQUIRE(f.dims() == d.images.dims4(), "attack file dims " + shape_string(std::vector<std::size_t>{
                                                    f.dims().b, f.dims().c, f.dims().n, f.dims().m}) +
                                                    " do not match the dataset");
  attacks::AttackResult res;
  res.perturbation = f.perturbation;
  return clamp_box(d.images + res.delta(), 0.0, 1.0);
}

struct Spectrum {
  std::string data, attack_file, rule = "maxnorm-v1", out = "spectrum.csv";

  void add_to(CLI::App* sub) {
    sub->add_option("--data", data, "Clean images (LRTD)")->required();
    sub->add_option("--attack-file", attack_file, "Perturbations of those images (LRAT)")->required();
    sub->add_option("--rule", rule, "maxnorm-v1 or relmax-v1");
    sub->add_option("--out", out, "Output CSV");
  }

  void run(Run& r) const {
    const auto rl = analysis::spectrum_rule_from_string(rule);
    const Dataset d = io::load_dataset(data);
    const auto rep = analysis::spectrum_change_report(d.images, attacked_images(d, io::load_attack(attack_file)), rl);
    r.write_text(out, analysis::spectrum_csv(rep));
    r.out << "spectrum: " << rep.rule_id << " over " << rep.n_images << " images, first quartile "
          << analysis::format_number(rep.first_quartile_mean()) << ", last quartile "
          << analysis::format_number(rep.last_quartile_mean()) << " -> " << out << "\n";
  }
};

struct NucProfile {
  std::vector<std::string> attacks_in;
  std::string out = "nuclear_profile.csv";

  void add_to(CLI::App* sub) {
    sub->add_option("--attack-file", attacks_in, "label=path.lrat, repeatable")->required()->delimiter(',');
    sub->add_option("--out", out, "Output CSV");
  }

  void run(Run& r) const {
    std::string csv = "model_id,mean_nuclear_norm,n\n";
    r.out << "nuc-profile:";
    for (const auto& item : attacks_in) {
      const auto eq = item.find('=');
      const std::string label = eq == std::string::npos ? fs::path(item).stem().string() : item.substr(0, eq);
      const std::string path = eq == std::string::npos ? item : item.substr(eq + 1);
      const auto f = io::load_attack(path);
      attacks::AttackResult res;
      res.perturbation = f.perturbation;
      const double v = analysis::nuclear_profile(res.delta());
      csv += label + ',' + analysis::format_number(v) + ',' + std::to_string(f.dims().b) + '\n';
      r.out << " " << label << " " << analysis::format_number(v);
    }
    r.write_text(out, csv);
    r.out << " -> " << out << "\n";
  }
};

struct Bench {
  std::string model_path, data, algos = "pgd,lora_pgd,rank_projected_pgd", out = "resources.csv";
  double rank_frac = 0.1, tau = 0.5;
  int steps = 10, reps = 5, warmup = 1, threads = 1;
  std::size_t batch = 64;
  std::uint64_t seed = 0;
  bool no_timing = false;

  void add_to(CLI::App* sub) {
    sub->add_option("--model", model_path, "Model (LRMD)")->required();
    sub->add_option("--data", data, "Images (LRTD); the first --batch are used")->required();
    sub->add_option("--algos", algos, "Comma-separated algorithms");
    sub->add_option("--rank-frac", rank_frac, "Rank fraction for low-rank algorithms");
    sub->add_option("--tau", tau, "Budget");
    sub->add_option("--steps", steps, "Gradient steps");
    sub->add_option("--batch", batch, "Batch size");
    sub->add_option("--reps", reps, "Measured repetitions (median reported)");
    sub->add_option("--warmup", warmup, "Discarded warm-up repetitions");
    sub->add_option("--threads", threads, "Worker threads in the measured section");
    sub->add_option("--seed", seed, "Attack seed");
    sub->add_flag("--no-timing", no_timing, "Memory columns only; skip measurement");
    sub->add_option("--out", out, "Output CSV");
  }

  void run(Run& r) const {
    const auto m = io::load_model(model_path);
    const Dataset full = io::load_dataset(data, m.spec.num_classes);
    const Dataset d = full.slice(0, std::min(batch, full.size()));
    const auto dims = d.images.dims4();
    std::vector<AttackConfig> cfgs;
    for (const auto& a : split_list(algos)) {
      AttackConfig c;
      c.algorithm = attacks::algorithm_from_string(a);
      c.rank_fraction = rank_frac;
      c.tau = tau;
      c.steps = steps;
      c.seed = seed;
      c.validate();
      cfgs.push_back(c);
    }
    LOWRANK_REQUIRE(!cfgs.empty(), "--algos is empty");
    LOWRANK_REQUIRE(reps >= 1 && warmup >= 1, "bench needs --reps >= 1 and --warmup >= 1");
    analysis::ResourceReport rep;
    if (no_timing) {
      for (const auto& c : cfgs) {
        analysis::TimingRow row;
        row.algo = attacks::to_string(c.algorithm);
        row.memory = analysis::memory_estimate(
            dims.b, dims.c, dims.n, dims.m,
            attacks::is_low_rank(c.algorithm)
                ? std::optional(attacks::rank_from_fraction(c.rank_fraction, dims.n, dims.m))
                : std::nullopt);
        rep.rows.push_back(row);
      }
    } else {
      rep = analysis::timing_bench(m, d.images, d.labels, cfgs, {reps, warmup, threads});
    }
    r.write_text(out, analysis::resources_csv(rep, !no_timing));
    r.out << "bench: " << rep.rows.size() << " algorithms on " << dims.b << " images -> " << out << "\n";
    if (!no_timing) {
      auto sorted = rep.rows;
      std::ranges::sort(sorted, {}, &analysis::TimingRow::median_ms);
      r.out << "ordering:";
      for (std::size_t i = 0; i < sorted.size(); ++i)
        r.out << (i ? " < " : " ") << sorted[i].algo << " (" << percent(sorted[i].median_ms) << " ms)";
      r.out << "\n";
    }
  }
};

struct Render {
  std::string data, attack_file, out;
  std::size_t index = 0;

  void add_to(CLI::App* sub) {
    sub->add_option("--data", data, "Images (LRTD)")->required();
    sub->add_option("--attack-file", attack_file, "Optional perturbations (LRAT) to apply first");
    sub->add_option("--index", index, "Image index");
    sub->add_option("--out", out, "Output PPM")->required();
  }

  void run(Run& r) const {
    const Dataset d = io::load_dataset(data);
    LOWRANK_REQUIRE(index < d.size(), "--index out of range");
    const Tensor img = attack_file.empty() ? d.images : attacked_images(d, io::load_attack(attack_file));
    r.write_bytes(out, io::encode_ppm(img, index));
    r.out << "render: image " << index << (attack_file.empty() ? "" : " (attacked)") << " -> " << out << "\n";
  }
};

constexpr const char* kFormatsText =
    "All integers and floats little-endian; every file ends with CRC32 (0xEDB88320, reflected)\n"
    "of all preceding bytes.\n"
    "LRTD dataset:  'LRTD' u32 version, u32 D C N M | f32 pixels[D*C*N*M] in [0,1] | u32 labels[D] | u32 crc\n"
    "LRAT attack:   'LRAT' u32 version, u8 kind (0 full, 1 factored), u32 D C N M, u32 rank (0 when full),\n"
    "               f64 tau, u8 norm (0 frobenius, 1 linf, 2 nuclear)\n"
    "               | full: f32[D*C*N*M] | factored: f32 U[D*C*N*r] then f32 V[D*C*r*M] | u32 crc\n"
    "LRMD model:    'LRMD' u32 version, u32 C N M, u32 classes, u32 layer_count,\n"
    "               per layer: u8 kind, u32 in out kernel stride pad |\n"
    "               u64 seed, u64 param_count | per layer f32 weights then f32 biases | u32 crc\n";

struct Formats {
  std::string inspect, out;

  void add_to(CLI::App* sub) {
    sub->add_option("--inspect", inspect, "Validate a file and print its header as JSON");
    sub->add_option("--out", out, "Also write the output to this file");
  }

  static json describe(const fs::path& p) {
    const io::Bytes bytes = io::read_file(p);
    const std::string magic(bytes.begin(), bytes.begin() + std::min<std::size_t>(4, bytes.size()));
    json j;
    j["file"] = p.string();
    j["magic"] = magic;
    j["bytes"] = bytes.size();
    if (magic == "LRTD") {
      const Dataset d = io::decode_dataset(bytes);
      const auto dims = d.images.dims4();
      j["dims"] = {dims.b, dims.c, dims.n, dims.m};
    } else if (magic == "LRAT") {
      const auto f = io::decode_attack(bytes);
      const auto dims = f.dims();
      j["kind"] = f.kind() == io::AttackKind::kFull ? "full" : "factored";
      j["dims"] = {dims.b, dims.c, dims.n, dims.m};
      j["rank"] = f.rank();
      j["tau"] = f.tau;
      j["norm"] = to_string(f.norm_kind);
      j["payload_bytes"] = io::attack_payload_bytes(f.kind(), dims, f.rank());
    } else if (magic == "LRMD") {
      const auto m = io::decode_model(bytes);
      j["input"] = m.spec.input_dims;
      j["classes"] = m.spec.num_classes;
      j["layers"] = m.spec.layers.size();
      j["parameters"] = m.params.parameter_count();
    } else {
      throw IoError(IoErrorKind::kBadMagic, 0, "unknown magic in " + p.string());
    }
    return j;
  }

  void run(Run& r) const {
    const std::string text = inspect.empty() ? std::string(kFormatsText) : describe(inspect).dump(2) + "\n";
    r.out << text;
    if (!out.empty()) r.write_text(out, text);
  }
};

// ---- manifest --------------------------------------------------------------

json flags_of(const CLI::App& sub) {
  json j = json::object();
  for (const CLI::Option* opt : sub.get_options()) {
    if (opt->get_lnames().empty()) continue;
    const std::string& name = opt->get_lnames().front();
    if (name == "help") continue;
    if (opt->get_expected_min() == 0) {
      j[name] = opt->count() > 0;
    } else if (opt->count() > 0) {
      std::string joined;
      for (const auto& v : opt->results()) joined += (joined.empty() ? "" : ",") + v;
      j[name] = joined;
    } else {
      j[name] = opt->get_default_str();
    }
  }
  return j;
}

std::vector<std::string> args_from_manifest(const json& m) {
  LOWRANK_REQUIRE(m.is_object() && m.contains("subcommand") && m.contains("flags"),
                  "manifest needs 'subcommand' and 'flags'");
  std::vector<std::string> args{m.at("subcommand").get<std::string>()};
  for (const auto& [name, value] : m.at("flags").items()) {
    if (value.is_boolean()) {
      if (value.get<bool>()) args.push_back("--" + name);
    } else {
      const std::string s = value.get<std::string>();
      if (s.empty()) continue;
      args.push_back("--" + name);
      args.push_back(s);
    }
  }
  return args;
}

json read_manifest(const fs::path& p) {
  const io::Bytes bytes = io::read_file(p);
  json m = json::parse(bytes.begin(), bytes.end(), nullptr, false);
  LOWRANK_REQUIRE(!m.is_discarded(), "manifest " + p.string() + " is not valid JSON");
  return m;
}

void apply_thread_override() {
  if (const char* env = std::getenv("LOWRANK_THREADS")) {
    int n = 0;
    const std::string_view s(env);
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), n);
    LOWRANK_REQUIRE(ec == std::errc() && p == s.data() + s.size() && n >= 1,
                    "LOWRANK_THREADS must be a positive integer");
    set_thread_count(n);
  }
}

int run_app(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Low-rank adversarial attacks on desk-scale image classifiers", "lowrank"};
  app.option_defaults()->always_capture_default();
  app.set_version_flag("--version", std::string(version()));
  std::string manifest;
  app.add_option("--manifest", manifest, "Replay a RunManifest JSON");

  GenData gen;
  Train train;
  Attack attack;
  Eval eval;
  Spectrum spectrum;
  NucProfile nuc;
  Bench bench;
  Render render;
  Formats formats;

  std::vector<std::pair<CLI::App*, std::function<void(Run&)>>> subs;
  const auto reg = [&](const char* name, const char* help, auto& cmd) {
    CLI::App* sub = app.add_subcommand(name, help);
    cmd.add_to(sub);
    subs.emplace_back(sub, [&cmd](Run& r) { cmd.run(r); });
  };
  reg("gen-data", "Generate a synthetic dataset", gen);
  reg("train", "Train a reference classifier (optionally adversarially)", train);
  reg("attack", "Attack a dataset and store the perturbations", attack);
  reg("eval", "Robust accuracy under an attack", eval);
  reg("spectrum", "Singular-value change profile of stored attacks", spectrum);
  reg("nuc-profile", "Mean nuclear norm of stored attacks", nuc);
  reg("bench", "Time attacks and report memory use", bench);
  reg("render", "Write one (optionally attacked) image as PPM", render);
  reg("formats", "Describe the binary formats or inspect a file", formats);
  app.require_subcommand(0, 1);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::Success& e) {
    if (dynamic_cast<const CLI::CallForHelp*>(&e) || dynamic_cast<const CLI::CallForAllHelp*>(&e)) {
      const auto parsed = app.get_subcommands();
      out << (parsed.empty() ? app.help() : parsed.front()->help());
    } else {
      out << version() << "\n";
    }
    return 0;
  } catch (const CLI::ParseError& e) {
    const auto parsed = app.get_subcommands();
    err << "error[usage]: " << e.what() << "\n" << (parsed.empty() ? app.help() : parsed.front()->help());
    return 1;
  }

  if (!manifest.empty()) {
    LOWRANK_REQUIRE(app.get_subcommands().empty(), "--manifest cannot be combined with a subcommand");
    const auto replay = args_from_manifest(read_manifest(manifest));
    return run_app(replay, out, err);
  }
  if (app.get_subcommands().empty()) {
    err << "error[usage]: a subcommand is required\n" << app.help();
    return 1;
  }

  apply_thread_override();
  CLI::App* chosen = app.get_subcommands().front();
  for (auto& [sub, fn] : subs) {
    if (sub != chosen) continue;
    Run r{out, {}};
    fn(r);
    if (!r.outputs.empty()) {
      json m;
      m["subcommand"] = sub->get_name();
      m["version"] = version();
      m["flags"] = flags_of(*sub);
      m["seed"] = m["flags"].contains("seed") ? m["flags"]["seed"] : json(nullptr);
      m["outputs"] = r.outputs;
      const fs::path mp = fs::path(r.outputs.front()).string() + ".manifest.json";
      io::write_text_atomic(mp, m.dump(2) + "\n");
      out << "manifest: " << mp.string() << "\n";
    }
  }
  return 0;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    return run_app(args, out, err);
  } catch (const IoError& e) {
    err << "error[io:" << to_string(e.kind()) << "] at offset " << e.offset() << ": " << e.what() << "\n";
    return 2;
  } catch (const ContractViolation& e) {
    err << "error[contract]: " << e.what() << "\n";
    return 1;
  } catch (const TrainingDiverged& e) {
    err << "error[diverged]: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace lowrank::cli
