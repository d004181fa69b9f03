#include "app.hpp"

#include "server.hpp"

#include "matattr/attrmodel.hpp"
#include "matattr/attrspace.hpp"
#include "matattr/logicreg.hpp"
#include "matattr/macheads.hpp"
#include "matattr/matclass.hpp"
#include "matattr/patchlab.hpp"
#include "matattr/perception.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

namespace matattr::cli {

using nlohmann::json;
namespace fs = std::filesystem;

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Dimension:
    case ErrorKind::MissingCategory:
    case ErrorKind::OutOfRange: return 2;
    case ErrorKind::Numerical: return 3;
    default: return 1;
  }
}

std::uint64_t resolve_seed(bool flag_given, std::uint64_t flag_value) {
  if (flag_given) return flag_value;
  if (const char* env = std::getenv("PERCEPT_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      const std::uint64_t v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    fail(ErrorKind::InvalidInput, std::string("PERCEPT_SEED is not an unsigned integer: '") + env + "'");
  }
  return flag_value;
}

fs::path resolve_input(const std::string& path) {
  const fs::path p(path);
  if (p.is_relative())
    if (const char* dir = std::getenv("PERCEPT_DATA_DIR"); dir && *dir) return fs::path(dir) / p;
  return p;
}

RunManifest::RunManifest(std::string command, json config, std::uint64_t seed)
    : command_(std::move(command)), config_(std::move(config)), seed_(seed) {}

fs::path RunManifest::input(const std::string& path) {
  const fs::path p = resolve_input(path);
  require(fs::exists(p), ErrorKind::Io, "input " + p.string() + " does not exist");
  inputs_.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
  return p;
}

void RunManifest::output(const fs::path& path) {
  outputs_.push_back({{"path", path.string()}, {"sha256", sha256_file(path)}});
  output_paths_.push_back(path);
}

std::string RunManifest::config_hash() const {
  return sha256_hex(json{{"command", command_}, {"config", config_}, {"seed", seed_}}.dump());
}

json RunManifest::stamp() const { return {{"seed", seed_}, {"config_hash", config_hash()}}; }

fs::path RunManifest::finish(const fs::path& path) const {
  fs::path target = path;
  if (target.empty()) {
    require(!output_paths_.empty(), ErrorKind::InvalidInput, "no outputs to anchor the manifest");
    target = output_paths_.front().string() + ".manifest.json";
  }
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  const json m = {{"command", command_}, {"config", config_},   {"config_hash", config_hash()},
                  {"seed", seed_},       {"inputs", inputs_},   {"outputs", outputs_},
                  {"wall_time_s", wall}};
  write_file_atomic(target, m.dump(2) + "\n");
  return target;
}

namespace {

// ---------------------------------------------------------------------------
// Shared file helpers

struct IndexRow {
  std::string id, category, region, split;
};

struct PatchIndex {
  std::vector<std::string> categories;  // sorted, as in load_dataset
  std::vector<IndexRow> rows;
  std::map<std::string, std::size_t> by_id;

  int category_of(const std::string& id) const {
    const auto& name = rows.at(by_id.at(id)).category;
    return static_cast<int>(std::lower_bound(categories.begin(), categories.end(), name) - categories.begin());
  }
};

// Patch metadata without decoding any image.
PatchIndex read_index(const fs::path& path) {
  PatchIndex idx;
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open patch index " + path.string());
  std::set<std::string> names;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (trim(line).empty()) continue;
    try {
      const json j = json::parse(line);
      IndexRow r;
      r.id = j.at("id").get<std::string>();
      r.category = j.at("category").get<std::string>();
      r.region = j.value("region", r.id);
      r.split = j.value("split", std::string());
      if (!idx.by_id.emplace(r.id, idx.rows.size()).second) throw std::invalid_argument("duplicate patch id " + r.id);
      names.insert(r.category);
      idx.rows.push_back(std::move(r));
    } catch (const std::exception& e) {
      fail(ErrorKind::Parse, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  idx.categories.assign(names.begin(), names.end());
  return idx;
}

struct LabeledMatrix {
  std::vector<std::string> header;  // column names after "id"
  std::vector<std::string> ids;
  Matrix values;
};

std::string labeled_csv(const std::vector<std::string>& header, const std::vector<std::string>& ids, const Matrix& m) {
  std::string out = "id";
  for (const auto& h : header) out += "," + h;
  out += "\n";
  for (Index r = 0; r < m.rows(); ++r) {
    out += ids[static_cast<std::size_t>(r)];
    for (Index c = 0; c < m.cols(); ++c) out += "," + format_double(m(r, c));
    out += "\n";
  }
  return out;
}

LabeledMatrix read_labeled_csv(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  LabeledMatrix out;
  require(static_cast<bool>(std::getline(in, line)), ErrorKind::Parse, path.string() + ":1: empty file");
  auto head = split(trim(line), ',');
  require(head.size() >= 2 && trim(head[0]) == "id", ErrorKind::Parse,
          path.string() + ":1: header must be id followed by at least one column");
  for (std::size_t i = 1; i < head.size(); ++i) out.header.push_back(trim(head[i]));
  std::vector<std::vector<double>> rows;
  for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
    if (trim(line).empty()) continue;
    const auto cells = split(trim(line), ',');
    if (cells.size() != head.size())
      fail(ErrorKind::Dimension, path.string() + ":" + std::to_string(lineno) + ": expected " +
                                     std::to_string(head.size()) + " columns, got " + std::to_string(cells.size()));
    out.ids.push_back(trim(cells[0]));
    std::vector<double> row;
    for (std::size_t c = 1; c < cells.size(); ++c) {
      try {
        std::size_t used = 0;
        const std::string cell = trim(cells[c]);
        row.push_back(std::stod(cell, &used));
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        fail(ErrorKind::Parse, path.string() + ":" + std::to_string(lineno) + ": bad number '" + cells[c] + "'");
      }
    }
    rows.push_back(std::move(row));
  }
  out.values.resize(static_cast<Index>(rows.size()), static_cast<Index>(out.header.size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) out.values(static_cast<Index>(r), static_cast<Index>(c)) = rows[r][c];
  return out;
}

void check_A_matches(const attrspace::CategoryAttributeMatrix& A, const std::vector<std::string>& categories) {
  require_dims(A.categories(), static_cast<Index>(categories.size()), "rows of A vs dataset categories");
  bool default_names = true;
  for (std::size_t k = 0; k < A.names.size(); ++k) default_names &= A.names[k] == "c" + std::to_string(k);
  if (!default_names)
    for (std::size_t k = 0; k < A.names.size(); ++k)
      require(A.names[k] == categories[k], ErrorKind::Dimension,
              "A row " + std::to_string(k) + " is '" + A.names[k] + "' but the dataset has '" + categories[k] + "'");
}

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

void write_stamped(const fs::path& path, const std::string& model_json, const json& stamp) {
  json j = json::parse(model_json);
  j["run"] = stamp;
  write_json(path, j);
}

std::vector<std::string> attribute_header(Index m, const char* prefix) {
  std::vector<std::string> h;
  for (Index i = 0; i < m; ++i) h.push_back(prefix + std::to_string(i));
  return h;
}

// Images and categories of one split, optionally without one category
// (indices above it shift down).
struct ImageSet {
  std::vector<patchlab::Image> images;
  std::vector<int> categories;
};

ImageSet select_images(const patchlab::Dataset& ds, const std::string& split_name, int exclude) {
  ImageSet s;
  for (const auto& p : ds.patches) {
    if (!split_name.empty() && p.split != split_name) continue;
    if (p.category == exclude) continue;
    s.images.push_back(p.pixels);
    s.categories.push_back(exclude >= 0 && p.category > exclude ? p.category - 1 : p.category);
  }
  require(!s.images.empty(), ErrorKind::InvalidInput, "no patches in split '" + split_name + "'");
  return s;
}

int category_index(const std::vector<std::string>& categories, const std::string& name) {
  auto it = std::find(categories.begin(), categories.end(), name);
  require(it != categories.end(), ErrorKind::InvalidInput, "unknown category '" + name + "'");
  return static_cast<int>(it - categories.begin());
}

Matrix drop_row(const Matrix& m, Index row) {
  Matrix out(m.rows() - 1, m.cols());
  for (Index r = 0, o = 0; r < m.rows(); ++r)
    if (r != row) out.row(o++) = m.row(r);
  return out;
}

void add_mac_options(CLI::App* cmd, macheads::MacConfig& cfg) {
  cmd->add_option("--epochs", cfg.epochs, "maximum training epochs")->capture_default_str();
  cmd->add_option("--batch-size", cfg.batch_size)->capture_default_str();
  cmd->add_option("--step-size", cfg.step_size)->capture_default_str();
  cmd->add_option("--momentum", cfg.momentum)->capture_default_str();
  cmd->add_option("--w-u", cfg.w_u, "weight of the mean-matching loss per head")->capture_default_str();
  cmd->add_option("--w-d", cfg.w_d, "weight of the KL-of-KDE loss")->capture_default_str();
  cmd->add_option("--channels", cfg.channels, "conv channels per level")->delimiter(',')->capture_default_str();
}

json mac_config_json(const macheads::MacConfig& c) {
  return {{"epochs", c.epochs},   {"batch_size", c.batch_size}, {"step_size", c.step_size}, {"momentum", c.momentum},
          {"w_u", c.w_u},         {"w_d", c.w_d},               {"channels", c.channels},   {"use_heads", c.use_heads}};
}

// Subcommands register themselves with an action to run after parsing.
struct Command {
  CLI::App* app;
  CLI::Option* seed_flag = nullptr;
  std::uint64_t seed = 0;
  std::string manifest;
  std::function<void(Command&)> action;

  std::uint64_t resolved_seed() const { return resolve_seed(seed_flag && seed_flag->count() > 0, seed); }
  void finish(const RunManifest& m) const {
    const fs::path p = m.finish(manifest);
    std::cerr << "manifest: " << p.string() << "\n";
  }
};

Command& add_command(CLI::App& app, std::vector<std::unique_ptr<Command>>& commands, const std::string& name,
                     const std::string& help, bool seeded = true) {
  auto c = std::make_unique<Command>();
  c->app = app.add_subcommand(name, help);
  if (seeded) c->seed_flag = c->app->add_option("--seed", c->seed, "random seed (default: PERCEPT_SEED or 0)");
  c->app->add_option("--manifest", c->manifest, "manifest path (default: <first output>.manifest.json)");
  commands.push_back(std::move(c));
  return *commands.back();
}

// ---------------------------------------------------------------------------
// Subcommands

void register_synth(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  struct Opts {
    int categories = 5, latent = 6, per_category = 100, test_per_category = 0, side = 32;
    int train_regions = 0, test_regions = 0, patches_per_region = 50;
    double nuisance = 0.0;
    std::string out;
  };
  auto o = std::make_shared<Opts>();
  auto& c = add_command(app, cmds, "synth", "generate a synthetic texture dataset");
  c.app->add_option("--categories", o->categories)->capture_default_str();
  c.app->add_option("--latent", o->latent, "latent attributes per category")->capture_default_str();
  c.app->add_option("--per-category", o->per_category, "training patches per category")->capture_default_str();
  c.app->add_option("--test-per-category", o->test_per_category)->capture_default_str();
  c.app->add_option("--train-regions", o->train_regions, "regions per category (region mode)")->capture_default_str();
  c.app->add_option("--test-regions", o->test_regions)->capture_default_str();
  c.app->add_option("--patches-per-region", o->patches_per_region)->capture_default_str();
  c.app->add_option("--side", o->side, "patch side in pixels")->capture_default_str();
  c.app->add_option("--nuisance", o->nuisance, "per-region illumination strength")->capture_default_str();
  c.app->add_option("--out", o->out, "output directory")->required();
  c.action = [o](Command& self) {
    const std::uint64_t seed = self.resolved_seed();
    json cfg = {{"categories", o->categories},       {"latent", o->latent},
                {"per_category", o->per_category},   {"test_per_category", o->test_per_category},
                {"train_regions", o->train_regions}, {"test_regions", o->test_regions},
                {"patches_per_region", o->patches_per_region}, {"side", o->side},
                {"nuisance", o->nuisance}};
    RunManifest m("synth", cfg, seed);
    auto spec = patchlab::default_synthetic_spec(o->categories, o->latent, seed);
    spec.nuisance = o->nuisance;
    auto test_spec = spec;
    test_spec.seed = derive_seed(seed, 0x7E57);

    patchlab::Dataset ds;
    ds.categories = spec.names;
    auto add = [&](patchlab::SyntheticSet set, const std::string& split_name) {
      for (auto& p : set.patches) {
        p.id = split_name + "-" + p.id;
        p.region = split_name + "-" + p.region;
        p.split = split_name;
        ds.patches.push_back(std::move(p));
      }
    };
    if (o->train_regions > 0) {
      add(patchlab::generate_regions(spec, o->train_regions, o->patches_per_region, o->side), "train");
      if (o->test_regions > 0)
        add(patchlab::generate_regions(test_spec, o->test_regions, o->patches_per_region, o->side), "test");
    } else {
      add(patchlab::generate_synthetic(spec, o->per_category, o->side), "train");
      if (o->test_per_category > 0) add(patchlab::generate_synthetic(test_spec, o->test_per_category, o->side), "test");
    }
    const fs::path dir(o->out);
    patchlab::save_dataset(dir, ds);
    m.output(dir / "index.jsonl");

    perception::DistanceMatrix sim{spec.names, patchlab::similarity_from_latent(spec.latent)};
    write_file_atomic(dir / "similarity.csv", perception::distance_csv(sim));
    m.output(dir / "similarity.csv");
    write_file_atomic(dir / "latent.csv",
                      labeled_csv(attribute_header(spec.latent.cols(), "z"), spec.names, spec.latent));
    m.output(dir / "latent.csv");
    self.finish(m);
  };
}

void register_tasks(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  struct Opts {
    std::string dataset, out;
    int count = 100;
  };
  auto o = std::make_shared<Opts>();
  auto& c = add_command(app, cmds, "tasks", "build a similarity task pool from a patch dataset");
  c.app->add_option("--dataset", o->dataset, "patch index (index.jsonl)")->required();
  c.app->add_option("--count", o->count, "number of tasks")->capture_default_str();
  c.app->add_option("--out", o->out, "task pool (JSON lines)")->required();
  c.action = [o](Command& self) {
    RunManifest m("tasks", {{"count", o->count}}, self.resolved_seed());
    const auto ds = patchlab::load_dataset(m.input(o->dataset));
    write_file_atomic(o->out, perception::to_jsonl(perception::make_tasks(ds, o->count, m.seed())));
    m.output(o->out);
    self.finish(m);
  };
}

void register_simulate(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  struct Opts {
    std::string similarity, out_tasks, out_annotations;
    int tasks = 10000, annotators = 10;
  };
  auto o = std::make_shared<Opts>();
  auto& c = add_command(app, cmds, "simulate", "simulate annotators on synthetic similarity tasks");
  c.app->add_option("--similarity", o->similarity, "K x K similarity CSV with a name header")->required();
  c.app->add_option("--tasks", o->tasks, "number of tasks")->capture_default_str();
  c.app->add_option("--annotators", o->annotators, "annotators per task")->capture_default_str();
  c.app->add_option("--out-tasks", o->out_tasks)->required();
  c.app->add_option("--out-annotations", o->out_annotations)->required();
  c.action = [o](Command& self) {
    RunManifest m("simulate", {{"tasks", o->tasks}, {"annotators", o->annotators}}, self.resolved_seed());
    const fs::path in = m.input(o->similarity);
    const auto sim = perception::parse_distance_csv(read_file(in), in.string());
    const auto out = perception::simulate_annotations(sim.d, o->tasks, o->annotators, m.seed());
    write_file_atomic(o->out_annotations, perception::to_jsonl(out.records));
    write_file_atomic(o->out_tasks, perception::to_jsonl(out.tasks));
    m.output(o->out_annotations);
    m.output(o->out_tasks);
    self.finish(m);
  };
}

void register_aggregate(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  struct Opts {
    std::string tasks, annotations, out;
    int quorum = 10, min_agree = 5;
    bool skip_incomplete = false;
  };
  auto o = std::make_shared<Opts>();
  auto& c = add_command(app, cmds, "aggregate", "majority-vote annotations into binary similarity vectors", false);
  c.app->add_option("--tasks", o->tasks, "task pool")->required();
  c.app->add_option("--annotations", o->annotations, "annotation log")->required();
  c.app->add_option("--quorum", o->quorum, "votes required per task")->capture_default_str();
  c.app->add_option("--min-agree", o->min_agree, "votes needed for a 1")->capture_default_str();
  c.app->add_flag("--skip-incomplete", o->skip_incomplete, "drop tasks below quorum instead of failing");
  c.app->add_option("--out", o->out)->required();
  c.action = [o](Command& self) {
    RunManifest m("aggregate",
                  {{"quorum", o->quorum}, {"min_agree", o->min_agree}, {"skip_incomplete", o->skip_incomplete}}, 0);
    const auto tasks = perception::read_tasks(m.input(o->tasks));
    const auto records = perception::read_annotations(m.input(o->annotations));
    const auto agg = perception::aggregate_all(tasks, records, {o->quorum, o->min_agree}, o->skip_incomplete);
    write_file_atomic(o->out, perception::to_jsonl(agg));
    m.output(o->out);
    self.finish(m);
  };
}

void register_distances(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  struct Opts {
    std::string aggregated, names, dataset, out, convergence;
    std::vector<int> checkpoints{100, 500, 1000, 5000};
  };
  auto o = std::make_shared<Opts>();
  auto& c = add_command(app, cmds, "distances", "category prototypes and the perceptual distance matrix");
  c.app->add_option("--aggregated", o->aggregated, "aggregated records")->required();
  c.app->add_option("--names", o->names, "comma-separated category names");
  c.app->add_option("--dataset", o->dataset, "take category names from a patch index");
  c.app->add_option("--out", o->out, "distance CSV")->required();
  c.app->add_option("--convergence", o->convergence, "also write the convergence curve JSON here");
  auto* checkpoints = c.app->add_option("--checkpoints", o->checkpoints, "record counts for the convergence curve")
      ->delimiter(',')
      ->capture_default_str();
  c.action = [o, checkpoints](Command& self) {
    RunManifest m("distances", {{"names", o->names}, {"checkpoints", o->checkpoints}}, self.resolved_seed());
    const auto records = perception::read_aggregated(m.input(o->aggregated));
    require(!records.empty(), ErrorKind::InvalidInput, "no aggregated records");
    const int K = static_cast<int>(records.front().s.size());
    std::vector<std::string> names;
    if (!o->names.empty())
      for (const auto& n : split(o->names, ',')) names.push_back(trim(n));
    else if (!o->dataset.empty())
      names = read_index(m.input(o->dataset)).categories;
    const auto D = perception::distance_matrix(perception::category_prototypes(records, K), names);
    write_file_atomic(o->out, perception::distance_csv(D));
    m.output(o->out);
    if (!o->convergence.empty()) {
      const auto shuffled = perception::shuffled(records, m.seed());
      std::vector<int> points = o->checkpoints;
      if (checkpoints->count() == 0)  // defaults beyond the record count are dropped
        std::erase_if(points, [&](int n) { return n > static_cast<int>(records.size()); });
      json curve = json::array();
      for (const auto& [n, diff] : perception::convergence_curve(shuffled, K, points))
        curve.push_back({{"records", n}, {"relative_difference", diff}});
      write_json(o->convergence, {{"curve", curve}, {"run", m.stamp()}});
      m.output(o->convergence);
    }
    self.finish(m);
  };
}

void register_embed(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  struct Opts {
    std::string distances, out;
    attrspace::AttrSpaceConfig cfg;
  };
  auto o = std::make_shared<Opts>();
  auto& c = add_command(app, cmds, "embed", "optimize the category-attribute matrix A");
  c.app->add_option("--distances", o->distances, "distance CSV")->required();
  c.app->add_option("--attributes", o->cfg.num_attributes, "number of attributes M")->capture_default_str();
  c.app->add_option("--w-a", o->cfg.weight, "weight of the Beta KL term")->capture_default_str();
  c.app->add_option("--restarts", o->cfg.restarts)->capture_default_str();
  c.app->add_option("--iterations", o->cfg.max_iterations)->capture_default_str();
  c.app->add_option("--out", o->out, "A CSV (a JSON sidecar is written next to it)")->required();
  c.action = [o](Command& self) {
    auto cfg = o->cfg;
    cfg.seed = self.resolved_seed();
    RunManifest m("embed",
                  {{"attributes", cfg.num_attributes}, {"w_a", cfg.weight}, {"restarts", cfg.restarts},
                   {"iterations", cfg.max_iterations}},
                  cfg.seed);
    const fs::path in = m.input(o->distances);
    const auto D = perception::parse_distance_csv(read_file(in), in.string());
    const attrspace::KdeConfig kde;
    const auto result = attrspace::optimize_A(D, cfg, kde);
    if (!std::isfinite(result.trace.final.total)) fail(ErrorKind::Numerical, "embedding objective is not finite");
    attrspace::save_A(o->out, result.A, cfg, kde);
    m.output(o->out);
    m.output(attrspace::sidecar_path(o->out));
    std::cerr << "stress " << result.trace.final.stress << " kl " << result.trace.final.kl << "\n";
    self.finish(m);
  };
}

void register_features(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  struct Opts {
    std::string dataset, out;
    bool csv = false;
  };
  auto o = std::make_shared<Opts>();
  auto& c = add_command(app, cmds, "features", "extract raw patch descriptors", false);
  c.app->add_option("--dataset", o->dataset, "patch index")->required();
  c.app->add_option("--out", o->out, "feature file")->required();
  c.app->add_flag("--csv", o->csv, "write CSV instead of the binary format");
  c.action = [o](Command& self) {
    const patchlab::DescriptorRecipe recipe;
    RunManifest m("features", {{"recipe", recipe.id()}, {"csv", o->csv}}, 0);
    const auto ds = patchlab::load_dataset(m.input(o->dataset));
    std::vector<patchlab::FeatureVector> feats;
    for (const auto& p : ds.patches) feats.push_back(patchlab::extract_features(p, recipe));
    if (o->csv)
      write_file_atomic(o->out, patchlab::features_to_csv(feats));
    else
      patchlab::write_features(o->out, feats);
    m.output(o->out);
    self.finish(m);
  };
}

// Feature rows of the patches in `split_name` (all when empty), in file order.
struct FeatureRows {
  std::vector<std::string> ids;
  Matrix X;
  std::vector<int> categories;
};

FeatureRows select_features(const std::vector<patchlab::FeatureVector>& feats, const PatchIndex& idx,
                            const std::string& split_name) {
  FeatureRows out;
  std::vector<patchlab::FeatureVector> kept;
  for (const auto& f : feats) {
    require(idx.by_id.count(f.patch_id) > 0, ErrorKind::InvalidInput, "patch " + f.patch_id + " is not in the index");
    if (!split_name.empty() && idx.rows[idx.by_id.at(f.patch_id)].split != split_name) continue;
    out.ids.push_back(f.patch_id);
    out.categories.push_back(idx.category_of(f.patch_id));
    kept.push_back(f);
  }
  require(!kept.empty(), ErrorKind::InvalidInput, "no feature rows in split '" + split_name + "'");
  out.X = patchlab::stack(kept);
  return out;
}

void register_train(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  struct Opts {
    std::string features, dataset, a, out, split = "train";
    attrmodel::TrainConfig cfg;
    bool squared = false;
  };
  auto o = std::make_shared<Opts>();
  auto& c = add_command(app, cmds, "train", "train the two-layer attribute predictor");
  c.app->add_option("--features", o->features, "feature file")->required();
  c.app->add_option("--dataset", o->dataset, "patch index (categories and splits)")->required();
  c.app->add_option("--A", o->a, "category-attribute matrix CSV")->required();
  c.app->add_option("--split", o->split, "train on this split only (empty: all)")->capture_default_str();
  c.app->add_option("--hidden", o->cfg.hidden)->capture_default_str();
  c.app->add_option("--w1", o->cfg.w1, "distribution term weight")->capture_default_str();
  c.app->add_option("--w2", o->cfg.w2, "separation term weight")->capture_default_str();
  c.app->add_option("--mask-fraction", o->cfg.mask_fraction)->capture_default_str();
  c.app->add_option("--batch-size", o->cfg.batch_size)->capture_default_str();
  c.app->add_option("--step-size", o->cfg.step_size)->capture_default_str();
  c.app->add_option("--momentum", o->cfg.momentum)->capture_default_str();
  c.app->add_option("--epochs", o->cfg.epochs)->capture_default_str();
  c.app->add_option("--unmasked-epochs", o->cfg.unmasked_epochs)->capture_default_str();
  c.app->add_flag("--squared-separation", o->squared, "use the literal squared separation weights");
  c.app->add_option("--out", o->out, "model JSON")->required();
  c.action = [o](Command& self) {
    auto cfg = o->cfg;
    cfg.seed = self.resolved_seed();
    cfg.separation = o->squared ? attrmodel::SeparationForm::Squared : attrmodel::SeparationForm::Signed;
    RunManifest m("train",
                  {{"split", o->split}, {"hidden", cfg.hidden}, {"w1", cfg.w1}, {"w2", cfg.w2},
                   {"mask_fraction", cfg.mask_fraction}, {"batch_size", cfg.batch_size}, {"step_size", cfg.step_size},
                   {"momentum", cfg.momentum}, {"epochs", cfg.epochs}, {"unmasked_epochs", cfg.unmasked_epochs}, {"squared", o->squared}},
                  cfg.seed);
    const auto feats = patchlab::read_features(m.input(o->features));
    const auto idx = read_index(m.input(o->dataset));
    const auto A = attrspace::load_A(m.input(o->a));
    check_A_matches(A, idx.categories);
    const auto rows = select_features(feats, idx, o->split);
    const auto result = attrmodel::train(rows.X, rows.categories, A.a, cfg);
    write_stamped(o->out, attrmodel::model_to_json(result.model, cfg), m.stamp());
    m.output(o->out);
    self.finish(m);
  };
}

void register_predict(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  struct Opts {
    std::string model, features, out;
  };
  auto o = std::make_shared<Opts>();
  auto& c = add_command(app, cmds, "predict", "per-patch attribute predictions", false);
  c.app->add_option("--model", o->model, "attribute model JSON")->required();
  c.app->add_option("--features", o->features, "feature file")->required();
  c.app->add_option("--out", o->out, "predictions CSV")->required();
  c.action = [o](Command& self) {
    RunManifest m("predict", json::object(), 0);
    const auto model = attrmodel::load_model(m.input(o->model));
    const auto feats = patchlab::read_features(m.input(o->features));
    std::vector<std::string> ids;
    for (const auto& f : feats) ids.push_back(f.patch_id);
    const Matrix P = attrmodel::forward(model, patchlab::stack(feats));
    write_file_atomic(o->out, labeled_csv(attribute_header(P.cols(), "a"), ids, P));
    m.output(o->out);
    self.finish(m);
  };
}

// Region-level rows: attribute histograms or mean raw features.
struct RegionRows {
  std::vector<std::string> regions;
  std::vector<int> labels;
  Matrix X;
};

RegionRows region_rows(const std::vector<std::string>& ids, const Matrix& values, const PatchIndex& idx,
                       const std::string& split_name, int bins) {
  std::map<std::string, std::vector<Index>> groups;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(idx.by_id.count(ids[i]) > 0, ErrorKind::InvalidInput, "patch " + ids[i] + " is not in the index");
    const auto& row = idx.rows[idx.by_id.at(ids[i])];
    if (row.split == split_name) groups[row.region].push_back(static_cast<Index>(i));
  }
  require(!groups.empty(), ErrorKind::InvalidInput, "no regions in split '" + split_name + "'");
  RegionRows out;
  std::vector<Vector> rows;
  for (const auto& [region, members] : groups) {
    Matrix P(static_cast<Index>(members.size()), values.cols());
    for (std::size_t i = 0; i < members.size(); ++i) P.row(static_cast<Index>(i)) = values.row(members[i]);
    const int label = idx.category_of(ids[static_cast<std::size_t>(members.front())]);
    for (Index i : members)
      require(idx.category_of(ids[static_cast<std::size_t>(i)]) == label, ErrorKind::InvalidInput,
              "region " + region + " mixes categories");
    rows.push_back(bins > 0 ? matclass::region_histogram(P, bins, region).values : Vector(P.colwise().mean().transpose()));
    out.regions.push_back(region);
    out.labels.push_back(label);
  }
  out.X.resize(static_cast<Index>(rows.size()), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) out.X.row(static_cast<Index>(i)) = rows[i].transpose();
  return out;
}

void register_classify(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  struct Opts {
    std::string predictions, dataset, baseline_features, out;
    int bins = 10;
    double C = 10.0;
  };
  auto o = std::make_shared<Opts>();
  auto& c = add_command(app, cmds, "classify", "material classification from region attribute histograms", false);
  c.app->add_option("--predictions", o->predictions, "per-patch attribute predictions CSV")->required();
  c.app->add_option("--dataset", o->dataset, "patch index with region and split (train/test)")->required();
  c.app->add_option("--bins", o->bins)->capture_default_str();
  c.app->add_option("--C", o->C, "SVM soft-margin constant")->capture_default_str();
  c.app->add_option("--baseline-features", o->baseline_features, "raw features for the nearest-centroid baseline");
  c.app->add_option("--out", o->out, "report JSON")->required();
  c.action = [o](Command& self) {
    RunManifest m("classify", {{"bins", o->bins}, {"C", o->C}}, 0);
    const auto pred = read_labeled_csv(m.input(o->predictions));
    const auto idx = read_index(m.input(o->dataset));
    const auto train = region_rows(pred.ids, pred.values, idx, "train", o->bins);
    const auto test = region_rows(pred.ids, pred.values, idx, "test", o->bins);
    matclass::SvmConfig svm;
    svm.C = o->C;
    const auto report = matclass::fit_predict_material(train.X, train.labels, test.X, test.labels, svm);
    json per_class = json::object();
    for (std::size_t i = 0; i < report.classes.size(); ++i)
      per_class[idx.categories[static_cast<std::size_t>(report.classes[i])]] = report.per_class_accuracy[i];
    json predictions = json::array();
    for (std::size_t i = 0; i < test.regions.size(); ++i)
      predictions.push_back({{"region", test.regions[i]},
                             {"truth", idx.categories[static_cast<std::size_t>(test.labels[i])]},
                             {"predicted", idx.categories[static_cast<std::size_t>(report.predicted[i])]}});
    json out = {{"accuracy", report.accuracy}, {"per_class", per_class}, {"predictions", predictions},
                {"train_regions", train.regions.size()}, {"run", m.stamp()}};
    if (!o->baseline_features.empty()) {
      const auto feats = patchlab::read_features(m.input(o->baseline_features));
      std::vector<std::string> ids;
      for (const auto& f : feats) ids.push_back(f.patch_id);
      const Matrix X = patchlab::stack(feats);
      const auto btr = region_rows(ids, X, idx, "train", 0);
      const auto bte = region_rows(ids, X, idx, "test", 0);
      out["baseline_accuracy"] = matclass::score(matclass::nearest_centroid(btr.X, btr.labels, bte.X), bte.labels).accuracy;
    }
    write_json(o->out, out);
    m.output(o->out);
    std::cerr << "accuracy " << report.accuracy << "\n";
    self.finish(m);
  };
}

void register_mac(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  struct Opts {
    std::string dataset, a, out, split = "train", exclude;
    macheads::MacConfig cfg;
    bool no_heads = false;
  };
  auto o = std::make_shared<Opts>();
  auto& c = add_command(app, cmds, "mac", "train the toy extractor with auxiliary attribute heads");
  c.app->add_option("--dataset", o->dataset, "patch index")->required();
  c.app->add_option("--A", o->a, "category-attribute matrix CSV")->required();
  c.app->add_option("--split", o->split)->capture_default_str();
  c.app->add_option("--exclude", o->exclude, "leave this category out (and its row of A)");
  c.app->add_flag("--no-heads", o->no_heads, "train without attribute heads");
  add_mac_options(c.app, o->cfg);
  c.app->add_option("--out", o->out, "model JSON")->required();
  c.action = [o](Command& self) {
    auto cfg = o->cfg;
    cfg.seed = self.resolved_seed();
    cfg.use_heads = !o->no_heads;
    json cj = mac_config_json(cfg);
    cj["split"] = o->split;
    cj["exclude"] = o->exclude;
    RunManifest m("mac", cj, cfg.seed);
    const auto ds = patchlab::load_dataset(m.input(o->dataset));
    const auto A = attrspace::load_A(m.input(o->a));
    check_A_matches(A, ds.categories);
    const int excluded = o->exclude.empty() ? -1 : category_index(ds.categories, o->exclude);
    const auto set = select_images(ds, o->split, excluded);
    const Matrix a = excluded >= 0 ? drop_row(A.a, excluded) : A.a;
    const auto result = macheads::train_mac(set.images, set.categories, a, cfg);
    write_stamped(o->out, macheads::model_to_json(result.model, cfg), m.stamp());
    m.output(o->out);
    self.finish(m);
  };
}

void register_oneshot(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  struct Opts {
    std::string dataset, a, mac, held_out, out;
    std::vector<int> shots{1, 2, 5, 10, 20, 50};
    int repetitions = 20;
    macheads::MacConfig cfg;
  };
  auto o = std::make_shared<Opts>();
  auto& c = add_command(app, cmds, "oneshot", "few-shot detection of a held-out category");
  c.app->add_option("--dataset", o->dataset, "patch index; train split is the example pool, test split evaluates")
      ->required();
  c.app->add_option("--held-out", o->held_out, "category to detect")->required();
  c.app->add_option("--A", o->a, "category-attribute matrix CSV (needed unless --mac is given)");
  c.app->add_option("--mac", o->mac, "MAC model already trained without the held-out category");
  c.app->add_option("--shots", o->shots)->delimiter(',')->capture_default_str();
  c.app->add_option("--repetitions", o->repetitions)->capture_default_str();
  add_mac_options(c.app, o->cfg);
  c.app->add_option("--out", o->out, "curve JSON")->required();
  c.action = [o](Command& self) {
    auto cfg = o->cfg;
    cfg.seed = self.resolved_seed();
    json cj = mac_config_json(cfg);
    cj["held_out"] = o->held_out;
    cj["shots"] = o->shots;
    cj["repetitions"] = o->repetitions;
    RunManifest m("oneshot", cj, cfg.seed);
    const auto ds = patchlab::load_dataset(m.input(o->dataset));
    const int held = category_index(ds.categories, o->held_out);
    macheads::MacModel model;
    if (!o->mac.empty()) {
      model = macheads::load_model(m.input(o->mac));
      require_dims(model.extractor.num_categories(), static_cast<Index>(ds.categories.size()) - 1,
                   "categories of the MAC model");
    } else {
      require(!o->a.empty(), ErrorKind::InvalidInput, "either --A or --mac is required");
      const auto A = attrspace::load_A(m.input(o->a));
      check_A_matches(A, ds.categories);
      const auto set = select_images(ds, "train", held);
      model = macheads::train_mac(set.images, set.categories, drop_row(A.a, held), cfg).model;
    }
    auto features = [&](const std::string& split_name) {
      std::vector<patchlab::Image> images;
      std::vector<int> target;
      for (const auto& p : ds.patches)
        if (p.split == split_name) {
          images.push_back(p.pixels);
          target.push_back(p.category == held ? 1 : 0);
        }
      require(!images.empty(), ErrorKind::InvalidInput, "no patches in split '" + split_name + "'");
      return matclass::one_shot_features(model, images, target);
    };
    const auto curve = matclass::one_shot_eval(features("train"), features("test"), o->shots, o->repetitions, cfg.seed);
    write_json(o->out, {{"held_out", o->held_out},
                        {"shots", curve.shots},
                        {"attributes", curve.attributes},
                        {"materials", curve.materials},
                        {"both", curve.both},
                        {"run", m.stamp()}});
    m.output(o->out);
    self.finish(m);
  };
}

void register_maps(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  struct Opts {
    std::string image, model, mac, out, png_dir;
    int stride = 8, side = 32;
  };
  auto o = std::make_shared<Opts>();
  auto& c = add_command(app, cmds, "maps", "per-pixel attribute maps by sliding windows", false);
  c.app->add_option("--image", o->image, "PNG or PPM image")->required();
  c.app->add_option("--model", o->model, "attribute model JSON (features from each window)");
  c.app->add_option("--mac", o->mac, "MAC model JSON (attributes then material probabilities)");
  c.app->add_option("--stride", o->stride)->capture_default_str();
  c.app->add_option("--side", o->side, "window side")->capture_default_str();
  c.app->add_option("--png-dir", o->png_dir, "also export one grayscale PNG per plane");
  c.app->add_option("--out", o->out, "map file (raw f32 planes plus .json sidecar)")->required();
  c.action = [o](Command& self) {
    require(o->model.empty() != o->mac.empty(), ErrorKind::InvalidInput, "give exactly one of --model and --mac");
    RunManifest m("maps", {{"stride", o->stride}, {"side", o->side}}, 0);
    const auto image = patchlab::load_image(m.input(o->image));
    matclass::WindowPredictor predictor;
    std::string model_id;
    if (!o->model.empty()) {
      const fs::path p = m.input(o->model);
      predictor = matclass::attrmodel_predictor(attrmodel::load_model(p));
      model_id = sha256_file(p).substr(0, 16);
    } else {
      const fs::path p = m.input(o->mac);
      predictor = matclass::mac_predictor(macheads::load_model(p));
      model_id = sha256_file(p).substr(0, 16);
    }
    auto map = matclass::sliding_window_maps(image, predictor, o->stride, o->side);
    map.image_id = fs::path(o->image).filename().string();
    map.model_id = model_id;
    matclass::save_map(o->out, map);
    m.output(o->out);
    m.output(o->out + ".json");
    if (!o->png_dir.empty()) {
      fs::create_directories(o->png_dir);
      for (std::size_t i = 0; i < map.planes.size(); ++i) {
        const fs::path p = fs::path(o->png_dir) / ("plane" + std::to_string(i) + ".png");
        matclass::save_plane_png(p, map, static_cast<int>(i));
        m.output(p);
      }
    }
    self.finish(m);
  };
}

void register_logicfit(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  struct Opts {
    std::string predictions, labels, out_dir;
    double threshold = 0.5;
    logicreg::SearchConfig cfg;
  };
  auto o = std::make_shared<Opts>();
  auto& c = add_command(app, cmds, "logicfit", "fit one boolean tree per semantic trait");
  c.app->add_option("--predictions", o->predictions, "per-patch attribute predictions CSV")->required();
  c.app->add_option("--labels", o->labels, "CSV: id then one 0/1 column per trait")->required();
  c.app->add_option("--threshold", o->threshold, "binarization threshold (>=)")->capture_default_str();
  c.app->add_option("--depth", o->cfg.max_depth, "maximum AND/OR depth")->capture_default_str();
  c.app->add_option("--moves", o->cfg.moves, "annealing moves")->capture_default_str();
  c.app->add_flag("--exhaustive", o->cfg.allow_exhaustive, "enumerate all truth functions when M <= 6, depth <= 3");
  c.app->add_option("--out-dir", o->out_dir, "one <trait>.json per trait plus summary.json")->required();
  c.action = [o](Command& self) {
    auto cfg = o->cfg;
    cfg.seed = self.resolved_seed();
    RunManifest m("logicfit",
                  {{"threshold", o->threshold}, {"depth", cfg.max_depth}, {"moves", cfg.moves},
                   {"exhaustive", cfg.allow_exhaustive}},
                  cfg.seed);
    const auto pred = read_labeled_csv(m.input(o->predictions));
    const auto labels = read_labeled_csv(m.input(o->labels));
    std::map<std::string, Index> row_of;
    for (std::size_t i = 0; i < pred.ids.size(); ++i) row_of.emplace(pred.ids[i], static_cast<Index>(i));
    Matrix P(static_cast<Index>(labels.ids.size()), pred.values.cols());
    for (std::size_t i = 0; i < labels.ids.size(); ++i) {
      auto it = row_of.find(labels.ids[i]);
      require(it != row_of.end(), ErrorKind::InvalidInput, "labelled patch " + labels.ids[i] + " has no prediction");
      P.row(static_cast<Index>(i)) = pred.values.row(it->second);
    }
    const auto X = logicreg::binarize(P, o->threshold);
    fs::create_directories(o->out_dir);
    json summary = json::array();
    for (Index t = 0; t < labels.values.cols(); ++t) {
      std::vector<int> y;
      for (Index i = 0; i < labels.values.rows(); ++i) {
        const double v = labels.values(i, t);
        require(v == 0.0 || v == 1.0, ErrorKind::Parse, "trait labels must be 0 or 1");
        y.push_back(static_cast<int>(v));
      }
      auto tcfg = cfg;
      tcfg.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(t));
      const auto fit = logicreg::fit_tree(X, y, tcfg);
      const std::string name = labels.header[static_cast<std::size_t>(t)];
      const fs::path p = fs::path(o->out_dir) / (name + ".json");
      logicreg::save_tree(p, fit.tree);
      m.output(p);
      if (fit.tree.degenerate) std::cerr << "warning: trait " << name << " has a single class; constant tree\n";
      summary.push_back({{"trait", name},
                         {"accuracy", fit.accuracy},
                         {"tree", logicreg::to_infix(fit.tree.root)},
                         {"degenerate", fit.tree.degenerate},
                         {"exhaustive", fit.exhaustive}});
    }
    const fs::path sp = fs::path(o->out_dir) / "summary.json";
    write_json(sp, {{"traits", summary}, {"threshold", o->threshold}, {"run", m.stamp()}});
    m.output(sp);
    const fs::path mp = m.finish(self.manifest.empty() ? fs::path(sp.string() + ".manifest.json") : fs::path(self.manifest));
    std::cerr << "manifest: " << mp.string() << "\n";
  };
}

void register_traits(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  struct Opts {
    std::string map, out, png_dir;
    std::vector<std::string> trees;
    double threshold = 0.5;
  };
  auto o = std::make_shared<Opts>();
  auto& c = add_command(app, cmds, "traits", "per-pixel trait probabilities from attribute maps", false);
  c.app->add_option("--map", o->map, "attribute map file")->required();
  c.app->add_option("--trees", o->trees, "tree JSON files")->delimiter(',')->required();
  c.app->add_option("--threshold", o->threshold)->capture_default_str();
  c.app->add_option("--png-dir", o->png_dir);
  c.app->add_option("--out", o->out, "trait map file")->required();
  c.action = [o](Command& self) {
    RunManifest m("traits", {{"threshold", o->threshold}}, 0);
    const auto map = matclass::load_map(m.input(o->map));
    std::vector<logicreg::LogicTree> trees;
    for (const auto& t : o->trees) trees.push_back(logicreg::load_tree(m.input(t)));
    auto out = map;
    out.planes.clear();
    for (auto& plane : logicreg::trait_maps(map, trees, o->threshold)) out.planes.push_back(std::move(plane));
    matclass::save_map(o->out, out);
    m.output(o->out);
    m.output(o->out + ".json");
    if (!o->png_dir.empty()) {
      fs::create_directories(o->png_dir);
      for (std::size_t i = 0; i < out.planes.size(); ++i) {
        const fs::path p = fs::path(o->png_dir) / (fs::path(o->trees[i]).stem().string() + ".png");
        matclass::save_plane_png(p, out, static_cast<int>(i));
        m.output(p);
      }
    }
    self.finish(m);
  };
}

void register_serve(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  struct Opts {
    std::string tasks, dataset, log, static_dir, host = "127.0.0.1", secret;
    int port = 8080, quorum = 10, reservation = 300;
  };
  auto o = std::make_shared<Opts>();
  auto& c = add_command(app, cmds, "serve", "HTTP backend for the annotation UI", false);
  c.app->add_option("--tasks", o->tasks, "task pool")->required();
  c.app->add_option("--dataset", o->dataset, "patch index resolving task patches")->required();
  c.app->add_option("--log", o->log, "annotation log to append to")->required();
  c.app->add_option("--static", o->static_dir, "UI asset directory served at /");
  c.app->add_option("--host", o->host)->capture_default_str();
  c.app->add_option("--port", o->port)->capture_default_str();
  c.app->add_option("--quorum", o->quorum, "submissions wanted per task")->capture_default_str();
  c.app->add_option("--reservation", o->reservation, "seconds before an unanswered task is reassigned")
      ->capture_default_str();
  c.app->add_option("--secret", o->secret, "salt for opaque image URLs (random by default)");
  c.action = [o](Command&) {
    auto tasks = perception::read_tasks(resolve_input(o->tasks));
    const auto ds = patchlab::load_dataset(resolve_input(o->dataset));
    std::map<std::string, patchlab::Image> patches;
    for (const auto& p : ds.patches) patches.emplace(p.id, p.pixels);
    ServerOptions opts;
    opts.quorum = o->quorum;
    opts.reservation = std::chrono::seconds(o->reservation);
    opts.static_dir = o->static_dir;
    opts.secret = o->secret;
    TaskServer server(std::move(tasks), std::move(patches), o->log, opts);
    std::cerr << "serving " << o->tasks << " on http://" << o->host << ":" << o->port << "\n";
    if (!server.http().listen(o->host, o->port))
      fail(ErrorKind::Io, "cannot listen on " + o->host + ":" + std::to_string(o->port) + " (port busy?)");
  };
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Material attribute discovery pipeline"};
  app.require_subcommand(1);
  std::vector<std::unique_ptr<Command>> commands;
  register_synth(app, commands);
  register_tasks(app, commands);
  register_simulate(app, commands);
  register_aggregate(app, commands);
  register_distances(app, commands);
  register_embed(app, commands);
  register_features(app, commands);
  register_train(app, commands);
  register_predict(app, commands);
  register_classify(app, commands);
  register_mac(app, commands);
  register_oneshot(app, commands);
  register_maps(app, commands);
  register_logicfit(app, commands);
  register_traits(app, commands);
  register_serve(app, commands);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  try {
    for (auto& c : commands)
      if (c->app->parsed()) c->action(*c);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace matattr::cli
