#include "matattr/perception.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace matattr::perception {

using nlohmann::json;

namespace {

bool is_permutation_of_range(const std::vector<int>& order) {
  std::vector<int> sorted = order;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i)
    if (sorted[i] != static_cast<int>(i)) return false;
  return true;
}

template <typename F>
void for_each_line(const std::string& text, const std::string& source, F&& f) {
  std::istringstream in(text);
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (trim(line).empty()) continue;
    try {
      f(json::parse(line), lineno);
    } catch (const Error& e) {
      fail(e.kind(), source + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const std::exception& e) {
      fail(ErrorKind::Parse, source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

}  // namespace

void SimilarityTask::validate() const {
  require(shown_patches.size() == shown_categories.size(), ErrorKind::InvalidInput,
          "task " + task_id + ": shown patch and category lists differ in length");
  require(is_permutation_of_range(shown_categories), ErrorKind::InvalidInput,
          "task " + task_id + ": shown patches must cover every category exactly once");
  require(std::find(shown_patches.begin(), shown_patches.end(), reference_patch) == shown_patches.end(),
          ErrorKind::InvalidInput, "task " + task_id + ": reference patch is among the shown patches");
  require(reference_category >= 0 && reference_category < num_categories(), ErrorKind::InvalidInput,
          "task " + task_id + ": reference category out of range");
}

Vector aggregate_votes(const std::vector<AnnotationRecord>& records, const VoteRule& rule) {
  if (static_cast<int>(records.size()) < rule.quorum || records.empty())
    fail(ErrorKind::InsufficientVotes, "task " + (records.empty() ? std::string("<unknown>") : records.front().task_id) +
                                           ": " + std::to_string(records.size()) + " votes, quorum is " +
                                           std::to_string(rule.quorum));
  const std::size_t K = records.front().decisions.size();
  std::vector<int> counts(K, 0);
  for (const AnnotationRecord& r : records) {
    require(r.decisions.size() == K && r.order.size() == K, ErrorKind::Dimension,
            "task " + r.task_id + ": annotator " + r.annotator_id + " has decision length " +
                std::to_string(r.decisions.size()) + ", expected " + std::to_string(K));
    require(is_permutation_of_range(r.order), ErrorKind::InvalidInput,
            "task " + r.task_id + ": display order is not a permutation");
    for (std::size_t slot = 0; slot < K; ++slot)
      if (r.decisions[slot] != 0) ++counts[static_cast<std::size_t>(r.order[slot])];
  }
  Vector s(static_cast<Index>(K));
  for (std::size_t k = 0; k < K; ++k) s(static_cast<Index>(k)) = counts[k] >= rule.min_agree ? 1.0 : 0.0;
  return s;
}

std::vector<AggregatedRecord> aggregate_all(const std::vector<SimilarityTask>& tasks,
                                            const std::vector<AnnotationRecord>& records, const VoteRule& rule,
                                            bool skip_incomplete) {
  std::map<std::string, std::vector<AnnotationRecord>> by_task;
  for (const AnnotationRecord& r : records) by_task[r.task_id].push_back(r);
  std::vector<AggregatedRecord> out;
  std::vector<std::string> short_tasks;
  for (const SimilarityTask& t : tasks) {
    auto it = by_task.find(t.task_id);
    const std::size_t n = it == by_task.end() ? 0 : it->second.size();
    if (static_cast<int>(n) < rule.quorum) {
      short_tasks.push_back(t.task_id);
      continue;
    }
    for (const AnnotationRecord& r : it->second)
      require(r.order == t.shown_categories, ErrorKind::InvalidInput,
              "task " + t.task_id + ": annotation display order disagrees with the task pool");
    out.push_back({t.task_id, t.reference_category, aggregate_votes(it->second, rule)});
  }
  if (!short_tasks.empty() && !skip_incomplete) {
    std::string list;
    for (std::size_t i = 0; i < short_tasks.size() && i < 20; ++i) list += (i ? ", " : "") + short_tasks[i];
    if (short_tasks.size() > 20) list += ", ...";
    fail(ErrorKind::InsufficientVotes,
         std::to_string(short_tasks.size()) + " task(s) below quorum " + std::to_string(rule.quorum) + ": " + list);
  }
  return out;
}

std::vector<CategoryPrototype> category_prototypes(const std::vector<AggregatedRecord>& records, int num_categories) {
  std::vector<CategoryPrototype> protos(static_cast<std::size_t>(num_categories));
  std::vector<std::vector<KahanSum>> sums(static_cast<std::size_t>(num_categories),
                                          std::vector<KahanSum>(static_cast<std::size_t>(num_categories)));
  for (const AggregatedRecord& r : records) {
    require_dims(r.s.size(), num_categories, "similarity vector length of task " + r.task_id);
    require(r.category >= 0 && r.category < num_categories, ErrorKind::InvalidInput,
            "task " + r.task_id + ": category out of range");
    auto& row = sums[static_cast<std::size_t>(r.category)];
    for (Index j = 0; j < r.s.size(); ++j) row[static_cast<std::size_t>(j)].add(r.s(j));
    ++protos[static_cast<std::size_t>(r.category)].support;
  }
  for (int k = 0; k < num_categories; ++k) {
    CategoryPrototype& p = protos[static_cast<std::size_t>(k)];
    if (p.support == 0) fail(ErrorKind::MissingCategory, "category " + std::to_string(k) + " has no records");
    p.category = k;
    p.p.resize(num_categories);
    for (int j = 0; j < num_categories; ++j)
      p.p(j) = sums[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)].value() / p.support;
  }
  return protos;
}

DistanceMatrix distance_matrix(const std::vector<CategoryPrototype>& prototypes, std::vector<std::string> names) {
  const Index K = static_cast<Index>(prototypes.size());
  Matrix points(K, K);
  for (Index k = 0; k < K; ++k) {
    require_dims(prototypes[static_cast<std::size_t>(k)].p.size(), K, "prototype length");
    points.row(k) = prototypes[static_cast<std::size_t>(k)].p.transpose();
  }
  if (names.empty())
    for (Index k = 0; k < K; ++k) names.push_back("c" + std::to_string(k));
  require_dims(static_cast<Index>(names.size()), K, "category names");
  return {std::move(names), pairwise_distances(points)};
}

std::vector<std::pair<int, double>> convergence_curve(const std::vector<AggregatedRecord>& records,
                                                      int num_categories, const std::vector<int>& checkpoints) {
  const int N = static_cast<int>(records.size());
  for (int n : checkpoints)
    require(n >= 1 && n <= N, ErrorKind::InvalidInput,
            "checkpoint " + std::to_string(n) + " outside [1, " + std::to_string(N) + "]");
  const Matrix full = distance_matrix(category_prototypes(records, num_categories)).d;
  const double norm = full.norm();
  std::vector<std::pair<int, double>> out;
  for (int n : checkpoints) {
    const std::vector<AggregatedRecord> head(records.begin(), records.begin() + n);
    const Matrix dn = distance_matrix(category_prototypes(head, num_categories)).d;
    const double gap = (dn - full).norm();
    out.emplace_back(n, norm > 0.0 ? gap / norm : gap);
  }
  return out;
}

SimulatedAnnotations simulate_annotations(const Matrix& similarity, int n_tasks, int annotators_per_task,
                                          std::uint64_t seed) {
  require(similarity.rows() == similarity.cols(), ErrorKind::Dimension, "similarity matrix must be square");
  require((similarity.array() >= 0.0).all() && (similarity.array() <= 1.0).all(), ErrorKind::InvalidInput,
          "similarity probabilities must lie in [0,1]");
  require(n_tasks >= 0 && annotators_per_task >= 1, ErrorKind::InvalidInput, "bad simulation counts");
  const int K = static_cast<int>(similarity.rows());
  SimulatedAnnotations out;
  out.tasks.reserve(static_cast<std::size_t>(n_tasks));
  out.records.reserve(static_cast<std::size_t>(n_tasks) * static_cast<std::size_t>(annotators_per_task));
  for (int t = 0; t < n_tasks; ++t) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(t)));
    SimilarityTask task;
    task.task_id = "t" + std::to_string(t);
    task.reference_category = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(K)));
    task.reference_patch = task.task_id + "-ref";
    task.shown_categories.resize(static_cast<std::size_t>(K));
    std::iota(task.shown_categories.begin(), task.shown_categories.end(), 0);
    shuffle(task.shown_categories, rng);
    for (int slot = 0; slot < K; ++slot) task.shown_patches.push_back(task.task_id + "-s" + std::to_string(slot));
    for (int a = 0; a < annotators_per_task; ++a) {
      AnnotationRecord r;
      r.task_id = task.task_id;
      r.annotator_id = "sim" + std::to_string(a);
      r.order = task.shown_categories;
      r.decisions.resize(static_cast<std::size_t>(K));
      for (int slot = 0; slot < K; ++slot)
        r.decisions[static_cast<std::size_t>(slot)] =
            uniform(rng) < similarity(task.reference_category, task.shown_categories[static_cast<std::size_t>(slot)])
                ? 1
                : 0;
      out.records.push_back(std::move(r));
    }
    out.tasks.push_back(std::move(task));
  }
  return out;
}

std::vector<SimilarityTask> make_tasks(const patchlab::Dataset& pool, int n_tasks, std::uint64_t seed) {
  const int K = static_cast<int>(pool.categories.size());
  std::vector<std::vector<std::size_t>> by_cat(static_cast<std::size_t>(K));
  for (std::size_t i = 0; i < pool.patches.size(); ++i)
    by_cat[static_cast<std::size_t>(pool.patches[i].category)].push_back(i);
  for (int k = 0; k < K; ++k)
    require(by_cat[static_cast<std::size_t>(k)].size() >= 2, ErrorKind::InvalidInput,
            "category " + pool.categories[static_cast<std::size_t>(k)] + " needs at least 2 patches for tasks");
  std::vector<SimilarityTask> tasks;
  for (int t = 0; t < n_tasks; ++t) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(t)));
    const std::size_t ref = uniform_index(rng, pool.patches.size());
    SimilarityTask task;
    task.task_id = "task" + std::to_string(t);
    task.reference_patch = pool.patches[ref].id;
    task.reference_category = pool.patches[ref].category;
    task.shown_categories.resize(static_cast<std::size_t>(K));
    std::iota(task.shown_categories.begin(), task.shown_categories.end(), 0);
    shuffle(task.shown_categories, rng);
    for (int k : task.shown_categories) {
      const auto& members = by_cat[static_cast<std::size_t>(k)];
      std::size_t pick = members[uniform_index(rng, members.size())];
      while (pick == ref) pick = members[uniform_index(rng, members.size())];
      task.shown_patches.push_back(pool.patches[pick].id);
    }
    tasks.push_back(std::move(task));
  }
  return tasks;
}

std::string annotation_to_json(const AnnotationRecord& r) {
  return json{{"task", r.task_id}, {"annotator", r.annotator_id}, {"decisions", r.decisions}, {"order", r.order}}
      .dump();
}

std::string to_jsonl(const std::vector<AnnotationRecord>& records) {
  std::string out;
  for (const auto& r : records) out += annotation_to_json(r) + "\n";
  return out;
}

std::string to_jsonl(const std::vector<SimilarityTask>& tasks) {
  std::string out;
  for (const auto& t : tasks) {
    json shown = json::array();
    for (std::size_t i = 0; i < t.shown_patches.size(); ++i)
      shown.push_back({{"patch", t.shown_patches[i]}, {"category", t.shown_categories[i]}});
    out += json{{"task_id", t.task_id},
                {"reference", {{"patch", t.reference_patch}, {"category", t.reference_category}}},
                {"shown", shown}}
               .dump() +
           "\n";
  }
  return out;
}

std::string to_jsonl(const std::vector<AggregatedRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    std::vector<int> s(static_cast<std::size_t>(r.s.size()));
    for (Index i = 0; i < r.s.size(); ++i) s[static_cast<std::size_t>(i)] = r.s(i) != 0.0 ? 1 : 0;
    out += json{{"task", r.task_id}, {"category", r.category}, {"s", s}}.dump() + "\n";
  }
  return out;
}

std::vector<AnnotationRecord> parse_annotations(const std::string& text, const std::string& source) {
  std::vector<AnnotationRecord> out;
  std::map<std::pair<std::string, std::string>, std::size_t> seen;
  std::size_t K = 0;
  for_each_line(text, source, [&](const json& j, std::size_t) {
    AnnotationRecord r;
    r.task_id = j.at("task").get<std::string>();
    r.annotator_id = j.at("annotator").get<std::string>();
    r.decisions = j.at("decisions").get<std::vector<int>>();
    r.order = j.at("order").get<std::vector<int>>();
    for (int d : r.decisions)
      if (d != 0 && d != 1) fail(ErrorKind::Parse, "decisions must be 0/1");
    if (K == 0) K = r.decisions.size();
    if (r.decisions.size() != K || r.order.size() != K)
      fail(ErrorKind::Dimension, "record has K=" + std::to_string(r.decisions.size()) + ", log uses K=" +
                                     std::to_string(K));
    if (!is_permutation_of_range(r.order)) fail(ErrorKind::Parse, "order is not a permutation of 0..K-1");
    const auto key = std::make_pair(r.task_id, r.annotator_id);
    if (auto it = seen.find(key); it != seen.end()) {
      out[it->second] = std::move(r);
    } else {
      seen.emplace(key, out.size());
      out.push_back(std::move(r));
    }
  });
  return out;
}

std::vector<AnnotationRecord> read_annotations(const std::filesystem::path& path) {
  return parse_annotations(read_file(path), path.string());
}

std::vector<SimilarityTask> read_tasks(const std::filesystem::path& path) {
  std::vector<SimilarityTask> out;
  for_each_line(read_file(path), path.string(), [&](const json& j, std::size_t) {
    SimilarityTask t;
    t.task_id = j.at("task_id").get<std::string>();
    t.reference_patch = j.at("reference").at("patch").get<std::string>();
    t.reference_category = j.at("reference").at("category").get<int>();
    for (const json& s : j.at("shown")) {
      t.shown_patches.push_back(s.at("patch").get<std::string>());
      t.shown_categories.push_back(s.at("category").get<int>());
    }
    t.validate();
    if (!out.empty() && out.front().num_categories() != t.num_categories())
      fail(ErrorKind::Dimension, "task " + t.task_id + " has a different category count");
    out.push_back(std::move(t));
  });
  return out;
}

std::vector<AggregatedRecord> read_aggregated(const std::filesystem::path& path) {
  std::vector<AggregatedRecord> out;
  for_each_line(read_file(path), path.string(), [&](const json& j, std::size_t) {
    AggregatedRecord r;
    r.task_id = j.at("task").get<std::string>();
    r.category = j.at("category").get<int>();
    const auto s = j.at("s").get<std::vector<int>>();
    if (!out.empty() && static_cast<Index>(s.size()) != out.front().s.size())
      fail(ErrorKind::Dimension, "record has K=" + std::to_string(s.size()) + ", expected " +
                                     std::to_string(out.front().s.size()));
    r.s.resize(static_cast<Index>(s.size()));
    for (std::size_t i = 0; i < s.size(); ++i) r.s(static_cast<Index>(i)) = s[i];
    out.push_back(std::move(r));
  });
  return out;
}

std::string distance_csv(const DistanceMatrix& d) {
  std::string out;
  for (std::size_t i = 0; i < d.names.size(); ++i) out += (i ? "," : "") + d.names[i];
  out += "\n";
  for (Index r = 0; r < d.d.rows(); ++r) {
    for (Index c = 0; c < d.d.cols(); ++c) out += (c ? "," : "") + format_double(d.d(r, c));
    out += "\n";
  }
  return out;
}

DistanceMatrix parse_distance_csv(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  DistanceMatrix out;
  if (!std::getline(in, line)) fail(ErrorKind::Parse, source + ":1: empty distance file");
  for (const std::string& n : split(trim(line), ',')) out.names.push_back(trim(n));
  const Index K = static_cast<Index>(out.names.size());
  out.d.resize(K, K);
  Index row = 0;
  for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
    if (trim(line).empty()) continue;
    const auto cells = split(trim(line), ',');
    if (row >= K || static_cast<Index>(cells.size()) != K)
      fail(ErrorKind::Dimension, source + ":" + std::to_string(lineno) + ": expected " + std::to_string(K) + " columns");
    for (Index c = 0; c < K; ++c) {
      try {
        out.d(row, c) = std::stod(cells[static_cast<std::size_t>(c)]);
      } catch (const std::exception&) {
        fail(ErrorKind::Parse, source + ":" + std::to_string(lineno) + ": bad number '" +
                                   cells[static_cast<std::size_t>(c)] + "'");
      }
    }
    ++row;
  }
  if (row != K) fail(ErrorKind::Dimension, source + ": expected " + std::to_string(K) + " rows, got " + std::to_string(row));
  return out;
}

}  // namespace matattr::perception
