#pragma once

#include "matattr/core.hpp"
#include "matattr/patchlab.hpp"

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace matattr::perception {

/// One similarity question: a reference patch and one patch per category,
/// listed in display order. Categories are 0-based.
struct SimilarityTask {
  std::string task_id;
  std::string reference_patch;
  int reference_category = 0;
  std::vector<std::string> shown_patches;
  std::vector<int> shown_categories;

  int num_categories() const { return static_cast<int>(shown_categories.size()); }
  void validate() const;
};

/// One annotator's answer. decisions[i] refers to display slot i, whose
/// category is order[i].
struct AnnotationRecord {
  std::string task_id;
  std::string annotator_id;
  std::vector<int> decisions;
  std::vector<int> order;
};

/// Post-vote similarity vector s_n, indexed by category.
struct AggregatedRecord {
  std::string task_id;
  int category = 0;
  Vector s;
};

struct CategoryPrototype {
  int category = 0;
  Vector p;
  int support = 0;
};

struct DistanceMatrix {
  std::vector<std::string> names;
  Matrix d;

  Index size() const { return d.rows(); }
};

struct VoteRule {
  int quorum = 10;
  int min_agree = 5;
};

/// Majority-style vote: s[k] = 1 iff at least `min_agree` annotators marked
/// the category-k patch similar.
Vector aggregate_votes(const std::vector<AnnotationRecord>& records, const VoteRule& rule = {});

/// Groups records by task and votes every task listed in `tasks`.
/// Tasks short of quorum raise InsufficientVotes unless `skip_incomplete`.
std::vector<AggregatedRecord> aggregate_all(const std::vector<SimilarityTask>& tasks,
                                            const std::vector<AnnotationRecord>& records, const VoteRule& rule = {},
                                            bool skip_incomplete = false);

/// Mean s vector per category. Every category in [0, K) needs support.
std::vector<CategoryPrototype> category_prototypes(const std::vector<AggregatedRecord>& records, int num_categories);

/// Euclidean distances between rows of `points`.
template <typename Derived>
Matrix pairwise_distances(const Eigen::MatrixBase<Derived>& points) {
  const Index K = points.rows();
  Matrix d = Matrix::Zero(K, K);
  for (Index i = 0; i < K; ++i)
    for (Index j = i + 1; j < K; ++j) d(i, j) = d(j, i) = (points.row(i) - points.row(j)).norm();
  return d;
}

DistanceMatrix distance_matrix(const std::vector<CategoryPrototype>& prototypes,
                               std::vector<std::string> names = {});

/// Relative Frobenius gap ||D_n - D_N|| / ||D_N|| between the matrix built from
/// the first n records and from all of them.
std::vector<std::pair<int, double>> convergence_curve(const std::vector<AggregatedRecord>& records,
                                                      int num_categories, const std::vector<int>& checkpoints);

template <typename T>
std::vector<T> shuffled(std::vector<T> v, std::uint64_t seed) {
  Rng rng(seed);
  shuffle(v, rng);
  return v;
}

struct SimulatedAnnotations {
  std::vector<SimilarityTask> tasks;
  std::vector<AnnotationRecord> records;
};

/// Simulated annotators: for a reference of category c every annotator marks
/// the category-k patch similar with probability similarity(c, k), independently.
/// Each task draws from its own derived seed, so results do not depend on
/// generation order.
SimulatedAnnotations simulate_annotations(const Matrix& similarity, int n_tasks, int annotators_per_task,
                                          std::uint64_t seed);

/// Builds tasks from a labelled patch pool: uniform reference, one uniformly
/// chosen patch per category (never the reference), shuffled display order.
std::vector<SimilarityTask> make_tasks(const patchlab::Dataset& pool, int n_tasks, std::uint64_t seed);

// File formats --------------------------------------------------------------

std::string to_jsonl(const std::vector<AnnotationRecord>& records);
std::string to_jsonl(const std::vector<SimilarityTask>& tasks);
std::string to_jsonl(const std::vector<AggregatedRecord>& records);
std::string annotation_to_json(const AnnotationRecord& record);

/// Parses an annotation log. Later lines for the same (task, annotator)
/// replace earlier ones. Decision vectors of differing length are rejected.
std::vector<AnnotationRecord> read_annotations(const std::filesystem::path& path);
std::vector<AnnotationRecord> parse_annotations(const std::string& text, const std::string& source = "<memory>");
std::vector<SimilarityTask> read_tasks(const std::filesystem::path& path);
std::vector<AggregatedRecord> read_aggregated(const std::filesystem::path& path);

std::string distance_csv(const DistanceMatrix& d);
DistanceMatrix parse_distance_csv(const std::string& text, const std::string& source = "<memory>");

}  // namespace matattr::perception
