#pragma once

#include "matattr/core.hpp"
#include "matattr/matclass.hpp"

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace matattr::logicreg {

enum class Op { Const, Leaf, Not, And, Or };

struct Node {
  Op op = Op::Const;
  int value = 0;  // Const: 0/1, Leaf: attribute index
  std::vector<Node> args;

  static Node constant(bool v);
  static Node leaf(int index);
  static Node negate(Node a);
  static Node conj(Node a, Node b);
  static Node disj(Node a, Node b);

  bool eval(const std::vector<std::uint8_t>& x) const;
  /// AND/OR nesting depth; leaves and negations do not add depth.
  int depth() const;
  int leaves() const;
  int max_index() const;  // -1 when no leaves
  void validate(int num_attributes) const;

  friend bool operator==(const Node&, const Node&) = default;
};

/// A boolean tree plus the affine map of its 0/1 output to a probability.
struct LogicTree {
  Node root;
  double intercept = 0.0;  // P(trait | tree = 0)
  double slope = 1.0;      // P(trait | tree = 1) - intercept
  bool degenerate = false;  // fit on single-class labels

  double probability(const std::vector<std::uint8_t>& x) const { return intercept + slope * (root.eval(x) ? 1.0 : 0.0); }
};

struct BinarizedAttributes {
  std::vector<std::vector<std::uint8_t>> rows;  // N x M
  double threshold = 0.5;

  Index size() const { return static_cast<Index>(rows.size()); }
  Index attributes() const { return rows.empty() ? 0 : static_cast<Index>(rows.front().size()); }
};

/// 1 iff prediction >= threshold.
BinarizedAttributes binarize(const Eigen::Ref<const Matrix>& predictions, double threshold = 0.5);

struct SearchConfig {
  int max_depth = 3;
  int moves = 10000;
  double initial_temperature = 2.0;
  double cooling = 0.999;
  int plateau = 1000;  // moves without improvement before restarting from the best tree
  std::uint64_t seed = 0;
  bool allow_exhaustive = false;  // exact enumeration when M <= 6 and max_depth <= 3
};

struct FitResult {
  LogicTree tree;
  double accuracy = 0.0;
  bool exhaustive = false;
};

/// Minimizes misclassification of y by the tree output with simulated
/// annealing. With allow_exhaustive, M <= 6 and max_depth <= 3 it instead
/// enumerates every distinct truth function. Ties prefer fewer leaves.
FitResult fit_tree(const BinarizedAttributes& X, const std::vector<int>& y, const SearchConfig& cfg = {});

/// Pushes every NOT down to the leaves (De Morgan), removing double negations.
Node push_negations(const Node& n);

/// One probability plane per tree, evaluated on binarized attribute planes.
std::vector<Eigen::ArrayXXf> trait_maps(const matclass::AttributeMap& map, const std::vector<LogicTree>& trees,
                                        double threshold = 0.5);

// JSON s-expressions: {"op":"and","args":[{"leaf":1},{"op":"not","args":[{"leaf":2}]}]}
std::string to_sexpr(const Node& n);
Node node_from_sexpr(const std::string& text);
std::string tree_to_json(const LogicTree& t);
LogicTree tree_from_json(const std::string& text);
void save_tree(const std::filesystem::path& path, const LogicTree& t);
LogicTree load_tree(const std::filesystem::path& path);
/// Human-readable infix form, e.g. "(x1 & !x2)".
std::string to_infix(const Node& n);

}  // namespace matattr::logicreg
