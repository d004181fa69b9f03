#include "matattr/logicreg.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <map>
#include <unordered_map>

namespace matattr::logicreg {

using nlohmann::json;

Node Node::constant(bool v) { return {Op::Const, v ? 1 : 0, {}}; }
Node Node::leaf(int index) { return {Op::Leaf, index, {}}; }
Node Node::negate(Node a) { return {Op::Not, 0, {std::move(a)}}; }
Node Node::conj(Node a, Node b) { return {Op::And, 0, {std::move(a), std::move(b)}}; }
Node Node::disj(Node a, Node b) { return {Op::Or, 0, {std::move(a), std::move(b)}}; }

bool Node::eval(const std::vector<std::uint8_t>& x) const {
  switch (op) {
    case Op::Const: return value != 0;
    case Op::Leaf: return x.at(static_cast<std::size_t>(value)) != 0;
    case Op::Not: return !args[0].eval(x);
    case Op::And: return args[0].eval(x) && args[1].eval(x);
    case Op::Or: return args[0].eval(x) || args[1].eval(x);
  }
  return false;
}

int Node::depth() const {
  switch (op) {
    case Op::Const:
    case Op::Leaf: return 0;
    case Op::Not: return args[0].depth();
    default: return 1 + std::max(args[0].depth(), args[1].depth());
  }
}

int Node::leaves() const {
  if (op == Op::Leaf) return 1;
  int n = 0;
  for (const auto& a : args) n += a.leaves();
  return n;
}

int Node::max_index() const {
  int m = op == Op::Leaf ? value : -1;
  for (const auto& a : args) m = std::max(m, a.max_index());
  return m;
}

void Node::validate(int num_attributes) const {
  switch (op) {
    case Op::Const:
      require(value == 0 || value == 1, ErrorKind::InvalidInput, "constant node must be 0 or 1");
      break;
    case Op::Leaf:
      require(value >= 0 && value < num_attributes, ErrorKind::OutOfRange,
              "leaf index " + std::to_string(value) + " outside [0, " + std::to_string(num_attributes) + ")");
      break;
    case Op::Not:
      require(args.size() == 1, ErrorKind::InvalidInput, "NOT takes one argument");
      break;
    case Op::And:
    case Op::Or:
      require(args.size() == 2, ErrorKind::InvalidInput, "AND/OR take two arguments");
      break;
  }
  for (const auto& a : args) a.validate(num_attributes);
}

Node push_negations(const Node& n) {
  if (n.op == Op::Not) {
    const Node& a = n.args[0];
    switch (a.op) {
      case Op::Const: return Node::constant(a.value == 0);
      case Op::Leaf: return n;
      case Op::Not: return push_negations(a.args[0]);
      case Op::And:
        return Node::disj(push_negations(Node::negate(a.args[0])), push_negations(Node::negate(a.args[1])));
      case Op::Or:
        return Node::conj(push_negations(Node::negate(a.args[0])), push_negations(Node::negate(a.args[1])));
    }
  }
  Node out = n;
  for (auto& a : out.args) a = push_negations(a);
  return out;
}

BinarizedAttributes binarize(const Eigen::Ref<const Matrix>& predictions, double threshold) {
  BinarizedAttributes b;
  b.threshold = threshold;
  b.rows.assign(static_cast<std::size_t>(predictions.rows()),
                std::vector<std::uint8_t>(static_cast<std::size_t>(predictions.cols()), 0));
  for (Index i = 0; i < predictions.rows(); ++i)
    for (Index m = 0; m < predictions.cols(); ++m)
      b.rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(m)] = predictions(i, m) >= threshold ? 1 : 0;
  return b;
}

namespace {

LogicTree calibrate(Node root, const BinarizedAttributes& X, const std::vector<int>& y) {
  double n[2] = {0, 0}, pos[2] = {0, 0};
  for (std::size_t i = 0; i < y.size(); ++i) {
    const int t = root.eval(X.rows[i]) ? 1 : 0;
    n[t] += 1;
    pos[t] += y[i] ? 1 : 0;
  }
  LogicTree tree;
  tree.root = std::move(root);
  const double p0 = (pos[0] + 1.0) / (n[0] + 2.0), p1 = (pos[1] + 1.0) / (n[1] + 2.0);
  tree.intercept = p0;
  tree.slope = p1 - p0;
  return tree;
}

int misclassified(const Node& root, const BinarizedAttributes& X, const std::vector<int>& y) {
  int err = 0;
  for (std::size_t i = 0; i < y.size(); ++i) err += (root.eval(X.rows[i]) ? 1 : 0) != (y[i] ? 1 : 0);
  return err;
}

// Exhaustive search over distinct truth functions of the observed input patterns.
struct Entry {
  std::uint64_t mask;
  Op op;
  int a, b;  // Leaf: a = index, b = negated; And/Or: operand entries
  int leaves;
};

Node build(const std::vector<Entry>& e, int i) {
  const Entry& x = e[static_cast<std::size_t>(i)];
  switch (x.op) {
    case Op::Const: return Node::constant(x.a != 0);
    case Op::Leaf: return x.b ? Node::negate(Node::leaf(x.a)) : Node::leaf(x.a);
    case Op::And: return Node::conj(build(e, x.a), build(e, x.b));
    case Op::Or: return Node::disj(build(e, x.a), build(e, x.b));
    default: return Node::constant(false);
  }
}

Node exhaustive(const BinarizedAttributes& X, const std::vector<int>& y, int max_depth) {
  const int M = static_cast<int>(X.attributes());
  std::map<unsigned, int> index;
  std::vector<unsigned> patterns;
  std::vector<double> weight;  // n0 - n1 per pattern
  double base = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    unsigned p = 0;
    for (int m = 0; m < M; ++m) p |= static_cast<unsigned>(X.rows[i][static_cast<std::size_t>(m)]) << m;
    auto [it, fresh] = index.emplace(p, static_cast<int>(patterns.size()));
    if (fresh) {
      patterns.push_back(p);
      weight.push_back(0.0);
    }
    weight[static_cast<std::size_t>(it->second)] += y[i] ? -1.0 : 1.0;
    base += y[i] ? 1.0 : 0.0;
  }
  const int P = static_cast<int>(patterns.size());
  const std::uint64_t full = P == 64 ? ~std::uint64_t{0} : ((std::uint64_t{1} << P) - 1);
  // Byte lookup tables turn the weighted error into 8 table reads.
  std::vector<std::array<double, 256>> table((P + 7) / 8);
  for (int t = 0; t < static_cast<int>(table.size()); ++t)
    for (int v = 0; v < 256; ++v) {
      double s = 0.0;
      for (int bit = 0; bit < 8; ++bit)
        if ((v >> bit & 1) && t * 8 + bit < P) s += weight[static_cast<std::size_t>(t * 8 + bit)];
      table[static_cast<std::size_t>(t)][static_cast<std::size_t>(v)] = s;
    }
  auto error = [&](std::uint64_t mask) {
    double e = base;
    for (std::size_t t = 0; t < table.size(); ++t) e += table[t][(mask >> (8 * t)) & 0xFF];
    return e;
  };

  std::vector<Entry> entries;
  std::unordered_map<std::uint64_t, int> seen;
  auto add = [&](const Entry& e) {
    auto it = seen.find(e.mask);
    if (it == seen.end()) {
      seen.emplace(e.mask, static_cast<int>(entries.size()));
      entries.push_back(e);
    } else if (e.leaves < entries[static_cast<std::size_t>(it->second)].leaves) {
      entries[static_cast<std::size_t>(it->second)] = e;
    }
  };
  add({0, Op::Const, 0, 0, 0});
  add({full, Op::Const, 1, 0, 0});
  for (int m = 0; m < M; ++m) {
    std::uint64_t mask = 0;
    for (int p = 0; p < P; ++p)
      if (patterns[static_cast<std::size_t>(p)] >> m & 1) mask |= std::uint64_t{1} << p;
    add({mask, Op::Leaf, m, 0, 1});
    add({~mask & full, Op::Leaf, m, 1, 1});
  }

  auto better = [](double e, int l, double be, int bl) { return e < be - 1e-9 || (std::abs(e - be) <= 1e-9 && l < bl); };
  int best = 0;
  double best_err = error(entries[0].mask);
  for (int i = 0; i < static_cast<int>(entries.size()); ++i) {
    const double e = error(entries[static_cast<std::size_t>(i)].mask);
    if (better(e, entries[static_cast<std::size_t>(i)].leaves, best_err, entries[static_cast<std::size_t>(best)].leaves)) {
      best = i;
      best_err = e;
    }
  }
  for (int d = 1; d <= max_depth && best_err > 1e-9; ++d) {
    const int n = static_cast<int>(entries.size());
    const bool last = d == max_depth;
    Entry best_last{};
    bool have_last = false;
    double best_last_err = best_err;
    int best_last_leaves = entries[static_cast<std::size_t>(best)].leaves;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) {
        const Entry& a = entries[static_cast<std::size_t>(i)];
        const Entry& b = entries[static_cast<std::size_t>(j)];
        if (a.op == Op::Const || b.op == Op::Const) continue;
        const int leaves = a.leaves + b.leaves;
        for (Op op : {Op::And, Op::Or}) {
          const std::uint64_t mask = op == Op::And ? (a.mask & b.mask) : (a.mask | b.mask);
          if (last) {
            const double e = error(mask);
            if (better(e, leaves, best_last_err, best_last_leaves)) {
              best_last = {mask, op, i, j, leaves};
              best_last_err = e;
              best_last_leaves = leaves;
              have_last = true;
            }
          } else {
            add({mask, op, i, j, leaves});
          }
        }
      }
    if (last) {
      if (have_last) {
        entries.push_back(best_last);
        best = static_cast<int>(entries.size()) - 1;
        best_err = best_last_err;
      }
    } else {
      for (int i = 0; i < static_cast<int>(entries.size()); ++i) {
        const double e = error(entries[static_cast<std::size_t>(i)].mask);
        if (better(e, entries[static_cast<std::size_t>(i)].leaves, best_err, entries[static_cast<std::size_t>(best)].leaves)) {
          best = i;
          best_err = e;
        }
      }
    }
  }
  return build(entries, best);
}

// Simulated annealing over tree structures, evaluated on row bitsets.
class Annealer {
 public:
  Annealer(const BinarizedAttributes& X, const std::vector<int>& y, const SearchConfig& cfg)
      : cfg_(cfg), M_(static_cast<int>(X.attributes())), N_(y.size()), words_((N_ + 63) / 64), rng_(derive_seed(cfg.seed, 0x10C)) {
    cols_.assign(static_cast<std::size_t>(M_), std::vector<std::uint64_t>(words_, 0));
    target_.assign(words_, 0);
    for (std::size_t i = 0; i < N_; ++i) {
      for (int m = 0; m < M_; ++m)
        if (X.rows[i][static_cast<std::size_t>(m)]) cols_[static_cast<std::size_t>(m)][i / 64] |= std::uint64_t{1} << (i % 64);
      if (y[i]) target_[i / 64] |= std::uint64_t{1} << (i % 64);
    }
    valid_.assign(words_, ~std::uint64_t{0});
    if (N_ % 64) valid_.back() = (std::uint64_t{1} << (N_ % 64)) - 1;
  }

  Node run() {
    Node current = best_literal();
    int cur_err = error(current);
    Node best = current;
    int best_err = cur_err;
    double T = cfg_.initial_temperature;
    int since = 0;
    for (int move = 0; move < cfg_.moves && best_err > 0; ++move, T *= cfg_.cooling) {
      Node cand = mutate(current);
      if (cand.depth() > cfg_.max_depth) continue;
      const int e = error(cand);
      const int delta = e - cur_err;
      if (delta <= 0 || uniform(rng_) < std::exp(-delta / std::max(T, 1e-12))) {
        current = std::move(cand);
        cur_err = e;
      }
      if (cur_err < best_err || (cur_err == best_err && current.leaves() < best.leaves())) {
        if (cur_err < best_err) since = 0;
        best = current;
        best_err = cur_err;
      } else if (++since >= cfg_.plateau) {
        current = best;
        cur_err = best_err;
        since = 0;
      }
    }
    return best;
  }

 private:
  std::vector<std::uint64_t> eval(const Node& n) const {
    switch (n.op) {
      case Op::Const: return std::vector<std::uint64_t>(words_, n.value ? ~std::uint64_t{0} : 0);
      case Op::Leaf: return cols_[static_cast<std::size_t>(n.value)];
      case Op::Not: {
        auto v = eval(n.args[0]);
        for (auto& w : v) w = ~w;
        return v;
      }
      default: {
        auto a = eval(n.args[0]);
        const auto b = eval(n.args[1]);
        for (std::size_t i = 0; i < words_; ++i) a[i] = n.op == Op::And ? (a[i] & b[i]) : (a[i] | b[i]);
        return a;
      }
    }
  }

  int error(const Node& n) const {
    const auto v = eval(n);
    int e = 0;
    for (std::size_t i = 0; i < words_; ++i) e += std::popcount((v[i] ^ target_[i]) & valid_[i]);
    return e;
  }

  Node random_literal() {
    Node l = Node::leaf(static_cast<int>(uniform_index(rng_, static_cast<std::uint64_t>(M_))));
    return uniform(rng_) < 0.5 ? Node::negate(std::move(l)) : l;
  }

  Node best_literal() {
    Node best = Node::constant(false);
    int e = error(best);
    const Node one = Node::constant(true);
    if (error(one) < e) {
      best = one;
      e = error(one);
    }
    for (int m = 0; m < M_; ++m)
      for (bool neg : {false, true}) {
        Node l = neg ? Node::negate(Node::leaf(m)) : Node::leaf(m);
        const int le = error(l);
        if (le < e) {
          best = l;
          e = le;
        }
      }
    return best;
  }

  // Collects pointers to "slots": leaves (possibly under a NOT) and operator nodes.
  void slots(Node& n, std::vector<Node*>& literals, std::vector<Node*>& ops) {
    if (n.op == Op::Leaf || n.op == Op::Const || (n.op == Op::Not && n.args[0].op == Op::Leaf)) {
      literals.push_back(&n);
      return;
    }
    if (n.op == Op::And || n.op == Op::Or) ops.push_back(&n);
    for (auto& a : n.args) slots(a, literals, ops);
  }

  Node mutate(const Node& from) {
    Node n = from;
    std::vector<Node*> literals, ops;
    slots(n, literals, ops);
    const int kind = static_cast<int>(uniform_index(rng_, 4));
    if (kind == 0 && !literals.empty()) {  // swap leaf
      *literals[uniform_index(rng_, literals.size())] = random_literal();
    } else if (kind == 1 && !ops.empty()) {  // swap operator
      Node* o = ops[uniform_index(rng_, ops.size())];
      o->op = o->op == Op::And ? Op::Or : Op::And;
    } else if (kind == 2 && !ops.empty()) {  // prune: keep one child
      Node* o = ops[uniform_index(rng_, ops.size())];
      Node keep = o->args[uniform_index(rng_, 2)];
      *o = std::move(keep);
    } else if (!literals.empty()) {  // grow: literal -> op(literal, new literal)
      Node* l = literals[uniform_index(rng_, literals.size())];
      Node old = *l;
      if (old.op == Op::Const) *l = random_literal();
      else *l = uniform(rng_) < 0.5 ? Node::conj(std::move(old), random_literal()) : Node::disj(std::move(old), random_literal());
    }
    return n;
  }

  SearchConfig cfg_;
  int M_;
  std::size_t N_, words_;
  std::vector<std::vector<std::uint64_t>> cols_;
  std::vector<std::uint64_t> target_, valid_;
  Rng rng_;
};

}  // namespace

FitResult fit_tree(const BinarizedAttributes& X, const std::vector<int>& y, const SearchConfig& cfg) {
  require(!y.empty(), ErrorKind::InvalidInput, "logic regression needs at least one example");
  require_dims(static_cast<Index>(y.size()), X.size(), "trait labels");
  require(cfg.max_depth >= 0, ErrorKind::InvalidInput, "max_depth must be non-negative");
  for (int v : y) require(v == 0 || v == 1, ErrorKind::InvalidInput, "trait labels must be 0 or 1");
  const int M = static_cast<int>(X.attributes());
  for (const auto& row : X.rows) {
    require(static_cast<int>(row.size()) == M, ErrorKind::Dimension, "ragged binarized attribute rows");
    for (auto v : row) require(v <= 1, ErrorKind::InvalidInput, "binarized attributes must be 0 or 1");
  }

  FitResult out;
  const int positives = static_cast<int>(std::count(y.begin(), y.end(), 1));
  if (positives == 0 || positives == static_cast<int>(y.size())) {
    out.tree = calibrate(Node::constant(positives > 0), X, y);
    out.tree.degenerate = true;
    out.accuracy = 1.0;
    return out;
  }
  Node root;
  if (cfg.allow_exhaustive && M <= 6 && cfg.max_depth <= 3) {
    root = exhaustive(X, y, cfg.max_depth);
    out.exhaustive = true;
  } else {
    root = Annealer(X, y, cfg).run();
  }
  // Never worse than the best constant.
  const Node constant = Node::constant(2 * positives > static_cast<int>(y.size()));
  if (misclassified(constant, X, y) < misclassified(root, X, y)) root = constant;
  out.accuracy = static_cast<double>(static_cast<int>(y.size()) - misclassified(root, X, y)) / static_cast<double>(y.size());
  out.tree = calibrate(std::move(root), X, y);
  return out;
}

std::vector<Eigen::ArrayXXf> trait_maps(const matclass::AttributeMap& map, const std::vector<LogicTree>& trees,
                                        double threshold) {
  const int M = static_cast<int>(map.planes.size());
  for (const auto& t : trees) t.root.validate(M);
  std::vector<Eigen::ArrayXXf> out(trees.size(), Eigen::ArrayXXf::Zero(map.height, map.width));
  std::vector<std::uint8_t> x(static_cast<std::size_t>(M));
  for (int r = 0; r < map.height; ++r)
    for (int c = 0; c < map.width; ++c) {
      for (int m = 0; m < M; ++m) x[static_cast<std::size_t>(m)] = map.planes[static_cast<std::size_t>(m)](r, c) >= threshold ? 1 : 0;
      for (std::size_t t = 0; t < trees.size(); ++t)
        out[t](r, c) = static_cast<float>(std::clamp(trees[t].probability(x), 0.0, 1.0));
    }
  return out;
}

namespace {

json node_to_json(const Node& n) {
  switch (n.op) {
    case Op::Const: return {{"const", n.value}};
    case Op::Leaf: return {{"leaf", n.value}};
    default: {
      json args = json::array();
      for (const auto& a : n.args) args.push_back(node_to_json(a));
      return {{"op", n.op == Op::Not ? "not" : (n.op == Op::And ? "and" : "or")}, {"args", args}};
    }
  }
}

Node node_from_json(const json& j) {
  require(j.is_object(), ErrorKind::Parse, "tree node must be a JSON object");
  if (j.contains("leaf")) {
    const int index = j.at("leaf").get<int>();
    require(index >= 0, ErrorKind::Parse, "leaf index must be non-negative");
    return Node::leaf(index);
  }
  if (j.contains("const")) return Node::constant(j.at("const").get<int>() != 0);
  const std::string op = j.at("op").get<std::string>();
  std::vector<Node> args;
  for (const auto& a : j.at("args")) args.push_back(node_from_json(a));
  Node n;
  if (op == "not") n.op = Op::Not;
  else if (op == "and") n.op = Op::And;
  else if (op == "or") n.op = Op::Or;
  else fail(ErrorKind::Parse, "unknown tree operator '" + op + "'");
  n.args = std::move(args);
  require(n.args.size() == (n.op == Op::Not ? 1u : 2u), ErrorKind::Parse, "wrong argument count for '" + op + "'");
  return n;
}

json parse(const std::string& text, const char* what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::Parse, std::string(what) + ": " + e.what());
  }
}

}  // namespace

std::string to_sexpr(const Node& n) { return node_to_json(n).dump(); }

Node node_from_sexpr(const std::string& text) {
  try {
    return node_from_json(parse(text, "tree"));
  } catch (const json::exception& e) {
    fail(ErrorKind::Parse, std::string("tree: ") + e.what());
  }
}

std::string tree_to_json(const LogicTree& t) {
  json j = {{"tree", node_to_json(t.root)}, {"intercept", t.intercept}, {"slope", t.slope}};
  if (t.degenerate) j["degenerate"] = true;
  return j.dump() + "\n";
}

LogicTree tree_from_json(const std::string& text) {
  const json j = parse(text, "tree file");
  LogicTree t;
  try {
    if (j.contains("tree")) {
      t.root = node_from_json(j.at("tree"));
      t.intercept = j.value("intercept", 0.0);
      t.slope = j.value("slope", 1.0);
      t.degenerate = j.value("degenerate", false);
    } else {
      t.root = node_from_json(j);  // bare s-expression
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Parse, std::string("tree file: ") + e.what());
  }
  return t;
}

void save_tree(const std::filesystem::path& path, const LogicTree& t) { write_file_atomic(path, tree_to_json(t)); }

LogicTree load_tree(const std::filesystem::path& path) { return tree_from_json(read_file(path)); }

std::string to_infix(const Node& n) {
  switch (n.op) {
    case Op::Const: return n.value ? "1" : "0";
    case Op::Leaf: return "x" + std::to_string(n.value);
    case Op::Not: return "!" + to_infix(n.args[0]);
    case Op::And: return "(" + to_infix(n.args[0]) + " & " + to_infix(n.args[1]) + ")";
    case Op::Or: return "(" + to_infix(n.args[0]) + " | " + to_infix(n.args[1]) + ")";
  }
  return "?";
}

}  // namespace matattr::logicreg
