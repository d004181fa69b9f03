#pragma once

#include "matattr/core.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace matattr::detail {

inline nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
    rows.push_back(row);
  }
  return rows;
}

inline nlohmann::json vector_to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Matrix matrix_from_json(const nlohmann::json& j, Index rows, Index cols, const std::string& what) {
  require(j.is_array() && static_cast<Index>(j.size()) == rows, ErrorKind::Dimension, what + ": wrong row count");
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    const auto row = j[static_cast<std::size_t>(r)].get<std::vector<double>>();
    require(static_cast<Index>(row.size()) == cols, ErrorKind::Dimension, what + ": wrong column count");
    for (Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)];
  }
  return m;
}

inline Matrix matrix_from_json(const nlohmann::json& j, const std::string& what) {
  require(j.is_array() && !j.empty() && j[0].is_array(), ErrorKind::Parse, what + ": expected nested arrays");
  return matrix_from_json(j, static_cast<Index>(j.size()), static_cast<Index>(j[0].size()), what);
}

inline Vector vector_from_json(const nlohmann::json& j, Index size, const std::string& what) {
  const auto v = j.get<std::vector<double>>();
  require(static_cast<Index>(v.size()) == size, ErrorKind::Dimension, what + ": wrong length");
  return Eigen::Map<const Vector>(v.data(), size);
}

template <typename F>
auto parse_json(const std::string& text, const std::string& what, F&& body) {
  try {
    return body(nlohmann::json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Parse, what + ": " + e.what());
  }
}

}  // namespace matattr::detail
