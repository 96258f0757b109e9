#include "volagg/json_util.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "volagg/error.hpp"

namespace volagg::io {

Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Parse, path.string() + ": " + e.what());
  }
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out << text;
  if (!out) fail(ErrorKind::Io, "write failed for " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_json_file(const std::filesystem::path& path, const Json& json) {
  write_text_file(path, json.dump(1) + "\n");
}

Json matrix_to_json(const Eigen::MatrixXd& m) {
  Json rows = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const Json& j, const std::string& what, long rows, long cols) {
  if (!j.is_array()) fail(ErrorKind::Parse, what + ": expected a nested array");
  const long n_rows = static_cast<long>(j.size());
  if (rows >= 0 && n_rows != rows) {
    fail(ErrorKind::Parse, what + ": expected " + std::to_string(rows) + " rows, got " + std::to_string(n_rows));
  }
  long n_cols = n_rows > 0 && j[0].is_array() ? static_cast<long>(j[0].size()) : 0;
  if (cols >= 0 && n_cols != cols && n_rows > 0) {
    fail(ErrorKind::Parse, what + ": expected " + std::to_string(cols) + " columns, got " + std::to_string(n_cols));
  }
  Eigen::MatrixXd m(n_rows, n_cols);
  for (long r = 0; r < n_rows; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<long>(row.size()) != n_cols) {
      fail(ErrorKind::Parse, what + ": row " + std::to_string(r) + " has inconsistent length");
    }
    for (long c = 0; c < n_cols; ++c) {
      const auto& v = row[static_cast<std::size_t>(c)];
      if (!v.is_number()) fail(ErrorKind::Parse, what + ": non-numeric entry at row " + std::to_string(r));
      m(r, c) = v.get<double>();
    }
  }
  return m;
}

Json vector_to_json(const Eigen::VectorXd& v) {
  Json out = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

Eigen::VectorXd vector_from_json(const Json& j, const std::string& what, long size) {
  if (!j.is_array()) fail(ErrorKind::Parse, what + ": expected an array");
  if (size >= 0 && static_cast<long>(j.size()) != size) {
    fail(ErrorKind::Parse, what + ": expected " + std::to_string(size) + " values, got " + std::to_string(j.size()));
  }
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) fail(ErrorKind::Parse, what + ": non-numeric entry " + std::to_string(i));
    v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  }
  return v;
}

void write_blob_file(const std::filesystem::path& path, const std::vector<std::size_t>& shape,
                     const std::vector<double>& data) {
  static_assert(std::endian::native == std::endian::little, "blob files are little-endian");
  Json header;
  header["shape"] = shape;
  header["dtype"] = "f64le";
  std::string text = header.dump() + "\n";
  const std::size_t offset = text.size();
  text.resize(offset + data.size() * sizeof(double));
  if (!data.empty()) std::memcpy(text.data() + offset, data.data(), data.size() * sizeof(double));
  write_text_file(path, text);
}

std::vector<double> read_blob_file(const std::filesystem::path& path, std::vector<std::size_t>& shape) {
  const std::string text = read_text_file(path);
  const auto newline = text.find('\n');
  if (newline == std::string::npos) fail(ErrorKind::Parse, path.string() + ": missing blob header");
  Json header;
  try {
    header = Json::parse(text.substr(0, newline));
    shape = header.at("shape").get<std::vector<std::size_t>>();
    if (header.at("dtype").get<std::string>() != "f64le") fail(ErrorKind::Parse, path.string() + ": unsupported dtype");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Parse, path.string() + ": bad blob header: " + e.what());
  }
  std::size_t count = 1;
  for (auto d : shape) count *= d;
  const std::size_t payload = text.size() - newline - 1;
  if (payload != count * sizeof(double)) {
    fail(ErrorKind::Parse, path.string() + ": payload holds " + std::to_string(payload) + " bytes, header expects " +
                               std::to_string(count * sizeof(double)));
  }
  std::vector<double> data(count);
  if (count) std::memcpy(data.data(), text.data() + newline + 1, payload);
  return data;
}

}  // namespace volagg::io
