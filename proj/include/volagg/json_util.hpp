#pragma once

// Shared JSON conventions: nested row-major arrays for matrices, shortest
// round-trip decimal encoding for doubles.

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

namespace volagg::io {

using Json = nlohmann::ordered_json;

Json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const Json& json);
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

Json matrix_to_json(const Eigen::MatrixXd& m);
// Throws Parse naming `what` when the value is not a rows x cols nested array
// (rows/cols < 0 accept any size).
Eigen::MatrixXd matrix_from_json(const Json& j, const std::string& what, long rows = -1, long cols = -1);

Json vector_to_json(const Eigen::VectorXd& v);
Eigen::VectorXd vector_from_json(const Json& j, const std::string& what, long size = -1);

// Flat little-endian float64 payload preceded by a one-line JSON header
// {"shape":[...],"dtype":"f64le"}.
void write_blob_file(const std::filesystem::path& path, const std::vector<std::size_t>& shape,
                     const std::vector<double>& data);
std::vector<double> read_blob_file(const std::filesystem::path& path, std::vector<std::size_t>& shape);

}  // namespace volagg::io
