#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "obsdiff/errors.hpp"

namespace obsdiff {

// Self-describing binary container for models, calibration sets and Hessian
// snapshots. One codec for everything; file extension `.obsd`.
//
// Layout (all integers little-endian):
//   magic            4 bytes  "OBSD"
//   version          u32      currently 1
//   metadata_len     u32
//   metadata         UTF-8 JSON object
//   record_count     u32
//   per record:
//     name_len       u32
//     name           bytes
//     dtype          u8       0 = f32, 1 = f64
//     rank           u32
//     dims           rank x u64
//     data           raw little-endian elements

enum class Dtype : std::uint8_t { F32 = 0, F64 = 1 };

struct TensorRecord {
    std::string name;
    std::vector<std::uint64_t> shape; // all dims > 0
    std::variant<std::vector<float>, std::vector<double>> data;

    Dtype dtype() const {
        return std::holds_alternative<std::vector<float>>(data) ? Dtype::F32 : Dtype::F64;
    }
    std::uint64_t element_count() const;

    static TensorRecord from_matrix(const std::string& name, const Eigen::MatrixXd& m);
    static TensorRecord from_vector(const std::string& name, const Eigen::VectorXd& v);
    // Requires rank 2 records (or rank 1, read back as a single column).
    Eigen::MatrixXd to_matrix() const;
    Eigen::VectorXd to_vector() const;
};

struct Container {
    static constexpr std::uint32_t kVersion = 1;

    nlohmann::json metadata = nlohmann::json::object();
    std::vector<TensorRecord> records;

    const TensorRecord& find(const std::string& name) const;
    bool contains(const std::string& name) const;
};

std::vector<std::uint8_t> write_container(const Container& container);
Container read_container(const std::vector<std::uint8_t>& bytes);

void save_container(const Container& container, const std::string& path);
Container load_container(const std::string& path);

} // namespace obsdiff
