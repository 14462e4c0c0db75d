#include "obsdiff/tensor_store.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <unordered_set>

namespace obsdiff {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

template <typename T>
void put_scalar_bytes(std::vector<std::uint8_t>& out, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    // memcpy order is the host order; this codec is little-endian only, which
    // every platform we target is. Guarded by the round-trip fuzz test.
    out.insert(out.end(), buf, buf + sizeof(T));
}

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

    std::size_t remaining() const { return bytes_.size() - pos_; }

    void take(void* dst, std::size_t n, const char* what) {
        require(remaining() >= n, ErrorCode::Truncated,
                std::string("buffer ends inside ") + what);
        std::memcpy(dst, bytes_.data() + pos_, n);
        pos_ += n;
    }

    std::uint32_t u32(const char* what) {
        std::uint8_t buf[4];
        take(buf, 4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(buf[i]) << (8 * i);
        }
        return v;
    }

    std::uint64_t u64(const char* what) {
        std::uint8_t buf[8];
        take(buf, 8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
        }
        return v;
    }

    std::uint8_t u8(const char* what) {
        std::uint8_t v = 0;
        take(&v, 1, what);
        return v;
    }

    std::string str(std::size_t n, const char* what) {
        require(remaining() >= n, ErrorCode::Truncated,
                std::string("buffer ends inside ") + what);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

private:
    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

void check_record(const TensorRecord& r) {
    require(!r.shape.empty(), ErrorCode::BadShape, r.name + ": empty shape");
    std::uint64_t product = 1;
    for (std::uint64_t d : r.shape) {
        require(d > 0, ErrorCode::BadShape, r.name + ": zero dimension");
        product *= d;
    }
    require(product == r.element_count(), ErrorCode::BadShape,
            r.name + ": shape product does not match element count");
}

} // namespace

std::uint64_t TensorRecord::element_count() const {
    return std::visit([](const auto& v) { return static_cast<std::uint64_t>(v.size()); }, data);
}

TensorRecord TensorRecord::from_matrix(const std::string& name, const Eigen::MatrixXd& m) {
    TensorRecord r;
    r.name = name;
    r.shape = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
    std::vector<double> buf(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            buf[static_cast<std::size_t>(i * m.cols() + j)] = m(i, j); // row-major
        }
    }
    r.data = std::move(buf);
    return r;
}

TensorRecord TensorRecord::from_vector(const std::string& name, const Eigen::VectorXd& v) {
    TensorRecord r;
    r.name = name;
    r.shape = {static_cast<std::uint64_t>(v.size())};
    r.data = std::vector<double>(v.data(), v.data() + v.size());
    return r;
}

Eigen::MatrixXd TensorRecord::to_matrix() const {
    require(shape.size() == 2 || shape.size() == 1, ErrorCode::BadShape,
            name + ": expected rank 1 or 2");
    const auto rows = static_cast<Eigen::Index>(shape[0]);
    const auto cols = static_cast<Eigen::Index>(shape.size() == 2 ? shape[1] : 1);
    const auto& buf = std::get<std::vector<double>>(data);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) {
            m(i, j) = buf[static_cast<std::size_t>(i * cols + j)];
        }
    }
    return m;
}

Eigen::VectorXd TensorRecord::to_vector() const {
    require(shape.size() == 1, ErrorCode::BadShape, name + ": expected rank 1");
    const auto& buf = std::get<std::vector<double>>(data);
    return Eigen::Map<const Eigen::VectorXd>(buf.data(), static_cast<Eigen::Index>(buf.size()));
}

const TensorRecord& Container::find(const std::string& name) const {
    for (const auto& r : records) {
        if (r.name == name) {
            return r;
        }
    }
    fail(ErrorCode::UnknownLayer, "container has no tensor named " + name);
}

bool Container::contains(const std::string& name) const {
    return std::any_of(records.begin(), records.end(),
                       [&](const TensorRecord& r) { return r.name == name; });
}

std::vector<std::uint8_t> write_container(const Container& container) {
    require(container.metadata.is_object(), ErrorCode::BadMetadata,
            "metadata must be a JSON object");

    std::unordered_set<std::string> seen;
    for (const auto& r : container.records) {
        check_record(r);
        require(seen.insert(r.name).second, ErrorCode::DuplicateName,
                "duplicate tensor name " + r.name);
    }

    std::vector<std::uint8_t> out;
    out.push_back('O');
    out.push_back('B');
    out.push_back('S');
    out.push_back('D');
    put_u32(out, Container::kVersion);

    const std::string meta = container.metadata.dump();
    put_u32(out, static_cast<std::uint32_t>(meta.size()));
    out.insert(out.end(), meta.begin(), meta.end());

    put_u32(out, static_cast<std::uint32_t>(container.records.size()));
    for (const auto& r : container.records) {
        put_u32(out, static_cast<std::uint32_t>(r.name.size()));
        out.insert(out.end(), r.name.begin(), r.name.end());
        out.push_back(static_cast<std::uint8_t>(r.dtype()));
        put_u32(out, static_cast<std::uint32_t>(r.shape.size()));
        for (std::uint64_t d : r.shape) {
            put_u64(out, d);
        }
        std::visit(
            [&](const auto& buf) {
                for (auto v : buf) {
                    put_scalar_bytes(out, v);
                }
            },
            r.data);
    }
    return out;
}

Container read_container(const std::vector<std::uint8_t>& bytes) {
    Reader in(bytes);

    char magic[4];
    in.take(magic, 4, "magic");
    require(std::memcmp(magic, "OBSD", 4) == 0, ErrorCode::NotAContainer,
            "bad magic, not an .obsd container");

    const std::uint32_t version = in.u32("version");
    require(version == Container::kVersion, ErrorCode::NotAContainer,
            "unsupported container version " + std::to_string(version));

    Container c;
    const std::uint32_t meta_len = in.u32("metadata length");
    const std::string meta = in.str(meta_len, "metadata");
    c.metadata = nlohmann::json::parse(meta, nullptr, /*allow_exceptions=*/false);
    require(!c.metadata.is_discarded() && c.metadata.is_object(), ErrorCode::BadMetadata,
            "metadata is not a JSON object");

    const std::uint32_t record_count = in.u32("record count");
    std::unordered_set<std::string> seen;
    c.records.reserve(record_count);
    for (std::uint32_t i = 0; i < record_count; ++i) {
        TensorRecord r;
        const std::uint32_t name_len = in.u32("name length");
        r.name = in.str(name_len, "name");
        require(seen.insert(r.name).second, ErrorCode::DuplicateName,
                "duplicate tensor name " + r.name);

        const std::uint8_t dtype_code = in.u8("dtype");
        require(dtype_code <= static_cast<std::uint8_t>(Dtype::F64), ErrorCode::UnknownDtype,
                r.name + ": dtype code " + std::to_string(dtype_code));

        const std::uint32_t rank = in.u32("rank");
        require(rank >= 1, ErrorCode::BadShape, r.name + ": rank 0");
        std::uint64_t product = 1;
        r.shape.resize(rank);
        for (std::uint32_t k = 0; k < rank; ++k) {
            r.shape[k] = in.u64("dimension");
            require(r.shape[k] > 0, ErrorCode::BadShape, r.name + ": zero dimension");
            require(product <= UINT64_MAX / r.shape[k], ErrorCode::BadShape,
                    r.name + ": shape overflow");
            product *= r.shape[k];
        }

        // an element is at least 4 bytes, so this rejects absurd counts before
        // the byte-size multiply below could wrap
        require(product <= in.remaining(), ErrorCode::Truncated, r.name + ": tensor data");

        if (dtype_code == static_cast<std::uint8_t>(Dtype::F32)) {
            std::vector<float> buf(product);
            in.take(buf.data(), product * sizeof(float), "tensor data");
            r.data = std::move(buf);
        } else {
            std::vector<double> buf(product);
            in.take(buf.data(), product * sizeof(double), "tensor data");
            r.data = std::move(buf);
        }
        c.records.push_back(std::move(r));
    }
    require(in.remaining() == 0, ErrorCode::Truncated, "trailing bytes after last record");
    return c;
}

void save_container(const Container& container, const std::string& path) {
    const auto bytes = write_container(container);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorCode::IoError, "cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    require(out.good(), ErrorCode::IoError, "write failed for " + path);
}

Container load_container(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    require(in.good(), ErrorCode::IoError, "cannot open " + path);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    std::vector<std::uint8_t> bytes(size);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
    require(in.good() || in.eof(), ErrorCode::IoError, "read failed for " + path);
    return read_container(bytes);
}

std::string_view error_code_name(ErrorCode code) {
    switch (code) {
    case ErrorCode::DuplicateName: return "DuplicateName";
    case ErrorCode::BadShape: return "BadShape";
    case ErrorCode::NotAContainer: return "NotAContainer";
    case ErrorCode::Truncated: return "Truncated";
    case ErrorCode::UnknownDtype: return "UnknownDtype";
    case ErrorCode::BadMetadata: return "BadMetadata";
    case ErrorCode::BadConfig: return "BadConfig";
    case ErrorCode::BadStep: return "BadStep";
    case ErrorCode::UnknownLayer: return "UnknownLayer";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NotFinalized: return "NotFinalized";
    case ErrorCode::NotPositiveDefinite: return "NotPositiveDefinite";
    case ErrorCode::BadSpec: return "BadSpec";
    case ErrorCode::IoError: return "IoError";
    }
    return "Unknown";
}

} // namespace obsdiff
