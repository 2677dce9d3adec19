#pragma once

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "pivotmerge/random.hpp"
#include "pivotmerge/tensorstore.hpp"

namespace testutil {

using pivotmerge::Matrix;

// Deterministic Gaussian matrix; each (seed, stream) pair gives fresh values.
inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, std::uint64_t stream = 0) {
    const pivotmerge::CounterStream rng(seed, stream);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(static_cast<std::uint64_t>(i));
    return m;
}

inline double rel_error(const Matrix& got, const Matrix& want) {
    const double denom = std::max(want.norm(), 1e-300);
    return (got - want).norm() / denom;
}

inline double checkpoint_rel_error(const pivotmerge::ProjectorCheckpoint& got,
                                   const pivotmerge::ProjectorCheckpoint& want) {
    double worst = 0.0;
    for (std::size_t l = 0; l < want.layers.size(); ++l) {
        worst = std::max(worst, rel_error(pivotmerge::augment(got.layers[l]).matrix,
                                          pivotmerge::augment(want.layers[l]).matrix));
    }
    return worst;
}

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// Scratch directory removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("pivotmerge-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

} // namespace testutil
