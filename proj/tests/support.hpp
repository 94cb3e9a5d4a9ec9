#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <unistd.h>

#include "bqd/basis.hpp"
#include "bqd/dataio.hpp"
#include "bqd/estimator.hpp"

namespace testing {

/// Fresh directory under the system temp path, removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        const auto stamp = std::to_string(::getpid()) + "_" + std::to_string(counter++);
        path_ = std::filesystem::temp_directory_path() / ("bqd_test_" + stamp);
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    [[nodiscard]] const std::filesystem::path& path() const { return path_; }
    [[nodiscard]] std::filesystem::path operator/(const std::string& name) const {
        return path_ / name;
    }

private:
    std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline bqd::HouseholdRecord record(double log_q, double log_p, double log_y,
                                   std::string region = "all") {
    bqd::HouseholdRecord r;
    r.log_q = log_q;
    r.log_p = log_p;
    r.log_y = log_y;
    r.region = std::move(region);
    return r;
}

inline bqd::DomainBox unit_box() {
    bqd::DomainBox box;
    box.p_lo = 0.0;
    box.p_hi = 1.0;
    box.y_lo = 0.0;
    box.y_hi = 1.0;
    box.q_lo = 0.0;
    box.q_hi = 1.0;
    return box;
}

inline bqd::BasisSpec basis_with(int dp, int dy, int dq, const bqd::DomainBox& box) {
    bqd::BasisSpec b;
    b.deg_p = dp;
    b.deg_y = dy;
    b.deg_q = dq;
    b.box = box;
    return b;
}

/// Coefficients of G^-1 = (q - q_lo) / (q_hi - q_lo): half of T_0 plus half
/// of T_1 in the mapped quantity coordinate.
inline bqd::CoefficientVector affine_in_q(const bqd::BasisSpec& basis) {
    bqd::CoefficientVector theta = bqd::CoefficientVector::Zero(static_cast<long>(basis.size()));
    theta[static_cast<long>(basis.index(0, 0, 0))] = 0.5;
    if (basis.deg_q >= 1) {
        theta[static_cast<long>(basis.index(0, 0, 1))] = 0.5;
    }
    return theta;
}

}  // namespace testing
