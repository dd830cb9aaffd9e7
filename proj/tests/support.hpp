#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "candle/tensor.hpp"

namespace candle::test {

inline Tensor random_tensor(std::uint64_t seed, const Shape& shape, float lo = -1.0f, float hi = 1.0f) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> d(lo, hi);
    std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = d(rng);
    return Tensor(shape, std::move(v));
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
   public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("candle_" + tag + "_" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

   private:
    std::filesystem::path path_;
};

}  // namespace candle::test
