#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "candle/tensor.hpp"

namespace candle::io {

// CNDT tensor block: "CNDT", version 0x01, dtype byte, u32 rank, rank x u64
// extents, payload. All integers little-endian. A container is a sequence of
// records (u32 name length, UTF-8 name, tensor block) running to end of file.
inline constexpr char kMagic[4] = {'C', 'N', 'D', 'T'};
inline constexpr std::uint8_t kVersion = 0x01;
inline constexpr std::uint8_t kDtypeF32 = 0x01;
// Rank-1 block of raw bytes; used for UTF-8 text records such as `config`.
inline constexpr std::uint8_t kDtypeU8 = 0x02;

struct Record {
    std::string name;
    Tensor tensor;
    std::optional<std::string> text;  // set for kDtypeU8 records
};

class Container {
   public:
    void add(std::string name, Tensor tensor);
    void add_text(std::string name, std::string text);

    const std::vector<Record>& records() const { return records_; }
    bool contains(const std::string& name) const;
    // Throws Error(Value) naming the key when absent or of the wrong kind.
    const Tensor& tensor(const std::string& name) const;
    const std::string& text(const std::string& name) const;
    std::vector<std::string> names() const;

   private:
    std::vector<Record> records_;
};

std::vector<std::uint8_t> encode(const Container& c);
Container decode(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>");

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

// Single-tensor convenience wrappers; read_tensor returns the first tensor record.
void write_tensor(const std::filesystem::path& path, const std::string& name, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

// Binary PPM (P6, maxval 255). Input is [3,H,W] or [1,3,H,W]; values are
// written as round(255 * clip(v, 0, 1)).
void write_ppm(const std::filesystem::path& path, const Tensor& image);
std::vector<std::uint8_t> encode_ppm(const Tensor& image);
// Returns [3,H,W] in [0,1].
Tensor read_ppm(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace candle::io
