#include "candle/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace candle::io {

void Container::add(std::string name, Tensor tensor) {
    records_.push_back(Record{std::move(name), std::move(tensor), std::nullopt});
}

void Container::add_text(std::string name, std::string text) {
    records_.push_back(Record{std::move(name), Tensor::zeros({0}), std::move(text)});
}

bool Container::contains(const std::string& name) const {
    return std::any_of(records_.begin(), records_.end(), [&](const Record& r) { return r.name == name; });
}

const Tensor& Container::tensor(const std::string& name) const {
    for (const auto& r : records_) {
        if (r.name == name) {
            if (r.text) fail(ErrorKind::Value, "record '" + name + "' is text, not a tensor");
            return r.tensor;
        }
    }
    fail(ErrorKind::Value, "missing tensor record '" + name + "'");
}

const std::string& Container::text(const std::string& name) const {
    for (const auto& r : records_) {
        if (r.name == name) {
            if (!r.text) fail(ErrorKind::Value, "record '" + name + "' is a tensor, not text");
            return *r.text;
        }
    }
    fail(ErrorKind::Value, "missing text record '" + name + "'");
}

std::vector<std::string> Container::names() const {
    std::vector<std::string> out;
    for (const auto& r : records_) out.push_back(r.name);
    return out;
}

namespace {

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>((value >> (8 * i)) & 0xFF));
}

void put_f32(std::vector<std::uint8_t>& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    put<std::uint32_t>(out, bits);
}

class Reader {
   public:
    Reader(const std::vector<std::uint8_t>& bytes, std::string origin) : bytes_(bytes), origin_(std::move(origin)) {}

    bool done() const { return pos_ == bytes_.size(); }

    template <typename T>
    T get() {
        need(sizeof(T));
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(bytes_[pos_ + i]) << (8 * i));
        pos_ += sizeof(T);
        return v;
    }

    float get_f32() {
        const auto bits = get<std::uint32_t>();
        float v;
        std::memcpy(&v, &bits, sizeof v);
        return v;
    }

    std::string get_string(std::size_t n) {
        need(n);
        std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                      bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return s;
    }

    [[noreturn]] void corrupt(const std::string& why) const {
        fail(ErrorKind::Io, origin_ + ": malformed CNDT container at byte " + std::to_string(pos_) + ": " + why);
    }

   private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) corrupt("unexpected end of data");
    }

    const std::vector<std::uint8_t>& bytes_;
    std::string origin_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode(const Container& c) {
    std::vector<std::uint8_t> out;
    for (const auto& r : c.records()) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
        out.insert(out.end(), r.name.begin(), r.name.end());
        out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
        out.push_back(kVersion);
        if (r.text) {
            out.push_back(kDtypeU8);
            put<std::uint32_t>(out, 1);
            put<std::uint64_t>(out, r.text->size());
            out.insert(out.end(), r.text->begin(), r.text->end());
        } else {
            out.push_back(kDtypeF32);
            put<std::uint32_t>(out, static_cast<std::uint32_t>(r.tensor.rank()));
            for (auto e : r.tensor.shape()) put<std::uint64_t>(out, static_cast<std::uint64_t>(e));
            for (float v : r.tensor.data()) put_f32(out, v);
        }
    }
    return out;
}

Container decode(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
    Container c;
    Reader rd(bytes, origin);
    while (!rd.done()) {
        const auto name_len = rd.get<std::uint32_t>();
        std::string name = rd.get_string(name_len);
        if (rd.get_string(4) != std::string(kMagic, 4)) rd.corrupt("bad magic in record '" + name + "'");
        if (rd.get<std::uint8_t>() != kVersion) rd.corrupt("unsupported version in record '" + name + "'");
        const auto dtype = rd.get<std::uint8_t>();
        const auto rank = rd.get<std::uint32_t>();
        if (rank > 16) rd.corrupt("implausible rank in record '" + name + "'");
        Shape shape;
        std::uint64_t count = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            const auto e = rd.get<std::uint64_t>();
            if (e > (std::uint64_t{1} << 40)) rd.corrupt("implausible extent in record '" + name + "'");
            shape.push_back(static_cast<std::int64_t>(e));
            count *= e;
        }
        if (dtype == kDtypeF32) {
            if (count > bytes.size()) rd.corrupt("payload larger than file in record '" + name + "'");
            std::vector<float> data(static_cast<std::size_t>(count));
            for (auto& v : data) v = rd.get_f32();
            c.add(std::move(name), Tensor(std::move(shape), std::move(data)));
        } else if (dtype == kDtypeU8) {
            if (rank != 1) rd.corrupt("text record '" + name + "' must be rank 1");
            c.add_text(std::move(name), rd.get_string(static_cast<std::size_t>(count)));
        } else {
            rd.corrupt("unknown dtype " + std::to_string(dtype) + " in record '" + name + "'");
        }
    }
    return c;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for reading");
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::Io, "write failed for '" + path.string() + "'");
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

void write_container(const std::filesystem::path& path, const Container& c) { write_file(path, encode(c)); }

Container read_container(const std::filesystem::path& path) { return decode(read_file(path), path.string()); }

void write_tensor(const std::filesystem::path& path, const std::string& name, const Tensor& t) {
    Container c;
    c.add(name, t);
    write_container(path, c);
}

Tensor read_tensor(const std::filesystem::path& path) {
    const Container c = read_container(path);
    for (const auto& r : c.records()) {
        if (!r.text) return r.tensor;
    }
    fail(ErrorKind::Io, "'" + path.string() + "' holds no tensor records");
}

std::vector<std::uint8_t> encode_ppm(const Tensor& image) {
    Shape s = image.shape();
    if (s.size() == 4 && s[0] == 1) s.erase(s.begin());
    if (s.size() != 3 || s[0] != 3) fail(ErrorKind::Shape, "PPM export needs a [3,H,W] image, got " + shape_str(image.shape()));
    const auto H = s[1], W = s[2];
    const std::string header = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(out.size() + static_cast<std::size_t>(3 * H * W));
    for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x)
            for (std::int64_t c = 0; c < 3; ++c) {
                const float v = std::clamp(image.ptr()[(c * H + y) * W + x], 0.0f, 1.0f);
                out.push_back(static_cast<std::uint8_t>(std::lround(255.0f * v)));
            }
    return out;
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) { write_file(path, encode_ppm(image)); }

Tensor read_ppm(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    std::size_t pos = 0;
    auto bad = [&](const std::string& why) -> void { fail(ErrorKind::Io, path.string() + ": invalid PPM: " + why); };
    auto skip_space = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto number = [&]() -> long {
        skip_space();
        long v = 0;
        bool any = false;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) {
            v = v * 10 + (bytes[pos++] - '0');
            any = true;
            if (v > 1'000'000) bad("header value too large");
        }
        if (!any) bad("expected a number in header");
        return v;
    };
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') bad("missing P6 magic");
    pos = 2;
    const long W = number(), H = number(), maxval = number();
    if (W < 1 || H < 1) bad("empty image");
    if (maxval != 255) bad("only 8-bit (maxval 255) images are supported");
    ++pos;  // single whitespace byte before the raster
    if (bytes.size() - pos < static_cast<std::size_t>(3 * W * H)) bad("truncated raster");
    std::vector<float> data(static_cast<std::size_t>(3 * W * H));
    for (long y = 0; y < H; ++y)
        for (long x = 0; x < W; ++x)
            for (long c = 0; c < 3; ++c)
                data[static_cast<std::size_t>((c * H + y) * W + x)] = static_cast<float>(bytes[pos++]) / 255.0f;
    return Tensor({3, H, W}, std::move(data));
}

}  // namespace candle::io
