#include "candle/prior.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "candle/io.hpp"

namespace candle::prior {

const Tensor& SemanticFeatureSet::layer(int layer_id) const {
    for (const auto& l : layers) {
        if (l.layer_id == layer_id) return l.feature;
    }
    fail(ErrorKind::Value, "semantic feature set has no layer " + std::to_string(layer_id));
}

std::string layer_key(int layer_id) { return "layer_" + std::to_string(layer_id); }

void validate(const SemanticFeatureSet& set) {
    if (set.layers.size() != kLayerIds.size()) {
        fail(ErrorKind::Value, "semantic feature set must hold " + std::to_string(kLayerIds.size()) + " layers, got " +
                                   std::to_string(set.layers.size()));
    }
    for (std::size_t i = 0; i < set.layers.size(); ++i) {
        const auto& l = set.layers[i];
        const std::string key = layer_key(l.layer_id);
        if (l.layer_id != kLayerIds[i]) fail(ErrorKind::Value, "unexpected layer id at position " + std::to_string(i) + ": " + key);
        if (l.feature.rank() != 4) {
            fail(ErrorKind::Shape, key + ": expected rank 4 [N,D,h,w], got " + shape_str(l.feature.shape()));
        }
        if (l.feature.dim(0) != set.layers[0].feature.dim(0) || l.feature.dim(1) != set.layers[0].feature.dim(1)) {
            fail(ErrorKind::Shape, key + ": N and D must match layer_6, got " + shape_str(l.feature.shape()));
        }
        if (l.feature.numel() == 0) fail(ErrorKind::Shape, key + ": empty feature map");
        if (!l.feature.all_finite()) fail(ErrorKind::NonFinite, key + ": non-finite feature values");
    }
}

SemanticFeatureSet load_features(const std::filesystem::path& path) {
    const io::Container c = io::read_container(path);
    SemanticFeatureSet set;
    for (int id : kLayerIds) {
        const std::string key = layer_key(id);
        if (!c.contains(key)) fail(ErrorKind::Value, path.string() + ": missing layer '" + key + "'");
        set.layers.push_back({id, c.tensor(key)});
    }
    validate(set);
    return set;
}

void save_features(const std::filesystem::path& path, const SemanticFeatureSet& set) {
    validate(set);
    io::Container c;
    for (const auto& l : set.layers) c.add(layer_key(l.layer_id), l.feature);
    io::write_container(path, c);
}

namespace {

constexpr std::array<int, 4> kPoolFactors = {4, 8, 16, 16};

std::vector<float> draw_embeddings(std::mt19937_64& rng, int num_ids, int dim) {
    std::normal_distribution<float> normal(0.0f, 1.0f);
    std::vector<float> e(static_cast<std::size_t>(num_ids * dim));
    auto draw_one = [&](int i) {
        double norm = 0.0;
        for (int d = 0; d < dim; ++d) {
            const float v = normal(rng);
            e[static_cast<std::size_t>(i * dim + d)] = v;
            norm += double(v) * v;
        }
        const auto inv = static_cast<float>(1.0 / std::sqrt(norm));
        for (int d = 0; d < dim; ++d) e[static_cast<std::size_t>(i * dim + d)] *= inv;
    };
    auto max_cos = [&](int i) {
        double m = -1.0;
        for (int j = 0; j < i; ++j) {
            double dot = 0.0;
            for (int d = 0; d < dim; ++d)
                dot += double(e[static_cast<std::size_t>(i * dim + d)]) * e[static_cast<std::size_t>(j * dim + d)];
            m = std::max(m, dot);
        }
        return m;
    };
    for (int i = 0; i < num_ids; ++i) {
        int attempts = 0;
        do {
            if (++attempts > 1000) fail(ErrorKind::Value, "cannot draw separated material embeddings; increase dim");
            draw_one(i);
        } while (max_cos(i) >= 0.9);
    }
    return e;
}

std::vector<float> draw_orthogonal(std::mt19937_64& rng, int dim) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::MatrixXd g(dim, dim);
    for (int r = 0; r < dim; ++r)
        for (int c = 0; c < dim; ++c) g(r, c) = normal(rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(dim, dim);
    std::vector<float> out(static_cast<std::size_t>(dim * dim));
    for (int r = 0; r < dim; ++r)
        for (int c = 0; c < dim; ++c) out[static_cast<std::size_t>(r * dim + c)] = static_cast<float>(q(r, c));
    return out;
}

// Bin [lo, hi) of output cell i when pooling `in` samples into `out` cells.
std::pair<std::int64_t, std::int64_t> bin(std::int64_t i, std::int64_t in, std::int64_t out) {
    return {(i * in) / out, ((i + 1) * in + out - 1) / out};
}

}  // namespace

SyntheticPrior::SyntheticPrior(std::uint64_t seed, int dim, int num_ids) : dim_(dim), num_ids_(num_ids) {
    if (dim < 1) fail(ErrorKind::Config, "synthetic prior dim must be positive");
    if (num_ids < 1 || num_ids > kMaxMaterials) {
        fail(ErrorKind::Config, "synthetic prior supports 1.." + std::to_string(kMaxMaterials) + " material ids");
    }
    std::mt19937_64 rng(seed);
    embeddings_ = draw_embeddings(rng, num_ids, dim);
    for (auto& m : mixing_) m = draw_orthogonal(rng, dim);
}

SemanticFeatureSet SyntheticPrior::encode(const PriorInput& input) const {
    if (input.material_map == nullptr) fail(ErrorKind::Value, "synthetic prior needs a material map");
    return encode_materials(*input.material_map);
}

SemanticFeatureSet SyntheticPrior::encode_materials(const Tensor& material_map) const {
    Tensor mat = material_map;
    if (mat.rank() == 3) mat = Tensor({1, mat.dim(0), mat.dim(1), mat.dim(2)}, std::vector<float>(mat.data().begin(), mat.data().end()));
    if (mat.rank() != 4 || mat.dim(1) != 1) {
        fail(ErrorKind::Shape, "material map must be [N,1,H,W], got " + shape_str(material_map.shape()));
    }
    const auto N = mat.dim(0), H = mat.dim(2), W = mat.dim(3);
    std::vector<int> ids(mat.numel());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const float v = mat.ptr()[i];
        const auto id = static_cast<int>(std::lround(v));
        if (!std::isfinite(v) || std::fabs(v - static_cast<float>(id)) > 1e-6f || id < 0 || id >= num_ids_) {
            fail(ErrorKind::Value, "material id " + std::to_string(v) + " out of range [0, " + std::to_string(num_ids_) + ")");
        }
        ids[i] = id;
    }

    SemanticFeatureSet set;
    const std::int64_t D = dim_;
    for (std::size_t l = 0; l < kLayerIds.size(); ++l) {
        const auto h = std::max<std::int64_t>(1, H / kPoolFactors[l]);
        const auto w = std::max<std::int64_t>(1, W / kPoolFactors[l]);
        std::vector<float> out(static_cast<std::size_t>(N * D * h * w));
        std::vector<double> pooled(static_cast<std::size_t>(D));
        const auto& mix = mixing_[l];
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t i = 0; i < h; ++i)
                for (std::int64_t j = 0; j < w; ++j) {
                    std::fill(pooled.begin(), pooled.end(), 0.0);
                    const auto [y0, y1] = bin(i, H, h);
                    const auto [x0, x1] = bin(j, W, w);
                    for (auto y = y0; y < y1; ++y)
                        for (auto x = x0; x < x1; ++x) {
                            const int id = ids[static_cast<std::size_t>((n * H + y) * W + x)];
                            const float* e = embeddings_.data() + static_cast<std::ptrdiff_t>(id) * D;
                            for (std::int64_t d = 0; d < D; ++d) pooled[static_cast<std::size_t>(d)] += e[d];
                        }
                    const double inv = 1.0 / static_cast<double>((y1 - y0) * (x1 - x0));
                    for (std::int64_t r = 0; r < D; ++r) {
                        double acc = 0.0;
                        for (std::int64_t c = 0; c < D; ++c)
                            acc += double(mix[static_cast<std::size_t>(r * D + c)]) * pooled[static_cast<std::size_t>(c)];
                        out[static_cast<std::size_t>(((n * D + r) * h + i) * w + j)] = static_cast<float>(acc * inv);
                    }
                }
        set.layers.push_back({kLayerIds[l], Tensor({N, D, h, w}, std::move(out))});
    }
    return set;
}

SemanticFeatureSet encode_synthetic(const Tensor& material_map, std::uint64_t seed) {
    return SyntheticPrior(seed).encode_materials(material_map);
}

SemanticFeatureSet FilePrior::encode(const PriorInput& input) const {
    if (input.key.empty()) fail(ErrorKind::Value, "file prior needs an image key");
    return load_features(dir_ / (input.key + ".cndt"));
}

SemanticFeatureSet RawRgbPrior::encode(const PriorInput& input) const {
    if (input.image == nullptr) fail(ErrorKind::Value, "rgb prior needs an image");
    Tensor img = *input.image;
    if (img.rank() == 3) img = Tensor({1, img.dim(0), img.dim(1), img.dim(2)}, std::vector<float>(img.data().begin(), img.data().end()));
    SemanticFeatureSet set;
    for (int id : kLayerIds) set.layers.push_back({id, img});
    return set;
}

std::unique_ptr<PriorProvider> make_provider(const std::string& spec, std::uint64_t seed, int dim) {
    if (spec == "synthetic") return std::make_unique<SyntheticPrior>(seed, dim);
    if (spec == "rgb") return std::make_unique<RawRgbPrior>();
    if (spec.rfind("file:", 0) == 0 && spec.size() > 5) return std::make_unique<FilePrior>(spec.substr(5));
    fail(ErrorKind::Usage, "unknown provider '" + spec + "' (expected synthetic, rgb or file:PATH)");
}

}  // namespace candle::prior
