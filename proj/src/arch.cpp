#include "candle/arch.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "candle/io.hpp"
#include "candle/ops.hpp"
#include "candle/wavelet.hpp"

namespace candle::arch {

int ModelConfig::channels(int level) const {
    if (level <= 1) return base_channels;
    return base_channels << (level - 1);
}

void ModelConfig::validate() const {
    if (stages < 2) fail(ErrorKind::Config, "model config: stages must be >= 2");
    if (stages > 6) fail(ErrorKind::Config, "model config: stages must be <= 6");
    if (base_channels < 4) fail(ErrorKind::Config, "model config: base_channels must be >= 4");
    if (prior_dim < 1) fail(ErrorKind::Config, "model config: prior_dim must be positive");
    if (!std::isfinite(edge_gate_a) || !std::isfinite(edge_gate_b) || !std::isfinite(sffb_gate_bias)) {
        fail(ErrorKind::Config, "model config: initial gate values must be finite");
    }
}

std::string ModelConfig::to_text() const {
    std::ostringstream os;
    os.precision(9);
    os << "stages=" << stages << "\nbase_channels=" << base_channels << "\nprior_dim=" << prior_dim
       << "\nguidance=" << (guidance ? 1 : 0) << "\ncolor_freq=" << (color_freq ? 1 : 0) << "\nrefiner=" << (refiner ? 1 : 0)
       << "\nedge_gate_a=" << edge_gate_a << "\nedge_gate_b=" << edge_gate_b << "\nsffb_gate_bias=" << sffb_gate_bias
       << "\nseed=" << seed << "\n";
    return os.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
    ModelConfig c;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) fail(ErrorKind::Config, "model config: malformed line '" + line + "'");
        const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
        try {
            if (key == "stages") c.stages = std::stoi(value);
            else if (key == "base_channels") c.base_channels = std::stoi(value);
            else if (key == "prior_dim") c.prior_dim = std::stoi(value);
            else if (key == "guidance") c.guidance = std::stoi(value) != 0;
            else if (key == "color_freq") c.color_freq = std::stoi(value) != 0;
            else if (key == "refiner") c.refiner = std::stoi(value) != 0;
            else if (key == "edge_gate_a") c.edge_gate_a = std::stof(value);
            else if (key == "edge_gate_b") c.edge_gate_b = std::stof(value);
            else if (key == "sffb_gate_bias") c.sffb_gate_bias = std::stof(value);
            else if (key == "seed") c.seed = std::stoull(value);
            else fail(ErrorKind::Config, "model config: unknown key '" + key + "'");
        } catch (const std::logic_error&) {
            fail(ErrorKind::Config, "model config: bad value for '" + key + "'");
        }
    }
    c.validate();
    return c;
}

void ParamTable::add(const std::string& name, Tensor value) {
    if (!params_.emplace(name, std::move(value)).second) {
        fail(ErrorKind::Value, "duplicate parameter name '" + name + "'");
    }
}

const Tensor& ParamTable::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) fail(ErrorKind::Value, "unknown parameter '" + name + "'");
    return it->second;
}

Tensor& ParamTable::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) fail(ErrorKind::Value, "unknown parameter '" + name + "'");
    return it->second;
}

std::size_t ParamTable::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
}

void ParamTable::set_trainable(const std::string& prefix, bool exclusive) {
    for (auto& [name, t] : params_) {
        const bool match = name.rfind(prefix, 0) == 0;
        if (match) t.set_requires_grad(true);
        else if (exclusive) t.set_requires_grad(false);
    }
}

void ParamTable::set_trainable_all(bool value) {
    for (auto& [_, t] : params_) t.set_requires_grad(value);
}

void ParamTable::zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
}

namespace {

std::string stage_name(const char* kind, int s) { return std::string(kind) + std::to_string(s); }

Tensor conv_same(const Tensor& x, const ConvParams& p, int stride = 1) {
    return conv2d(x, p.weight, p.bias, stride, static_cast<int>(p.weight.dim(2) / 2));
}

const std::vector<float>& sobel_x() {
    static const std::vector<float> k = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
    return k;
}

const std::vector<float>& sobel_y() {
    static const std::vector<float> k = {-1, -2, -1, 0, 0, 0, 1, 2, 1};
    return k;
}

}  // namespace

PsfResult psf_fuse(const Tensor& f_enc, const std::vector<Tensor>& layers, const PsfParams& p) {
    if (f_enc.rank() != 4) fail(ErrorKind::Shape, "psf_fuse: backbone feature must be [N,C,h,w]");
    if (layers.empty() || layers.size() != p.phi.size()) {
        fail(ErrorKind::Value, "psf_fuse: expected " + std::to_string(p.phi.size()) + " prior layers, got " +
                                   std::to_string(layers.size()));
    }
    const auto N = f_enc.dim(0), h = f_enc.dim(2), w = f_enc.dim(3);
    for (const auto& l : layers) {
        if (l.rank() != 4 || l.dim(0) != N) {
            fail(ErrorKind::Shape, "psf_fuse: prior layer " + shape_str(l.shape()) + " incompatible with batch " +
                                       std::to_string(N));
        }
    }
    // Pooled post-relu features are positive and alike across images, so a
    // relu hidden unit can be dead for every input; the leak keeps the gate trainable.
    const Tensor hidden = leaky_relu(linear(global_avg_pool(f_enc), p.fc1_w, p.fc1_b), kPsfLeak);
    const Tensor alpha = softmax_lastdim(linear(hidden, p.fc2_w, p.fc2_b));
    std::vector<Tensor> projected;
    projected.reserve(layers.size());
    for (std::size_t l = 0; l < layers.size(); ++l) {
        projected.push_back(conv_same(bilinear_resize(layers[l], h, w), p.phi[l]));
    }
    return {mix(projected, alpha), alpha};
}

PsfResult psf_fuse(const Tensor& f_enc, const prior::SemanticFeatureSet& prior, const PsfParams& p) {
    std::vector<Tensor> layers;
    for (int id : prior::kLayerIds) layers.push_back(prior.layer(id));
    return psf_fuse(f_enc, layers, p);
}

Tensor drfb_inject(const Tensor& f_enc, const Tensor& fused, const DrfbParams& p) {
    if (f_enc.shape() != fused.shape()) {
        fail(ErrorKind::Shape, "drfb_inject: backbone " + shape_str(f_enc.shape()) + " and prior " + shape_str(fused.shape()) +
                                   " differ");
    }
    const auto C = f_enc.dim(1), h = f_enc.dim(2), w = f_enc.dim(3);
    const Tensor q = to_tokens(conv_same(f_enc, p.wq));
    const Tensor k = to_tokens(conv_same(fused, p.wk));
    const Tensor v = to_tokens(conv_same(fused, p.wv));
    const Tensor injected = from_tokens(attention(q, k, v, 1.0f / std::sqrt(static_cast<float>(C))), h, w);
    return add(f_enc, mul_scalar(injected, p.gamma));
}

Tensor edge_map(const Tensor& f, const Tensor& a, const Tensor& b) {
    if (f.rank() != 4) fail(ErrorKind::Shape, "edge_map: expected [N,C,h,w], got " + shape_str(f.shape()));
    const Tensor m = pad2d(channel_mean(f), 1, 1, 1, 1, PadMode::Replicate);
    const Tensor gx = filter2d_valid(m, sobel_x(), 3, 3);
    const Tensor gy = filter2d_valid(m, sobel_y(), 3, 3);
    const Tensor mag = sqrt(add_scalar(add(mul(gx, gx), mul(gy, gy)), 1e-8f));
    return sigmoid(affine(mag, a, b));
}

Tensor bfacg(const Tensor& f, const BfacgParams& p) {
    const Tensor str = conv_same(relu(conv_same(f, p.str1)), p.str2);
    const Tensor chr = conv_same(relu(conv_same(f, p.chr1)), p.chr2);
    const Tensor gate = expand_channels(edge_map(f, p.edge_a, p.edge_b), f.dim(1));
    // G*str + (1-G)*chr
    return add(chr, mul(gate, sub(str, chr)));
}

Tensor sffb_filter(const Tensor& skip, const SffbParams& p) {
    wavelet::Subbands bands = wavelet::dwt2_haar(skip);
    bands.ll = mul(sigmoid(conv_same(bands.ll, p.gate)), bands.ll);
    return wavelet::idwt2_haar(bands);
}

Tensor refiner_apply(const Tensor& coarse, const RefinerParams& p) {
    if (p.convs.empty()) fail(ErrorKind::Value, "refiner_apply: refiner has no layers");
    Tensor x = coarse;
    for (std::size_t i = 0; i < p.convs.size(); ++i) {
        x = conv_same(x, p.convs[i]);
        if (i + 1 < p.convs.size()) x = relu(x);
    }
    return clip(add(coarse, x), 0.0f, 1.0f);
}

ConvParams Model::conv(const std::string& prefix) const {
    return {params.at(prefix + ".w"), params.at(prefix + ".b")};
}

PsfParams Model::psf(int s) const {
    const std::string b = stage_name("enc", s) + ".psf.";
    PsfParams p{params.at(b + "fc1.w"), params.at(b + "fc1.b"), params.at(b + "fc2.w"), params.at(b + "fc2.b"), {}};
    for (int id : prior::kLayerIds) p.phi.push_back(conv(b + "phi_" + std::to_string(id)));
    return p;
}

DrfbParams Model::drfb(int s) const {
    const std::string b = stage_name("enc", s) + ".drfb.";
    return {conv(b + "wq"), conv(b + "wk"), conv(b + "wv"), params.at(b + "gamma")};
}

BfacgParams Model::bfacg(int s) const {
    const std::string b = stage_name("dec", s) + ".bfacg.";
    return {conv(b + "str1"), conv(b + "str2"), conv(b + "chr1"), conv(b + "chr2"), params.at(b + "edge_a"),
            params.at(b + "edge_b")};
}

SffbParams Model::sffb(int s) const { return {conv(stage_name("dec", s) + ".sffb.gate")}; }

RefinerParams Model::refiner() const {
    RefinerParams p;
    for (int i = 1; i <= 4; ++i) p.convs.push_back(conv("refiner.c" + std::to_string(i)));
    return p;
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

class Initializer {
   public:
    Initializer(ParamTable& table, std::uint64_t seed) : table_(table), seed_(seed) {}

    void uniform(const std::string& name, const Shape& shape, float bound) {
        const std::uint64_t h = fnv1a(name);
        std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                          static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
        std::mt19937_64 rng(seq);
        std::uniform_real_distribution<float> dist(-bound, bound);
        std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
        for (auto& x : v) x = dist(rng);
        table_.add(name, Tensor(shape, std::move(v)));
    }

    void constant(const std::string& name, const Shape& shape, float value) { table_.add(name, Tensor::full(shape, value)); }

    // Uniform(+-1/sqrt(fan_in)) for weight and bias.
    void conv(const std::string& prefix, std::int64_t cin, std::int64_t cout, std::int64_t k) {
        const float bound = 1.0f / std::sqrt(static_cast<float>(cin * k * k));
        uniform(prefix + ".w", {cout, cin, k, k}, bound);
        uniform(prefix + ".b", {cout}, bound);
    }

    void linear(const std::string& prefix, std::int64_t in, std::int64_t out, bool random_bias = true) {
        const float bound = 1.0f / std::sqrt(static_cast<float>(in));
        uniform(prefix + ".w", {out, in}, bound);
        if (random_bias) uniform(prefix + ".b", {out}, bound);
        else constant(prefix + ".b", {out}, 0.0f);
    }

   private:
    ParamTable& table_;
    std::uint64_t seed_;
};

}  // namespace

Model init_model(const ModelConfig& config) {
    config.validate();
    Model m{config, {}};
    Initializer init(m.params, config.seed);
    const int S = config.stages;
    init.conv("stem", 3, config.channels(0), 3);
    for (int s = 1; s <= S; ++s) {
        const int cin = config.channels(s - 1), c = config.channels(s);
        const std::string e = stage_name("enc", s);
        init.conv(e + ".down", cin, c, 3);
        init.conv(e + ".conv", c, c, 3);
        if (config.guidance) {
            const int hidden = std::max(1, c / 4);
            init.linear(e + ".psf.fc1", c, hidden, false);
            init.linear(e + ".psf.fc2", hidden, static_cast<std::int64_t>(prior::kLayerIds.size()), false);
            for (int id : prior::kLayerIds) init.conv(e + ".psf.phi_" + std::to_string(id), config.prior_dim, c, 1);
            init.conv(e + ".drfb.wq", c, c, 1);
            init.conv(e + ".drfb.wk", c, c, 1);
            init.conv(e + ".drfb.wv", c, c, 1);
            init.constant(e + ".drfb.gamma", {1}, 0.0f);
        }
        const std::string d = stage_name("dec", s);
        const int cout = config.channels(s - 1);
        init.conv(d + ".conv", c + cout, cout, 3);
        if (config.color_freq) {
            init.conv(d + ".bfacg.str1", cout, cout, 3);
            init.conv(d + ".bfacg.str2", cout, cout, 3);
            init.conv(d + ".bfacg.chr1", cout, cout, 3);
            init.conv(d + ".bfacg.chr2", cout, cout, 3);
            init.constant(d + ".bfacg.edge_a", {1}, config.edge_gate_a);
            init.constant(d + ".bfacg.edge_b", {1}, config.edge_gate_b);
            const float bound = 1.0f / std::sqrt(static_cast<float>(cout * 9));
            init.uniform(d + ".sffb.gate.w", {cout, cout, 3, 3}, bound);
            init.constant(d + ".sffb.gate.b", {cout}, config.sffb_gate_bias);
        } else {
            init.conv(d + ".post1", cout, cout, 3);
            init.conv(d + ".post2", cout, cout, 3);
        }
    }
    init.conv("final", config.channels(0), 3, 3);
    if (config.refiner) {
        init.conv("refiner.c1", 3, 16, 3);
        init.conv("refiner.c2", 16, 16, 3);
        init.conv("refiner.c3", 16, 16, 3);
        init.constant("refiner.c4.w", {3, 16, 3, 3}, 0.0f);
        init.constant("refiner.c4.b", {3}, 0.0f);
    }
    m.params.set_trainable_all(true);
    return m;
}

Tensor forward(const Model& model, const Tensor& image, const prior::SemanticFeatureSet* prior, ForwardTrace* trace) {
    const ModelConfig& cfg = model.config;
    if (image.rank() != 4 || image.dim(1) != 3) {
        fail(ErrorKind::Shape, "forward: expected an [N,3,H,W] image, got " + shape_str(image.shape()));
    }
    const std::int64_t mult = std::int64_t{1} << cfg.stages;
    if (image.dim(2) % mult != 0 || image.dim(3) % mult != 0) {
        fail(ErrorKind::Shape, "forward: H and W must be divisible by " + std::to_string(mult) +
                                   "; pad the image to a multiple of " + std::to_string(mult) + " (got " +
                                   shape_str(image.shape()) + ")");
    }
    if (cfg.guidance) {
        if (prior == nullptr) fail(ErrorKind::Value, "forward: guided model needs a semantic prior");
        prior::validate(*prior);
        if (prior->dim() != cfg.prior_dim) {
            fail(ErrorKind::Shape, "forward: prior width " + std::to_string(prior->dim()) + " does not match model prior_dim " +
                                       std::to_string(cfg.prior_dim));
        }
    }

    Tensor x = relu(conv_same(image, model.conv("stem")));
    std::vector<Tensor> skips{x};
    for (int s = 1; s <= cfg.stages; ++s) {
        const std::string e = stage_name("enc", s);
        x = relu(conv_same(x, model.conv(e + ".down"), 2));
        x = relu(conv_same(x, model.conv(e + ".conv")));
        if (cfg.guidance) {
            const PsfResult fused = psf_fuse(x, *prior, model.psf(s));
            if (trace != nullptr) trace->alphas.push_back(fused.alpha);
            x = drfb_inject(x, fused.fused, model.drfb(s));
        }
        if (s < cfg.stages) skips.push_back(x);
    }
    for (int s = cfg.stages; s >= 1; --s) {
        const std::string d = stage_name("dec", s);
        Tensor skip = skips[static_cast<std::size_t>(s - 1)];
        if (cfg.color_freq) skip = sffb_filter(skip, model.sffb(s));
        const Tensor up = bilinear_resize(x, skip.dim(2), skip.dim(3));
        x = relu(conv_same(concat_channels({up, skip}), model.conv(d + ".conv")));
        if (cfg.color_freq) {
            x = bfacg(x, model.bfacg(s));
        } else {
            x = conv_same(relu(conv_same(x, model.conv(d + ".post1"))), model.conv(d + ".post2"));
        }
    }
    return add(image, conv_same(x, model.conv("final")));
}

Tensor predict(const Model& model, const Tensor& image, const prior::SemanticFeatureSet* prior, bool use_refiner) {
    Tensor y = clip(forward(model, image, prior), 0.0f, 1.0f);
    if (use_refiner) {
        if (!model.config.refiner) fail(ErrorKind::Value, "predict: model has no refiner");
        y = refiner_apply(y, model.refiner());
    }
    return y;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
    io::Container c;
    c.add_text("config", model.config.to_text());
    for (const auto& [name, t] : model.params.all()) c.add(name, t);
    io::write_container(path, c);
}

Model load_checkpoint(const std::filesystem::path& path) {
    const io::Container c = io::read_container(path);
    if (!c.contains("config")) fail(ErrorKind::Io, path.string() + ": checkpoint has no 'config' record");
    Model m = init_model(ModelConfig::from_text(c.text("config")));
    std::size_t loaded = 0;
    for (const auto& r : c.records()) {
        if (r.text) continue;
        Tensor& dst = m.params.at(r.name);
        if (dst.shape() != r.tensor.shape()) {
            fail(ErrorKind::Shape, path.string() + ": parameter '" + r.name + "' has shape " + shape_str(r.tensor.shape()) +
                                       ", expected " + shape_str(dst.shape()));
        }
        std::copy(r.tensor.data().begin(), r.tensor.data().end(), dst.mutable_data().begin());
        ++loaded;
    }
    if (loaded != m.params.size()) {
        fail(ErrorKind::Io, path.string() + ": checkpoint holds " + std::to_string(loaded) + " of " +
                                std::to_string(m.params.size()) + " parameters");
    }
    return m;
}

}  // namespace candle::arch
