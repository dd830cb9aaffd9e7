#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "candle/prior.hpp"
#include "candle/tensor.hpp"

namespace candle::arch {

// Negative slope of the PSF gate MLP's hidden activation.
inline constexpr float kPsfLeak = 0.1f;

struct ModelConfig {
    int stages = 3;
    int base_channels = 16;  // stem and stage 1; doubles per further stage
    int prior_dim = prior::kDefaultDim;
    bool guidance = true;    // PSF + DRFB at every encoder stage
    bool color_freq = true;  // BFACG in the decoder, SFFB on every skip
    bool refiner = false;
    float edge_gate_a = 1.0f;
    float edge_gate_b = 0.0f;
    // Initial bias of the SFFB low-frequency gate conv.
    float sffb_gate_bias = 0.0f;
    std::uint64_t seed = 0;

    // Channel width at resolution level `level` (0 = stem, s = encoder stage s).
    int channels(int level) const;
    void validate() const;
    std::string to_text() const;
    static ModelConfig from_text(const std::string& text);
};

/// Named parameters in a stable (sorted) order.
class ParamTable {
   public:
    void add(const std::string& name, Tensor value);
    bool contains(const std::string& name) const { return params_.count(name) != 0; }
    const Tensor& at(const std::string& name) const;
    Tensor& at(const std::string& name);
    const std::map<std::string, Tensor>& all() const { return params_; }
    std::map<std::string, Tensor>& all() { return params_; }
    std::size_t size() const { return params_.size(); }
    std::size_t scalar_count() const;

    // Enables gradients for parameters whose name starts with `prefix`
    // (all when empty), disables the rest.
    void set_trainable(const std::string& prefix, bool exclusive = true);
    void set_trainable_all(bool value);
    void zero_grad();

   private:
    std::map<std::string, Tensor> params_;
};

struct ConvParams {
    Tensor weight;  // [Cout,Cin,k,k]
    Tensor bias;    // [Cout]
};

struct PsfParams {
    Tensor fc1_w, fc1_b;  // [C/4, C], [C/4]
    Tensor fc2_w, fc2_b;  // [L, C/4], [L]
    std::vector<ConvParams> phi;  // one 1x1 projection D -> C per prior layer
};

struct DrfbParams {
    ConvParams wq, wk, wv;  // 1x1, C -> C
    Tensor gamma;           // single element, zero at initialization
};

struct BfacgParams {
    ConvParams str1, str2, chr1, chr2;  // 3x3, C -> C
    Tensor edge_a, edge_b;              // single elements
};

struct SffbParams {
    ConvParams gate;  // 3x3, C -> C on the LL band
};

struct RefinerParams {
    std::vector<ConvParams> convs;  // 3 -> 16 -> 16 -> 16 -> 3
};

struct PsfResult {
    Tensor fused;  // S_s, [N,C,h,w]
    Tensor alpha;  // [N,L], rows on the simplex
};

// Resizes each layer to (h,w), projects it with phi_l, gates the layers with
// softmax(MLP(global_avg_pool(F_enc))) and sums. The MLP biases start at zero.
PsfResult psf_fuse(const Tensor& f_enc, const std::vector<Tensor>& layers, const PsfParams& p);
PsfResult psf_fuse(const Tensor& f_enc, const prior::SemanticFeatureSet& prior, const PsfParams& p);

// F_enc + gamma * softmax(Q K^T / sqrt(C)) V over the h*w spatial tokens,
// with Q from F_enc and K, V from the fused prior.
Tensor drfb_inject(const Tensor& f_enc, const Tensor& fused, const DrfbParams& p);

// sigmoid(a * |Sobel(channel mean of F)| + b), [N,1,h,w]. Borders are replicated.
Tensor edge_map(const Tensor& f, const Tensor& a, const Tensor& b);

Tensor bfacg(const Tensor& f, const BfacgParams& p);
Tensor sffb_filter(const Tensor& skip, const SffbParams& p);
Tensor refiner_apply(const Tensor& coarse, const RefinerParams& p);

struct Model {
    ModelConfig config;
    ParamTable params;

    PsfParams psf(int stage) const;
    DrfbParams drfb(int stage) const;
    BfacgParams bfacg(int stage) const;
    SffbParams sffb(int stage) const;
    RefinerParams refiner() const;
    ConvParams conv(const std::string& prefix) const;
};

// Parameters are drawn per name from config.seed, so toggling a component
// leaves the initialization of every other parameter unchanged.
Model init_model(const ModelConfig& config);

struct ForwardTrace {
    std::vector<Tensor> alphas;  // PSF gates per encoder stage
};

// Y_hat = I + f(I). `prior` may be null when guidance is disabled. The output
// is not clipped.
Tensor forward(const Model& model, const Tensor& image, const prior::SemanticFeatureSet* prior,
               ForwardTrace* trace = nullptr);

// forward, clip to [0,1], then the refiner when enabled and requested.
Tensor predict(const Model& model, const Tensor& image, const prior::SemanticFeatureSet* prior, bool use_refiner);

void save_checkpoint(const std::filesystem::path& path, const Model& model);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace candle::arch
