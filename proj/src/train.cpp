#include "candle/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "candle/io.hpp"
#include "candle/metrics.hpp"
#include "candle/ops.hpp"

namespace candle::train {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, sep)) out.push_back(trim(item));
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    fail(ErrorKind::Config, "config: '" + key + "' expects true/false, got '" + v + "'");
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(9);
    os << v;
    return os.str();
}

}  // namespace

std::vector<CropPhase> TrainConfig::resolved_crops() const {
    if (!crops.empty()) return crops;
    return {{0, 32}, {steps / 3, 48}, {2 * steps / 3, 64}};
}

std::int64_t TrainConfig::resolved_val_every() const {
    if (val_every > 0) return val_every;
    return std::max<std::int64_t>(1, steps / 10);
}

std::array<std::int64_t, 3> TrainConfig::stage_lengths() const {
    const std::int64_t s1 = steps * 6 / 10, s2 = steps * 2 / 10;
    return {s1, s2, steps - s1 - s2};
}

void TrainConfig::validate() const {
    for (int i = 0; i < 3; ++i) {
        if (!(stage_lrs[i] > 0.0f) || !std::isfinite(stage_lrs[i])) fail(ErrorKind::Config, "config: stage_lrs must be positive");
        if (i > 0 && stage_lrs[i] > stage_lrs[i - 1]) fail(ErrorKind::Config, "config: stage_lrs must be non-increasing");
    }
    if (ssim_weight != kSsimWeight) fail(ErrorKind::Config, "config: ssim_weight is fixed at 0.7");
    if (!(beta1 >= 0.0f && beta1 < 1.0f) || !(beta2 >= 0.0f && beta2 < 1.0f)) {
        fail(ErrorKind::Config, "config: betas must lie in [0,1)");
    }
    if (!(eps > 0.0f)) fail(ErrorKind::Config, "config: eps must be positive");
    if (batch_size < 1) fail(ErrorKind::Config, "config: batch_size must be >= 1");
    if (steps < 1) fail(ErrorKind::Config, "config: steps must be >= 1");
    if (val_count < 0) fail(ErrorKind::Config, "config: val_count must be >= 0");
    model.validate();
    // Training crops carry no file key, so file-backed priors are eval-only.
    if (provider != "synthetic" && provider != "rgb") {
        fail(ErrorKind::Config, "config: provider must be synthetic or rgb for training, got '" + provider + "'");
    }
    if (provider == "rgb" && model.guidance && model.prior_dim != 3) {
        fail(ErrorKind::Config, "config: the rgb provider needs model.prior_dim = 3");
    }
    const auto phases = resolved_crops();
    const int mult = 1 << model.stages;
    for (std::size_t i = 0; i < phases.size(); ++i) {
        const auto& p = phases[i];
        if (i == 0 && p.step != 0) fail(ErrorKind::Config, "config: the first crop phase must start at step 0");
        if (i > 0 && p.step <= phases[i - 1].step) fail(ErrorKind::Config, "config: crop phase steps must increase");
        if (p.size % mult != 0) {
            fail(ErrorKind::Config, "config: crop " + std::to_string(p.size) + " is not divisible by " + std::to_string(mult));
        }
        if (p.size < metrics::kSsimWindow) fail(ErrorKind::Config, "config: crop " + std::to_string(p.size) + " is below 11");
    }
}

std::string TrainConfig::to_text() const {
    std::ostringstream os;
    os << "stage_lrs = " << fmt(stage_lrs[0]) << ", " << fmt(stage_lrs[1]) << ", " << fmt(stage_lrs[2]) << "\n";
    os << "ssim_weight = " << fmt(ssim_weight) << "\n";
    os << "beta1 = " << fmt(beta1) << "\nbeta2 = " << fmt(beta2) << "\neps = " << fmt(eps) << "\n";
    os << "crops = ";
    const auto phases = resolved_crops();
    for (std::size_t i = 0; i < phases.size(); ++i) os << (i ? ", " : "") << phases[i].step << ":" << phases[i].size;
    os << "\nbatch_size = " << batch_size << "\nsteps = " << steps << "\nseed = " << seed;
    os << "\nflip = " << (flip ? "true" : "false") << "\nrot90 = " << (rot90 ? "true" : "false");
    os << "\nval_every = " << resolved_val_every() << "\nval_count = " << val_count;
    os << "\nprovider = " << provider << "\nprior_seed = " << prior_seed << "\n";
    std::istringstream m(model.to_text());
    std::string line;
    while (std::getline(m, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        os << "model." << line.substr(0, eq) << " = " << line.substr(eq + 1) << "\n";
    }
    return os.str();
}

TrainConfig TrainConfig::from_text(const std::string& text) {
    TrainConfig c;
    std::string model_text;
    std::istringstream in(text);
    std::string raw;
    int lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        const auto hash = raw.find('#');
        const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            fail(ErrorKind::Config, "config line " + std::to_string(lineno) + ": expected 'key = value'");
        }
        const std::string key = trim(line.substr(0, eq)), v = trim(line.substr(eq + 1));
        try {
            if (key.rfind("model.", 0) == 0) {
                model_text += key.substr(6) + "=" + v + "\n";
            } else if (key == "stage_lrs") {
                const auto parts = split(v, ',');
                if (parts.size() != 3) fail(ErrorKind::Config, "config: stage_lrs needs three values");
                for (int i = 0; i < 3; ++i) c.stage_lrs[i] = std::stof(parts[i]);
            } else if (key == "ssim_weight") c.ssim_weight = std::stof(v);
            else if (key == "beta1") c.beta1 = std::stof(v);
            else if (key == "beta2") c.beta2 = std::stof(v);
            else if (key == "eps") c.eps = std::stof(v);
            else if (key == "crops") {
                c.crops.clear();
                for (const auto& item : split(v, ',')) {
                    const auto colon = item.find(':');
                    if (colon == std::string::npos) fail(ErrorKind::Config, "config: crops expects step:size items");
                    c.crops.push_back({std::stoll(item.substr(0, colon)), std::stoi(item.substr(colon + 1))});
                }
            } else if (key == "batch_size") c.batch_size = std::stoi(v);
            else if (key == "steps") c.steps = std::stoll(v);
            else if (key == "seed") c.seed = std::stoull(v);
            else if (key == "flip") c.flip = parse_bool(key, v);
            else if (key == "rot90") c.rot90 = parse_bool(key, v);
            else if (key == "val_every") c.val_every = std::stoll(v);
            else if (key == "val_count") c.val_count = std::stoi(v);
            else if (key == "provider") c.provider = v;
            else if (key == "prior_seed") c.prior_seed = std::stoull(v);
            else fail(ErrorKind::Config, "config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        } catch (const std::logic_error&) {
            fail(ErrorKind::Config, "config line " + std::to_string(lineno) + ": bad value for '" + key + "'");
        }
    }
    if (!model_text.empty()) c.model = arch::ModelConfig::from_text(model_text);
    c.validate();
    return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    return from_text(std::string(bytes.begin(), bytes.end()));
}

Tensor loss(const Tensor& y_hat, const Tensor& y) {
    if (y_hat.shape() != y.shape()) {
        fail(ErrorKind::Shape, "loss: shape mismatch " + shape_str(y_hat.shape()) + " vs " + shape_str(y.shape()));
    }
    const Tensor l1 = mean(abs(sub(y_hat, y)));
    const Tensor dssim = mean(metrics::dssim_map(y_hat, y));
    return add(l1, scale(dssim, kSsimWeight));
}

void adam_step(arch::ParamTable& params, OptimState& state, float lr, const AdamHyper& hyper) {
    if (!(lr > 0.0f)) fail(ErrorKind::Value, "adam_step: learning rate must be positive");
    for (auto& [name, p] : params.all()) {
        if (!p.requires_grad() || !p.has_grad()) continue;
        for (float g : p.grad()) {
            if (!std::isfinite(g)) fail(ErrorKind::NonFinite, "adam_step: non-finite gradient in parameter '" + name + "'");
        }
    }
    ++state.step;
    for (auto& [name, p] : params.all()) {
        if (!p.requires_grad() || !p.has_grad()) continue;
        Moments& mo = state.moments[name];
        if (mo.m.size() != p.numel()) {
            mo.m.assign(p.numel(), 0.0f);
            mo.v.assign(p.numel(), 0.0f);
        }
        ++mo.step;
        const double bc1 = 1.0 - std::pow(double(hyper.beta1), double(mo.step));
        const double bc2 = 1.0 - std::pow(double(hyper.beta2), double(mo.step));
        auto g = p.grad();
        float* w = p.mutable_ptr();
        for (std::size_t i = 0; i < p.numel(); ++i) {
            mo.m[i] = hyper.beta1 * mo.m[i] + (1.0f - hyper.beta1) * g[i];
            mo.v[i] = hyper.beta2 * mo.v[i] + (1.0f - hyper.beta2) * g[i] * g[i];
            const double mhat = mo.m[i] / bc1, vhat = mo.v[i] / bc2;
            w[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + hyper.eps));
        }
        p.zero_grad();
    }
}

float cosine_lr(std::int64_t step, float base, std::int64_t stage_len) {
    if (stage_len <= 0) return base;
    return static_cast<float>(0.5 * base * (1.0 + std::cos(std::numbers::pi * double(step) / double(stage_len))));
}

std::vector<Scene> load_scenes(const scenegen::Manifest& manifest) {
    std::vector<Scene> out;
    for (const auto& e : manifest.entries) {
        out.push_back({e.input.stem().string(), scenegen::load_scene(scenegen::resolve(manifest, e)), e.gt.stem().string()});
    }
    return out;
}

std::string EvalResult::rows_tsv() const {
    std::ostringstream os;
    os.precision(6);
    os << std::fixed << "scene\tpsnr\tssim\n";
    for (const auto& r : rows) os << r.key << "\t" << r.psnr << "\t" << r.ssim << "\n";
    return os.str();
}

namespace {

Tensor batch1(const Tensor& chw) { return reshape(chw, {1, chw.dim(0), chw.dim(1), chw.dim(2)}); }

}  // namespace

metrics::ConsistencySummary dataset_consistency(const prior::PriorProvider& provider, const std::vector<Scene>& scenes,
                                                int patch, std::vector<metrics::ConsistencyReport>* reports) {
    if (scenes.empty()) fail(ErrorKind::Value, "consistency: empty dataset");
    std::vector<metrics::ConsistencyReport> all;
    for (const auto& s : scenes) {
        const Tensor in = batch1(s.triplet.input), gt = batch1(s.triplet.gt), mat = batch1(s.triplet.material_map);
        const auto fa = provider.encode({&in, &mat, s.key});
        const auto fb = provider.encode({&gt, &mat, s.gt_key.empty() ? s.key : s.gt_key});
        const Tensor& a = fa.layers.back().feature;
        const Tensor& b = fb.layers.back().feature;
        const std::int64_t stride = in.dim(2) / a.dim(2);
        if (stride < 1 || patch % stride != 0) {
            fail(ErrorKind::Value, "consistency: patch " + std::to_string(patch) + " is not a multiple of the feature stride " +
                                       std::to_string(stride));
        }
        all.push_back(metrics::patch_consistency(a, b, static_cast<int>(patch / stride)));
    }
    const auto summary = metrics::summarize_consistency(all);
    if (reports) *reports = std::move(all);
    return summary;
}

EvalResult evaluate(const arch::Model& model, const prior::PriorProvider* provider, const std::vector<Scene>& scenes,
                    bool use_refiner) {
    if (scenes.empty()) fail(ErrorKind::Value, "evaluate: empty dataset");
    if (model.config.guidance && provider == nullptr) fail(ErrorKind::Value, "evaluate: guided model needs a prior provider");
    EvalResult r;
    double sp = 0.0, ss = 0.0;
    for (const auto& s : scenes) {
        const Tensor img = batch1(s.triplet.input), gt = batch1(s.triplet.gt), mat = batch1(s.triplet.material_map);
        prior::SemanticFeatureSet feats;
        if (model.config.guidance) feats = provider->encode({&img, &mat, s.key});
        const Tensor y = arch::predict(model, img, model.config.guidance ? &feats : nullptr, use_refiner);
        const double p = metrics::psnr(y, gt), q = metrics::ssim(y, gt);
        r.rows.push_back({s.key, p, q});
        sp += p;
        ss += q;
    }
    r.mean_psnr = sp / static_cast<double>(scenes.size());
    r.mean_ssim = ss / static_cast<double>(scenes.size());
    return r;
}

std::string log_header() { return "step\tstage\tlr\ttrain_loss\tval_psnr\tval_ssim\n"; }

std::string format_log_row(const LogRow& row) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%lld\t%d\t%.6e\t%.6f\t%.4f\t%.6f\n", static_cast<long long>(row.step), row.stage,
                  static_cast<double>(row.lr), row.train_loss, row.val_psnr, row.val_ssim);
    return buf;
}

namespace {

// Crop at (y0,x0), rotate by k quarter turns, then flip.
void augment_into(const Tensor& chw, std::int64_t y0, std::int64_t x0, int c, int k, bool fh, bool fv, float* out) {
    const auto C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
    const float* in = chw.ptr();
    for (int y = 0; y < c; ++y)
        for (int x = 0; x < c; ++x) {
            int sy = y, sx = x;
            for (int r = 0; r < k; ++r) {
                const int t = sy;
                sy = sx;
                sx = c - 1 - t;
            }
            if (fh) sx = c - 1 - sx;
            if (fv) sy = c - 1 - sy;
            for (std::int64_t ch = 0; ch < C; ++ch) {
                out[(ch * c + y) * c + x] = in[(ch * H + y0 + sy) * W + x0 + sx];
            }
        }
}

struct Batch {
    Tensor input, gt, mat;
};

class Sampler {
   public:
    Sampler(const TrainConfig& cfg, const std::vector<Scene>& scenes)
        : cfg_(cfg), scenes_(scenes) {
        std::seed_seq seq{std::uint32_t(cfg.seed), std::uint32_t(cfg.seed >> 32), 0x7261u};
        rng_.seed(seq);
        order_.resize(scenes.size());
        for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
        cursor_ = order_.size();
    }

    Batch next(int crop) {
        const int B = cfg_.batch_size;
        std::vector<float> in(std::size_t(B) * 3 * crop * crop), gt(in.size()), mat(std::size_t(B) * crop * crop);
        for (int b = 0; b < B; ++b) {
            if (cursor_ == order_.size()) {
                std::shuffle(order_.begin(), order_.end(), rng_);
                cursor_ = 0;
            }
            const Scene& s = scenes_[order_[cursor_++]];
            const auto H = s.triplet.input.dim(1), W = s.triplet.input.dim(2);
            if (crop > H || crop > W) {
                fail(ErrorKind::Config, "train: crop " + std::to_string(crop) + " larger than scene '" + s.key + "' (" +
                                            std::to_string(H) + "x" + std::to_string(W) + ")");
            }
            const auto y0 = std::uniform_int_distribution<std::int64_t>(0, H - crop)(rng_);
            const auto x0 = std::uniform_int_distribution<std::int64_t>(0, W - crop)(rng_);
            const int k = cfg_.rot90 ? std::uniform_int_distribution<int>(0, 3)(rng_) : 0;
            const bool fh = cfg_.flip && std::uniform_int_distribution<int>(0, 1)(rng_) == 1;
            const bool fv = cfg_.flip && std::uniform_int_distribution<int>(0, 1)(rng_) == 1;
            const std::size_t plane = std::size_t(crop) * crop;
            augment_into(s.triplet.input, y0, x0, crop, k, fh, fv, in.data() + b * 3 * plane);
            augment_into(s.triplet.gt, y0, x0, crop, k, fh, fv, gt.data() + b * 3 * plane);
            augment_into(s.triplet.material_map, y0, x0, crop, k, fh, fv, mat.data() + b * plane);
        }
        return {Tensor({B, 3, crop, crop}, std::move(in)), Tensor({B, 3, crop, crop}, std::move(gt)),
                Tensor({B, 1, crop, crop}, std::move(mat))};
    }

   private:
    const TrainConfig& cfg_;
    const std::vector<Scene>& scenes_;
    std::mt19937_64 rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_;
};

int crop_at(const std::vector<CropPhase>& phases, std::int64_t step) {
    int c = phases.front().size;
    for (const auto& p : phases)
        if (step >= p.step) c = p.size;
    return c;
}

void set_stage_trainable(arch::Model& model, int stage) {
    const bool refiner = model.config.refiner;
    for (auto& [name, p] : model.params.all()) {
        const bool is_refiner = name.rfind("refiner.", 0) == 0;
        bool on = true;
        if (refiner && stage == 1) on = !is_refiner;
        if (refiner && stage == 2) on = is_refiner;
        p.set_requires_grad(on);
    }
}

}  // namespace

TrainResult train_loop(const TrainConfig& config, arch::Model& model, const prior::PriorProvider* provider,
                       const std::vector<Scene>& train_set, const std::vector<Scene>& val_set, const TrainOptions& options) {
    config.validate();
    if (train_set.empty()) fail(ErrorKind::Value, "train: empty training set");
    if (val_set.empty()) fail(ErrorKind::Value, "train: empty validation set");
    if (model.config.guidance && provider == nullptr) fail(ErrorKind::Value, "train: guided model needs a prior provider");

    const bool write = !options.out_dir.empty();
    std::string log_text = log_header();
    if (write) {
        std::filesystem::create_directories(options.out_dir);
        io::write_text_file(options.out_dir / "config.txt", config.to_text());
        io::write_text_file(options.out_dir / "train_log.tsv", log_text);
    }

    std::vector<Scene> val(val_set.begin(),
                           config.val_count > 0 && std::size_t(config.val_count) < val_set.size()
                               ? val_set.begin() + config.val_count
                               : val_set.end());

    const auto phases = config.resolved_crops();
    const auto lens = config.stage_lengths();
    const auto val_every = config.resolved_val_every();
    const AdamHyper hyper{config.beta1, config.beta2, config.eps};
    Sampler sampler(config, train_set);
    OptimState state;
    TrainResult result;
    std::int64_t global = 0;
    double window = 0.0;
    std::int64_t window_n = 0;

    for (int stage = 1; stage <= 3; ++stage) {
        const std::int64_t len = lens[static_cast<std::size_t>(stage - 1)];
        if (len == 0) continue;
        set_stage_trainable(model, stage);
        const bool refine = model.config.refiner && stage >= 2;
        const float base = config.stage_lrs[static_cast<std::size_t>(stage - 1)];
        for (std::int64_t i = 0; i < len; ++i) {
            const float lr = stage == 1 ? base : cosine_lr(i, base, len);
            Batch b = sampler.next(crop_at(phases, global));
            Tape tape;
            double value = 0.0;
            {
                TapeScope scope(tape);
                prior::SemanticFeatureSet feats;
                if (model.config.guidance) feats = provider->encode({&b.input, &b.mat, ""});
                Tensor y = arch::forward(model, b.input, model.config.guidance ? &feats : nullptr);
                if (refine) y = arch::refiner_apply(clip(y, 0.0f, 1.0f), model.refiner());
                const Tensor l = loss(y, b.gt);
                value = l.item();
                if (!std::isfinite(value)) fail(ErrorKind::NonFinite, "train: non-finite loss at step " + std::to_string(global));
                tape.backward(l);
            }
            adam_step(model.params, state, lr, hyper);
            tape.clear();
            result.step_losses.push_back(value);
            window += value;
            ++window_n;
            ++global;

            if (global % val_every == 0 || i + 1 == len) {
                const EvalResult ev = evaluate(model, provider, val, refine);
                const LogRow row{global, stage, lr, window / double(window_n), ev.mean_psnr, ev.mean_ssim};
                window = 0.0;
                window_n = 0;
                result.log.push_back(row);
                log_text += format_log_row(row);
                if (write) io::write_text_file(options.out_dir / "train_log.tsv", log_text);
                if (result.best_step < 0 || ev.mean_psnr > result.best_val_psnr) {
                    result.best_val_psnr = ev.mean_psnr;
                    result.best_step = global;
                    if (write) arch::save_checkpoint(options.out_dir / "best.cndt", model);
                }
                if (options.on_log) options.on_log(row);
            }
        }
        if (write) arch::save_checkpoint(options.out_dir / ("stage" + std::to_string(stage) + ".cndt"), model);
    }
    model.params.set_trainable_all(true);
    model.params.zero_grad();
    if (write) arch::save_checkpoint(options.out_dir / "last.cndt", model);
    return result;
}

}  // namespace candle::train
