#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "candle/arch.hpp"
#include "candle/gradcheck.hpp"
#include "candle/io.hpp"
#include "candle/metrics.hpp"
#include "candle/ops.hpp"
#include "candle/prior.hpp"
#include "candle/scenegen.hpp"
#include "candle/train.hpp"

namespace fs = std::filesystem;
using namespace candle;

namespace {

enum Exit { kOk = 0, kUsage = 1, kCheck = 2, kIo = 3 };

void banner(const std::string& command, const std::string& resolved) {
    std::cout << "# " << command << "\n" << resolved;
    if (!resolved.empty() && resolved.back() != '\n') std::cout << "\n";
    std::cout << std::flush;
}

Tensor as_batch(const Tensor& t, const std::string& what) {
    if (t.rank() == 3) return reshape(t, {1, t.dim(0), t.dim(1), t.dim(2)});
    if (t.rank() == 4 && t.dim(0) == 1) return t;
    fail(ErrorKind::Shape, what + ": expected [C,H,W] or [1,C,H,W], got " + shape_str(t.shape()));
}

Tensor read_image(const fs::path& path) {
    const auto ext = path.extension().string();
    if (ext == ".ppm" || ext == ".PPM") return as_batch(io::read_ppm(path), path.string());
    return as_batch(io::read_tensor(path), path.string());
}

std::unique_ptr<prior::PriorProvider> provider_for(const arch::ModelConfig& model, const std::string& spec,
                                                   std::uint64_t prior_seed) {
    return prior::make_provider(spec, prior_seed, model.prior_dim);
}

struct GenData {
    std::uint64_t seed = 0;
    int count = 250;
    std::string out;
    int size = 64;
    int materials = 8;
    int lights = 2;
    int palette = 64;
    bool ppm = false;

    int run() const {
        scenegen::SceneConfig cfg;
        cfg.height = cfg.width = size;
        cfg.num_materials = materials;
        cfg.num_lights = lights;
        cfg.palette_size = palette;
        cfg.validate();
        if (count < 1) fail(ErrorKind::Config, "gen-data: --count must be >= 1");
        banner("gen-data", "seed=" + std::to_string(seed) + "\ncount=" + std::to_string(count) + "\n" + cfg.to_text());
        const auto m = scenegen::build_dataset(seed, count, cfg, out, ppm);
        std::cout << "wrote " << m.entries.size() << " scenes to " << out << "\n";
        return kOk;
    }
};

struct Train {
    std::string config;
    std::string data;
    std::string val;
    std::string out;
    std::optional<std::int64_t> steps;
    std::optional<std::uint64_t> seed;

    int run() const {
        train::TrainConfig cfg = config.empty() ? train::TrainConfig{} : train::TrainConfig::load(config);
        if (steps) cfg.steps = *steps;
        if (seed) cfg.seed = *seed;
        cfg.validate();

        auto scenes = train::load_scenes(scenegen::read_manifest(data));
        std::vector<train::Scene> val_set;
        if (!val.empty()) {
            val_set = train::load_scenes(scenegen::read_manifest(val));
        } else {
            // Hold out the last fifth of the training data.
            if (scenes.size() < 2) fail(ErrorKind::Value, "train: need at least 2 scenes to hold out validation data");
            const std::size_t held = std::max<std::size_t>(1, scenes.size() / 5);
            val_set.assign(scenes.end() - static_cast<std::ptrdiff_t>(held), scenes.end());
            scenes.resize(scenes.size() - held);
        }
        banner("train", cfg.to_text() + "train_scenes=" + std::to_string(scenes.size()) +
                            "\nval_scenes=" + std::to_string(val_set.size()) + "\n");

        auto provider = provider_for(cfg.model, cfg.provider, cfg.prior_seed);
        arch::Model model = arch::init_model(cfg.model);
        train::TrainOptions opts;
        opts.out_dir = out;
        opts.on_log = [](const train::LogRow& r) { std::cout << train::format_log_row(r) << std::flush; };
        std::cout << train::log_header();
        const auto result = train::train_loop(cfg, model, provider.get(), scenes, val_set, opts);
        std::printf("best_val_psnr=%.4f best_step=%lld\n", result.best_val_psnr, static_cast<long long>(result.best_step));
        return kOk;
    }
};

struct Eval {
    std::string ckpt;
    std::string data;
    bool refiner = false;
    std::string provider = "synthetic";
    std::uint64_t prior_seed = 0;
    std::string tsv;

    int run() const {
        const arch::Model model = arch::load_checkpoint(ckpt);
        if (refiner && !model.config.refiner) fail(ErrorKind::Value, "eval: checkpoint has no refiner");
        const fs::path rows_path = tsv.empty() ? fs::path(ckpt).parent_path() / "eval_scenes.tsv" : fs::path(tsv);
        banner("eval", model.config.to_text() + "provider=" + provider + "\nprior_seed=" + std::to_string(prior_seed) +
                           "\nuse_refiner=" + (refiner ? "1" : "0") + "\n");
        const auto scenes = train::load_scenes(scenegen::read_manifest(data));
        auto prov = provider_for(model.config, provider, prior_seed);
        const auto res = train::evaluate(model, prov.get(), scenes, refiner);
        io::write_text_file(rows_path, res.rows_tsv());
        std::printf("mean_psnr=%.4f\nmean_ssim=%.6f\nscenes=%zu\n", res.mean_psnr, res.mean_ssim, res.rows.size());
        std::printf("(identical images score the %.1f dB sentinel)\nper-scene rows: %s\n", metrics::kPsnrSentinel,
                    rows_path.string().c_str());
        return kOk;
    }
};

struct Infer {
    std::string ckpt;
    std::string input;
    std::string material;
    std::string out;
    std::string provider = "synthetic";
    std::uint64_t prior_seed = 0;
    bool refiner = false;

    int run() const {
        const arch::Model model = arch::load_checkpoint(ckpt);
        if (refiner && !model.config.refiner) fail(ErrorKind::Value, "infer: checkpoint has no refiner");
        banner("infer", model.config.to_text() + "provider=" + provider + "\nprior_seed=" + std::to_string(prior_seed) + "\n");
        const Tensor image = read_image(input);
        if (image.dim(1) != 3) fail(ErrorKind::Shape, "infer: expected an RGB image, got " + shape_str(image.shape()));

        prior::SemanticFeatureSet feats;
        if (model.config.guidance) {
            std::optional<Tensor> mat;
            if (!material.empty()) mat = as_batch(io::read_tensor(material), material);
            auto prov = provider_for(model.config, provider, prior_seed);
            feats = prov->encode({&image, mat ? &*mat : nullptr, fs::path(input).stem().string()});
        }
        const Tensor y = arch::predict(model, image, model.config.guidance ? &feats : nullptr, refiner);
        fs::path base(out);
        base.replace_extension();
        if (base.has_parent_path()) fs::create_directories(base.parent_path());
        io::write_ppm(fs::path(base).concat(".ppm"), y);
        io::write_tensor(fs::path(base).concat(".cndt"), "image", y);
        std::cout << "wrote " << base.string() << ".ppm and " << base.string() << ".cndt\n";
        return kOk;
    }
};

struct Consistency {
    std::string data;
    std::string provider = "synthetic";
    int patch = 16;
    std::uint64_t prior_seed = 0;
    int dim = prior::kDefaultDim;
    std::string map_dir;

    int run() const {
        banner("consistency", "provider=" + provider + "\npatch=" + std::to_string(patch) + "\nprior_seed=" +
                                  std::to_string(prior_seed) + "\ndim=" + std::to_string(dim) + "\n");
        const auto scenes = train::load_scenes(scenegen::read_manifest(data));
        auto prov = prior::make_provider(provider, prior_seed, dim);
        std::vector<metrics::ConsistencyReport> reports;
        const auto summary = train::dataset_consistency(*prov, scenes, patch, &reports);
        if (!map_dir.empty()) {
            fs::create_directories(map_dir);
            for (std::size_t i = 0; i < reports.size(); ++i)
                metrics::write_similarity_ppm(fs::path(map_dir) / (scenes[i].key + "_sim.ppm"), reports[i]);
        }
        std::cout << summary.to_text();
        return kOk;
    }
};

struct GradCheck {
    std::string module;
    int seeds = 20;

    int run() const {
        banner("gradcheck", "module=" + (module.empty() ? std::string("all") : module) + "\nseeds=" + std::to_string(seeds) + "\n");
        if (seeds < 1) fail(ErrorKind::Usage, "gradcheck: --seeds must be >= 1");
        const auto results = gradcheck::run_suite(module, seeds);
        std::cout << gradcheck::format_table(results);
        for (const auto& r : results)
            if (!r.passed()) return kCheck;
        return kOk;
    }
};

int exit_code(ErrorKind k) {
    switch (k) {
        case ErrorKind::Usage: return kUsage;
        case ErrorKind::Io: return kIo;
        default: return kCheck;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"candle: ambient lighting normalization toolkit"};
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();

    GenData gen;
    auto* g = app.add_subcommand("gen-data", "Generate a synthetic scene dataset");
    g->add_option("--seed", gen.seed, "Base seed; scene i uses seed + i");
    g->add_option("--count", gen.count, "Number of scenes");
    g->add_option("--out", gen.out, "Output directory")->required();
    g->add_option("--size", gen.size, "Image height and width");
    g->add_option("--materials", gen.materials, "Voronoi regions per scene");
    g->add_option("--lights", gen.lights, "Colored light sources per scene");
    g->add_option("--palette", gen.palette, "Material palette size");
    g->add_flag("--ppm", gen.ppm, "Also write input and GT as PPM");

    Train tr;
    auto* t = app.add_subcommand("train", "Train a model");
    t->add_option("--config", tr.config, "Config file (key = value lines); defaults when empty");
    t->add_option("--data", tr.data, "Training dataset directory or manifest")->required();
    t->add_option("--val", tr.val, "Validation dataset; default holds out the last fifth of --data");
    t->add_option("--out", tr.out, "Output directory for log and checkpoints")->required();
    t->add_option("--steps", tr.steps, "Override steps from the config");
    t->add_option("--seed", tr.seed, "Override seed from the config");

    Eval ev;
    auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
    e->add_option("--ckpt", ev.ckpt, "Checkpoint file")->required();
    e->add_option("--data", ev.data, "Dataset directory or manifest")->required();
    e->add_flag("--refiner", ev.refiner, "Apply the refiner");
    e->add_option("--provider", ev.provider, "Prior provider: synthetic, rgb or file:PATH");
    e->add_option("--prior-seed", ev.prior_seed, "Seed of the synthetic prior");
    e->add_option("--tsv", ev.tsv, "Per-scene TSV path; default eval_scenes.tsv next to the checkpoint");

    Infer in;
    auto* i = app.add_subcommand("infer", "Restore one image");
    i->add_option("--ckpt", in.ckpt, "Checkpoint file")->required();
    i->add_option("--input", in.input, "Input image (.cndt or .ppm)")->required();
    i->add_option("--out", in.out, "Output path; .ppm and .cndt are written")->required();
    i->add_option("--material", in.material, "Material map (.cndt) for the synthetic prior");
    i->add_option("--provider", in.provider, "Prior provider: synthetic, rgb or file:PATH");
    i->add_option("--prior-seed", in.prior_seed, "Seed of the synthetic prior");
    i->add_flag("--refiner", in.refiner, "Apply the refiner");

    Consistency co;
    auto* c = app.add_subcommand("consistency", "Patch-wise feature consistency between inputs and GT");
    c->add_option("--data", co.data, "Dataset directory or manifest")->required();
    c->add_option("--provider", co.provider, "Prior provider: synthetic, rgb or file:PATH");
    c->add_option("--patch", co.patch, "Patch size in image pixels");
    c->add_option("--prior-seed", co.prior_seed, "Seed of the synthetic prior");
    c->add_option("--dim", co.dim, "Channel width of the synthetic prior");
    c->add_option("--maps", co.map_dir, "Directory for per-scene similarity heat maps");

    GradCheck gc;
    auto* k = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
    k->add_option("--module", gc.module, "One of tensor, wavelet, arch, metrics, train, e2e; all when empty");
    k->add_option("--seeds", gc.seeds, "Seeds per check");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*g) return gen.run();
        if (*t) return tr.run();
        if (*e) return ev.run();
        if (*i) return in.run();
        if (*c) return co.run();
        if (*k) return gc.run();
    } catch (const Error& err) {
        std::cerr << "error: " << err.what() << "\n";
        return exit_code(err.kind());
    } catch (const fs::filesystem_error& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kIo;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kCheck;
    }
    return kUsage;
}
