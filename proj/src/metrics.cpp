#include "candle/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "candle/io.hpp"
#include "candle/ops.hpp"

namespace candle::metrics {

double psnr(const Tensor& x, const Tensor& y) {
    if (x.shape() != y.shape()) {
        fail(ErrorKind::Shape, "psnr: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
    }
    if (x.numel() == 0) fail(ErrorKind::Shape, "psnr: empty images");
    double se = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double d = double(x.ptr()[i]) - double(y.ptr()[i]);
        se += d * d;
    }
    const double mse = se / static_cast<double>(x.numel());
    if (mse == 0.0) return kPsnrSentinel;
    return 10.0 * std::log10(1.0 / mse);
}

const std::vector<float>& ssim_window() {
    static const std::vector<float> window = [] {
        std::vector<double> g(kSsimWindow);
        double total = 0.0;
        for (int i = 0; i < kSsimWindow; ++i) {
            const double d = i - kSsimWindow / 2;
            g[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
            total += g[static_cast<std::size_t>(i)];
        }
        std::vector<float> w(kSsimWindow * kSsimWindow);
        for (int r = 0; r < kSsimWindow; ++r)
            for (int c = 0; c < kSsimWindow; ++c)
                w[static_cast<std::size_t>(r * kSsimWindow + c)] =
                    static_cast<float>(g[static_cast<std::size_t>(r)] * g[static_cast<std::size_t>(c)] / (total * total));
        return w;
    }();
    return window;
}

namespace {
Tensor as_batch(const Tensor& t) {
    if (t.rank() == 4) return t;
    if (t.rank() == 3) return reshape(t, {1, t.dim(0), t.dim(1), t.dim(2)});
    fail(ErrorKind::Shape, "expected [C,H,W] or [N,C,H,W], got " + shape_str(t.shape()));
}
}  // namespace

Tensor dssim_map(const Tensor& x_in, const Tensor& y_in) {
    if (x_in.shape() != y_in.shape()) {
        fail(ErrorKind::Shape, "ssim: shape mismatch " + shape_str(x_in.shape()) + " vs " + shape_str(y_in.shape()));
    }
    const Tensor x = as_batch(x_in), y = as_batch(y_in);
    if (x.dim(2) < kSsimWindow || x.dim(3) < kSsimWindow) {
        fail(ErrorKind::Shape, "ssim: image " + shape_str(x_in.shape()) + " smaller than the 11x11 window");
    }
    const auto& w = ssim_window();
    auto blur = [&](const Tensor& t) { return filter2d_valid(t, w, kSsimWindow, kSsimWindow); };
    // With a = 2 mx my + C1, b = 2 sxy + C2, A = a + (mx - my)^2 and
    // B = b + var(x - y):  1 - SSIM = (a var(x - y) + (mx - my)^2 B) / (A B).
    // Moments are taken on data shifted by 0.5 to limit cancellation.
    const Tensor xs = add_scalar(x, -0.5f), ys = add_scalar(y, -0.5f), z = sub(x, y);
    const Tensor mxs = blur(xs), mys = blur(ys), mz = blur(z);
    const Tensor sxy = sub(blur(mul(xs, ys)), mul(mxs, mys));
    const Tensor d1 = mul(mz, mz);
    const Tensor d2 = sub(blur(mul(z, z)), d1);
    const Tensor a = add_scalar(scale(mul(add_scalar(mxs, 0.5f), add_scalar(mys, 0.5f)), 2.0f), kSsimC1);
    const Tensor b = add_scalar(scale(sxy, 2.0f), kSsimC2);
    const Tensor A = add(a, d1), B = add(b, d2);
    return div(add(mul(a, d2), mul(d1, B)), mul(A, B));
}

Tensor ssim_map(const Tensor& x, const Tensor& y) { return add_scalar(scale(dssim_map(x, y), -1.0f), 1.0f); }

Tensor ssim_tensor(const Tensor& x, const Tensor& y) { return mean(ssim_map(x, y)); }

double ssim(const Tensor& x, const Tensor& y) { return ssim_tensor(x, y).item(); }

std::string ConsistencyReport::to_text() const {
    std::ostringstream os;
    os.precision(6);
    os << std::fixed << "P=" << P << "\nW=" << W << "\npatches=" << per_patch_sims.size() << "\ngrid=" << rows << "x"
       << cols << "\n";
    return os.str();
}

double worst_decile_mean(std::vector<double> sims) {
    if (sims.empty()) fail(ErrorKind::Value, "worst_decile_mean: no values");
    std::sort(sims.begin(), sims.end());
    const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(0.1 * static_cast<double>(sims.size()) - 1e-9)));
    double acc = 0.0;
    for (std::size_t i = 0; i < k; ++i) acc += sims[i];
    return acc / static_cast<double>(k);
}

ConsistencyReport patch_consistency(const Tensor& feat_a, const Tensor& feat_b, int patch) {
    auto squeeze = [](const Tensor& t) {
        if (t.rank() == 4 && t.dim(0) == 1) return Tensor({t.dim(1), t.dim(2), t.dim(3)}, std::vector<float>(t.data().begin(), t.data().end()));
        if (t.rank() != 3) fail(ErrorKind::Shape, "patch_consistency: expected [D,h,w], got " + shape_str(t.shape()));
        return t;
    };
    const Tensor a = squeeze(feat_a), b = squeeze(feat_b);
    if (a.shape() != b.shape()) {
        fail(ErrorKind::Shape, "patch_consistency: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const auto D = a.dim(0), h = a.dim(1), w = a.dim(2);
    if (patch < 1 || h % patch != 0 || w % patch != 0) {
        fail(ErrorKind::Shape, "patch_consistency: patch " + std::to_string(patch) + " does not divide " +
                                   std::to_string(h) + "x" + std::to_string(w));
    }
    ConsistencyReport r;
    r.rows = static_cast<int>(h / patch);
    r.cols = static_cast<int>(w / patch);
    std::vector<double> pa(static_cast<std::size_t>(D)), pb(static_cast<std::size_t>(D));
    for (int i = 0; i < r.rows; ++i)
        for (int j = 0; j < r.cols; ++j) {
            std::fill(pa.begin(), pa.end(), 0.0);
            std::fill(pb.begin(), pb.end(), 0.0);
            for (std::int64_t d = 0; d < D; ++d)
                for (int y = i * patch; y < (i + 1) * patch; ++y)
                    for (int x = j * patch; x < (j + 1) * patch; ++x) {
                        pa[static_cast<std::size_t>(d)] += a.ptr()[(d * h + y) * w + x];
                        pb[static_cast<std::size_t>(d)] += b.ptr()[(d * h + y) * w + x];
                    }
            double dot = 0.0, na = 0.0, nb = 0.0;
            const double inv = 1.0 / (double(patch) * patch);
            for (std::int64_t d = 0; d < D; ++d) {
                const double u = pa[static_cast<std::size_t>(d)] * inv, v = pb[static_cast<std::size_t>(d)] * inv;
                dot += u * v;
                na += u * u;
                nb += v * v;
            }
            r.per_patch_sims.push_back(dot / (std::sqrt(na) * std::sqrt(nb) + 1e-8));
        }
    double total = 0.0;
    for (double s : r.per_patch_sims) total += s;
    r.P = total / static_cast<double>(r.per_patch_sims.size());
    r.W = worst_decile_mean(r.per_patch_sims);
    return r;
}

ConsistencySummary summarize_consistency(const std::vector<ConsistencyReport>& reports) {
    if (reports.empty()) fail(ErrorKind::Value, "summarize_consistency: no reports");
    ConsistencySummary s;
    std::vector<double> all;
    for (const auto& r : reports) {
        s.P_macro += r.P;
        all.insert(all.end(), r.per_patch_sims.begin(), r.per_patch_sims.end());
    }
    s.pairs = reports.size();
    s.patches = all.size();
    s.P_macro /= static_cast<double>(reports.size());
    double total = 0.0;
    for (double v : all) total += v;
    s.P_micro = total / static_cast<double>(all.size());
    s.W = worst_decile_mean(std::move(all));
    return s;
}

std::string ConsistencySummary::to_text() const {
    std::ostringstream os;
    os.precision(6);
    os << std::fixed << "P_macro=" << P_macro << "\nP_micro=" << P_micro << "\nW=" << W << "\npairs=" << pairs
       << "\npatches=" << patches << "\n";
    return os.str();
}

void write_similarity_ppm(const std::filesystem::path& path, const ConsistencyReport& report, int cell) {
    if (cell < 1) throw Error(ErrorKind::Usage, "heat map cell size must be positive");
    const std::int64_t H = std::int64_t(report.rows) * cell, W = std::int64_t(report.cols) * cell;
    Tensor img = Tensor::zeros({3, H, W});
    float* p = img.mutable_ptr();
    for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x) {
            const double s = report.per_patch_sims[static_cast<std::size_t>((y / cell) * report.cols + x / cell)];
            const auto t = static_cast<float>(std::clamp((s + 1.0) / 2.0, 0.0, 1.0));
            p[(0 * H + y) * W + x] = t;
            p[(1 * H + y) * W + x] = 1.0f - std::fabs(2.0f * t - 1.0f);
            p[(2 * H + y) * W + x] = 1.0f - t;
        }
    io::write_ppm(path, img);
}

}  // namespace candle::metrics
