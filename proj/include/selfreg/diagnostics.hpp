#ifndef SELFREG_DIAGNOSTICS_HPP
#define SELFREG_DIAGNOSTICS_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "selfreg/losses.hpp"
#include "selfreg/tensor.hpp"
#include "selfreg/unet.hpp"

namespace selfreg {

enum class Half { Shallow, Deep };

inline std::string half_name(Half h) { return h == Half::Shallow ? "shallow" : "deep"; }

// file-system safe tap name: E1(2) -> E1_2
inline std::string tap_file_tag(const TapAddress& a) {
    std::string s = a.to_string();
    std::string out;
    for (char c : s)
        if (c == '(')
            out += '_';
        else if (c != ')')
            out += c;
    return out;
}

// Pairwise cosine similarity between the channels of one half of a tap,
// averaged over the batch.
struct SimilarityMatrix {
    Tensor values;  // (C/2, C/2)
    Half half = Half::Shallow;
    TapAddress address;
};

inline SimilarityMatrix channel_similarity(const FeatureTap& tap, Half half) {
    const Tensor& f = tap.values->value;
    if (f.ndim() != 4) throw ShapeError("channel_similarity: expected 4-D tap");
    int B = f.dim(0), C = f.dim(1), H = f.dim(2), W = f.dim(3);
    if (C % 2 != 0)
        throw ChannelParityError("channel_similarity: odd channel count " +
                                 std::to_string(C));
    if (B < 1) throw ShapeError("channel_similarity: empty batch");
    int half_c = C / 2;
    int c0 = half == Half::Shallow ? 0 : half_c;
    std::size_t hw = std::size_t(H) * W;
    SimilarityMatrix out{Tensor({half_c, half_c}), half, tap.address};
    std::vector<double> norms(std::size_t(half_c), 0.0);
    for (int b = 0; b < B; ++b) {
        for (int i = 0; i < half_c; ++i) {
            double s = 0.0;
            for (std::size_t p = 0; p < hw; ++p) {
                double v = f.data()[(std::size_t(b) * C + c0 + i) * hw + p];
                s += v * v;
            }
            norms[std::size_t(i)] = std::sqrt(s);
        }
        for (int i = 0; i < half_c; ++i)
            for (int j = 0; j < half_c; ++j) {
                double sim;
                if (i == j) {
                    sim = 1.0;
                } else if (norms[std::size_t(i)] == 0.0 || norms[std::size_t(j)] == 0.0) {
                    sim = 0.0;
                } else {
                    double dot = 0.0;
                    const double* a = f.data() + (std::size_t(b) * C + c0 + i) * hw;
                    const double* bb = f.data() + (std::size_t(b) * C + c0 + j) * hw;
                    for (std::size_t p = 0; p < hw; ++p) dot += a[p] * bb[p];
                    sim = dot / (norms[std::size_t(i)] * norms[std::size_t(j)]);
                }
                out.values[std::size_t(i * half_c + j)] += sim / double(B);
            }
    }
    return out;
}

// mean absolute off-diagonal similarity, in [0, 1]
inline double redundancy_score(const SimilarityMatrix& m) {
    int n = m.values.dim(0);
    if (n <= 1) return 0.0;
    double s = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (i != j) s += std::abs(m.values[std::size_t(i * n + j)]);
    return s / double(n * (n - 1));
}

// Grad-CAM style attention map at one tap, for one image.
struct AttentionMap {
    Tensor values;  // (H_in, W_in), min-max normalized to [0,1] (constant -> zeros)
    TapAddress address;
    int target_class = 0;
};

inline AttentionMap grad_cam(const UNetModel& model, const Tensor& image, int target_class,
                             const TapAddress& address) {
    const UNetConfig& cfg = model.config;
    if (target_class < 0 || target_class >= cfg.num_classes)
        throw ValueError("grad_cam: target_class out of range");
    Tensor batch = image;
    if (image.ndim() == 3)
        batch = image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
    if (batch.ndim() != 4 || batch.dim(0) != 1)
        throw ShapeError("grad_cam: expected a single image");

    ForwardResult r = model.forward(batch);
    const FeatureTap* tap = nullptr;
    for (const auto& t : r.taps)
        if (t.address == address) tap = &t;
    if (!tap) throw ValueError("grad_cam: unknown tap address");

    // scalar target: sum of the target-class logits over all pixels
    ad::Var cls = ad::slice_channels(r.logits, target_class, target_class + 1);
    ad::backward(ad::sum(cls));

    const Tensor& fv = tap->values->value;
    int C = fv.dim(1), H = fv.dim(2), W = fv.dim(3);
    std::size_t hw = std::size_t(H) * W;
    Tensor map({H, W});
    if (tap->values->grad_ready) {
        const Tensor& g = tap->values->grad;
        for (int c = 0; c < C; ++c) {
            double wgt = 0.0;
            for (std::size_t p = 0; p < hw; ++p) wgt += g.data()[std::size_t(c) * hw + p];
            wgt /= double(hw);
            for (std::size_t p = 0; p < hw; ++p)
                map[p] += wgt * fv.data()[std::size_t(c) * hw + p];
        }
        for (std::size_t p = 0; p < hw; ++p) map[p] = std::max(map[p], 0.0);
    }
    double mn = map[0], mx = map[0];
    for (std::size_t p = 1; p < hw; ++p) {
        mn = std::min(mn, map[p]);
        mx = std::max(mx, map[p]);
    }
    if (mx > mn)
        for (std::size_t p = 0; p < hw; ++p) map[p] = (map[p] - mn) / (mx - mn);
    else
        for (std::size_t p = 0; p < hw; ++p) map[p] = 0.0;

    // nearest-neighbor upscale to input resolution for overlay
    int Hi = cfg.input_h, Wi = cfg.input_w;
    Tensor full({Hi, Wi});
    for (int y = 0; y < Hi; ++y)
        for (int x = 0; x < Wi; ++x)
            full[std::size_t(y) * Wi + x] = map[std::size_t(y * H / Hi) * W + (x * W / Wi)];
    return {std::move(full), address, target_class};
}

namespace detail {

inline void write_gray_png(const Tensor& img2d, const std::string& path) {
    int H = img2d.dim(0), W = img2d.dim(1);
    cv::Mat m(H, W, CV_8UC1);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double v = std::clamp(img2d[std::size_t(y) * W + x], 0.0, 1.0);
            m.at<std::uint8_t>(y, x) = std::uint8_t(std::lround(v * 255.0));
        }
    if (!cv::imwrite(path, m)) throw IOError("failed to write image: " + path);
}

// similarity in [-1,1] mapped to [0,255]
inline void write_similarity_png(const SimilarityMatrix& m, const std::string& path) {
    int n = m.values.dim(0);
    cv::Mat img(n, n, CV_8UC1);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double v = std::clamp(m.values[std::size_t(i * n + j)], -1.0, 1.0);
            img.at<std::uint8_t>(i, j) = std::uint8_t(std::lround((v + 1.0) * 127.5));
        }
    if (!cv::imwrite(path, img)) throw IOError("failed to write image: " + path);
}

}  // namespace detail

// Writes per-block attention maps (layer-2 taps), per-tap shallow/deep
// similarity heatmaps, and a text summary with redundancy scores.
inline void diagnose_model(const UNetModel& model, const std::vector<Tensor>& sample_images,
                           int target_class, const std::string& out_dir) {
    if (sample_images.empty()) throw ValueError("diagnose_model: no samples given");
    std::filesystem::create_directories(out_dir);
    const UNetConfig& cfg = model.config;

    // batch the samples for the similarity analysis
    int B = int(sample_images.size());
    Tensor batch({B, cfg.in_channels, cfg.input_h, cfg.input_w});
    for (int b = 0; b < B; ++b) {
        const Tensor& img = sample_images[std::size_t(b)];
        if (img.numel() != batch.numel() / std::size_t(B))
            throw ShapeError("diagnose_model: sample shape mismatch");
        std::copy(img.data(), img.data() + img.numel(),
                  batch.data() + std::size_t(b) * img.numel());
    }
    ForwardResult r = model.forward(batch);

    std::ofstream summary(out_dir + "/redundancy_summary.txt");
    if (!summary) throw IOError("cannot write summary in " + out_dir);
    summary << "# tap half redundancy_score\n";
    char buf[128];
    for (const auto& tap : r.taps) {
        for (Half h : {Half::Shallow, Half::Deep}) {
            SimilarityMatrix m = channel_similarity(tap, h);
            detail::write_similarity_png(m, out_dir + "/sim_" + tap_file_tag(tap.address) +
                                                "_" + half_name(h) + ".png");
            std::snprintf(buf, sizeof(buf), "%s %s %.10f\n",
                          tap.address.to_string().c_str(), half_name(h).c_str(),
                          redundancy_score(m));
            summary << buf;
        }
    }
    summary.close();

    // per-block attention maps from the first sample (last layer of each block)
    for (const auto& tap : r.taps) {
        if (tap.address.layer_index != 2) continue;
        AttentionMap am = grad_cam(model, sample_images[0], target_class, tap.address);
        detail::write_gray_png(am.values,
                               out_dir + "/cam_" + tap_file_tag(tap.address) + ".png");
    }
}

}  // namespace selfreg

#endif
