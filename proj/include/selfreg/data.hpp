#ifndef SELFREG_DATA_HPP
#define SELFREG_DATA_HPP

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "selfreg/errors.hpp"
#include "selfreg/rng.hpp"
#include "selfreg/tensor.hpp"

namespace selfreg {

// one image/label pair; image is (C, H, W) in [0,1], mask is (H, W) labels
struct SegSample {
    Tensor image;
    IntTensor mask;
    std::string id;
};

// ---------------------------------------------------------------------------
// synthetic shapes generator
// ---------------------------------------------------------------------------

namespace detail {

struct Shape {
    int kind;        // 0 ellipse, 1 rectangle, 2 ring
    double cx, cy;   // center in pixels
    double rx, ry;   // radii in pixels
    double inner;    // ring inner fraction
    int cls;
    double intensity;

    bool contains(double x, double y) const {
        double dx = (x - cx) / rx, dy = (y - cy) / ry;
        switch (kind) {
            case 0: return dx * dx + dy * dy <= 1.0;
            case 1: return std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
            default: {
                double r2 = dx * dx + dy * dy;
                return r2 <= 1.0 && r2 >= inner * inner;
            }
        }
    }
};

}  // namespace detail

// Textured background with 1-4 random ellipses/rectangles/rings per
// foreground class. Masks come from the exact analytic shape test; difficulty
// in [0,1] raises noise amplitude and intensity overlap between foreground
// and background.
inline std::vector<SegSample> generate_synthetic(int n, int height, int width, int classes,
                                                 double difficulty, std::uint64_t seed) {
    if (n < 1) throw ValueError("generate_synthetic: n must be >= 1");
    if (classes < 2) throw ValueError("generate_synthetic: classes must be >= 2");
    if (height < 32 || width < 32)
        throw ValueError("generate_synthetic: size must be at least 32x32");
    if (difficulty < 0.0 || difficulty > 1.0)
        throw ValueError("generate_synthetic: difficulty must be in [0,1]");

    const double bg_hi = 0.30 + 0.25 * difficulty;   // background intensity ceiling
    const double fg_lo = 0.70 - 0.25 * difficulty;   // foreground intensity floor
    const double noise_sigma = 0.02 + 0.10 * difficulty;

    std::vector<SegSample> out;
    out.reserve(std::size_t(n));
    for (int i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, "synth-" + std::to_string(i)));
        SegSample s;
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%05d", i);
        s.id = "synth_" + std::string(buf);
        s.image = Tensor({1, height, width});
        s.mask = IntTensor({height, width});

        // low-frequency texture + per-pixel noise, clamped under bg_hi
        double fx = rng.uniform(1.0, 3.0), fy = rng.uniform(1.0, 3.0);
        double phase = rng.uniform(0.0, 6.283185307179586);
        std::vector<detail::Shape> shapes;
        for (int cls = 1; cls < classes; ++cls) {
            int count = rng.uniform_int(1, 4);
            for (int j = 0; j < count; ++j) {
                detail::Shape sh;
                sh.kind = rng.uniform_int(0, 2);
                sh.cx = rng.uniform(0.18, 0.82) * width;
                sh.cy = rng.uniform(0.18, 0.82) * height;
                sh.rx = rng.uniform(0.06, 0.16) * width;
                sh.ry = rng.uniform(0.06, 0.16) * height;
                sh.inner = rng.uniform(0.4, 0.7);
                sh.cls = cls;
                sh.intensity = rng.uniform(fg_lo, 0.95);
                shapes.push_back(sh);
            }
        }
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
                double tex = 0.5 + 0.5 * std::sin(fx * 6.2831853 * x / width +
                                                  fy * 6.2831853 * y / height + phase);
                double v = 0.05 + tex * (bg_hi - 0.05);
                int lab = 0;
                // later shapes paint over earlier ones
                for (const auto& sh : shapes)
                    if (sh.contains(x + 0.5, y + 0.5)) {
                        lab = sh.cls;
                        v = sh.intensity;
                    }
                v += rng.normal(0.0, noise_sigma);
                s.mask[std::size_t(y) * width + x] = lab;
                s.image[std::size_t(y) * width + x] = std::clamp(v, 0.0, 1.0);
            }
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// directory loader (images_dir + masks_dir, pairs matched by filename stem)
// ---------------------------------------------------------------------------

namespace detail {

inline bool is_image_file(const std::filesystem::path& p) {
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) {
        return char(std::tolower(c));
    });
    return e == ".png" || e == ".jpg" || e == ".jpeg" || e == ".bmp";
}

}  // namespace detail

// Loads image/mask pairs matched by filename stem. Images are resized with
// bilinear interpolation and scaled to [0,1]; masks with nearest-neighbor.
// A mask must hold exactly num_classes distinct values; they are remapped to
// labels by sorted value rank (e.g. binary 0/255 masks become 0/1). Any other
// value cardinality fails to decode.
inline std::vector<SegSample> load_directory_dataset(const std::string& images_dir,
                                                     const std::string& masks_dir,
                                                     int num_classes, int target_h,
                                                     int target_w, int in_channels = 1) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(images_dir)) throw IOError("not a directory: " + images_dir);
    if (!fs::is_directory(masks_dir)) throw IOError("not a directory: " + masks_dir);

    std::map<std::string, fs::path> masks;
    for (const auto& e : fs::directory_iterator(masks_dir))
        if (e.is_regular_file() && detail::is_image_file(e.path()))
            masks[e.path().stem().string()] = e.path();

    std::vector<std::pair<std::string, fs::path>> images;
    for (const auto& e : fs::directory_iterator(images_dir))
        if (e.is_regular_file() && detail::is_image_file(e.path()))
            images.emplace_back(e.path().stem().string(), e.path());
    std::sort(images.begin(), images.end());  // scan order never matters

    std::vector<SegSample> out;
    for (const auto& [stem, path] : images) {
        auto mit = masks.find(stem);
        if (mit == masks.end())
            throw MissingMaskError("no mask found for image stem '" + stem + "'");
        cv::Mat img = cv::imread(path.string(),
                                 in_channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
        if (img.empty()) throw DecodeError("cannot decode image: " + path.string());
        cv::Mat mask = cv::imread(mit->second.string(), cv::IMREAD_GRAYSCALE);
        if (mask.empty()) throw DecodeError("cannot decode mask: " + mit->second.string());

        cv::Mat imgr, maskr;
        cv::resize(img, imgr, cv::Size(target_w, target_h), 0, 0, cv::INTER_LINEAR);
        cv::resize(mask, maskr, cv::Size(target_w, target_h), 0, 0, cv::INTER_NEAREST);

        SegSample s;
        s.id = stem;
        s.image = Tensor({in_channels, target_h, target_w});
        for (int y = 0; y < target_h; ++y)
            for (int x = 0; x < target_w; ++x) {
                if (in_channels == 1) {
                    s.image[std::size_t(y) * target_w + x] =
                        imgr.at<std::uint8_t>(y, x) / 255.0;
                } else {
                    cv::Vec3b px = imgr.at<cv::Vec3b>(y, x);  // BGR
                    for (int c = 0; c < in_channels && c < 3; ++c)
                        s.image[(std::size_t(c) * target_h + y) * target_w + x] =
                            px[2 - c] / 255.0;
                }
            }

        std::set<int> distinct;
        for (int y = 0; y < target_h; ++y)
            for (int x = 0; x < target_w; ++x) distinct.insert(int(maskr.at<std::uint8_t>(y, x)));
        // exactly num_classes distinct values -> remap by sorted-value rank
        std::map<int, int> remap;
        if (int(distinct.size()) != num_classes)
            throw DecodeError("mask '" + stem + "' has " + std::to_string(distinct.size()) +
                              " distinct values, cannot map onto " +
                              std::to_string(num_classes) + " classes");
        int rank = 0;
        for (int v : distinct) remap[v] = rank++;
        s.mask = IntTensor({target_h, target_w});
        for (int y = 0; y < target_h; ++y)
            for (int x = 0; x < target_w; ++x)
                s.mask[std::size_t(y) * target_w + x] = remap.at(int(maskr.at<std::uint8_t>(y, x)));
        out.push_back(std::move(s));
    }
    return out;
}

// writes samples back out in the loader's directory layout
inline void export_dataset(const std::vector<SegSample>& samples,
                           const std::string& images_dir, const std::string& masks_dir,
                           int num_classes) {
    namespace fs = std::filesystem;
    fs::create_directories(images_dir);
    fs::create_directories(masks_dir);
    for (const auto& s : samples) {
        int H = s.mask.dim(0), W = s.mask.dim(1);
        cv::Mat img(H, W, CV_8UC1);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                img.at<std::uint8_t>(y, x) = std::uint8_t(
                    std::lround(std::clamp(s.image[std::size_t(y) * W + x], 0.0, 1.0) * 255.0));
        cv::Mat mask(H, W, CV_8UC1);
        int step = num_classes > 1 ? 255 / (num_classes - 1) : 255;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                mask.at<std::uint8_t>(y, x) = std::uint8_t(s.mask[std::size_t(y) * W + x] * step);
        if (!cv::imwrite(images_dir + "/" + s.id + ".png", img))
            throw IOError("failed to write " + images_dir + "/" + s.id + ".png");
        if (!cv::imwrite(masks_dir + "/" + s.id + ".png", mask))
            throw IOError("failed to write " + masks_dir + "/" + s.id + ".png");
    }
}

// ---------------------------------------------------------------------------
// augmentation: flips and 90-degree rotations, mask-preserving
// ---------------------------------------------------------------------------

inline SegSample apply_flip_rot(const SegSample& s, bool hflip, bool vflip, int rot90) {
    int C = s.image.dim(0), H = s.image.dim(1), W = s.image.dim(2);
    rot90 = ((rot90 % 4) + 4) % 4;
    int oh = (rot90 % 2 == 0) ? H : W;
    int ow = (rot90 % 2 == 0) ? W : H;
    SegSample out;
    out.id = s.id;
    out.image = Tensor({C, oh, ow});
    out.mask = IntTensor({oh, ow});
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            // invert rotation then flips to find the source pixel
            int ry, rx;
            switch (rot90) {
                case 0: ry = y; rx = x; break;
                case 1: ry = x; rx = W - 1 - y; break;  // out[y][x] = in[x][W-1-y]
                case 2: ry = H - 1 - y; rx = W - 1 - x; break;
                default: ry = H - 1 - x; rx = y; break;  // out[y][x] = in[H-1-x][y]
            }
            int sy = vflip ? H - 1 - ry : ry;
            int sx = hflip ? W - 1 - rx : rx;
            for (int c = 0; c < C; ++c)
                out.image[(std::size_t(c) * oh + y) * ow + x] =
                    s.image[(std::size_t(c) * H + sy) * W + sx];
            out.mask[std::size_t(y) * ow + x] = s.mask[std::size_t(sy) * W + sx];
        }
    return out;
}

inline SegSample augment(const SegSample& s, std::uint64_t seed) {
    Rng rng(seed);
    bool hflip = rng.uniform() < 0.5;
    bool vflip = rng.uniform() < 0.5;
    int rot = rng.uniform_int(0, 3);
    return apply_flip_rot(s, hflip, vflip, rot);
}

// ---------------------------------------------------------------------------
// repeated k-fold splitting
// ---------------------------------------------------------------------------

struct FoldSpec {
    int k = 5;
    int repeats = 3;
    std::uint64_t seed = 0;
    // assignments[r][i] = fold id of sample i in repeat r
    std::vector<std::vector<int>> assignments;
};

inline FoldSpec make_folds(int n_samples, int k, int repeats, std::uint64_t seed) {
    if (k < 2) throw ValueError("make_folds: k must be >= 2");
    if (repeats < 1) throw ValueError("make_folds: repeats must be >= 1");
    if (n_samples < k)
        throw ValueError("make_folds: need at least k samples (" + std::to_string(n_samples) +
                         " < " + std::to_string(k) + ")");
    FoldSpec spec;
    spec.k = k;
    spec.repeats = repeats;
    spec.seed = seed;
    for (int r = 0; r < repeats; ++r) {
        Rng rng(derive_seed(seed, "fold-repeat-" + std::to_string(r)));
        std::vector<int> perm = rng.permutation(n_samples);
        std::vector<int> assign(std::size_t(n_samples), 0);
        for (int i = 0; i < n_samples; ++i) assign[std::size_t(perm[std::size_t(i)])] = i % k;
        spec.assignments.push_back(std::move(assign));
    }
    return spec;
}

}  // namespace selfreg

#endif
