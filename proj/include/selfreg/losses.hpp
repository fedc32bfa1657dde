#ifndef SELFREG_LOSSES_HPP
#define SELFREG_LOSSES_HPP

#include <cmath>
#include <utility>
#include <vector>

#include "selfreg/autodiff.hpp"
#include "selfreg/rng.hpp"
#include "selfreg/tensor.hpp"
#include "selfreg/unet.hpp"

namespace selfreg {

struct SCRConfig {
    double lambda1 = 0.015;
    std::uint64_t rng_seed = 0;
    bool resample_each_step = true;

    void validate() const {
        if (lambda1 < 0.0) throw ConfigError("scr.lambda1 must be >= 0");
    }
};

struct IFDConfig {
    double lambda2 = 0.015;
    int p = 2;  // norm order; L2 throughout

    void validate() const {
        if (lambda2 < 0.0) throw ConfigError("ifd.lambda2 must be >= 0");
        if (p != 2) throw ConfigError("ifd.p is fixed at 2");
    }
};

struct LossBreakdown {
    double l_cd = 0.0;
    double l_scr = 0.0;
    double l_ifd = 0.0;
    double total = 0.0;
};

// ---------------------------------------------------------------------------
// base segmentation loss: 0.5 * cross-entropy + 0.5 * soft Dice
// ---------------------------------------------------------------------------

inline ad::Var dice_ce_loss(const ad::Var& logits, const IntTensor& labels,
                            double eps = 1e-5) {
    const auto& ls = logits->value.shape();
    if (ls.size() != 4) throw ShapeError("dice_ce_loss: logits must be 4-D");
    int B = ls[0], K = ls[1], H = ls[2], W = ls[3];
    if (labels.ndim() != 3 || labels.dim(0) != B || labels.dim(1) != H || labels.dim(2) != W)
        throw ShapeError("dice_ce_loss: labels must be (B,H,W) matching logits");
    for (std::size_t i = 0; i < labels.numel(); ++i)
        if (labels[i] < 0 || labels[i] >= K)
            throw LabelRangeError("dice_ce_loss: label " + std::to_string(labels[i]) +
                                  " outside [0," + std::to_string(K) + ")");

    std::size_t npix = std::size_t(B) * H * W;
    Tensor probs(ls);
    double ce = 0.0;
    std::vector<double> sum_p(std::size_t(K), 0.0), sum_y(std::size_t(K), 0.0),
        sum_py(std::size_t(K), 0.0);
    for (int b = 0; b < B; ++b)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double mx = logits->value.at(b, 0, y, x);
                for (int k = 1; k < K; ++k) mx = std::max(mx, logits->value.at(b, k, y, x));
                double z = 0.0;
                for (int k = 0; k < K; ++k)
                    z += (probs.at(b, k, y, x) = std::exp(logits->value.at(b, k, y, x) - mx));
                int lab = labels.at(b, y, x);
                for (int k = 0; k < K; ++k) {
                    double p = probs.at(b, k, y, x) / z;
                    probs.at(b, k, y, x) = p;
                    sum_p[std::size_t(k)] += p;
                    if (k == lab) {
                        sum_y[std::size_t(k)] += 1.0;
                        sum_py[std::size_t(k)] += p;
                        ce -= std::log(std::max(p, 1e-300));
                    }
                }
            }
    ce /= double(npix);
    double dice = 0.0;
    for (int k = 0; k < K; ++k)
        dice += (2.0 * sum_py[std::size_t(k)] + eps) /
                (sum_p[std::size_t(k)] + sum_y[std::size_t(k)] + eps);
    dice = 1.0 - dice / double(K);
    double value = 0.5 * ce + 0.5 * dice;

    IntTensor labels_copy = labels;
    return ad::make_op(
        Tensor({1}, {value}), {logits},
        [logits, probs = std::move(probs), labels = std::move(labels_copy),
         sum_p = std::move(sum_p), sum_y = std::move(sum_y), sum_py = std::move(sum_py),
         B, K, H, W, npix, eps](ad::Node& n) {
            double go = n.grad[0];
            Tensor& g = logits->ensure_grad();
            // dDice/dp_k precomputed pieces per class
            std::vector<double> den(std::size_t(K), 0.0), num(std::size_t(K), 0.0);
            for (int k = 0; k < K; ++k) {
                den[std::size_t(k)] =
                    sum_p[std::size_t(k)] + sum_y[std::size_t(k)] + eps;
                num[std::size_t(k)] = 2.0 * sum_py[std::size_t(k)] + eps;
            }
            double invN = 1.0 / double(npix);
            for (int b = 0; b < B; ++b)
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x) {
                        int lab = labels.at(b, y, x);
                        // dice gradient w.r.t. probabilities at this pixel
                        double dot = 0.0;
                        for (int k = 0; k < K; ++k) {
                            double yk = (k == lab) ? 1.0 : 0.0;
                            double dDice_dp = -(2.0 * yk * den[std::size_t(k)] -
                                                num[std::size_t(k)]) /
                                              (den[std::size_t(k)] * den[std::size_t(k)] *
                                               double(K));
                            dot += dDice_dp * probs.at(b, k, y, x);
                        }
                        for (int k = 0; k < K; ++k) {
                            double p = probs.at(b, k, y, x);
                            double yk = (k == lab) ? 1.0 : 0.0;
                            double dDice_dp = -(2.0 * yk * den[std::size_t(k)] -
                                                num[std::size_t(k)]) /
                                              (den[std::size_t(k)] * den[std::size_t(k)] *
                                               double(K));
                            double dz = 0.5 * (p - yk) * invN +        // cross-entropy
                                        0.5 * p * (dDice_dp - dot);    // dice via softmax
                            g.at(b, k, y, x) += go * dz;
                        }
                    }
        });
}

// ---------------------------------------------------------------------------
// alignment operators (Fig. 2a): random channel selection + average pooling
// ---------------------------------------------------------------------------

// picks k distinct channels uniformly without replacement; gradient-transparent
inline std::pair<ad::Var, std::vector<int>> random_channel_select(const ad::Var& feature,
                                                                  int k, Rng& rng) {
    const auto& s = feature->value.shape();
    if (s.size() != 4) throw ShapeError("random_channel_select: expected 4-D feature");
    int C = s[1];
    if (k < 1 || k > C)
        throw ValueError("random_channel_select: k must be in [1," + std::to_string(C) +
                         "], got " + std::to_string(k));
    std::vector<int> idx = rng.choose(C, k);
    return {ad::gather_channels(feature, idx), idx};
}

// non-overlapping mean pooling down to target_hw
inline ad::Var spatial_average_pool(const ad::Var& feature, int target_h, int target_w) {
    const auto& s = feature->value.shape();
    if (s.size() != 4) throw ShapeError("spatial_average_pool: expected 4-D feature");
    if (target_h < 1 || target_w < 1 || s[2] % target_h != 0 || s[3] % target_w != 0)
        throw ShapeError("spatial_average_pool: target " + std::to_string(target_h) + "x" +
                         std::to_string(target_w) + " does not divide " +
                         std::to_string(s[2]) + "x" + std::to_string(s[3]));
    return ad::avg_pool2d(feature, s[2] / target_h, s[3] / target_w);
}

// ---------------------------------------------------------------------------
// Semantic Consistency Regularization
// ---------------------------------------------------------------------------

// Pulls every non-final tap toward the pooled, channel-matched D1 feature map.
// The teacher (pooled final tap) is detached; students keep their gradients.
inline ad::Var scr_loss(const std::vector<FeatureTap>& taps, const FeatureTap& final_tap,
                        Rng& rng) {
    if (taps.empty()) throw ValueError("scr_loss: no taps given");
    int final_c = final_tap.values->value.dim(1);
    for (const auto& t : taps) {
        if (t.address.block_kind == BlockKind::Decoder && t.address.block_index == 1)
            throw ValueError("scr_loss: D1 taps must be excluded (teacher block)");
        if (t.values->value.dim(1) < final_c)
            throw AlignmentError("scr_loss: tap " + t.address.to_string() + " has " +
                                 std::to_string(t.values->value.dim(1)) +
                                 " channels, fewer than teacher's " +
                                 std::to_string(final_c));
    }
    ad::Var teacher_full = ad::detach(final_tap.values);
    ad::Var acc;
    for (const auto& t : taps) {
        const auto& s = t.values->value.shape();
        ad::Var teacher = spatial_average_pool(teacher_full, s[2], s[3]);
        auto [student, idx] = random_channel_select(t.values, final_c, rng);
        ad::Var contrib = ad::mse(student, teacher);
        acc = acc ? ad::add(acc, contrib) : contrib;
    }
    return ad::mul_scalar(acc, 1.0 / double(taps.size()));
}

// ---------------------------------------------------------------------------
// Internal Feature Distillation
// ---------------------------------------------------------------------------

// Pulls each tap's bottom-half (deep) channels toward its detached top-half
// (shallow) channels.
inline ad::Var ifd_loss(const std::vector<FeatureTap>& taps) {
    if (taps.empty()) throw ValueError("ifd_loss: no taps given");
    ad::Var acc;
    for (const auto& t : taps) {
        int c = t.values->value.dim(1);
        if (c % 2 != 0)
            throw ChannelParityError("ifd_loss: tap " + t.address.to_string() +
                                     " has odd channel count " + std::to_string(c));
        ad::Var shallow = ad::detach(ad::slice_channels(t.values, 0, c / 2));
        ad::Var deep = ad::slice_channels(t.values, c / 2, c);
        ad::Var contrib = ad::mse(deep, shallow);
        acc = acc ? ad::add(acc, contrib) : contrib;
    }
    return ad::mul_scalar(acc, 1.0 / double(taps.size()));
}

// ---------------------------------------------------------------------------
// total objective: L = L_cd + lambda1 * L_SCR + lambda2 * L_IFD
// ---------------------------------------------------------------------------

struct TotalLoss {
    ad::Var value;  // scalar graph node
    LossBreakdown breakdown;
};

// `taps` is the full 18-entry registry list; SCR excludes the D1 block and
// uses D1(2) as its teacher. With a zero lambda the corresponding regularizer
// is never constructed (and consumes no rng draws).
inline TotalLoss total_loss(const ad::Var& logits, const IntTensor& labels,
                            const std::vector<FeatureTap>& taps, const SCRConfig& scr_cfg,
                            const IFDConfig& ifd_cfg, Rng& rng) {
    scr_cfg.validate();
    ifd_cfg.validate();
    TotalLoss out;
    ad::Var l_cd = dice_ce_loss(logits, labels);
    out.breakdown.l_cd = l_cd->value[0];
    ad::Var total = l_cd;
    if (scr_cfg.lambda1 > 0.0) {
        std::vector<FeatureTap> scr_taps;
        const FeatureTap* final_tap = nullptr;
        for (const auto& t : taps) {
            if (t.address.block_kind == BlockKind::Decoder && t.address.block_index == 1) {
                if (t.address.layer_index == 2) final_tap = &t;
            } else {
                scr_taps.push_back(t);
            }
        }
        if (!final_tap) throw ValueError("total_loss: taps do not contain D1(2)");
        ad::Var l_scr = scr_loss(scr_taps, *final_tap, rng);
        out.breakdown.l_scr = l_scr->value[0];
        total = ad::add(total, ad::mul_scalar(l_scr, scr_cfg.lambda1));
    }
    if (ifd_cfg.lambda2 > 0.0) {
        ad::Var l_ifd = ifd_loss(taps);
        out.breakdown.l_ifd = l_ifd->value[0];
        total = ad::add(total, ad::mul_scalar(l_ifd, ifd_cfg.lambda2));
    }
    out.value = total;
    out.breakdown.total = total->value[0];
    return out;
}

}  // namespace selfreg

#endif
