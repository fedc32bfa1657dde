#ifndef SELFREG_METRICS_HPP
#define SELFREG_METRICS_HPP

#include <cmath>
#include <vector>

#include "selfreg/data.hpp"
#include "selfreg/errors.hpp"
#include "selfreg/tensor.hpp"
#include "selfreg/unet.hpp"

namespace selfreg {

// 2|P∩G| / (|P|+|G|); both-empty convention -> 1.0
inline double dice_coefficient(const IntTensor& pred, const IntTensor& gt, int class_id) {
    if (!pred.same_shape(gt))
        throw ShapeError("dice_coefficient: mask shapes differ");
    long p = 0, g = 0, both = 0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        bool in_p = pred[i] == class_id, in_g = gt[i] == class_id;
        p += in_p;
        g += in_g;
        both += in_p && in_g;
    }
    if (p + g == 0) return 1.0;
    return 2.0 * double(both) / double(p + g);
}

// |P∩G| / |P∪G|; both-empty convention -> 1.0
inline double iou(const IntTensor& pred, const IntTensor& gt, int class_id) {
    if (!pred.same_shape(gt)) throw ShapeError("iou: mask shapes differ");
    long inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        bool in_p = pred[i] == class_id, in_g = gt[i] == class_id;
        inter += in_p && in_g;
        uni += in_p || in_g;
    }
    if (uni == 0) return 1.0;
    return double(inter) / double(uni);
}

struct MetricSet {
    std::vector<double> dsc_per_class;  // indexed by class id, background included
    std::vector<double> iou_per_class;
    double mean_dsc = 0.0;  // foreground classes only
    double mean_iou = 0.0;
};

// per-pixel argmax over class logits for a single sample
inline IntTensor predict_mask(const UNetModel& model, const Tensor& image) {
    Tensor batch = image;
    if (image.ndim() == 3)
        batch = image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
    ForwardResult r = model.forward(batch);
    const Tensor& lg = r.logits->value;
    int K = lg.dim(1), H = lg.dim(2), W = lg.dim(3);
    IntTensor out({H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            int best = 0;
            double bv = lg.at(0, 0, y, x);
            for (int k = 1; k < K; ++k)
                if (lg.at(0, k, y, x) > bv) {
                    bv = lg.at(0, k, y, x);
                    best = k;
                }
            out[std::size_t(y) * W + x] = best;
        }
    return out;
}

// per-class DSC/IoU averaged over samples; means over foreground classes
inline MetricSet evaluate(const UNetModel& model, const std::vector<SegSample>& dataset) {
    if (dataset.empty()) throw ValueError("evaluate: empty dataset");
    int K = model.config.num_classes;
    MetricSet m;
    m.dsc_per_class.assign(std::size_t(K), 0.0);
    m.iou_per_class.assign(std::size_t(K), 0.0);
    for (const auto& s : dataset) {
        IntTensor pred = predict_mask(model, s.image);
        if (!pred.same_shape(s.mask))
            throw ShapeError("evaluate: prediction/mask shape mismatch for '" + s.id + "'");
        for (int k = 0; k < K; ++k) {
            m.dsc_per_class[std::size_t(k)] += dice_coefficient(pred, s.mask, k);
            m.iou_per_class[std::size_t(k)] += iou(pred, s.mask, k);
        }
    }
    for (int k = 0; k < K; ++k) {
        m.dsc_per_class[std::size_t(k)] /= double(dataset.size());
        m.iou_per_class[std::size_t(k)] /= double(dataset.size());
    }
    for (int k = 1; k < K; ++k) {
        m.mean_dsc += m.dsc_per_class[std::size_t(k)];
        m.mean_iou += m.iou_per_class[std::size_t(k)];
    }
    m.mean_dsc /= double(K - 1);
    m.mean_iou /= double(K - 1);
    return m;
}

}  // namespace selfreg

#endif
