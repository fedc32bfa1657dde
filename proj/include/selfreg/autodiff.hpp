#ifndef SELFREG_AUTODIFF_HPP
#define SELFREG_AUTODIFF_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "selfreg/errors.hpp"
#include "selfreg/tensor.hpp"

namespace selfreg {
namespace ad {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

// One node of the reverse-mode tape. `backprop` reads this node's grad and
// accumulates into the parents' grads.
struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_ready = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;

    Tensor& ensure_grad() {
        if (!grad_ready) {
            grad = Tensor(value.shape());
            grad_ready = true;
        }
        return grad;
    }
};

using Var = std::shared_ptr<Node>;

inline Var leaf(Tensor value, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

inline Var make_op(Tensor value, std::vector<Var> parents,
                   std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    for (auto& p : parents)
        if (p->requires_grad) n->requires_grad = true;
    n->parents = std::move(parents);
    if (n->requires_grad) n->backprop = std::move(backprop);
    return n;
}

// Re-exposes the value as a gradient-free leaf (stop-gradient).
inline Var detach(const Var& x) { return leaf(x->value, false); }

inline void topo_collect(const Var& root, std::vector<Node*>& order) {
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.push_back({root.get(), 0});
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}

// Reverse-mode sweep from a scalar root. Gradients accumulate in node->grad.
inline void backward(const Var& root) {
    if (root->value.numel() != 1)
        throw ValueError("backward: root must be a scalar");
    if (!root->requires_grad) return;
    std::vector<Node*> order;
    topo_collect(root, order);
    for (Node* n : order) n->grad_ready = false;
    root->ensure_grad()[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->grad_ready && n->backprop) n->backprop(*n);
    }
}

// ---------------------------------------------------------------------------
// elementwise & structural ops
// ---------------------------------------------------------------------------

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a->value.same_shape(b->value))
        throw ShapeError(std::string(op) + ": shape mismatch " +
                         Tensor::shape_str(a->value.shape()) + " vs " +
                         Tensor::shape_str(b->value.shape()));
}

inline Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out(a->value.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + b->value[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
        if (b->requires_grad) {
            Tensor& g = b->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out(a->value.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] - b->value[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
        if (b->requires_grad) {
            Tensor& g = b->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= n.grad[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a->value.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * b->value[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * b->value[i];
        }
        if (b->requires_grad) {
            Tensor& g = b->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * a->value[i];
        }
    });
}

inline Var mul_scalar(const Var& a, double s) {
    Tensor out(a->value.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * s;
    return make_op(std::move(out), {a}, [a, s](Node& n) {
        Tensor& g = a->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * s;
    });
}

inline Var relu(const Var& a) {
    Tensor out(a->value.shape());
    for (std::size_t i = 0; i < out.numel(); ++i)
        out[i] = a->value[i] > 0.0 ? a->value[i] : 0.0;
    return make_op(std::move(out), {a}, [a](Node& n) {
        Tensor& g = a->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i)
            if (a->value[i] > 0.0) g[i] += n.grad[i];
    });
}

inline Var gelu(const Var& a) {
    Tensor out(a->value.shape());
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (std::size_t i = 0; i < out.numel(); ++i) {
        double x = a->value[i];
        out[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    }
    return make_op(std::move(out), {a}, [a](Node& n) {
        constexpr double inv_sqrt2pi = 0.3989422804014326779;
        Tensor& g = a->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) {
            double x = a->value[i];
            double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            g[i] += n.grad[i] * (cdf + x * pdf);
        }
    });
}

inline Var sum(const Var& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a->value.numel(); ++i) s += a->value[i];
    return make_op(Tensor({1}, {s}), {a}, [a](Node& n) {
        Tensor& g = a->ensure_grad();
        double go = n.grad[0];
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += go;
    });
}

inline Var mean(const Var& a) {
    std::size_t cnt = a->value.numel();
    double s = 0.0;
    for (std::size_t i = 0; i < cnt; ++i) s += a->value[i];
    return make_op(Tensor({1}, {s / double(cnt)}), {a}, [a, cnt](Node& n) {
        Tensor& g = a->ensure_grad();
        double go = n.grad[0] / double(cnt);
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += go;
    });
}

// mean over all elements of (a - b)^2
inline Var mse(const Var& a, const Var& b) {
    Var d = sub(a, b);
    return mean(mul(d, d));
}

inline Var reshape(const Var& a, std::vector<int> new_shape) {
    Tensor out = a->value.reshaped(std::move(new_shape));
    return make_op(std::move(out), {a}, [a](Node& n) {
        Tensor& g = a->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    });
}

namespace detail {

inline std::vector<std::size_t> row_major_strides(const std::vector<int>& shape) {
    std::vector<std::size_t> st(shape.size());
    std::size_t acc = 1;
    for (int i = int(shape.size()) - 1; i >= 0; --i) {
        st[std::size_t(i)] = acc;
        acc *= std::size_t(shape[std::size_t(i)]);
    }
    return st;
}

// dst[i] = src[index_map(i)] given dst shape and per-dst-axis source strides
inline void permute_copy(const double* src, double* dst,
                         const std::vector<int>& dst_shape,
                         const std::vector<std::size_t>& src_strides_for_dst,
                         bool accumulate_into_src) {
    std::size_t n = Tensor::numel_of(dst_shape);
    int nd = int(dst_shape.size());
    std::vector<int> idx(std::size_t(nd), 0);
    std::size_t src_off = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (accumulate_into_src)
            const_cast<double*>(src)[src_off] += dst[i];
        else
            dst[i] = src[src_off];
        for (int d = nd - 1; d >= 0; --d) {
            if (++idx[std::size_t(d)] < dst_shape[std::size_t(d)]) {
                src_off += src_strides_for_dst[std::size_t(d)];
                break;
            }
            idx[std::size_t(d)] = 0;
            src_off -= src_strides_for_dst[std::size_t(d)] *
                       std::size_t(dst_shape[std::size_t(d)] - 1);
        }
    }
}

}  // namespace detail

inline Var permute(const Var& a, const std::vector<int>& axes) {
    const auto& shape = a->value.shape();
    if (axes.size() != shape.size()) throw ShapeError("permute: axes rank mismatch");
    std::vector<int> out_shape(axes.size());
    auto src_strides = detail::row_major_strides(shape);
    std::vector<std::size_t> strides_for_dst(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) {
        out_shape[i] = shape[std::size_t(axes[i])];
        strides_for_dst[i] = src_strides[std::size_t(axes[i])];
    }
    Tensor out(out_shape);
    detail::permute_copy(a->value.data(), out.data(), out_shape, strides_for_dst, false);
    return make_op(std::move(out), {a}, [a, out_shape, strides_for_dst](Node& n) {
        Tensor& g = a->ensure_grad();
        detail::permute_copy(g.data(), n.grad.data(), out_shape, strides_for_dst, true);
    });
}

// concatenation along the channel axis of 4-D tensors
inline Var concat_channels(const std::vector<Var>& parts) {
    if (parts.empty()) throw ValueError("concat_channels: empty input");
    const auto& s0 = parts[0]->value.shape();
    int c_total = 0;
    for (const auto& p : parts) {
        const auto& s = p->value.shape();
        if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
            throw ShapeError("concat_channels: incompatible shapes");
        c_total += s[1];
    }
    int B = s0[0], H = s0[2], W = s0[3];
    std::size_t hw = std::size_t(H) * W;
    Tensor out({B, c_total, H, W});
    for (int b = 0; b < B; ++b) {
        std::size_t off = std::size_t(b) * c_total * hw;
        for (const auto& p : parts) {
            std::size_t pc = std::size_t(p->value.dim(1)) * hw;
            const double* src = p->value.data() + std::size_t(b) * pc;
            std::copy(src, src + pc, out.data() + off);
            off += pc;
        }
    }
    return make_op(std::move(out), parts, [parts, B, c_total, hw](Node& n) {
        for (int b = 0; b < B; ++b) {
            std::size_t off = std::size_t(b) * std::size_t(c_total) * hw;
            for (const auto& p : parts) {
                std::size_t pc = std::size_t(p->value.dim(1)) * hw;
                if (p->requires_grad) {
                    Tensor& g = p->ensure_grad();
                    double* dst = g.data() + std::size_t(b) * pc;
                    const double* src = n.grad.data() + off;
                    for (std::size_t i = 0; i < pc; ++i) dst[i] += src[i];
                }
                off += pc;
            }
        }
    });
}

// channels [c0, c1) of a 4-D tensor
inline Var slice_channels(const Var& a, int c0, int c1) {
    const auto& s = a->value.shape();
    if (s.size() != 4) throw ShapeError("slice_channels: expected 4-D input");
    if (c0 < 0 || c1 > s[1] || c0 >= c1) throw ValueError("slice_channels: bad range");
    int B = s[0], C = s[1], H = s[2], W = s[3];
    std::size_t hw = std::size_t(H) * W;
    Tensor out({B, c1 - c0, H, W});
    for (int b = 0; b < B; ++b) {
        const double* src = a->value.data() + (std::size_t(b) * C + c0) * hw;
        std::copy(src, src + std::size_t(c1 - c0) * hw,
                  out.data() + std::size_t(b) * (c1 - c0) * hw);
    }
    return make_op(std::move(out), {a}, [a, c0, c1, B, C, hw](Node& n) {
        Tensor& g = a->ensure_grad();
        for (int b = 0; b < B; ++b) {
            double* dst = g.data() + (std::size_t(b) * C + c0) * hw;
            const double* src = n.grad.data() + std::size_t(b) * (c1 - c0) * hw;
            for (std::size_t i = 0; i < std::size_t(c1 - c0) * hw; ++i) dst[i] += src[i];
        }
    });
}

// picks channels by index; gradient flows back to the selected channels
inline Var gather_channels(const Var& a, const std::vector<int>& indices) {
    const auto& s = a->value.shape();
    if (s.size() != 4) throw ShapeError("gather_channels: expected 4-D input");
    int B = s[0], C = s[1], H = s[2], W = s[3];
    for (int c : indices)
        if (c < 0 || c >= C) throw ValueError("gather_channels: index out of range");
    std::size_t hw = std::size_t(H) * W;
    int K = int(indices.size());
    Tensor out({B, K, H, W});
    for (int b = 0; b < B; ++b)
        for (int k = 0; k < K; ++k) {
            const double* src = a->value.data() + (std::size_t(b) * C + indices[std::size_t(k)]) * hw;
            std::copy(src, src + hw, out.data() + (std::size_t(b) * K + k) * hw);
        }
    return make_op(std::move(out), {a}, [a, indices, B, C, K, hw](Node& n) {
        Tensor& g = a->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int k = 0; k < K; ++k) {
                double* dst = g.data() + (std::size_t(b) * C + indices[std::size_t(k)]) * hw;
                const double* src = n.grad.data() + (std::size_t(b) * K + k) * hw;
                for (std::size_t i = 0; i < hw; ++i) dst[i] += src[i];
            }
    });
}

// slice along the last axis
inline Var slice_lastdim(const Var& a, int start, int len) {
    const auto& s = a->value.shape();
    int D = s.back();
    if (start < 0 || start + len > D || len <= 0) throw ValueError("slice_lastdim: bad range");
    std::size_t rows = a->value.numel() / std::size_t(D);
    std::vector<int> out_shape = s;
    out_shape.back() = len;
    Tensor out(out_shape);
    for (std::size_t r = 0; r < rows; ++r)
        std::copy(a->value.data() + r * D + start, a->value.data() + r * D + start + len,
                  out.data() + r * len);
    return make_op(std::move(out), {a}, [a, start, len, D, rows](Node& n) {
        Tensor& g = a->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            double* dst = g.data() + r * D + start;
            const double* src = n.grad.data() + r * std::size_t(len);
            for (int i = 0; i < len; ++i) dst[std::size_t(i)] += src[std::size_t(i)];
        }
    });
}

// ---------------------------------------------------------------------------
// linear algebra ops
// ---------------------------------------------------------------------------

// y = x W^T + b over the last axis; W is (out, in), b is (out)
inline Var linear(const Var& x, const Var& w, const Var& b) {
    const auto& xs = x->value.shape();
    int D = xs.back();
    if (w->value.ndim() != 2 || w->value.dim(1) != D)
        throw ShapeError("linear: weight shape mismatch");
    int O = w->value.dim(0);
    if (b->value.numel() != std::size_t(O)) throw ShapeError("linear: bias shape mismatch");
    std::size_t N = x->value.numel() / std::size_t(D);
    std::vector<int> out_shape = xs;
    out_shape.back() = O;
    Tensor out(out_shape);
    {
        CMapRM X(x->value.data(), Eigen::Index(N), D);
        CMapRM W(w->value.data(), O, D);
        MapRM Y(out.data(), Eigen::Index(N), O);
        Y.noalias() = X * W.transpose();
        for (Eigen::Index r = 0; r < Y.rows(); ++r)
            for (int c = 0; c < O; ++c) Y(r, c) += b->value[std::size_t(c)];
    }
    return make_op(std::move(out), {x, w, b}, [x, w, b, N, D, O](Node& n) {
        CMapRM dY(n.grad.data(), Eigen::Index(N), O);
        if (x->requires_grad) {
            MapRM dX(x->ensure_grad().data(), Eigen::Index(N), D);
            CMapRM W(w->value.data(), O, D);
            dX.noalias() += dY * W;
        }
        if (w->requires_grad) {
            MapRM dW(w->ensure_grad().data(), O, D);
            CMapRM X(x->value.data(), Eigen::Index(N), D);
            dW.noalias() += dY.transpose() * X;
        }
        if (b->requires_grad) {
            Tensor& db = b->ensure_grad();
            for (Eigen::Index r = 0; r < dY.rows(); ++r)
                for (int c = 0; c < O; ++c) db[std::size_t(c)] += dY(r, c);
        }
    });
}

// batched matmul: (..., M, K) x (..., K, N) with identical leading dims
inline Var matmul(const Var& a, const Var& b) {
    const auto& as = a->value.shape();
    const auto& bs = b->value.shape();
    if (as.size() < 2 || as.size() != bs.size())
        throw ShapeError("matmul: rank mismatch");
    for (std::size_t i = 0; i + 2 < as.size(); ++i)
        if (as[i] != bs[i]) throw ShapeError("matmul: batch dims mismatch");
    int M = as[as.size() - 2], K = as.back();
    if (bs[bs.size() - 2] != K) throw ShapeError("matmul: inner dims mismatch");
    int N = bs.back();
    std::size_t batch = a->value.numel() / std::size_t(M * K);
    std::vector<int> out_shape = as;
    out_shape.back() = N;
    Tensor out(out_shape);
    for (std::size_t i = 0; i < batch; ++i) {
        CMapRM A(a->value.data() + i * M * K, M, K);
        CMapRM B(b->value.data() + i * K * N, K, N);
        MapRM C(out.data() + i * M * N, M, N);
        C.noalias() = A * B;
    }
    return make_op(std::move(out), {a, b}, [a, b, batch, M, K, N](Node& n) {
        for (std::size_t i = 0; i < batch; ++i) {
            CMapRM dC(n.grad.data() + i * M * N, M, N);
            if (a->requires_grad) {
                MapRM dA(a->ensure_grad().data() + i * M * K, M, K);
                CMapRM B(b->value.data() + i * K * N, K, N);
                dA.noalias() += dC * B.transpose();
            }
            if (b->requires_grad) {
                MapRM dB(b->ensure_grad().data() + i * K * N, K, N);
                CMapRM A(a->value.data() + i * M * K, M, K);
                dB.noalias() += A.transpose() * dC;
            }
        }
    });
}

inline Var softmax_lastdim(const Var& x) {
    const auto& s = x->value.shape();
    int D = s.back();
    std::size_t rows = x->value.numel() / std::size_t(D);
    Tensor out(s);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x->value.data() + r * D;
        double* o = out.data() + r * D;
        double mx = in[0];
        for (int i = 1; i < D; ++i) mx = std::max(mx, in[std::size_t(i)]);
        double z = 0.0;
        for (int i = 0; i < D; ++i) z += (o[std::size_t(i)] = std::exp(in[std::size_t(i)] - mx));
        for (int i = 0; i < D; ++i) o[std::size_t(i)] /= z;
    }
    Tensor y = out;
    return make_op(std::move(out), {x}, [x, y = std::move(y), D, rows](Node& n) {
        Tensor& g = x->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* yr = y.data() + r * D;
            const double* dy = n.grad.data() + r * D;
            double dot = 0.0;
            for (int i = 0; i < D; ++i) dot += dy[std::size_t(i)] * yr[std::size_t(i)];
            double* gr = g.data() + r * D;
            for (int i = 0; i < D; ++i)
                gr[std::size_t(i)] += yr[std::size_t(i)] * (dy[std::size_t(i)] - dot);
        }
    });
}

// ---------------------------------------------------------------------------
// image ops
// ---------------------------------------------------------------------------

namespace detail {

inline void im2col(const double* img, int C, int H, int W, int kh, int kw, int pad,
                   int stride, double* cols, int Ho, int Wo) {
    // cols is (Ho*Wo, C*kh*kw) row-major
    for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
            double* row = cols + (std::size_t(oy) * Wo + ox) * C * kh * kw;
            for (int c = 0; c < C; ++c) {
                const double* ch = img + std::size_t(c) * H * W;
                for (int dy = 0; dy < kh; ++dy) {
                    int iy = oy * stride + dy - pad;
                    for (int dx = 0; dx < kw; ++dx) {
                        int ix = ox * stride + dx - pad;
                        *row++ = (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                     ? ch[std::size_t(iy) * W + ix]
                                     : 0.0;
                    }
                }
            }
        }
}

inline void col2im_accum(const double* cols, int C, int H, int W, int kh, int kw,
                         int pad, int stride, double* img, int Ho, int Wo) {
    for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
            const double* row = cols + (std::size_t(oy) * Wo + ox) * C * kh * kw;
            for (int c = 0; c < C; ++c) {
                double* ch = img + std::size_t(c) * H * W;
                for (int dy = 0; dy < kh; ++dy) {
                    int iy = oy * stride + dy - pad;
                    for (int dx = 0; dx < kw; ++dx) {
                        int ix = ox * stride + dx - pad;
                        if (iy >= 0 && iy < H && ix >= 0 && ix < W)
                            ch[std::size_t(iy) * W + ix] += *row;
                        ++row;
                    }
                }
            }
        }
}

}  // namespace detail

// 2-D convolution; x is (B, Cin, H, W), w is (Cout, Cin, kh, kw), b is (Cout)
inline Var conv2d(const Var& x, const Var& w, const Var& b, int pad, int stride = 1) {
    const auto& xs = x->value.shape();
    const auto& ws = w->value.shape();
    if (xs.size() != 4 || ws.size() != 4) throw ShapeError("conv2d: expected 4-D tensors");
    if (xs[1] != ws[1]) throw ShapeError("conv2d: channel mismatch");
    int B = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
    int Cout = ws[0], kh = ws[2], kw = ws[3];
    if (b->value.numel() != std::size_t(Cout)) throw ShapeError("conv2d: bias mismatch");
    int Ho = (H + 2 * pad - kh) / stride + 1;
    int Wo = (W + 2 * pad - kw) / stride + 1;
    int Kdim = Cin * kh * kw;
    Tensor out({B, Cout, Ho, Wo});
    std::vector<double> cols(std::size_t(Ho) * Wo * Kdim);
    CMapRM Wm(w->value.data(), Cout, Kdim);
    for (int n = 0; n < B; ++n) {
        detail::im2col(x->value.data() + std::size_t(n) * Cin * H * W, Cin, H, W, kh, kw,
                       pad, stride, cols.data(), Ho, Wo);
        CMapRM Cm(cols.data(), std::size_t(Ho) * Wo, Kdim);
        // out layout for one image is (Cout, Ho*Wo); compute its transpose
        MatRM Y = Cm * Wm.transpose();  // (Ho*Wo, Cout)
        double* dst = out.data() + std::size_t(n) * Cout * Ho * Wo;
        for (int c = 0; c < Cout; ++c) {
            double bias = b->value[std::size_t(c)];
            for (int p = 0; p < Ho * Wo; ++p)
                dst[std::size_t(c) * Ho * Wo + p] = Y(p, c) + bias;
        }
    }
    return make_op(std::move(out), {x, w, b},
                   [x, w, b, B, Cin, H, W, Cout, kh, kw, pad, stride, Ho, Wo, Kdim](Node& n) {
        std::vector<double> cols(std::size_t(Ho) * Wo * Kdim);
        MatRM dYt(std::size_t(Ho) * Wo, Cout);  // (Ho*Wo, Cout)
        CMapRM Wm(w->value.data(), Cout, Kdim);
        for (int img = 0; img < B; ++img) {
            const double* dy = n.grad.data() + std::size_t(img) * Cout * Ho * Wo;
            for (int c = 0; c < Cout; ++c)
                for (int p = 0; p < Ho * Wo; ++p)
                    dYt(p, c) = dy[std::size_t(c) * Ho * Wo + p];
            if (w->requires_grad || x->requires_grad)
                detail::im2col(x->value.data() + std::size_t(img) * Cin * H * W, Cin, H, W,
                               kh, kw, pad, stride, cols.data(), Ho, Wo);
            if (w->requires_grad) {
                MapRM dW(w->ensure_grad().data(), Cout, Kdim);
                CMapRM Cm(cols.data(), std::size_t(Ho) * Wo, Kdim);
                dW.noalias() += dYt.transpose() * Cm;
            }
            if (b->requires_grad) {
                Tensor& db = b->ensure_grad();
                for (int c = 0; c < Cout; ++c) {
                    double s = 0.0;
                    for (int p = 0; p < Ho * Wo; ++p)
                        s += dy[std::size_t(c) * Ho * Wo + p];
                    db[std::size_t(c)] += s;
                }
            }
            if (x->requires_grad) {
                MatRM dCols = dYt * Wm;  // (Ho*Wo, Kdim)
                detail::col2im_accum(dCols.data(), Cin, H, W, kh, kw, pad, stride,
                                     x->ensure_grad().data() + std::size_t(img) * Cin * H * W,
                                     Ho, Wo);
            }
        }
    });
}

// non-overlapping mean pooling with kernel (kh, kw)
inline Var avg_pool2d(const Var& x, int kh, int kw) {
    const auto& s = x->value.shape();
    if (s.size() != 4) throw ShapeError("avg_pool2d: expected 4-D input");
    int B = s[0], C = s[1], H = s[2], W = s[3];
    if (kh < 1 || kw < 1 || H % kh != 0 || W % kw != 0)
        throw ShapeError("avg_pool2d: kernel does not divide input");
    int Ho = H / kh, Wo = W / kw;
    double inv = 1.0 / double(kh * kw);
    Tensor out({B, C, Ho, Wo});
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c)
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    double acc = 0.0;
                    for (int dy = 0; dy < kh; ++dy)
                        for (int dx = 0; dx < kw; ++dx)
                            acc += x->value.at(n, c, oy * kh + dy, ox * kw + dx);
                    out.at(n, c, oy, ox) = acc * inv;
                }
    return make_op(std::move(out), {x}, [x, B, C, Ho, Wo, kh, kw, inv](Node& n2) {
        Tensor& g = x->ensure_grad();
        for (int n = 0; n < B; ++n)
            for (int c = 0; c < C; ++c)
                for (int oy = 0; oy < Ho; ++oy)
                    for (int ox = 0; ox < Wo; ++ox) {
                        double go = n2.grad.at(n, c, oy, ox) * inv;
                        for (int dy = 0; dy < kh; ++dy)
                            for (int dx = 0; dx < kw; ++dx)
                                g.at(n, c, oy * kh + dy, ox * kw + dx) += go;
                    }
    });
}

inline Var upsample_nearest2x(const Var& x) {
    const auto& s = x->value.shape();
    if (s.size() != 4) throw ShapeError("upsample_nearest2x: expected 4-D input");
    int B = s[0], C = s[1], H = s[2], W = s[3];
    Tensor out({B, C, 2 * H, 2 * W});
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int xw = 0; xw < W; ++xw) {
                    double v = x->value.at(n, c, y, xw);
                    out.at(n, c, 2 * y, 2 * xw) = v;
                    out.at(n, c, 2 * y, 2 * xw + 1) = v;
                    out.at(n, c, 2 * y + 1, 2 * xw) = v;
                    out.at(n, c, 2 * y + 1, 2 * xw + 1) = v;
                }
    return make_op(std::move(out), {x}, [x, B, C, H, W](Node& n2) {
        Tensor& g = x->ensure_grad();
        for (int n = 0; n < B; ++n)
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H; ++y)
                    for (int xw = 0; xw < W; ++xw)
                        g.at(n, c, y, xw) += n2.grad.at(n, c, 2 * y, 2 * xw) +
                                             n2.grad.at(n, c, 2 * y, 2 * xw + 1) +
                                             n2.grad.at(n, c, 2 * y + 1, 2 * xw) +
                                             n2.grad.at(n, c, 2 * y + 1, 2 * xw + 1);
    });
}

// (B, C, H, W) -> (B, 4C, H/2, W/2); quadrant q of the 2x2 cell lands in
// channel block q*C + c
inline Var space_to_depth2(const Var& x) {
    const auto& s = x->value.shape();
    if (s.size() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0)
        throw ShapeError("space_to_depth2: spatial dims must be even");
    int B = s[0], C = s[1], H = s[2], W = s[3];
    int Ho = H / 2, Wo = W / 2;
    Tensor out({B, 4 * C, Ho, Wo});
    for (int n = 0; n < B; ++n)
        for (int q = 0; q < 4; ++q)
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < Ho; ++y)
                    for (int xw = 0; xw < Wo; ++xw)
                        out.at(n, q * C + c, y, xw) =
                            x->value.at(n, c, 2 * y + q / 2, 2 * xw + q % 2);
    return make_op(std::move(out), {x}, [x, B, C, Ho, Wo](Node& n2) {
        Tensor& g = x->ensure_grad();
        for (int n = 0; n < B; ++n)
            for (int q = 0; q < 4; ++q)
                for (int c = 0; c < C; ++c)
                    for (int y = 0; y < Ho; ++y)
                        for (int xw = 0; xw < Wo; ++xw)
                            g.at(n, c, 2 * y + q / 2, 2 * xw + q % 2) +=
                                n2.grad.at(n, q * C + c, y, xw);
    });
}

// inverse of space_to_depth2: (B, 4C', H, W) -> (B, C', 2H, 2W)
inline Var depth_to_space2(const Var& x) {
    const auto& s = x->value.shape();
    if (s.size() != 4 || s[1] % 4 != 0)
        throw ShapeError("depth_to_space2: channels must be divisible by 4");
    int B = s[0], C = s[1] / 4, H = s[2], W = s[3];
    Tensor out({B, C, 2 * H, 2 * W});
    for (int n = 0; n < B; ++n)
        for (int q = 0; q < 4; ++q)
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H; ++y)
                    for (int xw = 0; xw < W; ++xw)
                        out.at(n, c, 2 * y + q / 2, 2 * xw + q % 2) =
                            x->value.at(n, q * C + c, y, xw);
    return make_op(std::move(out), {x}, [x, B, C, H, W](Node& n2) {
        Tensor& g = x->ensure_grad();
        for (int n = 0; n < B; ++n)
            for (int q = 0; q < 4; ++q)
                for (int c = 0; c < C; ++c)
                    for (int y = 0; y < H; ++y)
                        for (int xw = 0; xw < W; ++xw)
                            g.at(n, q * C + c, y, xw) +=
                                n2.grad.at(n, c, 2 * y + q / 2, 2 * xw + q % 2);
    });
}

// ---------------------------------------------------------------------------
// normalization ops
// ---------------------------------------------------------------------------

// group normalization over (C/groups, H, W) slices; gamma/beta are per-channel
inline Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups,
                      double eps = 1e-5) {
    const auto& s = x->value.shape();
    if (s.size() != 4) throw ShapeError("group_norm: expected 4-D input");
    int B = s[0], C = s[1], H = s[2], W = s[3];
    if (groups < 1 || C % groups != 0) throw ShapeError("group_norm: groups must divide C");
    if (gamma->value.numel() != std::size_t(C) || beta->value.numel() != std::size_t(C))
        throw ShapeError("group_norm: affine params must be per-channel");
    int Cg = C / groups;
    std::size_t gsz = std::size_t(Cg) * H * W;
    std::size_t hw = std::size_t(H) * W;
    Tensor out(s);
    Tensor xhat(s);
    std::vector<double> inv_std(std::size_t(B) * groups);
    for (int n = 0; n < B; ++n)
        for (int g = 0; g < groups; ++g) {
            const double* base = x->value.data() + (std::size_t(n) * C + g * Cg) * hw;
            double mu = 0.0;
            for (std::size_t i = 0; i < gsz; ++i) mu += base[i];
            mu /= double(gsz);
            double var = 0.0;
            for (std::size_t i = 0; i < gsz; ++i) {
                double d = base[i] - mu;
                var += d * d;
            }
            var /= double(gsz);
            double is = 1.0 / std::sqrt(var + eps);
            inv_std[std::size_t(n) * groups + g] = is;
            double* xh = xhat.data() + (std::size_t(n) * C + g * Cg) * hw;
            double* o = out.data() + (std::size_t(n) * C + g * Cg) * hw;
            for (int cc = 0; cc < Cg; ++cc) {
                double ga = gamma->value[std::size_t(g * Cg + cc)];
                double be = beta->value[std::size_t(g * Cg + cc)];
                for (std::size_t i = 0; i < hw; ++i) {
                    double v = (base[cc * hw + i] - mu) * is;
                    xh[cc * hw + i] = v;
                    o[cc * hw + i] = ga * v + be;
                }
            }
        }
    return make_op(std::move(out), {x, gamma, beta},
                   [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std),
                    B, C, groups, Cg, gsz, hw](Node& n2) {
        for (int n = 0; n < B; ++n)
            for (int g = 0; g < groups; ++g) {
                std::size_t off = (std::size_t(n) * C + g * Cg) * hw;
                const double* dy = n2.grad.data() + off;
                const double* xh = xhat.data() + off;
                if (gamma->requires_grad) {
                    Tensor& dg = gamma->ensure_grad();
                    for (int cc = 0; cc < Cg; ++cc) {
                        double s1 = 0.0;
                        for (std::size_t i = 0; i < hw; ++i)
                            s1 += dy[cc * hw + i] * xh[cc * hw + i];
                        dg[std::size_t(g * Cg + cc)] += s1;
                    }
                }
                if (beta->requires_grad) {
                    Tensor& db = beta->ensure_grad();
                    for (int cc = 0; cc < Cg; ++cc) {
                        double s1 = 0.0;
                        for (std::size_t i = 0; i < hw; ++i) s1 += dy[cc * hw + i];
                        db[std::size_t(g * Cg + cc)] += s1;
                    }
                }
                if (x->requires_grad) {
                    double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                    for (int cc = 0; cc < Cg; ++cc) {
                        double ga = gamma->value[std::size_t(g * Cg + cc)];
                        for (std::size_t i = 0; i < hw; ++i) {
                            double d = dy[cc * hw + i] * ga;
                            mean_dxh += d;
                            mean_dxh_xh += d * xh[cc * hw + i];
                        }
                    }
                    mean_dxh /= double(gsz);
                    mean_dxh_xh /= double(gsz);
                    double is = inv_std[std::size_t(n) * groups + g];
                    double* dx = x->ensure_grad().data() + off;
                    for (int cc = 0; cc < Cg; ++cc) {
                        double ga = gamma->value[std::size_t(g * Cg + cc)];
                        for (std::size_t i = 0; i < hw; ++i) {
                            double d = dy[cc * hw + i] * ga;
                            dx[cc * hw + i] +=
                                is * (d - mean_dxh - xh[cc * hw + i] * mean_dxh_xh);
                        }
                    }
                }
            }
    });
}

// layer normalization over the last axis
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta,
                      double eps = 1e-5) {
    const auto& s = x->value.shape();
    int D = s.back();
    if (gamma->value.numel() != std::size_t(D) || beta->value.numel() != std::size_t(D))
        throw ShapeError("layer_norm: affine params must match last dim");
    std::size_t rows = x->value.numel() / std::size_t(D);
    Tensor out(s);
    Tensor xhat(s);
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x->value.data() + r * D;
        double mu = 0.0;
        for (int i = 0; i < D; ++i) mu += in[std::size_t(i)];
        mu /= double(D);
        double var = 0.0;
        for (int i = 0; i < D; ++i) {
            double d = in[std::size_t(i)] - mu;
            var += d * d;
        }
        var /= double(D);
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        double* xh = xhat.data() + r * D;
        double* o = out.data() + r * D;
        for (int i = 0; i < D; ++i) {
            double v = (in[std::size_t(i)] - mu) * is;
            xh[std::size_t(i)] = v;
            o[std::size_t(i)] = gamma->value[std::size_t(i)] * v + beta->value[std::size_t(i)];
        }
    }
    return make_op(std::move(out), {x, gamma, beta},
                   [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std),
                    D, rows](Node& n2) {
        for (std::size_t r = 0; r < rows; ++r) {
            const double* dy = n2.grad.data() + r * D;
            const double* xh = xhat.data() + r * D;
            if (gamma->requires_grad) {
                Tensor& dg = gamma->ensure_grad();
                for (int i = 0; i < D; ++i)
                    dg[std::size_t(i)] += dy[std::size_t(i)] * xh[std::size_t(i)];
            }
            if (beta->requires_grad) {
                Tensor& db = beta->ensure_grad();
                for (int i = 0; i < D; ++i) db[std::size_t(i)] += dy[std::size_t(i)];
            }
            if (x->requires_grad) {
                double m1 = 0.0, m2 = 0.0;
                for (int i = 0; i < D; ++i) {
                    double d = dy[std::size_t(i)] * gamma->value[std::size_t(i)];
                    m1 += d;
                    m2 += d * xh[std::size_t(i)];
                }
                m1 /= double(D);
                m2 /= double(D);
                double* dx = x->ensure_grad().data() + r * D;
                for (int i = 0; i < D; ++i) {
                    double d = dy[std::size_t(i)] * gamma->value[std::size_t(i)];
                    dx[std::size_t(i)] += inv_std[r] * (d - m1 - xh[std::size_t(i)] * m2);
                }
            }
        }
    });
}

}  // namespace ad
}  // namespace selfreg

#endif
