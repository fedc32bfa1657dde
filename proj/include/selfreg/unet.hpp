#ifndef SELFREG_UNET_HPP
#define SELFREG_UNET_HPP

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "selfreg/autodiff.hpp"
#include "selfreg/errors.hpp"
#include "selfreg/rng.hpp"
#include "selfreg/tensor.hpp"

namespace selfreg {

// ---------------------------------------------------------------------------
// tap addressing
// ---------------------------------------------------------------------------

enum class BlockKind { Encoder, Bottleneck, Decoder };

// Address of one intermediate feature map: block + layer. Ordering follows the
// forward pass: E1(1), E1(2), ..., E4(2), B(1), B(2), D4(1), ..., D1(2).
struct TapAddress {
    BlockKind block_kind = BlockKind::Encoder;
    int block_index = 1;  // 1..4, ignored for the bottleneck
    int layer_index = 1;  // 1..2

    // position in the forward enumeration (0..17)
    int order() const {
        int block_pos;
        switch (block_kind) {
            case BlockKind::Encoder: block_pos = block_index - 1; break;
            case BlockKind::Bottleneck: block_pos = 4; break;
            default: block_pos = 5 + (4 - block_index); break;
        }
        return block_pos * 2 + (layer_index - 1);
    }

    bool operator==(const TapAddress& o) const { return order() == o.order(); }
    bool operator!=(const TapAddress& o) const { return !(*this == o); }
    bool operator<(const TapAddress& o) const { return order() < o.order(); }

    std::string to_string() const {
        switch (block_kind) {
            case BlockKind::Encoder:
                return "E" + std::to_string(block_index) + "(" + std::to_string(layer_index) + ")";
            case BlockKind::Bottleneck:
                return "B(" + std::to_string(layer_index) + ")";
            default:
                return "D" + std::to_string(block_index) + "(" + std::to_string(layer_index) + ")";
        }
    }

    static TapAddress encoder(int m, int l) { return {BlockKind::Encoder, m, l}; }
    static TapAddress bottleneck(int l) { return {BlockKind::Bottleneck, 1, l}; }
    static TapAddress decoder(int m, int l) { return {BlockKind::Decoder, m, l}; }
};

inline std::vector<TapAddress> full_tap_registry() {
    std::vector<TapAddress> regs;
    for (int m = 1; m <= 4; ++m)
        for (int l = 1; l <= 2; ++l) regs.push_back(TapAddress::encoder(m, l));
    for (int l = 1; l <= 2; ++l) regs.push_back(TapAddress::bottleneck(l));
    for (int m = 4; m >= 1; --m)
        for (int l = 1; l <= 2; ++l) regs.push_back(TapAddress::decoder(m, l));
    return regs;
}

// One intermediate feature map together with its address. `values` stays
// attached to the forward graph so losses can backpropagate through it.
struct FeatureTap {
    TapAddress address;
    ad::Var values;  // (B, C, H, W)
};

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

enum class Backbone { CNN, WindowedAttention };

struct UNetConfig {
    Backbone backbone = Backbone::CNN;
    int in_channels = 1;
    int num_classes = 2;
    int base_channels = 8;
    int depth = 5;
    int input_h = 64;
    int input_w = 64;
    int window_size = 4;  // attention variant only
    std::uint64_t seed = 0;

    // channel width at encoder level k (1-based); bottleneck is level 5
    int level_channels(int level) const { return base_channels << (level - 1); }

    void validate() const {
        if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
        if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
        if (base_channels < 4 || base_channels % 2 != 0)
            throw ConfigError("base_channels must be even and >= 4");
        if (depth != 5) throw ConfigError("depth is fixed at 5");
        if (input_h < 16 || input_w < 16 || input_h % 16 != 0 || input_w % 16 != 0)
            throw ConfigError("input_size sides must be divisible by 16 (got " +
                              std::to_string(input_h) + "x" + std::to_string(input_w) + ")");
        if (backbone == Backbone::WindowedAttention) {
            if (window_size < 1) throw ConfigError("window_size must be >= 1");
            // window must divide every level's spatial side; the deepest level
            // (input/16) is the binding constraint
            if ((input_h / 16) % window_size != 0 || (input_w / 16) % window_size != 0)
                throw ConfigError("window_size must divide every level's side (deepest is " +
                                  std::to_string(input_h / 16) + "x" +
                                  std::to_string(input_w / 16) + ")");
        }
    }
};

inline void to_json(nlohmann::ordered_json& j, const UNetConfig& c) {
    j = nlohmann::ordered_json{
        {"backbone", c.backbone == Backbone::CNN ? "cnn" : "windowed_attention"},
        {"in_channels", c.in_channels},
        {"num_classes", c.num_classes},
        {"base_channels", c.base_channels},
        {"depth", c.depth},
        {"input_h", c.input_h},
        {"input_w", c.input_w},
        {"window_size", c.window_size},
        {"seed", c.seed}};
}

inline void from_json(const nlohmann::ordered_json& j, UNetConfig& c) {
    std::string bb = j.value("backbone", "cnn");
    if (bb == "cnn")
        c.backbone = Backbone::CNN;
    else if (bb == "windowed_attention")
        c.backbone = Backbone::WindowedAttention;
    else
        throw ConfigError("unknown backbone: " + bb);
    c.in_channels = j.value("in_channels", 1);
    c.num_classes = j.value("num_classes", 2);
    c.base_channels = j.value("base_channels", 8);
    c.depth = j.value("depth", 5);
    c.input_h = j.value("input_h", 64);
    c.input_w = j.value("input_w", 64);
    c.window_size = j.value("window_size", 4);
    c.seed = j.value("seed", std::uint64_t(0));
}

// shape (C, H, W) of every tap, derived from the config alone
inline std::map<std::string, std::tuple<int, int, int>> tap_shapes(const UNetConfig& cfg) {
    cfg.validate();
    std::map<std::string, std::tuple<int, int, int>> out;
    for (const TapAddress& a : full_tap_registry()) {
        int level = a.block_kind == BlockKind::Bottleneck ? 5 : a.block_index;
        int c = cfg.level_channels(level);
        int h = cfg.input_h >> (level - 1);
        int w = cfg.input_w >> (level - 1);
        out[a.to_string()] = {c, h, w};
    }
    return out;
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

struct ForwardResult {
    ad::Var logits;                 // (B, num_classes, H, W)
    std::vector<FeatureTap> taps;   // all 18, registry order
};

class UNetModel {
public:
    UNetConfig config;
    std::vector<TapAddress> tap_registry;

    const std::vector<std::string>& param_names() const { return names_; }

    ad::Var param(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw ValueError("unknown parameter: " + name);
        return it->second;
    }

    Tensor& param_value(const std::string& name) { return params_.at(name)->value; }
    const Tensor& param_value(const std::string& name) const { return params_.at(name)->value; }

    std::size_t num_parameters() const {
        std::size_t n = 0;
        for (const auto& name : names_) n += params_.at(name)->value.numel();
        return n;
    }

    ForwardResult forward(const Tensor& images) const;

    // value-only copy of all parameters (model copies alias their parameters;
    // use snapshot/restore to checkpoint in memory)
    std::map<std::string, Tensor> snapshot() const {
        std::map<std::string, Tensor> out;
        for (const auto& [k, v] : params_) out[k] = v->value;
        return out;
    }
    void restore(const std::map<std::string, Tensor>& snap) {
        for (auto& [k, v] : params_) v->value = snap.at(k);
    }

    friend UNetModel build_unet(const UNetConfig& cfg);
    friend void save_checkpoint(const UNetModel& model, const std::string& path);
    friend UNetModel load_checkpoint(const std::string& path);

private:
    std::vector<std::string> names_;
    std::map<std::string, ad::Var> params_;

    ad::Var add_param(const std::string& name, Tensor t) {
        names_.push_back(name);
        auto v = ad::leaf(std::move(t), true);
        params_[name] = v;
        return v;
    }
};

namespace detail {

inline Tensor init_fanin(std::vector<int> shape, int fan_in, Rng& rng, double gain) {
    Tensor t(std::move(shape));
    double s = gain / std::sqrt(double(fan_in));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, s);
    return t;
}

// block/stage names in forward order; parameters are registered in this order
// so init draws are reproducible
inline std::vector<std::string> block_names() {
    return {"E1", "E2", "E3", "E4", "B", "D4", "D3", "D2", "D1"};
}

}  // namespace detail

inline UNetModel build_unet(const UNetConfig& cfg) {
    cfg.validate();
    UNetModel m;
    m.config = cfg;
    m.tap_registry = full_tap_registry();
    Rng rng(derive_seed(cfg.seed, "unet-init"));

    auto conv = [&](const std::string& name, int cout, int cin, int k) {
        m.add_param(name + ".w", detail::init_fanin({cout, cin, k, k}, cin * k * k, rng,
                                                    std::sqrt(2.0)));
        m.add_param(name + ".b", Tensor({cout}));
    };
    auto norm = [&](const std::string& name, int c) {
        m.add_param(name + ".gamma", Tensor({c}, 1.0));
        m.add_param(name + ".beta", Tensor({c}));
    };
    auto lin = [&](const std::string& name, int out, int in) {
        m.add_param(name + ".w", detail::init_fanin({out, in}, in, rng, 1.0));
        m.add_param(name + ".b", Tensor({out}));
    };

    const int base = cfg.base_channels;
    if (cfg.backbone == Backbone::CNN) {
        conv("inproj", base, cfg.in_channels, 3);
        // encoders + bottleneck: layer 1 doubles channels (except E1)
        for (int level = 1; level <= 5; ++level) {
            std::string blk = level == 5 ? "B" : "E" + std::to_string(level);
            int c = cfg.level_channels(level);
            int cin1 = level == 1 ? base : cfg.level_channels(level - 1);
            conv(blk + ".l1.conv", c, cin1, 3);
            norm(blk + ".l1.gn", c);
            conv(blk + ".l2.conv", c, c, 3);
            norm(blk + ".l2.gn", c);
        }
        // decoders: upsample conv halves channels, layer 1 folds in the skip
        for (int k = 4; k >= 1; --k) {
            std::string blk = "D" + std::to_string(k);
            int c = cfg.level_channels(k);
            conv("up" + std::to_string(k) + ".conv", c, cfg.level_channels(k + 1), 3);
            conv(blk + ".l1.conv", c, 2 * c, 3);
            norm(blk + ".l1.gn", c);
            conv(blk + ".l2.conv", c, c, 3);
            norm(blk + ".l2.gn", c);
        }
    } else {
        conv("inproj", base, cfg.in_channels, 3);
        auto attn_layer = [&](const std::string& name, int c) {
            norm(name + ".ln1", c);
            lin(name + ".qkv", 3 * c, c);
            lin(name + ".proj", c, c);
            norm(name + ".ln2", c);
            lin(name + ".mlp1", 2 * c, c);
            lin(name + ".mlp2", c, 2 * c);
        };
        for (int level = 1; level <= 5; ++level) {
            std::string blk = level == 5 ? "B" : "E" + std::to_string(level);
            int c = cfg.level_channels(level);
            if (level > 1) {
                // patch merging from the previous level
                int cp = cfg.level_channels(level - 1);
                norm("down" + std::to_string(level) + ".ln", 4 * cp);
                lin("down" + std::to_string(level) + ".red", c, 4 * cp);
            }
            attn_layer(blk + ".l1", c);
            attn_layer(blk + ".l2", c);
        }
        for (int k = 4; k >= 1; --k) {
            std::string blk = "D" + std::to_string(k);
            int c = cfg.level_channels(k);
            int cp = cfg.level_channels(k + 1);
            lin("up" + std::to_string(k) + ".exp", 2 * cp, cp);  // patch expanding
            conv("up" + std::to_string(k) + ".red", c, 2 * c, 1);
            attn_layer(blk + ".l1", c);
            attn_layer(blk + ".l2", c);
        }
    }
    conv("outproj", cfg.num_classes, base, 1);
    return m;
}

namespace detail {

// (B, C, H, W) -> (B * num_windows, ws*ws, C)
inline ad::Var img_to_windows(const ad::Var& x, int ws) {
    const auto& s = x->value.shape();
    int B = s[0], C = s[1], H = s[2], W = s[3];
    ad::Var t = ad::permute(x, {0, 2, 3, 1});                       // (B,H,W,C)
    t = ad::reshape(t, {B, H / ws, ws, W / ws, ws, C});
    t = ad::permute(t, {0, 1, 3, 2, 4, 5});                         // (B,nh,nw,ws,ws,C)
    return ad::reshape(t, {B * (H / ws) * (W / ws), ws * ws, C});
}

inline ad::Var windows_to_img(const ad::Var& x, int B, int C, int H, int W, int ws) {
    ad::Var t = ad::reshape(x, {B, H / ws, W / ws, ws, ws, C});
    t = ad::permute(t, {0, 1, 3, 2, 4, 5});                         // (B,nh,ws,nw,ws,C)
    t = ad::reshape(t, {B, H, W, C});
    return ad::permute(t, {0, 3, 1, 2});
}

}  // namespace detail

inline ForwardResult UNetModel::forward(const Tensor& images) const {
    const UNetConfig& cfg = config;
    if (images.ndim() != 4 || images.dim(1) != cfg.in_channels ||
        images.dim(2) != cfg.input_h || images.dim(3) != cfg.input_w)
        throw ShapeError("forward: expected input (B," + std::to_string(cfg.in_channels) +
                         "," + std::to_string(cfg.input_h) + "," +
                         std::to_string(cfg.input_w) + "), got " +
                         Tensor::shape_str(images.shape()));

    auto P = [&](const std::string& n) { return params_.at(n); };
    std::vector<FeatureTap> taps;
    ad::Var x = ad::leaf(images, false);

    if (cfg.backbone == Backbone::CNN) {
        auto cnn_layer = [&](const ad::Var& in, const std::string& name, int groups) {
            ad::Var y = ad::conv2d(in, P(name + ".conv.w"), P(name + ".conv.b"), 1);
            y = ad::group_norm(y, P(name + ".gn.gamma"), P(name + ".gn.beta"), groups);
            return ad::relu(y);
        };
        x = ad::conv2d(x, P("inproj.w"), P("inproj.b"), 1);
        std::vector<ad::Var> skips(5);  // E_k layer-2 outputs
        for (int level = 1; level <= 5; ++level) {
            std::string blk = level == 5 ? "B" : "E" + std::to_string(level);
            if (level > 1) x = ad::avg_pool2d(x, 2, 2);
            x = cnn_layer(x, blk + ".l1", 2);
            taps.push_back({level == 5 ? TapAddress::bottleneck(1)
                                       : TapAddress::encoder(level, 1), x});
            x = cnn_layer(x, blk + ".l2", 2);
            taps.push_back({level == 5 ? TapAddress::bottleneck(2)
                                       : TapAddress::encoder(level, 2), x});
            if (level < 5) skips[std::size_t(level)] = x;
        }
        for (int k = 4; k >= 1; --k) {
            std::string blk = "D" + std::to_string(k);
            x = ad::upsample_nearest2x(x);
            x = ad::conv2d(x, P("up" + std::to_string(k) + ".conv.w"),
                           P("up" + std::to_string(k) + ".conv.b"), 1);
            x = ad::concat_channels({x, skips[std::size_t(k)]});
            x = cnn_layer(x, blk + ".l1", 2);
            taps.push_back({TapAddress::decoder(k, 1), x});
            x = cnn_layer(x, blk + ".l2", 2);
            taps.push_back({TapAddress::decoder(k, 2), x});
        }
    } else {
        const int ws = cfg.window_size;
        const int heads = 2;
        auto attn_layer = [&](const ad::Var& img, const std::string& name) {
            const auto& s = img->value.shape();
            int B = s[0], C = s[1], H = s[2], W = s[3];
            int dh = C / heads;
            ad::Var tok = detail::img_to_windows(img, ws);  // (N, T, C)
            int N = tok->value.dim(0), T = tok->value.dim(1);
            ad::Var h = ad::layer_norm(tok, P(name + ".ln1.gamma"), P(name + ".ln1.beta"));
            ad::Var qkv = ad::linear(h, P(name + ".qkv.w"), P(name + ".qkv.b"));
            auto split_heads = [&](int start) {
                ad::Var q = ad::slice_lastdim(qkv, start, C);
                q = ad::reshape(q, {N, T, heads, dh});
                q = ad::permute(q, {0, 2, 1, 3});
                return ad::reshape(q, {N * heads, T, dh});
            };
            ad::Var q = split_heads(0), k = split_heads(C), v = split_heads(2 * C);
            ad::Var attn = ad::matmul(ad::mul_scalar(q, 1.0 / std::sqrt(double(dh))),
                                      ad::permute(k, {0, 2, 1}));
            attn = ad::softmax_lastdim(attn);
            ad::Var o = ad::matmul(attn, v);  // (N*heads, T, dh)
            o = ad::reshape(o, {N, heads, T, dh});
            o = ad::permute(o, {0, 2, 1, 3});
            o = ad::reshape(o, {N, T, C});
            o = ad::linear(o, P(name + ".proj.w"), P(name + ".proj.b"));
            tok = ad::add(tok, o);
            ad::Var h2 = ad::layer_norm(tok, P(name + ".ln2.gamma"), P(name + ".ln2.beta"));
            h2 = ad::linear(h2, P(name + ".mlp1.w"), P(name + ".mlp1.b"));
            h2 = ad::gelu(h2);
            h2 = ad::linear(h2, P(name + ".mlp2.w"), P(name + ".mlp2.b"));
            tok = ad::add(tok, h2);
            return detail::windows_to_img(tok, B, C, H, W, ws);
        };
        x = ad::conv2d(x, P("inproj.w"), P("inproj.b"), 1);
        std::vector<ad::Var> skips(5);
        for (int level = 1; level <= 5; ++level) {
            std::string blk = level == 5 ? "B" : "E" + std::to_string(level);
            if (level > 1) {
                x = ad::space_to_depth2(x);  // (B, 4*cp, H/2, W/2)
                const auto& s = x->value.shape();
                ad::Var t = ad::permute(x, {0, 2, 3, 1});
                t = ad::layer_norm(t, P("down" + std::to_string(level) + ".ln.gamma"),
                                   P("down" + std::to_string(level) + ".ln.beta"));
                t = ad::linear(t, P("down" + std::to_string(level) + ".red.w"),
                               P("down" + std::to_string(level) + ".red.b"));
                x = ad::permute(t, {0, 3, 1, 2});
                (void)s;
            }
            x = attn_layer(x, blk + ".l1");
            taps.push_back({level == 5 ? TapAddress::bottleneck(1)
                                       : TapAddress::encoder(level, 1), x});
            x = attn_layer(x, blk + ".l2");
            taps.push_back({level == 5 ? TapAddress::bottleneck(2)
                                       : TapAddress::encoder(level, 2), x});
            if (level < 5) skips[std::size_t(level)] = x;
        }
        for (int k = 4; k >= 1; --k) {
            std::string blk = "D" + std::to_string(k);
            // patch expanding: widen channels then redistribute to 2x resolution
            ad::Var t = ad::permute(x, {0, 2, 3, 1});
            t = ad::linear(t, P("up" + std::to_string(k) + ".exp.w"),
                           P("up" + std::to_string(k) + ".exp.b"));
            x = ad::permute(t, {0, 3, 1, 2});
            x = ad::depth_to_space2(x);
            x = ad::concat_channels({x, skips[std::size_t(k)]});
            x = ad::conv2d(x, P("up" + std::to_string(k) + ".red.w"),
                           P("up" + std::to_string(k) + ".red.b"), 0);
            x = attn_layer(x, blk + ".l1");
            taps.push_back({TapAddress::decoder(k, 1), x});
            x = attn_layer(x, blk + ".l2");
            taps.push_back({TapAddress::decoder(k, 2), x});
        }
    }
    ad::Var logits = ad::conv2d(x, P("outproj.w"), P("outproj.b"), 0);
    return {logits, std::move(taps)};
}

// ---------------------------------------------------------------------------
// checkpoint I/O ("selfreg-ckpt/1": config JSON + named raw parameter arrays)
// ---------------------------------------------------------------------------

inline void save_checkpoint(const UNetModel& model, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IOError("cannot open checkpoint for writing: " + path);
    const std::string magic = "selfreg-ckpt/1\n";
    f.write(magic.data(), std::streamsize(magic.size()));
    nlohmann::ordered_json j;
    to_json(j, model.config);
    std::string cfg = j.dump();
    std::uint64_t len = cfg.size();
    f.write(reinterpret_cast<const char*>(&len), sizeof(len));
    f.write(cfg.data(), std::streamsize(cfg.size()));
    std::uint64_t n = model.names_.size();
    f.write(reinterpret_cast<const char*>(&n), sizeof(n));
    for (const auto& name : model.names_) {
        const Tensor& t = model.params_.at(name)->value;
        std::uint32_t nl = std::uint32_t(name.size());
        f.write(reinterpret_cast<const char*>(&nl), sizeof(nl));
        f.write(name.data(), nl);
        std::uint32_t nd = std::uint32_t(t.ndim());
        f.write(reinterpret_cast<const char*>(&nd), sizeof(nd));
        for (int d : t.shape()) {
            std::int32_t dd = d;
            f.write(reinterpret_cast<const char*>(&dd), sizeof(dd));
        }
        f.write(reinterpret_cast<const char*>(t.data()),
                std::streamsize(t.numel() * sizeof(double)));
    }
    if (!f) throw IOError("write failed: " + path);
}

inline UNetModel load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IOError("cannot open checkpoint: " + path);
    std::string magic(15, '\0');
    f.read(magic.data(), 15);
    if (!f || magic != "selfreg-ckpt/1\n")
        throw IOError("checkpoint format tag mismatch (expected selfreg-ckpt/1): " + path);
    std::uint64_t len = 0;
    f.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string cfg_text(len, '\0');
    f.read(cfg_text.data(), std::streamsize(len));
    if (!f) throw IOError("truncated checkpoint: " + path);
    UNetConfig cfg;
    try {
        from_json(nlohmann::ordered_json::parse(cfg_text), cfg);
    } catch (const nlohmann::json::exception& e) {
        throw IOError("corrupt checkpoint config: " + std::string(e.what()));
    }
    UNetModel model = build_unet(cfg);
    std::uint64_t n = 0;
    f.read(reinterpret_cast<char*>(&n), sizeof(n));
    for (std::uint64_t i = 0; i < n; ++i) {
        std::uint32_t nl = 0;
        f.read(reinterpret_cast<char*>(&nl), sizeof(nl));
        std::string name(nl, '\0');
        f.read(name.data(), nl);
        std::uint32_t nd = 0;
        f.read(reinterpret_cast<char*>(&nd), sizeof(nd));
        std::vector<int> shape(nd);
        for (auto& d : shape) {
            std::int32_t dd = 0;
            f.read(reinterpret_cast<char*>(&dd), sizeof(dd));
            d = dd;
        }
        auto it = model.params_.find(name);
        if (it == model.params_.end())
            throw IOError("checkpoint names unknown parameter: " + name);
        Tensor& t = it->second->value;
        if (t.shape() != shape)
            throw IOError("checkpoint shape mismatch for " + name);
        f.read(reinterpret_cast<char*>(t.data()),
               std::streamsize(t.numel() * sizeof(double)));
        if (!f) throw IOError("truncated checkpoint: " + path);
    }
    return model;
}

}  // namespace selfreg

#endif
