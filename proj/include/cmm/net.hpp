#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cmm/common.hpp"
#include "cmm/rng.hpp"
#include "cmm/tensor.hpp"

namespace cmm::net {

// ============================================================================
// Model description
// ============================================================================
//
// A LayeredModel is an ordered stack of blocks over a token stream:
//
//   input (B*S, input_width)
//     -> optional embedding (dense + learned positional row per token)
//     -> block_1 ... block_L
//     -> mean-pool over the S tokens of each sample at every block output
//     -> scalar heads, each reading the pooled feature of one block ("tap")
//
// S == 1 degenerates to a plain MLP over row vectors, which is how student
// and baseline networks are expressed. Parameters live in one flat vector of
// tensors; named modules group parameter indices so they can be enumerated,
// perturbed, checkpointed and restored as units.

enum class Act : uint8_t { none = 0, tanh_act = 1 };

enum class BlockKind : uint8_t {
    dense = 0,        // y = act(x W + b), may change width
    transformer = 1,  // self-attention + residual + LN + FF(tanh) + residual + LN
    slice_dense = 2,  // dense applied to a column slice, other columns pass through
};

struct BlockDesc {
    BlockKind kind = BlockKind::dense;
    Act act = Act::none;  // dense / slice_dense only
    int in_dim = 0;       // input width (slice width for slice_dense)
    int out_dim = 0;      // output width (== in_dim for slice_dense)
    int hidden = 0;       // FF hidden width (transformer only)
    int col_begin = 0;    // slice_dense only
    std::vector<int> params;
};

struct HeadDesc {
    std::string name;
    int tap = 0;  // block index 1..L whose pooled output feeds this head
    int w = -1;   // (F_tap, 1)
    int b = -1;   // (1, 1)
};

struct ModuleDesc {
    std::string name;
    std::vector<int> params;
};

struct LayeredModel {
    int input_width = 0;
    int feature_dim = 0;  // output width of the last block
    int seq_len = 1;
    int layer_count = 0;

    bool has_embedding = false;
    int emb_w = -1, emb_b = -1, emb_pos = -1;  // emb_pos == -1 when seq_len == 1

    std::vector<BlockDesc> blocks;
    std::vector<HeadDesc> heads;
    std::vector<Tensor2> params;
    std::vector<ModuleDesc> modules;

    int block_out_dim(int layer) const { return blocks[static_cast<size_t>(layer) - 1].out_dim; }

    size_t param_count() const {
        size_t n = 0;
        for (const auto& p : params) n += p.size();
        return n;
    }

    int module_index(const std::string& name) const {
        for (size_t i = 0; i < modules.size(); ++i)
            if (modules[i].name == name) return static_cast<int>(i);
        throw config_error("unknown module '" + name + "'");
    }

    size_t module_param_count(int m) const {
        size_t n = 0;
        for (int pi : modules[static_cast<size_t>(m)].params) n += params[static_cast<size_t>(pi)].size();
        return n;
    }

    std::vector<double> get_module_params(int m) const {
        std::vector<double> flat;
        flat.reserve(module_param_count(m));
        for (int pi : modules[static_cast<size_t>(m)].params)
            flat.insert(flat.end(), params[static_cast<size_t>(pi)].v.begin(),
                        params[static_cast<size_t>(pi)].v.end());
        return flat;
    }

    void set_module_params(int m, const std::vector<double>& flat) {
        if (flat.size() != module_param_count(m))
            throw config_error("set_module_params: size mismatch for module '" +
                               modules[static_cast<size_t>(m)].name + "'");
        size_t off = 0;
        for (int pi : modules[static_cast<size_t>(m)].params) {
            auto& p = params[static_cast<size_t>(pi)];
            std::copy(flat.begin() + static_cast<long>(off),
                      flat.begin() + static_cast<long>(off + p.size()), p.v.begin());
            off += p.size();
        }
    }
};

inline uint64_t model_hash(const LayeredModel& m) {
    uint64_t h = kFnvOffset;
    h = fnv1a64(&m.input_width, sizeof(int), h);
    h = fnv1a64(&m.seq_len, sizeof(int), h);
    h = fnv1a64(&m.layer_count, sizeof(int), h);
    for (const auto& p : m.params) h = tensor_hash(p, h);
    return h;
}

// ============================================================================
// Builder
// ============================================================================

class ModelBuilder {
public:
    ModelBuilder(int input_width, int seq_len, uint64_t seed) : rng_(seed) {
        if (input_width <= 0 || seq_len <= 0)
            throw config_error("ModelBuilder: input_width and seq_len must be positive");
        m_.input_width = input_width;
        m_.seq_len = seq_len;
        width_ = input_width;
    }

    void set_embedding(int feature_dim, bool positional) {
        if (!m_.blocks.empty() || m_.has_embedding)
            throw usage_error("set_embedding must come first and only once");
        m_.has_embedding = true;
        m_.emb_w = add_param(Tensor2::uniform(width_, feature_dim, -bound(width_), bound(width_), rng_));
        m_.emb_b = add_param(Tensor2::zeros(1, feature_dim));
        ModuleDesc mod{"embedding", {m_.emb_w, m_.emb_b}};
        if (positional && m_.seq_len > 1) {
            m_.emb_pos = add_param(Tensor2::uniform(m_.seq_len, feature_dim, -0.02, 0.02, rng_));
            mod.params.push_back(m_.emb_pos);
        }
        m_.modules.push_back(std::move(mod));
        width_ = feature_dim;
    }

    int add_dense_block(int out_dim, Act act, const std::string& name = "") {
        BlockDesc b;
        b.kind = BlockKind::dense;
        b.act = act;
        b.in_dim = width_;
        b.out_dim = out_dim;
        b.params = {add_param(Tensor2::uniform(width_, out_dim, -bound(width_), bound(width_), rng_)),
                    add_param(Tensor2::zeros(1, out_dim))};
        width_ = out_dim;
        return push_block(std::move(b), name);
    }

    // Dense over columns [col_begin, col_begin + dim); all other columns pass
    // through untouched. The block's parameters influence only that slice.
    int add_slice_dense_block(int col_begin, int dim, Act act, const std::string& name = "") {
        if (col_begin < 0 || dim <= 0 || col_begin + dim > width_)
            throw config_error("add_slice_dense_block: slice out of range");
        BlockDesc b;
        b.kind = BlockKind::slice_dense;
        b.act = act;
        b.in_dim = dim;
        b.out_dim = width_;
        b.col_begin = col_begin;
        b.params = {add_param(Tensor2::uniform(dim, dim, -bound(dim), bound(dim), rng_)),
                    add_param(Tensor2::zeros(1, dim))};
        return push_block(std::move(b), name);
    }

    int add_transformer_block(int ff_hidden, const std::string& name = "") {
        const int f = width_;
        BlockDesc b;
        b.kind = BlockKind::transformer;
        b.in_dim = f;
        b.out_dim = f;
        b.hidden = ff_hidden;
        auto w = [&](int in, int out) {
            return add_param(Tensor2::uniform(in, out, -bound(in), bound(in), rng_));
        };
        // wq wk wv wo ln1g ln1b w1 b1 w2 b2 ln2g ln2b
        b.params = {w(f, f),
                    w(f, f),
                    w(f, f),
                    w(f, f),
                    add_param(Tensor2::filled(1, f, 1.0)),
                    add_param(Tensor2::zeros(1, f)),
                    w(f, ff_hidden),
                    add_param(Tensor2::zeros(1, ff_hidden)),
                    w(ff_hidden, f),
                    add_param(Tensor2::zeros(1, f)),
                    add_param(Tensor2::filled(1, f, 1.0)),
                    add_param(Tensor2::zeros(1, f))};
        return push_block(std::move(b), name);
    }

    void add_head(const std::string& name, int tap) {
        HeadDesc h;
        h.name = name;
        h.tap = tap;
        pending_heads_.push_back(std::move(h));
    }

    LayeredModel finalize() {
        if (m_.blocks.empty()) throw config_error("model has no blocks");
        m_.layer_count = static_cast<int>(m_.blocks.size());
        m_.feature_dim = width_;
        for (auto& h : pending_heads_) {
            if (h.tap < 1 || h.tap > m_.layer_count)
                throw config_error("head '" + h.name + "': tap " + std::to_string(h.tap) +
                                   " outside [1, " + std::to_string(m_.layer_count) + "]");
            const int f = m_.block_out_dim(h.tap);
            h.w = add_param(Tensor2::uniform(f, 1, -bound(f), bound(f), rng_));
            h.b = add_param(Tensor2::zeros(1, 1));
            m_.modules.push_back({"head_" + h.name, {h.w, h.b}});
            m_.heads.push_back(h);
        }
        return std::move(m_);
    }

private:
    static double bound(int fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

    int add_param(Tensor2 t) {
        m_.params.push_back(std::move(t));
        return static_cast<int>(m_.params.size()) - 1;
    }

    int push_block(BlockDesc b, const std::string& name) {
        m_.blocks.push_back(b);
        const int idx = static_cast<int>(m_.blocks.size());
        m_.modules.push_back({name.empty() ? "block_" + std::to_string(idx) : name,
                              m_.blocks.back().params});
        return idx;
    }

    LayeredModel m_;
    Rng rng_;
    int width_ = 0;
    std::vector<HeadDesc> pending_heads_;
};

inline LayeredModel make_mlp(int input_width, const std::vector<int>& hidden_widths,
                             const std::vector<std::pair<std::string, int>>& heads, uint64_t seed,
                             Act act = Act::tanh_act) {
    ModelBuilder b(input_width, 1, seed);
    int i = 0;
    for (int w : hidden_widths) b.add_dense_block(w, act, "layer_" + std::to_string(++i));
    for (const auto& [name, tap] : heads) b.add_head(name, tap);
    return b.finalize();
}

// ============================================================================
// Forward / backward
// ============================================================================

namespace detail {

inline void dense_rows(const Tensor2& x, const Tensor2& w, const Tensor2& bias, Act act,
                       Tensor2& y) {
    matmul(x, w, y);
    for (int r = 0; r < y.rows; ++r) {
        double* yr = y.row(r);
        for (int c = 0; c < y.cols; ++c) {
            yr[c] += bias.v[static_cast<size_t>(c)];
            if (act == Act::tanh_act) yr[c] = std::tanh(yr[c]);
        }
    }
}

constexpr double kLnEps = 1e-5;

// y = gamma * (x - mu) / sqrt(var + eps) + beta, rowwise. Caches xhat and
// 1/sigma for the backward pass.
inline void layernorm_rows(const Tensor2& x, const Tensor2& gamma, const Tensor2& beta, Tensor2& y,
                           Tensor2& xhat, Tensor2& inv_sigma) {
    const int n = x.cols;
    y = Tensor2(x.rows, n);
    xhat = Tensor2(x.rows, n);
    inv_sigma = Tensor2(x.rows, 1);
    for (int r = 0; r < x.rows; ++r) {
        const double* xr = x.row(r);
        double mu = 0.0;
        for (int c = 0; c < n; ++c) mu += xr[c];
        mu /= n;
        double var = 0.0;
        for (int c = 0; c < n; ++c) {
            const double d = xr[c] - mu;
            var += d * d;
        }
        var /= n;
        const double inv = 1.0 / std::sqrt(var + kLnEps);
        inv_sigma.v[static_cast<size_t>(r)] = inv;
        double* xh = xhat.row(r);
        double* yr = y.row(r);
        for (int c = 0; c < n; ++c) {
            xh[c] = (xr[c] - mu) * inv;
            yr[c] = gamma.v[static_cast<size_t>(c)] * xh[c] + beta.v[static_cast<size_t>(c)];
        }
    }
}

inline void layernorm_backward(const Tensor2& dy, const Tensor2& gamma, const Tensor2& xhat,
                               const Tensor2& inv_sigma, Tensor2& dx, Tensor2& dgamma,
                               Tensor2& dbeta) {
    const int n = dy.cols;
    dx = Tensor2(dy.rows, n);
    for (int r = 0; r < dy.rows; ++r) {
        const double* dyr = dy.row(r);
        const double* xh = xhat.row(r);
        double m1 = 0.0, m2 = 0.0;
        for (int c = 0; c < n; ++c) {
            const double dxh = dyr[c] * gamma.v[static_cast<size_t>(c)];
            m1 += dxh;
            m2 += dxh * xh[c];
        }
        m1 /= n;
        m2 /= n;
        const double inv = inv_sigma.v[static_cast<size_t>(r)];
        double* dxr = dx.row(r);
        for (int c = 0; c < n; ++c) {
            const double dxh = dyr[c] * gamma.v[static_cast<size_t>(c)];
            dxr[c] = inv * (dxh - m1 - xh[c] * m2);
            dgamma.v[static_cast<size_t>(c)] += dyr[c] * xh[c];
            dbeta.v[static_cast<size_t>(c)] += dyr[c];
        }
    }
}

}  // namespace detail

struct BlockTape {
    Tensor2 x;  // block input
    // dense / slice_dense
    Tensor2 y;  // activated output (slice only, for slice_dense)
    // transformer
    Tensor2 q, k, v, attn /* (R,S) rows grouped by sample */, o, u;
    Tensor2 ln1_xhat, ln1_inv, h1, t /* tanh(h1 w1 + b1) */, u2;
    Tensor2 ln2_xhat, ln2_inv;
};

struct GradientTape {
    bool consumed = false;
    int batch = 0;
    Tensor2 input;
    Tensor2 embedded;
    std::vector<BlockTape> blocks;
    std::vector<Tensor2> out;     // per-block per-token output, index 0..L-1
    std::vector<Tensor2> pooled;  // per-block pooled output (B, F), index 0..L-1
};

struct ForwardResult {
    Tensor2 head_outputs;             // (B, n_heads), column order == model.heads order
    std::map<int, Tensor2> features;  // captured per-token features, key = layer 1..L
    std::map<int, Tensor2> pooled;    // captured pooled features
};

using Grads = std::vector<Tensor2>;

inline Grads zero_grads(const LayeredModel& m) {
    Grads g;
    g.reserve(m.params.size());
    for (const auto& p : m.params) g.emplace_back(p.rows, p.cols);
    return g;
}

// Forward over a batch. `input` has B*seq_len rows; each consecutive seq_len
// rows form one sample. `capture` lists block indices whose features are
// returned. When `tape` is given it records everything backward() needs.
inline ForwardResult forward(const LayeredModel& m, const Tensor2& input,
                             const std::vector<int>& capture = {}, GradientTape* tape = nullptr) {
    if (input.cols != m.input_width)
        throw config_error("forward: input width " + std::to_string(input.cols) + " != model " +
                           std::to_string(m.input_width));
    if (input.rows <= 0 || input.rows % m.seq_len != 0)
        throw config_error("forward: row count not a multiple of seq_len");
    const int S = m.seq_len;
    const int B = input.rows / S;

    GradientTape local;
    GradientTape& tp = tape ? *tape : local;
    tp.consumed = false;
    tp.batch = B;
    tp.blocks.assign(m.blocks.size(), {});
    tp.out.assign(m.blocks.size(), {});
    tp.pooled.assign(m.blocks.size(), {});
    tp.input = input;

    Tensor2 h;
    if (m.has_embedding) {
        detail::dense_rows(input, m.params[static_cast<size_t>(m.emb_w)],
                           m.params[static_cast<size_t>(m.emb_b)], Act::none, h);
        if (m.emb_pos >= 0) {
            const Tensor2& pos = m.params[static_cast<size_t>(m.emb_pos)];
            for (int r = 0; r < h.rows; ++r) {
                const double* pr = pos.row(r % S);
                double* hr = h.row(r);
                for (int c = 0; c < h.cols; ++c) hr[c] += pr[c];
            }
        }
        tp.embedded = h;
    } else {
        h = input;
    }

    for (size_t bi = 0; bi < m.blocks.size(); ++bi) {
        const BlockDesc& bd = m.blocks[bi];
        BlockTape& bt = tp.blocks[bi];
        bt.x = h;
        switch (bd.kind) {
            case BlockKind::dense: {
                detail::dense_rows(h, m.params[static_cast<size_t>(bd.params[0])],
                                   m.params[static_cast<size_t>(bd.params[1])], bd.act, bt.y);
                h = bt.y;
                break;
            }
            case BlockKind::slice_dense: {
                Tensor2 xs(h.rows, bd.in_dim);
                for (int r = 0; r < h.rows; ++r)
                    std::memcpy(xs.row(r), h.row(r) + bd.col_begin,
                                sizeof(double) * static_cast<size_t>(bd.in_dim));
                detail::dense_rows(xs, m.params[static_cast<size_t>(bd.params[0])],
                                   m.params[static_cast<size_t>(bd.params[1])], bd.act, bt.y);
                for (int r = 0; r < h.rows; ++r)
                    std::memcpy(h.row(r) + bd.col_begin, bt.y.row(r),
                                sizeof(double) * static_cast<size_t>(bd.in_dim));
                break;
            }
            case BlockKind::transformer: {
                const int f = bd.out_dim;
                const double scale = 1.0 / std::sqrt(static_cast<double>(f));
                const Tensor2& wq = m.params[static_cast<size_t>(bd.params[0])];
                const Tensor2& wk = m.params[static_cast<size_t>(bd.params[1])];
                const Tensor2& wv = m.params[static_cast<size_t>(bd.params[2])];
                const Tensor2& wo = m.params[static_cast<size_t>(bd.params[3])];
                matmul(h, wq, bt.q);
                matmul(h, wk, bt.k);
                matmul(h, wv, bt.v);
                bt.attn = Tensor2(h.rows, S);
                Tensor2 av(h.rows, f);
                for (int g = 0; g < B; ++g) {
                    const int r0 = g * S;
                    for (int i = 0; i < S; ++i) {
                        double* arow = bt.attn.row(r0 + i);
                        const double* qi = bt.q.row(r0 + i);
                        double mx = -1e300;
                        for (int j = 0; j < S; ++j) {
                            double acc = 0.0;
                            const double* kj = bt.k.row(r0 + j);
                            for (int c = 0; c < f; ++c) acc += qi[c] * kj[c];
                            arow[j] = acc * scale;
                            mx = std::max(mx, arow[j]);
                        }
                        double z = 0.0;
                        for (int j = 0; j < S; ++j) {
                            arow[j] = std::exp(arow[j] - mx);
                            z += arow[j];
                        }
                        double* avi = av.row(r0 + i);
                        for (int c = 0; c < f; ++c) avi[c] = 0.0;
                        for (int j = 0; j < S; ++j) {
                            arow[j] /= z;
                            const double* vj = bt.v.row(r0 + j);
                            for (int c = 0; c < f; ++c) avi[c] += arow[j] * vj[c];
                        }
                    }
                }
                bt.o = std::move(av);
                Tensor2 y;
                matmul(bt.o, wo, y);
                bt.u = bt.x;
                add_inplace(bt.u, y);
                detail::layernorm_rows(bt.u, m.params[static_cast<size_t>(bd.params[4])],
                                       m.params[static_cast<size_t>(bd.params[5])], bt.h1,
                                       bt.ln1_xhat, bt.ln1_inv);
                detail::dense_rows(bt.h1, m.params[static_cast<size_t>(bd.params[6])],
                                   m.params[static_cast<size_t>(bd.params[7])], Act::tanh_act,
                                   bt.t);
                Tensor2 z2;
                detail::dense_rows(bt.t, m.params[static_cast<size_t>(bd.params[8])],
                                   m.params[static_cast<size_t>(bd.params[9])], Act::none, z2);
                bt.u2 = bt.h1;
                add_inplace(bt.u2, z2);
                detail::layernorm_rows(bt.u2, m.params[static_cast<size_t>(bd.params[10])],
                                       m.params[static_cast<size_t>(bd.params[11])], h,
                                       bt.ln2_xhat, bt.ln2_inv);
                break;
            }
        }
        tp.out[bi] = h;
        // mean-pool the S tokens of each sample
        Tensor2 pooled(B, h.cols);
        for (int g = 0; g < B; ++g) {
            double* pr = pooled.row(g);
            for (int i = 0; i < S; ++i) {
                const double* hr = h.row(g * S + i);
                for (int c = 0; c < h.cols; ++c) pr[c] += hr[c];
            }
            for (int c = 0; c < h.cols; ++c) pr[c] /= S;
        }
        tp.pooled[bi] = std::move(pooled);
    }

    ForwardResult res;
    res.head_outputs = Tensor2(B, static_cast<int>(m.heads.size()));
    for (size_t hi = 0; hi < m.heads.size(); ++hi) {
        const HeadDesc& hd = m.heads[hi];
        const Tensor2& pooled = tp.pooled[static_cast<size_t>(hd.tap) - 1];
        const Tensor2& w = m.params[static_cast<size_t>(hd.w)];
        const double bias = m.params[static_cast<size_t>(hd.b)].v[0];
        for (int g = 0; g < B; ++g) {
            double acc = bias;
            const double* pr = pooled.row(g);
            for (int c = 0; c < pooled.cols; ++c) acc += pr[c] * w.v[static_cast<size_t>(c)];
            res.head_outputs.at(g, static_cast<int>(hi)) = acc;
        }
    }
    for (int layer : capture) {
        if (layer < 1 || layer > m.layer_count)
            throw config_error("capture layer " + std::to_string(layer) + " out of range");
        res.features[layer] = tp.out[static_cast<size_t>(layer) - 1];
        res.pooled[layer] = tp.pooled[static_cast<size_t>(layer) - 1];
    }
    return res;
}

// Reverse pass. `d_heads` is (B, n_heads): dLoss/d(head output). External
// gradients on pooled block features (feature-distillation losses) enter via
// `d_pooled`, keyed by block index. Consumes the tape.
inline Grads backward(const LayeredModel& m, GradientTape& tape, const Tensor2& d_heads,
                      const std::map<int, Tensor2>& d_pooled = {}) {
    if (tape.consumed) throw usage_error("backward: gradient tape already consumed");
    tape.consumed = true;
    const int S = m.seq_len;
    const int B = tape.batch;
    check_shape(d_heads, B, static_cast<int>(m.heads.size()), "backward d_heads");

    Grads grads = zero_grads(m);
    const int L = m.layer_count;
    Tensor2 dout(B * S, m.feature_dim);  // d wrt current block's per-token output

    for (int layer = L; layer >= 1; --layer) {
        const BlockDesc& bd = m.blocks[static_cast<size_t>(layer) - 1];
        BlockTape& bt = tape.blocks[static_cast<size_t>(layer) - 1];
        const Tensor2& pooled = tape.pooled[static_cast<size_t>(layer) - 1];

        // head + external pooled-feature gradients entering at this block
        Tensor2 dpool(B, bd.out_dim);
        bool any_pool = false;
        for (size_t hi = 0; hi < m.heads.size(); ++hi) {
            const HeadDesc& hd = m.heads[hi];
            if (hd.tap != layer) continue;
            any_pool = true;
            const Tensor2& w = m.params[static_cast<size_t>(hd.w)];
            Tensor2& gw = grads[static_cast<size_t>(hd.w)];
            Tensor2& gb = grads[static_cast<size_t>(hd.b)];
            for (int g = 0; g < B; ++g) {
                const double dh = d_heads.at(g, static_cast<int>(hi));
                if (dh == 0.0) continue;
                gb.v[0] += dh;
                const double* pr = pooled.row(g);
                double* dpr = dpool.row(g);
                for (int c = 0; c < bd.out_dim; ++c) {
                    gw.v[static_cast<size_t>(c)] += dh * pr[c];
                    dpr[c] += dh * w.v[static_cast<size_t>(c)];
                }
            }
        }
        if (auto it = d_pooled.find(layer); it != d_pooled.end()) {
            check_shape(it->second, B, bd.out_dim, "backward d_pooled");
            add_inplace(dpool, it->second);
            any_pool = true;
        }
        if (any_pool) {
            for (int r = 0; r < B * S; ++r) {
                const double* dpr = dpool.row(r / S);
                double* dr = dout.row(r);
                for (int c = 0; c < bd.out_dim; ++c) dr[c] += dpr[c] / S;
            }
        }

        // block backward: dout (R, out_dim) -> dx (R, in width of the block)
        switch (bd.kind) {
            case BlockKind::dense: {
                const Tensor2& w = m.params[static_cast<size_t>(bd.params[0])];
                Tensor2 dpre = dout;
                if (bd.act == Act::tanh_act)
                    for (size_t i = 0; i < dpre.v.size(); ++i) dpre.v[i] *= 1.0 - bt.y.v[i] * bt.y.v[i];
                Tensor2 gw;
                matmul_tn(bt.x, dpre, gw);
                add_inplace(grads[static_cast<size_t>(bd.params[0])], gw);
                Tensor2& gb = grads[static_cast<size_t>(bd.params[1])];
                for (int r = 0; r < dpre.rows; ++r)
                    for (int c = 0; c < dpre.cols; ++c) gb.v[static_cast<size_t>(c)] += dpre.at(r, c);
                matmul_nt(dpre, w, dout);
                break;
            }
            case BlockKind::slice_dense: {
                const Tensor2& w = m.params[static_cast<size_t>(bd.params[0])];
                const int d = bd.in_dim;
                Tensor2 dslice(dout.rows, d);
                for (int r = 0; r < dout.rows; ++r)
                    std::memcpy(dslice.row(r), dout.row(r) + bd.col_begin,
                                sizeof(double) * static_cast<size_t>(d));
                if (bd.act == Act::tanh_act)
                    for (size_t i = 0; i < dslice.v.size(); ++i)
                        dslice.v[i] *= 1.0 - bt.y.v[i] * bt.y.v[i];
                Tensor2 xs(bt.x.rows, d);
                for (int r = 0; r < bt.x.rows; ++r)
                    std::memcpy(xs.row(r), bt.x.row(r) + bd.col_begin,
                                sizeof(double) * static_cast<size_t>(d));
                Tensor2 gw;
                matmul_tn(xs, dslice, gw);
                add_inplace(grads[static_cast<size_t>(bd.params[0])], gw);
                Tensor2& gb = grads[static_cast<size_t>(bd.params[1])];
                for (int r = 0; r < dslice.rows; ++r)
                    for (int c = 0; c < d; ++c) gb.v[static_cast<size_t>(c)] += dslice.at(r, c);
                Tensor2 dxs;
                matmul_nt(dslice, w, dxs);
                for (int r = 0; r < dout.rows; ++r)
                    std::memcpy(dout.row(r) + bd.col_begin, dxs.row(r),
                                sizeof(double) * static_cast<size_t>(d));
                break;
            }
            case BlockKind::transformer: {
                const int f = bd.out_dim;
                const double scale = 1.0 / std::sqrt(static_cast<double>(f));
                const Tensor2& wq = m.params[static_cast<size_t>(bd.params[0])];
                const Tensor2& wk = m.params[static_cast<size_t>(bd.params[1])];
                const Tensor2& wv = m.params[static_cast<size_t>(bd.params[2])];
                const Tensor2& wo = m.params[static_cast<size_t>(bd.params[3])];
                const Tensor2& w1 = m.params[static_cast<size_t>(bd.params[6])];
                const Tensor2& w2 = m.params[static_cast<size_t>(bd.params[8])];

                Tensor2 du2, dg2, db2;
                dg2 = Tensor2(1, f);
                db2 = Tensor2(1, f);
                detail::layernorm_backward(dout, m.params[static_cast<size_t>(bd.params[10])],
                                           bt.ln2_xhat, bt.ln2_inv, du2, dg2, db2);
                add_inplace(grads[static_cast<size_t>(bd.params[10])], dg2);
                add_inplace(grads[static_cast<size_t>(bd.params[11])], db2);

                // u2 = h1 + t w2 + b2
                Tensor2 dh1 = du2;
                Tensor2 gw2;
                matmul_tn(bt.t, du2, gw2);
                add_inplace(grads[static_cast<size_t>(bd.params[8])], gw2);
                Tensor2& gb2 = grads[static_cast<size_t>(bd.params[9])];
                for (int r = 0; r < du2.rows; ++r)
                    for (int c = 0; c < f; ++c) gb2.v[static_cast<size_t>(c)] += du2.at(r, c);
                Tensor2 dt;
                matmul_nt(du2, w2, dt);
                for (size_t i = 0; i < dt.v.size(); ++i) dt.v[i] *= 1.0 - bt.t.v[i] * bt.t.v[i];
                Tensor2 gw1;
                matmul_tn(bt.h1, dt, gw1);
                add_inplace(grads[static_cast<size_t>(bd.params[6])], gw1);
                Tensor2& gb1 = grads[static_cast<size_t>(bd.params[7])];
                for (int r = 0; r < dt.rows; ++r)
                    for (int c = 0; c < dt.cols; ++c) gb1.v[static_cast<size_t>(c)] += dt.at(r, c);
                Tensor2 dh1_ff;
                matmul_nt(dt, w1, dh1_ff);
                add_inplace(dh1, dh1_ff);

                Tensor2 du, dg1, db1;
                dg1 = Tensor2(1, f);
                db1 = Tensor2(1, f);
                detail::layernorm_backward(dh1, m.params[static_cast<size_t>(bd.params[4])],
                                           bt.ln1_xhat, bt.ln1_inv, du, dg1, db1);
                add_inplace(grads[static_cast<size_t>(bd.params[4])], dg1);
                add_inplace(grads[static_cast<size_t>(bd.params[5])], db1);

                // u = x + (attn v) wo
                Tensor2 dx = du;
                Tensor2 gwo;
                matmul_tn(bt.o, du, gwo);
                add_inplace(grads[static_cast<size_t>(bd.params[3])], gwo);
                Tensor2 do_;
                matmul_nt(du, wo, do_);

                Tensor2 dq(dout.rows, f), dk(dout.rows, f), dv(dout.rows, f);
                for (int g = 0; g < B; ++g) {
                    const int r0 = g * S;
                    for (int i = 0; i < S; ++i) {
                        const double* doi = do_.row(r0 + i);
                        const double* arow = bt.attn.row(r0 + i);
                        // da_j = do_i . v_j ; softmax backward -> dp
                        std::array<double, 64> da{}, dp{};
                        if (S > 64) throw config_error("seq_len > 64 unsupported");
                        double dot_aa = 0.0;
                        for (int j = 0; j < S; ++j) {
                            const double* vj = bt.v.row(r0 + j);
                            double acc = 0.0;
                            for (int c = 0; c < f; ++c) acc += doi[c] * vj[c];
                            da[static_cast<size_t>(j)] = acc;
                            dot_aa += acc * arow[j];
                            double* dvj = dv.row(r0 + j);
                            for (int c = 0; c < f; ++c) dvj[c] += arow[j] * doi[c];
                        }
                        for (int j = 0; j < S; ++j)
                            dp[static_cast<size_t>(j)] = arow[j] * (da[static_cast<size_t>(j)] - dot_aa);
                        double* dqi = dq.row(r0 + i);
                        for (int j = 0; j < S; ++j) {
                            const double dpj = dp[static_cast<size_t>(j)] * scale;
                            const double* kj = bt.k.row(r0 + j);
                            const double* qi = bt.q.row(r0 + i);
                            double* dkj = dk.row(r0 + j);
                            for (int c = 0; c < f; ++c) {
                                dqi[c] += dpj * kj[c];
                                dkj[c] += dpj * qi[c];
                            }
                        }
                    }
                }
                Tensor2 g;
                matmul_tn(bt.x, dq, g);
                add_inplace(grads[static_cast<size_t>(bd.params[0])], g);
                matmul_tn(bt.x, dk, g);
                add_inplace(grads[static_cast<size_t>(bd.params[1])], g);
                matmul_tn(bt.x, dv, g);
                add_inplace(grads[static_cast<size_t>(bd.params[2])], g);
                Tensor2 tmp;
                matmul_nt(dq, wq, tmp);
                add_inplace(dx, tmp);
                matmul_nt(dk, wk, tmp);
                add_inplace(dx, tmp);
                matmul_nt(dv, wv, tmp);
                add_inplace(dx, tmp);
                dout = std::move(dx);
                break;
            }
        }
    }

    if (m.has_embedding) {
        if (m.emb_pos >= 0) {
            Tensor2& gpos = grads[static_cast<size_t>(m.emb_pos)];
            for (int r = 0; r < dout.rows; ++r) {
                double* gp = gpos.row(r % S);
                const double* dr = dout.row(r);
                for (int c = 0; c < dout.cols; ++c) gp[c] += dr[c];
            }
        }
        Tensor2 gw;
        matmul_tn(tape.input, dout, gw);
        add_inplace(grads[static_cast<size_t>(m.emb_w)], gw);
        Tensor2& gb = grads[static_cast<size_t>(m.emb_b)];
        for (int r = 0; r < dout.rows; ++r)
            for (int c = 0; c < dout.cols; ++c) gb.v[static_cast<size_t>(c)] += dout.at(r, c);
    }
    return grads;
}

inline void sgd_step(LayeredModel& m, const Grads& g, double lr) {
    if (g.size() != m.params.size()) throw config_error("sgd_step: gradient count mismatch");
    for (size_t i = 0; i < g.size(); ++i) {
        if (!m.params[i].same_shape(g[i])) throw config_error("sgd_step: gradient shape mismatch");
        for (size_t j = 0; j < g[i].v.size(); ++j) m.params[i].v[j] -= lr * g[i].v[j];
    }
}

// ============================================================================
// Compiled inference path
// ============================================================================
//
// Forward-only evaluator with contiguous weights and preallocated scratch;
// Real = float gives the 32-bit inference mode used by latency benchmarks.
// One instance is not thread-safe (owns its scratch).

template <typename Real>
class CompiledModel {
public:
    explicit CompiledModel(const LayeredModel& m) : s_(m.seq_len), inw_(m.input_width) {
        auto cvt = [](const Tensor2& t) {
            std::vector<Real> out(t.v.size());
            for (size_t i = 0; i < t.v.size(); ++i) out[i] = static_cast<Real>(t.v[i]);
            return out;
        };
        for (const auto& p : m.params) weights_.push_back(cvt(p));
        arch_ = m;  // keeps the descriptors; the double params are unused here
        arch_.params.clear();
        model_ = &arch_;
        int maxw = m.input_width;
        for (const auto& b : m.blocks) maxw = std::max({maxw, b.out_dim, b.hidden});
        buf_a_.assign(static_cast<size_t>(s_) * maxw, Real(0));
        buf_b_.assign(static_cast<size_t>(s_) * maxw, Real(0));
        buf_c_.assign(static_cast<size_t>(s_) * maxw, Real(0));
        attn_.assign(static_cast<size_t>(s_) * s_, Real(0));
        pool_.assign(static_cast<size_t>(m.blocks.size()) * static_cast<size_t>(maxw), Real(0));
    }

    int n_heads() const { return static_cast<int>(model_->heads.size()); }

    // input: seq_len * input_width values, row-major. heads_out: one scalar
    // per head in model order.
    void run(const Real* input, Real* heads_out) {
        const LayeredModel& m = *model_;
        const int S = s_;
        Real* h = buf_a_.data();
        int w = inw_;
        if (m.has_embedding) {
            const int f = static_cast<int>(weights_[static_cast<size_t>(m.emb_w)].size()) / inw_;
            dense(input, S, inw_, m.emb_w, m.emb_b, f, false, h);
            if (m.emb_pos >= 0) {
                const Real* pos = weights_[static_cast<size_t>(m.emb_pos)].data();
                for (int i = 0; i < S * f; ++i) h[i] += pos[i];
            }
            w = f;
        } else {
            std::copy(input, input + static_cast<size_t>(S) * inw_, h);
        }
        for (size_t bi = 0; bi < m.blocks.size(); ++bi) {
            const BlockDesc& bd = m.blocks[bi];
            switch (bd.kind) {
                case BlockKind::dense:
                    dense(h, S, w, bd.params[0], bd.params[1], bd.out_dim,
                          bd.act == Act::tanh_act, buf_b_.data());
                    std::swap(buf_a_, buf_b_);
                    h = buf_a_.data();
                    w = bd.out_dim;
                    break;
                case BlockKind::slice_dense: {
                    for (int r = 0; r < S; ++r)
                        for (int c = 0; c < bd.in_dim; ++c)
                            buf_c_[static_cast<size_t>(r) * bd.in_dim + c] =
                                h[static_cast<size_t>(r) * w + bd.col_begin + c];
                    dense(buf_c_.data(), S, bd.in_dim, bd.params[0], bd.params[1], bd.in_dim,
                          bd.act == Act::tanh_act, buf_b_.data());
                    for (int r = 0; r < S; ++r)
                        for (int c = 0; c < bd.in_dim; ++c)
                            h[static_cast<size_t>(r) * w + bd.col_begin + c] =
                                buf_b_[static_cast<size_t>(r) * bd.in_dim + c];
                    break;
                }
                case BlockKind::transformer:
                    transformer(h, S, w, bd);
                    break;
            }
            Real* pl = pool_.data() + bi * static_cast<size_t>(w);
            for (int c = 0; c < w; ++c) pl[c] = Real(0);
            for (int r = 0; r < S; ++r)
                for (int c = 0; c < w; ++c) pl[c] += h[static_cast<size_t>(r) * w + c];
            for (int c = 0; c < w; ++c) pl[c] /= Real(S);
        }
        for (size_t hi = 0; hi < m.heads.size(); ++hi) {
            const HeadDesc& hd = m.heads[hi];
            const int f = m.block_out_dim(hd.tap);
            const Real* pl = pool_.data() + (static_cast<size_t>(hd.tap) - 1) * f;
            const Real* hw = weights_[static_cast<size_t>(hd.w)].data();
            Real acc = weights_[static_cast<size_t>(hd.b)][0];
            for (int c = 0; c < f; ++c) acc += pl[c] * hw[c];
            heads_out[hi] = acc;
        }
    }

private:
    void dense(const Real* x, int rows, int in, int wi, int bi, int out, bool tanh_act, Real* y) {
        dense_raw(x, rows, in, weights_[static_cast<size_t>(wi)].data(),
                  bi >= 0 ? weights_[static_cast<size_t>(bi)].data() : nullptr, out, tanh_act, y);
    }

    static void dense_raw(const Real* x, int rows, int in, const Real* w, const Real* b, int out,
                          bool tanh_act, Real* y) {
        for (int r = 0; r < rows; ++r) {
            const Real* xr = x + static_cast<size_t>(r) * in;
            Real* yr = y + static_cast<size_t>(r) * out;
            for (int c = 0; c < out; ++c) yr[c] = b ? b[c] : Real(0);
            for (int k = 0; k < in; ++k) {
                const Real xv = xr[k];
                const Real* wk = w + static_cast<size_t>(k) * out;
                for (int c = 0; c < out; ++c) yr[c] += xv * wk[c];
            }
            if (tanh_act)
                for (int c = 0; c < out; ++c) yr[c] = std::tanh(yr[c]);
        }
    }

    void transformer(Real* h, int S, int f, const BlockDesc& bd) {
        const Real scale = Real(1) / std::sqrt(static_cast<Real>(f));
        Real* q = buf_b_.data();
        Real* k = buf_c_.data();
        scratch_v_.assign(static_cast<size_t>(S) * f, Real(0));
        Real* v = scratch_v_.data();
        dense(h, S, f, bd.params[0], -1, f, false, q);
        dense(h, S, f, bd.params[1], -1, f, false, k);
        dense(h, S, f, bd.params[2], -1, f, false, v);
        scratch_o_.assign(static_cast<size_t>(S) * f, Real(0));
        for (int i = 0; i < S; ++i) {
            Real* arow = attn_.data() + static_cast<size_t>(i) * S;
            Real mx = Real(-1e30);
            for (int j = 0; j < S; ++j) {
                Real acc = Real(0);
                for (int c = 0; c < f; ++c)
                    acc += q[static_cast<size_t>(i) * f + c] * k[static_cast<size_t>(j) * f + c];
                arow[j] = acc * scale;
                mx = std::max(mx, arow[j]);
            }
            Real z = Real(0);
            for (int j = 0; j < S; ++j) {
                arow[j] = std::exp(arow[j] - mx);
                z += arow[j];
            }
            Real* oi = scratch_o_.data() + static_cast<size_t>(i) * f;
            for (int j = 0; j < S; ++j) {
                arow[j] /= z;
                for (int c = 0; c < f; ++c) oi[c] += arow[j] * v[static_cast<size_t>(j) * f + c];
            }
        }
        // y = o wo ; u = h + y ; h1 = ln1(u) ; z = tanh(h1 w1 + b1) w2 + b2 ; h = ln2(h1 + z)
        dense(scratch_o_.data(), S, f, bd.params[3], -1, f, false, q);
        for (int i = 0; i < S * f; ++i) q[i] += h[i];
        layernorm(q, S, f, bd.params[4], bd.params[5], k);  // k = h1
        scratch_t_.assign(static_cast<size_t>(S) * bd.hidden, Real(0));
        dense(k, S, f, bd.params[6], bd.params[7], bd.hidden, true, scratch_t_.data());
        dense(scratch_t_.data(), S, bd.hidden, bd.params[8], bd.params[9], f, false, q);
        for (int i = 0; i < S * f; ++i) q[i] += k[i];
        layernorm(q, S, f, bd.params[10], bd.params[11], h);
    }

    void layernorm(const Real* x, int rows, int n, int gi, int bi, Real* y) {
        const Real* g = weights_[static_cast<size_t>(gi)].data();
        const Real* b = weights_[static_cast<size_t>(bi)].data();
        for (int r = 0; r < rows; ++r) {
            const Real* xr = x + static_cast<size_t>(r) * n;
            Real* yr = y + static_cast<size_t>(r) * n;
            Real mu = Real(0);
            for (int c = 0; c < n; ++c) mu += xr[c];
            mu /= Real(n);
            Real var = Real(0);
            for (int c = 0; c < n; ++c) var += (xr[c] - mu) * (xr[c] - mu);
            var /= Real(n);
            const Real inv = Real(1) / std::sqrt(var + Real(detail::kLnEps));
            for (int c = 0; c < n; ++c) yr[c] = g[c] * (xr[c] - mu) * inv + b[c];
        }
    }

    LayeredModel arch_;
    const LayeredModel* model_ = nullptr;
    std::vector<std::vector<Real>> weights_;
    std::vector<Real> buf_a_, buf_b_, buf_c_, attn_, pool_;
    std::vector<Real> scratch_v_, scratch_o_, scratch_t_;
    int s_ = 1;
    int inw_ = 0;
};

}  // namespace cmm::net
