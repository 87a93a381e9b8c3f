#pragma once

#include <map>
#include <memory>

#include "mapfusion/tape.hpp"

namespace mf {

// Named parameter registry with stable addresses. Ordered map keeps
// iteration (and thus optimizer update order and checkpoints) deterministic.
template <typename T>
class ParamStoreT {
public:
    ParamT<T>& create(const std::string& name, Shape shape) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
        auto p = std::make_unique<ParamT<T>>(name, TensorT<T>::zeros(std::move(shape)));
        ParamT<T>& ref = *p;
        index_.emplace(name, std::move(p));
        return ref;
    }

    ParamT<T>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no parameter: " + name);
        return *it->second;
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }
    size_t size() const { return index_.size(); }

    template <typename F>
    void for_each(F&& f) {
        for (auto& [name, p] : index_) f(*p);
    }
    template <typename F>
    void for_each(F&& f) const {
        for (const auto& [name, p] : index_) f(*p);
    }

    void zero_grads() {
        for_each([](ParamT<T>& p) { std::fill(p.grad.data.begin(), p.grad.data.end(), T(0)); });
    }

    void set_trainable_prefix(const std::string& prefix, bool trainable) {
        for_each([&](ParamT<T>& p) {
            if (p.name.rfind(prefix, 0) == 0) p.trainable = trainable;
        });
    }

    int64_t total_elements() const {
        int64_t n = 0;
        for_each([&](const ParamT<T>& p) { n += p.value.size(); });
        return n;
    }

private:
    std::map<std::string, std::unique_ptr<ParamT<T>>> index_;
};

using ParamStore = ParamStoreT<float>;

// fan-in scaled uniform init, zero bias
template <typename T>
void init_uniform_fanin(ParamT<T>& p, int fan_in, Rng& rng) {
    double s = std::sqrt(1.0 / std::max(1, fan_in));
    for (auto& v : p.value.data) v = static_cast<T>(rng.uniform(-s, s));
}

// Adam with bias correction. Moment buffers are keyed by parameter name and
// sized lazily on first update.
template <typename T>
class AdamT {
public:
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    explicit AdamT(double lr_ = 5e-5) : lr(lr_) {}

    void step(ParamStoreT<T>& store) {
        ++t_;
        double bc1 = 1.0 - std::pow(beta1, t_);
        double bc2 = 1.0 - std::pow(beta2, t_);
        store.for_each([&](ParamT<T>& p) {
            if (!p.trainable) return;
            auto& [m, v] = moments_[p.name];
            if (m.size() != p.value.size()) {
                m = TensorT<T>::zeros(p.value.shape);
                v = TensorT<T>::zeros(p.value.shape);
            }
            for (int64_t i = 0; i < p.value.size(); ++i) {
                double g = static_cast<double>(p.grad[i]);
                double mi = beta1 * m[i] + (1.0 - beta1) * g;
                double vi = beta2 * v[i] + (1.0 - beta2) * g * g;
                m[i] = static_cast<T>(mi);
                v[i] = static_cast<T>(vi);
                double mhat = mi / bc1;
                double vhat = vi / bc2;
                p.value[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps));
            }
        });
    }

    int64_t step_count() const { return t_; }

private:
    int64_t t_ = 0;
    std::map<std::string, std::pair<TensorT<T>, TensorT<T>>> moments_;
};

using Adam = AdamT<float>;

// ---- layers ----

template <typename T>
struct Conv2dT {
    ParamT<T>* w = nullptr;
    ParamT<T>* b = nullptr;
    int stride = 1, pad = 0;

    static Conv2dT create(ParamStoreT<T>& s, const std::string& name, int ci, int co, int k,
                          int stride, int pad, Rng& rng, bool zero_init = false) {
        Conv2dT l;
        l.w = &s.create(name + ".w", Shape{co, ci, k, k});
        l.b = &s.create(name + ".b", Shape{co});
        l.stride = stride;
        l.pad = pad;
        if (!zero_init) init_uniform_fanin(*l.w, ci * k * k, rng);
        return l;
    }

    static Conv2dT bind(ParamStoreT<T>& s, const std::string& name, int stride, int pad) {
        Conv2dT l;
        l.w = &s.get(name + ".w");
        l.b = &s.get(name + ".b");
        l.stride = stride;
        l.pad = pad;
        return l;
    }

    int forward(GraphT<T>& g, int x) const {
        return g.bias_channel(g.conv2d(x, g.param(*w), stride, pad), g.param(*b));
    }
};

template <typename T>
struct LinearT {
    ParamT<T>* w = nullptr;  // [in, out]
    ParamT<T>* b = nullptr;

    static LinearT create(ParamStoreT<T>& s, const std::string& name, int in, int out, Rng& rng,
                          bool zero_init = false) {
        LinearT l;
        l.w = &s.create(name + ".w", Shape{in, out});
        l.b = &s.create(name + ".b", Shape{out});
        if (!zero_init) init_uniform_fanin(*l.w, in, rng);
        return l;
    }

    // x: [R, in] -> [R, out]
    int forward(GraphT<T>& g, int x) const {
        return g.bias_rows(g.matmul(x, g.param(*w)), g.param(*b));
    }

    // x: [B, M, in] -> [B, M, out]
    int forward_tokens(GraphT<T>& g, int x) const {
        const auto& sh = g.val(x).shape;
        int id = g.reshape(x, Shape{sh[0] * sh[1], sh[2]});
        id = forward(g, id);
        return g.reshape(id, Shape{sh[0], sh[1], g.val(id).dim(1)});
    }
};

template <typename T>
struct GroupNormT {
    ParamT<T>* gamma = nullptr;
    ParamT<T>* beta = nullptr;
    int groups = 1;

    static GroupNormT create(ParamStoreT<T>& s, const std::string& name, int channels, int groups) {
        GroupNormT l;
        l.gamma = &s.create(name + ".g", Shape{channels});
        l.beta = &s.create(name + ".b", Shape{channels});
        std::fill(l.gamma->value.data.begin(), l.gamma->value.data.end(), T(1));
        l.groups = groups;
        return l;
    }

    int forward(GraphT<T>& g, int x) const {
        return g.group_norm(x, g.param(*gamma), g.param(*beta), groups);
    }
};

// softmax(Q K^T / sqrt(dh)) V over one or more heads; queries come from a
// feature map or token sequence, keys/values from the conditioning tokens.
template <typename T>
struct CrossAttentionT {
    LinearT<T> q, k, v, o;
    int heads = 1;
    int dim = 0;

    static CrossAttentionT create(ParamStoreT<T>& s, const std::string& name, int dim, int ctx_dim,
                                  int heads, Rng& rng) {
        if (dim % heads) throw std::invalid_argument("attention: dim % heads != 0");
        CrossAttentionT a;
        a.q = LinearT<T>::create(s, name + ".q", dim, dim, rng);
        a.k = LinearT<T>::create(s, name + ".k", ctx_dim, dim, rng);
        a.v = LinearT<T>::create(s, name + ".v", ctx_dim, dim, rng);
        a.o = LinearT<T>::create(s, name + ".o", dim, dim, rng);
        a.heads = heads;
        a.dim = dim;
        return a;
    }

    // x: [B, M, dim], ctx: [B, Mc, ctx_dim] -> [B, M, dim]
    int forward_tokens(GraphT<T>& g, int x, int ctx) const {
        int b = g.val(x).dim(0), m = g.val(x).dim(1);
        int mc = g.val(ctx).dim(1);
        int dh = dim / heads;
        int qs = split_heads(g, q.forward_tokens(g, x), b, m, dh);
        int ks = split_heads(g, k.forward_tokens(g, ctx), b, mc, dh);
        int vs = split_heads(g, v.forward_tokens(g, ctx), b, mc, dh);
        int scores = g.scale(g.bmm(qs, ks, /*transpose_b=*/true), 1.0 / std::sqrt(double(dh)));
        int attn = g.reshape(g.softmax_rows(g.reshape(scores, Shape{b * heads * m, mc})),
                             Shape{b * heads, m, mc});
        int out = g.bmm(attn, vs);  // [B*h, M, dh]
        out = g.reshape(out, Shape{b, heads, m, dh});
        out = g.permute(out, {0, 2, 1, 3});  // [B, M, h, dh]
        out = g.reshape(out, Shape{b, m, dim});
        return o.forward_tokens(g, out);
    }

private:
    int split_heads(GraphT<T>& g, int t, int b, int m, int dh) const {
        int id = g.reshape(t, Shape{b, m, heads, dh});
        id = g.permute(id, {0, 2, 1, 3});  // [B, h, M, dh]
        return g.reshape(id, Shape{b * heads, m, dh});
    }
};

// ConvLSTM cell: gates from conv(x) + conv(h). Gate order i, f, o, g with
// sigmoid on i/f/o and tanh on g.
template <typename T>
struct ConvLSTMCellT {
    Conv2dT<T> wx;   // in -> 4*hidden, carries the bias
    ParamT<T>* wh = nullptr;  // hidden -> 4*hidden, no bias
    int hidden = 0;

    static ConvLSTMCellT create(ParamStoreT<T>& s, const std::string& name, int in, int hidden,
                                int k, Rng& rng) {
        ConvLSTMCellT c;
        c.wx = Conv2dT<T>::create(s, name + ".wx", in, 4 * hidden, k, 1, k / 2, rng);
        c.wh = &s.create(name + ".wh", Shape{4 * hidden, hidden, k, k});
        init_uniform_fanin(*c.wh, hidden * k * k, rng);
        c.hidden = hidden;
        return c;
    }

    struct State {
        int h = -1, c = -1;
    };

    State step(GraphT<T>& g, int x, State prev) const {
        int gates = wx.forward(g, x);
        if (prev.h >= 0) {
            int hg = g.conv2d(prev.h, g.param(*wh), 1, wh->value.dim(2) / 2);
            gates = g.add(gates, hg);
        }
        int i = g.sigmoid(g.slice_ch(gates, 0, hidden));
        int f = g.sigmoid(g.slice_ch(gates, hidden, 2 * hidden));
        int o = g.sigmoid(g.slice_ch(gates, 2 * hidden, 3 * hidden));
        int gg = g.tanh_op(g.slice_ch(gates, 3 * hidden, 4 * hidden));
        int c_new = g.mul(i, gg);
        if (prev.c >= 0) c_new = g.add(c_new, g.mul(f, prev.c));
        int h_new = g.mul(o, g.tanh_op(c_new));
        return State{h_new, c_new};
    }
};

// Standalone convlstm step on plain tensors, matching the cell above; kept
// for direct kernel-level use and tests.
template <typename T>
struct ConvLstmGateKernels {
    TensorT<T> wx;  // [4H, Cin, k, k]
    TensorT<T> wh;  // [4H, H, k, k]
    TensorT<T> bias;  // [4H]
};

template <typename T>
std::pair<TensorT<T>, TensorT<T>> convlstm_step(const TensorT<T>& x, const TensorT<T>& h_prev,
                                                const TensorT<T>& c_prev,
                                                const ConvLstmGateKernels<T>& kk) {
    GraphT<T> g;
    ParamT<T> pwx("wx", kk.wx), pwh("wh", kk.wh), pb("b", kk.bias);
    pwx.trainable = pwh.trainable = pb.trainable = false;
    int hidden = kk.wx.dim(0) / 4;
    int gates = g.bias_channel(g.conv2d(g.value_node(x), g.param(pwx), 1, kk.wx.dim(2) / 2),
                               g.param(pb));
    gates = g.add(gates, g.conv2d(g.value_node(h_prev), g.param(pwh), 1, kk.wh.dim(2) / 2));
    int i = g.sigmoid(g.slice_ch(gates, 0, hidden));
    int f = g.sigmoid(g.slice_ch(gates, hidden, 2 * hidden));
    int o = g.sigmoid(g.slice_ch(gates, 2 * hidden, 3 * hidden));
    int gg = g.tanh_op(g.slice_ch(gates, 3 * hidden, 4 * hidden));
    int c_new = g.add(g.mul(i, gg), g.mul(f, g.value_node(c_prev)));
    int h_new = g.mul(o, g.tanh_op(c_new));
    return {g.val(h_new), g.val(c_new)};
}

// sinusoidal timestep embedding, one row per batch element
template <typename T>
TensorT<T> sinusoidal_embedding(const std::vector<int>& t, int dim) {
    int half = dim / 2;
    TensorT<T> out(Shape{static_cast<int>(t.size()), dim});
    for (size_t b = 0; b < t.size(); ++b) {
        for (int i = 0; i < half; ++i) {
            double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
            double a = double(t[b]) * freq;
            out.at2(static_cast<int>(b), 2 * i) = static_cast<T>(std::sin(a));
            out.at2(static_cast<int>(b), 2 * i + 1) = static_cast<T>(std::cos(a));
        }
    }
    return out;
}

// ---- finite-difference gradient checking (double precision) ----

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    int checked = 0;
    bool pass(double tol = 1e-4) const { return max_rel_err < tol; }
};

// Central differences against the analytic gradient. `build_loss` must build
// the full forward pass from current parameter values and return the scalar
// loss node. Samples up to `max_elems` entries per parameter.
template <typename BuildLoss>
GradCheckReport gradcheck(ParamStoreT<double>& store, BuildLoss&& build_loss, uint64_t seed,
                          int max_elems = 6, double h = 1e-4) {
    store.zero_grads();
    {
        GraphT<double> g;
        int loss = build_loss(g);
        g.backward(loss);
    }
    GradCheckReport rep;
    Rng pick(mix_seed(seed, 0xfd));
    store.for_each([&](ParamT<double>& p) {
        if (!p.trainable) return;
        int64_t n = p.value.size();
        int count = static_cast<int>(std::min<int64_t>(n, max_elems));
        for (int s = 0; s < count; ++s) {
            int64_t i = (n <= max_elems) ? s : pick.uniform_int(n);
            double orig = p.value[i];
            p.value[i] = orig + h;
            GraphT<double> gp;
            double fp = gp.val(build_loss(gp))[0];
            p.value[i] = orig - h;
            GraphT<double> gm;
            double fm = gm.val(build_loss(gm))[0];
            p.value[i] = orig;
            double fd = (fp - fm) / (2.0 * h);
            double an = p.grad[i];
            double rel = std::abs(fd - an) / std::max({1e-3, std::abs(fd), std::abs(an)});
            ++rep.checked;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = p.name + "[" + std::to_string(i) + "]";
            }
        }
    });
    return rep;
}

}  // namespace mf
