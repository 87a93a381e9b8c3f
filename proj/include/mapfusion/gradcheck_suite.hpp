#pragma once

#include <functional>

#include "mapfusion/nn.hpp"

namespace mf {

struct KernelCheck {
    std::string kernel;
    double max_rel_err = 0.0;
    int checked = 0;
    bool ok = false;
};

namespace detail {

using CheckFn = std::function<GradCheckReport(uint64_t seed)>;

inline TensorT<double> randn_t(Shape s, Rng& rng) {
    TensorT<double> t(std::move(s));
    rng.fill_normal(t);
    return t;
}

inline ParamT<double>& rand_param(ParamStoreT<double>& st, const std::string& name, Shape s,
                                  Rng& rng, double scale = 0.5) {
    auto& p = st.create(name, std::move(s));
    for (auto& v : p.value.data) v = rng.normal() * scale;
    return p;
}

}  // namespace detail

// Finite-difference checks for every differentiable kernel. Each named entry
// builds a small randomized computation with the kernel on the path from
// parameters to a scalar loss. Returns one result per kernel; `seeds` controls
// how many random restarts each kernel gets.
inline std::vector<KernelCheck> run_kernel_gradchecks(int seeds, double tol = 1e-4,
                                                      uint64_t base_seed = 1234) {
    using G = GraphT<double>;
    std::vector<std::pair<std::string, detail::CheckFn>> entries;

    auto simple = [&](const std::string& name,
                      std::function<int(G&, ParamStoreT<double>&, Rng&)> build) {
        entries.emplace_back(name, [build](uint64_t seed) {
            Rng rng(seed);
            ParamStoreT<double> st;
            bool built = false;
            // params must be created once; the loss builder runs many times
            std::shared_ptr<std::function<int(G&)>> loss_fn;
            GradCheckReport rep;
            // first call creates params lazily via closure state
            auto fn = [&, build](G& g) mutable { return build(g, st, rng); };
            // build params deterministically before checking: do a dry pass
            {
                G g;
                fn(g);
                built = true;
            }
            (void)built;
            return gradcheck(st, fn, seed);
        });
    };

    // conv2d stride 1 with padding, plus bias
    simple("conv2d_s1", [](G& g, ParamStoreT<double>& st, Rng& rng) {
        if (!st.has("x")) {
            detail::rand_param(st, "x", {2, 3, 5, 5}, rng);
            detail::rand_param(st, "w", {4, 3, 3, 3}, rng);
            detail::rand_param(st, "b", {4}, rng);
        }
        int y = g.bias_channel(g.conv2d(g.param(st.get("x")), g.param(st.get("w")), 1, 1),
                               g.param(st.get("b")));
        return g.mse(y, g.scale(g.param(st.get("x")), 0.0));
    });

    // conv2d stride 2 (downsampling path)
    simple("conv2d_s2", [](G& g, ParamStoreT<double>& st, Rng& rng) {
        if (!st.has("x")) {
            detail::rand_param(st, "x", {2, 2, 6, 6}, rng);
            detail::rand_param(st, "w", {3, 2, 3, 3}, rng);
        }
        int y = g.conv2d(g.param(st.get("x")), g.param(st.get("w")), 2, 1);
        return g.mean_all(g.mul(y, y));
    });

    simple("silu", [](G& g, ParamStoreT<double>& st, Rng& rng) {
        if (!st.has("x")) detail::rand_param(st, "x", {3, 7}, rng, 1.5);
        int y = g.silu(g.param(st.get("x")));
        return g.mean_all(g.mul(y, y));
    });

    simple("sigmoid", [](G& g, ParamStoreT<double>& st, Rng& rng) {
        if (!st.has("x")) detail::rand_param(st, "x", {3, 7}, rng, 1.5);
        return g.mean_all(g.sigmoid(g.param(st.get("x"))));
    });

    simple("tanh", [](G& g, ParamStoreT<double>& st, Rng& rng) {
        if (!st.has("x")) detail::rand_param(st, "x", {3, 7}, rng, 1.5);
        int y = g.tanh_op(g.param(st.get("x")));
        return g.mean_all(g.mul(y, y));
    });

    simple("group_norm", [](G& g, ParamStoreT<double>& st, Rng& rng) {
        if (!st.has("x")) {
            detail::rand_param(st, "x", {2, 6, 4, 4}, rng);
            detail::rand_param(st, "gamma", {6}, rng);
            detail::rand_param(st, "beta", {6}, rng);
        }
        int y = g.group_norm(g.param(st.get("x")), g.param(st.get("gamma")),
                             g.param(st.get("beta")), 3);
        return g.mean_all(g.mul(y, y));
    });

    simple("softmax", [](G& g, ParamStoreT<double>& st, Rng& rng) {
        if (!st.has("x")) {
            detail::rand_param(st, "x", {5, 6}, rng, 2.0);
            detail::rand_param(st, "t", {5, 6}, rng);
        }
        return g.mse(g.softmax_rows(g.param(st.get("x"))), g.param(st.get("t")));
    });

    simple("matmul", [](G& g, ParamStoreT<double>& st, Rng& rng) {
        if (!st.has("a")) {
            detail::rand_param(st, "a", {4, 5}, rng);
            detail::rand_param(st, "b", {5, 3}, rng);
            detail::rand_param(st, "bias", {3}, rng);
        }
        int y = g.bias_rows(g.matmul(g.param(st.get("a")), g.param(st.get("b"))),
                            g.param(st.get("bias")));
        return g.mean_all(g.mul(y, y));
    });

    simple("bmm", [](G& g, ParamStoreT<double>& st, Rng& rng) {
        if (!st.has("a")) {
            detail::rand_param(st, "a", {2, 3, 4}, rng);
            detail::rand_param(st, "b", {2, 4, 5}, rng);
        }
        int y = g.bmm(g.param(st.get("a")), g.param(st.get("b")));
        return g.mean_all(g.mul(y, y));
    });

    simple("bmm_nt", [](G& g, ParamStoreT<double>& st, Rng& rng) {
        if (!st.has("a")) {
            detail::rand_param(st, "a", {2, 3, 4}, rng);
            detail::rand_param(st, "b", {2, 5, 4}, rng);
        }
        int y = g.bmm(g.param(st.get("a")), g.param(st.get("b")), true);
        return g.mean_all(g.mul(y, y));
    });

    simple("bias_spatial", [](G& g, ParamStoreT<double>& st, Rng& rng) {
        if (!st.has("x")) {
            detail::rand_param(st, "x", {2, 3, 4, 4}, rng);
            detail::rand_param(st, "v", {2, 3}, rng);
        }
        int y = g.bias_spatial(g.param(st.get("x")), g.param(st.get("v")));
        return g.mean_all(g.mul(y, y));
    });

    simple("add_bcast0", [](G& g, ParamStoreT<double>& st, Rng& rng) {
        if (!st.has("x")) {
            detail::rand_param(st, "x", {3, 4, 5}, rng);
            detail::rand_param(st, "p", {4, 5}, rng);
        }
        int y = g.add_bcast0(g.param(st.get("x")), g.param(st.get("p")));
        return g.mean_all(g.mul(y, y));
    });

    simple("mean_tokens", [](G& g, ParamStoreT<double>& st, Rng& rng) {
        if (!st.has("x")) detail::rand_param(st, "x", {2, 6, 4}, rng);
        int y = g.mean_tokens(g.param(st.get("x")));
        return g.mean_all(g.mul(y, y));
    });

    simple("upsample2x", [](G& g, ParamStoreT<double>& st, Rng& rng) {
        if (!st.has("x")) detail::rand_param(st, "x", {2, 2, 3, 3}, rng);
        int y = g.upsample2x(g.param(st.get("x")));
        return g.mean_all(g.mul(y, y));
    });

    simple("avgpool2x", [](G& g, ParamStoreT<double>& st, Rng& rng) {
        if (!st.has("x")) detail::rand_param(st, "x", {2, 2, 4, 4}, rng);
        int y = g.avgpool2x(g.param(st.get("x")));
        return g.mean_all(g.mul(y, y));
    });

    simple("concat_slice", [](G& g, ParamStoreT<double>& st, Rng& rng) {
        if (!st.has("a")) {
            detail::rand_param(st, "a", {2, 2, 3, 3}, rng);
            detail::rand_param(st, "b", {2, 3, 3, 3}, rng);
        }
        int y = g.concat_ch(g.param(st.get("a")), g.param(st.get("b")));
        int z = g.slice_ch(y, 1, 4);
        return g.mean_all(g.mul(z, z));
    });

    simple("permute_reshape", [](G& g, ParamStoreT<double>& st, Rng& rng) {
        if (!st.has("x")) detail::rand_param(st, "x", {2, 3, 4, 5}, rng);
        int y = g.permute(g.param(st.get("x")), {0, 2, 1, 3});
        y = g.reshape(y, Shape{2, 4, 15});
        return g.mean_all(g.mul(y, y));
    });

    simple("mse", [](G& g, ParamStoreT<double>& st, Rng& rng) {
        if (!st.has("a")) {
            detail::rand_param(st, "a", {3, 5}, rng);
            detail::rand_param(st, "b", {3, 5}, rng);
        }
        return g.mse(g.param(st.get("a")), g.param(st.get("b")));
    });

    simple("elementwise_chain", [](G& g, ParamStoreT<double>& st, Rng& rng) {
        if (!st.has("a")) {
            detail::rand_param(st, "a", {4, 4}, rng);
            detail::rand_param(st, "b", {4, 4}, rng);
        }
        int a = g.param(st.get("a")), b = g.param(st.get("b"));
        int y = g.add(g.mul(a, b), g.scale(g.sub(a, b), 0.7));
        int z = g.add_skip_zero(y, g.mul(a, a));
        return g.mean_all(g.mul(z, z));
    });

    simple("convlstm_step", [](G& g, ParamStoreT<double>& st, Rng& rng) {
        if (!st.has("cell.wx.w")) {
            ConvLSTMCellT<double>::create(st, "cell", 2, 3, 3, rng);
            detail::rand_param(st, "x", {2, 2, 4, 4}, rng);
            detail::rand_param(st, "h0", {2, 3, 4, 4}, rng);
            detail::rand_param(st, "c0", {2, 3, 4, 4}, rng);
        }
        auto cell = ConvLSTMCellT<double>{Conv2dT<double>::bind(st, "cell.wx", 1, 1),
                                          &st.get("cell.wh"), 3};
        auto s1 = cell.step(g, g.param(st.get("x")),
                            {g.param(st.get("h0")), g.param(st.get("c0"))});
        auto s2 = cell.step(g, g.param(st.get("x")), s1);
        return g.mean_all(g.mul(s2.h, s2.h));
    });

    simple("cross_attention", [](G& g, ParamStoreT<double>& st, Rng& rng) {
        if (!st.has("attn.q.w")) {
            CrossAttentionT<double>::create(st, "attn", 6, 4, 2, rng);
            detail::rand_param(st, "x", {2, 5, 6}, rng);
            detail::rand_param(st, "ctx", {2, 3, 4}, rng);
        }
        CrossAttentionT<double> a;
        a.q = {&st.get("attn.q.w"), &st.get("attn.q.b")};
        a.k = {&st.get("attn.k.w"), &st.get("attn.k.b")};
        a.v = {&st.get("attn.v.w"), &st.get("attn.v.b")};
        a.o = {&st.get("attn.o.w"), &st.get("attn.o.b")};
        a.heads = 2;
        a.dim = 6;
        int y = a.forward_tokens(g, g.param(st.get("x")), g.param(st.get("ctx")));
        return g.mean_all(g.mul(y, y));
    });

    std::vector<KernelCheck> out;
    for (auto& [name, fn] : entries) {
        KernelCheck kc;
        kc.kernel = name;
        for (int s = 0; s < seeds; ++s) {
            auto rep = fn(mix_seed(base_seed, (uint64_t)out.size() * 1000 + s));
            kc.max_rel_err = std::max(kc.max_rel_err, rep.max_rel_err);
            kc.checked += rep.checked;
        }
        kc.ok = kc.max_rel_err < tol;
        out.push_back(std::move(kc));
    }
    return out;
}

}  // namespace mf
